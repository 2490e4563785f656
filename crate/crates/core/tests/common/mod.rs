//! Independent reference implementations shared by the integration tests.
//! Everything here is written as plainly as possible and never calls the
//! kernels it is used to check.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sepnet_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

pub fn random_vec(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn at3(t: &Tensor, a: usize, b: usize, c: usize) -> f64 {
    let s = t.shape();
    t.data()[(a * s[1] + b) * s[2] + c]
}

fn at2(t: &Tensor, a: usize, b: usize) -> f64 {
    t.data()[a * t.shape()[1] + b]
}

/// Direct-sum strided convolution with zero padding `(K-1)/2` left and
/// `K/2` right. `w` is `[C_out, C_in/G, K]`.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, groups: usize) -> Tensor {
    let (c_in, len) = (x.shape()[0], x.shape()[1]);
    let (c_out, per_group_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let per_group_out = c_out / groups;
    let pad_left = (k - 1) as isize / 2;
    let l_out = len / stride;
    assert_eq!(per_group_in * groups, c_in);
    let mut y = vec![0.0; c_out * l_out];
    for co in 0..c_out {
        let g = co / per_group_out;
        for l in 0..l_out {
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for j in 0..per_group_in {
                let ci = g * per_group_in + j;
                for kk in 0..k {
                    let pos = (stride * l) as isize + kk as isize - pad_left;
                    if pos >= 0 && (pos as usize) < len {
                        acc += at3(w, co, j, kk) * at2(x, ci, pos as usize);
                    }
                }
            }
            y[co * l_out + l] = acc;
        }
    }
    Tensor::from_vec(&[c_out, l_out], y).unwrap()
}

/// Transposed convolution written as a gather: output sample `t` collects
/// every `(l, k)` with `S*l + k - pad_left == t`. `w` is `[C_in, C_out/G, K]`.
pub fn conv_transpose_oracle(v: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, groups: usize) -> Tensor {
    let (c_in, len) = (v.shape()[0], v.shape()[1]);
    let (per_group_out, k) = (w.shape()[1], w.shape()[2]);
    let c_out = per_group_out * groups;
    let per_group_in = c_in / groups;
    let pad_left = (k - 1) / 2;
    let t_out = len * stride;
    let mut y = vec![0.0; c_out * t_out];
    for co in 0..c_out {
        let g = co / per_group_out;
        let m = co % per_group_out;
        for t in 0..t_out {
            let mut acc = b.map_or(0.0, |b| b.data()[co]);
            for ci in g * per_group_in..(g + 1) * per_group_in {
                for l in 0..len {
                    for kk in 0..k {
                        if stride * l + kk == t + pad_left {
                            acc += at2(v, ci, l) * at3(w, ci, m, kk);
                        }
                    }
                }
            }
            y[co * t_out + t] = acc;
        }
    }
    Tensor::from_vec(&[c_out, t_out], y).unwrap()
}

/// SI-SDR straight from the definition, clamped to [-60, 60] dB with the
/// residual floored at 1e-6 of the target energy.
pub fn si_sdr_oracle(s: &[f64], e: &[f64]) -> f64 {
    let dot: f64 = s.iter().zip(e).map(|(a, b)| a * b).sum();
    let ss: f64 = s.iter().map(|a| a * a).sum();
    let alpha = dot / ss;
    let target: f64 = s.iter().map(|a| (alpha * a).powi(2)).sum();
    let noise: f64 = s.iter().zip(e).map(|(a, b)| (alpha * a - b).powi(2)).sum();
    if target == 0.0 {
        return -60.0;
    }
    let v = 10.0 * (target / noise.max(1e-6 * target)).log10();
    v.clamp(-60.0, 60.0)
}

/// Exhaustive search over the six assignments of three estimates; returns
/// the best mean SI-SDR and its assignment (first found on ties, in
/// lexicographic order).
pub fn brute_force_pit3(refs: &[Vec<f64>; 3], est: &[Vec<f64>; 3]) -> (f64, [usize; 3]) {
    let mut best = (f64::NEG_INFINITY, [0, 0, 0]);
    for a in 0..3 {
        for b in 0..3 {
            for c in 0..3 {
                if a == b || b == c || a == c {
                    continue;
                }
                let mean = (si_sdr_oracle(&refs[0], &est[a]) + si_sdr_oracle(&refs[1], &est[b]) + si_sdr_oracle(&refs[2], &est[c])) / 3.0;
                if mean > best.0 {
                    best = (mean, [a, b, c]);
                }
            }
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

pub fn std(a: &[f64]) -> f64 {
    let m = mean(a);
    (a.iter().map(|v| (v - m).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn energy(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Magnitude spectrum of the first `n` samples (bins `0..=n/2`).
pub fn magnitude_spectrum(x: &[f64], n: usize) -> Vec<f64> {
    use rustfft::num_complex::Complex;
    let mut buf: Vec<Complex<f64>> = (0..n).map(|i| Complex::new(x.get(i).copied().unwrap_or(0.0), 0.0)).collect();
    rustfft::FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}
