//! Deterministic synthetic sources and linear-interpolation resampling.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::AudioClip;
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Family of synthetic source signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    /// Sum of three sinusoids.
    ToneBank,
    /// White noise through a one-pole low-pass filter.
    FilteredNoise,
    /// Linear frequency sweep.
    Chirp,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::ToneBank, SourceKind::FilteredNoise, SourceKind::Chirp];

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::ToneBank => "tone-bank",
            SourceKind::FilteredNoise => "filtered-noise",
            SourceKind::Chirp => "chirp",
        }
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SourceKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown source kind {s:?}; expected tone-bank, filtered-noise or chirp")))
    }
}

/// Lowest frequency any synthetic component uses, in Hz.
const MIN_FREQ: f64 = 80.0;
/// Minimum spacing between tone-bank partials, in Hz.
const MIN_SPACING: f64 = 60.0;

/// One tone-bank partial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Partial {
    pub freq: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// The three partials a tone-bank clip with this seed and rate contains.
/// Frequencies lie in `[80 Hz, rate / 4]` and are at least 60 Hz apart;
/// amplitudes sum to 0.9.
pub fn tone_bank_partials(seed: u64, rate: u32) -> [Partial; 3] {
    let mut r = rng::stream(seed, &[rng::label("tone-bank")]);
    let hi = (rate as f64 / 4.0).max(MIN_FREQ + 4.0 * MIN_SPACING);
    let mut freqs: Vec<f64> = Vec::with_capacity(3);
    while freqs.len() < 3 {
        let f = r.random_range(MIN_FREQ..hi);
        if freqs.iter().all(|g| (f - g).abs() >= MIN_SPACING) {
            freqs.push(f);
        }
    }
    let amps: Vec<f64> = (0..3).map(|_| r.random_range(0.3..1.0)).collect();
    let total: f64 = amps.iter().sum();
    let mut out = [Partial { freq: 0.0, amplitude: 0.0, phase: 0.0 }; 3];
    for (i, p) in out.iter_mut().enumerate() {
        *p = Partial { freq: freqs[i], amplitude: 0.9 * amps[i] / total, phase: r.random_range(0.0..TAU) };
    }
    out
}

/// Generates `seconds` of a synthetic source at `rate`. Every sample lies
/// in `[-1, 1]`.
pub fn synth_source(kind: SourceKind, seed: u64, seconds: f64, rate: u32) -> Result<AudioClip> {
    if rate == 0 || !(seconds > 0.0) || !seconds.is_finite() {
        return Err(invalid(format!("need a positive rate and duration, got {rate} Hz and {seconds} s")));
    }
    let n = (seconds * rate as f64).round() as usize;
    let fs = rate as f64;
    let samples = match kind {
        SourceKind::ToneBank => {
            let partials = tone_bank_partials(seed, rate);
            Tensor::from_fn(&[n], |i| {
                let t = i as f64 / fs;
                partials.iter().map(|p| p.amplitude * (TAU * p.freq * t + p.phase).sin()).sum()
            })
        }
        SourceKind::FilteredNoise => {
            let mut r = rng::stream(seed, &[rng::label("filtered-noise")]);
            let pole: f64 = r.random_range(0.6..0.95);
            let mut state = 0.0;
            let mut out = Tensor::from_fn(&[n], |_| {
                state = (1.0 - pole) * r.random_range(-1.0..=1.0) + pole * state;
                state
            });
            // stretch into a usable level while staying inside [-1, 1]
            let peak = out.max_abs();
            if peak > 0.0 {
                out.scale_in_place(0.9 / peak);
            }
            out
        }
        SourceKind::Chirp => {
            let mut r = rng::stream(seed, &[rng::label("chirp")]);
            let top = fs / 4.0;
            let f0 = r.random_range(MIN_FREQ..top);
            let f1 = r.random_range(MIN_FREQ..top);
            let phase = r.random_range(0.0..TAU);
            let sweep = (f1 - f0) / seconds;
            Tensor::from_fn(&[n], |i| {
                let t = i as f64 / fs;
                0.8 * (TAU * (f0 * t + 0.5 * sweep * t * t) + phase).sin()
            })
        }
    };
    Ok(AudioClip { samples, rate })
}

/// Linear-interpolation resampling to `target_rate`; the output has
/// `floor(T * target / source)` samples.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 || clip.rate == 0 {
        return Err(invalid("sample rates must be positive"));
    }
    if target_rate == clip.rate {
        return Ok(clip.clone());
    }
    let src = clip.samples.data();
    let n_in = src.len();
    let n_out = (n_in as u64 * target_rate as u64 / clip.rate as u64) as usize;
    let samples = Tensor::from_fn(&[n_out], |i| {
        let num = i as u64 * clip.rate as u64;
        let j = (num / target_rate as u64) as usize;
        let frac = (num % target_rate as u64) as f64 / target_rate as f64;
        if j + 1 >= n_in {
            src[n_in - 1]
        } else {
            src[j] + frac * (src[j + 1] - src[j])
        }
    });
    Ok(AudioClip { samples, rate: target_rate })
}
