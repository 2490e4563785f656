//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{brute_force_pit3, conv_oracle, conv_transpose_oracle, random_tensor, random_vec, rng};
use sepnet_core::cost::{count_flops, count_params, Convention};
use sepnet_core::data::{
    encode_wav, make_mixture, parse_wav, snr_db, synth_source, AudioClip, SampleFormat, SourceKind,
};
use sepnet_core::kernels::{conv1d, conv_transpose1d, depthwise_conv1d, ConvSpec};
use sepnet_core::metrics::{pit_loss, si_sdr, SI_SDR_CLAMP_DB};
use sepnet_core::model::{ablation_rows, preset, MaskActivation, Model, ModelConfig};
use sepnet_core::train::gradcheck::{full_suite, KERNEL_TOLERANCE, MODEL_TOLERANCE};
use sepnet_core::train::{decode_checkpoint, encode_checkpoint, resume, train, EpochLog, TrainConfig};
use sepnet_core::Tensor;

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value / target - 1.0).abs() <= rel
}

fn c1_parameters() -> Outcome {
    let count = |n: &str| count_params(&preset(n).unwrap()).unwrap().total_params as f64;
    let (full, half, quarter) = (count("1.0x"), count("0.5x"), count("0.25x"));
    let inc = (full - half) / 8.0;
    let detail = format!("1.0x {full}, 0.5x {half}, 0.25x {quarter}, per block {inc}");
    let ok = within(full, 2.66e6, 0.10) && within(half, 1.42e6, 0.10) && within(quarter, 0.79e6, 0.10) && within(inc, 155e3, 0.05);
    check(ok, detail.clone(), detail)
}

fn c2_flops() -> Outcome {
    let f = |n: &str, t: usize| count_flops(&preset(n).unwrap(), t, Convention::MacsAs1).unwrap().total_flops;
    let inc = (f("1.0x", 8000) - f("0.5x", 8000)) as f64 / 8.0;
    let linear = [2, 3, 4].iter().all(|&m| f("1.0x", 8000 * m) == m as u64 * f("1.0x", 8000))
        && f("0.25x", 16000) == 2 * f("0.25x", 8000);
    let detail = format!("per block {:.4} GFLOPs (target 0.1225 +-25%), linear in T: {linear}", inc / 1e9);
    check(within(inc, 0.1225e9, 0.25) && linear, detail.clone(), detail)
}

fn c3_gradients() -> Outcome {
    let reports = full_suite(0).map_err(|e| e.to_string())?;
    let mut kernel_worst: f64 = 0.0;
    let mut model_worst: f64 = 0.0;
    let mut failed = Vec::new();
    for r in &reports {
        let (tol, worst) = if r.name == "model" {
            (MODEL_TOLERANCE, &mut model_worst)
        } else {
            (KERNEL_TOLERANCE, &mut kernel_worst)
        };
        *worst = worst.max(r.report.worst());
        if r.report.worst() > tol {
            failed.push(r.name.clone());
        }
    }
    let detail = format!("{} checks, kernels worst {kernel_worst:.2e} (<= 1e-6), end-to-end worst {model_worst:.2e} (<= 1e-5)", reports.len());
    check(failed.is_empty(), detail.clone(), format!("{detail}; failed {failed:?}"))
}

fn c4_oracles() -> Outcome {
    let mut r = rng(100);
    let mut worst: f64 = 0.0;
    let mut adjoint: f64 = 0.0;
    let mut cases = 0;
    for k in 1..=16usize {
        for s in 1..=16usize {
            for len in [s, (s + 5).min(16), 16] {
                let (c_in, c_out) = ((k + s) % 16 + 1, (k * s) % 16 + 1);
                let spec = ConvSpec::new(c_in, c_out, k, s);
                let x = random_tensor(&[c_in, len], &mut r);
                let w = random_tensor(&spec.weight_shape(), &mut r);
                let b = random_tensor(&[c_out], &mut r);
                worst = worst.max(conv1d(&x, &spec, &w, Some(&b)).unwrap().max_abs_diff(&conv_oracle(&x, &w, Some(&b), s, 1)));

                let dspec = ConvSpec::depthwise(c_in, k, s);
                let dw = random_tensor(&dspec.weight_shape(), &mut r);
                let db = random_tensor(&[c_in], &mut r);
                worst = worst.max(depthwise_conv1d(&x, &dspec, &dw, Some(&db)).unwrap().max_abs_diff(&conv_oracle(&x, &dw, Some(&db), s, c_in)));

                let tspec = ConvSpec::new(c_out, c_in, k, s);
                let frames = len / s;
                let v = random_tensor(&[c_out, frames], &mut r);
                let tb = random_tensor(&[c_in], &mut r);
                worst = worst.max(conv_transpose1d(&v, &tspec, &w, Some(&tb)).unwrap().max_abs_diff(&conv_transpose_oracle(&v, &w, Some(&tb), s, 1)));

                let xs = random_tensor(&[c_in, frames * s], &mut r);
                let lhs = conv1d(&xs, &spec.without_bias(), &w, None).unwrap().dot(&v);
                let rhs = xs.dot(&conv_transpose1d(&v, &tspec.without_bias(), &w, None).unwrap());
                adjoint = adjoint.max((lhs - rhs).abs() / lhs.abs().max(1.0));
                cases += 1;
            }
        }
    }
    let detail = format!("{cases} shapes, worst kernel error {worst:.2e} (<= 1e-12), worst adjoint gap {adjoint:.2e} (<= 1e-10)");
    check(worst <= 1e-12 && adjoint <= 1e-10, detail.clone(), detail)
}

fn c5_architecture() -> Outcome {
    let mut configs: Vec<(String, ModelConfig)> =
        ["1.0x", "0.5x", "0.25x"].iter().map(|n| (n.to_string(), preset(n).unwrap())).collect();
    configs.extend(ablation_rows().into_iter().enumerate().map(|(i, c)| (format!("ablation-row-{}", i + 1), c)));
    let mut problems = Vec::new();
    let mut r = rng(101);
    let x = random_tensor(&[8000], &mut r);
    for (name, cfg) in &configs {
        let model = Model::new(cfg.clone(), 7).map_err(|e| e.to_string())?;
        let out = model.separate(&x).map_err(|e| e.to_string())?;
        let frames = cfg.encoded_len(8000);
        if cfg.enc_kernel == 21 && frames != 800 {
            problems.push(format!("{name}: L = {frames}"));
        }
        if out.encoded.data().iter().any(|&v| v < 0.0) {
            problems.push(format!("{name}: negative encoder output"));
        }
        if out.sources.shape() != [cfg.num_sources, 8000] {
            problems.push(format!("{name}: decoded shape {:?}", out.sources.shape()));
        }
        if cfg.mask_activation == MaskActivation::Softmax {
            let worst = (0..out.masks[0].len())
                .map(|i| (out.masks.iter().map(|m| m.data()[i]).sum::<f64>() - 1.0).abs())
                .fold(0.0, f64::max);
            if worst > 1e-12 {
                problems.push(format!("{name}: mask sum off by {worst:e}"));
            }
        }
        let y = random_tensor(&[cfg.block_io_channels, cfg.padded_len(frames)], &mut r);
        if model.uconvblock(cfg.num_blocks - 1, &y).map_err(|e| e.to_string())?.shape() != y.shape() {
            problems.push(format!("{name}: block changed shape"));
        }
    }
    let detail = format!("{} configurations: block shapes, encoder >= 0, mask sums, L = 800, T = 8000 restored", configs.len());
    check(problems.is_empty(), detail, problems.join("; "))
}

fn stack(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

fn c6_pit() -> Outcome {
    let mut r = rng(102);
    let mut mismatches = 0;
    for _ in 0..100 {
        let refs: [Vec<f64>; 3] = std::array::from_fn(|_| random_vec(40, &mut r));
        let est: [Vec<f64>; 3] = std::array::from_fn(|_| random_vec(40, &mut r));
        let (best, assignment) = brute_force_pit3(&refs, &est);
        let got = pit_loss(&stack(&refs), &stack(&est)).map_err(|e| e.to_string())?;
        if (got.loss + best).abs() > 1e-12 || got.best_permutation != assignment {
            mismatches += 1;
        }
    }
    let mut swap_ok = true;
    for _ in 0..100 {
        let refs = [random_vec(40, &mut r), random_vec(40, &mut r)];
        let est = [random_vec(40, &mut r), random_vec(40, &mut r)];
        let a = pit_loss(&stack(&refs), &stack(&est)).unwrap().loss;
        let b = pit_loss(&stack(&refs), &stack(&[est[1].clone(), est[0].clone()])).unwrap().loss;
        swap_ok &= a == b;
    }
    let detail = format!("N=3 brute force mismatches {mismatches}/100, N=2 swap exact: {swap_ok}");
    check(mismatches == 0 && swap_ok, detail.clone(), detail)
}

fn c7_si_sdr() -> Outcome {
    let mut r = rng(103);
    let mut scale_gap: f64 = 0.0;
    for _ in 0..200 {
        let s = random_vec(128, &mut r);
        let e = random_vec(128, &mut r);
        let beta = 10f64.powf(r_range(&mut r, -3.0, 3.0));
        let scaled: Vec<f64> = e.iter().map(|v| beta * v).collect();
        scale_gap = scale_gap.max((si_sdr(&s, &e).unwrap() - si_sdr(&s, &scaled).unwrap()).abs());
    }
    let s = random_vec(256, &mut r);
    let raw = random_vec(256, &mut r);
    let proj = common::dot(&raw, &s) / common::energy(&s);
    let n: Vec<f64> = raw.iter().zip(&s).map(|(a, b)| a - proj * b).collect();
    let k = (common::energy(&s) / common::energy(&n)).sqrt();
    let e: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + k * b).collect();
    let orthogonal = si_sdr(&s, &e).unwrap();
    let perfect = si_sdr(&s, &s).unwrap();
    let detail = format!("scale gap {scale_gap:.2e} dB, orthogonal case {orthogonal:.2e} dB, perfect {perfect} dB");
    check(scale_gap <= 1e-9 && orthogonal.abs() <= 1e-9 && perfect == SI_SDR_CLAMP_DB, detail.clone(), detail)
}

fn r_range(r: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng;
    r.random_range(lo..hi)
}

fn c8_overfit() -> Outcome {
    let tc = TrainConfig::overfit_demo();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let full = pool
        .install(|| train(&ModelConfig::tiny(), &tc, None, &mut |_: &EpochLog| Ok(())))
        .map_err(|e| e.to_string())?;
    let single_core = start.elapsed();
    let last = full.log.last().ok_or("empty log")?;
    // replay the first two epochs with the default thread pool
    let again = train(&ModelConfig::tiny(), &TrainConfig { epochs: 2, ..tc }, None, &mut |_: &EpochLog| Ok(()))
        .map_err(|e| e.to_string())?;
    let deterministic = again.log[..] == full.log[..2];
    let detail = format!(
        "validation SI-SDRi {:.2} dB after {} steps (>= 10 dB within 2000), {:.0} s on one core, replay identical: {deterministic}",
        last.val_si_sdri,
        last.steps,
        single_core.as_secs_f64()
    );
    let ok = last.val_si_sdri >= 10.0 && last.steps <= 2000 && deterministic && single_core < Duration::from_secs(600);
    check(ok, detail.clone(), detail)
}

fn c9_data() -> Outcome {
    let mut snr_gap: f64 = 0.0;
    let mut mean_gap: f64 = 0.0;
    let mut std_gap: f64 = 0.0;
    for i in 0..50u64 {
        let snr = -10.0 + 0.4 * i as f64;
        let a = synth_source(SourceKind::ALL[i as usize % 3], i, 0.6, 8000).map_err(|e| e.to_string())?;
        let b = synth_source(SourceKind::ALL[(i as usize + 1) % 3], 500 + i, 0.6, 8000).map_err(|e| e.to_string())?;
        let item = make_mixture(&a, &b, snr, 0.5, i).map_err(|e| e.to_string())?;
        snr_gap = snr_gap.max((snr_db(item.raw_sources.row(0), item.raw_sources.row(1)) - snr).abs());
        mean_gap = mean_gap.max(common::mean(item.mixture.data()).abs());
        std_gap = std_gap.max((common::std(item.mixture.data()) - 1.0).abs());
    }
    let mut r = rng(104);
    let pcm = AudioClip { samples: random_tensor(&[4000], &mut r), rate: 8000 };
    let bytes = encode_wav(&pcm, SampleFormat::Pcm16).map_err(|e| e.to_string())?;
    let back = parse_wav(std::path::Path::new("pcm.wav"), &bytes).map_err(|e| e.to_string())?;
    let lsb = pcm.samples.max_abs_diff(&back.samples) * 32768.0;
    // float files hold 32-bit values; a clip of such values must survive bit for bit
    let float = AudioClip { samples: random_tensor(&[4000], &mut r).map(|v| v as f32 as f64), rate: 8000 };
    let bytes = encode_wav(&float, SampleFormat::Float32).map_err(|e| e.to_string())?;
    let fback = parse_wav(std::path::Path::new("float.wav"), &bytes).map_err(|e| e.to_string())?;
    let bitwise = fback.samples.data().iter().zip(float.samples.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let detail = format!(
        "SNR gap {snr_gap:.1e} dB, mixture mean {mean_gap:.1e}, std gap {std_gap:.1e}, 16-bit error {lsb:.2} LSB, float bitwise: {bitwise}"
    );
    check(snr_gap <= 1e-9 && mean_gap <= 1e-10 && std_gap <= 1e-8 && lsb <= 1.0 && bitwise, detail.clone(), detail)
}

fn c10_persistence() -> Outcome {
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 2,
        mixtures_per_epoch: 4,
        segment_seconds: 0.1,
        validation_items: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let quiet = &mut |_: &EpochLog| Ok(());
    let full = train(&ModelConfig::tiny(), &tc, None, quiet).map_err(|e| e.to_string())?;
    let first = train(&ModelConfig::tiny(), &TrainConfig { epochs: 1, ..tc.clone() }, None, quiet).map_err(|e| e.to_string())?;
    let bytes = encode_checkpoint(&first.last).map_err(|e| e.to_string())?;
    let loaded = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let round_trip = loaded == first.last && encode_checkpoint(&loaded).map_err(|e| e.to_string())? == bytes;
    let rest = resume(loaded, &tc, None, quiet).map_err(|e| e.to_string())?;
    let bits = |logs: &[EpochLog]| logs.iter().flat_map(|e| e.step_losses.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    let replayed = bits(&rest.log);
    let same = replayed == bits(&full.log[1..]) && rest.last == full.last;
    let detail = format!("checkpoint round trip bitwise: {round_trip}, resumed {} steps bitwise identical: {same}", replayed.len());
    check(round_trip && same && replayed.len() >= 3, detail.clone(), detail)
}

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let criteria: [Criterion; 10] = [
        ("parameter reconciliation", c1_parameters, Duration::from_secs(1)),
        ("FLOP reconciliation", c2_flops, Duration::from_secs(1)),
        ("gradient suite", c3_gradients, Duration::from_secs(120)),
        ("oracle equivalence", c4_oracles, Duration::from_secs(60)),
        ("architectural invariants", c5_architecture, Duration::from_secs(60)),
        ("PIT correctness", c6_pit, Duration::from_secs(30)),
        ("SI-SDR properties", c7_si_sdr, Duration::from_secs(10)),
        ("overfit experiment", c8_overfit, Duration::from_secs(600)),
        ("data pipeline", c9_data, Duration::from_secs(60)),
        ("persistence and determinism", c10_persistence, Duration::from_secs(60)),
    ];
    let mut failures = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let over = elapsed > *budget;
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failures += 1;
        }
        println!("[{status}] {:>2} {name}: {detail} ({:.2} s)", i + 1, elapsed.as_secs_f64());
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
