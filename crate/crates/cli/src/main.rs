//! `sepnet`: profile, train, separate, evaluate, gradcheck and bench.
//!
//! Exit codes: 0 success, 1 internal or assertion failure, 2 usage or
//! input error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use sepnet_core::autodiff::LrSchedule;
use sepnet_core::cost::{bench, count_flops, estimate_memory, Convention, MemoryMode};
use sepnet_core::data::{read_wav, resample_linear, write_wav, AudioClip, Corpus, SampleFormat};
use sepnet_core::model::{preset, ModelConfig, PRESET_NAMES};
use sepnet_core::train::gradcheck::{full_suite, kernel_suite, NamedReport};
use sepnet_core::train::{evaluate, load_checkpoint, resume, save_checkpoint, train, EpochLog, TrainConfig};
use sepnet_core::{Error, Tensor};

const MODEL_RATE: u32 = 8000;

#[derive(Parser)]
#[command(name = "sepnet", version, about = "Time-domain audio source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, FLOP and memory report for a configuration.
    Profile(ProfileArgs),
    /// Train on synthetic mixtures or a WAV corpus.
    Train(TrainArgs),
    /// Split a mixture WAV into one WAV per source.
    Separate(SeparateArgs),
    /// PIT-aligned SI-SDRi over an evaluation stream.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Wall-clock timing of forward (and backward) passes.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ModelSource {
    /// Named configuration.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON file with ModelConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    fn resolve(&self, default: &str) -> Result<ModelConfig, Failure> {
        let cfg = match (&self.preset, &self.config) {
            (_, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
                serde_json::from_str::<ModelConfig>(&text)
                    .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
            }
            (Some(name), None) => preset(name).map_err(|_| {
                Failure::usage(format!("unknown preset {name:?}; valid presets: {}", PRESET_NAMES.join(", ")))
            })?,
            (None, None) => preset(default)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Input length in samples.
    #[arg(long, default_value_t = 8000)]
    samples: usize,
    /// macs_as_1 or macs_as_2.
    #[arg(long, default_value = "macs_as_2")]
    convention: Convention,
    /// inference or training.
    #[arg(long, default_value = "inference")]
    memory_mode: MemoryMode,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Overfit the tiny model on 8 fixed mixtures for 2000 steps.
    #[arg(long)]
    overfit_demo: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    mixtures_per_epoch: Option<usize>,
    #[arg(long)]
    segment_seconds: Option<f64>,
    #[arg(long)]
    validation_items: Option<usize>,
    /// Manifest of WAV files (path, optional tab and label per line).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Final checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint with the best validation score.
    #[arg(long)]
    best_out: Option<PathBuf>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 32)]
    items: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    segment_seconds: f64,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also check the whole tiny network end to end.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, default_value_t = 8000)]
    samples: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Time forward plus backward as well.
    #[arg(long)]
    backward: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Format(_) | Error::Io(_) | Error::Json(_) | Error::Unsupported(_) => 2,
            Error::InvalidState(_) | Error::NonFinite(_) | Error::Internal(_) => 1,
        };
        Self { code, message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Profile(a) => profile(a),
        Command::Train(a) => cmd_train(a),
        Command::Separate(a) => separate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.code == 0 => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn write_stdout(text: &str) -> io::Result<()> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()
}

/// Writes to stdout. A closed pipe ends the command quietly with success.
fn say(text: &str) -> Result<(), Failure> {
    match write_stdout(text) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Err(Failure { code: 0, message: String::new() }),
        Err(e) => Err(Failure::internal(format!("stdout: {e}"))),
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Failure::usage(format!("{}: {e}", p.display()))),
        None => say(text),
    }
}

fn profile(a: ProfileArgs) -> Result<(), Failure> {
    let cfg = a.model.resolve("1.0x")?;
    let flops = count_flops(&cfg, a.samples, a.convention)?;
    let mut report = estimate_memory(&cfg, a.samples, a.batch, a.memory_mode)?;
    report.convention = flops.convention;
    report.layers = flops.layers;
    report.total_flops = flops.total_flops;
    let text = if a.json { report.to_json()? + "\n" } else { report.to_text() };
    emit(&text, a.out.as_deref())
}

fn load_corpus(path: &Option<PathBuf>) -> Result<Option<Arc<Corpus>>, Failure> {
    Ok(match path {
        Some(p) => Some(Arc::new(Corpus::load(p, MODEL_RATE)?)),
        None => None,
    })
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let mut tc = if a.overfit_demo { TrainConfig::overfit_demo() } else { TrainConfig::default() };
    tc.seed = a.seed;
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.batch {
        tc.batch_size = v;
    }
    if let Some(v) = a.lr {
        tc.lr = LrSchedule { initial: v, ..tc.lr };
    }
    if let Some(v) = a.mixtures_per_epoch {
        tc.mixtures_per_epoch = v;
    }
    if let Some(v) = a.segment_seconds {
        tc.segment_seconds = v;
    }
    if let Some(v) = a.validation_items {
        tc.validation_items = v;
    }
    tc.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let mut on_epoch = |e: &EpochLog| -> sepnet_core::Result<()> {
        let line = serde_json::json!({
            "epoch": e.epoch,
            "steps": e.steps,
            "lr": e.lr,
            "train_loss": e.train_loss,
            "val_si_sdri": e.val_si_sdri,
            "cumulative_flops": e.cumulative_flops,
        });
        // the checkpoint is still worth writing if nobody reads the log
        let _ = write_stdout(&format!("{line}\n"));
        Ok(())
    };
    let outcome = match &a.resume {
        Some(path) => {
            if a.model.preset.is_some() || a.model.config.is_some() {
                return Err(Failure::usage("--resume takes the model config from the checkpoint"));
            }
            resume(load_checkpoint(path)?, &tc, corpus, &mut on_epoch)?
        }
        None => {
            let cfg = a.model.resolve("tiny")?;
            train(&cfg, &tc, corpus, &mut on_epoch)?
        }
    };
    if let Some(p) = &a.out {
        save_checkpoint(p, &outcome.last)?;
    }
    if let (Some(p), Some((ck, _))) = (&a.best_out, &outcome.best) {
        save_checkpoint(p, ck)?;
    }
    let last = outcome.log.last();
    let summary = serde_json::json!({
        "done": true,
        "epochs": outcome.last.epoch,
        "steps": outcome.last.optimizer.step,
        "final_si_sdri": last.map(|e| e.val_si_sdri),
        "best_si_sdri": outcome.best.as_ref().map(|(_, v)| *v),
    });
    say(&format!("{summary}\n"))
}

fn separate(a: SeparateArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.checkpoint)?.model()?;
    let clip = read_wav(&a.input)?;
    let input = resample_linear(&clip, MODEL_RATE)?;
    let x = input.samples.data();
    if x.is_empty() {
        return Err(Failure::usage(format!("{}: no samples", a.input.display())));
    }
    // same normalization as training, undone on the way out
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 0.0 { std } else { 1.0 };
    let normalized = Tensor::from_vec(&[x.len()], x.iter().map(|v| (v - mean) / scale).collect())?;
    let sources = model.separate(&normalized)?.sources;
    fs::create_dir_all(&a.outdir).map_err(|e| Failure::usage(format!("{}: {e}", a.outdir.display())))?;
    let count = sources.dim(0);
    for i in 0..count {
        let est: Vec<f64> = sources.row(i).iter().map(|v| v * scale + mean / count as f64).collect();
        let at_model_rate = AudioClip { samples: Tensor::from_vec(&[est.len()], est)?, rate: MODEL_RATE };
        let mut out = resample_linear(&at_model_rate, clip.rate)?.samples.into_data();
        let last = out.last().copied().unwrap_or(0.0);
        out.resize(clip.samples.len(), last);
        let path = a.outdir.join(format!("src{}.wav", i + 1));
        let out = AudioClip { samples: Tensor::from_vec(&[out.len()], out)?, rate: clip.rate };
        write_wav(&path, &out, SampleFormat::Float32)?;
        say(&format!("{}\n", path.display()))?;
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.checkpoint)?.model()?;
    let tc = TrainConfig {
        seed: a.seed,
        validation_items: a.items,
        segment_seconds: a.segment_seconds,
        ..TrainConfig::default()
    };
    let mut spec = tc.validation_stream(load_corpus(&a.corpus)?);
    spec.split = sepnet_core::data::Split::Test;
    let report = evaluate(&model, &spec, 0)?;
    if a.json {
        say(&(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))
    } else {
        say(&report.to_text())
    }
}

fn print_reports(reports: &[NamedReport], json: bool) -> Result<bool, Failure> {
    let passed = reports.iter().all(|r| r.report.passed());
    if json {
        say(&(serde_json::to_string_pretty(reports).map_err(Error::from)? + "\n"))?;
    } else {
        for r in reports {
            let status = if r.report.passed() { "ok" } else { "FAIL" };
            say(&format!("{:<34} worst {:.3e} tol {:.0e} {status}\n", r.name, r.report.worst(), r.report.tolerance))?;
        }
    }
    Ok(passed)
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let reports = if a.tiny { full_suite(a.seed)? } else { kernel_suite(a.seed)? };
    if print_reports(&reports, a.json)? {
        Ok(())
    } else {
        Err(Failure::internal("gradient check exceeded tolerance"))
    }
}

fn cmd_bench(a: BenchArgs) -> Result<(), Failure> {
    let cfg = a.model.resolve("1.0x")?;
    let model = sepnet_core::model::Model::new(cfg, a.seed)?;
    let report = bench(&model, a.samples, a.repetitions, a.backward)?;
    if a.json {
        say(&(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))
    } else {
        let mut text = format!("samples {} repetitions {}\n", report.input_samples, report.repetitions);
        let t = &report.forward;
        text += &format!("forward median {:.6}s min {:.6}s max {:.6}s\n", t.median, t.min, t.max);
        if let Some(t) = &report.forward_backward {
            text += &format!("forward_backward median {:.6}s min {:.6}s max {:.6}s\n", t.median, t.min, t.max);
        }
        say(&text)
    }
}
