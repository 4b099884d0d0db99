//! Command-line entry point: dataset generation, training, inference,
//! evaluation, and schedule inspection.
//!
//! Settings resolve in three layers — built-in defaults, then a JSON
//! config file, then command-line flags — and the fully resolved
//! configuration is echoed into every artifact a run writes.  Exit codes:
//! 0 success, 1 usage or configuration error, 2 data or model error,
//! 3 internal invariant violation.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{self, GeneratorConfig, Sample};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics;
use crate::real::Real;
use crate::rng::derive_seed;
use crate::sampler::{DespeckleParams, InferMode, InferenceConfig, Sampler};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::trainer::{self, AugmentFlags, TrainConfig, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "diffseg",
    version,
    about = "Diffusion-based lesion segmentation: generate data, train, infer, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic lesion dataset directory
    GenData(GenDataArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Segment inputs with a trained model
    Infer(InferArgs),
    /// Score a trained model against a labelled dataset
    Eval(EvalArgs),
    /// Print the noise-schedule table for a step count
    InspectSchedule(InspectArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of samples
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Edge length of the square images
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Lesion contrast in (0, 1]; lower is harder
    #[arg(long, default_value_t = 0.3)]
    contrast: f64,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Also export the first K samples as PGM previews
    #[arg(long, default_value_t = 0)]
    preview: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the run record
    #[arg(long)]
    out: PathBuf,
    /// Total optimization iterations [default: 2000]
    #[arg(long)]
    iters: Option<usize>,
    /// Samples per optimization step [default: 4]
    #[arg(long)]
    batch: Option<usize>,
    /// Training seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion step count T [default: 100]
    #[arg(long = "t-steps")]
    t_steps: Option<usize>,
    /// JSON config file for the remaining knobs (flags win on overlap)
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Shared inference knobs; unset values fall back to defaults derived
/// from the model's step count.
#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    /// Reverse-chain start timestep [default: half the model's steps]
    #[arg(long)]
    ti: Option<usize>,
    /// Fresh-noise damping of the label chain, in [0, 1) [default: 0.5]
    #[arg(long)]
    di: Option<f64>,
    /// Salience exponent, > 1 [default: 2]
    #[arg(long)]
    nu: Option<f64>,
    /// Repeat count for the stochastic estimators [default: 100 window / 50 chain]
    #[arg(long)]
    n: Option<usize>,
    /// Mask threshold in (0, 1) [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Inference seed; each input derives its own stream from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Trained checkpoint file
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory or single sample file
    #[arg(long)]
    input: PathBuf,
    /// Label estimator: avg | sal | infer | all
    #[arg(long, default_value = "all")]
    mode: String,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Output directory for masks and the run record
    #[arg(long)]
    out: PathBuf,
    /// Concurrent inputs
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trained checkpoint file
    #[arg(long)]
    model: PathBuf,
    /// Labelled dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Label estimator: avg | sal | infer | all
    #[arg(long, default_value = "all")]
    mode: String,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Where to write the JSON report
    #[arg(long = "out-report")]
    out_report: PathBuf,
    /// Concurrent cases
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Diffusion step count T
    #[arg(long = "t-steps", default_value_t = 100)]
    t_steps: usize,
}

/// Optional keys a training config file may set; flags override the
/// overlapping ones.  Unknown keys are rejected.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainFileConfig {
    t_steps: Option<usize>,
    iters: Option<usize>,
    batch: Option<usize>,
    seed: Option<u64>,
    lr_init: Option<f64>,
    lr_min: Option<f64>,
    checkpoint_every: Option<usize>,
    base_channels: Option<usize>,
    depth: Option<usize>,
    time_embed_dim: Option<usize>,
    attention_at: Option<Vec<usize>>,
    augment: Option<AugmentFlags>,
    dtype: Option<String>,
}

/// Fully resolved training run, echoed into the run record and every
/// checkpoint.
#[derive(Debug, Clone, Serialize)]
struct ResolvedTrain {
    dtype: String,
    schedule: ScheduleSpec,
    denoiser: DenoiserConfig,
    train: TrainConfig,
    weights: LossWeights,
}

fn read_train_file(path: &Path) -> Result<TrainFileConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("config file {}: {e}", path.display())))
}

fn resolve_train(
    args: &TrainArgs,
    file: &TrainFileConfig,
    input_size: (usize, usize),
) -> Result<ResolvedTrain> {
    let t_steps = args.t_steps.or(file.t_steps).unwrap_or(100);
    let schedule = ScheduleSpec::with_steps(t_steps);
    let base = TrainConfig::default();
    let train = TrainConfig {
        i_max: args.iters.or(file.iters).unwrap_or(base.i_max),
        batch_size: args.batch.or(file.batch).unwrap_or(base.batch_size),
        lr_init: file.lr_init.unwrap_or(base.lr_init),
        lr_min: file.lr_min.unwrap_or(base.lr_min),
        seed: args.seed.or(file.seed).unwrap_or(base.seed),
        augment: file.augment.unwrap_or(base.augment),
        checkpoint_every: file.checkpoint_every.unwrap_or(base.checkpoint_every),
    };
    let shape = DenoiserConfig::default();
    let depth = file.depth.unwrap_or(shape.depth);
    let denoiser = DenoiserConfig {
        input_size,
        base_channels: file.base_channels.unwrap_or(shape.base_channels),
        depth,
        time_embed_dim: file.time_embed_dim.unwrap_or(shape.time_embed_dim),
        attention_at: file
            .attention_at
            .as_ref()
            .map(|levels| levels.iter().copied().collect())
            .unwrap_or_else(|| BTreeSet::from([depth])),
    };
    let dtype = file.dtype.clone().unwrap_or_else(|| "f32".to_string());
    if dtype != "f32" && dtype != "f64" {
        return Err(Error::InvalidConfig(format!(
            "dtype must be f32 or f64, got {dtype:?}"
        )));
    }
    let weights = LossWeights::defaults_for(t_steps);
    schedule.validate()?;
    denoiser.validate()?;
    train.validate()?;
    weights.validate(t_steps)?;
    Ok(ResolvedTrain {
        dtype,
        schedule,
        denoiser,
        train,
        weights,
    })
}

fn resolve_inference(args: &SamplingArgs, t_steps: usize) -> Result<InferenceConfig> {
    let mut cfg = InferenceConfig::defaults_for(t_steps);
    if let Some(v) = args.ti {
        cfg.t_start = v;
    }
    if let Some(v) = args.di {
        cfg.damping = v;
    }
    if let Some(v) = args.nu {
        cfg.nu = v;
    }
    if let Some(v) = args.n {
        cfg.n_salient = v;
        cfg.n_infer = v;
    }
    if let Some(v) = args.tau {
        cfg.threshold = v;
    }
    cfg.seed = args.seed;
    cfg.validate(t_steps)?;
    Ok(cfg)
}

/// Noise-schedule table: one row per timestep.
fn schedule_table(sched: &NoiseSchedule) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:>5} {:>13} {:>13} {:>13} {:>13} {:>13} {:>13}\n",
        "t", "beta", "alpha", "alpha_bar", "gamma", "tilde_beta", "snr"
    ));
    for t in 1..=sched.t_steps() {
        out.push_str(&format!(
            "{:>5} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e}\n",
            t,
            sched.beta(t),
            sched.alpha(t),
            sched.alpha_bar(t),
            sched.gamma(t),
            sched.tilde_beta(t),
            sched.snr(t).expect("snr defined for t >= 1"),
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn mask_to_plane(mask: &Array2<bool>) -> Array2<f64> {
    mask.map(|&m| if m { 1.0 } else { 0.0 })
}

/// Run `f` over `0..n`, capped at `workers` threads, preserving order.
fn run_indexed<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers == 0 {
        return Err(Error::InvalidConfig("workers must be at least 1".into()));
    }
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("no poisoned slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("no poisoned slot")
                .expect("every slot filled")
        })
        .collect()
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = GeneratorConfig {
        n: args.n,
        height: args.size,
        width: args.size,
        contrast: args.contrast,
        seed: args.seed,
        ..GeneratorConfig::default()
    };
    let samples = data::generate_synthetic(&cfg)?;
    data::save_dataset(&args.out, &samples, Some(&cfg))?;
    for sample in samples.iter().take(args.preview) {
        let dir = args.out.join("preview");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let to_unit = |v: f32| f64::from(v).mul_add(0.5, 0.5);
        data::write_pgm(
            &dir.join(format!("{}-image.pgm", sample.id)),
            &sample.image.map(|&v| to_unit(v)),
        )?;
        data::write_pgm(
            &dir.join(format!("{}-label.pgm", sample.id)),
            &sample.label.map(|&v| to_unit(v)),
        )?;
    }
    println!(
        "wrote {} samples of {}x{} to {}",
        samples.len(),
        args.size,
        args.size,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => read_train_file(path)?,
        None => TrainFileConfig::default(),
    };
    let (samples, manifest) = data::load_dataset(&args.data)?;
    let resolved = resolve_train(args, &file, (manifest.height, manifest.width))?;
    match resolved.dtype.as_str() {
        "f32" => train_typed::<f32>(args, &resolved, &samples),
        _ => train_typed::<f64>(args, &resolved, &samples),
    }
}

fn train_typed<F: Real>(args: &TrainArgs, resolved: &ResolvedTrain, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let record = json!({
        "tool_version": crate::TOOL_VERSION,
        "data": args.data.display().to_string(),
        "samples": samples.len(),
        "resolved": resolved,
    });
    write_text(
        &args.out.join("train.json"),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&record).map_err(|e| Error::json("train record", e))?
        ),
    )?;

    let denoiser = Denoiser::new(resolved.denoiser.clone())?;
    let sched = NoiseSchedule::build_sigmoid(resolved.schedule)?;
    let trainer = Trainer::new(denoiser, sched, resolved.weights.clone(), resolved.train.clone())?;
    let mut state = trainer.init_state::<F>();
    let every = resolved.train.checkpoint_every;
    for step in 0..resolved.train.i_max {
        let report = trainer.train_step(&mut state, samples)?;
        println!("{}", report.log_line(step));
        if every > 0 && state.iteration % every as u64 == 0 {
            let path = args.out.join(format!("checkpoint-{:07}.ckpt", state.iteration));
            trainer::save_checkpoint(&path, &trainer, &state)?;
        }
    }
    let model_path = args.out.join("model.ckpt");
    trainer::save_checkpoint(&model_path, &trainer, &state)?;
    println!(
        "trained {} iterations; model at {}",
        state.iteration,
        model_path.display()
    );
    Ok(())
}

fn load_inputs(path: &Path) -> Result<Vec<Sample>> {
    if path.is_dir() {
        Ok(data::load_dataset(path)?.0)
    } else {
        Ok(vec![data::load_sample_file(path)?])
    }
}

fn cmd_infer(args: &InferArgs) -> Result<()> {
    match trainer::checkpoint_dtype(&args.model)?.as_str() {
        "f32" => infer_typed::<f32>(args),
        "f64" => infer_typed::<f64>(args),
        other => Err(Error::CheckpointCorrupt(format!(
            "{}: unsupported dtype {other:?}",
            args.model.display()
        ))),
    }
}

fn infer_typed<F: Real>(args: &InferArgs) -> Result<()> {
    let loaded = trainer::load_checkpoint::<F>(&args.model)?;
    let sampler = Sampler::new(&loaded.denoiser, &loaded.state.params.data, &loaded.schedule)?;
    let mode: InferMode = args.mode.parse()?;
    let cfg = resolve_inference(&args.sampling, loaded.schedule.t_steps())?;
    let despeckle = DespeckleParams::default();
    let samples = load_inputs(&args.input)?;
    for sample in &samples {
        sample.validate()?;
    }
    let masks = run_indexed(args.workers, samples.len(), |i| {
        let sample = &samples[i];
        let mut case_cfg = cfg.clone();
        case_cfg.seed = derive_seed(cfg.seed, &sample.id);
        let x0 = sample.image_as::<F>();
        let (_prob, mask) = sampler.infer_mode(mode, &x0, &case_cfg, Some(&despeckle))?;
        Ok(mask)
    })?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.display().to_string(), e))?;
    let mut inputs = Vec::with_capacity(samples.len());
    for (sample, mask) in samples.iter().zip(&masks) {
        let file = format!("{}.pgm", sample.id);
        data::write_pgm(&args.out.join(&file), &mask_to_plane(mask))?;
        inputs.push(json!({
            "id": sample.id,
            "mask": file,
            "seed": derive_seed(cfg.seed, &sample.id),
            "positive_pixels": mask.iter().filter(|&&m| m).count(),
        }));
    }
    let record = json!({
        "tool_version": crate::TOOL_VERSION,
        "model": args.model.display().to_string(),
        "mode": mode,
        "inference": cfg,
        "despeckle": despeckle,
        "workers": args.workers,
        "inputs": inputs,
    });
    write_text(
        &args.out.join("inference.json"),
        &format!(
            "{}\n",
            serde_json::to_string_pretty(&record).map_err(|e| Error::json("inference record", e))?
        ),
    )?;
    println!("wrote {} masks to {}", samples.len(), args.out.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    match trainer::checkpoint_dtype(&args.model)?.as_str() {
        "f32" => eval_typed::<f32>(args),
        "f64" => eval_typed::<f64>(args),
        other => Err(Error::CheckpointCorrupt(format!(
            "{}: unsupported dtype {other:?}",
            args.model.display()
        ))),
    }
}

fn eval_typed<F: Real>(args: &EvalArgs) -> Result<()> {
    let loaded = trainer::load_checkpoint::<F>(&args.model)?;
    let sampler = Sampler::new(&loaded.denoiser, &loaded.state.params.data, &loaded.schedule)?;
    let mode: InferMode = args.mode.parse()?;
    let cfg = resolve_inference(&args.sampling, loaded.schedule.t_steps())?;
    let despeckle = DespeckleParams::default();
    let (samples, _) = data::load_dataset(&args.data)?;
    let report = metrics::evaluate(
        &sampler,
        &samples,
        mode,
        &cfg,
        Some(&despeckle),
        args.workers,
        json!({
            "model": args.model.display().to_string(),
            "data": args.data.display().to_string(),
            "workers": args.workers,
        }),
    )?;
    write_text(&args.out_report, &format!("{}\n", report.to_json()?))?;
    print!("{}", report.format_table());
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<()> {
    let sched = NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(args.t_steps))?;
    print!("{}", schedule_table(&sched));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Infer(args) => cmd_infer(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::InspectSchedule(args) => cmd_inspect(args),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::TimestepOutOfRange { .. } => 1,
        Error::Internal(_) => 3,
        _ => 2,
    }
}

/// Parse `argv` and run the chosen subcommand, returning the process
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed;
            // anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EvalReport;
    use tempfile::TempDir;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("diffseg")
            .chain(list.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        // No subcommand and unknown subcommands are usage errors.
        assert_eq!(run(args(&[])), 1);
        assert_eq!(run(args(&["frobnicate"])), 1);
        assert_eq!(run(args(&["train"])), 1); // missing required flags
        // Help and version requests succeed.
        assert_eq!(run(args(&["--help"])), 0);
        assert_eq!(run(args(&["--version"])), 0);
        assert_eq!(run(args(&["inspect-schedule", "--help"])), 0);
        // Invalid configuration values are usage errors.
        assert_eq!(run(args(&["inspect-schedule", "--t-steps", "0"])), 1);
        // Missing model files are data errors.
        let dir = TempDir::new().unwrap();
        let missing = dir.path().join("absent.ckpt").display().to_string();
        let out = dir.path().join("masks").display().to_string();
        assert_eq!(
            run(args(&[
                "infer", "--model", &missing, "--input", ".", "--out", &out
            ])),
            2
        );
    }

    #[test]
    fn schedule_table_has_one_row_per_step() {
        assert_eq!(run(args(&["inspect-schedule", "--t-steps", "10"])), 0);
        let sched = NoiseSchedule::build_sigmoid(ScheduleSpec::with_steps(10)).unwrap();
        let table = schedule_table(&sched);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 11); // header + one row per step
        assert!(lines[0].contains("alpha_bar"));
        assert!(lines[1].trim_start().starts_with('1'));
        // The first-step posterior variance is exactly zero.
        assert!(lines[1].contains("0.000000e0"));
    }

    #[test]
    fn train_settings_resolve_defaults_then_file_then_flags() {
        let dir = TempDir::new().unwrap();
        let base = TrainArgs {
            data: dir.path().join("d"),
            out: dir.path().join("o"),
            iters: None,
            batch: None,
            seed: None,
            t_steps: None,
            config: None,
        };
        let defaults = resolve_train(&base, &TrainFileConfig::default(), (16, 16)).unwrap();
        assert_eq!(defaults.schedule.t_steps, 100);
        assert_eq!(defaults.train.i_max, TrainConfig::default().i_max);
        assert_eq!(defaults.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(defaults.dtype, "f32");
        assert_eq!(defaults.denoiser.input_size, (16, 16));

        let file = TrainFileConfig {
            t_steps: Some(12),
            iters: Some(7),
            batch: Some(3),
            lr_init: Some(2e-4),
            base_channels: Some(2),
            depth: Some(1),
            time_embed_dim: Some(4),
            attention_at: Some(vec![]),
            dtype: Some("f64".to_string()),
            ..TrainFileConfig::default()
        };
        let merged = resolve_train(&base, &file, (16, 16)).unwrap();
        assert_eq!(merged.schedule.t_steps, 12);
        assert_eq!(merged.train.i_max, 7);
        assert_eq!(merged.train.batch_size, 3);
        assert_eq!(merged.train.lr_init, 2e-4);
        assert_eq!(merged.denoiser.depth, 1);
        assert!(merged.denoiser.attention_at.is_empty());
        assert_eq!(merged.dtype, "f64");

        let flagged = TrainArgs {
            iters: Some(9),
            t_steps: Some(20),
            ..base
        };
        let over = resolve_train(&flagged, &file, (16, 16)).unwrap();
        assert_eq!(over.train.i_max, 9); // flag beats file
        assert_eq!(over.schedule.t_steps, 20);
        assert_eq!(over.train.batch_size, 3); // file still beats default

        let bad = TrainFileConfig {
            dtype: Some("f16".to_string()),
            ..TrainFileConfig::default()
        };
        assert!(resolve_train(&flagged, &bad, (16, 16)).is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"iters": 5, "itres": 6}"#).unwrap();
        assert!(matches!(
            read_train_file(&path),
            Err(Error::InvalidConfig(_))
        ));
        std::fs::write(&path, r#"{"iters": 5}"#).unwrap();
        assert_eq!(read_train_file(&path).unwrap().iters, Some(5));
    }

    #[test]
    fn sampling_flags_override_model_defaults() {
        let none = SamplingArgs {
            ti: None,
            di: None,
            nu: None,
            n: None,
            tau: None,
            seed: 4,
        };
        let cfg = resolve_inference(&none, 10).unwrap();
        assert_eq!(cfg.t_start, 5);
        assert_eq!(cfg.seed, 4);
        let set = SamplingArgs {
            ti: Some(3),
            di: Some(0.0),
            nu: Some(4.0),
            n: Some(6),
            tau: Some(0.4),
            seed: 1,
        };
        let cfg = resolve_inference(&set, 10).unwrap();
        assert_eq!(cfg.t_start, 3);
        assert_eq!(cfg.damping, 0.0);
        assert_eq!(cfg.n_salient, 6);
        assert_eq!(cfg.n_infer, 6);
        assert_eq!(cfg.threshold, 0.4);
        let bad = SamplingArgs {
            ti: Some(11),
            ..none
        };
        assert!(resolve_inference(&bad, 10).is_err());
    }

    #[test]
    fn gen_data_writes_a_loadable_dataset_with_previews() {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("ds");
        let code = run(args(&[
            "gen-data",
            "--n",
            "3",
            "--size",
            "16",
            "--seed",
            "7",
            "--preview",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 0);
        let (samples, manifest) = data::load_dataset(&out).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!((manifest.height, manifest.width), (16, 16));
        assert_eq!(manifest.tool_version, crate::TOOL_VERSION);
        let gen = manifest.generator.unwrap();
        assert_eq!(gen.seed, 7);
        assert_eq!(gen.contrast, 0.3);
        assert!(out.join("preview").join("synth-00000-image.pgm").exists());
        assert!(out.join("preview").join("synth-00001-label.pgm").exists());
        assert!(!out.join("preview").join("synth-00002-image.pgm").exists());
        // Bad contrast is a usage error.
        let code = run(args(&[
            "gen-data",
            "--contrast",
            "1.5",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 1);
    }

    #[test]
    fn pipeline_train_infer_eval_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let ds = dir.path().join("ds");
        assert_eq!(
            run(args(&[
                "gen-data",
                "--n",
                "4",
                "--size",
                "8",
                "--seed",
                "3",
                "--out",
                ds.to_str().unwrap(),
            ])),
            0
        );
        let cfg_path = dir.path().join("train-config.json");
        std::fs::write(
            &cfg_path,
            r#"{
                "t_steps": 6,
                "base_channels": 2,
                "depth": 1,
                "time_embed_dim": 4,
                "attention_at": [],
                "checkpoint_every": 2
            }"#,
        )
        .unwrap();
        let run_dir = dir.path().join("run");
        assert_eq!(
            run(args(&[
                "train",
                "--data",
                ds.to_str().unwrap(),
                "--out",
                run_dir.to_str().unwrap(),
                "--iters",
                "3",
                "--batch",
                "2",
                "--config",
                cfg_path.to_str().unwrap(),
            ])),
            0
        );
        let model = run_dir.join("model.ckpt");
        assert!(model.exists());
        assert!(run_dir.join("checkpoint-0000002.ckpt").exists());
        let record: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(run_dir.join("train.json")).unwrap())
                .unwrap();
        assert_eq!(record["tool_version"], crate::TOOL_VERSION);
        assert_eq!(record["resolved"]["schedule"]["t_steps"], 6);

        // Inference over the dataset directory, then over a single file.
        let masks = dir.path().join("masks");
        assert_eq!(
            run(args(&[
                "infer",
                "--model",
                model.to_str().unwrap(),
                "--input",
                ds.to_str().unwrap(),
                "--mode",
                "all",
                "--ti",
                "2",
                "--n",
                "2",
                "--out",
                masks.to_str().unwrap(),
            ])),
            0
        );
        for k in 0..4 {
            assert!(masks.join(format!("synth-0000{k}.pgm")).exists());
        }
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(masks.join("inference.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["mode"], "union");
        assert_eq!(sidecar["inference"]["t_start"], 2);
        assert_eq!(sidecar["inputs"].as_array().unwrap().len(), 4);

        let single = dir.path().join("single");
        assert_eq!(
            run(args(&[
                "infer",
                "--model",
                model.to_str().unwrap(),
                "--input",
                ds.join("synth-00001.bin").to_str().unwrap(),
                "--mode",
                "avg",
                "--out",
                single.to_str().unwrap(),
            ])),
            0
        );
        assert!(single.join("synth-00001.pgm").exists());

        // Evaluation twice produces byte-identical reports.
        let rep_a = dir.path().join("report-a.json");
        let rep_b = dir.path().join("report-b.json");
        for rep in [&rep_a, &rep_b] {
            assert_eq!(
                run(args(&[
                    "eval",
                    "--model",
                    model.to_str().unwrap(),
                    "--data",
                    ds.to_str().unwrap(),
                    "--mode",
                    "infer",
                    "--ti",
                    "2",
                    "--n",
                    "2",
                    "--out-report",
                    rep.to_str().unwrap(),
                ])),
                0
            );
        }
        let a = std::fs::read(&rep_a).unwrap();
        let b = std::fs::read(&rep_b).unwrap();
        assert_eq!(a, b);
        let report: EvalReport = serde_json::from_slice(&a).unwrap();
        assert_eq!(report.cases.len(), 4);
        assert_eq!(report.config["run"]["workers"], 1);
        // A worker pool reproduces the sequential report exactly.
        let rep_par = dir.path().join("report-par.json");
        assert_eq!(
            run(args(&[
                "eval",
                "--model",
                model.to_str().unwrap(),
                "--data",
                ds.to_str().unwrap(),
                "--mode",
                "infer",
                "--ti",
                "2",
                "--n",
                "2",
                "--workers",
                "3",
                "--out-report",
                rep_par.to_str().unwrap(),
            ])),
            0
        );
        let par: EvalReport =
            serde_json::from_slice(&std::fs::read(&rep_par).unwrap()).unwrap();
        assert_eq!(par.cases, report.cases);
        assert_eq!(par.aggregates, report.aggregates);
    }
}
