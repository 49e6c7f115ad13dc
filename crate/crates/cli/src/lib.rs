//! Subcommands of the `pointseg` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pointseg_core::data::{
    generate_annotations, load_dataset, mask_to_greymap, resize_sample, synth_generate, write_annotations,
    write_dataset, write_json, write_pgm, Dataset, LabelMask, Sample, SynthSpec,
};
use pointseg_core::gradcheck::{run_suite, Component, GradcheckConfig};
use pointseg_core::losses::LossMode;
use pointseg_core::metrics::{evaluate, EvalConfig, EvalReport};
use pointseg_core::nn::{read_checkpoint, write_checkpoint, ModelKind, ModelParams, ModelSpec};
use pointseg_core::train::{predict, train_loop, write_history_csv, TrainConfig};
use pointseg_core::Error;

pub const EXIT_VERIFICATION: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, error: error.into() }
    }

    pub fn verification(error: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_VERIFICATION, error: error.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence(_) => EXIT_DIVERGENCE,
            Error::OracleFailure(_) => EXIT_VERIFICATION,
            _ => EXIT_CONFIG,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        match error.downcast::<Error>() {
            Ok(core) => core.into(),
            Err(error) => Self { code: EXIT_CONFIG, error },
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pointseg", version, about = "Point-supervised segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Sample one point annotation per class per image from the masks.
    Annotate(AnnotateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator spec (JSON); omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags that override fields of the JSON training config.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigOverrides {
    #[arg(long)]
    pub mode: Option<LossMode>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub lambda_cv: Option<f64>,
    #[arg(long)]
    pub lambda_ms: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub freeze_means: bool,
    #[arg(long)]
    pub no_augment: bool,
    /// Resize every image to `HxW` before use.
    #[arg(long, value_parser = parse_dims)]
    pub resize: Option<[usize; 2]>,
}

impl ConfigOverrides {
    pub fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        macro_rules! take {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { c.$field = v; } )* };
        }
        take!(mode, model, lambda_cv, lambda_ms, mu, tau, iterations, batch_size, seed, checkpoint_every);
        if self.lr0.is_some() {
            c.lr0 = self.lr0;
        }
        if self.resize.is_some() {
            c.resize = self.resize;
        }
        if self.freeze_means {
            c.freeze_means = true;
        }
        if self.no_augment {
            c.augment = false;
        }
        c
    }
}

fn parse_dims(s: &str) -> Result<[usize; 2], String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok([parse(h)?, parse(w)?])
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config (JSON) or a run manifest to replay.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Columns reset to background on each side before scoring.
    #[arg(long, default_value_t = 0)]
    pub central_bias_width: usize,
    /// `test`, `train`, or `auto` (train split for logit fields, else test).
    #[arg(long, default_value = "auto")]
    pub split: String,
    #[arg(long, value_parser = parse_dims)]
    pub resize: Option<[usize; 2]>,
    /// Also write predicted masks (P5) and colour overlays (P6).
    #[arg(long)]
    pub save_masks: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub trials: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One of lambda_cv, tau, mu, lr0.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values, run in the given order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Annotate(a) => cmd_annotate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|r| print!("{}", r.to_table())),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| ()),
    }
}

fn create_dir(path: &Path) -> CliResult {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(())
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(anyhow!("{}: {e}", path.display())))
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult {
    let mut spec: SynthSpec = match &args.spec {
        Some(path) => read_json_file(path)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let out = synth_generate(&spec)?;
    create_dir(&args.out)?;
    write_dataset(&args.out, &out.manifest, &out.all_samples())?;
    log::info!(
        "wrote {} train and {} test images ({}x{}, K = {}) to {}",
        out.train.len(),
        out.test.len(),
        spec.height,
        spec.width,
        spec.classes,
        args.out.display()
    );
    Ok(())
}

fn load_nonempty(root: &Path) -> CliResult<Dataset> {
    let ds = load_dataset(root)?;
    if ds.samples.is_empty() {
        return Err(CliError::config(anyhow!("no images under {}", root.join("images").display())));
    }
    Ok(ds)
}

pub fn cmd_annotate(args: &AnnotateArgs) -> CliResult {
    let ds = load_nonempty(&args.data)?;
    if let Some(s) = ds.samples.iter().find(|s| s.mask.is_none()) {
        return Err(CliError::config(anyhow!("sample {} has no mask", s.id)));
    }
    let classes = ds.classes().expect("loaded datasets carry a manifest");
    let annotated = generate_annotations(&ds.samples, classes, args.seed)?;
    write_annotations(&args.data, &annotated)?;
    log::info!("annotated {} images", annotated.len());
    Ok(())
}

fn resize_all(samples: Vec<Sample>, resize: Option<[usize; 2]>) -> CliResult<Vec<Sample>> {
    match resize {
        Some([h, w]) => Ok(samples.iter().map(|s| resize_sample(s, h, w)).collect::<Result<_, _>>()?),
        None => Ok(samples),
    }
}

/// Everything needed to replay a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub dataset_root: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub started_unix: u64,
    pub artifacts: Artifacts,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub history: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_checkpoint_sha256: Option<String>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const FINAL_CHECKPOINT: &str = "model.pscv";
pub const HISTORY_FILE: &str = "history.csv";

fn checkpoint_path(out: &Path, iteration: u64) -> PathBuf {
    out.join("checkpoints").join(format!("iter_{iteration:07}.pscv"))
}

fn sha256_hex(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Resolves the config: file (plain config or run manifest), then flags.
fn resolve_config(path: Option<&Path>, overrides: &ConfigOverrides) -> CliResult<(TrainConfig, Option<PathBuf>)> {
    let (base, data) = match path {
        Some(p) => {
            let value: serde_json::Value = read_json_file(p)?;
            if value.get("config").is_some() && value.get("tool_version").is_some() {
                let m: RunManifest =
                    serde_json::from_value(value).map_err(|e| CliError::config(anyhow!("{}: {e}", p.display())))?;
                (m.config, Some(m.dataset_root))
            } else {
                let c: TrainConfig =
                    serde_json::from_value(value).map_err(|e| CliError::config(anyhow!("{}: {e}", p.display())))?;
                (c, None)
            }
        }
        None => (TrainConfig::default(), None),
    };
    let config = overrides.apply(base).resolved();
    config.validate()?;
    Ok((config, data))
}

pub struct TrainRun {
    pub manifest: RunManifest,
    pub spec: ModelSpec,
    pub params: ModelParams,
}

fn train_into(config: &TrainConfig, data: &Path, out: &Path) -> CliResult<TrainRun> {
    let ds = load_nonempty(data)?;
    let train = resize_all(ds.train(), config.resize)?;
    if train.is_empty() {
        return Err(CliError::config(anyhow!("dataset {} has an empty train split", data.display())));
    }
    if let Some(s) = train.iter().find(|s| s.annotation.is_none()) {
        return Err(CliError::config(anyhow!("sample {} has no annotation; run `pointseg annotate` first", s.id)));
    }
    create_dir(out)?;
    create_dir(&out.join("checkpoints"))?;
    let mut checkpoints = Vec::new();
    if config.checkpoint_every > 0 {
        let mut it = config.checkpoint_every;
        while it < config.iterations {
            checkpoints.push(checkpoint_path(out, it));
            it += config.checkpoint_every;
        }
    }
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        dataset_root: data.to_path_buf(),
        out_dir: out.to_path_buf(),
        seed: config.seed,
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        artifacts: Artifacts {
            checkpoints,
            final_checkpoint: out.join(FINAL_CHECKPOINT),
            history: out.join(HISTORY_FILE),
            final_checkpoint_sha256: None,
        },
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;

    log::info!(
        "training {} / {} for {} iterations on {} images",
        config.model,
        config.mode,
        config.iterations,
        train.len()
    );
    let outcome = train_loop(&train, config, |it, params| {
        let path = if it == config.iterations { out.join(FINAL_CHECKPOINT) } else { checkpoint_path(out, it) };
        write_checkpoint(&path, params)
    })?;
    write_history_csv(&out.join(HISTORY_FILE), &outcome.history)?;
    manifest.artifacts.final_checkpoint_sha256 = Some(sha256_hex(&out.join(FINAL_CHECKPOINT))?);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    if let Some(last) = outcome.history.last() {
        log::info!("final loss {:.5} (pce {:.5})", last.total, last.pce);
    }
    Ok(TrainRun { manifest, spec: outcome.spec, params: outcome.params })
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainRun> {
    let (config, manifest_data) = resolve_config(args.config.as_deref(), &args.overrides)?;
    let data = args.data.clone().or(manifest_data).ok_or_else(|| CliError::config(anyhow!("--data is required")))?;
    train_into(&config, &data, &args.out)
}

fn pick_split(ds: &Dataset, split: &str, kind: ModelKind) -> CliResult<Vec<Sample>> {
    match (split, kind) {
        ("train", _) | ("auto", ModelKind::LogitField) => Ok(ds.train()),
        ("test", _) | ("auto", ModelKind::ConvEd) => Ok(ds.test()),
        (other, _) => Err(CliError::config(anyhow!("unknown split {other:?} (expected train, test or auto)"))),
    }
}

/// Scores `params` on `samples` and writes `eval.json` and `eval.txt`.
pub fn evaluate_samples(
    params: &ModelParams,
    spec: &ModelSpec,
    samples: &[Sample],
    central_bias_width: usize,
    out: &Path,
    save_masks: bool,
) -> CliResult<EvalReport> {
    if samples.is_empty() {
        return Err(CliError::config(anyhow!("no samples to evaluate")));
    }
    let mut preds = Vec::with_capacity(samples.len());
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s.mask.clone().ok_or_else(|| CliError::config(anyhow!("sample {} has no mask", s.id)))?;
        preds.push(predict(params, spec, &s.image, &s.id)?);
        gts.push(gt);
    }
    let report = evaluate(&preds, &gts, spec.classes, &EvalConfig { central_bias_width })?;
    create_dir(out)?;
    write_json(&out.join("eval.json"), &report)?;
    fs::write(out.join("eval.txt"), report.to_table()).with_context(|| format!("writing {}", out.display()))?;
    if save_masks {
        let dir = out.join("predictions");
        create_dir(&dir)?;
        for (s, p) in samples.iter().zip(&preds) {
            write_pgm(&dir.join(format!("{}.pgm", s.id)), &mask_to_greymap(p))?;
            fs::write(dir.join(format!("{}.ppm", s.id)), overlay_ppm(s, p))
                .with_context(|| format!("writing overlay for {}", s.id))?;
        }
    }
    Ok(report)
}

const PALETTE: [[f64; 3]; 6] =
    [[0.0, 0.0, 0.0], [0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.4, 0.9], [0.9, 0.8, 0.2], [0.8, 0.3, 0.8]];

/// Binary PPM with the image in grey and foreground classes tinted.
pub fn overlay_ppm(sample: &Sample, pred: &LabelMask) -> Vec<u8> {
    let (h, w) = (pred.height(), pred.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (i, &v) in sample.image.pixels().iter().enumerate() {
        let k = usize::from(pred.labels()[i]);
        let tint = PALETTE[k % PALETTE.len()];
        let alpha = if k == 0 { 0.0 } else { 0.45 };
        for t in tint {
            out.push(((v * (1.0 - alpha) + t * alpha) * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<EvalReport> {
    let params = read_checkpoint(&args.checkpoint)?;
    let ds = load_nonempty(&args.data)?;
    let manifest = ds.manifest.clone().expect("loaded datasets carry a manifest");
    let (h, w) = match args.resize {
        Some([h, w]) => (h, w),
        None => (manifest.height, manifest.width),
    };
    let spec =
        params.infer_spec(h, w).map_err(|e| CliError::config(anyhow!("checkpoint does not fit the dataset: {e}")))?;
    if spec.classes != manifest.classes {
        return Err(CliError::config(anyhow!(
            "checkpoint predicts {} classes, dataset has {}",
            spec.classes,
            manifest.classes
        )));
    }
    let samples = resize_all(pick_split(&ds, &args.split, spec.kind)?, args.resize)?;
    evaluate_samples(&params, &spec, &samples, args.central_bias_width, &args.out, args.save_masks)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult {
    let inject_fault = args.inject_fault.as_deref().map(str::parse::<Component>).transpose()?;
    let report = run_suite(&GradcheckConfig { seed: args.seed, trials: args.trials, inject_fault })?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &report)?;
    }
    if report.passed() {
        return Ok(());
    }
    let mut msg = String::from("gradient check failed:");
    for c in report.failures() {
        let w = c.worst.as_ref().expect("failures have a worst coordinate");
        let _ = write!(
            msg,
            "\n  {}: seed {} trial {} {}[{}] analytic {:e} numeric {:e} rel {:.3e}",
            c.component, report.seed, w.trial, w.tensor, w.index, w.analytic, w.numeric, w.rel_error
        );
    }
    Err(CliError::verification(anyhow!(msg)))
}

pub const SWEEP_PARAMS: [&str; 4] = ["lambda_cv", "tau", "mu", "lr0"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub dsc_avg: Option<f64>,
    pub hd95_avg: Option<f64>,
}

fn with_param(config: &TrainConfig, param: &str, value: f64) -> CliResult<TrainConfig> {
    let mut c = config.clone();
    match param {
        "lambda_cv" => c.lambda_cv = value,
        "tau" => c.tau = value,
        "mu" => c.mu = value,
        "lr0" => c.lr0 = Some(value),
        other => {
            return Err(CliError::config(anyhow!(
                "unknown sweep parameter {other:?} (expected one of {})",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let (base, _) = resolve_config(args.config.as_deref(), &args.overrides)?;
    let configs = args.values.iter().map(|&v| with_param(&base, &args.param, v)).collect::<CliResult<Vec<_>>>()?;
    let ds = load_nonempty(&args.data)?;
    create_dir(&args.out)?;
    let mut rows = Vec::new();
    for (&value, config) in args.values.iter().zip(&configs) {
        let run_dir = args.out.join(format!("{}={value}", args.param));
        let run = train_into(config, &args.data, &run_dir)?;
        let samples = resize_all(pick_split(&ds, "auto", run.spec.kind)?, config.resize)?;
        let report = evaluate_samples(&run.params, &run.spec, &samples, config.central_bias_width, &run_dir, false)?;
        log::info!("{} = {value}: DSC {} HD95 {}", args.param, fmt_opt(report.dsc_avg), fmt_opt(report.hd95_avg));
        rows.push(SweepRow { value, dsc_avg: report.dsc_avg, hd95_avg: report.hd95_avg });
    }
    let mut csv = format!("{},dsc_avg,hd95_avg\n", args.param);
    let mut dat = format!("# {} dsc_avg hd95_avg\n", args.param);
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.value, fmt_opt(r.dsc_avg), fmt_opt(r.hd95_avg));
        let _ = writeln!(dat, "{} {} {}", r.value, fmt_opt(r.dsc_avg), fmt_opt(r.hd95_avg));
    }
    fs::write(args.out.join("sweep.csv"), csv).context("writing sweep.csv")?;
    fs::write(args.out.join("sweep.dat"), dat).context("writing sweep.dat")?;
    Ok(rows)
}

/// Caps rayon's pool at `PSCV_THREADS` when set.
pub fn configure_threads() -> CliResult {
    if let Ok(v) = std::env::var("PSCV_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(anyhow!("PSCV_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(anyhow!("thread pool: {e}")))?;
    }
    Ok(())
}
