use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use metok::ablation::{self, Axis};
use metok::diagnostics::{self, Component};
use metok::grid::{
    load_grid, save_grid, synth_sequence, GridSequence, Sample, SynthConfig, VariableMeta,
};
use metok::hyag::AttentionKind;
use metok::metok::OrderingStrategy;
use metok::metrics::{Evaluator, Forecast, TS_THRESHOLDS};
use metok::model::{HeadKind, Model, ModelConfig};
use metok::posembed::PosKind;
use metok::tensor::{GradCheckOptions, Tensor};
use metok::train::{self, LossKind, RunOptions, TrainConfig, TrainState};

/// Invalid invocation or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

#[derive(Parser, Debug)]
#[command(
    name = "metok",
    version,
    about = "Precipitation nowcasting with precipitation-ranked patch grouping"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset of MTG1 grids.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Verify a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Forecast from one input grid.
    Predict(PredictArgs),
    /// Train one model per setting of an axis and rank them.
    Ablate(AblateArgs),
    /// Score cost of grouping attention against full attention.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with optional `model`, `train` and `synth` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Grid height and width.
    #[arg(long)]
    pub hw: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// default, heavy or dry.
    #[arg(long)]
    pub levels_profile: Option<String>,
    #[arg(long)]
    pub history: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub micro_batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// dice, recall, ce or mse.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of samples held out for validation (taken from the end).
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub group: Option<usize>,
    #[arg(long)]
    pub patch: Option<usize>,
    #[arg(long)]
    pub encoder_depth: Option<usize>,
    #[arg(long)]
    pub translator_depth: Option<usize>,
    /// precip, original or random.
    #[arg(long)]
    pub ordering: Option<String>,
    /// grouping, sra or full.
    #[arg(long)]
    pub attention: Option<String>,
    /// solar, learned, sinusoidal or none.
    #[arg(long)]
    pub pos: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Continue from `<out>/last` when present.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint stem, e.g. `run/best`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// MTG1 grid with at least `s` steps; the first `s` are used.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// ordering, group-size, attention, posembed, depth, skip or score-window.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated settings; each axis has a default sweep.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<String>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
    pub sizes: Vec<usize>,
    /// Number of groups, held fixed.
    #[arg(long, default_value_t = 128)]
    pub m: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// ga, nffn, block, model, losses or all.
    #[arg(long, default_value = "all")]
    pub component: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthConfig,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(p) = path else {
        return Ok(FileConfig::default());
    };
    let bytes = fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
    match serde_json::from_slice(&bytes) {
        Ok(c) => Ok(c),
        Err(e) => usage(format!("config {}: {e}", p.display())),
    }
}

fn parse<T: std::str::FromStr<Err = metok::Error>>(v: &str) -> Result<T> {
    v.parse::<T>().map_err(|e| UsageError(e.to_string()).into())
}

/// Record of one invocation, written as `<out>/run_manifest.json`.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_sha256: String,
    config: &'a serde_json::Value,
    threads: Option<usize>,
    started_at: String,
    wall_clock_seconds: f64,
    outputs: Vec<String>,
}

struct Run {
    command: &'static str,
    out: PathBuf,
    start: Instant,
    started_at: String,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            command,
            out: out.to_path_buf(),
            start: Instant::now(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        self.outputs.push(p);
        Ok(())
    }

    fn finish<C: Serialize>(mut self, seed: u64, config: &C) -> Result<()> {
        let value = serde_json::to_value(config)?;
        let hash = hex::encode(Sha256::digest(serde_json::to_vec(&value)?));
        let mut outputs: Vec<String> = self
            .outputs
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        let manifest_path = self.path("run_manifest.json");
        outputs.push(manifest_path.display().to_string());
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config_sha256: hash,
            config: &value,
            threads: thread_cap(),
            started_at: std::mem::take(&mut self.started_at),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
            outputs,
        };
        fs::write(&manifest_path, serde_json::to_vec_pretty(&m)?)
            .with_context(|| format!("writing {}", manifest_path.display()))
    }
}

/// `METOK_THREADS`, when set to a positive integer.
fn thread_cap() -> Option<usize> {
    std::env::var("METOK_THREADS")
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Ok(v) = std::env::var("METOK_THREADS") {
        match thread_cap() {
            Some(n) => {
                metok::parallel::init_threads(n);
            }
            None => {
                return usage(format!(
                    "METOK_THREADS must be a positive integer, got '{v}'"
                ))
            }
        }
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Ablate(a) => ablate(a),
        Command::Bench(a) => bench(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Written next to the grids by `synth`.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetInfo {
    seed: u64,
    history: usize,
    horizon: usize,
    synth: SynthConfig,
    files: Vec<String>,
}

const DATASET_FILE: &str = "dataset.json";

#[derive(Serialize)]
struct SynthEffective<'a> {
    seed: u64,
    levels_profile: &'a str,
    synth: &'a SynthConfig,
}

fn synth(a: SynthArgs) -> Result<()> {
    let file = read_config(a.common.config.as_deref())?;
    let profile = a.levels_profile.as_deref().unwrap_or("default");
    let mut cfg = match file.synth.clone().with_profile(profile) {
        Ok(c) => c,
        Err(e) => return usage(e.to_string()),
    };
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    if let Some(hw) = a.hw {
        cfg.height = hw;
        cfg.width = hw;
    }
    if let Some(s) = a.history {
        cfg.history = s;
    }
    if let Some(j) = a.horizon {
        cfg.horizon = j;
    }
    let p = file.model.patch;
    if p == 0 || cfg.height % p != 0 || cfg.width % p != 0 {
        return usage(format!(
            "grid {}x{} is not divisible by the patch stride {p}",
            cfg.height, cfg.width
        ));
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let seed = a.seed.unwrap_or(0);

    let mut run = Run::start("synth", &a.common.out)?;
    let seqs: Vec<metok::Result<GridSequence>> =
        metok::parallel::map_range(cfg.samples, |i| synth_sequence(&cfg, seed, i));
    let mut files = Vec::with_capacity(cfg.samples);
    for (i, seq) in seqs.into_iter().enumerate() {
        let name = format!("sample_{i:05}.mtg");
        let path = run.path(&name);
        save_grid(&seq?, &path)?;
        run.outputs.push(path);
        files.push(name);
    }
    let info = DatasetInfo {
        seed,
        history: cfg.history,
        horizon: cfg.horizon,
        synth: cfg.clone(),
        files,
    };
    run.write(DATASET_FILE, serde_json::to_vec_pretty(&info)?)?;
    eprintln!(
        "wrote {} samples to {}",
        cfg.samples,
        a.common.out.display()
    );
    run.finish(
        seed,
        &SynthEffective {
            seed,
            levels_profile: profile,
            synth: &cfg,
        },
    )
}

fn load_dataset(dir: &Path) -> Result<(DatasetInfo, Vec<Sample>)> {
    let path = dir.join(DATASET_FILE);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let info: DatasetInfo =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    let samples = info
        .files
        .iter()
        .map(|f| {
            let seq = load_grid(dir.join(f))?;
            Sample::from_sequence(&seq, info.history)
        })
        .collect::<metok::Result<Vec<_>>>()
        .with_context(|| format!("loading samples from {}", dir.display()))?;
    if samples.is_empty() {
        bail!("dataset {} has no samples", dir.display());
    }
    Ok((info, samples))
}

fn split(samples: &[Sample], val_fraction: f64) -> Result<(&[Sample], &[Sample])> {
    if !(0.0..1.0).contains(&val_fraction) {
        return usage(format!(
            "--val-fraction must lie in [0, 1), got {val_fraction}"
        ));
    }
    let n_val = (samples.len() as f64 * val_fraction).round() as usize;
    let n_val = n_val.min(samples.len() - 1);
    Ok(samples.split_at(samples.len() - n_val))
}

fn apply_train(cfg: &mut TrainConfig, f: &TrainFlags) -> Result<()> {
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.micro_batch {
        cfg.micro_batch = v;
    }
    if let Some(v) = f.lr {
        cfg.lr = v;
    }
    if let Some(v) = f.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = &f.loss {
        cfg.loss = parse::<LossKind>(v)?;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    Ok(())
}

/// Model config from file and flags; grid shape follows the dataset and the
/// head follows the loss.
fn model_config(
    base: &ModelConfig,
    f: &ModelFlags,
    info: &DatasetInfo,
    tc: &TrainConfig,
) -> Result<ModelConfig> {
    let mut c = base.clone();
    c.height = info.synth.height;
    c.width = info.synth.width;
    c.variables = info.synth.variables;
    c.history = info.history;
    c.horizon = info.horizon;
    c.head = tc.loss.head();
    c.seed = tc.seed;
    if let Some(v) = f.dim {
        c.dim = v;
    }
    if let Some(v) = f.group {
        c.group = v;
    }
    if let Some(v) = f.patch {
        c.patch = v;
    }
    if let Some(v) = f.encoder_depth {
        c.encoder_depth = v;
    }
    if let Some(v) = f.translator_depth {
        c.translator_depth = v;
    }
    if let Some(v) = &f.ordering {
        c.ordering = parse::<OrderingStrategy>(v)?;
    }
    if let Some(v) = &f.attention {
        c.attention = parse::<AttentionKind>(v)?;
    }
    if let Some(v) = &f.pos {
        c.pos = parse::<PosKind>(v)?;
    }
    if let Err(e) = c.validate() {
        return usage(e.to_string());
    }
    Ok(c)
}

#[derive(Serialize)]
struct TrainEffective<'a> {
    data: &'a Path,
    val_fraction: f64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file = read_config(a.common.config.as_deref())?;
    let mut tc = file.train.clone();
    apply_train(&mut tc, &a.train)?;
    let (info, samples) = load_dataset(&a.data)?;
    let mc = model_config(&file.model, &a.model, &info, &tc)?;
    if let Err(e) = tc.validate(mc.head) {
        return usage(e.to_string());
    }
    let (train_set, val_set) = split(&samples, a.train.val_fraction)?;

    let mut run = Run::start("train", &a.common.out)?;
    let mut model = Model::new(mc.clone())?;
    eprintln!(
        "training {} parameters on {} samples ({} held out)",
        model.store.scalar_count(),
        train_set.len(),
        val_set.len()
    );
    let opts = RunOptions {
        out_dir: Some(a.common.out.clone()),
        resume: a.resume,
        stop_after: None,
    };
    let outcome = train::train_loop(&mut model, &tc, train_set, val_set, &opts, |r| {
        let val = r
            .val
            .map(|v| {
                let iou = v
                    .mean_iou
                    .map(|x| format!(" val_mIoU {x:.2}"))
                    .unwrap_or_default();
                let rmse = v
                    .rmse
                    .map(|x| format!(" val_rmse {x:.4}"))
                    .unwrap_or_default();
                iou + &rmse
            })
            .unwrap_or_default();
        eprintln!(
            "epoch {:>3} lr {:.3e} loss {:.5}{val}",
            r.epoch, r.lr, r.train_loss
        );
    })?;
    if let (Some(e), Some(s)) = (outcome.best_epoch, outcome.best_score) {
        eprintln!("best epoch {e} (score {s:.4})");
    }
    for name in [
        train::LOG_FILE,
        "last.bin",
        "last.json",
        "best.bin",
        "best.json",
    ] {
        let p = run.path(name);
        if p.exists() {
            run.outputs.push(p);
        }
    }
    run.finish(
        tc.seed,
        &TrainEffective {
            data: &a.data,
            val_fraction: a.train.val_fraction,
            model: &mc,
            train: &tc,
        },
    )
}

fn load_model(stem: &Path) -> Result<Model> {
    let (model, _, _): (Model, _, TrainState) =
        Model::load(stem).with_context(|| format!("loading checkpoint {}", stem.display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct EvalEffective<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    model: &'a ModelConfig,
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (_, samples) = load_dataset(&a.data)?;
    let mut run = Run::start("eval", &a.out)?;
    let mut ev = Evaluator::new(model.cfg.horizon, &TS_THRESHOLDS);
    let preds = metok::parallel::map(&samples, |s| -> metok::Result<Forecast> {
        Ok(match model.cfg.head {
            HeadKind::Levels => Forecast::Levels(model.predict_levels(&s.inputs)?),
            HeadKind::Regression => Forecast::Amounts(model.predict(&s.inputs)?),
        })
    });
    for (p, s) in preds.into_iter().zip(&samples) {
        ev.add(&p?, &s.targets)?;
    }
    let report = ev.finish();
    let table = report.to_table();
    print!("{table}");
    run.write("report.json", report.to_json()?)?;
    run.write("report.txt", table)?;
    run.write("report.csv", report.to_csv())?;
    run.finish(
        model.cfg.seed,
        &EvalEffective {
            checkpoint: &a.checkpoint,
            data: &a.data,
            model: &model.cfg,
        },
    )
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let seq = load_grid(&a.input).with_context(|| format!("loading {}", a.input.display()))?;
    let s = model.cfg.history;
    if seq.steps() < s {
        bail!("input has {} steps, the model needs {s}", seq.steps());
    }
    let inputs = if seq.steps() == s {
        seq
    } else {
        seq.slice_steps(0, s)?
    };
    let precip = model.predict_precip(&inputs)?;
    let sh = precip.shape().to_vec();
    // one variable: the level index, or the raw amount for a regression head
    let (var, meta) = match model.cfg.head {
        HeadKind::Levels => {
            let lv = model.predict_levels(&inputs)?;
            let v: Vec<f64> = lv.levels().iter().map(|&l| l as f64).collect();
            (
                v,
                VariableMeta {
                    name: "level".into(),
                    unit: "1".into(),
                },
            )
        }
        HeadKind::Regression => (
            model.predict(&inputs)?.data().to_vec(),
            VariableMeta {
                name: "amount".into(),
                unit: "mm/h".into(),
            },
        ),
    };
    let mut geo = inputs.geo;
    geo.t0 = inputs.time_at(0) + s as f64 * geo.dt;
    let vars = Tensor::new(vec![sh[0], sh[1], sh[2], 1], var)?;
    let out_seq = GridSequence::new(vars, precip, vec![meta], geo)?;

    let mut run = Run::start("predict", &a.out)?;
    let path = run.path("prediction.mtg");
    save_grid(&out_seq, &path)?;
    run.outputs.push(path.clone());
    eprintln!(
        "wrote ({}, {}, {}) forecast to {}",
        sh[0],
        sh[1],
        sh[2],
        path.display()
    );

    #[derive(Serialize)]
    struct Eff<'a> {
        checkpoint: &'a Path,
        input: &'a Path,
        model: &'a ModelConfig,
    }
    run.finish(
        model.cfg.seed,
        &Eff {
            checkpoint: &a.checkpoint,
            input: &a.input,
            model: &model.cfg,
        },
    )
}

#[derive(Serialize)]
struct AblateEffective<'a> {
    axis: Axis,
    data: &'a Path,
    val_fraction: f64,
    variants: Vec<&'a ModelConfig>,
    train: &'a TrainConfig,
}

fn ablate(a: AblateArgs) -> Result<()> {
    let axis = parse::<Axis>(&a.axis)?;
    let file = read_config(a.common.config.as_deref())?;
    let mut tc = file.train.clone();
    apply_train(&mut tc, &a.train)?;
    let (info, samples) = load_dataset(&a.data)?;
    let base = model_config(&file.model, &a.model, &info, &tc)?;
    let variants = match ablation::variants(axis, &base, &a.values) {
        Ok(v) => v,
        Err(e) => return usage(e.to_string()),
    };
    if let Err(e) = tc.validate(base.head) {
        return usage(e.to_string());
    }
    let (train_set, val_set) = split(&samples, a.train.val_fraction)?;
    if val_set.is_empty() {
        return usage("ablation needs a validation split; raise --val-fraction");
    }

    let mut run = Run::start("ablate", &a.common.out)?;
    let rows = ablation::run(&variants, &tc, train_set, val_set, |label, epoch, loss| {
        eprintln!("{label}: epoch {epoch} loss {loss:.5}");
    })?;
    let table = ablation::table(&rows);
    print!("{table}");
    run.write("ablation.txt", table)?;
    run.write("ablation.csv", ablation::csv(&rows))?;
    run.write("ablation.json", serde_json::to_vec_pretty(&rows)?)?;
    run.finish(
        tc.seed,
        &AblateEffective {
            axis,
            data: &a.data,
            val_fraction: a.train.val_fraction,
            variants: variants.iter().map(|(_, c)| c).collect(),
            train: &tc,
        },
    )
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.sizes.len() < 2 {
        return usage("--sizes needs at least two values to fit an exponent");
    }
    if a.m == 0 || a.sizes.iter().any(|n| n % a.m != 0) {
        return usage(format!("every size must be a multiple of --m {}", a.m));
    }
    let mut run = Run::start("bench", &a.out)?;
    let rows = diagnostics::attention_scaling(&a.sizes, a.m, a.d, a.heads, a.reps, a.seed)?;
    let mut csv =
        String::from("n,m,d,ga_macs,full_macs,ga_seconds,full_seconds,ga_macs_over_nmd\n");
    for r in &rows {
        csv += &format!(
            "{},{},{},{},{},{:.6e},{:.6e},{}\n",
            r.n,
            r.m,
            r.d,
            r.ga_macs,
            r.full_macs,
            r.ga_seconds,
            r.full_seconds,
            r.ga_macs as f64 / (r.n * r.m * r.d) as f64
        );
    }
    let (ga_m, full_m, ga_t, full_t) = diagnostics::scaling_slopes(&rows);
    let mut fit = String::from("series,exponent,band_low,band_high,within\n");
    for (name, e, lo, hi) in [
        ("ga_macs", ga_m, 0.8, 1.2),
        ("full_macs", full_m, 1.8, 2.2),
        ("ga_seconds", ga_t, 0.8, 1.2),
        ("full_seconds", full_t, 1.8, 2.2),
    ] {
        fit += &format!("{name},{e:.4},{lo},{hi},{}\n", (lo..=hi).contains(&e));
        println!("{name:>13}: exponent {e:.3} (expected {lo}..{hi})");
    }
    run.write("scaling.csv", csv)?;
    run.write("exponents.csv", fit)?;
    #[derive(Serialize)]
    struct Eff<'a> {
        sizes: &'a [usize],
        m: usize,
        d: usize,
        heads: usize,
        reps: usize,
    }
    run.finish(
        a.seed,
        &Eff {
            sizes: &a.sizes,
            m: a.m,
            d: a.d,
            heads: a.heads,
            reps: a.reps,
        },
    )
}

#[derive(Serialize)]
struct CheckRecord {
    component: String,
    check: String,
    max_rel_err: f64,
    passed: bool,
    report: metok::tensor::GradReport,
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let components: Vec<Component> = if a.component == "all" {
        Component::ALL.to_vec()
    } else {
        vec![parse::<Component>(&a.component)?]
    };
    let mut opts = GradCheckOptions {
        seed: a.seed,
        ..GradCheckOptions::default()
    };
    if let Some(t) = a.tol {
        opts.tol = t;
    }
    let mut run = Run::start("gradcheck", &a.out)?;
    let mut records = Vec::new();
    let mut worst: f64 = 0.0;
    for c in components {
        for (name, rep) in diagnostics::gradcheck(c, a.seed, &opts)? {
            println!(
                "{c:>7} {name:<28} max rel err {:.3e} {}",
                rep.max_rel_err,
                if rep.passed { "ok" } else { "FAIL" }
            );
            worst = worst.max(rep.max_rel_err);
            records.push(CheckRecord {
                component: c.to_string(),
                check: name,
                max_rel_err: rep.max_rel_err,
                passed: rep.passed,
                report: rep,
            });
        }
    }
    println!(
        "max relative error {worst:.3e} (tolerance {:.0e})",
        opts.tol
    );
    run.write("gradcheck.json", serde_json::to_vec_pretty(&records)?)?;
    let failed: Vec<String> = records
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}", r.component, r.check))
        .collect();
    #[derive(Serialize)]
    struct Eff<'a> {
        component: &'a str,
        tol: f64,
        step: f64,
        max_samples: usize,
    }
    run.finish(
        a.seed,
        &Eff {
            component: &a.component,
            tol: opts.tol,
            step: opts.step,
            max_samples: opts.max_samples,
        },
    )?;
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}
