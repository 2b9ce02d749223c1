//! Command-line entry point.

mod config;
mod manifest;
pub mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::RngCore;
use serde::Serialize;

use crate::augment::{apply_acquisition_distortion, apply_speckle, apply_vessel_shadow, compose_pipeline, AugmentConfig};
use crate::error::{Error, Result};
use crate::metrics::{bench_throughput, evaluate, EvalReport, FoveaAnchor};
use crate::model::{Model, ModelConfig};
use crate::phantom::{generate_phantom, list_samples, load_dataset, write_sample, Split};
use crate::training::{stream, train, TrainConfig, TrainOutput};

pub use config::RunConfig;
pub use manifest::{RunManifest, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "reachnet", version, about = "Choroid segmentation on synthetic OCT phantoms")]
struct Cli {
    /// Worker threads (default: logical cores). REACH_THREADS takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate phantoms into <out>/{train,val,test}.
    Phantom(PhantomArgs),
    /// Write augmented copies of samples.
    AugmentPreview(PreviewArgs),
    Train(TrainArgs),
    Eval(EvalArgs),
    /// Time forward passes on dummy input.
    Bench(BenchArgs),
    /// Summarise evaluation directories as CSV tables and an SVG chart.
    Report(ReportArgs),
    /// Print parameter count, layer shapes and serialized size.
    ModelInfo(ModelInfoArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Which {
    Speckle,
    Shadow,
    Distortion,
    All,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Which::All)]
    which: Which,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory holding train/ and val/ subdirectories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Compressed 20-epoch schedule at a quarter of the branch resolutions, without the 1/8 rate scale.
    #[arg(long)]
    desk_scale: bool,
    /// Disable speckle and shadow augmentation.
    #[arg(long)]
    no_domain_aug: bool,
    /// Also save epoch_NNN.ckpt every N epochs.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Anchor {
    Gt,
    Predicted,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    roi_um: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    anchor: Option<Anchor>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Checkpoint to time; a freshly initialised default model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 768)]
    resolution: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation output directories (each holding report.json).
    #[arg(long = "eval-dir", required = true, num_args = 1..)]
    eval_dirs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ModelInfoArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Runs the CLI and returns the process exit code: 0 success, 1 bad input, 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let threads = thread_count(cli.threads);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {threads} worker threads: {e}");
            return 2;
        }
    };
    let ctx = Ctx { argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(), threads };
    match pool.install(|| dispatch(cli.command, &ctx)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn thread_count(flag: Option<usize>) -> usize {
    let env = std::env::var("REACH_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0);
    env.or(flag.filter(|&n| n > 0))
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

struct Ctx {
    argv: Vec<String>,
    threads: usize,
}

impl Ctx {
    /// Creates `out` and writes the manifest before any work happens.
    fn start(&self, command: &str, out: &Path, config: &impl Serialize, seed: Option<u64>) -> Result<RunManifest> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let m = RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            config: serde_json::to_value(config)?,
            seed,
            build: manifest::build_id(),
            threads: self.threads,
            started_unix_s: manifest::now_unix(),
            finished_unix_s: None,
            outputs: Vec::new(),
        };
        m.write(out)?;
        Ok(m)
    }

    fn finish(&self, mut m: RunManifest, out: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        m.finished_unix_s = Some(manifest::now_unix());
        m.outputs = outputs;
        m.write(out)
    }
}

fn dispatch(command: Command, ctx: &Ctx) -> Result<()> {
    match command {
        Command::Phantom(a) => phantom(a, ctx),
        Command::AugmentPreview(a) => preview(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Eval(a) => eval_cmd(a, ctx),
        Command::Bench(a) => bench_cmd(a, ctx),
        Command::Report(a) => report_cmd(a, ctx),
        Command::ModelInfo(a) => model_info(a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map(RunConfig::load).transpose().map(Option::unwrap_or_default)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Missing(path.to_path_buf()))
    }
}

const PHANTOM_STREAM: u64 = 100;

fn phantom(a: PhantomArgs, ctx: &Ctx) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.phantom;
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.seed = a.seed;
    cfg.validate()?;
    let fractions = [a.val_fraction, a.test_fraction];
    if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || a.val_fraction + a.test_fraction >= 1.0 {
        return Err(Error::Config("val and test fractions must be in [0, 1) and sum below 1".into()));
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        phantom: &'a crate::phantom::PhantomConfig,
        count: usize,
        val_fraction: f64,
        test_fraction: f64,
    }
    let resolved = Resolved { phantom: &cfg, count: a.count, val_fraction: a.val_fraction, test_fraction: a.test_fraction };
    let m = ctx.start("phantom", &a.out, &resolved, Some(a.seed))?;
    let n_test = (a.count as f64 * a.test_fraction).round() as usize;
    let n_val = (a.count as f64 * a.val_fraction).round() as usize;
    let n_train = a.count.saturating_sub(n_val + n_test);
    let mut outputs = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let dir = a.out.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        outputs.push(dir);
    }
    for i in 0..a.count {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let seed = stream(a.seed, PHANTOM_STREAM, i as u64, 0).next_u64();
        let mut s = generate_phantom(&cfg, seed)?;
        s.split = split;
        write_sample(&s, &a.out.join(split.as_str()), &format!("p{i:05}"))?;
    }
    println!("wrote {n_train} train, {n_val} val, {n_test} test phantoms to {}", a.out.display());
    ctx.finish(m, &a.out, outputs)
}

/// Sample directory: `dir` itself, or `dir/train` when `dir` only holds splits.
fn sample_dir(dir: &Path) -> Result<PathBuf> {
    require_dir(dir)?;
    if list_samples(dir)?.is_empty() && dir.join("train").is_dir() {
        return Ok(dir.join("train"));
    }
    Ok(dir.to_path_buf())
}

fn preview(a: PreviewArgs, ctx: &Ctx) -> Result<()> {
    let aug = load_config(a.config.as_deref())?.train.augment;
    aug.validate()?;
    let src = sample_dir(&a.data)?;
    let data = load_dataset(&src)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("no samples in {}", src.display())));
    }
    #[derive(Serialize)]
    struct Resolved<'a> {
        augment: &'a AugmentConfig,
        which: Which,
        count: usize,
        data: &'a Path,
    }
    let m = ctx.start("augment-preview", &a.out, &Resolved { augment: &aug, which: a.which, count: a.count, data: &src }, Some(a.seed))?;
    let kinds: &[Which] = match a.which {
        Which::All => &[Which::Speckle, Which::Shadow, Which::Distortion, Which::All],
        _ => std::slice::from_ref(&a.which),
    };
    let mut outputs = Vec::new();
    for &kind in kinds {
        let name = match kind {
            Which::Speckle => "speckle",
            Which::Shadow => "shadow",
            Which::Distortion => "distortion",
            Which::All => "pipeline",
        };
        let dir = a.out.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, (id, s)) in data.iter().take(a.count).enumerate() {
            let mut rng = stream(a.seed, kind as u64, i as u64, 0);
            let out = match kind {
                Which::Speckle => {
                    let mut o = s.clone();
                    o.image = apply_speckle(&s.image, &aug, &mut rng);
                    o
                }
                Which::Shadow => apply_vessel_shadow(s, &aug, &mut rng)?,
                Which::Distortion => apply_acquisition_distortion(s, &aug, &mut rng)?,
                Which::All => compose_pipeline(s, &aug, &mut rng)?,
            };
            write_sample(&out, &dir, id)?;
        }
        outputs.push(dir);
    }
    ctx.finish(m, &a.out, outputs)
}

fn train_cmd(a: TrainArgs, ctx: &Ctx) -> Result<()> {
    let rc = load_config(a.config.as_deref())?;
    let mut tc = rc.train;
    if a.desk_scale {
        let desk = TrainConfig::desk_scale();
        tc.epoch_divisor = desk.epoch_divisor;
        tc.resolution_divisor = desk.resolution_divisor;
        tc.lr_scale_on_top = desk.lr_scale_on_top;
    }
    if a.no_domain_aug {
        tc.augment.domain_specific = false;
    }
    tc.seed = a.seed.unwrap_or(tc.seed);
    tc.validate()?;
    rc.model.validate()?;
    let (train_dir, val_dir) = (a.data.join("train"), a.data.join("val"));
    require_dir(&train_dir)?;
    require_dir(&val_dir)?;
    let train_set = load_dataset(&train_dir)?;
    let val_set = load_dataset(&val_dir)?;

    #[derive(Serialize)]
    struct Resolved<'a> {
        model: &'a ModelConfig,
        train: &'a TrainConfig,
        data: &'a Path,
        checkpoint_every: usize,
    }
    let resolved = Resolved { model: &rc.model, train: &tc, data: &a.data, checkpoint_every: a.checkpoint_every };
    let m = ctx.start("train", &a.out, &resolved, Some(tc.seed))?;
    let model = Model::build(&rc.model, tc.seed)?;
    println!(
        "training {} parameters on {} samples ({} val) for {} epochs",
        model.param_count(),
        train_set.len(),
        val_set.len(),
        tc.run_epochs()
    );
    let mut outputs = Vec::new();
    let out_dir = a.out.clone();
    let every = a.checkpoint_every;
    let mut saved = Vec::new();
    let TrainOutput { model, ema, log } = train(model, &train_set, &val_set, &tc, &mut |r, live, _| {
        println!(
            "epoch {:>3}  loss {:.5}  dice region {:.4} vessel {:.4} fovea {:.4}  lr {:.3e}  {:.1}s",
            r.epoch, r.loss, r.dice_region, r.dice_vessel, r.dice_fovea, r.lr, r.seconds
        );
        if every > 0 && r.epoch % every == 0 {
            let p = out_dir.join(format!("epoch_{:03}.ckpt", r.epoch));
            live.save(&p)?;
            saved.push(p);
        }
        Ok(())
    })?;
    outputs.extend(saved);
    for (name, mdl) in [("final.ckpt", &model), ("ema.ckpt", &ema)] {
        let p = a.out.join(name);
        mdl.save(&p)?;
        outputs.push(p);
    }
    log.write(&a.out)?;
    outputs.push(a.out.join("train_log.csv"));
    outputs.push(a.out.join("train_log.json"));
    ctx.finish(m, &a.out, outputs)
}

fn eval_cmd(a: EvalArgs, ctx: &Ctx) -> Result<()> {
    let mut opts = load_config(a.config.as_deref())?.eval;
    if let Some(r) = a.roi_um {
        opts.roi.roi_width_um = r;
    }
    if let Some(anchor) = a.anchor {
        opts.anchor = match anchor {
            Anchor::Gt => FoveaAnchor::GroundTruth,
            Anchor::Predicted => FoveaAnchor::Predicted,
        };
    }
    opts.roi.validate()?;
    let model = Model::<f32>::load(&a.model)?;
    require_dir(&a.data)?;
    let data = load_dataset(&a.data)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        eval: &'a crate::metrics::EvalOptions,
        model: &'a Path,
        data: &'a Path,
    }
    let m = ctx.start("eval", &a.out, &Resolved { eval: &opts, model: &a.model, data: &a.data }, None)?;
    let mut report = evaluate(&model, &data, &opts)?;
    report.aggregate.model_size_bytes = fs::metadata(&a.model).ok().map(|md| md.len());
    let a_ = &report.aggregate;
    println!(
        "{} samples  dice region {:.4} vessel {:.4} fovea {:.4}  fovea error {:.2} px",
        a_.samples,
        a_.dice_region,
        a_.dice_vessel,
        a_.dice_fovea,
        a_.fovea_mean_distance_px.unwrap_or(f64::NAN)
    );
    let outputs = vec![
        write_file(&a.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?,
        write_file(&a.out.join("report.csv"), report.to_csv())?,
    ];
    ctx.finish(m, &a.out, outputs)
}

fn bench_cmd(a: BenchArgs, ctx: &Ctx) -> Result<()> {
    let model = match &a.model {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::build(&ModelConfig::default(), a.seed)?,
    };
    #[derive(Serialize)]
    struct Resolved<'a> {
        model: Option<&'a Path>,
        model_config: &'a ModelConfig,
        resolution: usize,
        repeats: usize,
        batch_size: usize,
    }
    let resolved = Resolved {
        model: a.model.as_deref(),
        model_config: model.config(),
        resolution: a.resolution,
        repeats: a.repeats,
        batch_size: a.batch_size,
    };
    let m = ctx.start("bench", &a.out, &resolved, Some(a.seed))?;
    let r = bench_throughput(&model, a.resolution, a.batch_size, a.repeats, a.seed)?;
    println!("{}x{} batch {}: {:.3} +- {:.3} img/s", r.resolution, r.resolution, r.batch_size, r.img_per_s, r.img_per_s_sd);
    let outputs = vec![write_file(&a.out.join("bench.json"), serde_json::to_vec_pretty(&r)?)?];
    ctx.finish(m, &a.out, outputs)
}

fn report_cmd(a: ReportArgs, ctx: &Ctx) -> Result<()> {
    let mut reports = Vec::new();
    for dir in &a.eval_dirs {
        let p = dir.join("report.json");
        if !p.exists() {
            return Err(Error::Missing(p));
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Validation { path: p.clone(), reason: e.to_string() })?;
        let label = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        reports.push((label, r));
    }
    let m = ctx.start("report", &a.out, &a.eval_dirs, None)?;
    let runs: Vec<report::Run> = reports.iter().map(|(label, r)| report::Run { label: label.clone(), report: r }).collect();
    let outputs = vec![
        write_file(&a.out.join("dice.csv"), report::dice_csv(&runs))?,
        write_file(&a.out.join("agreement.csv"), report::agreement_csv(&runs))?,
        write_file(&a.out.join("summary.svg"), report::bar_chart_svg(&runs))?,
    ];
    print!("{}", report::dice_csv(&runs));
    ctx.finish(m, &a.out, outputs)
}

fn model_info(a: ModelInfoArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => Model::<f32>::load(p)?,
        None => Model::build(&load_config(a.config.as_deref())?.model, 0)?,
    };
    let bytes = crate::checkpoint::encode(&model.to_entries()?).len();
    println!("parameters: {}", model.param_count());
    println!("serialized size: {bytes} bytes ({:.3} MB)", bytes as f64 / 1e6);
    for (name, p) in model.named_params() {
        println!("  {name:<24} {:?}", p.shape());
    }
    Ok(())
}
