//! `pgcam`: generate phantoms, train, extract saliency, localize and
//! merge reports.
//!
//! Outputs that are not named explicitly go under `$PGCAM_OUT_DIR`
//! (default `pgcam-out`).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use pgcam_core::cam::{
    cam, encode_pgsm, encode_png, grad_cam, parse_scales, pg_cam, resize_map, CamOptions, Fusion, GradSeed, Method,
    SaliencyMap,
};
use pgcam_core::io::write_atomic;
use pgcam_core::localizer::{evaluate_localization, format_boxes, LocEvalConfig, MethodSpec, DEFAULT_IOBB, DEFAULT_MIN_AREA};
use pgcam_core::models::{Model, ModelConfig, ModelKind};
use pgcam_core::phantom::{decode_pgm, read_manifest, write_dataset, Dataset, PhantomConfig, SplitCounts};
use pgcam_core::report::{fingerprint_file, merge_reports, RunReport};
use pgcam_core::trainer::{evaluate_classification, TrainConfig, TrainHooks, Trainer};

const OUT_DIR_ENV: &str = "PGCAM_OUT_DIR";

#[derive(Parser)]
#[command(name = "pgcam", version, about = "Weakly supervised tumor localization with pyramid gradient CAMs")]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "pgcam-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/eval_loc phantom splits with manifests.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Classification metrics of a checkpoint over a manifest.
    Eval(EvalArgs),
    /// Saliency map of one image.
    Cam(CamArgs),
    /// Box extraction and IOBB scoring over an annotated manifest.
    Localize(LocalizeArgs),
    /// Merge run reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset directory [default: <out-dir>/data].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train_n: usize,
    #[arg(long, default_value_t = 400)]
    val_n: usize,
    #[arg(long, default_value_t = 100)]
    loc_n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Tumor prevalence of the train and val splits.
    #[arg(long, default_value_t = 0.15)]
    prevalence: f64,
    /// Tumor prevalence of the eval_loc split.
    #[arg(long, default_value_t = 1.0)]
    loc_prevalence: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "dcfpn")]
    model: ModelKind,
    /// Dense connections (DC-FPN only).
    #[arg(long, value_enum, default_value = "on")]
    dense: OnOff,
    /// Dataset directory holding train.tsv and optionally val.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Iterations between tenfold learning-rate decays.
    #[arg(long, default_value_t = 1000)]
    decay_every: usize,
    /// Draw half of each batch from each class.
    #[arg(long)]
    balanced: bool,
    /// Pyramid depth.
    #[arg(long, default_value_t = 4)]
    scales: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    /// [default: <out-dir>/<model>.pgck]
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    /// Write a resumable checkpoint every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from a checkpoint written by this command.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-iteration `iter lr loss` log [default: <checkpoint>.log].
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// [default: <out-dir>/eval.report]
    #[arg(long)]
    out_report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SeedArg {
    Logit,
    Logprob,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Sum,
    NormalizedSum,
}

#[derive(Args)]
struct SaliencyArgs {
    #[arg(long, default_value = "pgcam")]
    method: Method,
    /// Scale subset such as 1 or 1,4 [default: all tapped scales].
    #[arg(long)]
    scales: Option<String>,
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Scalar differentiated by Grad-CAM.
    #[arg(long, value_enum, default_value = "logit")]
    grad_seed: SeedArg,
    #[arg(long, value_enum, default_value = "sum")]
    fusion: FusionArg,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Binary graymap (P5) input.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    saliency: SaliencyArgs,
    /// Raw map at input resolution [default: <out-dir>/<image>.<method>.pgsm].
    #[arg(long)]
    out_map: Option<PathBuf>,
    /// Grayscale rendering, min black and max white.
    #[arg(long)]
    out_png: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest whose entries carry ground-truth boxes.
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    saliency: SaliencyArgs,
    /// Saliency threshold [default: 0.4 for pgcam, 0.8 otherwise].
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_IOBB)]
    iobb: f64,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    min_area: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// [default: <out-dir>/<method label>.report]
    #[arg(long)]
    out_report: Option<PathBuf>,
    /// Also write one box file per image into this directory.
    #[arg(long)]
    boxes_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// [default: <out-dir>/merged.report]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure that should be reported like a flag misuse.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_dir = cli.out_dir;
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, &out_dir),
        Command::Train(a) => train(a, &out_dir),
        Command::Eval(a) => eval(a, &out_dir),
        Command::Cam(a) => cam_cmd(a, &out_dir),
        Command::Localize(a) => localize(a, &out_dir),
        Command::Report(a) => report(a, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => match e.downcast_ref::<Usage>() {
            Some(u) => Cli::command().error(clap::error::ErrorKind::ValueValidation, u).exit(),
            None => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        },
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs, out_dir: &Path) -> Result<()> {
    let out = a.out.unwrap_or_else(|| out_dir.join("data"));
    let config = PhantomConfig {
        image_size: a.size,
        prevalence: a.prevalence,
        seed: a.seed,
        ..PhantomConfig::default()
    };
    let counts = SplitCounts {
        train: a.train_n,
        val: a.val_n,
        loc: a.loc_n,
        loc_prevalence: a.loc_prevalence,
    };
    let paths = write_dataset(&config, &counts, &out)?;
    for p in [&paths.train, &paths.val, &paths.loc] {
        println!("{}", p.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Model<f32>> {
    Model::load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn train(a: TrainArgs, out_dir: &Path) -> Result<()> {
    let dense = matches!(a.dense, OnOff::On);
    if a.model == ModelKind::Baseline && !dense {
        return Err(usage("--dense off applies to dcfpn only"));
    }
    let train_set = load_dataset(&a.data.join("train.tsv"))?;
    let val_path = a.data.join("val.tsv");
    let val_set = if val_path.exists() { Some(load_dataset(&val_path)?) } else { None };
    if train_set.is_empty() {
        bail!("training split is empty");
    }
    let ckpt = a
        .out_checkpoint
        .unwrap_or_else(|| out_dir.join(format!("{}.pgck", a.model)));
    ensure_parent(&ckpt)?;
    let log_path = a.log.unwrap_or_else(|| ckpt.with_extension("log"));
    let config = TrainConfig {
        base_lr: a.lr,
        decay_every: a.decay_every,
        max_iterations: a.iters,
        batch_size: a.batch,
        seed: a.seed,
        balanced: a.balanced,
        ..TrainConfig::default()
    };
    let mut trainer = match &a.resume {
        Some(p) => Trainer::<f32>::resume(p, config).with_context(|| format!("resuming from {}", p.display()))?,
        None => {
            let mc = ModelConfig {
                input_size: train_set.image_size(),
                scales: a.scales,
                base_channels: a.base_channels,
                dense,
                seed: a.seed,
                ..ModelConfig::default()
            };
            Trainer::new(Model::build(a.model, &mc)?, config)?
        }
    };
    if trainer.model.config().input_size != train_set.image_size() {
        bail!(
            "checkpoint expects {0}x{0} images, dataset has {1}x{1}",
            trainer.model.config().input_size,
            train_set.image_size()
        );
    }
    let start = Instant::now();
    let mut log = Vec::new();
    let resumed_at = trainer.iteration;
    trainer.run(
        &train_set,
        val_set.as_ref(),
        TrainHooks {
            log: Some(&mut log),
            checkpoint: a.checkpoint_every.map(|n| (ckpt.as_path(), n)),
            stop_after: None,
        },
    )?;
    trainer.save(&ckpt)?;
    if resumed_at > 0 && log_path.exists() {
        let mut prev = std::fs::read(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
        prev.extend_from_slice(&log);
        log = prev;
    }
    write_output(&log_path, &log)?;
    let h = &trainer.history;
    println!("checkpoint\t{}", ckpt.display());
    println!("log\t{}", log_path.display());
    println!("iterations\t{}", trainer.iteration);
    if let Some(l) = h.loss.last() {
        println!("final_loss\t{l}");
    }
    if let Some((it, acc)) = h.val_accuracy.last() {
        println!("val_accuracy\t{acc}\t(iteration {it})");
    }
    if !h.skipped.is_empty() {
        println!("skipped_updates\t{}", h.skipped.len());
    }
    println!("seconds\t{:.1}", start.elapsed().as_secs_f64());
    Ok(())
}

fn eval(a: EvalArgs, out_dir: &Path) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_dataset(&a.manifest)?;
    let start = Instant::now();
    let m = evaluate_classification(&model, &data, a.batch.max(1))?;
    let mut report = RunReport::new(fingerprint_file(&a.manifest)?);
    report.set("command", "eval");
    report.set("checkpoint", a.checkpoint.display());
    report.set("manifest", a.manifest.display());
    report.set("model", model.kind());
    report.set("dense", model.config().dense);
    report.set("seconds", start.elapsed().as_secs_f64());
    let label = format!("{}{}", model.kind(), if model.config().dense { "" } else { "-nodense" });
    report.push_classification(&label, &m);
    let out = a.out_report.unwrap_or_else(|| out_dir.join("eval.report"));
    write_output(&out, report.emit()?.as_bytes())?;
    println!("accuracy\t{}", m.accuracy);
    for (c, r) in m.recall.iter().enumerate() {
        println!("recall{c}\t{r}");
    }
    println!("report\t{}", out.display());
    Ok(())
}

/// Validated method spec for `model`. Grad-CAM over several scales is a
/// usage error: fusion is what pgcam is for.
fn method_spec(model: &Model<f32>, s: &SaliencyArgs, tau: Option<f64>) -> Result<MethodSpec> {
    let scales = match &s.scales {
        Some(text) => parse_scales(text).map_err(usage)?,
        None => match s.method {
            Method::GradCam | Method::Cam => vec![model.head_scale()],
            Method::PgCam => model.tap_scales(),
        },
    };
    if s.method == Method::GradCam && scales.len() > 1 {
        return Err(usage(format!(
            "gradcam takes a single scale, got {}; use --method pgcam to fuse several scales",
            scales.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        )));
    }
    let avail = model.tap_scales();
    if s.method != Method::Cam {
        if let Some(p) = scales.iter().find(|p| !avail.contains(p)) {
            return Err(usage(format!("scale {p} is not tapped by this {} model (available: {avail:?})", model.kind())));
        }
    }
    if s.class >= model.config().classes {
        return Err(usage(format!("class {} out of range for {} classes", s.class, model.config().classes)));
    }
    let mut spec = MethodSpec::new(s.method, &scales);
    if let Some(t) = tau {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(format!("--tau {t} outside [0, 1]")));
        }
        spec.tau = t;
    }
    spec.opts = CamOptions {
        seed: match s.grad_seed {
            SeedArg::Logit => GradSeed::ClassLogit,
            SeedArg::Logprob => GradSeed::LogProb,
        },
        fusion: match s.fusion {
            FusionArg::Sum => Fusion::SumThenNormalize,
            FusionArg::NormalizedSum => Fusion::NormalizeThenSum,
        },
        ..CamOptions::default()
    };
    Ok(spec)
}

fn cam_cmd(a: CamArgs, out_dir: &Path) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let spec = method_spec(&model, &a.saliency, None)?;
    let bytes = std::fs::read(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let img = decode_pgm(&bytes).with_context(|| format!("decoding {}", a.image.display()))?;
    let size = model.config().input_size;
    if img.width != size || img.height != size {
        bail!("image is {}x{}, model expects {size}x{size}", img.width, img.height);
    }
    let data = Dataset::from_parts(vec![img], vec![0], vec![Vec::new()])?;
    let x = data.batch::<f32>(&[0]);
    let class = a.saliency.class;
    let map: SaliencyMap = match spec.method {
        Method::Cam => resize_map(&cam(&model, &x, class)?, size, size, spec.opts.resize)?,
        Method::GradCam => resize_map(
            &grad_cam(&model, &x, class, spec.scales[0], spec.opts.seed)?,
            size,
            size,
            spec.opts.resize,
        )?,
        Method::PgCam => pg_cam(&model, &x, class, &spec.scales, &spec.opts)?,
    };
    let stem = a.image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let out_map = a
        .out_map
        .unwrap_or_else(|| out_dir.join(format!("{stem}.{}.pgsm", spec.label().replace([':', ','], "_"))));
    let png = match &a.out_png {
        Some(p) => Some((p, encode_png(&map)?)),
        None => None,
    };
    write_output(&out_map, &encode_pgsm(&map))?;
    println!("map\t{}", out_map.display());
    if let Some((p, bytes)) = png {
        write_output(p, &bytes)?;
        println!("png\t{}", p.display());
    }
    let (y, x) = map.argmax();
    println!("min\t{}\nmax\t{}\nargmax\t{x},{y}", map.min(), map.max());
    Ok(())
}

fn localize(a: LocalizeArgs, out_dir: &Path) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let spec = method_spec(&model, &a.saliency, a.tau)?;
    if !(a.iobb > 0.0 && a.iobb <= 1.0) {
        return Err(usage(format!("--iobb {} outside (0, 1]", a.iobb)));
    }
    let manifest = read_manifest(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    if !manifest.has_boxes() {
        bail!("{} has no ground-truth boxes; localization needs the eval_loc split", a.manifest.display());
    }
    let data = Dataset::from_manifest(&manifest)?;
    let cfg = LocEvalConfig {
        min_area: a.min_area,
        iobb: a.iobb,
        class: a.saliency.class,
        batch: a.batch.max(1),
    };
    let start = Instant::now();
    let results = evaluate_localization(&model, &data, std::slice::from_ref(&spec), &cfg)?;
    let r = &results[0];
    let names: Vec<String> = manifest.entries.iter().map(|e| e.path.display().to_string()).collect();
    let mut report = RunReport::new(fingerprint_file(&a.manifest)?);
    report.set("command", "localize");
    report.set("checkpoint", a.checkpoint.display());
    report.set("manifest", a.manifest.display());
    report.set("model", model.kind());
    report.set("dense", model.config().dense);
    report.set("method", spec.label());
    report.set("tau", spec.tau);
    report.set("iobb", a.iobb);
    report.set("min_area", a.min_area);
    report.set("class", a.saliency.class);
    report.set("seconds", start.elapsed().as_secs_f64());
    let label = format!("{}/{}", model.kind(), spec.label());
    report.push_localization(&label, r, &names);
    let out = a
        .out_report
        .unwrap_or_else(|| out_dir.join(format!("{}.report", label.replace(['/', ':', ','], "_"))));
    let text = report.emit()?;
    if let Some(dir) = &a.boxes_dir {
        for (dets, name) in r.detections.iter().zip(&names) {
            let file = Path::new(name).with_extension("box");
            write_output(&dir.join(file), format_boxes(dets).as_bytes())?;
        }
    }
    write_output(&out, text.as_bytes())?;
    let m = r.metrics;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{label}\tprecision={}\taccuracy={}\tf1={}\ttp={}\tfp={}\tfn={}",
        m.precision, m.accuracy, m.f1, r.counts.tp, r.counts.fp, r.counts.fn_
    )?;
    writeln!(stdout, "report\t{}", out.display())?;
    Ok(())
}

fn report(a: ReportArgs, out_dir: &Path) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| RunReport::load(p).with_context(|| format!("reading report {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let merged = merge_reports(&reports)?;
    let out = a.out.unwrap_or_else(|| out_dir.join("merged.report"));
    write_output(&out, merged.emit()?.as_bytes())?;
    let mut keys: Vec<&str> = Vec::new();
    for row in &merged.rows {
        for (k, _) in &row.metrics {
            if !keys.contains(&k.as_str()) {
                keys.push(k);
            }
        }
    }
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "row\t{}", keys.join("\t"))?;
    for row in &merged.rows {
        let cells: Vec<String> = keys
            .iter()
            .map(|k| row.get(k).map_or_else(|| "-".into(), |v| format!("{v:.4}")))
            .collect();
        writeln!(stdout, "{}\t{}", row.label, cells.join("\t"))?;
    }
    writeln!(stdout, "report\t{}", out.display())?;
    Ok(())
}
