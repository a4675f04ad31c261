//! `famda` command line: dataset synthesis, pseudo-label refinement,
//! self-training, evaluation, and report aggregation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use famda_core::eval::{evaluate_depth, ConfusionMatrix, DepthEvalConfig};
use famda_core::grid::{argmax_labels, DepthMap, Image, LabelMap};
use famda_core::model::{extract_features, DepthLossKind, TrainConfig};
use famda_core::refine::refine_dataset;
use famda_core::selftrain::{train_loop, SourceDataset, TargetDataset};
use famda_core::synthworld::{
    generate_dataset, OracleSpec, SceneDistribution, ShiftSpec, NUM_CLASSES, PALETTE,
};
use famda_core::MultiTaskModel;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "famda", about = "Multi-task UDA trainer on procedural scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired source/target dataset trees.
    Synth(SynthArgs),
    /// Majority-vote refine teacher labels with cached masks.
    Refine(RefineArgs),
    /// Run the self-training loop and write a checkpoint plus trace.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a labeled split, writing a JSON report.
    Eval(EvalArgs),
    /// Aggregate several eval reports into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; receives source/ and target/ subtrees.
    #[arg(long)]
    out: PathBuf,
    /// Images per domain.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Photometric shift strength applied to the target domain.
    #[arg(long, default_value_t = 0.6)]
    shift: f64,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RefineArgs {
    /// Directory holding teacher_labels/ and masks/.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to <data>/refined_labels.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root holding source/ and target/ (from `famda synth`).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.fmdl, trace.jsonl, config.json.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Disable mask-vote pseudo-label refinement.
    #[arg(long)]
    no_refine: bool,
    /// Disable class-mix augmentation.
    #[arg(long)]
    no_mix: bool,
    /// Train only on the source domain (the baseline).
    #[arg(long)]
    source_only: bool,
    /// Supervise the depth head with plain RMSE instead of the
    /// scale/shift-invariant loss (ablation).
    #[arg(long)]
    plain_depth_loss: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled split directory (images/, labels/, depth/).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Report path; defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write color label maps and grayscale depth maps here.
    #[arg(long)]
    render: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Eval report JSON files.
    files: Vec<PathBuf>,
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("FAMDA_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Refine(args) => cmd_refine(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dist = SceneDistribution::default();
    let oracle = OracleSpec::default();
    generate_dataset(
        &args.out.join("source"),
        args.n,
        &dist,
        &ShiftSpec::identity(),
        &oracle,
        args.seed,
        args.force,
    )
    .context("generating source domain")?;
    generate_dataset(
        &args.out.join("target"),
        args.n,
        &dist,
        &ShiftSpec::with_strength(args.shift),
        &oracle,
        args.seed.wrapping_add(1),
        args.force,
    )
    .context("generating target domain")?;
    println!(
        "wrote {} images per domain under {}",
        args.n,
        args.out.display()
    );
    Ok(())
}

fn cmd_refine(args: RefineArgs) -> Result<()> {
    let out = args
        .out
        .unwrap_or_else(|| args.data.join("refined_labels"));
    let summaries = refine_dataset(&args.data, &args.data.join("masks"), &out, NUM_CLASSES)
        .context("refining dataset")?;
    let mut failed = 0usize;
    for s in &summaries {
        match (&s.changed_pixels, &s.error) {
            (Some(n), _) => println!("{}: {} pixels changed", s.stem, n),
            (_, Some(e)) => {
                eprintln!("{}: {}", s.stem, e);
                failed += 1;
            }
            _ => {}
        }
    }
    if failed > 0 {
        bail!("{failed} image(s) failed");
    }
    Ok(())
}

/// Flat key=value lines; `#` starts a comment. Unknown keys are rejected so
/// typos fail loudly.
fn apply_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let ctx = || format!("{}:{}: bad value for {key}", path.display(), lineno + 1);
        match key {
            "alpha" => cfg.alpha = value.parse().with_context(ctx)?,
            "beta" => cfg.beta = value.parse().with_context(ctx)?,
            "lr" => cfg.lr = value.parse().with_context(ctx)?,
            "iters" => cfg.iters = value.parse().with_context(ctx)?,
            "batch" => cfg.batch = value.parse().with_context(ctx)?,
            "seed" => cfg.seed = value.parse().with_context(ctx)?,
            "quality_tau" => cfg.quality_tau = value.parse().with_context(ctx)?,
            "mix" => cfg.mix = value.parse().with_context(ctx)?,
            "refine" => cfg.refine = value.parse().with_context(ctx)?,
            "warmup" => cfg.warmup = value.parse().with_context(ctx)?,
            "crop" => cfg.crop = value.parse().with_context(ctx)?,
            "jitter" => cfg.jitter = value.parse().with_context(ctx)?,
            "src_jitter" => cfg.src_jitter = value.parse().with_context(ctx)?,
            "log_every" => cfg.log_every = value.parse().with_context(ctx)?,
            "source_only" => cfg.source_only = value.parse().with_context(ctx)?,
            "depth_loss" => {
                cfg.depth_loss = match value {
                    "ssi" => DepthLossKind::Ssi,
                    "plain" => DepthLossKind::Plain,
                    other => bail!("{}:{}: unknown depth_loss {other}", path.display(), lineno + 1),
                }
            }
            other => bail!("{}:{}: unknown key {other}", path.display(), lineno + 1),
        }
    }
    Ok(())
}

fn effective_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        apply_config_file(&mut cfg, path)?;
    }
    macro_rules! flag {
        ($field:ident, $flag:expr) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    flag!(alpha, args.alpha);
    flag!(beta, args.beta);
    flag!(quality_tau, args.tau);
    flag!(lr, args.lr);
    flag!(iters, args.iters);
    flag!(batch, args.batch);
    flag!(seed, args.seed);
    flag!(warmup, args.warmup);
    flag!(log_every, args.log_every);
    if args.no_refine {
        cfg.refine = false;
    }
    if args.no_mix {
        cfg.mix = false;
    }
    if args.source_only {
        cfg.source_only = true;
    }
    if args.plain_depth_loss {
        cfg.depth_loss = DepthLossKind::Plain;
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = effective_config(&args)?;
    let source = SourceDataset::load(&args.data.join("source"), NUM_CLASSES)
        .context("loading source split")?;
    let target = TargetDataset::load(&args.data.join("target"), NUM_CLASSES, true)
        .context("loading target split")?;
    let outcome = train_loop(&source, &target, &cfg).context("training")?;
    std::fs::create_dir_all(&args.out)?;
    outcome
        .model
        .save(&args.out.join("checkpoint.fmdl"))
        .context("writing checkpoint")?;
    famda_core::selftrain::write_trace(&outcome.trace, &args.out.join("trace.jsonl"))
        .context("writing trace")?;
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "done: {} steps, l_ce_s {:.4}, l_ce_t {:.4}, l_rmse_t {:.4}{}",
            last.step,
            last.l_ce_s,
            last.l_ce_t,
            last.l_rmse_t,
            last.miou
                .map(|m| format!(", target miou {:.4}", m))
                .unwrap_or_default()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
    rmse_m: f64,
    num_images: usize,
    config: EvalReportConfig,
}

#[derive(Serialize)]
struct EvalReportConfig {
    data: String,
    checkpoint: String,
    min_depth: f64,
    max_depth: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = MultiTaskModel::load(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if model.num_classes != NUM_CLASSES as usize {
        bail!(
            "checkpoint has {} classes, expected {}",
            model.num_classes,
            NUM_CLASSES
        );
    }
    let images_dir = args.data.join("images");
    let mut names: Vec<String> = std::fs::read_dir(&images_dir)
        .with_context(|| format!("reading {}", images_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            if p.extension().is_some_and(|x| x == "png") {
                p.file_stem().map(|s| s.to_string_lossy().into_owned())
            } else {
                None
            }
        })
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no images under {}", images_dir.display());
    }
    if let Some(dir) = &args.render {
        std::fs::create_dir_all(dir)?;
    }
    let depth_cfg = DepthEvalConfig::default();
    let mut cm = ConfusionMatrix::new(model.num_classes);
    let mut rmse_sum = 0.0;
    let mut rmse_n = 0usize;
    for name in &names {
        let img = Image::load_png(&images_dir.join(format!("{name}.png")))?;
        let gt_labels =
            LabelMap::load_png(&args.data.join("labels").join(format!("{name}.png")), NUM_CLASSES)?;
        let gt_depth = DepthMap::load_fdpt(&args.data.join("depth").join(format!("{name}.fdpt")))?;
        let feats = extract_features(&img);
        let (probs, depth) = model.forward(&feats);
        let pred = argmax_labels(&probs);
        cm.accumulate(&pred, &gt_labels)?;
        if let Ok(r) = evaluate_depth(&depth, &gt_depth, &depth_cfg) {
            rmse_sum += r;
            rmse_n += 1;
        }
        if let Some(dir) = &args.render {
            render_labels(&pred).save_png(&dir.join(format!("{name}_seg.png")))?;
            render_depth(&depth).save_png(&dir.join(format!("{name}_depth.png")))?;
        }
    }
    let (per_class_iou, miou) = cm.iou()?;
    if rmse_n == 0 {
        bail!("no image produced a valid depth comparison");
    }
    let report = EvalReport {
        miou,
        per_class_iou,
        rmse_m: rmse_sum / rmse_n as f64,
        num_images: names.len(),
        config: EvalReportConfig {
            data: args.data.display().to_string(),
            checkpoint: args.checkpoint.display().to_string(),
            min_depth: depth_cfg.min_depth,
            max_depth: depth_cfg.max_depth,
        },
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => std::fs::write(path, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

fn render_labels(labels: &LabelMap) -> Image {
    let mut data = Vec::with_capacity(labels.data.len() * 3);
    for &l in &labels.data {
        let rgb = PALETTE.get(l as usize).copied().unwrap_or([0.0, 0.0, 0.0]);
        data.extend_from_slice(&rgb);
    }
    Image::new(labels.height, labels.width, data).expect("palette image")
}

fn render_depth(depth: &DepthMap) -> Image {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&d, &v) in depth.data.iter().zip(&depth.valid) {
        if v {
            lo = lo.min(d);
            hi = hi.max(d);
        }
    }
    let span = (hi - lo).max(1e-12);
    let mut data = Vec::with_capacity(depth.data.len() * 3);
    for (&d, &v) in depth.data.iter().zip(&depth.valid) {
        let g = if v { (d - lo) / span } else { 0.0 };
        data.extend_from_slice(&[g, g, g]);
    }
    Image::new(depth.height, depth.width, data).expect("depth image")
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    if args.files.is_empty() {
        bail!("no report files given");
    }
    println!("{:<40} {:>8} {:>10} {:>8}", "report", "miou", "rmse_m", "images");
    for path in &args.files {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        let miou = v["miou"].as_f64().context("missing miou")?;
        let rmse = v["rmse_m"].as_f64().context("missing rmse_m")?;
        let n = v["num_images"].as_u64().context("missing num_images")?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        println!("{name:<40} {miou:>8.4} {rmse:>10.4} {n:>8}");
    }
    Ok(())
}
