use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use omnia::annotations::{parse_dataset, Dataset, DetectionSet};
use omnia::assignment::{anchor_grid, assign_image, AssignConfig};
use omnia::gradcheck;
use omnia::merging::{iterate, merge_pair, DetectionPair, DetectionSource, MergeConfig, RecordedDetections};
use omnia::metrics::evaluate;
use omnia::selection::{select, SelectionConfig};
use omnia::simulator::{self, Environment, ExperimentConfig, SimulatedSource};

const DEFAULT_SEED: u64 = 3;

#[derive(Parser)]
#[command(name = "omnia", version, about = "Merge detection datasets with disjoint label spaces")]
struct Cli {
    /// Master seed; overrides the seed of a config file. Defaults to 3.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter (overrides OMNIA_LOG), e.g. `info` or `omnia=debug`.
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Directory that relative output paths are written under.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enrich two datasets with cross-detections and merge them.
    Merge(MergeArgs),
    /// Split one detection file into safe and unsafe pseudo-labels.
    Select(SelectArgs),
    /// Dump anchor labels and ROI targets per image.
    Assign(AssignArgs),
    /// AP and oLRP of detections against ground truth.
    Eval(EvalArgs),
    /// Check the SoftSig gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a synthetic experiment.
    Simulate(SimulateArgs),
    /// Repeat enrichment over several rounds.
    Iterate(IterateArgs),
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Detections of B's detector on A's images, in B's category ids.
    #[arg(long)]
    det_on_a: PathBuf,
    /// Detections of A's detector on B's images, in A's category ids.
    #[arg(long)]
    det_on_b: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Dataset the detections were run on.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    dets: PathBuf,
    /// Annotation file whose categories the detection ids refer to.
    /// Defaults to the target's taxonomy.
    #[arg(long)]
    det_taxonomy: Option<PathBuf>,
    /// TOML selection config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct AssignArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Restrict to one image.
    #[arg(long)]
    image_id: Option<u64>,
    /// Proposal boxes in the detection format; generated from the
    /// dataset's boxes when absent.
    #[arg(long)]
    rois: Option<PathBuf>,
    /// TOML with `[assign]` and `[anchors]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Localization threshold of oLRP.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment TOML; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write hidden.json, a.json, b.json, det_on_a.json and
    /// det_on_b.json to this directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct IterateArgs {
    /// Experiment TOML for simulated rounds, or merge TOML with --a/--b.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Recorded mode: dataset A (requires --b and one detection file per round).
    #[arg(long, requires_all = ["b", "det_on_a", "det_on_b"])]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    /// Repeat once per round.
    #[arg(long)]
    det_on_a: Vec<PathBuf>,
    #[arg(long)]
    det_on_b: Vec<PathBuf>,
}

/// Report wrapper echoing the seed.
#[derive(Serialize)]
struct Seeded<T: Serialize> {
    seed: u64,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AssignFile {
    assign: Option<AssignConfig>,
    anchors: AnchorSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AnchorSpec {
    stride: f64,
    sizes: Vec<f64>,
    ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        AnchorSpec { stride: e.anchor_stride, sizes: e.anchor_sizes, ratios: e.anchor_ratios }
    }
}

struct Ctx {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn seed_or(&self, config: u64) -> u64 {
        self.seed.unwrap_or(config)
    }

    fn output(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn write(&self, p: &Path, text: &str) -> anyhow::Result<()> {
        let p = self.output(p);
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let mut text = text.to_string();
        text.push('\n');
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        tracing::info!(path = %p.display(), "wrote");
        Ok(())
    }

    fn write_json<T: Serialize>(&self, p: &Path, value: &T) -> anyhow::Result<()> {
        self.write(p, &serde_json::to_string_pretty(value)?)
    }
}

fn read(p: &Path) -> anyhow::Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn read_dataset(p: &Path) -> anyhow::Result<Dataset> {
    parse_dataset(&read(p)?).with_context(|| format!("parsing {}", p.display()))
}

fn read_detections(p: &Path) -> anyhow::Result<DetectionSet> {
    DetectionSet::parse(&read(p)?).with_context(|| format!("parsing {}", p.display()))
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(p: Option<&Path>) -> anyhow::Result<T> {
    match p {
        None => Ok(T::default()),
        Some(p) => toml::from_str(&read(p)?).with_context(|| format!("parsing {}", p.display())),
    }
}

fn run_merge(ctx: &Ctx, args: &MergeArgs) -> anyhow::Result<()> {
    let cfg: MergeConfig = read_toml(args.config.as_deref())?;
    let a = read_dataset(&args.a)?;
    let b = read_dataset(&args.b)?;
    let pair = DetectionPair { on_a: read_detections(&args.det_on_a)?, on_b: read_detections(&args.det_on_b)? };
    let out = merge_pair(&a, &b, &pair, &cfg)?;
    ctx.write(&args.out, &out.merged.dataset.to_json())?;
    if let Some(stats) = &args.stats {
        ctx.write_json(stats, &Seeded { seed: ctx.seed_or(DEFAULT_SEED), body: out.stats() })?;
    }
    Ok(())
}

fn run_select(ctx: &Ctx, args: &SelectArgs) -> anyhow::Result<()> {
    let cfg: SelectionConfig = read_toml(args.config.as_deref())?;
    let target = read_dataset(&args.target)?;
    let categories = match &args.det_taxonomy {
        Some(p) => read_dataset(p)?.categories,
        None => target.categories.clone(),
    };
    let dets = read_detections(&args.dets)?;
    let result = select(&dets, &categories, &target, &cfg)?;
    let selected = Dataset { images: target.images.clone(), categories, instances: result.selected() };
    ctx.write(&args.out, &selected.to_json())?;
    if let Some(stats) = &args.stats {
        ctx.write_json(stats, &Seeded { seed: ctx.seed_or(DEFAULT_SEED), body: &result.stats })?;
    }
    Ok(())
}

fn run_assign(ctx: &Ctx, args: &AssignArgs) -> anyhow::Result<()> {
    let file: AssignFile = read_toml(args.config.as_deref())?;
    let mut cfg = file.assign.unwrap_or_default();
    cfg.seed = ctx.seed_or(cfg.seed);
    let d = read_dataset(&args.dataset)?;
    let given = match &args.rois {
        Some(p) => Some(read_detections(p)?.resolve(&d.categories, &d.images)?),
        None => None,
    };
    let by_image = d.instances_by_image();
    let mut dumps = Vec::new();
    for img in &d.images {
        if args.image_id.is_some_and(|id| id != img.id) {
            continue;
        }
        let instances: Vec<_> = by_image.get(&img.id).cloned().unwrap_or_default();
        let rois = match &given {
            Some(g) => g.detections.iter().filter(|r| r.image_id == img.id).map(|r| r.bbox).collect(),
            None => simulator::proposals(img, &instances, cfg.seed),
        };
        let anchors = anchor_grid(
            img.width as f64,
            img.height as f64,
            file.anchors.stride,
            &file.anchors.sizes,
            &file.anchors.ratios,
        );
        let owned: Vec<_> = instances.into_iter().cloned().collect();
        dumps.push(assign_image(img.id, anchors, rois, &owned, &d.categories, &cfg)?);
    }
    if let Some(id) = args.image_id {
        if dumps.is_empty() {
            bail!(omnia::Error::Reference { entity: "assign".into(), kind: "image", id });
        }
    }
    ctx.write_json(&args.out, &Seeded { seed: cfg.seed, body: serde_json::json!({ "images": dumps }) })
}

fn run_eval(ctx: &Ctx, args: &EvalArgs) -> anyhow::Result<()> {
    let gt = read_dataset(&args.gt)?;
    let dets = read_detections(&args.dets)?;
    let report = evaluate(&dets, &gt, args.iou, args.tau)?;
    ctx.write_json(&args.out, &Seeded { seed: ctx.seed_or(DEFAULT_SEED), body: report })
}

fn run_gradcheck(ctx: &Ctx, args: &GradcheckArgs) -> anyhow::Result<bool> {
    let report = gradcheck::run(ctx.seed_or(DEFAULT_SEED), args.trials, args.tolerance)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.passed)
}

fn experiment_config(ctx: &Ctx, path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_toml(path)?;
    cfg.seed = ctx.seed_or(cfg.seed);
    Ok(cfg)
}

fn run_simulate(ctx: &Ctx, args: &SimulateArgs) -> anyhow::Result<()> {
    let cfg = experiment_config(ctx, args.config.as_deref())?;
    let report = simulator::run_experiment(&cfg)?;
    if let Some(dir) = &args.data_dir {
        let env = Environment::build(&cfg)?;
        let pair = SimulatedSource::new(&env, &cfg).detections(1, None)?;
        ctx.write(&dir.join("hidden.json"), &env.hidden.to_json())?;
        ctx.write(&dir.join("a.json"), &env.dataset_a.to_json())?;
        ctx.write(&dir.join("b.json"), &env.dataset_b.to_json())?;
        ctx.write(&dir.join("det_on_a.json"), &pair.on_a.to_json())?;
        ctx.write(&dir.join("det_on_b.json"), &pair.on_b.to_json())?;
    }
    ctx.write_json(&args.out, &report)
}

fn run_iterate(ctx: &Ctx, args: &IterateArgs) -> anyhow::Result<()> {
    let Some(a_path) = &args.a else {
        let mut cfg = experiment_config(ctx, args.config.as_deref())?;
        if let Some(r) = args.rounds {
            cfg.rounds = r;
        }
        let rounds = simulator::run_rounds(&cfg)?;
        return ctx.write_json(&args.out, &Seeded { seed: cfg.seed, body: serde_json::json!({ "rounds": rounds }) });
    };
    let cfg: MergeConfig = read_toml(args.config.as_deref())?;
    let rounds = args.rounds.unwrap_or(cfg.rounds);
    let a = read_dataset(a_path)?;
    let b = read_dataset(args.b.as_deref().expect("clap enforces --b"))?;
    if args.det_on_a.len() != args.det_on_b.len() {
        bail!(omnia::Error::Config("--det-on-a and --det-on-b must be repeated equally".into()));
    }
    let mut source = RecordedDetections {
        rounds: args
            .det_on_a
            .iter()
            .zip(&args.det_on_b)
            .map(|(pa, pb)| Ok(DetectionPair { on_a: read_detections(pa)?, on_b: read_detections(pb)? }))
            .collect::<anyhow::Result<_>>()?,
    };
    let outs = iterate(&a, &b, &mut source, rounds, &cfg)?;
    let last = outs.last().expect("at least one round");
    ctx.write(&args.out, &last.merged.dataset.to_json())?;
    let stats: Vec<_> = outs.iter().map(|o| o.stats()).collect();
    let stats_path = args.out.with_extension("stats.json");
    ctx.write_json(
        &stats_path,
        &Seeded { seed: ctx.seed_or(DEFAULT_SEED), body: serde_json::json!({ "rounds": stats }) },
    )
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(core) = e.downcast_ref::<omnia::Error>() {
        core.kind()
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else if e.downcast_ref::<toml::de::Error>().is_some() {
        "config"
    } else if e.downcast_ref::<serde_json::Error>().is_some() {
        "serialization"
    } else {
        "internal"
    }
}

fn report_error(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(2)
}

fn init_logging(level: Option<&str>) {
    use tracing_subscriber::EnvFilter;
    let filter = match level {
        Some(l) => EnvFilter::try_new(l).ok(),
        None => EnvFilter::try_from_env("OMNIA_LOG").ok(),
    }
    .unwrap_or_else(|| EnvFilter::new("warn"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_error("usage", e.render().to_string().trim()),
    };
    init_logging(cli.log_level.as_deref());
    let ctx = Ctx { seed: cli.seed, out_dir: cli.out_dir };

    let result = match &cli.command {
        Command::Merge(a) => run_merge(&ctx, a),
        Command::Select(a) => run_select(&ctx, a),
        Command::Assign(a) => run_assign(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::Simulate(a) => run_simulate(&ctx, a),
        Command::Iterate(a) => run_iterate(&ctx, a),
        Command::Gradcheck(a) => match run_gradcheck(&ctx, a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(1),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(error_kind(&e), &format!("{e:#}")),
    }
}
