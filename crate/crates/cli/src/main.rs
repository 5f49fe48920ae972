use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slowfast_core::checkpoint::{Checkpoint, Container, Meta};
use slowfast_core::data::{make_synthetic_stream_with, SyntheticConfig, TaskStream};
use slowfast_core::dreaming::{dream_roster, DreamConfig, DreamSet};
use slowfast_core::fusion::{barrier_sweep, fuse_linear, meta_fuse, EvalSet, Granularity, MetaConfig, OldTaskScope};
use slowfast_core::harness::{digest, load_run, run_continual, ExperimentConfig, FusionMethod, ProjectionMode, StreamConfig};
use slowfast_core::landscape::{landscape_slice, GridSpec, Plane};
use slowfast_core::{Error, ErrorClass, Network, Result};

mod grid;

/// Continual learning with slow/fast split training and dream-driven model fusion.
///
/// Exit codes: 0 success, 1 other failure, 2 configuration error,
/// 3 data or file-format error, 4 numeric failure.
#[derive(Parser)]
#[command(name = "slowfast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task stream and write it to a stream file.
    GenStream(GenStream),
    /// Run the full continual-learning loop over a task stream.
    Run(Run),
    /// Synthesize dream inputs for one task head of a checkpoint.
    Dream(Dream),
    /// Fuse a slow and a fast checkpoint.
    Fuse(Fuse),
    /// Loss along the straight line between a slow and a fast checkpoint.
    Barrier(Barrier),
    /// Loss over the plane through three checkpoints.
    Landscape(Landscape),
    /// Summarize a run directory.
    Report(Report),
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set fusion.method=linear`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        let mut cfg = cfg.with_overrides(&self.sets)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenStream {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    overlap: Option<f64>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    None,
    SlowOnly,
    Linear,
    LinearAuto,
    Meta,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProjectorArg {
    Tpnsp,
    Nsp,
    None,
}

#[derive(Args)]
struct Run {
    #[command(flatten)]
    config: ConfigArgs,
    /// Where checkpoints, dreams, metrics and tables go. An existing run with the same config resumes.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Use a stream file instead of the configured stream.
    #[arg(long)]
    stream: Option<PathBuf>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Coefficient on the slow model for `--fusion linear`.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    projector: Option<ProjectorArg>,
    #[arg(long)]
    slow_epochs: Option<usize>,
    #[arg(long)]
    fast_epochs: Option<usize>,
    #[arg(long)]
    dream_steps: Option<usize>,
    #[arg(long)]
    meta_steps: Option<usize>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct DreamArgs {
    /// Samples per class.
    #[arg(long, default_value_t = DreamConfig::default().batch_per_class)]
    per_class: usize,
    #[arg(long, default_value_t = DreamConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = DreamConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = DreamConfig::default().bn_weight)]
    bn_weight: f64,
}

impl DreamArgs {
    fn config(&self) -> DreamConfig {
        DreamConfig {
            batch_per_class: self.per_class,
            steps: self.steps,
            lr: self.lr,
            bn_weight: self.bn_weight,
        }
    }
}

#[derive(Args)]
struct Dream {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Task heads to dream for; all heads when omitted.
    #[arg(long)]
    task: Vec<usize>,
    #[command(flatten)]
    dream: DreamArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp range as `LO,HI`.
    #[arg(long, value_parser = parse_range, default_value = "-3,3")]
    range: (f64, f64),
    #[arg(short, long)]
    out: PathBuf,
    /// Also write a PNG grid of the dreams, one row per task and class.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FuseMethod {
    Linear,
    Meta,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerLayer,
    PerChannel,
    PerParameter,
}

#[derive(Args)]
struct Fuse {
    /// Model before the new task (meta fusion only).
    #[arg(long)]
    prev: Option<PathBuf>,
    #[arg(long)]
    slow: PathBuf,
    #[arg(long)]
    fast: PathBuf,
    /// The new task.
    #[arg(long)]
    task: usize,
    #[arg(long, value_enum, default_value = "meta")]
    method: FuseMethod,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Dream files; the sets for every task in the fusion loss must be present.
    #[arg(long)]
    dreams: Vec<PathBuf>,
    #[arg(long, default_value_t = MetaConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = MetaConfig::default().lr)]
    lr: f64,
    #[arg(long, value_enum, default_value = "per-channel")]
    granularity: GranularityArg,
    /// Dream only the task before the new one in the fusion loss.
    #[arg(long)]
    previous_only: bool,
    #[arg(short, long)]
    out: PathBuf,
    /// Write the learned fusion weights here.
    #[arg(long)]
    weights_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Score on dream sets.
    #[arg(long)]
    dreams: Vec<PathBuf>,
    /// Score on the test splits of a stream file, for every task head the models share.
    #[arg(long)]
    stream: Option<PathBuf>,
}

#[derive(Args)]
struct Barrier {
    #[arg(long)]
    slow: PathBuf,
    #[arg(long)]
    fast: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 21)]
    points: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct Landscape {
    /// Plane origin, usually the old-task model.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    c: PathBuf,
    #[command(flatten)]
    eval: EvalArgs,
    /// Grid points per axis.
    #[arg(long, default_value_t = 11)]
    grid: usize,
    /// Extra room around the anchors, as a share of their spread.
    #[arg(long, default_value_t = 0.25)]
    margin: f64,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct Report {
    run_dir: PathBuf,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo < hi {
        Ok((lo, hi))
    } else {
        Err("LO must be below HI".into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenStream(a) => gen_stream(a),
        Command::Run(a) => run(a),
        Command::Dream(a) => dream(a),
        Command::Fuse(a) => fuse(a),
        Command::Barrier(a) => barrier(a),
        Command::Landscape(a) => landscape(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
                ErrorClass::Other => 1,
            })
        }
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body)?;
    Ok(())
}

fn gen_stream(a: GenStream) -> Result<()> {
    let cfg = a.config.load()?;
    let mut s: SyntheticConfig = cfg.stream.synthetic.clone().unwrap_or_default();
    s.seed = a.config.seed.unwrap_or(s.seed);
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { s.$f = v; })* };
    }
    set!(tasks, classes_per_task, dim, train_per_class, test_per_class, overlap, separation);
    let stream = make_synthetic_stream_with(&s)?;
    let hash = digest(&s);
    let mut c = Container::new(Meta {
        config_hash: hash.clone(),
        seed: s.seed,
    });
    c.push(&stream);
    c.save(&a.out)?;
    println!(
        "{} tasks, {} train / {} test samples, input {:?}, config_hash={hash}",
        stream.len(),
        stream.tasks.iter().map(|t| t.train.len()).sum::<usize>(),
        stream.tasks.iter().map(|t| t.test.len()).sum::<usize>(),
        stream.input_shape
    );
    Ok(())
}

fn run(a: Run) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = Some(dir);
    }
    if let Some(p) = a.stream {
        cfg.stream = StreamConfig {
            file: Some(p),
            ..StreamConfig::default()
        };
    }
    if let Some(f) = a.fusion {
        cfg.fusion.method = match f {
            FusionArg::None => FusionMethod::None,
            FusionArg::SlowOnly => FusionMethod::SlowOnly,
            FusionArg::Linear => FusionMethod::Linear,
            FusionArg::LinearAuto => FusionMethod::LinearAuto,
            FusionArg::Meta => FusionMethod::Meta,
        };
    }
    if let Some(v) = a.alpha {
        cfg.fusion.alpha = v;
    }
    if let Some(p) = a.projector {
        cfg.projector.mode = match p {
            ProjectorArg::Tpnsp => ProjectionMode::Tpnsp,
            ProjectorArg::Nsp => ProjectionMode::Nsp,
            ProjectorArg::None => ProjectionMode::None,
        };
    }
    if let Some(v) = a.slow_epochs {
        cfg.slow.epochs = v;
    }
    if let Some(v) = a.fast_epochs {
        cfg.fast.epochs = v;
    }
    if let Some(v) = a.dream_steps {
        cfg.dream.steps = v;
    }
    if let Some(v) = a.meta_steps {
        cfg.fusion.meta.steps = v;
    }
    cfg.validate()?;
    if a.dry_run {
        print!("# config_hash={}, seed={}\n{}", cfg.hash(), cfg.seed, cfg.to_toml());
        return Ok(());
    }
    let r = run_continual(&cfg)?;
    if r.resumed_tasks > 0 {
        println!("resumed after {} completed task(s)", r.resumed_tasks);
    }
    print_matrix(&r.acc);
    println!("config_hash={} seed={}", r.config_hash, cfg.seed);
    Ok(())
}

fn print_matrix(acc: &slowfast_core::metrics::AccMatrix) {
    for m in 0..acc.tasks() {
        let row: Vec<String> = (0..=m)
            .map(|t| acc.get(m, t).map_or("     -".into(), |v| format!("{v:6.2}")))
            .collect();
        println!("after task {m}: {}", row.join(" "));
    }
    match acc.acc() {
        Ok(v) => println!("ACC {v:.2}"),
        Err(_) => println!("ACC n/a (incomplete)"),
    }
    if let Ok(v) = acc.bwt() {
        println!("BWT {v:.2}");
    }
}

fn load_net(path: &Path) -> Result<(Network, Meta)> {
    let c = Checkpoint::load(path)?;
    Ok((c.net, c.meta))
}

fn load_dreams(paths: &[PathBuf]) -> Result<BTreeMap<usize, DreamSet>> {
    let mut out = BTreeMap::new();
    for p in paths {
        for d in Container::load(p)?.all::<DreamSet>()? {
            out.insert(d.task, d);
        }
    }
    Ok(out)
}

fn dream(a: Dream) -> Result<()> {
    let (net, meta) = load_net(&a.checkpoint)?;
    let tasks = if a.task.is_empty() { net.tasks() } else { a.task.clone() };
    let roster: Vec<(usize, usize)> = tasks
        .iter()
        .map(|&t| Ok((t, net.head(t)?.classes())))
        .collect::<Result<_>>()?;
    let sets = dream_roster(&net, &roster, &a.dream.config(), a.seed, a.range)?;
    let mut c = Container::new(meta);
    for d in sets.values() {
        c.push(d);
        println!(
            "task {}: {} samples, objective {:.4} -> {:.4}, fidelity {:.1}%",
            d.task,
            d.len(),
            d.objective_start,
            d.objective_end,
            100.0 * d.fidelity()
        );
    }
    c.save(&a.out)?;
    if let Some(p) = a.png {
        let sets: Vec<&DreamSet> = sets.values().collect();
        grid::write_png(&p, &sets, net.input_shape())?;
    }
    Ok(())
}

fn fuse(a: Fuse) -> Result<()> {
    let (slow, meta) = load_net(&a.slow)?;
    let (fast, _) = load_net(&a.fast)?;
    let fused = match a.method {
        FuseMethod::Linear => fuse_linear(&slow, &fast, a.alpha)?,
        FuseMethod::Meta => {
            let prev = a
                .prev
                .as_deref()
                .ok_or_else(|| Error::Config("meta fusion needs --prev".into()))?;
            let (prev, _) = load_net(prev)?;
            let dreams = load_dreams(&a.dreams)?;
            let cfg = MetaConfig {
                granularity: match a.granularity {
                    GranularityArg::PerLayer => Granularity::PerLayer,
                    GranularityArg::PerChannel => Granularity::PerChannel,
                    GranularityArg::PerParameter => Granularity::PerParameter,
                },
                steps: a.steps,
                lr: a.lr,
                old_tasks: if a.previous_only { OldTaskScope::Previous } else { OldTaskScope::All },
            };
            let out = meta_fuse(&prev, &slow, &fast, a.task, &dreams, &cfg)?;
            println!("fusion loss {:.6} -> {:.6}", out.loss_start, out.loss_end);
            if let Some(p) = &a.weights_csv {
                write(p, &out.weights.to_csv(&meta))?;
            }
            out.net
        }
    };
    Checkpoint {
        net: fused,
        meta,
    }
    .save(&a.out)
}

fn eval_sets(e: &EvalArgs, models: &[&Network]) -> Result<Vec<EvalSet>> {
    let mut sets: Vec<EvalSet> = load_dreams(&e.dreams)?.into_values().map(EvalSet::Dreams).collect();
    if let Some(p) = &e.stream {
        let stream: TaskStream = Container::load(p)?.first()?;
        for t in models[0].tasks() {
            if models.iter().all(|m| m.has_task(t)) {
                let task = stream
                    .tasks
                    .get(t)
                    .ok_or_else(|| Error::Data(format!("stream has no task {t}")))?;
                sets.push(EvalSet::Labeled {
                    task: t,
                    data: task.test.clone(),
                });
            }
        }
    }
    if sets.is_empty() {
        return Err(Error::Config("nothing to evaluate: pass --dreams or --stream".into()));
    }
    Ok(sets)
}

fn barrier(a: Barrier) -> Result<()> {
    let (slow, meta) = load_net(&a.slow)?;
    let (fast, _) = load_net(&a.fast)?;
    let sets = eval_sets(&a.eval, &[&slow, &fast])?;
    let curve = barrier_sweep(&slow, &fast, &sets, a.points)?;
    let (alpha, loss) = curve.best();
    println!("lowest combined loss {loss:.6} at alpha {alpha:.3}");
    write(&a.out, &curve.to_csv(&meta))
}

fn landscape(a: Landscape) -> Result<()> {
    let (wa, meta) = load_net(&a.a)?;
    let (wb, _) = load_net(&a.b)?;
    let (wc, _) = load_net(&a.c)?;
    let sets = eval_sets(&a.eval, &[&wa, &wb, &wc])?;
    let plane = Plane::new(&wa, &wb, &wc)?;
    let spec = GridSpec::around(&plane.anchors, a.grid, a.margin);
    let grid = landscape_slice(&wa, &wb, &wc, &sets, &spec)?;
    println!("anchors {:?}", grid.anchors);
    write(&a.out, &grid.to_csv(&meta))
}

fn report(a: Report) -> Result<()> {
    let s = load_run(&a.run_dir)?;
    println!(
        "config_hash={} seed={} completed {}/{} tasks",
        s.config_hash,
        s.seed,
        s.reports.len(),
        s.tasks
    );
    print_matrix(&s.acc);
    for r in s.reports.iter().skip(1) {
        let drop = r
            .old_acc_before_slow
            .iter()
            .zip(&r.old_acc_after_slow)
            .map(|(b, a)| b - a)
            .fold(f64::MIN, f64::max);
        print!("task {}: ranks {:?}, slow-phase max old drop {drop:.2}", r.task, r.basis_ranks);
        if let Some(al) = r.fusion_alpha {
            print!(", alpha {al:.2}");
        }
        if let (Some(s0), Some(s1)) = (r.fusion_loss_start, r.fusion_loss_end) {
            print!(", fusion loss {s0:.4} -> {s1:.4}");
        }
        println!();
    }
    Ok(())
}
