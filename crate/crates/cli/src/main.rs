use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spart::baselines::{self, DemoEpisode, Method};
use spart::cost::{evaluate_workload, JoinCostModel, Workload};
use spart::data::{build_histogram, gen_synthetic, load_points_csv, BBox, DataError, Dataset, GridSpec, MixtureParams, SyntheticKind};
use spart::env::PartitionEnv;
use spart::io::write_atomic;
use spart::neural::{load_checkpoint, q_network_dims, save_checkpoint, AdamConfig};
use spart::partition::PartitionSet;
use spart::replay::{load_transitions, save_transitions};
use spart::trainer::{demo_transitions, evaluate_all, log_to_csv, TrainConfig, Trainer};

mod config;
mod render;

use config::{resolved_text, FileConfig};

const DEMO_JSON: &str = "demo.json";
const DEMO_TRANSITIONS: &str = "demo_transitions.bin";
const CONFIG_OUT: &str = "config.txt";

#[derive(Parser)]
#[command(name = "spart", version, about = "Learned spatial partitioning for distance-join workloads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// Points CSV (`x,y` per line).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Cells per side of the grid overlay.
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    grid: Option<u64>,
    /// Number of workers (partitions).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    m: Option<u64>,
    /// Workload file with `query.N.epsilon` / `query.N.frequency` lines.
    #[arg(long)]
    workload: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` settings; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic points.
    Gen(GenArgs),
    /// Partition the data with a classical method.
    Baseline(BaselineArgs),
    /// Build the demo episode and its transitions.
    Demo(DemoArgs),
    /// Pre-train on the demo, then search for better partitions.
    Train(TrainArgs),
    /// Compare baselines, demo and learned partitions.
    Eval(EvalArgs),
    /// Draw partitions over the data as SVG.
    Render(RenderArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Uniform,
    Gaussian,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long, value_enum, default_value = "gaussian")]
    kind: Kind,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    clusters: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Target box as `min_x,min_y,max_x,max_y`.
    #[arg(long)]
    bbox: Option<String>,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    shared: Shared,
    /// uniform, quad or kdb.
    #[arg(long)]
    method: Method,
    /// Include the cut sequence in the output.
    #[arg(long)]
    actions: bool,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    shared: Shared,
    /// uniform, quad, kdb, or auto (cheapest under the workload).
    #[arg(long, default_value = "kdb")]
    method: String,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Directory written by `spart demo`; built with KDB when omitted.
    #[arg(long)]
    demo: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    pretrain_episodes: Option<usize>,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Write a snapshot every this many episodes (0 disables).
    #[arg(long, default_value_t = 100)]
    snapshot_every: usize,
    #[arg(long)]
    no_pretrain: bool,
    #[arg(long)]
    no_grid_shift: bool,
    #[arg(long)]
    no_prune: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Demo partitions (demo.json or any partition JSON).
    #[arg(long)]
    demo: PathBuf,
    /// Learned partitions (best.json).
    #[arg(long)]
    learned: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    shared: Shared,
    /// Partition JSON files; one SVG each.
    #[arg(long, required = true, num_args = 1..)]
    partition: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Demo(a) => cmd_demo(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Defaults, then the config file, then flags.
struct Resolved {
    cfg: TrainConfig,
    file: FileConfig,
    workload: Option<Workload>,
}

impl Resolved {
    fn new(s: &Shared) -> Result<Self> {
        let file = match &s.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let mut cfg = TrainConfig::default();
        file.apply(&mut cfg)?;
        if let Some(g) = s.grid {
            cfg.g = g as usize;
        }
        if let Some(m) = s.m {
            cfg.m = m as usize;
        }
        if let Some(seed) = s.seed {
            cfg.seed = seed;
        }
        let workload = match &s.workload {
            Some(p) => Some(Workload::load(p).with_context(|| format!("loading workload {}", p.display()))?),
            None => file.workload()?,
        };
        Ok(Resolved { cfg, file, workload })
    }

    fn grid_explicit(&self, s: &Shared) -> bool {
        s.grid.is_some() || self.file.sets("grid")
    }

    fn m_explicit(&self, s: &Shared) -> bool {
        s.m.is_some() || self.file.sets("m")
    }

    fn require_workload(&self) -> Result<&Workload> {
        self.workload
            .as_ref()
            .ok_or_else(|| anyhow!("no workload: pass --workload or query.N.* keys in --config"))
    }

    fn text(&self) -> String {
        resolved_text(&self.cfg, self.workload.as_ref())
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| anyhow!("missing --{flag}"))
}

fn load_data(path: &Path) -> Result<Dataset> {
    load_points_csv(path, None).with_context(|| format!("loading points {}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    write_atomic(path, contents.as_ref()).with_context(|| format!("writing {}", path.display()))
}

/// `<out>.config.txt` next to a single output file.
fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".config.txt");
    PathBuf::from(name)
}

fn out_dir(s: &Shared) -> Result<&PathBuf> {
    let dir = require(&s.out, "out")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn read_partition(path: &Path) -> Result<PartitionSet> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    PartitionSet::from_json(&text).with_context(|| format!("parsing partitions {}", path.display()))
}

fn parse_bbox(s: &str) -> Result<BBox> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("--bbox expects four comma-separated numbers"))?;
    let [a, b, c, d] = v[..] else {
        bail!("--bbox expects four comma-separated numbers");
    };
    Ok(BBox::new(a, b, c, d)?)
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let out = require(&a.shared.out, "out")?;
    let seed = a.shared.seed.unwrap_or(0);
    let bbox = match &a.bbox {
        Some(s) => parse_bbox(s)?,
        None => BBox::unit(),
    };
    let (kind, params) = match a.kind {
        Kind::Uniform => (SyntheticKind::Uniform, MixtureParams { bbox, components: Vec::new() }),
        Kind::Gaussian => (SyntheticKind::GaussianMixture, MixtureParams::random(bbox, a.clusters as usize, seed)?),
    };
    let data = gen_synthetic(kind, a.n as usize, seed, &params)?;
    write_file(out, data.to_csv())?;
    let kind_name = match a.kind {
        Kind::Uniform => "uniform",
        Kind::Gaussian => "gaussian",
    };
    let [x0, y0, x1, y1] = bbox.as_array();
    let resolved = format!(
        "kind = {kind_name}\nn = {}\nclusters = {}\nseed = {seed}\nbbox = {x0},{y0},{x1},{y1}\n",
        a.n, a.clusters
    );
    write_file(&sidecar(out), resolved)?;
    println!("wrote {} points to {}", data.len(), out.display());
    Ok(())
}

fn grid_for(data: &Dataset, g: usize) -> Result<GridSpec> {
    Ok(GridSpec::new(data.bbox(), g)?)
}

fn cmd_baseline(a: BaselineArgs) -> Result<()> {
    let r = Resolved::new(&a.shared)?;
    let data = load_data(require(&a.shared.data, "data")?)?;
    let out = require(&a.shared.out, "out")?;
    let grid = grid_for(&data, r.cfg.g)?;
    let hist = build_histogram(&data, &grid)?;
    let ep = baselines::run(a.method, &hist, &grid, r.cfg.m)?;
    let json = if a.actions { ep.to_json() } else { ep.final_partitions.to_json() };
    write_file(out, json)?;
    write_file(&sidecar(out), format!("method = {}\n{}", a.method, r.text()))?;
    println!(
        "{}: {} partitions on a {}x{} grid -> {}",
        a.method.label(),
        ep.final_partitions.len(),
        r.cfg.g,
        r.cfg.g,
        out.display()
    );
    Ok(())
}

fn demo_cost_json(method: Method, report: &spart::cost::CostReport, w: &Workload) -> String {
    let value = serde_json::json!({
        "method": method.to_string(),
        "epsilons": w.queries().iter().map(|q| q.epsilon).collect::<Vec<_>>(),
        "frequencies": w.queries().iter().map(|q| q.frequency).collect::<Vec<_>>(),
        "per_query": report.per_query,
        "weighted": report.weighted_cost(w),
    });
    serde_json::to_string_pretty(&value).expect("json value serializes")
}

fn cmd_demo(a: DemoArgs) -> Result<()> {
    let r = Resolved::new(&a.shared)?;
    let data = load_data(require(&a.shared.data, "data")?)?;
    let dir = out_dir(&a.shared)?;
    let grid = grid_for(&data, r.cfg.g)?;
    let hist = Arc::new(build_histogram(&data, &grid)?);
    let oracle = JoinCostModel::new(&data, grid, r.cfg.cost);
    let demo = if a.method == "auto" {
        let w = r.require_workload()?;
        let mut best: Option<(f64, DemoEpisode)> = None;
        for m in Method::ALL {
            let ep = baselines::run(m, &hist, &grid, r.cfg.m)?;
            let c = evaluate_workload(&oracle, &ep.final_partitions, w)?
                .weighted_cost(w)
                .expect("full evaluation");
            if best.as_ref().is_none_or(|(b, _)| c < *b) {
                best = Some((c, ep));
            }
        }
        best.expect("three methods evaluated").1
    } else {
        let method: Method = a.method.parse().map_err(|e: String| anyhow!(e))?;
        baselines::run(method, &hist, &grid, r.cfg.m)?
    };
    let env = PartitionEnv::new(grid, Arc::clone(&hist), r.cfg.m)?;
    let transitions = demo_transitions(&env, &demo, &r.cfg.nstep())?;
    write_file(&dir.join(DEMO_JSON), demo.to_json())?;
    save_transitions(dir.join(DEMO_TRANSITIONS), &transitions)?;
    if let Some(w) = &r.workload {
        let report = evaluate_workload(&oracle, &demo.final_partitions, w)?;
        write_file(&dir.join("demo_cost.json"), demo_cost_json(demo.method, &report, w))?;
        println!("demo weighted cost {}", report.weighted_cost(w).expect("full evaluation"));
    }
    write_file(&dir.join(CONFIG_OUT), format!("method = {}\n{}", demo.method, r.text()))?;
    println!(
        "{} demo: {} cuts, {} transitions -> {}",
        demo.method.label(),
        demo.actions.len(),
        transitions.len(),
        dir.display()
    );
    Ok(())
}

struct TrainArtifacts<'a> {
    dir: &'a Path,
}

impl TrainArtifacts<'_> {
    fn write(&self, t: &Trainer<'_>) -> Result<()> {
        std::fs::create_dir_all(self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        save_checkpoint(self.dir.join("model.ckpt"), t.main_net(), t.adam())?;
        write_file(&self.dir.join("best.json"), t.best().partitions.to_json())?;
        write_file(&self.dir.join("log.csv"), log_to_csv(t.log()))?;
        Ok(())
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut r = Resolved::new(&a.shared)?;
    let data = load_data(require(&a.shared.data, "data")?)?;
    let dir = out_dir(&a.shared)?.clone();
    let workload = r.require_workload()?.clone();

    let loaded = match &a.demo {
        Some(d) => {
            let text = std::fs::read_to_string(d.join(DEMO_JSON))
                .with_context(|| format!("reading {}", d.join(DEMO_JSON).display()))?;
            let demo = DemoEpisode::from_json(&text)?;
            if !r.grid_explicit(&a.shared) {
                r.cfg.g = demo.final_partitions.g();
            }
            if !r.m_explicit(&a.shared) {
                r.cfg.m = demo.final_partitions.len();
            }
            Some((demo, load_transitions(d.join(DEMO_TRANSITIONS))?))
        }
        None => None,
    };
    if let Some(e) = a.episodes {
        r.cfg.episodes = e;
    }
    if let Some(e) = a.pretrain_episodes {
        r.cfg.pretrain_episodes = e;
    }
    r.cfg.pretrain &= !a.no_pretrain;
    r.cfg.grid_shift &= !a.no_grid_shift;
    r.cfg.prune &= !a.no_prune;
    r.cfg.validate()?;

    let grid = grid_for(&data, r.cfg.g)?;
    let hist = Arc::new(build_histogram(&data, &grid)?);
    let env = PartitionEnv::new(grid, Arc::clone(&hist), r.cfg.m)?;
    let (demo, transitions) = match loaded {
        Some((demo, ts)) => {
            if demo.final_partitions.grid() != &grid {
                bail!("the demo was built on a different grid or dataset");
            }
            (demo, ts)
        }
        None => {
            let demo = baselines::kdb_actions(&hist, &grid, r.cfg.m)?;
            let ts = demo_transitions(&env, &demo, &r.cfg.nstep())?;
            (demo, ts)
        }
    };
    write_file(&dir.join(CONFIG_OUT), r.text())?;

    let oracle = JoinCostModel::new(&data, grid, r.cfg.cost);
    let mut trainer = Trainer::with_demo_transitions(r.cfg.clone(), env, &oracle, workload, demo, transitions)?;
    if let Some(p) = &a.init {
        let (net, adam) = load_checkpoint(p, Some(&q_network_dims(r.cfg.g, r.cfg.hidden)), AdamConfig {
            lr: r.cfg.lr,
            ..AdamConfig::default()
        })?;
        trainer = trainer.with_network(net, adam)?;
    }

    let pretrain = if r.cfg.pretrain { Some(trainer.pretrain()?) } else { None };
    let snapshots = TrainArtifacts {
        dir: &dir.join("snapshot"),
    };
    trainer.main_train_with(|t, e| {
        if a.snapshot_every > 0 && e.episode % a.snapshot_every == 0 {
            snapshots
                .write(t)
                .map_err(|err| std::io::Error::other(format!("{err:#}")))?;
        }
        Ok(())
    })?;
    TrainArtifacts { dir: &dir }.write(&trainer)?;

    let summary = serde_json::json!({
        "demo_cost": trainer.demo_cost(),
        "best_cost": trainer.best().weighted,
        "best_updates": trainer.best().updates,
        "episodes": trainer.log().len(),
        "full_evaluations": trainer.full_evaluations(),
        "pretrain_converged": pretrain.map(|p| p.converged),
        "pretrain_episodes": pretrain.map(|p| p.episodes),
    });
    write_file(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    if let Some(p) = pretrain {
        println!(
            "pre-training: {} after {} episodes",
            if p.converged { "reproduced the demo" } else { "did not reproduce the demo" },
            p.episodes
        );
    }
    println!(
        "demo cost {:.1}, best cost {:.1} ({} improvements, {} full evaluations over {} episodes)",
        trainer.demo_cost(),
        trainer.best().weighted,
        trainer.best().updates,
        trainer.full_evaluations(),
        trainer.log().len()
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let r = Resolved::new(&a.shared)?;
    let workload = r.require_workload()?;
    let data = load_data(require(&a.shared.data, "data")?)?;
    let learned = read_partition(&a.learned)?;
    let demo = read_partition(&a.demo)?;
    if demo.grid() != learned.grid() {
        bail!("demo and learned partitions use different grids");
    }
    if demo.len() != learned.len() {
        bail!("demo has {} partitions, learned has {}", demo.len(), learned.len());
    }
    let grid = *learned.grid();
    let hist = build_histogram(&data, &grid).context("data does not fit the partitions' grid")?;
    let oracle = JoinCostModel::new(&data, grid, r.cfg.cost);
    let table = evaluate_all(&oracle, &hist, &grid, workload, &demo, &learned)?;
    let text = table.to_text();
    print!("{text}");
    if let Some(dir) = &a.shared.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        write_file(&dir.join("table.txt"), &text)?;
        write_file(&dir.join("table.csv"), table.to_csv())?;
        write_file(&dir.join(CONFIG_OUT), r.text())?;
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let points = match &a.shared.data {
        Some(p) => match load_points_csv(p, None) {
            Ok(d) => d.points().to_vec(),
            Err(DataError::Empty) => Vec::new(),
            Err(e) => return Err(e).with_context(|| format!("loading points {}", p.display())),
        },
        None => Vec::new(),
    };
    let out = require(&a.shared.out, "out")?;
    let single_file = a.partition.len() == 1 && out.extension().is_some_and(|e| e == "svg");
    if !single_file {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    for p in &a.partition {
        let ps = read_partition(p)?;
        let target = if single_file {
            out.clone()
        } else {
            let stem = p.file_stem().ok_or_else(|| anyhow!("bad partition path {}", p.display()))?;
            out.join(stem).with_extension("svg")
        };
        write_file(&target, render::render_svg(&ps, &points))?;
        println!("{} -> {}", p.display(), target.display());
    }
    Ok(())
}
