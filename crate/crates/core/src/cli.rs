//! Command-line front end: resolves a [`RunConfig`] from an optional config
//! file plus flags, dispatches the subcommand and lays out its outputs.
//!
//! Every subcommand writes the fully resolved configuration next to its
//! outputs, and `--config` on that file reproduces the run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cpo::{self, collect_batch, Algorithm, AdvantageMode, PolicyNet, TrainConfig};
use crate::diffmath::Checkpoint;
use crate::envs::{NavEnv, ScenarioConfig};
use crate::error::{Error, Result};
use crate::harness::{self, AblationOptions, Controller, Report};
use crate::oracle::{self, DiscreteCMDP};
use crate::quasimetric::{self, PairSample, QuasimetricModel, TrainOptions, INPUT_DIM};
use crate::rng;
use crate::terrain::{Scenario, TerrainGrid};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "QNAV_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "qnav-out";
pub const CONFIG_FILE: &str = "config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// A controller evaluated without a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Straight,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSettings {
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedSettings {
    /// Pair-sample CSV; `None` builds pairs from the scenario's pose lattice.
    pub replay: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub epochs: usize,
}

/// Everything a run depends on. Terrain size and resolution live in
/// `scenario` (`size_m`, `cell_size`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub no_qe: bool,
    pub no_act: bool,
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
    pub embed: EmbedSettings,
}

impl RunConfig {
    pub fn defaults(scenario: Scenario, algorithm: Algorithm, seed: u64, out_dir: PathBuf) -> Self {
        Self {
            seed,
            out_dir: out_dir.clone(),
            no_qe: false,
            no_act: false,
            scenario: ScenarioConfig::for_scenario(scenario),
            train: TrainConfig::for_algorithm(algorithm, seed, false, false),
            eval: EvalSettings { episodes: 20, seeds: (1..=10).collect(), checkpoint: None, baseline: None },
            ablation: AblationSettings { seeds: (1..=5).collect(), eval_episodes: 20 },
            embed: EmbedSettings { replay: None, checkpoint: out_dir.join("embedding.ckpt"), epochs: 60 },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::parse("run config", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies the ablation switches to the training config.
    fn apply_switches(&mut self) {
        if self.no_qe {
            self.train.advantage_mode = AdvantageMode::Gae;
            self.train.train_embedding = false;
        }
        if self.no_act {
            self.train.act_alpha = 0.0;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.train.seed != self.seed {
            return Err(Error::Config(format!("train.seed {} differs from seed {}", self.train.seed, self.seed)));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "qnav", version, about = "Terrain-aware constrained navigation with quasimetric embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a scenario terrain and export its rasters.
    GenTerrain(GenTerrainArgs),
    /// Train a policy and write its learning curve and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a baseline controller).
    Eval(EvalArgs),
    /// Train and evaluate the full, no_qe and no_act variants.
    Ablate(AblateArgs),
    /// Check value iteration against asymmetric Dijkstra on discrete CMDPs.
    Verify(VerifyArgs),
    /// Train a quasimetric embedding on recorded transitions.
    EmbedTrain(EmbedArgs),
    /// Render learning curves and trajectories from CSV files.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Resolved config to start from; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $QNAV_OUT_DIR/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenTerrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Raster directory (default: <out>/terrain).
    #[arg(long)]
    terrain_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainOverrides {
    #[arg(long, value_parser = parse_algorithm)]
    algo: Option<Algorithm>,
    #[arg(long)]
    no_qe: bool,
    #[arg(long)]
    no_act: bool,
    /// Total environment steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    steps_per_batch: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    train: TrainOverrides,
    /// Also export the training terrain rasters here.
    #[arg(long)]
    terrain_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Policy checkpoint written by `train`. Its seed selects the terrain
    /// unless `--seed` is given.
    #[arg(long, conflicts_with = "baseline", required_unless_present_any = ["baseline", "config"])]
    ckpt: Option<PathBuf>,
    #[arg(long, value_parser = parse_baseline)]
    baseline: Option<Baseline>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seeds: `a..b` (inclusive), a comma list, or one number.
    #[arg(long, value_parser = parse_seed_arg)]
    seeds: Option<SeedList>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of training seeds (1..=N).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// CMDP text file to check.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    cmdp: Option<PathBuf>,
    /// Number of random grid CMDPs to check.
    #[arg(long)]
    random: Option<usize>,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pair-sample CSV (e.g. `replay.csv` from `train`); without it the
    /// scenario's pose lattice supplies the transitions.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Learning-curve CSVs written by `train`.
    #[arg(long, num_args = 1..)]
    curves: Vec<PathBuf>,
    /// Trajectory CSVs to draw over the terrain.
    #[arg(long, num_args = 1..)]
    trajectories: Vec<PathBuf>,
    /// Terrain raster directory for the trajectory plot.
    #[arg(long, requires = "trajectories")]
    terrain: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_scenario(s: &str) -> std::result::Result<Scenario, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_algorithm(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    match s {
        "straight" => Ok(Baseline::Straight),
        "stop" => Ok(Baseline::Stop),
        _ => Err(format!("unknown baseline {s:?} (expected straight or stop)")),
    }
}

#[derive(Debug, Clone)]
struct SeedList(Vec<u64>);

fn parse_seed_arg(s: &str) -> std::result::Result<SeedList, String> {
    parse_seed_list(s).map(SeedList)
}

/// `"1..10"` (inclusive), `"1,4,7"` or `"3"`.
pub fn parse_seed_list(s: &str) -> std::result::Result<Vec<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed {t:?}: {e}"));
    let seeds = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty seed range {s:?}"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?
    };
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

fn default_out(sub: &str) -> PathBuf {
    let root = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    root.join(sub)
}

/// Starts from `--config` (or defaults) and applies the shared flags.
fn resolve_common(common: &CommonArgs, sub: &str) -> Result<(RunConfig, bool)> {
    let from_file = common.config.is_some();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::defaults(
            common.scenario.unwrap_or(Scenario::Hill),
            Algorithm::Qcpo,
            common.seed.unwrap_or(1),
            common.out.clone().unwrap_or_else(|| default_out(sub)),
        ),
    };
    if from_file {
        if let Some(s) = common.scenario.filter(|s| *s != cfg.scenario.scenario) {
            log::info!("override scenario: {} -> {s} (scenario constants reset to defaults)", cfg.scenario.scenario);
            cfg.scenario = ScenarioConfig::for_scenario(s);
        }
        if let Some(seed) = common.seed.filter(|s| *s != cfg.seed) {
            log::info!("override seed: {} -> {seed}", cfg.seed);
            cfg.seed = seed;
            cfg.train.seed = seed;
        }
        if let Some(out) = common.out.as_ref().filter(|o| **o != cfg.out_dir) {
            log::info!("override out_dir: {} -> {}", cfg.out_dir.display(), out.display());
            cfg.out_dir = out.clone();
        }
    }
    Ok((cfg, from_file))
}

fn apply_train_overrides(cfg: &mut RunConfig, o: &TrainOverrides, from_file: bool) {
    if let Some(algo) = o.algo.filter(|a| !from_file || *a != cfg.train.algorithm) {
        if from_file {
            log::info!("override algorithm: {} -> {} (optimiser settings reset)", cfg.train.algorithm.name(), algo.name());
        }
        cfg.train = TrainConfig::for_algorithm(algo, cfg.seed, false, false);
    }
    if o.no_qe && !cfg.no_qe {
        if from_file {
            log::info!("override no_qe: false -> true");
        }
        cfg.no_qe = true;
    }
    if o.no_act && !cfg.no_act {
        if from_file {
            log::info!("override no_act: false -> true");
        }
        cfg.no_act = true;
    }
    cfg.apply_switches();
    if let Some(n) = o.steps {
        if from_file && n != cfg.train.total_steps {
            log::info!("override total_steps: {} -> {n}", cfg.train.total_steps);
        }
        cfg.train.total_steps = n;
    }
    if let Some(n) = o.steps_per_batch {
        if from_file && n != cfg.train.steps_per_batch {
            log::info!("override steps_per_batch: {} -> {n}", cfg.train.steps_per_batch);
        }
        cfg.train.steps_per_batch = n;
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Validates the config and persists it as `<out_dir>/config.json`.
fn persist(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let json = cfg.to_json();
    write_file(&cfg.out_dir.join(CONFIG_FILE), &(json.clone() + "\n"))?;
    Ok(json)
}

/// Terrain the run's seed trains on.
fn run_terrain(cfg: &RunConfig) -> Result<Arc<TerrainGrid>> {
    Ok(Arc::new(cfg.scenario.build_terrain(cpo::terrain_seed(cfg.seed))?))
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn parse_and_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DOMAIN
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenTerrain(a) => gen_terrain(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Verify(a) => verify(&a),
        Command::EmbedTrain(a) => embed_train(&a),
        Command::Plot(a) => plot(&a),
    }
}

fn gen_terrain(args: &GenTerrainArgs) -> Result<()> {
    let (cfg, _) = resolve_common(&args.common, "gen-terrain")?;
    let json = persist(&cfg)?;
    let grid = run_terrain(&cfg)?;
    let raster_dir = args.terrain_out.clone().unwrap_or_else(|| cfg.out_dir.join("terrain"));
    grid.write_dir(&raster_dir)?;
    let classes = grid.distinct_classes();
    let mut stats = harness::csv_preamble("terrain-stats", &json);
    stats.push_str("scenario,width,height,cell_size,max_slope_deg,flank_slope_deg,n_classes\n");
    let _ = writeln!(
        stats,
        "{},{},{},{},{},{},{}",
        cfg.scenario.scenario,
        grid.width,
        grid.height,
        grid.cell_size,
        grid.max_slope_deg(),
        grid.flank_slope_deg(),
        classes.len()
    );
    write_file(&cfg.out_dir.join("terrain_stats.csv"), &stats)?;
    write_file(&cfg.out_dir.join("terrain.svg"), &harness::svg_paths_on_terrain(&grid, &[], &json)?)?;
    println!(
        "{} terrain {}x{} written to {} (max slope {:.2} deg, {} classes)",
        cfg.scenario.scenario,
        grid.width,
        grid.height,
        raster_dir.display(),
        grid.max_slope_deg(),
        classes.len()
    );
    Ok(())
}

/// CSV of embedding pair samples: `from_0..,to_0..,cost`.
pub fn replay_csv(pairs: &[PairSample], config_json: &str) -> String {
    let mut out = harness::csv_preamble("replay", config_json);
    let header: Vec<String> = (0..INPUT_DIM)
        .map(|i| format!("from_{i}"))
        .chain((0..INPUT_DIM).map(|i| format!("to_{i}")))
        .chain(std::iter::once("cost".to_string()))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for p in pairs {
        let fields: Vec<String> = p.from.iter().chain(&p.to).chain(std::iter::once(&p.cost)).map(f64::to_string).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_replay_csv(text: &str) -> Result<Vec<PairSample>> {
    harness::csv_data_lines(text)
        .map(|line| {
            let f = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|e| Error::parse("replay", e)))
                .collect::<Result<Vec<f64>>>()?;
            if f.len() != 2 * INPUT_DIM + 1 {
                return Err(Error::parse("replay", format!("expected {} fields, got {}", 2 * INPUT_DIM + 1, f.len())));
            }
            Ok(PairSample { from: f[..INPUT_DIM].to_vec(), to: f[INPUT_DIM..2 * INPUT_DIM].to_vec(), cost: f[2 * INPUT_DIM] })
        })
        .collect()
}

fn train(args: &TrainArgs) -> Result<()> {
    let (mut cfg, from_file) = resolve_common(&args.common, "train")?;
    apply_train_overrides(&mut cfg, &args.train, from_file);
    let json = persist(&cfg)?;
    let grid = run_terrain(&cfg)?;
    if let Some(dir) = &args.terrain_out {
        grid.write_dir(dir)?;
    }
    let out = match cpo::train_on(&cfg.scenario, &cfg.train, Arc::clone(&grid)) {
        Ok(out) => out,
        Err(Error::Diverged { iteration, reason, last_good }) => {
            let path = cfg.out_dir.join("last_good.ckpt");
            last_good.write(&path)?;
            return Err(Error::Diverged { iteration, reason, last_good });
        }
        Err(e) => return Err(e),
    };
    let dir = &cfg.out_dir;
    write_file(&dir.join("curve.csv"), &harness::curve_csv(&out.curve, &json))?;
    out.checkpoint(cfg.seed).write(&dir.join("policy.ckpt"))?;
    let mut env = NavEnv::new(cfg.scenario.clone(), Arc::clone(&grid), rng::stream(cfg.seed, "replay"))?;
    let batch = collect_batch(
        &mut env,
        &out.policy,
        &out.value,
        &out.cost_value,
        cfg.train.steps_per_batch,
        &mut rng::stream(cfg.seed, "replay-actions"),
    )?;
    write_file(&dir.join("replay.csv"), &replay_csv(&batch.pair_samples(&cfg.scenario), &json))?;
    let curve = harness::learning_curves(std::slice::from_ref(&out.curve))?;
    let label = cfg.train.algorithm.name().to_string();
    write_file(&dir.join("learning_curves.svg"), &harness::svg_learning_curves(&[(label, curve)], &json))?;
    if let Some(last) = out.curve.last() {
        println!(
            "trained {} on {} for {} steps: return {:.2}, success {:.3}, violation {:.4}, delta {:.4}",
            cfg.train.algorithm.name(),
            cfg.scenario.scenario,
            last.steps,
            last.mean_return,
            last.success_rate,
            last.violation_rate,
            last.delta
        );
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (mut cfg, from_file) = resolve_common(&args.common, "eval")?;
    let ckpt = match &args.ckpt {
        Some(path) => {
            let ckpt = Checkpoint::read(path)?;
            if args.common.seed.is_none() && !from_file {
                cfg.seed = ckpt.seed;
                cfg.train.seed = ckpt.seed;
            }
            cfg.eval.checkpoint = Some(path.clone());
            cfg.eval.baseline = None;
            Some(ckpt)
        }
        None => {
            if args.baseline.is_some() {
                cfg.eval.baseline = args.baseline;
                cfg.eval.checkpoint = None;
            }
            match &cfg.eval.checkpoint {
                Some(path) => Some(Checkpoint::read(path)?),
                None => None,
            }
        }
    };
    if let Some(n) = args.episodes {
        cfg.eval.episodes = n;
    }
    if let Some(seeds) = &args.seeds {
        cfg.eval.seeds = seeds.0.clone();
    }
    let json = persist(&cfg)?;
    let (controller, label) = match (ckpt, cfg.eval.baseline) {
        (Some(ckpt), _) => (Controller::Policy(Box::new(PolicyNet::from_checkpoint(&ckpt)?)), "policy"),
        (None, Some(Baseline::Straight)) => (Controller::StraightToGoal { speed: 1.0, gain: 2.0 }, "straight"),
        (None, Some(Baseline::Stop)) => (Controller::NeverMove, "stop"),
        (None, None) => return Err(Error::Config("eval needs a checkpoint or a baseline".into())),
    };
    let grid = run_terrain(&cfg)?;
    let (metrics, episodes) =
        harness::evaluate(&controller, &cfg.scenario, Arc::clone(&grid), cfg.eval.episodes, &cfg.eval.seeds)?;
    println!(
        "{label}: success {:.3}, path efficiency {:.3}, energy {:.2} J/m, violation {:.4} over {} episodes",
        metrics.success_rate, metrics.path_efficiency, metrics.energy_per_m, metrics.violation_rate, metrics.episodes
    );
    let report = Report {
        config_json: json,
        metrics: vec![(label.to_string(), metrics)],
        ablation: Vec::new(),
        curves: Vec::new(),
        episodes,
        grid: Some(grid),
    };
    harness::emit_report(&report, &cfg.out_dir)
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let (mut cfg, from_file) = resolve_common(&args.common, "ablate")?;
    if let Some(n) = args.seeds {
        cfg.ablation.seeds = (1..=n).collect();
    }
    if let Some(n) = args.episodes {
        cfg.ablation.eval_episodes = n;
    }
    if let Some(n) = args.steps {
        if from_file && n != cfg.train.total_steps {
            log::info!("override total_steps: {} -> {n}", cfg.train.total_steps);
        }
        cfg.train.total_steps = n;
    }
    let json = persist(&cfg)?;
    let opts = AblationOptions { template: cfg.train.clone(), eval_episodes: cfg.ablation.eval_episodes };
    let rows = harness::run_ablation(&cfg.scenario, &cfg.ablation.seeds, &opts)?;
    println!("variant | success % | path eff. | energy J/m | violation % | sample eff. (steps) | notes");
    for line in harness::ablation_table(&rows) {
        println!("{}", line.join(" | "));
    }
    let report = Report {
        config_json: json,
        metrics: rows.iter().map(|r| (r.variant.name().to_string(), r.metrics.clone())).collect(),
        curves: rows.iter().filter_map(|r| r.curve.clone().map(|c| (r.variant.name().to_string(), c))).collect(),
        ablation: rows,
        episodes: Vec::new(),
        grid: None,
    };
    harness::emit_report(&report, &cfg.out_dir)
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let instances: Vec<(String, DiscreteCMDP)> = match (&args.cmdp, args.random) {
        (Some(path), _) => vec![(path.display().to_string(), DiscreteCMDP::read(path)?)],
        (None, Some(n)) => (0..n)
            .map(|i| Ok((format!("random #{i}"), oracle::random_grid_cmdp(args.size, args.seed.wrapping_add(i as u64))?)))
            .collect::<Result<_>>()?,
        (None, None) => return Err(Error::Config("verify needs --cmdp or --random".into())),
    };
    let mut passed = 0;
    for (name, cmdp) in &instances {
        let report = oracle::verify_prop1(cmdp);
        if report.ok() {
            passed += 1;
        } else {
            for d in &report.discrepancies {
                eprintln!(
                    "{name}: state {} value {} dijkstra {:?} greedy {:?}",
                    d.state, d.value, d.dijkstra_cost, d.greedy_cost
                );
            }
        }
    }
    let status = if passed == instances.len() { "OK" } else { "FAIL" };
    println!("prop1: {passed}/{} {status}", instances.len());
    if passed == instances.len() {
        Ok(())
    } else {
        Err(Error::Infeasible(format!("{} instance(s) disagree", instances.len() - passed)))
    }
}

/// Transitions of the scenario's pose lattice on the run terrain.
fn lattice_pairs(cfg: &RunConfig) -> Result<Vec<PairSample>> {
    let grid = run_terrain(cfg)?;
    let env = NavEnv::new(cfg.scenario.clone(), grid, rng::stream(cfg.seed, rng::EVAL))?;
    let lattice = oracle::discretize_env(
        &env,
        harness::ORACLE_RESOLUTION,
        harness::ORACLE_HEADING_BINS,
        harness::ORACLE_SPEED,
    )?;
    Ok(lattice.pair_samples(&env)?.into_iter().map(|(p, _)| p).collect())
}

fn embed_train(args: &EmbedArgs) -> Result<()> {
    let common = CommonArgs { config: args.config.clone(), scenario: args.scenario, seed: args.seed, out: None };
    let (mut cfg, _) = resolve_common(&common, "embed-train")?;
    if let Some(path) = &args.out {
        cfg.embed.checkpoint = path.clone();
        cfg.out_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    }
    if args.replay.is_some() {
        cfg.embed.replay = args.replay.clone();
    }
    if let Some(n) = args.epochs {
        cfg.embed.epochs = n;
    }
    cfg.validate()?;
    let json = cfg.to_json();
    let stem = cfg.embed.checkpoint.with_extension("");
    write_file(&PathBuf::from(format!("{}.config.json", stem.display())), &(json.clone() + "\n"))?;
    let data = match &cfg.embed.replay {
        Some(path) => parse_replay_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => lattice_pairs(&cfg)?,
    };
    let mut model = QuasimetricModel::init(
        INPUT_DIM,
        &cfg.train.embed_hidden,
        cfg.train.embed_dim,
        &mut rng::stream(cfg.seed, rng::EMBED_INIT),
    )?;
    let opts = TrainOptions { epochs: cfg.embed.epochs, lr: cfg.train.embed_lr, ..TrainOptions::default() };
    let cal = quasimetric::calibrate_to_cost(&mut model, &data, &opts, &mut rng::stream(cfg.seed, rng::NEGATIVES))?;
    model
        .to_checkpoint(cfg.seed)
        .with_vector("cost_scale", &[cal.scale])
        .write(&cfg.embed.checkpoint)?;
    let mut csv = harness::csv_preamble("embedding-calibration", &json);
    csv.push_str("transitions,epochs,final_loss,scale,spearman\n");
    let _ = writeln!(csv, "{},{},{},{},{}", data.len(), cfg.embed.epochs, cal.final_loss, cal.scale, cal.spearman);
    write_file(&PathBuf::from(format!("{}_calibration.csv", stem.display())), &csv)?;
    println!(
        "embedding trained on {} transitions: loss {:.4}, scale {:.4}, spearman {:.3}",
        data.len(),
        cal.final_loss,
        cal.scale,
        cal.spearman
    );
    Ok(())
}

/// `(x, y)` columns of a trajectory CSV.
pub fn parse_trajectory_xy(text: &str) -> Result<Vec<(f64, f64)>> {
    harness::csv_data_lines(text)
        .map(|line| {
            let mut f = line.split(',').skip(1).map(|t| t.trim().parse::<f64>().map_err(|e| Error::parse("trajectory", e)));
            match (f.next(), f.next()) {
                (Some(x), Some(y)) => Ok((x?, y?)),
                _ => Err(Error::parse("trajectory", format!("short row {line:?}"))),
            }
        })
        .collect()
}

fn plot(args: &PlotArgs) -> Result<()> {
    if args.curves.is_empty() && args.trajectories.is_empty() {
        return Err(Error::Input("nothing to plot: pass --curves and/or --trajectories".into()));
    }
    let out = args.out.clone().unwrap_or_else(|| default_out("plot"));
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let mut sources = String::from("{\"curves\":[");
    sources.push_str(&args.curves.iter().map(|p| format!("{:?}", p.display().to_string())).collect::<Vec<_>>().join(","));
    sources.push_str("],\"trajectories\":[");
    sources.push_str(
        &args.trajectories.iter().map(|p| format!("{:?}", p.display().to_string())).collect::<Vec<_>>().join(","),
    );
    sources.push_str("]}");
    if !args.curves.is_empty() {
        let mut curves = Vec::new();
        for path in &args.curves {
            let rows = harness::parse_curve_csv(&read(path)?)?;
            let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            curves.push((label, harness::learning_curves(&[rows])?));
        }
        write_file(&out.join("learning_curves.svg"), &harness::svg_learning_curves(&curves, &sources))?;
    }
    if !args.trajectories.is_empty() {
        let paths = args.trajectories.iter().map(|p| parse_trajectory_xy(&read(p)?)).collect::<Result<Vec<_>>>()?;
        let grid = match &args.terrain {
            Some(dir) => TerrainGrid::read_dir(dir)?,
            None => return Err(Error::Input("trajectory plots need --terrain".into())),
        };
        write_file(&out.join("paths.svg"), &harness::svg_paths_on_terrain(&grid, &paths, &sources)?)?;
    }
    println!("plots written to {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1..10").unwrap(), (1..=10).collect::<Vec<_>>());
        assert_eq!(parse_seed_list("1..=3").unwrap(), vec![1, 2, 3]);
        assert_eq!(parse_seed_list("4,2,9").unwrap(), vec![4, 2, 9]);
        assert_eq!(parse_seed_list("7").unwrap(), vec![7]);
        assert!(parse_seed_list("5..2").is_err());
        assert!(parse_seed_list("a").is_err());
    }

    #[test]
    fn run_config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::defaults(Scenario::Hill, Algorithm::Cpo, 3, PathBuf::from("x"));
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
        v = serde_json::from_str(&cfg.to_json()).unwrap();
        v["train"]["bogus"] = serde_json::json!(1);
        assert!(RunConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn switches_disable_embedding_and_tightening() {
        let mut cfg = RunConfig::defaults(Scenario::Hill, Algorithm::Qcpo, 1, PathBuf::from("x"));
        let o = TrainOverrides { algo: None, no_qe: true, no_act: true, steps: Some(10), steps_per_batch: None };
        apply_train_overrides(&mut cfg, &o, false);
        assert_eq!(cfg.train.advantage_mode, AdvantageMode::Gae);
        assert!(!cfg.train.train_embedding);
        assert_eq!(cfg.train.act_alpha, 0.0);
        assert_eq!(cfg.train.total_steps, 10);
        assert!(cfg.no_qe && cfg.no_act);
    }

    #[test]
    fn replay_round_trip() {
        let pairs = vec![
            PairSample { from: vec![0.5; INPUT_DIM], to: vec![-1.25; INPUT_DIM], cost: 0.3 },
            PairSample { from: (0..INPUT_DIM).map(|i| i as f64).collect(), to: vec![0.0; INPUT_DIM], cost: 2.0 },
        ];
        assert_eq!(parse_replay_csv(&replay_csv(&pairs, "{}")).unwrap(), pairs);
        assert!(parse_replay_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(parse_and_dispatch(["qnav", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(parse_and_dispatch(["qnav", "eval"]), EXIT_USAGE);
        assert_eq!(parse_and_dispatch(["qnav"]), EXIT_USAGE);
        assert_eq!(parse_and_dispatch(["qnav", "verify", "--help"]), EXIT_OK);
    }

    #[test]
    fn verify_random_instances() {
        assert_eq!(parse_and_dispatch(["qnav", "verify", "--random", "3", "--size", "4", "--seed", "2"]), EXIT_OK);
    }
}
