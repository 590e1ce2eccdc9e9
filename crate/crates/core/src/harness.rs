//! Evaluation metrics, ablation runs, learning-curve aggregation and report
//! files (CSV plus small SVG plots).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpo::{self, Algorithm, CurveRow, PolicyNet, TrainConfig};
use crate::envs::{run_episode, ActionCmd, EpisodeLog, NavEnv, RobotState, ScenarioConfig};
use crate::error::{Error, Result};
use crate::oracle::{asym_dijkstra, costs_to, discretize_env, segment_cost, DiscreteCMDP, DiscreteEnv};
use crate::rng;
use crate::terrain::{wrap_angle, TerrainGrid};

/// Version tag written into every CSV preamble.
pub const CSV_VERSION: &str = "qnav-csv-v1";

/// Build identifier embedded in report files.
pub const GIT_DESCRIBE: &str = env!("QNAV_GIT_DESCRIBE");

/// Lattice spacing (m) and heading bins of the evaluation oracle.
pub const ORACLE_RESOLUTION: f64 = 2.0;
pub const ORACLE_HEADING_BINS: usize = 8;
pub const ORACLE_SPEED: f64 = 1.0;

/// Half-width of the centred moving average applied before reading off
/// sample efficiency.
pub const SMOOTHING_HALF_WIDTH: usize = 2;

/// Something that picks an action every control period.
#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    /// Mean action of a trained policy.
    Policy(Box<PolicyNet>),
    /// Proportional heading control toward the goal at a fixed speed.
    StraightToGoal { speed: f64, gain: f64 },
    NeverMove,
}

impl Controller {
    pub fn act(&self, env: &NavEnv, state: &RobotState, obs: &[f64]) -> Result<ActionCmd> {
        match self {
            Controller::Policy(p) => p.mean_action(obs),
            Controller::StraightToGoal { speed, gain } => {
                let goal = env.config().goal;
                let bearing = (goal[1] - state.y).atan2(goal[0] - state.x);
                let err = wrap_angle(bearing - state.heading);
                let w = env.config().omega_max;
                Ok(ActionCmd { v_cmd: *speed, omega_cmd: (gain * err).clamp(-w, w) })
            }
            Controller::NeverMove => Ok(ActionCmd::STOP),
        }
    }
}

/// Shortest feasible path lengths to the goal on one terrain.
///
/// A start whose straight segment to the goal is safe gets the straight-line
/// length. Otherwise the shortest safe path on the pose lattice is shortened
/// greedily by replacing runs of waypoints with straight safe segments.
/// Lengths exclude the goal tolerance, since episodes end on entering it.
pub struct PathOracle {
    env: NavEnv,
    lattice: DiscreteEnv,
    lengths: DiscreteCMDP,
    to_goal: Vec<f64>,
}

impl PathOracle {
    pub fn new(scenario: &ScenarioConfig, grid: Arc<TerrainGrid>) -> Result<Self> {
        let env = NavEnv::new(scenario.clone(), grid, rng::stream(0, rng::EVAL))?;
        let lattice = discretize_env(&env, ORACLE_RESOLUTION, ORACLE_HEADING_BINS, ORACLE_SPEED)?;
        let mut lengths = lattice.length_cmdp();
        // only the safety flags matter for the length graph
        lengths.delta_step = f64::INFINITY;
        let (to_goal, _) = costs_to(&lengths, lattice.sink());
        Ok(Self { env, lattice, lengths, to_goal })
    }

    fn safe(&self, a: (f64, f64), b: (f64, f64)) -> Result<bool> {
        if (a.0 - b.0).hypot(a.1 - b.1) < 1e-12 {
            return Ok(true);
        }
        Ok(segment_cost(&self.env, a, b, ORACLE_SPEED)?.1)
    }

    /// Oracle length from `start`, or `None` if the lattice has no safe route.
    pub fn shortest_length(&self, start: (f64, f64)) -> Result<Option<f64>> {
        let cfg = self.env.config();
        let goal = (cfg.goal[0], cfg.goal[1]);
        let tol = cfg.goal_tolerance;
        let straight = (goal.0 - start.0).hypot(goal.1 - start.1);
        if straight <= tol {
            return Ok(Some(0.0));
        }
        if self.safe(start, goal)? {
            return Ok(Some(straight - tol));
        }
        let node = self.lattice.nearest_node(start.0, start.1);
        let best = (0..self.lattice.heading_bins)
            .map(|b| self.lattice.state_index(node, b))
            .min_by(|a, b| self.to_goal[*a].total_cmp(&self.to_goal[*b]).then(a.cmp(b)))
            .filter(|s| self.to_goal[*s].is_finite());
        let Some(state) = best else {
            return Ok(None);
        };
        let Some(path) = asym_dijkstra(&self.lengths, state, self.lattice.sink()) else {
            return Ok(None);
        };
        let mut points = vec![start];
        for &s in &path.states {
            if s != self.lattice.sink() {
                points.push(self.lattice.node_xy(s / self.lattice.heading_bins));
            }
        }
        points.push(goal);
        let mut total = 0.0;
        let mut i = 0;
        while i + 1 < points.len() {
            let mut j = points.len() - 1;
            while j > i + 1 && !self.safe(points[i], points[j])? {
                j -= 1;
            }
            total += (points[j].0 - points[i].0).hypot(points[j].1 - points[i].1);
            i = j;
        }
        Ok(Some((total - tol).max(0.0)))
    }
}

/// One evaluation episode with its oracle reference length.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub seed: u64,
    pub episode: usize,
    pub log: EpisodeLog,
    /// NaN when no safe route exists.
    pub oracle_length: f64,
}

/// The per-episode numbers every metric is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub episode: usize,
    pub steps: usize,
    pub violations: usize,
    pub reached_goal: bool,
    pub terminated_unsafe: bool,
    pub path_length: f64,
    pub energy_j: f64,
    pub total_reward: f64,
    pub oracle_length: f64,
}

impl EpisodeSummary {
    pub const CSV_HEADER: &'static str =
        "seed,episode,steps,violations,reached_goal,terminated_unsafe,path_length,energy_j,total_reward,oracle_length";

    pub fn of(ep: &EvalEpisode) -> Self {
        Self {
            seed: ep.seed,
            episode: ep.episode,
            steps: ep.log.transitions.len(),
            violations: ep.log.transitions.iter().filter(|t| t.violated).count(),
            reached_goal: ep.log.reached_goal(),
            terminated_unsafe: ep.log.terminated_unsafe(),
            path_length: ep.log.path_length(),
            energy_j: ep.log.total_energy(),
            total_reward: ep.log.total_reward(),
            oracle_length: ep.oracle_length,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.episode,
            self.steps,
            self.violations,
            u8::from(self.reached_goal),
            u8::from(self.terminated_unsafe),
            self.path_length,
            self.energy_j,
            self.total_reward,
            self.oracle_length
        )
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 10 {
            return Err(Error::parse("episode summary", format!("expected 10 fields, got {}", f.len())));
        }
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| Error::parse("episode summary", e));
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| Error::parse("episode summary", e));
        let flag = |i: usize| match f[i] {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::parse("episode summary", format!("bad flag {other:?}"))),
        };
        Ok(Self {
            seed: int(0)?,
            episode: int(1)? as usize,
            steps: int(2)? as usize,
            violations: int(3)? as usize,
            reached_goal: flag(4)?,
            terminated_unsafe: flag(5)?,
            path_length: num(6)?,
            energy_j: num(7)?,
            total_reward: num(8)?,
            oracle_length: num(9)?,
        })
    }
}

/// Navigation metric suite over a set of evaluation episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub success_rate: f64,
    /// Mean of path length / oracle length over successful episodes (NaN if none).
    pub path_efficiency: f64,
    /// Total energy over total distance (NaN if nothing moved).
    pub energy_per_m: f64,
    pub violation_rate: f64,
    /// Steps to reach 95% of the final return, when a learning curve is known.
    pub sample_efficiency: Option<f64>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "label,success_rate,path_efficiency,energy_per_m,violation_rate,sample_efficiency,episodes,seeds";

    pub fn csv_line(&self, label: &str) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            label,
            self.success_rate,
            self.path_efficiency,
            self.energy_per_m,
            self.violation_rate,
            self.sample_efficiency.map(|s| s.to_string()).unwrap_or_default(),
            self.episodes,
            seeds.join(" ")
        )
    }
}

/// Computes the metric suite from episode summaries alone.
pub fn metrics_from_summaries(summaries: &[EpisodeSummary]) -> MetricsRecord {
    let mut seeds: Vec<u64> = summaries.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let n = summaries.len();
    let successes: Vec<&EpisodeSummary> =
        summaries.iter().filter(|s| s.reached_goal && !s.terminated_unsafe).collect();
    let ratios: Vec<f64> = successes
        .iter()
        .filter(|s| s.oracle_length.is_finite() && s.oracle_length > 0.0)
        .map(|s| s.path_length / s.oracle_length)
        .collect();
    let steps: usize = summaries.iter().map(|s| s.steps).sum();
    let violations: usize = summaries.iter().map(|s| s.violations).sum();
    let distance = sorted_sum(summaries.iter().map(|s| s.path_length));
    let energy = sorted_sum(summaries.iter().map(|s| s.energy_j));
    MetricsRecord {
        success_rate: if n == 0 { 0.0 } else { successes.len() as f64 / n as f64 },
        path_efficiency: if ratios.is_empty() { f64::NAN } else { sorted_sum(ratios.iter().copied()) / ratios.len() as f64 },
        energy_per_m: if distance > 0.0 { energy / distance } else { f64::NAN },
        violation_rate: if steps == 0 { 0.0 } else { violations as f64 / steps as f64 },
        sample_efficiency: None,
        episodes: n,
        seeds,
    }
}

/// Order-independent floating-point sum.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Runs `n_episodes` per evaluation seed with deterministic starts drawn from
/// each seed's evaluation stream. Seeds run in parallel.
pub fn evaluate(
    controller: &Controller,
    scenario: &ScenarioConfig,
    grid: Arc<TerrainGrid>,
    n_episodes: usize,
    seeds: &[u64],
) -> Result<(MetricsRecord, Vec<EvalEpisode>)> {
    if n_episodes == 0 || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode and one seed".into()));
    }
    let oracle = PathOracle::new(scenario, Arc::clone(&grid))?;
    let per_seed: Vec<Result<Vec<EvalEpisode>>> = seeds
        .par_iter()
        .map(|&seed| {
            let mut env = NavEnv::new(scenario.clone(), Arc::clone(&grid), rng::stream(seed, rng::EVAL))?;
            (0..n_episodes)
                .map(|episode| {
                    let log = run_episode(&mut env, None, |e, s, o| controller.act(e, s, o))?;
                    let oracle_length = oracle.shortest_length((log.initial.x, log.initial.y))?.unwrap_or(f64::NAN);
                    Ok(EvalEpisode { seed, episode, log, oracle_length })
                })
                .collect()
        })
        .collect();
    let mut episodes = Vec::with_capacity(n_episodes * seeds.len());
    for r in per_seed {
        episodes.extend(r?);
    }
    let summaries: Vec<EpisodeSummary> = episodes.iter().map(EpisodeSummary::of).collect();
    Ok((metrics_from_summaries(&summaries), episodes))
}

/// Learning curves aggregated across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedCurve {
    pub steps: Vec<usize>,
    pub mean_return: Vec<f64>,
    pub std_return: Vec<f64>,
    pub smoothed_return: Vec<f64>,
    pub mean_success: Vec<f64>,
    pub mean_violation: Vec<f64>,
    pub mean_delta: Vec<f64>,
    pub sample_efficiency: f64,
    pub n_seeds: usize,
}

impl AggregatedCurve {
    pub const CSV_HEADER: &'static str =
        "steps,mean_return,std_return,smoothed_return,mean_success,mean_violation,mean_delta";
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = sorted_sum(values.iter().copied()) / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = sorted_sum(values.iter().map(|v| (v - mean).powi(2))) / (n - 1.0);
    (mean, var.sqrt())
}

/// Centred moving average whose window shrinks symmetrically at the ends,
/// so linear series are left unchanged.
pub fn smooth(values: &[f64], half_width: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let h = half_width.min(i).min(n - 1 - i);
            values[i - h..=i + h].iter().sum::<f64>() / (2 * h + 1) as f64
        })
        .collect()
}

/// First step count at which the smoothed series covers 95% of its change
/// from the first to the final value.
pub fn sample_efficiency(steps: &[usize], smoothed: &[f64]) -> f64 {
    let (Some(&first), Some(&last)) = (smoothed.first(), smoothed.last()) else {
        return f64::NAN;
    };
    let threshold = first + 0.95 * (last - first);
    let slack = 1e-9 * (1.0 + threshold.abs());
    let rising = last >= first;
    smoothed
        .iter()
        .position(|&v| if rising { v >= threshold - slack } else { v <= threshold + slack })
        .map(|i| steps[i] as f64)
        .unwrap_or(f64::NAN)
}

/// Per-iteration mean and sample standard deviation across seeds. Logs of
/// unequal length are truncated to the shortest with a warning.
pub fn learning_curves(logs: &[Vec<CurveRow>]) -> Result<AggregatedCurve> {
    if logs.is_empty() {
        return Err(Error::Input("no learning-curve logs".into()));
    }
    let len = logs.iter().map(Vec::len).min().unwrap_or(0);
    if len == 0 {
        return Err(Error::Input("empty learning-curve log".into()));
    }
    if logs.iter().any(|l| l.len() != len) {
        log::warn!("learning-curve logs differ in length; truncating to {len} iterations");
    }
    let mut out = AggregatedCurve {
        steps: Vec::with_capacity(len),
        mean_return: Vec::with_capacity(len),
        std_return: Vec::with_capacity(len),
        smoothed_return: Vec::new(),
        mean_success: Vec::with_capacity(len),
        mean_violation: Vec::with_capacity(len),
        mean_delta: Vec::with_capacity(len),
        sample_efficiency: f64::NAN,
        n_seeds: logs.len(),
    };
    for i in 0..len {
        let column = |f: fn(&CurveRow) -> f64| logs.iter().map(|l| f(&l[i])).collect::<Vec<f64>>();
        let (m, s) = mean_std(&column(|r| r.mean_return));
        out.steps.push(logs.iter().map(|l| l[i].steps).min().unwrap_or(0));
        out.mean_return.push(m);
        out.std_return.push(s);
        out.mean_success.push(mean_std(&column(|r| r.success_rate)).0);
        out.mean_violation.push(mean_std(&column(|r| r.violation_rate)).0);
        out.mean_delta.push(mean_std(&column(|r| r.delta)).0);
    }
    out.smoothed_return = smooth(&out.mean_return, SMOOTHING_HALF_WIDTH);
    out.sample_efficiency = sample_efficiency(&out.steps, &out.smoothed_return);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoQe,
    NoAct,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoQe, Variant::NoAct];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoQe => "no_qe",
            Variant::NoAct => "no_act",
        }
    }

    /// Training configuration of this variant, derived from a template.
    pub fn config(self, template: &TrainConfig, seed: u64) -> TrainConfig {
        let (no_qe, no_act) = (self == Variant::NoQe, self == Variant::NoAct);
        let defaults = TrainConfig::for_algorithm(Algorithm::Qcpo, seed, no_qe, no_act);
        TrainConfig {
            algorithm: Algorithm::Qcpo,
            seed,
            act_alpha: defaults.act_alpha,
            advantage_mode: defaults.advantage_mode,
            train_embedding: defaults.train_embedding,
            ..template.clone()
        }
    }
}

/// One variant's evaluation over all ablation seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsRecord,
    /// Seeds whose training diverged; they are excluded from the metrics.
    pub diverged: Vec<u64>,
    pub curve: Option<AggregatedCurve>,
    /// Per-seed success and violation rates, in seed order.
    pub per_seed: Vec<(u64, f64, f64)>,
}

impl AblationRow {
    pub fn flagged(&self) -> bool {
        !self.diverged.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationOptions {
    pub template: TrainConfig,
    pub eval_episodes: usize,
}

/// Trains every variant on every seed (same terrain and initial weights per
/// seed) and evaluates each policy on its training terrain with the
/// training seed as evaluation seed.
pub fn run_ablation(scenario: &ScenarioConfig, seeds: &[u64], opts: &AblationOptions) -> Result<Vec<AblationRow>> {
    if seeds.len() < 5 {
        return Err(Error::Config(format!("ablation needs at least 5 seeds, got {}", seeds.len())));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Result<Option<(Vec<CurveRow>, Vec<EvalEpisode>)>>> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = variant.config(&opts.template, seed);
            match cpo::train(scenario, &cfg) {
                Ok(out) => {
                    let controller = Controller::Policy(Box::new(out.policy));
                    let (_, eps) = evaluate(&controller, scenario, out.grid, opts.eval_episodes, &[seed])?;
                    Ok(Some((out.curve, eps)))
                }
                Err(Error::Diverged { iteration, reason, .. }) => {
                    log::warn!("{} seed {seed} diverged at iteration {iteration}: {reason}", variant.name());
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut results = results.into_iter();
    for variant in Variant::ALL {
        let mut episodes = Vec::new();
        let mut curves = Vec::new();
        let mut diverged = Vec::new();
        let mut per_seed = Vec::new();
        for &seed in seeds {
            match results.next().ok_or_else(|| Error::State("missing ablation result".into()))?? {
                Some((curve, eps)) => {
                    let summaries: Vec<EpisodeSummary> = eps.iter().map(EpisodeSummary::of).collect();
                    let m = metrics_from_summaries(&summaries);
                    per_seed.push((seed, m.success_rate, m.violation_rate));
                    curves.push(curve);
                    episodes.extend(summaries);
                }
                None => diverged.push(seed),
            }
        }
        let mut metrics = metrics_from_summaries(&episodes);
        let curve = if curves.is_empty() { None } else { Some(learning_curves(&curves)?) };
        metrics.sample_efficiency = curve.as_ref().map(|c| c.sample_efficiency);
        rows.push(AblationRow { variant, metrics, diverged, curve, per_seed });
    }
    Ok(rows)
}

/// `value (+x.x%)` relative to `reference`, as in a results table.
pub fn format_with_delta(value: f64, reference: f64, decimals: usize) -> String {
    let base = format!("{value:.decimals$}");
    if !value.is_finite() || !reference.is_finite() || reference == 0.0 {
        return format!("{base} (n/a)");
    }
    let pct = (value - reference) / reference.abs() * 100.0;
    format!("{base} ({pct:+.1}%)")
}

/// Ablation table rows: the full variant plain, the others with deltas.
pub fn ablation_table(rows: &[AblationRow]) -> Vec<[String; 7]> {
    let full = rows.iter().find(|r| r.variant == Variant::Full).map(|r| r.metrics.clone());
    rows.iter()
        .map(|r| {
            let m = &r.metrics;
            let cells = [
                (100.0 * m.success_rate, full.as_ref().map(|f| 100.0 * f.success_rate), 1),
                (m.path_efficiency, full.as_ref().map(|f| f.path_efficiency), 3),
                (m.energy_per_m, full.as_ref().map(|f| f.energy_per_m), 1),
                (100.0 * m.violation_rate, full.as_ref().map(|f| 100.0 * f.violation_rate), 2),
                (
                    m.sample_efficiency.unwrap_or(f64::NAN),
                    full.as_ref().map(|f| f.sample_efficiency.unwrap_or(f64::NAN)),
                    0,
                ),
            ];
            let fmt = |(v, reference, d): (f64, Option<f64>, usize)| match reference {
                Some(reference) if r.variant != Variant::Full => format_with_delta(v, reference, d),
                _ => format!("{v:.d$}"),
            };
            let flag = if r.flagged() {
                let s: Vec<String> = r.diverged.iter().map(u64::to_string).collect();
                format!("diverged: {}", s.join(" "))
            } else {
                String::new()
            };
            [
                r.variant.name().to_string(),
                fmt(cells[0]),
                fmt(cells[1]),
                fmt(cells[2]),
                fmt(cells[3]),
                fmt(cells[4]),
                flag,
            ]
        })
        .collect()
}

/// Comment lines opening every CSV: format version, build and configuration.
pub fn csv_preamble(kind: &str, config_json: &str) -> String {
    let one_line = config_json.replace(['\n', '\r'], " ");
    format!("# {CSV_VERSION} {kind}\n# git: {GIT_DESCRIBE}\n# config: {one_line}\n")
}

/// Strips `#` comment lines and the header, returning data lines.
pub fn csv_data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()).skip(1)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn metrics_csv(records: &[(String, MetricsRecord)], config_json: &str) -> String {
    let mut s = csv_preamble("metrics", config_json);
    s.push_str(MetricsRecord::CSV_HEADER);
    s.push('\n');
    for (label, r) in records {
        s.push_str(&r.csv_line(label));
        s.push('\n');
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow], config_json: &str) -> String {
    let mut s = csv_preamble("ablation", config_json);
    s.push_str("variant,success_pct,path_efficiency,energy_per_m,violation_pct,sample_efficiency_steps,flag\n");
    for cells in ablation_table(rows) {
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

pub fn curve_csv(rows: &[CurveRow], config_json: &str) -> String {
    let mut s = csv_preamble("learning-curve", config_json);
    s.push_str(CurveRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Vec<CurveRow>> {
    csv_data_lines(text).map(CurveRow::parse_csv_line).collect()
}

pub fn aggregated_curve_csv(curve: &AggregatedCurve, config_json: &str) -> String {
    let mut s = csv_preamble("aggregated-curve", config_json);
    s.push_str(AggregatedCurve::CSV_HEADER);
    s.push('\n');
    for i in 0..curve.steps.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            curve.steps[i],
            curve.mean_return[i],
            curve.std_return[i],
            curve.smoothed_return[i],
            curve.mean_success[i],
            curve.mean_violation[i],
            curve.mean_delta[i]
        );
    }
    s
}

pub fn episodes_csv(episodes: &[EpisodeSummary], config_json: &str) -> String {
    let mut s = csv_preamble("episodes", config_json);
    s.push_str(EpisodeSummary::CSV_HEADER);
    s.push('\n');
    for e in episodes {
        s.push_str(&e.csv_line());
        s.push('\n');
    }
    s
}

pub fn parse_episodes_csv(text: &str) -> Result<Vec<EpisodeSummary>> {
    csv_data_lines(text).map(EpisodeSummary::parse_csv_line).collect()
}

/// Everything `emit_report` writes.
#[derive(Debug, Clone, Default)]
pub struct Report {
    pub config_json: String,
    pub metrics: Vec<(String, MetricsRecord)>,
    pub ablation: Vec<AblationRow>,
    pub curves: Vec<(String, AggregatedCurve)>,
    pub episodes: Vec<EvalEpisode>,
    pub grid: Option<Arc<TerrainGrid>>,
}

/// Writes `metrics.csv`, `ablation.csv`, `episodes.csv`, one trajectory CSV
/// per episode under `trajectories/`, and the SVG plots (learning curves when
/// curves are present, paths over terrain contours when a grid is present).
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = &report.config_json;
    write_file(&dir.join("metrics.csv"), &metrics_csv(&report.metrics, cfg))?;
    write_file(&dir.join("ablation.csv"), &ablation_csv(&report.ablation, cfg))?;
    let summaries: Vec<EpisodeSummary> = report.episodes.iter().map(EpisodeSummary::of).collect();
    write_file(&dir.join("episodes.csv"), &episodes_csv(&summaries, cfg))?;
    for ep in &report.episodes {
        let mut buf = csv_preamble("trajectory", cfg).into_bytes();
        ep.log.write_csv(&mut buf).map_err(|e| Error::io(dir, e))?;
        let text = String::from_utf8(buf).map_err(|e| Error::State(e.to_string()))?;
        write_file(&dir.join("trajectories").join(format!("seed{}_ep{:03}.csv", ep.seed, ep.episode)), &text)?;
    }
    for (label, curve) in &report.curves {
        write_file(&dir.join(format!("curve_{label}.csv")), &aggregated_curve_csv(curve, cfg))?;
    }
    if !report.curves.is_empty() {
        write_file(&dir.join("learning_curves.svg"), &svg_learning_curves(&report.curves, cfg))?;
    }
    if let Some(grid) = &report.grid {
        let paths: Vec<Vec<(f64, f64)>> = report.episodes.iter().map(|e| episode_path(&e.log)).collect();
        write_file(&dir.join("paths.svg"), &svg_paths_on_terrain(grid, &paths, cfg)?)?;
    }
    Ok(())
}

pub fn episode_path(log: &EpisodeLog) -> Vec<(f64, f64)> {
    std::iter::once((log.initial.x, log.initial.y))
        .chain(log.transitions.iter().map(|t| (t.next_state.x, t.next_state.y)))
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

fn svg_open(width: f64, height: f64, config_json: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<!-- {} git {} -->\n<!-- config {} -->\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n",
        CSV_VERSION,
        svg_escape(GIT_DESCRIBE),
        svg_escape(&config_json.replace(['\n', '\r'], " "))
    )
}

/// Mean return per curve with a ±1 std band.
pub fn svg_learning_curves(curves: &[(String, AggregatedCurve)], config_json: &str) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut s = svg_open(w, h, config_json);
    let max_x = curves.iter().flat_map(|(_, c)| c.steps.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let ys = curves.iter().flat_map(|(_, c)| {
        c.mean_return.iter().zip(&c.std_return).flat_map(|(m, d)| [m - d, m + d])
    });
    let (mut lo, mut hi) = ys.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() || hi - lo < 1e-9 {
        lo = if lo.is_finite() { lo - 1.0 } else { 0.0 };
        hi = lo + 2.0;
    }
    let px = |x: f64| pad + x / max_x * (w - 2.0 * pad);
    let py = |y: f64| h - pad - (y - lo) / (hi - lo) * (h - 2.0 * pad);
    let _ = writeln!(
        s,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">steps (max {max_x})</text>", w / 2.0, h - 15.0);
    let _ = writeln!(s, "<text x=\"10\" y=\"{}\" font-size=\"12\">return [{lo:.1}, {hi:.1}]</text>", pad - 20.0);
    for (k, (label, c)) in curves.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let upper: Vec<String> =
            (0..c.steps.len()).map(|i| format!("{:.2},{:.2}", px(c.steps[i] as f64), py(c.mean_return[i] + c.std_return[i]))).collect();
        let lower: Vec<String> = (0..c.steps.len())
            .rev()
            .map(|i| format!("{:.2},{:.2}", px(c.steps[i] as f64), py(c.mean_return[i] - c.std_return[i])))
            .collect();
        let _ = writeln!(s, "<polygon points=\"{} {}\" fill=\"{colour}\" fill-opacity=\"0.2\" stroke=\"none\"/>", upper.join(" "), lower.join(" "));
        let mean: Vec<String> =
            (0..c.steps.len()).map(|i| format!("{:.2},{:.2}", px(c.steps[i] as f64), py(c.mean_return[i]))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>", mean.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{colour}\">{}</text>",
            w - pad - 120.0,
            pad + 16.0 * k as f64,
            svg_escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Marching-squares contour segments of the elevation raster at `level`.
fn contour_segments(grid: &TerrainGrid, level: f64) -> Vec<[(f64, f64); 2]> {
    let mut out = Vec::new();
    let cs = grid.cell_size;
    let z = |i: usize, j: usize| grid.elevation[j * grid.width + i];
    let lerp = |a: f64, b: f64| if (b - a).abs() < 1e-12 { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
    for j in 0..grid.height - 1 {
        for i in 0..grid.width - 1 {
            let c = [z(i, j), z(i + 1, j), z(i + 1, j + 1), z(i, j + 1)];
            let (x0, y0) = (i as f64 * cs, j as f64 * cs);
            // crossing points on the edges bottom, right, top, left
            let mut pts = Vec::with_capacity(4);
            let edges = [(0, 1), (1, 2), (2, 3), (3, 0)];
            for (k, &(a, b)) in edges.iter().enumerate() {
                if (c[a] < level) != (c[b] < level) {
                    let t = lerp(c[a], c[b]);
                    let p = match k {
                        0 => (x0 + t * cs, y0),
                        1 => (x0 + cs, y0 + t * cs),
                        2 => (x0 + (1.0 - t) * cs, y0 + cs),
                        _ => (x0, y0 + (1.0 - t) * cs),
                    };
                    pts.push(p);
                }
            }
            if pts.len() >= 2 {
                out.push([pts[0], pts[1]]);
            }
            if pts.len() == 4 {
                out.push([pts[2], pts[3]]);
            }
        }
    }
    out
}

/// Elevation contours (ten levels) with episode paths drawn on top.
pub fn svg_paths_on_terrain(grid: &TerrainGrid, paths: &[Vec<(f64, f64)>], config_json: &str) -> Result<String> {
    let size = grid.size_m();
    let scale = 560.0 / size;
    let pad = 20.0;
    let w = size * scale + 2.0 * pad;
    let mut s = svg_open(w, w, config_json);
    let px = |x: f64| pad + x * scale;
    let py = |y: f64| w - pad - y * scale;
    let (lo, hi) = grid
        .elevation
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let _ = writeln!(s, "<rect x=\"{pad}\" y=\"{pad}\" width=\"{0}\" height=\"{0}\" fill=\"none\" stroke=\"black\"/>", size * scale);
    if hi - lo > 1e-9 {
        for k in 1..10 {
            let level = lo + (hi - lo) * k as f64 / 10.0;
            let mut d = String::new();
            for [a, b] in contour_segments(grid, level) {
                let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", px(a.0), py(a.1), px(b.0), py(b.1));
            }
            if !d.is_empty() {
                let _ = writeln!(s, "<path d=\"{d}\" fill=\"none\" stroke=\"#8c8c8c\" stroke-width=\"0.7\"/>");
            }
        }
    }
    for (k, path) in paths.iter().enumerate() {
        if path.is_empty() {
            continue;
        }
        let pts: Vec<String> = path.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            pts.join(" "),
            PALETTE[k % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
