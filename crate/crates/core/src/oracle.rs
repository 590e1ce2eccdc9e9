//! Exact solvers on small deterministic constrained MDPs.
//!
//! With deterministic transitions, non-negative costs and no discounting, the
//! optimal constrained value satisfies `V*(s) = -(min-cost feasible path from s
//! to the goal)`. [`verify_prop1`] checks this by solving every instance twice,
//! once with value iteration and once with Dijkstra.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::envs::{ActionCmd, NavEnv, RobotState};
use crate::error::{Error, Result};
use crate::quasimetric::{encode_action, input_of, PairSample};
use crate::rng;

/// Tolerance used when comparing path costs.
pub const COST_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub action: usize,
    pub dst: usize,
    pub cost: f64,
    /// The successor is inside the safe set.
    pub safe: bool,
}

/// Deterministic CMDP as a directed graph. An edge is feasible when it is
/// safe and its cost respects the per-step bound `delta_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteCMDP {
    pub n_states: usize,
    pub goal: usize,
    pub delta_step: f64,
    pub edges: Vec<Vec<Edge>>,
}

impl DiscreteCMDP {
    pub fn new(n_states: usize, goal: usize) -> Result<Self> {
        if goal >= n_states {
            return Err(Error::Config(format!("goal {goal} out of range for {n_states} states")));
        }
        Ok(Self { n_states, goal, delta_step: f64::INFINITY, edges: vec![Vec::new(); n_states] })
    }

    pub fn add_edge(&mut self, src: usize, action: usize, dst: usize, cost: f64, safe: bool) -> Result<()> {
        if src >= self.n_states || dst >= self.n_states {
            return Err(Error::Config(format!("edge {src}->{dst} out of range")));
        }
        if !(cost >= 0.0) || !cost.is_finite() {
            return Err(Error::Config(format!("edge {src}->{dst} has invalid cost {cost}")));
        }
        self.edges[src].push(Edge { action, dst, cost, safe });
        Ok(())
    }

    pub fn n_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn feasible(&self, e: &Edge) -> bool {
        e.safe && e.cost <= self.delta_step
    }

    /// Parses the text format: a header `n_states n_edges goal [delta_step]`
    /// followed by `src action dst cost safe_flag` lines. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .enumerate()
            .filter(|(_, l)| !l.is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::parse("cmdp", "missing header"))?;
        let head: Vec<&str> = header.split_whitespace().collect();
        if !(3..=4).contains(&head.len()) {
            return Err(Error::parse("cmdp header", "expected `n_states n_edges goal [delta_step]`"));
        }
        let num = |s: &str, what: &str| s.parse::<usize>().map_err(|e| Error::parse(format!("cmdp {what}"), e));
        let (n, m, goal) = (num(head[0], "n_states")?, num(head[1], "n_edges")?, num(head[2], "goal")?);
        let mut cmdp = Self::new(n, goal)?;
        if let Some(d) = head.get(3) {
            cmdp.delta_step = d.parse().map_err(|e| Error::parse("cmdp delta_step", e))?;
        }
        for (lineno, line) in lines {
            let ctx = || format!("cmdp line {}", lineno + 1);
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::parse(ctx(), "expected `src action dst cost safe_flag`"));
            }
            let src = f[0].parse().map_err(|e| Error::parse(ctx(), e))?;
            let action = f[1].parse().map_err(|e| Error::parse(ctx(), e))?;
            let dst = f[2].parse().map_err(|e| Error::parse(ctx(), e))?;
            let cost = f[3].parse().map_err(|e| Error::parse(ctx(), e))?;
            let safe = match f[4] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(Error::parse(ctx(), format!("bad safe flag {other:?}"))),
            };
            cmdp.add_edge(src, action, dst, cost, safe)?;
        }
        if cmdp.n_edges() != m {
            return Err(Error::parse("cmdp", format!("header declares {m} edges, found {}", cmdp.n_edges())));
        }
        Ok(cmdp)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}", self.n_states, self.n_edges(), self.goal);
        if self.delta_step.is_finite() {
            write!(out, " {}", self.delta_step).expect("write to string");
        }
        out.push('\n');
        for (src, edges) in self.edges.iter().enumerate() {
            for e in edges {
                writeln!(out, "{src} {} {} {} {}", e.action, e.dst, e.cost, u8::from(e.safe)).expect("write to string");
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Same problem with states renamed by `perm` (old index -> new index).
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.n_states, perm[self.goal])?;
        out.delta_step = self.delta_step;
        for (src, edges) in self.edges.iter().enumerate() {
            for e in edges {
                out.add_edge(perm[src], e.action, perm[e.dst], e.cost, e.safe)?;
            }
        }
        Ok(out)
    }
}

/// The four-state example: s1→s2 costs 2 (a1), s2→s1 costs 3 (a2),
/// s1→s3 costs 4 (a3), s3→s2 costs 1 (a4). States are indexed 0..3 as s0..s3,
/// with s0 isolated; the goal is s2.
pub fn example_cmdp() -> DiscreteCMDP {
    let mut c = DiscreteCMDP::new(4, 2).expect("valid goal");
    for (src, action, dst, cost) in [(1, 1, 2, 2.0), (2, 2, 1, 3.0), (1, 3, 3, 4.0), (3, 4, 2, 1.0)] {
        c.add_edge(src, action, dst, cost, true).expect("valid edge");
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueResult {
    /// `V*(s)`; `-inf` where the goal cannot be reached.
    pub values: Vec<f64>,
    pub iterations: usize,
    /// Non-goal states without any feasible action.
    pub dead_ends: Vec<usize>,
}

/// Undiscounted value iteration `V(s) = max_a [-C(s, a) + V(s')]` over feasible
/// actions, with `V(goal) = 0`.
pub fn value_iteration(cmdp: &DiscreteCMDP) -> ValueResult {
    let n = cmdp.n_states;
    let mut values = vec![f64::NEG_INFINITY; n];
    values[cmdp.goal] = 0.0;
    let mut iterations = 0;
    // costs are non-negative, so optimal paths are simple and n sweeps suffice
    for _ in 0..=n {
        iterations += 1;
        let mut change = 0.0_f64;
        for s in 0..n {
            if s == cmdp.goal {
                continue;
            }
            let best = cmdp.edges[s]
                .iter()
                .filter(|e| cmdp.feasible(e))
                .map(|e| values[e.dst] - e.cost)
                .fold(f64::NEG_INFINITY, f64::max);
            if best > values[s] {
                change = if values[s] == f64::NEG_INFINITY { f64::INFINITY } else { change.max(best - values[s]) };
                values[s] = best;
            }
        }
        if change <= 1e-12 {
            break;
        }
    }
    let dead_ends = (0..n)
        .filter(|&s| s != cmdp.goal && !cmdp.edges[s].iter().any(|e| cmdp.feasible(e)))
        .collect();
    ValueResult { values, iterations, dead_ends }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathResult {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct Queued {
    cost: f64,
    hops: usize,
    state: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then(other.hops.cmp(&self.hops))
            .then(other.state.cmp(&self.state))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cost-to-go and hop count to `target` for every state, by Dijkstra on the
/// reversed feasible graph (keys compared as (cost, hops)).
pub fn costs_to(cmdp: &DiscreteCMDP, target: usize) -> (Vec<f64>, Vec<usize>) {
    let n = cmdp.n_states;
    let mut reverse: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (src, edges) in cmdp.edges.iter().enumerate() {
        for e in edges.iter().filter(|e| cmdp.feasible(e)) {
            reverse[e.dst].push((src, e.cost));
        }
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut hops = vec![usize::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[target] = 0.0;
    hops[target] = 0;
    heap.push(Queued { cost: 0.0, hops: 0, state: target });
    while let Some(Queued { cost, hops: h, state }) = heap.pop() {
        if done[state] {
            continue;
        }
        done[state] = true;
        for &(src, c) in &reverse[state] {
            let (nc, nh) = (cost + c, h + 1);
            if nc < dist[src] || (nc == dist[src] && nh < hops[src]) {
                dist[src] = nc;
                hops[src] = nh;
                heap.push(Queued { cost: nc, hops: nh, state: src });
            }
        }
    }
    (dist, hops)
}

/// Minimum-cost feasible path from `start` to `goal` respecting edge direction.
///
/// Among minimum-cost paths the one with fewest edges is chosen, and among
/// those the lexicographically smallest state sequence. Returns `None` when
/// the goal is unreachable.
pub fn asym_dijkstra(cmdp: &DiscreteCMDP, start: usize, goal: usize) -> Option<PathResult> {
    let (dist, hops) = costs_to(cmdp, goal);
    path_from_costs(cmdp, &dist, &hops, start, goal)
}

fn path_from_costs(cmdp: &DiscreteCMDP, dist: &[f64], hops: &[usize], start: usize, goal: usize) -> Option<PathResult> {
    if !dist[start].is_finite() {
        return None;
    }
    let mut states = vec![start];
    let mut actions = Vec::new();
    let mut cost = 0.0;
    let mut s = start;
    while s != goal {
        let tol = COST_TOL * (1.0 + dist[s].abs());
        let next = cmdp.edges[s]
            .iter()
            .filter(|e| cmdp.feasible(e) && hops[e.dst] != usize::MAX && hops[e.dst] + 1 == hops[s])
            .filter(|e| (e.cost + dist[e.dst] - dist[s]).abs() <= tol)
            .min_by_key(|e| (e.dst, e.action))?;
        cost += next.cost;
        actions.push(next.action);
        states.push(next.dst);
        s = next.dst;
    }
    Some(PathResult { states, actions, cost })
}

/// Follows the greedy policy `argmax_a [-C(s, a) + V(s')]` from `start`.
/// Returns `None` if it stalls or revisits a state.
pub fn greedy_path(cmdp: &DiscreteCMDP, values: &[f64], start: usize) -> Option<PathResult> {
    let mut visited = vec![false; cmdp.n_states];
    let (mut s, mut cost) = (start, 0.0);
    let mut states = vec![start];
    let mut actions = Vec::new();
    while s != cmdp.goal {
        if visited[s] || !values[s].is_finite() {
            return None;
        }
        visited[s] = true;
        let best = cmdp.edges[s]
            .iter()
            .filter(|e| cmdp.feasible(e) && values[e.dst].is_finite())
            .max_by(|a, b| (values[a.dst] - a.cost).total_cmp(&(values[b.dst] - b.cost)).then(b.dst.cmp(&a.dst)))?;
        cost += best.cost;
        actions.push(best.action);
        states.push(best.dst);
        s = best.dst;
    }
    Some(PathResult { states, actions, cost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Discrepancy {
    pub state: usize,
    pub value: f64,
    pub dijkstra_cost: Option<f64>,
    pub greedy_cost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    pub states_checked: usize,
    pub reachable: usize,
    pub discrepancies: Vec<Prop1Discrepancy>,
}

impl Prop1Report {
    pub fn ok(&self) -> bool {
        self.discrepancies.is_empty()
    }
}

/// Checks, for every state, that `-V*(s)` equals the Dijkstra path cost and
/// that the greedy policy from `V*` realises that cost. Unreachable states
/// must be unreachable for both solvers.
pub fn verify_prop1(cmdp: &DiscreteCMDP) -> Prop1Report {
    let vi = value_iteration(cmdp);
    let (dist, hops) = costs_to(cmdp, cmdp.goal);
    let mut report = Prop1Report { states_checked: cmdp.n_states, reachable: 0, discrepancies: Vec::new() };
    for s in 0..cmdp.n_states {
        let v = vi.values[s];
        let dij = path_from_costs(cmdp, &dist, &hops, s, cmdp.goal).map(|p| p.cost);
        let greedy = greedy_path(cmdp, &vi.values, s).map(|p| p.cost);
        let agree = match (dij, greedy) {
            (Some(d), Some(g)) => {
                let tol = COST_TOL * (1.0 + d.abs());
                (-v - d).abs() <= tol && (g - d).abs() <= tol
            }
            (None, None) => v == f64::NEG_INFINITY,
            _ => false,
        };
        if dij.is_some() {
            report.reachable += 1;
        }
        if !agree {
            report.discrepancies.push(Prop1Discrepancy { state: s, value: v, dijkstra_cost: dij, greedy_cost: greedy });
        }
    }
    report
}

/// Random `size × size` grid with 4-neighbour moves. Each cell has a random
/// elevation; a move costs a random base cost plus `alpha * Δz` uphill or
/// `beta * |Δz|` downhill (alpha > beta). About 10% of cells are unsafe, and
/// `delta_step` removes the steepest climbs.
pub fn random_grid_cmdp(size: usize, seed: u64) -> Result<DiscreteCMDP> {
    if size < 2 {
        return Err(Error::Config("grid needs at least 2 cells per side".into()));
    }
    let mut r = rng::indexed_stream(seed, "random-cmdp", size as u64);
    let n = size * size;
    let elevation: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
    let goal = r.random_range(0..n);
    let unsafe_cell: Vec<bool> = (0..n).map(|s| s != goal && r.random_bool(0.1)).collect();
    let mut cmdp = DiscreteCMDP::new(n, goal)?;
    cmdp.delta_step = 6.0;
    let (alpha, beta) = (2.0, 0.5);
    for y in 0..size {
        for x in 0..size {
            let s = y * size + x;
            let moves = [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)];
            for (action, (dx, dy)) in moves.into_iter().enumerate() {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= size as i64 || ny >= size as i64 {
                    continue;
                }
                let d = ny as usize * size + nx as usize;
                let dz = elevation[d] - elevation[s];
                let slope = if dz > 0.0 { alpha * dz } else { -beta * dz };
                let cost = r.random_range(0.1..1.0) + slope;
                cmdp.add_edge(s, action, d, cost, !unsafe_cell[d])?;
            }
        }
    }
    Ok(cmdp)
}

/// Counts of quasimetric axiom violations in a distance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AxiomReport {
    pub zero_self_violations: usize,
    pub triangle_violations: usize,
    pub asymmetric_pairs: usize,
}

/// All-pairs feasible shortest-path costs (`inf` where unreachable).
pub fn cost_closure(cmdp: &DiscreteCMDP) -> Vec<Vec<f64>> {
    let mut closure = vec![Vec::new(); cmdp.n_states];
    for (t, column) in (0..cmdp.n_states).map(|t| (t, costs_to(cmdp, t).0)) {
        for (s, row) in closure.iter_mut().enumerate() {
            if row.is_empty() {
                row.resize(cmdp.n_states, f64::INFINITY);
            }
            row[t] = column[s];
        }
    }
    closure
}

pub fn check_quasimetric_axioms(d: &[Vec<f64>]) -> AxiomReport {
    let n = d.len();
    let mut report = AxiomReport::default();
    for i in 0..n {
        if d[i][i] != 0.0 {
            report.zero_self_violations += 1;
        }
        for j in 0..n {
            if i < j && !same_cost(d[i][j], d[j][i]) {
                report.asymmetric_pairs += 1;
            }
            if !d[i][j].is_finite() {
                continue;
            }
            for k in 0..n {
                if d[i][k] > d[i][j] + d[j][k] + COST_TOL {
                    report.triangle_violations += 1;
                }
            }
        }
    }
    report
}

fn same_cost(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= COST_TOL * (1.0 + a.abs().max(b.abs()))
}

/// Per-edge geometry of a discretised environment, parallel to `cmdp.edges`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeInfo {
    pub dz: f64,
    pub length: f64,
}

/// A navigation environment reduced to a lattice of poses.
///
/// States are `(node, heading bin)` plus one absorbing goal state (the last
/// index). Actions: 0 forward, 1 turn left then forward, 2 turn right then
/// forward, each moving to the neighbouring node in the new heading; 3 stops
/// at the goal node.
#[derive(Debug, Clone)]
pub struct DiscreteEnv {
    pub cmdp: DiscreteCMDP,
    pub info: Vec<Vec<EdgeInfo>>,
    pub resolution: f64,
    pub heading_bins: usize,
    pub nodes_per_side: usize,
    pub speed: f64,
    pub goal_node: usize,
}

impl DiscreteEnv {
    pub fn state_index(&self, node: usize, bin: usize) -> usize {
        node * self.heading_bins + bin
    }

    pub fn sink(&self) -> usize {
        self.cmdp.n_states - 1
    }

    pub fn node_xy(&self, node: usize) -> (f64, f64) {
        let n = self.nodes_per_side;
        ((node % n) as f64 * self.resolution, (node / n) as f64 * self.resolution)
    }

    pub fn nearest_node(&self, x: f64, y: f64) -> usize {
        let n = self.nodes_per_side;
        let i = ((x / self.resolution).round().max(0.0) as usize).min(n - 1);
        let j = ((y / self.resolution).round().max(0.0) as usize).min(n - 1);
        j * n + i
    }

    pub fn heading_of(&self, bin: usize) -> f64 {
        crate::terrain::wrap_angle(2.0 * PI * bin as f64 / self.heading_bins as f64)
    }

    /// Robot pose of a non-sink state, moving at the lattice speed.
    pub fn pose(&self, state: usize) -> RobotState {
        let (node, bin) = (state / self.heading_bins, state % self.heading_bins);
        let (x, y) = self.node_xy(node);
        RobotState { x, y, heading: self.heading_of(bin), v: self.speed, omega: 0.0 }
    }

    /// Same lattice with every edge cost replaced by its planar length.
    pub fn length_cmdp(&self) -> DiscreteCMDP {
        let mut c = self.cmdp.clone();
        c.delta_step = f64::INFINITY;
        for (edges, info) in c.edges.iter_mut().zip(&self.info) {
            for (e, i) in edges.iter_mut().zip(info) {
                e.cost = i.length;
            }
        }
        c
    }

    /// Embedding training pairs `(s, a) -> (s', a)` labelled with edge costs.
    /// Edges into the goal sink are skipped.
    pub fn pair_samples(&self, env: &NavEnv) -> Result<Vec<(PairSample, EdgeInfo)>> {
        let mut out = Vec::new();
        let turn = env.config().omega_max;
        for (src, edges) in self.cmdp.edges.iter().enumerate() {
            for (e, info) in edges.iter().zip(&self.info[src]) {
                if e.dst == self.sink() {
                    continue;
                }
                let omega = match e.action {
                    1 => turn,
                    2 => -turn,
                    _ => 0.0,
                };
                let action = encode_action(&ActionCmd { v_cmd: self.speed, omega_cmd: omega }, env.config());
                let from = input_of(&env.observe(&self.pose(src), 0.0)?, action);
                let to = input_of(&env.observe(&self.pose(e.dst), 0.0)?, action);
                out.push((PairSample { from, to, cost: e.cost }, *info));
            }
        }
        Ok(out)
    }
}

/// Straight-line motion from `from` to `to` at `speed`, evaluated with the
/// environment's cost and safety model in sub-steps of one control period.
/// Returns (total traversal cost, all sub-steps safe).
pub fn segment_cost(env: &NavEnv, from: (f64, f64), to: (f64, f64), speed: f64) -> Result<(f64, bool)> {
    let cfg = env.config();
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let length = dx.hypot(dy);
    let heading = dy.atan2(dx);
    let n_sub = ((length / (speed * cfg.dt)).ceil() as usize).max(1);
    let v = length / (n_sub as f64 * cfg.dt);
    let (mut cost, mut safe) = (0.0, true);
    for k in 0..n_sub {
        let t = k as f64 / n_sub as f64;
        let state = RobotState { x: from.0 + dx * t, y: from.1 + dy * t, heading, v, omega: 0.0 };
        let tr = env.transition(&state, &ActionCmd { v_cmd: v, omega_cmd: 0.0 }, 0.0)?;
        cost += tr.traversal_cost;
        safe &= !tr.violated;
    }
    Ok((cost, safe))
}

/// Builds the pose lattice of `env` with spacing `resolution` and
/// `heading_bins` headings (4 or 8), traversed at `speed`.
pub fn discretize_env(env: &NavEnv, resolution: f64, heading_bins: usize, speed: f64) -> Result<DiscreteEnv> {
    let cfg = env.config();
    if heading_bins != 4 && heading_bins != 8 {
        return Err(Error::Config(format!("heading bins must be 4 or 8, got {heading_bins}")));
    }
    if !(speed > 0.0 && speed <= cfg.v_max) {
        return Err(Error::Config(format!("lattice speed must be in (0, {}], got {speed}", cfg.v_max)));
    }
    let cells = (cfg.size_m / resolution).round();
    if !(resolution > 0.0) || cells < 1.0 || (cells * resolution - cfg.size_m).abs() > 1e-9 * cfg.size_m {
        return Err(Error::Config(format!("resolution {resolution} does not divide size {}", cfg.size_m)));
    }
    let n = cells as usize + 1;
    let n_states = n * n * heading_bins + 1;
    let sink = n_states - 1;
    let mut cmdp = DiscreteCMDP::new(n_states, sink)?;
    let mut info = vec![Vec::new(); n_states];
    let mut lattice = DiscreteEnv {
        cmdp: DiscreteCMDP::new(1, 0)?,
        info: Vec::new(),
        resolution,
        heading_bins,
        nodes_per_side: n,
        speed,
        goal_node: 0,
    };
    lattice.goal_node = lattice.nearest_node(cfg.goal[0], cfg.goal[1]);
    let step = 8 / heading_bins;
    let directions = [(1i64, 0i64), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];
    for node in 0..n * n {
        let (i, j) = ((node % n) as i64, (node / n) as i64);
        let here = lattice.node_xy(node);
        let z_here = env.grid().elevation_at(here.0, here.1)?;
        for bin in 0..heading_bins {
            let src = lattice.state_index(node, bin);
            if node == lattice.goal_node {
                cmdp.add_edge(src, 3, sink, 0.0, true)?;
                info[src].push(EdgeInfo { dz: 0.0, length: 0.0 });
                continue;
            }
            for (action, turn) in [(0usize, 0i64), (1, 1), (2, -1)] {
                let new_bin = (bin as i64 + turn).rem_euclid(heading_bins as i64) as usize;
                let (di, dj) = directions[new_bin * step];
                let (ni, nj) = (i + di, j + dj);
                if ni < 0 || nj < 0 || ni >= n as i64 || nj >= n as i64 {
                    continue;
                }
                let dst_node = nj as usize * n + ni as usize;
                let there = lattice.node_xy(dst_node);
                let (cost, safe) = segment_cost(env, here, there, speed)?;
                let dst = if dst_node == lattice.goal_node { sink } else { lattice.state_index(dst_node, new_bin) };
                cmdp.add_edge(src, action, dst, cost, safe)?;
                let dz = env.grid().elevation_at(there.0, there.1)? - z_here;
                info[src].push(EdgeInfo { dz, length: (there.0 - here.0).hypot(there.1 - here.1) });
            }
        }
    }
    lattice.cmdp = cmdp;
    lattice.info = info;
    Ok(lattice)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ScenarioConfig;
    use crate::terrain::{Scenario, TerrainClass, TerrainGrid};
    use std::sync::Arc;

    #[test]
    fn example_instance() {
        let c = example_cmdp();
        let vi = value_iteration(&c);
        assert_eq!(vi.values[2], 0.0);
        assert_eq!(vi.values[1], -2.0);
        assert_eq!(vi.values[3], -1.0);
        let p = asym_dijkstra(&c, 1, 2).unwrap();
        assert_eq!((p.states.clone(), p.cost), (vec![1, 2], 2.0));
        let back = asym_dijkstra(&c, 2, 1).unwrap();
        assert_eq!(back.cost, 3.0);
        assert_ne!(back.cost, p.cost);
        let same = asym_dijkstra(&c, 2, 2).unwrap();
        assert_eq!((same.states.len(), same.cost), (1, 0.0));
        assert!(verify_prop1(&c).ok());
        let report = check_quasimetric_axioms(&cost_closure(&c));
        assert_eq!(report.zero_self_violations, 0);
        assert_eq!(report.triangle_violations, 0);
        assert!(report.asymmetric_pairs >= 1);
    }

    #[test]
    fn chain_values() {
        let mut c = DiscreteCMDP::new(3, 2).unwrap();
        c.add_edge(0, 0, 1, 1.0, true).unwrap();
        c.add_edge(1, 0, 2, 1.0, true).unwrap();
        assert_eq!(value_iteration(&c).values[0], -2.0);
    }

    #[test]
    fn infeasible_instance_reported_by_both() {
        let mut c = DiscreteCMDP::new(3, 2).unwrap();
        c.delta_step = 1.0;
        c.add_edge(0, 0, 1, 0.5, true).unwrap();
        c.add_edge(1, 0, 2, 5.0, true).unwrap();
        c.add_edge(0, 1, 2, 0.5, false).unwrap();
        let vi = value_iteration(&c);
        assert_eq!(vi.values[0], f64::NEG_INFINITY);
        assert!(vi.dead_ends.contains(&1));
        assert!(asym_dijkstra(&c, 0, 2).is_none());
        assert!(verify_prop1(&c).ok());
    }

    #[test]
    fn random_grids_satisfy_prop1() {
        for seed in 0..20 {
            let c = random_grid_cmdp(8, seed).unwrap();
            let report = verify_prop1(&c);
            assert!(report.ok(), "seed {seed}: {:?}", report.discrepancies);
            assert!(report.reachable > 1);
        }
    }

    #[test]
    fn relabeling_preserves_costs() {
        let c = random_grid_cmdp(5, 3).unwrap();
        let perm: Vec<usize> = (0..c.n_states).rev().collect();
        let d = c.relabel(&perm).unwrap();
        let (a, _) = costs_to(&c, c.goal);
        let (b, _) = costs_to(&d, d.goal);
        for s in 0..c.n_states {
            assert!(same_cost(a[s], b[perm[s]]));
        }
    }

    #[test]
    fn removing_edges_never_shortens_paths() {
        let c = random_grid_cmdp(6, 4).unwrap();
        let (before, _) = costs_to(&c, c.goal);
        let mut d = c.clone();
        for edges in d.edges.iter_mut().step_by(3) {
            edges.pop();
        }
        let (after, _) = costs_to(&d, d.goal);
        for s in 0..c.n_states {
            assert!(after[s] >= before[s] - COST_TOL);
        }
    }

    #[test]
    fn text_format_round_trip() {
        let mut c = random_grid_cmdp(4, 1).unwrap();
        c.delta_step = 2.5;
        let back = DiscreteCMDP::parse(&c.to_text()).unwrap();
        assert_eq!(back.n_edges(), c.n_edges());
        assert_eq!(back.goal, c.goal);
        assert_eq!(back.delta_step, 2.5);
        assert_eq!(back.edges, c.edges);
        assert!(DiscreteCMDP::parse("2 1 0\n0 0 1 1.0 maybe\n").is_err());
        assert!(DiscreteCMDP::parse("2 2 0\n0 0 1 1.0 1\n").is_err());
    }

    #[test]
    fn symmetric_grid_has_no_asymmetric_pairs() {
        let mut c = DiscreteCMDP::new(4, 0).unwrap();
        for (a, b) in [(0, 1), (1, 2), (2, 3), (3, 0)] {
            c.add_edge(a, 0, b, 1.5, true).unwrap();
            c.add_edge(b, 1, a, 1.5, true).unwrap();
        }
        let r = check_quasimetric_axioms(&cost_closure(&c));
        assert_eq!(r, AxiomReport::default());
    }

    fn env_on(grid: TerrainGrid, scenario: Scenario) -> NavEnv {
        let cfg = ScenarioConfig::for_scenario(scenario);
        NavEnv::new(cfg, Arc::new(grid), rng::stream(1, rng::ROLLOUT)).unwrap()
    }

    #[test]
    fn flat_lattice_costs_are_uniform() {
        let env = env_on(TerrainGrid::flat(32.0, 0.5, TerrainClass::Grass).unwrap(), Scenario::Undulating);
        let lat = discretize_env(&env, 4.0, 4, 1.0).unwrap();
        let costs: Vec<f64> = lat
            .cmdp
            .edges
            .iter()
            .flatten()
            .filter(|e| e.action != 3)
            .map(|e| e.cost)
            .collect();
        assert!(!costs.is_empty());
        assert!(costs.iter().all(|c| (c - costs[0]).abs() < 1e-9));
        assert!(discretize_env(&env, 3.0, 4, 1.0).is_err());
    }

    #[test]
    fn hill_lattice_uphill_costs_more() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Hill);
        let env = env_on(cfg.build_terrain(1).unwrap(), Scenario::Hill);
        let lat = discretize_env(&env, 2.0, 8, 1.0).unwrap();
        let mut checked = 0;
        for (src, edges) in lat.cmdp.edges.iter().enumerate() {
            for (e, info) in edges.iter().zip(&lat.info[src]) {
                if info.dz > 1e-9 && e.dst != lat.sink() {
                    let here = lat.pose(src);
                    let there = lat.pose(e.dst);
                    let (up, _) = segment_cost(&env, (here.x, here.y), (there.x, there.y), 1.0).unwrap();
                    let (down, _) = segment_cost(&env, (there.x, there.y), (here.x, here.y), 1.0).unwrap();
                    assert!(up > down);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn undulating_lattice_closure_is_a_quasimetric() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Undulating);
        let env = env_on(cfg.build_terrain(2).unwrap(), Scenario::Undulating);
        let lat = discretize_env(&env, 8.0, 4, 1.0).unwrap();
        let r = check_quasimetric_axioms(&cost_closure(&lat.cmdp));
        assert_eq!(r.triangle_violations, 0);
        assert_eq!(r.zero_self_violations, 0);
        assert!(r.asymmetric_pairs > 0);
        assert!(verify_prop1(&lat.cmdp).ok());
    }
}
