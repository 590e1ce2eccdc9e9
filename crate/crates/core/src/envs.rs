//! Continuous navigation environments over a [`TerrainGrid`].
//!
//! A unicycle robot drives toward a goal. Each step yields a reward, a
//! non-negative traversal cost that depends on the direction of travel, a
//! safety constraint signal from roll and pitch, and the energy spent.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::terrain::{
    self, sample_features_with_curvature, wrap_angle, FeatureVec, FrictionTable, GridOptions, Scenario,
    TerrainClass, TerrainGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v: f64,
    pub omega: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionCmd {
    pub v_cmd: f64,
    pub omega_cmd: f64,
}

impl ActionCmd {
    pub const STOP: ActionCmd = ActionCmd { v_cmd: 0.0, omega_cmd: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepOutcome {
    Running,
    Goal,
    /// Terminated on a safety violation (only when configured).
    Unsafe,
    TimeLimit,
}

impl StepOutcome {
    /// The episode ended and the final state has no successor value.
    pub fn is_terminal(self) -> bool {
        matches!(self, StepOutcome::Goal | StepOutcome::Unsafe)
    }

    pub fn is_done(self) -> bool {
        self != StepOutcome::Running
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: RobotState,
    pub action: ActionCmd,
    pub next_state: RobotState,
    pub reward: f64,
    pub traversal_cost: f64,
    pub constraint_cost: f64,
    pub violated: bool,
    pub energy_j: f64,
    pub dt: f64,
    /// Planar distance covered (m).
    pub distance: f64,
    /// Elevation change (m).
    pub dz: f64,
    pub outcome: StepOutcome,
}

/// Direction-dependence coefficients of one terrain class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirCoeff {
    pub k_terrain: f64,
    /// Uphill factor: `f_dir = 1 + alpha * grade`.
    pub alpha: f64,
    /// Downhill factor: `f_dir = 1 - beta * |grade|`; negative means descending is harder.
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionalCoeffs {
    pub grass: DirCoeff,
    pub gravel: DirCoeff,
    pub sand: DirCoeff,
    pub wet_clay_dry: DirCoeff,
    pub wet_clay_wet: DirCoeff,
}

impl Default for DirectionalCoeffs {
    fn default() -> Self {
        Self {
            grass: DirCoeff { k_terrain: 1.0, alpha: 0.3, beta: 0.1 },
            gravel: DirCoeff { k_terrain: 1.2, alpha: 0.5, beta: 0.2 },
            sand: DirCoeff { k_terrain: 1.5, alpha: 0.8, beta: 0.1 },
            wet_clay_dry: DirCoeff { k_terrain: 1.1, alpha: 0.1, beta: 0.3 },
            wet_clay_wet: DirCoeff { k_terrain: 1.3, alpha: 0.4, beta: -0.6 },
        }
    }
}

impl DirectionalCoeffs {
    pub fn for_class(&self, class: TerrainClass, wet: bool) -> &DirCoeff {
        match class {
            TerrainClass::Grass => &self.grass,
            TerrainClass::Gravel => &self.gravel,
            TerrainClass::Sand => &self.sand,
            TerrainClass::WetClay if wet => &self.wet_clay_wet,
            TerrainClass::WetClay => &self.wet_clay_dry,
        }
    }
}

/// Electrical power model `P = P_base + P_motion + P_terrain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    /// Idle draw (W).
    pub p_base: f64,
    /// Rolling term per unit speed (W·s/m).
    pub c1: f64,
    /// Acceleration term (W·s²/m).
    pub c2: f64,
    /// Extra rolling resistance per unit friction above `mu_ref` (W·s/m).
    pub c3: f64,
    /// Climbing term per unit grade (W·s/m).
    pub c4: f64,
    /// Friction of the reference surface the rolling term `c1` is measured on.
    pub mu_ref: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self { p_base: 20.0, c1: 15.0, c2: 5.0, c3: 30.0, c4: 40.0, mu_ref: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintForm {
    /// 1 when unsafe, else 0.
    Indicator,
    /// Angle excess over the roll/pitch bounds (rad).
    Magnitude,
}

/// Every constant of one navigation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub size_m: f64,
    pub cell_size: f64,
    pub friction: FrictionTable,
    pub wet_clay_wet: bool,
    pub undulating_max_slope_deg: f64,
    pub hill_slope_deg: f64,
    pub directional_max_slope_deg: f64,
    pub start: [f64; 2],
    /// Half-width of the uniform box the start position is drawn from (m).
    pub start_jitter: f64,
    /// Half-width of the uniform start heading noise around the goal bearing (rad).
    pub heading_jitter: f64,
    pub goal: [f64; 2],
    pub goal_tolerance: f64,
    pub r_goal: f64,
    pub r_unsafe: f64,
    pub alpha_up: f64,
    pub beta_down: f64,
    pub lambda_friction: f64,
    pub k_up: f64,
    pub k_down: f64,
    pub alpha_speed: f64,
    pub beta_speed: f64,
    pub gamma_speed: f64,
    pub beta_slope: f64,
    pub alpha_energy: f64,
    pub directional: DirectionalCoeffs,
    pub phi_max_deg: f64,
    pub theta_max_deg: f64,
    pub constraint_form: ConstraintForm,
    pub terminal_on_violation: bool,
    pub c_time: f64,
    pub dt: f64,
    pub max_steps: usize,
    pub gamma: f64,
    pub v_max: f64,
    pub omega_max: f64,
    /// Actuator time constants (s); 0 means commands apply instantly.
    pub tau_v: f64,
    pub tau_omega: f64,
    pub power: PowerModel,
}

impl ScenarioConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        let mut cfg = Self {
            scenario,
            size_m: 32.0,
            cell_size: 0.5,
            friction: FrictionTable::default(),
            wet_clay_wet: true,
            undulating_max_slope_deg: terrain::UNDULATING_MAX_SLOPE_DEG,
            hill_slope_deg: terrain::HILL_SLOPE_DEG,
            directional_max_slope_deg: 12.0,
            start: [4.0, 4.0],
            start_jitter: 1.0,
            heading_jitter: 0.3,
            goal: [28.0, 28.0],
            goal_tolerance: 0.5,
            r_goal: 50.0,
            r_unsafe: -25.0,
            alpha_up: 2.0,
            beta_down: 0.8,
            lambda_friction: 1.0,
            k_up: 2.0,
            k_down: 1.0,
            alpha_speed: 0.5,
            beta_speed: 0.2,
            gamma_speed: 0.3,
            beta_slope: 1.0,
            alpha_energy: 1.0,
            directional: DirectionalCoeffs::default(),
            phi_max_deg: 25.0,
            theta_max_deg: 25.0,
            constraint_form: ConstraintForm::Indicator,
            terminal_on_violation: false,
            c_time: 0.05,
            dt: 0.1,
            max_steps: 400,
            gamma: 0.99,
            v_max: 1.5,
            omega_max: 1.5,
            tau_v: 0.2,
            tau_omega: 0.1,
            power: PowerModel::default(),
        };
        if scenario == Scenario::Hill {
            // The straight line from start to goal crosses the southern flank
            // of the hill. A 15° pitch limit makes that crossing unsafe while a
            // detour to the south or a diagonal route stays feasible.
            cfg.start = [4.0, 10.0];
            cfg.goal = [28.0, 10.0];
            cfg.theta_max_deg = 15.0;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.alpha_up > self.beta_down) {
            return fail(format!("alpha_up ({}) must exceed beta_down ({})", self.alpha_up, self.beta_down));
        }
        if !(self.k_up > self.k_down) {
            return fail(format!("k_up ({}) must exceed k_down ({})", self.k_up, self.k_down));
        }
        if !(self.alpha_speed > self.beta_speed) {
            return fail(format!(
                "alpha_speed ({}) must exceed beta_speed ({})",
                self.alpha_speed, self.beta_speed
            ));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return fail(format!("discount must be in (0, 1), got {}", self.gamma));
        }
        if !(self.dt > 0.0) || !(self.v_max > 0.0) || !(self.omega_max > 0.0) {
            return fail("dt, v_max and omega_max must be positive".into());
        }
        if self.max_steps == 0 || !(self.goal_tolerance > 0.0) {
            return fail("max_steps and goal_tolerance must be positive".into());
        }
        if self.tau_v < 0.0 || self.tau_omega < 0.0 {
            return fail("actuator time constants must be >= 0".into());
        }
        let inside = |p: [f64; 2]| (0.0..=self.size_m).contains(&p[0]) && (0.0..=self.size_m).contains(&p[1]);
        if !inside(self.start) || !inside(self.goal) {
            return fail("start and goal must lie inside the terrain".into());
        }
        Ok(())
    }

    pub fn grid_options(&self) -> GridOptions {
        GridOptions {
            cell_size: self.cell_size,
            friction: self.friction,
            wet_clay_wet: self.wet_clay_wet,
            directional_max_slope_deg: self.directional_max_slope_deg,
        }
    }

    pub fn build_terrain(&self, seed: u64) -> Result<TerrainGrid> {
        let opts = self.grid_options();
        match self.scenario {
            Scenario::Undulating => terrain::generate_undulating(seed, self.size_m, self.undulating_max_slope_deg, &opts),
            Scenario::Hill => terrain::generate_hill(seed, self.size_m, self.hill_slope_deg, &opts),
            Scenario::Directional => terrain::generate_directional(seed, self.size_m, &opts),
        }
    }

    /// Acceleration the lagged actuator produces this step (m/s²).
    pub fn acceleration(&self, state: &RobotState, action: &ActionCmd) -> f64 {
        (lagged(state.v, action.v_cmd, self.dt, self.tau_v) - state.v) / self.dt
    }

    /// Instantaneous power draw (W) while executing `action` from `state`.
    pub fn power(&self, state: &RobotState, action: &ActionCmd, features: &FeatureVec) -> f64 {
        let p = &self.power;
        let v = state.v.abs();
        let grade = features.grad_z[0] * state.heading.cos() + features.grad_z[1] * state.heading.sin();
        let motion = p.c1 * v + p.c2 * self.acceleration(state, action).abs();
        let terrain = p.c3 * (features.friction - p.mu_ref).max(0.0) * v + p.c4 * grade.max(0.0) * v;
        p.p_base + motion + terrain
    }

    /// Slope cost: `alpha_up * dz` climbing, `beta_down * |dz|` descending.
    pub fn cost_slope(&self, dz: f64) -> f64 {
        if dz > 0.0 {
            self.alpha_up * dz
        } else {
            self.beta_down * -dz
        }
    }

    /// Friction cost `lambda * mu * distance`.
    pub fn cost_friction(&self, friction: f64, distance: f64) -> f64 {
        self.lambda_friction * friction * distance
    }

    /// Roll/pitch safety check at a pose. Returns the violation flag and the
    /// constraint cost in the configured form.
    pub fn safety_indicator(&self, heading: f64, features: &FeatureVec) -> (bool, f64) {
        let g = features.grad_z;
        let (c, s) = (heading.cos(), heading.sin());
        let pitch = (g[0] * c + g[1] * s).atan();
        let roll = (-g[0] * s + g[1] * c).atan();
        let pitch_excess = pitch.abs() - self.theta_max_deg.to_radians();
        let roll_excess = roll.abs() - self.phi_max_deg.to_radians();
        let violated = pitch_excess > 0.0 || roll_excess > 0.0;
        let cost = match (violated, self.constraint_form) {
            (false, _) => 0.0,
            (true, ConstraintForm::Indicator) => 1.0,
            (true, ConstraintForm::Magnitude) => pitch_excess.max(0.0) + roll_excess.max(0.0),
        };
        (violated, cost)
    }

    /// Scenario-specific cost of moving from pose `a` to pose `b` at speed `v`,
    /// excluding the time cost.
    pub fn scenario_cost(&self, from: &FeatureVec, dx: f64, dy: f64, dz: f64, v: f64, wet: bool) -> Result<f64> {
        let distance = dx.hypot(dy);
        let cost = match self.scenario {
            Scenario::Undulating => {
                let theta = if distance > 0.0 { dz.atan2(distance) } else { 0.0 };
                self.alpha_energy * cost_energy_undulating(from.friction, distance, dz, theta, self.beta_slope)?
            }
            Scenario::Hill => cost_hill(dz, v, self.k_up, self.k_down, self.alpha_speed, self.beta_speed),
            Scenario::Directional => {
                let coeff = self.directional.for_class(from.terrain_class, wet);
                cost_directional(coeff, dx, dy, dz, v, self.gamma_speed)? * distance
            }
        };
        Ok(cost.max(0.0))
    }
}

fn lagged(current: f64, command: f64, dt: f64, tau: f64) -> f64 {
    let blend = if tau <= 0.0 { 1.0 } else { (dt / tau).min(1.0) };
    current + (command - current) * blend
}

/// Energy-style cost of the undulating scenario:
/// `(distance / cos θ) * friction * (1 + beta_slope * dz)`.
pub fn cost_energy_undulating(friction: f64, distance: f64, dz: f64, theta: f64, beta_slope: f64) -> Result<f64> {
    if !(theta.abs() < PI / 2.0) {
        return Err(Error::DegenerateSlope(theta));
    }
    Ok(distance / theta.cos() * friction * (1.0 + beta_slope * dz))
}

/// Hill climbing cost; climbing is charged more than descending and grows with speed.
pub fn cost_hill(dz: f64, v: f64, k_up: f64, k_down: f64, alpha_speed: f64, beta_speed: f64) -> f64 {
    if dz > 0.0 {
        k_up * dz * (1.0 + alpha_speed * v)
    } else if dz < 0.0 {
        k_down * -dz * (1.0 + beta_speed * v)
    } else {
        0.0
    }
}

/// Direction-dependent terrain cost per unit distance:
/// `k_terrain * f_dir * (1 + gamma_speed * v)`.
pub fn cost_directional(coeff: &DirCoeff, dx: f64, dy: f64, dz: f64, v: f64, gamma_speed: f64) -> Result<f64> {
    let planar = dx.hypot(dy);
    let f_dir = if dz == 0.0 {
        1.0
    } else if planar == 0.0 {
        return Err(Error::DegenerateMotion { dz });
    } else if dz > 0.0 {
        1.0 + coeff.alpha * dz / planar
    } else {
        1.0 - coeff.beta * -dz / planar
    };
    Ok(coeff.k_terrain * f_dir.max(0.0) * (1.0 + gamma_speed * v))
}

/// Width of the vector returned by [`NavEnv::observe`].
pub const OBS_DIM: usize = 27;

/// One navigation episode runner over a shared terrain.
#[derive(Debug, Clone)]
pub struct NavEnv {
    config: ScenarioConfig,
    grid: Arc<TerrainGrid>,
    rng: StreamRng,
    state: RobotState,
    curvature: f64,
    steps: usize,
    done: bool,
}

impl NavEnv {
    pub fn new(config: ScenarioConfig, grid: Arc<TerrainGrid>, rng: StreamRng) -> Result<Self> {
        config.validate()?;
        if (grid.size_m() - config.size_m).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "terrain is {} m wide but the scenario expects {} m",
                grid.size_m(),
                config.size_m
            )));
        }
        let state = RobotState { x: config.start[0], y: config.start[1], heading: 0.0, v: 0.0, omega: 0.0 };
        Ok(Self { config, grid, rng, state, curvature: 0.0, steps: 0, done: true })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn grid(&self) -> &TerrainGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> Arc<TerrainGrid> {
        Arc::clone(&self.grid)
    }

    pub fn state(&self) -> RobotState {
        self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    fn goal(&self) -> (f64, f64) {
        (self.config.goal[0], self.config.goal[1])
    }

    /// Starts a new episode near the configured start, facing roughly toward the goal.
    pub fn reset(&mut self) -> RobotState {
        let cfg = &self.config;
        let j = cfg.start_jitter;
        let mut offset = |half: f64| if half > 0.0 { self.rng.random_range(-half..half) } else { 0.0 };
        let x = (cfg.start[0] + offset(j)).clamp(0.0, cfg.size_m);
        let y = (cfg.start[1] + offset(j)).clamp(0.0, cfg.size_m);
        let bearing = (cfg.goal[1] - y).atan2(cfg.goal[0] - x);
        let heading = wrap_angle(bearing + offset(cfg.heading_jitter));
        self.reset_to(RobotState { x, y, heading, v: 0.0, omega: 0.0 })
    }

    /// Starts a new episode at an explicit state.
    pub fn reset_to(&mut self, state: RobotState) -> RobotState {
        self.state = state;
        self.curvature = 0.0;
        self.steps = 0;
        self.done = false;
        state
    }

    pub fn features(&self, state: &RobotState, curvature: f64) -> Result<FeatureVec> {
        sample_features_with_curvature(&self.grid, state.x, state.y, self.goal(), curvature)
    }

    /// Clamps a command into the actuator box.
    pub fn clamp_action(&self, action: ActionCmd) -> ActionCmd {
        ActionCmd {
            v_cmd: action.v_cmd.clamp(0.0, self.config.v_max),
            omega_cmd: action.omega_cmd.clamp(-self.config.omega_max, self.config.omega_max),
        }
    }

    /// Next state under unicycle kinematics with first-order actuator lag.
    /// The pose advances with the current velocities; velocities then move
    /// toward the command.
    pub fn kinematics(&self, state: &RobotState, action: &ActionCmd) -> RobotState {
        let cfg = &self.config;
        let dt = cfg.dt;
        let x = (state.x + state.v * state.heading.cos() * dt).clamp(0.0, cfg.size_m);
        let y = (state.y + state.v * state.heading.sin() * dt).clamp(0.0, cfg.size_m);
        let heading = wrap_angle(state.heading + state.omega * dt);
        let v = lagged(state.v, action.v_cmd, dt, cfg.tau_v).clamp(0.0, cfg.v_max);
        let omega = lagged(state.omega, action.omega_cmd, dt, cfg.tau_omega).clamp(-cfg.omega_max, cfg.omega_max);
        RobotState { x, y, heading, v, omega }
    }

    /// Evaluates one step from an arbitrary state without touching episode bookkeeping.
    /// The outcome is `Goal`, `Unsafe` or `Running`; step limits are left to [`NavEnv::step`].
    pub fn transition(&self, state: &RobotState, action: &ActionCmd, curvature: f64) -> Result<Transition> {
        let cfg = &self.config;
        let action = self.clamp_action(*action);
        let from = self.features(state, curvature)?;
        let next = self.kinematics(state, &action);
        let (dx, dy) = (next.x - state.x, next.y - state.y);
        let distance = dx.hypot(dy);
        let next_curvature = if distance > 1e-9 { wrap_angle(next.heading - state.heading) / distance } else { 0.0 };
        let to = self.features(&next, next_curvature)?;
        let dz = to.z - from.z;
        let wet = self.grid.wet_at(state.x, state.y)?;
        let traversal_cost = cfg.scenario_cost(&from, dx, dy, dz, state.v, wet)? + cfg.c_time;
        let (violated, constraint_cost) = cfg.safety_indicator(next.heading, &to);
        let energy_j = cfg.power(state, &action, &from) * cfg.dt;
        let at_goal = (next.x - cfg.goal[0]).hypot(next.y - cfg.goal[1]) < cfg.goal_tolerance;
        let penalize_unsafe = cfg.scenario != Scenario::Undulating;
        let reward = if at_goal {
            cfg.r_goal
        } else if violated && penalize_unsafe {
            cfg.r_unsafe
        } else {
            -traversal_cost
        };
        let outcome = if at_goal {
            StepOutcome::Goal
        } else if violated && cfg.terminal_on_violation {
            StepOutcome::Unsafe
        } else {
            StepOutcome::Running
        };
        Ok(Transition {
            state: *state,
            action,
            next_state: next,
            reward,
            traversal_cost,
            constraint_cost,
            violated,
            energy_j,
            dt: cfg.dt,
            distance,
            dz,
            outcome,
        })
    }

    /// Advances the running episode by one step.
    pub fn step(&mut self, action: ActionCmd) -> Result<Transition> {
        if self.done {
            return Err(Error::State("step called on a finished episode; call reset first".into()));
        }
        let mut tr = self.transition(&self.state, &action, self.curvature)?;
        self.steps += 1;
        if tr.distance > 1e-9 {
            self.curvature = wrap_angle(tr.next_state.heading - tr.state.heading) / tr.distance;
        }
        if tr.outcome == StepOutcome::Running && self.steps >= self.config.max_steps {
            tr.outcome = StepOutcome::TimeLimit;
        }
        self.done = tr.outcome.is_done();
        self.state = tr.next_state;
        Ok(tr)
    }

    /// Observation vector of width [`OBS_DIM`] used by every network.
    pub fn observe(&self, state: &RobotState, curvature: f64) -> Result<Vec<f64>> {
        let f = self.features(state, curvature)?;
        let cfg = &self.config;
        let (c, s) = (state.heading.cos(), state.heading.sin());
        let (gx, gy) = (cfg.goal[0] - state.x, cfg.goal[1] - state.y);
        let dist = gx.hypot(gy);
        let bearing = gy.atan2(gx) - state.heading;
        let g = f.grad_z;
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.extend_from_slice(&[bearing.cos(), bearing.sin(), dist / cfg.size_m]);
        obs.extend_from_slice(&[state.v / cfg.v_max, state.omega / cfg.omega_max]);
        obs.push(f.z / 5.0);
        obs.extend_from_slice(&[g[0], g[1]]);
        obs.extend_from_slice(&[g[0] * c + g[1] * s, -g[0] * s + g[1] * c]);
        obs.extend_from_slice(&f.normal);
        let mut one_hot = [0.0; 4];
        one_hot[f.terrain_class.index()] = 1.0;
        obs.extend_from_slice(&one_hot);
        obs.extend_from_slice(&[f.roughness * 10.0, f.friction, f.obstacle_density, curvature.clamp(-5.0, 5.0) / 5.0]);
        obs.extend_from_slice(&f.goal_dir);
        obs.extend_from_slice(&[state.x / cfg.size_m, state.y / cfg.size_m]);
        obs.extend_from_slice(&[c, s]);
        debug_assert_eq!(obs.len(), OBS_DIM);
        Ok(obs)
    }
}

/// One logged episode: the initial state followed by every transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub initial: RobotState,
    pub transitions: Vec<Transition>,
    pub goal: [f64; 2],
    pub goal_tolerance: f64,
}

impl EpisodeLog {
    pub fn reached_goal(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.outcome == StepOutcome::Goal)
    }

    pub fn terminated_unsafe(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.outcome == StepOutcome::Unsafe)
    }

    pub fn total_energy(&self) -> f64 {
        self.transitions.iter().map(|t| t.energy_j).sum()
    }

    pub fn path_length(&self) -> f64 {
        self.transitions.iter().map(|t| t.distance).sum()
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Writes the trajectory CSV: one row for the initial state, then one per step.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,y,heading,v,omega,reward,traversal_cost,constraint_cost,violated,energy_j")?;
        let s = self.initial;
        writeln!(out, "0,{},{},{},{},{},0,0,0,0,0", s.x, s.y, s.heading, s.v, s.omega)?;
        let mut t = 0.0;
        for tr in &self.transitions {
            t += tr.dt;
            let n = tr.next_state;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                t,
                n.x,
                n.y,
                n.heading,
                n.v,
                n.omega,
                tr.reward,
                tr.traversal_cost,
                tr.constraint_cost,
                u8::from(tr.violated),
                tr.energy_j
            )?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        buf.flush().map_err(|e| Error::io(path, e))
    }
}

/// Runs one episode with `controller` choosing actions from the state and observation.
pub fn run_episode<F>(env: &mut NavEnv, initial: Option<RobotState>, mut controller: F) -> Result<EpisodeLog>
where
    F: FnMut(&NavEnv, &RobotState, &[f64]) -> Result<ActionCmd>,
{
    let initial = match initial {
        Some(s) => env.reset_to(s),
        None => env.reset(),
    };
    let mut transitions = Vec::with_capacity(env.config().max_steps);
    while !env.is_done() {
        let state = env.state();
        let obs = env.observe(&state, env.curvature())?;
        let action = controller(env, &state, &obs)?;
        transitions.push(env.step(action)?);
    }
    Ok(EpisodeLog {
        initial,
        transitions,
        goal: env.config().goal,
        goal_tolerance: env.config().goal_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn flat_env(scenario: Scenario) -> NavEnv {
        let cfg = ScenarioConfig::for_scenario(scenario);
        let grid = Arc::new(TerrainGrid::flat(cfg.size_m, cfg.cell_size, TerrainClass::Grass).unwrap());
        NavEnv::new(cfg, grid, rng::stream(1, rng::ROLLOUT)).unwrap()
    }

    fn ramp_env(scenario: Scenario, grade: f64) -> NavEnv {
        let cfg = ScenarioConfig::for_scenario(scenario);
        let grid = Arc::new(TerrainGrid::from_fn(cfg.size_m, cfg.cell_size, TerrainClass::Gravel, |x, _| grade * x).unwrap());
        NavEnv::new(cfg, grid, rng::stream(1, rng::ROLLOUT)).unwrap()
    }

    fn moving(x: f64, y: f64, heading: f64, v: f64) -> RobotState {
        RobotState { x, y, heading, v, omega: 0.0 }
    }

    #[test]
    fn kinematics_without_lag() {
        let mut env = flat_env(Scenario::Hill);
        env.reset_to(moving(5.0, 5.0, 0.0, 1.0));
        let tr = env.step(ActionCmd { v_cmd: 1.0, omega_cmd: 0.0 }).unwrap();
        assert!((tr.next_state.x - 5.1).abs() < 1e-12);
        assert_eq!(tr.next_state.y, 5.0);
    }

    #[test]
    fn lag_moves_velocity_toward_command() {
        let env = flat_env(Scenario::Hill);
        let next = env.kinematics(&moving(5.0, 5.0, 0.0, 0.0), &ActionCmd { v_cmd: 1.0, omega_cmd: 1.0 });
        assert!(next.v > 0.0 && next.v <= 1.0);
        assert!(next.omega > 0.0 && next.omega <= 1.0);
        assert_eq!(next.x, 5.0);
    }

    #[test]
    fn goal_step_rewards_and_terminates() {
        let mut env = flat_env(Scenario::Hill);
        let [gx, gy] = env.config().goal;
        env.reset_to(moving(gx - 0.1, gy, 0.0, 0.5));
        let tr = env.step(ActionCmd { v_cmd: 0.5, omega_cmd: 0.0 }).unwrap();
        assert_eq!(tr.reward, 50.0);
        assert_eq!(tr.outcome, StepOutcome::Goal);
        assert!(matches!(env.step(ActionCmd::STOP), Err(Error::State(_))));
    }

    #[test]
    fn resting_costs_only_time() {
        for scenario in Scenario::ALL {
            let mut env = flat_env(scenario);
            env.reset_to(moving(5.0, 5.0, 0.3, 0.0));
            let tr = env.step(ActionCmd::STOP).unwrap();
            assert!((tr.traversal_cost - 0.05).abs() < 1e-12, "{scenario}");
            assert_eq!(tr.reward, -tr.traversal_cost);
            assert!((tr.energy_j - env.config().power.p_base * 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn step_limit_ends_episode() {
        let mut env = flat_env(Scenario::Undulating);
        let log = run_episode(&mut env, Some(moving(5.0, 5.0, 0.0, 0.0)), |_, _, _| Ok(ActionCmd::STOP)).unwrap();
        assert_eq!(log.transitions.len(), 400);
        assert_eq!(log.transitions.last().unwrap().outcome, StepOutcome::TimeLimit);
        assert!(!log.reached_goal());
    }

    #[test]
    fn undulating_energy_cost() {
        assert!((cost_energy_undulating(0.6, 1.0, 0.0, 0.0, 1.0).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(cost_energy_undulating(0.6, 0.0, 0.0, 0.0, 1.0).unwrap(), 0.0);
        let theta = 0.2f64.atan();
        let up = cost_energy_undulating(0.6, 1.0, 0.2, theta, 1.0).unwrap();
        let down = cost_energy_undulating(0.6, 1.0, -0.2, -theta, 1.0).unwrap();
        assert!(up > down);
        assert!(matches!(cost_energy_undulating(0.6, 1.0, 0.0, PI / 2.0, 1.0), Err(Error::DegenerateSlope(_))));
    }

    #[test]
    fn hill_cost_cases() {
        assert_eq!(cost_hill(0.0, 1.0, 2.0, 1.0, 0.5, 0.2), 0.0);
        assert_eq!(cost_hill(1.0, 0.0, 2.0, 1.0, 0.5, 0.2), 2.0);
        assert_eq!(cost_hill(-1.0, 0.0, 2.0, 1.0, 0.5, 0.2), 1.0);
        assert!(cost_hill(0.5, 1.0, 2.0, 1.0, 0.5, 0.2) > cost_hill(0.5, 0.5, 2.0, 1.0, 0.5, 0.2));
    }

    #[test]
    fn directional_cost_cases() {
        let coeffs = DirectionalCoeffs::default();
        let gravel = coeffs.gravel;
        let flat = cost_directional(&gravel, 1.0, 0.0, 0.0, 1.0, 0.3).unwrap();
        assert!((flat - 1.2 * 1.3).abs() < 1e-12);
        let up = cost_directional(&gravel, 1.0, 0.0, 0.2, 0.0, 0.3).unwrap() / gravel.k_terrain;
        let down = cost_directional(&gravel, 1.0, 0.0, -0.2, 0.0, 0.3).unwrap() / gravel.k_terrain;
        assert!((up - 1.10).abs() < 1e-12);
        assert!((down - 0.96).abs() < 1e-12);
        assert!(matches!(
            cost_directional(&gravel, 0.0, 0.0, 0.1, 0.0, 0.3),
            Err(Error::DegenerateMotion { .. })
        ));
        for class in TerrainClass::ALL {
            for wet in [false, true] {
                let c = coeffs.for_class(class, wet);
                let a = cost_directional(c, 1.0, 0.0, 0.15, 0.8, 0.3).unwrap();
                let b = cost_directional(c, -1.0, 0.0, -0.15, 0.8, 0.3).unwrap();
                assert_ne!(a, b, "{class:?} wet={wet}");
            }
        }
    }

    #[test]
    fn inclined_moves_are_asymmetric_in_every_scenario() {
        for scenario in Scenario::ALL {
            let env = ramp_env(scenario, 0.2);
            let up = env.transition(&moving(10.0, 10.0, 0.0, 1.0), &ActionCmd { v_cmd: 1.0, omega_cmd: 0.0 }, 0.0).unwrap();
            let back = moving(up.next_state.x, 10.0, PI, 1.0);
            let down = env.transition(&back, &ActionCmd { v_cmd: 1.0, omega_cmd: 0.0 }, 0.0).unwrap();
            assert!((down.next_state.x - 10.0).abs() < 1e-12);
            assert!(up.traversal_cost > down.traversal_cost, "{scenario}");
        }
    }

    #[test]
    fn slope_cost_triangle_on_monotone_ramp() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Hill);
        let grid = TerrainGrid::from_fn(32.0, 0.5, TerrainClass::Grass, |x, _| 0.1 * x).unwrap();
        let edge = |a: f64, b: f64| {
            let dz = grid.elevation_at(b, 5.0).unwrap() - grid.elevation_at(a, 5.0).unwrap();
            cfg.cost_slope(dz) + cfg.cost_friction(0.6, (b - a).abs())
        };
        for (a, b, c) in [(1.0, 4.0, 9.0), (9.0, 4.0, 1.0), (2.0, 7.0, 3.0), (8.0, 2.0, 5.0)] {
            assert!(edge(a, c) <= edge(a, b) + edge(b, c) + 1e-12);
        }
    }

    #[test]
    fn power_cases() {
        let env = flat_env(Scenario::Undulating);
        let f = env.features(&moving(5.0, 5.0, 0.0, 0.0), 0.0).unwrap();
        let p = env.config().power;
        assert_eq!(env.config().power(&moving(5.0, 5.0, 0.0, 0.0), &ActionCmd::STOP, &f), p.p_base);
        let cruise = env.config().power(&moving(5.0, 5.0, 0.0, 1.2), &ActionCmd { v_cmd: 1.2, omega_cmd: 0.0 }, &f);
        assert!((cruise - (p.p_base + p.c1 * 1.2)).abs() < 1e-12);
    }

    #[test]
    fn episode_energy_is_sum_of_power() {
        let mut env = ramp_env(Scenario::Undulating, 0.1);
        let log = run_episode(&mut env, Some(moving(3.0, 5.0, 0.2, 0.0)), |_, _, _| {
            Ok(ActionCmd { v_cmd: 1.0, omega_cmd: 0.1 })
        })
        .unwrap();
        let mut expected = 0.0;
        for t in &log.transitions {
            let f = env.features(&t.state, 0.0).unwrap();
            expected += env.config().power(&t.state, &t.action, &f) * t.dt;
            assert!(t.energy_j >= env.config().power.p_base * t.dt);
        }
        assert!((log.total_energy() - expected).abs() < 1e-9);
    }

    #[test]
    fn safety_cases() {
        let flat = flat_env(Scenario::Hill);
        let f = flat.features(&moving(5.0, 5.0, 0.0, 0.0), 0.0).unwrap();
        for h in [0.0, 1.0, -2.0, PI] {
            assert_eq!(flat.config().safety_indicator(h, &f), (false, 0.0));
        }
        // 20° ramp against a 15° pitch limit and 25° roll limit
        let steep = ramp_env(Scenario::Hill, 20f64.to_radians().tan());
        let f = steep.features(&moving(10.0, 10.0, 0.0, 0.0), 0.0).unwrap();
        assert_eq!(steep.config().safety_indicator(0.0, &f), (true, 1.0));
        assert_eq!(steep.config().safety_indicator(PI / 2.0, &f), (false, 0.0));
        let mut magnitude = steep.config().clone();
        magnitude.constraint_form = ConstraintForm::Magnitude;
        let (v, c) = magnitude.safety_indicator(0.0, &f);
        assert!(v && (c - 5f64.to_radians()).abs() < 1e-9);
    }

    #[test]
    fn reward_branches_are_exclusive() {
        let mut env = ramp_env(Scenario::Hill, 20f64.to_radians().tan());
        let log = run_episode(&mut env, Some(moving(4.0, 16.0, 0.0, 0.0)), |_, _, _| {
            Ok(ActionCmd { v_cmd: 1.5, omega_cmd: 0.0 })
        })
        .unwrap();
        let cfg = env.config();
        for t in &log.transitions {
            assert_eq!(t.violated, t.constraint_cost > 0.0);
            let expected = if t.outcome == StepOutcome::Goal {
                cfg.r_goal
            } else if t.violated {
                cfg.r_unsafe
            } else {
                -t.traversal_cost
            };
            assert_eq!(t.reward, expected);
            assert!(t.traversal_cost >= 0.0);
        }
        assert!(log.transitions.iter().any(|t| t.violated));
    }

    #[test]
    fn terminal_on_violation_switch() {
        let mut cfg = ScenarioConfig::for_scenario(Scenario::Hill);
        cfg.terminal_on_violation = true;
        let grid = Arc::new(TerrainGrid::from_fn(32.0, 0.5, TerrainClass::Grass, |x, _| 0.5 * x).unwrap());
        let mut env = NavEnv::new(cfg, grid, rng::stream(1, rng::ROLLOUT)).unwrap();
        let log = run_episode(&mut env, Some(moving(4.0, 16.0, 0.0, 1.0)), |_, _, _| {
            Ok(ActionCmd { v_cmd: 1.0, omega_cmd: 0.0 })
        })
        .unwrap();
        assert_eq!(log.transitions.len(), 1);
        assert!(log.terminated_unsafe());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Directional);
        let grid = Arc::new(cfg.build_terrain(3).unwrap());
        let run = || {
            let mut env = NavEnv::new(cfg.clone(), Arc::clone(&grid), rng::stream(5, rng::ROLLOUT)).unwrap();
            let mut k = 0;
            run_episode(&mut env, None, |_, _, _| {
                k += 1;
                Ok(ActionCmd { v_cmd: 1.0, omega_cmd: ((k % 7) as f64 - 3.0) * 0.2 })
            })
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(String::from_utf8(x).unwrap().lines().count(), a.transitions.len() + 2);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = ScenarioConfig::for_scenario(Scenario::Hill);
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let mut value: serde_json::Value = serde_json::from_str(&text).unwrap();
        value["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ScenarioConfig>(value).is_err());
        let mut bad = cfg.clone();
        bad.k_up = 0.5;
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn state_stays_in_actuator_box(v in -3.0..3.0f64, w in -3.0..3.0f64, steps in 1usize..30) {
            let mut env = flat_env(Scenario::Undulating);
            env.reset_to(moving(16.0, 16.0, 0.0, 0.0));
            for _ in 0..steps {
                let tr = env.step(ActionCmd { v_cmd: v, omega_cmd: w }).unwrap();
                let s = tr.next_state;
                prop_assert!(s.v >= 0.0 && s.v <= 1.5 && s.omega.abs() <= 1.5);
                prop_assert!(s.heading > -PI && s.heading <= PI);
            }
        }
    }
}
