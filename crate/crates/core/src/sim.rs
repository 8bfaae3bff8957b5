//! Closed-loop environment: kinematic bicycle robot, oval or straight track,
//! scripted obstacles, collision detection and trace bookkeeping.

use std::f64::consts::PI;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::GpHyperparams;
use crate::mpc::{derive_seed, stage_cost, Controller, ControllerKind, MpcConfig, ObstacleObservation};
use crate::nlp::SolveStatus;
use crate::predict::{polytope_from_state, ObstacleGeometry, ObstaclePolytope};

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub l_f: f64,
    pub l_r: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub steer_max: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            l_f: 2.0,
            l_r: 2.0,
            v_min: 0.0,
            v_max: 30.0,
            steer_max: PI / 6.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_f > 0.0 && self.l_r > 0.0) {
            return invalid("vehicle l_f and l_r must be positive");
        }
        if !(self.v_min < self.v_max) {
            return invalid("vehicle v_min must be below v_max");
        }
        if !(self.steer_max > 0.0 && self.steer_max < PI / 2.0) {
            return invalid("vehicle steer_max must lie in (0, π/2)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub beta: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64, beta: f64) -> Self {
        Self { x, y, theta, beta }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.theta, self.beta]
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Clamps `(v, δ)` into the admissible box, warning when it had to.
pub fn clamp_controls(v: f64, steer: f64, p: &VehicleParams) -> (f64, f64) {
    let vc = v.clamp(p.v_min, p.v_max);
    let sc = steer.clamp(-p.steer_max, p.steer_max);
    if vc != v || sc != steer {
        log::warn!("control ({v}, {steer}) clamped to ({vc}, {sc})");
    }
    (vc, sc)
}

/// One step of the kinematic bicycle model.
pub fn vehicle_step(s: &VehicleState, v: f64, steer: f64, p: &VehicleParams, t_s: f64) -> VehicleState {
    let (v, steer) = clamp_controls(v, steer, p);
    let psi = s.theta + s.beta;
    let c = p.l_r / (p.l_f + p.l_r);
    VehicleState {
        x: s.x + t_s * v * psi.cos(),
        y: s.y + t_s * v * psi.sin(),
        theta: wrap_angle(s.theta + t_s * v / p.l_r * s.beta.sin()),
        beta: wrap_angle(s.beta + t_s * (c * steer.tan()).atan()),
    }
}

/// Track centerline parametrized by arc length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Track {
    /// Two straights joined by semicircles, driven counterclockwise from the
    /// left end of the bottom straight.
    Oval {
        center: [f64; 2],
        straight_length: f64,
        radius: f64,
    },
    /// Half-line; arc lengths past `length` keep extending it.
    Straight {
        start: [f64; 2],
        heading: f64,
        length: f64,
    },
}

impl Track {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Track::Oval {
                straight_length,
                radius,
                ..
            } => {
                if !(straight_length >= 0.0 && radius > 0.0) {
                    return invalid("oval track needs straight_length >= 0 and radius > 0");
                }
            }
            Track::Straight { length, .. } => {
                if !(length > 0.0) {
                    return invalid("straight track needs a positive length");
                }
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        match *self {
            Track::Oval {
                straight_length,
                radius,
                ..
            } => 2.0 * straight_length + 2.0 * PI * radius,
            Track::Straight { length, .. } => length,
        }
    }

    pub fn is_closed(&self) -> bool {
        matches!(self, Track::Oval { .. })
    }

    /// Centerline point and heading at arc length `s`.
    pub fn pose(&self, s: f64) -> ([f64; 2], f64) {
        match *self {
            Track::Oval {
                center: [cx, cy],
                straight_length: l,
                radius: r,
            } => {
                let s = s.rem_euclid(self.length());
                let arc = PI * r;
                if s < l {
                    ([cx - l / 2.0 + s, cy - r], 0.0)
                } else if s < l + arc {
                    let a = -PI / 2.0 + (s - l) / r;
                    ([cx + l / 2.0 + r * a.cos(), cy + r * a.sin()], wrap_angle(a + PI / 2.0))
                } else if s < 2.0 * l + arc {
                    ([cx + l / 2.0 - (s - l - arc), cy + r], PI)
                } else {
                    let a = PI / 2.0 + (s - 2.0 * l - arc) / r;
                    ([cx - l / 2.0 + r * a.cos(), cy + r * a.sin()], wrap_angle(a + PI / 2.0))
                }
            }
            Track::Straight {
                start: [x0, y0],
                heading,
                ..
            } => ([x0 + s * heading.cos(), y0 + s * heading.sin()], heading),
        }
    }

    pub fn point(&self, s: f64) -> [f64; 2] {
        self.pose(s).0
    }

    pub fn heading(&self, s: f64) -> f64 {
        self.pose(s).1
    }

    /// Arc length of the nearest centerline point, in `[0, length)` for an
    /// oval.
    pub fn project(&self, p: [f64; 2]) -> f64 {
        match *self {
            Track::Oval {
                center: [cx, cy],
                straight_length: l,
                radius: r,
            } => {
                let (dx, dy) = (p[0] - cx, p[1] - cy);
                let arc = PI * r;
                if dx.abs() <= l / 2.0 {
                    if dy < 0.0 {
                        dx + l / 2.0
                    } else {
                        l + arc + (l / 2.0 - dx)
                    }
                } else if dx > l / 2.0 {
                    let a = (dy).atan2(dx - l / 2.0);
                    l + (a + PI / 2.0) * r
                } else {
                    let a = (dy).atan2(dx + l / 2.0).rem_euclid(2.0 * PI);
                    2.0 * l + arc + (a - PI / 2.0) * r
                }
            }
            Track::Straight {
                start: [x0, y0],
                heading,
                ..
            } => (p[0] - x0) * heading.cos() + (p[1] - y0) * heading.sin(),
        }
    }
}

/// Accumulates arc-length progress across the oval's wrap point.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    last: f64,
    pub progress: f64,
}

impl ProgressTracker {
    pub fn new(track: &Track, p: [f64; 2]) -> Self {
        Self {
            last: track.project(p),
            progress: 0.0,
        }
    }

    pub fn update(&mut self, track: &Track, p: [f64; 2]) -> f64 {
        let s = track.project(p);
        let mut ds = s - self.last;
        if track.is_closed() {
            let len = track.length();
            ds -= len * (ds / len).round();
        }
        self.progress += ds;
        self.last = s;
        self.progress
    }
}

/// How the tracking reference is laid along the centerline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    /// `r(t) = centerline(s0 + v_ref t)`, independent of the robot.
    #[default]
    Time,
    /// Nearest centerline point to the robot, advanced by `v_ref k T_s`.
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

fn default_geometry() -> ObstacleGeometry {
    ObstacleGeometry::new(1.0, 0.5)
}

/// Piecewise-linear obstacle trajectory through timed waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleScript {
    pub waypoints: Vec<Waypoint>,
    #[serde(default = "default_geometry")]
    pub geometry: ObstacleGeometry,
    /// Growth of the rectangle on every side for collision checks and
    /// prediction, e.g. to account for the robot footprint.
    #[serde(default)]
    pub inflation: f64,
}

impl ObstacleScript {
    pub fn new(waypoints: Vec<Waypoint>, geometry: ObstacleGeometry) -> Result<Self> {
        let s = Self {
            waypoints,
            geometry,
            inflation: 0.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() {
            return invalid("obstacle script needs at least one waypoint");
        }
        if self.waypoints.windows(2).any(|w| !(w[1].t > w[0].t)) {
            return invalid("obstacle waypoint times must be strictly increasing");
        }
        if !(self.inflation >= 0.0) {
            return invalid("obstacle inflation must be non-negative");
        }
        self.geometry.validate()
    }

    /// Rectangle used for collision checks and prediction.
    pub fn effective_geometry(&self) -> ObstacleGeometry {
        self.geometry.inflated(self.inflation)
    }

    fn segment(&self, t: f64) -> Option<usize> {
        let w = &self.waypoints;
        if w.len() < 2 || t < w[0].t || t >= w[w.len() - 1].t {
            return None;
        }
        Some(w.partition_point(|p| p.t <= t) - 1)
    }

    /// `(x, y, θ)` at time `t`, held constant outside the waypoint span.
    pub fn state_at(&self, t: f64) -> [f64; 3] {
        let w = &self.waypoints;
        match self.segment(t) {
            Some(i) => {
                let (a, b) = (&w[i], &w[i + 1]);
                let f = (t - a.t) / (b.t - a.t);
                [
                    a.x + f * (b.x - a.x),
                    a.y + f * (b.y - a.y),
                    a.theta + f * (b.theta - a.theta),
                ]
            }
            None => {
                let p = if t < w[0].t { &w[0] } else { &w[w.len() - 1] };
                [p.x, p.y, p.theta]
            }
        }
    }

    /// Slope of the segment active at `t` (right-continuous), zero outside
    /// the span.
    pub fn velocity_at(&self, t: f64) -> [f64; 3] {
        match self.segment(t) {
            Some(i) => {
                let (a, b) = (&self.waypoints[i], &self.waypoints[i + 1]);
                let dt = b.t - a.t;
                [(b.x - a.x) / dt, (b.y - a.y) / dt, (b.theta - a.theta) / dt]
            }
            None => [0.0; 3],
        }
    }
}

/// True obstacle state and velocity at stage `stage`.
pub fn obstacle_truth(script: &ObstacleScript, stage: usize, t_o: f64) -> ([f64; 3], [f64; 3]) {
    let t = stage as f64 * t_o;
    (script.state_at(t), script.velocity_at(t))
}

/// True iff `y` lies in the open interior of any polytope.
pub fn collision_check(y: &[f64], polys: &[ObstaclePolytope]) -> bool {
    polys.iter().any(|p| p.contains_interior(y))
}

/// Signed distance from `p` to the boundary of a rectangle: positive
/// outside, negative inside.
pub fn rectangle_clearance(p: [f64; 2], geom: &ObstacleGeometry, state: &[f64]) -> f64 {
    let [cx, cy] = geom.center(state);
    let (s, c) = state[2].sin_cos();
    let (dx, dy) = (p[0] - cx, p[1] - cy);
    let lx = (c * dx + s * dy).abs() - geom.half_length;
    let ly = (-s * dx + c * dy).abs() - geom.half_width;
    if lx > 0.0 || ly > 0.0 {
        lx.max(0.0).hypot(ly.max(0.0))
    } else {
        lx.max(ly)
    }
}

fn default_noise() -> f64 {
    1e-4
}

/// Everything needed to reproduce one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub track: Track,
    /// Arc length where the robot starts.
    #[serde(default)]
    pub start_s: f64,
    /// Progress that counts as a completed lap; defaults to the track length.
    #[serde(default)]
    pub lap_length: Option<f64>,
    /// Nominal speed of the reference along the centerline.
    pub reference_speed: f64,
    #[serde(default)]
    pub reference_mode: ReferenceMode,
    /// Robot start; defaults to the centerline pose at `start_s`.
    #[serde(default)]
    pub initial_state: Option<VehicleState>,
    #[serde(default)]
    pub vehicle: VehicleParams,
    pub mpc: MpcConfig,
    /// One hyperparameter set per obstacle velocity component.
    pub gp: Vec<GpHyperparams>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleScript>,
    /// Per-axis variance of the velocity observation noise.
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    #[serde(default)]
    pub seed: u64,
    /// Write solver wall times into the trace; off keeps traces
    /// byte-reproducible.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub max_stages: Option<usize>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.track.validate()?;
        self.vehicle.validate()?;
        self.mpc.validate()?;
        if !(self.reference_speed > 0.0) {
            return invalid("reference_speed must be positive");
        }
        if self.mpc.sample_time != self.mpc.obstacle_sample_time {
            return invalid("sample_time and obstacle_sample_time must be equal");
        }
        if let Some(l) = self.lap_length {
            if !(l > 0.0) {
                return invalid("lap_length must be positive");
            }
        }
        if !(self.noise_variance >= 0.0) {
            return invalid("noise_variance must be non-negative");
        }
        if self.gp.len() != 3 {
            return invalid("gp needs one hyperparameter set per velocity component (3)");
        }
        for (j, h) in self.gp.iter().enumerate() {
            h.validate()?;
            if h.length_scales.len() != 3 {
                return invalid(format!("gp[{j}].length_scales needs 3 entries"));
            }
        }
        for (o, s) in self.obstacles.iter().enumerate() {
            s.validate()
                .map_err(|e| Error::InvalidArgument(format!("obstacles[{o}]: {e}")))?;
        }
        Ok(())
    }

    pub fn lap_length(&self) -> f64 {
        self.lap_length.unwrap_or_else(|| self.track.length())
    }

    /// Stage budget: three times the nominal lap duration unless set.
    pub fn max_stages(&self) -> usize {
        self.max_stages.unwrap_or_else(|| {
            (3.0 * self.lap_length() / (self.reference_speed * self.mpc.sample_time)).ceil() as usize
        })
    }

    pub fn initial_state(&self) -> VehicleState {
        if let Some(s) = self.initial_state {
            return s;
        }
        let ([x, y], th) = self.track.pose(self.start_s);
        VehicleState::new(x, y, th, 0.0)
    }

    /// `K + 1` reference points for stage `stage` with the robot at `y`.
    pub fn reference_window(&self, stage: usize, y: [f64; 2]) -> Vec<[f64; 2]> {
        let ts = self.mpc.sample_time;
        let ds = self.reference_speed * ts;
        let base = match self.reference_mode {
            ReferenceMode::Time => self.start_s + ds * stage as f64,
            ReferenceMode::Projection => self.track.project(y),
        };
        (0..=self.mpc.horizon).map(|k| self.track.point(base + ds * k as f64)).collect()
    }
}

/// One row of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub t: f64,
    pub state: VehicleState,
    pub control: [f64; 2],
    /// Smallest signed robot-to-rectangle distance, `None` without obstacles.
    pub clearance: Option<f64>,
    pub risk_lhs: Vec<Vec<f64>>,
    pub risk_lhs_max: Option<f64>,
    pub status: SolveStatus,
    pub solve_time: f64,
    pub iterations: usize,
    pub obstacles: Vec<[f64; 3]>,
    pub reference: [f64; 2],
    pub stage_cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    LapCompleted,
    Collision { stage: usize },
    Aborted { stage: usize, status: SolveStatus },
    NumericFailure { stage: usize },
    Incomplete,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::LapCompleted => "lap_completed",
            Outcome::Collision { .. } => "collision",
            Outcome::Aborted { .. } => "aborted",
            Outcome::NumericFailure { .. } => "numeric_failure",
            Outcome::Incomplete => "incomplete",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSummary {
    pub controller: ControllerKind,
    pub theta: f64,
    pub seed: u64,
    pub stages: usize,
    pub accumulated_cost: f64,
    pub lap_completed: bool,
    pub lap_time: Option<f64>,
    pub avg_solve_time: f64,
    pub collision: bool,
    pub min_clearance: Option<f64>,
    pub non_optimal_stages: usize,
    pub max_risk_lhs: Option<f64>,
    pub outcome: Outcome,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub records: Vec<StageRecord>,
    pub summary: TraceSummary,
    pub obstacle_count: usize,
    pub record_timing: bool,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "stage",
    "t",
    "x",
    "y",
    "theta",
    "beta",
    "v_cmd",
    "steer_cmd",
    "clearance",
    "risk_lhs_max",
    "status",
    "solve_ms",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl SimTrace {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
        for o in 0..self.obstacle_count {
            for f in ["x", "y", "theta"] {
                h.push(format!("obs{o}_{f}"));
            }
        }
        h.extend(["ref_x", "ref_y", "stage_cost"].map(String::from));
        h
    }

    /// One CSV row per stage; numbers use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.csv_header())?;
        for r in &self.records {
            let mut row = vec![
                r.stage.to_string(),
                r.t.to_string(),
                r.state.x.to_string(),
                r.state.y.to_string(),
                r.state.theta.to_string(),
                r.state.beta.to_string(),
                r.control[0].to_string(),
                r.control[1].to_string(),
                opt(r.clearance),
                opt(r.risk_lhs_max),
                r.status.as_str().to_string(),
                if self.record_timing {
                    (r.solve_time * 1e3).to_string()
                } else {
                    String::new()
                },
            ];
            for o in &r.obstacles {
                row.extend(o.iter().map(|v| v.to_string()));
            }
            row.extend([r.reference[0].to_string(), r.reference[1].to_string(), r.stage_cost.to_string()]);
            w.write_record(row)?;
        }
        w.flush()
    }
}

/// Runs the scenario with the given controller and master seed.
pub fn run_closed_loop(scenario: &Scenario, kind: ControllerKind, seed: u64) -> Result<SimTrace> {
    scenario.validate()?;
    let mut cfg = scenario.mpc.clone();
    cfg.controller = kind;
    let ts = cfg.sample_time;
    let params = scenario.vehicle.clone();
    let n_obs = scenario.obstacles.len();
    let mut controller = Controller::new(cfg.clone(), params.clone(), scenario.gp.clone(), n_obs, seed)?;
    let geoms: Vec<ObstacleGeometry> = scenario.obstacles.iter().map(|s| s.effective_geometry()).collect();
    let noise = Normal::new(0.0, scenario.noise_variance.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut state = scenario.initial_state();
    let mut progress = ProgressTracker::new(&scenario.track, state.position());
    let lap = scenario.lap_length();
    let max_stages = scenario.max_stages();

    let mut records = Vec::new();
    let mut previous: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; n_obs];
    let mut outcome = Outcome::Incomplete;
    let mut message = None;
    let mut lap_time = None;
    let mut solve_total = 0.0;

    for stage in 0..max_stages {
        let t = stage as f64 * ts;
        let truth: Vec<([f64; 3], [f64; 3])> =
            scenario.obstacles.iter().map(|s| obstacle_truth(s, stage, ts)).collect();
        let y = state.position();
        let clearance = truth
            .iter()
            .zip(&geoms)
            .map(|((s, _), g)| rectangle_clearance(y, g, s))
            .reduce(f64::min);
        let polys: Vec<ObstaclePolytope> = truth.iter().zip(&geoms).map(|((s, _), g)| polytope_from_state(g, s)).collect();
        let collided = collision_check(&y, &polys);

        let reference = scenario.reference_window(stage, y);
        let observations: Vec<ObstacleObservation> = truth
            .iter()
            .zip(&geoms)
            .enumerate()
            .map(|(o, ((s, _), g))| ObstacleObservation {
                geometry: g.clone(),
                previous: previous[o].clone(),
                state: s.to_vec(),
            })
            .collect();

        let mut record = StageRecord {
            stage,
            t,
            state,
            control: [0.0, 0.0],
            clearance,
            risk_lhs: Vec::new(),
            risk_lhs_max: None,
            status: SolveStatus::OptimalLocal,
            solve_time: 0.0,
            iterations: 0,
            obstacles: truth.iter().map(|(s, _)| *s).collect(),
            reference: reference[0],
            stage_cost: 0.0,
        };

        if collided {
            record.stage_cost = stage_cost(y, reference[0], record.control, &cfg);
            records.push(record);
            outcome = Outcome::Collision { stage };
            break;
        }

        match controller.step(&state, &observations, &reference) {
            Ok(out) => {
                let (v, steer) = clamp_controls(out.control[0], out.control[1], &params);
                record.control = [v, steer];
                record.risk_lhs_max = out.diagnostics.risk_lhs_max();
                record.risk_lhs = out.diagnostics.risk_lhs;
                record.status = out.diagnostics.status;
                record.solve_time = out.diagnostics.solve_time;
                record.iterations = out.diagnostics.iterations;
                solve_total += out.diagnostics.solve_time;
            }
            Err(Error::ControllerAbort { stage, status }) => {
                record.status = status;
                record.stage_cost = stage_cost(y, reference[0], record.control, &cfg);
                records.push(record);
                outcome = Outcome::Aborted { stage, status };
                break;
            }
            Err(Error::NumericFailure(msg)) => {
                record.status = SolveStatus::NumericFailure;
                record.stage_cost = stage_cost(y, reference[0], record.control, &cfg);
                records.push(record);
                outcome = Outcome::NumericFailure { stage };
                message = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
        record.stage_cost = stage_cost(y, reference[0], record.control, &cfg);

        // Velocity observed at this stage enters the GP window next stage.
        for (o, (s, v)) in truth.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x6e6f_6973_65, stage, o, 0));
            let noisy: Vec<f64> = v.iter().map(|c| c + noise.sample(&mut rng)).collect();
            previous[o] = Some((s.to_vec(), noisy));
        }

        state = vehicle_step(&state, record.control[0], record.control[1], &params, ts);
        records.push(record);
        if progress.update(&scenario.track, state.position()) >= lap {
            outcome = Outcome::LapCompleted;
            lap_time = Some((stage + 1) as f64 * ts);
            break;
        }
    }

    let solved = records.len().max(1);
    let summary = TraceSummary {
        controller: kind,
        theta: cfg.risk.theta,
        seed,
        stages: records.len(),
        accumulated_cost: records.iter().map(|r| r.stage_cost).sum(),
        lap_completed: outcome == Outcome::LapCompleted,
        lap_time,
        avg_solve_time: solve_total / solved as f64,
        collision: matches!(outcome, Outcome::Collision { .. }),
        min_clearance: records.iter().filter_map(|r| r.clearance).reduce(f64::min),
        non_optimal_stages: records.iter().filter(|r| !r.status.is_optimal()).count(),
        max_risk_lhs: records.iter().filter_map(|r| r.risk_lhs_max).reduce(f64::max),
        outcome,
        message,
    };
    Ok(SimTrace {
        records,
        summary,
        obstacle_count: n_obs,
        record_timing: scenario.record_timing,
    })
}
