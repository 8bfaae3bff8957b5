//! Receding-horizon controller: per-stage GP fit, obstacle prediction and
//! sampling, NLP assembly with one risk block per obstacle and horizon step,
//! warm-started solve.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::{EmptyWindowPolicy, GpDataset, GpHyperparams, GpModel};
use crate::nlp::{
    assemble, AffineMap, Block, ConstraintKind, FunctionBlock, NlProblem, SmoothMap, SolveStatus, Solver,
    SolverOptions, VarBlock,
};
use crate::predict::{
    normalized_halfspaces, polytope_from_state, propagate_horizon, sample_states_with, GaussianBelief,
    NormalizedHalfspaceSample, ObstacleGeometry,
};
use crate::risk::{
    budget_lhs, build_risk_block, lipschitz_scale, saa_initial_point, RiskKind, RiskSpec, YSource,
};
use crate::sim::{VehicleParams, VehicleState};

pub const NU: usize = 2;
pub const NXI: usize = 4;
pub const NY: usize = 2;

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Drmpc,
    Saa,
}

impl ControllerKind {
    pub fn risk_kind(self) -> RiskKind {
        match self {
            ControllerKind::Drmpc => RiskKind::DistributionallyRobust,
            ControllerKind::Saa => RiskKind::SampleAverage,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControllerKind::Drmpc => "drmpc",
            ControllerKind::Saa => "saa",
        }
    }
}

/// What the controller does when a solve is not locally optimal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FallbackMode {
    /// Zero velocity and zero steering.
    #[default]
    Brake,
    /// Return an error.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Horizon length `K`.
    pub horizon: usize,
    /// Robot sampling time `T_s`.
    pub sample_time: f64,
    /// Obstacle sampling time `T_o`.
    pub obstacle_sample_time: f64,
    pub q: Mat2,
    pub r: Mat2,
    pub p: Mat2,
    pub risk: RiskSpec,
    /// GP window length `M`.
    pub window: usize,
    #[serde(default)]
    pub controller: ControllerKind,
    #[serde(default)]
    pub fallback: FallbackMode,
    #[serde(default)]
    pub zero_fill_window: bool,
    #[serde(default = "default_solver")]
    pub solver: SolverOptions,
}

fn default_solver() -> SolverOptions {
    SolverOptions::default()
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return invalid("horizon must be at least 1");
        }
        if !(self.sample_time > 0.0) || !(self.obstacle_sample_time > 0.0) {
            return invalid("sampling times must be positive");
        }
        if self.window == 0 {
            return invalid("GP window must hold at least one observation");
        }
        self.risk.validate()?;
        for (name, m, strict) in [("q", &self.q, false), ("p", &self.p, false), ("r", &self.r, true)] {
            if m[0][1] != m[1][0] {
                return invalid(format!("{name} must be symmetric"));
            }
            let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
            let det = a * c - b * b;
            let ok = if strict {
                a > 0.0 && det > 0.0
            } else {
                a >= 0.0 && c >= 0.0 && det >= 0.0
            };
            if !ok {
                let what = if strict { "positive definite" } else { "positive semidefinite" };
                return invalid(format!("{name} must be {what}"));
            }
        }
        Ok(())
    }
}

fn quad(w: &Mat2, v: [f64; 2]) -> f64 {
    v[0] * (w[0][0] * v[0] + w[0][1] * v[1]) + v[1] * (w[1][0] * v[0] + w[1][1] * v[1])
}

/// `(y - r)ᵀQ(y - r) + uᵀRu`
pub fn stage_cost(y: [f64; 2], r: [f64; 2], u: [f64; 2], cfg: &MpcConfig) -> f64 {
    quad(&cfg.q, [y[0] - r[0], y[1] - r[1]]) + quad(&cfg.r, u)
}

/// Horizon objective for outputs `y_0..y_K`, controls `u_0..u_{K-1}` and
/// reference `r_0..r_K`.
pub fn horizon_cost(ys: &[[f64; 2]], us: &[[f64; 2]], refs: &[[f64; 2]], cfg: &MpcConfig) -> Result<f64> {
    let k = us.len();
    if ys.len() != k + 1 || refs.len() != k + 1 {
        return invalid("horizon cost needs K controls and K+1 outputs and references");
    }
    let mut j = 0.0;
    for i in 0..k {
        j += stage_cost(ys[i], refs[i], us[i], cfg);
    }
    let e = [ys[k][0] - refs[k][0], ys[k][1] - refs[k][1]];
    Ok(j + quad(&cfg.p, e))
}

/// `(x - c)ᵀW(x - c)` for a 2-vector.
struct QuadMap {
    w: Mat2,
    center: [f64; 2],
}

impl QuadMap {
    fn new(w: &Mat2, center: [f64; 2]) -> Self {
        let off = 0.5 * (w[0][1] + w[1][0]);
        Self {
            w: [[w[0][0], off], [off, w[1][1]]],
            center,
        }
    }
}

impl SmoothMap for QuadMap {
    fn input_dim(&self) -> usize {
        2
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out[0] = quad(&self.w, [x[0] - self.center[0], x[1] - self.center[1]]);
    }
    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        vec![(0, 0), (0, 1)]
    }
    fn jacobian(&self, x: &[f64], v: &mut [f64]) {
        let e = [x[0] - self.center[0], x[1] - self.center[1]];
        v[0] = 2.0 * (self.w[0][0] * e[0] + self.w[0][1] * e[1]);
        v[1] = 2.0 * (self.w[1][0] * e[0] + self.w[1][1] * e[1]);
    }
    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        vec![(0, 0), (1, 0), (1, 1)]
    }
    fn hessian(&self, _x: &[f64], w: &[f64], v: &mut [f64]) {
        v[0] = 2.0 * w[0] * self.w[0][0];
        v[1] = 2.0 * w[0] * self.w[1][0];
        v[2] = 2.0 * w[0] * self.w[1][1];
    }
}

/// Objective blocks over `y0..yK` and `u0..u{K-1}` tracking `reference`.
pub fn build_cost(reference: &[[f64; 2]], cfg: &MpcConfig) -> Result<Vec<Block>> {
    let k = cfg.horizon;
    if reference.len() != k + 1 {
        return invalid(format!("reference has {} points, horizon needs {}", reference.len(), k + 1));
    }
    let mut blocks = Vec::with_capacity(2 * k + 1);
    for i in 0..k {
        blocks.push(Block::Objective(FunctionBlock::new(
            format!("track{i}"),
            &[&y_name(i)],
            QuadMap::new(&cfg.q, reference[i]),
        )));
        blocks.push(Block::Objective(FunctionBlock::new(
            format!("effort{i}"),
            &[&u_name(i)],
            QuadMap::new(&cfg.r, [0.0, 0.0]),
        )));
    }
    blocks.push(Block::Objective(FunctionBlock::new(
        "terminal",
        &[&y_name(k)],
        QuadMap::new(&cfg.p, reference[k]),
    )));
    Ok(blocks)
}

pub fn u_name(k: usize) -> String {
    format!("u{k}")
}

pub fn xi_name(k: usize) -> String {
    format!("xi{k}")
}

pub fn y_name(k: usize) -> String {
    format!("y{k}")
}

pub fn risk_prefix(obstacle: usize, k: usize) -> String {
    format!("risk.o{obstacle}.k{k}")
}

/// `β` increment per unit time for steering angle `δ`, with its first two
/// derivatives.
fn slip_rate(delta: f64, p: &VehicleParams) -> (f64, f64, f64) {
    let c = p.l_r / (p.l_r + p.l_f);
    let t = delta.tan();
    let d = 1.0 + c * c * t * t;
    let g = (c * t).atan();
    let g1 = c * (1.0 + t * t) / d;
    let g2 = 2.0 * c * t * (1.0 + t * t) * (1.0 - c * c) / (d * d);
    (g, g1, g2)
}

/// One step of the kinematic bicycle model, without clamping or wrapping.
pub fn bicycle(xi: &[f64; 4], u: [f64; 2], p: &VehicleParams, ts: f64) -> [f64; 4] {
    let [x, y, th, b] = *xi;
    let [v, delta] = u;
    let psi = th + b;
    [
        x + ts * v * psi.cos(),
        y + ts * v * psi.sin(),
        th + ts * v * b.sin() / p.l_r,
        b + ts * slip_rate(delta, p).0,
    ]
}

/// `ξ_{k+1} - f(ξ_k, u_k)`, inputs `[ξ_k, u_k, ξ_{k+1}]`.
struct BicycleMap {
    params: VehicleParams,
    ts: f64,
}

impl SmoothMap for BicycleMap {
    fn input_dim(&self) -> usize {
        NXI + NU + NXI
    }
    fn output_dim(&self) -> usize {
        NXI
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let next = bicycle(&[x[0], x[1], x[2], x[3]], [x[4], x[5]], &self.params, self.ts);
        for i in 0..NXI {
            out[i] = x[6 + i] - next[i];
        }
    }
    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        vec![
            (0, 0),
            (0, 2),
            (0, 3),
            (0, 4),
            (0, 6),
            (1, 1),
            (1, 2),
            (1, 3),
            (1, 4),
            (1, 7),
            (2, 2),
            (2, 3),
            (2, 4),
            (2, 8),
            (3, 3),
            (3, 5),
            (3, 9),
        ]
    }
    fn jacobian(&self, x: &[f64], v: &mut [f64]) {
        let (th, b, vel, delta) = (x[2], x[3], x[4], x[5]);
        let t = self.ts;
        let lr = self.params.l_r;
        let (sp, cp) = (th + b).sin_cos();
        let (sb, cb) = b.sin_cos();
        let g1 = slip_rate(delta, &self.params).1;
        v.copy_from_slice(&[
            -1.0,
            t * vel * sp,
            t * vel * sp,
            -t * cp,
            1.0,
            -1.0,
            -t * vel * cp,
            -t * vel * cp,
            -t * sp,
            1.0,
            -1.0,
            -t * vel * cb / lr,
            -t * sb / lr,
            1.0,
            -1.0,
            -t * g1,
            1.0,
        ]);
    }
    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        vec![(2, 2), (3, 2), (3, 3), (4, 2), (4, 3), (5, 5)]
    }
    fn hessian(&self, x: &[f64], w: &[f64], v: &mut [f64]) {
        let (th, b, vel, delta) = (x[2], x[3], x[4], x[5]);
        let t = self.ts;
        let lr = self.params.l_r;
        let (sp, cp) = (th + b).sin_cos();
        let (sb, cb) = b.sin_cos();
        let g2 = slip_rate(delta, &self.params).2;
        let pos = w[0] * t * vel * cp + w[1] * t * vel * sp;
        let mixed = w[0] * t * sp - w[1] * t * cp;
        v[0] = pos;
        v[1] = pos;
        v[2] = pos + w[2] * t * vel * sb / lr;
        v[3] = mixed;
        v[4] = mixed - w[2] * t * cb / lr;
        v[5] = -w[3] * t * g2;
    }
}

/// Horizon trajectories used to initialize the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub u: Vec<[f64; 2]>,
    pub xi: Vec<[f64; 4]>,
}

impl InitialGuess {
    /// Rolls the model forward from `xi0` under constant controls.
    pub fn rollout(xi0: &VehicleState, u: [f64; 2], cfg: &MpcConfig, params: &VehicleParams) -> Self {
        let mut xi = vec![xi0.to_array()];
        for k in 0..cfg.horizon {
            let next = bicycle(&xi[k], u, params, cfg.sample_time);
            xi.push(next);
        }
        Self {
            u: vec![u; cfg.horizon],
            xi,
        }
    }

    fn y(&self, k: usize) -> [f64; 2] {
        [self.xi[k][0], self.xi[k][1]]
    }
}

/// Sampled half-spaces: `samples[obstacle][k - 1][i]` for steps `k = 1..=K`.
pub type HorizonSamples = Vec<Vec<Vec<NormalizedHalfspaceSample>>>;

/// An assembled MPC problem together with what is needed to read it back.
pub struct MpcProblem {
    pub problem: NlProblem,
    pub kind: ControllerKind,
    pub horizon: usize,
    pub obstacles: usize,
    pub samples: usize,
    pub faces: usize,
}

impl MpcProblem {
    pub fn control(&self, x: &[f64], k: usize) -> [f64; 2] {
        let r = self.problem.var_range(&u_name(k)).expect("control block");
        [x[r.start], x[r.start + 1]]
    }

    pub fn output(&self, x: &[f64], k: usize) -> [f64; 2] {
        let r = self.problem.var_range(&y_name(k)).expect("output block");
        [x[r.start], x[r.start + 1]]
    }

    pub fn state(&self, x: &[f64], k: usize) -> [f64; 4] {
        let r = self.problem.var_range(&xi_name(k)).expect("state block");
        [x[r.start], x[r.start + 1], x[r.start + 2], x[r.start + 3]]
    }

    /// Budget left-hand side per obstacle and step `k = 1..=K`.
    pub fn risk_lhs(&self, x: &[f64], spec: &RiskSpec) -> Vec<Vec<f64>> {
        let kind = self.kind.risk_kind();
        (0..self.obstacles)
            .map(|o| {
                (1..=self.horizon)
                    .map(|k| {
                        let pre = risk_prefix(o, k);
                        let z = x[self.problem.var_range(&format!("{pre}.z")).expect("z").start];
                        let lambda = self
                            .problem
                            .var_range(&format!("{pre}.nu"))
                            .map(|r| x[r.start] * lipschitz_scale(&self.output(x, k)))
                            .unwrap_or(0.0);
                        let s = &x[self.problem.var_range(&format!("{pre}.s")).expect("s")];
                        budget_lhs(kind, spec, z, lambda, s)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn shape(&self) -> ProblemShape {
        ProblemShape {
            horizon: self.horizon,
            obstacles: self.obstacles,
            samples: self.samples,
            faces: self.faces,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemShape {
    pub horizon: usize,
    pub obstacles: usize,
    pub samples: usize,
    pub faces: usize,
}

/// Distributionally robust MPC problem.
pub fn build_drmpc(
    xi0: &VehicleState,
    samples: &HorizonSamples,
    reference: &[[f64; 2]],
    cfg: &MpcConfig,
    params: &VehicleParams,
    guess: &InitialGuess,
) -> Result<MpcProblem> {
    build_mpc(ControllerKind::Drmpc, xi0, samples, reference, cfg, params, guess)
}

/// Sample-average MPC problem.
pub fn build_saampc(
    xi0: &VehicleState,
    samples: &HorizonSamples,
    reference: &[[f64; 2]],
    cfg: &MpcConfig,
    params: &VehicleParams,
    guess: &InitialGuess,
) -> Result<MpcProblem> {
    build_mpc(ControllerKind::Saa, xi0, samples, reference, cfg, params, guess)
}

pub fn build_mpc(
    kind: ControllerKind,
    xi0: &VehicleState,
    samples: &HorizonSamples,
    reference: &[[f64; 2]],
    cfg: &MpcConfig,
    params: &VehicleParams,
    guess: &InitialGuess,
) -> Result<MpcProblem> {
    cfg.validate()?;
    let k_h = cfg.horizon;
    if guess.u.len() != k_h || guess.xi.len() != k_h + 1 {
        return invalid("initial guess does not match the horizon");
    }
    let mut blocks = Vec::new();
    for k in 0..k_h {
        blocks.push(Block::Variables(VarBlock::bounded(
            u_name(k),
            vec![params.v_min, -params.steer_max],
            vec![params.v_max, params.steer_max],
            guess.u[k].to_vec(),
        )));
    }
    for k in 0..=k_h {
        blocks.push(Block::Variables(VarBlock::free(xi_name(k), guess.xi[k].to_vec())));
    }
    for k in 0..=k_h {
        blocks.push(Block::Variables(VarBlock::free(y_name(k), guess.y(k).to_vec())));
    }
    blocks.extend(build_cost(reference, cfg)?);

    let x0 = xi0.to_array();
    blocks.push(Block::Constraint(
        ConstraintKind::Equality,
        FunctionBlock::new(
            "init",
            &[&xi_name(0)],
            AffineMap::new(NXI, x0.iter().map(|v| -v).collect(), (0..NXI).map(|i| (i, i, 1.0)).collect()),
        ),
    ));
    for k in 0..k_h {
        blocks.push(Block::Constraint(
            ConstraintKind::Equality,
            FunctionBlock::new(
                format!("dyn{k}"),
                &[&xi_name(k), &u_name(k), &xi_name(k + 1)],
                BicycleMap {
                    params: params.clone(),
                    ts: cfg.sample_time,
                },
            ),
        ));
    }
    for k in 0..=k_h {
        // y_k - (x_k, y_k) = 0, inputs [ξ_k, y_k]
        blocks.push(Block::Constraint(
            ConstraintKind::Equality,
            FunctionBlock::new(
                format!("out{k}"),
                &[&xi_name(k), &y_name(k)],
                AffineMap::new(6, vec![0.0; 2], vec![(0, 0, -1.0), (0, 4, 1.0), (1, 1, -1.0), (1, 5, 1.0)]),
            ),
        ));
    }

    let mut n_samples = 0;
    let mut n_faces = 0;
    for (o, per_step) in samples.iter().enumerate() {
        if per_step.len() != k_h {
            return invalid(format!("obstacle {o} has samples for {} steps, horizon is {k_h}", per_step.len()));
        }
        for (idx, step_samples) in per_step.iter().enumerate() {
            let k = idx + 1;
            let y = guess.y(k);
            let init = saa_initial_point(step_samples, &y, cfg.risk.alpha)?;
            let blk = build_risk_block(
                kind.risk_kind(),
                step_samples,
                &cfg.risk,
                &risk_prefix(o, k),
                &YSource::Variable {
                    name: y_name(k),
                    dim: NY,
                },
                &init,
            )?;
            n_samples = blk.n_samples;
            n_faces = blk.n_faces;
            blocks.extend(blk.into_blocks());
        }
    }
    Ok(MpcProblem {
        problem: assemble(blocks)?,
        kind,
        horizon: k_h,
        obstacles: samples.len(),
        samples: n_samples,
        faces: n_faces,
    })
}

/// What the controller sees of one obstacle at a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleObservation {
    pub geometry: ObstacleGeometry,
    /// State and measured velocity at the previous stage, once available.
    pub previous: Option<(Vec<f64>, Vec<f64>)>,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PreviousSolution {
    pub u: Vec<[f64; 2]>,
    pub xi: Vec<[f64; 4]>,
    pub shape: ProblemShape,
}

/// Mutable controller state carried between stages.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub gp_windows: Vec<GpDataset>,
    pub previous_solution: Option<PreviousSolution>,
    pub stage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub status: SolveStatus,
    pub objective: f64,
    pub iterations: usize,
    pub solve_time: f64,
    /// Budget left-hand sides, `[obstacle][k - 1]`.
    pub risk_lhs: Vec<Vec<f64>>,
    pub warm_started: bool,
    pub fallback: bool,
    /// Predicted obstacle mean positions, `[obstacle][k - 1]`.
    pub predicted_obstacles: Vec<Vec<[f64; 2]>>,
}

impl StepDiagnostics {
    pub fn risk_lhs_max(&self) -> Option<f64> {
        self.risk_lhs.iter().flatten().copied().reduce(f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub control: [f64; 2],
    pub diagnostics: StepDiagnostics,
}

/// Seed for the sample stream of one obstacle, horizon step and stage.
pub fn derive_seed(master: u64, stage: usize, obstacle: usize, step: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = mix(master);
    for v in [stage as u64, obstacle as u64, step as u64] {
        h = mix(h ^ v);
    }
    h
}

/// Shifts a previous solution one step forward, repeating the last entry.
/// `θ` and `β` are moved by whole turns to sit next to the current state.
pub fn warm_start(prev: &PreviousSolution, shape: ProblemShape, xi_now: &VehicleState) -> Option<InitialGuess> {
    if prev.shape != shape || prev.u.len() != shape.horizon || prev.xi.len() != shape.horizon + 1 {
        return None;
    }
    let k_h = shape.horizon;
    let mut u: Vec<[f64; 2]> = prev.u[1..].to_vec();
    u.push(prev.u[k_h - 1]);
    let mut xi: Vec<[f64; 4]> = prev.xi[1..].to_vec();
    xi.push(prev.xi[k_h]);
    let now = xi_now.to_array();
    for a in [2, 3] {
        let turns = ((now[a] - xi[0][a]) / (2.0 * PI)).round();
        if turns != 0.0 {
            for s in xi.iter_mut() {
                s[a] += turns * 2.0 * PI;
            }
        }
    }
    Some(InitialGuess { u, xi })
}

/// Learning-based receding-horizon controller.
pub struct Controller {
    cfg: MpcConfig,
    params: VehicleParams,
    hypers: Vec<GpHyperparams>,
    state: ControllerState,
    solver: Solver,
    seed: u64,
}

impl Controller {
    pub fn new(
        cfg: MpcConfig,
        params: VehicleParams,
        hypers: Vec<GpHyperparams>,
        obstacles: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        params.validate()?;
        for h in &hypers {
            h.validate()?;
        }
        if obstacles > 0 && hypers.is_empty() {
            return invalid("GP hyperparameters are required when obstacles are present");
        }
        let input_dim = hypers.first().map(|h| h.length_scales.len()).unwrap_or(0);
        let gp_windows = (0..obstacles)
            .map(|_| {
                if cfg.zero_fill_window {
                    GpDataset::zero_filled(cfg.window, input_dim, hypers.len())
                } else {
                    GpDataset::new(cfg.window)
                }
            })
            .collect();
        Ok(Self {
            solver: Solver::new(cfg.solver.clone()),
            cfg,
            params,
            hypers,
            state: ControllerState {
                gp_windows,
                previous_solution: None,
                stage: 0,
            },
            seed,
        })
    }

    pub fn config(&self) -> &MpcConfig {
        &self.cfg
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    /// Obstacle samples for the current stage; also updates the GP windows.
    pub fn predict_obstacles(
        &mut self,
        obstacles: &[ObstacleObservation],
    ) -> Result<(HorizonSamples, Vec<Vec<[f64; 2]>>)> {
        if obstacles.len() != self.state.gp_windows.len() {
            return invalid(format!(
                "controller tracks {} obstacles, got {} observations",
                self.state.gp_windows.len(),
                obstacles.len()
            ));
        }
        let k_h = self.cfg.horizon;
        let n = self.cfg.risk.n_samples;
        let mut samples = Vec::with_capacity(obstacles.len());
        let mut means = Vec::with_capacity(obstacles.len());
        for (o, obs) in obstacles.iter().enumerate() {
            if let Some((s, v)) = &obs.previous {
                self.state.gp_windows[o].update_window(s, v)?;
            }
            let model = GpModel::fit_with(&self.state.gp_windows[o], &self.hypers, EmptyWindowPolicy::PriorFallback)?;
            let start = GaussianBelief::deterministic(&obs.state);
            let beliefs = propagate_horizon(&start, &model, k_h, self.cfg.obstacle_sample_time)?;
            let mut per_step = Vec::with_capacity(k_h);
            let mut mean_path = Vec::with_capacity(k_h);
            for (idx, belief) in beliefs.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.state.stage, o, idx + 1));
                let draws: Vec<DVector<f64>> = sample_states_with(belief, n, &mut rng);
                let step: Result<Vec<_>> = draws
                    .iter()
                    .map(|d| normalized_halfspaces(&polytope_from_state(&obs.geometry, d.as_slice())))
                    .collect();
                per_step.push(step?);
                mean_path.push(obs.geometry.center(belief.mean.as_slice()));
            }
            samples.push(per_step);
            means.push(mean_path);
        }
        Ok((samples, means))
    }

    /// One stage: predict, assemble, solve, return the first control.
    pub fn step(
        &mut self,
        xi: &VehicleState,
        obstacles: &[ObstacleObservation],
        reference: &[[f64; 2]],
    ) -> Result<StepOutput> {
        let (samples, predicted_obstacles) = self.predict_obstacles(obstacles)?;
        let k_h = self.cfg.horizon;
        let shape = ProblemShape {
            horizon: k_h,
            obstacles: obstacles.len(),
            samples: self.cfg.risk.n_samples,
            faces: samples.first().and_then(|s| s.first()).and_then(|s| s.first()).map_or(0, |s| s.num_faces()),
        };
        let warm = self
            .state
            .previous_solution
            .as_ref()
            .and_then(|p| warm_start(p, shape, xi));
        let warm_started = warm.is_some();
        let guess = warm.unwrap_or_else(|| {
            let v = if reference.len() > 1 {
                let d = ((reference[1][0] - reference[0][0]).powi(2) + (reference[1][1] - reference[0][1]).powi(2)).sqrt();
                (d / self.cfg.sample_time).clamp(self.params.v_min, self.params.v_max)
            } else {
                0.0
            };
            InitialGuess::rollout(xi, [v, 0.0], &self.cfg, &self.params)
        });
        let mpc = build_mpc(self.cfg.controller, xi, &samples, reference, &self.cfg, &self.params, &guess)?;
        let sol = self.solver.solve(&mpc.problem);
        let stage = self.state.stage;
        self.state.stage += 1;

        let optimal = sol.status.is_optimal();
        let risk_lhs = if optimal {
            mpc.risk_lhs(&sol.x, &self.cfg.risk)
        } else {
            Vec::new()
        };
        let control = if optimal {
            self.state.previous_solution = Some(PreviousSolution {
                u: (0..k_h).map(|k| mpc.control(&sol.x, k)).collect(),
                xi: (0..=k_h).map(|k| mpc.state(&sol.x, k)).collect(),
                shape: mpc.shape(),
            });
            mpc.control(&sol.x, 0)
        } else {
            self.state.previous_solution = None;
            if self.cfg.fallback == FallbackMode::Strict {
                return Err(Error::ControllerAbort {
                    stage,
                    status: sol.status,
                });
            }
            log::warn!("stage {stage}: solver returned {}, braking", sol.status);
            [0.0, 0.0]
        };
        Ok(StepOutput {
            control,
            diagnostics: StepDiagnostics {
                status: sol.status,
                objective: sol.objective,
                iterations: sol.iterations,
                solve_time: sol.wall_time,
                risk_lhs,
                warm_started,
                fallback: !optimal,
                predicted_obstacles,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlp::{check_derivatives, check_hessians};
    use rand::Rng;

    pub(crate) fn test_config(k: usize, n: usize) -> MpcConfig {
        MpcConfig {
            horizon: k,
            sample_time: 0.01,
            obstacle_sample_time: 0.01,
            q: [[1.0, 0.0], [0.0, 1.0]],
            r: [[0.01, 0.0], [0.0, 0.01]],
            p: [[1.0, 0.0], [0.0, 1.0]],
            risk: RiskSpec {
                alpha: 0.95,
                delta: 0.01,
                theta: 5e-5,
                n_samples: n,
            },
            window: 20,
            controller: ControllerKind::Drmpc,
            fallback: FallbackMode::Brake,
            zero_fill_window: false,
            solver: SolverOptions::default(),
        }
    }

    #[test]
    fn perfect_tracking_costs_nothing() {
        let cfg = test_config(3, 5);
        let ys = vec![[1.0, 2.0]; 4];
        assert_eq!(horizon_cost(&ys, &[[0.0, 0.0]; 3], &ys, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn unit_error_at_one_step_costs_one() {
        let cfg = test_config(3, 5);
        let refs = vec![[0.0, 0.0]; 4];
        let mut ys = refs.clone();
        ys[1] = [0.0, 1.0];
        assert_eq!(horizon_cost(&ys, &[[0.0, 0.0]; 3], &refs, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn slip_rate_derivatives() {
        let p = VehicleParams::default();
        for delta in [-0.5, -0.1, 0.0, 0.2, 0.52] {
            let h = 1e-6;
            let (_, g1, g2) = slip_rate(delta, &p);
            let fd1 = (slip_rate(delta + h, &p).0 - slip_rate(delta - h, &p).0) / (2.0 * h);
            let fd2 = (slip_rate(delta + h, &p).1 - slip_rate(delta - h, &p).1) / (2.0 * h);
            assert!((g1 - fd1).abs() < 1e-8);
            assert!((g2 - fd2).abs() < 1e-7);
        }
    }

    #[test]
    fn full_problem_derivatives() {
        let cfg = test_config(3, 4);
        let params = VehicleParams::default();
        let xi = VehicleState::new(1.0, -2.0, 0.3, 0.05);
        let geom = ObstacleGeometry::new(1.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: HorizonSamples = vec![(0..3)
            .map(|_| {
                (0..4)
                    .map(|_| {
                        let s = [3.0 + rng.random::<f64>(), -2.0 + rng.random::<f64>(), rng.random::<f64>()];
                        normalized_halfspaces(&polytope_from_state(&geom, &s)).unwrap()
                    })
                    .collect()
            })
            .collect()];
        let reference: Vec<[f64; 2]> = (0..4).map(|k| [1.0 + 0.05 * k as f64, -2.0]).collect();
        let guess = InitialGuess::rollout(&xi, [5.0, 0.1], &cfg, &params);
        let mpc = build_drmpc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap();
        let p = &mpc.problem;
        for _ in 0..3 {
            let x: Vec<f64> = (0..p.num_vars()).map(|_| rng.random_range(0.05..1.0)).collect();
            assert!(check_derivatives(p, &x) < 1e-6);
            let w: Vec<f64> = (0..p.num_constraints()).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!(check_hessians(p, &x, &w) < 1e-5);
        }
    }

    #[test]
    fn variable_count_matches_hand_count() {
        let (k, n, m) = (5, 10, 4);
        let cfg = test_config(k, n);
        let params = VehicleParams::default();
        let xi = VehicleState::new(0.0, 0.0, 0.0, 0.0);
        let geom = ObstacleGeometry::new(1.0, 0.5);
        let one = normalized_halfspaces(&polytope_from_state(&geom, &[5.0, 0.0, 0.0])).unwrap();
        let samples: HorizonSamples = vec![vec![vec![one; n]; k]];
        let reference = vec![[0.0, 0.0]; k + 1];
        let guess = InitialGuess::rollout(&xi, [0.0, 0.0], &cfg, &params);
        let mpc = build_drmpc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap();
        assert_eq!(mpc.problem.num_vars(), k * NU + (k + 1) * (NXI + NY) + k * (1 + 1 + n + n * m));
    }

    #[test]
    fn warm_start_shifts_and_repeats() {
        let prev = PreviousSolution {
            u: vec![[1.0, 0.1], [2.0, 0.2], [3.0, 0.3]],
            xi: (0..4).map(|k| [k as f64, 0.0, 0.0, 0.0]).collect(),
            shape: ProblemShape {
                horizon: 3,
                obstacles: 1,
                samples: 5,
                faces: 4,
            },
        };
        let g = warm_start(&prev, prev.shape, &VehicleState::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(g.u, vec![[2.0, 0.2], [3.0, 0.3], [3.0, 0.3]]);
        assert_eq!(g.xi[0][0], 1.0);
        assert_eq!(g.xi[3][0], 3.0);
        let other = ProblemShape { samples: 6, ..prev.shape };
        assert!(warm_start(&prev, other, &VehicleState::new(1.0, 0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn wrapped_heading_is_unwrapped_for_warm_start() {
        let prev = PreviousSolution {
            u: vec![[1.0, 0.0]; 2],
            xi: vec![[0.0, 0.0, PI - 0.01, 0.0], [0.0, 0.0, PI + 0.01, 0.0], [0.0, 0.0, PI + 0.03, 0.0]],
            shape: ProblemShape {
                horizon: 2,
                obstacles: 0,
                samples: 5,
                faces: 0,
            },
        };
        let now = VehicleState::new(0.0, 0.0, -PI + 0.01, 0.0);
        let g = warm_start(&prev, prev.shape, &now).unwrap();
        assert!((g.xi[0][2] - now.theta).abs() < 1e-12);
        assert!((g.xi[1][2] - (-PI + 0.03)).abs() < 1e-12);
    }
}
