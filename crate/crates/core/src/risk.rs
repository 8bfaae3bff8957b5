//! Loss of safety, empirical CVaR, and the sample-average and
//! distributionally robust CVaR risk constraints.
//!
//! Both constraints are expressed as NLP blocks over per-sample variables
//! `z`, `s`, `ρ` (and `λ` for the robust version), with the robot position
//! either fixed or a decision variable.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nlp::{
    assemble, AffineMap, Block, ConstraintKind, FunctionBlock, SmoothMap, Solver, SolverOptions, VarBlock,
};
use crate::predict::{NormalizedHalfspaceSample, ObstaclePolytope};

/// Upper bound placed on the scaled multiplier `ν`; keeps the program
/// bounded when `θ = 0`.
pub const NU_CAP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    /// CVaR confidence level.
    pub alpha: f64,
    /// Risk tolerance.
    pub delta: f64,
    /// Wasserstein ambiguity radius.
    pub theta: f64,
    pub n_samples: usize,
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.delta >= 0.0) || !self.delta.is_finite() {
            return invalid(format!("delta must be finite and >= 0, got {}", self.delta));
        }
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return invalid(format!("theta must be finite and >= 0, got {}", self.theta));
        }
        if self.n_samples == 0 {
            return invalid("n_samples must be at least 1");
        }
        Ok(())
    }
}

/// Distance from `y` to the complement of the open polytope interior.
pub fn distance_to_safe_region(y: &[f64], poly: &ObstaclePolytope) -> f64 {
    let mut best = f64::INFINITY;
    for j in 0..poly.num_faces() {
        let row = poly.g_mat.row(j);
        let gy: f64 = (0..poly.dim()).map(|l| row[l] * y[l]).sum();
        best = best.min((poly.g_vec[j] - gy).max(0.0) / row.norm());
    }
    best
}

/// `min_z z + mean((ℓ - z)⁺)/(1 - α)`, evaluated with the order statistics.
pub fn cvar_empirical(losses: &[f64], alpha: f64) -> Result<f64> {
    if losses.is_empty() {
        return invalid("CVaR of an empty sample");
    }
    if !(0.0..1.0).contains(&alpha) {
        return invalid(format!("alpha must lie in [0, 1), got {alpha}"));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let budget = (1.0 - alpha) * sorted.len() as f64;
    let mut remaining = budget;
    let mut acc = 0.0;
    for &l in &sorted {
        let w = remaining.min(1.0);
        acc += w * l;
        remaining -= w;
        if remaining <= 0.0 {
            break;
        }
    }
    Ok(acc / budget)
}

/// Empirical value-at-risk matching [`cvar_empirical`]: a minimizer `z`.
pub fn var_empirical(losses: &[f64], alpha: f64) -> Result<f64> {
    if losses.is_empty() {
        return invalid("VaR of an empty sample");
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let budget = (1.0 - alpha) * sorted.len() as f64;
    let k = (budget.ceil() as usize).clamp(1, sorted.len()) - 1;
    Ok(sorted[k])
}

/// Sample-average CVaR of the loss of safety at `y`.
pub fn saa_risk(samples: &[NormalizedHalfspaceSample], y: &[f64], alpha: f64) -> Result<f64> {
    let losses: Vec<f64> = samples.iter().map(|s| s.loss(y)).collect();
    cvar_empirical(&losses, alpha)
}

/// Which risk constraint a block encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskKind {
    /// Wasserstein distributionally robust CVaR bound.
    DistributionallyRobust,
    /// Sample-average CVaR.
    SampleAverage,
}

/// Robot position inside a risk block.
#[derive(Debug, Clone, PartialEq)]
pub enum YSource {
    Fixed(Vec<f64>),
    /// Variable block `name` of dimension `dim`.
    Variable { name: String, dim: usize },
}

/// Per-sample face data shared by the nonlinear maps.
#[derive(Debug, Clone)]
struct Faces {
    n: usize,
    m: usize,
    ny: usize,
    /// `c[(i*m + j)*ny + l]`
    c: Vec<f64>,
    /// `d[i*m + j]`
    d: Vec<f64>,
}

impl Faces {
    fn new(samples: &[NormalizedHalfspaceSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return invalid("risk block needs at least one sample");
        };
        let (m, ny) = (first.num_faces(), first.dim());
        let mut c = Vec::with_capacity(samples.len() * m * ny);
        let mut d = Vec::with_capacity(samples.len() * m);
        for s in samples {
            if s.num_faces() != m || s.dim() != ny {
                return invalid("all samples must have the same number of faces and dimension");
            }
            for j in 0..m {
                for l in 0..ny {
                    c.push(s.c[(j, l)]);
                }
                d.push(s.d[j]);
            }
        }
        Ok(Self {
            n: samples.len(),
            m,
            ny,
            c,
            d,
        })
    }

    fn face_value(&self, i: usize, j: usize, y: &[f64]) -> f64 {
        let base = (i * self.m + j) * self.ny;
        self.d[i * self.m + j] + (0..self.ny).map(|l| self.c[base + l] * y[l]).sum::<f64>()
    }
}

/// `out_i = s_i + z - Σ_j ρ_ij (c_ij·y + d_ij)`, inputs `[y?, z, s, ρ]`.
struct SampleMap {
    faces: Faces,
    y_fixed: Option<Vec<f64>>,
}

impl SampleMap {
    fn nyv(&self) -> usize {
        if self.y_fixed.is_some() {
            0
        } else {
            self.faces.ny
        }
    }

    fn y<'a>(&'a self, x: &'a [f64]) -> &'a [f64] {
        match &self.y_fixed {
            Some(y) => y,
            None => &x[..self.faces.ny],
        }
    }
}

impl SmoothMap for SampleMap {
    fn input_dim(&self) -> usize {
        self.nyv() + 1 + self.faces.n * (1 + self.faces.m)
    }

    fn output_dim(&self) -> usize {
        self.faces.n
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let (n, m) = (self.faces.n, self.faces.m);
        let oz = self.nyv();
        let (os, orho) = (oz + 1, oz + 1 + n);
        let y = self.y(x);
        for i in 0..n {
            let mut v = x[os + i] + x[oz];
            for j in 0..m {
                v -= x[orho + i * m + j] * self.faces.face_value(i, j, y);
            }
            out[i] = v;
        }
    }

    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let (n, m) = (self.faces.n, self.faces.m);
        let oz = self.nyv();
        let (os, orho) = (oz + 1, oz + 1 + n);
        let mut p = Vec::new();
        for i in 0..n {
            p.push((i, oz));
            p.push((i, os + i));
            for j in 0..m {
                p.push((i, orho + i * m + j));
            }
            for l in 0..self.nyv() {
                p.push((i, l));
            }
        }
        p
    }

    fn jacobian(&self, x: &[f64], vals: &mut [f64]) {
        let (n, m, ny) = (self.faces.n, self.faces.m, self.faces.ny);
        let orho = self.nyv() + 1 + n;
        let y = self.y(x);
        let mut k = 0;
        for i in 0..n {
            vals[k] = 1.0;
            vals[k + 1] = 1.0;
            k += 2;
            for j in 0..m {
                vals[k] = -self.faces.face_value(i, j, y);
                k += 1;
            }
            for l in 0..self.nyv() {
                let mut g = 0.0;
                for j in 0..m {
                    g -= x[orho + i * m + j] * self.faces.c[(i * m + j) * ny + l];
                }
                vals[k] = g;
                k += 1;
            }
        }
    }

    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let (n, m) = (self.faces.n, self.faces.m);
        let orho = self.nyv() + 1 + n;
        let mut p = Vec::new();
        for i in 0..n {
            for j in 0..m {
                for l in 0..self.nyv() {
                    p.push((orho + i * m + j, l));
                }
            }
        }
        p
    }

    fn hessian(&self, _x: &[f64], w: &[f64], vals: &mut [f64]) {
        let (n, m, ny) = (self.faces.n, self.faces.m, self.faces.ny);
        let mut k = 0;
        for i in 0..n {
            for j in 0..m {
                for l in 0..self.nyv() {
                    vals[k] = -w[i] * self.faces.c[(i * m + j) * ny + l];
                    k += 1;
                }
            }
        }
    }
}

/// `sqrt(‖y‖² + n_y)`, the factor between `ν` and the robust multiplier `λ`.
pub fn lipschitz_scale(y: &[f64]) -> f64 {
    (y.iter().map(|v| v * v).sum::<f64>() + y.len() as f64).sqrt()
}

/// `out_i = ν - ‖ρ_i‖`, inputs `[ν, ρ]`. The robust multiplier is
/// `λ = sqrt(‖y‖² + n_y) ν`, which keeps `y` out of these rows.
struct NormMap {
    n: usize,
    m: usize,
}

impl NormMap {
    fn rho_norm(&self, x: &[f64], i: usize) -> f64 {
        x[1 + i * self.m..1 + (i + 1) * self.m]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE)
    }
}

impl SmoothMap for NormMap {
    fn input_dim(&self) -> usize {
        1 + self.n * self.m
    }

    fn output_dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            out[i] = x[0] - self.rho_norm(x, i);
        }
    }

    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        let mut p = Vec::new();
        for i in 0..self.n {
            p.push((i, 0));
            for j in 0..self.m {
                p.push((i, 1 + i * self.m + j));
            }
        }
        p
    }

    fn jacobian(&self, x: &[f64], vals: &mut [f64]) {
        let mut k = 0;
        for i in 0..self.n {
            let r = self.rho_norm(x, i);
            vals[k] = 1.0;
            k += 1;
            for j in 0..self.m {
                vals[k] = -x[1 + i * self.m + j] / r;
                k += 1;
            }
        }
    }

    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let mut p = Vec::new();
        for i in 0..self.n {
            for j1 in 0..self.m {
                for j2 in 0..=j1 {
                    p.push((1 + i * self.m + j1, 1 + i * self.m + j2));
                }
            }
        }
        p
    }

    fn hessian(&self, x: &[f64], w: &[f64], vals: &mut [f64]) {
        let mut k = 0;
        for i in 0..self.n {
            let r = self.rho_norm(x, i);
            let rho = &x[1 + i * self.m..1 + (i + 1) * self.m];
            for j1 in 0..self.m {
                for j2 in 0..=j1 {
                    let delta = if j1 == j2 { 1.0 / r } else { 0.0 };
                    vals[k] = -w[i] * (delta - rho[j1] * rho[j2] / (r * r * r));
                    k += 1;
                }
            }
        }
    }
}

/// Robust budget row with a variable position,
/// `out = sign (z + (θ a(y) ν + mean(s))/(1 - α)) + offset`, inputs `[y, z, ν, s]`.
struct RobustBudgetMap {
    n: usize,
    ny: usize,
    /// `θ/(1 - α)`
    theta_scale: f64,
    scale: f64,
    sign: f64,
    offset: f64,
}

impl SmoothMap for RobustBudgetMap {
    fn input_dim(&self) -> usize {
        self.ny + 2 + self.n
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let ny = self.ny;
        let a = lipschitz_scale(&x[..ny]);
        let mean_s = x[ny + 2..].iter().sum::<f64>() / self.n as f64;
        out[0] = self.sign * (x[ny] + self.theta_scale * a * x[ny + 1] + self.scale * mean_s) + self.offset;
    }

    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        (0..self.input_dim()).map(|c| (0, c)).collect()
    }

    fn jacobian(&self, x: &[f64], vals: &mut [f64]) {
        let ny = self.ny;
        let y = &x[..ny];
        let a = lipschitz_scale(y);
        let nu = x[ny + 1];
        for l in 0..ny {
            vals[l] = self.sign * self.theta_scale * nu * y[l] / a;
        }
        vals[ny] = self.sign;
        vals[ny + 1] = self.sign * self.theta_scale * a;
        for i in 0..self.n {
            vals[ny + 2 + i] = self.sign * self.scale / self.n as f64;
        }
    }

    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let ny = self.ny;
        let mut p = Vec::new();
        for l1 in 0..ny {
            for l2 in 0..=l1 {
                p.push((l1, l2));
            }
        }
        for l in 0..ny {
            p.push((ny + 1, l));
        }
        p
    }

    fn hessian(&self, x: &[f64], w: &[f64], vals: &mut [f64]) {
        let ny = self.ny;
        let y = &x[..ny];
        let a = lipschitz_scale(y);
        let nu = x[ny + 1];
        let c = w[0] * self.sign * self.theta_scale;
        let mut k = 0;
        for l1 in 0..ny {
            for l2 in 0..=l1 {
                let delta = if l1 == l2 { 1.0 / a } else { 0.0 };
                vals[k] = c * nu * (delta - y[l1] * y[l2] / (a * a * a));
                k += 1;
            }
        }
        for l in 0..ny {
            vals[k] = c * y[l] / a;
            k += 1;
        }
    }
}

/// Starting values for the variables of one risk block.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskInit {
    pub z: f64,
    /// Scaled robust multiplier, `λ / sqrt(‖y‖² + n_y)`.
    pub nu: f64,
    pub s: Vec<f64>,
    /// Row-major `N × m`.
    pub rho: Vec<f64>,
}

/// The sample-average optimal point at `y`: `z` at the empirical VaR, each
/// `ρ_i` uniform over the faces attaining the minimum, `s` at the smallest
/// feasible values and `ν` at the smallest value the norm constraint allows.
pub fn saa_initial_point(samples: &[NormalizedHalfspaceSample], y: &[f64], alpha: f64) -> Result<RiskInit> {
    let faces = Faces::new(samples)?;
    let (n, m) = (faces.n, faces.m);
    let mut mins = Vec::with_capacity(n);
    let mut rho = vec![0.0; n * m];
    for i in 0..n {
        let vals: Vec<f64> = (0..m).map(|j| faces.face_value(i, j, y)).collect();
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let tie = 1e-12 * (1.0 + min.abs());
        let arg: Vec<usize> = (0..m).filter(|&j| vals[j] <= min + tie).collect();
        for &j in &arg {
            rho[i * m + j] = 1.0 / arg.len() as f64;
        }
        mins.push(min);
    }
    let losses: Vec<f64> = mins.iter().map(|v| v.max(0.0)).collect();
    let z = var_empirical(&losses, alpha)?;
    let s = mins.iter().map(|&v| (v - z).max(-z).max(0.0)).collect();
    let max_norm = (0..n)
        .map(|i| rho[i * m..(i + 1) * m].iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    Ok(RiskInit {
        z,
        nu: max_norm,
        s,
        rho,
    })
}

/// Left-hand side of the budget constraint,
/// `z + (λθ + mean(s))/(1 - α)` (the `λθ` term only for the robust kind).
pub fn budget_lhs(kind: RiskKind, spec: &RiskSpec, z: f64, lambda: f64, s: &[f64]) -> f64 {
    let mean_s = s.iter().sum::<f64>() / s.len() as f64;
    let lam = if kind == RiskKind::DistributionallyRobust {
        lambda * spec.theta
    } else {
        0.0
    };
    z + (lam + mean_s) / (1.0 - spec.alpha)
}

/// Variables and constraints of one risk constraint instance.
pub struct RiskBlock {
    pub kind: RiskKind,
    pub prefix: String,
    pub n_samples: usize,
    pub n_faces: usize,
    pub variables: Vec<VarBlock>,
    pub constraints: Vec<(ConstraintKind, FunctionBlock)>,
}

impl RiskBlock {
    pub fn z_name(&self) -> String {
        format!("{}.z", self.prefix)
    }

    pub fn nu_name(&self) -> String {
        format!("{}.nu", self.prefix)
    }

    pub fn s_name(&self) -> String {
        format!("{}.s", self.prefix)
    }

    pub fn rho_name(&self) -> String {
        format!("{}.rho", self.prefix)
    }

    pub fn budget_name(&self) -> String {
        format!("{}.budget", self.prefix)
    }

    pub fn num_variables(&self) -> usize {
        self.variables.iter().map(|v| v.dim()).sum()
    }

    /// `(equality rows, inequality rows)`
    pub fn num_constraint_rows(&self) -> (usize, usize) {
        let mut eq = 0;
        let mut ineq = 0;
        for (k, f) in &self.constraints {
            match k {
                ConstraintKind::Equality => eq += f.map.output_dim(),
                ConstraintKind::Inequality => ineq += f.map.output_dim(),
            }
        }
        (eq, ineq)
    }

    /// Names of the variable blocks the budget left-hand side reads.
    fn lhs_vars(&self) -> Vec<String> {
        match self.kind {
            RiskKind::DistributionallyRobust => vec![self.z_name(), self.nu_name(), self.s_name()],
            RiskKind::SampleAverage => vec![self.z_name(), self.s_name()],
        }
    }

    pub fn into_blocks(self) -> Vec<Block> {
        let mut out: Vec<Block> = self.variables.into_iter().map(Block::Variables).collect();
        out.extend(self.constraints.into_iter().map(|(k, f)| Block::Constraint(k, f)));
        out
    }
}

/// Affine map `[z, ν?, s] -> budget left-hand side` at a fixed position
/// with scale `a = sqrt(‖y‖² + n_y)`.
fn lhs_map(kind: RiskKind, spec: &RiskSpec, n: usize, a: f64, offset: f64, sign: f64) -> AffineMap {
    let scale = 1.0 / (1.0 - spec.alpha);
    let mut entries = vec![(0, 0, sign)];
    let os = match kind {
        RiskKind::DistributionallyRobust => {
            entries.push((0, 1, sign * spec.theta * a * scale));
            2
        }
        RiskKind::SampleAverage => 1,
    };
    for i in 0..n {
        entries.push((0, os + i, sign * scale / n as f64));
    }
    AffineMap::new(os + n, vec![offset], entries)
}

/// Variables `z, ν, s, ρ` (with `λ = sqrt(‖y‖² + n_y)·ν`) and the constraints that make
/// `z + (λθ + mean(s))/(1 - α) <= δ` imply the robust CVaR bound at `y`.
pub fn build_dr_constraint_block(
    samples: &[NormalizedHalfspaceSample],
    spec: &RiskSpec,
    prefix: &str,
    y: &YSource,
    init: &RiskInit,
) -> Result<RiskBlock> {
    build_block(RiskKind::DistributionallyRobust, samples, spec, prefix, y, init, true)
}

/// Sample-average counterpart of [`build_dr_constraint_block`]: no `λ` and no
/// norm constraint.
pub fn build_saa_constraint_block(
    samples: &[NormalizedHalfspaceSample],
    spec: &RiskSpec,
    prefix: &str,
    y: &YSource,
    init: &RiskInit,
) -> Result<RiskBlock> {
    build_block(RiskKind::SampleAverage, samples, spec, prefix, y, init, true)
}

pub fn build_risk_block(
    kind: RiskKind,
    samples: &[NormalizedHalfspaceSample],
    spec: &RiskSpec,
    prefix: &str,
    y: &YSource,
    init: &RiskInit,
) -> Result<RiskBlock> {
    build_block(kind, samples, spec, prefix, y, init, true)
}

fn build_block(
    kind: RiskKind,
    samples: &[NormalizedHalfspaceSample],
    spec: &RiskSpec,
    prefix: &str,
    y: &YSource,
    init: &RiskInit,
    with_budget: bool,
) -> Result<RiskBlock> {
    spec.validate()?;
    let faces = Faces::new(samples)?;
    let (n, m, ny) = (faces.n, faces.m, faces.ny);
    match y {
        YSource::Fixed(v) if v.len() != ny => return invalid("fixed position has the wrong dimension"),
        YSource::Variable { dim, .. } if *dim != ny => return invalid("position block has the wrong dimension"),
        _ => {}
    }
    if init.s.len() != n || init.rho.len() != n * m {
        return invalid("risk initial point does not match the sample shape");
    }
    let y_fixed = match y {
        YSource::Fixed(v) => Some(v.clone()),
        YSource::Variable { .. } => None,
    };
    let mut blk = RiskBlock {
        kind,
        prefix: prefix.to_string(),
        n_samples: n,
        n_faces: m,
        variables: Vec::new(),
        constraints: Vec::new(),
    };
    let (zn, ln, sn, rn) = (blk.z_name(), blk.nu_name(), blk.s_name(), blk.rho_name());

    blk.variables.push(VarBlock::free(zn.clone(), vec![init.z]));
    if kind == RiskKind::DistributionallyRobust {
        blk.variables
            .push(VarBlock::bounded(ln.clone(), vec![0.0], vec![NU_CAP], vec![init.nu.min(NU_CAP)]));
    }
    blk.variables
        .push(VarBlock::bounded(sn.clone(), vec![0.0; n], vec![f64::INFINITY; n], init.s.clone()));
    blk.variables
        .push(VarBlock::bounded(rn.clone(), vec![0.0; n * m], vec![f64::INFINITY; n * m], init.rho.clone()));

    let with_y = |rest: &[&str]| -> Vec<String> {
        let mut v = Vec::new();
        if let YSource::Variable { name, .. } = y {
            v.push(name.clone());
        }
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    };

    if with_budget {
        let vars = blk.lhs_vars();
        let budget = match (kind, y) {
            (RiskKind::DistributionallyRobust, YSource::Variable { name, .. }) => FunctionBlock {
                name: blk.budget_name(),
                vars: std::iter::once(name.clone()).chain(vars).collect(),
                map: Box::new(RobustBudgetMap {
                    n,
                    ny,
                    theta_scale: spec.theta / (1.0 - spec.alpha),
                    scale: 1.0 / (1.0 - spec.alpha),
                    sign: -1.0,
                    offset: spec.delta,
                }),
            },
            (_, y) => {
                let a = match y {
                    YSource::Fixed(v) => lipschitz_scale(v),
                    YSource::Variable { .. } => 0.0,
                };
                let vars: Vec<&str> = vars.iter().map(String::as_str).collect();
                FunctionBlock::new(blk.budget_name(), &vars, lhs_map(kind, spec, n, a, spec.delta, -1.0))
            }
        };
        blk.constraints.push((ConstraintKind::Inequality, budget));
    }
    blk.constraints.push((
        ConstraintKind::Inequality,
        FunctionBlock {
            name: format!("{prefix}.sample"),
            vars: with_y(&[&zn, &sn, &rn]),
            map: Box::new(SampleMap {
                faces: faces.clone(),
                y_fixed: y_fixed.clone(),
            }),
        },
    ));
    // s_i + z >= 0
    let hinge: Vec<(usize, usize, f64)> = (0..n).flat_map(|i| [(i, 0, 1.0), (i, 1 + i, 1.0)]).collect();
    blk.constraints.push((
        ConstraintKind::Inequality,
        FunctionBlock::new(format!("{prefix}.hinge"), &[&zn, &sn], AffineMap::new(1 + n, vec![0.0; n], hinge)),
    ));
    let simplex: Vec<(usize, usize, f64)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, i * m + j, 1.0))).collect();
    blk.constraints.push((
        ConstraintKind::Equality,
        FunctionBlock::new(format!("{prefix}.simplex"), &[&rn], AffineMap::new(n * m, vec![-1.0; n], simplex)),
    ));
    if kind == RiskKind::DistributionallyRobust {
        blk.constraints.push((
            ConstraintKind::Inequality,
            FunctionBlock {
                name: format!("{prefix}.norm"),
                vars: vec![ln.clone(), rn.clone()],
                map: Box::new(NormMap { n, m }),
            },
        ));
    }
    Ok(blk)
}

/// Minimum of the budget left-hand side over the block variables at a fixed
/// `y`, using the interior-point solver from a few starting points.
fn minimize_lhs(kind: RiskKind, samples: &[NormalizedHalfspaceSample], y: &[f64], spec: &RiskSpec) -> Result<f64> {
    let faces = Faces::new(samples)?;
    if y.len() != faces.ny {
        return invalid("position has the wrong dimension");
    }
    let (n, m) = (faces.n, faces.m);
    let base = saa_initial_point(samples, y, spec.alpha)?;
    let a = lipschitz_scale(y);
    let uniform = {
        let rho = vec![1.0 / m as f64; n * m];
        let vals: Vec<f64> = (0..n)
            .map(|i| (0..m).map(|j| faces.face_value(i, j, y)).sum::<f64>() / m as f64)
            .collect();
        RiskInit {
            z: base.z,
            nu: 1.0 / (m as f64).sqrt(),
            s: vals.iter().map(|v| (v - base.z).max(0.0)).collect(),
            rho,
        }
    };
    let zero_z = {
        let losses: Vec<f64> = samples.iter().map(|s| s.loss(y)).collect();
        RiskInit {
            z: 0.0,
            s: losses,
            ..base.clone()
        }
    };

    let opts = SolverOptions {
        tol: 1e-9,
        feas_tol: 1e-9,
        max_iter: 300,
        ..SolverOptions::default()
    };
    let mut solver = Solver::new(opts);
    let mut best: Option<f64> = None;
    let mut last_status = None;
    for init in [base, uniform, zero_z] {
        let blk = build_block(kind, samples, spec, "risk", &YSource::Fixed(y.to_vec()), &init, false)?;
        let vars = blk.lhs_vars();
        let vars: Vec<&str> = vars.iter().map(String::as_str).collect();
        let objective = FunctionBlock::new("lhs", &vars, lhs_map(kind, spec, n, a, 0.0, 1.0));
        let mut blocks = blk.into_blocks();
        blocks.push(Block::Objective(objective));
        let problem = assemble(blocks)?;
        let sol = solver.solve(&problem);
        last_status = Some(sol.status);
        if sol.status.is_optimal() {
            best = Some(best.map_or(sol.objective, |b: f64| b.min(sol.objective)));
        }
    }
    best.ok_or_else(|| {
        Error::NumericFailure(format!(
            "risk bound solve failed: {}",
            last_status.map(|s| s.as_str()).unwrap_or("no attempt")
        ))
    })
}

/// Distributionally robust CVaR upper bound at a fixed position `y`.
pub fn dr_cvar_upper_bound(samples: &[NormalizedHalfspaceSample], y: &[f64], spec: &RiskSpec) -> Result<f64> {
    spec.validate()?;
    minimize_lhs(RiskKind::DistributionallyRobust, samples, y, spec)
}

/// Sample-average CVaR at a fixed `y` through the same block formulation.
/// Agrees with [`saa_risk`]; useful as a check of the block.
pub fn saa_block_value(samples: &[NormalizedHalfspaceSample], y: &[f64], spec: &RiskSpec) -> Result<f64> {
    spec.validate()?;
    minimize_lhs(RiskKind::SampleAverage, samples, y, spec)
}
