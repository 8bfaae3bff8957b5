use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{invalid, Result};

/// A smooth vector function of a local input vector, with sparse first and
/// second derivatives.
///
/// Local inputs are the concatenation of the variable blocks the component
/// references, in the order it lists them.
pub trait SmoothMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &[f64], out: &mut [f64]);
    /// `(output, input)` positions of the Jacobian nonzeros.
    fn jacobian_pattern(&self) -> Vec<(usize, usize)>;
    /// Jacobian values in `jacobian_pattern` order.
    fn jacobian(&self, x: &[f64], vals: &mut [f64]);
    /// Lower-triangle `(i, j)`, `i >= j`, positions of `Σ_k w_k ∇² out_k`.
    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }
    fn hessian(&self, _x: &[f64], _weights: &[f64], _vals: &mut [f64]) {}
}

/// `out = A x + b` with `A` given as triplets.
#[derive(Debug, Clone)]
pub struct AffineMap {
    input_dim: usize,
    offset: Vec<f64>,
    entries: Vec<(usize, usize, f64)>,
}

impl AffineMap {
    pub fn new(input_dim: usize, offset: Vec<f64>, entries: Vec<(usize, usize, f64)>) -> Self {
        Self {
            input_dim,
            offset,
            entries,
        }
    }
}

impl SmoothMap for AffineMap {
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn output_dim(&self) -> usize {
        self.offset.len()
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.offset);
        for &(r, c, v) in &self.entries {
            out[r] += v * x[c];
        }
    }
    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        self.entries.iter().map(|&(r, c, _)| (r, c)).collect()
    }
    fn jacobian(&self, _x: &[f64], vals: &mut [f64]) {
        for (v, e) in vals.iter_mut().zip(&self.entries) {
            *v = e.2;
        }
    }
}

/// Box-bounded block of decision variables.
#[derive(Debug, Clone)]
pub struct VarBlock {
    pub name: String,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub init: Vec<f64>,
}

impl VarBlock {
    pub fn free(name: impl Into<String>, init: Vec<f64>) -> Self {
        let n = init.len();
        Self {
            name: name.into(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            init,
        }
    }

    pub fn bounded(name: impl Into<String>, lower: Vec<f64>, upper: Vec<f64>, init: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            lower,
            upper,
            init,
        }
    }

    pub fn dim(&self) -> usize {
        self.init.len()
    }
}

/// Objective term or constraint over named variable blocks.
pub struct FunctionBlock {
    pub name: String,
    pub vars: Vec<String>,
    pub map: Box<dyn SmoothMap>,
}

impl FunctionBlock {
    pub fn new(name: impl Into<String>, vars: &[&str], map: impl SmoothMap + 'static) -> Self {
        Self {
            name: name.into(),
            vars: vars.iter().map(|s| s.to_string()).collect(),
            map: Box::new(map),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    /// `c(x) = 0`
    Equality,
    /// `c(x) >= 0`
    Inequality,
}

pub enum Block {
    Variables(VarBlock),
    Objective(FunctionBlock),
    Constraint(ConstraintKind, FunctionBlock),
}

/// A component bound to global variable indices.
pub(crate) struct Bound {
    pub name: String,
    pub map: Box<dyn SmoothMap>,
    /// Local input index -> global variable index.
    pub index: Vec<usize>,
    /// First row of this component in the stacked constraint vector.
    pub row: usize,
    pub jac_pattern: Vec<(usize, usize)>,
    pub jac_offset: usize,
    pub hess_pattern: Vec<(usize, usize)>,
    pub hess_offset: usize,
}

impl Bound {
    fn gather(&self, x: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.index.iter().map(|&i| x[i]));
    }
}

/// Variable block metadata inside an assembled problem.
#[derive(Debug, Clone, PartialEq)]
pub struct VarInfo {
    pub name: String,
    pub range: Range<usize>,
}

/// A smooth nonlinear program
///
/// ```text
/// min  Σ objective terms
/// s.t. equality blocks   = 0
///      inequality blocks >= 0
///      lower <= x <= upper
/// ```
///
/// Constraint rows are stacked with all equality rows first.
pub struct NlProblem {
    vars: Vec<VarInfo>,
    by_name: HashMap<String, usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    init: Vec<f64>,
    objective: Vec<Bound>,
    constraints: Vec<Bound>,
    m_eq: usize,
    m_ineq: usize,
    jac_structure: Vec<(usize, usize)>,
    hess_structure: Vec<(usize, usize)>,
    n_obj_hess: usize,
}

/// Assembles variable and function blocks into an [`NlProblem`].
pub fn assemble(blocks: Vec<Block>) -> Result<NlProblem> {
    let mut vars = Vec::new();
    let mut by_name = HashMap::new();
    let (mut lower, mut upper, mut init) = (Vec::new(), Vec::new(), Vec::new());
    let mut objective_blocks = Vec::new();
    let mut eq_blocks = Vec::new();
    let mut ineq_blocks = Vec::new();
    for b in blocks {
        match b {
            Block::Variables(v) => {
                if by_name.contains_key(&v.name) {
                    return invalid(format!("duplicate variable block `{}`", v.name));
                }
                let n = v.dim();
                if v.lower.len() != n || v.upper.len() != n {
                    return invalid(format!("bounds of block `{}` do not match its dimension", v.name));
                }
                for i in 0..n {
                    if !(v.lower[i] < v.upper[i]) || v.init[i].is_nan() {
                        return invalid(format!(
                            "block `{}` entry {i}: need lower < upper and a finite start",
                            v.name
                        ));
                    }
                }
                let start = lower.len();
                lower.extend_from_slice(&v.lower);
                upper.extend_from_slice(&v.upper);
                init.extend_from_slice(&v.init);
                by_name.insert(v.name.clone(), vars.len());
                vars.push(VarInfo {
                    name: v.name,
                    range: start..start + n,
                });
            }
            Block::Objective(f) => objective_blocks.push(f),
            Block::Constraint(ConstraintKind::Equality, f) => eq_blocks.push(f),
            Block::Constraint(ConstraintKind::Inequality, f) => ineq_blocks.push(f),
        }
    }

    let mut seen = std::collections::HashSet::new();
    for f in objective_blocks.iter().chain(&eq_blocks).chain(&ineq_blocks) {
        if !seen.insert(f.name.clone()) {
            return invalid(format!("duplicate function block `{}`", f.name));
        }
    }

    let bind = |f: FunctionBlock, row: usize, jac_offset: usize, hess_offset: usize| -> Result<Bound> {
        let mut index = Vec::new();
        for v in &f.vars {
            let Some(&k) = by_name.get(v) else {
                return invalid(format!("block `{}` references unknown variables `{v}`", f.name));
            };
            index.extend(vars[k].range.clone());
        }
        if index.len() != f.map.input_dim() {
            return invalid(format!(
                "block `{}` expects {} inputs but its variables have {}",
                f.name,
                f.map.input_dim(),
                index.len()
            ));
        }
        let jac_pattern = f.map.jacobian_pattern();
        let hess_pattern = f.map.hessian_pattern();
        let (no, ni) = (f.map.output_dim(), f.map.input_dim());
        if jac_pattern.iter().any(|&(r, c)| r >= no || c >= ni) {
            return invalid(format!("block `{}` has a Jacobian entry out of range", f.name));
        }
        if hess_pattern.iter().any(|&(r, c)| r >= ni || c > r) {
            return invalid(format!("block `{}` has a Hessian entry outside the lower triangle", f.name));
        }
        Ok(Bound {
            name: f.name,
            map: f.map,
            index,
            row,
            jac_pattern,
            jac_offset,
            hess_pattern,
            hess_offset,
        })
    };

    let mut hess_structure = Vec::new();
    let mut objective = Vec::new();
    for f in objective_blocks {
        if f.map.output_dim() != 1 {
            return invalid(format!("objective block `{}` must be scalar", f.name));
        }
        let b = bind(f, 0, 0, hess_structure.len())?;
        push_hess(&b, &mut hess_structure);
        objective.push(b);
    }
    let n_obj_hess = hess_structure.len();

    let mut constraints = Vec::new();
    let mut jac_structure = Vec::new();
    let mut row = 0;
    let mut m_eq = 0;
    for (kind, list) in [(ConstraintKind::Equality, eq_blocks), (ConstraintKind::Inequality, ineq_blocks)] {
        for f in list {
            let rows = f.map.output_dim();
            let b = bind(f, row, jac_structure.len(), hess_structure.len())?;
            for &(r, c) in &b.jac_pattern {
                jac_structure.push((b.row + r, b.index[c]));
            }
            push_hess(&b, &mut hess_structure);
            row += rows;
            if kind == ConstraintKind::Equality {
                m_eq += rows;
            }
            constraints.push(b);
        }
    }

    Ok(NlProblem {
        vars,
        by_name,
        lower,
        upper,
        init,
        objective,
        constraints,
        m_eq,
        m_ineq: row - m_eq,
        jac_structure,
        hess_structure,
        n_obj_hess,
    })
}

fn push_hess(b: &Bound, out: &mut Vec<(usize, usize)>) {
    for &(i, j) in &b.hess_pattern {
        let (gi, gj) = (b.index[i], b.index[j]);
        out.push((gi.max(gj), gi.min(gj)));
    }
}

impl NlProblem {
    pub fn num_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn num_eq(&self) -> usize {
        self.m_eq
    }

    pub fn num_ineq(&self) -> usize {
        self.m_ineq
    }

    pub fn num_constraints(&self) -> usize {
        self.m_eq + self.m_ineq
    }

    pub fn variables(&self) -> &[VarInfo] {
        &self.vars
    }

    pub fn var_range(&self, name: &str) -> Option<Range<usize>> {
        self.by_name.get(name).map(|&k| self.vars[k].range.clone())
    }

    /// Row range of a named constraint block in the stacked constraint vector.
    pub fn constraint_rows(&self, name: &str) -> Option<Range<usize>> {
        self.constraints
            .iter()
            .find(|b| b.name == name)
            .map(|b| b.row..b.row + b.map.output_dim())
    }

    pub fn constraint_names(&self) -> impl Iterator<Item = &str> {
        self.constraints.iter().map(|b| b.name.as_str())
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn initial_point(&self) -> &[f64] {
        &self.init
    }

    pub fn set_initial_point(&mut self, x0: Vec<f64>) -> Result<()> {
        if x0.len() != self.num_vars() {
            return invalid(format!(
                "initial point has {} entries, problem has {} variables",
                x0.len(),
                self.num_vars()
            ));
        }
        self.init = x0;
        Ok(())
    }

    pub fn jacobian_structure(&self) -> &[(usize, usize)] {
        &self.jac_structure
    }

    /// Lower-triangle positions of the Lagrangian Hessian; may repeat.
    pub fn hessian_structure(&self) -> &[(usize, usize)] {
        &self.hess_structure
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::new();
        let mut out = [0.0];
        let mut f = 0.0;
        for b in &self.objective {
            b.gather(x, &mut buf);
            b.map.eval(&buf, &mut out);
            f += out[0];
        }
        f
    }

    pub fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut buf = Vec::new();
        let mut vals = Vec::new();
        for b in &self.objective {
            b.gather(x, &mut buf);
            vals.resize(b.jac_pattern.len(), 0.0);
            b.map.jacobian(&buf, &mut vals);
            for (&(_, c), v) in b.jac_pattern.iter().zip(&vals) {
                grad[b.index[c]] += v;
            }
        }
    }

    /// Stacked constraint values, equality rows first.
    pub fn constraints(&self, x: &[f64], out: &mut [f64]) {
        let mut buf = Vec::new();
        for b in &self.constraints {
            b.gather(x, &mut buf);
            let rows = b.map.output_dim();
            b.map.eval(&buf, &mut out[b.row..b.row + rows]);
        }
    }

    /// Jacobian values in [`jacobian_structure`](Self::jacobian_structure) order.
    pub fn jacobian(&self, x: &[f64], vals: &mut [f64]) {
        let mut buf = Vec::new();
        for b in &self.constraints {
            b.gather(x, &mut buf);
            let k = b.jac_pattern.len();
            b.map.jacobian(&buf, &mut vals[b.jac_offset..b.jac_offset + k]);
        }
    }

    /// Values of `obj_factor ∇²f + Σ_i weights_i ∇²c_i` in
    /// [`hessian_structure`](Self::hessian_structure) order.
    pub fn hessian(&self, x: &[f64], obj_factor: f64, weights: &[f64], vals: &mut [f64]) {
        let mut buf = Vec::new();
        for b in &self.objective {
            let k = b.hess_pattern.len();
            if k == 0 {
                continue;
            }
            b.gather(x, &mut buf);
            b.map.hessian(&buf, &[obj_factor], &mut vals[b.hess_offset..b.hess_offset + k]);
        }
        debug_assert!(self.objective.iter().map(|b| b.hess_pattern.len()).sum::<usize>() == self.n_obj_hess);
        for b in &self.constraints {
            let k = b.hess_pattern.len();
            if k == 0 {
                continue;
            }
            b.gather(x, &mut buf);
            let rows = b.map.output_dim();
            b.map
                .hessian(&buf, &weights[b.row..b.row + rows], &mut vals[b.hess_offset..b.hess_offset + k]);
        }
    }

    /// Largest violation of constraints and bounds at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut c = vec![0.0; self.num_constraints()];
        self.constraints(x, &mut c);
        let mut v = 0.0f64;
        for (i, ci) in c.iter().enumerate() {
            v = v.max(if i < self.m_eq { ci.abs() } else { (-ci).max(0.0) });
        }
        for i in 0..self.num_vars() {
            v = v.max(self.lower[i] - x[i]).max(x[i] - self.upper[i]);
        }
        v
    }

    /// Text listing of variables, bounds and constraint values at `x`.
    pub fn dump(&self, x: &[f64]) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# nlp: {} variables, {} equality rows, {} inequality rows",
            self.num_vars(),
            self.m_eq,
            self.m_ineq
        );
        let _ = writeln!(s, "objective {:.12e}", self.objective(x));
        for v in &self.vars {
            let _ = writeln!(s, "var {} [{}..{})", v.name, v.range.start, v.range.end);
            for i in v.range.clone() {
                let _ = writeln!(s, "  {:>6} {:>14.6e} {:>14.6e} {:>14.6e}", i, self.lower[i], x[i], self.upper[i]);
            }
        }
        let mut c = vec![0.0; self.num_constraints()];
        self.constraints(x, &mut c);
        for b in &self.constraints {
            let kind = if b.row < self.m_eq { "eq" } else { "ineq" };
            let _ = writeln!(s, "con {} {kind} rows [{}..{})", b.name, b.row, b.row + b.map.output_dim());
            for r in b.row..b.row + b.map.output_dim() {
                let _ = writeln!(s, "  {:>6} {:>14.6e}", r, c[r]);
            }
        }
        s
    }
}

const FD_STEP: f64 = 1e-6;

/// Worst absolute deviation between analytic gradients/Jacobians and central
/// finite differences (step `1e-6`) at `point`.
pub fn check_derivatives(problem: &NlProblem, point: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut buf = Vec::new();
    for b in problem.objective.iter().chain(&problem.constraints) {
        b.gather(point, &mut buf);
        let no = b.map.output_dim();
        let ni = b.map.input_dim();
        let mut analytic = vec![0.0; no * ni];
        let mut vals = vec![0.0; b.jac_pattern.len()];
        b.map.jacobian(&buf, &mut vals);
        for (&(r, c), v) in b.jac_pattern.iter().zip(&vals) {
            analytic[r * ni + c] += v;
        }
        let (mut fp, mut fm) = (vec![0.0; no], vec![0.0; no]);
        for c in 0..ni {
            let orig = buf[c];
            buf[c] = orig + FD_STEP;
            b.map.eval(&buf, &mut fp);
            buf[c] = orig - FD_STEP;
            b.map.eval(&buf, &mut fm);
            buf[c] = orig;
            for r in 0..no {
                let fd = (fp[r] - fm[r]) / (2.0 * FD_STEP);
                worst = worst.max((fd - analytic[r * ni + c]).abs());
            }
        }
    }
    worst
}

/// Worst absolute deviation between analytic Hessians (weighted by `weights`,
/// objective weight 1) and central differences of the analytic Jacobians.
pub fn check_hessians(problem: &NlProblem, point: &[f64], weights: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut buf = Vec::new();
    let obj_w = [1.0];
    for b in problem.objective.iter().chain(&problem.constraints) {
        let no = b.map.output_dim();
        let ni = b.map.input_dim();
        let w: &[f64] = if problem.objective.iter().any(|o| std::ptr::eq(o, b)) {
            &obj_w
        } else {
            &weights[b.row..b.row + no]
        };
        b.gather(point, &mut buf);
        let mut analytic = vec![0.0; ni * ni];
        let mut hv = vec![0.0; b.hess_pattern.len()];
        b.map.hessian(&buf, w, &mut hv);
        for (&(i, j), v) in b.hess_pattern.iter().zip(&hv) {
            analytic[i * ni + j] += v;
            if i != j {
                analytic[j * ni + i] += v;
            }
        }
        // Weighted gradient Σ_k w_k ∇c_k as a function of the local input.
        let grad = |x: &[f64]| {
            let mut vals = vec![0.0; b.jac_pattern.len()];
            b.map.jacobian(x, &mut vals);
            let mut g = vec![0.0; ni];
            for (&(r, c), v) in b.jac_pattern.iter().zip(&vals) {
                g[c] += w[r] * v;
            }
            g
        };
        for c in 0..ni {
            let orig = buf[c];
            buf[c] = orig + FD_STEP;
            let gp = grad(&buf);
            buf[c] = orig - FD_STEP;
            let gm = grad(&buf);
            buf[c] = orig;
            for r in 0..ni {
                let fd = (gp[r] - gm[r]) / (2.0 * FD_STEP);
                worst = worst.max((fd - analytic[r * ni + c]).abs());
            }
        }
    }
    worst
}
