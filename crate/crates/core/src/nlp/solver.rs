use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::problem::NlProblem;
use super::sparse::{Ldl, SymCsc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Scaled KKT error tolerance.
    pub tol: f64,
    /// Constraint violation tolerance.
    pub feas_tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    /// Minimum relative distance of the start from finite bounds.
    pub bound_push: f64,
    pub bound_frac: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            feas_tol: 1e-6,
            max_iter: 200,
            mu_init: 0.1,
            bound_push: 1e-2,
            bound_frac: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    OptimalLocal,
    Infeasible,
    MaxIter,
    NumericFailure,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::OptimalLocal => "optimal_local",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::NumericFailure => "numeric_failure",
        }
    }

    pub fn is_optimal(self) -> bool {
        self == SolveStatus::OptimalLocal
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct NlSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Unscaled-complementarity KKT error at the returned point.
    pub kkt_error: f64,
    pub constraint_violation: f64,
    pub iterations: usize,
    pub wall_time: f64,
    /// Constraint multipliers, Lagrangian `f - yᵀc`.
    pub multipliers: Vec<f64>,
}

struct KktCache {
    entries: Vec<(usize, usize)>,
    matrix: SymCsc,
    slots: Vec<(usize, usize)>,
    ldl: Ldl,
}

/// Primal-dual interior-point solver. Keeps the symbolic factorization
/// between calls with the same sparsity.
pub struct Solver {
    pub options: SolverOptions,
    cache: Option<KktCache>,
}

pub fn solve(problem: &NlProblem, options: &SolverOptions) -> NlSolution {
    Solver::new(options.clone()).solve(problem)
}

const KAPPA_EPS: f64 = 10.0;
const KAPPA_MU: f64 = 0.2;
const THETA_MU: f64 = 1.5;
const S_MAX: f64 = 100.0;
const KAPPA_SIGMA: f64 = 1e10;
const DELTA_C: f64 = 1e-9;
const ARMIJO: f64 = 1e-4;
const MAX_PENALTY: f64 = 1e10;
const DAMP_MIN: f64 = 1e-8;
const STALL_ITERS: usize = 25;
const STALL_PENALTY: f64 = 1e3;
const MAX_SOC: usize = 4;
const KAPPA_SOC: f64 = 0.99;

struct Layout<'a> {
    n: usize,
    me: usize,
    m: usize,
    lo: &'a [f64],
    up: &'a [f64],
    has_lo: Vec<bool>,
    has_up: Vec<bool>,
}

impl Layout<'_> {
    fn barrier(&self, x: &[f64], w: &[f64], mu: f64) -> f64 {
        let mut b = 0.0;
        for i in 0..self.n {
            if self.has_lo[i] {
                b -= (x[i] - self.lo[i]).ln();
            }
            if self.has_up[i] {
                b -= (self.up[i] - x[i]).ln();
            }
        }
        for wi in w {
            b -= wi.ln();
        }
        mu * b
    }

    fn infeas_l1(&self, c: &[f64], w: &[f64]) -> f64 {
        let mut s = 0.0;
        for r in 0..self.m {
            s += if r < self.me { c[r].abs() } else { (c[r] - w[r - self.me]).abs() };
        }
        s
    }
}

impl Solver {
    pub fn new(options: SolverOptions) -> Self {
        Self { options, cache: None }
    }

    fn kkt<'a>(&'a mut self, entries: Vec<(usize, usize)>, dim: usize) -> &'a mut KktCache {
        let stale = self.cache.as_ref().is_none_or(|c| c.entries != entries);
        if stale {
            let (matrix, slots) = SymCsc::from_lower_pattern(dim, &entries);
            let ldl = Ldl::analyze(&matrix);
            log::debug!("kkt analysis: dim {dim}, factor nnz {}", ldl.factor_nnz());
            self.cache = Some(KktCache {
                entries,
                matrix,
                slots,
                ldl,
            });
        }
        self.cache.as_mut().expect("cache filled")
    }

    pub fn solve(&mut self, problem: &NlProblem) -> NlSolution {
        let start = Instant::now();
        let opt = self.options.clone();
        let n = problem.num_vars();
        let me = problem.num_eq();
        let mi = problem.num_ineq();
        let m = me + mi;
        let lo = problem.lower();
        let up = problem.upper();
        let lay = Layout {
            n,
            me,
            m,
            lo,
            up,
            has_lo: lo.iter().map(|v| v.is_finite()).collect(),
            has_up: up.iter().map(|v| v.is_finite()).collect(),
        };

        // Start point pushed into the interior of the bounds.
        let mut x = problem.initial_point().to_vec();
        for i in 0..n {
            let (l, u) = (lo[i], up[i]);
            match (lay.has_lo[i], lay.has_up[i]) {
                (true, true) => {
                    let pl = (opt.bound_push * l.abs().max(1.0)).min(opt.bound_frac * (u - l));
                    let pu = (opt.bound_push * u.abs().max(1.0)).min(opt.bound_frac * (u - l));
                    x[i] = x[i].clamp(l + pl, u - pu);
                }
                (true, false) => x[i] = x[i].max(l + opt.bound_push * l.abs().max(1.0)),
                (false, true) => x[i] = x[i].min(u - opt.bound_push * u.abs().max(1.0)),
                (false, false) => {}
            }
        }

        let mut mu = opt.mu_init;
        let mu_min = opt.tol / 10.0;
        let mut c = vec![0.0; m];
        problem.constraints(&x, &mut c);
        let mut w: Vec<f64> = (0..mi).map(|j| c[me + j].max(opt.bound_push)).collect();
        let mut y = vec![0.0; m];
        for j in 0..mi {
            y[me + j] = mu / w[j];
        }
        let mut zl: Vec<f64> = (0..n).map(|i| if lay.has_lo[i] { mu / (x[i] - lo[i]) } else { 0.0 }).collect();
        let mut zu: Vec<f64> = (0..n).map(|i| if lay.has_up[i] { mu / (up[i] - x[i]) } else { 0.0 }).collect();
        let n_lo = lay.has_lo.iter().filter(|&&b| b).count();
        let n_up = lay.has_up.iter().filter(|&&b| b).count();

        let nh = problem.hessian_structure().len();
        let nj = problem.jacobian_structure().len();
        let mut entries: Vec<(usize, usize)> = (0..n + m).map(|i| (i, i)).collect();
        entries.extend_from_slice(problem.hessian_structure());
        entries.extend(problem.jacobian_structure().iter().map(|&(r, col)| (n + r, col)));
        let dim = n + m;
        let jac_rows: Vec<(usize, usize)> = problem.jacobian_structure().to_vec();

        let mut f = problem.objective(&x);
        let mut g = vec![0.0; n];
        let mut jv = vec![0.0; nj];
        let mut hv = vec![0.0; nh];
        let mut neg_y = vec![0.0; m];
        let mut nu = 1.0f64;
        let mut delta_w_last = 0.0f64;
        // Proximal term on the primal block, raised while the line search
        // keeps cutting the step. Flat directions otherwise produce steps far
        // beyond where the constraint linearization holds.
        let mut damp = 0.0f64;
        let mut best_viol = f64::INFINITY;
        let mut stalled = 0usize;
        let mut status = SolveStatus::MaxIter;
        let mut iterations = 0;
        let mut kkt_error = f64::INFINITY;
        let mut rhs = vec![0.0; dim];
        let mut sol = vec![0.0; dim];
        let mut resid = vec![0.0; dim];
        let mut corr = vec![0.0; dim];

        let cache = self.kkt(entries, dim);

        for iter in 0..=opt.max_iter {
            iterations = iter;
            problem.gradient(&x, &mut g);
            problem.jacobian(&x, &mut jv);

            // Dual residual g - Jᵀy - zl + zu.
            let mut rd = g.clone();
            for (k, &(r, col)) in jac_rows.iter().enumerate() {
                rd[col] -= jv[k] * y[r];
            }
            for i in 0..n {
                rd[i] += zu[i] - zl[i];
            }
            let mut primal = 0.0f64;
            for r in 0..m {
                let v = if r < me { c[r] } else { c[r] - w[r - me] };
                primal = primal.max(v.abs());
            }
            let dual_sum: f64 = y.iter().map(|v| v.abs()).sum::<f64>() + zl.iter().sum::<f64>() + zu.iter().sum::<f64>();
            let s_d = (dual_sum / ((m + n_lo + n_up).max(1) as f64)).max(S_MAX) / S_MAX;
            let comp_sum: f64 = zl.iter().sum::<f64>() + zu.iter().sum::<f64>() + y[me..].iter().sum::<f64>();
            let s_c = (comp_sum / ((n_lo + n_up + mi).max(1) as f64)).max(S_MAX) / S_MAX;
            let comp_err = |mu: f64| {
                let mut e = 0.0f64;
                for i in 0..n {
                    if lay.has_lo[i] {
                        e = e.max((zl[i] * (x[i] - lo[i]) - mu).abs());
                    }
                    if lay.has_up[i] {
                        e = e.max((zu[i] * (up[i] - x[i]) - mu).abs());
                    }
                }
                for j in 0..mi {
                    e = e.max((y[me + j] * w[j] - mu).abs());
                }
                e
            };
            let dual_inf = rd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let err = |mu: f64| (dual_inf / s_d).max(primal).max(comp_err(mu) / s_c);
            kkt_error = err(0.0);
            let violation = problem.max_violation(&x);
            log::trace!(
                "iter {iter:3} f {f:.6e} kkt {kkt_error:.2e} viol {violation:.2e} mu {mu:.1e} nu {nu:.1e}"
            );
            if !kkt_error.is_finite() || !f.is_finite() {
                status = SolveStatus::NumericFailure;
                break;
            }
            if kkt_error <= opt.tol && violation <= opt.feas_tol {
                status = SolveStatus::OptimalLocal;
                break;
            }
            // Persistent violation under a large penalty: locally infeasible.
            if violation > opt.feas_tol {
                if violation < 0.9 * best_viol {
                    best_viol = violation;
                    stalled = 0;
                } else {
                    stalled += 1;
                }
                if stalled >= STALL_ITERS && nu > STALL_PENALTY {
                    status = SolveStatus::Infeasible;
                    break;
                }
            }
            if iter == opt.max_iter {
                status = SolveStatus::MaxIter;
                break;
            }
            while mu > mu_min && err(mu) <= KAPPA_EPS * mu {
                mu = mu_min.max((KAPPA_MU * mu).min(mu.powf(THETA_MU)));
            }

            for r in 0..m {
                neg_y[r] = -y[r];
            }
            problem.hessian(&x, 1.0, &neg_y, &mut hv);

            let mut sigma = vec![0.0; n];
            for i in 0..n {
                if lay.has_lo[i] {
                    sigma[i] += zl[i] / (x[i] - lo[i]);
                }
                if lay.has_up[i] {
                    sigma[i] += zu[i] / (up[i] - x[i]);
                }
            }
            let d_ineq: Vec<f64> = (0..mi).map(|j| w[j] / y[me + j]).collect();

            // Factorize with inertia correction.
            let mut delta_w = damp;
            let mut factored = false;
            for attempt in 0..40 {
                fill_kkt(cache, n, m, me, &sigma, &d_ineq, delta_w, &hv, &jv);
                let inertia = cache.ldl.factor(&cache.matrix);
                if inertia.positive == n && inertia.negative == m && inertia.zero == 0 {
                    factored = true;
                    break;
                }
                delta_w = if attempt == 0 {
                    if delta_w_last == 0.0 {
                        1e-4f64.max(damp * 8.0)
                    } else {
                        (delta_w_last / 3.0).max(1e-20).max(damp * 8.0)
                    }
                } else if delta_w_last == 0.0 {
                    delta_w * 100.0
                } else {
                    delta_w * 8.0
                };
                if delta_w > 1e40 {
                    break;
                }
            }
            if !factored {
                status = SolveStatus::NumericFailure;
                break;
            }
            if delta_w > damp {
                delta_w_last = delta_w;
            }

            for i in 0..n {
                let mut v = -rd[i] - zl[i] + zu[i];
                if lay.has_lo[i] {
                    v += mu / (x[i] - lo[i]);
                }
                if lay.has_up[i] {
                    v -= mu / (up[i] - x[i]);
                }
                rhs[i] = v;
            }
            for r in 0..m {
                rhs[n + r] = if r < me { -c[r] } else { -c[r] + mu / y[r] };
            }
            solve_refined(cache, &rhs, &mut sol, &mut resid, &mut corr);
            if sol.iter().any(|v| !v.is_finite()) {
                status = SolveStatus::NumericFailure;
                break;
            }

            let dx = &sol[..n];
            let dy: Vec<f64> = sol[n..].iter().map(|v| -v).collect();
            let dw: Vec<f64> = (0..mi).map(|j| mu / y[me + j] - w[j] - d_ineq[j] * dy[me + j]).collect();
            let dzl: Vec<f64> = (0..n)
                .map(|i| if lay.has_lo[i] { mu / (x[i] - lo[i]) - zl[i] - zl[i] / (x[i] - lo[i]) * dx[i] } else { 0.0 })
                .collect();
            let dzu: Vec<f64> = (0..n)
                .map(|i| if lay.has_up[i] { mu / (up[i] - x[i]) - zu[i] + zu[i] / (up[i] - x[i]) * dx[i] } else { 0.0 })
                .collect();

            let tau = (1.0 - mu).max(0.99);
            let mut alpha_max = 1.0f64;
            for i in 0..n {
                if lay.has_lo[i] && dx[i] < 0.0 {
                    alpha_max = alpha_max.min(-tau * (x[i] - lo[i]) / dx[i]);
                }
                if lay.has_up[i] && dx[i] > 0.0 {
                    alpha_max = alpha_max.min(tau * (up[i] - x[i]) / dx[i]);
                }
            }
            for j in 0..mi {
                if dw[j] < 0.0 {
                    alpha_max = alpha_max.min(-tau * w[j] / dw[j]);
                }
            }
            let mut alpha_z = 1.0f64;
            for i in 0..n {
                if lay.has_lo[i] && dzl[i] < 0.0 {
                    alpha_z = alpha_z.min(-tau * zl[i] / dzl[i]);
                }
                if lay.has_up[i] && dzu[i] < 0.0 {
                    alpha_z = alpha_z.min(-tau * zu[i] / dzu[i]);
                }
            }
            for j in 0..mi {
                if dy[me + j] < 0.0 {
                    alpha_z = alpha_z.min(-tau * y[me + j] / dy[me + j]);
                }
            }

            // Merit: barrier objective plus l1 penalty on constraint residuals.
            let mut dphi = 0.0;
            for i in 0..n {
                let mut gi = g[i];
                if lay.has_lo[i] {
                    gi -= mu / (x[i] - lo[i]);
                }
                if lay.has_up[i] {
                    gi += mu / (up[i] - x[i]);
                }
                dphi += gi * dx[i];
            }
            for j in 0..mi {
                dphi -= mu / w[j] * dw[j];
            }
            let cnorm = lay.infeas_l1(&c, &w);
            let mut quad = 0.0;
            {
                let mut full = vec![0.0; dim];
                full[..n].copy_from_slice(dx);
                cache.matrix.mul(&full, &mut resid);
                for i in 0..n {
                    quad += dx[i] * resid[i];
                }
                for j in 0..mi {
                    quad += dw[j] * dw[j] * y[me + j] / w[j];
                }
            }
            let nu_needed = if cnorm > 0.0 {
                (dphi + 0.5 * quad.max(0.0)) / (0.9 * cnorm)
            } else {
                0.0
            };
            if nu < nu_needed {
                nu = nu_needed + 1e-3;
            } else if violation <= opt.feas_tol {
                // A penalty inflated while far from feasibility only slows
                // progress once the iterates are feasible again. It must stay
                // above the multipliers for the l1 merit to remain exact.
                let lam = (0..m).map(|r| (y[r] + dy[r]).abs()).fold(0.0, f64::max);
                nu = (nu / 10.0).max(nu_needed + 1e-3).max(2.0 * lam).max(1.0);
            }
            if nu > MAX_PENALTY {
                status = SolveStatus::Infeasible;
                break;
            }
            let merit0 = f + lay.barrier(&x, &w, mu) + nu * cnorm;
            let dmerit = dphi - nu * cnorm;

            let mut alpha = alpha_max;
            let mut xt = vec![0.0; n];
            let mut wt = vec![0.0; mi];
            let mut ct = vec![0.0; m];
            let mut accepted = false;
            let mut ft = f;
            let mut first = true;
            while alpha > 1e-16 {
                for i in 0..n {
                    xt[i] = x[i] + alpha * dx[i];
                }
                for j in 0..mi {
                    wt[j] = w[j] + alpha * dw[j];
                }
                ft = problem.objective(&xt);
                problem.constraints(&xt, &mut ct);
                let merit = ft + lay.barrier(&xt, &wt, mu) + nu * lay.infeas_l1(&ct, &wt);
                if merit.is_finite() && merit - merit0 <= ARMIJO * alpha * dmerit + 10.0 * f64::EPSILON * merit0.abs() {
                    accepted = true;
                    break;
                }
                if first {
                    first = false;
                    // Second-order correction against the Maratos effect.
                    let mut p_soc: Vec<f64> = (0..m).map(|r| if r < me { c[r] } else { c[r] - w[r - me] }).collect();
                    let mut a_soc = alpha;
                    let mut theta_trial = lay.infeas_l1(&ct, &wt);
                    let mut theta_prev = theta_trial;
                    let mut soc_rhs = rhs.clone();
                    let mut soc_sol = vec![0.0; dim];
                    let mut xs = vec![0.0; n];
                    let mut ws = vec![0.0; mi];
                    let mut cs = vec![0.0; m];
                    for _ in 0..MAX_SOC {
                        if merit.is_finite() && theta_trial < cnorm {
                            break;
                        }
                        for r in 0..m {
                            let pt = if r < me { ct[r] } else { ct[r] - wt[r - me] };
                            p_soc[r] = a_soc * p_soc[r] + pt;
                            soc_rhs[n + r] = if r < me { -p_soc[r] } else { -p_soc[r] + mu / y[r] - w[r - me] };
                        }
                        solve_refined(cache, &soc_rhs, &mut soc_sol, &mut resid, &mut corr);
                        if soc_sol.iter().any(|v| !v.is_finite()) {
                            break;
                        }
                        let dxs = &soc_sol[..n];
                        let dws: Vec<f64> =
                            (0..mi).map(|j| mu / y[me + j] - w[j] + d_ineq[j] * soc_sol[n + me + j]).collect();
                        let mut a = 1.0f64;
                        for i in 0..n {
                            if lay.has_lo[i] && dxs[i] < 0.0 {
                                a = a.min(-tau * (x[i] - lo[i]) / dxs[i]);
                            }
                            if lay.has_up[i] && dxs[i] > 0.0 {
                                a = a.min(tau * (up[i] - x[i]) / dxs[i]);
                            }
                        }
                        for j in 0..mi {
                            if dws[j] < 0.0 {
                                a = a.min(-tau * w[j] / dws[j]);
                            }
                        }
                        for i in 0..n {
                            xs[i] = x[i] + a * dxs[i];
                        }
                        for j in 0..mi {
                            ws[j] = w[j] + a * dws[j];
                        }
                        let fs = problem.objective(&xs);
                        problem.constraints(&xs, &mut cs);
                        let theta_s = lay.infeas_l1(&cs, &ws);
                        let merit_s = fs + lay.barrier(&xs, &ws, mu) + nu * theta_s;
                        if merit_s.is_finite()
                            && merit_s - merit0 <= ARMIJO * alpha * dmerit + 10.0 * f64::EPSILON * merit0.abs()
                        {
                            xt.copy_from_slice(&xs);
                            wt.copy_from_slice(&ws);
                            ct.copy_from_slice(&cs);
                            ft = fs;
                            accepted = true;
                            break;
                        }
                        if theta_s > KAPPA_SOC * theta_prev {
                            break;
                        }
                        theta_prev = theta_s;
                        theta_trial = theta_s;
                        a_soc = a;
                        ct.copy_from_slice(&cs);
                        wt.copy_from_slice(&ws);
                    }
                    if accepted {
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                status = if violation > opt.feas_tol {
                    SolveStatus::Infeasible
                } else {
                    SolveStatus::NumericFailure
                };
                break;
            }

            log::trace!("  alpha {alpha:.2e} alpha_max {alpha_max:.2e} alpha_z {alpha_z:.2e} dw {delta_w:.1e}");
            if alpha < 0.1 * alpha_max {
                damp = (damp * 10.0).max(DAMP_MIN);
            } else if alpha >= 0.5 * alpha_max {
                damp = if damp / 4.0 < DAMP_MIN { 0.0 } else { damp / 4.0 };
            }
            x.copy_from_slice(&xt);
            w.copy_from_slice(&wt);
            c.copy_from_slice(&ct);
            f = ft;
            for r in 0..me {
                y[r] += alpha * dy[r];
            }
            for j in 0..mi {
                let r = me + j;
                y[r] = safeguard(y[r] + alpha_z * dy[r], mu, w[j]);
            }
            for i in 0..n {
                if lay.has_lo[i] {
                    zl[i] = safeguard(zl[i] + alpha_z * dzl[i], mu, x[i] - lo[i]);
                }
                if lay.has_up[i] {
                    zu[i] = safeguard(zu[i] + alpha_z * dzu[i], mu, up[i] - x[i]);
                }
            }
            if x.iter().any(|v| !v.is_finite() || v.abs() > 1e20) {
                status = SolveStatus::NumericFailure;
                break;
            }
        }

        let constraint_violation = problem.max_violation(&x);
        let objective = problem.objective(&x);
        let wall_time = start.elapsed().as_secs_f64();
        log::debug!(
            "ipm: {status} after {iterations} iterations, f {objective:.6e}, kkt {kkt_error:.2e}, viol {constraint_violation:.2e}, {:.1} ms",
            wall_time * 1e3
        );
        NlSolution {
            x,
            objective,
            status,
            kkt_error,
            constraint_violation,
            iterations,
            wall_time,
            multipliers: y,
        }
    }
}

/// Solves with the current factor plus a few steps of iterative refinement.
fn solve_refined(cache: &mut KktCache, rhs: &[f64], sol: &mut [f64], resid: &mut [f64], corr: &mut [f64]) {
    sol.copy_from_slice(rhs);
    cache.ldl.solve(sol);
    let bnorm = rhs.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for _ in 0..5 {
        cache.matrix.mul(sol, resid);
        let mut rn = 0.0f64;
        for k in 0..rhs.len() {
            resid[k] = rhs[k] - resid[k];
            rn = rn.max(resid[k].abs());
        }
        if rn <= 1e-14 * bnorm {
            break;
        }
        corr.copy_from_slice(resid);
        cache.ldl.solve(corr);
        for k in 0..rhs.len() {
            sol[k] += corr[k];
        }
    }
}

fn safeguard(z: f64, mu: f64, slack: f64) -> f64 {
    z.clamp(mu / (KAPPA_SIGMA * slack), KAPPA_SIGMA * mu / slack)
}

#[allow(clippy::too_many_arguments)]
fn fill_kkt(
    cache: &mut KktCache,
    n: usize,
    m: usize,
    me: usize,
    sigma: &[f64],
    d_ineq: &[f64],
    delta_w: f64,
    hv: &[f64],
    jv: &[f64],
) {
    let vals = &mut cache.matrix.values;
    vals.iter_mut().for_each(|v| *v = 0.0);
    let slots = &cache.slots;
    for i in 0..n {
        vals[slots[i].0] += sigma[i] + delta_w;
    }
    for r in 0..m {
        let d = if r < me { 0.0 } else { d_ineq[r - me] };
        vals[slots[n + r].0] -= d + DELTA_C;
    }
    let base = n + m;
    for (k, v) in hv.iter().chain(jv).enumerate() {
        let (lo, hi) = slots[base + k];
        vals[lo] += v;
        if hi != lo {
            vals[hi] += v;
        }
    }
}
