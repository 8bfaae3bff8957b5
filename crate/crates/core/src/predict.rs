//! Obstacle motion prediction: Gaussian belief propagation through the GP
//! posterior, state sampling, and conversion of obstacle states into
//! half-space descriptions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::GpModel;

/// Eigenvalues of a propagated covariance may be this negative (relative to
/// its largest diagonal entry, floored at 1) before it is rejected.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Gaussian belief `N(mean, cov)` of an obstacle state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return invalid("covariance shape does not match the mean");
        }
        Ok(Self {
            mean,
            cov: psd_repair(cov)?,
        })
    }

    /// Point mass at `mean` (zero covariance).
    pub fn deterministic(mean: &[f64]) -> Self {
        let n = mean.len();
        Self {
            mean: DVector::from_column_slice(mean),
            cov: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetrizes `cov` and clamps slightly negative eigenvalues to zero.
pub fn psd_repair(cov: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&cov + cov.transpose()) * 0.5;
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("covariance has non-finite entries".into()));
    }
    let scale = sym.diagonal().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    // Cheap exit: a Cholesky factorization proves positive definiteness.
    if sym.clone().cholesky().is_some() {
        return Ok(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.min();
    if min >= 0.0 {
        return Ok(sym);
    }
    if min < -PSD_TOLERANCE * scale {
        return Err(Error::NumericFailure(format!(
            "covariance is not positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((&rebuilt + rebuilt.transpose()) * 0.5)
}

/// One step of first-order Taylor moment propagation through the GP.
pub fn propagate_one_step(belief: &GaussianBelief, model: &GpModel, t_o: f64) -> Result<GaussianBelief> {
    let n = belief.dim();
    if model.input_dim() != n || model.output_dim() != n {
        return invalid(format!(
            "GP maps {} -> {} but the belief has dimension {}",
            model.input_dim(),
            model.output_dim(),
            n
        ));
    }
    let mu = belief.mean.as_slice();
    let (mu_v, var_v) = model.posterior(mu)?;
    let grad = model.posterior_mean_gradient(mu)?;
    let sigma = &belief.cov;

    let sigma_xv = sigma * grad.transpose();
    let mut sigma_v = &grad * &sigma_xv;
    for i in 0..n {
        sigma_v[(i, i)] += var_v[i];
    }
    let mean = &belief.mean + &mu_v * t_o;
    let cov = sigma + sigma_v * (t_o * t_o) + (&sigma_xv + sigma_xv.transpose()) * t_o;
    Ok(GaussianBelief {
        mean,
        cov: psd_repair(cov)?,
    })
}

/// Beliefs at steps `1..=steps`, each one step further than the previous.
pub fn propagate_horizon(
    belief0: &GaussianBelief,
    model: &GpModel,
    steps: usize,
    t_o: f64,
) -> Result<Vec<GaussianBelief>> {
    if steps == 0 {
        return invalid("prediction horizon must be at least one step");
    }
    let mut out = Vec::with_capacity(steps);
    let mut b = belief0.clone();
    for _ in 0..steps {
        b = propagate_one_step(&b, model, t_o)?;
        out.push(b.clone());
    }
    Ok(out)
}

/// `n` i.i.d. draws from the belief, reproducible for a fixed `seed`.
pub fn sample_states(belief: &GaussianBelief, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_states_with(belief, n, &mut rng)
}

pub fn sample_states_with<R: Rng + ?Sized>(belief: &GaussianBelief, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let dim = belief.dim();
    // Eigen factor: robust to the rank-deficient covariances of early steps.
    let eig = SymmetricEigen::new(belief.cov.clone());
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let factor = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt);
    (0..n)
        .map(|_| {
            let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            &belief.mean + &factor * z
        })
        .collect()
}

/// Which point of the obstacle the state `(x, y, θ)` refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    #[default]
    Center,
    RearAxle,
    FrontAxle,
}

/// Rectangular footprint of an obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleGeometry {
    pub half_length: f64,
    pub half_width: f64,
    #[serde(default)]
    pub anchor: Anchor,
    /// Distance from the center to the anchor axle along the heading.
    #[serde(default)]
    pub axle_offset: f64,
}

impl ObstacleGeometry {
    pub fn new(half_length: f64, half_width: f64) -> Self {
        Self {
            half_length,
            half_width,
            anchor: Anchor::Center,
            axle_offset: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_length > 0.0 && self.half_width > 0.0) {
            return invalid("obstacle half_length and half_width must be positive");
        }
        if !(self.axle_offset >= 0.0) {
            return invalid("obstacle axle_offset must be non-negative");
        }
        Ok(())
    }

    /// The same rectangle grown by `margin` on every side.
    pub fn inflated(&self, margin: f64) -> Self {
        Self {
            half_length: self.half_length + margin,
            half_width: self.half_width + margin,
            ..self.clone()
        }
    }

    /// Center of the rectangle for an anchor state `(x, y, θ, ...)`.
    pub fn center(&self, state: &[f64]) -> [f64; 2] {
        let (s, c) = state[2].sin_cos();
        let shift = match self.anchor {
            Anchor::Center => 0.0,
            Anchor::RearAxle => self.axle_offset,
            Anchor::FrontAxle => -self.axle_offset,
        };
        [state[0] + shift * c, state[1] + shift * s]
    }
}

/// Convex polytope `{p : G p <= g}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstaclePolytope {
    pub g_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
}

impl ObstaclePolytope {
    pub fn new(g_mat: DMatrix<f64>, g_vec: DVector<f64>) -> Result<Self> {
        if g_mat.nrows() != g_vec.len() {
            return invalid("G and g have different row counts");
        }
        if g_mat.nrows() < g_mat.ncols() + 1 {
            return invalid(format!(
                "a bounded polytope in {} dimensions needs at least {} faces",
                g_mat.ncols(),
                g_mat.ncols() + 1
            ));
        }
        for (j, row) in g_mat.row_iter().enumerate() {
            if !(row.norm() > 0.0) {
                return invalid(format!("row {j} of G has zero norm"));
            }
        }
        Ok(Self { g_mat, g_vec })
    }

    pub fn num_faces(&self) -> usize {
        self.g_mat.nrows()
    }

    pub fn dim(&self) -> usize {
        self.g_mat.ncols()
    }

    /// Strict interior membership (the boundary counts as outside).
    pub fn contains_interior(&self, p: &[f64]) -> bool {
        self.g_mat
            .row_iter()
            .zip(self.g_vec.iter())
            .all(|(row, g)| row.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() < *g)
    }
}

/// Rectangle occupied by an obstacle in state `(x, y, θ, ...)`.
pub fn polytope_from_state(geom: &ObstacleGeometry, state: &[f64]) -> ObstaclePolytope {
    let [cx, cy] = geom.center(state);
    let (s, c) = state[2].sin_cos();
    // Heading axis and its left normal.
    let axes = [([c, s], geom.half_length), ([-s, c], geom.half_width)];
    let mut g_mat = DMatrix::zeros(4, 2);
    let mut g_vec = DVector::zeros(4);
    for (a, ([ux, uy], half)) in axes.into_iter().enumerate() {
        let proj = ux * cx + uy * cy;
        g_mat[(2 * a, 0)] = ux;
        g_mat[(2 * a, 1)] = uy;
        g_vec[2 * a] = proj + half;
        g_mat[(2 * a + 1, 0)] = -ux;
        g_mat[(2 * a + 1, 1)] = -uy;
        g_vec[2 * a + 1] = -proj + half;
    }
    ObstaclePolytope { g_mat, g_vec }
}

/// Normalized half-space parameters `(c, d)` of one sampled polytope.
///
/// Rows satisfy `c_j = -G_j/‖G_j‖` and `d_j = g_j/‖G_j‖`, so `c_j·y + d_j` is
/// the signed distance from `y` to face `j` (positive on the obstacle side)
/// and the loss of safety is `(min_j c_j·y + d_j)⁺`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHalfspaceSample {
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl NormalizedHalfspaceSample {
    pub fn num_faces(&self) -> usize {
        self.c.nrows()
    }

    pub fn dim(&self) -> usize {
        self.c.ncols()
    }

    /// `c_j·y + d_j` for every face.
    pub fn face_values(&self, y: &[f64]) -> Vec<f64> {
        (0..self.c.nrows())
            .map(|j| self.d[j] + (0..self.c.ncols()).map(|l| self.c[(j, l)] * y[l]).sum::<f64>())
            .collect()
    }

    /// `min_j (c_j·y + d_j)`; negative outside the obstacle.
    pub fn signed_min(&self, y: &[f64]) -> f64 {
        self.face_values(y).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Loss of safety `(min_j c_j·y + d_j)⁺`.
    pub fn loss(&self, y: &[f64]) -> f64 {
        self.signed_min(y).max(0.0)
    }
}

pub fn normalized_halfspaces(poly: &ObstaclePolytope) -> Result<NormalizedHalfspaceSample> {
    let m = poly.num_faces();
    let mut c = DMatrix::zeros(m, poly.dim());
    let mut d = DVector::zeros(m);
    for j in 0..m {
        let row = poly.g_mat.row(j);
        let norm = row.norm();
        if !(norm > 0.0) {
            return invalid(format!("row {j} of G has zero norm"));
        }
        for l in 0..poly.dim() {
            c[(j, l)] = -row[l] / norm;
        }
        d[j] = poly.g_vec[j] / norm;
    }
    Ok(NormalizedHalfspaceSample { c, d })
}
