//! Per-dimension Gaussian process regression of obstacle velocity fields.
//!
//! Every output dimension is an independent GP with an RBF kernel over the
//! shared window of obstacle states. Hyperparameters are configuration inputs.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Hyperparameters of one output GP.
///
/// The kernel is `σ_f² exp(-½ Σ_i (x_i - x'_i)² / ℓ_i²)`, i.e. the diagonal
/// length-scale matrix holds the squared `length_scales`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
    #[serde(default)]
    pub prior_mean: f64,
}

impl GpHyperparams {
    pub fn new(length_scales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Self {
        Self {
            length_scales,
            signal_variance,
            noise_variance,
            prior_mean: 0.0,
        }
    }

    pub fn with_prior_mean(mut self, prior_mean: f64) -> Self {
        self.prior_mean = prior_mean;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_scales.is_empty() {
            return invalid("GP hyperparameters need at least one length scale");
        }
        if self.length_scales.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return invalid("GP length scales must be positive and finite");
        }
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return invalid("GP signal variance must be positive");
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return invalid("GP noise variance must be non-negative");
        }
        if !self.prior_mean.is_finite() {
            return invalid("GP prior mean must be finite");
        }
        Ok(())
    }

    fn inv_sq_lengths(&self) -> Vec<f64> {
        self.length_scales.iter().map(|l| 1.0 / (l * l)).collect()
    }
}

/// RBF kernel `k(x, x2)`.
pub fn kernel_rbf(x: &[f64], x2: &[f64], hyper: &GpHyperparams) -> Result<f64> {
    if x.len() != x2.len() || x.len() != hyper.length_scales.len() {
        return invalid(format!(
            "kernel dimension mismatch: {} vs {} with {} length scales",
            x.len(),
            x2.len(),
            hyper.length_scales.len()
        ));
    }
    Ok(rbf(x, x2, &hyper.inv_sq_lengths(), hyper.signal_variance))
}

#[inline]
fn rbf(x: &[f64], x2: &[f64], inv_sq: &[f64], sf2: f64) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(x2)
        .zip(inv_sq)
        .map(|((a, b), w)| (a - b) * (a - b) * w)
        .sum();
    sf2 * (-0.5 * r2).exp()
}

/// Sliding window of `(state, velocity)` observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    capacity: usize,
    inputs: VecDeque<Vec<f64>>,
    outputs: VecDeque<Vec<f64>>,
}

impl GpDataset {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "GP window capacity must be positive");
        Self {
            capacity,
            inputs: VecDeque::with_capacity(capacity + 1),
            outputs: VecDeque::with_capacity(capacity + 1),
        }
    }

    /// A full window of zero states and zero velocities.
    pub fn zero_filled(capacity: usize, input_dim: usize, output_dim: usize) -> Self {
        let mut d = Self::new(capacity);
        for _ in 0..capacity {
            d.inputs.push_back(vec![0.0; input_dim]);
            d.outputs.push_back(vec![0.0; output_dim]);
        }
        d
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.iter().map(|v| v.as_slice())
    }

    pub fn outputs(&self) -> impl Iterator<Item = &[f64]> {
        self.outputs.iter().map(|v| v.as_slice())
    }

    /// Appends an observation, evicting the oldest one when the window is full.
    pub fn update_window(&mut self, obs_state: &[f64], obs_velocity: &[f64]) -> Result<()> {
        if let (Some(x0), Some(v0)) = (self.inputs.front(), self.outputs.front()) {
            if x0.len() != obs_state.len() || v0.len() != obs_velocity.len() {
                return invalid(format!(
                    "observation dims ({}, {}) do not match window dims ({}, {})",
                    obs_state.len(),
                    obs_velocity.len(),
                    x0.len(),
                    v0.len()
                ));
            }
        }
        self.inputs.push_back(obs_state.to_vec());
        self.outputs.push_back(obs_velocity.to_vec());
        while self.inputs.len() > self.capacity {
            self.inputs.pop_front();
            self.outputs.pop_front();
        }
        Ok(())
    }
}

/// What `fit` does with an empty window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyWindowPolicy {
    /// Posterior equals the prior: mean `m_j`, variance `σ_f²`.
    #[default]
    PriorFallback,
    Error,
}

#[derive(Debug, Clone)]
struct OutputGp {
    hyper: GpHyperparams,
    inv_sq: Vec<f64>,
    /// Lower Cholesky factor of `K + (σ_ε² + jitter) I`.
    factor: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

/// A fitted multi-output GP. Immutable once built, so it can be shared across
/// threads for concurrent posterior queries.
#[derive(Debug, Clone)]
pub struct GpModel {
    input_dim: usize,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<OutputGp>,
}

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

impl GpModel {
    /// Fits one GP per entry of `hypers`; an empty window gives the prior.
    pub fn fit(dataset: &GpDataset, hypers: &[GpHyperparams]) -> Result<Self> {
        Self::fit_with(dataset, hypers, EmptyWindowPolicy::PriorFallback)
    }

    pub fn fit_with(
        dataset: &GpDataset,
        hypers: &[GpHyperparams],
        empty: EmptyWindowPolicy,
    ) -> Result<Self> {
        if hypers.is_empty() {
            return invalid("at least one output GP is required");
        }
        for h in hypers {
            h.validate()?;
        }
        let input_dim = hypers[0].length_scales.len();
        if hypers.iter().any(|h| h.length_scales.len() != input_dim) {
            return invalid("all output GPs must share the input dimension");
        }
        if dataset.is_empty() && empty == EmptyWindowPolicy::Error {
            return invalid("cannot fit a GP on an empty window");
        }
        if let Some(x) = dataset.inputs.front() {
            if x.len() != input_dim {
                return invalid(format!(
                    "window states have dimension {}, hyperparameters expect {}",
                    x.len(),
                    input_dim
                ));
            }
        }
        if let Some(v) = dataset.outputs.front() {
            if v.len() != hypers.len() {
                return invalid(format!(
                    "window velocities have dimension {}, but {} output GPs are configured",
                    v.len(),
                    hypers.len()
                ));
            }
        }

        let inputs: Vec<Vec<f64>> = dataset.inputs.iter().cloned().collect();
        let n = inputs.len();
        let mut outputs = Vec::with_capacity(hypers.len());
        for (j, h) in hypers.iter().enumerate() {
            let inv_sq = h.inv_sq_lengths();
            let sf2 = h.signal_variance;
            let mut k = DMatrix::<f64>::zeros(n, n);
            for a in 0..n {
                for b in 0..=a {
                    let v = rbf(&inputs[a], &inputs[b], &inv_sq, sf2);
                    k[(a, b)] = v;
                    k[(b, a)] = v;
                }
            }
            for a in 0..n {
                k[(a, a)] += h.noise_variance;
            }
            let (factor, jitter) = factorize_with_jitter(&k, sf2, j)?;
            let centered = DVector::from_iterator(
                n,
                dataset.outputs.iter().map(|v| v[j] - h.prior_mean),
            );
            let tmp = factor
                .solve_lower_triangular(&centered)
                .ok_or_else(|| Error::NumericFailure("triangular solve failed".into()))?;
            let alpha = factor
                .tr_solve_lower_triangular(&tmp)
                .ok_or_else(|| Error::NumericFailure("triangular solve failed".into()))?;
            outputs.push(OutputGp {
                hyper: h.clone(),
                inv_sq,
                factor,
                alpha,
                jitter,
            });
        }
        Ok(Self {
            input_dim,
            inputs,
            outputs,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_data(&self) -> usize {
        self.inputs.len()
    }

    /// Jitter that was added to the diagonal of output `j`'s kernel matrix.
    pub fn jitter(&self, j: usize) -> f64 {
        self.outputs[j].jitter
    }

    /// Lower factor of output `j`'s regularized kernel matrix.
    pub fn factor(&self, j: usize) -> &DMatrix<f64> {
        &self.outputs[j].factor
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return invalid(format!(
                "test point has dimension {}, model expects {}",
                x.len(),
                self.input_dim
            ));
        }
        Ok(())
    }

    /// Posterior mean and latent variance of every output at `x`.
    pub fn posterior(&self, x: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_dim(x)?;
        let n = self.inputs.len();
        let mut mean = DVector::zeros(self.outputs.len());
        let mut var = DVector::zeros(self.outputs.len());
        for (j, out) in self.outputs.iter().enumerate() {
            let sf2 = out.hyper.signal_variance;
            if n == 0 {
                mean[j] = out.hyper.prior_mean;
                var[j] = sf2;
                continue;
            }
            let kstar = DVector::from_iterator(
                n,
                self.inputs.iter().map(|xi| rbf(x, xi, &out.inv_sq, sf2)),
            );
            mean[j] = out.hyper.prior_mean + kstar.dot(&out.alpha);
            let v = out
                .factor
                .solve_lower_triangular(&kstar)
                .ok_or_else(|| Error::NumericFailure("triangular solve failed".into()))?;
            let raw = sf2 - v.norm_squared();
            if raw < -1e-10 * sf2.max(1.0) {
                log::warn!("posterior variance {raw:e} clamped at zero");
            }
            var[j] = raw.max(0.0);
        }
        Ok((mean, var))
    }

    /// Jacobian of the posterior mean with respect to the test input,
    /// `output_dim × input_dim`.
    pub fn posterior_mean_gradient(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let mut jac = DMatrix::zeros(self.outputs.len(), self.input_dim);
        for (j, out) in self.outputs.iter().enumerate() {
            let sf2 = out.hyper.signal_variance;
            for (i, xi) in self.inputs.iter().enumerate() {
                let w = out.alpha[i] * rbf(x, xi, &out.inv_sq, sf2);
                for d in 0..self.input_dim {
                    jac[(j, d)] -= w * (x[d] - xi[d]) * out.inv_sq[d];
                }
            }
        }
        Ok(jac)
    }
}

/// Cholesky of `k`, first as given and then with escalating diagonal jitter.
fn factorize_with_jitter(k: &DMatrix<f64>, sf2: f64, output: usize) -> Result<(DMatrix<f64>, f64)> {
    let mut jitter = 0.0;
    loop {
        let mut kj = k.clone();
        for a in 0..kj.nrows() {
            kj[(a, a)] += jitter;
        }
        if let Some(ch) = kj.cholesky() {
            if jitter > 0.0 {
                log::debug!("GP output {output}: Cholesky needed jitter {jitter:e}");
            }
            return Ok((ch.unpack(), jitter));
        }
        jitter = if jitter == 0.0 {
            JITTER_START * sf2
        } else {
            jitter * 10.0
        };
        if jitter > JITTER_MAX * sf2 * (1.0 + 1e-12) {
            let diag = k.diagonal();
            let (lo, hi) = (diag.min(), diag.max());
            return Err(Error::NumericFailure(format!(
                "GP output {output}: kernel matrix not positive definite after jitter {:e} \
                 (diagonal range [{lo:e}, {hi:e}], size {})",
                JITTER_MAX * sf2,
                k.nrows()
            )));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hyp1() -> GpHyperparams {
        GpHyperparams::new(vec![1.0], 1.0, 0.0)
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let h = GpHyperparams::new(vec![0.7, 2.0], 2.5, 0.1);
        assert_eq!(kernel_rbf(&[0.3, -1.0], &[0.3, -1.0], &h).unwrap(), 2.5);
    }

    #[test]
    fn kernel_symmetric_and_hand_value() {
        let h = hyp1();
        let a = kernel_rbf(&[0.0], &[1.0], &h).unwrap();
        let b = kernel_rbf(&[1.0], &[0.0], &h).unwrap();
        assert_eq!(a, b);
        assert_relative_eq!(a, (-0.5f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let h = hyp1();
        assert!(matches!(
            kernel_rbf(&[0.0, 1.0], &[1.0], &h),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn single_noiseless_point_interpolates() {
        let mut d = GpDataset::new(5);
        d.update_window(&[0.4], &[1.7]).unwrap();
        let m = GpModel::fit(&d, &[hyp1()]).unwrap();
        let (mean, var) = m.posterior(&[0.4]).unwrap();
        assert_relative_eq!(mean[0], 1.7, epsilon = 1e-12);
        assert!(var[0] < 1e-8);
    }

    #[test]
    fn empty_window_uses_prior() {
        let d = GpDataset::new(3);
        let h = GpHyperparams::new(vec![1.0, 1.0], 0.8, 0.01).with_prior_mean(0.3);
        let m = GpModel::fit(&d, &[h.clone()]).unwrap();
        let (mean, var) = m.posterior(&[1.0, 2.0]).unwrap();
        assert_eq!(mean[0], 0.3);
        assert_eq!(var[0], 0.8);
        assert!(m.posterior_mean_gradient(&[0.0, 0.0]).unwrap().iter().all(|&g| g == 0.0));
        assert!(GpModel::fit_with(&d, &[h], EmptyWindowPolicy::Error).is_err());
    }

    #[test]
    fn far_test_point_reverts_to_prior() {
        let mut d = GpDataset::new(4);
        d.update_window(&[0.0, 0.0], &[2.0]).unwrap();
        d.update_window(&[0.5, 0.1], &[1.0]).unwrap();
        let h = GpHyperparams::new(vec![0.5, 0.5], 1.3, 1e-3).with_prior_mean(-0.2);
        let m = GpModel::fit(&d, &[h]).unwrap();
        let (mean, var) = m.posterior(&[6.0, 6.0]).unwrap();
        assert!((mean[0] + 0.2).abs() < 1e-6 * 1.3f64.sqrt());
        assert_relative_eq!(var[0], 1.3, epsilon = 1e-9);
    }

    #[test]
    fn symmetric_pair_gives_zero_gradient_at_midpoint() {
        let mut d = GpDataset::new(4);
        d.update_window(&[-1.0, 0.3], &[0.9]).unwrap();
        d.update_window(&[1.0, 0.3], &[0.9]).unwrap();
        let m = GpModel::fit(&d, &[GpHyperparams::new(vec![0.8, 1.2], 1.0, 0.01)]).unwrap();
        let g = m.posterior_mean_gradient(&[0.0, 0.3]).unwrap();
        assert!(g[(0, 0)].abs() < 1e-14);
    }

    #[test]
    fn outputs_at_prior_mean_give_zero_gradient() {
        let mut d = GpDataset::new(4);
        for x in [[0.0, 0.0], [0.3, 1.0], [1.0, -0.5]] {
            d.update_window(&x, &[0.25]).unwrap();
        }
        let h = GpHyperparams::new(vec![0.6, 0.6], 1.0, 0.0).with_prior_mean(0.25);
        let m = GpModel::fit(&d, &[h]).unwrap();
        let g = m.posterior_mean_gradient(&[0.2, 0.2]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn window_is_fifo_with_eviction() {
        let mut d = GpDataset::new(3);
        d.update_window(&[0.0], &[0.0]).unwrap();
        assert_eq!(d.len(), 1);
        for i in 1..6 {
            d.update_window(&[i as f64], &[10.0 * i as f64]).unwrap();
        }
        assert_eq!(d.len(), 3);
        let xs: Vec<f64> = d.inputs().map(|x| x[0]).collect();
        assert_eq!(xs, vec![3.0, 4.0, 5.0]);
        let vs: Vec<f64> = d.outputs().map(|v| v[0]).collect();
        assert_eq!(vs, vec![30.0, 40.0, 50.0]);
        assert!(d.update_window(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn duplicate_noiseless_points_need_jitter() {
        let mut d = GpDataset::new(3);
        d.update_window(&[0.5], &[1.0]).unwrap();
        d.update_window(&[0.5], &[1.0]).unwrap();
        let m = GpModel::fit(&d, &[hyp1()]).unwrap();
        assert!(m.jitter(0) > 0.0);
        let (mean, _) = m.posterior(&[0.5]).unwrap();
        assert_relative_eq!(mean[0], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn factor_reconstructs_kernel_matrix() {
        let mut d = GpDataset::new(6);
        for i in 0..6 {
            let t = i as f64 * 0.37;
            d.update_window(&[t.sin(), t.cos()], &[t]).unwrap();
        }
        let h = GpHyperparams::new(vec![0.9, 0.4], 1.7, 0.05);
        let m = GpModel::fit(&d, &[h.clone()]).unwrap();
        let l = m.factor(0);
        let rec = l * l.transpose();
        let xs: Vec<Vec<f64>> = d.inputs().map(|x| x.to_vec()).collect();
        for a in 0..6 {
            for b in 0..6 {
                let mut k = kernel_rbf(&xs[a], &xs[b], &h).unwrap();
                if a == b {
                    k += h.noise_variance + m.jitter(0);
                }
                assert!((rec[(a, b)] - k).abs() <= 1e-8 * k.abs().max(1.0));
            }
        }
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let d = GpDataset::new(2);
        let bad = GpHyperparams::new(vec![0.0], 1.0, 0.0);
        assert!(GpModel::fit(&d, &[bad]).is_err());
        let bad = GpHyperparams::new(vec![1.0], -1.0, 0.0);
        assert!(GpModel::fit(&d, &[bad]).is_err());
    }
}
