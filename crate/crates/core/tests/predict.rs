use drmpc_core::gp::{GpDataset, GpHyperparams, GpModel};
use drmpc_core::predict::{propagate_one_step, GaussianBelief};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn velocity_field(x: &[f64]) -> Vec<f64> {
    vec![x[1].sin(), 0.5 * x[0].cos(), 0.1 * x[0] * x[2]]
}

fn trained_model(rng: &mut ChaCha8Rng) -> GpModel {
    let mut data = GpDataset::new(30);
    for _ in 0..30 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        data.update_window(&x, &velocity_field(&x)).unwrap();
    }
    let hypers: Vec<GpHyperparams> = (0..3).map(|_| GpHyperparams::new(vec![1.0, 1.0, 1.0], 1.0, 1e-3)).collect();
    GpModel::fit(&data, &hypers).unwrap()
}

/// Pushes draws of the belief through `x + T_o v`, with `v` drawn from the
/// GP posterior at each draw, and compares the empirical moments with the
/// linearized ones.
#[test]
fn propagated_moments_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let model = trained_model(&mut rng);
    let t_o = 0.1;
    for case in 0..3 {
        let mean = DVector::from_fn(3, |_, _| rng.random_range(-0.8..0.8));
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.03..0.03));
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 2e-4;
        let belief = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        let next = propagate_one_step(&belief, &model, t_o).unwrap();

        let chol = cov.clone().cholesky().unwrap();
        let n = 200_000;
        let mut sum = DVector::zeros(3);
        let mut outer = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &mean + chol.l() * z;
            let (mv, vv) = model.posterior(x.as_slice()).unwrap();
            let v = DVector::from_fn(3, |i, _| mv[i] + vv[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
            let x1 = x + v * t_o;
            sum += &x1;
            outer += &x1 * x1.transpose();
        }
        let mc_mean = &sum / n as f64;
        let mc_cov = &outer / n as f64 - &mc_mean * mc_mean.transpose();

        let mean_gap = (&mc_mean - &next.mean).amax();
        assert!(mean_gap <= 2e-4, "case {case}: mean off by {mean_gap:e}");
        let scale = next.cov.amax();
        let cov_gap = (&mc_cov - &next.cov).amax();
        assert!(cov_gap <= 0.03 * scale, "case {case}: covariance off by {cov_gap:e} (scale {scale:e})");
    }
}
