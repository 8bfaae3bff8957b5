mod support;

use drmpc_core::gp::{GpDataset, GpHyperparams, GpModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_case(rng: &mut ChaCha8Rng) -> (GpDataset, Vec<GpHyperparams>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let nx = rng.random_range(1..=4);
    let ny = rng.random_range(1..=3);
    let m = rng.random_range(0..=30);
    let mut data = GpDataset::new(30);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..m {
        let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-3.0..3.0)).collect();
        let y: Vec<f64> = (0..ny).map(|_| rng.random_range(-2.0..2.0)).collect();
        data.update_window(&x, &y).unwrap();
        xs.push(x);
        ys.push(y);
    }
    let hypers = (0..ny)
        .map(|_| {
            GpHyperparams::new(
                (0..nx).map(|_| rng.random_range(0.3..3.0)).collect(),
                rng.random_range(0.2..4.0),
                rng.random_range(1e-3..1e-1),
            )
            .with_prior_mean(rng.random_range(-1.0..1.0))
        })
        .collect();
    (data, hypers, xs, ys)
}

#[test]
fn posterior_matches_dense_inverse_on_random_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (data, hypers, xs, ys) = random_case(&mut rng);
        let model = GpModel::fit(&data, &hypers).unwrap();
        let nx = hypers[0].length_scales.len();
        for _ in 0..5 {
            let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-4.0..4.0)).collect();
            let (mean, var) = model.posterior(&x).unwrap();
            for (j, h) in hypers.iter().enumerate() {
                let targets: Vec<f64> = ys.iter().map(|y| y[j]).collect();
                let (m_ref, v_ref) = support::dense_gp_posterior(
                    &xs,
                    &targets,
                    &x,
                    &h.length_scales,
                    h.signal_variance,
                    h.noise_variance,
                    h.prior_mean,
                    model.jitter(j),
                );
                worst = worst.max((mean[j] - m_ref).abs()).max((var[j] - v_ref.max(0.0)).abs());
            }
        }
    }
    assert!(worst <= 1e-8, "largest deviation {worst:e}");
}

#[test]
fn mean_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (data, hypers, _, _) = random_case(&mut rng);
        let model = GpModel::fit(&data, &hypers).unwrap();
        let nx = model.input_dim();
        let x: Vec<f64> = (0..nx).map(|_| rng.random_range(-3.0..3.0)).collect();
        let jac = model.posterior_mean_gradient(&x).unwrap();
        let h = 1e-6;
        for d in 0..nx {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[d] += h;
            xm[d] -= h;
            let (mp, _) = model.posterior(&xp).unwrap();
            let (mm, _) = model.posterior(&xm).unwrap();
            for j in 0..model.output_dim() {
                let fd = (mp[j] - mm[j]) / (2.0 * h);
                assert!((fd - jac[(j, d)]).abs() <= 1e-4 * (1.0 + fd.abs()), "{fd} vs {}", jac[(j, d)]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variance_is_between_zero_and_signal_variance(seed in 0u64..10_000, px in -5.0f64..5.0, py in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, hypers, _, _) = random_case(&mut rng);
        let nx = hypers[0].length_scales.len();
        let x: Vec<f64> = [px, py, px - py, px * 0.5].into_iter().take(nx).collect();
        let model = GpModel::fit(&data, &hypers).unwrap();
        let (_, var) = model.posterior(&x).unwrap();
        for (j, h) in hypers.iter().enumerate() {
            prop_assert!(var[j] >= 0.0);
            prop_assert!(var[j] <= h.signal_variance * (1.0 + 1e-12));
        }
    }

    #[test]
    fn window_keeps_the_most_recent_observations(cap in 1usize..25, extra in 0usize..40) {
        let mut data = GpDataset::new(cap);
        let total = cap + extra;
        for i in 0..total {
            data.update_window(&[i as f64], &[-(i as f64)]).unwrap();
        }
        prop_assert_eq!(data.len(), cap.min(total));
        let first = data.inputs().next().unwrap()[0];
        prop_assert_eq!(first, (total - data.len()) as f64);
        let newest = data.inputs().last().unwrap()[0];
        prop_assert_eq!(newest, (total - 1) as f64);
    }

    #[test]
    fn posterior_is_invariant_to_window_order(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (data, hypers, xs, ys) = random_case(&mut rng);
        prop_assume!(xs.len() > 1);
        let mut rev = GpDataset::new(30);
        for (x, y) in xs.iter().zip(&ys).rev() {
            rev.update_window(x, y).unwrap();
        }
        let a = GpModel::fit(&data, &hypers).unwrap();
        let b = GpModel::fit(&rev, &hypers).unwrap();
        prop_assume!((0..hypers.len()).all(|j| a.jitter(j) == 0.0 && b.jitter(j) == 0.0));
        let x: Vec<f64> = xs[0].iter().map(|v| v + 0.1).collect();
        let (ma, va) = a.posterior(&x).unwrap();
        let (mb, vb) = b.posterior(&x).unwrap();
        for j in 0..hypers.len() {
            prop_assert!((ma[j] - mb[j]).abs() <= 1e-8);
            prop_assert!((va[j] - vb[j]).abs() <= 1e-8);
        }
    }
}
