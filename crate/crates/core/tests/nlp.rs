use drmpc_core::mpc::{build_drmpc, build_saampc, warm_start, HorizonSamples, InitialGuess, MpcConfig, PreviousSolution};
use drmpc_core::nlp::{
    assemble, check_derivatives, check_hessians, AffineMap, Block, ConstraintKind, FunctionBlock, SmoothMap,
    SolveStatus, Solver, SolverOptions, VarBlock,
};
use drmpc_core::predict::{normalized_halfspaces, polytope_from_state, ObstacleGeometry};
use drmpc_core::risk::RiskSpec;
use drmpc_core::sim::{vehicle_step, VehicleParams, VehicleState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `½ xᵀHx + gᵀx` with dense symmetric `H`.
struct Quadratic {
    h: DMatrix<f64>,
    g: DVector<f64>,
}

impl SmoothMap for Quadratic {
    fn input_dim(&self) -> usize {
        self.g.len()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let x = DVector::from_column_slice(x);
        out[0] = 0.5 * x.dot(&(&self.h * &x)) + self.g.dot(&x);
    }
    fn jacobian_pattern(&self) -> Vec<(usize, usize)> {
        (0..self.g.len()).map(|c| (0, c)).collect()
    }
    fn jacobian(&self, x: &[f64], vals: &mut [f64]) {
        let grad = &self.h * DVector::from_column_slice(x) + &self.g;
        vals.copy_from_slice(grad.as_slice());
    }
    fn hessian_pattern(&self) -> Vec<(usize, usize)> {
        let n = self.g.len();
        (0..n).flat_map(|i| (0..=i).map(move |j| (i, j))).collect()
    }
    fn hessian(&self, _x: &[f64], w: &[f64], vals: &mut [f64]) {
        let n = self.g.len();
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                vals[k] = w[0] * self.h[(i, j)];
                k += 1;
            }
        }
    }
}

#[test]
fn equality_qp_matches_kkt_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..20 {
        let n = rng.random_range(2..=8);
        let me = rng.random_range(1..n);
        let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.5;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = DMatrix::from_fn(me, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DVector::from_fn(me, |_, _| rng.random_range(-1.0..1.0));

        let mut kkt = DMatrix::zeros(n + me, n + me);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        kkt.view_mut((0, n), (n, me)).copy_from(&a.transpose());
        kkt.view_mut((n, 0), (me, n)).copy_from(&a);
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(-&g));
        rhs.rows_mut(n, me).copy_from(&b);
        let oracle = kkt.lu().solve(&rhs).expect("nonsingular KKT matrix");

        let entries: Vec<(usize, usize, f64)> = (0..me).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| (r, c, a[(r, c)])).collect();
        let p = assemble(vec![
            Block::Variables(VarBlock::free("x", vec![0.0; n])),
            Block::Objective(FunctionBlock::new("f", &["x"], Quadratic { h, g })),
            Block::Constraint(
                ConstraintKind::Equality,
                FunctionBlock::new("c", &["x"], AffineMap::new(n, (-&b).as_slice().to_vec(), entries)),
            ),
        ])
        .unwrap();
        let s = Solver::new(SolverOptions::default()).solve(&p);
        assert_eq!(s.status, SolveStatus::OptimalLocal);
        for i in 0..n {
            assert!((s.x[i] - oracle[i]).abs() <= 1e-6, "x[{i}] {} vs {}", s.x[i], oracle[i]);
        }
    }
}

#[test]
fn minimum_of_x_above_one_is_one() {
    for start in [5.0, 1.0, -3.0] {
        let p = assemble(vec![
            Block::Variables(VarBlock::free("x", vec![start])),
            Block::Objective(FunctionBlock::new("f", &["x"], AffineMap::new(1, vec![0.0], vec![(0, 0, 1.0)]))),
            Block::Constraint(
                ConstraintKind::Inequality,
                FunctionBlock::new("g", &["x"], AffineMap::new(1, vec![-1.0], vec![(0, 0, 1.0)])),
            ),
        ])
        .unwrap();
        let s = Solver::new(SolverOptions::default()).solve(&p);
        assert_eq!(s.status, SolveStatus::OptimalLocal);
        assert!((s.x[0] - 1.0).abs() <= 1e-6, "from {start}: {}", s.x[0]);
        assert!((s.multipliers[0] - 1.0).abs() <= 1e-5);
    }
}

fn config(k: usize, n: usize, theta: f64) -> MpcConfig {
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
            theta,
            n_samples: n,
        },
        window: 20,
        controller: Default::default(),
        fallback: Default::default(),
        zero_fill_window: false,
        solver: SolverOptions::default(),
    }
}

/// Rectangles scattered around `centers[o]`, moving by `drift` along x per step.
fn horizon_samples(rng: &mut ChaCha8Rng, k: usize, n: usize, centers: &[[f64; 3]], spread: f64, drift: f64) -> HorizonSamples {
    let geom = ObstacleGeometry::new(1.0, 0.5);
    centers
        .iter()
        .map(|c| {
            (1..=k)
                .map(|step| {
                    (0..n)
                        .map(|_| {
                            let s = [
                                c[0] + drift * step as f64 + rng.random_range(-spread..spread),
                                c[1] + rng.random_range(-spread..spread),
                                c[2] + rng.random_range(-0.05..0.05),
                            ];
                            normalized_halfspaces(&polytope_from_state(&geom, &s)).unwrap()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[test]
fn mpc_callbacks_match_central_differences() {
    let (k, n) = (5, 50);
    let params = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    for point in 0..20 {
        let theta = [0.0, 5e-5, 1e-2][point % 3];
        let cfg = config(k, n, theta);
        let xi = VehicleState::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.05);
        let samples = horizon_samples(&mut rng, k, n, &[[xi.x + 2.0, xi.y, 0.2], [xi.x - 1.0, xi.y + 2.0, 3.0]], 0.3, -0.01);
        let reference: Vec<[f64; 2]> = (0..=k).map(|j| [xi.x + 0.02 * j as f64, xi.y]).collect();
        let guess = InitialGuess::rollout(&xi, [2.0, 0.1], &cfg, &params);
        let mpc = if point % 2 == 0 {
            build_drmpc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap()
        } else {
            build_saampc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap()
        };
        let p = &mpc.problem;
        let x: Vec<f64> = (0..p.num_vars()).map(|_| rng.random_range(0.01..1.5)).collect();
        worst = worst.max(check_derivatives(p, &x));
        let w: Vec<f64> = (0..p.num_constraints()).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert!(check_hessians(p, &x, &w) <= 1e-4);
    }
    assert!(worst <= 1e-4, "largest Jacobian deviation {worst:e}");
}

/// A robot heading into a scattered obstacle whose near face sits just past
/// the reference, so the risk constraints are active.
fn blocked_problem_inputs(seed: u64) -> (VehicleState, HorizonSamples, Vec<[f64; 2]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = VehicleState::new(0.0, 0.0, 0.0, 0.0);
    let samples = horizon_samples(&mut rng, 5, 30, &[[1.04, 0.3, 0.0]], 0.01, 0.0);
    let reference: Vec<[f64; 2]> = (0..=5).map(|j| [0.1 * j as f64, 0.0]).collect();
    (xi, samples, reference)
}

#[test]
fn zero_radius_robust_problem_matches_sample_average() {
    let params = VehicleParams::default();
    for seed in [43, 44, 45] {
        let (xi, samples, reference) = blocked_problem_inputs(seed);
        let cfg = config(5, 30, 0.0);
        let guess = InitialGuess::rollout(&xi, [3.0, 0.0], &cfg, &params);
        let dr = build_drmpc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap();
        let saa = build_saampc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap();
        let a = Solver::new(cfg.solver.clone()).solve(&dr.problem);
        let b = Solver::new(cfg.solver.clone()).solve(&saa.problem);
        assert!(a.status.is_optimal() && b.status.is_optimal(), "{} {}", a.status, b.status);
        assert!((a.objective - b.objective).abs() <= 1e-3, "{} vs {}", a.objective, b.objective);
        // The constraint must actually bind for the comparison to mean anything.
        let free = Solver::new(cfg.solver.clone()).solve(
            &build_saampc(&xi, &vec![], &reference, &cfg, &params, &guess).unwrap().problem,
        );
        assert!(b.objective > free.objective + 1e-6, "{} vs unconstrained {}", b.objective, free.objective);
    }
}

#[test]
fn warm_start_needs_fewer_iterations() {
    let params = VehicleParams::default();
    let cfg = config(5, 30, 5e-5);
    let (xi, samples, reference) = blocked_problem_inputs(46);
    let guess = InitialGuess::rollout(&xi, [3.0, 0.0], &cfg, &params);
    let first = build_drmpc(&xi, &samples, &reference, &cfg, &params, &guess).unwrap();
    let sol = Solver::new(cfg.solver.clone()).solve(&first.problem);
    assert!(sol.status.is_optimal());
    let prev = PreviousSolution {
        u: (0..5).map(|k| first.control(&sol.x, k)).collect(),
        xi: (0..=5).map(|k| first.state(&sol.x, k)).collect(),
        shape: first.shape(),
    };

    let u0 = first.control(&sol.x, 0);
    let next = vehicle_step(&xi, u0[0], u0[1], &params, cfg.sample_time);
    let (_, samples2, _) = blocked_problem_inputs(47);
    let reference2: Vec<[f64; 2]> = reference.iter().map(|r| [r[0] + 0.03, r[1]]).collect();
    let warm = warm_start(&prev, first.shape(), &next).expect("same shape");
    let cold = InitialGuess::rollout(&next, [3.0, 0.0], &cfg, &params);
    let iters = |g: &InitialGuess| {
        let p = build_drmpc(&next, &samples2, &reference2, &cfg, &params, g).unwrap();
        let s = Solver::new(cfg.solver.clone()).solve(&p.problem);
        assert!(s.status.is_optimal(), "{}", s.status);
        s.iterations
    };
    let (w, c) = (iters(&warm), iters(&cold));
    assert!(w < c, "warm {w} vs cold {c}");
}


