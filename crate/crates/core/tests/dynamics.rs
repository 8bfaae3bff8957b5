mod support;

use std::f64::consts::PI;

use drmpc_core::mpc::bicycle;
use drmpc_core::predict::{polytope_from_state, ObstacleGeometry};
use drmpc_core::sim::{collision_check, rectangle_clearance, vehicle_step, wrap_angle, VehicleParams, VehicleState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn angle_gap(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

#[test]
fn step_matches_formula_including_control_bounds() {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut clamped = 0;
    for _ in 0..2000 {
        let s = [
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-PI..PI),
            rng.random_range(-0.5..0.5),
        ];
        // Roughly a third of the draws leave the admissible box.
        let v = rng.random_range(-10.0..45.0);
        let steer: f64 = rng.random_range(-0.8..0.8);
        if !(0.0..=30.0).contains(&v) || steer.abs() > PI / 6.0 {
            clamped += 1;
        }
        let ts = [0.01, 0.05, 0.1][rng.random_range(0..3)];
        let want = support::bicycle_formula(s, v, steer, p.l_f, p.l_r, 30.0, PI / 6.0, ts);
        let got = vehicle_step(&VehicleState::new(s[0], s[1], s[2], s[3]), v, steer, &p, ts);
        assert!((got.x - want[0]).abs() <= 1e-12, "{} vs {}", got.x, want[0]);
        assert!((got.y - want[1]).abs() <= 1e-12);
        assert!(angle_gap(got.theta, want[2]) <= 1e-12);
        assert!(angle_gap(got.beta, want[3]) <= 1e-12);
        assert!(got.theta > -PI && got.theta <= PI);
    }
    assert!(clamped > 300);
}

#[test]
fn model_step_matches_formula_inside_bounds() {
    let p = VehicleParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..1000 {
        let s = [
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(-PI..PI),
            rng.random_range(-0.5..0.5),
        ];
        let u = [rng.random_range(0.0..30.0), rng.random_range(-PI / 6.0..PI / 6.0)];
        let want = support::bicycle_formula(s, u[0], u[1], p.l_f, p.l_r, 30.0, PI / 6.0, 0.01);
        let got = bicycle(&s, u, &p, 0.01);
        for i in 0..4 {
            assert!((got[i] - want[i]).abs() <= 1e-12, "component {i}: {} vs {}", got[i], want[i]);
        }
    }
}

#[test]
fn rectangle_membership_matches_body_frame_test() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut inside = 0;
    for _ in 0..1000 {
        let hl = rng.random_range(0.3..2.5);
        let hw = rng.random_range(0.2..1.5);
        let state = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-PI..PI)];
        let p = [
            state[0] + rng.random_range(-3.0..3.0),
            state[1] + rng.random_range(-3.0..3.0),
        ];
        let geom = ObstacleGeometry::new(hl, hw);
        let want = support::inside_rectangle(p, [state[0], state[1]], state[2], hl, hw);
        let poly = polytope_from_state(&geom, &state);
        assert_eq!(collision_check(&p, std::slice::from_ref(&poly)), want, "{p:?} in {state:?} {hl} {hw}");
        assert_eq!(rectangle_clearance(p, &geom, &state) < 0.0, want);
        inside += want as usize;
    }
    assert!(inside > 100 && inside < 900);
}

#[test]
fn boundary_and_corner_points_are_safe() {
    let geom = ObstacleGeometry::new(1.0, 0.5);
    let state = [2.0, -1.0, 0.0];
    let poly = polytope_from_state(&geom, &state);
    for p in [[3.0, -1.0], [1.0, -1.0], [2.0, -0.5], [2.0, -1.5], [3.0, -0.5], [1.0, -1.5]] {
        assert!(!collision_check(&p, std::slice::from_ref(&poly)), "{p:?}");
    }
    assert!(collision_check(&[2.0, -1.0], &[poly]));
}
