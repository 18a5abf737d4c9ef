//! Closed-form values for the diagnostics and operators.

use std::f64::consts::PI;
use std::sync::Arc;

use stochflow_core::diagnostics::{circulation, helicity, kelvin_residual, magnetic_helicity, translate};
use stochflow_core::ensemble::{fit_loglog_slope, mean_stderr};
use stochflow_core::flow::{advect, make_loop, volume_defect, evolve_deformation, label_lattice};
use stochflow_core::lie::{lie_bracket, lie_transpose};
use stochflow_core::spde::run;
use stochflow_core::{
    AdvectOptions, BasisSpec, BrownianDriver, Family, Flavor, LoopSpec, ModelSpec, NoiseBasis, Rank, Scheme,
    SpectralField, TorusGrid, VelocitySource, TWO_PI,
};

fn grid2(n: usize) -> Arc<TorusGrid> {
    TorusGrid::new(2, n).unwrap()
}

#[test]
fn shear_circulation_along_axis_line() {
    let g = grid2(32);
    let u = SpectralField::from_fn(&g, Rank::Vector, |x| [x[1].sin(), 0.0, 0.0]);
    for c in [0.3, 1.0, 2.5] {
        let lp = make_loop(&LoopSpec::AxisLine { axis: 0, offset: vec![0.0, c] }, 2, 64).unwrap();
        let got = circulation(&u, &lp.points, lp.winding).unwrap();
        assert!((got - TWO_PI * c.sin()).abs() < 1e-12, "{got}");
    }
}

#[test]
fn reversed_loop_negates_circulation() {
    let g = grid2(32);
    let u = SpectralField::random_band_limited(&g, Rank::Vector, 4, 3, true);
    let lp = make_loop(&LoopSpec::Circle { center: vec![2.0, 3.0], radius: 1.2, normal: None }, 2, 96).unwrap();
    let mut rev = lp.points.clone();
    rev.reverse();
    let a = circulation(&u, &lp.points, lp.winding).unwrap();
    let b = circulation(&u, &rev, lp.winding).unwrap();
    assert!((a + b).abs() < 1e-12 * a.abs().max(1.0));
}

#[test]
fn gradients_have_no_circulation() {
    let g = grid2(32);
    let phi = SpectralField::from_fn(&g, Rank::Scalar, |x| [(x[0] + 2.0 * x[1]).sin() + x[0].cos(), 0.0, 0.0]);
    let u = phi.gradient().unwrap();
    let lp = make_loop(&LoopSpec::Ellipse { center: vec![3.0, 3.0], semi_axes: vec![1.5, 0.7] }, 2, 128).unwrap();
    assert!(circulation(&u, &lp.points, lp.winding).unwrap().abs() < 1e-12);
}

#[test]
fn rigid_rotation_circulation_is_twice_the_area() {
    // u = (-sin y, sin x) has vorticity cos x + cos y ≈ 2 near the origin;
    // exactly, ∮ over the circle of radius r is 2·2πr J1(r)
    let g = grid2(32);
    let u = SpectralField::from_fn(&g, Rank::Vector, |x| [-x[1].sin(), x[0].sin(), 0.0]);
    let r: f64 = 0.5;
    let lp = make_loop(&LoopSpec::Circle { center: vec![0.0, 0.0], radius: r, normal: None }, 2, 256).unwrap();
    // J1(0.5)
    let j1 = 0.242_268_457_674_873_9;
    let want = 2.0 * TWO_PI * r * j1;
    assert!((circulation(&u, &lp.points, lp.winding).unwrap() - want).abs() < 1e-12);
}

#[test]
fn planar_shear_has_no_helicity() {
    let g = TorusGrid::new(3, 8).unwrap();
    let u = SpectralField::from_fn(&g, Rank::Vector, |x| [x[2].sin(), 0.0, 0.0]);
    assert!(helicity(&u).unwrap().abs() < 1e-12);
}

#[test]
fn beltrami_mode_helicity() {
    // u = (sin z, cos z, 0) has curl u = u, so H = ∫|u|² = (2π)³
    let g = TorusGrid::new(3, 8).unwrap();
    let u = SpectralField::from_fn(&g, Rank::Vector, |x| [x[2].sin(), x[2].cos(), 0.0]);
    assert!((helicity(&u).unwrap() - TWO_PI.powi(3)).abs() < 1e-9);
    let b = u.curl().unwrap();
    assert!((magnetic_helicity(&u, &b).unwrap() - TWO_PI.powi(3)).abs() < 1e-9);
}

#[test]
fn helicity_is_three_dimensional() {
    let g = grid2(8);
    let u = SpectralField::zeros(&g, Rank::Vector);
    assert!(helicity(&u).is_err());
}

#[test]
fn lie_operators_on_single_modes() {
    // ξ = (0, sin x), v = (0, cos x): ξ·∇v = 0, (∇ξ)ᵀv = (cos² x, 0)
    let g = grid2(16);
    let xi = SpectralField::from_fn(&g, Rank::Vector, |x| [0.0, x[0].sin(), 0.0]);
    let v = SpectralField::from_fn(&g, Rank::Vector, |x| [0.0, x[0].cos(), 0.0]);
    let want = SpectralField::from_fn(&g, Rank::Vector, |x| [x[0].cos().powi(2), 0.0, 0.0]);
    assert!(lie_transpose(&xi, &v).unwrap().sub(&want).l2_norm() < 1e-12);
    let u = SpectralField::from_fn(&g, Rank::Vector, |x| [x[0].cos(), 0.0, 0.0]);
    // [ξ, u] = ξ·∇u − u·∇ξ = −cos x ∂x(0, sin x) = (0, −cos² x)
    let want = SpectralField::from_fn(&g, Rank::Vector, |x| [0.0, -x[0].cos().powi(2), 0.0]);
    assert!(lie_bracket(&xi, &u).unwrap().sub(&want).l2_norm() < 1e-12);
}

#[test]
fn leray_keeps_solenoidal_and_kills_gradients() {
    let g = grid2(16);
    let v = SpectralField::random_band_limited(&g, Rank::Vector, 4, 9, true);
    assert!(v.leray_project().unwrap().sub(&v).l2_norm() < 1e-13 * v.l2_norm());
    let phi = SpectralField::random_band_limited(&g, Rank::Scalar, 4, 9, false);
    assert!(phi.gradient().unwrap().leray_project().unwrap().l2_norm() < 1e-13);
}

#[test]
fn translation_composes() {
    let g = grid2(16);
    let v = SpectralField::random_band_limited(&g, Rank::Vector, 4, 2, true);
    let a = translate(&translate(&v, [0.4, -0.2, 0.0]), [0.1, 0.7, 0.0]);
    let b = translate(&v, [0.5, 0.5, 0.0]);
    assert!(a.sub(&b).l2_norm() < 1e-12);
    let full = translate(&v, [TWO_PI, 0.0, 0.0]);
    assert!(full.sub(&v).l2_norm() < 1e-12);
}

#[test]
fn coarsened_increments_are_sums() {
    let fine = BrownianDriver::new(5, 6, 1e-3, 40, 2, 1).unwrap();
    let coarse = fine.coarsen(4).unwrap();
    assert_eq!(coarse.n_steps(), 10);
    for s in 0..10 {
        let (dw, db) = coarse.increments(s).unwrap();
        let mut w = [0.0; 2];
        let mut b = 0.0;
        for f in 4 * s..4 * s + 4 {
            let (a, c) = fine.increments(f).unwrap();
            w[0] += a[0];
            w[1] += a[1];
            b += c[0];
        }
        assert!((dw[0] - w[0]).abs() < 1e-15 && (dw[1] - w[1]).abs() < 1e-15 && (db[0] - b).abs() < 1e-15);
    }
    let (a, b) = (fine.w_at(40).unwrap(), coarse.w_at(10).unwrap());
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
}

#[test]
fn member_paths_share_w_only() {
    let d = BrownianDriver::new(5, 6, 1e-3, 10, 1, 1).unwrap();
    let (a, b) = (d.for_member(9, 0), d.for_member(9, 1));
    assert_eq!(a.dw(3).unwrap(), b.dw(3).unwrap());
    assert_ne!(a.db(3).unwrap(), b.db(3).unwrap());
}

#[test]
fn identical_samples_have_zero_stderr() {
    assert_eq!(mean_stderr(&[0.25; 7]), (0.25, 0.0));
    let (m, s) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
}

#[test]
fn slope_of_a_power_law() {
    let xs = [4e-3, 2e-3, 1e-3];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
    assert!((fit_loglog_slope(&xs, &ys).unwrap() - 1.5).abs() < 1e-12);
}

#[test]
fn noise_free_steady_shear_keeps_circulation() {
    // u = (sin y, 0) is a steady Euler solution and carries loops along x
    let g = grid2(32);
    let basis = Arc::new(NoiseBasis::empty(&g));
    let model = ModelSpec::new(Family::EulerPoincare, 0.0, basis.clone()).unwrap();
    let u0 = SpectralField::from_fn(&g, Rank::Vector, |x| [0.5 * x[1].sin(), 0.0, 0.0]);
    let drv = BrownianDriver::new(1, 2, 1e-2, 50, 0, 0).unwrap();
    let traj = run(&model, &u0, 0.5, &drv, Scheme::StratHeun, 1).unwrap();
    assert!(traj.last().sub(&u0).l2_norm() < 1e-12);
    let lp = make_loop(&LoopSpec::Circle { center: vec![PI, PI], radius: 1.0, normal: None }, 2, 128).unwrap();
    let flow = advect(&lp.points, VelocitySource::carrier_of(&traj), &basis, &drv, AdvectOptions::default()).unwrap();
    assert!(kelvin_residual(&traj, &flow, lp.winding).unwrap().max_abs() < 1e-9);
}

#[test]
fn area_defect_shrinks_with_the_step() {
    let g = grid2(16);
    let basis = Arc::new(NoiseBasis::from_specs(&g, &BasisSpec::Shear { amplitude: 0.3 }, &BasisSpec::None).unwrap());
    let fine = BrownianDriver::new(3, 4, 2.5e-3, 80, basis.kw(), 0).unwrap();
    let defect = |drv: &BrownianDriver| {
        let flow = evolve_deformation(&label_lattice(2, 4), VelocitySource::Zero, &basis, drv, Flavor::Strat).unwrap();
        volume_defect(&flow, 2).iter().copied().fold(0.0, f64::max)
    };
    let (coarse, fine) = (defect(&fine.coarsen(4).unwrap()), defect(&fine));
    assert!(fine < 0.5 * coarse, "{coarse} -> {fine}");
}
