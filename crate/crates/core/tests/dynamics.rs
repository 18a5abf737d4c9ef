//! Small-grid runs of the solvers and diagnostics together.

use std::f64::consts::PI;
use std::sync::Arc;

use stochflow_core::diagnostics::{energy_ledger, kelvin_residual};
use stochflow_core::ensemble::conditional_kelvin;
use stochflow_core::flow::{advect, make_loop};
use stochflow_core::spde::run;
use stochflow_core::{
    AdvectOptions, BasisSpec, BrownianDriver, Family, LoopSpec, ModelSpec, NoiseBasis, PassiveKind, Rank, Scheme,
    SpectralField, TorusGrid, VelocitySource,
};

const T: f64 = 0.08;

fn basis(n: usize, eta: BasisSpec) -> Arc<NoiseBasis> {
    let g = TorusGrid::new(2, n).unwrap();
    Arc::new(NoiseBasis::from_specs(&g, &BasisSpec::Cells { amplitude: 0.2 }, &eta).unwrap())
}

fn initial(b: &NoiseBasis) -> SpectralField {
    SpectralField::random_band_limited(b.grid(), Rank::Vector, 2, 5, true)
}

fn circle() -> stochflow_core::MaterialLoop {
    make_loop(&LoopSpec::Circle { center: vec![PI, PI], radius: 1.0, normal: None }, 2, 64).unwrap()
}

#[test]
fn kelvin_residual_shrinks_with_the_step() {
    let b = basis(32, BasisSpec::None);
    let model = ModelSpec::new(Family::EulerPoincare, 0.0, b.clone()).unwrap();
    let u0 = initial(&b);
    let lp = circle();
    let mut worst = Vec::new();
    for factor in [4, 1] {
        let mut sq = 0.0;
        for seed in [1, 2] {
            let drv = BrownianDriver::new(seed, 0, 1e-3, 80, b.kw(), 0).unwrap().coarsen(factor).unwrap();
            let traj = run(&model, &u0, T, &drv, Scheme::StratHeun, 1).unwrap();
            let flow = advect(&lp.points, VelocitySource::carrier_of(&traj), &b, &drv, AdvectOptions::default()).unwrap();
            sq += kelvin_residual(&traj, &flow, lp.winding).unwrap().max_abs().powi(2);
        }
        worst.push(sq.sqrt());
    }
    assert!(worst[1] < 0.5 * worst[0], "{worst:?}");
}

#[test]
fn energy_form_conserves_energy_closely() {
    let b = basis(32, BasisSpec::None);
    let model = ModelSpec::new(Family::EnergyEuler, 0.0, b.clone()).unwrap();
    let drv = BrownianDriver::new(4, 0, 1e-3, 80, b.kw(), 0).unwrap();
    let traj = run(&model, &initial(&b), T, &drv, Scheme::StratHeun, 1).unwrap();
    assert!(energy_ledger(&traj).unwrap().max_rel_drift() < 1e-5);
}

#[test]
fn viscous_ledger_closes() {
    let b = basis(32, BasisSpec::Euclidean { amplitude: 1.0 });
    let model = ModelSpec::new(Family::EnergyNs, 0.05, b.clone()).unwrap();
    let drv = BrownianDriver::new(4, 9, 1e-3, 80, b.kw(), b.kb()).unwrap();
    let traj = run(&model, &initial(&b), T, &drv, Scheme::StratHeun, 1).unwrap();
    let l = energy_ledger(&traj).unwrap();
    assert!(l.energy.last().unwrap() < &l.energy[0]);
    assert!(l.max_rel_closure() < 1e-4);
}

#[test]
fn schemes_agree_on_a_fine_mesh() {
    let b = basis(16, BasisSpec::None);
    let model = ModelSpec::new(Family::EulerPoincare, 0.0, b.clone()).unwrap();
    let u0 = initial(&b);
    let drv = BrownianDriver::new(8, 0, 2.5e-4, 200, b.kw(), 0).unwrap();
    let heun = run(&model, &u0, 0.05, &drv, Scheme::StratHeun, 200).unwrap();
    let em = run(&model, &u0, 0.05, &drv, Scheme::ItoEm, 200).unwrap();
    let rel = heun.last().sub(em.last()).l2_norm() / heun.last().l2_norm();
    assert!(rel < 1e-2, "{rel}");
}

#[test]
fn inviscid_ensemble_has_no_spread() {
    let b = basis(16, BasisSpec::Euclidean { amplitude: 1.0 });
    let model = ModelSpec::new(Family::NsPoincare, 0.0, b.clone()).unwrap();
    let drv = BrownianDriver::new(4, 9, 2e-3, 20, b.kw(), b.kb()).unwrap();
    let traj = run(&model, &initial(&b), 0.04, &drv, Scheme::StratHeun, 1).unwrap();
    let lp = circle();
    let est = conditional_kelvin(&traj, &lp.points, lp.winding, 77, 6).unwrap();
    assert_eq!(est.mc_stderr, 0.0);
    assert!((est.mc_mean - est.target).abs() < 1e-3);
}

#[test]
fn ensemble_is_seed_stable() {
    let b = basis(16, BasisSpec::Euclidean { amplitude: 1.0 });
    let model = ModelSpec::new(Family::NsPoincare, 0.02, b.clone()).unwrap();
    let drv = BrownianDriver::new(4, 9, 2e-3, 20, b.kw(), b.kb()).unwrap();
    let traj = run(&model, &initial(&b), 0.04, &drv, Scheme::StratHeun, 1).unwrap();
    let lp = circle();
    let a = conditional_kelvin(&traj, &lp.points, lp.winding, 77, 8).unwrap();
    let c = conditional_kelvin(&traj, &lp.points, lp.winding, 77, 8).unwrap();
    assert_eq!(a.mc_mean.to_bits(), c.mc_mean.to_bits());
    assert!(a.mc_stderr > 0.0);
}

#[test]
fn passive_form_without_noise_is_frozen() {
    let g = TorusGrid::new(2, 16).unwrap();
    let b = Arc::new(NoiseBasis::empty(&g));
    let model = ModelSpec::passive(PassiveKind::Vectorfield, b).unwrap();
    let a0 = SpectralField::random_band_limited(&g, Rank::Vector, 3, 2, true);
    let drv = BrownianDriver::new(1, 0, 1e-2, 10, 0, 0).unwrap();
    let traj = run(&model, &a0, 0.1, &drv, Scheme::StratHeun, 1).unwrap();
    assert_eq!(traj.last().physical(), a0.physical());
}

#[test]
fn non_solenoidal_noise_is_rejected_for_fluids() {
    let g = TorusGrid::new(2, 16).unwrap();
    let xi = SpectralField::from_fn(&g, Rank::Vector, |x| [x[0].sin(), 0.0, 0.0]);
    assert!(NoiseBasis::new(&g, vec![xi.clone()], vec![]).is_err());
    let b = Arc::new(NoiseBasis::compressible(&g, vec![xi], vec![]).unwrap());
    assert!(ModelSpec::new(Family::EulerPoincare, 0.0, b).is_err());
}
