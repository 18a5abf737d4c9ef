//! Stochastic transport-noise fluid models and their time integrators.
//!
//! Every model is written as the Itô system
//!
//! ```text
//! du + ℙ f(u) dt + Σ_k ℙ σ_k(u) dW_k = 0,      σ_k(u) = L_k u
//! ```
//!
//! with a linear noise operator `L_k` per family. The Stratonovich drift is
//! `F_S = f + ½ Σ_k ℙ L_k ℙ L_k u`, which is what [`Scheme::StratHeun`]
//! integrates.
//!
//! | family            | `F_S`                                | `L_k u`       |
//! |-------------------|--------------------------------------|---------------|
//! | euler_poincare    | `£ᵀ_u u`                             | `£ᵀ_ξ u`      |
//! | energy_euler      | `u·∇u`                               | `ξ·∇u`        |
//! | ns_poincare       | `£ᵀ_u u − ν Σ £ᵀ_η £ᵀ_η u`           | `£ᵀ_ξ u`      |
//! | energy_ns         | `u·∇u − ν Σ η·∇ℙ(η·∇u)`              | `ξ·∇u`        |
//! | passive (1-form)  | `0`                                  | `£ᵀ_ξ A`      |
//! | passive (vector)  | `0`                                  | `[ξ, B]`      |
//! | euler_ito_loop    | Itô drift given directly, see below  | `£ᵀ_ξ u`      |
//!
//! `euler_ito_loop` has Itô drift
//! `£ᵀ_u u − Σ(½ξξ:∇∇u + (∇ξ)ᵀ(ξ·∇)u + (ξ·∇ξ)·∇u + (∇(ξ·∇ξ))ᵀu)`, the model
//! whose circulation is conserved along Itô rather than Stratonovich loops.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Rank, SpectralField};
use crate::lie::{self, DoubleLieMode};
use crate::noise::{BrownianDriver, NoiseBasis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    EulerPoincare,
    EnergyEuler,
    NsPoincare,
    EnergyNs,
    PassiveTransport,
    EulerItoLoop,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::EulerPoincare => "euler_poincare",
            Family::EnergyEuler => "energy_euler",
            Family::NsPoincare => "ns_poincare",
            Family::EnergyNs => "energy_ns",
            Family::PassiveTransport => "passive_transport",
            Family::EulerItoLoop => "euler_ito_loop",
        }
    }

    pub fn is_viscous(self) -> bool {
        matches!(self, Family::NsPoincare | Family::EnergyNs)
    }

    /// Noise acts by `£ᵀ_ξ` (rather than plain advection).
    fn lie_noise(self) -> bool {
        !matches!(self, Family::EnergyEuler | Family::EnergyNs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassiveKind {
    #[default]
    Oneform,
    Vectorfield,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Stochastic Heun on the Stratonovich form.
    #[default]
    StratHeun,
    /// Euler–Maruyama on the Itô form.
    ItoEm,
}

/// A model family with its viscosity and noise basis.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    family: Family,
    nu: f64,
    passive: PassiveKind,
    basis: Arc<NoiseBasis>,
}

impl ModelSpec {
    pub fn new(family: Family, nu: f64, basis: Arc<NoiseBasis>) -> Result<Self> {
        if !(nu >= 0.0 && nu.is_finite()) {
            return Err(Error::InvalidArgument(format!("viscosity must be >= 0, got {nu}")));
        }
        if nu > 0.0 && !family.is_viscous() {
            return Err(Error::InvalidArgument(format!("{} takes no viscosity", family.name())));
        }
        if family.is_viscous() && nu > 0.0 && basis.kb() == 0 {
            return Err(Error::InvalidArgument("viscous model needs at least one eta field".into()));
        }
        if !basis.is_solenoidal() {
            return Err(Error::Validation("fluid models need divergence-free noise fields".into()));
        }
        Ok(ModelSpec { family, nu, passive: PassiveKind::Oneform, basis })
    }

    pub fn passive(kind: PassiveKind, basis: Arc<NoiseBasis>) -> Result<Self> {
        let mut m = Self::new(Family::PassiveTransport, 0.0, basis)?;
        m.passive = kind;
        Ok(m)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn passive_kind(&self) -> PassiveKind {
        self.passive
    }

    pub fn basis(&self) -> &Arc<NoiseBasis> {
        &self.basis
    }

    pub fn is_passive(&self) -> bool {
        self.family == Family::PassiveTransport
    }

    /// Velocity that carries the Lagrangian loops: `u` itself for the fluid
    /// models, zero for passive transport.
    pub fn carrier(&self, u: &SpectralField) -> SpectralField {
        if self.is_passive() {
            SpectralField::zeros(u.grid(), Rank::Vector)
        } else {
            u.clone()
        }
    }

    /// `L_k u` before projection.
    pub fn noise_operator(&self, u: &SpectralField, k: usize) -> Result<SpectralField> {
        let xi = self
            .basis
            .xi()
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("noise channel {k} out of range")))?;
        if self.is_passive() && self.passive == PassiveKind::Vectorfield {
            lie::lie_bracket(xi, u)
        } else if self.family.lie_noise() {
            lie::lie_transpose(xi, u)
        } else {
            lie::advect(xi, u)
        }
    }

    /// `ℙ L_k u`.
    pub fn noise_op(&self, u: &SpectralField, k: usize) -> Result<SpectralField> {
        self.noise_operator(u, k)?.leray_project()
    }

    /// `ℙ σ_k(u)` for every channel.
    pub fn noise_eval(&self, u: &SpectralField) -> Result<Vec<SpectralField>> {
        (0..self.basis.kw()).map(|k| self.noise_op(u, k)).collect()
    }

    /// `½ Σ_k ℙ L_k ℙ L_k u`.
    pub fn ito_correction(&self, u: &SpectralField) -> Result<SpectralField> {
        let mut out = SpectralField::zeros(u.grid(), u.rank());
        for k in 0..self.basis.kw() {
            let once = self.noise_op(u, k)?;
            out.axpy(0.5, &self.noise_op(&once, k)?);
        }
        Ok(out)
    }

    fn viscous_term(&self, u: &SpectralField) -> Result<SpectralField> {
        let mut out = SpectralField::zeros(u.grid(), Rank::Vector);
        if self.nu == 0.0 {
            return Ok(out);
        }
        for eta in self.basis.eta() {
            let term = match self.family {
                Family::NsPoincare => lie::double_lie_transpose(eta, u, DoubleLieMode::Composed)?,
                _ => lie::advect(eta, &lie::advect(eta, u)?.leray_project()?)?,
            };
            out.axpy(self.nu, &term);
        }
        Ok(out)
    }

    /// `ℙ F_S(u)`, the drift of the Stratonovich form.
    pub fn strat_drift(&self, u: &SpectralField) -> Result<SpectralField> {
        let raw = match self.family {
            Family::EulerPoincare => lie::lie_transpose(u, u)?,
            Family::EnergyEuler => lie::advect(u, u)?,
            Family::NsPoincare => lie::lie_transpose(u, u)?.sub(&self.viscous_term(u)?),
            Family::EnergyNs => lie::advect(u, u)?.sub(&self.viscous_term(u)?),
            Family::PassiveTransport => return Ok(SpectralField::zeros(u.grid(), u.rank())),
            Family::EulerItoLoop => {
                return Ok(self.ito_loop_drift(u)?.add(&self.ito_correction(u)?));
            }
        };
        raw.leray_project()
    }

    /// `ℙ f(u)`, the drift of the Itô form.
    pub fn drift_eval(&self, u: &SpectralField) -> Result<SpectralField> {
        match self.family {
            Family::EulerItoLoop => self.ito_loop_drift(u),
            _ => Ok(self.strat_drift(u)?.sub(&self.ito_correction(u)?)),
        }
    }

    fn ito_loop_drift(&self, u: &SpectralField) -> Result<SpectralField> {
        let g = u.grid();
        let d = g.d();
        let len = g.len();
        let mut f = lie::lie_transpose(u, u)?;
        let up = u.physical().to_vec();
        let du = u.jacobian_physical();
        let mut hess = vec![vec![vec![]; d]; d];
        for j in 0..d {
            for k in j..d {
                hess[j][k] = u.partial(j)?.partial(k)?.physical().to_vec();
            }
        }
        for xi in self.basis.xi() {
            let x = xi.physical();
            let dx = xi.jacobian_physical();
            let q = lie::advect(xi, xi)?;
            let qp = q.physical();
            let dq = q.jacobian_physical();
            let xdu = lie::advect(xi, u)?;
            let xdu = xdu.physical();
            let mut out = vec![vec![0.0; len]; d];
            for i in 0..d {
                let o = &mut out[i];
                for j in 0..d {
                    for p in 0..len {
                        o[p] += dx[j][i][p] * xdu[j][p] + qp[j][p] * du[i][j][p] + dq[j][i][p] * up[j][p];
                    }
                    for k in 0..d {
                        let (a, b) = if j <= k { (j, k) } else { (k, j) };
                        let h = &hess[a][b][i];
                        for p in 0..len {
                            o[p] += 0.5 * x[j][p] * x[k][p] * h[p];
                        }
                    }
                }
            }
            f.axpy(-1.0, &lie::from_products(u, Rank::Vector, out));
        }
        f.leray_project()
    }
}

/// `ℙ f(u)` for `model`.
pub fn drift_eval(u: &SpectralField, model: &ModelSpec) -> Result<SpectralField> {
    model.drift_eval(u)
}

/// `ℙ σ_k(u)` for `model`.
pub fn noise_eval(u: &SpectralField, model: &ModelSpec) -> Result<Vec<SpectralField>> {
    model.noise_eval(u)
}

/// One step of size `dt` with Brownian increments `dw`.
pub fn advance(
    u: &SpectralField,
    model: &ModelSpec,
    dt: f64,
    dw: &[f64],
    scheme: Scheme,
) -> Result<SpectralField> {
    if dw.len() != model.basis.kw() {
        return Err(Error::InvalidArgument(format!(
            "expected {} increments, got {}",
            model.basis.kw(),
            dw.len()
        )));
    }
    match scheme {
        Scheme::ItoEm => {
            let mut next = u.clone();
            next.axpy(-dt, &model.drift_eval(u)?);
            for (k, &w) in dw.iter().enumerate() {
                next.axpy(-w, &model.noise_op(u, k)?);
            }
            Ok(next)
        }
        Scheme::StratHeun => {
            let incr = |v: &SpectralField| -> Result<SpectralField> {
                let mut out = model.strat_drift(v)?.scaled(-dt);
                for (k, &w) in dw.iter().enumerate() {
                    out.axpy(-w, &model.noise_op(v, k)?);
                }
                Ok(out)
            };
            let k1 = incr(u)?;
            let predictor = u.add(&k1);
            let k2 = incr(&predictor)?;
            let mut next = u.clone();
            next.axpy(0.5, &k1);
            next.axpy(0.5, &k2);
            Ok(next)
        }
    }
}

/// Saved states of a run together with everything needed to replay it.
#[derive(Debug, Clone)]
pub struct FieldTrajectory {
    pub model: ModelSpec,
    pub scheme: Scheme,
    pub driver: BrownianDriver,
    pub save_stride: usize,
    pub times: Vec<f64>,
    pub snapshots: Vec<SpectralField>,
}

impl FieldTrajectory {
    pub fn dt(&self) -> f64 {
        self.driver.dt()
    }

    pub fn n_steps(&self) -> usize {
        self.driver.n_steps()
    }

    /// State at time step `step`; requires a saved snapshot there.
    pub fn at_step(&self, step: usize) -> Result<&SpectralField> {
        if step % self.save_stride != 0 {
            return Err(Error::Precondition(format!(
                "step {step} not saved (stride {})",
                self.save_stride
            )));
        }
        self.snapshots
            .get(step / self.save_stride)
            .ok_or(Error::OutOfRange { step, n_steps: self.n_steps() })
    }

    pub fn initial(&self) -> &SpectralField {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &SpectralField {
        self.snapshots.last().expect("non-empty trajectory")
    }

    pub(crate) fn require_every_step(&self) -> Result<()> {
        if self.save_stride != 1 {
            return Err(Error::Precondition("trajectory must store every step".into()));
        }
        Ok(())
    }
}

/// Integrates `model` from `u0` over the whole mesh of `driver`.
pub fn run(
    model: &ModelSpec,
    u0: &SpectralField,
    t_final: f64,
    driver: &BrownianDriver,
    scheme: Scheme,
    save_stride: usize,
) -> Result<FieldTrajectory> {
    u0.expect_rank(Rank::Vector)?;
    if **u0.grid() != **model.basis.grid() {
        return Err(Error::GridMismatch("initial state and noise basis".into()));
    }
    if save_stride == 0 {
        return Err(Error::InvalidArgument("save stride must be positive".into()));
    }
    let dt = driver.dt();
    let n = driver.n_steps();
    if (n as f64 * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "driver covers {} but T = {t_final}",
            n as f64 * dt
        )));
    }
    if driver.kw() != model.basis.kw() {
        return Err(Error::InvalidArgument(format!(
            "driver has {} W channels, basis has {}",
            driver.kw(),
            model.basis.kw()
        )));
    }
    let div = u0.divergence()?.l2_norm();
    let scale = u0.l2_norm().max(1e-300) * u0.grid().keep() as f64;
    if div > 1e-8 * scale {
        return Err(Error::Precondition(format!("initial state not divergence-free (|div| = {div:.3e})")));
    }
    let h = u0.grid().spacing();
    let kmax = u0.grid().keep() as f64;
    if model.nu > 0.0 {
        let eta_max = model.basis.eta().iter().map(|e| e.max_magnitude().powi(2)).sum::<f64>();
        if 2.0 * model.nu * eta_max * kmax * kmax * dt > 1.0 {
            return Err(Error::Stability {
                step: 0,
                time: 0.0,
                detail: "explicit viscous step too large for the retained modes".into(),
            });
        }
    }

    let mut u = u0.dealias();
    let mut times = vec![0.0];
    let mut snaps = vec![u.clone()];
    for step in 0..n {
        let t = step as f64 * dt;
        if !model.is_passive() {
            let vmax = u.max_magnitude();
            if vmax * dt >= 0.5 * h {
                return Err(Error::Stability {
                    step,
                    time: t,
                    detail: format!("CFL: max|u| dt = {:.3e} >= h/2 = {:.3e}", vmax * dt, 0.5 * h),
                });
            }
        }
        let dw = driver.dw(step)?;
        u = advance(&u, model, dt, &dw, scheme)?;
        if !u.is_finite() {
            return Err(Error::NotFinite { step: step + 1, time: t + dt });
        }
        if (step + 1) % save_stride == 0 {
            times.push((step + 1) as f64 * dt);
            snaps.push(u.clone());
        }
    }
    Ok(FieldTrajectory {
        model: model.clone(),
        scheme,
        driver: driver.clone(),
        save_stride,
        times,
        snapshots: snaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TorusGrid;
    use crate::noise::BasisSpec;

    fn setup(n: usize, amp: f64) -> (Arc<crate::grid::TorusGrid>, Arc<NoiseBasis>) {
        let g = TorusGrid::new(2, n).unwrap();
        let b = NoiseBasis::from_specs(&g, &BasisSpec::Shear { amplitude: amp }, &BasisSpec::None).unwrap();
        (g, Arc::new(b))
    }

    #[test]
    fn euler_poincare_ito_drift_matches_double_lie_form() {
        let (g, b) = setup(32, 0.3);
        let m = ModelSpec::new(Family::EulerPoincare, 0.0, b.clone()).unwrap();
        let u = SpectralField::random_band_limited(&g, Rank::Vector, 3, 4, true);
        let mut want = lie::lie_transpose(&u, &u).unwrap();
        for xi in b.xi() {
            want.axpy(-0.5, &lie::double_lie_transpose(xi, &u, DoubleLieMode::Composed).unwrap());
        }
        let want = want.leray_project().unwrap();
        assert!(m.drift_eval(&u).unwrap().sub(&want).l2_norm() < 1e-12 * want.l2_norm());
    }

    #[test]
    fn ito_loop_drift_is_euler_poincare_with_shifted_carrier() {
        let g = TorusGrid::new(2, 32).unwrap();
        let b = Arc::new(NoiseBasis::from_specs(&g, &BasisSpec::Cells { amplitude: 0.2 }, &BasisSpec::None).unwrap());
        assert!(b.induced_drift().l2_norm() > 1e-3);
        let u = SpectralField::random_band_limited(&g, Rank::Vector, 3, 8, true);
        let ep = ModelSpec::new(Family::EulerPoincare, 0.0, b.clone()).unwrap();
        let il = ModelSpec::new(Family::EulerItoLoop, 0.0, b.clone()).unwrap();
        let shift = lie::lie_transpose(b.induced_drift(), &u).unwrap().leray_project().unwrap();
        let want = ep.drift_eval(&u).unwrap().sub(&shift);
        assert!(il.drift_eval(&u).unwrap().sub(&want).l2_norm() < 1e-11 * want.l2_norm());
    }

    #[test]
    fn zero_state_is_fixed() {
        let (g, b) = setup(16, 0.1);
        let m = ModelSpec::new(Family::EulerPoincare, 0.0, b).unwrap();
        let zero = SpectralField::zeros(&g, Rank::Vector);
        let d = BrownianDriver::new(1, 2, 1e-3, 20, 2, 0).unwrap();
        let tr = run(&m, &zero, 0.02, &d, Scheme::StratHeun, 1).unwrap();
        assert_eq!(tr.last().l2_norm(), 0.0);
    }

    #[test]
    fn passive_vectorfield_without_noise_is_frozen() {
        let g = TorusGrid::new(2, 16).unwrap();
        let b = Arc::new(NoiseBasis::empty(&g));
        let m = ModelSpec::passive(PassiveKind::Vectorfield, b).unwrap();
        let b0 = SpectralField::random_band_limited(&g, Rank::Vector, 3, 2, true);
        let d = BrownianDriver::new(1, 2, 1e-2, 10, 0, 0).unwrap();
        let tr = run(&m, &b0, 0.1, &d, Scheme::StratHeun, 5).unwrap();
        assert_eq!(tr.snapshots.len(), 3);
        assert!(tr.last().sub(&b0).l2_norm() == 0.0);
    }

    #[test]
    fn snapshots_stay_solenoidal() {
        let (g, b) = setup(32, 0.2);
        let m = ModelSpec::new(Family::EnergyEuler, 0.0, b).unwrap();
        let u0 = SpectralField::random_band_limited(&g, Rank::Vector, 3, 1, true);
        let d = BrownianDriver::new(3, 4, 1e-3, 30, 2, 0).unwrap();
        let tr = run(&m, &u0, 0.03, &d, Scheme::StratHeun, 1).unwrap();
        for s in &tr.snapshots {
            assert!(s.divergence().unwrap().l2_norm() < 1e-8 * s.l2_norm());
        }
    }

    #[test]
    fn guards() {
        let (g, b) = setup(16, 0.1);
        assert!(ModelSpec::new(Family::EulerPoincare, 0.1, b.clone()).is_err());
        assert!(ModelSpec::new(Family::NsPoincare, -1.0, b.clone()).is_err());
        let m = ModelSpec::new(Family::EulerPoincare, 0.0, b).unwrap();
        let grad = SpectralField::random_band_limited(&g, Rank::Scalar, 2, 3, false).gradient().unwrap();
        let d = BrownianDriver::new(1, 2, 1e-3, 10, 2, 0).unwrap();
        assert!(matches!(run(&m, &grad, 0.01, &d, Scheme::StratHeun, 1), Err(Error::Precondition(_))));
        let fast = SpectralField::random_band_limited(&g, Rank::Vector, 2, 3, true).scaled(1e3);
        assert!(matches!(run(&m, &fast, 0.01, &d, Scheme::StratHeun, 1), Err(Error::Stability { .. })));
        let u = SpectralField::random_band_limited(&g, Rank::Vector, 2, 3, true);
        assert!(run(&m, &u, 0.02, &d, Scheme::StratHeun, 1).is_err());
    }
}
