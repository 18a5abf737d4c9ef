//! Circulation, energy, Weber/Cauchy and helicity diagnostics.
//!
//! Loop integrals use the equispaced rule in the loop parameter, which is
//! spectrally accurate for smooth closed curves. Time integrals in `dt` use the
//! trapezoid rule; integrals against `dW` are Itô sums (left point).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{det, label_lattice, loop_tangents, FlowEnsemble, LabelMap, Mat};
use crate::grid::{sample_fields, Point, Rank, SpectralField, TWO_PI};
use crate::lie;
use crate::spde::{Family, FieldTrajectory};

/// Values of a scalar diagnostic over time.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TimeSeries {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn last(&self) -> f64 {
        *self.values.last().unwrap_or(&0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// `∮ f·dℓ` along the closed curve through `points`.
pub fn loop_integral(f: &SpectralField, points: &[Point], tangents: &[Point]) -> Result<f64> {
    f.expect_rank(Rank::Vector)?;
    let s = sample_fields(&[f], points, false)?.remove(0);
    let d = f.grid().d();
    let mut sum = 0.0;
    for (p, t) in tangents.iter().enumerate() {
        for a in 0..d {
            sum += s.values[a][p] * t[a];
        }
    }
    Ok(sum / points.len() as f64)
}

/// Several loop integrals on the same curve with shared exponentials.
fn loop_integrals(fields: &[&SpectralField], points: &[Point], tangents: &[Point]) -> Result<Vec<f64>> {
    if fields.is_empty() {
        return Ok(vec![]);
    }
    let d = fields[0].grid().d();
    let samples = sample_fields(fields, points, false)?;
    Ok(samples
        .iter()
        .map(|s| {
            let mut sum = 0.0;
            for (p, t) in tangents.iter().enumerate() {
                for a in 0..d {
                    sum += s.values[a][p] * t[a];
                }
            }
            sum / points.len() as f64
        })
        .collect())
}

/// Circulation `∮_Γ u·dℓ`.
pub fn circulation(u: &SpectralField, points: &[Point], winding: [i64; 3]) -> Result<f64> {
    loop_integral(u, points, &loop_tangents(points, winding))
}

fn check_flow(traj: &FieldTrajectory, flow: &FlowEnsemble) -> Result<()> {
    traj.require_every_step()?;
    if flow.positions.len() != traj.snapshots.len() {
        return Err(Error::Precondition(format!(
            "flow has {} steps, trajectory {}",
            flow.positions.len(),
            traj.snapshots.len()
        )));
    }
    Ok(())
}

/// `C_t − C_0` along an advected loop.
pub fn kelvin_residual(traj: &FieldTrajectory, flow: &FlowEnsemble, winding: [i64; 3]) -> Result<TimeSeries> {
    check_flow(traj, flow)?;
    let c0 = circulation(traj.initial(), &flow.positions[0], winding)?;
    let mut values = Vec::with_capacity(flow.positions.len());
    for (u, pts) in traj.snapshots.iter().zip(&flow.positions) {
        values.push(circulation(u, pts, winding)? - c0);
    }
    Ok(TimeSeries { times: traj.times.clone(), values })
}

/// Terms of the circulation transport identity along an advected loop.
#[derive(Debug, Clone, Serialize)]
pub struct Decomposition {
    pub times: Vec<f64>,
    /// `C_t − C_0`
    pub measured: Vec<f64>,
    /// `∫ ∮ D dℓ dt`
    pub drift: Vec<f64>,
    /// `Σ_k ∫ ∮ M_k dℓ dW_k`
    pub martingale: Vec<f64>,
    /// `measured − drift − martingale`
    pub closure: Vec<f64>,
    /// `|C_0| + ‖u_0‖`
    pub scale: f64,
}

impl Decomposition {
    pub fn max_rel_closure(&self) -> f64 {
        self.closure.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.scale
    }
}

/// Integrands of `d∮u·dℓ = ∮D dℓ dt + Σ_k ∮M_k dℓ dW_k` (Itô `dW`) along
/// the Stratonovich flow (`ito_flow = false`) or the Itô flow, together with
/// the covariation rates `Q_k` of `∮M_k dℓ` against `W_k`.
///
/// `D = £ᵀ_c u − f + ½ Σ_k (£ᵀ_ξ £ᵀ_ξ u − 2 £ᵀ_ξ ℙ L_k u)` with carrier `c`,
/// shifted by `−£ᵀ_{½Σξ·∇ξ} u` for the Itô flow; `M_k = £ᵀ_ξ u − ℙ L_k u`,
/// which is linear in `u`, so `Q_k = £ᵀ_ξ M_k(u) − M_k(ℙ L_k u)`.
/// Gradient terms are dropped since they integrate to zero on closed loops.
pub fn transport_integrands(
    traj: &FieldTrajectory,
    u: &SpectralField,
    ito_flow: bool,
) -> Result<(SpectralField, Vec<SpectralField>, Vec<SpectralField>)> {
    let model = &traj.model;
    let basis = model.basis();
    let c = model.carrier(u);
    let mut dfield = lie::lie_transpose(&c, u)?.sub(&model.drift_eval(u)?);
    let mut ms = Vec::with_capacity(basis.kw());
    let mut qs = Vec::with_capacity(basis.kw());
    for (k, xi) in basis.xi().iter().enumerate() {
        let lt = lie::lie_transpose(xi, u)?;
        let sigma = model.noise_op(u, k)?;
        dfield.axpy(0.5, &lie::lie_transpose(xi, &lt)?);
        dfield.axpy(-1.0, &lie::lie_transpose(xi, &sigma)?);
        let m = lt.sub(&sigma);
        let m_sigma = lie::lie_transpose(xi, &sigma)?.sub(&model.noise_op(&sigma, k)?);
        qs.push(lie::lie_transpose(xi, &m)?.sub(&m_sigma));
        ms.push(m);
    }
    if ito_flow {
        dfield.axpy(-1.0, &lie::lie_transpose(basis.induced_drift(), u)?);
    }
    Ok((dfield, ms, qs))
}

/// Accumulates `∫ m dW` (Itô) as the trapezoid sum minus half the
/// covariation, given per-step coefficients `m[step][k]` and covariation rates
/// `q[step][k]`. This is first-order accurate pathwise where the left-point
/// sum is only half-order.
fn ito_integral(m: &[Vec<f64>], q: &[Vec<f64>], traj: &FieldTrajectory) -> Result<Vec<f64>> {
    let h = traj.dt();
    let mut out = vec![0.0];
    for step in 0..m.len() - 1 {
        let dw = traj.driver.dw(step)?;
        let mut inc = 0.0;
        for k in 0..dw.len() {
            inc += 0.5 * (m[step][k] + m[step + 1][k]) * dw[k];
            inc -= 0.25 * h * (q[step][k] + q[step + 1][k]);
        }
        out.push(out.last().unwrap() + inc);
    }
    Ok(out)
}

/// Checks the circulation transport identity step by step.
pub fn circulation_transport_decomposition(
    traj: &FieldTrajectory,
    flow: &FlowEnsemble,
    winding: [i64; 3],
) -> Result<Decomposition> {
    check_flow(traj, flow)?;
    let ito = flow.flavor.is_ito_flow();
    let h = traj.dt();
    let kw = traj.model.basis().kw();
    let mut circ = Vec::with_capacity(flow.positions.len());
    let mut drift = vec![0.0];
    let mut ms = Vec::new();
    let mut qs = Vec::new();
    let mut prev_d = 0.0;
    for (step, (u, pts)) in traj.snapshots.iter().zip(&flow.positions).enumerate() {
        let tang = loop_tangents(pts, winding);
        let (dfield, mf, qf) = transport_integrands(traj, u, ito)?;
        let mut fields: Vec<&SpectralField> = vec![u, &dfield];
        fields.extend(mf.iter());
        fields.extend(qf.iter());
        let ints = loop_integrals(&fields, pts, &tang)?;
        circ.push(ints[0]);
        if step > 0 {
            drift.push(drift.last().unwrap() + 0.5 * h * (prev_d + ints[1]));
        }
        prev_d = ints[1];
        ms.push(ints[2..2 + kw].to_vec());
        qs.push(ints[2 + kw..].to_vec());
    }
    let mart = ito_integral(&ms, &qs, traj)?;
    let measured: Vec<f64> = circ.iter().map(|c| c - circ[0]).collect();
    let closure = measured
        .iter()
        .zip(&drift)
        .zip(&mart)
        .map(|((m, d), w)| m - d - w)
        .collect();
    Ok(Decomposition {
        times: traj.times.clone(),
        measured,
        drift,
        martingale: mart,
        closure,
        scale: circ[0].abs() + traj.initial().l2_norm(),
    })
}

/// Flux of the vorticity through a 2D closed curve (any lift of the curve to
/// the plane), computed from `ω = curl u` without using `u` on the curve.
///
/// With `∂_x Φ = ω` the flux equals `∮ Φ dy` (Green). `Φ` is the periodic
/// antiderivative of the `k_x ≠ 0` modes plus `x g(y)` for the `k_x = 0` part.
pub fn vorticity_flux_2d(u: &SpectralField, points: &[Point], winding: [i64; 3]) -> Result<f64> {
    u.expect_rank(Rank::Vector)?;
    if u.grid().d() != 2 {
        return Err(Error::Unsupported("use vorticity_flux_disc in 3D".into()));
    }
    if winding != [0; 3] {
        return Err(Error::Precondition("vorticity flux needs a contractible loop".into()));
    }
    let g = u.grid().clone();
    let w = u.curl()?;
    let mut phi = w.coeffs()[0].clone();
    let mut gy = vec![Default::default(); g.len()];
    for idx in 0..g.len() {
        let k = g.wavevector(idx);
        if k[0] == 0 {
            gy[idx] = phi[idx];
            phi[idx] = Default::default();
        } else if g.kvec(idx)[0] == 0.0 {
            phi[idx] = Default::default();
        } else {
            let kx = k[0] as f64;
            phi[idx] = phi[idx] / num_complex::Complex64::new(0.0, kx);
        }
    }
    let phi = SpectralField::from_coeffs(&g, Rank::Scalar, vec![phi])?;
    let gy = SpectralField::from_coeffs(&g, Rank::Scalar, vec![gy])?;
    let s = sample_fields(&[&phi, &gy], points, false)?;
    let tang = loop_tangents(points, winding);
    let mut sum = 0.0;
    for (p, t) in tang.iter().enumerate() {
        let big_phi = s[0].values[0][p] + points[p][0] * s[1].values[0][p];
        sum += big_phi * t[1];
    }
    Ok(sum / points.len() as f64)
}

/// Flux of `curl u` through a flat disc in 3D (Gauss–Legendre in radius,
/// equispaced in angle).
pub fn vorticity_flux_disc(u: &SpectralField, center: Point, radius: f64, normal: Point) -> Result<f64> {
    u.expect_rank(Rank::Vector)?;
    if u.grid().d() != 3 {
        return Err(Error::Unsupported("disc flux is three-dimensional".into()));
    }
    let nn = (normal[0].powi(2) + normal[1].powi(2) + normal[2].powi(2)).sqrt();
    if nn == 0.0 || radius <= 0.0 {
        return Err(Error::InvalidArgument("disc needs a nonzero normal and radius".into()));
    }
    let n = [normal[0] / nn, normal[1] / nn, normal[2] / nn];
    let lp = crate::flow::make_loop(
        &crate::flow::LoopSpec::Circle { center: center.to_vec(), radius: 1.0, normal: Some(n.to_vec()) },
        3,
        8,
    )?;
    // unit in-plane directions from the first and second quarter points
    let e1 = [lp.points[0][0] - center[0], lp.points[0][1] - center[1], lp.points[0][2] - center[2]];
    let e2 = [lp.points[2][0] - center[0], lp.points[2][1] - center[1], lp.points[2][2] - center[2]];
    let (nodes, weights) = gauss_legendre(24);
    let na = 96;
    let mut pts = Vec::with_capacity(nodes.len() * na);
    let mut wts = Vec::with_capacity(nodes.len() * na);
    for (x, w) in nodes.iter().zip(&weights) {
        let r = 0.5 * radius * (x + 1.0);
        for j in 0..na {
            let th = TWO_PI * j as f64 / na as f64;
            let (s, c) = th.sin_cos();
            pts.push([
                center[0] + r * (c * e1[0] + s * e2[0]),
                center[1] + r * (c * e1[1] + s * e2[1]),
                center[2] + r * (c * e1[2] + s * e2[2]),
            ]);
            wts.push(0.5 * radius * w * r * TWO_PI / na as f64);
        }
    }
    let om = u.curl()?;
    let s = sample_fields(&[&om], &pts, false)?.remove(0);
    Ok((0..pts.len())
        .map(|p| wts[p] * (0..3).map(|a| s.values[a][p] * n[a]).sum::<f64>())
        .sum())
}

/// Nodes and weights of `n`-point Gauss–Legendre quadrature on `[-1, 1]`.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (mut p0, mut p1) = (1.0, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
                break;
            }
        }
    }
    (x, w)
}

/// Energy `½‖u‖²` and the accumulated terms of its balance.
#[derive(Debug, Clone, Serialize)]
pub struct EnergyLedger {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    /// `ν Σ ∫ ‖ℙ(η·∇u)‖² ds`
    pub dissipation_integral: Vec<f64>,
    /// Accumulated right-hand-side groups, by name.
    pub groups: Vec<(String, Vec<f64>)>,
    /// `E_t − E_0 − Σ groups`
    pub closure: Vec<f64>,
}

impl EnergyLedger {
    pub fn max_rel_closure(&self) -> f64 {
        self.closure.iter().fold(0.0f64, |m, v| m.max(v.abs())) / self.energy[0].abs().max(f64::MIN_POSITIVE)
    }

    /// Largest `|E_t − E_0| / E_0`.
    pub fn max_rel_drift(&self) -> f64 {
        let e0 = self.energy[0];
        self.energy.iter().fold(0.0f64, |m, e| m.max((e - e0).abs())) / e0.abs().max(f64::MIN_POSITIVE)
    }
}

/// Energy balance of a run.
///
/// Circulation-preserving families use
/// `dE = ½Σ(ℙ(u·∇ξ + (∇ξ)ᵀu), £ᵀ_ξ u) dt − νΣ([η,u], £ᵀ_η u) dt − Σ(u, (∇ξ)ᵀu) dW`;
/// the energy-conserving families use `dE = −νΣ‖ℙ(η·∇u)‖² dt`; anything else
/// uses the Itô product rule `dE = (−(u,ℙf) + ½Σ‖ℙσ‖²) dt − Σ(u,ℙσ) dW`.
pub fn energy_ledger(traj: &FieldTrajectory) -> Result<EnergyLedger> {
    traj.require_every_step()?;
    let model = &traj.model;
    let basis = model.basis();
    let nu = model.nu();
    let h = traj.dt();
    let energy: Vec<f64> = traj.snapshots.iter().map(|u| 0.5 * u.l2_norm().powi(2)).collect();
    let names: Vec<&str> = match model.family() {
        Family::EulerPoincare | Family::NsPoincare => vec!["xi_drift", "nu_drift", "martingale"],
        Family::EnergyEuler | Family::EnergyNs => vec![],
        Family::PassiveTransport | Family::EulerItoLoop => vec!["ito_drift", "martingale"],
    };

    // per step: dt-rates, dW coefficients m_k and their covariation rates q_k
    let mut rates = Vec::new();
    let mut ms = Vec::new();
    let mut qs = Vec::new();
    let mut diss = Vec::new();
    for u in &traj.snapshots {
        let mut r = Vec::new();
        let mut m = Vec::new();
        let mut q = Vec::new();
        let mut dr = 0.0;
        for eta in basis.eta() {
            dr += nu * lie::advect(eta, u)?.leray_project()?.l2_norm().powi(2);
        }
        diss.push(dr);
        match model.family() {
            Family::EulerPoincare | Family::NsPoincare => {
                let mut gx = 0.0;
                for (k, xi) in basis.xi().iter().enumerate() {
                    let bu = lie::grad_transpose_apply(xi, u)?;
                    let a = lie::advect(u, xi)?.add(&bu).leray_project()?;
                    gx += 0.5 * a.inner(&lie::lie_transpose(xi, u)?)?;
                    let sigma = model.noise_op(u, k)?;
                    m.push(-u.inner(&bu)?);
                    q.push(sigma.inner(&bu)? + u.inner(&lie::grad_transpose_apply(xi, &sigma)?)?);
                }
                let mut gn = 0.0;
                for eta in basis.eta() {
                    gn -= nu * lie::lie_bracket(eta, u)?.inner(&lie::lie_transpose(eta, u)?)?;
                }
                r.push(gx);
                r.push(gn);
            }
            Family::EnergyEuler | Family::EnergyNs => {}
            Family::PassiveTransport | Family::EulerItoLoop => {
                let mut g = -u.inner(&model.drift_eval(u)?)?;
                for k in 0..basis.kw() {
                    let sigma = model.noise_op(u, k)?;
                    g += 0.5 * sigma.l2_norm().powi(2);
                    m.push(-u.inner(&sigma)?);
                    q.push(sigma.l2_norm().powi(2) + u.inner(&model.noise_op(&sigma, k)?)?);
                }
                r.push(g);
            }
        }
        rates.push(r);
        ms.push(m);
        qs.push(q);
    }
    let trapz = |f: &dyn Fn(usize) -> f64| {
        let mut out = vec![0.0];
        for step in 0..traj.n_steps() {
            out.push(out.last().unwrap() + 0.5 * h * (f(step) + f(step + 1)));
        }
        out
    };
    let dissipation_integral = trapz(&|i| diss[i]);
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let series = if *name == "martingale" {
            if basis.kw() == 0 {
                vec![0.0; energy.len()]
            } else {
                ito_integral(&ms, &qs, traj)?
            }
        } else {
            trapz(&|i| rates[i][g])
        };
        groups.push((name.to_string(), series));
    }
    let energy_family = matches!(model.family(), Family::EnergyEuler | Family::EnergyNs);
    let closure = (0..energy.len())
        .map(|i| {
            let rhs = if energy_family { -dissipation_integral[i] } else { groups.iter().map(|g| g.1[i]).sum() };
            energy[i] - energy[0] - rhs
        })
        .collect();
    Ok(EnergyLedger { times: traj.times.clone(), energy, dissipation_integral, groups, closure })
}

/// `∫ u·curl u` (3D).
pub fn helicity(u: &SpectralField) -> Result<f64> {
    if u.grid().d() != 3 {
        return Err(Error::Unsupported("helicity is three-dimensional".into()));
    }
    u.inner(&u.curl()?)
}

/// `⟨A, B⟩` for a 1-form `A` and vector field `B` (3D).
pub fn magnetic_helicity(a: &SpectralField, b: &SpectralField) -> Result<f64> {
    if a.grid().d() != 3 {
        return Err(Error::Unsupported("magnetic helicity is three-dimensional".into()));
    }
    a.inner(b)
}

/// How the Weber representation is tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WeberMode {
    /// `r(a) = (∇_a X)ᵀ u_t(X(a)) − u_0(a)` must be a gradient in the labels.
    Pullback,
    /// `u_t = ℙ[(∇A)ᵀ u_0(A)]` with `A` from the back-to-labels equation.
    LabelGrid,
}

#[derive(Debug, Clone, Serialize)]
pub struct WeberReport {
    pub mode: WeberMode,
    /// Pullback: `max|d_a r| / max|ω_0|` over the labels, from the sampled
    /// vorticity and deformation gradient. Label grid:
    /// `‖ℙ[(∇A)ᵀu_0(A)] − u_t‖ / ‖u_t‖`.
    pub residual: f64,
    /// Pullback: largest `|∮ r·dℓ|` over label-lattice axis lines, relative
    /// to `max|u_0|·2π`.
    pub loop_mismatch: f64,
}

fn adjugate3(m: &Mat) -> Mat {
    let c = |i: usize, j: usize| {
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
        m[i1][j1] * m[i2][j2] - m[i1][j2] * m[i2][j1]
    };
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            a[j][i] = c(i, j);
        }
    }
    a
}

/// Pullback residual at the final time of `flow`, which must have been run
/// from `label_lattice(d, m)` with deformation tracking.
pub fn weber_pullback(traj: &FieldTrajectory, flow: &FlowEnsemble, m: usize) -> Result<WeberReport> {
    let g = traj.initial().grid().clone();
    let d = g.d();
    let labels = label_lattice(d, m);
    if flow.positions[0].len() != labels.len() || flow.defgrad.is_empty() {
        return Err(Error::Precondition("flow must start on the label lattice with deformation".into()));
    }
    let x = flow.final_positions();
    let f = flow.defgrad.last().unwrap();
    let wt = traj.last().curl()?;
    let w0 = traj.initial().curl()?;
    let mut at_x = sample_fields(&[traj.last(), &wt], x, false)?;
    let (ut, wt) = (at_x.remove(0), at_x.remove(0));
    let mut at_a = sample_fields(&[traj.initial(), &w0], &labels, false)?;
    let (u0, w0s) = (at_a.remove(0), at_a.remove(0));
    let np = labels.len();
    let mut r = vec![vec![0.0; np]; d];
    for p in 0..np {
        for j in 0..d {
            let mut v = -u0.values[j][p];
            for i in 0..d {
                v += f[p][i][j] * ut.values[i][p];
            }
            r[j][p] = v;
        }
    }
    // d r = X*(dω_t) − dω_0, pointwise: adj(F) ω_t(X) − ω_0 (det F ω_t − ω_0 in 2D)
    let mut worst_curl: f64 = 0.0;
    for p in 0..np {
        let e = if d == 2 {
            (det(&f[p], 2) * wt.values[0][p] - w0s.values[0][p]).abs()
        } else {
            let adj = adjugate3(&f[p]);
            (0..3)
                .map(|i| {
                    let v: f64 = (0..3).map(|j| adj[i][j] * wt.values[j][p]).sum();
                    (v - w0s.values[i][p]).powi(2)
                })
                .sum::<f64>()
                .sqrt()
        };
        worst_curl = worst_curl.max(e);
    }
    let residual = worst_curl / w0.max_magnitude().max(f64::MIN_POSITIVE);
    // ∮ r_a da_a along lattice lines in each axis
    let u0max = traj.initial().max_magnitude().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for axis in 0..d {
        let stride = m.pow(axis as u32);
        for start in 0..np {
            if (start / stride) % m != 0 {
                continue;
            }
            let s: f64 = (0..m).map(|j| r[axis][start + j * stride]).sum::<f64>() * TWO_PI / m as f64;
            worst = worst.max(s.abs());
        }
    }
    Ok(WeberReport { mode: WeberMode::Pullback, residual, loop_mismatch: worst / (TWO_PI * u0max) })
}

/// `ℙ[(∇A)ᵀ u_0(A)]` on the field grid from a label map.
pub fn weber_reconstruction(u0: &SpectralField, labels: &LabelMap) -> Result<SpectralField> {
    let g = u0.grid().clone();
    let d = g.d();
    let a = labels.last();
    let nodes = g.nodes();
    let (img, _) = labels.map_points(&nodes)?;
    let u0a = sample_fields(&[u0], &img, false)?.remove(0);
    let da = a.jacobian_physical();
    let len = g.len();
    let mut out = vec![vec![0.0; len]; d];
    for i in 0..d {
        for p in 0..len {
            let mut v = u0a.values[i][p];
            for j in 0..d {
                v += da[j][i][p] * u0a.values[j][p];
            }
            out[i][p] = v;
        }
    }
    SpectralField::from_physical(&g, Rank::Vector, out)?.leray_project()
}

/// Label-grid Weber residual at the final time.
pub fn weber_label_grid(traj: &FieldTrajectory, labels: &LabelMap) -> Result<WeberReport> {
    let rec = weber_reconstruction(traj.initial(), labels)?;
    let ut = traj.last();
    Ok(WeberReport {
        mode: WeberMode::LabelGrid,
        residual: rec.sub(ut).l2_norm() / ut.l2_norm().max(f64::MIN_POSITIVE),
        loop_mismatch: 0.0,
    })
}

/// Cauchy residual at the final time: 2D `max|ω_t(X) − ω_0(a)|`, 3D
/// `max|ω_t(X) − F ω_0(a)|`, both over `max|ω_0|`.
pub fn cauchy_residual(traj: &FieldTrajectory, flow: &FlowEnsemble) -> Result<f64> {
    let d = traj.initial().grid().d();
    let labels = &flow.positions[0];
    let x = flow.final_positions();
    let w0 = traj.initial().curl()?;
    let wt = traj.last().curl()?;
    let s0 = sample_fields(&[&w0], labels, false)?.remove(0);
    let st = sample_fields(&[&wt], x, false)?.remove(0);
    let scale = w0.max_magnitude().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    if d == 2 {
        for p in 0..labels.len() {
            worst = worst.max((st.values[0][p] - s0.values[0][p]).abs());
        }
    } else {
        if flow.defgrad.is_empty() {
            return Err(Error::Precondition("3D Cauchy check needs the deformation gradient".into()));
        }
        let f: &Vec<Mat> = flow.defgrad.last().unwrap();
        for p in 0..labels.len() {
            let mut e2 = 0.0;
            for i in 0..3 {
                let fw: f64 = (0..3).map(|j| f[p][i][j] * s0.values[j][p]).sum();
                e2 += (st.values[i][p] - fw).powi(2);
            }
            worst = worst.max(e2.sqrt());
        }
    }
    Ok(worst / scale)
}

/// Largest `|det F − 1|` at the final time.
pub fn final_volume_defect(flow: &FlowEnsemble, d: usize) -> f64 {
    flow.defgrad
        .last()
        .map(|fs| fs.iter().map(|m| (det(m, d) - 1.0).abs()).fold(0.0, f64::max))
        .unwrap_or(0.0)
}

/// `v(· − s)` for a band-limited field, exactly, by phase shift.
pub fn translate(v: &SpectralField, shift: [f64; 3]) -> SpectralField {
    let g = v.grid().clone();
    let d = g.d();
    let mut coeffs = v.coeffs().to_vec();
    for c in coeffs.iter_mut() {
        for (idx, z) in c.iter_mut().enumerate() {
            let k = g.wavevector(idx);
            let phase: f64 = (0..d).map(|a| k[a] as f64 * shift[a]).sum();
            *z *= num_complex::Complex64::from_polar(1.0, -phase);
        }
    }
    SpectralField::from_coeffs(&g, v.rank(), coeffs).expect("same grid")
}

/// `sup_t ‖u_t − v_t(· − Σ ξ_k W_k(t))‖ / ‖u_t‖` over the saved steps, for
/// spatially constant noise fields, where `v` is the noise-free solution on
/// the same mesh.
pub fn constant_shift_residual(stoch: &FieldTrajectory, det_run: &FieldTrajectory) -> Result<TimeSeries> {
    let basis = stoch.model.basis();
    if !basis.is_constant() {
        return Err(Error::Precondition("shift equivalence needs spatially constant noise".into()));
    }
    if stoch.times != det_run.times {
        return Err(Error::Precondition("runs must share their save mesh".into()));
    }
    let d = stoch.initial().grid().d();
    let means: Vec<Vec<f64>> = basis.xi().iter().map(|x| x.mean()).collect();
    let stride = stoch.save_stride;
    let mut values = Vec::with_capacity(stoch.times.len());
    for (i, (u, v)) in stoch.snapshots.iter().zip(&det_run.snapshots).enumerate() {
        let w = stoch.driver.w_at(i * stride)?;
        let mut shift = [0.0; 3];
        for (m, wk) in means.iter().zip(&w) {
            for a in 0..d {
                shift[a] += m[a] * wk;
            }
        }
        values.push(u.sub(&translate(v, shift)).l2_norm() / u.l2_norm().max(f64::MIN_POSITIVE));
    }
    Ok(TimeSeries { times: stoch.times.clone(), values })
}
