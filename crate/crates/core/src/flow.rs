//! Lagrangian particles, material loops and the back-to-labels map.
//!
//! Positions are never wrapped, so a loop that winds around the torus keeps
//! its winding number in the coordinates. Fields are evaluated off-grid by
//! exact trigonometric interpolation.
//!
//! Stratonovich flows `dX = u dt + Σ ξ_k(X)∘dW_k + √(2ν) Σ η_l(X)∘dB_l` are
//! stepped with Heun (predictor at `u_n`, corrector at `u_{n+1}`), Itô flows
//! with Euler–Maruyama. The deformation gradient `F = ∂X/∂a` follows the
//! linearised equation with the same increments.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sample_fields, Point, Rank, SpectralField, TorusGrid, TWO_PI};
use crate::lie;
use crate::noise::{BrownianDriver, NoiseBasis};
use crate::spde::FieldTrajectory;

pub type Mat = [[f64; 3]; 3];

const IDENTITY: Mat = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Which stochastic flow the particles follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Stratonovich flow, Heun predictor–corrector.
    Strat,
    /// Stratonovich flow written in Itô form with the noise-induced drift,
    /// Euler–Maruyama.
    StratItoForm,
    /// Itô flow `dY = u dt + Σ ξ dW`, Euler–Maruyama.
    Ito,
    /// Itô flow, stepped with Heun on its Stratonovich form
    /// `dY = (u − ½Σ ξ·∇ξ) dt + Σ ξ∘dW`.
    ItoHeun,
}

impl Flavor {
    /// Whether particles follow the Itô flow.
    pub fn is_ito_flow(self) -> bool {
        matches!(self, Flavor::Ito | Flavor::ItoHeun)
    }
}

/// Closed curve descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LoopSpec {
    /// Circle; in 3D it lies in the plane normal to `normal` (default z).
    Circle {
        center: Vec<f64>,
        radius: f64,
        #[serde(default)]
        normal: Option<Vec<f64>>,
    },
    /// Ellipse with semi-axes along x and y (2D).
    Ellipse { center: Vec<f64>, semi_axes: Vec<f64> },
    /// Straight line winding once around the torus along `axis`.
    AxisLine { axis: usize, offset: Vec<f64> },
}

/// Points `X(s_j)`, `s_j = j/P`, of a closed curve, with its winding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialLoop {
    pub points: Vec<Point>,
    pub winding: [i64; 3],
}

fn vec3(v: &[f64], d: usize, what: &str) -> Result<Point> {
    if v.len() != d {
        return Err(Error::InvalidArgument(format!("{what} needs {d} components, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} is not finite")));
    }
    let mut p = [0.0; 3];
    p[..d].copy_from_slice(v);
    Ok(p)
}

/// Samples a closed curve at `p` equispaced parameter values.
pub fn make_loop(spec: &LoopSpec, d: usize, p: usize) -> Result<MaterialLoop> {
    if p < 8 {
        return Err(Error::InvalidArgument(format!("a loop needs at least 8 points, got {p}")));
    }
    let s = |j: usize| j as f64 / p as f64;
    match spec {
        LoopSpec::Circle { center, radius, normal } => {
            let c = vec3(center, d, "circle centre")?;
            if !(*radius > 0.0 && *radius < std::f64::consts::PI) {
                return Err(Error::InvalidArgument(format!("circle radius {radius} not in (0, π)")));
            }
            let (e1, e2) = if d == 2 {
                ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])
            } else {
                let n = match normal {
                    Some(v) => vec3(v, 3, "circle normal")?,
                    None => [0.0, 0.0, 1.0],
                };
                plane_basis(n)?
            };
            let points = (0..p)
                .map(|j| {
                    let (sn, cs) = (TWO_PI * s(j)).sin_cos();
                    let mut x = c;
                    for a in 0..3 {
                        x[a] += radius * (cs * e1[a] + sn * e2[a]);
                    }
                    x
                })
                .collect();
            Ok(MaterialLoop { points, winding: [0; 3] })
        }
        LoopSpec::Ellipse { center, semi_axes } => {
            if d != 2 {
                return Err(Error::Unsupported("ellipse loops are two-dimensional".into()));
            }
            let c = vec3(center, 2, "ellipse centre")?;
            let ax = vec3(semi_axes, 2, "ellipse semi-axes")?;
            if ax[0] <= 0.0 || ax[1] <= 0.0 || ax[0] >= std::f64::consts::PI || ax[1] >= std::f64::consts::PI {
                return Err(Error::InvalidArgument("ellipse semi-axes must lie in (0, π)".into()));
            }
            let points = (0..p)
                .map(|j| {
                    let (sn, cs) = (TWO_PI * s(j)).sin_cos();
                    [c[0] + ax[0] * cs, c[1] + ax[1] * sn, 0.0]
                })
                .collect();
            Ok(MaterialLoop { points, winding: [0; 3] })
        }
        LoopSpec::AxisLine { axis, offset } => {
            if *axis >= d {
                return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
            }
            let o = vec3(offset, d, "line offset")?;
            let mut winding = [0; 3];
            winding[*axis] = 1;
            let points = (0..p)
                .map(|j| {
                    let mut x = o;
                    x[*axis] += TWO_PI * s(j);
                    x
                })
                .collect();
            Ok(MaterialLoop { points, winding })
        }
    }
}

fn plane_basis(n: Point) -> Result<(Point, Point)> {
    let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("zero circle normal".into()));
    }
    let n = [n[0] / norm, n[1] / norm, n[2] / norm];
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let mut e1 = cross3(n, helper);
    let l = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    e1.iter_mut().for_each(|v| *v /= l);
    Ok((e1, cross3(n, e1)))
}

fn cross3(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// `dX/ds` at the loop points, from the spectral derivative in `s` of the
/// periodic part `X(s) − 2π w s`.
pub fn loop_tangents(points: &[Point], winding: [i64; 3]) -> Vec<Point> {
    let p = points.len();
    let mut out = vec![[0.0; 3]; p];
    for a in 0..3 {
        let w = TWO_PI * winding[a] as f64;
        let periodic: Vec<f64> = (0..p).map(|j| points[j][a] - w * j as f64 / p as f64).collect();
        let der = periodic_derivative(&periodic);
        for j in 0..p {
            out[j][a] = w + der[j];
        }
    }
    out
}

/// Derivative with respect to `s ∈ [0, 1)` of equispaced periodic samples.
fn periodic_derivative(f: &[f64]) -> Vec<f64> {
    use rustfft::num_complex::Complex64 as C;
    use rustfft::FftPlanner;
    let p = f.len();
    let mut planner = FftPlanner::new();
    let mut buf: Vec<C> = f.iter().map(|&v| C::new(v, 0.0)).collect();
    planner.plan_fft_forward(p).process(&mut buf);
    for (i, v) in buf.iter_mut().enumerate() {
        let k = match (2 * i).cmp(&p) {
            std::cmp::Ordering::Less => i as i64,
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Greater => i as i64 - p as i64,
        };
        *v *= C::new(0.0, TWO_PI * k as f64 / p as f64);
    }
    planner.plan_fft_inverse(p).process(&mut buf);
    buf.iter().map(|v| v.re).collect()
}

impl MaterialLoop {
    pub fn tangents(&self) -> Vec<Point> {
        loop_tangents(&self.points, self.winding)
    }

    /// Spectrally upsampled copy with `factor` times as many points.
    pub fn refined(&self, factor: usize) -> MaterialLoop {
        use rustfft::num_complex::Complex64 as C;
        use rustfft::FftPlanner;
        let p = self.points.len();
        let q = p * factor.max(1);
        let mut planner = FftPlanner::new();
        let mut out = vec![[0.0; 3]; q];
        for a in 0..3 {
            let w = TWO_PI * self.winding[a] as f64;
            let mut buf: Vec<C> = (0..p)
                .map(|j| C::new(self.points[j][a] - w * j as f64 / p as f64, 0.0))
                .collect();
            planner.plan_fft_forward(p).process(&mut buf);
            let mut big = vec![C::default(); q];
            for i in 0..p {
                let k = if i < p / 2 { i as i64 } else { i as i64 - p as i64 };
                let scale = if p % 2 == 0 && i == p / 2 { 0.5 } else { 1.0 };
                let v = buf[i] * (scale / p as f64);
                big[k.rem_euclid(q as i64) as usize] += v;
                if scale == 0.5 {
                    big[(-k).rem_euclid(q as i64) as usize] += v;
                }
            }
            planner.plan_fft_inverse(q).process(&mut big);
            for j in 0..q {
                out[j][a] = big[j].re + w * j as f64 / q as f64;
            }
        }
        MaterialLoop { points: out, winding: self.winding }
    }

    /// Largest distance between consecutive points.
    pub fn max_spacing(&self) -> f64 {
        let p = self.points.len();
        (0..p)
            .map(|j| {
                let a = self.points[j];
                let mut b = self.points[(j + 1) % p];
                if j + 1 == p {
                    for (x, w) in b.iter_mut().zip(self.winding) {
                        *x += TWO_PI * w as f64;
                    }
                }
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Velocity that carries the particles.
#[derive(Debug, Clone, Copy)]
pub enum VelocitySource<'a> {
    Zero,
    Steady(&'a SpectralField),
    Trajectory(&'a FieldTrajectory),
}

impl<'a> VelocitySource<'a> {
    /// The carrier of a solved model: its velocity, or zero for passive
    /// transport.
    pub fn carrier_of(traj: &'a FieldTrajectory) -> Self {
        if traj.model.is_passive() {
            VelocitySource::Zero
        } else {
            VelocitySource::Trajectory(traj)
        }
    }

    fn at(&self, step: usize) -> Result<Option<&'a SpectralField>> {
        match self {
            VelocitySource::Zero => Ok(None),
            VelocitySource::Steady(f) => Ok(Some(f)),
            VelocitySource::Trajectory(t) => t.at_step(step).map(Some),
        }
    }

    fn check(&self, driver: &BrownianDriver) -> Result<()> {
        if let VelocitySource::Trajectory(t) = self {
            t.require_every_step()?;
            if t.driver.w_seed() != driver.w_seed()
                || t.driver.n_steps() != driver.n_steps()
                || (t.driver.dt() - driver.dt()).abs() > 1e-15
            {
                return Err(Error::Precondition(
                    "velocity trajectory was solved with a different W path or mesh".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdvectOptions {
    pub flavor: Flavor,
    /// Track `F = ∂X/∂a`.
    pub deformation: bool,
    /// Strength of the `√(2ν) η dB` channel; zero switches it off.
    pub nu: f64,
}

impl Default for AdvectOptions {
    fn default() -> Self {
        AdvectOptions { flavor: Flavor::Strat, deformation: false, nu: 0.0 }
    }
}

/// Particle positions (and deformation gradients) at every time step.
#[derive(Debug, Clone)]
pub struct FlowEnsemble {
    pub flavor: Flavor,
    pub times: Vec<f64>,
    /// `[step][particle]`
    pub positions: Vec<Vec<Point>>,
    /// `[step][particle]`, empty unless deformation was tracked.
    pub defgrad: Vec<Vec<Mat>>,
}

impl FlowEnsemble {
    pub fn final_positions(&self) -> &[Point] {
        self.positions.last().expect("non-empty flow")
    }
}

struct Stage {
    disp: Vec<Point>,
    grad: Vec<Mat>,
}

#[allow(clippy::too_many_arguments)]
fn stage(
    d: usize,
    pts: &[Point],
    u: Option<&SpectralField>,
    extra: Option<&SpectralField>,
    basis: &NoiseBasis,
    h: f64,
    dw: &[f64],
    db: &[f64],
    s: f64,
    need_grad: bool,
) -> Result<Stage> {
    let mut fields: Vec<&SpectralField> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    if let Some(u) = u {
        fields.push(u);
        weights.push(h);
    }
    if let Some(e) = extra {
        fields.push(e);
        weights.push(h);
    }
    for (xi, &w) in basis.xi().iter().zip(dw) {
        fields.push(xi);
        weights.push(w);
    }
    if s != 0.0 {
        for (eta, &b) in basis.eta().iter().zip(db) {
            fields.push(eta);
            weights.push(s * b);
        }
    }
    let np = pts.len();
    let mut disp = vec![[0.0; 3]; np];
    let mut grad = if need_grad { vec![[[0.0; 3]; 3]; np] } else { vec![] };
    if fields.is_empty() {
        return Ok(Stage { disp, grad });
    }
    let samples = sample_fields(&fields, pts, need_grad)?;
    for (smp, &w) in samples.iter().zip(&weights) {
        for i in 0..d {
            for p in 0..np {
                disp[p][i] += w * smp.values[i][p];
            }
            if need_grad {
                for p in 0..np {
                    for j in 0..d {
                        grad[p][i][j] += w * smp.gradients[i][p][j];
                    }
                }
            }
        }
    }
    Ok(Stage { disp, grad })
}

fn matmul(a: &Mat, b: &Mat, d: usize) -> Mat {
    let mut c = [[0.0; 3]; 3];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                c[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    c
}

/// Advances particles through the stochastic flow driven by `velocity` and
/// the basis of `basis`, using the increments of `driver`.
pub fn advect(
    initial: &[Point],
    velocity: VelocitySource<'_>,
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    opts: AdvectOptions,
) -> Result<FlowEnsemble> {
    velocity.check(driver)?;
    if initial.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite initial position".into()));
    }
    if driver.kw() != basis.kw() || (opts.nu > 0.0 && driver.kb() != basis.kb()) {
        return Err(Error::InvalidArgument("driver channels do not match the basis".into()));
    }
    let d = basis.grid().d();
    let h = driver.dt();
    let s = (2.0 * opts.nu).sqrt();
    // Stratonovich-to-Itô shift ½Σξ·∇ξ + νΣη·∇η, added or removed
    let induced = match opts.flavor {
        Flavor::StratItoForm | Flavor::ItoHeun => {
            let mut f = basis.induced_drift().clone();
            if opts.nu > 0.0 {
                for eta in basis.eta() {
                    f.axpy(opts.nu, &lie::advect(eta, eta)?);
                }
            }
            if opts.flavor == Flavor::ItoHeun {
                f.scale_mut(-1.0);
            }
            Some(f)
        }
        _ => None,
    };
    let mut x = initial.to_vec();
    let mut f: Vec<Mat> = if opts.deformation { vec![IDENTITY; x.len()] } else { vec![] };
    let mut times = vec![0.0];
    let mut positions = vec![x.clone()];
    let mut defgrad = if opts.deformation { vec![f.clone()] } else { vec![] };
    for step in 0..driver.n_steps() {
        let (dw, db) = driver.increments(step)?;
        let u0 = velocity.at(step)?;
        let st0 = stage(d, &x, u0, induced.as_ref(), basis, h, &dw, &db, s, opts.deformation)?;
        match opts.flavor {
            Flavor::Strat | Flavor::ItoHeun => {
                let xp: Vec<Point> = x
                    .iter()
                    .zip(&st0.disp)
                    .map(|(a, v)| [a[0] + v[0], a[1] + v[1], a[2] + v[2]])
                    .collect();
                let u1 = velocity.at(step + 1)?;
                let st1 = stage(d, &xp, u1, induced.as_ref(), basis, h, &dw, &db, s, opts.deformation)?;
                for p in 0..x.len() {
                    for a in 0..d {
                        x[p][a] += 0.5 * (st0.disp[p][a] + st1.disp[p][a]);
                    }
                }
                if opts.deformation {
                    for p in 0..f.len() {
                        let g0f = matmul(&st0.grad[p], &f[p], d);
                        let mut fp = f[p];
                        for i in 0..d {
                            for j in 0..d {
                                fp[i][j] += g0f[i][j];
                            }
                        }
                        let g1f = matmul(&st1.grad[p], &fp, d);
                        for i in 0..d {
                            for j in 0..d {
                                f[p][i][j] += 0.5 * (g0f[i][j] + g1f[i][j]);
                            }
                        }
                    }
                }
            }
            Flavor::StratItoForm | Flavor::Ito => {
                for p in 0..x.len() {
                    for a in 0..d {
                        x[p][a] += st0.disp[p][a];
                    }
                }
                if opts.deformation {
                    for p in 0..f.len() {
                        let gf = matmul(&st0.grad[p], &f[p], d);
                        for i in 0..d {
                            for j in 0..d {
                                f[p][i][j] += gf[i][j];
                            }
                        }
                    }
                }
            }
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NotFinite { step: step + 1, time: (step + 1) as f64 * h });
        }
        times.push((step + 1) as f64 * h);
        positions.push(x.clone());
        if opts.deformation {
            defgrad.push(f.clone());
        }
    }
    Ok(FlowEnsemble { flavor: opts.flavor, times, positions, defgrad })
}

/// [`advect`] with the deformation gradient tracked.
pub fn evolve_deformation(
    initial: &[Point],
    velocity: VelocitySource<'_>,
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    flavor: Flavor,
) -> Result<FlowEnsemble> {
    advect(initial, velocity, basis, driver, AdvectOptions { flavor, deformation: true, nu: 0.0 })
}

pub fn det(m: &Mat, d: usize) -> f64 {
    if d == 2 {
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    } else {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Largest `|det F − 1|` over particles at each step.
pub fn volume_defect(flow: &FlowEnsemble, d: usize) -> Vec<f64> {
    flow.defgrad
        .iter()
        .map(|fs| fs.iter().map(|m| (det(m, d) - 1.0).abs()).fold(0.0, f64::max))
        .collect()
}

/// Determinant of the Itô flow `dX = b dt + Σ ξ dW` against the closed form
/// `exp(∫ (∇·b − ½ Σ (Dξ)ᵀ:Dξ) dt + Σ ∫ ∇·ξ dW)`.
#[derive(Debug, Clone, Serialize)]
pub struct JacobianCheck {
    pub times: Vec<f64>,
    /// `[step][particle]`
    pub determinant: Vec<Vec<f64>>,
    pub formula: Vec<Vec<f64>>,
    /// Largest relative mismatch over particles and times.
    pub max_rel_mismatch: f64,
}

/// The flow is stepped with [`Flavor::ItoHeun`]; the `dW` integral is the
/// trapezoid sum less half its covariation `ξ·∇(∇·ξ) dt`, which keeps the
/// comparison first order along the path.
pub fn jacobian_formula_check(
    initial: &[Point],
    velocity: VelocitySource<'_>,
    basis: &NoiseBasis,
    driver: &BrownianDriver,
) -> Result<JacobianCheck> {
    let flow = evolve_deformation(initial, velocity, basis, driver, Flavor::ItoHeun)?;
    let d = basis.grid().d();
    let h = driver.dt();
    let np = initial.len();
    let divs: Vec<SpectralField> = basis.xi().iter().map(|x| x.divergence()).collect::<Result<_>>()?;
    // per step and particle: dt-rate, and per channel the dW coefficient
    // div ξ and its covariation rate ξ·∇(div ξ)
    let rates = |step: usize| -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let pts = &flow.positions[step];
        let mut rate = vec![0.0; np];
        if let Some(b) = velocity.at(step)? {
            let s = sample_fields(&[b], pts, true)?.remove(0);
            for p in 0..np {
                rate[p] += (0..d).map(|i| s.gradients[i][p][i]).sum::<f64>();
            }
        }
        let mut g = vec![vec![0.0; np]; basis.kw()];
        let mut c = vec![vec![0.0; np]; basis.kw()];
        if basis.kw() > 0 {
            let xs: Vec<&SpectralField> = basis.xi().iter().collect();
            let smp = sample_fields(&xs, pts, true)?;
            let dv: Vec<&SpectralField> = divs.iter().collect();
            let sdv = sample_fields(&dv, pts, true)?;
            for k in 0..basis.kw() {
                let s = &smp[k];
                for p in 0..np {
                    let mut tr = 0.0;
                    for i in 0..d {
                        for j in 0..d {
                            tr += s.gradients[i][p][j] * s.gradients[j][p][i];
                        }
                    }
                    rate[p] -= 0.5 * tr;
                    g[k][p] = sdv[k].values[0][p];
                    c[k][p] = (0..d).map(|i| s.values[i][p] * sdv[k].gradients[0][p][i]).sum();
                }
            }
        }
        Ok((rate, g, c))
    };
    let mut log_j = vec![0.0; np];
    let mut formula = vec![vec![1.0; np]];
    let mut prev = rates(0)?;
    for step in 0..driver.n_steps() {
        let next = rates(step + 1)?;
        let dw = driver.dw(step)?;
        for p in 0..np {
            log_j[p] += 0.5 * h * (prev.0[p] + next.0[p]);
            for k in 0..dw.len() {
                log_j[p] += 0.5 * (prev.1[k][p] + next.1[k][p]) * dw[k];
                log_j[p] -= 0.25 * h * (prev.2[k][p] + next.2[k][p]);
            }
        }
        formula.push(log_j.iter().map(|l| l.exp()).collect());
        prev = next;
    }
    let determinant: Vec<Vec<f64>> = flow.defgrad.iter().map(|fs| fs.iter().map(|m| det(m, d)).collect()).collect();
    let mut worst: f64 = 0.0;
    for (a, b) in determinant.iter().zip(&formula) {
        for (x, y) in a.iter().zip(b) {
            worst = worst.max((x - y).abs() / y.abs());
        }
    }
    Ok(JacobianCheck { times: flow.times, determinant, formula, max_rel_mismatch: worst })
}

/// Displacement `a_t = A_t(x) − x` of the back-to-labels map.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub times: Vec<f64>,
    pub displacements: Vec<SpectralField>,
}

impl LabelMap {
    pub fn last(&self) -> &SpectralField {
        self.displacements.last().expect("non-empty label map")
    }

    /// `A(x) = x + a(x)` and `∇A` at the given points, with the final
    /// displacement.
    pub fn map_points(&self, pts: &[Point]) -> Result<(Vec<Point>, Vec<Mat>)> {
        let a = self.last();
        let d = a.grid().d();
        let s = sample_fields(&[a], pts, true)?.remove(0);
        let mut img = pts.to_vec();
        let mut jac = vec![IDENTITY; pts.len()];
        for p in 0..pts.len() {
            for i in 0..d {
                img[p][i] += s.values[i][p];
                for j in 0..d {
                    jac[p][i][j] += s.gradients[i][p][j];
                }
            }
        }
        Ok((img, jac))
    }
}

/// Upper bound on `|∇a|` before the label map is considered unresolved.
pub const LABEL_GRADIENT_LIMIT: f64 = 20.0;

/// Solves `da + V·∇a + V = 0`, `V = u dt + Σ ξ ∘dW + √(2ν) Σ η ∘dB`, from
/// `a_0 = 0` with stochastic Heun. `A_t = x + a_t` inverts the flow.
pub fn solve_back_to_labels(
    traj: &FieldTrajectory,
    basis: &NoiseBasis,
    driver: &BrownianDriver,
    nu: f64,
    save_stride: usize,
) -> Result<LabelMap> {
    let velocity = VelocitySource::carrier_of(traj);
    velocity.check(driver)?;
    if save_stride == 0 {
        return Err(Error::InvalidArgument("save stride must be positive".into()));
    }
    let g = basis.grid().clone();
    let d = g.d();
    let h = driver.dt();
    let s = (2.0 * nu).sqrt();
    let xi_phys: Vec<&[Vec<f64>]> = basis.xi().iter().map(|f| f.physical()).collect();
    let eta_phys: Vec<&[Vec<f64>]> = basis.eta().iter().map(|f| f.physical()).collect();
    let velocity_phys = |step: usize, dw: &[f64], db: &[f64]| -> Result<Vec<Vec<f64>>> {
        let mut v = vec![vec![0.0; g.len()]; d];
        if let Some(u) = velocity.at(step)? {
            let up = u.physical();
            for i in 0..d {
                v[i].iter_mut().zip(&up[i]).for_each(|(a, b)| *a = h * b);
            }
        }
        for (x, &w) in xi_phys.iter().zip(dw) {
            for i in 0..d {
                v[i].iter_mut().zip(&x[i]).for_each(|(a, b)| *a += w * b);
            }
        }
        if s != 0.0 {
            for (e, &b) in eta_phys.iter().zip(db) {
                for i in 0..d {
                    v[i].iter_mut().zip(&e[i]).for_each(|(a, c)| *a += s * b * c);
                }
            }
        }
        Ok(v)
    };
    let rhs = |a: &SpectralField, v: &[Vec<f64>], step: usize| -> Result<SpectralField> {
        let da = a.jacobian_physical();
        let len = g.len();
        let mut out = vec![vec![0.0; len]; d];
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                for p in 0..len {
                    out[i][p] -= v[j][p] * da[i][j][p];
                    worst = worst.max(da[i][j][p].abs());
                }
            }
            for p in 0..len {
                out[i][p] -= v[i][p];
            }
        }
        if !worst.is_finite() || worst > LABEL_GRADIENT_LIMIT {
            return Err(Error::Stability {
                step,
                time: step as f64 * h,
                detail: format!("label map unresolved: max|∇a| = {worst:.3e}"),
            });
        }
        Ok(lie::from_products(a, Rank::Vector, out))
    };
    let mut a = SpectralField::zeros(&g, Rank::Vector);
    let mut times = vec![0.0];
    let mut disps = vec![a.clone()];
    for step in 0..driver.n_steps() {
        let (dw, db) = driver.increments(step)?;
        let v0 = velocity_phys(step, &dw, &db)?;
        let k1 = rhs(&a, &v0, step)?;
        let pred = a.add(&k1);
        let v1 = velocity_phys(step + 1, &dw, &db)?;
        let k2 = rhs(&pred, &v1, step)?;
        a.axpy(0.5, &k1);
        a.axpy(0.5, &k2);
        if !a.is_finite() {
            return Err(Error::NotFinite { step: step + 1, time: (step + 1) as f64 * h });
        }
        if (step + 1) % save_stride == 0 || step + 1 == driver.n_steps() {
            times.push((step + 1) as f64 * h);
            disps.push(a.clone());
        }
    }
    Ok(LabelMap { times, displacements: disps })
}

/// Regular `m^d` lattice of label points.
pub fn label_lattice(d: usize, m: usize) -> Vec<Point> {
    let h = TWO_PI / m as f64;
    let total = m.pow(d as u32);
    (0..total)
        .map(|idx| {
            let mut p = [0.0; 3];
            let mut r = idx;
            for v in p.iter_mut().take(d) {
                *v = (r % m) as f64 * h;
                r /= m;
            }
            p
        })
        .collect()
}

/// Grid on which label-lattice data is differentiated.
pub fn lattice_grid(d: usize, m: usize) -> Result<Arc<TorusGrid>> {
    TorusGrid::with_dealias(d, m, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::BasisSpec;

    #[test]
    fn circle_tangents_are_exact() {
        let l = make_loop(&LoopSpec::Circle { center: vec![1.0, 2.0], radius: 0.5, normal: None }, 2, 64).unwrap();
        for (j, t) in l.tangents().iter().enumerate() {
            let s = TWO_PI * j as f64 / 64.0;
            assert!((t[0] + 0.5 * TWO_PI * s.sin()).abs() < 1e-12);
            assert!((t[1] - 0.5 * TWO_PI * s.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn winding_line_tangent_is_constant() {
        let l = make_loop(&LoopSpec::AxisLine { axis: 1, offset: vec![0.3, 0.0] }, 2, 32).unwrap();
        for t in l.tangents() {
            assert!((t[1] - TWO_PI).abs() < 1e-12 && t[0].abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_keeps_the_curve() {
        let l = make_loop(&LoopSpec::Circle { center: vec![3.0, 3.0], radius: 1.0, normal: None }, 2, 16).unwrap();
        let r = l.refined(4);
        assert_eq!(r.points.len(), 64);
        for (j, p) in r.points.iter().enumerate() {
            let s = TWO_PI * j as f64 / 64.0;
            assert!((p[0] - 3.0 - s.cos()).abs() < 1e-12 && (p[1] - 3.0 - s.sin()).abs() < 1e-12);
        }
        assert!(r.max_spacing() < l.max_spacing());
    }

    #[test]
    fn bad_loops_rejected() {
        assert!(make_loop(&LoopSpec::Circle { center: vec![0.0, 0.0], radius: -1.0, normal: None }, 2, 32).is_err());
        assert!(make_loop(&LoopSpec::AxisLine { axis: 2, offset: vec![0.0, 0.0] }, 2, 32).is_err());
        assert!(make_loop(&LoopSpec::Circle { center: vec![0.0, 0.0], radius: 1.0, normal: None }, 2, 4).is_err());
    }

    #[test]
    fn uniform_drift_translates_particles() {
        let g = TorusGrid::new(2, 16).unwrap();
        let basis = NoiseBasis::empty(&g);
        let u = SpectralField::from_fn(&g, Rank::Vector, |_| [0.5, -0.25, 0.0]);
        let driver = BrownianDriver::new(1, 2, 0.01, 100, 0, 0).unwrap();
        let flow = advect(&[[0.1, 0.2, 0.0]], VelocitySource::Steady(&u), &basis, &driver, AdvectOptions::default())
            .unwrap();
        let x = flow.final_positions()[0];
        assert!((x[0] - 0.6).abs() < 1e-12 && (x[1] + 0.05).abs() < 1e-12);
    }

    #[test]
    fn constant_noise_shifts_by_the_brownian_path() {
        let g = TorusGrid::new(2, 16).unwrap();
        let basis = NoiseBasis::from_specs(&g, &BasisSpec::Euclidean { amplitude: 0.3 }, &BasisSpec::None).unwrap();
        let driver = BrownianDriver::new(4, 5, 0.01, 50, 2, 0).unwrap();
        let flow = advect(&[[1.0, 1.0, 0.0]], VelocitySource::Zero, &basis, &driver, AdvectOptions::default()).unwrap();
        let w = driver.w_at(50).unwrap();
        let x = flow.final_positions()[0];
        assert!((x[0] - 1.0 - 0.3 * w[0]).abs() < 1e-12 && (x[1] - 1.0 - 0.3 * w[1]).abs() < 1e-12);
    }

    #[test]
    fn shear_flow_deformation_is_exact() {
        // steady u = (sin y, 0): X(t) = (a1 + t sin a2, a2), F = [[1, t cos a2], [0, 1]]
        let g = TorusGrid::new(2, 16).unwrap();
        let basis = NoiseBasis::empty(&g);
        let u = SpectralField::from_fn(&g, Rank::Vector, |x| [x[1].sin(), 0.0, 0.0]);
        let driver = BrownianDriver::new(1, 2, 0.05, 20, 0, 0).unwrap();
        let flow =
            evolve_deformation(&[[0.0, 0.7, 0.0]], VelocitySource::Steady(&u), &basis, &driver, Flavor::Strat).unwrap();
        let f = flow.defgrad.last().unwrap()[0];
        assert!((f[0][1] - 0.7f64.cos()).abs() < 1e-12);
        assert!((det(&f, 2) - 1.0).abs() < 1e-12);
        assert!((flow.final_positions()[0][0] - 0.7f64.sin()).abs() < 1e-12);
    }

    #[test]
    fn lattice_layout() {
        let pts = label_lattice(2, 4);
        assert_eq!(pts.len(), 16);
        assert!((pts[5][0] - TWO_PI / 4.0).abs() < 1e-15 && (pts[5][1] - TWO_PI / 4.0).abs() < 1e-15);
    }
}
