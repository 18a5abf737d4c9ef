//! Monte Carlo estimates conditioned on a fixed `W` path.
//!
//! The field equation only sees `W`, so one trajectory serves every member;
//! members differ only in the `B` increments of their back-to-labels solve.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{circulation, weber_reconstruction};
use crate::error::{Error, Result};
use crate::flow::{loop_tangents, solve_back_to_labels, LabelMap};
use crate::grid::{sample_fields, Point, SpectralField};
use crate::noise::BrownianDriver;
use crate::spde::FieldTrajectory;

/// Largest tolerated fraction of failed members.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

const CHUNK: usize = 64;

/// Mean and standard error of a scalar over ensemble members.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionalEstimate {
    pub target: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub members: usize,
    pub failures: usize,
    pub w_seed: u64,
    pub b_seed_base: u64,
}

/// Member values of a conditional Kelvin run, in member order. Failed members
/// are `None`.
#[derive(Debug, Clone, Serialize)]
pub struct MemberValues {
    pub target: f64,
    pub values: Vec<Option<f64>>,
    pub w_seed: u64,
    pub b_seed_base: u64,
}

impl MemberValues {
    /// Estimate from the first `m` members.
    pub fn prefix(&self, m: usize) -> Result<ConditionalEstimate> {
        if m == 0 || m > self.values.len() {
            return Err(Error::InvalidArgument(format!("prefix {m} of {} members", self.values.len())));
        }
        let head = &self.values[..m];
        let ok: Vec<f64> = head.iter().flatten().copied().collect();
        let failures = m - ok.len();
        if failures as f64 > MAX_FAILURE_FRACTION * m as f64 {
            return Err(Error::Stability {
                step: 0,
                time: 0.0,
                detail: format!("{failures} of {m} members failed"),
            });
        }
        let (mc_mean, mc_stderr) = mean_stderr(&ok);
        Ok(ConditionalEstimate {
            target: self.target,
            mc_mean,
            mc_stderr,
            members: ok.len(),
            failures,
            w_seed: self.w_seed,
            b_seed_base: self.b_seed_base,
        })
    }

    pub fn estimate(&self) -> Result<ConditionalEstimate> {
        self.prefix(self.values.len())
    }
}

/// Pairwise summation in a fixed order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error; identical samples give exactly zero error.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    match xs.len() {
        0 => (f64::NAN, f64::NAN),
        _ if xs.iter().all(|x| x.to_bits() == xs[0].to_bits()) => (xs[0], 0.0),
        1 => (xs[0], f64::NAN),
        n => {
            let mean = pairwise_sum(xs) / n as f64;
            let dev: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
            let var = pairwise_sum(&dev) / (n - 1) as f64;
            (mean, (var / n as f64).sqrt())
        }
    }
}

fn member_map(traj: &FieldTrajectory, b_seed_base: u64, m: u64) -> Result<Option<LabelMap>> {
    let basis = traj.model.basis();
    let driver = traj.driver.for_member(b_seed_base, m);
    match solve_back_to_labels(traj, basis, &driver, traj.model.nu(), traj.driver.n_steps()) {
        Ok(map) => Ok(Some(map)),
        Err(Error::Stability { detail, .. }) => {
            log::warn!("member {m} dropped: {detail}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn check_conditional(traj: &FieldTrajectory) -> Result<()> {
    if traj.driver.kb() != traj.model.basis().kb() {
        return Err(Error::InvalidArgument("driver B channels do not match the basis".into()));
    }
    traj.require_every_step()
}

/// `∮_Γ (∇A)ᵀ u_0(A)·dℓ` for one label map.
pub fn image_loop_circulation(u0: &SpectralField, map: &LabelMap, points: &[Point], tangents: &[Point]) -> Result<f64> {
    let d = u0.grid().d();
    let (img, jac) = map.map_points(points)?;
    let s = sample_fields(&[u0], &img, false)?.remove(0);
    let mut sum = 0.0;
    for p in 0..points.len() {
        for i in 0..d {
            let jt: f64 = (0..d).map(|j| jac[p][i][j] * tangents[p][j]).sum();
            sum += s.values[i][p] * jt;
        }
    }
    Ok(sum / points.len() as f64)
}

/// Per-member image-loop circulations for members `0..m`, computed in
/// parallel and returned in member order.
pub fn conditional_kelvin_members(
    traj: &FieldTrajectory,
    points: &[Point],
    winding: [i64; 3],
    b_seed_base: u64,
    m: usize,
) -> Result<MemberValues> {
    check_conditional(traj)?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one member".into()));
    }
    let tangents = loop_tangents(points, winding);
    let u0 = traj.initial();
    let values = (0..m as u64)
        .into_par_iter()
        .map(|k| match member_map(traj, b_seed_base, k)? {
            Some(map) => image_loop_circulation(u0, &map, points, &tangents).map(Some),
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MemberValues {
        target: circulation(traj.last(), points, winding)?,
        values,
        w_seed: traj.driver.w_seed(),
        b_seed_base,
    })
}

/// `E[∮_Γ (∇A_T)ᵀ u_0(A_T)·dℓ | W]` against `∮_Γ u_T·dℓ`.
pub fn conditional_kelvin(
    traj: &FieldTrajectory,
    points: &[Point],
    winding: [i64; 3],
    b_seed_base: u64,
    m: usize,
) -> Result<ConditionalEstimate> {
    conditional_kelvin_members(traj, points, winding, b_seed_base, m)?.estimate()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalWeber {
    /// `‖E[ℙ(∇A)ᵀu_0(A)] − u_T‖ / ‖u_T‖`
    pub distance: f64,
    pub members: usize,
    pub failures: usize,
    #[serde(skip)]
    pub mean_field: SpectralField,
}

/// Averages the Weber reconstruction over `m` members.
pub fn conditional_weber(traj: &FieldTrajectory, b_seed_base: u64, m: usize) -> Result<ConditionalWeber> {
    check_conditional(traj)?;
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one member".into()));
    }
    let u0 = traj.initial();
    let mut sum = SpectralField::zeros(u0.grid(), u0.rank());
    let mut ok = 0;
    for start in (0..m).step_by(CHUNK) {
        let end = (start + CHUNK).min(m);
        let recs = (start as u64..end as u64)
            .into_par_iter()
            .map(|k| match member_map(traj, b_seed_base, k)? {
                Some(map) => weber_reconstruction(u0, &map).map(Some),
                None => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        for r in recs.iter().flatten() {
            sum.axpy(1.0, r);
            ok += 1;
        }
    }
    let failures = m - ok;
    if failures as f64 > MAX_FAILURE_FRACTION * m as f64 {
        return Err(Error::Stability { step: 0, time: 0.0, detail: format!("{failures} of {m} members failed") });
    }
    sum.scale_mut(1.0 / ok as f64);
    let ut = traj.last();
    Ok(ConditionalWeber {
        distance: sum.sub(ut).l2_norm() / ut.l2_norm().max(f64::MIN_POSITIVE),
        members: ok,
        failures,
        mean_field: sum,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two matching points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("abscissae must differ".into()));
    }
    Ok(sxy / sxx)
}

/// What a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    DtHalving,
    MScaling,
    Amplitude,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub x: f64,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub points: Vec<SweepPoint>,
    /// Log-log slope of each named value against `x`; values that are not
    /// positive at every point have no slope.
    pub slopes: BTreeMap<String, f64>,
}

/// Evaluates `eval` at each sweep point and fits slopes.
pub fn run_sweep(
    kind: SweepKind,
    xs: &[f64],
    mut eval: impl FnMut(f64) -> Result<BTreeMap<String, f64>>,
) -> Result<SweepReport> {
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!("a sweep needs at least 3 points, got {}", xs.len())));
    }
    let mut points = Vec::with_capacity(xs.len());
    for &x in xs {
        points.push(SweepPoint { x, values: eval(x)? });
    }
    let mut slopes = BTreeMap::new();
    for key in points[0].values.keys() {
        let ys: Option<Vec<f64>> = points.iter().map(|p| p.values.get(key).copied()).collect();
        if let Some(ys) = ys {
            if let Ok(s) = fit_loglog_slope(xs, &ys) {
                slopes.insert(key.clone(), s);
            }
        }
    }
    Ok(SweepReport { kind, points, slopes })
}

/// Coarse drivers for a dt-halving sweep, all sharing the finest path.
pub fn dt_ladder(fine: &BrownianDriver, factors: &[usize]) -> Result<Vec<BrownianDriver>> {
    factors.iter().map(|&f| fine.coarsen(f)).collect()
}
