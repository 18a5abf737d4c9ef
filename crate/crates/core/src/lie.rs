//! Lie derivatives of vector fields and 1-forms on the torus.
//!
//! With `(∇ξ)_{ij} = ∂_j ξ^i`:
//!
//! ```text
//! £ᵀ_ξ u  = ξ·∇u + (∇ξ)ᵀu        (ξ^j ∂_j u_i + ∂_i ξ^j u_j)
//! [ξ, w]  = ξ·∇w − w·∇ξ
//! ```
//!
//! All products are formed on the grid and truncated to the 2/3 mask.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Rank, SpectralField};

/// How `£ᵀ_ξ £ᵀ_ξ u` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoubleLieMode {
    /// Two applications of [`lie_transpose`].
    Composed,
    /// `(ξ·∇ξ)·∇u + ξξ:∇∇u + 2(∇ξ)ᵀ(ξ·∇)u + (∇(ξ·∇ξ))ᵀu`.
    Expanded,
    /// `ξ×curl(ξ×curl u) + ∇(ξ·∇(ξ·u))`, 3D only.
    Cross3d,
}

fn check_pair(a: &SpectralField, b: &SpectralField) -> Result<()> {
    a.expect_rank(Rank::Vector)?;
    b.expect_rank(Rank::Vector)?;
    a.expect_same_grid(b)
}

pub(crate) fn from_products(like: &SpectralField, rank: Rank, vals: Vec<Vec<f64>>) -> SpectralField {
    let mut f = SpectralField::from_physical(like.grid(), rank, vals).expect("finite products");
    f.dealias_mut();
    f
}

/// `(ξ·∇)u` for vector `u`.
pub fn advect(xi: &SpectralField, u: &SpectralField) -> Result<SpectralField> {
    check_pair(xi, u)?;
    let d = xi.grid().d();
    let x = xi.physical();
    let du = u.jacobian_physical();
    let len = xi.grid().len();
    let mut out = vec![vec![0.0; len]; d];
    for i in 0..d {
        for j in 0..d {
            for p in 0..len {
                out[i][p] += x[j][p] * du[i][j][p];
            }
        }
    }
    Ok(from_products(xi, Rank::Vector, out))
}

/// `ξ·∇f` for scalar `f`.
pub fn advect_scalar(xi: &SpectralField, f: &SpectralField) -> Result<SpectralField> {
    xi.expect_rank(Rank::Vector)?;
    f.expect_rank(Rank::Scalar)?;
    xi.expect_same_grid(f)?;
    let d = xi.grid().d();
    let x = xi.physical();
    let df = f.jacobian_physical();
    let len = xi.grid().len();
    let mut out = vec![0.0; len];
    for j in 0..d {
        for p in 0..len {
            out[p] += x[j][p] * df[0][j][p];
        }
    }
    Ok(from_products(xi, Rank::Scalar, vec![out]))
}

/// `(∇ξ)ᵀu`, i.e. `∂_i ξ^j u_j`.
pub fn grad_transpose_apply(xi: &SpectralField, u: &SpectralField) -> Result<SpectralField> {
    check_pair(xi, u)?;
    let d = xi.grid().d();
    let dx = xi.jacobian_physical();
    let up = u.physical();
    let len = xi.grid().len();
    let mut out = vec![vec![0.0; len]; d];
    for i in 0..d {
        for j in 0..d {
            for p in 0..len {
                out[i][p] += dx[j][i][p] * up[j][p];
            }
        }
    }
    Ok(from_products(xi, Rank::Vector, out))
}

/// Pointwise dot product `ξ·u`.
pub fn dot(xi: &SpectralField, u: &SpectralField) -> Result<SpectralField> {
    check_pair(xi, u)?;
    let x = xi.physical();
    let up = u.physical();
    let len = xi.grid().len();
    let mut out = vec![0.0; len];
    for (a, b) in x.iter().zip(up) {
        for p in 0..len {
            out[p] += a[p] * b[p];
        }
    }
    Ok(from_products(xi, Rank::Scalar, vec![out]))
}

/// Pointwise cross product of 3D vector fields.
pub fn cross(a: &SpectralField, b: &SpectralField) -> Result<SpectralField> {
    check_pair(a, b)?;
    if a.grid().d() != 3 {
        return Err(Error::Unsupported("cross product needs d = 3".into()));
    }
    let x = a.physical();
    let y = b.physical();
    let len = a.grid().len();
    let mut out = vec![vec![0.0; len]; 3];
    for p in 0..len {
        out[0][p] = x[1][p] * y[2][p] - x[2][p] * y[1][p];
        out[1][p] = x[2][p] * y[0][p] - x[0][p] * y[2][p];
        out[2][p] = x[0][p] * y[1][p] - x[1][p] * y[0][p];
    }
    Ok(from_products(a, Rank::Vector, out))
}

/// Lie derivative of the 1-form `u` along `ξ`.
pub fn lie_transpose(xi: &SpectralField, u: &SpectralField) -> Result<SpectralField> {
    check_pair(xi, u)?;
    let d = xi.grid().d();
    let x = xi.physical();
    let up = u.physical();
    let dx = xi.jacobian_physical();
    let du = u.jacobian_physical();
    let len = xi.grid().len();
    let mut out = vec![vec![0.0; len]; d];
    for i in 0..d {
        let o = &mut out[i];
        for j in 0..d {
            let (xj, duij, dxji, uj) = (&x[j], &du[i][j], &dx[j][i], &up[j]);
            for p in 0..len {
                o[p] += xj[p] * duij[p] + dxji[p] * uj[p];
            }
        }
    }
    Ok(from_products(xi, Rank::Vector, out))
}

/// Vector-field commutator `[ξ, w] = ξ·∇w − w·∇ξ`.
pub fn lie_bracket(xi: &SpectralField, w: &SpectralField) -> Result<SpectralField> {
    check_pair(xi, w)?;
    let d = xi.grid().d();
    let x = xi.physical();
    let wp = w.physical();
    let dx = xi.jacobian_physical();
    let dw = w.jacobian_physical();
    let len = xi.grid().len();
    let mut out = vec![vec![0.0; len]; d];
    for i in 0..d {
        let o = &mut out[i];
        for j in 0..d {
            let (xj, dwij, wj, dxij) = (&x[j], &dw[i][j], &wp[j], &dx[i][j]);
            for p in 0..len {
                o[p] += xj[p] * dwij[p] - wj[p] * dxij[p];
            }
        }
    }
    Ok(from_products(xi, Rank::Vector, out))
}

/// `£ᵀ_ξ £ᵀ_ξ u` by the requested route.
pub fn double_lie_transpose(xi: &SpectralField, u: &SpectralField, mode: DoubleLieMode) -> Result<SpectralField> {
    check_pair(xi, u)?;
    match mode {
        DoubleLieMode::Composed => lie_transpose(xi, &lie_transpose(xi, u)?),
        DoubleLieMode::Expanded => expanded(xi, u),
        DoubleLieMode::Cross3d => {
            if xi.grid().d() != 3 {
                return Err(Error::Unsupported("cross3d double Lie derivative needs d = 3".into()));
            }
            let inner = cross(xi, &u.curl()?)?;
            let a = cross(xi, &inner.curl()?)?;
            let b = advect_scalar(xi, &dot(xi, u)?)?.gradient()?;
            Ok(a.add(&b))
        }
    }
}

fn expanded(xi: &SpectralField, u: &SpectralField) -> Result<SpectralField> {
    let g = xi.grid().clone();
    let d = g.d();
    let len = g.len();
    let q = advect(xi, xi)?;
    let qp = q.physical();
    let dq = q.jacobian_physical();
    let x = xi.physical();
    let dx = xi.jacobian_physical();
    let up = u.physical();
    let du = u.jacobian_physical();
    let xdu = advect(xi, u)?;
    let xdu = xdu.physical();
    // second derivatives ∂_j∂_k u_i
    let mut hess = vec![vec![vec![]; d]; d];
    for j in 0..d {
        for k in j..d {
            let h = u.partial(j)?.partial(k)?;
            hess[j][k] = h.physical().to_vec();
        }
    }
    let mut out = vec![vec![0.0; len]; d];
    for i in 0..d {
        let o = &mut out[i];
        for j in 0..d {
            for p in 0..len {
                o[p] += qp[j][p] * du[i][j][p]
                    + 2.0 * dx[j][i][p] * xdu[j][p]
                    + dq[j][i][p] * up[j][p];
            }
            for k in 0..d {
                let (a, b) = if j <= k { (j, k) } else { (k, j) };
                let h = &hess[a][b][i];
                for p in 0..len {
                    o[p] += x[j][p] * x[k][p] * h[p];
                }
            }
        }
    }
    Ok(from_products(xi, Rank::Vector, out))
}

/// `|(£ᵀ_ξ v, w) + (v, [ξ, w])| / (‖v‖‖w‖)`, zero for divergence-free `ξ`.
pub fn adjoint_pairing_residual(xi: &SpectralField, v: &SpectralField, w: &SpectralField) -> Result<f64> {
    check_pair(xi, v)?;
    check_pair(xi, w)?;
    let lhs = lie_transpose(xi, v)?.inner(w)?;
    let rhs = v.inner(&lie_bracket(xi, w)?)?;
    let scale = v.l2_norm() * w.l2_norm();
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((lhs + rhs).abs() / scale)
}

/// Outcome of one operator identity check.
#[derive(Debug, Clone, Serialize)]
pub struct OperatorReport {
    pub identity: String,
    pub d: usize,
    pub n: usize,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel(a: &SpectralField, b: &SpectralField) -> f64 {
    let s = a.l2_norm().max(b.l2_norm());
    if s == 0.0 {
        0.0
    } else {
        a.sub(b).l2_norm() / s
    }
}

/// Runs the operator identity checks on random band-limited fields small
/// enough that every triple product stays inside the dealias mask.
pub fn run_identity_suite(d: usize, n: usize, seed: u64, tolerance: f64) -> Result<Vec<OperatorReport>> {
    let g = crate::grid::TorusGrid::new(d, n)?;
    let band = (g.keep() / 3).max(1);
    let xi = SpectralField::random_band_limited(&g, Rank::Vector, band, seed, true);
    let u = SpectralField::random_band_limited(&g, Rank::Vector, band, seed.wrapping_add(1), false);
    let w = SpectralField::random_band_limited(&g, Rank::Vector, band, seed.wrapping_add(2), false);
    let f = SpectralField::random_band_limited(&g, Rank::Scalar, band, seed.wrapping_add(3), false);

    let mut checks: Vec<(&str, f64)> = Vec::new();
    let composed = double_lie_transpose(&xi, &u, DoubleLieMode::Composed)?;
    let expanded = double_lie_transpose(&xi, &u, DoubleLieMode::Expanded)?;
    checks.push(("double_lie_composed_vs_expanded", rel(&composed, &expanded)));
    if d == 3 {
        let cr = double_lie_transpose(&xi, &u, DoubleLieMode::Cross3d)?;
        checks.push(("double_lie_composed_vs_cross3d", rel(&composed, &cr)));
    }
    checks.push(("adjoint_pairing", adjoint_pairing_residual(&xi, &u, &w)?));
    let bracket_sum = lie_bracket(&xi, &w)?.add(&lie_bracket(&w, &xi)?);
    checks.push(("bracket_antisymmetry", bracket_sum.l2_norm() / lie_bracket(&xi, &w)?.l2_norm()));
    let gf = f.gradient()?;
    checks.push((
        "transpose_commutes_with_gradient",
        rel(&lie_transpose(&xi, &gf)?, &advect_scalar(&xi, &f)?.gradient()?),
    ));
    let lu_curl = lie_transpose(&xi, &u)?.curl()?;
    let transported = if d == 2 { advect_scalar(&xi, &u.curl()?)? } else { lie_bracket(&xi, &u.curl()?)? };
    checks.push(("curl_intertwines_transpose_and_bracket", rel(&lu_curl, &transported)));
    let pu = u.leray_project()?;
    checks.push(("projection_idempotent", rel(&pu.leray_project()?, &pu)));
    checks.push(("projection_divergence_free", pu.divergence()?.l2_norm() / u.divergence()?.l2_norm().max(pu.l2_norm())));

    Ok(checks
        .into_iter()
        .map(|(name, r)| OperatorReport {
            identity: name.to_string(),
            d,
            n,
            residual: r,
            tolerance,
            passed: r.is_finite() && r <= tolerance,
        })
        .collect())
}
