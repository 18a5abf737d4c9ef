//! Periodic grids on the torus `[0, 2π)^d` and band-limited fields.
//!
//! A [`SpectralField`] stores normalised Fourier coefficients, so that for a
//! band-limited field
//!
//! ```text
//! f(x) = Σ_k c_k exp(i k·x),      c_k = N^{-d} Σ_j f(x_j) exp(-i k·x_j)
//! ```
//!
//! Grid values are produced lazily and cached. Physical layout is row-major
//! with the x index fastest: `idx = i0 + N*i1 + N^2*i2`.
//!
//! Nonlinear products are formed on the grid and truncated with the 2/3 mask
//! (see [`SpectralField::dealias`]). Derivatives use `i k` with the Nyquist
//! wavenumber set to zero, so `laplacian == divergence ∘ gradient` exactly.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = std::f64::consts::TAU;

/// A point in the torus. The third coordinate is ignored in 2D.
pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Scalar,
    Vector,
}

impl Rank {
    pub fn name(self) -> &'static str {
        match self {
            Rank::Scalar => "scalar",
            Rank::Vector => "vector",
        }
    }

    pub fn components(self, d: usize) -> usize {
        match self {
            Rank::Scalar => 1,
            Rank::Vector => d,
        }
    }
}

/// Uniform grid on the `d`-torus with cached FFT plans and the dealias mask.
pub struct TorusGrid {
    d: usize,
    n: usize,
    keep: usize,
    len: usize,
    /// Signed integer wavenumber per axis index; index `n/2` maps to `-n/2`.
    kint: Vec<i64>,
    /// Wavenumber used for differentiation (Nyquist zeroed).
    kder: Vec<f64>,
    neg: Vec<usize>,
    mask: Vec<bool>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for TorusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusGrid")
            .field("d", &self.d)
            .field("n", &self.n)
            .field("keep", &self.keep)
            .finish()
    }
}

impl PartialEq for TorusGrid {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.n == other.n && self.keep == other.keep
    }
}

impl TorusGrid {
    /// Grid with the standard 2/3 dealias fraction.
    pub fn new(d: usize, n: usize) -> Result<Arc<Self>> {
        Self::with_dealias(d, n, 2.0 / 3.0)
    }

    pub fn with_dealias(d: usize, n: usize, fraction: f64) -> Result<Arc<Self>> {
        if d != 2 && d != 3 {
            return Err(Error::InvalidArgument(format!("dimension must be 2 or 3, got {d}")));
        }
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "points per axis must be even and at least 4, got {n}"
            )));
        }
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!("dealias fraction {fraction} not in (0, 1]")));
        }
        let half = n / 2;
        // keep |k| <= fraction * n/2, with a little slack so 2/3 of 48 keeps 16
        let keep = ((fraction * half as f64) + 1e-9).floor() as usize;
        let kint: Vec<i64> = (0..n)
            .map(|i| if i < half { i as i64 } else { i as i64 - n as i64 })
            .collect();
        let kder: Vec<f64> = kint
            .iter()
            .map(|&k| if k.unsigned_abs() as usize == half { 0.0 } else { k as f64 })
            .collect();
        let len = n.pow(d as u32);
        let mut neg = vec![0; len];
        let mut mask = vec![false; len];
        for idx in 0..len {
            let ii = unravel(idx, n, d);
            let mut j = 0;
            let mut stride = 1;
            let mut keepit = true;
            for a in 0..d {
                j += ((n - ii[a]) % n) * stride;
                stride *= n;
                keepit &= kint[ii[a]].unsigned_abs() as usize <= keep;
            }
            neg[idx] = j;
            mask[idx] = keepit;
        }
        let mut planner = FftPlanner::new();
        Ok(Arc::new(TorusGrid {
            d,
            n,
            keep,
            len,
            kint,
            kder,
            neg,
            mask,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of grid nodes, `n^d`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Largest retained `|k_a|` under the dealias mask.
    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn spacing(&self) -> f64 {
        TWO_PI / self.n as f64
    }

    pub fn volume(&self) -> f64 {
        TWO_PI.powi(self.d as i32)
    }

    pub fn index_of(&self, ii: [usize; 3]) -> usize {
        let n = self.n;
        ii[0] + n * ii[1] + if self.d == 3 { n * n * ii[2] } else { 0 }
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        unravel(idx, self.n, self.d)
    }

    pub fn node(&self, idx: usize) -> Point {
        let ii = self.multi_index(idx);
        let h = self.spacing();
        [ii[0] as f64 * h, ii[1] as f64 * h, ii[2] as f64 * h]
    }

    pub fn nodes(&self) -> Vec<Point> {
        (0..self.len).map(|i| self.node(i)).collect()
    }

    /// Integer wavevector of a spectral index.
    pub fn wavevector(&self, idx: usize) -> [i64; 3] {
        let ii = self.multi_index(idx);
        let mut k = [0; 3];
        for a in 0..self.d {
            k[a] = self.kint[ii[a]];
        }
        k
    }

    /// Spectral index of an integer wavevector, if representable.
    pub fn spectral_index(&self, k: [i64; 3]) -> Option<usize> {
        let n = self.n as i64;
        let mut ii = [0usize; 3];
        for a in 0..self.d {
            if k[a] < -n / 2 || k[a] >= n / 2 + 1 {
                return None;
            }
            ii[a] = k[a].rem_euclid(n) as usize;
        }
        if self.d == 2 && k[2] != 0 {
            return None;
        }
        Some(self.index_of(ii))
    }

    /// Differentiation wavevector of a spectral index.
    pub fn kvec(&self, idx: usize) -> [f64; 3] {
        let ii = self.multi_index(idx);
        let mut k = [0.0; 3];
        for a in 0..self.d {
            k[a] = self.kder[ii[a]];
        }
        k
    }

    pub fn retained(&self, idx: usize) -> bool {
        self.mask[idx]
    }

    /// Unnormalised complex FFT over all axes, in place.
    fn transform(&self, buf: &mut [C], forward: bool) {
        let n = self.n;
        let len = self.len;
        debug_assert_eq!(buf.len(), len);
        let plan = if forward { &self.fwd } else { &self.inv };
        let mut scratch = vec![C::default(); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        let mut lines = vec![C::default(); len];
        for axis in 1..self.d {
            let stride = n.pow(axis as u32);
            let block = stride * n;
            let mut li = 0;
            for outer in (0..len).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    let line = &mut lines[li * n..(li + 1) * n];
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = buf[base + j * stride];
                    }
                    li += 1;
                }
            }
            plan.process_with_scratch(&mut lines, &mut scratch);
            li = 0;
            for outer in (0..len).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    let line = &lines[li * n..(li + 1) * n];
                    for (j, v) in line.iter().enumerate() {
                        buf[base + j * stride] = *v;
                    }
                    li += 1;
                }
            }
        }
    }

    /// Normalised coefficients of real grid functions. Two real arrays share
    /// one complex transform.
    pub fn forward_real(&self, fields: &[&[f64]]) -> Vec<Vec<C>> {
        let scale = 1.0 / self.len as f64;
        let mut out = Vec::with_capacity(fields.len());
        for pair in fields.chunks(2) {
            let mut z: Vec<C> = if pair.len() == 2 {
                pair[0].iter().zip(pair[1]).map(|(&a, &b)| C::new(a, b)).collect()
            } else {
                pair[0].iter().map(|&a| C::new(a, 0.0)).collect()
            };
            self.transform(&mut z, true);
            if pair.len() == 2 {
                let mut c1 = vec![C::default(); self.len];
                let mut c2 = vec![C::default(); self.len];
                for idx in 0..self.len {
                    let zk = z[idx] * scale;
                    let zm = z[self.neg[idx]].conj() * scale;
                    c1[idx] = (zk + zm) * 0.5;
                    c2[idx] = (zk - zm) * C::new(0.0, -0.5);
                }
                out.push(c1);
                out.push(c2);
            } else {
                let mut c1 = vec![C::default(); self.len];
                for idx in 0..self.len {
                    let zk = z[idx] * scale;
                    let zm = z[self.neg[idx]].conj() * scale;
                    c1[idx] = (zk + zm) * 0.5;
                }
                out.push(c1);
            }
        }
        out
    }

    /// Grid values of Hermitian coefficient arrays.
    pub fn inverse_real(&self, coeffs: &[&[C]]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(coeffs.len());
        for pair in coeffs.chunks(2) {
            let mut z: Vec<C> = if pair.len() == 2 {
                pair[0].iter().zip(pair[1]).map(|(&a, &b)| a + C::new(-b.im, b.re)).collect()
            } else {
                pair[0].to_vec()
            };
            self.transform(&mut z, false);
            out.push(z.iter().map(|v| v.re).collect());
            if pair.len() == 2 {
                out.push(z.iter().map(|v| v.im).collect());
            }
        }
        out
    }

    fn hermitize(&self, c: &mut [C]) {
        let orig = c.to_vec();
        for idx in 0..self.len {
            c[idx] = (orig[idx] + orig[self.neg[idx]].conj()) * 0.5;
        }
    }
}

fn unravel(idx: usize, n: usize, d: usize) -> [usize; 3] {
    let mut ii = [0; 3];
    let mut r = idx;
    for v in ii.iter_mut().take(d) {
        *v = r % n;
        r /= n;
    }
    ii
}

/// A scalar or vector field on a [`TorusGrid`].
#[derive(Clone)]
pub struct SpectralField {
    grid: Arc<TorusGrid>,
    rank: Rank,
    coeffs: Vec<Vec<C>>,
    phys: OnceLock<Vec<Vec<f64>>>,
}

impl fmt::Debug for SpectralField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralField")
            .field("grid", &self.grid)
            .field("rank", &self.rank)
            .finish_non_exhaustive()
    }
}

impl SpectralField {
    pub fn zeros(grid: &Arc<TorusGrid>, rank: Rank) -> Self {
        let nc = rank.components(grid.d);
        SpectralField {
            grid: grid.clone(),
            rank,
            coeffs: vec![vec![C::default(); grid.len]; nc],
            phys: OnceLock::new(),
        }
    }

    /// Field from grid values, one array per component.
    pub fn from_physical(grid: &Arc<TorusGrid>, rank: Rank, values: Vec<Vec<f64>>) -> Result<Self> {
        let nc = rank.components(grid.d);
        if values.len() != nc || values.iter().any(|v| v.len() != grid.len) {
            return Err(Error::InvalidArgument(format!(
                "expected {nc} component arrays of length {}",
                grid.len
            )));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite grid value".into()));
        }
        let refs: Vec<&[f64]> = values.iter().map(|v| v.as_slice()).collect();
        let coeffs = grid.forward_real(&refs);
        let phys = OnceLock::new();
        let _ = phys.set(values);
        Ok(SpectralField { grid: grid.clone(), rank, coeffs, phys })
    }

    /// Field from coefficient arrays. The Hermitian part is kept so the field
    /// is real.
    pub fn from_coeffs(grid: &Arc<TorusGrid>, rank: Rank, mut coeffs: Vec<Vec<C>>) -> Result<Self> {
        let nc = rank.components(grid.d);
        if coeffs.len() != nc || coeffs.iter().any(|v| v.len() != grid.len) {
            return Err(Error::InvalidArgument(format!(
                "expected {nc} coefficient arrays of length {}",
                grid.len
            )));
        }
        for c in coeffs.iter_mut() {
            grid.hermitize(c);
        }
        Ok(Self::from_coeffs_unchecked(grid, rank, coeffs))
    }

    pub(crate) fn from_coeffs_unchecked(grid: &Arc<TorusGrid>, rank: Rank, coeffs: Vec<Vec<C>>) -> Self {
        SpectralField { grid: grid.clone(), rank, coeffs, phys: OnceLock::new() }
    }

    /// Samples `f` at the grid nodes. Only the first `ncomp` entries are used.
    pub fn from_fn(grid: &Arc<TorusGrid>, rank: Rank, f: impl Fn(Point) -> [f64; 3]) -> Self {
        let nc = rank.components(grid.d);
        let mut values = vec![vec![0.0; grid.len]; nc];
        for idx in 0..grid.len {
            let v = f(grid.node(idx));
            for (c, arr) in values.iter_mut().enumerate() {
                arr[idx] = v[c];
            }
        }
        Self::from_physical(grid, rank, values).expect("from_fn produced non-finite values")
    }

    /// Vector field assembled from scalar components.
    pub fn from_components(parts: &[SpectralField]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no components".into()))?;
        let grid = first.grid.clone();
        if parts.len() != grid.d {
            return Err(Error::InvalidArgument(format!(
                "need {} components, got {}",
                grid.d,
                parts.len()
            )));
        }
        let mut coeffs = Vec::with_capacity(grid.d);
        for p in parts {
            p.expect_rank(Rank::Scalar)?;
            first.expect_same_grid(p)?;
            coeffs.push(p.coeffs[0].clone());
        }
        Ok(Self::from_coeffs_unchecked(&grid, Rank::Vector, coeffs))
    }

    /// Random real field with modes `|k_a| <= band`, unit RMS, optionally
    /// divergence-free.
    pub fn random_band_limited(
        grid: &Arc<TorusGrid>,
        rank: Rank,
        band: usize,
        seed: u64,
        solenoidal: bool,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nc = rank.components(grid.d);
        let mut coeffs = vec![vec![C::default(); grid.len]; nc];
        for idx in 0..grid.len {
            let k = grid.wavevector(idx);
            let inside = (0..grid.d).all(|a| k[a].unsigned_abs() as usize <= band);
            for c in coeffs.iter_mut() {
                let (re, im): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if inside && grid.retained(idx) {
                    c[idx] = C::new(re, im);
                }
            }
        }
        for c in coeffs.iter_mut() {
            grid.hermitize(c);
        }
        let mut f = Self::from_coeffs_unchecked(grid, rank, coeffs);
        if solenoidal && rank == Rank::Vector {
            f = f.leray_project().expect("vector field");
        }
        let rms = f.l2_norm() / grid.volume().sqrt();
        if rms > 0.0 {
            f.scale_mut(1.0 / rms);
        }
        f
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn ncomp(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[Vec<C>] {
        &self.coeffs
    }

    /// Mutable coefficients. Drops the cached grid values.
    pub fn coeffs_mut(&mut self) -> &mut [Vec<C>] {
        self.phys = OnceLock::new();
        &mut self.coeffs
    }

    /// Grid values, one array per component.
    pub fn physical(&self) -> &[Vec<f64>] {
        self.phys.get_or_init(|| {
            let refs: Vec<&[C]> = self.coeffs.iter().map(|c| c.as_slice()).collect();
            self.grid.inverse_real(&refs)
        })
    }

    pub fn component(&self, i: usize) -> SpectralField {
        Self::from_coeffs_unchecked(&self.grid, Rank::Scalar, vec![self.coeffs[i].clone()])
    }

    pub(crate) fn expect_rank(&self, rank: Rank) -> Result<()> {
        if self.rank != rank {
            return Err(Error::RankMismatch { expected: rank.name(), got: self.rank.name() });
        }
        Ok(())
    }

    pub(crate) fn expect_same_grid(&self, other: &SpectralField) -> Result<()> {
        if *self.grid != *other.grid {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", self.grid, other.grid)));
        }
        Ok(())
    }

    pub(crate) fn expect_compatible(&self, other: &SpectralField) -> Result<()> {
        self.expect_same_grid(other)?;
        other.expect_rank(self.rank)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn scale_mut(&mut self, a: f64) {
        for c in self.coeffs_mut() {
            c.iter_mut().for_each(|v| *v *= a);
        }
    }

    pub fn scaled(&self, a: f64) -> SpectralField {
        let mut f = self.clone();
        f.scale_mut(a);
        f
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &SpectralField) {
        assert!(self.rank == other.rank && *self.grid == *other.grid, "axpy on incompatible fields");
        for (c, o) in self.coeffs_mut().iter_mut().zip(&other.coeffs) {
            for (v, w) in c.iter_mut().zip(o) {
                *v += *w * a;
            }
        }
    }

    pub fn add(&self, other: &SpectralField) -> SpectralField {
        let mut f = self.clone();
        f.axpy(1.0, other);
        f
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        let mut f = self.clone();
        f.axpy(-1.0, other);
        f
    }

    /// L2 inner product over the torus (Parseval).
    pub fn inner(&self, other: &SpectralField) -> Result<f64> {
        self.expect_compatible(other)?;
        let mut s = 0.0;
        for (a, b) in self.coeffs.iter().zip(&other.coeffs) {
            for (x, y) in a.iter().zip(b) {
                s += x.re * y.re + x.im * y.im;
            }
        }
        Ok(s * self.grid.volume())
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for a in &self.coeffs {
            s += a.iter().map(|x| x.norm_sqr()).sum::<f64>();
        }
        (s * self.grid.volume()).sqrt()
    }

    /// Largest pointwise magnitude over grid nodes.
    pub fn max_magnitude(&self) -> f64 {
        let p = self.physical();
        (0..self.grid.len)
            .map(|i| p.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().flatten().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Spatial mean of each component.
    pub fn mean(&self) -> Vec<f64> {
        self.coeffs.iter().map(|c| c[0].re).collect()
    }

    // ---- spectral operators ---------------------------------------------

    /// Zeroes every mode outside the 2/3 mask.
    pub fn dealias(&self) -> SpectralField {
        let mut f = self.clone();
        f.dealias_mut();
        f
    }

    pub fn dealias_mut(&mut self) {
        let g = self.grid.clone();
        for c in self.coeffs_mut() {
            for (idx, v) in c.iter_mut().enumerate() {
                if !g.mask[idx] {
                    *v = C::default();
                }
            }
        }
    }

    /// True when no retained-mask violations exceed `tol` in magnitude.
    pub fn is_dealiased(&self, tol: f64) -> bool {
        self.coeffs
            .iter()
            .all(|c| c.iter().enumerate().all(|(i, v)| self.grid.mask[i] || v.norm() <= tol))
    }

    fn derivative_coeffs(&self, comp: usize, axis: usize) -> Vec<C> {
        let g = &self.grid;
        self.coeffs[comp]
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let k = g.kder[g.multi_index(idx)[axis]];
                C::new(-k * v.im, k * v.re)
            })
            .collect()
    }

    /// `∂_axis` of every component.
    pub fn partial(&self, axis: usize) -> Result<SpectralField> {
        if axis >= self.grid.d {
            return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
        }
        let coeffs = (0..self.ncomp()).map(|c| self.derivative_coeffs(c, axis)).collect();
        Ok(Self::from_coeffs_unchecked(&self.grid, self.rank, coeffs))
    }

    pub fn gradient(&self) -> Result<SpectralField> {
        self.expect_rank(Rank::Scalar)?;
        let coeffs = (0..self.grid.d).map(|a| self.derivative_coeffs(0, a)).collect();
        Ok(Self::from_coeffs_unchecked(&self.grid, Rank::Vector, coeffs))
    }

    pub fn divergence(&self) -> Result<SpectralField> {
        self.expect_rank(Rank::Vector)?;
        let mut out = vec![C::default(); self.grid.len];
        for a in 0..self.grid.d {
            for (o, v) in out.iter_mut().zip(self.derivative_coeffs(a, a)) {
                *o += v;
            }
        }
        Ok(Self::from_coeffs_unchecked(&self.grid, Rank::Scalar, vec![out]))
    }

    /// Scalar vorticity `∂_x v - ∂_y u` in 2D, vector curl in 3D.
    pub fn curl(&self) -> Result<SpectralField> {
        self.expect_rank(Rank::Vector)?;
        let diff = |c: usize, a: usize, b: usize, e: usize| -> Vec<C> {
            let x = self.derivative_coeffs(c, a);
            let y = self.derivative_coeffs(b, e);
            x.iter().zip(&y).map(|(p, q)| p - q).collect()
        };
        if self.grid.d == 2 {
            Ok(Self::from_coeffs_unchecked(&self.grid, Rank::Scalar, vec![diff(1, 0, 0, 1)]))
        } else {
            let coeffs = vec![diff(2, 1, 1, 2), diff(0, 2, 2, 0), diff(1, 0, 0, 1)];
            Ok(Self::from_coeffs_unchecked(&self.grid, Rank::Vector, coeffs))
        }
    }

    /// 2D velocity `(-∂_y ψ, ∂_x ψ)` of a stream function, so `curl u = Δψ`.
    pub fn perp_gradient(&self) -> Result<SpectralField> {
        self.expect_rank(Rank::Scalar)?;
        if self.grid.d != 2 {
            return Err(Error::Unsupported("perp gradient is two-dimensional".into()));
        }
        let dx = self.derivative_coeffs(0, 0);
        let dy: Vec<C> = self.derivative_coeffs(0, 1).iter().map(|v| -v).collect();
        Ok(Self::from_coeffs_unchecked(&self.grid, Rank::Vector, vec![dy, dx]))
    }

    pub fn laplacian(&self) -> SpectralField {
        let g = &self.grid;
        let coeffs = self
            .coeffs
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .map(|(idx, v)| {
                        let k = g.kvec(idx);
                        v * -(k[0] * k[0] + k[1] * k[1] + k[2] * k[2])
                    })
                    .collect()
            })
            .collect();
        Self::from_coeffs_unchecked(g, self.rank, coeffs)
    }

    /// Leray projection onto divergence-free fields; the mean is kept.
    pub fn leray_project(&self) -> Result<SpectralField> {
        self.expect_rank(Rank::Vector)?;
        let g = &self.grid;
        let d = g.d;
        let mut out = self.coeffs.clone();
        for idx in 0..g.len {
            let k = g.kvec(idx);
            let k2: f64 = k.iter().map(|x| x * x).sum();
            if k2 == 0.0 {
                continue;
            }
            let mut kdotu = C::default();
            for a in 0..d {
                kdotu += self.coeffs[a][idx] * k[a];
            }
            for a in 0..d {
                out[a][idx] = self.coeffs[a][idx] - kdotu * (k[a] / k2);
            }
        }
        Ok(Self::from_coeffs_unchecked(g, Rank::Vector, out))
    }

    /// Solves `Δψ = f` with zero-mean `ψ`. Returns `ψ` and the mean removed
    /// from `f` (solvability requires it to vanish).
    pub fn poisson_solve(&self) -> Result<(SpectralField, f64)> {
        self.expect_rank(Rank::Scalar)?;
        let g = &self.grid;
        let removed = self.coeffs[0][0].re;
        if removed.abs() > 1e-12 {
            log::info!("poisson_solve: removed source mean {removed:.3e}");
        }
        let out = self.coeffs[0]
            .iter()
            .enumerate()
            .map(|(idx, v)| {
                let k = g.kvec(idx);
                let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
                if k2 == 0.0 {
                    C::default()
                } else {
                    v / -k2
                }
            })
            .collect();
        Ok((Self::from_coeffs_unchecked(g, Rank::Scalar, vec![out]), removed))
    }

    /// Grid values of `∂_j u_i`, indexed `[i][j]`.
    pub fn jacobian_physical(&self) -> Vec<Vec<Vec<f64>>> {
        let d = self.grid.d;
        let nc = self.ncomp();
        let mut spec = Vec::with_capacity(nc * d);
        for c in 0..nc {
            for a in 0..d {
                spec.push(self.derivative_coeffs(c, a));
            }
        }
        let refs: Vec<&[C]> = spec.iter().map(|v| v.as_slice()).collect();
        let mut phys = self.grid.inverse_real(&refs).into_iter();
        (0..nc).map(|_| (0..d).map(|_| phys.next().unwrap()).collect()).collect()
    }

    /// Largest `|k_a|` carrying a nonzero coefficient, per axis.
    fn band(&self) -> [usize; 3] {
        let g = &self.grid;
        let mut b = [0usize; 3];
        for c in &self.coeffs {
            for (idx, v) in c.iter().enumerate() {
                if v.re != 0.0 || v.im != 0.0 {
                    let k = g.wavevector(idx);
                    for a in 0..g.d {
                        b[a] = b[a].max(k[a].unsigned_abs() as usize);
                    }
                }
            }
        }
        b
    }

    /// Exact trigonometric interpolation at arbitrary points, `[component][point]`.
    pub fn evaluate_at_points(&self, pts: &[Point]) -> Result<Vec<Vec<f64>>> {
        Ok(sample_fields(&[self], pts, false)?.remove(0).values)
    }
}

/// Values and optional gradients of a field at a set of points.
#[derive(Debug, Clone)]
pub struct Samples {
    /// `[component][point]`
    pub values: Vec<Vec<f64>>,
    /// `[component][point][axis]`, empty unless requested.
    pub gradients: Vec<Vec<[f64; 3]>>,
}

struct AxisModes {
    k: Vec<f64>,
    /// derivative factor; zero for Nyquist
    dk: Vec<f64>,
    nyq: Vec<bool>,
    idx: Vec<usize>,
    weight: Vec<f64>,
}

impl AxisModes {
    fn new(n: usize, band: usize, half_range: bool) -> Self {
        let half = n / 2;
        let lo: i64 = if half_range { 0 } else { -(band as i64) };
        let mut m = AxisModes { k: vec![], dk: vec![], nyq: vec![], idx: vec![], weight: vec![] };
        for k in lo..=band as i64 {
            if k == -(half as i64) {
                continue; // shares its slot with +n/2
            }
            let nyq = k.unsigned_abs() as usize == half;
            m.k.push(k as f64);
            m.dk.push(if nyq { 0.0 } else { k as f64 });
            m.nyq.push(nyq);
            m.idx.push(k.rem_euclid(n as i64) as usize);
            m.weight.push(if !half_range || k == 0 || nyq { 1.0 } else { 2.0 });
        }
        m
    }

    fn phases(&self, x: f64, out: &mut Vec<C>) {
        out.clear();
        for (j, &k) in self.k.iter().enumerate() {
            let (s, c) = (k * x).sin_cos();
            out.push(if self.nyq[j] { C::new(c, 0.0) } else { C::new(c, s) });
        }
    }
}

/// Evaluates several fields (all on one grid) at the same points, sharing the
/// per-point exponentials. Gradients come from the same sums.
pub fn sample_fields(fields: &[&SpectralField], pts: &[Point], gradient: bool) -> Result<Vec<Samples>> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("no fields to sample".into()))?;
    let g = first.grid.clone();
    for f in fields {
        first.expect_same_grid(f)?;
    }
    if pts.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("non-finite sample position".into()));
    }
    let d = g.d;
    let n = g.n;
    let mut band = [0usize; 3];
    for f in fields {
        let b = f.band();
        for a in 0..3 {
            band[a] = band[a].max(b[a]);
        }
    }
    let ax = AxisModes::new(n, band[0], true);
    let ay = AxisModes::new(n, band[1], false);
    let az = if d == 3 {
        AxisModes::new(n, band[2], false)
    } else {
        AxisModes { k: vec![0.0], dk: vec![0.0], nyq: vec![false], idx: vec![0], weight: vec![1.0] }
    };
    let (nx, ny, nz) = (ax.k.len(), ay.k.len(), az.k.len());

    // compact coefficient blocks, [comp][ix][iy][iz]
    let mut blocks: Vec<Vec<C>> = Vec::new();
    let mut layout = Vec::new();
    for f in fields {
        let start = blocks.len();
        for c in &f.coeffs {
            let mut b = Vec::with_capacity(nx * ny * nz);
            for ix in 0..nx {
                for iy in 0..ny {
                    for iz in 0..nz {
                        let i2 = if d == 3 { az.idx[iz] } else { 0 };
                        b.push(c[g.index_of([ax.idx[ix], ay.idx[iy], i2])]);
                    }
                }
            }
            blocks.push(b);
        }
        layout.push(start..blocks.len());
    }

    let np = pts.len();
    let mut vals = vec![vec![0.0; np]; blocks.len()];
    let mut grads = if gradient { vec![vec![[0.0; 3]; np]; blocks.len()] } else { vec![] };
    let (mut ex, mut ey, mut ez) = (Vec::new(), Vec::new(), Vec::new());
    let mut sx = vec![[C::default(); 3]; nx];
    for (p, x) in pts.iter().enumerate() {
        ax.phases(x[0], &mut ex);
        ay.phases(x[1], &mut ey);
        if d == 3 {
            az.phases(x[2], &mut ez);
        } else {
            ez.clear();
            ez.push(C::new(1.0, 0.0));
        }
        for (bi, blk) in blocks.iter().enumerate() {
            // sx[ix] = (Σ c e_y e_z, Σ c i k_y e_y e_z, Σ c i k_z e_y e_z)
            for ix in 0..nx {
                let mut s = C::default();
                let mut sy = C::default();
                let mut sz = C::default();
                let row = &blk[ix * ny * nz..(ix + 1) * ny * nz];
                for iy in 0..ny {
                    let col = &row[iy * nz..(iy + 1) * nz];
                    let mut t = C::default();
                    let mut tz = C::default();
                    for iz in 0..nz {
                        let v = col[iz] * ez[iz];
                        t += v;
                        if gradient {
                            tz += v * az.dk[iz];
                        }
                    }
                    let e = ey[iy];
                    s += t * e;
                    if gradient {
                        sy += t * e * ay.dk[iy];
                        sz += tz * e;
                    }
                }
                sx[ix] = [s, sy, sz];
            }
            let mut v = 0.0;
            let mut gr = [0.0; 3];
            for ix in 0..nx {
                let e = ex[ix] * ax.weight[ix];
                v += (e * sx[ix][0]).re;
                if gradient {
                    // multiplying by i takes the real part of i z = -im z
                    gr[0] -= (e * sx[ix][0] * ax.dk[ix]).im;
                    gr[1] -= (e * sx[ix][1]).im;
                    gr[2] -= (e * sx[ix][2]).im;
                }
            }
            vals[bi][p] = v;
            if gradient {
                grads[bi][p] = gr;
            }
        }
    }
    let mut vals = vals.into_iter();
    let mut grads = grads.into_iter();
    Ok(layout
        .into_iter()
        .map(|r| Samples {
            values: r.clone().map(|_| vals.next().unwrap()).collect(),
            gradients: if gradient { r.map(|_| grads.next().unwrap()).collect() } else { vec![] },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g2(n: usize) -> Arc<TorusGrid> {
        TorusGrid::new(2, n).unwrap()
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(TorusGrid::new(1, 16).is_err());
        assert!(TorusGrid::new(2, 15).is_err());
        assert!(TorusGrid::new(4, 16).is_err());
    }

    #[test]
    fn dealias_cutoff() {
        assert_eq!(g2(64).keep(), 21);
        assert_eq!(TorusGrid::new(3, 16).unwrap().keep(), 5);
    }

    #[test]
    fn single_mode_coefficients() {
        let g = g2(16);
        let f = SpectralField::from_fn(&g, Rank::Scalar, |x| [(3.0 * x[0] - 2.0 * x[1]).cos(), 0.0, 0.0]);
        for idx in 0..g.len() {
            let k = g.wavevector(idx);
            let want = if k == [3, -2, 0] || k == [-3, 2, 0] { 0.5 } else { 0.0 };
            assert!((f.coeffs()[0][idx] - C::new(want, 0.0)).norm() < 1e-14, "{k:?}");
        }
    }

    #[test]
    fn roundtrip_paired_transform() {
        let g = TorusGrid::new(3, 8).unwrap();
        let f = SpectralField::random_band_limited(&g, Rank::Vector, 4, 7, false);
        let back = SpectralField::from_physical(&g, Rank::Vector, f.physical().to_vec()).unwrap();
        for (a, b) in f.coeffs().iter().zip(back.coeffs()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn derivative_of_sine() {
        let g = g2(32);
        let f = SpectralField::from_fn(&g, Rank::Scalar, |x| [(2.0 * x[0]).sin() * x[1].cos(), 0.0, 0.0]);
        let grad = f.gradient().unwrap();
        let want = SpectralField::from_fn(&g, Rank::Vector, |x| {
            [2.0 * (2.0 * x[0]).cos() * x[1].cos(), -(2.0 * x[0]).sin() * x[1].sin(), 0.0]
        });
        assert!(grad.sub(&want).l2_norm() < 1e-12);
        let lap = f.laplacian();
        assert!(lap.add(&f.scaled(5.0)).l2_norm() < 1e-12);
    }

    #[test]
    fn projection_of_gradient_vanishes() {
        let g = g2(32);
        let phi = SpectralField::random_band_limited(&g, Rank::Scalar, 6, 1, false);
        let p = phi.gradient().unwrap().leray_project().unwrap();
        assert!(p.l2_norm() < 1e-12);
    }

    #[test]
    fn projection_keeps_mean_flow() {
        let g = g2(16);
        let u = SpectralField::from_fn(&g, Rank::Vector, |_| [0.3, -0.2, 0.0]);
        let p = u.leray_project().unwrap();
        assert!((p.mean()[0] - 0.3).abs() < 1e-15 && (p.mean()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn poisson_reports_removed_mean() {
        let g = g2(16);
        let f = SpectralField::from_fn(&g, Rank::Scalar, |x| [1.0 + x[0].cos(), 0.0, 0.0]);
        let (psi, m) = f.poisson_solve().unwrap();
        assert!((m - 1.0).abs() < 1e-14);
        let want = SpectralField::from_fn(&g, Rank::Scalar, |x| [-x[0].cos(), 0.0, 0.0]);
        assert!(psi.sub(&want).l2_norm() < 1e-13);
    }

    #[test]
    fn evaluation_reproduces_nodes_including_nyquist() {
        let g = g2(8);
        let mut vals = vec![vec![0.0; g.len()]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        vals[0].iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let f = SpectralField::from_physical(&g, Rank::Scalar, vals.clone()).unwrap();
        let got = f.evaluate_at_points(&g.nodes()).unwrap();
        for (a, b) in got[0].iter().zip(&vals[0]) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn evaluation_off_grid_and_gradient() {
        let g = TorusGrid::new(3, 8).unwrap();
        let f = SpectralField::from_fn(&g, Rank::Scalar, |x| [(x[0] + 2.0 * x[2]).sin() + x[1].cos(), 0.0, 0.0]);
        let p = [0.37, 4.1, 2.9];
        let s = sample_fields(&[&f], &[p], true).unwrap().remove(0);
        let want = (p[0] + 2.0 * p[2]).sin() + p[1].cos();
        assert!((s.values[0][0] - want).abs() < 1e-13);
        let gw = [(p[0] + 2.0 * p[2]).cos(), -p[1].sin(), 2.0 * (p[0] + 2.0 * p[2]).cos()];
        for a in 0..3 {
            assert!((s.gradients[0][0][a] - gw[a]).abs() < 1e-13);
        }
    }

    #[test]
    fn parseval_matches_quadrature() {
        let g = g2(16);
        let f = SpectralField::random_band_limited(&g, Rank::Vector, 5, 11, true);
        let q: f64 = f.physical().iter().flatten().map(|v| v * v).sum::<f64>() * g.volume() / g.len() as f64;
        assert!((q.sqrt() - f.l2_norm()).abs() < 1e-12);
    }

    #[test]
    fn rank_errors() {
        let g = g2(8);
        let s = SpectralField::zeros(&g, Rank::Scalar);
        assert!(matches!(s.divergence(), Err(Error::RankMismatch { .. })));
        assert!(s.leray_project().is_err());
        let v = SpectralField::zeros(&g, Rank::Vector);
        assert!(v.gradient().is_err());
        let other = SpectralField::zeros(&g2(16), Rank::Vector);
        assert!(matches!(v.inner(&other), Err(Error::GridMismatch(_))));
    }
}
