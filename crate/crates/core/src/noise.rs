//! Noise vector fields and counter-based Brownian increments.
//!
//! A [`NoiseBasis`] holds the transport fields `ξ_k` (driven by `W`) and the
//! Lagrangian diffusion fields `η_l` (driven by the auxiliary motions `B`).
//! [`BrownianDriver`] produces increments by direct lookup, so any step can be
//! replayed and a coarse path is the exact sum of its fine increments.

use std::path::PathBuf;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Rank, SpectralField, TorusGrid};
use crate::lie::advect;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Sin,
    Cos,
}

/// `amplitude * dir * sin(k·x)` (or `cos`); divergence-free iff `dir·k = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigMode {
    pub k: Vec<i64>,
    pub dir: Vec<f64>,
    #[serde(default = "default_phase")]
    pub phase: Phase,
    #[serde(default = "one")]
    pub amplitude: f64,
}

fn default_phase() -> Phase {
    Phase::Sin
}

fn one() -> f64 {
    1.0
}

impl TrigMode {
    pub fn new(k: &[i64], dir: &[f64], phase: Phase, amplitude: f64) -> Self {
        TrigMode { k: k.to_vec(), dir: dir.to_vec(), phase, amplitude }
    }

    pub fn to_field(&self, grid: &Arc<TorusGrid>) -> Result<SpectralField> {
        let d = grid.d();
        if self.k.len() != d || self.dir.len() != d {
            return Err(Error::Validation(format!(
                "trig mode needs {d}-component k and dir, got {} and {}",
                self.k.len(),
                self.dir.len()
            )));
        }
        let mut k = [0.0; 3];
        let mut dir = [0.0; 3];
        for a in 0..d {
            k[a] = self.k[a] as f64;
            dir[a] = self.dir[a] * self.amplitude;
        }
        let phase = self.phase;
        Ok(SpectralField::from_fn(grid, Rank::Vector, move |x| {
            let arg = k[0] * x[0] + k[1] * x[1] + k[2] * x[2];
            let s = match phase {
                Phase::Sin => arg.sin(),
                Phase::Cos => arg.cos(),
            };
            [dir[0] * s, dir[1] * s, dir[2] * s]
        }))
    }
}

/// Recipe for a set of noise fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BasisSpec {
    None,
    /// `amplitude * e_k`, one field per axis.
    Euclidean {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// One shear per axis: `a(0, sin x)`, `a(sin y, 0)` in 2D and the cyclic
    /// analogue in 3D.
    Shear {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Cellular field `a(-sin x cos y, cos x sin y)` (2D), which unlike the
    /// shears has a nonzero self-advection `ξ·∇ξ`.
    Cells {
        #[serde(default = "default_amplitude")]
        amplitude: f64,
    },
    /// Arbitrary single trigonometric modes.
    Trig { modes: Vec<TrigMode> },
    /// Constant vector fields.
    Constant { vectors: Vec<Vec<f64>> },
    /// Field dumps written by [`crate::output::write_field`].
    Explicit { files: Vec<PathBuf> },
    /// The members of each part, in order.
    Concat { parts: Vec<BasisSpec> },
}

fn default_amplitude() -> f64 {
    0.1
}

impl BasisSpec {
    pub fn build(&self, grid: &Arc<TorusGrid>) -> Result<Vec<SpectralField>> {
        let d = grid.d();
        match self {
            BasisSpec::None => Ok(vec![]),
            BasisSpec::Euclidean { amplitude } => Ok((0..d)
                .map(|k| {
                    let a = *amplitude;
                    SpectralField::from_fn(grid, Rank::Vector, move |_| {
                        let mut v = [0.0; 3];
                        v[k] = a;
                        v
                    })
                })
                .collect()),
            BasisSpec::Shear { amplitude } => {
                let a = *amplitude;
                let modes: Vec<TrigMode> = if d == 2 {
                    vec![
                        TrigMode::new(&[1, 0], &[0.0, 1.0], Phase::Sin, a),
                        TrigMode::new(&[0, 1], &[1.0, 0.0], Phase::Sin, a),
                    ]
                } else {
                    vec![
                        TrigMode::new(&[1, 0, 0], &[0.0, 1.0, 0.0], Phase::Sin, a),
                        TrigMode::new(&[0, 1, 0], &[0.0, 0.0, 1.0], Phase::Sin, a),
                        TrigMode::new(&[0, 0, 1], &[1.0, 0.0, 0.0], Phase::Sin, a),
                    ]
                };
                modes.iter().map(|m| m.to_field(grid)).collect()
            }
            BasisSpec::Cells { amplitude } => {
                if d != 2 {
                    return Err(Error::Unsupported("cellular noise field is two-dimensional".into()));
                }
                let a = *amplitude;
                Ok(vec![SpectralField::from_fn(grid, Rank::Vector, move |x| {
                    [-a * x[0].sin() * x[1].cos(), a * x[0].cos() * x[1].sin(), 0.0]
                })])
            }
            BasisSpec::Trig { modes } => modes.iter().map(|m| m.to_field(grid)).collect(),
            BasisSpec::Constant { vectors } => vectors
                .iter()
                .map(|v| {
                    if v.len() != d {
                        return Err(Error::Validation(format!("constant field needs {d} components")));
                    }
                    let mut c = [0.0; 3];
                    c[..d].copy_from_slice(v);
                    Ok(SpectralField::from_fn(grid, Rank::Vector, move |_| c))
                })
                .collect(),
            BasisSpec::Explicit { files } => files
                .iter()
                .map(|f| {
                    let field = crate::output::read_field(f)?;
                    if **field.grid() != **grid {
                        return Err(Error::Validation(format!("{} is not on the run grid", f.display())));
                    }
                    Ok(SpectralField::from_coeffs(grid, field.rank(), field.coeffs().to_vec())?)
                })
                .collect(),
            BasisSpec::Concat { parts } => {
                let mut out = Vec::new();
                for p in parts {
                    out.extend(p.build(grid)?);
                }
                Ok(out)
            }
        }
    }
}

/// Transport fields `ξ_k`, diffusion fields `η_l` and cached derived fields.
#[derive(Debug, Clone)]
pub struct NoiseBasis {
    grid: Arc<TorusGrid>,
    xi: Vec<SpectralField>,
    eta: Vec<SpectralField>,
    induced: SpectralField,
    solenoidal: bool,
}

impl NoiseBasis {
    /// Validated basis: every field divergence-free, finite and inside the
    /// dealias mask.
    pub fn new(grid: &Arc<TorusGrid>, xi: Vec<SpectralField>, eta: Vec<SpectralField>) -> Result<Self> {
        Self::build(grid, xi, eta, true)
    }

    /// Basis that skips the divergence check (compressible probes).
    pub fn compressible(grid: &Arc<TorusGrid>, xi: Vec<SpectralField>, eta: Vec<SpectralField>) -> Result<Self> {
        Self::build(grid, xi, eta, false)
    }

    pub fn from_specs(grid: &Arc<TorusGrid>, xi: &BasisSpec, eta: &BasisSpec) -> Result<Self> {
        Self::new(grid, xi.build(grid)?, eta.build(grid)?)
    }

    fn build(grid: &Arc<TorusGrid>, xi: Vec<SpectralField>, eta: Vec<SpectralField>, solenoidal: bool) -> Result<Self> {
        for (name, set) in [("xi", &xi), ("eta", &eta)] {
            for (k, f) in set.iter().enumerate() {
                if f.rank() != Rank::Vector || **f.grid() != **grid {
                    return Err(Error::Validation(format!("{name}[{k}] is not a vector field on this grid")));
                }
                if !f.is_finite() {
                    return Err(Error::Validation(format!("{name}[{k}] has non-finite values")));
                }
                if !f.is_dealiased(1e-12 * (1.0 + f.l2_norm())) {
                    return Err(Error::Validation(format!("{name}[{k}] has modes outside the dealias mask")));
                }
                if solenoidal {
                    let div = f.divergence()?.l2_norm();
                    let scale = f.l2_norm().max(f64::MIN_POSITIVE);
                    if div > 1e-10 * scale * grid.keep() as f64 {
                        return Err(Error::Validation(format!(
                            "{name}[{k}] is not divergence-free (|div| = {div:.3e})"
                        )));
                    }
                }
            }
        }
        let mut induced = SpectralField::zeros(grid, Rank::Vector);
        for f in &xi {
            induced.axpy(0.5, &advect(f, f)?);
        }
        Ok(NoiseBasis { grid: grid.clone(), xi, eta, induced, solenoidal })
    }

    pub fn empty(grid: &Arc<TorusGrid>) -> Self {
        Self::build(grid, vec![], vec![], true).expect("empty basis")
    }

    pub fn grid(&self) -> &Arc<TorusGrid> {
        &self.grid
    }

    pub fn xi(&self) -> &[SpectralField] {
        &self.xi
    }

    pub fn eta(&self) -> &[SpectralField] {
        &self.eta
    }

    pub fn kw(&self) -> usize {
        self.xi.len()
    }

    pub fn kb(&self) -> usize {
        self.eta.len()
    }

    pub fn is_solenoidal(&self) -> bool {
        self.solenoidal
    }

    /// Noise-induced drift `½ Σ_k (ξ_k·∇)ξ_k` of the Itô form of the flow.
    pub fn induced_drift(&self) -> &SpectralField {
        &self.induced
    }

    /// Copy with the diffusion fields replaced.
    pub fn with_eta(&self, eta: Vec<SpectralField>) -> Result<Self> {
        Self::build(&self.grid, self.xi.clone(), eta, self.solenoidal)
    }

    /// Copy with every transport field scaled by `a`.
    pub fn scaled(&self, a: f64) -> Result<Self> {
        let xi = self.xi.iter().map(|f| f.scaled(a)).collect();
        Self::build(&self.grid, xi, self.eta.clone(), self.solenoidal)
    }

    /// True when every `ξ_k` is spatially constant.
    pub fn is_constant(&self) -> bool {
        self.xi
            .iter()
            .all(|f| f.coeffs().iter().all(|c| c.iter().skip(1).all(|v| v.norm() < 1e-14)))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of ensemble member `m` derived from a base seed.
pub fn member_seed(base: u64, m: u64) -> u64 {
    splitmix64(base ^ splitmix64(m.wrapping_add(0x6D65_6D62)))
}

const W_TAG: u64 = 0x5753_5452_4541_4D57;
const B_TAG: u64 = 0x4253_5452_4541_4D42;

fn standard_normal(seed: u64, tag: u64, channel: usize, step: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ tag));
    rng.set_stream(channel as u64);
    rng.set_word_pos(step as u128 * 4);
    let a = rng.next_u64();
    let b = rng.next_u64();
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Increments of `W` (K_W channels) and `B` (K_B channels) on a uniform mesh.
///
/// Increments are generated on the fine mesh; a coarsened driver sums them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BrownianDriver {
    w_seed: u64,
    b_seed: u64,
    fine_dt: f64,
    fine_steps: usize,
    stride: usize,
    kw: usize,
    kb: usize,
}

impl BrownianDriver {
    pub fn new(w_seed: u64, b_seed: u64, dt: f64, n_steps: usize, kw: usize, kb: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
        }
        Ok(BrownianDriver { w_seed, b_seed, fine_dt: dt, fine_steps: n_steps, stride: 1, kw, kb })
    }

    /// Same paths on a mesh `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let stride = self.stride * factor;
        if factor == 0 || self.fine_steps % stride != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot coarsen {} fine steps by {stride}",
                self.fine_steps
            )));
        }
        Ok(BrownianDriver { stride, ..self.clone() })
    }

    /// Same `W`, independent `B` seeded for ensemble member `m`.
    pub fn for_member(&self, b_base: u64, m: u64) -> Self {
        BrownianDriver { b_seed: member_seed(b_base, m), ..self.clone() }
    }

    pub fn with_b_seed(&self, b_seed: u64) -> Self {
        BrownianDriver { b_seed, ..self.clone() }
    }

    pub fn dt(&self) -> f64 {
        self.fine_dt * self.stride as f64
    }

    pub fn n_steps(&self) -> usize {
        self.fine_steps / self.stride
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn kb(&self) -> usize {
        self.kb
    }

    pub fn w_seed(&self) -> u64 {
        self.w_seed
    }

    pub fn b_seed(&self) -> u64 {
        self.b_seed
    }

    fn check(&self, step: usize) -> Result<()> {
        if step >= self.n_steps() {
            return Err(Error::OutOfRange { step, n_steps: self.n_steps() });
        }
        Ok(())
    }

    /// `ΔW_k` over `[t_step, t_step+1]`.
    pub fn dw(&self, step: usize) -> Result<Vec<f64>> {
        self.check(step)?;
        Ok(self.sum_channels(self.w_seed, W_TAG, self.kw, step))
    }

    /// `ΔB_l` over `[t_step, t_step+1]`.
    pub fn db(&self, step: usize) -> Result<Vec<f64>> {
        self.check(step)?;
        Ok(self.sum_channels(self.b_seed, B_TAG, self.kb, step))
    }

    pub fn increments(&self, step: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.dw(step)?, self.db(step)?))
    }

    fn sum_channels(&self, seed: u64, tag: u64, k: usize, step: usize) -> Vec<f64> {
        let sd = self.fine_dt.sqrt();
        (0..k)
            .map(|c| {
                (step * self.stride..(step + 1) * self.stride)
                    .map(|f| standard_normal(seed, tag, c, f) * sd)
                    .sum()
            })
            .collect()
    }

    /// `W(t_step)` for every channel.
    pub fn w_at(&self, step: usize) -> Result<Vec<f64>> {
        if step > self.n_steps() {
            return Err(Error::OutOfRange { step, n_steps: self.n_steps() });
        }
        let mut w = vec![0.0; self.kw];
        for s in 0..step {
            for (a, b) in w.iter_mut().zip(self.dw(s)?) {
                *a += b;
            }
        }
        Ok(w)
    }
}
