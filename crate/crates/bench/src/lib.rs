//! Fixtures shared by the kernel benchmarks.

use std::sync::Arc;

use stochflow_core::{BasisSpec, Family, ModelSpec, NoiseBasis, Rank, SpectralField, TorusGrid};

/// A solenoidal band-limited velocity on the `n^d` grid.
pub fn velocity(d: usize, n: usize) -> SpectralField {
    let g = TorusGrid::new(d, n).expect("grid");
    SpectralField::random_band_limited(&g, Rank::Vector, 4, 1, true)
}

/// Euler–Poincaré model on the grid of `u` with shear noise.
pub fn model(u: &SpectralField) -> ModelSpec {
    let basis = NoiseBasis::from_specs(u.grid(), &BasisSpec::Shear { amplitude: 0.1 }, &BasisSpec::None)
        .expect("basis");
    ModelSpec::new(Family::EulerPoincare, 0.0, Arc::new(basis)).expect("model")
}
