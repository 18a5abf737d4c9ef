//! Stochastic transport-noise fluid models on the periodic torus.
//!
//! Fields are pseudo-spectral ([`grid`]); the transpose Lie derivative and
//! friends live in [`lie`]; [`spde`] integrates the model families driven by
//! the counter-based Brownian paths of [`noise`]; [`flow`] moves particles,
//! loops and label maps through the matching stochastic flows; [`diagnostics`]
//! and [`ensemble`] turn all of that into residuals and estimates.

pub mod config;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod flow;
pub mod grid;
pub mod lie;
pub mod noise;
pub mod output;
pub mod spde;

pub use config::{parse_config, parse_config_str, RunConfig};
pub use diagnostics::{Decomposition, EnergyLedger, TimeSeries, WeberMode, WeberReport};
pub use ensemble::{ConditionalEstimate, SweepKind, SweepReport};
pub use error::{Error, Result};
pub use flow::{AdvectOptions, Flavor, FlowEnsemble, LabelMap, LoopSpec, MaterialLoop, VelocitySource};
pub use grid::{sample_fields, Point, Rank, Samples, SpectralField, TorusGrid, TWO_PI};
pub use lie::DoubleLieMode;
pub use noise::{BasisSpec, BrownianDriver, NoiseBasis};
pub use output::{Manifest, RunDir, Table};
pub use spde::{Family, FieldTrajectory, ModelSpec, PassiveKind, Scheme};
