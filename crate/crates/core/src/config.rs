//! TOML run configuration.
//!
//! ```toml
//! [grid]
//! d = 2
//! n = 64
//!
//! [model]
//! family = "euler_poincare"
//!
//! [time]
//! t_final = 0.2
//! dt = 1e-3
//! ```
//!
//! Everything else has a default; [`RunConfig::resolve`] fills in derived
//! seeds and loops so the echoed config is complete.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ensemble::SweepKind;
use crate::error::{Error, Result};
use crate::flow::{Flavor, LoopSpec};
use crate::grid::{Rank, SpectralField, TorusGrid};
use crate::noise::{member_seed, BasisSpec, BrownianDriver, NoiseBasis};
use crate::output::FieldFormat;
use crate::spde::{Family, ModelSpec, PassiveKind, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub basis: BasisConfig,
    pub time: TimeConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub d: usize,
    pub n: usize,
    #[serde(default = "default_dealias")]
    pub dealias: f64,
}

fn default_dealias() -> f64 {
    2.0 / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default)]
    pub nu: f64,
    #[serde(default)]
    pub passive_kind: PassiveKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    #[serde(default = "default_xi")]
    pub xi: BasisSpec,
    #[serde(default = "default_eta")]
    pub eta: BasisSpec,
}

fn default_xi() -> BasisSpec {
    BasisSpec::Shear { amplitude: 0.1 }
}

fn default_eta() -> BasisSpec {
    BasisSpec::None
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig { xi: default_xi(), eta: default_eta() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub dt: f64,
    #[serde(default = "one")]
    pub save_stride: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// Random divergence-free field with modes `|k_a| <= band`, unit RMS.
    Random {
        #[serde(default = "default_band")]
        band: usize,
        #[serde(default = "default_scale")]
        scale: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// A field dump (JSON header).
    File { path: PathBuf },
}

fn default_band() -> usize {
    3
}

fn default_scale() -> f64 {
    1.0
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::Random { band: default_band(), scale: default_scale(), seed: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default)]
    pub master: u64,
    #[serde(default)]
    pub w: Option<u64>,
    #[serde(default)]
    pub b_base: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Loops for Kelvin-type checks; defaults to a circle and an axis line.
    #[serde(default)]
    pub loops: Vec<LoopSpec>,
    #[serde(default = "default_loop_points")]
    pub loop_points: usize,
    /// Flow used to advect loops.
    #[serde(default = "default_flavor")]
    pub flavor: Flavor,
    /// Ensemble size for conditional estimates.
    #[serde(default = "default_members")]
    pub members: usize,
    /// Points per axis of the label lattice for Weber/Cauchy checks.
    #[serde(default = "default_lattice")]
    pub label_lattice: usize,
    /// Pass/fail threshold for check subcommands that have one.
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

fn default_loop_points() -> usize {
    128
}

fn default_flavor() -> Flavor {
    Flavor::Strat
}

fn default_members() -> usize {
    64
}

fn default_lattice() -> usize {
    32
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            loops: vec![],
            loop_points: default_loop_points(),
            flavor: default_flavor(),
            members: default_members(),
            label_lattice: default_lattice(),
            tolerance: None,
            sweep: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// Time steps (dt halving), member counts (M scaling) or noise
    /// amplitude factors.
    pub values: Vec<f64>,
    /// What to measure: "kelvin", "decomposition", "energy", "weber" or
    /// "field". Amplitude sweeps always measure "field".
    #[serde(default = "default_observable")]
    pub observable: String,
}

fn default_observable() -> String {
    "kelvin".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<FieldFormat>,
    /// Dump the final field.
    #[serde(default)]
    pub save_fields: bool,
}

fn default_formats() -> Vec<FieldFormat> {
    vec![FieldFormat::Csv]
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { directory: None, formats: default_formats(), save_fields: false }
    }
}

/// Reads, parses and resolves a config file. Relative paths inside it are
/// taken relative to the file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    if let Some(dir) = path.parent() {
        cfg.rebase(dir);
    }
    Ok(cfg)
}

/// Parses and resolves config text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
    cfg.resolve()
}

const W_SEED_TAG: u64 = 1;
const B_SEED_TAG: u64 = 2;
const INIT_SEED_TAG: u64 = 3;

impl RunConfig {
    /// Validates and fills derived defaults.
    pub fn resolve(mut self) -> Result<Self> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.grid.d;
        TorusGrid::with_dealias(d, self.grid.n, self.grid.dealias).map_err(|e| Error::Config(format!("grid: {e}")))?;
        if !(self.model.nu >= 0.0 && self.model.nu.is_finite()) {
            return bad(format!("model.nu must be a non-negative number, got {}", self.model.nu));
        }
        if self.model.family.is_viscous() && self.model.nu > 0.0 && self.basis.eta == BasisSpec::None {
            return bad("a viscous model with nu > 0 needs basis.eta".into());
        }
        let t = &self.time;
        if !(t.dt > 0.0 && t.t_final > 0.0) {
            return bad("time.dt and time.t_final must be positive".into());
        }
        let steps = t.t_final / t.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return bad(format!("time.t_final = {} is not a multiple of time.dt = {}", t.t_final, t.dt));
        }
        if t.save_stride == 0 {
            return bad("time.save_stride must be at least 1".into());
        }
        if self.diagnostics.loop_points < 8 {
            return bad("diagnostics.loop_points must be at least 8".into());
        }
        if self.diagnostics.members == 0 {
            return bad("diagnostics.members must be at least 1".into());
        }
        if self.diagnostics.label_lattice < 4 || self.diagnostics.label_lattice % 2 != 0 {
            return bad("diagnostics.label_lattice must be even and at least 4".into());
        }
        if let Some(s) = &self.diagnostics.sweep {
            if s.values.len() < 3 {
                return bad("diagnostics.sweep.values needs at least 3 points".into());
            }
            if s.values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("diagnostics.sweep.values must be positive".into());
            }
        }
        let master = self.seeds.master;
        self.seeds.w.get_or_insert(member_seed(master, W_SEED_TAG));
        self.seeds.b_base.get_or_insert(member_seed(master, B_SEED_TAG));
        if let InitialConfig::Random { seed, .. } = &mut self.initial {
            seed.get_or_insert(member_seed(master, INIT_SEED_TAG));
        }
        if self.diagnostics.loops.is_empty() {
            let c = vec![std::f64::consts::PI; d];
            self.diagnostics.loops = vec![
                LoopSpec::Circle { center: c.clone(), radius: 1.0, normal: None },
                LoopSpec::AxisLine { axis: 0, offset: vec![0.5 * std::f64::consts::PI; d] },
            ];
        }
        Ok(self)
    }

    /// Same config with a new master seed; derived seeds are re-derived.
    pub fn with_master_seed(mut self, master: u64) -> Result<Self> {
        self.seeds = SeedConfig { master, w: None, b_base: None };
        if let InitialConfig::Random { seed, .. } = &mut self.initial {
            *seed = None;
        }
        self.resolve()
    }

    fn rebase(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let InitialConfig::File { path } = &mut self.initial {
            fix(path);
        }
        for spec in [&mut self.basis.xi, &mut self.basis.eta] {
            rebase_spec(spec, dir);
        }
    }

    pub fn n_steps(&self) -> usize {
        (self.time.t_final / self.time.dt).round() as usize
    }

    pub fn w_seed(&self) -> u64 {
        self.seeds.w.unwrap_or_else(|| member_seed(self.seeds.master, W_SEED_TAG))
    }

    pub fn b_seed_base(&self) -> u64 {
        self.seeds.b_base.unwrap_or_else(|| member_seed(self.seeds.master, B_SEED_TAG))
    }

    pub fn build_grid(&self) -> Result<Arc<TorusGrid>> {
        TorusGrid::with_dealias(self.grid.d, self.grid.n, self.grid.dealias)
    }

    pub fn build_basis(&self, grid: &Arc<TorusGrid>) -> Result<Arc<NoiseBasis>> {
        Ok(Arc::new(NoiseBasis::from_specs(grid, &self.basis.xi, &self.basis.eta)?))
    }

    pub fn build_model(&self, basis: Arc<NoiseBasis>) -> Result<ModelSpec> {
        match self.model.family {
            Family::PassiveTransport => ModelSpec::passive(self.model.passive_kind, basis),
            f => ModelSpec::new(f, self.model.nu, basis),
        }
    }

    pub fn build_initial(&self, grid: &Arc<TorusGrid>) -> Result<SpectralField> {
        match &self.initial {
            InitialConfig::Random { band, scale, seed } => {
                let seed = seed.unwrap_or_else(|| member_seed(self.seeds.master, INIT_SEED_TAG));
                Ok(SpectralField::random_band_limited(grid, Rank::Vector, *band, seed, true).scaled(*scale))
            }
            InitialConfig::File { path } => {
                let f = crate::output::read_field(path)?;
                if **f.grid() != **grid {
                    return Err(Error::Config(format!("{} is not on the run grid", path.display())));
                }
                Ok(f)
            }
        }
    }

    /// Driver at the configured `dt`.
    pub fn build_driver(&self, basis: &NoiseBasis) -> Result<BrownianDriver> {
        BrownianDriver::new(self.w_seed(), self.b_seed_base(), self.time.dt, self.n_steps(), basis.kw(), basis.kb())
    }

    /// Loops as closed curves with the configured resolution.
    pub fn build_loops(&self) -> Result<Vec<crate::flow::MaterialLoop>> {
        self.diagnostics
            .loops
            .iter()
            .map(|l| crate::flow::make_loop(l, self.grid.d, self.diagnostics.loop_points))
            .collect()
    }
}

fn rebase_spec(spec: &mut BasisSpec, dir: &Path) {
    match spec {
        BasisSpec::Explicit { files } => {
            for f in files.iter_mut() {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        BasisSpec::Concat { parts } => parts.iter_mut().for_each(|p| rebase_spec(p, dir)),
        _ => {}
    }
}
