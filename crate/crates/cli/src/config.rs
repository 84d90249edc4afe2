//! Versioned experiment configuration.
//!
//! A config file (TOML, or JSON when the extension is `.json`) names one
//! command and carries one parameter block per module. Every field except
//! `schema_version` and `command` has a default; `docs/config.md` lists them.

use std::path::{Path, PathBuf};

use homlab_core::coefficients::{DefectProfile, PeriodicCoefficient, PerturbedCoefficient, ProfileKind};
use homlab_core::geometry::DefectPointSet;
use homlab_core::pde::SolverConfig;
use homlab_core::source::Source;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    GeometryCertify,
    DefectProfile,
    Corrector,
    Potential,
    Homogenize,
    #[serde(rename = "rates-1d")]
    #[value(name = "rates-1d")]
    Rates1d,
    Rates,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GeometryCertify => "geometry-certify",
            Command::DefectProfile => "defect-profile",
            Command::Corrector => "corrector",
            Command::Potential => "potential",
            Command::Homogenize => "homogenize",
            Command::Rates1d => "rates-1d",
            Command::Rates => "rates",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub command: Command,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; `HOMLAB_WORKERS` takes precedence. Unset means one
    /// per core.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub coefficient: CoefficientConfig,
    #[serde(default)]
    pub geometry: GeometryParams,
    #[serde(default)]
    pub defect_profile: DefectProfileParams,
    #[serde(default)]
    pub corrector: CorrectorParams,
    #[serde(default)]
    pub potential: PotentialParams,
    #[serde(default)]
    pub homogenize: HomogenizeParams,
    #[serde(default)]
    pub rates_1d: Rates1dParams,
    #[serde(default)]
    pub rates: RatesParams,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("homlab-out")
}

/// Periodic background, defect profile and defect set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub dim: usize,
    /// `constant`, `sin`, `laminate2d` or `checker`.
    pub periodic: String,
    pub profile: ProfileKind,
    /// Scalar multiple of the identity.
    pub amplitude: f64,
    pub c0: f64,
    pub index_bound: u32,
    /// Keep only defects with `|p| <= generations`.
    pub generations: Option<u32>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            periodic: "checker".into(),
            profile: ProfileKind::Bump { rho: 0.5 },
            amplitude: 1.0,
            c0: 2.0,
            index_bound: 12,
            generations: None,
        }
    }
}

impl CoefficientConfig {
    pub fn build(&self) -> Result<PerturbedCoefficient, CliError> {
        let per = PeriodicCoefficient::preset(&self.periodic, self.dim)?;
        let profile = DefectProfile::new(self.dim, self.profile, scaled_identity(self.dim, self.amplitude))?;
        let set = DefectPointSet::dyadic(self.dim, self.c0, self.index_bound)?;
        Ok(PerturbedCoefficient::new(per, profile, set)?.with_generations(self.generations))
    }
}

fn scaled_identity(d: usize, c: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { c } else { 0.0 }).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryParams {
    pub dim: usize,
    pub c0: f64,
    pub index_bound: u32,
    pub inclusion_samples_per_cell: usize,
}

impl Default for GeometryParams {
    fn default() -> Self {
        Self {
            dim: 2,
            c0: 2.0,
            index_bound: 16,
            inclusion_samples_per_cell: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefectProfileParams {
    /// Exponent of the `L^r` cell norms.
    pub r: f64,
    pub max_shell: u32,
    /// Quadrature spacing over the defect supports.
    pub resolution: f64,
    /// Average-decay radii `2^k` for `k` in `radii_log2_min..=radii_log2_max`.
    pub radii_log2_min: i32,
    pub radii_log2_max: i32,
}

impl Default for DefectProfileParams {
    fn default() -> Self {
        Self {
            r: 2.0,
            max_shell: 5,
            resolution: 0.02,
            radii_log2_min: 4,
            radii_log2_max: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectorParams {
    /// Zero-based direction `j` of `e_j`.
    pub direction: usize,
    /// Half-width `L` of the box `[-L, L]^d`.
    pub box_l: f64,
    pub cells_per_unit: usize,
    /// `dirichlet` or `periodic` (periodic extension of the truncated
    /// coefficient).
    pub bc: String,
    /// Also solve on `[-2L, 2L]^d` and report the truncation error on `B_{L/2}`.
    pub truncation_estimate: bool,
    pub max_shell: u32,
    pub sublinearity_samples: usize,
}

impl Default for CorrectorParams {
    fn default() -> Self {
        Self {
            direction: 0,
            box_l: 16.0,
            cells_per_unit: 8,
            bc: "dirichlet".into(),
            truncation_estimate: true,
            max_shell: 4,
            sublinearity_samples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PotentialParams {
    /// Cell resolutions of the refinement ladder.
    pub cells_per_unit: Vec<usize>,
}

impl Default for PotentialParams {
    fn default() -> Self {
        Self {
            cells_per_unit: vec![16, 32, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeParams {
    pub cells_per_unit: usize,
    /// Radii of the flux-average check with defects; empty skips it.
    pub flux_radii: Vec<f64>,
    pub flux_cells_per_unit: usize,
}

impl Default for HomogenizeParams {
    fn default() -> Self {
        Self {
            cells_per_unit: 32,
            flux_radii: Vec::new(),
            flux_cells_per_unit: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates1dParams {
    /// `sin-bump`, `sin-periodic`, `algebraic-slow` or `algebraic-fast`;
    /// unset uses the `[coefficient]` block with `dim = 1`.
    pub preset: Option<String>,
    /// `ε = 2^{-k}` for `k` in `eps_min_exp..=eps_max_exp`.
    pub eps_min_exp: u32,
    pub eps_max_exp: u32,
    /// Corrector growth table up to `[0, 2^n_max]`; 0 skips it.
    pub growth_n_max: u32,
    pub source: Source,
}

impl Default for Rates1dParams {
    fn default() -> Self {
        Self {
            preset: Some("sin-bump".into()),
            eps_min_exp: 3,
            eps_max_exp: 12,
            growth_n_max: 16,
            source: Source::constant(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesParams {
    /// `periodic-2d`, `bump-2d`, `periodic-3d` or `bump-3d`; unset uses
    /// the `[coefficient]` block.
    pub preset: Option<String>,
    pub eps_min_exp: u32,
    pub eps_max_exp: u32,
    pub nodes_per_period: usize,
    pub min_nodes_per_period: usize,
    /// `Ω₁ = [interior_lo, interior_hi]^d`.
    pub interior_lo: f64,
    pub interior_hi: f64,
    pub with_h_eps: bool,
    pub refinement_check: bool,
    pub corrector_half_width: Option<f64>,
    pub source: Source,
}

impl Default for RatesParams {
    fn default() -> Self {
        Self {
            preset: Some("periodic-2d".into()),
            eps_min_exp: 2,
            eps_max_exp: 5,
            nodes_per_period: 16,
            min_nodes_per_period: 16,
            interior_lo: 0.25,
            interior_hi: 0.75,
            with_h_eps: false,
            refinement_check: true,
            corrector_half_width: None,
            source: Source::constant(1.0),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for every block.
    pub fn new(command: Command) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command,
            output_dir: default_output_dir(),
            workers: None,
            solver: SolverConfig::default(),
            coefficient: CoefficientConfig::default(),
            geometry: GeometryParams::default(),
            defect_profile: DefectProfileParams::default(),
            corrector: CorrectorParams::default(),
            potential: PotentialParams::default(),
            homogenize: HomogenizeParams::default(),
            rates_1d: Rates1dParams::default(),
            rates: RatesParams::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Schema(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.workers == Some(0) {
            return Err(CliError::Schema("workers must be positive".into()));
        }
        self.solver.validate().map_err(|e| CliError::Schema(e.to_string()))?;
        let r1 = &self.rates_1d;
        if r1.eps_min_exp > r1.eps_max_exp || self.rates.eps_min_exp > self.rates.eps_max_exp {
            return Err(CliError::Schema("eps_min_exp must not exceed eps_max_exp".into()));
        }
        if !matches!(self.corrector.bc.as_str(), "dirichlet" | "periodic") {
            return Err(CliError::Schema(format!(
                "unknown corrector bc '{}'",
                self.corrector.bc
            )));
        }
        if self.potential.cells_per_unit.is_empty() {
            return Err(CliError::Schema("potential.cells_per_unit must not be empty".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output directory and
    /// worker count (neither changes any result).
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        canon.workers = None;
        let bytes = serde_json::to_vec(&canon).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
