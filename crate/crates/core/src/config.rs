//! Run configuration (TOML) shared by all subcommands.
//!
//! Every section has defaults, so an empty file is a valid configuration
//! except that randomized runs need an explicit `seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::appsense::{ScanGrid, ScanState, TransmittanceModel, DEFAULT_EXPANSION_DEGREE};
use crate::error::{Error, Result};
use crate::povm::DEFAULT_N_MAX;
use crate::regress::POWER_REL_ERR;

/// Conversion from reference power to mean photon number at the detector.
pub const DEFAULT_CHI_PER_NW: f64 = 0.177;
pub const DEFAULT_CHI_ERR_PER_NW: f64 = 0.017;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterceptMode {
    /// Free fit, then refit through the origin if the intercept is
    /// consistent with zero at 3σ.
    #[default]
    Auto,
    Free,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Moment order `l` used to extract the response.
    pub order: usize,
    pub intercept: InterceptMode,
    /// Highest Taylor order of the nonlinearity check.
    pub max_order: usize,
    /// Relative power error applied where a record leaves it blank.
    pub power_rel_err: f64,
    pub chi: f64,
    pub chi_err: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            order: 1,
            intercept: InterceptMode::Auto,
            max_order: 3,
            power_rel_err: POWER_REL_ERR,
            chi: DEFAULT_CHI_PER_NW,
            chi_err: DEFAULT_CHI_ERR_PER_NW,
        }
    }
}

/// A simulated detector mode with a polarization-dependent efficiency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimMode {
    pub label: String,
    pub bins: usize,
    pub eta_h: f64,
    pub eta_v: f64,
    #[serde(default)]
    pub dark: f64,
    /// Offset of the efficiency modulation in degrees of plate angle.
    #[serde(default)]
    pub phi0_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub modes: Vec<SimMode>,
    pub angles_deg: Vec<f64>,
    pub power_start_nw: f64,
    pub power_step_db: f64,
    pub power_steps: usize,
    pub events: u64,
    /// Relative standard deviation of the power-meter reading.
    pub power_noise: f64,
    /// Emit `A+B` joint records when exactly two modes are configured.
    pub joint: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            modes: vec![
                SimMode {
                    label: "A".into(),
                    bins: 8,
                    eta_h: 0.298,
                    eta_v: 0.187,
                    dark: 0.0,
                    phi0_deg: 0.0,
                },
                SimMode {
                    label: "B".into(),
                    bins: 8,
                    eta_h: 0.264,
                    eta_v: 0.161,
                    dark: 0.0,
                    phi0_deg: 0.0,
                },
            ],
            angles_deg: vec![0.0, 45.0],
            power_start_nw: 30.0,
            power_step_db: 0.2,
            power_steps: 45,
            events: 100_000,
            power_noise: POWER_REL_ERR,
            joint: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PovmConfig {
    pub bins: usize,
    pub eta: f64,
    pub dark: f64,
}

impl Default for PovmConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            eta: 0.298,
            dark: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtmosphereConfig {
    pub model: TransmittanceModel,
    pub eta_det: f64,
    pub bins: usize,
    /// Largest `η_det |α|² / N` of the probe series.
    pub c_max: f64,
    pub points: usize,
    /// Events per probe intensity; 0 evaluates the moments exactly.
    pub events: u64,
    pub degree: usize,
}

impl Default for AtmosphereConfig {
    fn default() -> Self {
        Self {
            model: TransmittanceModel::Uniform { lo: 0.0, hi: 1.0 },
            eta_det: 0.298,
            bins: 8,
            c_max: 0.3,
            points: 16,
            events: 0,
            degree: DEFAULT_EXPANSION_DEGREE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseScanConfig {
    pub state: ScanState,
    pub grid: ScanGrid,
    pub eta_det: f64,
    pub bins: usize,
    pub dark: f64,
    pub s: f64,
}

impl Default for PhaseScanConfig {
    fn default() -> Self {
        Self {
            state: ScanState::Fock { m: 1 },
            grid: ScanGrid::square(2.0, 41),
            eta_det: 0.298,
            bins: 8,
            dark: 0.0,
            s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Dataset consumed by `calibrate` and `polarization`.
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    /// Fock-space truncation.
    pub n_max: usize,
    /// Expected bins per mode label; checked against datasets when given.
    pub bins: BTreeMap<String, usize>,
    pub calibration: CalibrationConfig,
    pub simulate: SimulateConfig,
    pub povm: PovmConfig,
    pub atmosphere: AtmosphereConfig,
    pub phase_scan: PhaseScanConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            input: None,
            output: PathBuf::from("out"),
            n_max: DEFAULT_N_MAX,
            bins: BTreeMap::new(),
            calibration: CalibrationConfig::default(),
            simulate: SimulateConfig::default(),
            povm: PovmConfig::default(),
            atmosphere: AtmosphereConfig::default(),
            phase_scan: PhaseScanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths inside it are resolved against
    /// the file's directory and referenced files must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(input) = &cfg.input {
            if input.is_relative() {
                cfg.input = Some(base.join(input));
            }
        }
        if cfg.output.is_relative() {
            cfg.output = base.join(&cfg.output);
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn check_files(&self) -> Result<()> {
        if let Some(input) = &self.input {
            if !input.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", input.display())));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.calibration;
        if c.order == 0 {
            return Err(Error::Config("calibration.order must be at least 1".into()));
        }
        if c.max_order > 3 {
            return Err(Error::Config("calibration.max_order must be at most 3".into()));
        }
        if !(c.chi > 0.0) || !(c.chi_err >= 0.0) {
            return Err(Error::Config("chi must be > 0 and chi_err >= 0".into()));
        }
        if !(c.power_rel_err >= 0.0) {
            return Err(Error::Config("power_rel_err must be >= 0".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Config("n_max must be at least 1".into()));
        }
        let s = &self.simulate;
        if s.power_steps == 0 || !(s.power_start_nw > 0.0) || !s.power_step_db.is_finite() {
            return Err(Error::Config("simulate power series is empty or invalid".into()));
        }
        if !(s.power_noise >= 0.0) {
            return Err(Error::Config("simulate.power_noise must be >= 0".into()));
        }
        let mut labels: Vec<&str> = s.modes.iter().map(|m| m.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != s.modes.len() || labels.iter().any(|l| l.is_empty() || l.contains('+')) {
            return Err(Error::Config(
                "simulate mode labels must be unique, nonempty and without '+'".into(),
            ));
        }
        if self.atmosphere.points == 0 || !(self.atmosphere.c_max > 0.0) {
            return Err(Error::Config("atmosphere probe series is empty".into()));
        }
        Ok(())
    }

    /// Seed for randomized commands.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("no seed given; set `seed` in the config or pass --seed".into()))
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    ///
    /// The output directory is left out and the input path is replaced by
    /// the digest of the file it names, so the hash identifies what a run
    /// computes rather than where its files live.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output = PathBuf::new();
        if let Some(input) = &self.input {
            if let Ok(bytes) = std::fs::read(input) {
                canon.input = Some(PathBuf::from(format!("sha256:{}", hex_digest(&bytes))));
            }
        }
        hex_digest(&serde_json::to_vec(&canon).expect("config serializes"))
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
