//! Experiment description, loadable from JSON and overridable from the CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use lora_mpr::demod::{DemodConfig, Strategy, DEFAULT_TOP_K};
use lora_mpr::receiver::ReceiverConfig;
use lora_mpr::{ChannelLimits, LoraParams};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Phy,
    Colocated,
    IdealMap,
    Net,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Phy => "phy",
            Mode::Colocated => "colocated",
            Mode::IdealMap => "ideal-map",
            Mode::Net => "net",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub params: LoraParams,
    pub users: usize,
    /// SNR points in dB; JSON has no infinity, so use a huge value such as
    /// `1e300` for a noiseless point.
    pub snr_grid: Vec<f64>,
    pub trials: usize,
    /// Maximum |CFO| in Hz.
    pub cfo_max: f64,
    /// Maximum time offset as a fraction of the symbol duration.
    pub to_max: f64,
    pub strategy: Strategy,
    pub top_k: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Simulated time of a network run, seconds.
    pub duration_s: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            params: LoraParams::default(),
            users: 2,
            snr_grid: vec![20.0],
            trials: 2000,
            cfo_max: 5e3,
            to_max: 0.1,
            strategy: Strategy::MFullPeak,
            top_k: DEFAULT_TOP_K,
            seed: 1,
            mode: Mode::Phy,
            duration_s: 300.0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if self.snr_grid.is_empty() {
            return bad("snr grid is empty");
        }
        if self.snr_grid.iter().any(|s| s.is_nan()) {
            return bad("snr grid contains NaN");
        }
        if self.users == 0 {
            return bad("at least one user is required");
        }
        if self.top_k == 0 {
            return bad("top-k must be at least 1");
        }
        if !(self.cfo_max >= 0.0) || !(0.0..1.0).contains(&self.to_max) {
            return bad("offset limits out of range");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration must be positive");
        }
        Ok(())
    }

    pub fn limits(&self) -> ChannelLimits {
        ChannelLimits {
            cfo_max: self.cfo_max,
            to_max_frac: self.to_max,
        }
    }

    pub fn receiver(&self) -> ReceiverConfig {
        ReceiverConfig {
            users: self.users,
            limits: self.limits(),
            demod: DemodConfig {
                strategy: self.strategy,
                top_k: self.top_k,
            },
        }
    }
}

/// SNR in dB; accepts `inf`.
pub fn parse_snr(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("+inf") {
        return Ok(f64::INFINITY);
    }
    f64::from_str(t).map_err(|_| SimError::Config(format!("bad snr {s:?}")))
}

/// Very large finite SNRs are treated as noiseless.
pub fn is_noiseless(snr_db: f64) -> bool {
    snr_db >= 1e6
}
