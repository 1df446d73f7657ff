//! Experiment configuration, parsed strictly from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::Constellation;
use crate::compression::MAX_BITS;
use crate::data::{PartitionScheme, SyntheticKind};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::privacy::DpConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    FedAvg,
    FedDma,
    FedLol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Model uploads from `A_m`, feature uploads and server refinement for `A_o`.
    FedSfr,
    /// Model uploads from every participant, no refinement.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub kind: SyntheticKind,
    /// Training images, split across clients.
    pub train_count: usize,
    pub partition: PartitionScheme,
    /// Fraction of each client dataset marked public.
    pub public_fraction: f64,
    /// Optional `FSFI` file: its first `eval_count` images form the
    /// evaluation set and the rest the training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_m")]
    pub k_m: usize,
    #[serde(rename = "K_o")]
    pub k_o: usize,
    /// `S_m / D`.
    #[serde(rename = "S_m_fraction")]
    pub s_m_fraction: f64,
    /// `S_o / D`, used by `A_o` model uploads in baseline mode.
    #[serde(rename = "S_o_fraction")]
    pub s_o_fraction: f64,
    pub qsgd_bits: u32,
    pub feature_bits: u32,
    /// Feature sets uploaded per `A_o` client per round.
    pub feature_count: usize,
    /// Local SGD steps per round.
    #[serde(rename = "E_c")]
    pub e_c: usize,
    /// Server refinement steps per round.
    #[serde(rename = "E_s")]
    pub e_s: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub eta_c0: f64,
    pub eta_s0: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
    pub snr_db: f64,
    pub alpha_c: f64,
    pub alpha_s: f64,
    pub batch_size: usize,
    pub scheme: Scheme,
    pub mode: Mode,
    pub dp: DpConfig,
    pub seed: u64,
    pub data: DataSpec,
    pub eval_count: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    /// Desk-scale FedSFR run: 10 clients, 2 + 2 participants, 30 rounds on
    /// 1x8x8 synthetic images at 20 dB.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            k: 10,
            k_m: 2,
            k_o: 2,
            s_m_fraction: 0.2,
            s_o_fraction: 0.1,
            qsgd_bits: 4,
            feature_bits: 4,
            feature_count: 32,
            e_c: 10,
            e_s: 10,
            t: 30,
            eta_c0: 0.5,
            eta_s0: 1e-4,
            decay_factor: 0.5,
            decay_interval: 8,
            snr_db: 20.0,
            alpha_c: 1.0,
            alpha_s: 1.0,
            batch_size: 16,
            scheme: Scheme::FedAvg,
            mode: Mode::FedSfr,
            dp: DpConfig::disabled(),
            seed: 0,
            data: DataSpec {
                kind: SyntheticKind::Gaussians,
                train_count: 400,
                partition: PartitionScheme::IidEqual,
                public_fraction: 0.5,
                raw_path: None,
            },
            eval_count: 32,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads and validates a JSON config file.
    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Hard errors. Soft problems are reported by [`warnings`](Self::warnings).
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        Constellation::square_qam(self.model.codebook_size).map_err(|e| bad(e.to_string()))?;
        if self.k == 0 || self.k_m == 0 {
            return Err(bad("K and K_m must be at least 1"));
        }
        if self.k_m + self.k_o > self.k {
            return Err(bad(format!("K_m + K_o = {} exceeds K = {}", self.k_m + self.k_o, self.k)));
        }
        for (name, f) in [("S_m_fraction", self.s_m_fraction), ("S_o_fraction", self.s_o_fraction), ("public_fraction", self.data.public_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(bad(format!("{name} = {f} outside (0, 1]")));
            }
        }
        for (name, b) in [("qsgd_bits", self.qsgd_bits), ("feature_bits", self.feature_bits)] {
            if !(1..=MAX_BITS).contains(&b) {
                return Err(bad(format!("{name} = {b} outside 1..={MAX_BITS}")));
            }
        }
        for (name, v) in [("eta_c0", self.eta_c0), ("eta_s0", self.eta_s0), ("alpha_c", self.alpha_c), ("alpha_s", self.alpha_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} = {v} must be finite and non-negative")));
            }
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) || self.decay_interval == 0 {
            return Err(bad("decay_factor must be positive and decay_interval at least 1"));
        }
        if self.snr_db.is_nan() {
            return Err(bad("snr_db is NaN"));
        }
        if self.batch_size == 0 || self.eval_count == 0 {
            return Err(bad("batch_size and eval_count must be at least 1"));
        }
        if self.mode == Mode::FedSfr && self.k_o > 0 && self.feature_count == 0 {
            return Err(bad("feature_count must be at least 1 when A_o uploads features"));
        }
        if self.data.raw_path.is_none() && self.data.train_count < self.k {
            return Err(bad(format!("{} training images cannot cover {} clients", self.data.train_count, self.k)));
        }
        self.dp.validate().map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.mode == Mode::FedSfr && self.eta_s0 >= self.eta_c0 {
            out.push(format!("eta_s0 = {} is not below eta_c0 = {}", self.eta_s0, self.eta_c0));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_roundtrips() {
        let cfg = ExperimentConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(cfg.warnings().is_empty());
    }

    #[test]
    fn missing_and_unknown_fields() {
        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("K");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("missing field `K`"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(&ExperimentConfig::desk().to_json()).unwrap();
        v.as_object_mut().unwrap().insert("eta_c".into(), 0.1.into());
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("unknown field `eta_c`"), "{err}");
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ExperimentConfig::desk();
        cfg.k_o = 9;
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let mut cfg = ExperimentConfig::desk();
        cfg.k_m = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk();
        cfg.model.codebook_size = 8;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::desk();
        cfg.eta_s0 = 1.0;
        cfg.validate().unwrap();
        assert_eq!(cfg.warnings().len(), 1);
    }
}
