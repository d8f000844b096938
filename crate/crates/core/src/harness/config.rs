//! Experiment configuration, read from TOML.
//!
//! ```toml
//! name = "baseline"
//! dataset = "digits"            # or "synthetic:blobs", "synthetic:bars"
//! data_dir = "data"             # IDX files for "digits"
//! model = "cnn"                 # classifier id: cnn | mlp
//! models_dir = "models"         # optional checkpoint cache
//! target = "latent"             # latent | logits | odin | gram | ensemble
//! init = "uniform_noise"        # uniform_noise | checker | spiral | foreign:<id>
//! pairs = 100
//! seed = 0
//! output_dir = "runs/baseline"
//!
//! [training]
//! epochs = 2
//! batch_size = 32
//! learning_rate = 0.001
//! seed = 0
//!
//! [attack]
//! epsilon = 10.0
//! norm = "l2"
//! iterations = 1000
//!
//! [detectors]
//! max_softmax = true
//! odin = { temperatures = [1, 10, 100, 1000], magnitudes = [0, 0.001, 0.002, 0.004] }
//! ```
//!
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::OodInitKind;
use crate::error::{Error, Result};
use crate::nn::{zoo, TrainConfig};

/// What the attack's `f(x)` is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackTarget {
    /// The classifier's latent `z`.
    Latent,
    /// The classifier's logits.
    Logits,
    /// Logits of the ODIN-preprocessed input; one attack set per (T, PM) cell.
    Odin,
    /// The Gram total-deviation score.
    Gram,
    /// Concatenated logits of every ensemble member.
    Ensemble,
}

impl AttackTarget {
    pub fn id(self) -> &'static str {
        match self {
            AttackTarget::Latent => "latent",
            AttackTarget::Logits => "logits",
            AttackTarget::Odin => "odin",
            AttackTarget::Gram => "gram",
            AttackTarget::Ensemble => "ensemble",
        }
    }
}

/// An empty `odin = {}` table selects the default 4×4 grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdinGrid {
    pub temperatures: Vec<f64>,
    pub magnitudes: Vec<f64>,
}

impl Default for OdinGrid {
    fn default() -> Self {
        Self {
            temperatures: vec![1.0, 10.0, 100.0, 1000.0],
            magnitudes: vec![0.0, 0.001, 0.002, 0.004],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MahalanobisConfig {
    #[serde(default = "default_pm_list")]
    pub magnitudes: Vec<f64>,
}

fn default_pm_list() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramConfig {
    #[serde(default = "default_orders")]
    pub orders: usize,
    /// Test samples (after the attacked ones) used to normalize deviations.
    #[serde(default = "default_held_out")]
    pub held_out: usize,
    /// Training samples used for the bounds; all when absent.
    #[serde(default)]
    pub fit_samples: Option<usize>,
}

fn default_orders() -> usize {
    5
}
fn default_held_out() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_members")]
    pub members: usize,
    /// Member architecture id.
    #[serde(default = "default_member_model")]
    pub model: String,
}

fn default_members() -> usize {
    5
}
fn default_member_model() -> String {
    "mlp".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    #[serde(default = "default_latent")]
    pub latent: usize,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub training: Option<TrainConfig>,
}

fn default_latent() -> usize {
    16
}
fn default_p() -> f64 {
    2.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSet {
    #[serde(default)]
    pub max_softmax: bool,
    #[serde(default)]
    pub odin: Option<OdinGrid>,
    #[serde(default)]
    pub mahalanobis: Option<MahalanobisConfig>,
    #[serde(default)]
    pub gram: Option<GramConfig>,
    /// Entropy of the mean member softmax; needs `ensemble`.
    #[serde(default)]
    pub ensemble_entropy: bool,
    #[serde(default)]
    pub oe: bool,
    #[serde(default)]
    pub energy: bool,
    #[serde(default)]
    pub reconstruction: Option<ReconstructionConfig>,
}

impl DetectorSet {
    pub fn is_empty(&self) -> bool {
        self == &DetectorSet::default()
    }
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}
fn default_init() -> String {
    "uniform_noise".into()
}
fn default_bins() -> usize {
    50
}
fn default_mape_range() -> f64 {
    0.005
}
fn default_exclusion() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: String,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    pub model: String,
    /// Checkpoint cache; models are trained and saved here when missing.
    #[serde(default)]
    pub models_dir: Option<PathBuf>,
    pub target: AttackTarget,
    #[serde(default = "default_init")]
    pub init: String,
    /// Minimum L2 distance between the initial OOD image and every training
    /// image; 0 disables the check.
    #[serde(default)]
    pub init_distance_floor: f64,
    pub pairs: usize,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub training: TrainConfig,
    pub attack: AttackConfig,
    #[serde(default)]
    pub detectors: DetectorSet,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Upper end of the MAPE histogram range; larger values land in the
    /// last bin.
    #[serde(default = "default_mape_range")]
    pub mape_histogram_max: f64,
    /// Fail the run when more than this fraction of attacks is excluded.
    #[serde(default = "default_exclusion")]
    pub max_exclusion_rate: f64,
    /// Write every attack's loss trace (large for long attacks).
    #[serde(default)]
    pub save_traces: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn init_kind(&self) -> Result<OodInitKind> {
        self.init.parse().map_err(|e: Error| Error::Config(e.to_string()))
    }

    /// Checks every id resolves and every grid is non-empty.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pairs == 0 {
            return bad("pairs must be at least 1".into());
        }
        if zoo::by_id(&self.model, 0).is_none() || self.model == "linear" {
            return bad(format!("unknown classifier model {:?}", self.model));
        }
        if self.dataset != "digits" {
            match self.dataset.strip_prefix("synthetic:") {
                Some("blobs" | "bars") => {}
                _ => return bad(format!("unknown dataset {:?}", self.dataset)),
            }
        }
        self.init_kind()?;
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.histogram_bins == 0 || !(self.mape_histogram_max > 0.0) {
            return bad("histogram needs at least one bin and a positive range".into());
        }
        if !(0.0..=1.0).contains(&self.max_exclusion_rate) {
            return bad("max_exclusion_rate must lie in [0, 1]".into());
        }
        let d = &self.detectors;
        if let Some(g) = &d.odin {
            if g.temperatures.is_empty() || g.magnitudes.is_empty() {
                return bad("ODIN grid must be non-empty".into());
            }
            if g.temperatures.iter().any(|t| !(*t > 0.0)) || g.magnitudes.iter().any(|m| !(*m >= 0.0)) {
                return bad("ODIN temperatures must be positive and magnitudes non-negative".into());
            }
        }
        if let Some(m) = &d.mahalanobis {
            if m.magnitudes.is_empty() || m.magnitudes.iter().any(|v| !(*v >= 0.0)) {
                return bad("Mahalanobis magnitudes must be a non-empty list of values ≥ 0".into());
            }
        }
        if let Some(g) = &d.gram {
            if !(1..=crate::detectors::MAX_GRAM_ORDER).contains(&g.orders) {
                return bad(format!("Gram orders must be in 1..=5, got {}", g.orders));
            }
        }
        if let Some(r) = &d.reconstruction {
            if r.latent == 0 || !(r.p >= 1.0) {
                return bad("reconstruction needs latent ≥ 1 and p ≥ 1".into());
            }
        }
        if let Some(e) = &self.ensemble {
            if e.members < 2 {
                return bad("an ensemble needs at least 2 members".into());
            }
            if zoo::by_id(&e.model, 0).is_none() || e.model == "linear" {
                return bad(format!("unknown ensemble member model {:?}", e.model));
            }
        }
        let needs_ensemble = d.ensemble_entropy || self.target == AttackTarget::Ensemble;
        if needs_ensemble && self.ensemble.is_none() {
            return bad("ensemble detectors and targets need an [ensemble] section".into());
        }
        if self.target == AttackTarget::Ensemble && (d.odin.is_some() || d.mahalanobis.is_some() || d.gram.is_some() || d.energy) {
            return bad("with target \"ensemble\" only logit-based detectors apply (max_softmax, oe, ensemble_entropy, reconstruction)".into());
        }
        if !(self.init_distance_floor >= 0.0) {
            return bad("init_distance_floor must be ≥ 0".into());
        }
        match self.target {
            AttackTarget::Odin if d.odin.is_none() => bad("target \"odin\" needs detectors.odin".into()),
            AttackTarget::Gram if d.gram.is_none() => bad("target \"gram\" needs detectors.gram".into()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
dataset = "synthetic:blobs"
model = "mlp"
target = "latent"
pairs = 3
output_dir = "out"
[attack]
epsilon = 1.0
norm = "l2"
iterations = 5
[detectors]
max_softmax = true
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.init, "uniform_noise");
        assert_eq!(cfg.histogram_bins, 50);
        assert!(cfg.detectors.max_softmax);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("pairs = 3", "pairs = 3\ncolour = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("iterations = 5", "iterations = 5\nsteps = 2");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn unresolvable_ids_and_empty_grids_are_rejected() {
        for (from, to) in [
            ("model = \"mlp\"", "model = \"vgg\""),
            ("dataset = \"synthetic:blobs\"", "dataset = \"cifar\""),
            ("target = \"latent\"", "target = \"gram\""),
            ("max_softmax = true", "odin = { temperatures = [], magnitudes = [0.0] }"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{to}");
        }
    }
}
