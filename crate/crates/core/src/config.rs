//! The single run configuration: every tunable, TOML on disk, with dotted
//! `key=value` overrides and named ablation presets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assessor::AssessorConfig;
use crate::env::GridConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::policy::PolicyConfig;
use crate::ppo::PpoConfig;
use crate::rewards::RewardCoeffs;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Number of panoramas generated by `synth`.
    pub n: usize,
    /// Train and test fractions.
    pub split: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 200, split: (0.8, 0.2) }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub policy: PolicyConfig,
    pub assessor: AssessorConfig,
    pub rewards: RewardCoeffs,
    pub ppo: PpoConfig,
    pub losses: LossWeights,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.synth.validate()?;
        self.policy.validate()?;
        self.assessor.validate()?;
        self.rewards.validate()?;
        self.ppo.validate()?;
        self.losses.validate()?;
        self.train.validate()?;
        if self.policy.feature_dim != self.assessor.feature_dim {
            return Err(Error::Config(format!(
                "policy.feature_dim = {} disagrees with assessor.feature_dim = {}",
                self.policy.feature_dim, self.assessor.feature_dim
            )));
        }
        if self.policy.mask_revisits && self.train.t > self.grid.count() {
            return Err(Error::Config(format!(
                "train.t = {} exceeds the {} grid viewports while revisits are masked",
                self.train.t,
                self.grid.count()
            )));
        }
        let (a, b) = self.data.split;
        if !(a >= 0.0 && b >= 0.0 && (a + b - 1.0).abs() < 1e-9) {
            return Err(Error::Config(format!("data.split must be two nonnegative fractions summing to 1, got {a},{b}")));
        }
        Ok(())
    }

    /// Sets both feature dimensions.
    pub fn set_feature_dim(&mut self, d: usize) {
        self.policy.feature_dim = d;
        self.assessor.feature_dim = d;
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the snapshot that reproduces a run.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML and
    /// fall back to a bare string; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut tree, key.trim(), value)?;
        }
        let cfg: Self = tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        let r = &mut self.rewards;
        let l = &mut self.losses;
        match a {
            Ablation::NoSer => {
                r.lambda_ent = 0.0;
                r.lambda_ssim = 0.0;
                r.lambda_nov = 0.0;
                r.lambda_eqb = 0.0;
            }
            Ablation::NoSdr => {
                r.beta_cov = 0.0;
                r.beta_jac = 0.0;
            }
            Ablation::NoTpr => {
                r.lambda_mse = 0.0;
                r.lambda_rank = 0.0;
            }
            Ablation::NoAug => {
                l.beta_cons = 0.0;
                l.beta_triplet = 0.0;
                l.beta_cross = 0.0;
            }
            Ablation::NoCons => l.beta_cons = 0.0,
            Ablation::NoTriplet => l.beta_triplet = 0.0,
            Ablation::NoCross => l.beta_cross = 0.0,
            Ablation::NoEntropy => r.lambda_ent = 0.0,
            Ablation::NoDissim => r.lambda_ssim = 0.0,
            Ablation::NoNovelty => r.lambda_nov = 0.0,
            Ablation::NoEqbias => r.lambda_eqb = 0.0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(tree: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for p in prefix {
        node = match node.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config section `{p}` in `{key}`"))),
        };
    }
    if !node.contains_key(*last) {
        return Err(Error::Config(format!("unknown config key `{key}`")));
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Named component removals, one per ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoSer,
    NoSdr,
    NoTpr,
    NoAug,
    NoCons,
    NoTriplet,
    NoCross,
    NoEntropy,
    NoDissim,
    NoNovelty,
    NoEqbias,
}

impl Ablation {
    pub const ALL: [Ablation; 11] = [
        Ablation::NoSer,
        Ablation::NoSdr,
        Ablation::NoTpr,
        Ablation::NoAug,
        Ablation::NoCons,
        Ablation::NoTriplet,
        Ablation::NoCross,
        Ablation::NoEntropy,
        Ablation::NoDissim,
        Ablation::NoNovelty,
        Ablation::NoEqbias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSer => "no-ser",
            Ablation::NoSdr => "no-sdr",
            Ablation::NoTpr => "no-tpr",
            Ablation::NoAug => "no-aug",
            Ablation::NoCons => "no-cons",
            Ablation::NoTriplet => "no-triplet",
            Ablation::NoCross => "no-cross",
            Ablation::NoEntropy => "no-entropy",
            Ablation::NoDissim => "no-dissim",
            Ablation::NoNovelty => "no-novelty",
            Ablation::NoEqbias => "no-eqbias",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}
