use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::detector::{ConfidenceMode, DEFAULT_TAU};
use crate::diffusion::{DenoiserConfig, SampleConfig, TrainConfig, TrainMode, DEFAULT_GUIDANCE};
use crate::error::{invalid, GeomError, Result};
use crate::geometry::{NegativeStrategy, WeightMode};
use crate::vocab::{ConceptKind, MAX_CAPTION_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Preliminary,
    DataRemoval,
    ModelRemoval,
    Ablation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reweight {
    None,
    Intent,
    Literal,
    Confidence,
}

impl Reweight {
    pub fn mode(self) -> Option<WeightMode> {
        match self {
            Reweight::None => None,
            Reweight::Intent => Some(WeightMode::Intent),
            Reweight::Literal => Some(WeightMode::Literal),
            Reweight::Confidence => Some(WeightMode::Confidence),
        }
    }
}

const NEGATIVE_CAPTION: bool = false;
const REMOVAL_LR: f64 = 3e-4;

/// Images the model-removal tokens are learned from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RemovalSource {
    /// Generations of the contaminated model for training captions.
    Generated,
    /// Training-split images of the dataset.
    Dataset,
}

/// Negative prompt used at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Negative {
    /// Unconditional caption.
    None,
    /// Positive caption plus the concept token.
    Concept,
    /// Positive caption plus the concept token and `count` location tokens.
    Geometry(NegativeStrategy, usize),
}

impl fmt::Display for Negative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Negative::None => f.write_str("none"),
            Negative::Concept => f.write_str("concept"),
            Negative::Geometry(NegativeStrategy::Uniform, k) => write!(f, "concept+uniform:{k}"),
            Negative::Geometry(NegativeStrategy::Random, k) => write!(f, "concept+random:{k}"),
        }
    }
}

impl FromStr for Negative {
    type Err = GeomError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => return Ok(Negative::None),
            "concept" => return Ok(Negative::Concept),
            _ => {}
        }
        let bad = || invalid(format!("unknown negative prompt `{s}`"));
        let rest = s.strip_prefix("concept+").ok_or_else(bad)?;
        let (name, count) = rest.split_once(':').ok_or_else(bad)?;
        let strategy = match name {
            "uniform" => NegativeStrategy::Uniform,
            "random" => NegativeStrategy::Random,
            _ => return Err(bad()),
        };
        let count: usize = count.parse().map_err(|_| bad())?;
        if count == 0 {
            return Err(bad());
        }
        Ok(Negative::Geometry(strategy, count))
    }
}

impl TryFrom<String> for Negative {
    type Error = GeomError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Negative> for String {
    fn from(n: Negative) -> String {
        n.to_string()
    }
}

/// Everything that determines one run. Stored as flat `key=value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,

    pub n: usize,
    pub icr: f64,
    pub kind: ConceptKind,
    pub data_seed: u64,
    pub n_test: usize,
    pub image_size: usize,

    /// Bin side in pixels.
    pub bin: usize,
    /// Cap on location tokens per region, keeping the highest-weighted bins;
    /// 0 keeps every covered bin.
    pub k_cap: usize,

    pub concept_token: bool,
    pub geometry: bool,
    pub reweight: Reweight,
    pub alpha: f64,
    pub threshold: f64,

    pub oracle_confidence: ConfidenceMode,
    pub oracle_sigma_px: f64,
    pub oracle_fn_rate: f64,
    pub oracle_seed: u64,
    /// Standard deviation, in bins, of the shift applied to annotated cells.
    pub geo_sigma: f64,

    /// Width of the first stage; later stages use 2× and 3×.
    pub channels: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub uncond_prob: f64,
    pub train_seed: u64,

    pub negative: Negative,
    /// Prefix negative prompts with the positive caption.
    pub negative_caption: bool,
    pub guidance: f64,
    pub sample_steps: usize,
    pub n_gen: usize,
    pub sample_seed: u64,
    /// Generations annotated to learn tokens for model removal.
    pub pool: usize,
    pub removal_source: RemovalSource,
    /// Learning rate for the new token rows in model removal.
    pub removal_lr: f64,

    pub tau: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            experiment: Experiment::DataRemoval,
            n: 2000,
            icr: 0.5,
            kind: ConceptKind::Watermark,
            data_seed: 1,
            n_test: 500,
            image_size: 32,
            bin: 4,
            k_cap: 0,
            concept_token: true,
            geometry: true,
            reweight: Reweight::Intent,
            alpha: train.alpha,
            threshold: train.threshold,
            oracle_confidence: ConfidenceMode::Fixed,
            oracle_sigma_px: 0.0,
            oracle_fn_rate: 0.0,
            oracle_seed: 0,
            geo_sigma: 0.0,
            channels: DenoiserConfig::default().channels[0],
            steps: train.steps,
            batch_size: train.batch_size,
            lr: train.lr,
            uncond_prob: train.uncond_prob,
            train_seed: 0,
            negative: Negative::Geometry(NegativeStrategy::Uniform, 16),
            negative_caption: NEGATIVE_CAPTION,
            guidance: DEFAULT_GUIDANCE,
            sample_steps: 25,
            n_gen: 500,
            sample_seed: 0,
            pool: 500,
            removal_source: RemovalSource::Generated,
            removal_lr: REMOVAL_LR,
            tau: DEFAULT_TAU,
        }
    }
}

impl RunConfig {
    /// Plain captions, no re-weighting, unconditional negatives.
    pub fn baseline(mut self) -> Self {
        self.concept_token = false;
        self.geometry = false;
        self.reweight = Reweight::None;
        self.negative = Negative::None;
        self
    }

    pub fn is_baseline(&self) -> bool {
        !self.concept_token && !self.geometry && self.reweight == Reweight::None
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_gen == 0 {
            return Err(invalid("n and n_gen must be positive"));
        }
        if !(0.0..=1.0).contains(&self.icr) {
            return Err(invalid(format!("icr {} outside [0, 1]", self.icr)));
        }
        if self.bin == 0 || self.image_size % self.bin != 0 {
            return Err(invalid(format!("bin {} must divide image size {}", self.bin, self.image_size)));
        }
        if self.geometry && !self.concept_token {
            return Err(invalid("geometry tokens need the concept token"));
        }
        if self.channels == 0 || self.steps == 0 || self.batch_size == 0 || self.sample_steps == 0 {
            return Err(invalid("channels, steps, batch_size and sample_steps must be positive"));
        }
        if !(self.lr > 0.0) || !(self.removal_lr > 0.0) || !(self.alpha > 0.0) || !(self.geo_sigma >= 0.0) {
            return Err(invalid("lr, removal_lr and alpha must be positive, geo_sigma non-negative"));
        }
        Ok(())
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        let c = self.channels;
        DenoiserConfig {
            image_size: self.image_size,
            channels: [c, 2 * c, 3 * c],
            max_len: MAX_CAPTION_LEN,
            ..Default::default()
        }
    }

    pub fn train_config(&self, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            batch_size: self.batch_size,
            lr: match mode {
                TrainMode::ModelRemoval => self.removal_lr,
                TrainMode::DataRemoval => self.lr,
            },
            steps: self.steps,
            weight_mode: self.reweight.mode().unwrap_or(WeightMode::Intent),
            alpha: self.alpha,
            threshold: self.threshold,
            uncond_prob: self.uncond_prob,
            seed: self.train_seed,
        }
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            scale: self.guidance,
            steps: self.sample_steps,
            seed: self.sample_seed,
            batch: 50,
        }
    }

    /// Sorted `key=value` lines.
    pub fn to_kv(&self) -> String {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!("config is a struct")
        };
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let v = match &map[k] {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Parses `key=value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are errors.
    pub fn from_kv(text: &str) -> Result<Self> {
        let Value::Object(mut map) = serde_json::to_value(Self::default())? else {
            unreachable!("config is a struct")
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GeomError::Format(format!("line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let value = match map.get(k) {
                None => return Err(GeomError::Format(format!("line {}: unknown key `{k}`", i + 1))),
                Some(Value::String(_)) => Value::String(v.to_string()),
                Some(_) => serde_json::from_str(v)
                    .map_err(|_| GeomError::Format(format!("line {}: bad value `{v}` for `{k}`", i + 1)))?,
            };
            map.insert(k.to_string(), value);
        }
        let cfg: Self = serde_json::from_value(Value::Object(map))
            .map_err(|e| GeomError::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_kv())?)
    }

    /// First 12 hex digits of the SHA-256 of [`to_kv`](Self::to_kv).
    pub fn hash(&self) -> String {
        short_hash(&self.to_kv())
    }

    /// Hash of the fields that affect the trained weights only, so runs that
    /// differ only in sampling or evaluation share a checkpoint.
    pub fn train_hash(&self) -> String {
        let d = Self::default();
        let mut c = self.clone();
        c.experiment = d.experiment;
        c.n_test = d.n_test;
        c.negative = d.negative;
        c.negative_caption = d.negative_caption;
        c.guidance = d.guidance;
        c.sample_steps = d.sample_steps;
        c.n_gen = d.n_gen;
        c.sample_seed = d.sample_seed;
        c.pool = d.pool;
        c.removal_source = d.removal_source;
        c.removal_lr = d.removal_lr;
        c.tau = d.tau;
        if c.is_baseline() {
            c.alpha = d.alpha;
            c.k_cap = d.k_cap;
            c.geo_sigma = d.geo_sigma;
            c.oracle_confidence = d.oracle_confidence;
            c.oracle_sigma_px = d.oracle_sigma_px;
            c.oracle_fn_rate = d.oracle_fn_rate;
            c.oracle_seed = d.oracle_seed;
            c.threshold = d.threshold;
            c.bin = d.bin;
        }
        short_hash(&c.to_kv())
    }
}

fn short_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// Applies `key=value` overrides, e.g. from the command line.
pub fn with_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    let mut text = cfg.to_kv();
    for o in overrides {
        text.push_str(o);
        text.push('\n');
    }
    RunConfig::from_kv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip_is_lossless() {
        let cfg = RunConfig {
            icr: 0.25,
            lr: 1.0 / 3.0,
            kind: ConceptKind::Text,
            negative: Negative::Geometry(NegativeStrategy::Random, 7),
            reweight: Reweight::Confidence,
            ..Default::default()
        };
        let text = cfg.to_kv();
        let back = RunConfig::from_kv(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_kv(), text);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::from_kv("# comment\n\nicr = 0\nnegative=concept\n").unwrap();
        assert_eq!(cfg.icr, 0.0);
        assert_eq!(cfg.negative, Negative::Concept);
        assert_eq!(cfg.n, RunConfig::default().n);
    }

    #[test]
    fn bad_input_is_rejected() {
        assert!(RunConfig::from_kv("nope=1").is_err());
        assert!(RunConfig::from_kv("n=abc").is_err());
        assert!(RunConfig::from_kv("icr=2").is_err());
        assert!(RunConfig::from_kv("negative=concept+grid:4").is_err());
        assert!(RunConfig::from_kv("bin=5").is_err());
        assert!(RunConfig::from_kv("missing equals").is_err());
    }

    #[test]
    fn hashes_track_relevant_fields() {
        let a = RunConfig::default();
        let b = RunConfig { n_gen: 10, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.train_hash(), b.train_hash());
        let c = RunConfig { steps: 5, ..a.clone() };
        assert_ne!(a.train_hash(), c.train_hash());
        // baselines ignore annotation settings
        let base = a.clone().baseline();
        let base2 = RunConfig { bin: 8, alpha: 0.5, ..base.clone() };
        assert_eq!(base.train_hash(), base2.train_hash());
    }

    #[test]
    fn negative_strings() {
        for s in ["none", "concept", "concept+uniform:16", "concept+random:3"] {
            assert_eq!(s.parse::<Negative>().unwrap().to_string(), s);
        }
        assert!("concept+uniform:0".parse::<Negative>().is_err());
    }
}
