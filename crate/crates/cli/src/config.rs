use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use genderdist::bias::DesiredDistribution;
use genderdist::corpus::SkewConfig;
use genderdist::mitigation::{
    LossKind, StabilityConstants, TrainConfig, ALPHA_HIGH_KL, ALPHA_LOW_KL, BATCH_SIZE_GRID, BETA_GRID,
    DEFAULT_SEEDS, GAMMA_GRID,
};
use genderdist::toymodel::{AdamWConfig, ModelMode, PretrainConfig, DEFAULT_WEIGHT_DECAY};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::exit::Failure;

/// Every knob of a run, as one flat JSON object. Keys carry a section
/// prefix (`train.beta`, `skew.size`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus generation, model initialization, pretraining and the
    /// sweep.
    pub seed: u64,
    pub target: DesiredDistribution,
    pub loss: LossKind,
    /// Pseudo-perplexity below which a probe sentence counts as common.
    pub ppl_cutoff: f64,

    #[serde(rename = "paths.professions")]
    pub professions: Option<PathBuf>,
    #[serde(rename = "paths.pairs")]
    pub pairs: Option<PathBuf>,
    #[serde(rename = "paths.templates")]
    pub templates: Option<PathBuf>,
    #[serde(rename = "paths.corpus_dir")]
    pub corpus_dir: Option<PathBuf>,
    #[serde(rename = "paths.checkpoint_dir")]
    pub checkpoint_dir: Option<PathBuf>,
    #[serde(rename = "paths.report_dir")]
    pub report_dir: Option<PathBuf>,

    #[serde(rename = "skew.size")]
    pub skew_size: usize,
    #[serde(rename = "skew.heldout_size")]
    pub skew_heldout_size: usize,
    #[serde(rename = "skew.filler_ratio")]
    pub skew_filler_ratio: f64,
    /// Male probability per profession; missing ones use the real share.
    #[serde(rename = "skew.male_prob")]
    pub skew_male_prob: BTreeMap<String, f64>,
    #[serde(rename = "skew.template_weights")]
    pub skew_template_weights: BTreeMap<String, f64>,

    #[serde(rename = "model.mode")]
    pub model_mode: ModelMode,
    #[serde(rename = "model.dim")]
    pub model_dim: usize,
    #[serde(rename = "model.max_len")]
    pub model_max_len: usize,

    #[serde(rename = "pretrain.epochs")]
    pub pretrain_epochs: usize,
    #[serde(rename = "pretrain.batch_size")]
    pub pretrain_batch_size: usize,
    #[serde(rename = "pretrain.learning_rate")]
    pub pretrain_learning_rate: f64,

    #[serde(rename = "split.seed")]
    pub split_seed: u64,
    /// Explicit template ids; when both are empty the partition comes
    /// from pseudo-perplexity.
    #[serde(rename = "split.train_templates")]
    pub train_templates: Vec<String>,
    #[serde(rename = "split.test_templates")]
    pub test_templates: Vec<String>,

    #[serde(rename = "train.beta")]
    pub beta: f64,
    #[serde(rename = "train.gamma")]
    pub gamma: f64,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.val_batch_size")]
    pub val_batch_size: usize,
    #[serde(rename = "train.learning_rate")]
    pub learning_rate: f64,
    #[serde(rename = "train.weight_decay")]
    pub weight_decay: f64,
    #[serde(rename = "train.patience")]
    pub patience: usize,
    #[serde(rename = "train.improvement_threshold")]
    pub improvement_threshold: Option<f64>,
    #[serde(rename = "train.max_epochs")]
    pub max_epochs: usize,
    #[serde(rename = "train.alpha_high")]
    pub alpha_high: f64,
    #[serde(rename = "train.alpha_low")]
    pub alpha_low: f64,
    #[serde(rename = "train.seeds")]
    pub seeds: Vec<u64>,

    #[serde(rename = "sweep.betas")]
    pub sweep_betas: Vec<f64>,
    #[serde(rename = "sweep.gammas")]
    pub sweep_gammas: Vec<f64>,
    #[serde(rename = "sweep.batch_sizes")]
    pub sweep_batch_sizes: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let pretrain = PretrainConfig::default();
        RunConfig {
            seed: 42,
            target: DesiredDistribution::Equal,
            loss: LossKind::Uniform,
            ppl_cutoff: 15.0,
            professions: None,
            pairs: None,
            templates: None,
            corpus_dir: None,
            checkpoint_dir: None,
            report_dir: None,
            skew_size: 20_000,
            skew_heldout_size: 400,
            skew_filler_ratio: 0.2,
            skew_male_prob: BTreeMap::new(),
            skew_template_weights: BTreeMap::new(),
            model_mode: ModelMode::Masked,
            model_dim: 32,
            model_max_len: 16,
            pretrain_epochs: pretrain.epochs,
            pretrain_batch_size: pretrain.batch_size,
            pretrain_learning_rate: pretrain.optimizer.learning_rate,
            split_seed: 42,
            train_templates: Vec::new(),
            test_templates: Vec::new(),
            beta: train.beta,
            gamma: train.gamma,
            batch_size: train.batch_size,
            val_batch_size: train.val_batch_size,
            learning_rate: train.optimizer.learning_rate,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            patience: train.patience,
            improvement_threshold: None,
            max_epochs: train.max_epochs,
            alpha_high: ALPHA_HIGH_KL,
            alpha_low: ALPHA_LOW_KL,
            seeds: DEFAULT_SEEDS.to_vec(),
            sweep_betas: BETA_GRID.to_vec(),
            sweep_gammas: GAMMA_GRID.to_vec(),
            sweep_batch_sizes: BATCH_SIZE_GRID.to_vec(),
        }
    }
}

/// Parses the right-hand side of `--set`: JSON when it parses, otherwise a
/// bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, Failure> {
        serde_json::from_str(text).map_err(|e| Failure::config(format!("bad config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_json(&text)
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides; unknown keys are rejected.
    pub fn with_overrides(self, sets: &[String]) -> Result<Self, Failure> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut map: Map<String, Value> = match serde_json::to_value(&self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config is an object"),
        };
        for s in sets {
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Failure::config(format!("--set expects key=value, got `{s}`")))?;
            if !map.contains_key(key) {
                return Err(Failure::config(format!("unknown config key `{key}`")));
            }
            map.insert(key.to_string(), parse_value(raw));
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| Failure::config(format!("bad override: {e}")))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.train_config(self.seed).validate().map_err(Failure::from)?;
        self.skew_config(&[]).validate().map_err(Failure::from)?;
        if self.seeds.is_empty() {
            return Err(Failure::config("train.seeds is empty"));
        }
        if self.train_templates.is_empty() != self.test_templates.is_empty() {
            return Err(Failure::config(
                "split.train_templates and split.test_templates must be given together",
            ));
        }
        if !(self.ppl_cutoff > 0.0) {
            return Err(Failure::config(format!("ppl_cutoff {} must be positive", self.ppl_cutoff)));
        }
        if self.model_dim == 0 || self.model_max_len == 0 || self.pretrain_batch_size == 0 {
            return Err(Failure::config("model.dim, model.max_len and pretrain.batch_size must be positive"));
        }
        Ok(())
    }

    pub fn corpus_dir(&self, out: &Path) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| out.join("corpus"))
    }

    pub fn checkpoint_dir(&self, out: &Path) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| out.join("checkpoints"))
    }

    pub fn report_dir(&self, out: &Path) -> PathBuf {
        self.report_dir.clone().unwrap_or_else(|| out.join("reports"))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            desired: self.target,
            loss: self.loss,
            beta: self.beta,
            gamma: self.gamma,
            batch_size: self.batch_size,
            val_batch_size: self.val_batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.learning_rate,
                weight_decay: self.weight_decay,
                ..Default::default()
            },
            patience: self.patience,
            improvement_threshold: self.improvement_threshold,
            max_epochs: self.max_epochs,
            seed,
            alpha_high: self.alpha_high,
            alpha_low: self.alpha_low,
            stability: StabilityConstants::default(),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.pretrain_learning_rate,
                ..Default::default()
            },
            seed: self.seed,
        }
    }

    /// The skew table with an explicit entry for every profession.
    pub fn skew_config(&self, professions: &[genderdist::corpus::Profession]) -> SkewConfig {
        let mut skew = SkewConfig {
            male_prob: self.skew_male_prob.clone(),
            size: self.skew_size,
            heldout_size: self.skew_heldout_size,
            filler_ratio: self.skew_filler_ratio,
            seed: self.seed,
            template_weights: self.skew_template_weights.clone(),
        };
        for p in professions {
            let prob = skew.male_prob_for(p);
            skew.male_prob.insert(p.name.clone(), prob);
        }
        skew
    }
}
