use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::corpus::PseudoPerplexity;
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 32;
pub const DEFAULT_MAX_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Masked,
    Autoregressive,
}

impl ModelMode {
    pub fn label(self) -> &'static str {
        match self {
            ModelMode::Masked => "masked",
            ModelMode::Autoregressive => "autoregressive",
        }
    }
}

/// Trainable tensors, stored flat and row-major. Gradients and optimizer
/// moments reuse this layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `vocab × dim`; doubles as the output projection.
    pub embeddings: Vec<f64>,
    /// `max_len × dim`
    pub positions: Vec<f64>,
    /// `dim × dim`
    pub hidden_weight: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    /// `vocab`
    pub output_bias: Vec<f64>,
}

impl Params {
    pub fn zeros(vocab: usize, dim: usize, max_len: usize) -> Self {
        Params {
            embeddings: vec![0.0; vocab * dim],
            positions: vec![0.0; max_len * dim],
            hidden_weight: vec![0.0; dim * dim],
            hidden_bias: vec![0.0; dim],
            output_bias: vec![0.0; vocab],
        }
    }

    pub fn zeros_like(other: &Params) -> Self {
        Params {
            embeddings: vec![0.0; other.embeddings.len()],
            positions: vec![0.0; other.positions.len()],
            hidden_weight: vec![0.0; other.hidden_weight.len()],
            hidden_bias: vec![0.0; other.hidden_bias.len()],
            output_bias: vec![0.0; other.output_bias.len()],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("embeddings", &self.embeddings),
            ("positions", &self.positions),
            ("hidden_weight", &self.hidden_weight),
            ("hidden_bias", &self.hidden_bias),
            ("output_bias", &self.output_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f64>); 5] {
        [
            ("embeddings", &mut self.embeddings),
            ("positions", &mut self.positions),
            ("hidden_weight", &mut self.hidden_weight),
            ("hidden_bias", &mut self.hidden_bias),
            ("output_bias", &mut self.output_bias),
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate `index` over the concatenation of all tensors.
    pub fn get(&self, mut index: usize) -> f64 {
        for (_, t) in self.tensors() {
            if index < t.len() {
                return t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn get_mut(&mut self, mut index: usize) -> &mut f64 {
        for (_, t) in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Params) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Mean-pooled context, one tanh hidden layer and an output layer tied to
/// the token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab: Vocabulary,
    pub dim: usize,
    pub max_len: usize,
    pub mode: ModelMode,
    pub params: Params,
}

impl ToyModel {
    /// All-zero parameters: every prediction is uniform.
    pub fn zeros(vocab: Vocabulary, dim: usize, max_len: usize, mode: ModelMode) -> Self {
        let params = Params::zeros(vocab.len(), dim, max_len);
        ToyModel {
            vocab,
            dim,
            max_len,
            mode,
            params,
        }
    }

    pub fn new(vocab: Vocabulary, dim: usize, max_len: usize, mode: ModelMode, seed: u64) -> Self {
        let mut model = Self::zeros(vocab, dim, max_len, mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Normal::new(0.0, 0.1).expect("valid normal");
        let hidden = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
        for x in model.params.embeddings.iter_mut() {
            *x = embed.sample(&mut rng);
        }
        for x in model.params.positions.iter_mut() {
            *x = embed.sample(&mut rng);
        }
        for x in model.params.hidden_weight.iter_mut() {
            *x = hidden.sample(&mut rng);
        }
        model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn embedding(&self, id: usize) -> &[f64] {
        &self.params.embeddings[id * self.dim..(id + 1) * self.dim]
    }

    pub fn position(&self, slot: usize) -> &[f64] {
        &self.params.positions[slot * self.dim..(slot + 1) * self.dim]
    }

    pub(crate) fn require_mode(&self, expected: ModelMode) -> Result<()> {
        if self.mode != expected {
            return Err(Error::ModeMismatch {
                expected: expected.label(),
                found: self.mode.label(),
            });
        }
        Ok(())
    }

    pub(crate) fn check_slot(&self, slot: usize, len: usize) -> Result<()> {
        if slot >= len {
            return Err(Error::PositionOutOfRange {
                position: slot,
                len,
            });
        }
        if slot >= self.max_len {
            return Err(Error::PositionOutOfRange {
                position: slot,
                len: self.max_len,
            });
        }
        Ok(())
    }

    /// Mean of the embeddings of `tokens` plus the embedding of `slot`.
    pub(crate) fn context(&self, tokens: &[usize], slot: usize) -> Vec<f64> {
        let mut ctx = vec![0.0; self.dim];
        if !tokens.is_empty() {
            let w = 1.0 / tokens.len() as f64;
            for &t in tokens {
                for (c, e) in ctx.iter_mut().zip(self.embedding(t)) {
                    *c += w * e;
                }
            }
        }
        for (c, p) in ctx.iter_mut().zip(self.position(slot)) {
            *c += p;
        }
        ctx
    }

    pub(crate) fn hidden(&self, ctx: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| {
                let row = &self.params.hidden_weight[i * d..(i + 1) * d];
                let z: f64 = row.iter().zip(ctx).map(|(w, x)| w * x).sum::<f64>()
                    + self.params.hidden_bias[i];
                z.tanh()
            })
            .collect()
    }

    pub(crate) fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        (0..self.vocab_size())
            .map(|v| {
                self.embedding(v)
                    .iter()
                    .zip(hidden)
                    .map(|(e, h)| e * h)
                    .sum::<f64>()
                    + self.params.output_bias[v]
            })
            .collect()
    }

    /// Log-probabilities over the vocabulary for the token at `slot`, with
    /// `context` the ids that remain visible.
    pub(crate) fn log_probs(&self, context: &[usize], slot: usize) -> Vec<f64> {
        let ctx = self.context(context, slot);
        let hidden = self.hidden(&ctx);
        log_softmax(&self.logits(&hidden))
    }

    /// Distribution for a masked slot. Tokens at `masked` positions (which
    /// must include `position`) are hidden from the context.
    pub fn predict_masked(&self, tokens: &[usize], masked: &[usize], position: usize) -> Result<Vec<f64>> {
        self.require_mode(ModelMode::Masked)?;
        self.check_slot(position, tokens.len())?;
        let visible = visible_tokens(tokens, masked, position);
        Ok(self.log_probs(&visible, position).into_iter().map(f64::exp).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_checkpoint_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let checkpoint = CheckpointRef {
            format: CHECKPOINT_FORMAT,
            version: CHECKPOINT_VERSION,
            model: self,
        };
        Ok(serde_json::to_vec(&checkpoint)?)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let checkpoint: Checkpoint = serde_json::from_slice(bytes)?;
        if checkpoint.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format `{}`",
                checkpoint.format
            )));
        }
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                checkpoint.version
            )));
        }
        let model = checkpoint.model;
        let expected = Params::zeros(model.vocab.len(), model.dim, model.max_len);
        for ((name, a), (_, b)) in model.params.tensors().iter().zip(expected.tensors()) {
            if a.len() != b.len() {
                return Err(Error::Checkpoint(format!(
                    "{name} has {} values, expected {}",
                    a.len(),
                    b.len()
                )));
            }
        }
        if !model.params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(model)
    }
}

const CHECKPOINT_FORMAT: &str = "genderdist-toymodel";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format: &'a str,
    version: u32,
    model: &'a ToyModel,
}

#[derive(Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: ToyModel,
}

pub(crate) fn visible_tokens(tokens: &[usize], masked: &[usize], position: usize) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != position && !masked.contains(i))
        .map(|(_, &t)| t)
        .collect()
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Distribution over the vocabulary at `masked_position`, all other tokens
/// visible.
pub fn mlm_predict(model: &ToyModel, tokens: &[usize], masked_position: usize) -> Result<Vec<f64>> {
    model.predict_masked(tokens, &[], masked_position)
}

/// Mean masked log-likelihood over every position, each masked in turn.
pub fn pseudo_log_likelihood_ids(model: &ToyModel, ids: &[usize]) -> Result<f64> {
    model.require_mode(ModelMode::Masked)?;
    if ids.is_empty() {
        return Err(Error::EmptyInput("sentence".into()));
    }
    let mut total = 0.0;
    for (i, &t) in ids.iter().enumerate() {
        model.check_slot(i, ids.len())?;
        let visible = visible_tokens(ids, &[], i);
        total += model.log_probs(&visible, i)[t];
    }
    Ok(total / ids.len() as f64)
}

pub fn pseudo_log_likelihood<S: AsRef<str>>(model: &ToyModel, sentence: &[S]) -> Result<f64> {
    pseudo_log_likelihood_ids(model, &model.vocab.encode(sentence))
}

/// Mean next-token negative log-likelihood; position `i` is predicted from
/// BOS and the tokens before it.
pub fn alm_sentence_loss_ids(model: &ToyModel, ids: &[usize]) -> Result<f64> {
    model.require_mode(ModelMode::Autoregressive)?;
    if ids.is_empty() {
        return Err(Error::EmptyInput("sentence".into()));
    }
    let mut prefix = Vec::with_capacity(ids.len() + 1);
    prefix.push(Vocabulary::BOS_ID);
    let mut total = 0.0;
    for (i, &t) in ids.iter().enumerate() {
        model.check_slot(i, ids.len())?;
        total -= model.log_probs(&prefix, i)[t];
        prefix.push(t);
    }
    Ok(total / ids.len() as f64)
}

pub fn alm_sentence_loss<S: AsRef<str>>(model: &ToyModel, sentence: &[S]) -> Result<f64> {
    alm_sentence_loss_ids(model, &model.vocab.encode(sentence))
}

/// Mean per-sentence language-modeling loss: negative pseudo-log-likelihood
/// for masked models, sentence loss for autoregressive ones.
pub fn lm_loss(model: &ToyModel, sentences: &[Vec<String>]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("evaluation corpus".into()));
    }
    let mut total = 0.0;
    for s in sentences {
        total += match model.mode {
            ModelMode::Masked => -pseudo_log_likelihood(model, s)?,
            ModelMode::Autoregressive => alm_sentence_loss(model, s)?,
        };
    }
    Ok(total / sentences.len() as f64)
}

impl PseudoPerplexity for ToyModel {
    fn pseudo_perplexity(&self, tokens: &[String]) -> f64 {
        let loss = match self.mode {
            ModelMode::Masked => pseudo_log_likelihood(self, tokens).map(|v| -v),
            ModelMode::Autoregressive => alm_sentence_loss(self, tokens),
        };
        loss.map(f64::exp).unwrap_or(f64::INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["he", "she", "works", "as", "a", "nurse", "w", "."])
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = ToyModel::zeros(vocab(), 8, 16, ModelMode::Masked);
        let ids = model.vocab.encode(&["he", "works", "as", "a", "nurse", "."]);
        let p = mlm_predict(&model, &ids, 0).unwrap();
        let u = 1.0 / model.vocab_size() as f64;
        assert!(p.iter().all(|x| (x - u).abs() < 1e-15));
    }

    #[test]
    fn position_out_of_range() {
        let model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, 1);
        let ids = model.vocab.encode(&["he", "works"]);
        assert!(matches!(
            mlm_predict(&model, &ids, 2),
            Err(Error::PositionOutOfRange { .. })
        ));
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let model = ToyModel::new(vocab(), 8, 16, ModelMode::Autoregressive, 1);
        assert!(matches!(
            mlm_predict(&model, &[4, 5], 0),
            Err(Error::ModeMismatch { .. })
        ));
        assert!(pseudo_log_likelihood(&model, &["he"]).is_err());
    }

    #[test]
    fn single_token_pll_is_its_masked_log_prob() {
        let model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, 3);
        let id = model.vocab.id("nurse").unwrap();
        let p = mlm_predict(&model, &[id], 0).unwrap();
        let pll = pseudo_log_likelihood(&model, &["nurse"]).unwrap();
        assert!((pll - p[id].ln()).abs() < 1e-12);
    }

    #[test]
    fn position_free_duplicate_scores_equal() {
        let mut model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, 3);
        model.params.positions.iter_mut().for_each(|x| *x = 0.0);
        let id = model.vocab.id("w").unwrap();
        let a = mlm_predict(&model, &[id, id], 0).unwrap()[id];
        let b = mlm_predict(&model, &[id, id], 1).unwrap()[id];
        assert_eq!(a, b);
    }

    #[test]
    fn oov_scores_as_unk() {
        let model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, 3);
        let a = pseudo_log_likelihood(&model, &["he", "zebra"]).unwrap();
        let b = pseudo_log_likelihood(&model, &["he", "[UNK]"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_alm_loss_is_log_vocab() {
        let model = ToyModel::zeros(vocab(), 8, 16, ModelMode::Autoregressive);
        let loss = alm_sentence_loss(&model, &["he", "works", "as", "a", "nurse", "."]).unwrap();
        assert!((loss - (model.vocab_size() as f64).ln()).abs() < 1e-12);
        assert!(alm_sentence_loss(&model, &[] as &[&str]).is_err());
    }

    #[test]
    fn confident_alm_loss_is_zero() {
        let mut model = ToyModel::zeros(vocab(), 8, 16, ModelMode::Autoregressive);
        let w = model.vocab.id("w").unwrap();
        model.params.output_bias[w] = 800.0;
        let loss = alm_sentence_loss(&model, &["w", "w", "w"]).unwrap();
        assert!(loss.abs() < 1e-300);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, 11);
        let bytes = model.to_checkpoint_bytes().unwrap();
        let back = ToyModel::from_checkpoint_bytes(&bytes).unwrap();
        for ((_, a), (_, b)) in model.params.tensors().iter().zip(back.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(model, back);
        assert_eq!(bytes, back.to_checkpoint_bytes().unwrap());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, 11);
        let mut value: serde_json::Value =
            serde_json::from_slice(&model.to_checkpoint_bytes().unwrap()).unwrap();
        value["model"]["params"]["hidden_bias"] = serde_json::json!([1.0]);
        let bytes = serde_json::to_vec(&value).unwrap();
        assert!(matches!(
            ToyModel::from_checkpoint_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        value["format"] = serde_json::json!("other");
        assert!(ToyModel::from_checkpoint_bytes(&serde_json::to_vec(&value).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_normalized(seed in any::<u64>(), len in 1usize..8, pos in 0usize..8, scale in 0.1f64..20.0) {
            let mut model = ToyModel::new(vocab(), 8, 16, ModelMode::Masked, seed);
            model.params.scale(scale);
            let ids: Vec<usize> = (0..len).map(|i| 4 + (i * 7 + seed as usize) % 8).collect();
            let pos = pos % len;
            let p = mlm_predict(&model, &ids, pos).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
