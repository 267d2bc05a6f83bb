use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{lm_loss, ModelMode, ToyModel};
use super::optim::{AdamWConfig, OptimizerState};
use super::tape::Tape;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            batch_size: 32,
            optimizer: AdamWConfig {
                learning_rate: 5e-3,
                ..Default::default()
            },
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Held-out language-modeling loss before training (index 0) and after
    /// each epoch.
    pub heldout_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Trains on the masked-token objective (every position of every sentence)
/// or, for autoregressive models, on next-token prediction.
pub fn pretrain(
    model: &mut ToyModel,
    corpus: &[Vec<String>],
    heldout: &[Vec<String>],
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyInput("pretraining corpus".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidValue("batch size must be positive".into()));
    }
    let encoded: Vec<Vec<usize>> = corpus.iter().map(|s| model.vocab.encode(s)).collect();
    let mut report = PretrainReport {
        heldout_loss: Vec::with_capacity(config.epochs + 1),
        train_loss: Vec::with_capacity(config.epochs),
    };
    if !heldout.is_empty() {
        report.heldout_loss.push(lm_loss(model, heldout)?);
    }
    let mut optimizer = OptimizerState::new(config.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..encoded.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (loss, grads) = {
                let mut tape = Tape::new(model);
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let term = match model.mode {
                        ModelMode::Masked => {
                            let ll = tape.pseudo_log_likelihood(&encoded[i])?;
                            tape.scale(ll, -1.0)
                        }
                        ModelMode::Autoregressive => tape.alm_sentence_loss(&encoded[i])?,
                    };
                    terms.push(term);
                }
                let loss = tape.mean(&terms);
                (tape.value(loss), tape.backward(loss)?)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss diverged in epoch {epoch}"
                )));
            }
            epoch_loss += loss * batch.len() as f64;
            optimizer.step(&mut model.params, &grads)?;
        }
        report.train_loss.push(epoch_loss / encoded.len() as f64);
        if !heldout.is_empty() {
            let held = lm_loss(model, heldout)?;
            if !held.is_finite() {
                return Err(Error::NonFinite(format!(
                    "held-out loss diverged in epoch {epoch}"
                )));
            }
            log::info!(
                "pretrain epoch {}: train {:.4} held-out {:.4}",
                epoch + 1,
                report.train_loss[epoch],
                held
            );
            report.heldout_loss.push(held);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use crate::toymodel::Vocabulary;

    fn corpus() -> Vec<Vec<String>> {
        ["he works as a nurse.", "she works as a nurse.", "he is a pilot."]
            .iter()
            .cycle()
            .take(60)
            .map(|s| tokenize(s))
            .collect()
    }

    fn model() -> ToyModel {
        let vocab = Vocabulary::build(corpus().into_iter().flatten());
        ToyModel::new(vocab, 8, 16, ModelMode::Masked, 1)
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = model();
        let before = m.clone();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let report = pretrain(&mut m, &corpus(), &corpus()[..3], &cfg).unwrap();
        assert_eq!(m, before);
        assert_eq!(report.heldout_loss.len(), 1);
    }

    #[test]
    fn heldout_loss_decreases_and_is_deterministic() {
        let cfg = PretrainConfig {
            epochs: 3,
            batch_size: 8,
            ..Default::default()
        };
        let mut a = model();
        let report = pretrain(&mut a, &corpus(), &corpus()[..3], &cfg).unwrap();
        assert!(report.heldout_loss.last().unwrap() < &report.heldout_loss[0]);
        let mut b = model();
        pretrain(&mut b, &corpus(), &corpus()[..3], &cfg).unwrap();
        assert_eq!(a.to_checkpoint_bytes().unwrap(), b.to_checkpoint_bytes().unwrap());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let mut m = model();
        assert!(pretrain(&mut m, &[], &[], &PretrainConfig::default()).is_err());
    }
}
