//! A small trainable language model with its own gradient tape.

mod model;
mod optim;
mod pretrain;
mod tape;
mod vocab;

pub use model::{
    alm_sentence_loss, alm_sentence_loss_ids, lm_loss, mlm_predict, pseudo_log_likelihood,
    pseudo_log_likelihood_ids, ModelMode, Params, ToyModel, DEFAULT_DIM, DEFAULT_MAX_LEN,
};
pub use optim::{AdamWConfig, OptimizerState, DEFAULT_LEARNING_RATE, DEFAULT_WEIGHT_DECAY};
pub use pretrain::{pretrain, PretrainConfig, PretrainReport};
pub use tape::{Tape, Var};
pub use vocab::{Vocabulary, BOS, MASK, PAD, UNK};

use crate::corpus::{GenderedPair, Profession, Template};

/// Every token the probing pipeline needs: template words, determiners,
/// articles, gendered words and profession tokens.
pub fn required_tokens(
    professions: &[Profession],
    pairs: &[GenderedPair],
    templates: &[Template],
) -> Vec<String> {
    let mut tokens: Vec<String> = vec!["this".into(), "my".into(), "a".into(), "an".into()];
    for t in templates {
        tokens.extend(t.words().map(str::to_string));
    }
    for p in pairs {
        tokens.push(p.male.clone());
        tokens.push(p.female.clone());
    }
    tokens.extend(professions.iter().map(Profession::token));
    tokens
}
