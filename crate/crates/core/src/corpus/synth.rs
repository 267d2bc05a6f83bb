use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::template::{fill, render_tokens, tokenize};
use super::{Gender, GenderedPair, Profession, Template};
use crate::error::{Error, Result};

/// Sentence frames without a profession. Gendered frames keep the gendered
/// words' unconditional frequencies balanced.
const GENDERED_FILLERS: [&str; 4] = [
    "[DET/PRONOUN] [attribute] went home early.",
    "[DET/PRONOUN] [attribute] had a good day.",
    "[DET/PRONOUN] [attribute] likes to read books.",
    "[DET/PRONOUN] [attribute] is at home.",
];
const NEUTRAL_FILLERS: [&str; 4] = [
    "the weather was nice today.",
    "it was a long week at work.",
    "the city is busy in the morning.",
    "the day started with a good breakfast.",
];

/// Controls the injected gender skew of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewConfig {
    /// Probability that a sentence about the profession carries a male
    /// attribute. Professions without an entry use `1 - female_share`.
    pub male_prob: BTreeMap<String, f64>,
    /// Number of pretraining sentences.
    pub size: usize,
    /// Number of held-out sentences.
    pub heldout_size: usize,
    /// Fraction of sentences drawn from filler frames.
    pub filler_ratio: f64,
    pub seed: u64,
    /// Relative sampling weight per template id; missing ids weigh 1.
    #[serde(default)]
    pub template_weights: BTreeMap<String, f64>,
}

impl SkewConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidValue("corpus size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.filler_ratio) {
            return Err(Error::InvalidValue(format!(
                "filler ratio {} outside [0, 1]",
                self.filler_ratio
            )));
        }
        for (name, p) in &self.male_prob {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidValue(format!(
                    "male probability {p} for {name} outside [0, 1]"
                )));
            }
        }
        for (id, w) in &self.template_weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidValue(format!("template weight {w} for {id}")));
            }
        }
        Ok(())
    }

    pub fn male_prob_for(&self, profession: &Profession) -> f64 {
        self.male_prob
            .get(&profession.name)
            .copied()
            .unwrap_or(1.0 - profession.female_share)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSentence {
    pub text: String,
    pub profession: Option<String>,
    pub gender: Option<Gender>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub pretrain: Vec<CorpusSentence>,
    pub heldout: Vec<CorpusSentence>,
}

impl SyntheticCorpus {
    pub fn pretrain_tokens(&self) -> Vec<Vec<String>> {
        self.pretrain.iter().map(|s| tokenize(&s.text)).collect()
    }

    pub fn heldout_tokens(&self) -> Vec<Vec<String>> {
        self.heldout.iter().map(|s| tokenize(&s.text)).collect()
    }
}

/// Draws `size + heldout_size` sentences from one seeded stream; the first
/// `size` form the pretraining partition and the rest the held-out one.
pub fn generate_synthetic_corpus(
    skew: &SkewConfig,
    professions: &[Profession],
    pairs: &[GenderedPair],
    templates: &[Template],
) -> Result<SyntheticCorpus> {
    skew.validate()?;
    if professions.is_empty() || pairs.is_empty() || templates.is_empty() {
        return Err(Error::EmptyInput("corpus ingredients".into()));
    }
    let weights: Vec<f64> = templates
        .iter()
        .map(|t| skew.template_weights.get(&t.id).copied().unwrap_or(1.0))
        .collect();
    let template_dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidValue(format!("template weights: {e}")))?;
    let gendered_fillers: Vec<Vec<String>> = GENDERED_FILLERS.iter().map(|t| tokenize(t)).collect();
    let male_probs: Vec<f64> = professions.iter().map(|p| skew.male_prob_for(p)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(skew.seed);
    let total = skew.size + skew.heldout_size;
    let mut sentences = Vec::with_capacity(total);
    for _ in 0..total {
        let sentence = if rng.random::<f64>() < skew.filler_ratio {
            if rng.random_bool(0.5) {
                let frame = &gendered_fillers[rng.random_range(0..gendered_fillers.len())];
                let pair = &pairs[rng.random_range(0..pairs.len())];
                let gender = if rng.random_bool(0.5) {
                    Gender::Male
                } else {
                    Gender::Female
                };
                let (tokens, _, _) = fill(frame, pair, gender, None);
                CorpusSentence {
                    text: render_tokens(&tokens),
                    profession: None,
                    gender: Some(gender),
                }
            } else {
                CorpusSentence {
                    text: NEUTRAL_FILLERS[rng.random_range(0..NEUTRAL_FILLERS.len())].to_string(),
                    profession: None,
                    gender: None,
                }
            }
        } else {
            let r = rng.random_range(0..professions.len());
            let gender = if rng.random::<f64>() < male_probs[r] {
                Gender::Male
            } else {
                Gender::Female
            };
            let pair = &pairs[rng.random_range(0..pairs.len())];
            let template = &templates[template_dist.sample(&mut rng)];
            let token = professions[r].token();
            let (tokens, _, _) = fill(template.tokens(), pair, gender, Some(&token));
            CorpusSentence {
                text: render_tokens(&tokens),
                profession: Some(professions[r].name.clone()),
                gender: Some(gender),
            }
        };
        sentences.push(sentence);
    }
    let heldout = sentences.split_off(skew.size);
    Ok(SyntheticCorpus {
        pretrain: sentences,
        heldout,
    })
}
