use serde::{Deserialize, Serialize};

use super::{
    is_terminal, Gender, GenderedPair, ProbeSentence, Profession, ProfessionSplit, Rarity,
    Template, PLACEHOLDER_ARTICLE, PLACEHOLDER_ATTRIBUTE, PLACEHOLDER_DET, PLACEHOLDER_TARGET,
};
use crate::error::{Error, Result};

const SPLIT_PUNCTUATION: [char; 7] = ['.', ',', '!', '?', ';', ':', '"'];

/// Lowercases and splits on whitespace, peeling leading and trailing
/// punctuation into tokens of their own. Bracketed placeholders keep their
/// case.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        let mut leading = Vec::new();
        while let Some(c) = rest.chars().next().filter(|c| SPLIT_PUNCTUATION.contains(c)) {
            leading.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().last().filter(|c| SPLIT_PUNCTUATION.contains(c)) {
            trailing.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        tokens.extend(leading);
        if !rest.is_empty() {
            if rest.starts_with('[') {
                tokens.push(rest.to_string());
            } else {
                tokens.push(rest.to_lowercase());
            }
        }
        tokens.extend(trailing.into_iter().rev());
    }
    tokens
}

/// Inverse of [`tokenize`] for sentences built by this crate.
pub fn render_tokens(tokens: &[String]) -> String {
    let mut out = String::new();
    for token in tokens {
        let attach = token.len() == 1 && token.chars().all(|c| SPLIT_PUNCTUATION.contains(&c));
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(token);
    }
    out
}

pub(crate) fn article_for(word: &str) -> &'static str {
    match word.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Fills placeholders in a token list. Returns the tokens and the indices
/// of the attribute and target slots when present.
pub(crate) fn fill(
    template: &[String],
    pair: &GenderedPair,
    gender: Gender,
    target: Option<&str>,
) -> (Vec<String>, Option<usize>, Option<usize>) {
    let mut tokens = Vec::with_capacity(template.len());
    let mut attribute_index = None;
    let mut target_index = None;
    for token in template {
        match token.as_str() {
            PLACEHOLDER_DET => {
                if let Some(det) = pair.determiner_class.word() {
                    tokens.push(det.to_string());
                }
            }
            PLACEHOLDER_ATTRIBUTE => {
                attribute_index = Some(tokens.len());
                tokens.push(pair.word(gender).to_string());
            }
            PLACEHOLDER_ARTICLE => {
                tokens.push(article_for(target.unwrap_or("")).to_string());
            }
            PLACEHOLDER_TARGET => {
                if let Some(t) = target {
                    target_index = Some(tokens.len());
                    tokens.push(t.to_string());
                }
            }
            other => tokens.push(other.to_string()),
        }
    }
    (tokens, attribute_index, target_index)
}

pub fn expand_template(
    template: &Template,
    pair: &GenderedPair,
    gender: Gender,
    profession: &Profession,
) -> ProbeSentence {
    let target = profession.token();
    let (tokens, attribute_index, target_index) =
        fill(template.tokens(), pair, gender, Some(&target));
    debug_assert!(tokens.last().is_some_and(|t| is_terminal(t)));
    ProbeSentence {
        tokens,
        attribute_index: attribute_index.expect("template validated to have an attribute"),
        target_index: target_index.expect("template validated to have a target"),
        gender,
        word: pair.word(gender).to_string(),
        profession: target,
        template_id: template.id.clone(),
    }
}

/// Anything that can assign a pseudo-perplexity to a token sequence.
pub trait PseudoPerplexity {
    fn pseudo_perplexity(&self, tokens: &[String]) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRarity {
    pub id: String,
    /// Fraction of the template's probe sentences with pseudo-perplexity
    /// strictly below the cutoff.
    pub fraction_below: f64,
    pub rarity: Rarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplatePartition {
    pub rarities: Vec<TemplateRarity>,
    /// Templates used for training and validation.
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Professions split plus template partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub professions: ProfessionSplit,
    pub templates: TemplatePartition,
}

/// Assigns one Rare and two Common templates to each side, taking them in
/// input order: the first Rare and first two Commons go to training.
pub fn partition_templates(rarities: Vec<TemplateRarity>) -> Result<TemplatePartition> {
    let rare: Vec<&str> = rarities
        .iter()
        .filter(|r| r.rarity == Rarity::Rare)
        .map(|r| r.id.as_str())
        .collect();
    let common: Vec<&str> = rarities
        .iter()
        .filter(|r| r.rarity == Rarity::Common)
        .map(|r| r.id.as_str())
        .collect();
    if rare.len() < 2 || common.len() < 4 {
        return Err(Error::InfeasiblePartition(format!(
            "need at least 2 rare and 4 common templates, found {} rare ({}) and {} common ({})",
            rare.len(),
            rare.join(", "),
            common.len(),
            common.join(", ")
        )));
    }
    let pick = |r: &str, c: &[&str]| -> Vec<String> {
        let chosen: Vec<&str> = std::iter::once(r).chain(c.iter().copied()).collect();
        // Keep original template order within a side.
        rarities
            .iter()
            .map(|t| t.id.clone())
            .filter(|id| chosen.contains(&id.as_str()))
            .collect()
    };
    let train = pick(rare[0], &common[0..2]);
    let test = pick(rare[1], &common[2..4]);
    Ok(TemplatePartition {
        rarities,
        train,
        test,
    })
}

/// Labels each template Rare when fewer than half of its probe sentences
/// score a pseudo-perplexity below `cutoff`, then partitions them.
pub fn categorize_templates(
    scorer: &impl PseudoPerplexity,
    templates: &[Template],
    professions: &[Profession],
    pairs: &[GenderedPair],
    cutoff: f64,
) -> Result<TemplatePartition> {
    if professions.is_empty() || pairs.is_empty() {
        return Err(Error::EmptyInput("probe set".into()));
    }
    let rarities = templates
        .iter()
        .map(|template| {
            let mut below = 0usize;
            let mut total = 0usize;
            for profession in professions {
                for pair in pairs {
                    for gender in Gender::BOTH {
                        let probe = expand_template(template, pair, gender, profession);
                        if scorer.pseudo_perplexity(&probe.tokens) < cutoff {
                            below += 1;
                        }
                        total += 1;
                    }
                }
            }
            let fraction_below = below as f64 / total as f64;
            TemplateRarity {
                id: template.id.clone(),
                fraction_below,
                rarity: rarity_for(fraction_below),
            }
        })
        .collect();
    partition_templates(rarities)
}

pub(crate) fn rarity_for(fraction_below: f64) -> Rarity {
    if fraction_below < 0.5 {
        Rarity::Rare
    } else {
        Rarity::Common
    }
}
