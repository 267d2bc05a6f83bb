//! Professions, gendered word pairs, templates, dataset splits and the
//! synthetic skewed pretraining corpus.

mod io;
mod split;
mod synth;
mod template;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_gendered_pairs, load_professions, load_templates, parse_gendered_pairs,
    parse_professions, parse_templates, LoadedProfessions,
};
pub use split::{largest_remainder_counts, stratified_split, ProfessionSplit, SplitRatios};
pub use synth::{generate_synthetic_corpus, CorpusSentence, SkewConfig, SyntheticCorpus};
pub use template::{
    categorize_templates, expand_template, partition_templates, render_tokens, tokenize,
    PseudoPerplexity, SplitAssignment, TemplatePartition, TemplateRarity,
};

/// Professions shipped with the crate. Values are illustrative, not an
/// authoritative labor-statistics extract.
pub const DEFAULT_PROFESSIONS_CSV: &str = include_str!("../../data/professions.csv");
pub const DEFAULT_PAIRS_CSV: &str = include_str!("../../data/gendered_pairs.csv");
pub const DEFAULT_TEMPLATES_TSV: &str = include_str!("../../data/templates.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "DP_male")]
    MaleDominated,
    #[serde(rename = "DP_female")]
    FemaleDominated,
    #[serde(rename = "DP_balanced")]
    Balanced,
}

impl Category {
    pub const ALL: [Category; 3] = [
        Category::MaleDominated,
        Category::FemaleDominated,
        Category::Balanced,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::MaleDominated => "DP_male",
            Category::FemaleDominated => "DP_female",
            Category::Balanced => "DP_balanced",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Category::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Maps a female participation share onto one of the three bands:
/// `[0, 0.30]`, `[0.70, 1]` and `[0.45, 0.55]`, endpoints inclusive.
/// Shares between the bands map to `None`.
pub fn categorize_profession(female_share: f64) -> Result<Option<Category>> {
    if !(0.0..=1.0).contains(&female_share) {
        return Err(Error::InvalidValue(format!(
            "female share {female_share} outside [0, 1]"
        )));
    }
    let category = if female_share <= 0.30 {
        Some(Category::MaleDominated)
    } else if female_share >= 0.70 {
        Some(Category::FemaleDominated)
    } else if (0.45..=0.55).contains(&female_share) {
        Some(Category::Balanced)
    } else {
        None
    };
    Ok(category)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profession {
    pub name: String,
    pub female_share: f64,
    pub employed: Option<u64>,
    pub category: Category,
}

impl Profession {
    pub fn new(name: impl Into<String>, female_share: f64) -> Result<Self> {
        let name = name.into();
        let category = categorize_profession(female_share)?.ok_or_else(|| {
            Error::InvalidValue(format!(
                "female share {female_share} of {name} lies in no category band"
            ))
        })?;
        Ok(Profession {
            name,
            female_share,
            employed: None,
            category,
        })
    }

    /// The vocabulary token for this profession. Multi-word names are joined
    /// with underscores so every profession occupies one token slot.
    pub fn token(&self) -> String {
        profession_token(&self.name)
    }
}

pub fn profession_token(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const BOTH: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which word precedes the gendered attribute in a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeterminerClass {
    None,
    This,
    My,
}

impl DeterminerClass {
    pub fn word(self) -> Option<&'static str> {
        match self {
            DeterminerClass::None => None,
            DeterminerClass::This => Some("this"),
            DeterminerClass::My => Some("my"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenderedPair {
    pub male: String,
    pub female: String,
    pub determiner_class: DeterminerClass,
}

impl GenderedPair {
    pub fn word(&self, gender: Gender) -> &str {
        match gender {
            Gender::Male => &self.male,
            Gender::Female => &self.female,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rarity {
    Common,
    Rare,
    Unset,
}

pub const PLACEHOLDER_DET: &str = "[DET/PRONOUN]";
pub const PLACEHOLDER_ATTRIBUTE: &str = "[attribute]";
pub const PLACEHOLDER_ARTICLE: &str = "[ARTICLE]";
pub const PLACEHOLDER_TARGET: &str = "[target]";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub text: String,
    pub rarity: Rarity,
    tokens: Vec<String>,
}

impl Template {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let text = text.into();
        let tokens = tokenize(&text);
        let count = |p: &str| tokens.iter().filter(|t| t.as_str() == p).count();
        if count(PLACEHOLDER_ATTRIBUTE) != 1 || count(PLACEHOLDER_TARGET) != 1 {
            return Err(Error::InvalidValue(format!(
                "template {id} must contain exactly one {PLACEHOLDER_ATTRIBUTE} and one {PLACEHOLDER_TARGET}"
            )));
        }
        if !tokens.last().is_some_and(|t| is_terminal(t)) {
            return Err(Error::InvalidValue(format!(
                "template {id} must end with terminal punctuation"
            )));
        }
        Ok(Template {
            id,
            text,
            rarity: Rarity::Unset,
            tokens,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Template words other than placeholders.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !t.starts_with('['))
    }
}

pub(crate) fn is_terminal(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSentence {
    pub tokens: Vec<String>,
    pub attribute_index: usize,
    pub target_index: usize,
    pub gender: Gender,
    pub word: String,
    pub profession: String,
    pub template_id: String,
}

impl ProbeSentence {
    pub fn text(&self) -> String {
        render_tokens(&self.tokens)
    }
}

/// The default six templates, eleven pairs and illustrative professions.
pub fn default_dataset() -> (LoadedProfessions, Vec<GenderedPair>, Vec<Template>) {
    let professions = parse_professions(DEFAULT_PROFESSIONS_CSV.as_bytes(), "professions.csv")
        .expect("bundled professions parse");
    let pairs = parse_gendered_pairs(DEFAULT_PAIRS_CSV.as_bytes(), "gendered_pairs.csv")
        .expect("bundled pairs parse");
    let templates = parse_templates(DEFAULT_TEMPLATES_TSV, "templates.tsv")
        .expect("bundled templates parse");
    (professions, pairs, templates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_boundaries_are_inclusive() {
        assert_eq!(
            categorize_profession(0.30).unwrap(),
            Some(Category::MaleDominated)
        );
        assert_eq!(
            categorize_profession(0.70).unwrap(),
            Some(Category::FemaleDominated)
        );
        assert_eq!(
            categorize_profession(0.92).unwrap(),
            Some(Category::FemaleDominated)
        );
        assert_eq!(categorize_profession(0.45).unwrap(), Some(Category::Balanced));
        assert_eq!(categorize_profession(0.55).unwrap(), Some(Category::Balanced));
        assert_eq!(categorize_profession(0.0).unwrap(), Some(Category::MaleDominated));
        assert_eq!(categorize_profession(1.0).unwrap(), Some(Category::FemaleDominated));
    }

    #[test]
    fn out_of_band_shares_have_no_category() {
        for share in [0.31, 0.40, 0.44, 0.56, 0.69] {
            assert_eq!(categorize_profession(share).unwrap(), None, "{share}");
        }
    }

    #[test]
    fn out_of_range_share_is_an_error() {
        assert!(categorize_profession(-0.01).is_err());
        assert!(categorize_profession(1.01).is_err());
        assert!(categorize_profession(f64::NAN).is_err());
    }

    #[test]
    fn bundled_dataset_shape() {
        let (professions, pairs, templates) = default_dataset();
        assert_eq!(pairs.len(), 11);
        assert_eq!(templates.len(), 6);
        assert!(professions.professions.len() >= 50);
        assert_eq!(professions.warnings.len(), 3);
        let he = pairs.iter().find(|p| p.male == "he").unwrap();
        assert_eq!(he.determiner_class, DeterminerClass::None);
        let man = pairs.iter().find(|p| p.male == "man").unwrap();
        assert_eq!(man.determiner_class, DeterminerClass::This);
        assert!(pairs
            .iter()
            .filter(|p| p.male != "he" && p.male != "man")
            .all(|p| p.determiner_class == DeterminerClass::My));
    }

    #[test]
    fn template_requires_one_attribute_and_target() {
        assert!(Template::new("X", "[attribute] is [attribute] [target].").is_err());
        assert!(Template::new("X", "[attribute] is here.").is_err());
        assert!(Template::new("X", "[attribute] is [target]").is_err());
        assert!(Template::new("X", "[attribute] is [target].").is_ok());
    }

    #[test]
    fn multiword_profession_is_one_token() {
        assert_eq!(profession_token("Dental Assistant"), "dental_assistant");
    }
}
