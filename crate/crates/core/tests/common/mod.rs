//! Desk-scale fixture: a toy masked model pretrained on a synthetic corpus
//! whose gender skew is an amplified version of each profession's real
//! share.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::OnceLock;

use genderdist::corpus::{
    categorize_templates, default_dataset, generate_synthetic_corpus,
    stratified_split, GenderedPair, Profession, ProfessionSplit, SkewConfig, SplitRatios,
    SyntheticCorpus, Template, TemplatePartition,
};
use genderdist::mitigation::{EvalSet, FinetuneData};
use genderdist::toymodel::{
    pretrain, required_tokens, AdamWConfig, ModelMode, PretrainConfig, PretrainReport, ToyModel,
    Vocabulary,
};

pub const SKEW_GAIN: f64 = 2.0;
pub const CORPUS_SIZE: usize = 20_000;
pub const HELDOUT_SIZE: usize = 400;
pub const SPLIT_SEED: u64 = 7;
pub const PPL_CUTOFF: f64 = 3.0;
/// Fine-tuning step size. The toy model moves far less per step than a
/// large pretrained one, so the library default would need thousands of
/// epochs.
pub const FINETUNE_LR: f64 = 5e-3;

pub struct Fixture {
    pub professions: Vec<Profession>,
    pub pairs: Vec<GenderedPair>,
    pub templates: Vec<Template>,
    pub skew: SkewConfig,
    pub corpus: SyntheticCorpus,
    pub heldout: Vec<Vec<String>>,
    pub model: ToyModel,
    pub pretrain_report: PretrainReport,
    pub split: ProfessionSplit,
    pub partition: TemplatePartition,
    pub train_templates: Vec<Template>,
    pub test_templates: Vec<Template>,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Male probability in the corpus: the real male share pushed away from
/// one half on the logit scale.
pub fn injected_skew(p: &Profession) -> f64 {
    sigmoid(SKEW_GAIN * logit((1.0 - p.female_share).clamp(1e-3, 1.0 - 1e-3)))
}

pub fn build() -> Fixture {
    let (loaded, pairs, templates) = default_dataset();
    let professions = loaded.professions;
    let mut weights = BTreeMap::new();
    weights.insert("T1".to_string(), 0.002);
    weights.insert("T6".to_string(), 0.002);
    let skew = SkewConfig {
        male_prob: professions.iter().map(|p| (p.name.clone(), injected_skew(p))).collect(),
        size: CORPUS_SIZE,
        heldout_size: HELDOUT_SIZE,
        filler_ratio: 0.2,
        seed: 42,
        template_weights: weights,
    };
    let corpus = generate_synthetic_corpus(&skew, &professions, &pairs, &templates).unwrap();
    let train_tokens = corpus.pretrain_tokens();
    let heldout = corpus.heldout_tokens();
    let mut tokens = required_tokens(&professions, &pairs, &templates);
    tokens.extend(train_tokens.iter().flatten().cloned());
    let vocab = Vocabulary::build(tokens);
    let mut model = ToyModel::new(vocab, 32, 16, ModelMode::Masked, 42);
    let config = PretrainConfig {
        epochs: 4,
        batch_size: 32,
        optimizer: AdamWConfig {
            learning_rate: 5e-3,
            ..Default::default()
        },
        seed: 42,
    };
    let pretrain_report = pretrain(&mut model, &train_tokens, &heldout, &config).unwrap();
    let split = stratified_split(&professions, SplitRatios::default(), SPLIT_SEED).unwrap();
    let partition =
        categorize_templates(&model, &templates, &professions, &pairs, PPL_CUTOFF)
            .expect("fixture templates split into one rare and two common per side");
    let pick = |ids: &[String]| {
        templates.iter().filter(|t| ids.contains(&t.id)).cloned().collect::<Vec<_>>()
    };
    let train_templates = pick(&partition.train);
    let test_templates = pick(&partition.test);
    Fixture {
        professions,
        pairs,
        templates,
        skew,
        corpus,
        heldout,
        model,
        pretrain_report,
        split,
        partition,
        train_templates,
        test_templates,
    }
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(build)
}

impl Fixture {
    pub fn finetune_data(&self) -> FinetuneData<'_> {
        FinetuneData {
            train: &self.split.train,
            validation: &self.split.validation,
            templates: &self.train_templates,
            pairs: &self.pairs,
        }
    }

    /// Test professions on the test templates, with the held-out corpus for
    /// the LM loss.
    pub fn test_eval(&self) -> EvalSet<'_> {
        EvalSet {
            professions: &self.split.test,
            templates: &self.test_templates,
            pairs: &self.pairs,
            lm_sentences: &self.heldout,
        }
    }

    /// Validation professions on the training templates, without LM loss.
    pub fn validation_eval(&self) -> EvalSet<'_> {
        EvalSet {
            professions: &self.split.validation,
            templates: &self.train_templates,
            pairs: &self.pairs,
            lm_sentences: &[],
        }
    }
}
