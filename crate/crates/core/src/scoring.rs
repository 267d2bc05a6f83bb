//! Gender–profession association scores and normalized per-profession
//! gender distributions.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{expand_template, Gender, GenderedPair, ProbeSentence, Profession, Template};
use crate::error::{Error, Result};
use crate::toymodel::{alm_sentence_loss_ids, ModelMode, Tape, ToyModel, Var};

/// Probabilities are floored here before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

/// How association scores enter the aggregate: `exp(+S)` for masked models
/// (log-likelihood ratio) and `exp(-S)` for autoregressive ones (sentence
/// loss, lower is stronger).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    Masked,
    Autoregressive,
}

impl ScoringMode {
    pub fn sign(self) -> f64 {
        match self {
            ScoringMode::Masked => 1.0,
            ScoringMode::Autoregressive => -1.0,
        }
    }
}

impl From<ModelMode> for ScoringMode {
    fn from(mode: ModelMode) -> Self {
        match mode {
            ModelMode::Masked => ScoringMode::Masked,
            ModelMode::Autoregressive => ScoringMode::Autoregressive,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationRecord {
    pub gender: Gender,
    pub word: String,
    pub profession: String,
    pub template: String,
    pub score: f64,
    /// A probability hit the floor before its logarithm was taken.
    #[serde(default)]
    pub floored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenderDistribution {
    pub p_male: f64,
    pub p_female: f64,
}

impl GenderDistribution {
    pub const EQUAL: GenderDistribution = GenderDistribution {
        p_male: 0.5,
        p_female: 0.5,
    };

    pub fn get(&self, gender: Gender) -> f64 {
        match gender {
            Gender::Male => self.p_male,
            Gender::Female => self.p_female,
        }
    }
}

fn floored_log(log_p: f64) -> (f64, bool) {
    let floor = PROBABILITY_FLOOR.ln();
    if log_p < floor || log_p.is_nan() {
        (floor, true)
    } else {
        (log_p, false)
    }
}

fn record(probe: &ProbeSentence, score: f64, floored: bool) -> AssociationRecord {
    AssociationRecord {
        gender: probe.gender,
        word: probe.word.clone(),
        profession: probe.profession.clone(),
        template: probe.template_id.clone(),
        score,
        floored,
    }
}

/// Log-likelihood ratio of the attribute word with the target visible
/// against the prior with attribute and target both masked.
pub fn association_score_mlm(model: &ToyModel, probe: &ProbeSentence) -> Result<AssociationRecord> {
    let ids = model.vocab.encode(&probe.tokens);
    let word = ids[probe.attribute_index];
    let with_target = model.predict_masked(&ids, &[], probe.attribute_index)?[word];
    let prior = model.predict_masked(&ids, &[probe.target_index], probe.attribute_index)?[word];
    let (lt, ft) = floored_log(with_target.max(0.0).ln());
    let (lp, fp) = floored_log(prior.max(0.0).ln());
    Ok(record(probe, lt - lp, ft || fp))
}

/// Sentence loss of the probe; consumers exponentiate its negation.
pub fn association_score_alm(model: &ToyModel, probe: &ProbeSentence) -> Result<AssociationRecord> {
    let ids = model.vocab.encode(&probe.tokens);
    Ok(record(probe, alm_sentence_loss_ids(model, &ids)?, false))
}

pub fn association_score(model: &ToyModel, probe: &ProbeSentence) -> Result<AssociationRecord> {
    match model.mode {
        ModelMode::Masked => association_score_mlm(model, probe),
        ModelMode::Autoregressive => association_score_alm(model, probe),
    }
}

/// `Σ exp(±S)` over the given records.
pub fn aggregate<'a, I>(records: I, mode: ScoringMode) -> f64
where
    I: IntoIterator<Item = &'a AssociationRecord>,
{
    records
        .into_iter()
        .map(|r| (mode.sign() * r.score).exp())
        .sum()
}

/// [`aggregate`] restricted to one profession and gender, failing when any
/// (template, word) combination is missing.
pub fn aggregate_checked(
    records: &[AssociationRecord],
    profession: &str,
    gender: Gender,
    templates: &[String],
    words: &[String],
    mode: ScoringMode,
) -> Result<f64> {
    let selected: Vec<&AssociationRecord> = records
        .iter()
        .filter(|r| r.profession == profession && r.gender == gender)
        .collect();
    let present: BTreeSet<(&str, &str)> = selected
        .iter()
        .map(|r| (r.template.as_str(), r.word.as_str()))
        .collect();
    let mut gaps = Vec::new();
    for t in templates {
        for w in words {
            if !present.contains(&(t.as_str(), w.as_str())) {
                gaps.push(format!("{profession}/{gender}/{t}/{w}"));
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::MissingRecords(gaps));
    }
    Ok(aggregate(selected, mode))
}

/// `p(g) = S(g) / (S(male) + S(female))`.
pub fn normalize(male: f64, female: f64) -> Result<GenderDistribution> {
    if !(male > 0.0 && female > 0.0) || !male.is_finite() || !female.is_finite() {
        return Err(Error::InvalidValue(format!(
            "aggregates must be positive and finite, got ({male}, {female})"
        )));
    }
    let total = male + female;
    Ok(GenderDistribution {
        p_male: male / total,
        p_female: female / total,
    })
}

/// All probe sentences for one profession.
pub fn probes_for(
    profession: &Profession,
    templates: &[Template],
    pairs: &[GenderedPair],
) -> Vec<ProbeSentence> {
    let mut probes = Vec::with_capacity(templates.len() * pairs.len() * 2);
    for template in templates {
        for pair in pairs {
            for gender in Gender::BOTH {
                probes.push(expand_template(template, pair, gender, profession));
            }
        }
    }
    probes
}

pub fn score_profession(
    model: &ToyModel,
    profession: &Profession,
    templates: &[Template],
    pairs: &[GenderedPair],
) -> Result<Vec<AssociationRecord>> {
    probes_for(profession, templates, pairs)
        .iter()
        .map(|p| association_score(model, p))
        .collect()
}

pub fn predicted_distribution(
    model: &ToyModel,
    profession: &Profession,
    templates: &[Template],
    pairs: &[GenderedPair],
) -> Result<GenderDistribution> {
    let records = score_profession(model, profession, templates, pairs)?;
    let mode = ScoringMode::from(model.mode);
    let male = aggregate(records.iter().filter(|r| r.gender == Gender::Male), mode);
    let female = aggregate(records.iter().filter(|r| r.gender == Gender::Female), mode);
    normalize(male, female)
}

/// Distributions for many professions, evaluated in parallel; output order
/// follows input order.
pub fn predicted_distributions(
    model: &ToyModel,
    professions: &[Profession],
    templates: &[Template],
    pairs: &[GenderedPair],
) -> Result<Vec<GenderDistribution>> {
    professions
        .par_iter()
        .map(|p| predicted_distribution(model, p, templates, pairs))
        .collect()
}

/// Writes records as `gender,word,profession,template,score`.
pub fn write_records_csv(records: &[AssociationRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gender", "word", "profession", "template", "score"])?;
    for r in records {
        w.write_record([
            r.gender.label(),
            &r.word,
            &r.profession,
            &r.template,
            &r.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("records csv", e))?;
    Ok(())
}

/// Records the gender distribution of professions on a tape. Prior terms
/// are shared across professions whose masked context coincides.
pub struct DistributionRecorder<'t, 'm> {
    tape: &'t mut Tape<'m>,
    prior_cache: HashMap<(Vec<usize>, usize, usize), Var>,
}

/// `(p_male, p_female)` nodes.
#[derive(Debug, Clone, Copy)]
pub struct RecordedDistribution {
    pub p_male: Var,
    pub p_female: Var,
}

impl<'t, 'm> DistributionRecorder<'t, 'm> {
    pub fn new(tape: &'t mut Tape<'m>) -> Self {
        DistributionRecorder {
            tape,
            prior_cache: HashMap::new(),
        }
    }

    pub fn tape(&mut self) -> &mut Tape<'m> {
        self.tape
    }

    fn association(&mut self, probe: &ProbeSentence) -> Result<Var> {
        let model = self.tape.model();
        let ids = model.vocab.encode(&probe.tokens);
        match model.mode {
            ModelMode::Masked => {
                let with_target = self.tape.masked_log_prob(&ids, &[], probe.attribute_index)?;
                let visible: Vec<usize> = ids
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != probe.attribute_index && *i != probe.target_index)
                    .map(|(_, &t)| t)
                    .collect();
                let key = (visible, probe.attribute_index, ids[probe.attribute_index]);
                let prior = match self.prior_cache.get(&key) {
                    Some(v) => *v,
                    None => {
                        let v = self.tape.masked_log_prob(
                            &ids,
                            &[probe.target_index],
                            probe.attribute_index,
                        )?;
                        self.prior_cache.insert(key, v);
                        v
                    }
                };
                let s = self.tape.sub(with_target, prior);
                Ok(self.tape.exp(s))
            }
            ModelMode::Autoregressive => {
                let loss = self.tape.alm_sentence_loss(&ids)?;
                let neg = self.tape.scale(loss, -1.0);
                Ok(self.tape.exp(neg))
            }
        }
    }

    pub fn distribution(
        &mut self,
        profession: &Profession,
        templates: &[Template],
        pairs: &[GenderedPair],
    ) -> Result<RecordedDistribution> {
        let mut male = Vec::new();
        let mut female = Vec::new();
        for probe in probes_for(profession, templates, pairs) {
            let term = self.association(&probe)?;
            match probe.gender {
                Gender::Male => male.push(term),
                Gender::Female => female.push(term),
            }
        }
        let s_male = self.tape.sum(&male);
        let s_female = self.tape.sum(&female);
        let total = self.tape.add(s_male, s_female);
        Ok(RecordedDistribution {
            p_male: self.tape.div(s_male, total),
            p_female: self.tape.div(s_female, total),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::default_dataset;
    use crate::toymodel::{required_tokens, Vocabulary};
    use proptest::prelude::*;

    fn rec(gender: Gender, word: &str, template: &str, score: f64) -> AssociationRecord {
        AssociationRecord {
            gender,
            word: word.into(),
            profession: "nurse".into(),
            template: template.into(),
            score,
            floored: false,
        }
    }

    fn model(mode: ModelMode, seed: u64) -> (ToyModel, Vec<Profession>, Vec<GenderedPair>, Vec<Template>) {
        let (loaded, pairs, templates) = default_dataset();
        let vocab = Vocabulary::build(required_tokens(&loaded.professions, &pairs, &templates));
        let m = ToyModel::new(vocab, 8, 16, mode, seed);
        (m, loaded.professions, pairs, templates)
    }

    #[test]
    fn aggregate_examples() {
        let words: Vec<String> = (0..11).map(|i| format!("w{i}")).collect();
        let templates: Vec<String> = ["T1", "T2", "T3"].map(String::from).to_vec();
        let mut records = Vec::new();
        for t in &templates {
            for w in &words {
                records.push(rec(Gender::Male, w, t, 0.0));
            }
        }
        let total =
            aggregate_checked(&records, "nurse", Gender::Male, &templates, &words, ScoringMode::Masked)
                .unwrap();
        assert_eq!(total, 33.0);

        let one = [rec(Gender::Male, "he", "T1", 2f64.ln())];
        assert!((aggregate(&one, ScoringMode::Masked) - 2.0).abs() < 1e-15);
        assert!((aggregate(&one, ScoringMode::Autoregressive) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_combinations_are_listed() {
        let words = vec!["he".to_string(), "man".to_string()];
        let templates = vec!["T1".to_string()];
        let records = [rec(Gender::Male, "he", "T1", 0.0)];
        match aggregate_checked(&records, "nurse", Gender::Male, &templates, &words, ScoringMode::Masked) {
            Err(Error::MissingRecords(gaps)) => assert_eq!(gaps, ["nurse/male/T1/man"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(2.0, 2.0).unwrap(), GenderDistribution::EQUAL);
        let d = normalize(3.0, 1.0).unwrap();
        assert_eq!((d.p_male, d.p_female), (0.75, 0.25));
        assert_eq!(normalize(1e-9, 1e-9).unwrap(), GenderDistribution::EQUAL);
        assert!(normalize(0.0, 1.0).is_err());
        assert!(normalize(-1.0, 1.0).is_err());
    }

    #[test]
    fn score_is_log_ratio() {
        // Zero model: both probabilities equal, so S = 0.
        let (m, professions, pairs, templates) = model(ModelMode::Masked, 1);
        let zero = ToyModel::zeros(m.vocab.clone(), 8, 16, ModelMode::Masked);
        let probe = expand_template(&templates[0], &pairs[0], Gender::Male, &professions[0]);
        assert_eq!(association_score_mlm(&zero, &probe).unwrap().score, 0.0);

        let r = association_score_mlm(&m, &probe).unwrap();
        let ids = m.vocab.encode(&probe.tokens);
        let w = ids[probe.attribute_index];
        let pt = mlm_prob(&m, &ids, &[probe.attribute_index], probe.attribute_index, w);
        let pp = mlm_prob(
            &m,
            &ids,
            &[probe.attribute_index, probe.target_index],
            probe.attribute_index,
            w,
        );
        assert!((r.score - (pt / pp).ln()).abs() < 1e-12);
        assert!(!r.floored);
    }

    /// Independent masked prediction: mean of visible embeddings, position,
    /// tanh layer, tied softmax, written out longhand.
    fn mlm_prob(m: &ToyModel, ids: &[usize], masked: &[usize], slot: usize, word: usize) -> f64 {
        let d = m.dim;
        let p = &m.params;
        let visible: Vec<usize> = (0..ids.len()).filter(|i| !masked.contains(i)).map(|i| ids[i]).collect();
        let mut ctx = vec![0.0; d];
        for &t in &visible {
            for j in 0..d {
                ctx[j] += p.embeddings[t * d + j] / visible.len() as f64;
            }
        }
        for j in 0..d {
            ctx[j] += p.positions[slot * d + j];
        }
        let mut h = vec![0.0; d];
        for i in 0..d {
            let mut z = p.hidden_bias[i];
            for j in 0..d {
                z += p.hidden_weight[i * d + j] * ctx[j];
            }
            h[i] = z.tanh();
        }
        let logits: Vec<f64> = (0..m.vocab_size())
            .map(|v| p.output_bias[v] + (0..d).map(|j| p.embeddings[v * d + j] * h[j]).sum::<f64>())
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        (logits[word] - max).exp() / z
    }

    #[test]
    fn predicted_distribution_matches_brute_force() {
        let (m, professions, pairs, templates) = model(ModelMode::Masked, 7);
        for profession in &professions[..3] {
            let got = predicted_distribution(&m, profession, &templates[..3], &pairs).unwrap();
            let mut sums = [0.0f64; 2];
            for t in &templates[..3] {
                for pair in &pairs {
                    for (k, g) in Gender::BOTH.into_iter().enumerate() {
                        let probe = expand_template(t, pair, g, profession);
                        let ids = m.vocab.encode(&probe.tokens);
                        let a = probe.attribute_index;
                        let w = ids[a];
                        let pt = mlm_prob(&m, &ids, &[a], a, w);
                        let pp = mlm_prob(&m, &ids, &[a, probe.target_index], a, w);
                        sums[k] += pt / pp;
                    }
                }
            }
            let expected = sums[0] / (sums[0] + sums[1]);
            assert!((got.p_male - expected).abs() < 1e-12, "{} vs {expected}", got.p_male);
            assert!((got.p_male + got.p_female - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_models_give_equal_distributions() {
        let (m, professions, pairs, templates) = model(ModelMode::Masked, 1);
        let zero = ToyModel::zeros(m.vocab.clone(), 8, 16, ModelMode::Masked);
        for p in &professions[..5] {
            let d = predicted_distribution(&zero, p, &templates, &pairs).unwrap();
            assert_eq!(d, GenderDistribution::EQUAL);
        }
        let alm = ToyModel::zeros(m.vocab.clone(), 8, 16, ModelMode::Autoregressive);
        let probe = expand_template(&templates[0], &pairs[0], Gender::Male, &professions[0]);
        let r = association_score_alm(&alm, &probe).unwrap();
        assert!((r.score - (alm.vocab_size() as f64).ln()).abs() < 1e-12);
        let d = predicted_distribution(&alm, &professions[0], &templates, &pairs).unwrap();
        assert!((d.p_male - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lower_alm_loss_gets_more_mass() {
        let (m, professions, pairs, templates) = model(ModelMode::Autoregressive, 1);
        let mut alm = ToyModel::zeros(m.vocab.clone(), 8, 16, ModelMode::Autoregressive);
        // Raise every male word's probability, lowering male-probe loss.
        for pair in &pairs {
            let id = alm.vocab.id(&pair.male).unwrap();
            alm.params.output_bias[id] = 2.0;
        }
        let d = predicted_distribution(&alm, &professions[0], &templates, &pairs).unwrap();
        assert!(d.p_male > d.p_female);
    }

    #[test]
    fn tape_distribution_matches_inference() {
        for mode in [ModelMode::Masked, ModelMode::Autoregressive] {
            let (m, professions, pairs, templates) = model(mode, 3);
            let mut tape = Tape::new(&m);
            let mut rec = DistributionRecorder::new(&mut tape);
            let d0 = rec.distribution(&professions[0], &templates[..3], &pairs).unwrap();
            let d1 = rec.distribution(&professions[1], &templates[..3], &pairs).unwrap();
            for (d, p) in [(d0, &professions[0]), (d1, &professions[1])] {
                let expected = predicted_distribution(&m, p, &templates[..3], &pairs).unwrap();
                assert!((tape.value(d.p_male) - expected.p_male).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_invariance() {
        let (m, professions, mut pairs, mut templates) = model(ModelMode::Masked, 5);
        let a = predicted_distribution(&m, &professions[4], &templates, &pairs).unwrap();
        pairs.reverse();
        templates.reverse();
        let b = predicted_distribution(&m, &professions[4], &templates, &pairs).unwrap();
        assert!((a.p_male - b.p_male).abs() < 1e-12);
    }

    #[test]
    fn records_csv_layout() {
        let mut buf = Vec::new();
        write_records_csv(&[rec(Gender::Female, "she", "T2", 0.5)], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "gender,word,profession,template,score\nfemale,she,nurse,T2,0.5\n"
        );
    }

    proptest! {
        #[test]
        fn normalize_is_scale_invariant(a in 1e-6f64..1e6, b in 1e-6f64..1e6, c in 1e-3f64..1e3) {
            let x = normalize(a, b).unwrap();
            let y = normalize(a * c, b * c).unwrap();
            prop_assert!((x.p_male - y.p_male).abs() < 1e-12);
            prop_assert!((x.p_male + x.p_female - 1.0).abs() < 1e-12);
        }

        #[test]
        fn constant_shift_cancels(scores in proptest::collection::vec(-3.0f64..3.0, 6), shift in -5.0f64..5.0) {
            let records: Vec<AssociationRecord> = scores.iter().enumerate()
                .map(|(i, s)| rec(if i % 2 == 0 { Gender::Male } else { Gender::Female }, "w", "T", *s))
                .collect();
            let shifted: Vec<AssociationRecord> = records.iter()
                .map(|r| AssociationRecord { score: r.score + shift, ..r.clone() })
                .collect();
            let dist = |rs: &[AssociationRecord]| {
                let m = aggregate(rs.iter().filter(|r| r.gender == Gender::Male), ScoringMode::Masked);
                let f = aggregate(rs.iter().filter(|r| r.gender == Gender::Female), ScoringMode::Masked);
                normalize(m, f).unwrap()
            };
            prop_assert!((dist(&records).p_male - dist(&shifted).p_male).abs() < 1e-12);
        }

        #[test]
        fn aggregate_is_monotone(scores in proptest::collection::vec(-3.0f64..3.0, 1..10), bump in 0.01f64..1.0, idx in any::<prop::sample::Index>()) {
            let records: Vec<AssociationRecord> = scores.iter().map(|s| rec(Gender::Male, "w", "T", *s)).collect();
            let mut bumped = records.clone();
            let i = idx.index(records.len());
            bumped[i].score += bump;
            prop_assert!(aggregate(&bumped, ScoringMode::Masked) > aggregate(&records, ScoringMode::Masked));
            prop_assert!(aggregate(&bumped, ScoringMode::Autoregressive) < aggregate(&records, ScoringMode::Autoregressive));
            let mut rev = records.clone();
            rev.reverse();
            prop_assert!((aggregate(&rev, ScoringMode::Masked) - aggregate(&records, ScoringMode::Masked)).abs() < 1e-12);
        }
    }
}
