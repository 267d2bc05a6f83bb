use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{finetune, FinetuneData, FinetuneOutcome, TrainConfig};
use crate::bias::{kl_records, significance_test, CategoryStats, DesiredDistribution, Significance};
use crate::corpus::{Category, GenderedPair, Profession, Template};
use crate::error::{Error, Result};
use crate::scoring::predicted_distributions;
use crate::toymodel::{lm_loss, ToyModel};

/// Professions, templates and LM sentences a tuned model is judged on.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub professions: &'a [Profession],
    pub templates: &'a [Template],
    pub pairs: &'a [GenderedPair],
    /// Sentences for the language-modeling loss; may be empty.
    pub lm_sentences: &'a [Vec<String>],
}

/// `(base − tuned) / base × 100`.
pub fn drop_percent(base: f64, tuned: f64) -> f64 {
    (base - tuned) / base * 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stats: CategoryStats,
    pub kl_values: Vec<f64>,
    pub lm_loss: Option<f64>,
}

pub fn evaluate(model: &ToyModel, eval: &EvalSet, desired: DesiredDistribution) -> Result<Evaluation> {
    let predicted = predicted_distributions(model, eval.professions, eval.templates, eval.pairs)?;
    let records = kl_records(eval.professions, &predicted, desired)?;
    let stats = crate::bias::category_stats(&records)?;
    let lm = if eval.lm_sentences.is_empty() {
        None
    } else {
        Some(lm_loss(model, eval.lm_sentences)?)
    };
    Ok(Evaluation {
        stats,
        kl_values: records.iter().map(|r| r.kl).collect(),
        lm_loss: lm,
    })
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: Option<FinetuneOutcome>,
    pub evaluation: Option<Evaluation>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedSummary {
    pub seeds: Vec<u64>,
    pub failed_seeds: Vec<u64>,
    pub base: BTreeMap<String, f64>,
    pub tuned: BTreeMap<String, f64>,
    pub drop_percent: BTreeMap<String, f64>,
    pub base_lm_loss: Option<f64>,
    pub tuned_lm_loss: Option<f64>,
    /// Per-seed tuned ALL KL.
    pub per_seed_all: Vec<f64>,
    /// Base per-profession KLs against tuned ones averaged over seeds.
    pub significance: Option<Significance>,
}

#[derive(Debug, Clone)]
pub struct MultiSeedReport {
    pub base: Evaluation,
    pub runs: Vec<SeedRun>,
    pub summary: MultiSeedSummary,
}

fn means(stats: &CategoryStats) -> BTreeMap<String, f64> {
    let mut m: BTreeMap<String, f64> = stats
        .per_category
        .iter()
        .map(|(c, s)| (c.label().to_string(), s.mean))
        .collect();
    m.insert("ALL".into(), stats.all.mean);
    m
}

/// Fine-tunes once per seed (in parallel) and averages the evaluations of
/// the completed runs.
pub fn multi_seed_run(
    model: &ToyModel,
    data: &FinetuneData,
    eval: &EvalSet,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("seed list".into()));
    }
    let base = evaluate(model, eval, config.desired)?;
    let runs: Vec<SeedRun> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            let result = finetune(model, data, &cfg).and_then(|outcome| {
                if let Some(msg) = &outcome.aborted {
                    return Ok((outcome.clone(), None, Some(msg.clone())));
                }
                let evaluation = evaluate(&outcome.model, eval, config.desired)?;
                Ok((outcome, Some(evaluation), None))
            });
            match result {
                Ok((outcome, evaluation, failure)) => SeedRun {
                    seed,
                    outcome: Some(outcome),
                    evaluation,
                    failure,
                },
                Err(e) => SeedRun {
                    seed,
                    outcome: None,
                    evaluation: None,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect();

    let completed: Vec<&Evaluation> = runs.iter().filter_map(|r| r.evaluation.as_ref()).collect();
    let failed_seeds: Vec<u64> = runs.iter().filter(|r| r.evaluation.is_none()).map(|r| r.seed).collect();
    if completed.is_empty() {
        return Err(Error::NonFinite(format!("every seed failed: {failed_seeds:?}")));
    }
    if !failed_seeds.is_empty() {
        log::warn!("seeds {failed_seeds:?} failed; averaging over {} runs", completed.len());
    }
    let n = completed.len() as f64;
    let base_means = means(&base.stats);
    let mut tuned: BTreeMap<String, f64> = BTreeMap::new();
    for e in &completed {
        for (k, v) in means(&e.stats) {
            *tuned.entry(k).or_default() += v / n;
        }
    }
    let drop = tuned
        .iter()
        .filter_map(|(k, t)| base_means.get(k).map(|b| (k.clone(), drop_percent(*b, *t))))
        .collect();
    let tuned_lm_loss = completed
        .iter()
        .map(|e| e.lm_loss)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / n);
    let mut averaged = vec![0.0; base.kl_values.len()];
    for e in &completed {
        for (a, v) in averaged.iter_mut().zip(&e.kl_values) {
            *a += v / n;
        }
    }
    let significance = if averaged.len() >= 2 {
        Some(significance_test(&base.kl_values, &averaged)?)
    } else {
        None
    };
    let summary = MultiSeedSummary {
        seeds: seeds.to_vec(),
        failed_seeds,
        base: base_means,
        tuned,
        drop_percent: drop,
        base_lm_loss: base.lm_loss,
        tuned_lm_loss,
        per_seed_all: completed.iter().map(|e| e.stats.all.mean).collect(),
        significance,
    };
    Ok(MultiSeedReport { base, runs, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub gamma: f64,
    pub batch_size: usize,
}

impl SweepPoint {
    pub fn label(&self) -> String {
        format!("beta={},gamma={},batch={}", self.beta, self.gamma, self.batch_size)
    }

    pub fn grid(betas: &[f64], gammas: &[f64], batch_sizes: &[usize]) -> Vec<SweepPoint> {
        let mut points = Vec::new();
        for &beta in betas {
            for &gamma in gammas {
                for &batch_size in batch_sizes {
                    points.push(SweepPoint { beta, gamma, batch_size });
                }
            }
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub point: SweepPoint,
    /// Improvement in percent per category, in `Category::ALL` order.
    pub improvements: [f64; 3],
    pub all_improvement: f64,
    pub r: f64,
    pub median: f64,
    pub lm_loss: Option<f64>,
}

impl SweepRun {
    pub fn new(point: SweepPoint, improvements: [f64; 3], all_improvement: f64, lm_loss: Option<f64>) -> Self {
        let mean = improvements.iter().sum::<f64>() / 3.0;
        let std = (improvements.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        let r = if std == 0.0 { f64::INFINITY } else { mean / std };
        let mut sorted = improvements;
        sorted.sort_by(f64::total_cmp);
        SweepRun {
            point,
            improvements,
            all_improvement,
            r,
            median: sorted[1],
            lm_loss,
        }
    }

    pub fn from_summary(point: SweepPoint, summary: &MultiSeedSummary) -> Result<Self> {
        let mut improvements = [0.0; 3];
        for (slot, c) in improvements.iter_mut().zip(Category::ALL) {
            *slot = *summary.drop_percent.get(c.label()).ok_or_else(|| {
                Error::InvalidValue(format!("sweep evaluation has no {c} professions"))
            })?;
        }
        Ok(SweepRun::new(point, improvements, summary.drop_percent["ALL"], summary.tuned_lm_loss))
    }
}

/// Index of the chosen run: filter on ALL improvement, rank by R, and
/// pick the higher median of the top two.
pub fn select_hyperparameters(runs: &[SweepRun]) -> Result<usize> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("sweep runs".into()));
    }
    let mean_all = runs.iter().map(|r| r.all_improvement).sum::<f64>() / runs.len() as f64;
    let mut kept: Vec<usize> = (0..runs.len())
        .filter(|&i| runs[i].all_improvement >= mean_all - 1.0)
        .collect();
    let tiebreak = |a: usize, b: usize| {
        runs[b]
            .all_improvement
            .total_cmp(&runs[a].all_improvement)
            .then_with(|| runs[a].point.label().cmp(&runs[b].point.label()))
    };
    kept.sort_by(|&a, &b| runs[b].r.total_cmp(&runs[a].r).then_with(|| tiebreak(a, b)));
    kept.truncate(2);
    kept.into_iter()
        .min_by(|&a, &b| match runs[b].median.total_cmp(&runs[a].median) {
            Ordering::Equal => tiebreak(a, b),
            o => o,
        })
        .ok_or_else(|| Error::EmptyInput("runs passing the ALL filter".into()))
}

/// Runs every grid point over the seeds and returns one [`SweepRun`] per
/// point that completed. Points whose every seed failed are logged and
/// skipped; an error means no point completed.
pub fn sweep(
    model: &ToyModel,
    data: &FinetuneData,
    eval: &EvalSet,
    base: &TrainConfig,
    points: &[SweepPoint],
    seeds: &[u64],
) -> Result<Vec<SweepRun>> {
    if points.is_empty() {
        return Err(Error::EmptyInput("sweep grid".into()));
    }
    let results: Vec<Result<SweepRun>> = points
        .par_iter()
        .map(|p| {
            let cfg = TrainConfig {
                beta: p.beta,
                gamma: p.gamma,
                batch_size: p.batch_size,
                ..base.clone()
            };
            let report = multi_seed_run(model, data, eval, &cfg, seeds)?;
            SweepRun::from_summary(*p, &report.summary)
        })
        .collect();
    let mut runs = Vec::with_capacity(points.len());
    let mut last_error = None;
    for (p, r) in points.iter().zip(results) {
        match r {
            Ok(run) => runs.push(run),
            Err(e) => {
                log::warn!("sweep point {} failed: {e}", p.label());
                last_error = Some(e);
            }
        }
    }
    match (runs.is_empty(), last_error) {
        (true, Some(e)) => Err(e),
        _ => Ok(runs),
    }
}

pub fn write_sweep_csv(runs: &[SweepRun], selected: Option<usize>, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "beta", "gamma", "batch_size", "DP_male", "DP_female", "DP_balanced", "ALL", "R", "median",
        "lm_loss", "selected",
    ])?;
    for (i, r) in runs.iter().enumerate() {
        let mut record = vec![r.point.beta.to_string(), r.point.gamma.to_string(), r.point.batch_size.to_string()];
        record.extend(r.improvements.iter().map(|v| v.to_string()));
        record.push(r.all_improvement.to_string());
        record.push(r.r.to_string());
        record.push(r.median.to_string());
        record.push(r.lm_loss.map(|v| v.to_string()).unwrap_or_default());
        record.push((selected == Some(i)).to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("sweep csv", e))?;
    Ok(())
}
