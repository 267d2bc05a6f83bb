use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{
    batch_category, combined_term, lm_term, uniform_kl_loss, weighted_adaptive_loss, LossBreakdown,
    LossKind,
};
use super::stats::{GroupState, StabilityConstants, ALPHA_HIGH_KL, ALPHA_LOW_KL};
use crate::bias::{category_stats, identify_groups, kl_records, CategoryStats, DesiredDistribution, Stats};
use crate::corpus::{Category, GenderedPair, Profession, Template};
use crate::error::{Error, Result};
use crate::scoring::{predicted_distributions, DistributionRecorder};
use crate::toymodel::{AdamWConfig, ModelMode, OptimizerState, Tape, ToyModel};

pub const DEFAULT_SEEDS: [u64; 5] = [42, 52, 62, 72, 82];
pub const BETA_GRID: [f64; 3] = [0.6, 0.8, 0.95];
pub const GAMMA_GRID: [f64; 7] = [0.001, 0.01, 0.1, 0.2, 0.5, 0.8, 1.0];
pub const BATCH_SIZE_GRID: [usize; 2] = [5, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub desired: DesiredDistribution,
    pub loss: LossKind,
    /// EMA momentum.
    pub beta: f64,
    /// Weight of the language-modeling term; 0 disables it.
    pub gamma: f64,
    pub batch_size: usize,
    pub val_batch_size: usize,
    pub optimizer: AdamWConfig,
    pub patience: usize,
    /// Minimum validation improvement that resets patience. Defaults to
    /// 1e-4 for the equal target and 1e-3 for the real-world target.
    pub improvement_threshold: Option<f64>,
    pub max_epochs: usize,
    /// Seeds batch order.
    pub seed: u64,
    pub alpha_high: f64,
    pub alpha_low: f64,
    pub stability: StabilityConstants,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            desired: DesiredDistribution::Equal,
            loss: LossKind::Uniform,
            beta: 0.95,
            gamma: 0.0,
            batch_size: 5,
            val_batch_size: 3,
            optimizer: AdamWConfig::default(),
            patience: 5,
            improvement_threshold: None,
            max_epochs: 50,
            seed: 42,
            alpha_high: ALPHA_HIGH_KL,
            alpha_low: ALPHA_LOW_KL,
            stability: StabilityConstants::default(),
        }
    }
}

impl TrainConfig {
    pub fn threshold(&self) -> f64 {
        self.improvement_threshold.unwrap_or(match self.desired {
            DesiredDistribution::Equal => 1e-4,
            DesiredDistribution::RealWorld => 1e-3,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidValue(msg));
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if self.batch_size == 0 || self.val_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.threshold() > 0.0) {
            return bad(format!("improvement threshold {} must be positive", self.threshold()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.optimizer.learning_rate));
        }
        if !(self.alpha_high >= 0.0 && self.alpha_low >= 0.0) {
            return bad("alpha values must be >= 0".into());
        }
        Ok(())
    }
}

/// Professions and probe material for one fine-tuning run. Validation uses
/// the training templates.
#[derive(Debug, Clone, Copy)]
pub struct FinetuneData<'a> {
    pub train: &'a [Profession],
    pub validation: &'a [Profession],
    pub templates: &'a [Template],
    pub pairs: &'a [GenderedPair],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: String,
    /// Category label or `ALL`.
    pub category: String,
    pub kl_mean: f64,
    pub kl_var: f64,
    pub lambda: Option<f64>,
    pub mu_kl: Option<f64>,
    pub var_factor: Option<f64>,
    pub lm_loss: Option<f64>,
    pub total_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Checkpoint with the lowest validation KL seen, including the
    /// starting model.
    pub model: ToyModel,
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub best_validation_kl: f64,
    pub initial_validation_kl: f64,
    pub epochs_run: usize,
    pub group_states: BTreeMap<Category, GroupState>,
    /// Set when the run stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

/// Uniform-KL statistics of `professions`. Never consults training state.
pub fn validation_stats(
    model: &ToyModel,
    professions: &[Profession],
    templates: &[Template],
    pairs: &[GenderedPair],
    desired: DesiredDistribution,
) -> Result<CategoryStats> {
    let predicted = predicted_distributions(model, professions, templates, pairs)?;
    category_stats(&kl_records(professions, &predicted, desired)?)
}

/// Category-homogeneous batches in seeded random order.
pub fn make_batches(train: &[Profession], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Profession>> {
    let mut batches = Vec::new();
    for category in Category::ALL {
        let mut members: Vec<Profession> = train.iter().filter(|p| p.category == category).cloned().collect();
        members.shuffle(rng);
        batches.extend(members.chunks(batch_size).map(<[Profession]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Records, differentiates and reports the loss of one batch. Group
/// statistics are updated only for the weighted adaptive loss.
pub fn batch_step(
    model: &ToyModel,
    batch: &[Profession],
    data: &FinetuneData,
    config: &TrainConfig,
    states: &mut BTreeMap<Category, GroupState>,
) -> Result<(LossBreakdown, crate::toymodel::Params)> {
    let category = batch_category(batch)?;
    let mut tape = Tape::new(model);
    let kl = {
        let mut recorder = DistributionRecorder::new(&mut tape);
        uniform_kl_loss(&mut recorder, batch, data.templates, data.pairs, config.desired)?
    };
    let batch_kl = tape.value(kl);
    let (kl_term, lambda, mu, v, alpha) = match config.loss {
        LossKind::Uniform => (kl, 1.0, batch_kl, 1.0, 0.0),
        LossKind::WeightedAdaptive => {
            let state = states
                .get_mut(&category)
                .ok_or_else(|| Error::InvalidValue(format!("no group state for {category}")))?;
            let alpha = state.alpha;
            let (node, lambda, mu, v) =
                weighted_adaptive_loss(&mut tape, kl, state, config.beta, &config.stability)?;
            (node, lambda, mu, v, alpha)
        }
    };
    let lm = if config.gamma > 0.0 && model.mode == ModelMode::Masked {
        Some(lm_term(&mut tape, batch, data.templates, data.pairs)?)
    } else {
        None
    };
    let total = combined_term(&mut tape, kl_term, lm, config.gamma);
    let breakdown = LossBreakdown {
        category,
        batch_kl,
        kl_component: tape.value(kl_term),
        lm_component: lm.map(|v| tape.value(v)),
        total: tape.value(total),
        lambda,
        mu_kl: mu,
        var_factor: v,
        alpha,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("loss on {category} batch")));
    }
    let grads = tape.backward(total)?;
    Ok((breakdown, grads))
}

fn validation_rows(epoch: usize, stats: &CategoryStats) -> Vec<HistoryRow> {
    let row = |category: &str, s: &Stats| HistoryRow {
        epoch,
        split: "validation".into(),
        category: category.into(),
        kl_mean: s.mean,
        kl_var: s.var,
        lambda: None,
        mu_kl: None,
        var_factor: None,
        lm_loss: None,
        total_loss: None,
    };
    let mut rows: Vec<HistoryRow> = stats.per_category.iter().map(|(c, s)| row(c.label(), s)).collect();
    rows.push(row("ALL", &stats.all));
    rows
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn train_row(epoch: usize, category: &str, steps: &[&LossBreakdown]) -> Option<HistoryRow> {
    let kls: Vec<f64> = steps.iter().map(|b| b.batch_kl).collect();
    let stats = Stats::of(&kls)?;
    let lm_values: Vec<f64> = steps.iter().filter_map(|b| b.lm_component).collect();
    Some(HistoryRow {
        epoch,
        split: "train".into(),
        category: category.into(),
        kl_mean: stats.mean,
        kl_var: stats.var,
        lambda: mean(steps.iter().map(|b| b.lambda)),
        mu_kl: mean(steps.iter().map(|b| b.mu_kl)),
        var_factor: mean(steps.iter().map(|b| b.var_factor)),
        lm_loss: mean(lm_values.into_iter()),
        total_loss: mean(steps.iter().map(|b| b.total)),
    })
}

/// Fine-tunes a copy of `model` toward the desired distribution.
pub fn finetune(model: &ToyModel, data: &FinetuneData, config: &TrainConfig) -> Result<FinetuneOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::EmptyInput("training or validation professions".into()));
    }
    let mut current = model.clone();
    let initial = validation_stats(&current, data.validation, data.templates, data.pairs, config.desired)?;
    let mut history = validation_rows(0, &initial);

    let high = identify_groups(&initial);
    let mut group_states = BTreeMap::new();
    for p in data.train {
        group_states.entry(p.category).or_insert_with(|| {
            let is_high = high.get(&p.category).copied().unwrap_or(false);
            let mut s = GroupState::new(p.category, is_high);
            s.alpha = if is_high { config.alpha_high } else { config.alpha_low };
            s
        });
    }

    let mut optimizer = OptimizerState::new(config.optimizer, &current.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut outcome = FinetuneOutcome {
        model: current.clone(),
        history: Vec::new(),
        best_epoch: 0,
        best_validation_kl: initial.all.mean,
        initial_validation_kl: initial.all.mean,
        epochs_run: 0,
        group_states: BTreeMap::new(),
        aborted: None,
    };
    let threshold = config.threshold();
    let mut reference = initial.all.mean;
    let mut wait = 0;

    'epochs: for epoch in 1..=config.max_epochs {
        let mut steps = Vec::new();
        for batch in make_batches(data.train, config.batch_size, &mut rng) {
            let step = batch_step(&current, &batch, data, config, &mut group_states)
                .and_then(|(breakdown, grads)| {
                    optimizer.step(&mut current.params, &grads)?;
                    Ok(breakdown)
                });
            match step {
                Ok(b) => steps.push(b),
                Err(Error::NonFinite(msg)) => {
                    log::error!("epoch {epoch}: {msg}; keeping the best checkpoint");
                    outcome.aborted = Some(msg);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if !current.params.all_finite() {
            outcome.aborted = Some(format!("parameters became non-finite in epoch {epoch}"));
            break;
        }
        outcome.epochs_run = epoch;
        for category in Category::ALL {
            let selected: Vec<&LossBreakdown> = steps.iter().filter(|b| b.category == category).collect();
            history.extend(train_row(epoch, category.label(), &selected));
        }
        history.extend(train_row(epoch, "ALL", &steps.iter().collect::<Vec<_>>()));

        let val = validation_stats(&current, data.validation, data.templates, data.pairs, config.desired)?;
        history.extend(validation_rows(epoch, &val));
        log::info!("epoch {epoch}: validation KL {:.6}", val.all.mean);
        if val.all.mean < outcome.best_validation_kl {
            outcome.best_validation_kl = val.all.mean;
            outcome.best_epoch = epoch;
            outcome.model = current.clone();
        }
        if val.all.mean < reference - threshold {
            reference = val.all.mean;
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                log::info!("stopping after epoch {epoch}: no improvement for {wait} epochs");
                break;
            }
        }
    }
    outcome.history = history;
    outcome.group_states = group_states;
    Ok(outcome)
}

pub fn write_history_csv(rows: &[HistoryRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch", "split", "category", "kl_mean", "kl_var", "lambda", "mu_kl", "var_factor", "lm_loss",
        "total_loss",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.clone(),
            r.category.clone(),
            r.kl_mean.to_string(),
            r.kl_var.to_string(),
            opt(r.lambda),
            opt(r.mu_kl),
            opt(r.var_factor),
            opt(r.lm_loss),
            opt(r.total_loss),
        ])?;
    }
    w.flush().map_err(|e| Error::io("history csv", e))?;
    Ok(())
}

/// Validation KL per epoch as `epoch,DP_male,DP_female,DP_balanced,ALL`.
pub fn write_validation_curve_csv(rows: &[HistoryRow], out: impl Write) -> Result<()> {
    let mut by_epoch: BTreeMap<usize, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.split == "validation") {
        by_epoch.entry(r.epoch).or_default().insert(&r.category, r.kl_mean);
    }
    let columns = ["DP_male", "DP_female", "DP_balanced", "ALL"];
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch"];
    header.extend(columns);
    w.write_record(&header)?;
    for (epoch, values) in by_epoch {
        let mut record = vec![epoch.to_string()];
        record.extend(columns.iter().map(|c| values.get(c).map(|v| v.to_string()).unwrap_or_default()));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io("validation curve csv", e))?;
    Ok(())
}

/// Evaluates many models in parallel against the same professions.
pub fn evaluate_models(
    models: &[&ToyModel],
    professions: &[Profession],
    templates: &[Template],
    pairs: &[GenderedPair],
    desired: DesiredDistribution,
) -> Result<Vec<CategoryStats>> {
    models
        .par_iter()
        .map(|m| validation_stats(m, professions, templates, pairs, desired))
        .collect()
}
