use serde::{Deserialize, Serialize};

use super::stats::{ema_update, stability_weight, var_factor, welford_update, GroupState, StabilityConstants};
use crate::bias::DesiredDistribution;
use crate::corpus::{Category, GenderedPair, Profession, Template};
use crate::error::{Error, Result};
use crate::scoring::{probes_for, DistributionRecorder, GenderDistribution, RecordedDistribution};
use crate::toymodel::{ModelMode, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Uniform,
    WeightedAdaptive,
}

/// Components of one optimizer step's loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub category: Category,
    /// Uniform KL of the batch before any weighting.
    pub batch_kl: f64,
    /// KL term entering the total (weighted when adaptive).
    pub kl_component: f64,
    pub lm_component: Option<f64>,
    pub total: f64,
    pub lambda: f64,
    pub mu_kl: f64,
    pub var_factor: f64,
    pub alpha: f64,
}

/// `L̂ = batch_kl / (μ + α)`.
pub fn adaptive_loss(batch_kl: f64, mu: f64, alpha: f64) -> Result<f64> {
    let denom = mu + alpha;
    if !(denom > 0.0) {
        return Err(Error::InvalidValue(format!("adaptive denominator {denom} must be positive")));
    }
    Ok(batch_kl / denom)
}

/// `kl + γ·lm`; without an LM term the KL passes through unchanged.
pub fn combined_loss(kl: f64, lm: Option<f64>, gamma: f64) -> f64 {
    match lm {
        Some(lm) if gamma != 0.0 => kl + gamma * lm,
        _ => kl,
    }
}

/// Per-profession KL node for a recorded distribution.
pub fn record_kl(tape: &mut Tape, pred: RecordedDistribution, target: GenderDistribution) -> Var {
    let mut terms = Vec::with_capacity(2);
    let mut entropy = 0.0;
    for (t, p) in [(target.p_male, pred.p_male), (target.p_female, pred.p_female)] {
        if t == 0.0 {
            continue;
        }
        entropy += t * t.ln();
        let lp = tape.ln(p);
        terms.push(tape.scale(lp, -t));
    }
    let cross = tape.sum(&terms);
    let c = tape.constant(entropy);
    let kl = tape.add(cross, c);
    tape.scale(kl, 0.5)
}

/// The category shared by every batch member.
pub fn batch_category(batch: &[Profession]) -> Result<Category> {
    let first = batch
        .first()
        .ok_or_else(|| Error::EmptyInput("training batch".into()))?;
    if let Some(other) = batch.iter().find(|p| p.category != first.category) {
        return Err(Error::MixedBatch(format!(
            "{} is {} but {} is {}",
            first.name, first.category, other.name, other.category
        )));
    }
    Ok(first.category)
}

/// Mean per-profession KL over the batch.
pub fn uniform_kl_loss(
    recorder: &mut DistributionRecorder,
    batch: &[Profession],
    templates: &[Template],
    pairs: &[GenderedPair],
    desired: DesiredDistribution,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch".into()));
    }
    let mut kls = Vec::with_capacity(batch.len());
    for p in batch {
        let pred = recorder.distribution(p, templates, pairs)?;
        kls.push(record_kl(recorder.tape(), pred, desired.target(p)));
    }
    Ok(recorder.tape().mean(&kls))
}

/// `λ · kl / (μ + α)` with the three statistics held constant.
pub fn weighted_adaptive_term(tape: &mut Tape, kl: Var, lambda: f64, mu: f64, alpha: f64) -> Result<Var> {
    let denom = mu + alpha;
    if !(denom > 0.0) {
        return Err(Error::InvalidValue(format!("adaptive denominator {denom} must be positive")));
    }
    let d = tape.constant(denom);
    let adaptive = tape.div(kl, d);
    Ok(tape.scale(adaptive, lambda))
}

/// Updates the group statistics with the batch KL, then weights it.
/// Returns the weighted node and `(λ, μ, V)`.
pub fn weighted_adaptive_loss(
    tape: &mut Tape,
    kl: Var,
    state: &mut GroupState,
    beta: f64,
    constants: &StabilityConstants,
) -> Result<(Var, f64, f64, f64)> {
    let batch_kl = tape.value(kl);
    let mu = ema_update(state, batch_kl, beta)?;
    welford_update(state, batch_kl);
    let v = var_factor(state);
    let lambda = stability_weight(mu, v, state.is_high_kl, constants);
    let node = weighted_adaptive_term(tape, kl, lambda, mu, state.alpha)?;
    Ok((node, lambda, mu, v))
}

/// Negative mean pseudo-log-likelihood over the batch's probe sentences.
pub fn lm_term(
    tape: &mut Tape,
    batch: &[Profession],
    templates: &[Template],
    pairs: &[GenderedPair],
) -> Result<Var> {
    let model = tape.model();
    model.require_mode(ModelMode::Masked)?;
    let mut terms = Vec::new();
    for p in batch {
        for probe in probes_for(p, templates, pairs) {
            let ids = model.vocab.encode(&probe.tokens);
            terms.push(tape.pseudo_log_likelihood(&ids)?);
        }
    }
    if terms.is_empty() {
        return Err(Error::EmptyInput("probe sentences".into()));
    }
    let mean = tape.mean(&terms);
    Ok(tape.scale(mean, -1.0))
}

pub fn combined_term(tape: &mut Tape, kl: Var, lm: Option<Var>, gamma: f64) -> Var {
    match lm {
        Some(lm) if gamma != 0.0 => {
            let weighted = tape.scale(lm, gamma);
            tape.add(kl, weighted)
        }
        _ => kl,
    }
}
