use serde::{Deserialize, Serialize};

use crate::corpus::Category;
use crate::error::{Error, Result};

pub const ALPHA_HIGH_KL: f64 = 1e-6;
pub const ALPHA_LOW_KL: f64 = 1e-5;

/// Single-pass mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Welford {
    pub count: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Welford {
    pub fn update(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Population variance, zero before two observations.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

/// Clamp constants of the stability weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityConstants {
    pub high_scale: f64,
    pub high_min: f64,
    pub low_scale: f64,
    pub low_min: f64,
    pub max: f64,
}

impl Default for StabilityConstants {
    fn default() -> Self {
        StabilityConstants {
            high_scale: 0.95,
            high_min: 0.8,
            low_scale: 1.2,
            low_min: 1.0,
            max: 1.5,
        }
    }
}

/// Running statistics of one category's batch KL losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub category: Category,
    /// `None` until the first batch.
    pub ema_mean: Option<f64>,
    pub welford: Welford,
    pub alpha: f64,
    pub is_high_kl: bool,
}

impl GroupState {
    pub fn new(category: Category, is_high_kl: bool) -> Self {
        GroupState {
            category,
            ema_mean: None,
            welford: Welford::default(),
            alpha: if is_high_kl { ALPHA_HIGH_KL } else { ALPHA_LOW_KL },
            is_high_kl,
        }
    }

    pub fn variance(&self) -> f64 {
        self.welford.variance()
    }
}

/// `μ ← β μ + (1 − β) batch_kl`; the first batch initializes `μ`.
pub fn ema_update(state: &mut GroupState, batch_kl: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidValue(format!("EMA momentum {beta} outside (0, 1)")));
    }
    if !batch_kl.is_finite() || batch_kl < 0.0 {
        return Err(Error::InvalidValue(format!("batch KL {batch_kl} must be finite and >= 0")));
    }
    let mu = match state.ema_mean {
        None => batch_kl,
        Some(old) => beta * old + (1.0 - beta) * batch_kl,
    };
    state.ema_mean = Some(mu);
    Ok(mu)
}

pub fn welford_update(state: &mut GroupState, batch_kl: f64) -> f64 {
    state.welford.update(batch_kl);
    state.welford.variance()
}

/// `1 / (1 + Var)`.
pub fn var_factor(state: &GroupState) -> f64 {
    1.0 / (1.0 + state.variance())
}

pub fn stability_weight(mu: f64, v: f64, is_high_kl: bool, c: &StabilityConstants) -> f64 {
    if is_high_kl {
        (c.high_scale * mu * v).min(c.max).max(c.high_min)
    } else {
        (c.low_scale * mu * v).min(c.max).max(c.low_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state() -> GroupState {
        GroupState::new(Category::MaleDominated, true)
    }

    #[test]
    fn ema_examples() {
        let mut s = state();
        assert_eq!(ema_update(&mut s, 0.20, 0.95).unwrap(), 0.20);
        let mu = ema_update(&mut s, 0.10, 0.95).unwrap();
        assert!((mu - 0.195).abs() < 1e-15);
        let mut c = state();
        for _ in 0..500 {
            ema_update(&mut c, 0.3, 0.6).unwrap();
        }
        assert!((c.ema_mean.unwrap() - 0.3).abs() < 1e-15);
        assert!(ema_update(&mut c, -0.1, 0.6).is_err());
        assert!(ema_update(&mut c, 0.1, 1.0).is_err());
    }

    #[test]
    fn welford_examples() {
        let mut s = state();
        assert_eq!(welford_update(&mut s, 0.2), 0.0);
        let mut s = state();
        for x in [0.1, 0.2, 0.3] {
            welford_update(&mut s, x);
        }
        assert!((s.welford.mean - 0.2).abs() < 1e-15);
        assert!((s.variance() - 0.02 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn var_factor_examples() {
        let mut s = state();
        assert_eq!(var_factor(&s), 1.0);
        s.welford = Welford { count: 2, mean: 0.0, m2: 2.0 };
        assert_eq!(var_factor(&s), 0.5);
        s.welford.m2 = 1e12;
        assert!(var_factor(&s) < 1e-11);
    }

    #[test]
    fn stability_weight_examples() {
        let c = StabilityConstants::default();
        assert_eq!(stability_weight(1.0, 1.0, true, &c), 0.95);
        assert_eq!(stability_weight(0.1, 1.0, true, &c), 0.8);
        assert_eq!(stability_weight(2.0, 1.0, false, &c), 1.5);
        assert_eq!(stability_weight(0.1, 1.0, false, &c), 1.0);
        assert_eq!(stability_weight(10.0, 1.0, true, &c), 1.5);
    }

    #[test]
    fn alpha_follows_group() {
        assert_eq!(GroupState::new(Category::Balanced, true).alpha, 1e-6);
        assert_eq!(GroupState::new(Category::Balanced, false).alpha, 1e-5);
    }

    proptest! {
        #[test]
        fn welford_matches_two_pass(xs in proptest::collection::vec(0.0f64..5.0, 1..300)) {
            let mut s = state();
            for &x in &xs {
                welford_update(&mut s, x);
            }
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((s.variance() - var).abs() < 1e-12);
            prop_assert!((s.welford.mean - mean).abs() < 1e-12);
        }

        #[test]
        fn lambda_stays_in_band(mu in 0.0f64..100.0, v in 1e-6f64..=1.0, high in any::<bool>()) {
            let l = stability_weight(mu, v, high, &StabilityConstants::default());
            let lo = if high { 0.8 } else { 1.0 };
            prop_assert!((lo..=1.5).contains(&l));
        }

        #[test]
        fn ema_converges_geometrically(c in 0.0f64..2.0, start in 0.0f64..2.0, beta in 0.05f64..0.95) {
            let mut s = state();
            ema_update(&mut s, start, beta).unwrap();
            let mut gap = (start - c).abs();
            for _ in 0..10 {
                let mu = ema_update(&mut s, c, beta).unwrap();
                let next = (mu - c).abs();
                prop_assert!((next - beta * gap).abs() < 1e-12);
                gap = next;
            }
        }
    }
}
