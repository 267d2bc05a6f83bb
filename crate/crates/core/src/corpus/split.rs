use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Category, Profession};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.65,
            validation: 0.15,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfessionSplit {
    pub train: Vec<Profession>,
    pub validation: Vec<Profession>,
    pub test: Vec<Profession>,
}

impl ProfessionSplit {
    pub fn counts(&self, category: Category) -> [usize; 3] {
        let n = |v: &[Profession]| v.iter().filter(|p| p.category == category).count();
        [n(&self.train), n(&self.validation), n(&self.test)]
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`. Equal
/// remainders go to the earlier slot.
pub fn largest_remainder_counts(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Stable sort keeps index order among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &slot in order.iter().take(n.saturating_sub(assigned)) {
        counts[slot] += 1;
    }
    counts
}

/// Splits each category independently. Members are sorted by name and then
/// shuffled by `seed`, so the result does not depend on input order.
pub fn stratified_split(
    professions: &[Profession],
    ratios: SplitRatios,
    seed: u64,
) -> Result<ProfessionSplit> {
    let r = ratios.as_array();
    if r.iter().any(|x| !(0.0..=1.0).contains(x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!(
            "split ratios {r:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = ProfessionSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for category in Category::ALL {
        let mut members: Vec<&Profession> =
            professions.iter().filter(|p| p.category == category).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::CategoryTooSmall {
                category: category.label().to_string(),
                count: members.len(),
            });
        }
        members.sort_by(|a, b| a.name.cmp(&b.name));
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = largest_remainder_counts(members.len(), r);
        for (i, p) in members.into_iter().enumerate() {
            let target = if i < n_train {
                &mut split.train
            } else if i < n_train + n_val {
                &mut split.validation
            } else {
                &mut split.test
            };
            target.push(p.clone());
        }
    }
    Ok(split)
}
