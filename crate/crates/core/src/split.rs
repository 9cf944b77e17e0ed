//! Seeded case-level train/evaluation/test partition.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// (train, evaluation, test)
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: [0.78, 0.12, 0.10], seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|&f| !(f > 0.0) || !f.is_finite()) {
            return param(format!("split fractions must be positive, got {:?}", self.fractions));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return param(format!("split fractions must sum to 1, got {total}"));
        }
        Ok(())
    }

    /// Part sizes for `n` cases by largest-remainder rounding. Remainder ties
    /// go to the earlier part.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let quotas = self.fractions.map(|f| f * n as f64);
        let mut sizes = quotas.map(|q| q.floor() as usize);
        let mut left = n - sizes.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub evaluation: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.evaluation.len(), self.test.len()]
    }
}

/// Shuffles the sorted, deduplicated ids with the given seed and cuts them
/// into three disjoint parts that cover the input.
pub fn split_cases(case_ids: &[String], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if case_ids.is_empty() {
        return param("case list is empty");
    }
    let mut ids = case_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let [a, b, _] = spec.sizes(ids.len());
    let test = ids.split_off(a + b);
    let evaluation = ids.split_off(a);
    Ok(Split { train: ids, evaluation, test })
}
