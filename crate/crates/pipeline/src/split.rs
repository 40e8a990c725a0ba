use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{PipelineError, Result};

/// Volume-level train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Shuffles ids (sorted first, so input order is irrelevant) and splits
/// 70/10/20. Validation and test get `round(0.1 n)` and `round(0.2 n)`, each
/// at least one; training takes the remainder.
pub fn split_dataset(volume_ids: &[String], seed: u64) -> Result<SplitSpec> {
    let n = volume_ids.len();
    if n < 3 {
        return Err(PipelineError::InvalidInput(format!(
            "need at least 3 volumes to split, got {n}"
        )));
    }
    let mut ids = volume_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != n {
        return Err(PipelineError::InvalidInput("duplicate volume ids".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = ((n as f64 * 0.2).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitSpec {
        train: ids,
        val,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i:02}")).collect()
    }

    #[test]
    fn proportions() {
        let s = split_dataset(&ids(10), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let s = split_dataset(&ids(20), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (14, 2, 4));
        let s = split_dataset(&ids(3), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
    }

    #[test]
    fn too_few_volumes() {
        assert!(split_dataset(&ids(2), 0).is_err());
    }

    #[test]
    fn deterministic_and_order_free() {
        let a = split_dataset(&ids(20), 9).unwrap();
        let mut rev = ids(20);
        rev.reverse();
        assert_eq!(a, split_dataset(&rev, 9).unwrap());
        assert_ne!(a, split_dataset(&ids(20), 10).unwrap());
    }
}
