use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.9, val_frac: 0.05, test_frac: 0.05, seed: 7 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config(format!("split fractions must lie in [0, 1], got {fr:?}")));
        }
        let total: f64 = fr.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {total}, expected 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes: floor for val/test, remainder to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        // the epsilon absorbs representation error such as 0.07 * 100 = 7.000000000000001
        let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
        let val = floor(self.val_frac);
        let test = floor(self.test_frac);
        (n - val - test, val, test)
    }

    /// Shuffled index partition `(train, val, test)`.
    pub fn indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let (ntr, nva, _) = self.sizes(n);
        let test = idx.split_off(ntr + nva);
        let val = idx.split_off(ntr);
        Ok((idx, val, test))
    }
}

/// Deterministic shuffle by seed, then contiguous partition.
pub fn split_dataset(d: &Dataset, s: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    if d.len() < 3 {
        return Err(Error::Config(format!("cannot split a dataset of {} frames (need at least 3)", d.len())));
    }
    let (tr, va, te) = s.indices(d.len())?;
    Ok((d.subset(&tr), d.subset(&va), d.subset(&te)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::{LabeledStructure, Structure};
    use proptest::prelude::*;

    fn dataset(n: usize) -> Dataset {
        let items = (0..n)
            .map(|i| {
                let s = Structure::molecule(vec![1], vec![[i as f64, 0.0, 0.0]]).unwrap();
                LabeledStructure::new(s, i as f64, vec![[0.0; 3]]).unwrap()
            })
            .collect();
        Dataset::new("toy", items)
    }

    #[test]
    fn ninety_five_five() {
        let (a, b, c) = split_dataset(&dataset(100), &SplitSpec { seed: 7, ..Default::default() }).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (90, 5, 5));
    }

    #[test]
    fn three_frames_all_go_to_train() {
        let (a, b, c) = split_dataset(&dataset(3), &SplitSpec::default()).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (3, 0, 0));
        assert!(b.require_non_empty("validation").is_err());
    }

    #[test]
    fn desk_scale_sizes() {
        assert_eq!(SplitSpec::default().sizes(2222), (2000, 111, 111));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let d = dataset(50);
        let s = SplitSpec::default();
        assert_eq!(split_dataset(&d, &s).unwrap(), split_dataset(&d, &s).unwrap());
        let other = SplitSpec { seed: 8, ..s };
        assert_ne!(split_dataset(&d, &s).unwrap().0, split_dataset(&d, &other).unwrap().0);
    }

    #[test]
    fn invalid_fractions() {
        let d = dataset(10);
        let bad = SplitSpec { train_frac: 0.9, val_frac: 0.2, test_frac: 0.05, seed: 0 };
        assert!(matches!(split_dataset(&d, &bad), Err(Error::Config(_))));
        let neg = SplitSpec { train_frac: 1.1, val_frac: -0.1, test_frac: 0.0, seed: 0 };
        assert!(neg.validate().is_err());
        assert!(split_dataset(&dataset(2), &SplitSpec::default()).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 3usize..300, seed in any::<u64>(), v in 0.0f64..0.4, t in 0.0f64..0.4) {
            let s = SplitSpec { train_frac: 1.0 - v - t, val_frac: v, test_frac: t, seed };
            let (a, b, c) = s.indices(n).unwrap();
            let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}
