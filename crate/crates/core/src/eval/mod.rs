//! Dice metric, fold planning, cross-validation and alpha-study drivers,
//! and report emission.

mod crossval;
mod report;

pub use crossval::{run_alpha_study, run_crossval, stage_seed, AlphaCell, AlphaGrid, CrossvalConfig};
pub use report::{emit_alpha_report, emit_report};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volume::{LabelVolume, Organ};
use crate::{Error, Result};

/// Dice overlap 2|A∩B| / (|A| + |B|) for one organ label. Both sets
/// empty yields 1.0 (an absent organ predicted absent is a perfect
/// match); exactly one empty yields 0.0.
pub fn dice(pred: &LabelVolume, truth: &LabelVolume, organ: Organ) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(Error::ShapeMismatch(format!(
            "dice dims {:?} vs {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let label = organ.label();
    let mut a = 0u64;
    let mut b = 0u64;
    let mut both = 0u64;
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        let pa = p == label;
        let tb = t == label;
        a += pa as u64;
        b += tb as u64;
        both += (pa && tb) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// One fold's split. Within a fold the three sets are pairwise disjoint
/// and cover the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
    /// True when k test windows cannot be disjoint (k * window > n); the
    /// windows then wrap circularly and overlap across folds.
    pub test_windows_overlap: bool,
}

/// Circular-window fold planning at the 5:1:1 ratio.
///
/// Ids are shuffled once by the seed. Fold i takes a window of
/// round(n/7) ids as test, the next window as validation, and the rest
/// as training data. With k windows exceeding n (the 8-fold protocol on
/// 42 cases), test windows wrap and overlap across folds; this is
/// surfaced via [`FoldPlan::test_windows_overlap`] and a warning.
pub fn make_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldPlan> {
    let n = ids.len();
    if k < 1 {
        return Err(Error::FoldPlan("k must be >= 1".into()));
    }
    if n < 7 {
        return Err(Error::FoldPlan(format!(
            "{n} cases cannot be split 5:1:1; need at least 7"
        )));
    }
    let window = ((n as f64) / 7.0).round().max(1.0) as usize;

    let mut shuffled: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }

    let overlap = k * window > n;
    if overlap {
        log::warn!(
            "{k} folds x {window}-case test windows exceed {n} cases; test windows wrap and \
             overlap across folds"
        );
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let start = (f * window) % n;
        let test: Vec<String> = (0..window).map(|i| shuffled[(start + i) % n].clone()).collect();
        let validation: Vec<String> =
            (0..window).map(|i| shuffled[(start + window + i) % n].clone()).collect();
        let train: Vec<String> = shuffled
            .iter()
            .filter(|id| !test.contains(id) && !validation.contains(id))
            .cloned()
            .collect();
        folds.push(Fold { train, validation, test });
    }
    Ok(FoldPlan { k, seed, folds, test_windows_overlap: overlap })
}

/// One Dice measurement with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRecord {
    pub case_id: String,
    pub fold: usize,
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub organ: Organ,
    pub dice: f64,
}

/// Per-organ Avg/SD/Min/Max across records (population standard
/// deviation, per-case).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrganAggregate {
    pub organ: Organ,
    pub count: usize,
    pub avg: f64,
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<DiceRecord>,
    /// Set when the fold plan's test windows overlap across folds.
    pub overlap_note: Option<String>,
}

impl MetricsReport {
    pub fn aggregates(&self) -> Vec<OrganAggregate> {
        Organ::ALL
            .iter()
            .filter_map(|&organ| {
                let values: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.organ == organ)
                    .map(|r| r.dice)
                    .collect();
                aggregate(organ, &values)
            })
            .collect()
    }

    pub fn organ_mean(&self, organ: Organ) -> Option<f64> {
        self.aggregates().into_iter().find(|a| a.organ == organ).map(|a| a.avg)
    }

    pub fn mean_dice(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.dice).sum::<f64>() / self.records.len() as f64)
    }
}

fn aggregate(organ: Organ, values: &[f64]) -> Option<OrganAggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let avg = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(OrganAggregate { organ, count: values.len(), avg, sd: var.sqrt(), min, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Dims, Spacing};
    use std::collections::HashSet;

    fn labels(dims: Dims, data: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, Spacing::isotropic(1.0), data).unwrap()
    }

    #[test]
    fn dice_identity_is_one() {
        let l = labels(Dims::new(3, 3, 3), {
            let mut v = vec![0u8; 27];
            v[4] = 1;
            v[5] = 1;
            v
        });
        assert_eq!(dice(&l, &l, Organ::Liver).unwrap(), 1.0);
    }

    #[test]
    fn dice_disjoint_is_zero() {
        let a = labels(Dims::new(4, 1, 1), vec![1, 1, 0, 0]);
        let b = labels(Dims::new(4, 1, 1), vec![0, 0, 1, 1]);
        assert_eq!(dice(&a, &b, Organ::Liver).unwrap(), 0.0);
    }

    #[test]
    fn dice_hand_count() {
        // |A| = 4, |B| = 4, |A n B| = 2 -> 0.5
        let a = labels(Dims::new(8, 1, 1), vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let b = labels(Dims::new(8, 1, 1), vec![1, 1, 0, 0, 1, 1, 0, 0]);
        assert_eq!(dice(&a, &b, Organ::Liver).unwrap(), 0.5);
    }

    #[test]
    fn dice_empty_conventions() {
        let empty = labels(Dims::new(2, 2, 2), vec![0; 8]);
        let some = labels(Dims::new(2, 2, 2), {
            let mut v = vec![0u8; 8];
            v[0] = 2;
            v
        });
        assert_eq!(dice(&empty, &empty, Organ::Spleen).unwrap(), 1.0);
        assert_eq!(dice(&some, &empty, Organ::Spleen).unwrap(), 0.0);
        assert_eq!(dice(&empty, &some, Organ::Spleen).unwrap(), 0.0);
    }

    #[test]
    fn dice_is_symmetric_and_permutation_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::new(8, 8, 8);
        let a_data: Vec<u8> = (0..512).map(|_| rng.gen_range(0..5)).collect();
        let b_data: Vec<u8> = (0..512).map(|_| rng.gen_range(0..5)).collect();
        let a = labels(dims, a_data.clone());
        let b = labels(dims, b_data.clone());
        for organ in Organ::ALL {
            assert_eq!(dice(&a, &b, organ).unwrap(), dice(&b, &a, organ).unwrap());
        }

        // Same permutation applied to both inputs.
        let mut perm: Vec<usize> = (0..512).collect();
        for i in (1..512).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let ap = labels(dims, perm.iter().map(|&i| a_data[i]).collect());
        let bp = labels(dims, perm.iter().map(|&i| b_data[i]).collect());
        for organ in Organ::ALL {
            assert_eq!(dice(&a, &b, organ).unwrap(), dice(&ap, &bp, organ).unwrap());
        }
    }

    #[test]
    fn dice_rejects_dims_mismatch() {
        let a = labels(Dims::new(2, 2, 2), vec![0; 8]);
        let b = labels(Dims::new(2, 2, 1), vec![0; 4]);
        assert!(dice(&a, &b, Organ::Liver).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i:02}")).collect()
    }

    #[test]
    fn folds_14_cases_2_folds() {
        let plan = make_folds(&ids(14), 2, 9).unwrap();
        assert!(!plan.test_windows_overlap);
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 2);
            assert_eq!(fold.validation.len(), 2);
            assert_eq!(fold.train.len(), 10);
            let all: HashSet<_> =
                fold.test.iter().chain(&fold.validation).chain(&fold.train).collect();
            assert_eq!(all.len(), 14, "within-fold disjointness + coverage");
        }
    }

    #[test]
    fn folds_42_cases_7_folds_partition_tests() {
        let plan = make_folds(&ids(42), 7, 1).unwrap();
        assert!(!plan.test_windows_overlap);
        let mut seen = HashSet::new();
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 6);
            for id in &fold.test {
                assert!(seen.insert(id.clone()), "test windows must partition");
            }
        }
        assert_eq!(seen.len(), 42);
    }

    #[test]
    fn folds_42_cases_8_folds_overlap_flagged() {
        let plan = make_folds(&ids(42), 8, 1).unwrap();
        assert!(plan.test_windows_overlap);
        assert_eq!(plan.folds.len(), 8);
        for fold in &plan.folds {
            let all: HashSet<_> =
                fold.test.iter().chain(&fold.validation).chain(&fold.train).collect();
            assert_eq!(all.len(), 42);
        }
    }

    #[test]
    fn folds_deterministic_per_seed() {
        assert_eq!(make_folds(&ids(12), 3, 5).unwrap(), make_folds(&ids(12), 3, 5).unwrap());
        assert_ne!(make_folds(&ids(12), 3, 5).unwrap(), make_folds(&ids(12), 3, 6).unwrap());
    }

    #[test]
    fn folds_reject_tiny_sets() {
        assert!(make_folds(&ids(6), 2, 0).is_err());
        assert!(make_folds(&ids(14), 0, 0).is_err());
    }

    #[test]
    fn aggregates_identities() {
        let report = MetricsReport {
            records: vec![
                DiceRecord {
                    case_id: "a".into(),
                    fold: 0,
                    alpha_train: 0.6,
                    alpha_test: 0.6,
                    organ: Organ::Liver,
                    dice: 0.8,
                },
                DiceRecord {
                    case_id: "b".into(),
                    fold: 0,
                    alpha_train: 0.6,
                    alpha_test: 0.6,
                    organ: Organ::Liver,
                    dice: 0.9,
                },
            ],
            overlap_note: None,
        };
        let aggs = report.aggregates();
        assert_eq!(aggs.len(), 1);
        let a = aggs[0];
        assert!(a.min <= a.avg && a.avg <= a.max);
        assert!(a.sd >= 0.0);
        assert!((a.avg - 0.85).abs() < 1e-12);
        assert!((a.sd - 0.05).abs() < 1e-12);
    }
}
