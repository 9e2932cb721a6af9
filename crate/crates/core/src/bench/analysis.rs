//! Prior-strength binning, rolling accuracy and phrasing consistency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::stats::{wilson_interval, Interval};
use crate::error::{Error, Result};

/// One scored question with its prior-strength proxy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorOutcome {
    pub prior_logprob: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "cuts")]
pub enum PriorScheme {
    /// Four near-equal bins by rank, weakest prior first.
    Quartiles,
    /// Value thresholds, ascending; `c` cuts give `c + 1` bins.
    CutPoints(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorBin {
    pub label: String,
    /// Inclusive lower edge (`None` = unbounded).
    pub lower: Option<f64>,
    /// Exclusive upper edge (`None` = unbounded).
    pub upper: Option<f64>,
    pub n: usize,
    pub correct: usize,
    pub accuracy: Option<f64>,
    pub wilson: Option<Interval>,
}

fn make_bin(
    label: String,
    lower: Option<f64>,
    upper: Option<f64>,
    items: &[PriorOutcome],
) -> PriorBin {
    let n = items.len();
    let correct = items.iter().filter(|o| o.correct).count();
    PriorBin {
        label,
        lower,
        upper,
        n,
        correct,
        accuracy: (n > 0).then(|| correct as f64 / n as f64),
        wilson: (n > 0).then(|| wilson_interval(correct as u64, n as u64, 0.95).expect("n > 0")),
    }
}

/// Items ordered by ascending prior strength; ties keep input order.
pub fn sort_by_prior(items: &[PriorOutcome]) -> Vec<PriorOutcome> {
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| a.prior_logprob.total_cmp(&b.prior_logprob));
    sorted
}

pub fn bin_by_prior(items: &[PriorOutcome], scheme: &PriorScheme) -> Result<Vec<PriorBin>> {
    if items.iter().any(|o| !o.prior_logprob.is_finite()) {
        return Err(Error::InvalidParameter(
            "non-finite prior log-probability".into(),
        ));
    }
    match scheme {
        PriorScheme::Quartiles => {
            if items.is_empty() {
                return Err(Error::EmptyInput("prior bins".into()));
            }
            let sorted = sort_by_prior(items);
            let n = sorted.len();
            Ok((0..4)
                .map(|q| {
                    let slice = &sorted[q * n / 4..(q + 1) * n / 4];
                    let lower = slice.first().map(|o| o.prior_logprob);
                    let upper = (q < 3)
                        .then(|| sorted.get((q + 1) * n / 4).map(|o| o.prior_logprob))
                        .flatten();
                    make_bin(format!("Q{}", q + 1), lower, upper, slice)
                })
                .collect())
        }
        PriorScheme::CutPoints(cuts) => {
            if cuts.windows(2).any(|w| w[0] >= w[1]) || cuts.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParameter(
                    "cut points must be finite and strictly ascending".into(),
                ));
            }
            let edges: Vec<Option<f64>> = std::iter::once(None)
                .chain(cuts.iter().copied().map(Some))
                .chain(std::iter::once(None))
                .collect();
            Ok(edges
                .windows(2)
                .map(|w| {
                    let (lo, hi) = (w[0], w[1]);
                    let members: Vec<PriorOutcome> = items
                        .iter()
                        .filter(|o| {
                            lo.is_none_or(|l| o.prior_logprob >= l)
                                && hi.is_none_or(|h| o.prior_logprob < h)
                        })
                        .copied()
                        .collect();
                    let label = match (lo, hi) {
                        (None, Some(h)) => format!("< {h}"),
                        (Some(l), Some(h)) => format!("[{l}, {h})"),
                        (Some(l), None) => format!(">= {l}"),
                        (None, None) => "all".to_string(),
                    };
                    make_bin(label, lo, hi, &members)
                })
                .collect())
        }
    }
}

/// Mean correctness over each contiguous window of `outcomes`.
pub fn rolling_accuracy(outcomes: &[bool], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::InvalidParameter("window must be positive".into()));
    }
    if outcomes.len() < window {
        return Err(Error::InvalidParameter(format!(
            "{} outcomes is fewer than window {window}",
            outcomes.len()
        )));
    }
    let mut hits = outcomes[..window].iter().filter(|&&c| c).count();
    let mut curve = Vec::with_capacity(outcomes.len() - window + 1);
    curve.push(hits as f64 / window as f64);
    for i in window..outcomes.len() {
        hits += usize::from(outcomes[i]);
        hits -= usize::from(outcomes[i - window]);
        curve.push(hits as f64 / window as f64);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Consistency {
    AllCorrect,
    Partial,
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsistencyCounts {
    pub all_correct: usize,
    pub partial: usize,
    pub none: usize,
    /// Knowledge points with a single phrasing, left out of the counts.
    pub excluded: Vec<String>,
}

/// Classifies every knowledge point by how many of its phrasings were answered.
pub fn phrasing_consistency<'a>(
    results: impl IntoIterator<Item = (&'a str, bool)>,
) -> (ConsistencyCounts, BTreeMap<String, Consistency>) {
    let mut groups: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (kp, correct) in results {
        let e = groups.entry(kp.to_string()).or_default();
        e.0 += 1;
        e.1 += usize::from(correct);
    }
    let mut counts = ConsistencyCounts::default();
    let mut per_point = BTreeMap::new();
    for (kp, (total, right)) in groups {
        if total < 2 {
            counts.excluded.push(kp);
            continue;
        }
        let class = if right == total {
            counts.all_correct += 1;
            Consistency::AllCorrect
        } else if right == 0 {
            counts.none += 1;
            Consistency::None
        } else {
            counts.partial += 1;
            Consistency::Partial
        };
        per_point.insert(kp, class);
    }
    (counts, per_point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn po(prior: f64, correct: bool) -> PriorOutcome {
        PriorOutcome {
            prior_logprob: prior,
            correct,
        }
    }

    #[test]
    fn quartiles_of_eight() {
        let items: Vec<_> = (0..8).map(|i| po(-(i as f64), i % 2 == 0)).collect();
        let bins = bin_by_prior(&items, &PriorScheme::Quartiles).unwrap();
        assert_eq!(
            bins.iter().map(|b| b.n).collect::<Vec<_>>(),
            vec![2, 2, 2, 2]
        );
        assert_eq!(bins[0].lower, Some(-7.0));
    }

    #[test]
    fn cut_points_one_per_bin() {
        let items = vec![
            po(-13.0, true),
            po(-7.0, false),
            po(-3.0, true),
            po(-1.0, true),
        ];
        let bins = bin_by_prior(&items, &PriorScheme::CutPoints(vec![-10.0, -5.0, -2.0])).unwrap();
        assert_eq!(
            bins.iter().map(|b| b.n).collect::<Vec<_>>(),
            vec![1, 1, 1, 1]
        );
        assert_eq!(bins[1].accuracy, Some(0.0));
        // boundary value goes to the upper bin
        let edge = bin_by_prior(
            &[po(-5.0, true)],
            &PriorScheme::CutPoints(vec![-10.0, -5.0, -2.0]),
        )
        .unwrap();
        assert_eq!(edge[2].n, 1);
        assert!(bin_by_prior(&items, &PriorScheme::CutPoints(vec![-2.0, -5.0])).is_err());
        assert!(bin_by_prior(&[po(f64::NAN, true)], &PriorScheme::Quartiles).is_err());
    }

    #[test]
    fn rolling_examples() {
        assert_eq!(rolling_accuracy(&[true; 40], 30).unwrap(), vec![1.0; 11]);
        let v: Vec<bool> = (0..30).map(|i| i % 3 == 0).collect();
        assert_eq!(rolling_accuracy(&v, 30).unwrap(), vec![10.0 / 30.0]);
        assert!(rolling_accuracy(&v, 31).is_err());
    }

    #[test]
    fn rolling_matches_direct_window_sums() {
        let step: Vec<bool> = (0..100).map(|i| (i / 10) % 2 == 0).collect();
        let curve = rolling_accuracy(&step, 30).unwrap();
        assert_eq!(curve.len(), 71);
        for (i, v) in curve.iter().enumerate() {
            let direct = step[i..i + 30].iter().filter(|&&c| c).count() as f64 / 30.0;
            assert!((v - direct).abs() < 1e-15);
        }
    }

    #[test]
    fn consistency_examples() {
        let (c, per) = phrasing_consistency([
            ("a", true),
            ("a", true),
            ("b", true),
            ("b", false),
            ("c", false),
            ("c", false),
            ("d", true),
        ]);
        assert_eq!((c.all_correct, c.partial, c.none), (1, 1, 1));
        assert_eq!(c.excluded, vec!["d".to_string()]);
        assert_eq!(per["b"], Consistency::Partial);
    }

    /// Exhaustive check over every outcome pattern of ten two-phrasing points.
    #[test]
    fn consistency_matches_enumeration() {
        let ids: Vec<String> = (0..10).map(|i| format!("kp{i}")).collect();
        for mask in (0u32..(1 << 20)).step_by(9973) {
            let results: Vec<(&str, bool)> = (0..20)
                .map(|bit| (ids[bit / 2].as_str(), mask & (1 << bit) != 0))
                .collect();
            let (c, _) = phrasing_consistency(results.iter().copied());
            let mut want = (0, 0, 0);
            for p in 0..10 {
                match ((mask >> (2 * p)) & 1, (mask >> (2 * p + 1)) & 1) {
                    (1, 1) => want.0 += 1,
                    (0, 0) => want.2 += 1,
                    _ => want.1 += 1,
                }
            }
            assert_eq!((c.all_correct, c.partial, c.none), want);
        }
    }

    proptest! {
        #[test]
        fn quartiles_partition(priors in proptest::collection::vec(-20.0f64..0.0, 1..60)) {
            let items: Vec<_> = priors.iter().map(|&p| po(p, p > -5.0)).collect();
            let bins = bin_by_prior(&items, &PriorScheme::Quartiles).unwrap();
            prop_assert_eq!(bins.iter().map(|b| b.n).sum::<usize>(), items.len());
            let sizes: Vec<usize> = bins.iter().map(|b| b.n).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn cut_bins_partition(priors in proptest::collection::vec(-20.0f64..0.0, 0..60)) {
            let items: Vec<_> = priors.iter().map(|&p| po(p, true)).collect();
            let bins = bin_by_prior(&items, &PriorScheme::CutPoints(vec![-10.0, -5.0, -2.0])).unwrap();
            prop_assert_eq!(bins.iter().map(|b| b.n).sum::<usize>(), items.len());
        }
    }
}
