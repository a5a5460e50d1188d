//! Triplet mining in embedding space. Ties always go to the lowest index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningPolicy {
    SupervisedBatchHard,
    MaskSelfSupervised,
    UnsupHardNegative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchor: usize,
    pub negative: usize,
    pub positive: usize,
    pub policy: MiningPolicy,
}

/// Euclidean distance accumulated in `f64`.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Batch-hard mining: for each anchor, the farthest same-identity sample is the
/// positive and the closest other-identity sample is the negative. Anchors
/// whose identity has no second sample are skipped.
pub fn mine_triplets_supervised(
    embeddings: &[Vec<f32>],
    labels: &[usize],
) -> Result<Vec<TripletIndices>> {
    if embeddings.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", embeddings.len()),
            got: format!("{} labels", labels.len()),
        });
    }
    let first = labels
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::InvalidArgument(
            "batch-hard mining needs at least two identities".into(),
        ));
    }
    let mut out = Vec::new();
    for anchor in 0..embeddings.len() {
        let mut positive: Option<(usize, f64)> = None;
        let mut negative: Option<(usize, f64)> = None;
        for j in 0..embeddings.len() {
            if j == anchor {
                continue;
            }
            let d = euclidean(&embeddings[anchor], &embeddings[j]);
            if labels[j] == labels[anchor] {
                if positive.is_none_or(|(_, best)| d > best) {
                    positive = Some((j, d));
                }
            } else if negative.is_none_or(|(_, best)| d < best) {
                negative = Some((j, d));
            }
        }
        if let (Some((p, _)), Some((n, _))) = (positive, negative) {
            out.push(TripletIndices {
                anchor,
                negative: n,
                positive: p,
                policy: MiningPolicy::SupervisedBatchHard,
            });
        }
    }
    Ok(out)
}

/// Label-free triplet: the positive is the anchor's augmented copy, the
/// negative the closest other batch member.
pub fn mine_triplet_unsupervised(
    embeddings: &[Vec<f32>],
    anchor: usize,
    aug_of_anchor: usize,
) -> Result<TripletIndices> {
    let n = embeddings.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "unsupervised mining needs a batch of at least 3, got {n}"
        )));
    }
    if anchor >= n || aug_of_anchor >= n || anchor == aug_of_anchor {
        return Err(Error::InvalidArgument(format!(
            "invalid anchor/augmentation pair ({anchor}, {aug_of_anchor}) for batch of {n}"
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for j in 0..n {
        if j == anchor || j == aug_of_anchor {
            continue;
        }
        let d = euclidean(&embeddings[anchor], &embeddings[j]);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((j, d));
        }
    }
    let (negative, _) = best.expect("batch has a third member");
    Ok(TripletIndices {
        anchor,
        negative,
        positive: aug_of_anchor,
        policy: MiningPolicy::UnsupHardNegative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unique_candidates() {
        let e = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        let t = mine_triplets_supervised(&e, &[0, 0, 1]).unwrap();
        assert_eq!(t[0].positive, 1);
        assert_eq!(t[0].negative, 2);
        // anchor 2 has no positive and is skipped
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn single_identity_is_fatal() {
        let e = vec![vec![0.0]; 3];
        assert!(mine_triplets_supervised(&e, &[0, 0, 0]).is_err());
    }

    #[test]
    fn unsupervised_unique_argmin() {
        let e = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![1.0, 0.0]];
        let t = mine_triplet_unsupervised(&e, 0, 1).unwrap();
        assert_eq!(t.negative, 3);
        assert_eq!(t.positive, 1);
    }

    #[test]
    fn unsupervised_tie_goes_to_lowest_index() {
        let e = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![0.0, 2.0], vec![2.0, 0.0]];
        assert_eq!(mine_triplet_unsupervised(&e, 0, 1).unwrap().negative, 2);
    }

    #[test]
    fn unsupervised_small_batch_is_fatal() {
        let e = vec![vec![0.0], vec![1.0]];
        assert!(mine_triplet_unsupervised(&e, 0, 1).is_err());
    }

    fn embeddings(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-3.0f32..3.0, d), n)
    }

    proptest! {
        #[test]
        fn supervised_matches_exhaustive_search(
            e in embeddings(16, 5),
            labels in prop::collection::vec(0usize..4, 16),
        ) {
            prop_assume!(labels.iter().any(|&l| l != labels[0]));
            let mined = mine_triplets_supervised(&e, &labels).unwrap();
            // brute force: collect all (distance, index) candidates and take extremes
            let mut expected = Vec::new();
            for a in 0..16 {
                let mut pos: Vec<(f64, usize)> = (0..16)
                    .filter(|&j| j != a && labels[j] == labels[a])
                    .map(|j| (euclidean(&e[a], &e[j]), j))
                    .collect();
                let mut neg: Vec<(f64, usize)> = (0..16)
                    .filter(|&j| labels[j] != labels[a])
                    .map(|j| (euclidean(&e[a], &e[j]), j))
                    .collect();
                if pos.is_empty() {
                    continue;
                }
                pos.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
                neg.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
                expected.push((a, pos[0].1, neg[0].1));
            }
            let got: Vec<_> = mined.iter().map(|t| (t.anchor, t.positive, t.negative)).collect();
            prop_assert_eq!(got, expected);
            for t in &mined {
                prop_assert_eq!(labels[t.anchor], labels[t.positive]);
                prop_assert_ne!(labels[t.anchor], labels[t.negative]);
                prop_assert_ne!(t.anchor, t.negative);
            }
        }

        #[test]
        fn unsupervised_matches_exhaustive_search(e in embeddings(16, 4), anchor in 0usize..8) {
            let aug = anchor + 8;
            let t = mine_triplet_unsupervised(&e, anchor, aug).unwrap();
            let best = (0..16)
                .filter(|&j| j != anchor && j != aug)
                .min_by(|&i, &j| {
                    euclidean(&e[anchor], &e[i])
                        .partial_cmp(&euclidean(&e[anchor], &e[j]))
                        .unwrap()
                        .then(i.cmp(&j))
                })
                .unwrap();
            prop_assert_eq!(t.negative, best);
            prop_assert!(t.negative != anchor && t.negative != aug);
        }
    }
}
