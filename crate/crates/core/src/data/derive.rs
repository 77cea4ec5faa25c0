//! Turning raw review/location data into model inputs: geohash event
//! tokens, the co-occurrence graph, and fraud labels.

use std::collections::{BTreeMap, BTreeSet};

use super::DataError;
use crate::graph::Graph;

/// The base-32 alphabet geohashes are written in (digits plus lowercase
/// letters except `a`, `i`, `l`, `o`).
pub const GEOHASH_ALPHABET: &str = "0123456789bcdefghjkmnpqrstuvwxyz";

/// Splits an 8-character geohash into its cumulative prefixes of lengths
/// 2, 4, 6 and 8. Each prefix names a strictly smaller area, so the four
/// tokens describe the same place at increasing resolution — and nearby
/// places share their coarse tokens, which is the point.
pub fn tokenize_geohash8(geohash: &str) -> Result<[String; 4], DataError> {
    if geohash.chars().count() != 8 {
        return Err(DataError::InvalidGeohash {
            value: geohash.to_string(),
            reason: "length must be exactly 8 characters",
        });
    }
    for ch in geohash.chars() {
        if !GEOHASH_ALPHABET.contains(ch) {
            return Err(DataError::InvalidGeohash {
                value: geohash.to_string(),
                reason: "character outside the geohash base-32 alphabet",
            });
        }
    }
    Ok([
        geohash[..2].to_string(),
        geohash[..4].to_string(),
        geohash[..6].to_string(),
        geohash.to_string(),
    ])
}

/// Connects users who share at least `threshold` items. Built through an
/// item → users inverted index so sparse data never pays the all-pairs
/// cost.
pub fn build_cooccurrence_graph(
    user_items: &[BTreeSet<u64>],
    threshold: usize,
) -> Result<Graph, DataError> {
    if threshold < 1 {
        return Err(DataError::InvalidThreshold);
    }
    let mut item_users: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    for (user, items) in user_items.iter().enumerate() {
        for &item in items {
            item_users.entry(item).or_default().push(user as u32);
        }
    }
    let mut shared: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for users in item_users.values() {
        for (i, &u) in users.iter().enumerate() {
            for &v in &users[i + 1..] {
                *shared.entry((u, v)).or_insert(0) += 1;
            }
        }
    }
    let edges = shared
        .into_iter()
        .filter_map(|(pair, count)| (count >= threshold).then_some(pair));
    Ok(Graph::new(user_items.len(), edges)?)
}

/// Outcome of the fraud labeling rule for one user.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FraudLabel {
    Fraud,
    Benign,
    /// Too few reviews to judge.
    Unlabeled,
}

impl FraudLabel {
    /// `1` for fraud, `0` for benign, `None` when unlabeled.
    pub fn as_binary(self) -> Option<u8> {
        match self {
            FraudLabel::Fraud => Some(1),
            FraudLabel::Benign => Some(0),
            FraudLabel::Unlabeled => None,
        }
    }
}

/// Labels each user from their review helpfulness record: users with fewer
/// than `min_reviews` reviews stay unlabeled; otherwise a user is fraud
/// exactly when the unhelpful fraction strictly exceeds `frac`.
///
/// In `user_reviews`, `true` marks a review that was voted *unhelpful*.
pub fn derive_fraud_labels(
    user_reviews: &[Vec<bool>],
    min_reviews: usize,
    frac: f64,
) -> Result<Vec<FraudLabel>, DataError> {
    if min_reviews < 1 {
        return Err(DataError::InvalidLabelRule {
            reason: "min_reviews must be at least 1",
        });
    }
    if !(frac > 0.0 && frac < 1.0) {
        return Err(DataError::InvalidLabelRule {
            reason: "frac must lie strictly between 0 and 1",
        });
    }
    Ok(user_reviews
        .iter()
        .map(|reviews| {
            if reviews.len() < min_reviews {
                return FraudLabel::Unlabeled;
            }
            let unhelpful = reviews.iter().filter(|&&r| r).count();
            if unhelpful as f64 / reviews.len() as f64 > frac {
                FraudLabel::Fraud
            } else {
                FraudLabel::Benign
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(ids: &[u64]) -> BTreeSet<u64> {
        ids.iter().copied().collect()
    }

    #[test]
    fn geohash_splits_into_cumulative_prefixes() {
        assert_eq!(
            tokenize_geohash8("9v6kpmr1").unwrap(),
            ["9v", "9v6k", "9v6kpm", "9v6kpmr1"]
        );
        assert_eq!(
            tokenize_geohash8("gcpwkeq6").unwrap(),
            ["gc", "gcpw", "gcpwke", "gcpwkeq6"]
        );
    }

    #[test]
    fn geohash_prefix_property_holds() {
        let tokens = tokenize_geohash8("u4pruydq").unwrap();
        for pair in tokens.windows(2) {
            assert!(pair[1].starts_with(pair[0].as_str()));
        }
    }

    #[test]
    fn geohash_rejects_wrong_length_and_alphabet() {
        assert!(matches!(
            tokenize_geohash8("9v6kpm"),
            Err(DataError::InvalidGeohash { .. })
        ));
        // 'a' is not in the geohash alphabet.
        assert!(matches!(
            tokenize_geohash8("9v6kpmra"),
            Err(DataError::InvalidGeohash { .. })
        ));
        // Multi-byte characters must be rejected, not sliced mid-char.
        assert!(tokenize_geohash8("9v6kpmré").is_err());
    }

    #[test]
    fn shared_items_at_threshold_make_an_edge() {
        let users = vec![items(&[1, 2, 3, 9]), items(&[1, 2, 3, 50]), items(&[50])];
        let g = build_cooccurrence_graph(&users, 3).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn shared_items_below_threshold_make_no_edge() {
        let users = vec![items(&[1, 2]), items(&[1, 2, 3])];
        let g = build_cooccurrence_graph(&users, 3).unwrap();
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn single_user_graph_is_one_node_no_edges() {
        let g = build_cooccurrence_graph(&[items(&[1, 2, 3])], 3).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn empty_input_gives_empty_graph() {
        let g = build_cooccurrence_graph(&[], 1).unwrap();
        assert_eq!(g.num_nodes(), 0);
    }

    #[test]
    fn zero_threshold_is_rejected() {
        assert!(matches!(
            build_cooccurrence_graph(&[], 0),
            Err(DataError::InvalidThreshold)
        ));
    }

    #[test]
    fn raising_threshold_never_adds_edges() {
        // Deterministic pseudo-random item baskets.
        let users: Vec<BTreeSet<u64>> = (0..12u64)
            .map(|u| (0..10).map(|k| (u * 7 + k * 3) % 17).collect())
            .collect();
        let mut previous: Option<Vec<(u32, u32)>> = None;
        for tau in 1..6 {
            let g = build_cooccurrence_graph(&users, tau).unwrap();
            let edges = g.edges().to_vec();
            if let Some(prev) = previous {
                for e in &edges {
                    assert!(prev.contains(e), "edge {e:?} appeared when raising tau");
                }
            }
            previous = Some(edges);
        }
    }

    #[test]
    fn fraud_rule_matches_stated_thresholds() {
        let reviews = vec![
            vec![true, true, true, true, false],        // 5 reviews, 4 unhelpful: fraud
            vec![true, true, true, false, false],       // 5 reviews, 3 unhelpful: benign
            vec![true; 4],                              // only 4 reviews: unlabeled
        ];
        let labels = derive_fraud_labels(&reviews, 5, 0.7).unwrap();
        assert_eq!(
            labels,
            vec![FraudLabel::Fraud, FraudLabel::Benign, FraudLabel::Unlabeled]
        );
    }

    #[test]
    fn exactly_at_fraction_is_benign() {
        // 7 of 10 unhelpful is exactly 0.7, and the rule is strict.
        let mut reviews = vec![true; 7];
        reviews.extend([false; 3]);
        let labels = derive_fraud_labels(&[reviews], 5, 0.7).unwrap();
        assert_eq!(labels, vec![FraudLabel::Benign]);
    }

    #[test]
    fn rule_parameters_are_validated() {
        assert!(derive_fraud_labels(&[], 0, 0.7).is_err());
        assert!(derive_fraud_labels(&[], 5, 0.0).is_err());
        assert!(derive_fraud_labels(&[], 5, 1.0).is_err());
    }
}
