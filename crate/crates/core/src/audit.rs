//! Class-overlap audit between dataset label vocabularies: label
//! normalization, exact matching, and an embedding-similarity concept
//! threshold (per-dataset 90th percentile, median across datasets).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, strips underscores and apostrophes, and keeps only the
/// last (finest) name of a comma-separated synonym list.
pub fn normalize_label(raw: &str) -> String {
    let finest = raw.rsplit(',').next().unwrap_or(raw).trim();
    finest
        .to_lowercase()
        .chars()
        .filter(|&c| c != '_' && c != '\'')
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelVocab {
    pub source: String,
    pub labels: Vec<String>,
    pub normalized: Vec<String>,
}

impl LabelVocab {
    pub fn new(source: &str, labels: Vec<String>) -> Self {
        let normalized = labels.iter().map(|l| normalize_label(l)).collect();
        Self {
            source: source.into(),
            labels,
            normalized,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub label_a: String,
    pub label_b: String,
    pub normalized: String,
}

/// Pairs whose normalized forms are equal; each label on either side
/// is matched at most once, scanning in vocabulary order.
pub fn exact_overlap(a: &LabelVocab, b: &LabelVocab) -> Vec<MatchedPair> {
    let mut used_b = vec![false; b.labels.len()];
    let mut out = Vec::new();
    for (i, norm) in a.normalized.iter().enumerate() {
        if let Some(j) = b
            .normalized
            .iter()
            .enumerate()
            .position(|(j, n)| !used_b[j] && n == norm)
        {
            used_b[j] = true;
            out.push(MatchedPair {
                label_a: a.labels[i].clone(),
                label_b: b.labels[j].clone(),
                normalized: norm.clone(),
            });
        }
    }
    out
}

/// Nearest-rank percentile: smallest value with at least p fraction of
/// the data at or below it.
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Global concept threshold: per-dataset 90th percentile of max-cosine
/// scores (nearest rank), then the median across datasets.
pub fn concept_threshold(similarity_sets: &[Vec<f64>]) -> Result<f64> {
    if similarity_sets.is_empty() || similarity_sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Invalid(
            "concept_threshold needs nonempty similarity sets".into(),
        ));
    }
    let mut p90s: Vec<f64> = similarity_sets
        .iter()
        .map(|set| {
            let mut s = set.clone();
            s.sort_by(|x, y| x.partial_cmp(y).expect("finite similarity"));
            nearest_rank(&s, 0.90)
        })
        .collect();
    p90s.sort_by(|x, y| x.partial_cmp(y).expect("finite percentile"));
    let n = p90s.len();
    Ok(if n % 2 == 1 {
        p90s[n / 2]
    } else {
        (p90s[n / 2 - 1] + p90s[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetOverlap {
    pub source: String,
    pub exact_matches: usize,
    pub concept_matches: usize,
    pub p90: f64,
    pub pairs: Vec<MatchedPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverlapReport {
    pub reference: String,
    pub global_threshold: f64,
    pub per_dataset: Vec<DatasetOverlap>,
}

/// Audits each vocabulary against a reference vocabulary. For every
/// non-exactly-matched label the caller supplies its max cosine
/// similarity against the reference; scores at or above the global
/// threshold count as concept matches.
pub fn audit_overlap(
    reference: &LabelVocab,
    vocabs: &[(LabelVocab, Vec<f64>)],
) -> Result<OverlapReport> {
    for (v, scores) in vocabs {
        if scores.iter().any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::Invalid(format!(
                "similarity outside [-1,1] for {}",
                v.source
            )));
        }
    }
    let sets: Vec<Vec<f64>> = vocabs.iter().map(|(_, s)| s.clone()).collect();
    let threshold = concept_threshold(&sets)?;
    let mut per_dataset = Vec::new();
    for (vocab, scores) in vocabs {
        let pairs = exact_overlap(vocab, reference);
        let matched: BTreeSet<&str> = pairs.iter().map(|p| p.label_a.as_str()).collect();
        if scores.len() != vocab.labels.len() - matched.len() {
            return Err(Error::Invalid(format!(
                "{}: expected {} similarity scores for unmatched labels, got {}",
                vocab.source,
                vocab.labels.len() - matched.len(),
                scores.len()
            )));
        }
        let concept_matches = scores.iter().filter(|&&s| s >= threshold).count();
        per_dataset.push(DatasetOverlap {
            source: vocab.source.clone(),
            exact_matches: pairs.len(),
            concept_matches,
            p90: {
                let mut s = scores.clone();
                s.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
                nearest_rank(&s, 0.90)
            },
            pairs,
        });
    }
    Ok(OverlapReport {
        reference: reference.source.clone(),
        global_threshold: threshold,
        per_dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_label("Tiger_Shark"), "tigershark");
        assert_eq!(normalize_label("great white, carcharodon"), "carcharodon");
        assert_eq!(normalize_label("ok"), "ok");
        assert_eq!(normalize_label(""), "");
        assert_eq!(normalize_label("cat's_paw"), "catspaw");
    }

    #[test]
    fn normalize_idempotent() {
        for raw in ["Tiger_Shark", "a, b, C's", "Weird_'Mix', last_one"] {
            let once = normalize_label(raw);
            assert_eq!(normalize_label(&once), once);
        }
    }

    #[test]
    fn exact_overlap_examples() {
        let a = LabelVocab::new("a", vec!["Dog".into(), "cat".into()]);
        let b = LabelVocab::new("b", vec!["dog".into(), "bird".into()]);
        let pairs = exact_overlap(&a, &b);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].normalized, "dog");

        let disjoint = LabelVocab::new("c", vec!["fish".into()]);
        assert!(exact_overlap(&a, &disjoint).is_empty());
    }

    #[test]
    fn exact_overlap_at_most_once() {
        let a = LabelVocab::new("a", vec!["dog".into(), "Dog".into()]);
        let b = LabelVocab::new("b", vec!["DOG".into()]);
        assert_eq!(exact_overlap(&a, &b).len(), 1);
        // symmetric counts
        assert_eq!(exact_overlap(&b, &a).len(), 1);
    }

    #[test]
    fn exact_overlap_symmetric_counts() {
        let a = LabelVocab::new("a", vec!["x".into(), "y".into(), "z".into()]);
        let b = LabelVocab::new("b", vec!["y".into(), "z".into(), "w".into()]);
        assert_eq!(exact_overlap(&a, &b).len(), exact_overlap(&b, &a).len());
    }

    #[test]
    fn threshold_examples() {
        // three datasets engineered so their p90s are 0.80, 0.83, 0.86
        let sets = vec![vec![0.80; 5], vec![0.83; 5], vec![0.86; 5]];
        assert_eq!(concept_threshold(&sets).unwrap(), 0.83);
        assert_eq!(concept_threshold(&[vec![0.1, 0.9]]).unwrap(), 0.9);
        assert_eq!(concept_threshold(&[vec![0.5; 7], vec![0.5; 3]]).unwrap(), 0.5);
        assert!(concept_threshold(&[]).is_err());
        assert!(concept_threshold(&[vec![]]).is_err());
    }

    #[test]
    fn threshold_order_invariant() {
        let a = vec![vec![0.1, 0.4, 0.9], vec![0.7, 0.2], vec![0.83, 0.80]];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(
            concept_threshold(&a).unwrap(),
            concept_threshold(&b).unwrap()
        );
    }

    #[test]
    fn nearest_rank_p90() {
        let sorted: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(nearest_rank(&sorted, 0.90), 0.9);
        assert_eq!(nearest_rank(&[0.3], 0.90), 0.3);
    }

    #[test]
    fn audit_report_counts() {
        let reference = LabelVocab::new("imagenet", vec!["dog".into(), "cat".into()]);
        let v1 = LabelVocab::new("birds", vec!["Dog".into(), "robin".into(), "crow".into()]);
        // two unmatched labels -> two scores
        let report = audit_overlap(&reference, &[(v1, vec![0.9, 0.2])]).unwrap();
        assert_eq!(report.per_dataset[0].exact_matches, 1);
        // threshold = p90 of the single set = 0.9; one score >= 0.9
        assert_eq!(report.global_threshold, 0.9);
        assert_eq!(report.per_dataset[0].concept_matches, 1);
        assert!(report.global_threshold.abs() <= 1.0);
    }

    #[test]
    fn audit_rejects_bad_scores() {
        let reference = LabelVocab::new("r", vec!["a".into()]);
        let v = LabelVocab::new("v", vec!["b".into()]);
        assert!(audit_overlap(&reference, &[(v.clone(), vec![1.5])]).is_err());
        assert!(audit_overlap(&reference, &[(v, vec![0.1, 0.2])]).is_err());
    }
}
