//! Accuracy, rank-based AUC, Degree of Agreement, and Spearman correlation.

use crate::cdmodels::MasteryMatrix;
use crate::corpus::{to_score_matrix, Corpus};
use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Fraction of predictions on the right side of `threshold`; a prediction equal
/// to the threshold counts as positive.
pub fn acc(preds: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "acc needs equal non-empty inputs, got {} preds and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| (p >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mann–Whitney AUC: P(pred_pos > pred_neg) with ties counted as one half.
/// Sorts once and assigns average ranks to tied groups.
pub fn auc(preds: &[f64], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Invalid("auc inputs differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined("AUC undefined: need both positive and negative labels"));
    }
    let ranks = average_ranks(preds);
    let pos_rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((pos_rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && xs[order[j]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = avg;
        }
        i = j;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&average_ranks(a), &average_ranks(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptDoa {
    pub value: f64,
    /// Ordered student pairs that contributed.
    pub pairs: u64,
}

fn bitset(len: usize) -> Vec<u64> {
    vec![0; len.div_ceil(64)]
}

fn and_count(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

/// Per-concept Degree of Agreement over the responses in `responses`.
///
/// For concept k, every ordered student pair (a, b) with `Mas[a,k] > Mas[b,k]`
/// contributes the share of k-exercises answered by both with differing
/// outcomes on which a was right and b wrong. Pairs with no such exercise are
/// skipped; `None` marks concepts with no surviving pair.
pub fn doa_per_concept(mastery: &MasteryMatrix, corpus: &Corpus, responses: &[usize]) -> Result<Vec<Option<ConceptDoa>>> {
    let (m, k_count) = (corpus.num_students(), corpus.num_concepts());
    if mastery.rows() != m || mastery.cols() != k_count {
        return Err(Error::Shape(format!(
            "mastery is {}x{}, corpus has {m} students and {k_count} concepts",
            mastery.rows(),
            mastery.cols()
        )));
    }
    let scores = to_score_matrix(&corpus.with_responses(responses));
    let mut exercises_of: Vec<Vec<usize>> = vec![Vec::new(); k_count];
    for j in 0..corpus.num_exercises() {
        for &k in corpus.q_row(j) {
            exercises_of[k].push(j);
        }
    }
    let mut out = Vec::with_capacity(k_count);
    for (k, exercises) in exercises_of.iter().enumerate() {
        let mut slot = vec![usize::MAX; corpus.num_exercises()];
        for (pos, &j) in exercises.iter().enumerate() {
            slot[j] = pos;
        }
        // correct / wrong bitsets per student over this concept's exercises
        let mut students = Vec::new();
        for i in 0..m {
            let mut right = bitset(exercises.len());
            let mut wrong = bitset(exercises.len());
            let mut any = false;
            for &(j, r) in scores.row(i) {
                let p = slot[j];
                if p == usize::MAX {
                    continue;
                }
                any = true;
                let target = if r == 1 { &mut right } else { &mut wrong };
                target[p / 64] |= 1 << (p % 64);
            }
            if any {
                students.push((i, right, wrong));
            }
        }
        let (mut sum, mut pairs) = (0.0, 0u64);
        for (a, ra, wa) in &students {
            for (b, rb, wb) in &students {
                if mastery.get(*a, k) <= mastery.get(*b, k) {
                    continue;
                }
                let num = and_count(ra, wb);
                let den = num + and_count(wa, rb);
                if den > 0 {
                    sum += num as f64 / den as f64;
                    pairs += 1;
                }
            }
        }
        out.push((pairs > 0).then(|| ConceptDoa {
            value: sum / pairs as f64,
            pairs,
        }));
    }
    Ok(out)
}

/// Unweighted mean of per-concept DOA over concepts with at least one valid pair.
pub fn doa(mastery: &MasteryMatrix, corpus: &Corpus, responses: &[usize]) -> Result<f64> {
    let per = doa_per_concept(mastery, corpus, responses)?;
    let valid: Vec<f64> = per.iter().flatten().map(|c| c.value).collect();
    if valid.is_empty() {
        return Err(Error::Undefined("DOA undefined: no concept has a valid student pair"));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::corpus;
    use proptest::prelude::*;

    #[test]
    fn acc_examples() {
        assert_eq!(acc(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(acc(&[0.5], &[1], 0.5).unwrap(), 1.0);
        assert!((acc(&[0.4, 0.6, 0.7], &[1, 1, 0], 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(acc(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[0, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &[1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        let err = auc(&[0.1, 0.2], &[1, 1]).unwrap_err().to_string();
        assert!(err.contains("AUC undefined"));
    }

    fn pair_oracle(preds: &[f64], labels: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    den += 1.0;
                    num += if preds[i] > preds[j] {
                        1.0
                    } else if preds[i] == preds[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_and_is_rank_invariant(
            raw in prop::collection::vec((0u8..6, any::<bool>()), 2..120)
        ) {
            let preds: Vec<f64> = raw.iter().map(|(p, _)| *p as f64 / 5.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let fast = auc(&preds, &labels).unwrap();
            prop_assert!((fast - pair_oracle(&preds, &labels)).abs() < 1e-12);
            let warped: Vec<f64> = preds.iter().map(|p| (3.0 * p).exp() - 7.0).collect();
            prop_assert!((auc(&warped, &labels).unwrap() - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn doa_two_student_cases() {
        let c = corpus(2, vec![vec![0], vec![0]], &["A"], &[(0, 0, 1), (0, 1, 1), (1, 0, 0), (1, 1, 0)]);
        let all = [0, 1, 2, 3];
        let m = MasteryMatrix::from_rows(vec![vec![0.9], vec![0.2]]);
        assert_eq!(doa(&m, &c, &all).unwrap(), 1.0);
        let m = MasteryMatrix::from_rows(vec![vec![0.2], vec![0.9]]);
        assert_eq!(doa(&m, &c, &all).unwrap(), 0.0);
        let m = MasteryMatrix::from_rows(vec![vec![0.5], vec![0.5]]);
        assert!(doa_per_concept(&m, &c, &all).unwrap()[0].is_none());
        assert!(doa(&m, &c, &all).unwrap_err().to_string().contains("DOA undefined"));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(average_ranks(&[0.5, 0.1, 0.5]), vec![2.5, 1.0, 2.5]);
    }
}
