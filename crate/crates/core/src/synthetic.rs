//! Planted multidimensional-IRT corpora with known ground truth.
//!
//! Student `i` has ability `θ_ik = g_i + s_ik` on concept `k` (a general factor
//! plus a concept-specific one). Exercise `j` tests one or two concepts with
//! positive discriminations `a_jk` and difficulty `b_j`; a response is correct
//! with probability `σ(Σ_k a_jk θ_ik − b_j)`.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Response};
use crate::error::Result;
use crate::nncore::ops::sigmoid;
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub students: usize,
    pub exercises: usize,
    pub concepts: usize,
    /// Distinct exercises answered by each student.
    pub per_student: usize,
    /// Prepended to every identifier, keeping domains apart.
    pub id_prefix: String,
    pub concept_names: Vec<String>,
    pub specific_std: f64,
    pub seed: u64,
}

pub const DOMAIN_A: [&str; 8] = [
    "fractions",
    "decimals",
    "algebra",
    "geometry",
    "probability",
    "statistics",
    "ratios",
    "equations",
];

pub const DOMAIN_B: [&str; 8] = [
    "grammar",
    "vocabulary",
    "poetry",
    "rhetoric",
    "syntax",
    "phonics",
    "reading",
    "writing",
];

fn names(base: &[&str], k: usize) -> Vec<String> {
    (0..k)
        .map(|i| {
            let n = base[i % base.len()];
            if i < base.len() {
                n.to_string()
            } else {
                format!("{n} {}", i / base.len() + 1)
            }
        })
        .collect()
}

impl PlantedSpec {
    /// 100 students, 50 exercises, 8 concepts, 40 answers each.
    pub fn standard(seed: u64) -> Self {
        PlantedSpec {
            students: 100,
            exercises: 50,
            concepts: 8,
            per_student: 40,
            id_prefix: String::new(),
            concept_names: names(&DOMAIN_A, 8),
            specific_std: 1.0,
            seed,
        }
    }

    /// Same generative process, disjoint identifiers and concept vocabulary.
    pub fn second_domain(seed: u64) -> Self {
        PlantedSpec {
            id_prefix: "b-".into(),
            concept_names: names(&DOMAIN_B, 8),
            ..PlantedSpec::standard(seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Planted {
    pub corpus: Corpus,
    pub truth: PlantedTruth,
}

/// Generating parameters, serializable so that a simulator can answer
/// questions that were never logged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    /// `M × K` abilities.
    pub theta: Vec<Vec<f64>>,
    /// `N × K` discriminations, zero off the Q-matrix.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl PlantedTruth {
    pub fn prob(&self, i: usize, j: usize) -> f64 {
        let z: f64 = self.a[j].iter().zip(&self.theta[i]).map(|(a, t)| a * t).sum();
        sigmoid(z - self.b[j])
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        (0..self.theta.len())
            .map(|i| (0..self.b.len()).map(|j| self.prob(i, j)).collect())
            .collect()
    }

    pub fn mastery_column(&self, k: usize) -> Vec<f64> {
        self.theta.iter().map(|t| t[k]).collect()
    }
}

pub fn generate(spec: &PlantedSpec) -> Result<Planted> {
    let mut r = rng::seeded(spec.seed, stream::SYNTHETIC);
    let (m, n, k) = (spec.students, spec.exercises, spec.concepts);
    let theta: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let g = rng::normal(&mut r, 1.0);
            (0..k).map(|_| g + rng::normal(&mut r, spec.specific_std)).collect()
        })
        .collect();
    let mut q_rows = Vec::with_capacity(n);
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for j in 0..n {
        // every concept is the primary concept of some exercise
        let primary = j % k;
        let mut q = vec![primary];
        if k > 1 && r.random::<f64>() < 0.4 {
            let mut other = r.random_range(0..k - 1);
            if other >= primary {
                other += 1;
            }
            q.push(other);
        }
        q.sort_unstable();
        let mut row = vec![0.0; k];
        for &c in &q {
            row[c] = r.random_range(0.7..1.5);
        }
        q_rows.push(q);
        a.push(row);
        b.push(rng::normal(&mut r, 0.8));
    }
    let exercises: Vec<usize> = (0..n).collect();
    let mut responses = Vec::with_capacity(m * spec.per_student.min(n));
    for (i, th) in theta.iter().enumerate() {
        let mut chosen: Vec<usize> = exercises.choose_multiple(&mut r, spec.per_student.min(n)).copied().collect();
        chosen.shuffle(&mut r);
        for j in chosen {
            let z: f64 = a[j].iter().zip(th).map(|(x, t)| x * t).sum();
            let score = (r.random::<f64>() < sigmoid(z - b[j])) as u8;
            responses.push(Response {
                student: i,
                exercise: j,
                score,
            });
        }
    }
    let p = &spec.id_prefix;
    let corpus = Corpus::new(
        (0..m).map(|i| format!("{p}s{i}")).collect(),
        (0..n).map(|j| format!("{p}e{j}")).collect(),
        (0..k).map(|c| format!("{p}c{c}")).collect(),
        spec.concept_names.clone(),
        q_rows,
        responses,
    )?;
    Ok(Planted {
        corpus,
        truth: PlantedTruth { theta, a, b },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_shape_and_determinism() {
        let p = generate(&PlantedSpec::standard(3)).unwrap();
        assert_eq!(p.corpus.num_students(), 100);
        assert_eq!(p.corpus.num_exercises(), 50);
        assert_eq!(p.corpus.num_concepts(), 8);
        assert_eq!(p.corpus.responses().len(), 4000);
        let again = generate(&PlantedSpec::standard(3)).unwrap();
        assert_eq!(p.corpus.responses(), again.corpus.responses());
        assert_eq!(p.truth, again.truth);
        // discriminations sit exactly on the Q-matrix
        for j in 0..50 {
            for k in 0..8 {
                assert_eq!(p.truth.a[j][k] > 0.0, p.corpus.q(j, k));
            }
        }
        let rate = p.corpus.responses().iter().map(|r| r.score as f64).sum::<f64>() / 4000.0;
        assert!((0.3..0.7).contains(&rate), "{rate}");
    }

    #[test]
    fn domains_are_disjoint() {
        let a = generate(&PlantedSpec::standard(1)).unwrap().corpus;
        let b = generate(&PlantedSpec::second_domain(1)).unwrap().corpus;
        assert!(a.exercise_ids().iter().all(|id| !b.exercise_ids().contains(id)));
        assert!((0..8).all(|k| a.concept_name(k) != b.concept_name(k)));
    }
}
