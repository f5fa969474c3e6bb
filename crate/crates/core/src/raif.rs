//! Stage 1: train the attribute encoder through the concept aligner and the
//! discrepancy-based response predictor, then freeze it and export a table.
//!
//! For a response `(s, e, r)` the predictor is
//! `r̂ = σ(q_eᵀ (h_s H_cᵀ − h_e H_cᵀ))`, where `H_c` stacks the live encodings of
//! every concept. Writing `u = Σ_k q_k H_c[k]` the logit is `u · (h_s − h_e)`,
//! which is what the batch gradient below differentiates.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeOptions, AttributeSet, Role};
use crate::corpus::{Corpus, Response, TransductiveSplit, DEFAULT_CAP};
use crate::encoder::{AttributeEncoder, EmbeddingTable, EncoderConfig, SegmentPass, TokenizedRecord};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nncore::ops::{bce_logit, dot, sigmoid};
use crate::nncore::{Adam, AdamConfig, Grads, ParamStore, Values};
use crate::rng::{self, stream};

/// `v_k = ⟨h, H_c[k]⟩`.
pub fn concept_align(h: &[f64], concepts: &[Vec<f64>]) -> Result<Vec<f64>> {
    concepts
        .iter()
        .map(|c| {
            if c.len() != h.len() {
                return Err(Error::Shape(format!(
                    "embedding has dimension {}, concept row has {}",
                    h.len(),
                    c.len()
                )));
            }
            Ok(dot(h, c))
        })
        .collect()
}

/// `σ(qᵀ (v_s − v_e))`.
pub fn drp_predict(v_s: &[f64], v_e: &[f64], q: &[f64]) -> f64 {
    let z: f64 = q.iter().zip(v_s.iter().zip(v_e)).map(|(qk, (s, e))| qk * (s - e)).sum();
    sigmoid(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub cap: usize,
    pub seed: u64,
    pub attributes: AttributeOptions,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            encoder: EncoderConfig::default(),
            epochs: 20,
            batch: 256,
            lr: 1e-3,
            cap: DEFAULT_CAP,
            seed: 0,
            attributes: AttributeOptions::default(),
        }
    }
}

/// Tokenized attribute texts plus the logs they are trained against.
#[derive(Debug, Clone)]
pub struct Stage1Data {
    pub students: Vec<TokenizedRecord>,
    pub exercises: Vec<TokenizedRecord>,
    pub concepts: Vec<TokenizedRecord>,
    responses: Vec<Response>,
    q_rows: Vec<Vec<usize>>,
}

impl Stage1Data {
    pub fn new(encoder: &AttributeEncoder, corpus: &Corpus, attributes: &AttributeSet) -> Self {
        let tok = |role| attributes.role(role).iter().map(|r| encoder.tokenize(r)).collect();
        Stage1Data {
            students: tok(Role::Student),
            exercises: tok(Role::Exercise),
            concepts: tok(Role::Concept),
            responses: corpus.responses().to_vec(),
            q_rows: (0..corpus.num_exercises()).map(|j| corpus.q_row(j).to_vec()).collect(),
        }
    }

    fn records(&self, role: Role) -> &[TokenizedRecord] {
        match role {
            Role::Student => &self.students,
            Role::Exercise => &self.exercises,
            Role::Concept => &self.concepts,
        }
    }
}

/// Segment passes shared across entities. Many students answer the same
/// exercise with the same verdict, so identical segments are run once per
/// batch and their gradients summed before a single backward pass.
struct SegmentCache<'a> {
    index: HashMap<(usize, &'a [usize]), usize>,
    keys: Vec<(Role, &'a [usize])>,
    passes: Vec<SegmentPass>,
    grads: Vec<Vec<f64>>,
}

impl<'a> SegmentCache<'a> {
    fn new() -> Self {
        SegmentCache {
            index: HashMap::new(),
            keys: Vec::new(),
            passes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn segment(&mut self, enc: &AttributeEncoder, values: &Values, role: Role, tokens: &'a [usize]) -> usize {
        if let Some(&i) = self.index.get(&(role.index(), tokens)) {
            return i;
        }
        let i = self.passes.len();
        self.index.insert((role.index(), tokens), i);
        self.keys.push((role, tokens));
        self.passes.push(enc.forward_segment(values, tokens, role));
        self.grads.push(vec![0.0; enc.dim()]);
        i
    }

    /// Returns the segment ids of `rec` and its mean-pooled encoding.
    fn entity(&mut self, enc: &AttributeEncoder, values: &Values, rec: &'a TokenizedRecord) -> EntityPass {
        let segments: Vec<usize> = if rec.segments.is_empty() {
            vec![self.segment(enc, values, rec.role, &[])]
        } else {
            rec.segments.iter().map(|s| self.segment(enc, values, rec.role, s)).collect()
        };
        let mut h = vec![0.0; enc.dim()];
        for &s in &segments {
            for (a, b) in h.iter_mut().zip(&self.passes[s].h) {
                *a += b;
            }
        }
        let inv = 1.0 / segments.len() as f64;
        h.iter_mut().for_each(|v| *v *= inv);
        EntityPass { segments, h }
    }

    fn accumulate(&mut self, pass: &EntityPass, dh: &[f64]) {
        let inv = 1.0 / pass.segments.len() as f64;
        for &s in &pass.segments {
            for (g, d) in self.grads[s].iter_mut().zip(dh) {
                *g += d * inv;
            }
        }
    }

    fn backward(&self, enc: &AttributeEncoder, values: &Values, grads: &mut Grads) {
        for (i, (role, tokens)) in self.keys.iter().enumerate() {
            if self.grads[i].iter().any(|&g| g != 0.0) {
                enc.backward_segment(values, grads, tokens, *role, &self.passes[i], &self.grads[i]);
            }
        }
    }
}

struct EntityPass {
    segments: Vec<usize>,
    h: Vec<f64>,
}

/// Mean BCE of the predictor over `batch` (indices into the data's responses).
/// When `backward` is set, gradients are accumulated into `store`.
///
/// `enc` supplies the parameter layout; the values are read from `store`, so
/// the encoder's own store may be moved out for gradient checking.
pub fn stage1_loss(enc: &AttributeEncoder, store: &mut ParamStore, data: &Stage1Data, batch: &[usize], backward: bool) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("stage-1 batch is empty".into()));
    }
    let (values, grads) = store.split_mut();
    let mut cache = SegmentCache::new();
    let concepts: Vec<EntityPass> = data.concepts.iter().map(|r| cache.entity(enc, values, r)).collect();
    let mut students: BTreeMap<usize, (EntityPass, Vec<f64>)> = BTreeMap::new();
    let mut exercises: BTreeMap<usize, (EntityPass, Vec<f64>)> = BTreeMap::new();
    let d = enc.dim();
    for &b in batch {
        let r = data.responses[b];
        students
            .entry(r.student)
            .or_insert_with(|| (cache.entity(enc, values, &data.students[r.student]), vec![0.0; d]));
        exercises
            .entry(r.exercise)
            .or_insert_with(|| (cache.entity(enc, values, &data.exercises[r.exercise]), vec![0.0; d]));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut dconcepts = vec![vec![0.0; d]; concepts.len()];
    let mut loss = 0.0;
    for &b in batch {
        let r = data.responses[b];
        let hs = &students[&r.student].0.h;
        let he = &exercises[&r.exercise].0.h;
        let diff: Vec<f64> = hs.iter().zip(he).map(|(a, b)| a - b).collect();
        let mut u = vec![0.0; d];
        for &k in &data.q_rows[r.exercise] {
            for (ui, ci) in u.iter_mut().zip(&concepts[k].h) {
                *ui += ci;
            }
        }
        let (_, l, dz) = bce_logit(dot(&u, &diff), r.score as f64, weight);
        loss += l;
        if backward && dz != 0.0 {
            for (g, ui) in students.get_mut(&r.student).unwrap().1.iter_mut().zip(&u) {
                *g += dz * ui;
            }
            for (g, ui) in exercises.get_mut(&r.exercise).unwrap().1.iter_mut().zip(&u) {
                *g -= dz * ui;
            }
            for &k in &data.q_rows[r.exercise] {
                for (g, di) in dconcepts[k].iter_mut().zip(&diff) {
                    *g += dz * di;
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("stage-1 loss is {loss} on a batch of {}", batch.len())));
    }
    if backward {
        for (pass, dh) in students.values().chain(exercises.values()) {
            cache.accumulate(pass, dh);
        }
        for (pass, dh) in concepts.iter().zip(&dconcepts) {
            cache.accumulate(pass, dh);
        }
        cache.backward(enc, values, grads);
    }
    Ok(loss)
}

/// Encodes every entity of `data` under the parameters in `values`.
fn encode_all(enc: &AttributeEncoder, values: &Values, data: &Stage1Data) -> EmbeddingTable {
    let mut cache = SegmentCache::new();
    let mut enc_role = |role| data.records(role).iter().map(|r| cache.entity(enc, values, r).h).collect();
    EmbeddingTable {
        dim: enc.dim(),
        provenance: crate::encoder::Provenance::BuiltIn,
        students: enc_role(Role::Student),
        exercises: enc_role(Role::Exercise),
        concepts: enc_role(Role::Concept),
    }
}

/// Predictor output for each response index, read from an encoded table.
pub fn predict_table(table: &EmbeddingTable, corpus: &Corpus, indices: &[usize]) -> Vec<f64> {
    indices
        .iter()
        .map(|&idx| {
            let r = corpus.responses()[idx];
            let hs = &table.students[r.student];
            let he = &table.exercises[r.exercise];
            let z: f64 = corpus
                .q_row(r.exercise)
                .iter()
                .map(|&k| {
                    let c = &table.concepts[k];
                    dot(hs, c) - dot(he, c)
                })
                .sum();
            sigmoid(z)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: Option<f64>,
    pub valid_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    pub seed: u64,
    pub config: Stage1Config,
    /// Mean training loss under the initial parameters.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 means the initial parameters were kept.
    pub best_epoch: usize,
    pub best_valid_auc: Option<f64>,
    pub best_valid_acc: Option<f64>,
    pub final_valid_auc: Option<f64>,
    pub warnings: Vec<String>,
}

pub struct Stage1Output {
    pub encoder: AttributeEncoder,
    /// Attribute texts the table was encoded from (training responses only).
    pub attributes: AttributeSet,
    pub table: EmbeddingTable,
    pub report: Stage1Report,
}

fn score(table: &EmbeddingTable, corpus: &Corpus, valid: &[usize]) -> (Option<f64>, Option<f64>) {
    if valid.is_empty() {
        return (None, None);
    }
    let preds = predict_table(table, corpus, valid);
    let labels: Vec<u8> = valid.iter().map(|&i| corpus.responses()[i].score).collect();
    (
        metrics::auc(&preds, &labels).ok(),
        metrics::acc(&preds, &labels, metrics::DEFAULT_THRESHOLD).ok(),
    )
}

/// Trains the encoder on `split.train`, selects the epoch with the best
/// validation AUC, and encodes every entity with the frozen result.
///
/// Attribute texts (exercise correct rates and student histories) are built
/// from the training responses only.
pub fn train_stage1(corpus: &Corpus, split: &TransductiveSplit, cfg: &Stage1Config) -> Result<Stage1Output> {
    if split.train.is_empty() {
        return Err(Error::Invalid("stage 1 needs training responses".into()));
    }
    let source = corpus.with_responses(&split.train);
    let attributes = AttributeSet::build(&source, cfg.cap, cfg.seed, cfg.attributes);
    let mut encoder = AttributeEncoder::new(cfg.encoder, cfg.seed)?;
    let data = Stage1Data::new(&encoder, &source, &attributes);
    let mut store = std::mem::take(&mut encoder.store);
    let mut adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let mut rng = rng::seeded(cfg.seed, stream::STAGE1_SHUFFLE);
    let batch = cfg.batch.max(1);
    let all: Vec<usize> = (0..data.responses.len()).collect();

    let mean_loss = |store: &mut ParamStore| -> Result<f64> {
        let mut total = 0.0;
        for chunk in all.chunks(batch) {
            total += stage1_loss(&encoder, store, &data, chunk, false)? * chunk.len() as f64;
        }
        Ok(total / all.len() as f64)
    };
    let initial_loss = mean_loss(&mut store)?;
    let (mut best_auc, best_acc0) = score(&encode_all(&encoder, store.values(), &data), corpus, &split.valid);
    let mut best_acc = best_acc0;
    let mut best_epoch = 0;
    let mut best = store.snapshot();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order = all.clone();
    let mut last_auc = best_auc;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let l = stage1_loss(&encoder, &mut store, &data, chunk, true)?;
            total += l * chunk.len() as f64;
            adam.step(&mut store)?;
        }
        let (auc, acc) = score(&encode_all(&encoder, store.values(), &data), corpus, &split.valid);
        last_auc = auc;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            valid_auc: auc,
            valid_acc: acc,
        });
        if auc.is_some() && (best_auc.is_none() || auc > best_auc) {
            best_auc = auc;
            best_acc = acc;
            best_epoch = epoch;
            best = store.snapshot();
        }
    }
    // Without a usable validation signal keep the final parameters.
    if best_auc.is_none() {
        best = store.snapshot();
        best_epoch = cfg.epochs;
    }
    store.restore(&best);
    encoder.store = store;
    let mut warnings = Vec::new();
    if best_auc.is_none_or(|a| a <= 0.5) {
        warnings.push("validation AUC never exceeded 0.5".to_string());
    }
    let table = encoder.encode_set(&attributes);
    Ok(Stage1Output {
        report: Stage1Report {
            seed: cfg.seed,
            config: cfg.clone(),
            initial_loss,
            epochs,
            best_epoch,
            best_valid_auc: best_auc,
            best_valid_acc: best_acc,
            final_valid_auc: last_auc,
            warnings,
        },
        encoder,
        attributes,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::corpus;
    use crate::nncore::grad_check;

    #[test]
    fn aligner_examples() {
        assert_eq!(concept_align(&[1.0, 2.0], &[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap(), vec![3.0, 8.0]);
        assert_eq!(concept_align(&[0.0, 0.0], &[vec![3.0, 1.0]]).unwrap(), vec![0.0]);
        let h = [0.3, -1.2, 2.0];
        let eye: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| (i == j) as u8 as f64).collect()).collect();
        assert_eq!(concept_align(&h, &eye).unwrap(), h.to_vec());
        assert!(concept_align(&[1.0], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn predictor_examples() {
        let v = [0.7, -3.0, 11.0];
        assert_eq!(drp_predict(&v, &v, &[1.0, 1.0, 0.0]), 0.5);
        assert!((drp_predict(&[2.0, 5.0], &[0.0, 0.0], &[1.0, 0.0]) - 0.880797).abs() < 1e-6);
        let (a, b, q) = ([0.4, 1.1], [-0.2, 0.3], [1.0, 1.0]);
        assert!((drp_predict(&a, &b, &q) + drp_predict(&b, &a, &q) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn predictor_monotone_and_masked() {
        let mut r = rng::seeded(5, stream::GRAD_CHECK);
        for _ in 0..200 {
            let vs = rng::normal_vec(&mut r, 4, 1.0);
            let ve = rng::normal_vec(&mut r, 4, 1.0);
            let q = [1.0, 0.0, 1.0, 0.0];
            let base = drp_predict(&vs, &ve, &q);
            for k in 0..4 {
                let mut up = vs.clone();
                up[k] += 0.5;
                let p = drp_predict(&up, &ve, &q);
                if q[k] == 1.0 {
                    assert!(p >= base);
                } else {
                    assert_eq!(p, base);
                }
            }
        }
    }

    fn small() -> (Corpus, AttributeEncoder, Stage1Data) {
        let c = corpus(
            3,
            vec![vec![0], vec![1], vec![0, 1]],
            &["Algebra", "Geometry"],
            &[(0, 0, 1), (0, 1, 0), (1, 2, 1), (2, 0, 0), (2, 2, 1), (1, 1, 1)],
        );
        let cfg = EncoderConfig {
            vocab_size: 1 << 12,
            d_lm: 6,
            dim: 5,
        };
        let enc = AttributeEncoder::new(cfg, 3).unwrap();
        let attrs = AttributeSet::build(&c, 50, 0, AttributeOptions::default());
        let data = Stage1Data::new(&enc, &c, &attrs);
        (c, enc, data)
    }

    #[test]
    fn stage1_loss_gradient_matches_finite_differences() {
        let (_, mut enc, data) = small();
        let mut store = std::mem::take(&mut enc.store);
        // non-zero role vectors so their gradient path is exercised away from init
        let roles = enc.role_param();
        for (i, v) in store.value_mut(roles).iter_mut().enumerate() {
            *v = 0.05 * ((i % 7) as f64 - 3.0);
        }
        let batch: Vec<usize> = (0..6).collect();
        let report = grad_check(
            &mut store,
            |s| stage1_loss(&enc, s, &data, &batch, true).unwrap(),
            1e-5,
            40,
            1,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn uniform_prediction_gives_ln2() {
        let (_, mut enc, data) = small();
        let mut store = std::mem::take(&mut enc.store);
        // zero projection makes every encoding zero, hence every prediction 0.5
        for id in store.ids().collect::<Vec<_>>() {
            if store.meta(id).name.starts_with("encoder.proj") {
                store.value_mut(id).fill(0.0);
            }
        }
        let l = stage1_loss(&enc, &mut store, &data, &[0, 1, 2, 3], false).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_reencodes_exactly() {
        let (c, _, _) = small();
        let split = TransductiveSplit {
            train: vec![0, 1, 2, 3],
            valid: vec![4, 5],
            test: vec![],
        };
        let cfg = Stage1Config {
            encoder: EncoderConfig {
                vocab_size: 1 << 12,
                d_lm: 8,
                dim: 4,
            },
            epochs: 3,
            batch: 2,
            lr: 1e-2,
            ..Stage1Config::default()
        };
        let a = train_stage1(&c, &split, &cfg).unwrap();
        let b = train_stage1(&c, &split, &cfg).unwrap();
        assert_eq!(a.table, b.table);
        assert_eq!(a.encoder.store.checksum(), b.encoder.store.checksum());
        for rec in &a.attributes.exercises {
            let again = a.encoder.encode(rec).h;
            for (x, y) in again.iter().zip(&a.table.exercises[rec.entity]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
