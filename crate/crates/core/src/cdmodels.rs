//! Stage-2 diagnosis models over fused embeddings and the scenario protocols
//! that train and score them.
//!
//! A [`FusedCDModel`] owns, per role, an optional adapter over the frozen
//! textual table and an optional ID table; the role embedding is their
//! λ-fusion (or whichever part exists). Two interaction heads sit on top:
//! a MIRT-style dot product and an NCDM-style monotone network.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aari::{align_loss_grad, fuse, Activation, Adapter, AdapterPass, FusionConfig};
use crate::attributes::{student_attribute_from, AttributeRecord, AttributeSet, Role};
use crate::corpus::{capped_indices, split_indices, Corpus, DomainSpec, InductiveSplit, TransductiveSplit};
use crate::encoder::{AttributeEncoder, EmbeddingTable};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nncore::ops::{bce_logit, dot, sigmoid};
use crate::nncore::{load_checkpoint, save_checkpoint, Adam, AdamConfig, Grads, ParamId, ParamStore, Values};
use crate::raif::{train_stage1, EpochRecord, Stage1Config, Stage1Output, Stage1Report};
use crate::rng::{self, stream, Rng};

/// Per-student, per-concept mastery in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MasteryMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MasteryMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged mastery rows");
        MasteryMatrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Mirt,
    MonotoneMlp,
}

/// Which embedding sources a role has.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpec {
    pub text: bool,
    pub id: bool,
}

const FUSED: RoleSpec = RoleSpec { text: true, id: true };
const TEXT: RoleSpec = RoleSpec { text: true, id: false };
const ID: RoleSpec = RoleSpec { text: false, id: true };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub head: Head,
    /// Indexed by [`Role::index`].
    pub roles: [RoleSpec; 3],
    /// Per-exercise scalar difficulty for the MIRT head (an ID-style parameter).
    pub difficulty: bool,
    pub fusion: FusionConfig,
    pub mlp_hidden: usize,
}

impl ModelSpec {
    fn with_roles(head: Head, roles: [RoleSpec; 3], difficulty: bool, fusion: FusionConfig) -> Self {
        ModelSpec {
            head,
            roles,
            difficulty: difficulty && head == Head::Mirt,
            fusion,
            mlp_hidden: 32,
        }
    }

    /// Every role fused from text and IDs.
    pub fn transductive(head: Head, fusion: FusionConfig) -> Self {
        Self::with_roles(head, [FUSED; 3], true, fusion)
    }

    /// Every role from IDs only; no adapters exist.
    pub fn id_only(head: Head, fusion: FusionConfig) -> Self {
        Self::with_roles(head, [ID; 3], true, fusion)
    }

    /// Students from text alone so unseen students need no parameters.
    pub fn inductive(head: Head, fusion: FusionConfig) -> Self {
        Self::with_roles(head, [TEXT, FUSED, FUSED], true, fusion)
    }

    /// Pure textual features for every role; no ID parameter of any kind.
    pub fn text_only(head: Head, fusion: FusionConfig) -> Self {
        Self::with_roles(head, [TEXT; 3], false, fusion)
    }

    /// Adaptive testing: student abilities are ID-style, exercises fused.
    pub fn cat(fusion: FusionConfig) -> Self {
        Self::with_roles(Head::Mirt, [ID, FUSED, FUSED], true, fusion)
    }

    pub fn lambda(&self, role: Role) -> f64 {
        match self.roles[role.index()] {
            RoleSpec { text: true, id: true } => self.fusion.lambda,
            RoleSpec { text: true, id: false } => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct MlpHead {
    concepts: usize,
    hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Forward cache of one entity's embedding.
#[derive(Debug, Clone)]
struct EntityEmb {
    text: Option<(Vec<f64>, AdapterPass)>,
    g: Option<Vec<f64>>,
    emb: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Slot {
    e: EntityEmb,
    demb: Vec<f64>,
    dh_extra: Vec<f64>,
    dg_extra: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub cd: f64,
    /// Per role, zero where alignment was not evaluated.
    pub align: [f64; 3],
    pub total: f64,
    pub align_evaluated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedCDModel {
    pub spec: ModelSpec,
    pub store: ParamStore,
    counts: [usize; 3],
    d_text: usize,
    adapters: [Option<Adapter>; 3],
    ids: [Option<ParamId>; 3],
    difficulty: Option<ParamId>,
    mlp: Option<MlpHead>,
}

const ID_INIT_STD: f64 = 0.3;

impl FusedCDModel {
    /// `counts` are the (students, exercises, concepts) sizes of the ID
    /// tables; `d_text` the textual embedding width.
    ///
    /// Initialization draws ID tables and head parameters before any adapter,
    /// so a model without adapters starts from the same values as one with them.
    pub fn new(spec: ModelSpec, counts: [usize; 3], d_text: usize, seed: u64) -> Result<Self> {
        let dt = spec.fusion.dt;
        if dt == 0 || d_text == 0 {
            return Err(Error::Invalid("embedding widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&spec.fusion.lambda) {
            return Err(Error::Invalid(format!("fusion factor must lie in [0, 1], got {}", spec.fusion.lambda)));
        }
        let mut r = rng::seeded(seed, stream::STAGE2_INIT);
        let mut store = ParamStore::new();
        let mut ids = [None; 3];
        for role in Role::ALL {
            if spec.roles[role.index()].id {
                let n = counts[role.index()];
                ids[role.index()] = Some(store.add(format!("id.{}", role.as_str()), &[n, dt], rng::normal_vec(&mut r, n * dt, ID_INIT_STD)));
            }
        }
        let difficulty = spec.difficulty.then(|| store.add("id.difficulty", &[counts[1]], vec![0.0; counts[1]]));
        let mlp = (spec.head == Head::MonotoneMlp).then(|| {
            let (k, h) = (counts[2], spec.mlp_hidden);
            let w1 = store.add("head.w1", &[k, h], positive_init(&mut r, k * h, k));
            let b1 = store.add("head.b1", &[h], vec![0.0; h]);
            let w2_init = positive_init(&mut r, h, h);
            // centre the output so that a zero input starts near 0.5
            let b2_init = -0.5 * w2_init.iter().sum::<f64>();
            let w2 = store.add("head.w2", &[h, 1], w2_init);
            let b2 = store.add("head.b2", &[1], vec![b2_init]);
            MlpHead {
                concepts: k,
                hidden: h,
                w1,
                b1,
                w2,
                b2,
            }
        });
        let activation = if spec.fusion.linear_adapter {
            Activation::Identity
        } else {
            Activation::Tanh
        };
        let mut adapters: [Option<Adapter>; 3] = [None, None, None];
        for role in Role::ALL {
            if spec.roles[role.index()].text {
                adapters[role.index()] = Some(Adapter::new(
                    &mut store,
                    &format!("adapter.{}", role.as_str()),
                    (d_text, 2 * dt, dt),
                    activation,
                    &mut r,
                ));
            }
        }
        Ok(FusedCDModel {
            spec,
            store,
            counts,
            d_text,
            adapters,
            ids,
            difficulty,
            mlp,
        })
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Scalars that belong to the student role (its ID table and adapter).
    pub fn student_param_count(&self) -> usize {
        let mut n = self.ids[0].map_or(0, |id| self.store.meta(id).len());
        if let Some(a) = &self.adapters[0] {
            n += a.params().iter().map(|&p| self.store.meta(p).len()).sum::<usize>();
        }
        n
    }

    /// Per-entity ID-table scalars for the student role.
    pub fn student_id_param_count(&self) -> usize {
        self.ids[0].map_or(0, |id| self.store.meta(id).len())
    }

    fn embed(&self, values: &Values, table: Option<&EmbeddingTable>, role: Role, idx: usize) -> Result<EntityEmb> {
        let r = role.index();
        let text = match &self.adapters[r] {
            Some(ad) => {
                let table = table.ok_or_else(|| Error::Invalid("textual embeddings required".into()))?;
                let h = table
                    .role(role)
                    .get(idx)
                    .ok_or_else(|| Error::Shape(format!("no textual {} embedding for index {idx}", role.as_str())))?;
                let pass = ad.forward(values, h)?;
                Some((h.clone(), pass))
            }
            None => None,
        };
        let g = match self.ids[r] {
            Some(id) => {
                if idx >= self.counts[r] {
                    return Err(Error::Shape(format!(
                        "{} index {idx} outside the ID table of {} rows",
                        role.as_str(),
                        self.counts[r]
                    )));
                }
                Some(values.row(id, self.spec.fusion.dt, idx).to_vec())
            }
            None => None,
        };
        let emb = match (&text, &g) {
            (Some((_, p)), Some(g)) => fuse(&p.out, g, self.spec.fusion.lambda)?,
            (Some((_, p)), None) => p.out.clone(),
            (None, Some(g)) => g.clone(),
            (None, None) => return Err(Error::Invalid(format!("role {} has no embedding source", role.as_str()))),
        };
        Ok(EntityEmb { text, g, emb })
    }

    fn backward_embed(&self, values: &Values, grads: &mut Grads, role: Role, idx: usize, slot: &Slot) {
        let r = role.index();
        let lambda = self.spec.lambda(role);
        if let (Some(ad), Some((h, pass))) = (&self.adapters[r], &slot.e.text) {
            let dh: Vec<f64> = slot.demb.iter().zip(&slot.dh_extra).map(|(d, x)| lambda * d + x).collect();
            if dh.iter().any(|&v| v != 0.0) {
                ad.backward(values, grads, h, pass, &dh);
            }
        }
        if let Some(id) = self.ids[r] {
            let dg: Vec<f64> = slot.demb.iter().zip(&slot.dg_extra).map(|(d, x)| (1.0 - lambda) * d + x).collect();
            if dg.iter().any(|&v| v != 0.0) {
                for (g, d) in grads.row_mut(id, idx).iter_mut().zip(&dg) {
                    *g += d;
                }
            }
        }
    }

    /// Fused embedding of one entity under the current parameters.
    pub fn embedding(&self, table: Option<&EmbeddingTable>, role: Role, idx: usize) -> Result<Vec<f64>> {
        Ok(self.embed(self.store.values(), table, role, idx)?.emb)
    }

    pub fn difficulty(&self, exercise: usize) -> f64 {
        self.difficulty.map_or(0.0, |b| self.store.value(b)[exercise])
    }

    fn b(&self, values: &Values, exercise: usize) -> f64 {
        self.difficulty.map_or(0.0, |b| values[b][exercise])
    }

    /// Sum of the CD loss (mean BCE over `batch`) and α-weighted alignment.
    /// With `backward`, gradients of that sum are accumulated into `store`.
    pub fn objective(&self, store: &mut ParamStore, table: Option<&EmbeddingTable>, corpus: &Corpus, batch: &[usize], backward: bool) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let (values, grads) = store.split_mut();
        let dt = self.spec.fusion.dt;
        let mut slots: [BTreeMap<usize, Slot>; 3] = Default::default();
        let ensure = |slots: &mut [BTreeMap<usize, Slot>; 3], role: Role, idx: usize| -> Result<()> {
            if let std::collections::btree_map::Entry::Vacant(v) = slots[role.index()].entry(idx) {
                let e = self.embed(values, table, role, idx)?;
                v.insert(Slot {
                    e,
                    demb: vec![0.0; dt],
                    dh_extra: vec![0.0; dt],
                    dg_extra: vec![0.0; dt],
                });
            }
            Ok(())
        };
        for &b in batch {
            let r = corpus.responses()[b];
            ensure(&mut slots, Role::Student, r.student)?;
            ensure(&mut slots, Role::Exercise, r.exercise)?;
            if self.mlp.is_some() {
                for &k in corpus.q_row(r.exercise) {
                    ensure(&mut slots, Role::Concept, k)?;
                }
            }
        }
        let weight = 1.0 / batch.len() as f64;
        let mut cd = 0.0;
        for &b in batch {
            let r = corpus.responses()[b];
            let target = r.score as f64;
            match &self.mlp {
                None => {
                    let es = slots[0][&r.student].e.emb.clone();
                    let ee = slots[1][&r.exercise].e.emb.clone();
                    let (_, l, dz) = bce_logit(dot(&es, &ee) - self.b(values, r.exercise), target, weight);
                    cd += l;
                    if backward && dz != 0.0 {
                        add_scaled(&mut slots[0].get_mut(&r.student).unwrap().demb, dz, &ee);
                        add_scaled(&mut slots[1].get_mut(&r.exercise).unwrap().demb, dz, &es);
                        if let Some(bid) = self.difficulty {
                            grads.get_mut(bid)[r.exercise] -= dz;
                        }
                    }
                }
                Some(head) => {
                    let q = corpus.q_row(r.exercise);
                    let es = slots[0][&r.student].e.emb.clone();
                    let ee = slots[1][&r.exercise].e.emb.clone();
                    let ecs: Vec<Vec<f64>> = q.iter().map(|k| slots[2][k].e.emb.clone()).collect();
                    let fw = mlp_forward(head, values, &es, &ee, &ecs, q);
                    let (_, l, dz) = bce_logit(fw.z, target, weight);
                    cd += l;
                    if backward && dz != 0.0 {
                        let back = mlp_backward(head, values, grads, &fw, q, dz);
                        for (pos, &k) in q.iter().enumerate() {
                            let (dls, dle) = (back.dls[pos], back.dle[pos]);
                            add_scaled(&mut slots[0].get_mut(&r.student).unwrap().demb, dls, &ecs[pos]);
                            add_scaled(&mut slots[1].get_mut(&r.exercise).unwrap().demb, dle, &ecs[pos]);
                            let c = &mut slots[2].get_mut(&k).unwrap().demb;
                            add_scaled(c, dls, &es);
                            add_scaled(c, dle, &ee);
                        }
                    }
                }
            }
        }
        let mut align = [0.0; 3];
        let mut align_evaluated = false;
        let alpha = self.spec.fusion.alpha;
        if alpha > 0.0 {
            for role in Role::ALL {
                let ri = role.index();
                if self.spec.roles[ri] != FUSED {
                    continue;
                }
                let members: Vec<usize> = if self.counts[ri] <= self.spec.fusion.full_limit {
                    (0..self.counts[ri]).collect()
                } else {
                    slots[ri].keys().copied().collect()
                };
                if members.len() < 2 {
                    continue;
                }
                for &m in &members {
                    ensure(&mut slots, role, m)?;
                }
                let hh: Vec<Vec<f64>> = members
                    .iter()
                    .map(|m| slots[ri][m].e.text.as_ref().unwrap().1.out.clone())
                    .collect();
                let gg: Vec<Vec<f64>> = members.iter().map(|m| slots[ri][m].e.g.clone().unwrap()).collect();
                let (l, dh, dg) = align_loss_grad(&hh, &gg, self.spec.fusion.tau, self.spec.fusion.mode)?;
                align[ri] = l;
                align_evaluated = true;
                if backward {
                    for (pos, m) in members.iter().enumerate() {
                        let s = slots[ri].get_mut(m).unwrap();
                        add_scaled(&mut s.dh_extra, alpha, &dh[pos]);
                        add_scaled(&mut s.dg_extra, alpha, &dg[pos]);
                    }
                }
            }
        }
        let total = crate::aari::total_loss(cd, &align, alpha);
        if !total.is_finite() {
            return Err(Error::Numeric(format!("stage-2 loss is {total} (diagnosis part {cd})")));
        }
        if backward {
            for role in Role::ALL {
                for (idx, slot) in &slots[role.index()] {
                    self.backward_embed(values, grads, role, *idx, slot);
                }
            }
        }
        Ok(BatchLoss {
            cd,
            align,
            total,
            align_evaluated,
        })
    }

    fn predict_values(&self, values: &Values, table: Option<&EmbeddingTable>, corpus: &Corpus, indices: &[usize]) -> Result<Vec<f64>> {
        let mut cache: [BTreeMap<usize, Vec<f64>>; 3] = Default::default();
        let mut emb = |role: Role, idx: usize| -> Result<Vec<f64>> {
            if let Some(e) = cache[role.index()].get(&idx) {
                return Ok(e.clone());
            }
            let e = self.embed(values, table, role, idx)?.emb;
            cache[role.index()].insert(idx, e.clone());
            Ok(e)
        };
        indices
            .iter()
            .map(|&i| {
                let r = corpus.responses()[i];
                let es = emb(Role::Student, r.student)?;
                let ee = emb(Role::Exercise, r.exercise)?;
                Ok(match &self.mlp {
                    None => sigmoid(dot(&es, &ee) - self.b(values, r.exercise)),
                    Some(head) => {
                        let q = corpus.q_row(r.exercise);
                        let ecs = q.iter().map(|&k| emb(Role::Concept, k)).collect::<Result<Vec<_>>>()?;
                        sigmoid(mlp_forward(head, values, &es, &ee, &ecs, q).z)
                    }
                })
            })
            .collect()
    }

    /// Predicted correctness for the given responses of `corpus`, with textual
    /// rows read from `table`.
    pub fn predict(&self, table: Option<&EmbeddingTable>, corpus: &Corpus, indices: &[usize]) -> Result<Vec<f64>> {
        self.predict_values(self.store.values(), table, corpus, indices)
    }

    /// `Mas[i,k] = σ(⟨Emb_s(i), Emb_c(k)⟩)` for every student and concept.
    pub fn diagnose(&self, table: Option<&EmbeddingTable>) -> Result<MasteryMatrix> {
        let count = |role: Role| -> Result<usize> {
            if self.spec.roles[role.index()].text {
                table
                    .map(|t| t.role(role).len())
                    .ok_or_else(|| Error::Invalid("textual embeddings required".into()))
            } else {
                Ok(self.counts[role.index()])
            }
        };
        let concepts = (0..count(Role::Concept)?)
            .map(|k| self.embedding(table, Role::Concept, k))
            .collect::<Result<Vec<_>>>()?;
        let rows = (0..count(Role::Student)?)
            .map(|i| {
                let es = self.embedding(table, Role::Student, i)?;
                Ok(concepts.iter().map(|c| sigmoid(dot(&es, c))).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(MasteryMatrix::from_rows(rows))
    }

    /// Trains on `train`, keeping the epoch with the best AUC on `valid`.
    pub fn fit(&mut self, table: Option<&EmbeddingTable>, corpus: &Corpus, train: &[usize], valid: &[usize], cfg: &FitConfig) -> Result<FitReport> {
        if train.is_empty() {
            return Err(Error::Invalid("no training responses".into()));
        }
        let mut store = std::mem::take(&mut self.store);
        let result = self.fit_inner(&mut store, table, corpus, train, valid, cfg);
        self.store = store;
        result
    }

    fn fit_inner(&self, store: &mut ParamStore, table: Option<&EmbeddingTable>, corpus: &Corpus, train: &[usize], valid: &[usize], cfg: &FitConfig) -> Result<FitReport> {
        let mut adam = Adam::new(store, AdamConfig::with_lr(cfg.lr));
        let mut rng = rng::seeded(cfg.seed, stream::STAGE2_SHUFFLE);
        let mut order = train.to_vec();
        let labels: Vec<u8> = valid.iter().map(|&i| corpus.responses()[i].score).collect();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut best: Option<(f64, usize, Values)> = None;
        let mut align_evaluations = 0u64;
        let mut gradient_responses = vec![false; corpus.responses().len()];
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let l = self.objective(store, table, corpus, chunk, true)?;
                align_evaluations += l.align_evaluated as u64;
                total += l.total * chunk.len() as f64;
                for &i in chunk {
                    gradient_responses[i] = true;
                }
                adam.step(store)?;
                if let Some(h) = &self.mlp {
                    store.clamp_min(h.w1, 0.0);
                    store.clamp_min(h.w2, 0.0);
                }
            }
            let (auc, acc) = if valid.is_empty() {
                (None, None)
            } else {
                let p = self.predict_values(store.values(), table, corpus, valid)?;
                (metrics::auc(&p, &labels).ok(), metrics::acc(&p, &labels, metrics::DEFAULT_THRESHOLD).ok())
            };
            epochs.push(EpochRecord {
                epoch,
                train_loss: total / order.len() as f64,
                valid_auc: auc,
                valid_acc: acc,
            });
            if let Some(a) = auc {
                if best.as_ref().is_none_or(|(b, _, _)| a > *b) {
                    best = Some((a, epoch, store.snapshot()));
                }
            }
        }
        let (best_valid_auc, best_epoch) = match best {
            Some((a, e, snap)) => {
                store.restore(&snap);
                (Some(a), e)
            }
            None => (None, cfg.epochs),
        };
        Ok(FitReport {
            epochs,
            best_epoch,
            best_valid_auc,
            align_evaluations,
            gradient_responses: gradient_responses
                .iter()
                .enumerate()
                .filter(|(_, &t)| t)
                .map(|(i, _)| i)
                .collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "fused-cd-model",
            "spec": self.spec,
            "counts": self.counts,
            "d_text": self.d_text,
        });
        save_checkpoint(path, &meta, &self.store.named_arrays())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (meta, arrays) = load_checkpoint(path)?;
        let bad = |m: String| Error::Format {
            format: "checkpoint",
            path: path.to_path_buf(),
            message: m,
        };
        if meta["kind"] != "fused-cd-model" {
            return Err(bad("not a diagnosis-model checkpoint".into()));
        }
        let spec: ModelSpec = serde_json::from_value(meta["spec"].clone()).map_err(|e| bad(e.to_string()))?;
        let counts: [usize; 3] = serde_json::from_value(meta["counts"].clone()).map_err(|e| bad(e.to_string()))?;
        let d_text: usize = serde_json::from_value(meta["d_text"].clone()).map_err(|e| bad(e.to_string()))?;
        let mut model = FusedCDModel::new(spec, counts, d_text, 0)?;
        model.store.load_named(&arrays)?;
        Ok(model)
    }
}

fn add_scaled(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn positive_init(r: &mut Rng, len: usize, fan_in: usize) -> Vec<f64> {
    // wider than the usual 1/sqrt(fan_in): the head starts with x near zero,
    // and small weights leave it in a flat region for many epochs
    let bound = 3.0 / (fan_in.max(1) as f64).sqrt();
    rng::uniform_vec(r, len, bound).into_iter().map(f64::abs).collect()
}

struct MlpForward {
    m: Vec<f64>,
    hd: Vec<f64>,
    x: Vec<f64>,
    a: Vec<f64>,
    z: f64,
}

struct MlpBackward {
    /// `∂/∂(Emb_s·Emb_c[k])` per concept of the exercise.
    dls: Vec<f64>,
    /// `∂/∂(Emb_e·Emb_c[k])`.
    dle: Vec<f64>,
}

/// Monotone network on `x = q ∘ (σ(Emb_s·Emb_cᵀ) − σ(Emb_e·Emb_cᵀ))`; only the
/// concepts in `q` are non-zero so only they are computed.
fn mlp_forward(head: &MlpHead, values: &Values, es: &[f64], ee: &[f64], ecs: &[Vec<f64>], q: &[usize]) -> MlpForward {
    let m: Vec<f64> = ecs.iter().map(|c| sigmoid(dot(es, c))).collect();
    let hd: Vec<f64> = ecs.iter().map(|c| sigmoid(dot(ee, c))).collect();
    let x: Vec<f64> = m.iter().zip(&hd).map(|(a, b)| a - b).collect();
    mlp_from_input(head, values, m, hd, x, q)
}

fn mlp_from_input(head: &MlpHead, values: &Values, m: Vec<f64>, hd: Vec<f64>, x: Vec<f64>, q: &[usize]) -> MlpForward {
    let h = head.hidden;
    let mut pre = values[head.b1].to_vec();
    for (pos, &k) in q.iter().enumerate() {
        add_scaled(&mut pre, x[pos], values.row(head.w1, h, k));
    }
    let a: Vec<f64> = pre.iter().map(|&v| sigmoid(v)).collect();
    let z = values[head.b2][0] + dot(&a, &values[head.w2]);
    MlpForward { m, hd, x, a, z }
}

fn mlp_backward(head: &MlpHead, values: &Values, grads: &mut Grads, fw: &MlpForward, q: &[usize], dz: f64) -> MlpBackward {
    let h = head.hidden;
    {
        let (dw2, db2) = grads.pair_mut(head.w2, head.b2);
        add_scaled(dw2, dz, &fw.a);
        db2[0] += dz;
    }
    let w2 = &values[head.w2];
    let dpre: Vec<f64> = fw.a.iter().zip(w2).map(|(&a, &w)| a * (1.0 - a) * w * dz).collect();
    {
        let (dw1, db1) = grads.pair_mut(head.w1, head.b1);
        add_scaled(db1, 1.0, &dpre);
        for (pos, &k) in q.iter().enumerate() {
            add_scaled(&mut dw1[k * h..(k + 1) * h], fw.x[pos], &dpre);
        }
    }
    let mut dls = Vec::with_capacity(q.len());
    let mut dle = Vec::with_capacity(q.len());
    for (pos, &k) in q.iter().enumerate() {
        let dx = dot(values.row(head.w1, h, k), &dpre);
        dls.push(fw.m[pos] * (1.0 - fw.m[pos]) * dx);
        dle.push(-fw.hd[pos] * (1.0 - fw.hd[pos]) * dx);
    }
    MlpBackward { dls, dle }
}

impl FusedCDModel {
    /// Head output for explicit mastery and difficulty vectors over all K
    /// concepts; `q` selects the concepts that enter.
    pub fn mlp_predict_from(&self, mastery: &[f64], hardness: &[f64], q: &[usize]) -> Result<f64> {
        let head = self
            .mlp
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no monotone head".into()))?;
        if mastery.len() != head.concepts || hardness.len() != head.concepts {
            return Err(Error::Shape("mastery vectors must have one entry per concept".into()));
        }
        let m: Vec<f64> = q.iter().map(|&k| mastery[k]).collect();
        let hd: Vec<f64> = q.iter().map(|&k| hardness[k]).collect();
        let x = m.iter().zip(&hd).map(|(a, b)| a - b).collect();
        Ok(sigmoid(mlp_from_input(head, self.store.values(), m, hd, x, q).z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 30,
            batch: 256,
            lr: 5e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_auc: Option<f64>,
    /// Batches on which the alignment loss was computed.
    pub align_evaluations: u64,
    /// Every response index that entered a gradient.
    #[serde(skip)]
    pub gradient_responses: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub count: usize,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    pub doa: Option<f64>,
}

pub fn score(preds: &[f64], labels: &[u8]) -> SplitMetrics {
    SplitMetrics {
        count: preds.len(),
        auc: metrics::auc(preds, labels).ok(),
        acc: metrics::acc(preds, labels, metrics::DEFAULT_THRESHOLD).ok(),
        doa: None,
    }
}

fn labels_of(corpus: &Corpus, indices: &[usize]) -> Vec<u8> {
    indices.iter().map(|&i| corpus.responses()[i].score).collect()
}

/// AUC/ACC (and DOA when mastery is given) over `indices`.
pub fn evaluate(model: &FusedCDModel, table: Option<&EmbeddingTable>, corpus: &Corpus, indices: &[usize], mastery: Option<&MasteryMatrix>) -> Result<SplitMetrics> {
    let preds = model.predict(table, corpus, indices)?;
    let mut m = score(&preds, &labels_of(corpus, indices));
    if let Some(mas) = mastery {
        m.doa = metrics::doa(mas, corpus, indices).ok();
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransductiveReport {
    pub fit: FitReport,
    pub valid: SplitMetrics,
    pub test: SplitMetrics,
}

/// Trains on `split.train`, selects on `split.valid`, scores `split.test`.
pub fn train_transductive(
    corpus: &Corpus,
    split: &TransductiveSplit,
    table: Option<&EmbeddingTable>,
    spec: ModelSpec,
    fit: &FitConfig,
) -> Result<(FusedCDModel, TransductiveReport)> {
    let d_text = table.map_or(1, |t| t.dim);
    let counts = [corpus.num_students(), corpus.num_exercises(), corpus.num_concepts()];
    let mut model = FusedCDModel::new(spec, counts, d_text, fit.seed)?;
    let fit_report = model.fit(table, corpus, &split.train, &split.valid, fit)?;
    let mastery = model.diagnose(table)?;
    let valid = evaluate(&model, table, corpus, &split.valid, Some(&mastery))?;
    let test = evaluate(&model, table, corpus, &split.test, Some(&mastery))?;
    Ok((
        model,
        TransductiveReport {
            fit: fit_report,
            valid,
            test,
        },
    ))
}

/// Predictions for one unseen student from their support responses, with no
/// parameter update. Returns the predictions and whether the student's text
/// had to fall back to the role vector alone.
#[allow(clippy::too_many_arguments)]
pub fn infer_inductive(
    model: &FusedCDModel,
    encoder: &AttributeEncoder,
    exercises: &[AttributeRecord],
    table: &EmbeddingTable,
    corpus: &Corpus,
    student: usize,
    support: &[usize],
    eval: &[usize],
) -> Result<(Vec<f64>, bool)> {
    if model.spec.roles[0] != TEXT {
        return Err(Error::Invalid("inductive inference needs a text-only student role".into()));
    }
    let record = student_attribute_from(corpus, student, support, exercises);
    let enc = encoder.encode(&record);
    let mut local = table.clone();
    if local.students.len() <= student {
        local.students.resize(student + 1, vec![0.0; table.dim]);
    }
    local.students[student] = enc.h;
    Ok((model.predict(Some(&local), corpus, eval)?, enc.role_only))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductiveReport {
    pub stage1: Stage1Report,
    pub fit: FitReport,
    pub existing_valid: SplitMetrics,
    pub new_students: usize,
    pub eval: SplitMetrics,
    pub role_only_students: Vec<String>,
    pub trainable_student_params: usize,
    pub checksum_before: String,
    pub checksum_after: String,
}

/// Stage 1 and Stage 2 on the existing students only, then text-only scoring
/// of every new student's evaluation responses.
pub fn run_inductive(corpus: &Corpus, split: &InductiveSplit, stage1: &Stage1Config, spec: ModelSpec, fit: &FitConfig) -> Result<(FusedCDModel, Stage1Output, InductiveReport)> {
    if spec.roles[0] != TEXT {
        return Err(Error::Invalid("inductive models must encode students from text only".into()));
    }
    let existing = split_indices(&split.existing_responses, [0.9, 0.1, 0.0], fit.seed)?;
    let s1 = train_stage1(corpus, &existing, stage1)?;
    let counts = [corpus.num_students(), corpus.num_exercises(), corpus.num_concepts()];
    let mut model = FusedCDModel::new(spec, counts, s1.table.dim, fit.seed)?;
    let fit_report = model.fit(Some(&s1.table), corpus, &existing.train, &existing.valid, fit)?;
    let existing_valid = evaluate(&model, Some(&s1.table), corpus, &existing.valid, None)?;

    let before = model.store.checksum();
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut role_only = Vec::new();
    for (pos, &s) in split.new_students.iter().enumerate() {
        let support = capped_indices(corpus, &split.new_support[pos], stage1.cap, stage1.seed);
        let eval = &split.new_eval[pos];
        let (p, flagged) = infer_inductive(&model, &s1.encoder, &s1.attributes.exercises, &s1.table, corpus, s, &support, eval)?;
        if flagged {
            role_only.push(corpus.student_id(s).to_string());
        }
        preds.extend(p);
        labels.extend(labels_of(corpus, eval));
    }
    let after = model.store.checksum();
    let report = InductiveReport {
        stage1: s1.report.clone(),
        fit: fit_report,
        existing_valid,
        new_students: split.new_students.len(),
        eval: score(&preds, &labels),
        role_only_students: role_only,
        trainable_student_params: model.student_id_param_count(),
        checksum_before: format!("{before:016x}"),
        checksum_after: format!("{after:016x}"),
    };
    Ok((model, s1, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub stage1: Stage1Report,
    pub fit: FitReport,
    pub source_valid: SplitMetrics,
    pub target: SplitMetrics,
    pub source_responses: usize,
    pub target_support: usize,
}

pub struct ZeroShotOutcome {
    pub model: FusedCDModel,
    pub stage1: Stage1Output,
    pub target_table: EmbeddingTable,
    pub predictions: Vec<f64>,
    pub mastery: MasteryMatrix,
    pub report: ZeroShotReport,
}

/// Source-side fraction held out for checkpoint selection.
pub const ZEROSHOT_SOURCE_VALID: f64 = 0.1;

/// Trains a text-only model on the merged sources and scores the target's
/// evaluation responses; target texts are built from the support responses.
pub fn run_zeroshot(spec: &DomainSpec, stage1: &Stage1Config, model_spec: ModelSpec, fit: &FitConfig, overlap_students: bool) -> Result<ZeroShotOutcome> {
    let parts: Vec<&Corpus> = spec.sources.iter().collect();
    let source = Corpus::concat(&parts)?;
    let all: Vec<usize> = (0..source.responses().len()).collect();
    let split = split_indices(&all, [1.0 - ZEROSHOT_SOURCE_VALID, ZEROSHOT_SOURCE_VALID, 0.0], fit.seed)?;
    let overlap = overlap_students.then_some(&spec.sources[..]);
    zeroshot_with(&source, &split, &spec.target, &spec.target_support, &spec.target_eval, stage1, model_spec, fit, overlap)
}

/// [`run_zeroshot`] with an explicit source split.
#[allow(clippy::too_many_arguments)]
pub fn zeroshot_with(
    source: &Corpus,
    source_split: &TransductiveSplit,
    target: &Corpus,
    support: &[usize],
    eval: &[usize],
    stage1: &Stage1Config,
    model_spec: ModelSpec,
    fit: &FitConfig,
    overlap: Option<&[Corpus]>,
) -> Result<ZeroShotOutcome> {
    if model_spec.roles.iter().any(|r| r.id) || model_spec.difficulty {
        return Err(Error::Invalid("zero-shot models cannot carry ID parameters".into()));
    }
    if target.num_concepts() == 0 {
        return Err(Error::Invalid("target has no concepts".into()));
    }
    let s1 = train_stage1(source, source_split, stage1)?;
    let counts = [source.num_students(), source.num_exercises(), source.num_concepts()];
    let mut model = FusedCDModel::new(model_spec, counts, s1.table.dim, fit.seed)?;
    let fit_report = model.fit(Some(&s1.table), source, &source_split.train, &source_split.valid, fit)?;
    let source_valid = evaluate(&model, Some(&s1.table), source, &source_split.valid, None)?;

    let mut attrs = AttributeSet::build(&target.with_responses(support), stage1.cap, stage1.seed, stage1.attributes);
    if let Some(sources) = overlap {
        merge_overlapping_histories(&mut attrs, target, sources, stage1);
    }
    let target_table = s1.encoder.encode_set(&attrs);
    let predictions = model.predict(Some(&target_table), target, eval)?;
    let mastery = model.diagnose(Some(&target_table))?;
    let mut target_metrics = score(&predictions, &labels_of(target, eval));
    target_metrics.doa = metrics::doa(&mastery, target, eval).ok();
    let report = ZeroShotReport {
        stage1: s1.report.clone(),
        fit: fit_report,
        source_valid,
        target: target_metrics,
        source_responses: source_split.train.len() + source_split.valid.len(),
        target_support: support.len(),
    };
    Ok(ZeroShotOutcome {
        model,
        stage1: s1,
        target_table,
        predictions,
        mastery,
        report,
    })
}

/// Appends each target student's source-domain history (matched by
/// identifier) to their target history, within the response cap.
fn merge_overlapping_histories(attrs: &mut AttributeSet, target: &Corpus, sources: &[Corpus], cfg: &Stage1Config) {
    for src in sources {
        let index = src.student_index();
        let src_attrs = AttributeSet::build(src, cfg.cap, cfg.seed, cfg.attributes);
        for (i, rec) in attrs.students.iter_mut().enumerate() {
            let Some(&si) = index.get(target.student_id(i)) else {
                continue;
            };
            let extra = &src_attrs.students[si];
            let room = cfg.cap.saturating_sub(rec.segments.len());
            if extra.segments.is_empty() || room == 0 {
                continue;
            }
            if rec.segments.is_empty() {
                rec.fields.clear();
            }
            rec.segments.extend(extra.segments.iter().take(room).cloned());
            rec.fields.extend(extra.fields.iter().cloned());
            rec.rendered = rec
                .fields
                .iter()
                .map(|(n, v)| crate::attributes::render_field(n, v))
                .collect::<Vec<_>>()
                .join(" ");
        }
    }
}
