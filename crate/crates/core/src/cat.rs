//! Computerized adaptive testing simulation.
//!
//! A MIRT model is pretrained with exercises fused from text and IDs and
//! students as pure IDs. Each simulated student then starts from a zero
//! ability vector; the loop selects an exercise, asks an oracle for the
//! answer, and refits the ability on everything answered so far with the
//! exercise side frozen. At each checkpoint the current estimate scores the
//! student's held-out responses.

use std::collections::{BTreeSet, HashMap};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attributes::Role;
use crate::cdmodels::{score, FitConfig, FitReport, FusedCDModel, Head, ModelSpec, SplitMetrics};
use crate::corpus::{split_indices, CatSplit, Corpus, TransductiveSplit};
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::nncore::ops::{bce_logit, dot, sigmoid};
use crate::nncore::{Adam, AdamConfig, ParamStore};
use crate::rng::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    #[serde(rename = "maxinfo")]
    MaxFisherInfo,
    #[serde(rename = "emc")]
    ExpectedModelChange,
}

impl Strategy {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "random" => Some(Strategy::Random),
            "maxinfo" => Some(Strategy::MaxFisherInfo),
            "emc" => Some(Strategy::ExpectedModelChange),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::MaxFisherInfo => "maxinfo",
            Strategy::ExpectedModelChange => "emc",
        }
    }
}

pub trait AnswerOracle {
    fn answer(&self, student: usize, exercise: usize) -> Result<u8>;
}

/// Replays logged responses; the last log of a pair wins.
#[derive(Debug, Clone)]
pub struct LoggedOracle {
    logs: HashMap<(usize, usize), u8>,
}

impl LoggedOracle {
    pub fn new(corpus: &Corpus) -> Self {
        let logs = corpus.responses().iter().map(|r| ((r.student, r.exercise), r.score)).collect();
        LoggedOracle { logs }
    }
}

impl AnswerOracle for LoggedOracle {
    fn answer(&self, student: usize, exercise: usize) -> Result<u8> {
        self.logs
            .get(&(student, exercise))
            .copied()
            .ok_or_else(|| Error::Invalid(format!("no logged response for student {student}, exercise {exercise}")))
    }
}

/// Samples answers from known correctness probabilities; each (student,
/// exercise) draw is a fixed function of the seed.
#[derive(Debug, Clone)]
pub struct PlantedOracle {
    probs: Vec<Vec<f64>>,
    seed: u64,
}

impl PlantedOracle {
    pub fn new(probs: Vec<Vec<f64>>, seed: u64) -> Self {
        PlantedOracle { probs, seed }
    }
}

impl AnswerOracle for PlantedOracle {
    fn answer(&self, student: usize, exercise: usize) -> Result<u8> {
        let p = *self
            .probs
            .get(student)
            .and_then(|row| row.get(exercise))
            .ok_or_else(|| Error::Invalid(format!("no planted probability for ({student}, {exercise})")))?;
        let key = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((student as u64) << 32 | exercise as u64);
        let u: f64 = rng::seeded(key, stream::ORACLE).random();
        Ok((u < p) as u8)
    }
}

/// Where candidate exercises come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// The student's logged pool responses.
    Logged,
    /// Every exercise the student has neither pretrained nor held out.
    Unseen,
}

/// Frozen exercise side: fused embeddings and difficulties.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemBank {
    pub emb: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl ItemBank {
    pub fn from_model(model: &FusedCDModel, table: Option<&EmbeddingTable>, exercises: usize) -> Result<Self> {
        if model.spec.head != Head::Mirt {
            return Err(Error::Invalid("adaptive testing uses the MIRT head".into()));
        }
        let emb = (0..exercises)
            .map(|j| model.embedding(table, Role::Exercise, j))
            .collect::<Result<Vec<_>>>()?;
        let b = (0..exercises).map(|j| model.difficulty(j)).collect();
        Ok(ItemBank { emb, b })
    }

    pub fn prob(&self, theta: &[f64], j: usize) -> f64 {
        sigmoid(dot(theta, &self.emb[j]) - self.b[j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatSession {
    pub student: usize,
    pub answered: Vec<(usize, u8)>,
    pub pool: BTreeSet<usize>,
    pub theta: Vec<f64>,
    pub budget: usize,
    /// Set when a refit produced non-finite values and was reset.
    pub diverged: bool,
}

impl CatSession {
    pub fn new(student: usize, pool: impl IntoIterator<Item = usize>, dim: usize, budget: usize) -> Self {
        CatSession {
            student,
            answered: Vec::new(),
            pool: pool.into_iter().collect(),
            theta: vec![0.0; dim],
            budget,
            diverged: false,
        }
    }

    pub fn step(&self) -> usize {
        self.answered.len()
    }

    pub fn record(&mut self, exercise: usize, response: u8) -> Result<()> {
        if !self.pool.remove(&exercise) {
            return Err(Error::Invalid(format!("exercise {exercise} is not in the pool")));
        }
        if self.step() >= self.budget {
            return Err(Error::Invalid("test budget exhausted".into()));
        }
        self.answered.push((exercise, response));
        Ok(())
    }
}

/// Picks the next exercise; ties go to the lowest index.
pub fn select(session: &CatSession, items: &ItemBank, strategy: Strategy, rng: &mut Rng) -> Result<usize> {
    if session.pool.is_empty() {
        return Err(Error::Invalid("candidate pool is empty".into()));
    }
    if strategy == Strategy::Random {
        let pick = rng.random_range(0..session.pool.len());
        return Ok(*session.pool.iter().nth(pick).unwrap());
    }
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for &j in &session.pool {
        let p = items.prob(&session.theta, j);
        let norm_sq = dot(&items.emb[j], &items.emb[j]);
        // MIRT: ∂logit/∂θ = Emb_e, and |∂BCE(p, r)/∂θ| = |p − r| ‖Emb_e‖
        let value = match strategy {
            Strategy::MaxFisherInfo => p * (1.0 - p) * norm_sq,
            Strategy::ExpectedModelChange => 2.0 * p * (1.0 - p) * norm_sq.sqrt(),
            Strategy::Random => unreachable!(),
        };
        if value > best.0 {
            best = (value, j);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefitConfig {
    pub n_inner: usize,
    pub lr: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig { n_inner: 20, lr: 0.01 }
    }
}

/// Refits θ̂ from zero by Adam on the mean BCE of every answered item.
pub fn update_estimate(session: &mut CatSession, items: &ItemBank, cfg: RefitConfig) -> Result<()> {
    let dim = session.theta.len();
    session.theta = vec![0.0; dim];
    if session.answered.is_empty() {
        return Ok(());
    }
    let mut store = ParamStore::new();
    let id = store.add("theta", &[dim], vec![0.0; dim]);
    let mut adam = Adam::new(&store, AdamConfig::with_lr(cfg.lr));
    let w = 1.0 / session.answered.len() as f64;
    for _ in 0..cfg.n_inner {
        let theta = store.value(id).to_vec();
        let g = store.grads_mut().get_mut(id);
        for &(j, r) in &session.answered {
            let (_, _, dz) = bce_logit(dot(&theta, &items.emb[j]) - items.b[j], r as f64, w);
            for (gi, e) in g.iter_mut().zip(&items.emb[j]) {
                *gi += dz * e;
            }
        }
        if adam.step(&mut store).is_err() {
            session.diverged = true;
            return Ok(());
        }
    }
    let theta = store.value(id);
    if theta.iter().all(|v| v.is_finite()) {
        session.theta = theta.to_vec();
    } else {
        session.diverged = true;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatConfig {
    pub checkpoints: Vec<usize>,
    pub refit: RefitConfig,
    pub pool: PoolMode,
    pub seed: u64,
}

impl CatConfig {
    pub fn budget(&self) -> usize {
        self.checkpoints.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: usize,
    pub metrics: SplitMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointMetrics>,
    pub students: usize,
    pub skipped_students: usize,
    pub diverged_refits: usize,
    pub params_checksum_before: String,
    pub params_checksum_after: String,
}

/// Pretrains the testing model on `split.pretrain` (a tenth held out for
/// checkpoint selection) and reports AUC/ACC on that held-out cut.
/// Train/validation cut of the pretraining logs, shared by Stage 1 and the
/// pretrained diagnosis model.
pub fn pretrain_cut(split: &CatSplit, seed: u64) -> Result<TransductiveSplit> {
    split_indices(&split.pretrain, [0.9, 0.1, 0.0], seed)
}

pub fn pretrain_cat(corpus: &Corpus, split: &CatSplit, table: Option<&EmbeddingTable>, spec: ModelSpec, fit: &FitConfig) -> Result<(FusedCDModel, FitReport, SplitMetrics)> {
    if spec.head != Head::Mirt || spec.roles[0].text {
        return Err(Error::Invalid("adaptive testing needs the MIRT head and ID-only students".into()));
    }
    let cut = pretrain_cut(split, fit.seed)?;
    let counts = [corpus.num_students(), corpus.num_exercises(), corpus.num_concepts()];
    let mut model = FusedCDModel::new(spec, counts, table.map_or(1, |t| t.dim), fit.seed)?;
    let report = model.fit(table, corpus, &cut.train, &cut.valid, fit)?;
    let p = model.predict(table, corpus, &cut.valid)?;
    let labels: Vec<u8> = cut.valid.iter().map(|&i| corpus.responses()[i].score).collect();
    Ok((model, report, score(&p, &labels)))
}

/// Runs one session per student of `split` and scores held-out responses at
/// every checkpoint, pooled over students.
pub fn run_cat(
    model: &FusedCDModel,
    table: Option<&EmbeddingTable>,
    corpus: &Corpus,
    split: &CatSplit,
    strategy: Strategy,
    oracle: &dyn AnswerOracle,
    cfg: &CatConfig,
) -> Result<CatReport> {
    let before = model.store.checksum();
    let items = ItemBank::from_model(model, table, corpus.num_exercises())?;
    let budget = cfg.budget();
    let dim = model.spec.fusion.dt;
    let mut seen_pretrain: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); corpus.num_students()];
    for &i in &split.pretrain {
        let r = corpus.responses()[i];
        seen_pretrain[r.student].insert(r.exercise);
    }
    let mut rng = rng::seeded(cfg.seed, stream::CAT_SELECT);
    let mut preds = vec![Vec::new(); cfg.checkpoints.len()];
    let mut labels = Vec::new();
    let (mut skipped, mut diverged, mut used) = (0, 0, 0);
    for st in &split.students {
        let eval_exercises: BTreeSet<usize> = st.eval.iter().map(|&i| corpus.responses()[i].exercise).collect();
        let pool: BTreeSet<usize> = match cfg.pool {
            PoolMode::Logged => st
                .pool
                .iter()
                .map(|&i| corpus.responses()[i].exercise)
                .filter(|j| !eval_exercises.contains(j) && !seen_pretrain[st.student].contains(j))
                .collect(),
            PoolMode::Unseen => (0..corpus.num_exercises())
                .filter(|j| !eval_exercises.contains(j) && !seen_pretrain[st.student].contains(j))
                .collect(),
        };
        if pool.len() < budget || st.eval.is_empty() {
            skipped += 1;
            continue;
        }
        used += 1;
        let mut session = CatSession::new(st.student, pool, dim, budget);
        let mut next_checkpoint = 0;
        while session.step() < budget {
            let j = select(&session, &items, strategy, &mut rng)?;
            let r = oracle.answer(st.student, j)?;
            session.record(j, r)?;
            update_estimate(&mut session, &items, cfg.refit)?;
            while next_checkpoint < cfg.checkpoints.len() && cfg.checkpoints[next_checkpoint] == session.step() {
                preds[next_checkpoint].extend(st.eval.iter().map(|&i| items.prob(&session.theta, corpus.responses()[i].exercise)));
                next_checkpoint += 1;
            }
        }
        diverged += session.diverged as usize;
        labels.extend(st.eval.iter().map(|&i| corpus.responses()[i].score));
    }
    let checkpoints = cfg
        .checkpoints
        .iter()
        .zip(&preds)
        .map(|(&step, p)| CheckpointMetrics {
            step,
            metrics: score(p, &labels),
        })
        .collect();
    let after = model.store.checksum();
    Ok(CatReport {
        strategy,
        seed: cfg.seed,
        checkpoints,
        students: used,
        skipped_students: skipped,
        diverged_refits: diverged,
        params_checksum_before: format!("{before:016x}"),
        params_checksum_after: format!("{after:016x}"),
    })
}
