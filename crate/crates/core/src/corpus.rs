//! Educational interaction data: loading, validation, views and splits.
//!
//! Identifiers from the input files are remapped to dense 0-based indices.
//! Students are numbered in order of first appearance in `responses.csv`,
//! exercises in order of first appearance in `q_matrix.csv`, and concepts in
//! `concepts.csv` row order. The original identifiers are kept for reporting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub const DEFAULT_CAP: usize = 50;
pub const DEFAULT_MIN_RESPONSES: usize = 10;
pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];
pub const CAT_PRETRAIN_FRACTION: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Response {
    pub student: usize,
    pub exercise: usize,
    pub score: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    student_ids: Vec<String>,
    exercise_ids: Vec<String>,
    concept_ids: Vec<String>,
    concept_names: Vec<String>,
    exercise_texts: Option<Vec<String>>,
    /// Sorted concept indices per exercise.
    q_rows: Vec<Vec<usize>>,
    responses: Vec<Response>,
}

impl Corpus {
    /// Builds a corpus from already-indexed parts, checking every invariant.
    pub fn new(
        student_ids: Vec<String>,
        exercise_ids: Vec<String>,
        concept_ids: Vec<String>,
        concept_names: Vec<String>,
        q_rows: Vec<Vec<usize>>,
        responses: Vec<Response>,
    ) -> Result<Self> {
        let corpus = Corpus {
            student_ids,
            exercise_ids,
            concept_ids,
            concept_names,
            exercise_texts: None,
            q_rows: q_rows
                .into_iter()
                .map(|mut row| {
                    row.sort_unstable();
                    row.dedup();
                    row
                })
                .collect(),
            responses,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn with_exercise_texts(mut self, texts: Vec<String>) -> Result<Self> {
        if texts.len() != self.num_exercises() {
            return Err(Error::Corpus(format!(
                "expected {} exercise texts, got {}",
                self.num_exercises(),
                texts.len()
            )));
        }
        self.exercise_texts = Some(texts);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let (m, n, k) = (self.num_students(), self.num_exercises(), self.num_concepts());
        if self.concept_names.len() != k {
            return Err(Error::Corpus(format!(
                "{} concept names for {} concepts",
                self.concept_names.len(),
                k
            )));
        }
        if let Some(pos) = self.concept_names.iter().position(|s| s.trim().is_empty()) {
            return Err(Error::Corpus(format!(
                "concept {} has an empty name",
                self.concept_ids[pos]
            )));
        }
        if self.q_rows.len() != n {
            return Err(Error::Corpus(format!("{} Q-rows for {} exercises", self.q_rows.len(), n)));
        }
        for (j, row) in self.q_rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::Corpus(format!(
                    "exercise {} has an empty Q-row",
                    self.exercise_ids[j]
                )));
            }
            if let Some(&c) = row.iter().find(|&&c| c >= k) {
                return Err(Error::Corpus(format!("Q-row {j} references concept index {c} >= {k}")));
            }
        }
        for (idx, r) in self.responses.iter().enumerate() {
            if r.student >= m || r.exercise >= n {
                return Err(Error::Corpus(format!("response {idx} references an out-of-range index")));
            }
            if r.score > 1 {
                return Err(Error::Corpus(format!("response {idx} has score {}", r.score)));
            }
        }
        Ok(())
    }

    pub fn num_students(&self) -> usize {
        self.student_ids.len()
    }
    pub fn num_exercises(&self) -> usize {
        self.exercise_ids.len()
    }
    pub fn num_concepts(&self) -> usize {
        self.concept_ids.len()
    }
    pub fn responses(&self) -> &[Response] {
        &self.responses
    }
    pub fn student_id(&self, i: usize) -> &str {
        &self.student_ids[i]
    }
    pub fn exercise_id(&self, j: usize) -> &str {
        &self.exercise_ids[j]
    }
    pub fn concept_id(&self, k: usize) -> &str {
        &self.concept_ids[k]
    }
    pub fn student_ids(&self) -> &[String] {
        &self.student_ids
    }
    pub fn exercise_ids(&self) -> &[String] {
        &self.exercise_ids
    }
    pub fn concept_ids(&self) -> &[String] {
        &self.concept_ids
    }
    pub fn concept_name(&self, k: usize) -> &str {
        &self.concept_names[k]
    }
    pub fn exercise_text(&self, j: usize) -> Option<&str> {
        self.exercise_texts.as_ref().map(|t| t[j].as_str())
    }
    pub fn has_exercise_texts(&self) -> bool {
        self.exercise_texts.is_some()
    }
    pub fn q_row(&self, j: usize) -> &[usize] {
        &self.q_rows[j]
    }
    pub fn q(&self, j: usize, k: usize) -> bool {
        self.q_rows[j].binary_search(&k).is_ok()
    }
    /// Dense 0/1 row of the Q-matrix.
    pub fn q_dense(&self, j: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_concepts()];
        for &k in &self.q_rows[j] {
            row[k] = 1.0;
        }
        row
    }

    /// Same entity spaces, restricted to the given responses (in the given order).
    pub fn with_responses(&self, indices: &[usize]) -> Corpus {
        Corpus {
            responses: indices.iter().map(|&i| self.responses[i]).collect(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Corpus {
        Corpus {
            student_ids: self.student_ids.clone(),
            exercise_ids: self.exercise_ids.clone(),
            concept_ids: self.concept_ids.clone(),
            concept_names: self.concept_names.clone(),
            exercise_texts: self.exercise_texts.clone(),
            q_rows: self.q_rows.clone(),
            responses: Vec::new(),
        }
    }

    /// Response indices grouped by student, in log order.
    pub fn responses_by_student(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_students()];
        for (idx, r) in self.responses.iter().enumerate() {
            out[r.student].push(idx);
        }
        out
    }

    pub fn student_index(&self) -> HashMap<&str, usize> {
        index_of(&self.student_ids)
    }
    pub fn exercise_index(&self) -> HashMap<&str, usize> {
        index_of(&self.exercise_ids)
    }

    /// Drops students with fewer than `min` responses and renumbers the rest.
    pub fn filter_min_responses(&self, min: usize) -> Result<Corpus> {
        let counts = self.responses_by_student();
        let mut remap = vec![None; self.num_students()];
        let mut student_ids = Vec::new();
        for (i, rs) in counts.iter().enumerate() {
            if rs.len() >= min {
                remap[i] = Some(student_ids.len());
                student_ids.push(self.student_ids[i].clone());
            }
        }
        let responses: Vec<Response> = self
            .responses
            .iter()
            .filter_map(|r| remap[r.student].map(|s| Response { student: s, ..*r }))
            .collect();
        if responses.is_empty() {
            return Err(Error::Corpus(format!("no responses left after min-responses filter {min}")));
        }
        Ok(Corpus {
            student_ids,
            responses,
            ..self.clone_meta()
        })
    }

    /// Stacks corpora with disjoint index spaces; concept blocks are block-diagonal.
    pub fn concat(parts: &[&Corpus]) -> Result<Corpus> {
        match parts {
            [] => Err(Error::Invalid("no corpora to concatenate".into())),
            [one] => Ok((*one).clone()),
            _ => {
                let mut out = Corpus {
                    student_ids: Vec::new(),
                    exercise_ids: Vec::new(),
                    concept_ids: Vec::new(),
                    concept_names: Vec::new(),
                    exercise_texts: if parts.iter().all(|p| p.has_exercise_texts()) {
                        Some(Vec::new())
                    } else {
                        None
                    },
                    q_rows: Vec::new(),
                    responses: Vec::new(),
                };
                for (h, part) in parts.iter().enumerate() {
                    let (so, eo, co) = (out.num_students(), out.num_exercises(), out.num_concepts());
                    let tag = |id: &String| format!("d{h}:{id}");
                    out.student_ids.extend(part.student_ids.iter().map(tag));
                    out.exercise_ids.extend(part.exercise_ids.iter().map(tag));
                    out.concept_ids.extend(part.concept_ids.iter().map(tag));
                    out.concept_names.extend(part.concept_names.iter().cloned());
                    if let (Some(dst), Some(src)) = (out.exercise_texts.as_mut(), part.exercise_texts.as_ref()) {
                        dst.extend(src.iter().cloned());
                    }
                    out.q_rows
                        .extend(part.q_rows.iter().map(|row| row.iter().map(|k| k + co).collect()));
                    out.responses.extend(part.responses.iter().map(|r| Response {
                        student: r.student + so,
                        exercise: r.exercise + eo,
                        score: r.score,
                    }));
                }
                out.validate()?;
                Ok(out)
            }
        }
    }
}

fn index_of(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub responses: PathBuf,
    pub q_matrix: PathBuf,
    pub concepts: PathBuf,
    pub exercise_texts: Option<PathBuf>,
}

impl CorpusPaths {
    /// Standard file names inside one directory; `exercise_texts.csv` is used when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let texts = dir.join("exercise_texts.csv");
        CorpusPaths {
            responses: dir.join("responses.csv"),
            q_matrix: dir.join("q_matrix.csv"),
            concepts: dir.join("concepts.csv"),
            exercise_texts: texts.exists().then_some(texts),
        }
    }
}

struct CsvRows {
    file: String,
    reader: csv::Reader<File>,
}

impl CsvRows {
    fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let name = path.display().to_string();
        let found = reader.headers().map_err(|e| Error::Data {
            file: name.clone(),
            line: 1,
            field: "header".into(),
            message: e.to_string(),
        })?;
        let found: Vec<&str> = found.iter().map(str::trim).collect();
        if found != header {
            return Err(Error::Data {
                file: name,
                line: 1,
                field: "header".into(),
                message: format!("expected `{}`, found `{}`", header.join(","), found.join(",")),
            });
        }
        Ok(CsvRows { file: name, reader })
    }

    /// Yields (line, fields) for every data row.
    fn rows(mut self, header: &[&str]) -> Result<(String, Vec<(u64, Vec<String>)>)> {
        let mut out = Vec::new();
        for rec in self.reader.records() {
            let rec = rec.map_err(|e| Error::Data {
                file: self.file.clone(),
                line: e.position().map_or(0, |p| p.line()),
                field: "row".into(),
                message: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(Error::Data {
                    file: self.file.clone(),
                    line,
                    field: "row".into(),
                    message: format!("expected {} fields, found {}", header.len(), rec.len()),
                });
            }
            out.push((line, rec.iter().map(|s| s.trim().to_string()).collect()));
        }
        Ok((self.file, out))
    }
}

fn read_rows(path: &Path, header: &[&str]) -> Result<(String, Vec<(u64, Vec<String>)>)> {
    CsvRows::open(path, header)?.rows(header)
}

fn data_err(file: &str, line: u64, field: &str, message: impl Into<String>) -> Error {
    Error::Data {
        file: file.to_string(),
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

pub fn load_corpus(paths: &CorpusPaths) -> Result<Corpus> {
    let (cfile, crows) = read_rows(&paths.concepts, &["concept_id", "name"])?;
    let mut concept_ids = Vec::new();
    let mut concept_names = Vec::new();
    let mut concept_idx = HashMap::new();
    for (line, f) in crows {
        if f[0].is_empty() {
            return Err(data_err(&cfile, line, "concept_id", "empty identifier"));
        }
        if f[1].is_empty() {
            return Err(data_err(&cfile, line, "name", "empty concept name"));
        }
        if concept_idx.insert(f[0].clone(), concept_ids.len()).is_some() {
            return Err(data_err(&cfile, line, "concept_id", format!("duplicate concept `{}`", f[0])));
        }
        concept_ids.push(f[0].clone());
        concept_names.push(f[1].clone());
    }

    let (qfile, qrows) = read_rows(&paths.q_matrix, &["exercise_id", "concept_id"])?;
    let mut exercise_ids = Vec::new();
    let mut exercise_idx: HashMap<String, usize> = HashMap::new();
    let mut q_rows: Vec<Vec<usize>> = Vec::new();
    for (line, f) in qrows {
        if f[0].is_empty() {
            return Err(data_err(&qfile, line, "exercise_id", "empty identifier"));
        }
        let k = *concept_idx
            .get(&f[1])
            .ok_or_else(|| data_err(&qfile, line, "concept_id", format!("unknown concept `{}`", f[1])))?;
        let j = *exercise_idx.entry(f[0].clone()).or_insert_with(|| {
            exercise_ids.push(f[0].clone());
            q_rows.push(Vec::new());
            exercise_ids.len() - 1
        });
        q_rows[j].push(k);
    }

    let (rfile, rrows) = read_rows(&paths.responses, &["student_id", "exercise_id", "score"])?;
    if rrows.is_empty() {
        return Err(data_err(&rfile, 1, "score", "no responses"));
    }
    let mut student_ids = Vec::new();
    let mut student_idx: HashMap<String, usize> = HashMap::new();
    let mut responses = Vec::with_capacity(rrows.len());
    for (line, f) in rrows {
        if f[0].is_empty() {
            return Err(data_err(&rfile, line, "student_id", "empty identifier"));
        }
        let exercise = *exercise_idx
            .get(&f[1])
            .ok_or_else(|| data_err(&rfile, line, "exercise_id", format!("unknown exercise `{}`", f[1])))?;
        let score = match f[2].as_str() {
            "0" => 0,
            "1" => 1,
            other => return Err(data_err(&rfile, line, "score", format!("score `{other}` is not 0 or 1"))),
        };
        let student = *student_idx.entry(f[0].clone()).or_insert_with(|| {
            student_ids.push(f[0].clone());
            student_ids.len() - 1
        });
        responses.push(Response {
            student,
            exercise,
            score,
        });
    }

    let mut corpus = Corpus::new(student_ids, exercise_ids, concept_ids, concept_names, q_rows, responses)?;

    if let Some(tpath) = &paths.exercise_texts {
        let (tfile, trows) = read_rows(tpath, &["exercise_id", "text"])?;
        let mut texts = vec![String::new(); corpus.num_exercises()];
        for (line, f) in trows {
            let j = *exercise_idx
                .get(&f[0])
                .ok_or_else(|| data_err(&tfile, line, "exercise_id", format!("unknown exercise `{}`", f[0])))?;
            texts[j] = f[1].clone();
        }
        corpus = corpus.with_exercise_texts(texts)?;
    }
    Ok(corpus)
}

/// Writes the corpus back out in the canonical CSV layout (index order).
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, header: [&str; 2], rows: Vec<[String; 2]>| -> Result<()> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
        let res = (|| {
            w.write_record(header)?;
            for row in rows {
                w.write_record(&row)?;
            }
            w.flush()?;
            Ok::<_, csv::Error>(())
        })();
        res.map_err(|e| Error::io(&path, e.into()))
    };
    write(
        "concepts.csv",
        ["concept_id", "name"],
        (0..corpus.num_concepts())
            .map(|k| [corpus.concept_ids[k].clone(), corpus.concept_names[k].clone()])
            .collect(),
    )?;
    write(
        "q_matrix.csv",
        ["exercise_id", "concept_id"],
        (0..corpus.num_exercises())
            .flat_map(|j| {
                corpus.q_rows[j]
                    .iter()
                    .map(move |&k| [corpus.exercise_ids[j].clone(), corpus.concept_ids[k].clone()])
            })
            .collect(),
    )?;
    if let Some(texts) = &corpus.exercise_texts {
        write(
            "exercise_texts.csv",
            ["exercise_id", "text"],
            texts
                .iter()
                .enumerate()
                .map(|(j, t)| [corpus.exercise_ids[j].clone(), t.clone()])
                .collect(),
        )?;
    }
    let path = dir.join("responses.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    let res = (|| {
        w.write_record(["student_id", "exercise_id", "score"])?;
        for r in &corpus.responses {
            w.write_record([
                corpus.student_ids[r.student].as_str(),
                corpus.exercise_ids[r.exercise].as_str(),
                if r.score == 1 { "1" } else { "0" },
            ])?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(&path, e))
}

// ---------------------------------------------------------------------------
// Statistics

/// Average correct rate of one exercise; `None` when nobody answered it.
pub fn compute_acr(corpus: &Corpus, exercise: usize) -> Option<f64> {
    let (sum, count) = corpus
        .responses
        .iter()
        .filter(|r| r.exercise == exercise)
        .fold((0u64, 0u64), |(s, c), r| (s + r.score as u64, c + 1));
    (count > 0).then(|| sum as f64 / count as f64)
}

/// `compute_acr` for every exercise in one pass.
pub fn acr_table(corpus: &Corpus) -> Vec<Option<f64>> {
    let mut sums = vec![(0u64, 0u64); corpus.num_exercises()];
    for r in &corpus.responses {
        sums[r.exercise].0 += r.score as u64;
        sums[r.exercise].1 += 1;
    }
    sums.into_iter()
        .map(|(s, c)| (c > 0).then(|| s as f64 / c as f64))
        .collect()
}

/// Sparse student × exercise score matrix; later duplicates overwrite earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: Vec<Vec<(usize, u8)>>,
    num_exercises: usize,
    pub duplicates: usize,
}

impl ScoreMatrix {
    pub fn get(&self, student: usize, exercise: usize) -> Option<u8> {
        let row = &self.rows[student];
        row.binary_search_by_key(&exercise, |&(j, _)| j).ok().map(|p| row[p].1)
    }
    /// Present cells of one student, sorted by exercise.
    pub fn row(&self, student: usize) -> &[(usize, u8)] {
        &self.rows[student]
    }
    pub fn num_students(&self) -> usize {
        self.rows.len()
    }
    pub fn num_exercises(&self) -> usize {
        self.num_exercises
    }
    pub fn present(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

pub fn to_score_matrix(corpus: &Corpus) -> ScoreMatrix {
    let mut maps: Vec<BTreeMap<usize, u8>> = vec![BTreeMap::new(); corpus.num_students()];
    let mut duplicates = 0;
    for r in &corpus.responses {
        if maps[r.student].insert(r.exercise, r.score).is_some() {
            duplicates += 1;
        }
    }
    ScoreMatrix {
        rows: maps.into_iter().map(|m| m.into_iter().collect()).collect(),
        num_exercises: corpus.num_exercises(),
        duplicates,
    }
}

// ---------------------------------------------------------------------------
// Splits

/// Bucket sizes for `n` items under `ratios`, using largest-remainder rounding.
/// Ties in the fractional part go to the earlier bucket.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // Nudge by a tiny amount so 0.7 * 10 = 6.9999.. still floors to 7.
    let mut sizes: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - sizes[a] as f64;
        let fb = quotas[b] - sizes[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &b in order.iter().take(n.saturating_sub(assigned)) {
        sizes[b] += 1;
    }
    sizes
}

fn check_ratios(ratios: &[f64]) -> Result<()> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransductiveSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl TransductiveSplit {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.valid).chain(&self.test).copied()
    }
}

pub fn split_transductive(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<TransductiveSplit> {
    let all: Vec<usize> = (0..corpus.responses.len()).collect();
    split_indices(&all, ratios, seed)
}

/// Shuffles an arbitrary response-index universe and cuts it at the ratio boundaries.
pub fn split_indices(universe: &[usize], ratios: [f64; 3], seed: u64) -> Result<TransductiveSplit> {
    check_ratios(&ratios)?;
    let mut perm = universe.to_vec();
    perm.shuffle(&mut rng::seeded(seed, stream::SPLIT));
    let sizes = largest_remainder(perm.len(), &ratios);
    let test = perm.split_off(sizes[0] + sizes[1]);
    let valid = perm.split_off(sizes[0]);
    Ok(TransductiveSplit {
        train: perm,
        valid,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InductiveSplit {
    pub existing_students: Vec<usize>,
    pub new_students: Vec<usize>,
    /// All responses of existing students.
    pub existing_responses: Vec<usize>,
    /// Per new student (aligned with `new_students`): responses used to build the attribute text.
    pub new_support: Vec<Vec<usize>>,
    /// Per new student: responses that are scored.
    pub new_eval: Vec<Vec<usize>>,
    /// New students with fewer than 2 responses; evaluated on everything with an empty support set.
    pub sparse_students: Vec<usize>,
}

pub fn split_inductive(corpus: &Corpus, seed: u64) -> Result<InductiveSplit> {
    let m = corpus.num_students();
    if m < 2 {
        return Err(Error::Invalid("inductive split needs at least 2 students".into()));
    }
    let mut rng = rng::seeded(seed, stream::SPLIT);
    let mut students: Vec<usize> = (0..m).collect();
    students.shuffle(&mut rng);
    let new_students = students.split_off(m / 2);
    let mut existing_students = students;
    existing_students.sort_unstable();
    let mut new_students = new_students;
    new_students.sort_unstable();

    let by_student = corpus.responses_by_student();
    let existing_responses = {
        let mut v: Vec<usize> = existing_students.iter().flat_map(|&s| by_student[s].iter().copied()).collect();
        v.sort_unstable();
        v
    };
    let mut new_support = Vec::with_capacity(new_students.len());
    let mut new_eval = Vec::with_capacity(new_students.len());
    let mut sparse_students = Vec::new();
    for &s in &new_students {
        let mut rs = by_student[s].clone();
        if rs.len() < 2 {
            sparse_students.push(s);
            new_support.push(Vec::new());
            new_eval.push(rs);
            continue;
        }
        rs.shuffle(&mut rng);
        let eval = rs.split_off(rs.len() / 2);
        let mut support = rs;
        support.sort_unstable();
        let mut eval = eval;
        eval.sort_unstable();
        new_support.push(support);
        new_eval.push(eval);
    }
    Ok(InductiveSplit {
        existing_students,
        new_students,
        existing_responses,
        new_support,
        new_eval,
        sparse_students,
    })
}

/// Source domains, one target domain, and the target's support/evaluation cut.
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub sources: Vec<Corpus>,
    pub target: Corpus,
    pub target_support: Vec<usize>,
    pub target_eval: Vec<usize>,
}

impl DomainSpec {
    /// `shared_namespace` declares that identifiers are comparable across corpora,
    /// in which case overlapping exercise or concept identifiers are rejected.
    pub fn new(
        sources: Vec<Corpus>,
        target: Corpus,
        target_support: Vec<usize>,
        target_eval: Vec<usize>,
        shared_namespace: bool,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Invalid("zero-shot needs at least one source corpus".into()));
        }
        let support: HashSet<usize> = target_support.iter().copied().collect();
        if target_eval.iter().any(|i| support.contains(i)) {
            return Err(Error::Invalid("target support and evaluation responses overlap".into()));
        }
        if target_support
            .iter()
            .chain(&target_eval)
            .any(|&i| i >= target.responses().len())
        {
            return Err(Error::Invalid("target response index out of range".into()));
        }
        if shared_namespace {
            let te: HashSet<&str> = target.exercise_ids.iter().map(String::as_str).collect();
            let tc: HashSet<&str> = target.concept_ids.iter().map(String::as_str).collect();
            for src in &sources {
                if let Some(id) = src.exercise_ids.iter().find(|id| te.contains(id.as_str())) {
                    return Err(Error::Invalid(format!("exercise `{id}` appears in source and target")));
                }
                if let Some(id) = src.concept_ids.iter().find(|id| tc.contains(id.as_str())) {
                    return Err(Error::Invalid(format!("concept `{id}` appears in source and target")));
                }
            }
        }
        Ok(DomainSpec {
            sources,
            target,
            target_support,
            target_eval,
        })
    }

    /// Random per-response support/evaluation cut of the target.
    pub fn split_target(target: &Corpus, support_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut all: Vec<usize> = (0..target.responses().len()).collect();
        all.shuffle(&mut rng::seeded(seed, stream::SPLIT));
        let sizes = largest_remainder(all.len(), &[support_fraction, 1.0 - support_fraction]);
        let mut eval = all.split_off(sizes[0]);
        let mut support = all;
        support.sort_unstable();
        eval.sort_unstable();
        (support, eval)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatStudent {
    pub student: usize,
    /// Logged responses the simulated test may draw from.
    pub pool: Vec<usize>,
    /// Held-out logged responses used to score the ability estimate.
    pub eval: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatSplit {
    pub pretrain: Vec<usize>,
    pub students: Vec<CatStudent>,
}

/// `pretrain_fraction` of all logs go to pre-training; each student's remaining
/// logs are cut into a candidate pool and `eval_fraction` held-out responses.
pub fn split_cat(corpus: &Corpus, pretrain_fraction: f64, eval_fraction: f64, seed: u64) -> Result<CatSplit> {
    check_ratios(&[pretrain_fraction, 1.0 - pretrain_fraction])?;
    check_ratios(&[eval_fraction, 1.0 - eval_fraction])?;
    let mut rng = rng::seeded(seed, stream::SPLIT);
    let mut all: Vec<usize> = (0..corpus.responses.len()).collect();
    all.shuffle(&mut rng);
    let n_pre = largest_remainder(all.len(), &[pretrain_fraction, 1.0 - pretrain_fraction])[0];
    let rest = all.split_off(n_pre);
    let mut pretrain = all;
    pretrain.sort_unstable();

    let mut per: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_students()];
    let mut rest = rest;
    rest.sort_unstable();
    for idx in rest {
        per[corpus.responses[idx].student].push(idx);
    }
    let mut students = Vec::new();
    for (s, mut rs) in per.into_iter().enumerate() {
        if rs.is_empty() {
            continue;
        }
        rs.shuffle(&mut rng);
        let n_eval = largest_remainder(rs.len(), &[eval_fraction, 1.0 - eval_fraction])[0].max(1);
        let pool = rs.split_off(n_eval.min(rs.len()));
        let mut eval = rs;
        eval.sort_unstable();
        let mut pool = pool;
        pool.sort_unstable();
        students.push(CatStudent { student: s, pool, eval });
    }
    Ok(CatSplit { pretrain, students })
}

/// Keeps at most `cap` responses per student, sampled uniformly without
/// replacement; log order is preserved among the kept responses.
pub fn cap_student_responses(corpus: &Corpus, cap: usize, seed: u64) -> Corpus {
    let keep = capped_indices(corpus, &(0..corpus.responses.len()).collect::<Vec<_>>(), cap, seed);
    corpus.with_responses(&keep)
}

/// Cap applied to a subset of response indices; returns kept indices in ascending order.
pub fn capped_indices(corpus: &Corpus, indices: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    let cap = cap.max(1);
    let mut rng = rng::seeded(seed, stream::CAP);
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); corpus.num_students()];
    for &idx in indices {
        per[corpus.responses[idx].student].push(idx);
    }
    let mut keep = Vec::with_capacity(indices.len());
    for rs in per {
        if rs.len() <= cap {
            keep.extend(rs);
        } else {
            keep.extend(rs.choose_multiple(&mut rng, cap).copied());
        }
    }
    keep.sort_unstable();
    keep
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Builds a corpus from `(student, exercise, score)` triples with generated ids.
    pub fn corpus(m: usize, q_rows: Vec<Vec<usize>>, names: &[&str], logs: &[(usize, usize, u8)]) -> Corpus {
        Corpus::new(
            (0..m).map(|i| format!("s{i}")).collect(),
            (0..q_rows.len()).map(|j| format!("e{j}")).collect(),
            (0..names.len()).map(|k| format!("c{k}")).collect(),
            names.iter().map(|s| s.to_string()).collect(),
            q_rows,
            logs.iter()
                .map(|&(student, exercise, score)| Response {
                    student,
                    exercise,
                    score,
                })
                .collect(),
        )
        .unwrap()
    }
}
