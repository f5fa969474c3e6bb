//! Textual embeddings for students, exercises and concepts.
//!
//! The built-in encoder is a desk-scale stand-in for a language model:
//! feature-hashed tokens are looked up in a trainable table, a learnable role
//! vector is added to every token, tokens are mean-pooled and a `tanh`
//! projection head maps the result to `h ∈ R^d`. Externally produced vectors
//! can be imported instead through the `embeddings.jsonl` format.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attributes::{AttributeRecord, AttributeSet, Role};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::nncore::ops::{affine_backward, affine_into, tanh_backward};
use crate::nncore::{load_checkpoint, save_checkpoint, Grads, ParamId, ParamStore, Values};
use crate::rng::{self, stream};

/// 64-bit FNV-1a.
#[derive(Debug, Clone)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fnv1a(Self::OFFSET)
    }
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
    pub fn hash(bytes: &[u8]) -> u64 {
        let mut h = Self::new();
        h.write(bytes);
        h.finish()
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

/// Lowercased alphanumeric runs; everything else separates tokens.
///
/// A run of two or more digits also emits `#d` and `#dd` prefix tokens so
/// numerals that share leading digits (e.g. correct rates 0.734 and 0.751)
/// share features.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let word = word.to_lowercase();
        let digits = word.chars().all(|c| c.is_ascii_digit());
        if digits && word.len() >= 2 {
            out.push(format!("#{}", &word[..1]));
            out.push(format!("#{}", &word[..2]));
        }
        out.push(word);
    }
    out
}

/// Token ids: FNV-1a of the UTF-8 token, modulo `vocab_size`.
pub fn hash_tokens(text: &str, vocab_size: usize) -> Vec<usize> {
    tokenize(text)
        .iter()
        .map(|t| (Fnv1a::hash(t.as_bytes()) % vocab_size as u64) as usize)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub dim: usize,
}

pub const MIN_VOCAB: usize = 1 << 12;

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1 << 16,
            d_lm: 128,
            dim: 64,
        }
    }
}

/// Token ids per segment, ready for repeated forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedRecord {
    pub role: Role,
    pub segments: Vec<Vec<usize>>,
}

/// Forward cache for one segment.
#[derive(Debug, Clone)]
pub struct SegmentPass {
    pub x: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub h: Vec<f64>,
    /// Set when no tokens were available and only the role vector was encoded.
    pub role_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeEncoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    tokens: ParamId,
    roles: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl AttributeEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        if config.vocab_size < MIN_VOCAB {
            return Err(Error::Invalid(format!("vocab size must be at least {MIN_VOCAB}")));
        }
        if config.d_lm == 0 || config.dim == 0 {
            return Err(Error::Invalid("encoder dimensions must be positive".into()));
        }
        let mut r = rng::seeded(seed, stream::ENCODER_INIT);
        let EncoderConfig { vocab_size, d_lm, dim } = config;
        let mut store = ParamStore::new();
        let tokens = store.add_row_sparse("encoder.tokens", &[vocab_size, d_lm], rng::normal_vec(&mut r, vocab_size * d_lm, 1.0));
        let roles = store.add("encoder.roles", &[3, d_lm], vec![0.0; 3 * d_lm]);
        let bound = (6.0 / (d_lm + dim) as f64).sqrt();
        let proj_w = store.add("encoder.proj.w", &[d_lm, dim], rng::uniform_vec(&mut r, d_lm * dim, bound));
        let proj_b = store.add("encoder.proj.b", &[dim], vec![0.0; dim]);
        Ok(AttributeEncoder {
            config,
            store,
            tokens,
            roles,
            proj_w,
            proj_b,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn role_param(&self) -> ParamId {
        self.roles
    }

    pub fn tokenize(&self, record: &AttributeRecord) -> TokenizedRecord {
        TokenizedRecord {
            role: record.role,
            segments: record
                .segments
                .iter()
                .map(|s| hash_tokens(s, self.config.vocab_size))
                .collect(),
        }
    }

    /// One segment: mean of `p_base + p_role` over tokens, then `tanh(x W + b)`.
    /// An empty token list encodes the role vector alone.
    pub fn forward_segment(&self, values: &Values, tokens: &[usize], role: Role) -> SegmentPass {
        let d_lm = self.config.d_lm;
        let mut x = values.row(self.roles, d_lm, role.index()).to_vec();
        if !tokens.is_empty() {
            let inv = 1.0 / tokens.len() as f64;
            for &t in tokens {
                for (xi, ti) in x.iter_mut().zip(values.row(self.tokens, d_lm, t)) {
                    *xi += ti * inv;
                }
            }
        }
        let mut h = values[self.proj_b].to_vec();
        affine_into(&x, &values[self.proj_w], &mut h);
        for v in &mut h {
            *v = v.tanh();
        }
        SegmentPass { x, h }
    }

    pub fn backward_segment(&self, values: &Values, grads: &mut Grads, tokens: &[usize], role: Role, pass: &SegmentPass, dh: &[f64]) {
        let d_lm = self.config.d_lm;
        let dpre: Vec<f64> = pass.h.iter().zip(dh).map(|(&y, &g)| tanh_backward(y, g)).collect();
        let mut dx = vec![0.0; d_lm];
        let (dw, db) = grads.pair_mut(self.proj_w, self.proj_b);
        affine_backward(&pass.x, &values[self.proj_w], &dpre, dw, db, Some(&mut dx));
        for (g, d) in grads.row_mut(self.roles, role.index()).iter_mut().zip(&dx) {
            *g += d;
        }
        if !tokens.is_empty() {
            let inv = 1.0 / tokens.len() as f64;
            for &t in tokens {
                for (g, d) in grads.row_mut(self.tokens, t).iter_mut().zip(&dx) {
                    *g += d * inv;
                }
            }
        }
    }

    /// Frozen-parameter encoding: segments are encoded separately and averaged.
    pub fn encode_tokenized(&self, record: &TokenizedRecord) -> Encoding {
        let values = self.store.values();
        if record.segments.is_empty() {
            return Encoding {
                h: self.forward_segment(values, &[], record.role).h,
                role_only: true,
            };
        }
        let hs: Vec<Vec<f64>> = record
            .segments
            .iter()
            .map(|seg| self.forward_segment(values, seg, record.role).h)
            .collect();
        Encoding {
            h: pool_student(&hs).expect("non-empty"),
            role_only: record.segments.iter().all(Vec::is_empty),
        }
    }

    pub fn encode(&self, record: &AttributeRecord) -> Encoding {
        self.encode_tokenized(&self.tokenize(record))
    }

    /// Encodes every record of an attribute set into a table.
    pub fn encode_set(&self, set: &AttributeSet) -> EmbeddingTable {
        let enc = |recs: &[AttributeRecord]| recs.iter().map(|r| self.encode(r).h).collect();
        EmbeddingTable {
            dim: self.dim(),
            provenance: Provenance::BuiltIn,
            students: enc(&set.students),
            exercises: enc(&set.exercises),
            concepts: enc(&set.concepts),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "kind": "attribute-encoder", "config": self.config });
        save_checkpoint(path, &meta, &self.store.named_arrays())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (meta, arrays) = load_checkpoint(path)?;
        let config: EncoderConfig = serde_json::from_value(meta["config"].clone()).map_err(|e| Error::Format {
            format: "checkpoint",
            path: path.to_path_buf(),
            message: format!("encoder config: {e}"),
        })?;
        let mut enc = AttributeEncoder::new(config, 0)?;
        enc.store.load_named(&arrays)?;
        Ok(enc)
    }
}

/// Arithmetic mean of per-response embeddings.
pub fn pool_student(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::Invalid("student has no responses".into()))?;
    let mut out = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != out.len() {
            return Err(Error::Shape("pooled embeddings differ in length".into()));
        }
        for (o, v) in out.iter_mut().zip(e) {
            *o += v;
        }
    }
    let inv = 1.0 / embeddings.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embedding tables and embeddings.jsonl

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    BuiltIn,
    Imported,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub provenance: Provenance,
    pub students: Vec<Vec<f64>>,
    pub exercises: Vec<Vec<f64>>,
    pub concepts: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn role(&self, role: Role) -> &[Vec<f64>] {
        match role {
            Role::Student => &self.students,
            Role::Exercise => &self.exercises,
            Role::Concept => &self.concepts,
        }
    }

    pub fn role_mut(&mut self, role: Role) -> &mut Vec<Vec<f64>> {
        match role {
            Role::Student => &mut self.students,
            Role::Exercise => &mut self.exercises,
            Role::Concept => &mut self.concepts,
        }
    }

    pub fn count(&self) -> usize {
        self.students.len() + self.exercises.len() + self.concepts.len()
    }

    /// Values after the 9-significant-digit rounding the file format applies.
    pub fn quantized(&self) -> EmbeddingTable {
        let q = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| r.iter().map(|&x| format_sig9(x).parse().unwrap()).collect())
                .collect()
        };
        EmbeddingTable {
            dim: self.dim,
            provenance: self.provenance,
            students: q(&self.students),
            exercises: q(&self.exercises),
            concepts: q(&self.concepts),
        }
    }

    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        let counts = [corpus.num_students(), corpus.num_exercises(), corpus.num_concepts()];
        for (role, n) in Role::ALL.into_iter().zip(counts) {
            let rows = self.role(role);
            if rows.len() != n {
                return Err(Error::Shape(format!("{} {} rows for {} entities", rows.len(), role.as_str(), n)));
            }
            if rows.iter().any(|r| r.len() != self.dim) {
                return Err(Error::Shape(format!("{} row of wrong dimension", role.as_str())));
            }
            if rows.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite {} embedding", role.as_str())));
            }
        }
        Ok(())
    }
}

pub const EMB_FORMAT: &str = "eduembed-emb";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbHeader {
    format: String,
    version: u32,
    dim: usize,
    count: usize,
}

#[derive(Debug, Clone, Deserialize)]
struct EmbLine {
    role: Role,
    id: String,
    vec: Vec<f64>,
}

/// Nine significant digits in scientific notation, a valid JSON number.
pub fn format_sig9(x: f64) -> String {
    let s = format!("{x:.8e}");
    if s.starts_with("-0.00000000e0") {
        "0.00000000e0".to_string()
    } else {
        s
    }
}

/// Rows in role order (students, exercises, concepts), each by index.
pub fn save_embedding_file(table: &EmbeddingTable, corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    table.validate(corpus)?;
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = EmbHeader {
        format: EMB_FORMAT.into(),
        version: 1,
        dim: table.dim,
        count: table.count(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    let mut line = String::new();
    for role in Role::ALL {
        for (idx, row) in table.role(role).iter().enumerate() {
            let id = match role {
                Role::Student => corpus.student_id(idx),
                Role::Exercise => corpus.exercise_id(idx),
                Role::Concept => corpus.concept_id(idx),
            };
            line.clear();
            write!(
                line,
                "{{\"role\":\"{}\",\"id\":{},\"vec\":[",
                role.as_str(),
                serde_json::to_string(id).expect("id serializes")
            )
            .unwrap();
            for (k, x) in row.iter().enumerate() {
                if k > 0 {
                    line.push(',');
                }
                line.push_str(&format_sig9(*x));
            }
            line.push_str("]}");
            writeln!(w, "{line}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_embedding_file(path: impl AsRef<Path>, corpus: &Corpus) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let bad = |message: String| Error::Format {
        format: EMB_FORMAT,
        path: path.to_path_buf(),
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut lines = reader.lines();
    let header: EmbHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?).map_err(|e| bad(format!("line 1: {e}")))?,
        None => return Err(bad("missing header".into())),
    };
    if header.format != EMB_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported header {}/{}", header.format, header.version)));
    }
    let index: [HashMap<&str, usize>; 3] = [
        corpus.student_index(),
        corpus.exercise_index(),
        HashMap::from_iter(corpus.concept_ids().iter().enumerate().map(|(k, s)| (s.as_str(), k))),
    ];
    let counts = [corpus.num_students(), corpus.num_exercises(), corpus.num_concepts()];
    let mut rows: [Vec<Option<Vec<f64>>>; 3] = counts.map(|n| vec![None; n]);
    let mut seen = 0usize;
    for (n, l) in lines.enumerate() {
        let lineno = n + 2;
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        let rec: EmbLine = serde_json::from_str(&l).map_err(|e| bad(format!("line {lineno}: {e}")))?;
        let r = rec.role.index();
        if rec.vec.len() != header.dim {
            return Err(bad(format!(
                "line {lineno}: {} `{}` has {} values, header dim is {}",
                rec.role.as_str(),
                rec.id,
                rec.vec.len(),
                header.dim
            )));
        }
        if rec.vec.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("line {lineno}: non-finite value for `{}`", rec.id)));
        }
        let idx = *index[r]
            .get(rec.id.as_str())
            .ok_or_else(|| bad(format!("line {lineno}: unknown {} `{}`", rec.role.as_str(), rec.id)))?;
        if rows[r][idx].replace(rec.vec).is_some() {
            return Err(bad(format!("line {lineno}: duplicate {} `{}`", rec.role.as_str(), rec.id)));
        }
        seen += 1;
    }
    if seen != header.count {
        return Err(bad(format!("header count {} but {seen} rows", header.count)));
    }
    let mut take = |role: Role| -> Result<Vec<Vec<f64>>> {
        std::mem::take(&mut rows[role.index()])
            .into_iter()
            .enumerate()
            .map(|(idx, row)| {
                row.ok_or_else(|| {
                    let id = match role {
                        Role::Student => corpus.student_id(idx),
                        Role::Exercise => corpus.exercise_id(idx),
                        Role::Concept => corpus.concept_id(idx),
                    };
                    bad(format!("missing {} `{id}`", role.as_str()))
                })
            })
            .collect()
    };
    Ok(EmbeddingTable {
        dim: header.dim,
        provenance: Provenance::Imported,
        students: take(Role::Student)?,
        exercises: take(Role::Exercise)?,
        concepts: take(Role::Concept)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attributes::{AttributeOptions, AttributeSet};
    use crate::corpus::fixtures::corpus;
    use crate::nncore::grad_check;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: MIN_VOCAB,
            d_lm: 12,
            dim: 6,
        }
    }

    #[test]
    fn hashing_rules() {
        let v = 1 << 16;
        assert_eq!(hash_tokens("Algebra is fun", v), hash_tokens("Algebra is fun", v));
        assert_eq!(hash_tokens("Algebra", v), hash_tokens("algebra", v));
        assert!(hash_tokens("", v).is_empty());
        assert!(hash_tokens("<>, .", v).is_empty());
        assert_eq!(tokenize("<average correct rate is 0.750>"), ["average", "correct", "rate", "is", "0", "#7", "#75", "750"]);
        assert!(hash_tokens("x y z", v).iter().all(|&t| t < v));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(Fnv1a::hash(b""), 0xcbf29ce484222325);
        assert_eq!(Fnv1a::hash(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn zero_role_vector_is_role_free() {
        let enc = AttributeEncoder::new(small_config(), 1).unwrap();
        let toks = hash_tokens("concept name is sets", enc.config.vocab_size);
        let v = enc.store.values();
        let a = enc.forward_segment(v, &toks, Role::Student).h;
        let b = enc.forward_segment(v, &toks, Role::Concept).h;
        assert_eq!(a, b);
    }

    #[test]
    fn nonzero_role_vectors_separate_roles() {
        let mut enc = AttributeEncoder::new(small_config(), 1).unwrap();
        let roles = enc.role_param();
        let d = enc.config.d_lm;
        enc.store.value_mut(roles)[..d].iter_mut().for_each(|x| *x = 0.3);
        let toks = hash_tokens("same text", enc.config.vocab_size);
        let v = enc.store.values();
        assert_ne!(enc.forward_segment(v, &toks, Role::Student).h, enc.forward_segment(v, &toks, Role::Exercise).h);
    }

    #[test]
    fn empty_tokens_encode_role_vector() {
        let enc = AttributeEncoder::new(small_config(), 1).unwrap();
        let rec = TokenizedRecord {
            role: Role::Student,
            segments: vec![],
        };
        let e = enc.encode_tokenized(&rec);
        assert!(e.role_only);
        // zero role vector and zero bias ⇒ tanh(0) = 0
        assert!(e.h.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn segment_gradient_passes_check() {
        let mut enc = AttributeEncoder::new(small_config(), 2).unwrap();
        let roles = enc.role_param();
        let mut r = rng::seeded(5, 0);
        let init = rng::normal_vec(&mut r, 3 * enc.config.d_lm, 0.2);
        enc.store.value_mut(roles).copy_from_slice(&init);
        let segs: Vec<Vec<usize>> = ["<related concepts is sets> <response is correct>", "<concept name is sets>"]
            .iter()
            .map(|s| hash_tokens(s, enc.config.vocab_size))
            .collect();
        let probe = rng::normal_vec(&mut r, enc.dim(), 1.0);
        let mut store = enc.store.clone();
        let report = grad_check(
            &mut store,
            |s| {
                let (vals, grads) = s.split_mut();
                let mut loss = 0.0;
                for (n, seg) in segs.iter().enumerate() {
                    let role = if n == 0 { Role::Student } else { Role::Concept };
                    let pass = enc.forward_segment(vals, seg, role);
                    loss += pass.h.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>();
                    enc.backward_segment(vals, grads, seg, role, &pass, &probe);
                }
                loss
            },
            1e-5,
            32,
            1,
        );
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn pooling_rules() {
        assert_eq!(pool_student(&[vec![1.0, 3.0], vec![3.0, 1.0]]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(pool_student(&[vec![0.25, -1.0]]).unwrap(), vec![0.25, -1.0]);
        assert!(pool_student(&[]).unwrap_err().to_string().contains("student has no responses"));
    }

    fn fixture() -> (Corpus, EmbeddingTable) {
        let c = corpus(2, vec![vec![0], vec![0, 1]], &["Algebra", "Géo"], &[(0, 0, 1), (1, 1, 0), (0, 1, 1)]);
        let enc = AttributeEncoder::new(small_config(), 3).unwrap();
        let set = AttributeSet::build(&c, 50, 0, AttributeOptions::default());
        let table = enc.encode_set(&set);
        (c, table)
    }

    #[test]
    fn embedding_file_round_trip_and_stability() {
        let (c, table) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        save_embedding_file(&table, &c, &p1).unwrap();
        let back = load_embedding_file(&p1, &c).unwrap();
        assert_eq!(back.provenance, Provenance::Imported);
        let q = table.quantized();
        assert_eq!((back.students.clone(), back.exercises.clone(), back.concepts.clone()), (q.students, q.exercises, q.concepts));
        save_embedding_file(&back, &c, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first, r#"{"format":"eduembed-emb","version":1,"dim":6,"count":6}"#);
        assert_eq!(text.lines().count(), 7);
        let row: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        assert_eq!(row["role"], "student");
        assert!(text.lines().nth(1).unwrap().contains("e")); // scientific notation
    }

    #[test]
    fn embedding_file_errors() {
        let (c, table) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        save_embedding_file(&table, &c, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();

        let missing: Vec<&str> = text.lines().filter(|l| !l.contains("\"id\":\"e1\"")).collect();
        let missing = missing.join("\n").replace("\"count\":6", "\"count\":5");
        std::fs::write(&p, missing).unwrap();
        let err = load_embedding_file(&p, &c).unwrap_err().to_string();
        assert!(err.contains("e1"), "{err}");

        // drop the last component of the first row
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[1].rfind(',').unwrap();
        lines[1] = format!("{}]}}", &lines[1][..cut]);
        std::fs::write(&p, lines.join("\n")).unwrap();
        let err = load_embedding_file(&p, &c).unwrap_err().to_string();
        assert!(err.contains("header dim is 6"), "{err}");

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = lines[1].clone();
        std::fs::write(&p, lines.join("\n")).unwrap();
        assert!(load_embedding_file(&p, &c).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn accepts_extra_header_metadata() {
        let (c, table) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        save_embedding_file(&table, &c, &p).unwrap();
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replacen("\"count\":6}", "\"count\":6,\"source_model\":\"tiny\",\"pool\":\"mean\"}", 1);
        std::fs::write(&p, text).unwrap();
        assert!(load_embedding_file(&p, &c).is_ok());
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let enc = AttributeEncoder::new(small_config(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.ckpt");
        enc.save(&p).unwrap();
        assert_eq!(AttributeEncoder::load(&p).unwrap(), enc);
    }
}
