//! Role-specific attribute records rendered as `<name is value>` text.
//!
//! Concepts carry their name; exercises carry their related concepts and the
//! average correct rate; students carry one segment per answered exercise (the
//! exercise's own attribute text followed by the response). Student segments
//! are kept separately so the encoder can embed them one by one and pool.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{acr_table, capped_indices, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Exercise,
    Concept,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Student, Role::Exercise, Role::Concept];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Student => "student",
            Role::Exercise => "exercise",
            Role::Concept => "concept",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributeRecord {
    pub role: Role,
    pub entity: usize,
    pub fields: Vec<(String, String)>,
    /// Texts embedded independently and averaged. Concepts and exercises have
    /// one segment; students one per response, none when they have no responses.
    pub segments: Vec<String>,
    pub rendered: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeOptions {
    /// Append the exercise body as a `content` field when texts are available.
    pub include_content: bool,
}

pub fn render_field(name: &str, value: &str) -> String {
    format!("<{name} is {value}>")
}

fn render(fields: &[(String, String)]) -> String {
    fields
        .iter()
        .map(|(n, v)| render_field(n, v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// ACR to three decimals, halves rounded up.
pub fn format_rate(rate: Option<f64>) -> String {
    match rate {
        None => "unknown".to_string(),
        Some(r) => {
            let milli = (r * 1000.0 + 0.5 + 1e-9).floor() as u64;
            format!("{}.{:03}", milli / 1000, milli % 1000)
        }
    }
}

pub fn concept_attribute(corpus: &Corpus, k: usize) -> AttributeRecord {
    let fields = vec![("concept name".to_string(), corpus.concept_name(k).to_string())];
    let rendered = render(&fields);
    AttributeRecord {
        role: Role::Concept,
        entity: k,
        fields,
        segments: vec![rendered.clone()],
        rendered,
    }
}

fn exercise_record(corpus: &Corpus, j: usize, acr: Option<f64>, opts: AttributeOptions) -> AttributeRecord {
    let names: Vec<&str> = corpus.q_row(j).iter().map(|&k| corpus.concept_name(k)).collect();
    let mut fields = vec![
        ("related concepts".to_string(), names.join(", ")),
        ("average correct rate".to_string(), format_rate(acr)),
    ];
    if opts.include_content {
        if let Some(text) = corpus.exercise_text(j).filter(|t| !t.is_empty()) {
            fields.push(("content".to_string(), text.to_string()));
        }
    }
    let rendered = render(&fields);
    AttributeRecord {
        role: Role::Exercise,
        entity: j,
        fields,
        segments: vec![rendered.clone()],
        rendered,
    }
}

pub fn exercise_attribute(corpus: &Corpus, j: usize) -> AttributeRecord {
    exercise_record(corpus, j, crate::corpus::compute_acr(corpus, j), AttributeOptions::default())
}

/// Student record built from the given response indices, in the order given.
pub fn student_attribute_from(
    corpus: &Corpus,
    student: usize,
    responses: &[usize],
    exercises: &[AttributeRecord],
) -> AttributeRecord {
    let mut fields = Vec::new();
    let mut segments = Vec::with_capacity(responses.len());
    for &idx in responses {
        let r = corpus.responses()[idx];
        debug_assert_eq!(r.student, student);
        let ex = &exercises[r.exercise];
        let verdict = if r.score == 1 { "correct" } else { "wrong" };
        fields.extend(ex.fields.iter().cloned());
        fields.push(("response".to_string(), verdict.to_string()));
        segments.push(format!("{} {}", ex.rendered, render_field("response", verdict)));
    }
    if responses.is_empty() {
        fields.push(("responses".to_string(), "none".to_string()));
    }
    let rendered = render(&fields);
    AttributeRecord {
        role: Role::Student,
        entity: student,
        fields,
        segments,
        rendered,
    }
}

/// Student record over all of the student's logs in `corpus`, capped at `cap`.
pub fn student_attribute(corpus: &Corpus, i: usize, cap: usize, seed: u64) -> AttributeRecord {
    let mine: Vec<usize> = corpus
        .responses()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.student == i)
        .map(|(idx, _)| idx)
        .collect();
    let kept = capped_indices(corpus, &mine, cap, seed);
    let exercises = exercise_attributes(corpus, AttributeOptions::default());
    student_attribute_from(corpus, i, &kept, &exercises)
}

/// Exercise records for every exercise, with ACR taken from `corpus`'s logs.
pub fn exercise_attributes(corpus: &Corpus, opts: AttributeOptions) -> Vec<AttributeRecord> {
    acr_table(corpus)
        .into_iter()
        .enumerate()
        .map(|(j, acr)| exercise_record(corpus, j, acr, opts))
        .collect()
}

pub fn concept_attributes(corpus: &Corpus) -> Vec<AttributeRecord> {
    (0..corpus.num_concepts()).map(|k| concept_attribute(corpus, k)).collect()
}

/// All three roles' records derived from one set of logs.
#[derive(Debug, Clone)]
pub struct AttributeSet {
    pub students: Vec<AttributeRecord>,
    pub exercises: Vec<AttributeRecord>,
    pub concepts: Vec<AttributeRecord>,
}

impl AttributeSet {
    /// `source` holds the responses attributes may see (e.g. only the training
    /// split); each student's history is capped at `cap` under `seed`.
    pub fn build(source: &Corpus, cap: usize, seed: u64, opts: AttributeOptions) -> Self {
        let exercises = exercise_attributes(source, opts);
        let all: Vec<usize> = (0..source.responses().len()).collect();
        let kept = capped_indices(source, &all, cap, seed);
        let mut per: Vec<Vec<usize>> = vec![Vec::new(); source.num_students()];
        for idx in kept {
            per[source.responses()[idx].student].push(idx);
        }
        let students = per
            .iter()
            .enumerate()
            .map(|(i, rs)| student_attribute_from(source, i, rs, &exercises))
            .collect();
        AttributeSet {
            students,
            exercises,
            concepts: concept_attributes(source),
        }
    }

    pub fn role(&self, role: Role) -> &[AttributeRecord] {
        match role {
            Role::Student => &self.students,
            Role::Exercise => &self.exercises,
            Role::Concept => &self.concepts,
        }
    }

    /// Flattened in file order: students, exercises, concepts.
    pub fn lines(&self, corpus: &Corpus) -> Vec<AttributeLine> {
        Role::ALL
            .iter()
            .flat_map(|&role| self.role(role).iter().map(|r| AttributeLine::from_record(r, corpus)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// attributes.jsonl

pub const ATTR_FORMAT: &str = "eduembed-attr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttrHeader {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLine {
    pub role: Role,
    pub id: String,
    pub text: String,
}

impl AttributeLine {
    pub fn from_record(record: &AttributeRecord, corpus: &Corpus) -> Self {
        let id = match record.role {
            Role::Student => corpus.student_id(record.entity),
            Role::Exercise => corpus.exercise_id(record.entity),
            Role::Concept => corpus.concept_id(record.entity),
        };
        AttributeLine {
            role: record.role,
            id: id.to_string(),
            text: record.rendered.clone(),
        }
    }
}

pub fn export_attribute_file(lines: &[AttributeLine], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let header = AttrHeader {
        format: ATTR_FORMAT.into(),
        version: 1,
        count: lines.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for line in lines {
        writeln!(w, "{}", serde_json::to_string(line).expect("line serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_attribute_file(path: impl AsRef<Path>) -> Result<Vec<AttributeLine>> {
    let path = path.as_ref();
    let bad = |message: String| Error::Format {
        format: ATTR_FORMAT,
        path: path.to_path_buf(),
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut lines = reader.lines();
    let header: AttrHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)
            .map_err(|e| bad(format!("line 1: {e}")))?,
        None => return Err(bad("missing header".into())),
    };
    if header.format != ATTR_FORMAT || header.version != 1 {
        return Err(bad(format!("unsupported header {}/{}", header.format, header.version)));
    }
    let mut out = Vec::with_capacity(header.count);
    for (n, l) in lines.enumerate() {
        let l = l.map_err(|e| Error::io(path, e))?;
        if l.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&l).map_err(|e| bad(format!("line {}: {e}", n + 2)))?);
    }
    if out.len() != header.count {
        return Err(bad(format!("header count {} but {} records", header.count, out.len())));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::corpus;

    #[test]
    fn concept_template() {
        let c = corpus(1, vec![vec![0, 1]], &["Algebra", "Sets, maps"], &[(0, 0, 1)]);
        assert_eq!(concept_attribute(&c, 0).rendered, "<concept name is Algebra>");
        assert_eq!(concept_attribute(&c, 1).rendered, "<concept name is Sets, maps>");
        assert_eq!(concept_attributes(&c).len(), 2);
    }

    #[test]
    fn exercise_template() {
        let c = corpus(
            4,
            vec![vec![0], vec![1, 0]],
            &["Algebra", "Geometry"],
            &[(0, 0, 1), (1, 0, 0), (2, 0, 1), (3, 0, 1)],
        );
        assert_eq!(
            exercise_attribute(&c, 0).rendered,
            "<related concepts is Algebra> <average correct rate is 0.750>"
        );
        assert_eq!(
            exercise_attribute(&c, 1).rendered,
            "<related concepts is Algebra, Geometry> <average correct rate is unknown>"
        );
    }

    #[test]
    fn rate_rounds_half_up() {
        assert_eq!(format_rate(Some(0.0625)), "0.063");
        assert_eq!(format_rate(Some(1.0)), "1.000");
        assert_eq!(format_rate(Some(0.0)), "0.000");
        assert_eq!(format_rate(Some(2.0 / 3.0)), "0.667");
    }

    #[test]
    fn student_template() {
        let c = corpus(2, vec![vec![0], vec![0]], &["Algebra"], &[(0, 0, 1), (0, 1, 0)]);
        let rec = student_attribute(&c, 0, 50, 0);
        assert_eq!(rec.segments.len(), 2);
        assert_eq!(
            rec.segments[0],
            "<related concepts is Algebra> <average correct rate is 1.000> <response is correct>"
        );
        assert!(rec.segments[1].ends_with("<response is wrong>"));
        assert_eq!(rec.rendered, rec.segments.join(" "));
        let empty = student_attribute(&c, 1, 50, 0);
        assert!(empty.segments.is_empty());
        assert_eq!(empty.rendered, "<responses is none>");
    }

    #[test]
    fn student_cap_limits_fields() {
        let logs: Vec<_> = (0..80).map(|j| (0, j, (j % 2) as u8)).collect();
        let c = corpus(1, vec![vec![0]; 80], &["A"], &logs);
        let rec = student_attribute(&c, 0, 50, 9);
        assert_eq!(rec.segments.len(), 50);
        assert_eq!(rec.fields.iter().filter(|(n, _)| n == "response").count(), 50);
    }

    #[test]
    fn content_field_behind_flag() {
        let c = corpus(1, vec![vec![0]], &["A"], &[(0, 0, 1)])
            .with_exercise_texts(vec!["Solve x+1=2".into()])
            .unwrap();
        let plain = exercise_attributes(&c, AttributeOptions::default());
        assert!(!plain[0].rendered.contains("content"));
        let rich = exercise_attributes(&c, AttributeOptions { include_content: true });
        assert!(rich[0].rendered.ends_with("<content is Solve x+1=2>"));
    }

    #[test]
    fn rendering_distinguishes_exercises() {
        let c = corpus(
            3,
            vec![vec![0], vec![1], vec![0], vec![0]],
            &["A", "B"],
            &[(0, 0, 1), (0, 1, 1), (0, 2, 0), (1, 3, 1), (2, 3, 0)],
        );
        let ex = exercise_attributes(&c, AttributeOptions::default());
        for a in 0..ex.len() {
            for b in a + 1..ex.len() {
                assert_ne!(ex[a].rendered, ex[b].rendered, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn attribute_file_round_trip() {
        let c = corpus(2, vec![vec![0, 1]], &["Algèbre", "几何"], &[(0, 0, 1), (1, 0, 0)]);
        let set = AttributeSet::build(&c, 50, 0, AttributeOptions::default());
        let lines = set.lines(&c);
        assert_eq!(lines.len(), 2 + 1 + 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attributes.jsonl");
        export_attribute_file(&lines, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"format":"eduembed-attr","version":1,"count":5}"#));
        assert_eq!(read_attribute_file(&path).unwrap(), lines);
    }
}
