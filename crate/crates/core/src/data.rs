//! Interaction records, datasets, ingestion and fold splitting.
//!
//! The on-disk format is UTF-8 comma-separated text with the header
//! `learner_id,question_id,attempt,obs`. An empty `obs` cell marks a row
//! awaiting prediction.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const HEADER: [&str; 4] = ["learner_id", "question_id", "attempt", "obs"];

/// Identity of one observation cell: (learner, question, attempt).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub learner_id: String,
    pub question_id: String,
    pub attempt: u32,
}

impl RecordKey {
    pub fn new(learner_id: impl Into<String>, question_id: impl Into<String>, attempt: u32) -> Self {
        Self {
            learner_id: learner_id.into(),
            question_id: question_id.into(),
            attempt,
        }
    }
}

/// One graded (or to-be-predicted) attempt by a learner on a question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub learner_id: String,
    pub question_id: String,
    /// 1-based ordinal of the learner's attempt on this question.
    pub attempt: u32,
    /// `None` for rows awaiting prediction.
    pub obs: Option<bool>,
}

impl InteractionRecord {
    pub fn new(
        learner_id: impl Into<String>,
        question_id: impl Into<String>,
        attempt: u32,
        obs: Option<bool>,
    ) -> Self {
        Self {
            learner_id: learner_id.into(),
            question_id: question_id.into(),
            attempt,
            obs,
        }
    }

    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.learner_id.clone(), self.question_id.clone(), self.attempt)
    }

    pub fn is_labeled(&self) -> bool {
        self.obs.is_some()
    }

    /// Outcome as 0.0/1.0, if present.
    pub fn target(&self) -> Option<f64> {
        self.obs.map(|o| if o { 1.0 } else { 0.0 })
    }
}

/// Question content from the optional lesson metadata file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuestionInfo {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub options: Vec<String>,
    #[serde(default)]
    pub answer: String,
}

/// The JSON lesson metadata file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LessonMetaFile {
    pub lesson_name: String,
    #[serde(default)]
    pub material: Option<String>,
    #[serde(default)]
    pub questions: IndexMap<String, QuestionInfo>,
}

impl LessonMetaFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LessonMeta {
    pub lesson_name: String,
    pub n_learners: usize,
    pub n_questions: usize,
    pub max_attempt: u32,
    /// Reading material and question texts, when a metadata file was supplied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content: Option<LessonMetaFile>,
}

/// A validated collection of interaction records.
///
/// Learner and question ids are mapped to dense indices in order of first
/// appearance. The maps cover exactly the ids present in `records`.
#[derive(Debug, Clone)]
pub struct Dataset {
    records: Vec<InteractionRecord>,
    meta: LessonMeta,
    learner_index: IndexMap<String, usize>,
    question_index: IndexMap<String, usize>,
}

impl Dataset {
    pub fn new(records: Vec<InteractionRecord>, lesson_name: impl Into<String>) -> Result<Self> {
        Self::build(records, lesson_name.into(), None)
    }

    pub fn with_content(records: Vec<InteractionRecord>, content: LessonMetaFile) -> Result<Self> {
        let name = content.lesson_name.clone();
        Self::build(records, name, Some(content))
    }

    fn build(
        records: Vec<InteractionRecord>,
        lesson_name: String,
        content: Option<LessonMetaFile>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Validation("dataset has no records".into()));
        }
        let mut learner_index = IndexMap::new();
        let mut question_index = IndexMap::new();
        let mut seen = HashSet::with_capacity(records.len());
        let mut max_attempt = 0;
        for r in &records {
            if r.attempt < 1 {
                return Err(Error::Validation(format!(
                    "attempt must be >= 1 (learner {}, question {})",
                    r.learner_id, r.question_id
                )));
            }
            if !seen.insert((r.learner_id.as_str(), r.question_id.as_str(), r.attempt)) {
                return Err(Error::Validation(format!(
                    "duplicate record (learner {}, question {}, attempt {})",
                    r.learner_id, r.question_id, r.attempt
                )));
            }
            let n = learner_index.len();
            learner_index.entry(r.learner_id.clone()).or_insert(n);
            let n = question_index.len();
            question_index.entry(r.question_id.clone()).or_insert(n);
            max_attempt = max_attempt.max(r.attempt);
        }
        let meta = LessonMeta {
            lesson_name,
            n_learners: learner_index.len(),
            n_questions: question_index.len(),
            max_attempt,
            content,
        };
        Ok(Self {
            records,
            meta,
            learner_index,
            question_index,
        })
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn meta(&self) -> &LessonMeta {
        &self.meta
    }

    pub fn lesson_name(&self) -> &str {
        &self.meta.lesson_name
    }

    pub fn content(&self) -> Option<&LessonMetaFile> {
        self.meta.content.as_ref()
    }

    pub fn learner_index(&self) -> &IndexMap<String, usize> {
        &self.learner_index
    }

    pub fn question_index(&self) -> &IndexMap<String, usize> {
        &self.question_index
    }

    pub fn learner_pos(&self, id: &str) -> Option<usize> {
        self.learner_index.get(id).copied()
    }

    pub fn question_pos(&self, id: &str) -> Option<usize> {
        self.question_index.get(id).copied()
    }

    pub fn n_learners(&self) -> usize {
        self.meta.n_learners
    }

    pub fn n_questions(&self) -> usize {
        self.meta.n_questions
    }

    pub fn max_attempt(&self) -> u32 {
        self.meta.max_attempt
    }

    pub fn keys(&self) -> Vec<RecordKey> {
        self.records.iter().map(InteractionRecord::key).collect()
    }

    pub fn labeled_positions(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].is_labeled())
            .collect()
    }

    pub fn n_labeled(&self) -> usize {
        self.records.iter().filter(|r| r.is_labeled()).count()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.records.iter().all(InteractionRecord::is_labeled)
    }

    /// New dataset holding the records at `positions`, keeping lesson content.
    pub fn subset(&self, positions: &[usize]) -> Result<Dataset> {
        let records = positions.iter().map(|&i| self.records[i].clone()).collect();
        Self::build(records, self.meta.lesson_name.clone(), self.meta.content.clone())
    }

    /// Labeled rows only.
    pub fn labeled(&self) -> Result<Dataset> {
        self.subset(&self.labeled_positions())
    }

    /// Training rows followed by the given prediction targets with obs removed.
    pub fn with_targets(&self, targets: &[RecordKey]) -> Result<Dataset> {
        let mut records = self.records.clone();
        records.extend(targets.iter().map(|k| {
            InteractionRecord::new(k.learner_id.clone(), k.question_id.clone(), k.attempt, None)
        }));
        Self::build(records, self.meta.lesson_name.clone(), self.meta.content.clone())
    }

    /// Attempts grouped by (learner position, question position), sorted by attempt.
    pub fn sequences(&self) -> BTreeMap<(usize, usize), Vec<(u32, Option<bool>)>> {
        let mut out: BTreeMap<(usize, usize), Vec<(u32, Option<bool>)>> = BTreeMap::new();
        for r in &self.records {
            let l = self.learner_index[&r.learner_id];
            let q = self.question_index[&r.question_id];
            out.entry((l, q)).or_default().push((r.attempt, r.obs));
        }
        for seq in out.values_mut() {
            seq.sort_by_key(|&(a, _)| a);
        }
        out
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for r in &self.records {
            let obs = match r.obs {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            w.write_record([&r.learner_id, &r.question_id, &r.attempt.to_string(), obs])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 input")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a data file, optionally attaching lesson metadata.
pub fn parse_dataset(path: &Path, meta_path: Option<&Path>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = read_records(file, path)?;
    match meta_path {
        Some(mp) => Dataset::with_content(records, LessonMetaFile::load(mp)?),
        None => {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Dataset::new(records, name)
        }
    }
}

/// Parses CSV text from any reader; `source` names it in error messages.
pub fn read_records<R: Read>(reader: R, source: &Path) -> Result<Vec<InteractionRecord>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut rows = rdr.records();
    let header = match rows.next() {
        Some(h) => h.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "missing header row".into())),
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != HEADER {
        return Err(parse_err(
            1,
            format!("expected header `{}`, found `{}`", HEADER.join(","), names.join(",")),
        ));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for row in rows {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() != 4 {
            return Err(parse_err(line, format!("expected 4 columns, found {}", row.len())));
        }
        let learner = row[0].trim();
        let question = row[1].trim();
        if learner.is_empty() || question.is_empty() {
            return Err(parse_err(line, "learner_id and question_id must be non-empty".into()));
        }
        let attempt: i64 = row[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("attempt `{}` is not an integer", &row[2])))?;
        if attempt < 1 {
            return Err(parse_err(line, "attempt must be >= 1".into()));
        }
        let attempt = u32::try_from(attempt)
            .map_err(|_| parse_err(line, "attempt out of range".into()))?;
        let obs = match row[3].trim() {
            "" => None,
            "0" => Some(false),
            "1" => Some(true),
            _ => return Err(parse_err(line, "obs must be 0 or 1".into())),
        };
        if !seen.insert((learner.to_string(), question.to_string(), attempt)) {
            return Err(Error::Validation(format!(
                "line {line}: duplicate record (learner {learner}, question {question}, attempt {attempt})"
            )));
        }
        records.push(InteractionRecord::new(learner, question, attempt, obs));
    }
    Ok(records)
}

/// Assignment of labeled records to `k` cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    /// Per record position; `None` for rows without an observation.
    pub assignments: Vec<Option<usize>>,
}

impl FoldSplit {
    pub fn fold_positions(&self, fold: usize) -> Vec<usize> {
        self.positions_where(|f| f == fold)
    }

    /// Labeled positions outside `fold`.
    pub fn train_positions(&self, fold: usize) -> Vec<usize> {
        self.positions_where(|f| f != fold)
    }

    fn positions_where(&self, pred: impl Fn(usize) -> bool) -> Vec<usize> {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.filter(|&f| pred(f)).map(|_| i))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for f in self.assignments.iter().flatten() {
            sizes[*f] += 1;
        }
        sizes
    }
}

/// Shuffles the labeled records and deals them round-robin into `k` folds.
pub fn make_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    let mut labeled = ds.labeled_positions();
    if k > labeled.len() {
        return Err(Error::Config(format!(
            "fold count {k} exceeds the {} labeled records",
            labeled.len()
        )));
    }
    let mut rng = seed::rng(seed::derive_seed(seed, "folds", k as u64));
    labeled.shuffle(&mut rng);
    let mut assignments = vec![None; ds.len()];
    for (rank, pos) in labeled.into_iter().enumerate() {
        assignments[pos] = Some(rank % k);
    }
    Ok(FoldSplit { k, assignments })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub meta: LessonMeta,
    pub n_records: usize,
    pub n_labeled: usize,
    /// Share of correct labeled answers per question; `None` without labels.
    pub correct_rate: IndexMap<String, Option<f64>>,
    /// Number of records at each attempt ordinal.
    pub attempts_histogram: BTreeMap<u32, usize>,
}

pub fn summarize(ds: &Dataset) -> DatasetSummary {
    let mut tallies: IndexMap<String, (usize, usize)> =
        ds.question_index.keys().map(|q| (q.clone(), (0, 0))).collect();
    let mut attempts_histogram = BTreeMap::new();
    for r in &ds.records {
        *attempts_histogram.entry(r.attempt).or_insert(0) += 1;
        if let Some(o) = r.obs {
            let t = tallies.get_mut(&r.question_id).expect("indexed question");
            t.0 += usize::from(o);
            t.1 += 1;
        }
    }
    let correct_rate = tallies
        .into_iter()
        .map(|(q, (c, n))| (q, (n > 0).then(|| c as f64 / n as f64)))
        .collect();
    DatasetSummary {
        meta: ds.meta.clone(),
        n_records: ds.len(),
        n_labeled: ds.n_labeled(),
        correct_rate,
        attempts_histogram,
    }
}

impl DatasetSummary {
    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = format!(
            "lesson: {}\nlearners: {}\nquestions: {}\nmax attempt: {}\nrecords: {} ({} labeled)\n",
            m.lesson_name, m.n_learners, m.n_questions, m.max_attempt, self.n_records, self.n_labeled
        );
        out.push_str("correct rate by question:\n");
        for (q, rate) in &self.correct_rate {
            match rate {
                Some(r) => out.push_str(&format!("  {q}: {r:.3}\n")),
                None => out.push_str(&format!("  {q}: n/a\n")),
            }
        }
        out.push_str("records by attempt:\n");
        for (a, n) in &self.attempts_histogram {
            out.push_str(&format!("  {a}: {n}\n"));
        }
        out
    }
}
