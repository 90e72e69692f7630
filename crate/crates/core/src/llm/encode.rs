//! Verbalizing interaction records as contextual sentences.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordKey};

/// `1st`, `2nd`, `3rd`, `4th`, `11th`, `21st`, ...
pub fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEntry {
    /// 1-based position used in the sentences.
    pub ordinal: usize,
    pub id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedRecord {
    pub key: RecordKey,
    pub obs: Option<bool>,
    pub sentence: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedBatch {
    pub lesson_name: String,
    pub has_metadata: bool,
    pub legend: Vec<QuestionEntry>,
    /// One entry per record, in dataset order.
    pub records: Vec<EncodedRecord>,
}

impl EncodedBatch {
    pub fn train(&self) -> impl Iterator<Item = &EncodedRecord> {
        self.records.iter().filter(|r| r.obs.is_some())
    }

    pub fn test(&self) -> impl Iterator<Item = &EncodedRecord> {
        self.records.iter().filter(|r| r.obs.is_none())
    }

    pub fn n_test(&self) -> usize {
        self.test().count()
    }

    pub fn legend_line(entry: &QuestionEntry) -> String {
        format!("Question {} has ID {}.", entry.ordinal, entry.id)
    }
}

pub fn sentence(learner: &str, ordinal_q: usize, title: &str, attempt: u32, obs: Option<bool>) -> String {
    let mut s = format!(
        "The current learner {learner} attempted to answer the {} question titled as '{title}' on their {} attempt.",
        ordinal(ordinal_q),
        ordinal(attempt as usize)
    );
    if let Some(y) = obs {
        s.push_str(&format!(" Their performance was observed as {}.", u8::from(y)));
    }
    s
}

/// Encodes every record of `ds`; labeled rows carry their outcome, rows
/// awaiting prediction do not. Titles come from the dataset's lesson
/// content when present, else `question <id>`.
pub fn encode_records(ds: &Dataset) -> EncodedBatch {
    let content = ds.content();
    let legend: Vec<QuestionEntry> = ds
        .question_index()
        .iter()
        .map(|(id, &pos)| QuestionEntry {
            ordinal: pos + 1,
            id: id.clone(),
            title: content
                .and_then(|c| c.questions.get(id))
                .map(|q| q.text.trim().to_string())
                .filter(|t| !t.is_empty())
                .unwrap_or_else(|| format!("question {id}")),
        })
        .collect();
    let records = ds
        .records()
        .iter()
        .map(|r| {
            let e = &legend[ds.question_pos(&r.question_id).expect("indexed")];
            EncodedRecord {
                key: r.key(),
                obs: r.obs,
                sentence: sentence(&r.learner_id, e.ordinal, &e.title, r.attempt, r.obs),
            }
        })
        .collect();
    EncodedBatch {
        lesson_name: ds.lesson_name().to_string(),
        has_metadata: content.is_some(),
        legend,
        records,
    }
}

static SENTENCE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^The current learner (.+?) attempted to answer the (\d+)(?:st|nd|rd|th) question titled as '(.*)' on their (\d+)(?:st|nd|rd|th) attempt\.(?: Their performance was observed as ([01])\.)?$",
    )
    .expect("valid regex")
});

static LEGEND: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^Question (\d+) has ID (.+)\.$").expect("valid regex"));

/// A sentence read back from prompt text.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSentence {
    pub learner_id: String,
    pub question_ordinal: usize,
    pub title: String,
    pub attempt: u32,
    pub obs: Option<bool>,
}

pub fn parse_sentence(line: &str) -> Option<ParsedSentence> {
    let c = SENTENCE.captures(line.trim())?;
    Some(ParsedSentence {
        learner_id: c[1].to_string(),
        question_ordinal: c[2].parse().ok()?,
        title: c[3].to_string(),
        attempt: c[4].parse().ok()?,
        obs: c.get(5).map(|m| m.as_str() == "1"),
    })
}

pub fn parse_legend_line(line: &str) -> Option<(usize, String)> {
    let c = LEGEND.captures(line.trim())?;
    Some((c[1].parse().ok()?, c[2].to_string()))
}
