//! Extracting structured predictions from free-form model output.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::RecordKey;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedPrediction {
    pub learner_id: String,
    pub question_id: String,
    pub attempt: u32,
    pub prediction: f64,
    pub assessment: String,
}

impl DecodedPrediction {
    pub fn key(&self) -> RecordKey {
        RecordKey::new(self.learner_id.clone(), self.question_id.clone(), self.attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub raw: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutcome {
    pub predictions: Vec<DecodedPrediction>,
    pub rejected: Vec<RejectedRecord>,
    /// Non-empty text outside the braced records.
    pub unparsed: Vec<String>,
}

static RECORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{[^{}]*\}").expect("valid regex"));

static FIELD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r#"(?i)['"]?(learner[ _]?id|question[ _]?id|attempt|prediction|assessment)['"]?\s*:\s*(?:'([^']*)'|"([^"]*)"|([^,}]*))"#,
    )
    .expect("valid regex")
});

fn canonical(key: &str) -> String {
    key.to_ascii_lowercase().replace([' ', '_'], "")
}

fn parse_record(raw: &str) -> std::result::Result<Option<DecodedPrediction>, String> {
    let (mut learner, mut question, mut attempt, mut pred, mut assessment) = (None, None, None, None, None);
    let mut any = false;
    for c in FIELD.captures_iter(raw) {
        any = true;
        let value = c
            .get(2)
            .or_else(|| c.get(3))
            .or_else(|| c.get(4))
            .map_or("", |m| m.as_str())
            .trim()
            .to_string();
        match canonical(&c[1]).as_str() {
            "learnerid" => learner = Some(value),
            "questionid" => question = Some(value),
            "attempt" => attempt = Some(value),
            "prediction" => pred = Some(value),
            _ => assessment = Some(value),
        }
    }
    if !any {
        return Ok(None);
    }
    let (Some(learner), Some(question), Some(attempt), Some(pred)) = (learner, question, attempt, pred) else {
        return Err("missing field".into());
    };
    let attempt: u32 = attempt.parse().map_err(|_| format!("bad attempt '{attempt}'"))?;
    let prediction: f64 = pred.parse().map_err(|_| format!("bad prediction '{pred}'"))?;
    if !(0.0..=1.0).contains(&prediction) {
        return Err("out of range".into());
    }
    Ok(Some(DecodedPrediction {
        learner_id: learner,
        question_id: question,
        attempt,
        prediction,
        assessment: assessment.unwrap_or_default(),
    }))
}

/// Pulls every braced prediction record out of `text`.
///
/// Errors only when no braced record with prediction fields is present;
/// malformed, out-of-range and repeated records are listed as rejected.
pub fn decode_response(text: &str) -> Result<DecodeOutcome> {
    let mut out = DecodeOutcome::default();
    let mut seen = HashSet::new();
    let mut found = 0;
    let mut last = 0;
    for m in RECORD.find_iter(text) {
        let gap = text[last..m.start()].trim();
        if !gap.is_empty() {
            out.unparsed.push(gap.to_string());
        }
        last = m.end();
        match parse_record(m.as_str()) {
            Ok(None) => out.unparsed.push(m.as_str().to_string()),
            Ok(Some(p)) => {
                found += 1;
                if seen.insert(p.key()) {
                    out.predictions.push(p);
                } else {
                    out.rejected.push(RejectedRecord {
                        raw: m.as_str().into(),
                        reason: "duplicate".into(),
                    });
                }
            }
            Err(reason) => {
                found += 1;
                out.rejected.push(RejectedRecord {
                    raw: m.as_str().into(),
                    reason,
                });
            }
        }
    }
    let tail = text[last..].trim();
    if !tail.is_empty() {
        out.unparsed.push(tail.to_string());
    }
    if found == 0 {
        return Err(Error::Decode("no predictions found".into()));
    }
    Ok(out)
}

/// Formats one record in the shape the decoder reads.
pub fn format_record(key: &RecordKey, prediction: f64, assessment: &str) -> String {
    format!(
        "{{'learner ID': '{}', 'Question ID': '{}', 'Attempt': {}, 'Prediction': {}, 'Assessment': '{}'}}",
        key.learner_id,
        key.question_id,
        key.attempt,
        prediction,
        assessment.replace('\'', "")
    )
}
