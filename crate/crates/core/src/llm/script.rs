//! The staged (a)–(j) prompt script sent to a chat model.

use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::encode::EncodedBatch;
use crate::data::LessonMetaFile;

/// Line prefix the model is asked to use when naming a method.
pub const METHOD_MARKER: &str = "Recommended method:";
/// Line prefix the model is asked to use when proposing hyperparameters.
pub const PROPOSAL_MARKER: &str = "Proposed config:";
/// Line prefix for earlier tuning attempts listed in step (i).
pub const HISTORY_MARKER: &str = "Tried config:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Step {
    Materials,
    Transcription,
    AnalysisRequest,
    MethodSelection,
    ModelDevelopment,
    Evaluation,
    Configuration,
    SkillAssessment,
    Optimization,
    Feedback,
}

impl Step {
    pub const ALL: [Step; 10] = [
        Step::Materials,
        Step::Transcription,
        Step::AnalysisRequest,
        Step::MethodSelection,
        Step::ModelDevelopment,
        Step::Evaluation,
        Step::Configuration,
        Step::SkillAssessment,
        Step::Optimization,
        Step::Feedback,
    ];

    pub fn tag(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn from_tag(c: char) -> Option<Step> {
        Step::ALL.iter().copied().find(|s| s.tag() == c)
    }

    pub fn title(self) -> &'static str {
        match self {
            Step::Materials => "Learning materials",
            Step::Transcription => "Performance records",
            Step::AnalysisRequest => "Analysis request",
            Step::MethodSelection => "Method selection",
            Step::ModelDevelopment => "Model development",
            Step::Evaluation => "Evaluation",
            Step::Configuration => "Configuration",
            Step::SkillAssessment => "Skill assessment",
            Step::Optimization => "Optimization",
            Step::Feedback => "Feedback",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub step: Step,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFlags {
    /// Include step (a) when the lesson has metadata.
    pub materials: bool,
    /// Include step (h) when the lesson has metadata.
    pub skill_assessment: bool,
    /// Ask for per-row predictions in step (c).
    pub predictions: bool,
    /// Tell the model to reason directly instead of fitting models.
    pub avoid_models: bool,
    /// Earlier (config, RMSE) pairs shown in step (i).
    pub tuning_history: Vec<(String, f64)>,
}

impl Default for StageFlags {
    fn default() -> Self {
        Self {
            materials: true,
            skill_assessment: true,
            predictions: true,
            avoid_models: false,
            tuning_history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScript {
    pub steps: Vec<ScriptStep>,
}

const SYSTEM: &str = "You analyze learner performance data from reading comprehension lessons. \
Answer each numbered step in order.";

static STEP_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\(([a-j])\) ").expect("valid regex"));

impl PromptScript {
    pub fn tags(&self) -> Vec<char> {
        self.steps.iter().map(|s| s.step.tag()).collect()
    }

    pub fn get(&self, step: Step) -> Option<&ScriptStep> {
        self.steps.iter().find(|s| s.step == step)
    }

    /// One system message followed by one user message per step.
    pub fn messages(&self) -> Vec<ChatMessage> {
        std::iter::once(ChatMessage::system(SYSTEM))
            .chain(self.steps.iter().map(|s| {
                ChatMessage::user(format!("({}) {}\n{}", s.step.tag(), s.step.title(), s.content))
            }))
            .collect()
    }

    /// Plain-text dump for auditing.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in self.messages() {
            let _ = writeln!(out, "--- {} ---\n{}\n", m.role, m.content);
        }
        out
    }
}

/// Steps present in `messages`, by their `(x) ` headers.
pub fn message_steps(messages: &[ChatMessage]) -> Vec<(Step, &str)> {
    messages
        .iter()
        .filter_map(|m| {
            let c = STEP_HEADER.captures(&m.content)?;
            let step = Step::from_tag(c[1].chars().next()?)?;
            Some((step, m.content.as_str()))
        })
        .collect()
}

fn materials(meta: &LessonMetaFile) -> String {
    let mut s = format!("Lesson: {}\n", meta.lesson_name);
    if let Some(m) = &meta.material {
        let _ = writeln!(s, "\nReading material:\n{}", m.trim());
    }
    if !meta.questions.is_empty() {
        s.push_str("\nQuestions:\n");
        for (id, q) in &meta.questions {
            let _ = writeln!(s, "{id}: {}", q.text);
            for o in &q.options {
                let _ = writeln!(s, "  - {o}");
            }
            if !q.answer.is_empty() {
                let _ = writeln!(s, "  answer: {}", q.answer);
            }
        }
    }
    s.push_str("\nFor each question, note what knowledge it draws on and which reading skill it exercises.");
    s
}

fn transcription(batch: &EncodedBatch) -> String {
    let mut s = String::from("Questions are referred to by position. Position to question ID:\n");
    for e in &batch.legend {
        let _ = writeln!(s, "{}", EncodedBatch::legend_line(e));
    }
    s.push_str("\nTraining records (outcome known, 1 = correct, 0 = incorrect):\n");
    for r in batch.train() {
        let _ = writeln!(s, "{}", r.sentence);
    }
    if batch.n_test() > 0 {
        s.push_str("\nTest records (outcome to predict):\n");
        for r in batch.test() {
            let _ = writeln!(s, "{}", r.sentence);
        }
    }
    s
}

fn analysis(flags: &StageFlags) -> String {
    let mut s = String::new();
    if flags.predictions {
        s.push_str(
            "For every test record, estimate the probability between 0 and 1 that the learner answers correctly. \
Give one line per test record, exactly in this form:\n\
{'learner ID': <id>, 'Question ID': <id>, 'Attempt': <n>, 'Prediction': <probability>, 'Assessment': '<short note>'}\n\
Use the question IDs from the position table, not the positions.",
        );
    } else {
        s.push_str("Describe the patterns in the training records that matter for predicting correctness.");
    }
    if flags.avoid_models {
        s.push_str("\nDo not fit machine learning models; reason from the records directly.");
    }
    s
}

fn optimization(history: &[(String, f64)]) -> String {
    let mut s = format!(
        "Suggest gradient boosting hyperparameters likely to lower the RMSE. Put them on one line starting with \
'{PROPOSAL_MARKER}' as comma-separated key=value pairs using the keys n_trees, learning_rate, max_depth, \
subsample, colsample_bytree, gamma, min_child_weight."
    );
    if !history.is_empty() {
        s.push_str("\nSettings evaluated so far:\n");
        for (cfg, rmse) in history {
            let _ = writeln!(s, "{HISTORY_MARKER} {cfg} -> RMSE {rmse:.6}");
        }
    }
    s
}

/// Assembles the script for `batch`. Steps (a) and (h) appear only when the
/// batch has lesson metadata and the corresponding flag is set.
pub fn build_cot_script(batch: &EncodedBatch, meta: Option<&LessonMetaFile>, flags: &StageFlags) -> PromptScript {
    let mut steps = Vec::new();
    let mut push = |step, content: String| steps.push(ScriptStep { step, content });
    let meta = meta.filter(|_| batch.has_metadata);
    if let (Some(m), true) = (meta, flags.materials) {
        push(Step::Materials, materials(m));
    }
    push(Step::Transcription, transcription(batch));
    push(Step::AnalysisRequest, analysis(flags));
    push(
        Step::MethodSelection,
        format!("Which prediction method suits these records best? Name it on a line starting with '{METHOD_MARKER}'."),
    );
    push(
        Step::ModelDevelopment,
        "Outline how that method would be trained and validated across the data folds.".into(),
    );
    push(Step::Evaluation, "Report the RMSE obtained on each validation fold.".into());
    push(
        Step::Configuration,
        "List every configuration setting the method used so the run can be repeated.".into(),
    );
    if meta.is_some() && flags.skill_assessment {
        push(
            Step::SkillAssessment,
            "Based on these results, comment on each learner's reading comprehension skill.".into(),
        );
    }
    push(Step::Optimization, optimization(&flags.tuning_history));
    push(
        Step::Feedback,
        "Note anything that should be clarified or revised before the next round.".into(),
    );
    PromptScript { steps }
}
