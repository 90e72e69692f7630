//! Learner performance prediction.
//!
//! Five baseline knowledge-tracing models (BKT, PFA, a SPARFA-Lite style
//! logistic matrix completion, tensor factorization and gradient-boosted
//! trees), an LLM encode/predict/decode pipeline with an offline heuristic
//! client, a k-fold cross-validation harness and hyperparameter tuners, all
//! over a simple interaction-record file format.

pub mod bkt;
pub mod data;
pub mod error;
pub mod gbt;
pub mod llm;
pub mod metrics;
pub mod numeric;
pub mod pfa;
pub mod registry;
pub mod seed;
pub mod simgen;
pub mod sparfa;
pub mod tensor;
pub mod tuner;

pub use data::{parse_dataset, Dataset, FoldSplit, InteractionRecord, LessonMeta, RecordKey};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{cross_validate, rmse, CvReport, FittedModel, Predictor};
