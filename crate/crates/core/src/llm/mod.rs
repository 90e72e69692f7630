//! Prompt-based prediction: records are verbalized into a staged chat
//! script, sent to a chat model, and its structured reply is parsed back
//! into per-row probabilities.

pub mod client;
pub mod decode;
pub mod encode;
pub mod pipeline;
pub mod script;

pub use client::{heuristic_prediction, HttpClient, HttpClientConfig, LlmClient, MockClient};
pub use decode::{decode_response, DecodeOutcome, DecodedPrediction};
pub use encode::{encode_records, EncodedBatch};
pub use pipeline::{llm_cross_validate, llm_predict_pipeline, LlmPredictor, PipelineConfig, PipelineOutcome};
pub use script::{build_cot_script, ChatMessage, PromptScript, StageFlags, Step};
