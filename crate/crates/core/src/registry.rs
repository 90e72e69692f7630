//! Name → predictor lookup shared by the command line and the bindings.
//!
//! Overrides are `key=value` pairs applied to the model's config through its
//! serde form, so every config field is reachable without a per-model parser.
//! Dotted keys reach nested fields (`flags.materials=false`).

use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::bkt::{BktConfig, BktPredictor};
use crate::error::{Error, Result};
use crate::gbt::{GbtConfig, GbtPredictor};
use crate::llm::{LlmClient, LlmPredictor, PipelineConfig};
use crate::metrics::Predictor;
use crate::pfa::{PfaConfig, PfaPredictor};
use crate::sparfa::{SparfaConfig, SparfaPredictor};
use crate::tensor::{TensorConfig, TensorPredictor};
use crate::tuner::LlmGbtPredictor;

pub const MODEL_REGISTRY: [&str; 7] = ["bkt", "pfa", "sparfa", "tensor", "gbt", "llm", "llm-gbt"];

pub fn is_llm_model(name: &str) -> bool {
    matches!(name, "llm" | "llm-gbt")
}

pub fn unknown_model(name: &str) -> Error {
    Error::Config(format!("unknown model '{name}'; available: {}", MODEL_REGISTRY.join(", ")))
}

/// Parses `value` as JSON when it looks like JSON, else as a string.
/// Comma lists become arrays, so `rank_candidates=1,2,4` works.
fn parse_value(value: &str) -> Value {
    let v = value.trim();
    if let Ok(parsed) = serde_json::from_str::<Value>(v) {
        return parsed;
    }
    if v.contains(',') {
        return Value::Array(v.split(',').map(parse_value).collect());
    }
    Value::String(v.to_string())
}

/// Applies `overrides` to `config`, rejecting keys the config lacks.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(config: &T, overrides: &[(String, String)]) -> Result<T> {
    let mut root = serde_json::to_value(config)?;
    for (key, value) in overrides {
        let mut node = &mut root;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown setting '{key}'")))?;
        }
        *node = parse_value(value);
    }
    serde_json::from_value(root).map_err(|e| Error::Config(format!("bad setting: {e}")))
}

/// Splits `key=value`.
pub fn parse_override(text: &str) -> Result<(String, String)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got '{text}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Builds the named predictor. LLM models need `client`.
pub fn build_predictor(
    name: &str,
    overrides: &[(String, String)],
    client: Option<Arc<dyn LlmClient>>,
) -> Result<Box<dyn Predictor>> {
    let need_client = || client.clone().ok_or_else(|| Error::Config(format!("model '{name}' needs an LLM client")));
    Ok(match name {
        "bkt" => Box::new(BktPredictor {
            config: apply_overrides(&BktConfig::default(), overrides)?,
        }),
        "pfa" => Box::new(PfaPredictor {
            config: apply_overrides(&PfaConfig::default(), overrides)?,
        }),
        "sparfa" => Box::new(SparfaPredictor {
            config: apply_overrides(&SparfaConfig::default(), overrides)?,
        }),
        "tensor" => Box::new(TensorPredictor {
            config: apply_overrides(&TensorConfig::default(), overrides)?,
        }),
        "gbt" => {
            let config: GbtConfig = apply_overrides(&GbtConfig::default(), overrides)?;
            config.validate()?;
            Box::new(GbtPredictor { config })
        }
        "llm" => Box::new(LlmPredictor {
            client: need_client()?,
            config: apply_overrides(&PipelineConfig::default(), overrides)?,
        }),
        "llm-gbt" => {
            let mut p = LlmGbtPredictor::new(need_client()?);
            for (k, v) in overrides {
                let n: usize = v
                    .parse()
                    .map_err(|_| Error::Config(format!("{k} must be a non-negative integer")))?;
                match k.as_str() {
                    "tuning_budget" => p.tuning_budget = n,
                    "inner_folds" => p.inner_folds = n,
                    _ => return Err(Error::Config(format!("unknown setting '{k}'"))),
                }
            }
            Box::new(p)
        }
        other => return Err(unknown_model(other)),
    })
}
