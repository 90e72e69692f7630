//! Encode → script → client → decode, repeated and aligned to test rows.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::LlmClient;
use super::decode::{decode_response, RejectedRecord};
use super::encode::encode_records;
use super::script::{build_cot_script, StageFlags};
use crate::data::{make_folds, Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::metrics::{check_probabilities, rmse, standard_error, CvReport, FittedModel, Predictor};

/// Value used for test rows the model gave no prediction for.
pub const IMPUTED_VALUE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub repeats: usize,
    pub flags: StageFlags,
    /// Test rows per request; `None` sends all of them at once.
    pub chunk_size: Option<usize>,
    /// Runs allowed in flight at once.
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            repeats: 1,
            flags: StageFlags::default(),
            chunk_size: None,
            concurrency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub predictions: Vec<f64>,
    pub imputed: usize,
    pub coverage: f64,
    pub rmse: Option<f64>,
    pub rejected: Vec<RejectedRecord>,
    /// Decoded records whose key was not among the requested rows.
    pub unmatched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub keys: Vec<RecordKey>,
    pub runs: Vec<RunResult>,
    /// Per-row mean over runs.
    pub mean_predictions: Vec<f64>,
}

impl PipelineOutcome {
    pub fn run_rmse(&self) -> Vec<f64> {
        self.runs.iter().filter_map(|r| r.rmse).collect()
    }

    pub fn total_imputed(&self) -> usize {
        self.runs.iter().map(|r| r.imputed).sum()
    }
}

fn one_run(
    train: &Dataset,
    test: &[RecordKey],
    actual: Option<&[f64]>,
    client: &dyn LlmClient,
    config: &PipelineConfig,
    run: usize,
) -> Result<RunResult> {
    let chunk = config.chunk_size.unwrap_or(test.len()).max(1);
    let mut got: HashMap<RecordKey, f64> = HashMap::new();
    let mut rejected = Vec::new();
    let mut unmatched = 0;
    for part in test.chunks(chunk) {
        let ds = train.with_targets(part)?;
        let batch = encode_records(&ds);
        let script = build_cot_script(&batch, ds.content(), &config.flags);
        let reply = client.send(&script.messages()).map_err(|e| match e {
            Error::Client { message, .. } => Error::Client { run, message },
            other => other,
        })?;
        let decoded = decode_response(&reply)?;
        rejected.extend(decoded.rejected);
        let wanted: std::collections::HashSet<&RecordKey> = part.iter().collect();
        for p in decoded.predictions {
            let k = p.key();
            if wanted.contains(&k) {
                got.entry(k).or_insert(p.prediction);
            } else {
                unmatched += 1;
            }
        }
    }
    let mut imputed = 0;
    let predictions: Vec<f64> = test
        .iter()
        .map(|k| {
            got.get(k).copied().unwrap_or_else(|| {
                imputed += 1;
                IMPUTED_VALUE
            })
        })
        .collect();
    if imputed > 0 {
        log::warn!("run {run}: {imputed} of {} test rows had no prediction; imputed {IMPUTED_VALUE}", test.len());
    }
    let rmse = actual.map(|a| rmse(&predictions, a)).transpose()?;
    Ok(RunResult {
        run,
        coverage: if test.is_empty() { 1.0 } else { 1.0 - imputed as f64 / test.len() as f64 },
        predictions,
        imputed,
        rmse,
        rejected,
        unmatched,
    })
}

/// Predicts `test` from the labeled rows of `train`, `config.repeats` times.
pub fn llm_predict_pipeline(
    train: &Dataset,
    test: &[RecordKey],
    actual: Option<&[f64]>,
    client: &dyn LlmClient,
    config: &PipelineConfig,
) -> Result<PipelineOutcome> {
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if actual.is_some_and(|a| a.len() != test.len()) {
        return Err(Error::Validation("labels do not match test rows".into()));
    }
    let train = train.labeled()?;
    let runs: Vec<RunResult> = if config.concurrency > 1 && config.repeats > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.concurrency)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..config.repeats)
                .into_par_iter()
                .map(|r| one_run(&train, test, actual, client, config, r))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        (0..config.repeats)
            .map(|r| one_run(&train, test, actual, client, config, r))
            .collect::<Result<Vec<_>>>()?
    };
    let n = runs.len() as f64;
    let mean_predictions = (0..test.len())
        .map(|i| runs.iter().map(|r| r.predictions[i]).sum::<f64>() / n)
        .collect();
    Ok(PipelineOutcome {
        keys: test.to_vec(),
        runs,
        mean_predictions,
    })
}

/// Cross-validation of the direct LLM predictor. Each run's RMSE is the mean
/// of its fold RMSEs; with several repeats the reported standard error is
/// taken across runs.
pub fn llm_cross_validate(
    ds: &Dataset,
    client: &dyn LlmClient,
    k: usize,
    seed: u64,
    config: &PipelineConfig,
) -> Result<(CvReport, Vec<PipelineOutcome>)> {
    let split = make_folds(ds, k, seed)?;
    let mut outcomes = Vec::with_capacity(k);
    for fold in 0..k {
        let train = ds.subset(&split.train_positions(fold))?;
        let test_pos = split.fold_positions(fold);
        let keys: Vec<RecordKey> = test_pos.iter().map(|&i| ds.records()[i].key()).collect();
        let actual: Vec<f64> = test_pos.iter().map(|&i| ds.records()[i].target().expect("labeled")).collect();
        let out = llm_predict_pipeline(&train, &keys, Some(&actual), client, config).map_err(|e| Error::Fold {
            fold,
            source: Box::new(e),
        })?;
        outcomes.push(out);
    }
    let per_fold: Vec<Vec<f64>> = outcomes.iter().map(PipelineOutcome::run_rmse).collect();
    let fold_rmse: Vec<f64> = per_fold.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let run_rmse: Vec<f64> = (0..config.repeats)
        .map(|r| per_fold.iter().map(|v| v[r]).sum::<f64>() / k as f64)
        .collect();
    let report = CvReport::from_folds(format!("LLM ({})", client.name()), ds.lesson_name(), fold_rmse)?
        .with_run_se(&run_rmse);
    Ok((report, outcomes))
}

/// Cross-run standard error of per-run RMSEs.
pub fn cross_run_se(run_rmse: &[f64]) -> f64 {
    standard_error(run_rmse)
}

/// The direct LLM predictor as a [`Predictor`]; predictions are the mean
/// over repeats.
#[derive(Clone)]
pub struct LlmPredictor {
    pub client: Arc<dyn LlmClient>,
    pub config: PipelineConfig,
}

struct LlmFitted {
    train: Dataset,
    client: Arc<dyn LlmClient>,
    config: PipelineConfig,
}

impl Predictor for LlmPredictor {
    fn name(&self) -> String {
        format!("LLM ({})", self.client.name())
    }

    fn fit(&self, train: &Dataset, _seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(LlmFitted {
            train: train.labeled()?,
            client: Arc::clone(&self.client),
            config: self.config.clone(),
        }))
    }
}

impl FittedModel for LlmFitted {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        let out = llm_predict_pipeline(&self.train, queries, None, self.client.as_ref(), &self.config)?;
        check_probabilities(&out.mean_predictions)?;
        Ok(out.mean_predictions)
    }

    fn export(&self) -> serde_json::Value {
        serde_json::json!({
            "client": self.client.name(),
            "pipeline": self.config,
            "n_train": self.train.len(),
        })
    }
}
