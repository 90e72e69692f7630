//! Hyperparameter search for the boosted-tree model: exhaustive grid
//! search, a client-proposed tuning loop, and summary statistics.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gbt::{GbtConfig, GbtPredictor};
use crate::llm::client::LlmClient;
use crate::llm::encode::encode_records;
use crate::llm::script::{build_cot_script, ChatMessage, StageFlags, METHOD_MARKER, PROPOSAL_MARKER};
use crate::metrics::{cross_validate, mean, sample_std, FittedModel, Predictor};
use crate::pfa::PfaPredictor;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_trees: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub max_depth: Vec<usize>,
    pub subsample: Vec<f64>,
    pub colsample_bytree: Vec<f64>,
    pub gamma: Vec<f64>,
    pub min_child_weight: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            n_trees: vec![50, 100, 200],
            learning_rate: vec![0.05, 0.1, 0.2, 0.3],
            max_depth: vec![2, 4, 6],
            subsample: vec![0.6, 0.8, 1.0],
            colsample_bytree: vec![0.8, 1.0],
            gamma: vec![0.0, 1.0],
            min_child_weight: vec![1.0, 3.0, 5.0],
        }
    }
}

impl Grid {
    pub fn single(cfg: &GbtConfig) -> Self {
        Self {
            n_trees: vec![cfg.n_trees],
            learning_rate: vec![cfg.learning_rate],
            max_depth: vec![cfg.max_depth],
            subsample: vec![cfg.subsample],
            colsample_bytree: vec![cfg.colsample_bytree],
            gamma: vec![cfg.gamma],
            min_child_weight: vec![cfg.min_child_weight],
        }
    }

    pub fn len(&self) -> usize {
        self.n_trees.len()
            * self.learning_rate.len()
            * self.max_depth.len()
            * self.subsample.len()
            * self.colsample_bytree.len()
            * self.gamma.len()
            * self.min_child_weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All combinations; `min_child_weight` varies fastest.
    pub fn configs(&self) -> Vec<GbtConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &n_trees in &self.n_trees {
            for &learning_rate in &self.learning_rate {
                for &max_depth in &self.max_depth {
                    for &subsample in &self.subsample {
                        for &colsample_bytree in &self.colsample_bytree {
                            for &gamma in &self.gamma {
                                for &min_child_weight in &self.min_child_weight {
                                    out.push(GbtConfig {
                                        n_trees,
                                        learning_rate,
                                        max_depth,
                                        subsample,
                                        colsample_bytree,
                                        gamma,
                                        min_child_weight,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Sets one candidate list from comma-separated text.
    pub fn set(&mut self, key: &str, values: &str) -> Result<()> {
        fn list<T: std::str::FromStr>(key: &str, values: &str) -> Result<Vec<T>> {
            values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid grid value '{v}' for {key}")))
                })
                .collect()
        }
        match key {
            "n_trees" => self.n_trees = list(key, values)?,
            "learning_rate" => self.learning_rate = list(key, values)?,
            "max_depth" => self.max_depth = list(key, values)?,
            "subsample" => self.subsample = list(key, values)?,
            "colsample_bytree" => self.colsample_bytree = list(key, values)?,
            "gamma" => self.gamma = list(key, values)?,
            "min_child_weight" => self.min_child_weight = list(key, values)?,
            other => return Err(Error::Config(format!("unknown grid parameter '{other}'"))),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize_tuning(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Validation("nothing to summarize".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    Ok(Summary {
        n,
        mean: mean(values),
        median,
        std: sample_std(values),
        min: s[0],
        max: s[n - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub config: GbtConfig,
    pub mean_rmse: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub method: String,
    pub dataset: String,
    /// What the summary aggregates over, e.g. `configurations`.
    pub aggregation: String,
    pub results: Vec<TuneResult>,
    pub summary: Summary,
    pub best: GbtConfig,
    pub best_rmse: f64,
    pub failures: usize,
}

impl TuneReport {
    fn from_results(method: &str, dataset: &str, aggregation: &str, results: Vec<TuneResult>) -> Result<Self> {
        let ok: Vec<(usize, f64)> = results
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.mean_rmse.map(|v| (i, v)))
            .collect();
        if ok.is_empty() {
            return Err(Error::Model("every configuration failed".into()));
        }
        let values: Vec<f64> = ok.iter().map(|p| p.1).collect();
        let (bi, best_rmse) = ok
            .iter()
            .copied()
            .fold((usize::MAX, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b });
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            aggregation: aggregation.into(),
            summary: summarize_tuning(&values)?,
            best: results[bi].config.clone(),
            best_rmse,
            failures: results.len() - ok.len(),
            results,
        })
    }

    /// Best RMSE after each evaluation, in order.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.results
            .iter()
            .map(|r| {
                if let Some(v) = r.mean_rmse {
                    best = best.min(v);
                }
                best
            })
            .collect()
    }
}

fn evaluate(ds: &Dataset, cfg: &GbtConfig, k: usize, seed: u64) -> TuneResult {
    let p = GbtPredictor { config: cfg.clone() };
    match cross_validate(&p, ds, k, seed) {
        Ok(r) => TuneResult {
            config: cfg.clone(),
            mean_rmse: Some(r.mean_rmse),
            error: None,
        },
        Err(e) => TuneResult {
            config: cfg.clone(),
            mean_rmse: None,
            error: Some(e.to_string()),
        },
    }
}

/// Cross-validates every grid point, in parallel; results keep grid order.
pub fn grid_search(ds: &Dataset, grid: &Grid, k: usize, seed: u64) -> Result<TuneReport> {
    if grid.is_empty() {
        return Err(Error::Config("grid has no combinations".into()));
    }
    let results: Vec<TuneResult> = grid.configs().par_iter().map(|c| evaluate(ds, c, k, seed)).collect();
    TuneReport::from_results("Grid search", ds.lesson_name(), "configurations", results)
}

/// The `Proposed config:` line of a reply, if it parses.
pub fn parse_proposal(reply: &str) -> Option<GbtConfig> {
    reply
        .lines()
        .find_map(|l| l.trim().strip_prefix(PROPOSAL_MARKER))
        .and_then(|rest| GbtConfig::from_kv(rest.trim()).ok())
}

fn tuning_messages(ds: &Dataset, history: &[(GbtConfig, f64)], retry: bool) -> Vec<ChatMessage> {
    let batch = encode_records(ds);
    let flags = StageFlags {
        predictions: false,
        tuning_history: history.iter().map(|(c, v)| (c.to_kv(), *v)).collect(),
        ..StageFlags::default()
    };
    let mut msgs = build_cot_script(&batch, ds.content(), &flags).messages();
    if retry {
        msgs.push(ChatMessage::user(format!(
            "The previous reply had no usable '{PROPOSAL_MARKER}' line. Reply with that line only."
        )));
    }
    msgs
}

/// Asks `client` for a configuration `budget` times, showing it every
/// earlier (config, RMSE) pair, and cross-validates each proposal locally.
pub fn llm_tuning_loop(
    ds: &Dataset,
    client: &dyn LlmClient,
    budget: usize,
    k: usize,
    seed: u64,
) -> Result<TuneReport> {
    if budget == 0 {
        return Err(Error::Config("tuning budget must be >= 1".into()));
    }
    let labeled = ds.labeled()?;
    let fallback = Grid::default().configs();
    let mut history: Vec<(GbtConfig, f64)> = Vec::new();
    let mut results = Vec::with_capacity(budget);
    for iter in 0..budget {
        let mut proposal = None;
        for retry in [false, true] {
            let reply = client.send(&tuning_messages(&labeled, &history, retry))?;
            proposal = parse_proposal(&reply);
            if proposal.is_some() {
                break;
            }
        }
        let cfg = proposal.unwrap_or_else(|| {
            let mut rng = seed::rng(seed::derive_seed(seed, "tune-fallback", iter as u64));
            let pick = fallback[rng.random_range(0..fallback.len())].clone();
            log::warn!("tuning step {iter}: unusable proposal, using grid point {}", pick.to_kv());
            pick
        });
        let r = evaluate(&labeled, &cfg, k, seed);
        if let Some(v) = r.mean_rmse {
            history.push((cfg, v));
        }
        results.push(r);
    }
    TuneReport::from_results(
        &format!("LLM tuning ({})", client.name()),
        ds.lesson_name(),
        "evaluations",
        results,
    )
}

/// One row of a tuning comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub dataset: String,
    pub summary: Summary,
}

/// Plain-text table with Mean / Median / Std. / Min. / Max. columns.
pub fn table3_text(rows: &[TableRow]) -> String {
    let mw = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let dw = rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
    let mut out = format!(
        "{:<mw$}  {:<dw$}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
        "Method", "Dataset", "Mean", "Median", "Std.", "Min.", "Max."
    );
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<mw$}  {:<dw$}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
            r.method, r.dataset, s.mean, s.median, s.std, s.min, s.max
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Gbt,
    Pfa,
}

/// Maps a reply's named method onto a local model.
pub fn parse_method(reply: &str) -> Option<MethodChoice> {
    let line = reply
        .lines()
        .find_map(|l| l.trim().strip_prefix(METHOD_MARKER))
        .unwrap_or(reply)
        .to_lowercase();
    if ["xgboost", "gradient boost", "boosted", "gbm", "gbt"].iter().any(|w| line.contains(w)) {
        Some(MethodChoice::Gbt)
    } else if ["logistic", "pfa", "factor analysis"].iter().any(|w| line.contains(w)) {
        Some(MethodChoice::Pfa)
    } else {
        None
    }
}

/// Lets the client pick the method, optionally tunes it through the client,
/// and fits it locally.
#[derive(Clone)]
pub struct LlmGbtPredictor {
    pub client: Arc<dyn LlmClient>,
    /// Client-proposed configurations to evaluate; 0 keeps the defaults.
    pub tuning_budget: usize,
    /// Folds of the inner cross-validation used while tuning.
    pub inner_folds: usize,
}

impl LlmGbtPredictor {
    pub fn new(client: Arc<dyn LlmClient>) -> Self {
        Self {
            client,
            tuning_budget: 0,
            inner_folds: 3,
        }
    }

    pub fn select_method(&self, train: &Dataset) -> Result<MethodChoice> {
        let batch = encode_records(train);
        let flags = StageFlags {
            predictions: false,
            ..StageFlags::default()
        };
        let reply = self.client.send(&build_cot_script(&batch, train.content(), &flags).messages())?;
        Ok(parse_method(&reply).unwrap_or_else(|| {
            log::warn!("no recognizable method in reply; using gradient boosting");
            MethodChoice::Gbt
        }))
    }
}

impl Predictor for LlmGbtPredictor {
    fn name(&self) -> String {
        format!("LLM-GBT ({})", self.client.name())
    }

    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>> {
        match self.select_method(train)? {
            MethodChoice::Pfa => PfaPredictor::default().fit(train, seed),
            MethodChoice::Gbt => {
                let config = if self.tuning_budget > 0 {
                    llm_tuning_loop(train, self.client.as_ref(), self.tuning_budget, self.inner_folds, seed)?.best
                } else {
                    GbtConfig::default()
                };
                GbtPredictor { config }.fit(train, seed)
            }
        }
    }
}
