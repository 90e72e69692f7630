//! Gradient-boosted regression trees for binary outcomes.
//!
//! Second-order boosting of the logistic loss with exact greedy split
//! search. Model features are the learner ordinal, question ordinal and
//! attempt number of each record.

use std::collections::HashMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::metrics::{FittedModel, Predictor};
use crate::numeric::{logistic_loss, logit, sigmoid};
use crate::seed;

/// Leaf L2 regularization.
pub const LAMBDA: f64 = 1.0;

/// Gains this close (relative) are treated as equal for tie-breaking.
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub subsample: f64,
    pub colsample_bytree: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            learning_rate: 0.3,
            max_depth: 6,
            subsample: 1.0,
            colsample_bytree: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !frac(self.subsample) {
            return Err(Error::Config(format!("subsample must be in (0, 1], got {}", self.subsample)));
        }
        if !frac(self.colsample_bytree) {
            return Err(Error::Config(format!(
                "colsample_bytree must be in (0, 1], got {}",
                self.colsample_bytree
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.min_child_weight >= 0.0 && self.min_child_weight.is_finite()) {
            return Err(Error::Config(format!(
                "min_child_weight must be >= 0, got {}",
                self.min_child_weight
            )));
        }
        Ok(())
    }

    /// `n_trees=100, learning_rate=0.3, ...` in field order.
    pub fn to_kv(&self) -> String {
        format!(
            "n_trees={}, learning_rate={}, max_depth={}, subsample={}, colsample_bytree={}, gamma={}, min_child_weight={}",
            self.n_trees,
            self.learning_rate,
            self.max_depth,
            self.subsample,
            self.colsample_bytree,
            self.gamma,
            self.min_child_weight
        )
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value '{value}' for {key}"));
        let float = || value.trim().parse::<f64>().map_err(|_| bad());
        let count = || value.trim().parse::<usize>().map_err(|_| bad());
        match key.trim() {
            "n_trees" => self.n_trees = count()?,
            "learning_rate" | "eta" => self.learning_rate = float()?,
            "max_depth" => self.max_depth = count()?,
            "subsample" => self.subsample = float()?,
            "colsample_bytree" => self.colsample_bytree = float()?,
            "gamma" => self.gamma = float()?,
            "min_child_weight" => self.min_child_weight = float()?,
            other => return Err(Error::Config(format!("unknown GBT parameter '{other}'"))),
        }
        Ok(())
    }

    /// Parses comma- or whitespace-separated `key=value` pairs over the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut any = false;
        for pair in text.split(|c: char| c == ',' || c.is_whitespace()).filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got '{pair}'")))?;
            cfg.set(k, v)?;
            any = true;
        }
        if !any {
            return Err(Error::Config("empty GBT configuration".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
        gain: f64,
        left_hessian: f64,
        right_hessian: f64,
    },
    Leaf {
        weight: f64,
    },
}

/// Flat node list; the root is node 0. Rows with `x[feature] < threshold`
/// go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(weight: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { weight }],
        }
    }

    pub fn output(&self, x: &[f64]) -> f64 {
        self.output_by(|f| x[f])
    }

    fn output_by(&self, x: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if x(*feature) < *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &RegressionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }

    pub fn splits(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtEnsemble {
    pub base_score: f64,
    pub trees: Vec<RegressionTree>,
    pub config: GbtConfig,
    pub n_features: usize,
}

impl GbtEnsemble {
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.base_score + self.config.learning_rate * self.trees.iter().map(|t| t.output(x)).sum::<f64>()
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }

    /// Total split gain per feature.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        for t in &self.trees {
            for n in t.splits() {
                if let Node::Split { feature, gain, .. } = n {
                    imp[*feature] += gain;
                }
            }
        }
        imp
    }
}

/// Column-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nf = rows.first().map_or(0, Vec::len);
        Self {
            columns: (0..nf).map(|f| rows.iter().map(|r| r[f]).collect()).collect(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[i]).collect()
    }
}

/// `½[GL²/(HL+λ) + GR²/(HR+λ) − G²/(H+λ)]`.
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64) -> f64 {
    let score = |g: f64, h: f64| g * g / (h + LAMBDA);
    0.5 * (score(gl, hl) + score(gr, hr) - score(gl + gr, hl + hr))
}

fn better(gain: f64, best: f64) -> bool {
    gain > best + TIE_EPS * best.abs().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub left_hessian: f64,
    pub right_hessian: f64,
}

struct Binned {
    /// Per feature, each row's index into `values`.
    bins: Vec<Vec<u32>>,
    /// Per feature, sorted distinct values.
    values: Vec<Vec<f64>>,
}

impl Binned {
    fn new(x: &FeatureMatrix) -> Self {
        let mut bins = Vec::with_capacity(x.n_features());
        let mut values = Vec::with_capacity(x.n_features());
        for col in &x.columns {
            let mut v: Vec<f64> = col.clone();
            v.sort_by(f64::total_cmp);
            v.dedup();
            bins.push(
                col.iter()
                    .map(|c| v.binary_search_by(|p| p.total_cmp(c)).expect("present") as u32)
                    .collect(),
            );
            values.push(v);
        }
        Self { bins, values }
    }
}

struct Grower<'a> {
    binned: &'a Binned,
    g: &'a [f64],
    h: &'a [f64],
    config: &'a GbtConfig,
    features: Vec<usize>,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn best_split(&self, rows: &[usize]) -> Option<SplitChoice> {
        let mut best: Option<SplitChoice> = None;
        for &f in &self.features {
            let nb = self.binned.values[f].len();
            let mut gb = vec![0.0; nb];
            let mut hb = vec![0.0; nb];
            let mut seen = vec![false; nb];
            for &i in rows {
                let b = self.binned.bins[f][i] as usize;
                gb[b] += self.g[i];
                hb[b] += self.h[i];
                seen[b] = true;
            }
            let present: Vec<usize> = (0..nb).filter(|&b| seen[b]).collect();
            let gt: f64 = present.iter().map(|&b| gb[b]).sum();
            let ht: f64 = present.iter().map(|&b| hb[b]).sum();
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in present.windows(2) {
                gl += gb[w[0]];
                hl += hb[w[0]];
                let (gr, hr) = (gt - gl, ht - hl);
                if hl < self.config.min_child_weight || hr < self.config.min_child_weight {
                    continue;
                }
                let gain = split_gain(gl, hl, gr, hr);
                if gain <= self.config.gamma {
                    continue;
                }
                if best.is_none_or(|b| better(gain, b.gain)) {
                    let vals = &self.binned.values[f];
                    best = Some(SplitChoice {
                        feature: f,
                        threshold: 0.5 * (vals[w[0]] + vals[w[1]]),
                        gain,
                        left_hessian: hl,
                        right_hessian: hr,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { weight: 0.0 });
        let split = if depth < self.config.max_depth {
            self.best_split(rows)
        } else {
            None
        };
        let Some(s) = split else {
            let gs: f64 = rows.iter().map(|&i| self.g[i]).sum();
            let hs: f64 = rows.iter().map(|&i| self.h[i]).sum();
            self.nodes[id] = Node::Leaf {
                weight: -gs / (hs + LAMBDA),
            };
            return id;
        };
        let vals = &self.binned.values[s.feature];
        let bins = &self.binned.bins[s.feature];
        let mut k = 0;
        for j in 0..rows.len() {
            if vals[bins[rows[j]] as usize] < s.threshold {
                rows.swap(j, k);
                k += 1;
            }
        }
        let (l_rows, r_rows) = rows.split_at_mut(k);
        let left = self.grow(l_rows, depth + 1);
        let right = self.grow(r_rows, depth + 1);
        self.nodes[id] = Node::Split {
            feature: s.feature,
            threshold: s.threshold,
            left,
            right,
            gain: s.gain,
            left_hessian: s.left_hessian,
            right_hessian: s.right_hessian,
        };
        id
    }
}

/// Best split of `rows` over all features; exposed for split-search tests.
pub fn find_best_split(x: &FeatureMatrix, g: &[f64], h: &[f64], config: &GbtConfig) -> Option<SplitChoice> {
    let binned = Binned::new(x);
    let grower = Grower {
        binned: &binned,
        g,
        h,
        config,
        features: (0..x.n_features()).collect(),
        nodes: Vec::new(),
    };
    grower.best_split(&(0..x.n_rows()).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtTrace {
    /// Mean training log-loss before the first tree and after every tree.
    pub train_log_loss: Vec<f64>,
}

pub fn gbt_fit_matrix(
    x: &FeatureMatrix,
    y: &[f64],
    config: &GbtConfig,
    seed: u64,
) -> Result<(GbtEnsemble, GbtTrace)> {
    config.validate()?;
    let n = x.n_rows();
    if n < 2 || y.len() != n {
        return Err(Error::Model(format!("GBT needs >= 2 labeled rows, got {}", y.len())));
    }
    let mean = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
    let base_score = logit(mean);
    let binned = Binned::new(x);
    let nf = x.n_features();
    let mut margin = vec![base_score; n];
    let loss = |m: &[f64]| m.iter().zip(y).map(|(&z, &t)| logistic_loss(z, t)).sum::<f64>() / n as f64;
    let mut trace = vec![loss(&margin)];
    let mut trees = Vec::with_capacity(config.n_trees);
    let n_sub = ((config.subsample * n as f64).round() as usize).clamp(1, n);
    let n_col = ((config.colsample_bytree * nf as f64).round() as usize).clamp(1, nf.max(1));
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for t in 0..config.n_trees {
        for i in 0..n {
            let p = sigmoid(margin[i]);
            g[i] = p - y[i];
            h[i] = p * (1.0 - p);
        }
        let mut rng = seed::rng(seed::derive_seed(seed, "gbt-tree", t as u64));
        let mut rows: Vec<usize> = if n_sub < n {
            let mut r = index::sample(&mut rng, n, n_sub).into_vec();
            r.sort_unstable();
            r
        } else {
            (0..n).collect()
        };
        let mut features: Vec<usize> = if n_col < nf {
            index::sample(&mut rng, nf, n_col).into_vec()
        } else {
            (0..nf).collect()
        };
        features.sort_unstable();
        let mut grower = Grower {
            binned: &binned,
            g: &g,
            h: &h,
            config,
            features,
            nodes: Vec::new(),
        };
        grower.grow(&mut rows, 0);
        let tree = RegressionTree { nodes: grower.nodes };
        for (i, m) in margin.iter_mut().enumerate() {
            *m += config.learning_rate * tree.output_by(|f| x.columns[f][i]);
        }
        trace.push(loss(&margin));
        trees.push(tree);
    }
    Ok((
        GbtEnsemble {
            base_score,
            trees,
            config: config.clone(),
            n_features: nf,
        },
        GbtTrace { train_log_loss: trace },
    ))
}

/// Ensemble plus the id → ordinal encodings used to build its features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub ensemble: GbtEnsemble,
    pub learners: Vec<String>,
    pub questions: Vec<String>,
    #[serde(skip)]
    pub trace: Option<GbtTrace>,
    #[serde(skip)]
    positions: Option<(HashMap<String, usize>, HashMap<String, usize>)>,
}

impl GbtModel {
    fn index(&self) -> (HashMap<String, usize>, HashMap<String, usize>) {
        let pos = |v: &[String]| v.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        (pos(&self.learners), pos(&self.questions))
    }

    /// Unseen learners and questions map to the ordinal one past the last one seen.
    pub fn features(&self, key: &RecordKey) -> Vec<f64> {
        let owned;
        let (lp, qp) = match &self.positions {
            Some(p) => p,
            None => {
                owned = self.index();
                &owned
            }
        };
        vec![
            lp.get(&key.learner_id).copied().unwrap_or(self.learners.len()) as f64,
            qp.get(&key.question_id).copied().unwrap_or(self.questions.len()) as f64,
            f64::from(key.attempt),
        ]
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let mut m: GbtModel = serde_json::from_value(v.clone())?;
        m.ensemble.config.validate()?;
        m.positions = Some(m.index());
        Ok(m)
    }
}

pub fn dataset_features(ds: &Dataset) -> (FeatureMatrix, Vec<f64>) {
    let mut cols = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut y = Vec::new();
    for r in ds.records() {
        let Some(t) = r.target() else { continue };
        cols[0].push(ds.learner_pos(&r.learner_id).expect("indexed") as f64);
        cols[1].push(ds.question_pos(&r.question_id).expect("indexed") as f64);
        cols[2].push(f64::from(r.attempt));
        y.push(t);
    }
    (FeatureMatrix { columns: cols }, y)
}

pub fn gbt_fit(train: &Dataset, config: &GbtConfig, seed: u64) -> Result<GbtModel> {
    let (x, y) = dataset_features(train);
    let (ensemble, trace) = gbt_fit_matrix(&x, &y, config, seed)?;
    let mut m = GbtModel {
        ensemble,
        learners: train.learner_index().keys().cloned().collect(),
        questions: train.question_index().keys().cloned().collect(),
        trace: Some(trace),
        positions: None,
    };
    m.positions = Some(m.index());
    Ok(m)
}

impl FittedModel for GbtModel {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        Ok(queries
            .iter()
            .map(|k| self.ensemble.predict_row(&self.features(k)))
            .collect())
    }

    fn export(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable")
    }
}

#[derive(Debug, Clone, Default)]
pub struct GbtPredictor {
    pub config: GbtConfig,
}

impl Predictor for GbtPredictor {
    fn name(&self) -> String {
        "GBT".into()
    }

    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(gbt_fit(train, &self.config, seed)?))
    }
}
