//! Performance Factor Analysis.
//!
//! P(correct) = sigmoid(beta_q + gamma_l + alpha * s + rho * f), where `s`
//! and `f` count the learner's earlier correct and incorrect attempts on the
//! same question (one skill per question). `gamma_l` is a per-learner
//! ability term; learners absent from training get zero.
//!
//! The L2-regularized negative log-likelihood is convex and is minimized by
//! Jacobi-preconditioned gradient descent with Armijo backtracking.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::metrics::{FittedModel, Predictor};
use crate::numeric::{logistic_loss, sigmoid};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PfaFeatures {
    pub learner: Option<usize>,
    pub question: Option<usize>,
    pub successes: u32,
    pub failures: u32,
}

/// Counts prior outcomes for every record, using only strictly earlier
/// attempts by the same learner on the same question.
pub fn pfa_features(ds: &Dataset) -> Vec<PfaFeatures> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let recs = ds.records();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&recs[a], &recs[b]);
        (&ra.learner_id, &ra.question_id, ra.attempt).cmp(&(&rb.learner_id, &rb.question_id, rb.attempt))
    });
    let mut out = vec![
        PfaFeatures {
            learner: None,
            question: None,
            successes: 0,
            failures: 0,
        };
        ds.len()
    ];
    let mut prev: Option<(&str, &str)> = None;
    let (mut s, mut f) = (0u32, 0u32);
    for &i in &order {
        let r = &recs[i];
        let group = (r.learner_id.as_str(), r.question_id.as_str());
        if prev != Some(group) {
            s = 0;
            f = 0;
            prev = Some(group);
        }
        out[i] = PfaFeatures {
            learner: ds.learner_pos(&r.learner_id),
            question: ds.question_pos(&r.question_id),
            successes: s,
            failures: f,
        };
        match r.obs {
            Some(true) => s += 1,
            Some(false) => f += 1,
            None => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha: f64,
    pub rho: f64,
    pub l2: f64,
}

impl PfaParams {
    pub fn logit(&self, feat: &PfaFeatures) -> f64 {
        let b = feat.question.map_or(0.0, |q| self.beta[q]);
        let g = feat.learner.map_or(0.0, |l| self.gamma[l]);
        b + g + self.alpha * f64::from(feat.successes) + self.rho * f64::from(feat.failures)
    }

    fn from_vec(theta: &[f64], nq: usize, nl: usize, l2: f64) -> Self {
        Self {
            beta: theta[..nq].to_vec(),
            gamma: theta[nq..nq + nl].to_vec(),
            alpha: theta[nq + nl],
            rho: theta[nq + nl + 1],
            l2,
        }
    }
}

pub fn pfa_predict(feat: &PfaFeatures, params: &PfaParams) -> f64 {
    sigmoid(params.logit(feat))
}

/// The regularized training objective over a flat parameter vector laid out
/// as `[beta; gamma; alpha; rho]`.
#[derive(Debug, Clone)]
pub struct PfaObjective {
    rows: Vec<(PfaFeatures, f64)>,
    n_questions: usize,
    n_learners: usize,
    l2: f64,
}

impl PfaObjective {
    pub fn new(train: &Dataset, l2: f64) -> Result<Self> {
        if !(l2 >= 0.0 && l2.is_finite()) {
            return Err(Error::Config(format!("l2 must be finite and >= 0, got {l2}")));
        }
        let rows: Vec<(PfaFeatures, f64)> = pfa_features(train)
            .into_iter()
            .zip(train.records())
            .filter_map(|(f, r)| r.target().map(|t| (f, t)))
            .collect();
        if rows.is_empty() {
            return Err(Error::Model("PFA needs at least one labeled record".into()));
        }
        Ok(Self {
            rows,
            n_questions: train.n_questions(),
            n_learners: train.n_learners(),
            l2,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_questions + self.n_learners + 2
    }

    fn params(&self, theta: &[f64]) -> PfaParams {
        PfaParams::from_vec(theta, self.n_questions, self.n_learners, self.l2)
    }

    fn logit(&self, theta: &[f64], f: &PfaFeatures) -> f64 {
        let (nq, nl) = (self.n_questions, self.n_learners);
        theta[f.question.expect("training row")]
            + theta[nq + f.learner.expect("training row")]
            + theta[nq + nl] * f64::from(f.successes)
            + theta[nq + nl + 1] * f64::from(f.failures)
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let nll: f64 = self
            .rows
            .iter()
            .map(|(f, y)| logistic_loss(self.logit(theta, f), *y))
            .sum();
        nll + 0.5 * self.l2 * theta.iter().map(|t| t * t).sum::<f64>()
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (nq, nl) = (self.n_questions, self.n_learners);
        let mut g: Vec<f64> = theta.iter().map(|t| self.l2 * t).collect();
        for (f, y) in &self.rows {
            let r = sigmoid(self.logit(theta, f)) - y;
            g[f.question.expect("training row")] += r;
            g[nq + f.learner.expect("training row")] += r;
            g[nq + nl] += r * f64::from(f.successes);
            g[nq + nl + 1] += r * f64::from(f.failures);
        }
        g
    }

    /// Upper bound on the Hessian diagonal, used as a preconditioner.
    fn curvature(&self) -> Vec<f64> {
        let (nq, nl) = (self.n_questions, self.n_learners);
        let mut d = vec![self.l2; self.dim()];
        for (f, _) in &self.rows {
            d[f.question.expect("training row")] += 0.25;
            d[nq + f.learner.expect("training row")] += 0.25;
            d[nq + nl] += 0.25 * f64::from(f.successes).powi(2);
            d[nq + nl + 1] += 0.25 * f64::from(f.failures).powi(2);
        }
        d.iter().map(|v| v.max(1e-8)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaConfig {
    pub l2: f64,
    pub max_iter: usize,
    /// Stop once the gradient's Euclidean norm falls below this.
    pub tolerance: f64,
    /// Std of the seeded Gaussian initialization.
    pub init_scale: f64,
}

impl Default for PfaConfig {
    fn default() -> Self {
        Self {
            l2: 0.1,
            max_iter: 20_000,
            tolerance: 1e-6,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PfaFitReport {
    /// Objective after every accepted step, starting from the initial point.
    pub objective: Vec<f64>,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfaModel {
    pub params: PfaParams,
    pub questions: Vec<String>,
    pub learners: Vec<String>,
    pub report: PfaFitReport,
    #[serde(skip)]
    question_pos: HashMap<String, usize>,
    #[serde(skip)]
    learner_pos: HashMap<String, usize>,
    #[serde(skip)]
    history: HashMap<(String, String), Vec<(u32, bool)>>,
}

pub fn pfa_fit(train: &Dataset, config: &PfaConfig, seed: u64) -> Result<PfaModel> {
    let obj = PfaObjective::new(train, config.l2)?;
    let n = obj.dim();
    let normal = Normal::new(0.0, config.init_scale.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = seed::rng(seed::derive_seed(seed, "pfa-init", 0));
    let mut theta: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let precond = obj.curvature();

    let mut value = obj.value(&theta);
    let mut trace = vec![value];
    let mut step: f64 = 1.0;
    let mut grad = obj.gradient(&theta);
    let mut gnorm = norm(&grad);
    let mut converged = gnorm < config.tolerance;
    for _ in 0..config.max_iter {
        if converged {
            break;
        }
        let dir: Vec<f64> = grad.iter().zip(&precond).map(|(g, d)| -g / d).collect();
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut t = (step * 2.0).min(1.0);
        let mut accepted = None;
        while t > 1e-12 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            let v = obj.value(&cand);
            if v <= value + 1e-4 * t * slope {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                theta = cand;
                value = v;
                step = t;
                trace.push(value);
            }
            None => break,
        }
        grad = obj.gradient(&theta);
        gnorm = norm(&grad);
        converged = gnorm < config.tolerance;
    }
    if !converged {
        log::warn!("PFA fit stopped before convergence (gradient norm {gnorm:.3e})");
    }

    let mut history: HashMap<(String, String), Vec<(u32, bool)>> = HashMap::new();
    for r in train.records() {
        if let Some(o) = r.obs {
            history
                .entry((r.learner_id.clone(), r.question_id.clone()))
                .or_default()
                .push((r.attempt, o));
        }
    }
    Ok(PfaModel {
        params: obj.params(&theta),
        questions: train.question_index().keys().cloned().collect(),
        learners: train.learner_index().keys().cloned().collect(),
        report: PfaFitReport {
            objective: trace,
            gradient_norm: gnorm,
            converged,
        },
        question_pos: train.question_index().iter().map(|(k, v)| (k.clone(), *v)).collect(),
        learner_pos: train.learner_index().iter().map(|(k, v)| (k.clone(), *v)).collect(),
        history,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl PfaModel {
    pub fn objective_value(&self) -> f64 {
        *self.report.objective.last().expect("initial objective recorded")
    }

    /// Features for a query, counted from training answers before its attempt.
    pub fn features_for(&self, key: &RecordKey) -> PfaFeatures {
        let (mut s, mut f) = (0, 0);
        if let Some(h) = self.history.get(&(key.learner_id.clone(), key.question_id.clone())) {
            for &(a, o) in h {
                if a < key.attempt {
                    if o {
                        s += 1;
                    } else {
                        f += 1;
                    }
                }
            }
        }
        PfaFeatures {
            learner: self.learner_pos.get(&key.learner_id).copied(),
            question: self.question_pos.get(&key.question_id).copied(),
            successes: s,
            failures: f,
        }
    }
}

impl FittedModel for PfaModel {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        Ok(queries
            .iter()
            .map(|k| pfa_predict(&self.features_for(k), &self.params))
            .collect())
    }

    fn export(&self) -> serde_json::Value {
        let beta: IndexMap<&str, f64> = self
            .questions
            .iter()
            .map(String::as_str)
            .zip(self.params.beta.iter().copied())
            .collect();
        let gamma: IndexMap<&str, f64> = self
            .learners
            .iter()
            .map(String::as_str)
            .zip(self.params.gamma.iter().copied())
            .collect();
        serde_json::json!({
            "beta": beta,
            "gamma": gamma,
            "alpha": self.params.alpha,
            "rho": self.params.rho,
            "l2": self.params.l2,
            "converged": self.report.converged,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct PfaPredictor {
    pub config: PfaConfig,
}

impl Predictor for PfaPredictor {
    fn name(&self) -> String {
        "PFA".into()
    }

    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(pfa_fit(train, &self.config, seed)?))
    }
}
