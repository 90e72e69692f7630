//! Three-way factorization of the learner × question × attempt tensor.
//!
//! `x[l,q,a] ≈ Σ_k U[l,k] · V[k,q,a]`, fit by alternating ridge least
//! squares on the observed cells. Predictions are clamped to `[0, 1]`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::metrics::{FittedModel, Predictor};
use crate::seed;

/// Observed cells `(learner, question, attempt_index, value)`; the attempt
/// index is zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorCells {
    pub n_learners: usize,
    pub n_questions: usize,
    pub n_attempts: usize,
    pub cells: Vec<(usize, usize, usize, f64)>,
}

impl TensorCells {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let cells = ds
            .records()
            .iter()
            .filter_map(|r| {
                let y = r.target()?;
                Some((
                    ds.learner_pos(&r.learner_id)?,
                    ds.question_pos(&r.question_id)?,
                    r.attempt as usize - 1,
                    y,
                ))
            })
            .collect();
        Self {
            n_learners: ds.n_learners(),
            n_questions: ds.n_questions(),
            n_attempts: ds.max_attempt() as usize,
            cells,
        }
    }

    fn fiber(&self, q: usize, a: usize) -> usize {
        q * self.n_attempts + a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorConfig {
    pub rank: usize,
    pub lambda: f64,
    pub max_sweeps: usize,
    /// Stop once a sweep improves the objective by less than this, relative.
    pub tolerance: f64,
}

impl Default for TensorConfig {
    fn default() -> Self {
        Self {
            rank: 3,
            lambda: 0.1,
            max_sweeps: 500,
            tolerance: 1e-9,
        }
    }
}

impl TensorConfig {
    fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("tensor rank must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("tensor lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Factors: `u` is n_learners × r; `v[fiber]` holds the r-vector of
/// question/attempt fiber `q * n_attempts + a`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFactors {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub n_questions: usize,
    pub n_attempts: usize,
}

impl TensorFactors {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// Unclamped inner product.
    pub fn raw(&self, l: usize, q: usize, a: usize) -> f64 {
        let f = q * self.n_attempts + a;
        self.u.row(l).iter().zip(self.v.column(f).iter()).map(|(x, y)| x * y).sum()
    }

    /// Applies `U → U·A`, `V → A⁻¹·V`.
    pub fn reparameterize(&self, a: &DMatrix<f64>) -> Option<Self> {
        let inv = a.clone().try_inverse()?;
        Some(Self {
            u: &self.u * a,
            v: inv * &self.v,
            ..self.clone()
        })
    }
}

pub fn objective(f: &TensorFactors, cells: &TensorCells, lambda: f64) -> f64 {
    let sse: f64 = cells
        .cells
        .iter()
        .map(|&(l, q, a, y)| (y - f.raw(l, q, a)).powi(2))
        .sum();
    sse + lambda * (f.u.norm_squared() + f.v.norm_squared())
}

/// Minimizer of `Σ (y - x·b)² + λ‖x‖²` over `x`.
fn ridge_solve(gram: DMatrix<f64>, rhs: DVector<f64>) -> DVector<f64> {
    if let Some(ch) = gram.clone().cholesky() {
        return ch.solve(&rhs);
    }
    gram.svd(true, true)
        .solve(&rhs, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(rhs.len()))
}

fn solve_block(
    groups: &[Vec<(usize, f64)>],
    other: &DMatrix<f64>,
    current: &DMatrix<f64>,
    lambda: f64,
) -> Vec<DVector<f64>> {
    let r = other.nrows();
    groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            if g.is_empty() {
                return if lambda > 0.0 {
                    DVector::zeros(r)
                } else {
                    current.column(i).into_owned()
                };
            }
            let mut gram = DMatrix::<f64>::identity(r, r) * lambda;
            let mut rhs = DVector::<f64>::zeros(r);
            for &(j, y) in g {
                let b = other.column(j);
                gram.ger(1.0, &b, &b, 1.0);
                rhs.axpy(y, &b, 1.0);
            }
            ridge_solve(gram, rhs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlsReport {
    /// Objective at initialization and after every sweep.
    pub objective: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

/// Alternating least squares from a seeded uniform `[0, 1/sqrt(r)]` start.
pub fn als_fit(cells: &TensorCells, config: &TensorConfig, seed: u64) -> Result<(TensorFactors, AlsReport)> {
    config.validate()?;
    let r = config.rank;
    let n_fibers = cells.n_questions * cells.n_attempts;
    let mut rng = seed::rng(seed::derive_seed(seed, "tensor-init", r as u64));
    let hi = 1.0 / (r as f64).sqrt();
    let mut f = TensorFactors {
        u: DMatrix::from_fn(cells.n_learners, r, |_, _| rng.random_range(0.0..hi)),
        v: DMatrix::from_fn(r, n_fibers, |_, _| rng.random_range(0.0..hi)),
        n_questions: cells.n_questions,
        n_attempts: cells.n_attempts,
    };
    let mut by_learner = vec![Vec::new(); cells.n_learners];
    let mut by_fiber = vec![Vec::new(); n_fibers];
    for &(l, q, a, y) in &cells.cells {
        let fi = cells.fiber(q, a);
        by_learner[l].push((fi, y));
        by_fiber[fi].push((l, y));
    }
    let mut value = objective(&f, cells, config.lambda);
    let mut trace = vec![value];
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < config.max_sweeps {
        sweeps += 1;
        let ut = f.u.transpose();
        let rows = solve_block(&by_learner, &f.v, &ut, config.lambda);
        for (l, row) in rows.into_iter().enumerate() {
            f.u.set_row(l, &row.transpose());
        }
        let ut = f.u.transpose();
        let cols = solve_block(&by_fiber, &ut, &f.v, config.lambda);
        for (fi, col) in cols.into_iter().enumerate() {
            f.v.set_column(fi, &col);
        }
        let next = objective(&f, cells, config.lambda);
        trace.push(next);
        let improvement = value - next;
        value = next;
        if improvement < config.tolerance * value.max(1e-300).max(config.tolerance) {
            converged = true;
            break;
        }
    }
    Ok((
        f,
        AlsReport {
            objective: trace,
            sweeps,
            converged,
        },
    ))
}

#[derive(Debug, Clone)]
pub struct TensorModel {
    pub factors: TensorFactors,
    pub lambda: f64,
    pub learners: Vec<String>,
    pub questions: Vec<String>,
    /// Learners with no observed cells; their rows hold the mean fitted row.
    pub flagged_learners: Vec<String>,
    pub global_mean: f64,
    pub report: AlsReport,
    mean_row: DVector<f64>,
    question_observed: Vec<bool>,
    learner_pos: HashMap<String, usize>,
    question_pos: HashMap<String, usize>,
}

impl TensorModel {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn max_attempt(&self) -> u32 {
        self.factors.n_attempts as u32
    }

    pub fn predict_ids(&self, learner: &str, question: &str, attempt: u32) -> f64 {
        let Some(&q) = self.question_pos.get(question) else {
            return self.global_mean;
        };
        if !self.question_observed[q] {
            return self.global_mean;
        }
        let a = (attempt.max(1) as usize).min(self.factors.n_attempts) - 1;
        let fi = q * self.factors.n_attempts + a;
        let v = self.factors.v.column(fi);
        let raw = match self.learner_pos.get(learner) {
            Some(&l) => self.factors.u.row(l).transpose().dot(&v),
            None => self.mean_row.dot(&v),
        };
        raw.clamp(0.0, 1.0)
    }
}

pub fn tensor_fit(train: &Dataset, config: &TensorConfig, seed: u64) -> Result<TensorModel> {
    config.validate()?;
    if config.rank > train.n_learners() {
        return Err(Error::Config(format!(
            "tensor rank {} exceeds learner count {}",
            config.rank,
            train.n_learners()
        )));
    }
    let cells = TensorCells::from_dataset(train);
    if cells.cells.is_empty() {
        return Err(Error::Model("no labeled cells".into()));
    }
    let (mut factors, report) = als_fit(&cells, config, seed)?;
    let na = cells.n_attempts;
    let mut learner_seen = vec![false; cells.n_learners];
    let mut fiber_seen = vec![false; cells.n_questions * na];
    for &(l, q, a, _) in &cells.cells {
        learner_seen[l] = true;
        fiber_seen[cells.fiber(q, a)] = true;
    }
    let fitted: Vec<usize> = (0..cells.n_learners).filter(|&l| learner_seen[l]).collect();
    let mut mean_row = DVector::zeros(config.rank);
    for &l in &fitted {
        mean_row += factors.u.row(l).transpose();
    }
    mean_row /= fitted.len() as f64;
    let learners: Vec<String> = train.learner_index().keys().cloned().collect();
    let mut flagged = Vec::new();
    for l in 0..cells.n_learners {
        if !learner_seen[l] {
            factors.u.set_row(l, &mean_row.transpose());
            flagged.push(learners[l].clone());
        }
    }
    // Unobserved attempt slices borrow the nearest observed slice of the same question.
    let mut question_observed = vec![false; cells.n_questions];
    for q in 0..cells.n_questions {
        let seen: Vec<usize> = (0..na).filter(|&a| fiber_seen[q * na + a]).collect();
        question_observed[q] = !seen.is_empty();
        for a in 0..na {
            if fiber_seen[q * na + a] || seen.is_empty() {
                continue;
            }
            let src = *seen
                .iter()
                .min_by_key(|&&s| (s.abs_diff(a), s > a))
                .expect("non-empty");
            let col = factors.v.column(q * na + src).into_owned();
            factors.v.set_column(q * na + a, &col);
        }
    }
    let global_mean = cells.cells.iter().map(|c| c.3).sum::<f64>() / cells.cells.len() as f64;
    Ok(TensorModel {
        factors,
        lambda: config.lambda,
        learners,
        questions: train.question_index().keys().cloned().collect(),
        flagged_learners: flagged,
        global_mean,
        report,
        mean_row,
        question_observed,
        learner_pos: train.learner_index().iter().map(|(k, v)| (k.clone(), *v)).collect(),
        question_pos: train.question_index().iter().map(|(k, v)| (k.clone(), *v)).collect(),
    })
}

impl FittedModel for TensorModel {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        Ok(queries
            .iter()
            .map(|k| self.predict_ids(&k.learner_id, &k.question_id, k.attempt))
            .collect())
    }

    fn export(&self) -> serde_json::Value {
        let f = &self.factors;
        let r = f.rank();
        let u: Vec<f64> = (0..f.u.nrows()).flat_map(|l| f.u.row(l).iter().copied().collect::<Vec<_>>()).collect();
        let mut v = Vec::with_capacity(r * f.v.ncols());
        for k in 0..r {
            v.extend(f.v.row(k).iter().copied());
        }
        serde_json::json!({
            "r": r,
            "lambda": self.lambda,
            "learners": self.learners,
            "questions": self.questions,
            "U_shape": [f.u.nrows(), r],
            "U": u,
            "V_shape": [r, f.n_questions, f.n_attempts],
            "V": v,
            "flagged_learners": self.flagged_learners,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TensorPredictor {
    pub config: TensorConfig,
}

impl Predictor for TensorPredictor {
    fn name(&self) -> String {
        "Tensor".into()
    }

    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(tensor_fit(train, &self.config, seed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionRecord;

    fn single(u: &[f64], v: &[f64]) -> TensorModel {
        let ds = Dataset::new(vec![InteractionRecord::new("A", "Q", 1, Some(true))], "t").unwrap();
        let mut m = tensor_fit(
            &ds,
            &TensorConfig {
                rank: 1,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        m.factors.u = DMatrix::from_row_slice(1, u.len(), u);
        m.factors.v = DMatrix::from_column_slice(v.len(), 1, v);
        m
    }

    #[test]
    fn basis_selection_and_clamp() {
        assert!((single(&[1.0, 0.0], &[0.7, 0.3]).predict_ids("A", "Q", 1) - 0.7).abs() < 1e-15);
        assert_eq!(single(&[1.0, 1.0], &[0.7, 0.7]).predict_ids("A", "Q", 1), 1.0);
        assert_eq!(single(&[1.0], &[-0.2]).predict_ids("A", "Q", 1), 0.0);
        // Later attempts than seen reuse the last slice.
        assert!((single(&[1.0, 0.0], &[0.7, 0.3]).predict_ids("A", "Q", 9) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_rank_one() {
        let cells = TensorCells {
            n_learners: 4,
            n_questions: 3,
            n_attempts: 2,
            cells: (0..24).map(|i| (i / 6, (i / 2) % 3, i % 2, 0.6)).collect(),
        };
        let cfg = TensorConfig {
            rank: 1,
            lambda: 0.0,
            ..Default::default()
        };
        let (f, _) = als_fit(&cells, &cfg, 5).unwrap();
        for &(l, q, a, y) in &cells.cells {
            assert!((f.raw(l, q, a) - y).abs() < 1e-6);
        }
    }

    #[test]
    fn fallbacks() {
        let recs = vec![
            InteractionRecord::new("A", "Q1", 1, Some(true)),
            InteractionRecord::new("A", "Q1", 3, Some(true)),
            InteractionRecord::new("B", "Q1", 1, Some(false)),
            InteractionRecord::new("C", "Q2", 1, None),
        ];
        let ds = Dataset::new(recs, "t").unwrap();
        let m = tensor_fit(&ds, &TensorConfig::default(), 2).unwrap();
        assert_eq!(m.flagged_learners, vec!["C".to_string()]);
        assert_eq!(m.predict_ids("C", "Q2", 1), m.global_mean);
        let slice2 = m.factors.v.column(1).into_owned();
        assert_eq!(slice2, m.factors.v.column(0).into_owned());
        assert!(m.predict_ids("Z", "Q1", 1).is_finite());
    }

    #[test]
    fn rejects_bad_config() {
        let cells = TensorCells {
            n_learners: 1,
            n_questions: 1,
            n_attempts: 1,
            cells: vec![(0, 0, 0, 1.0)],
        };
        let cfg = TensorConfig {
            rank: 0,
            ..Default::default()
        };
        assert!(als_fit(&cells, &cfg, 0).is_err());
        let cfg = TensorConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(als_fit(&cells, &cfg, 0).is_err());
    }
}
