//! SPARFA-Lite style quantized matrix completion.
//!
//! Binary learner × question outcomes are modeled as
//! `P(correct) = sigmoid(w_l · c_q + mu_q)` with learner factors `W`
//! (n_learners × r), question-concept loadings `C` (r × n_questions) and
//! per-question intercepts `mu`. The rank is chosen automatically by
//! held-out log-loss on an internal validation split.
//!
//! Multi-attempt data is collapsed to each learner's first labeled attempt
//! on a question; predictions for later attempts reuse that cell.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::metrics::{mean, standard_error, FittedModel, Predictor};
use crate::numeric::{logistic_loss, sigmoid};
use crate::seed;

/// Observed cells of a rows × cols binary matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixCells {
    pub n_rows: usize,
    pub n_cols: usize,
    pub cells: Vec<(usize, usize, f64)>,
}

impl MatrixCells {
    /// First labeled attempt of every (learner, question) pair.
    pub fn first_attempts(ds: &Dataset) -> Self {
        let mut first: BTreeMap<(usize, usize), (u32, f64)> = BTreeMap::new();
        for r in ds.records() {
            let Some(y) = r.target() else { continue };
            let key = (
                ds.learner_pos(&r.learner_id).expect("indexed"),
                ds.question_pos(&r.question_id).expect("indexed"),
            );
            first
                .entry(key)
                .and_modify(|e| {
                    if r.attempt < e.0 {
                        *e = (r.attempt, y);
                    }
                })
                .or_insert((r.attempt, y));
        }
        Self {
            n_rows: ds.n_learners(),
            n_cols: ds.n_questions(),
            cells: first.into_iter().map(|((l, q), (_, y))| (l, q, y)).collect(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            cells: idx.iter().map(|&i| self.cells[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparfaConfig {
    pub rank_candidates: Vec<usize>,
    /// L2 strength on `W` and `C`; `penalty` sets how it scales.
    pub l2: f64,
    /// L2 strength on the intercepts, keeping all-correct columns finite.
    pub mu_l2: f64,
    pub max_sweeps: usize,
    /// Relative objective decrease per sweep below which fitting stops.
    pub tolerance: f64,
    /// Folds of the internal split used for rank selection.
    pub validation_folds: usize,
    /// Prefer the smallest rank within one standard error of the best.
    pub one_se_rule: bool,
    pub init_scale: f64,
    pub penalty: Penalty,
}

/// How the L2 strength relates to the log-loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalty {
    /// `Σ loss + λ/2 (‖W‖² + ‖C‖²)`
    Sum,
    /// `mean loss + λ/2 (‖W‖² + ‖C‖²)`
    Mean,
    /// `Σ loss + λ/2 (Σ_l n_l ‖w_l‖² + Σ_q n_q ‖c_q‖²)` with observation counts `n`.
    CountWeighted,
}

impl Default for SparfaConfig {
    fn default() -> Self {
        Self {
            rank_candidates: vec![1, 2, 3, 4],
            l2: 0.05,
            mu_l2: 0.001,
            max_sweeps: 2000,
            tolerance: 1e-9,
            validation_folds: 5,
            one_se_rule: true,
            init_scale: 0.1,
            penalty: Penalty::CountWeighted,
        }
    }
}

/// Fitted factors. `c` is stored r × n_questions.
#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub w: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub mu: Vec<f64>,
}

impl Factors {
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn logit(&self, l: usize, q: usize) -> f64 {
        let mut z = self.mu[q];
        for k in 0..self.rank() {
            z += self.w[(l, k)] * self.c[(k, q)];
        }
        z
    }

    pub fn probability(&self, l: usize, q: usize) -> f64 {
        sigmoid(self.logit(l, q))
    }
}

struct Objective<'a> {
    cells: &'a MatrixCells,
    /// Multiplier on the summed log-loss.
    nll_scale: f64,
    /// Per-learner and per-question L2 strengths.
    l2_rows: Vec<f64>,
    l2_cols: Vec<f64>,
    mu_l2: f64,
}

impl<'a> Objective<'a> {
    fn new(cells: &'a MatrixCells, config: &SparfaConfig) -> Self {
        let mut l2_rows = vec![config.l2; cells.n_rows];
        let mut l2_cols = vec![config.l2; cells.n_cols];
        let nll_scale = match config.penalty {
            Penalty::Sum => 1.0,
            Penalty::Mean => 1.0 / cells.cells.len().max(1) as f64,
            Penalty::CountWeighted => {
                l2_rows.iter_mut().for_each(|v| *v = 0.0);
                l2_cols.iter_mut().for_each(|v| *v = 0.0);
                for &(l, q, _) in &cells.cells {
                    l2_rows[l] += config.l2;
                    l2_cols[q] += config.l2;
                }
                1.0
            }
        };
        Self {
            cells,
            nll_scale,
            l2_rows,
            l2_cols,
            mu_l2: config.mu_l2,
        }
    }

    fn value(&self, f: &Factors) -> f64 {
        let nll: f64 = self
            .cells
            .cells
            .iter()
            .map(|&(l, q, y)| logistic_loss(f.logit(l, q), y))
            .sum();
        let pw: f64 = (0..f.w.nrows()).map(|l| self.l2_rows[l] * f.w.row(l).norm_squared()).sum();
        let pc: f64 = (0..f.c.ncols()).map(|q| self.l2_cols[q] * f.c.column(q).norm_squared()).sum();
        nll * self.nll_scale + 0.5 * (pw + pc) + 0.5 * self.mu_l2 * f.mu.iter().map(|m| m * m).sum::<f64>()
    }

    fn residuals(&self, f: &Factors) -> Vec<f64> {
        self.cells
            .cells
            .iter()
            .map(|&(l, q, y)| (sigmoid(f.logit(l, q)) - y) * self.nll_scale)
            .collect()
    }

    /// Preconditioned descent direction for W.
    fn w_direction(&self, f: &Factors) -> DMatrix<f64> {
        let r = self.residuals(f);
        let mut g = f.w.clone();
        for (l, lam) in self.l2_rows.iter().enumerate() {
            g.row_mut(l).scale_mut(*lam);
        }
        let mut curv: Vec<f64> = self.l2_rows.iter().map(|v| v.max(1e-8)).collect();
        for (&(l, q, _), res) in self.cells.cells.iter().zip(&r) {
            let col = f.c.column(q);
            for k in 0..f.rank() {
                g[(l, k)] += res * col[k];
            }
            curv[l] += 0.25 * self.nll_scale * col.norm_squared();
        }
        for (l, c) in curv.iter().enumerate() {
            g.row_mut(l).scale_mut(-1.0 / c);
        }
        g
    }

    /// Preconditioned descent direction for (C, mu).
    fn c_direction(&self, f: &Factors) -> (DMatrix<f64>, Vec<f64>) {
        let r = self.residuals(f);
        let mut gc = f.c.clone();
        for (q, lam) in self.l2_cols.iter().enumerate() {
            gc.column_mut(q).scale_mut(*lam);
        }
        let mut gmu: Vec<f64> = f.mu.iter().map(|m| self.mu_l2 * m).collect();
        let mut curv_c: Vec<f64> = self.l2_cols.iter().map(|v| v.max(1e-8)).collect();
        let mut curv_mu = vec![self.mu_l2.max(1e-8); f.c.ncols()];
        for (&(l, q, _), res) in self.cells.cells.iter().zip(&r) {
            let row = f.w.row(l);
            for k in 0..f.rank() {
                gc[(k, q)] += res * row[k];
            }
            gmu[q] += res;
            curv_c[q] += 0.25 * self.nll_scale * row.norm_squared();
            curv_mu[q] += 0.25 * self.nll_scale;
        }
        for (q, c) in curv_c.iter().enumerate() {
            gc.column_mut(q).scale_mut(-1.0 / c);
        }
        let dmu = gmu.iter().zip(&curv_mu).map(|(g, c)| -g / c).collect();
        (gc, dmu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFitReport {
    /// Objective after every accepted block step, starting from the initial point.
    pub objective: Vec<f64>,
    pub sweeps: usize,
}

/// Fits a fixed-rank model to `cells` by alternating preconditioned
/// gradient steps on W and on (C, mu); each step starts at unit length and
/// is halved until the objective does not increase.
pub fn fit_rank(cells: &MatrixCells, rank: usize, config: &SparfaConfig, seed: u64) -> (Factors, RankFitReport) {
    let normal = Normal::new(0.0, config.init_scale).expect("finite scale");
    let mut rng = seed::rng(seed::derive_seed(seed, "sparfa-init", rank as u64));
    let mut col_sum = vec![(0.0, 0.0); cells.n_cols];
    for &(_, q, y) in &cells.cells {
        col_sum[q].0 += y;
        col_sum[q].1 += 1.0;
    }
    let mu = col_sum
        .iter()
        .map(|&(s, n)| {
            let p = (s + 0.5) / (n + 1.0);
            (p / (1.0 - p)).ln()
        })
        .collect();
    let mut f = Factors {
        w: DMatrix::from_fn(cells.n_rows, rank, |_, _| normal.sample(&mut rng)),
        c: DMatrix::from_fn(rank, cells.n_cols, |_, _| normal.sample(&mut rng)),
        mu,
    };
    let obj = Objective::new(cells, config);
    let mut value = obj.value(&f);
    let mut trace = vec![value];
    let mut sweeps = 0;
    for _ in 0..config.max_sweeps {
        sweeps += 1;
        let start = value;
        if rank > 0 {
            let d = obj.w_direction(&f);
            let mut t = 1.0;
            while t > 1e-10 {
                let cand = Factors {
                    w: &f.w + &d * t,
                    ..f.clone()
                };
                let v = obj.value(&cand);
                if v <= value {
                    f = cand;
                    value = v;
                    trace.push(v);
                    break;
                }
                t *= 0.5;
            }
        }
        let (dc, dmu) = obj.c_direction(&f);
        let mut t = 1.0;
        while t > 1e-10 {
            let cand = Factors {
                c: &f.c + &dc * t,
                mu: f.mu.iter().zip(&dmu).map(|(m, d)| m + t * d).collect(),
                w: f.w.clone(),
            };
            let v = obj.value(&cand);
            if v <= value {
                f = cand;
                value = v;
                trace.push(v);
                break;
            }
            t *= 0.5;
        }
        if start - value <= config.tolerance * start.abs().max(1.0) {
            break;
        }
    }
    (f, RankFitReport { objective: trace, sweeps })
}

pub fn mean_log_loss(f: &Factors, cells: &MatrixCells) -> f64 {
    let s: f64 = cells
        .cells
        .iter()
        .map(|&(l, q, y)| logistic_loss(f.logit(l, q), y))
        .sum();
    s / cells.cells.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    /// (rank, held-out mean log-loss) for rank 0 and every admissible candidate.
    pub scores: Vec<(usize, f64)>,
    pub selected: usize,
}

/// Picks the rank with the lowest held-out log-loss (lower rank on ties),
/// always considering the intercept-only rank 0. Held-out loss is averaged
/// over `validation_folds` seeded partitions of the observed cells.
pub fn select_rank(cells: &MatrixCells, config: &SparfaConfig, seed: u64) -> RankSelection {
    let max_rank = cells.n_rows.min(cells.n_cols);
    let mut ranks: Vec<usize> = std::iter::once(0)
        .chain(config.rank_candidates.iter().copied().filter(|&r| r >= 1 && r <= max_rank))
        .collect();
    ranks.sort_unstable();
    ranks.dedup();
    let mut idx: Vec<usize> = (0..cells.cells.len()).collect();
    idx.shuffle(&mut seed::rng(seed::derive_seed(seed, "sparfa-split", 0)));
    let k = config.validation_folds.clamp(2, cells.cells.len().max(2));
    let splits: Vec<(MatrixCells, MatrixCells)> = (0..k)
        .map(|f| {
            let (val, fit): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
                idx.iter().copied().enumerate().partition(|(rank, _)| rank % k == f);
            let pick = |v: Vec<(usize, usize)>| cells.subset(&v.into_iter().map(|p| p.1).collect::<Vec<_>>());
            (pick(fit), pick(val))
        })
        .filter(|(fit, val)| !fit.cells.is_empty() && !val.cells.is_empty())
        .collect();
    let per_fold: Vec<Vec<f64>> = ranks
        .par_iter()
        .map(|&r| {
            splits
                .iter()
                .map(|(fit, val)| mean_log_loss(&fit_rank(fit, r, config, seed).0, val))
                .collect()
        })
        .collect();
    let scores: Vec<(usize, f64)> = ranks.iter().zip(&per_fold).map(|(&r, v)| (r, mean(v))).collect();
    let (best_i, best) = scores
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |b, (i, s)| if s.1 < b.1 { (i, s.1) } else { b });
    let slack = if config.one_se_rule { standard_error(&per_fold[best_i]) } else { 0.0 };
    let selected = scores.iter().find(|s| s.1 <= best + slack).map_or(0, |s| s.0);
    RankSelection { scores, selected }
}

#[derive(Debug, Clone)]
pub struct LowRankModel {
    pub factors: Factors,
    pub learners: Vec<String>,
    pub questions: Vec<String>,
    pub global_mean: f64,
    pub selection: Option<RankSelection>,
    pub report: RankFitReport,
    learner_pos: HashMap<String, usize>,
    question_pos: HashMap<String, usize>,
}

impl LowRankModel {
    pub fn rank(&self) -> usize {
        self.factors.rank()
    }

    pub fn predict_ids(&self, learner: &str, question: &str) -> f64 {
        match (self.learner_pos.get(learner), self.question_pos.get(question)) {
            (Some(&l), Some(&q)) => self.factors.probability(l, q),
            (None, Some(&q)) => sigmoid(self.factors.mu[q]),
            _ => self.global_mean,
        }
    }
}

pub fn sparfa_fit(train: &Dataset, config: &SparfaConfig, seed: u64) -> Result<LowRankModel> {
    if train.n_learners() < 2 || train.n_questions() < 2 {
        return Err(Error::Model("SPARFA-Lite needs at least 2 learners and 2 questions".into()));
    }
    let cells = MatrixCells::first_attempts(train);
    if cells.cells.is_empty() {
        return Err(Error::Model("no labeled cells".into()));
    }
    let ys: Vec<f64> = cells.cells.iter().map(|c| c.2).collect();
    let global_mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let constant = ys.iter().all(|&y| y == ys[0]);
    let (rank, selection) = if constant || cells.cells.len() < 3 {
        (0, None)
    } else {
        let s = select_rank(&cells, config, seed);
        (s.selected, Some(s))
    };
    let (factors, report) = fit_rank(&cells, rank, config, seed);
    Ok(LowRankModel {
        factors,
        learners: train.learner_index().keys().cloned().collect(),
        questions: train.question_index().keys().cloned().collect(),
        global_mean,
        selection,
        report,
        learner_pos: train.learner_index().iter().map(|(k, v)| (k.clone(), *v)).collect(),
        question_pos: train.question_index().iter().map(|(k, v)| (k.clone(), *v)).collect(),
    })
}

impl FittedModel for LowRankModel {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        Ok(queries
            .iter()
            .map(|k| self.predict_ids(&k.learner_id, &k.question_id))
            .collect())
    }

    fn export(&self) -> serde_json::Value {
        let f = &self.factors;
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
        };
        serde_json::json!({
            "r": self.rank(),
            "learners": self.learners,
            "questions": self.questions,
            "W": rows(&f.w),
            "C": rows(&f.c),
            "mu": f.mu,
            "rank_selection": self.selection,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct SparfaPredictor {
    pub config: SparfaConfig,
}

impl Predictor for SparfaPredictor {
    fn name(&self) -> String {
        "SPARFA-Lite".into()
    }

    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(sparfa_fit(train, &self.config, seed)?))
    }
}
