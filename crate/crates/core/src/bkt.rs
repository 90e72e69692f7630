//! Bayesian Knowledge Tracing.
//!
//! Each question is a two-state hidden Markov model (unmastered, mastered)
//! with no forgetting. Parameters are fit per question with Baum-Welch EM,
//! computed in log space. An optional individualized mode adds a per-learner
//! logit offset on the initial-mastery probability, fit jointly with the
//! question parameters under a Gaussian prior on the offsets.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::metrics::{FittedModel, Predictor};
use crate::numeric::{logit, sigmoid, softplus};
use crate::seed;

/// Lower/upper clamp applied to every probability before it is divided by
/// or logged.
pub const PROB_FLOOR: f64 = 1e-6;

/// Upper bound on fitted slip and guess. Above it, a mastered learner would be
/// more likely wrong than right (or an unmastered one more likely right), and
/// EM can trade initial mastery for guessing on all-correct data.
pub const MAX_NOISE: f64 = 0.5 - 1e-3;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub p_init: f64,
    pub p_learn: f64,
    pub p_slip: f64,
    pub p_guess: f64,
}

impl BktParams {
    /// EM starting point before jitter.
    pub const INITIAL: BktParams = BktParams {
        p_init: 0.4,
        p_learn: 0.2,
        p_slip: 0.1,
        p_guess: 0.2,
    };

    pub fn new(p_init: f64, p_learn: f64, p_slip: f64, p_guess: f64) -> Result<Self> {
        let p = Self {
            p_init,
            p_learn,
            p_slip,
            p_guess,
        };
        if [p_init, p_learn, p_slip, p_guess]
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Validation(format!("BKT probabilities must lie in [0, 1]: {p:?}")));
        }
        Ok(p)
    }

    /// True when all four lie strictly inside (0, 1) and slip + guess < 1.
    pub fn is_identifiable(&self) -> bool {
        [self.p_init, self.p_learn, self.p_slip, self.p_guess]
            .iter()
            .all(|v| *v > 0.0 && *v < 1.0)
            && self.p_slip + self.p_guess < 1.0
    }

    fn clamped(self) -> Self {
        Self {
            p_init: clamp_prob(self.p_init),
            p_learn: clamp_prob(self.p_learn),
            p_slip: self.p_slip.clamp(PROB_FLOOR, MAX_NOISE),
            p_guess: self.p_guess.clamp(PROB_FLOOR, MAX_NOISE),
        }
    }
}

/// P(obs | state).
pub fn emission(mastered: bool, correct: bool, params: &BktParams) -> f64 {
    match (mastered, correct) {
        (true, true) => 1.0 - params.p_slip,
        (true, false) => params.p_slip,
        (false, true) => params.p_guess,
        (false, false) => 1.0 - params.p_guess,
    }
}

/// Probability of a correct answer given the current mastery belief.
pub fn predict_next(belief: f64, params: &BktParams) -> f64 {
    belief * (1.0 - params.p_slip) + (1.0 - belief) * params.p_guess
}

/// Learning transition applied between attempts.
pub fn learn_step(belief: f64, p_learn: f64) -> f64 {
    belief + (1.0 - belief) * p_learn
}

/// Mastery belief conditioned on the answer at this attempt, before learning.
pub fn condition(belief: f64, correct: bool, params: &BktParams) -> f64 {
    let on = belief * clamp_prob(emission(true, correct, params));
    let off = (1.0 - belief) * clamp_prob(emission(false, correct, params));
    on / (on + off)
}

/// Conditions on `correct`, then applies the learning transition.
pub fn posterior_update(belief: f64, correct: bool, params: &BktParams) -> f64 {
    learn_step(condition(belief, correct, params), params.p_learn)
}

/// Result of a forward pass over one learner-question sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Filtered {
    /// P(correct at t | answers before t), one per attempt.
    pub predictions: Vec<f64>,
    /// P(mastered at t | answers up to and including t).
    pub mastery: Vec<f64>,
}

/// Runs the forward filter; `None` entries are unobserved attempts.
pub fn filter(params: &BktParams, p_init: f64, answers: &[Option<bool>]) -> Filtered {
    let mut belief = p_init;
    let mut predictions = Vec::with_capacity(answers.len());
    let mut mastery = Vec::with_capacity(answers.len());
    for ans in answers {
        predictions.push(predict_next(belief, params));
        let post = match ans {
            Some(c) => condition(belief, *c, params),
            None => belief,
        };
        mastery.push(post);
        belief = learn_step(post, params.p_learn);
    }
    Filtered {
        predictions,
        mastery,
    }
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-sequence expected sufficient statistics.
#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    init_mastered: f64,
    n_seq: f64,
    learn_num: f64,
    learn_den: f64,
    slip_num: f64,
    slip_den: f64,
    guess_num: f64,
    guess_den: f64,
    log_lik: f64,
}

impl std::ops::AddAssign for Stats {
    fn add_assign(&mut self, o: Stats) {
        self.init_mastered += o.init_mastered;
        self.n_seq += o.n_seq;
        self.learn_num += o.learn_num;
        self.learn_den += o.learn_den;
        self.slip_num += o.slip_num;
        self.slip_den += o.slip_den;
        self.guess_num += o.guess_num;
        self.guess_den += o.guess_den;
        self.log_lik += o.log_lik;
    }
}

/// Log-likelihood of one sequence, by the log-space forward recursion.
pub fn sequence_log_likelihood(params: &BktParams, p_init: f64, answers: &[Option<bool>]) -> f64 {
    forward_backward(params, p_init, answers).log_lik
}

fn log_emission(params: &BktParams, ans: Option<bool>) -> [f64; 2] {
    match ans {
        None => [0.0, 0.0],
        Some(c) => [
            clamp_prob(emission(false, c, params)).ln(),
            clamp_prob(emission(true, c, params)).ln(),
        ],
    }
}

fn forward_backward(params: &BktParams, p_init: f64, answers: &[Option<bool>]) -> Stats {
    let n = answers.len();
    let mut st = Stats::default();
    if n == 0 {
        return st;
    }
    let pi = clamp_prob(p_init);
    let learn = clamp_prob(params.p_learn);
    let (stay, go) = ((1.0 - learn).ln(), learn.ln());
    let em: Vec<[f64; 2]> = answers.iter().map(|a| log_emission(params, *a)).collect();

    let mut alpha = vec![[0.0; 2]; n];
    alpha[0] = [(1.0 - pi).ln() + em[0][0], pi.ln() + em[0][1]];
    for t in 1..n {
        let a = alpha[t - 1];
        alpha[t] = [a[0] + stay + em[t][0], lse(a[0] + go, a[1]) + em[t][1]];
    }
    let mut beta = vec![[0.0; 2]; n];
    for t in (0..n - 1).rev() {
        let b = beta[t + 1];
        let e = em[t + 1];
        beta[t] = [lse(stay + e[0] + b[0], go + e[1] + b[1]), e[1] + b[1]];
    }
    let ll = lse(alpha[n - 1][0], alpha[n - 1][1]);
    st.log_lik = ll;
    st.n_seq = 1.0;
    for t in 0..n {
        let g1 = (alpha[t][1] + beta[t][1] - ll).exp().clamp(0.0, 1.0);
        let g0 = 1.0 - g1;
        if t == 0 {
            st.init_mastered = g1;
        }
        if t + 1 < n {
            st.learn_num += (alpha[t][0] + go + em[t + 1][1] + beta[t + 1][1] - ll).exp();
            st.learn_den += g0;
        }
        if let Some(c) = answers[t] {
            st.slip_den += g1;
            st.guess_den += g0;
            if c {
                st.guess_num += g0;
            } else {
                st.slip_num += g1;
            }
        }
    }
    st
}

/// Expands sorted (attempt, obs) pairs into a dense 1..=max timeline.
fn timeline(seq: &[(u32, Option<bool>)]) -> Vec<Option<bool>> {
    let len = seq.last().map(|s| s.0).unwrap_or(0) as usize;
    let mut out = vec![None; len];
    for &(a, o) in seq {
        out[a as usize - 1] = o;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BktConfig {
    pub max_iter: usize,
    /// Stop once the log-likelihood gain of an iteration falls below this.
    pub tolerance: f64,
    /// Fit a per-learner logit offset on the initial-mastery probability.
    pub individualized: bool,
    /// Precision of the zero-mean Gaussian prior on learner offsets.
    pub offset_precision: f64,
    /// Half-width of the uniform seeded jitter on the starting parameters.
    pub jitter: f64,
}

impl Default for BktConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tolerance: 1e-6,
            individualized: false,
            offset_precision: 1.0,
            jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BktFitReport {
    /// Objective after every E-step; penalized when individualized.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Questions without any labeled sequence, which use the fallback.
    pub fallback_questions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BktModel {
    pub params: IndexMap<String, BktParams>,
    pub fallback: BktParams,
    pub learner_offsets: Option<IndexMap<String, f64>>,
    pub report: BktFitReport,
    #[serde(skip)]
    history: HashMap<(String, String), Vec<(u32, bool)>>,
}

struct QuestionSeqs {
    /// (learner position, dense timeline)
    seqs: Vec<(usize, Vec<Option<bool>>)>,
}

/// Fits one parameter set per question by EM.
pub fn fit_em(train: &Dataset, config: &BktConfig, seed: u64) -> Result<BktModel> {
    let nq = train.n_questions();
    let nl = train.n_learners();
    let mut by_question: Vec<QuestionSeqs> = (0..nq).map(|_| QuestionSeqs { seqs: Vec::new() }).collect();
    for ((l, q), seq) in train.sequences() {
        if seq.iter().any(|s| s.1.is_some()) {
            by_question[q].seqs.push((l, timeline(&seq)));
        }
    }

    let mut rng = seed::rng(seed::derive_seed(seed, "bkt-init", 0));
    let mut params: Vec<BktParams> = (0..nq)
        .map(|_| {
            let mut j = || rng.random_range(-config.jitter..=config.jitter);
            let i = BktParams::INITIAL;
            BktParams {
                p_init: i.p_init + j(),
                p_learn: i.p_learn + j(),
                p_slip: i.p_slip + j(),
                p_guess: i.p_guess + j(),
            }
            .clamped()
        })
        .collect();
    let mut offsets = vec![0.0; nl];
    let mut init_logits: Vec<f64> = params.iter().map(|p| logit(p.p_init)).collect();

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        // E-step, one question per task.
        let stats: Vec<(Stats, Vec<(usize, f64)>)> = by_question
            .par_iter()
            .enumerate()
            .map(|(q, qs)| {
                let mut acc = Stats::default();
                let mut init_post = Vec::with_capacity(qs.seqs.len());
                for (l, tl) in &qs.seqs {
                    let p_init = if config.individualized {
                        sigmoid(init_logits[q] + offsets[*l])
                    } else {
                        params[q].p_init
                    };
                    let s = forward_backward(&params[q], p_init, tl);
                    init_post.push((*l, s.init_mastered));
                    acc += s;
                }
                (acc, init_post)
            })
            .collect();

        let mut objective: f64 = stats.iter().map(|(s, _)| s.log_lik).sum();
        if config.individualized {
            objective -= 0.5 * config.offset_precision * offsets.iter().map(|d| d * d).sum::<f64>();
        }
        if let Some(&prev) = trace.last() {
            if objective - prev < config.tolerance {
                trace.push(objective);
                converged = true;
                break;
            }
        }
        trace.push(objective);

        // M-step.
        for (q, (s, _)) in stats.iter().enumerate() {
            if s.n_seq == 0.0 {
                continue;
            }
            let p = &mut params[q];
            let ratio = |num: f64, den: f64, old: f64| if den > 0.0 { num / den } else { old };
            *p = BktParams {
                p_init: s.init_mastered / s.n_seq,
                p_learn: ratio(s.learn_num, s.learn_den, p.p_learn),
                p_slip: ratio(s.slip_num, s.slip_den, p.p_slip),
                p_guess: ratio(s.guess_num, s.guess_den, p.p_guess),
            }
            .clamped();
        }
        if config.individualized {
            let posts: Vec<Vec<(usize, f64)>> = stats.into_iter().map(|(_, p)| p).collect();
            update_initial_mastery(&posts, &mut init_logits, &mut offsets, config.offset_precision);
            for (q, p) in params.iter_mut().enumerate() {
                p.p_init = clamp_prob(sigmoid(init_logits[q]));
            }
        } else {
            init_logits = params.iter().map(|p| logit(p.p_init)).collect();
        }
    }

    let mut fallback_questions = Vec::new();
    let mut out = IndexMap::new();
    for (qid, &q) in train.question_index() {
        if by_question[q].seqs.is_empty() {
            log::warn!("question {qid} has no labeled sequences, using fallback BKT parameters");
            fallback_questions.push(qid.clone());
            out.insert(qid.clone(), BktParams::INITIAL);
        } else {
            out.insert(qid.clone(), params[q]);
        }
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
    for h in history.values_mut() {
        h.sort_by_key(|x| x.0);
    }

    let learner_offsets = config.individualized.then(|| {
        train
            .learner_index()
            .iter()
            .map(|(id, &l)| (id.clone(), offsets[l]))
            .collect()
    });

    Ok(BktModel {
        params: out,
        fallback: BktParams::INITIAL,
        learner_offsets,
        report: BktFitReport {
            log_likelihood: trace,
            iterations,
            converged,
            fallback_questions,
        },
        history,
    })
}

/// Maximizes the expected initial-state log-likelihood over question logits
/// and learner offsets by coordinate-wise safeguarded Newton steps.
fn update_initial_mastery(
    posts: &[Vec<(usize, f64)>],
    logits: &mut [f64],
    offsets: &mut [f64],
    precision: f64,
) {
    let bound = logit(1.0 - PROB_FLOOR);
    let mut by_learner: Vec<Vec<(usize, f64)>> = vec![Vec::new(); offsets.len()];
    for (q, ps) in posts.iter().enumerate() {
        for &(l, g) in ps {
            by_learner[l].push((q, g));
        }
    }
    // Objective of a single coordinate x given fixed partner terms.
    fn coord_obj(x: f64, terms: &[(f64, f64)], precision: f64) -> f64 {
        let mut v = -0.5 * precision * x * x;
        for &(other, g) in terms {
            let z = x + other;
            // g ln s(z) + (1-g) ln(1 - s(z)) = g z - ln(1 + e^z)
            v += g * z - softplus(z);
        }
        v
    }
    fn newton(x0: f64, terms: &[(f64, f64)], precision: f64, bound: f64) -> f64 {
        let mut x = x0;
        for _ in 0..20 {
            let mut grad = -precision * x;
            let mut hess = -precision;
            for &(other, g) in terms {
                let s = sigmoid(x + other);
                grad += g - s;
                hess -= s * (1.0 - s);
            }
            if grad.abs() < 1e-10 {
                break;
            }
            let step = if hess < -1e-12 { -grad / hess } else { grad };
            let base = coord_obj(x, terms, precision);
            let mut t = 1.0;
            let mut moved = false;
            while t > 1e-8 {
                let cand = (x + t * step).clamp(-bound, bound);
                if coord_obj(cand, terms, precision) >= base {
                    moved = cand != x;
                    x = cand;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                break;
            }
        }
        x
    }

    for _ in 0..5 {
        for (q, ps) in posts.iter().enumerate() {
            if ps.is_empty() {
                continue;
            }
            let terms: Vec<(f64, f64)> = ps.iter().map(|&(l, g)| (offsets[l], g)).collect();
            logits[q] = newton(logits[q], &terms, 0.0, bound);
        }
        for (l, ps) in by_learner.iter().enumerate() {
            if ps.is_empty() {
                continue;
            }
            let terms: Vec<(f64, f64)> = ps.iter().map(|&(q, g)| (logits[q], g)).collect();
            offsets[l] = newton(offsets[l], &terms, precision, bound);
        }
    }
}

impl BktModel {
    pub fn params_for(&self, question_id: &str) -> &BktParams {
        self.params.get(question_id).unwrap_or(&self.fallback)
    }

    fn initial_mastery(&self, learner: &str, params: &BktParams) -> f64 {
        match self.learner_offsets.as_ref().and_then(|o| o.get(learner)) {
            Some(off) => clamp_prob(sigmoid(logit(params.p_init) + off)),
            None => params.p_init,
        }
    }

    /// P(correct) at `key`, filtering over the learner's earlier training
    /// answers on this question.
    pub fn predict_key(&self, key: &RecordKey) -> f64 {
        let params = self.params_for(&key.question_id);
        let mut belief = self.initial_mastery(&key.learner_id, params);
        let hist = self
            .history
            .get(&(key.learner_id.clone(), key.question_id.clone()));
        let mut it = hist.map(|h| h.as_slice()).unwrap_or(&[]).iter().peekable();
        for t in 1..key.attempt {
            while it.peek().is_some_and(|h| h.0 < t) {
                it.next();
            }
            belief = match it.peek() {
                Some(&&(a, obs)) if a == t => posterior_update(belief, obs, params),
                _ => learn_step(belief, params.p_learn),
            };
        }
        predict_next(belief, params)
    }
}

impl FittedModel for BktModel {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        Ok(queries.iter().map(|k| self.predict_key(k)).collect())
    }

    fn export(&self) -> serde_json::Value {
        serde_json::json!({
            "questions": self.params,
            "learner_offsets": self.learner_offsets,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct BktPredictor {
    pub config: BktConfig,
}

impl Predictor for BktPredictor {
    fn name(&self) -> String {
        "BKT".into()
    }

    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(fit_em(train, &self.config, seed)?))
    }
}
