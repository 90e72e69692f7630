//! Synthetic lessons with known generating parameters.
//!
//! Each generator samples through the same link functions the models use,
//! so fitted parameters can be checked against the truth directly.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bkt::{emission, BktParams};
use crate::data::{Dataset, InteractionRecord, RecordKey};
use crate::error::{Error, Result};
use crate::seed;
use crate::sparfa::Factors;
use crate::tensor::TensorFactors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttemptPolicy {
    /// Every learner makes `max_attempt` attempts on every question.
    #[default]
    Full,
    /// Attempts stop after the first correct answer.
    UntilCorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorInit {
    /// Random factors of the given scale.
    Random { scale: f64 },
    /// Every factor entry equals the value; intercepts are zero.
    Constant { value: f64 },
    /// Random orthonormal learner and question factors sharing one
    /// singular value, with entry variance matching `Random { scale }`.
    Orthogonal { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "kebab-case")]
pub enum Generator {
    BktProcess {
        /// One shared parameter set, or one per question.
        params: Vec<BktParams>,
        #[serde(default)]
        policy: AttemptPolicy,
    },
    LowRankMatrix {
        rank: usize,
        factors: FactorInit,
        /// Std of the per-question intercepts in random mode.
        intercept_scale: f64,
    },
    LowRankTensor {
        rank: usize,
        factors: FactorInit,
    },
}

impl Generator {
    pub fn name(&self) -> &'static str {
        match self {
            Generator::BktProcess { .. } => "bkt-process",
            Generator::LowRankMatrix { .. } => "low-rank-matrix",
            Generator::LowRankTensor { .. } => "low-rank-tensor",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub lesson_name: String,
    pub n_learners: usize,
    pub n_questions: usize,
    pub max_attempt: u32,
    pub generator: Generator,
    /// Share of generated records whose outcome is hidden.
    #[serde(default)]
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl SimSpec {
    pub fn bkt(n_learners: usize, n_questions: usize, max_attempt: u32, params: BktParams, seed: u64) -> Self {
        Self {
            lesson_name: "simulated".into(),
            n_learners,
            n_questions,
            max_attempt,
            generator: Generator::BktProcess {
                params: vec![params],
                policy: AttemptPolicy::Full,
            },
            holdout_fraction: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_learners == 0 || self.n_questions == 0 || self.max_attempt == 0 {
            return Err(Error::Config("simulation counts must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout fraction must be in [0, 1)".into()));
        }
        match &self.generator {
            Generator::BktProcess { params, .. } => {
                if params.len() != 1 && params.len() != self.n_questions {
                    return Err(Error::Config(format!(
                        "need 1 or {} BKT parameter sets, got {}",
                        self.n_questions,
                        params.len()
                    )));
                }
                for p in params {
                    BktParams::new(p.p_init, p.p_learn, p.p_slip, p.p_guess)?;
                }
            }
            Generator::LowRankMatrix { rank, .. } | Generator::LowRankTensor { rank, .. } if *rank == 0 => {
                return Err(Error::Config("rank must be >= 1".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GroundTruth {
    Bkt {
        params: Vec<BktParams>,
        /// Mastery before each generated attempt, per (learner, question).
        mastery: Vec<MasteryTrace>,
    },
    Matrix {
        /// n_learners × r, row-major.
        w: Vec<Vec<f64>>,
        /// r × n_questions, row-major.
        c: Vec<Vec<f64>>,
        mu: Vec<f64>,
    },
    Tensor {
        /// n_learners × r, row-major.
        u: Vec<Vec<f64>>,
        /// `v[k][q][a]`.
        v: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MasteryTrace {
    pub learner_id: String,
    pub question_id: String,
    pub mastered: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub spec: SimSpec,
    pub dataset: Dataset,
    pub truth: GroundTruth,
    /// True outcome of every hidden record.
    pub holdout: Vec<(RecordKey, bool)>,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    spec: &'a SimSpec,
    truth: &'a GroundTruth,
    holdout: Vec<HoldoutEntry<'a>>,
}

#[derive(Serialize)]
struct HoldoutEntry<'a> {
    learner_id: &'a str,
    question_id: &'a str,
    attempt: u32,
    obs: u8,
}

impl SimOutput {
    pub fn sidecar_json(&self) -> serde_json::Value {
        let s = Sidecar {
            spec: &self.spec,
            truth: &self.truth,
            holdout: self
                .holdout
                .iter()
                .map(|(k, y)| HoldoutEntry {
                    learner_id: &k.learner_id,
                    question_id: &k.question_id,
                    attempt: k.attempt,
                    obs: u8::from(*y),
                })
                .collect(),
        };
        serde_json::to_value(s).expect("serializable")
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.sidecar_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn holdout_keys(&self) -> Vec<RecordKey> {
        self.holdout.iter().map(|(k, _)| k.clone()).collect()
    }

    pub fn holdout_values(&self) -> Vec<f64> {
        self.holdout.iter().map(|(_, y)| f64::from(u8::from(*y))).collect()
    }
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|i| format!("{prefix}{i:0width$}")).collect()
}

fn bernoulli(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn factor(rng: &mut ChaCha8Rng, init: FactorInit, normal: bool, hi: f64) -> f64 {
    match init {
        FactorInit::Constant { value } => value,
        FactorInit::Random { scale } | FactorInit::Orthogonal { scale } if normal => {
            scale * Normal::new(0.0, 1.0).expect("unit").sample(rng)
        }
        FactorInit::Random { scale } | FactorInit::Orthogonal { scale } => scale * rng.random_range(0.0..hi),
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Generates the lesson described by `spec`.
pub fn simulate(spec: &SimSpec) -> Result<SimOutput> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive_seed(spec.seed, spec.generator.name(), 0));
    let learners = ids("L", spec.n_learners);
    let questions = ids("Q", spec.n_questions);
    let mut records = Vec::new();
    let truth = match &spec.generator {
        Generator::BktProcess { params, policy } => {
            let mut traces = Vec::new();
            for l in &learners {
                for (qi, q) in questions.iter().enumerate() {
                    let p = if params.len() == 1 { &params[0] } else { &params[qi] };
                    let mut mastered = bernoulli(&mut rng, p.p_init);
                    let mut trace = Vec::new();
                    for a in 1..=spec.max_attempt {
                        trace.push(mastered);
                        let correct = bernoulli(&mut rng, emission(mastered, true, p));
                        records.push(InteractionRecord::new(l.clone(), q.clone(), a, Some(correct)));
                        if !mastered {
                            mastered = bernoulli(&mut rng, p.p_learn);
                        }
                        if correct && *policy == AttemptPolicy::UntilCorrect {
                            break;
                        }
                    }
                    traces.push(MasteryTrace {
                        learner_id: l.clone(),
                        question_id: q.clone(),
                        mastered: trace,
                    });
                }
            }
            GroundTruth::Bkt {
                params: params.clone(),
                mastery: traces,
            }
        }
        Generator::LowRankMatrix {
            rank,
            factors,
            intercept_scale,
        } => {
            let r = *rank;
            let mut w = DMatrix::from_fn(spec.n_learners, r, |_, _| factor(&mut rng, *factors, true, 1.0));
            let mut c = DMatrix::from_fn(r, spec.n_questions, |_, _| factor(&mut rng, *factors, true, 1.0));
            if let FactorInit::Orthogonal { scale } = factors {
                if r > spec.n_learners.min(spec.n_questions) {
                    return Err(Error::Config("orthogonal factors need rank <= min(learners, questions)".into()));
                }
                let sigma = scale * scale * ((spec.n_learners * spec.n_questions) as f64).sqrt();
                w = w.qr().q() * sigma.sqrt();
                c = c.transpose().qr().q().transpose() * sigma.sqrt();
            }
            let mu: Vec<f64> = (0..spec.n_questions)
                .map(|_| match factors {
                    FactorInit::Constant { .. } => 0.0,
                    FactorInit::Random { .. } | FactorInit::Orthogonal { .. } => {
                        intercept_scale * Normal::new(0.0, 1.0).expect("unit").sample(&mut rng)
                    }
                })
                .collect();
            let f = Factors { w, c, mu };
            for (li, l) in learners.iter().enumerate() {
                for (qi, q) in questions.iter().enumerate() {
                    let y = bernoulli(&mut rng, f.probability(li, qi));
                    records.push(InteractionRecord::new(l.clone(), q.clone(), 1, Some(y)));
                }
            }
            GroundTruth::Matrix {
                w: rows(&f.w),
                c: rows(&f.c),
                mu: f.mu,
            }
        }
        Generator::LowRankTensor { rank, factors } => {
            let r = *rank;
            let na = spec.max_attempt as usize;
            let u = DMatrix::from_fn(spec.n_learners, r, |_, _| factor(&mut rng, *factors, false, 1.0));
            let v = DMatrix::from_fn(r, spec.n_questions * na, |_, _| {
                factor(&mut rng, *factors, false, 1.0 / r as f64)
            });
            let f = TensorFactors {
                u,
                v,
                n_questions: spec.n_questions,
                n_attempts: na,
            };
            for (li, l) in learners.iter().enumerate() {
                for (qi, q) in questions.iter().enumerate() {
                    for a in 0..na {
                        let p = f.raw(li, qi, a).clamp(0.0, 1.0);
                        let y = bernoulli(&mut rng, p);
                        records.push(InteractionRecord::new(l.clone(), q.clone(), a as u32 + 1, Some(y)));
                    }
                }
            }
            GroundTruth::Tensor {
                u: rows(&f.u),
                v: (0..r)
                    .map(|k| {
                        (0..spec.n_questions)
                            .map(|q| (0..na).map(|a| f.v[(k, q * na + a)]).collect())
                            .collect()
                    })
                    .collect(),
            }
        }
    };
    let n_hide = (spec.holdout_fraction * records.len() as f64).floor() as usize;
    let mut holdout = Vec::with_capacity(n_hide);
    if n_hide > 0 {
        let mut hide = index::sample(&mut rng, records.len(), n_hide).into_vec();
        hide.sort_unstable();
        for i in hide {
            let r = &mut records[i];
            holdout.push((r.key(), r.obs.expect("generated")));
            r.obs = None;
        }
    }
    let dataset = Dataset::new(records, spec.lesson_name.clone())?;
    Ok(SimOutput {
        spec: spec.clone(),
        dataset,
        truth,
        holdout,
    })
}

/// Parses an `LxQxA` shape such as `66x8x9`.
pub fn parse_shape(text: &str) -> Result<(usize, usize, u32)> {
    let parts: Vec<&str> = text.split(['x', 'X']).collect();
    let bad = || Error::Config(format!("shape must look like 66x8x9, got '{text}'"));
    if parts.len() != 3 {
        return Err(bad());
    }
    Ok((
        parts[0].trim().parse().map_err(|_| bad())?,
        parts[1].trim().parse().map_err(|_| bad())?,
        parts[2].trim().parse().map_err(|_| bad())?,
    ))
}
