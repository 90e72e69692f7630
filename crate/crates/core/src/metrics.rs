//! RMSE, fold standard errors and the cross-validation harness shared by
//! every predictor.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_folds, Dataset, RecordKey};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// A model family that can be fit to a training dataset.
pub trait Predictor: Send + Sync {
    fn name(&self) -> String;

    /// Fits on `train`; `seed` drives any randomness inside the fit.
    fn fit(&self, train: &Dataset, seed: u64) -> Result<Box<dyn FittedModel>>;
}

/// A fitted predictor. Predictions are probabilities of a correct answer.
pub trait FittedModel: Send + Sync {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>>;

    /// Model parameters as JSON, in the module's export format.
    fn export(&self) -> serde_json::Value;
}

pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::Validation(format!(
            "rmse: {} predictions for {} outcomes",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Validation("rmse: empty input".into()));
    }
    let sse: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).powi(2))
        .sum();
    Ok((sse / predicted.len() as f64).sqrt())
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Standard error of the mean of `values`: sample std / sqrt(n).
pub fn standard_error(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    sample_std(values) / (values.len() as f64).sqrt()
}

/// What the standard error in a report was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeBasis {
    Folds,
    Runs,
}

/// Per-fold RMSEs of one model on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub model_name: String,
    pub dataset: String,
    pub fold_rmse: Vec<f64>,
    pub mean_rmse: f64,
    pub std_error: f64,
    pub se_basis: SeBasis,
}

impl CvReport {
    pub fn from_folds(
        model_name: impl Into<String>,
        dataset: impl Into<String>,
        fold_rmse: Vec<f64>,
    ) -> Result<Self> {
        if fold_rmse.is_empty() {
            return Err(Error::Validation("report needs at least one fold".into()));
        }
        if fold_rmse.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation("fold RMSE must be finite and non-negative".into()));
        }
        Ok(Self {
            model_name: model_name.into(),
            dataset: dataset.into(),
            mean_rmse: mean(&fold_rmse),
            std_error: standard_error(&fold_rmse),
            fold_rmse,
            se_basis: SeBasis::Folds,
        })
    }

    /// Replaces the cross-fold standard error by one over repeated runs.
    pub fn with_run_se(mut self, run_rmse: &[f64]) -> Self {
        if run_rmse.len() > 1 {
            self.std_error = standard_error(run_rmse);
            self.se_basis = SeBasis::Runs;
        }
        self
    }

    /// Cell text in the `mean_{se}` style, three decimals.
    pub fn cell(&self) -> String {
        format_cell(self.mean_rmse, self.std_error)
    }
}

pub fn format_cell(mean: f64, se: f64) -> String {
    format!("{mean:.3}_{{{se:.3}}}")
}

/// Runs k-fold cross-validation of `predictor` on the labeled rows of `ds`.
///
/// Each fold is fit on the remaining labeled rows only and queried with the
/// bare keys of its own rows, so held-out outcomes never reach the model.
pub fn cross_validate(
    predictor: &dyn Predictor,
    ds: &Dataset,
    k: usize,
    seed: u64,
) -> Result<CvReport> {
    let split = make_folds(ds, k, seed)?;
    let fold_rmse = (0..k)
        .into_par_iter()
        .map(|fold| {
            evaluate_fold(predictor, ds, &split.train_positions(fold), &split.fold_positions(fold), derive_seed(seed, "cv-fold", fold as u64))
                .map_err(|e| Error::Fold {
                    fold,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    CvReport::from_folds(predictor.name(), ds.lesson_name(), fold_rmse)
}

/// Fits on `train_pos` and returns the RMSE on `test_pos`.
pub fn evaluate_fold(
    predictor: &dyn Predictor,
    ds: &Dataset,
    train_pos: &[usize],
    test_pos: &[usize],
    seed: u64,
) -> Result<f64> {
    let train = ds.subset(train_pos)?;
    let model = predictor.fit(&train, seed)?;
    let queries: Vec<RecordKey> = test_pos.iter().map(|&i| ds.records()[i].key()).collect();
    let actual: Vec<f64> = test_pos
        .iter()
        .map(|&i| ds.records()[i].target().expect("folds hold labeled rows"))
        .collect();
    let predicted = model.predict(&queries)?;
    check_probabilities(&predicted)?;
    rmse(&predicted, &actual)
}

pub(crate) fn check_probabilities(p: &[f64]) -> Result<()> {
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Model(format!(
            "prediction {i} = {} is outside [0, 1]",
            p[i]
        ))),
        None => Ok(()),
    }
}

/// Renders reports as a model × dataset table, marking the lowest mean in
/// each column with `*` (all of them on ties).
pub fn report_table(reports: &[CvReport]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model_name.as_str()) {
            models.push(&r.model_name);
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let find = |m: &str, d: &str| reports.iter().find(|r| r.model_name == m && r.dataset == d);
    let best: Vec<f64> = datasets
        .iter()
        .map(|d| {
            reports
                .iter()
                .filter(|r| r.dataset == *d)
                .map(|r| r.mean_rmse)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    let mut rows: Vec<Vec<String>> = Vec::with_capacity(models.len() + 1);
    let mut header = vec!["Model".to_string()];
    header.extend(datasets.iter().map(|d| format!("{d} (RMSE)")));
    rows.push(header);
    for m in &models {
        let mut row = vec![m.to_string()];
        for (j, d) in datasets.iter().enumerate() {
            row.push(match find(m, d) {
                Some(r) if r.mean_rmse == best[j] => format!("{}*", r.cell()),
                Some(r) => r.cell(),
                None => "-".into(),
            });
        }
        rows.push(row);
    }
    render_rows(&rows)
}

pub(crate) fn render_rows(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub fold_rmse: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub se_basis: SeBasis,
}

/// `model → dataset → {fold_rmse, mean, se, se_basis}`.
pub type ReportJson = IndexMap<String, BTreeMap<String, ReportEntry>>;

pub fn reports_to_json(reports: &[CvReport]) -> ReportJson {
    let mut out: ReportJson = IndexMap::new();
    for r in reports {
        out.entry(r.model_name.clone()).or_default().insert(
            r.dataset.clone(),
            ReportEntry {
                fold_rmse: r.fold_rmse.clone(),
                mean: r.mean_rmse,
                se: r.std_error,
                se_basis: r.se_basis,
            },
        );
    }
    out
}

pub fn reports_from_json(json: &ReportJson) -> Vec<CvReport> {
    json.iter()
        .flat_map(|(model, per_ds)| {
            per_ds.iter().map(move |(ds, e)| CvReport {
                model_name: model.clone(),
                dataset: ds.clone(),
                fold_rmse: e.fold_rmse.clone(),
                mean_rmse: e.mean,
                std_error: e.se,
                se_basis: e.se_basis,
            })
        })
        .collect()
}

/// Predicts one fixed probability; the usual reference baseline.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

struct ConstantModel(f64);

impl Predictor for ConstantPredictor {
    fn name(&self) -> String {
        format!("constant-{}", self.0)
    }

    fn fit(&self, _train: &Dataset, _seed: u64) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(ConstantModel(self.0)))
    }
}

/// Predicts the training-set correct rate for every row.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanPredictor;

impl Predictor for MeanPredictor {
    fn name(&self) -> String {
        "global-mean".into()
    }

    fn fit(&self, train: &Dataset, _seed: u64) -> Result<Box<dyn FittedModel>> {
        let t: Vec<f64> = train.records().iter().filter_map(|r| r.target()).collect();
        if t.is_empty() {
            return Err(Error::Model("no labeled rows".into()));
        }
        Ok(Box::new(ConstantModel(mean(&t))))
    }
}

impl FittedModel for ConstantModel {
    fn predict(&self, queries: &[RecordKey]) -> Result<Vec<f64>> {
        Ok(vec![self.0; queries.len()])
    }

    fn export(&self) -> serde_json::Value {
        serde_json::json!({ "constant": self.0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InteractionRecord;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rmse_cases() {
        assert_eq!(rmse(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(rmse(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5, epsilon = 1e-15);
        let expected = ((0.01 + 0.04 + 0.36) / 3.0_f64).sqrt();
        assert_abs_diff_eq!(rmse(&[0.9, 0.2, 0.4], &[1.0, 0.0, 1.0]).unwrap(), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.3697, epsilon = 1e-4);
    }

    #[test]
    fn rmse_rejects_bad_lengths() {
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[0.1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn standard_error_definition() {
        let v = [0.40, 0.42, 0.44];
        // std = 0.02, se = 0.02 / sqrt(3)
        assert_abs_diff_eq!(standard_error(&v), 0.02 / 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(standard_error(&[0.3]), 0.0);
    }

    #[test]
    fn cell_format() {
        let r = CvReport {
            model_name: "BKT".into(),
            dataset: "Lesson 1".into(),
            fold_rmse: vec![0.43],
            mean_rmse: 0.430,
            std_error: 0.004,
            se_basis: SeBasis::Folds,
        };
        assert_eq!(r.cell(), "0.430_{0.004}");
    }

    #[test]
    fn empty_report_rejected() {
        assert!(CvReport::from_folds("m", "d", vec![]).is_err());
    }

    #[test]
    fn ties_mark_all_minima() {
        let a = CvReport::from_folds("A", "L1", vec![0.4, 0.4]).unwrap();
        let b = CvReport::from_folds("B", "L1", vec![0.4, 0.4]).unwrap();
        let c = CvReport::from_folds("C", "L1", vec![0.5, 0.5]).unwrap();
        let t = report_table(&[a, b, c]);
        assert_eq!(t.matches('*').count(), 2, "{t}");
    }

    #[test]
    fn json_round_trip() {
        let a = CvReport::from_folds("A", "L1", vec![0.4, 0.5]).unwrap();
        let b = CvReport::from_folds("A", "L2", vec![0.3, 0.2]).unwrap();
        let json = reports_to_json(&[a.clone(), b.clone()]);
        assert_eq!(reports_from_json(&json), vec![a, b]);
    }

    fn balanced(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| InteractionRecord::new(format!("L{i}"), "Q", 1, Some(i % 2 == 0)))
            .collect();
        Dataset::new(recs, "bal").unwrap()
    }

    #[test]
    fn constant_half_gives_half() {
        let r = cross_validate(&ConstantPredictor(0.5), &balanced(20), 5, 1).unwrap();
        assert!(r.fold_rmse.iter().all(|&v| v == 0.5));
        assert_eq!(r.std_error, 0.0);
    }

    /// Memorizes training rows; anything unseen gets 0.5.
    struct Memorizer;
    struct MemoModel(std::collections::HashMap<RecordKey, f64>);

    impl Predictor for Memorizer {
        fn name(&self) -> String {
            "memo".into()
        }
        fn fit(&self, train: &Dataset, _: u64) -> Result<Box<dyn FittedModel>> {
            Ok(Box::new(MemoModel(
                train.records().iter().filter_map(|r| r.target().map(|t| (r.key(), t))).collect(),
            )))
        }
    }
    impl FittedModel for MemoModel {
        fn predict(&self, q: &[RecordKey]) -> Result<Vec<f64>> {
            Ok(q.iter().map(|k| *self.0.get(k).unwrap_or(&0.5)).collect())
        }
        fn export(&self) -> serde_json::Value {
            serde_json::Value::Null
        }
    }

    #[test]
    fn harness_hides_test_outcomes() {
        // A memorizer that could see test labels would score 0.
        let r = cross_validate(&Memorizer, &balanced(30), 5, 2).unwrap();
        assert!(r.fold_rmse.iter().all(|&v| v == 0.5));
    }

    struct Failing;
    impl Predictor for Failing {
        fn name(&self) -> String {
            "fail".into()
        }
        fn fit(&self, _: &Dataset, _: u64) -> Result<Box<dyn FittedModel>> {
            Err(Error::Model("boom".into()))
        }
    }

    #[test]
    fn fit_failure_names_fold() {
        let e = cross_validate(&Failing, &balanced(10), 2, 0).unwrap_err();
        assert!(matches!(e, Error::Fold { .. }), "{e}");
    }

    #[test]
    fn constant_predictor_se_matches_fold_composition() {
        // Constant 0.3 on an unbalanced set: each fold RMSE is determined by
        // its share of positives, so the SE can be recomputed from the split.
        let recs = (0..23)
            .map(|i| InteractionRecord::new(format!("L{i}"), "Q", 1, Some(i % 3 == 0)))
            .collect();
        let ds = Dataset::new(recs, "u").unwrap();
        let r = cross_validate(&ConstantPredictor(0.3), &ds, 5, 11).unwrap();
        let split = make_folds(&ds, 5, 11).unwrap();
        let expected: Vec<f64> = (0..5)
            .map(|f| {
                let pos = split.fold_positions(f);
                let ones = pos.iter().filter(|&&i| ds.records()[i].obs == Some(true)).count() as f64;
                let n = pos.len() as f64;
                ((ones * 0.49 + (n - ones) * 0.09) / n).sqrt()
            })
            .collect();
        for (a, b) in r.fold_rmse.iter().zip(&expected) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(r.std_error, standard_error(&expected), epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn rmse_bounded_and_permutation_invariant(
            pairs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..50),
            rot in 0usize..50,
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let a: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            let v = rmse(&p, &a).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let k = rot % p.len();
            let mut p2 = p.clone();
            let mut a2 = a.clone();
            p2.rotate_left(k);
            a2.rotate_left(k);
            prop_assert!((rmse(&p2, &a2).unwrap() - v).abs() < 1e-12);
        }
    }
}
