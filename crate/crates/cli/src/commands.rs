use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use learnkt_core::bkt::BktParams;
use learnkt_core::data::summarize as summarize_dataset;
use learnkt_core::llm::pipeline::llm_cross_validate;
use learnkt_core::llm::{HttpClient, HttpClientConfig, LlmClient, MockClient, PipelineConfig};
use learnkt_core::metrics::{report_table, reports_from_json, reports_to_json, ReportJson};
use learnkt_core::registry::{apply_overrides, build_predictor, is_llm_model, parse_override, unknown_model, MODEL_REGISTRY};
use learnkt_core::simgen::{self, AttemptPolicy, FactorInit, Generator, SimSpec};
use learnkt_core::tuner::{grid_search, llm_tuning_loop, table3_text, Grid, TableRow, TuneReport};
use learnkt_core::{cross_validate, parse_dataset, rmse, CvReport, Dataset, Error, RecordKey, Result};
use serde_json::{json, Value};

use crate::settings::ConfigFile;
use crate::{ClientArgs, DataArgs, ModelArgs};

pub struct Ctx {
    pub cfg: ConfigFile,
    pub seed: u64,
    pub outdir: PathBuf,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.outdir).map_err(|e| io_err(&self.outdir, e))?;
        Ok(&self.outdir)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out()?.join(name);
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_report(&self, json: &Value, text: &str) -> Result<()> {
        self.write("report.json", &(serde_json::to_string_pretty(json)? + "\n"))?;
        self.write("report.txt", text)?;
        print!("{text}");
        Ok(())
    }

    fn datasets(&self, args: DataArgs) -> Result<Vec<Dataset>> {
        let data = self.cfg.paths(args.data, "data");
        let meta = self.cfg.paths(args.meta, "meta");
        if data.is_empty() {
            return Err(Error::Config("--data is required".into()));
        }
        if !meta.is_empty() && meta.len() != data.len() {
            return Err(Error::Config(format!("{} --meta files for {} --data files", meta.len(), data.len())));
        }
        data.iter()
            .enumerate()
            .map(|(i, p)| parse_dataset(p, meta.get(i).map(PathBuf::as_path)))
            .collect()
    }

    fn one_dataset(&self, args: DataArgs) -> Result<Dataset> {
        let mut all = self.datasets(args)?;
        if all.len() != 1 {
            return Err(Error::Config("this command takes exactly one --data file".into()));
        }
        Ok(all.remove(0))
    }

    fn k(&self, flag: Option<usize>) -> Result<usize> {
        let k = self.cfg.pick(flag, "k")?.unwrap_or(5);
        if k < 2 {
            return Err(Error::Config(format!("k must be >= 2, got {k}")));
        }
        Ok(k)
    }

    fn models(&self, args: &ModelArgs, default: Option<&str>) -> Result<Vec<String>> {
        let text = self
            .cfg
            .pick(args.model.clone(), "model")?
            .or(default.map(String::from))
            .ok_or_else(|| Error::Config(format!("--model is required; available: {}", MODEL_REGISTRY.join(", "))))?;
        let names: Vec<String> = text.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        for n in &names {
            if !MODEL_REGISTRY.contains(&n.as_str()) {
                return Err(unknown_model(n));
            }
        }
        Ok(names)
    }

    fn overrides(&self, args: &ModelArgs) -> Result<Vec<(String, String)>> {
        self.cfg.list(args.set.clone(), "set").iter().map(|s| parse_override(s)).collect()
    }

    fn client(&self, args: &ClientArgs) -> Result<Arc<dyn LlmClient>> {
        if self.cfg.flag(args.mock, "mock")? {
            return Ok(Arc::new(MockClient::new(self.seed)));
        }
        let endpoint = self.cfg.pick(args.endpoint.clone(), "endpoint")?.unwrap_or_default();
        if endpoint.trim().is_empty() {
            return Err(Error::Config("LLM models need --endpoint or --mock".into()));
        }
        let d = HttpClientConfig::default();
        let config = HttpClientConfig {
            endpoint,
            model: self.cfg.pick(args.api_model.clone(), "api-model")?.unwrap_or(d.model),
            temperature: self.cfg.pick(args.temperature, "temperature")?.unwrap_or(d.temperature),
            timeout_secs: self.cfg.pick(args.timeout, "timeout")?.unwrap_or(d.timeout_secs),
            retries: self.cfg.pick(args.retries, "retries")?.unwrap_or(d.retries),
            token_env: self.cfg.pick(args.token_env.clone(), "token-env")?.unwrap_or(d.token_env),
        };
        log::info!("LLM endpoint {} (model {}, token from ${})", config.endpoint, config.model, config.token_env);
        Ok(Arc::new(HttpClient::new(config)?))
    }

    /// The client, built only when some model needs it.
    fn client_for(&self, models: &[String], args: &ClientArgs) -> Result<Option<Arc<dyn LlmClient>>> {
        if models.iter().any(|m| is_llm_model(m)) {
            self.client(args).map(Some)
        } else {
            Ok(None)
        }
    }
}

/// Overrides for `model`: unscoped keys plus `model:key` ones.
fn scoped(overrides: &[(String, String)], model: &str) -> Vec<(String, String)> {
    overrides
        .iter()
        .filter_map(|(k, v)| match k.split_once(':') {
            Some((m, key)) if m == model => Some((key.to_string(), v.clone())),
            Some(_) => None,
            None => Some((k.clone(), v.clone())),
        })
        .collect()
}

pub fn ingest(ctx: &Ctx, data: DataArgs) -> Result<()> {
    let sets = ctx.datasets(data)?;
    let mut entries = Vec::new();
    let mut text = String::new();
    for (i, ds) in sets.iter().enumerate() {
        let name = if sets.len() == 1 { "dataset.csv".to_string() } else { format!("dataset-{}.csv", i + 1) };
        let path = ctx.write(&name, &ds.to_csv_string())?;
        let m = ds.meta();
        let _ = writeln!(
            text,
            "{}: {} records, {} learners, {} questions, max attempt {} -> {}",
            m.lesson_name,
            ds.len(),
            m.n_learners,
            m.n_questions,
            m.max_attempt,
            path.display()
        );
        entries.push(json!({
            "lesson_name": m.lesson_name,
            "n_records": ds.len(),
            "n_labeled": ds.n_labeled(),
            "n_learners": m.n_learners,
            "n_questions": m.n_questions,
            "max_attempt": m.max_attempt,
            "file": name,
        }));
    }
    ctx.write_report(&json!({ "command": "ingest", "datasets": entries }), &text)
}

pub fn summarize(ctx: &Ctx, data: DataArgs) -> Result<()> {
    let sets = ctx.datasets(data)?;
    let summaries: Vec<_> = sets.iter().map(summarize_dataset).collect();
    let text: String = summaries.iter().map(|s| s.to_text()).collect::<Vec<_>>().join("\n");
    ctx.write_report(&json!({ "command": "summarize", "summaries": summaries }), &text)
}

fn pipeline_config(ctx: &Ctx, overrides: &[(String, String)], repeats: Option<usize>) -> Result<PipelineConfig> {
    let mut c: PipelineConfig = apply_overrides(&PipelineConfig::default(), overrides)?;
    if let Some(r) = ctx.cfg.pick(repeats, "repeats")? {
        c.repeats = r;
    }
    Ok(c)
}

/// Run-level details of the direct LLM pipeline, for report.json.
fn llm_details(outcomes: &[learnkt_core::llm::PipelineOutcome]) -> Value {
    let folds: Vec<Value> = outcomes
        .iter()
        .enumerate()
        .map(|(f, o)| {
            json!({
                "fold": f,
                "rows": o.keys.len(),
                "imputed": o.total_imputed(),
                "rejected": o.runs.iter().map(|r| r.rejected.len()).sum::<usize>(),
                "coverage": o.runs.iter().map(|r| r.coverage).fold(f64::INFINITY, f64::min),
                "run_rmse": o.run_rmse(),
            })
        })
        .collect();
    Value::Array(folds)
}

fn cv_reports(
    ctx: &Ctx,
    sets: &[Dataset],
    models: &[String],
    overrides: &[(String, String)],
    k: usize,
    repeats: Option<usize>,
    client: Option<Arc<dyn LlmClient>>,
) -> Result<(Vec<CvReport>, Value)> {
    let mut reports = Vec::new();
    let mut details = serde_json::Map::new();
    for ds in sets {
        for name in models {
            log::info!("cross-validating {name} on {}", ds.lesson_name());
            let overrides = &scoped(overrides, name);
            let report = if name == "llm" {
                let client = client.clone().expect("client built for llm models");
                let cfg = pipeline_config(ctx, overrides, repeats)?;
                let (report, outcomes) = llm_cross_validate(ds, client.as_ref(), k, ctx.seed, &cfg)?;
                details.insert(format!("{}/{}", report.model_name, ds.lesson_name()), llm_details(&outcomes));
                report
            } else {
                let p = build_predictor(name, overrides, client.clone())?;
                cross_validate(p.as_ref(), ds, k, ctx.seed)?
            };
            reports.push(report);
        }
    }
    Ok((reports, Value::Object(details)))
}

pub fn cv(
    ctx: &Ctx,
    data: DataArgs,
    model: ModelArgs,
    k: Option<usize>,
    repeats: Option<usize>,
    client: ClientArgs,
) -> Result<()> {
    let models = ctx.models(&model, None)?;
    let k = ctx.k(k)?;
    let overrides = ctx.overrides(&model)?;
    let client = ctx.client_for(&models, &client)?;
    let sets = ctx.datasets(data)?;
    let (reports, details) = cv_reports(ctx, &sets, &models, &overrides, k, repeats, client)?;
    let mut json = json!({
        "command": "cv",
        "k": k,
        "seed": ctx.seed,
        "results": reports_to_json(&reports),
    });
    if details.as_object().is_some_and(|d| !d.is_empty()) {
        json["llm_runs"] = details;
    }
    ctx.write_report(&json, &report_table(&reports))
}

fn single_model(ctx: &Ctx, model: &ModelArgs) -> Result<String> {
    let mut names = ctx.models(model, None)?;
    if names.len() != 1 {
        return Err(Error::Config("this command takes exactly one --model".into()));
    }
    Ok(names.remove(0))
}

pub fn fit(ctx: &Ctx, data: DataArgs, model: ModelArgs, client: ClientArgs) -> Result<()> {
    let name = single_model(ctx, &model)?;
    let client = ctx.client_for(std::slice::from_ref(&name), &client)?;
    let ds = ctx.one_dataset(data)?.labeled()?;
    let p = build_predictor(&name, &scoped(&ctx.overrides(&model)?, &name), client)?;
    let fitted = p.fit(&ds, ctx.seed)?;
    let keys = ds.keys();
    let y: Vec<f64> = ds.records().iter().filter_map(|r| r.target()).collect();
    let train_rmse = rmse(&fitted.predict(&keys)?, &y)?;
    let file = format!("model-{name}.json");
    ctx.write(&file, &(serde_json::to_string_pretty(&fitted.export())? + "\n"))?;
    let text = format!(
        "{} fit on {} ({} rows): training RMSE {train_rmse:.4}\nmodel written to {file}\n",
        p.name(),
        ds.lesson_name(),
        ds.len()
    );
    ctx.write_report(
        &json!({
            "command": "fit",
            "model": name,
            "dataset": ds.lesson_name(),
            "n_train": ds.len(),
            "train_rmse": train_rmse,
            "model_file": file,
        }),
        &text,
    )
}

pub fn predict(ctx: &Ctx, data: DataArgs, model: ModelArgs, queries: Option<PathBuf>, client: ClientArgs) -> Result<()> {
    let name = single_model(ctx, &model)?;
    let client = ctx.client_for(std::slice::from_ref(&name), &client)?;
    let ds = ctx.one_dataset(data)?;
    let train = ds.labeled()?;
    let (keys, actual): (Vec<RecordKey>, Vec<Option<f64>>) = match ctx.cfg.pick(queries, "queries")? {
        Some(q) => parse_dataset(&q, None)?.records().iter().map(|r| (r.key(), r.target())).unzip(),
        None => ds.records().iter().filter(|r| !r.is_labeled()).map(|r| (r.key(), None)).unzip(),
    };
    if keys.is_empty() {
        return Err(Error::Validation("no rows to predict: pass --queries or leave some obs empty".into()));
    }
    let p = build_predictor(&name, &scoped(&ctx.overrides(&model)?, &name), client)?;
    let fitted = p.fit(&train, ctx.seed)?;
    let preds = fitted.predict(&keys)?;
    let mut csv = String::from("learner_id,question_id,attempt,prediction\n");
    for (k, v) in keys.iter().zip(&preds) {
        let _ = writeln!(csv, "{},{},{},{v}", k.learner_id, k.question_id, k.attempt);
    }
    ctx.write("predictions.csv", &csv)?;
    let file = format!("model-{name}.json");
    ctx.write(&file, &(serde_json::to_string_pretty(&fitted.export())? + "\n"))?;

    let labeled: Vec<(f64, f64)> = preds.iter().zip(&actual).filter_map(|(p, a)| a.map(|a| (*p, a))).collect();
    let query_rmse = if labeled.is_empty() {
        None
    } else {
        let (p, a): (Vec<f64>, Vec<f64>) = labeled.into_iter().unzip();
        Some(rmse(&p, &a)?)
    };
    let mut text = format!("{} predicted {} rows -> predictions.csv\n", p.name(), keys.len());
    if let Some(r) = query_rmse {
        let _ = writeln!(text, "RMSE on labeled queries: {r:.4}");
    }
    ctx.write_report(
        &json!({
            "command": "predict",
            "model": name,
            "dataset": ds.lesson_name(),
            "n_predictions": keys.len(),
            "query_rmse": query_rmse,
            "model_file": file,
        }),
        &text,
    )
}

fn load_grid(ctx: &Ctx, grid: Option<String>, grid_set: Vec<String>) -> Result<Grid> {
    let mut g = Grid::default();
    match ctx.cfg.pick(grid, "grid")?.as_deref() {
        None | Some("default") => {}
        Some(path) => {
            let path = Path::new(path);
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                let (k, v) = parse_override(line)?;
                g.set(&k, &v)?;
            }
        }
    }
    for item in ctx.cfg.list(grid_set, "grid-set") {
        let (k, v) = parse_override(&item)?;
        g.set(&k, &v)?;
    }
    Ok(g)
}

#[allow(clippy::too_many_arguments)]
pub fn tune(
    ctx: &Ctx,
    data: DataArgs,
    model: ModelArgs,
    grid: Option<String>,
    grid_set: Vec<String>,
    k: Option<usize>,
    budget: Option<usize>,
    client: ClientArgs,
) -> Result<()> {
    let name = ctx.models(&model, Some("gbt"))?;
    let name = match name.as_slice() {
        [one] if one == "gbt" || one == "llm-gbt" => one.clone(),
        _ => return Err(Error::Config("tune supports --model gbt or llm-gbt".into())),
    };
    let k = ctx.k(k)?;
    let sets = ctx.datasets(data)?;
    let mut reports: Vec<TuneReport> = Vec::new();
    if name == "gbt" {
        let g = load_grid(ctx, grid, grid_set)?;
        log::info!("grid search over {} configurations", g.len());
        for ds in &sets {
            reports.push(grid_search(ds, &g, k, ctx.seed)?);
        }
    } else {
        let client = ctx.client(&client)?;
        let budget = ctx.cfg.pick(budget, "budget")?.unwrap_or(10);
        for ds in &sets {
            reports.push(llm_tuning_loop(ds, client.as_ref(), budget, k, ctx.seed)?);
        }
    }
    let rows: Vec<TableRow> = reports
        .iter()
        .map(|r| TableRow {
            method: r.method.clone(),
            dataset: r.dataset.clone(),
            summary: r.summary.clone(),
        })
        .collect();
    let mut text = table3_text(&rows);
    for r in &reports {
        let _ = writeln!(
            text,
            "\n{} on {}: {} {} evaluated, {} failed; best RMSE {:.4} with {}",
            r.method,
            r.dataset,
            r.results.len(),
            r.aggregation,
            r.failures,
            r.best_rmse,
            r.best.to_kv()
        );
    }
    ctx.write_report(&json!({ "command": "tune", "k": k, "seed": ctx.seed, "tune": reports }), &text)
}

pub struct SimArgs {
    pub generator: Option<String>,
    pub shape: Option<String>,
    pub rank: Option<usize>,
    pub scale: Option<f64>,
    pub factors: Option<String>,
    pub policy: Option<String>,
    pub bkt_params: Option<String>,
    pub holdout: Option<f64>,
    pub lesson_name: Option<String>,
}

fn parse_bkt_params(text: &str) -> Result<BktParams> {
    let v: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad --bkt-params '{text}'")))?;
    match v.as_slice() {
        [a, b, c, d] => BktParams::new(*a, *b, *c, *d).map_err(|e| Error::Config(e.to_string())),
        _ => Err(Error::Config("--bkt-params needs four comma-separated values".into())),
    }
}

pub fn simulate(ctx: &Ctx, a: SimArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let generator = cfg.pick(a.generator, "generator")?.unwrap_or_else(|| "bkt-process".into());
    let shape = cfg.pick(a.shape, "shape")?.unwrap_or_else(|| "66x8x9".into());
    let (n_learners, n_questions, max_attempt) = simgen::parse_shape(&shape)?;
    let rank = cfg.pick(a.rank, "rank")?.unwrap_or(2);
    let scale = cfg.pick(a.scale, "scale")?.unwrap_or(1.0);
    let factors = match cfg.pick(a.factors, "factors")?.as_deref() {
        None | Some("random") => FactorInit::Random { scale },
        Some("orthogonal") => FactorInit::Orthogonal { scale },
        Some(other) => return Err(Error::Config(format!("unknown --factors '{other}'; use random or orthogonal"))),
    };
    let generator = match generator.as_str() {
        "bkt-process" => {
            let params = match cfg.pick(a.bkt_params, "bkt-params")? {
                Some(t) => parse_bkt_params(&t)?,
                None => BktParams::new(0.3, 0.2, 0.1, 0.25)?,
            };
            let policy = match cfg.pick(a.policy, "policy")?.as_deref() {
                None | Some("full") => AttemptPolicy::Full,
                Some("until-correct") => AttemptPolicy::UntilCorrect,
                Some(other) => return Err(Error::Config(format!("unknown --policy '{other}'"))),
            };
            Generator::BktProcess {
                params: vec![params],
                policy,
            }
        }
        "low-rank-matrix" => Generator::LowRankMatrix {
            rank,
            factors,
            intercept_scale: 0.5,
        },
        "low-rank-tensor" => Generator::LowRankTensor { rank, factors },
        other => {
            return Err(Error::Config(format!(
                "unknown generator '{other}'; available: bkt-process, low-rank-matrix, low-rank-tensor"
            )))
        }
    };
    let lesson_name = cfg.pick(a.lesson_name, "lesson-name")?.unwrap_or_else(|| "simulated".into());
    let spec = SimSpec {
        lesson_name: lesson_name.clone(),
        n_learners,
        n_questions,
        max_attempt,
        generator,
        holdout_fraction: cfg.pick(a.holdout, "holdout")?.unwrap_or(0.0),
        seed: ctx.seed,
    };
    let out = simgen::simulate(&spec)?;
    let stem: String = lesson_name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let csv = format!("{stem}.csv");
    let truth = format!("{stem}.truth.json");
    ctx.write(&csv, &out.dataset.to_csv_string())?;
    ctx.write(&truth, &(serde_json::to_string_pretty(&out.sidecar_json())? + "\n"))?;
    let text = format!(
        "{} lesson '{lesson_name}' ({shape}): {} records, {} held out -> {csv}, {truth}\n",
        spec.generator.name(),
        out.dataset.len(),
        out.holdout.len()
    );
    ctx.write_report(
        &json!({
            "command": "simulate",
            "generator": spec.generator.name(),
            "shape": shape,
            "seed": ctx.seed,
            "n_records": out.dataset.len(),
            "n_holdout": out.holdout.len(),
            "data_file": csv,
            "truth_file": truth,
        }),
        &text,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn llm_run(
    ctx: &Ctx,
    data: DataArgs,
    model: ModelArgs,
    k: Option<usize>,
    repeats: Option<usize>,
    chunk_size: Option<usize>,
    concurrency: Option<usize>,
    client: ClientArgs,
) -> Result<()> {
    let models = ctx.models(&model, Some("llm"))?;
    if let Some(m) = models.iter().find(|m| !is_llm_model(m)) {
        return Err(Error::Config(format!("llm-run takes llm or llm-gbt, got '{m}'")));
    }
    let k = ctx.k(k)?;
    let client = ctx.client(&client)?;
    let mut overrides = ctx.overrides(&model)?;
    if let Some(c) = ctx.cfg.pick(chunk_size, "chunk-size")? {
        overrides.push(("chunk_size".into(), c.to_string()));
    }
    if let Some(c) = ctx.cfg.pick(concurrency, "concurrency")? {
        overrides.push(("concurrency".into(), c.to_string()));
    }
    let sets = ctx.datasets(data)?;
    let mut reports = Vec::new();
    let mut details = serde_json::Map::new();
    for name in &models {
        // LLM-GBT takes only its own two settings.
        let own: Vec<(String, String)> = overrides
            .iter()
            .filter(|(k, _)| name == "llm" || k == "tuning_budget" || k == "inner_folds")
            .cloned()
            .collect();
        let (r, d) = cv_reports(ctx, &sets, std::slice::from_ref(name), &own, k, repeats, Some(client.clone()))?;
        reports.extend(r);
        if let Value::Object(m) = d {
            details.extend(m);
        }
    }
    let json = json!({
        "command": "llm-run",
        "client": client.name(),
        "k": k,
        "seed": ctx.seed,
        "results": reports_to_json(&reports),
        "llm_runs": Value::Object(details),
    });
    ctx.write_report(&json, &report_table(&reports))
}

pub fn report(ctx: &Ctx, inputs: Vec<PathBuf>) -> Result<()> {
    let inputs = ctx.cfg.paths(inputs, "inputs");
    if inputs.is_empty() {
        return Err(Error::Config("--inputs is required".into()));
    }
    let mut cv: Vec<CvReport> = Vec::new();
    let mut rows: Vec<TableRow> = Vec::new();
    for path in &inputs {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let v: Value = serde_json::from_str(&text)?;
        if let Some(results) = v.get("results") {
            let parsed: ReportJson = serde_json::from_value(results.clone())?;
            cv.extend(reports_from_json(&parsed));
        }
        if let Some(tune) = v.get("tune") {
            let parsed: Vec<TuneReport> = serde_json::from_value(tune.clone())?;
            rows.extend(parsed.into_iter().map(|r| TableRow {
                method: r.method,
                dataset: r.dataset,
                summary: r.summary,
            }));
        }
        if v.get("results").is_none() && v.get("tune").is_none() {
            return Err(Error::Validation(format!("{} holds no cv or tune results", path.display())));
        }
    }
    let mut text = String::new();
    if !cv.is_empty() {
        text.push_str(&report_table(&cv));
    }
    if !rows.is_empty() {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&table3_text(&rows));
    }
    ctx.write_report(
        &json!({ "command": "report", "results": reports_to_json(&cv), "tuning": rows }),
        &text,
    )
}
