//! On-disk formats: dataset CSV, match-probability table CSV, and the TOML
//! scenario / Monte Carlo configuration files.
//!
//! Dataset CSV columns are `x1,...,xp,y_star,r,d,y_latent`. `x1` must be 1,
//! the indicator columns hold `0` or `1`, and `d` / `y_latent` are left
//! empty when absent. Floats are written in shortest round-trip form, so a
//! dataset survives a write/read cycle bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimators::EstimatorKind;
use crate::harness::{McConfig, TableMode};
use crate::linkage_sim::{
    CovariateLevel, LinkedDataset, LinkedRecord, MatchModel, MismatchModel, ScenarioConfig,
};
use crate::match_prob::{FallbackPolicy, MatchProbTable};
use crate::model_core::{Coefficients, Covariates, SolverOptions};

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn indicator(v: bool) -> &'static str {
    if v {
        "1"
    } else {
        "0"
    }
}

pub fn dataset_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    h.extend(["y_star", "r", "d", "y_latent"].map(String::from));
    h
}

pub fn write_dataset_csv<W: Write>(ds: &LinkedDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    w.write_record(dataset_header(ds.dim())).map_err(ser)?;
    let mut row: Vec<String> = Vec::with_capacity(ds.dim() + 4);
    for r in ds.records() {
        row.clear();
        row.extend(r.x.as_slice().iter().map(|v| v.to_string()));
        row.push(indicator(r.y_star).into());
        row.push(indicator(r.r).into());
        row.push(r.d.map_or("", indicator).into());
        row.push(r.y_latent.map_or("", indicator).into());
        w.write_record(&row).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialize(e.to_string()))
}

pub fn save_dataset_csv(ds: &LinkedDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset_csv(ds, std::io::BufWriter::new(file))
}

fn parse_flag(field: &str, name: &str, path: &Path, line: u64) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(path, line, format!("{name} must be 0 or 1, found '{other}'"))),
    }
}

fn parse_opt_flag(field: &str, name: &str, path: &Path, line: u64) -> Result<Option<bool>> {
    if field.trim().is_empty() {
        Ok(None)
    } else {
        parse_flag(field, name, path, line).map(Some)
    }
}

/// Read a dataset CSV. `path` is used in error messages only.
pub fn read_dataset_csv<R: std::io::Read>(input: R, path: &Path) -> Result<LinkedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 5 {
        return Err(parse_err(path, 1, "header needs x1..xp,y_star,r,d,y_latent"));
    }
    let dim = cols.len() - 4;
    let expected = dataset_header(dim);
    if cols != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(parse_err(
            path,
            1,
            format!("expected header '{}', found '{}'", expected.join(","), cols.join(",")),
        ));
    }
    let mut records = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let x = (0..dim)
            .map(|k| {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(path, line, format!("x{}: {e}", k + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        let x = Covariates::new(x).map_err(|e| parse_err(path, line, e.to_string()))?;
        let y_star = parse_flag(&rec[dim], "y_star", path, line)?;
        let r = parse_flag(&rec[dim + 1], "r", path, line)?;
        let d = parse_opt_flag(&rec[dim + 2], "d", path, line)?;
        let y_latent = parse_opt_flag(&rec[dim + 3], "y_latent", path, line)?;
        if r && d.is_none() {
            return Err(parse_err(path, line, "reviewed record (r=1) has empty d"));
        }
        if d == Some(true) && y_latent.is_some_and(|y| y != y_star) {
            return Err(parse_err(path, line, "matched record has y_latent different from y_star"));
        }
        records.push(LinkedRecord {
            x,
            y_star,
            r,
            d,
            y_latent,
        });
    }
    if records.is_empty() {
        return Err(parse_err(path, 2, "dataset has no data rows"));
    }
    LinkedDataset::new(records, None)
}

pub fn load_dataset_csv(path: &Path) -> Result<LinkedDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_csv(std::io::BufReader::new(file), path)
}

/// Audit export: `x1..xp,y_star,p_hat,n_matched,n_unmatched,provenance`.
pub fn write_table_csv<W: Write>(table: &MatchProbTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    let dim = table.cells().next().map_or(0, |(x, _, _)| x.dim());
    let mut header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
    header.extend(["y_star", "p_hat", "n_matched", "n_unmatched", "provenance"].map(String::from));
    w.write_record(&header).map_err(ser)?;
    for (x, y, c) in table.cells() {
        let mut row: Vec<String> = x.as_slice().iter().map(|v| v.to_string()).collect();
        row.push(indicator(y).into());
        row.push(c.p_hat.to_string());
        row.push(c.n_matched.to_string());
        row.push(c.n_unmatched.to_string());
        row.push(c.provenance.to_string());
        w.write_record(&row).map_err(ser)?;
    }
    w.flush().map_err(|e| Error::Serialize(e.to_string()))
}

/// 1-based line of the first `key = ...` assignment in a TOML document.
fn line_of_key(text: &str, key: &str) -> u64 {
    text.lines()
        .position(|l| {
            let t = l.trim_start();
            t.strip_prefix(key)
                .is_some_and(|rest| rest.trim_start().starts_with('='))
        })
        .map_or(0, |i| i as u64 + 1)
}

fn line_of_offset(text: &str, offset: usize) -> u64 {
    text[..offset.min(text.len())].matches('\n').count() as u64 + 1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    n: usize,
    seed: u64,
    beta_true: Vec<f64>,
    covariate_levels: Vec<Vec<f64>>,
    #[serde(default = "default_match_model")]
    match_model: String,
    match_rate: Option<f64>,
    match_rates: Option<Vec<f64>>,
    #[serde(default = "default_mismatch")]
    mismatch_response: String,
    mismatch_rates: Option<Vec<f64>>,
    review_probability: f64,
}

fn default_match_model() -> String {
    "constant".into()
}

fn default_mismatch() -> String {
    "population-marginal".into()
}

const MC_KEYS: [&str; 10] = [
    "replications",
    "base_seed",
    "estimators",
    "table_mode",
    "extra_iterations",
    "fallback",
    "bootstrap_resamples",
    "max_iterations",
    "step_tolerance",
    "max_step_halvings",
];

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMc {
    replications: usize,
    base_seed: Option<u64>,
    estimators: Vec<String>,
    #[serde(default = "default_table_mode")]
    table_mode: String,
    #[serde(default)]
    extra_iterations: usize,
    #[serde(default = "default_fallback")]
    fallback: String,
    #[serde(default = "default_bootstrap")]
    bootstrap_resamples: usize,
    max_iterations: Option<usize>,
    step_tolerance: Option<f64>,
    max_step_halvings: Option<usize>,
}

fn default_table_mode() -> String {
    "estimated".into()
}

fn default_fallback() -> String {
    "hierarchical".into()
}

fn default_bootstrap() -> usize {
    1000
}

fn toml_error(path: &Path, text: &str, e: toml::de::Error) -> Error {
    let line = e.span().map_or(0, |s| line_of_offset(text, s.start));
    parse_err(path, line, e.message().to_string())
}

fn scenario_from_raw(raw: RawScenario, path: &Path, text: &str) -> Result<ScenarioConfig> {
    let at = |key: &str, msg: String| parse_err(path, line_of_key(text, key), msg);
    let beta_true = Coefficients::new(raw.beta_true).map_err(|e| at("beta_true", e.to_string()))?;
    let p = beta_true.dim();
    let levels = raw
        .covariate_levels
        .into_iter()
        .map(|row| {
            if row.len() != p + 1 {
                return Err(at(
                    "covariate_levels",
                    format!("each level needs {p} covariates and a weight, found {} values", row.len()),
                ));
            }
            let (x, w) = row.split_at(p);
            Ok(CovariateLevel {
                x: Covariates::new(x.to_vec()).map_err(|e| at("covariate_levels", e.to_string()))?,
                weight: w[0],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let match_model = match raw.match_model.as_str() {
        "constant" => MatchModel::Constant(
            raw.match_rate
                .ok_or_else(|| at("match_model", "constant match model needs match_rate".into()))?,
        ),
        "cell" => MatchModel::CellTable(
            raw.match_rates
                .ok_or_else(|| at("match_model", "cell match model needs match_rates".into()))?,
        ),
        other => return Err(at("match_model", format!("unknown match_model '{other}'"))),
    };
    let mismatch_model = match raw.mismatch_response.as_str() {
        "population-marginal" => MismatchModel::PopulationMarginal,
        "per-level" => MismatchModel::PerLevel(raw.mismatch_rates.ok_or_else(|| {
            at("mismatch_response", "per-level mismatch model needs mismatch_rates".into())
        })?),
        other => return Err(at("mismatch_response", format!("unknown mismatch_response '{other}'"))),
    };
    let cfg = ScenarioConfig {
        n: raw.n,
        beta_true,
        levels,
        match_model,
        mismatch_model,
        review_probability: raw.review_probability,
        seed: raw.seed,
    };
    cfg.validate().map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(cfg)
}

/// Parse a scenario configuration document.
pub fn parse_scenario(text: &str, path: &Path) -> Result<ScenarioConfig> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| toml_error(path, text, e))?;
    scenario_from_raw(raw, path, text)
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario(&text, path)
}

/// Parse a Monte Carlo configuration: a scenario document plus the study
/// keys (`replications`, `estimators`, `table_mode`, ...).
pub fn parse_mc_config(text: &str, path: &Path) -> Result<McConfig> {
    let mut table: toml::Table = text.parse().map_err(|e| toml_error(path, text, e))?;
    let mut mc_table = toml::Table::new();
    for key in MC_KEYS {
        if let Some(v) = table.remove(key) {
            mc_table.insert(key.to_string(), v);
        }
    }
    let raw_scenario: RawScenario = table
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(path, 0, e.message().to_string()))?;
    let raw_mc: RawMc = mc_table
        .try_into()
        .map_err(|e: toml::de::Error| parse_err(path, 0, e.message().to_string()))?;
    let scenario = scenario_from_raw(raw_scenario, path, text)?;
    let at = |key: &str, msg: String| parse_err(path, line_of_key(text, key), msg);

    let estimators = raw_mc
        .estimators
        .iter()
        .map(|name| {
            let kind: EstimatorKind = name.parse().map_err(|e: Error| at("estimators", e.to_string()))?;
            Ok(match kind {
                EstimatorKind::OptimalTwoStep { .. } => EstimatorKind::OptimalTwoStep {
                    review_probability: scenario.review_probability,
                    extra_iterations: raw_mc.extra_iterations,
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table_mode = match raw_mc.table_mode.as_str() {
        "oracle" => TableMode::Oracle,
        "estimated" => TableMode::Estimated,
        other => return Err(at("table_mode", format!("unknown table_mode '{other}'"))),
    };
    let fallback = match raw_mc.fallback.as_str() {
        "hierarchical" => FallbackPolicy::Hierarchical,
        "strict" => FallbackPolicy::Strict,
        other => return Err(at("fallback", format!("unknown fallback '{other}'"))),
    };
    let defaults = SolverOptions::default();
    let solver = SolverOptions {
        max_iterations: raw_mc.max_iterations.unwrap_or(defaults.max_iterations),
        step_tolerance: raw_mc.step_tolerance.unwrap_or(defaults.step_tolerance),
        max_step_halvings: raw_mc.max_step_halvings.unwrap_or(defaults.max_step_halvings),
    };
    let cfg = McConfig {
        base_seed: raw_mc.base_seed.unwrap_or(scenario.seed),
        scenario,
        replications: raw_mc.replications,
        estimators,
        table_mode,
        fallback,
        bootstrap_resamples: raw_mc.bootstrap_resamples,
        solver,
    };
    cfg.validate().map_err(|e| parse_err(path, 0, e.to_string()))?;
    Ok(cfg)
}

pub fn load_mc_config(path: &Path) -> Result<McConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mc_config(&text, path)
}
