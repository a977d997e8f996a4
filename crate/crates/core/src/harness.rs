//! Monte Carlo comparison of the estimators and the command implementations
//! behind the `linkreg` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    fit_chipperfield, fit_naive, fit_optimal_two_step, fit_oracle, EstimatorKind, TableSource,
    TwoStepOptions,
};
use crate::formats;
use crate::inference::{score_identity_audit, GapReport};
use crate::json;
use crate::linkage_sim::{analysis_view, generate, LinkedDataset, ScenarioConfig};
use crate::match_prob::{estimate_match_prob, oracle_table, FallbackPolicy, MatchProbTable, Provenance};
use crate::model_core::{Coefficients, FitResult, SolverOptions};
use crate::stats::{covariance, mean_vector};

/// Width, relative to the `Chipperfield` trace, below which a bootstrap
/// interval containing zero counts as "no detectable difference".
pub const EQUIVALENCE_WIDTH: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableMode {
    /// Exact match probabilities from the scenario.
    Oracle,
    /// Cell ratio estimates from the clerical sample.
    Estimated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub scenario: ScenarioConfig,
    pub replications: usize,
    pub estimators: Vec<EstimatorKind>,
    pub base_seed: u64,
    pub table_mode: TableMode,
    pub fallback: FallbackPolicy,
    pub bootstrap_resamples: usize,
    pub solver: SolverOptions,
}

impl McConfig {
    pub fn new(scenario: ScenarioConfig, replications: usize, estimators: Vec<EstimatorKind>) -> Self {
        Self {
            base_seed: scenario.seed,
            scenario,
            replications,
            estimators,
            table_mode: TableMode::Estimated,
            fallback: FallbackPolicy::Hierarchical,
            bootstrap_resamples: 1000,
            solver: SolverOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.solver.validate()?;
        if self.replications < 2 {
            return Err(Error::InvalidConfig("replications must be at least 2".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("estimator set is empty".into()));
        }
        let mut names: Vec<&str> = self.estimators.iter().map(|e| e.name()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.estimators.len() {
            return Err(Error::InvalidConfig("estimator listed twice".into()));
        }
        for e in &self.estimators {
            e.validate()?;
        }
        if self.bootstrap_resamples == 0 {
            return Err(Error::InvalidConfig("bootstrap_resamples must be positive".into()));
        }
        Ok(())
    }
}

/// One estimator's result in one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationEstimate {
    pub estimator: String,
    pub converged: bool,
    pub beta: Option<Coefficients>,
    #[serde(with = "json::opt_matrix")]
    pub sandwich_covariance: Option<DMatrix<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub seed: u64,
    pub estimates: Vec<ReplicationEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub converged: usize,
    pub failures: usize,
    pub mean_beta: Vec<f64>,
    pub bias: Vec<f64>,
    /// Monte Carlo standard error of each bias component.
    pub bias_standard_error: Vec<f64>,
    #[serde(with = "json::matrix")]
    pub empirical_covariance: DMatrix<f64>,
    #[serde(with = "json::matrix")]
    pub mean_sandwich_covariance: DMatrix<f64>,
    pub trace_empirical: f64,
    pub trace_sandwich: f64,
}

/// `trace(cov(first)) − trace(cov(second))` over replications where both
/// converged, with a percentile bootstrap interval over replications.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceComparison {
    pub first: String,
    pub second: String,
    pub replications_used: usize,
    pub trace_first: f64,
    pub trace_second: f64,
    pub difference: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EfficiencyBranch {
    /// Interval lies entirely below zero.
    OptimalStrictlyBetter,
    /// Interval contains zero and is narrower than 5% of the
    /// `Chipperfield` trace.
    EquivalentWithinTolerance,
    NotEstablished,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyVerdict {
    pub branch: EfficiencyBranch,
    pub optimal_trace_not_larger: bool,
    pub interval_width_relative: f64,
    pub comparison: TraceComparison,
}

impl EfficiencyVerdict {
    pub fn holds(&self) -> bool {
        self.optimal_trace_not_larger && self.branch != EfficiencyBranch::NotEstablished
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n: usize,
    pub beta_true: Vec<f64>,
    pub review_probability: f64,
    pub replications: usize,
    pub base_seed: u64,
    pub table_mode: TableMode,
    /// Set when fewer than 30 replications back the moments.
    pub low_precision: bool,
    pub seeds: Vec<u64>,
    pub estimators: Vec<EstimatorSummary>,
    pub trace_comparisons: Vec<TraceComparison>,
    pub efficiency: Option<EfficiencyVerdict>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replication: usize,
    pub estimator: String,
    pub reason: String,
}

/// Fit one estimator on one simulated replication.
fn fit_one(
    kind: &EstimatorKind,
    truth: &LinkedDataset,
    view: &LinkedDataset,
    table: &Result<MatchProbTable>,
    solver: &SolverOptions,
) -> Result<FitResult> {
    let table = || table.as_ref().map_err(|e| Error::InvalidInput(e.to_string()));
    match kind {
        EstimatorKind::Oracle => fit_oracle(truth, solver),
        EstimatorKind::Naive => fit_naive(view, solver),
        EstimatorKind::Chipperfield => fit_chipperfield(view, table()?, solver),
        EstimatorKind::OptimalTwoStep {
            review_probability,
            extra_iterations,
        } => fit_optimal_two_step(
            view,
            *review_probability,
            solver,
            &TwoStepOptions {
                table: TableSource::Provided(table()?.clone()),
                extra_iterations: *extra_iterations,
            },
        )
        .map(|t| t.fit),
    }
}

fn run_replication(cfg: &McConfig, index: usize) -> Result<Replication> {
    let seed = cfg.base_seed.wrapping_add(index as u64);
    let mut scenario = cfg.scenario.clone();
    scenario.seed = seed;
    let truth = generate(&scenario)?;
    let view = analysis_view(&truth);
    let table = match cfg.table_mode {
        TableMode::Oracle => Ok(oracle_table(&scenario)),
        TableMode::Estimated => estimate_match_prob(&view, cfg.fallback),
    };
    let estimates = cfg
        .estimators
        .iter()
        .map(|kind| match fit_one(kind, &truth, &view, &table, &cfg.solver) {
            Ok(fit) => ReplicationEstimate {
                estimator: kind.name().into(),
                converged: fit.converged,
                beta: Some(fit.beta),
                sandwich_covariance: fit.covariance,
                error: (!fit.converged).then(|| "did not converge".to_string()),
            },
            Err(e) => ReplicationEstimate {
                estimator: kind.name().into(),
                converged: false,
                beta: None,
                sandwich_covariance: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(Replication {
        index,
        seed,
        estimates,
    })
}

/// Run every replication. Replications are independent and run in
/// parallel; the result is ordered by replication index.
pub fn run_replications(cfg: &McConfig) -> Result<Vec<Replication>> {
    cfg.validate()?;
    (0..cfg.replications)
        .into_par_iter()
        .map(|k| run_replication(cfg, k))
        .collect()
}

fn summarize(name: &str, reps: &[Replication], slot: usize, beta_true: &DVector<f64>) -> EstimatorSummary {
    let p = beta_true.len();
    let ok: Vec<&ReplicationEstimate> = reps
        .iter()
        .map(|r| &r.estimates[slot])
        .filter(|e| e.converged)
        .collect();
    let betas: Vec<DVector<f64>> = ok
        .iter()
        .map(|e| e.beta.as_ref().expect("converged estimate").as_vector().clone())
        .collect();
    let n = betas.len();
    let (mean, cov) = if n >= 2 {
        (mean_vector(&betas), covariance(&betas))
    } else if n == 1 {
        (betas[0].clone(), DMatrix::from_element(p, p, f64::NAN))
    } else {
        (DVector::from_element(p, f64::NAN), DMatrix::from_element(p, p, f64::NAN))
    };
    let sandwiches: Vec<&DMatrix<f64>> = ok.iter().filter_map(|e| e.sandwich_covariance.as_ref()).collect();
    let mean_sandwich = if sandwiches.is_empty() {
        DMatrix::from_element(p, p, f64::NAN)
    } else {
        sandwiches
            .iter()
            .fold(DMatrix::zeros(p, p), |acc, m| acc + *m)
            / sandwiches.len() as f64
    };
    let bias = &mean - beta_true;
    let bias_se: Vec<f64> = (0..p).map(|k| (cov[(k, k)] / n as f64).sqrt()).collect();
    EstimatorSummary {
        estimator: name.into(),
        converged: n,
        failures: reps.len() - n,
        mean_beta: mean.iter().copied().collect(),
        bias: bias.iter().copied().collect(),
        bias_standard_error: bias_se,
        trace_empirical: cov.trace(),
        trace_sandwich: mean_sandwich.trace(),
        empirical_covariance: cov,
        mean_sandwich_covariance: mean_sandwich,
    }
}

fn trace_of_cov(betas: &[&DVector<f64>], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let p = betas[0].len();
    let mut mean = DVector::zeros(p);
    for &i in idx {
        mean += betas[i];
    }
    mean /= n;
    idx.iter()
        .map(|&i| (betas[i] - &mean).norm_squared())
        .sum::<f64>()
        / (n - 1.0)
}

fn compare_traces(
    reps: &[Replication],
    (first, a): (&str, usize),
    (second, b): (&str, usize),
    resamples: usize,
    seed: u64,
) -> Option<TraceComparison> {
    let pairs: Vec<(&DVector<f64>, &DVector<f64>)> = reps
        .iter()
        .filter_map(|r| {
            let (ea, eb) = (&r.estimates[a], &r.estimates[b]);
            match (ea.converged, eb.converged, &ea.beta, &eb.beta) {
                (true, true, Some(ba), Some(bb)) => Some((ba.as_vector(), bb.as_vector())),
                _ => None,
            }
        })
        .collect();
    let m = pairs.len();
    if m < 2 {
        return None;
    }
    let xs: Vec<&DVector<f64>> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<&DVector<f64>> = pairs.iter().map(|p| p.1).collect();
    let all: Vec<usize> = (0..m).collect();
    let trace_first = trace_of_cov(&xs, &all);
    let trace_second = trace_of_cov(&ys, &all);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut diffs: Vec<f64> = (0..resamples)
        .map(|_| {
            let idx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
            trace_of_cov(&xs, &idx) - trace_of_cov(&ys, &idx)
        })
        .filter(|d| d.is_finite())
        .collect();
    diffs.sort_by(f64::total_cmp);
    let q = |f: f64| -> f64 {
        if diffs.is_empty() {
            return f64::NAN;
        }
        let pos = f * (diffs.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        diffs[lo] + (diffs[hi] - diffs[lo]) * (pos - lo as f64)
    };
    Some(TraceComparison {
        first: first.into(),
        second: second.into(),
        replications_used: m,
        trace_first,
        trace_second,
        difference: trace_first - trace_second,
        ci_lower: q(0.025),
        ci_upper: q(0.975),
    })
}

fn efficiency_verdict(cmp: TraceComparison) -> EfficiencyVerdict {
    let width = (cmp.ci_upper - cmp.ci_lower) / cmp.trace_second;
    let branch = if cmp.ci_upper < 0.0 {
        EfficiencyBranch::OptimalStrictlyBetter
    } else if cmp.ci_lower <= 0.0 && width < EQUIVALENCE_WIDTH {
        EfficiencyBranch::EquivalentWithinTolerance
    } else {
        EfficiencyBranch::NotEstablished
    };
    EfficiencyVerdict {
        branch,
        optimal_trace_not_larger: cmp.trace_first <= cmp.trace_second,
        interval_width_relative: width,
        comparison: cmp,
    }
}

/// Aggregate replications into a report. Failed or non-converged fits are
/// excluded from all moments and listed under `failures`.
pub fn aggregate(cfg: &McConfig, reps: &[Replication]) -> McReport {
    let beta_true = cfg.scenario.beta_true.as_vector();
    let names: Vec<&str> = cfg.estimators.iter().map(|e| e.name()).collect();
    let estimators = names
        .iter()
        .enumerate()
        .map(|(slot, name)| summarize(name, reps, slot, beta_true))
        .collect();
    let boot_seed = cfg.base_seed ^ 0x5eed_b007_5eed_b007;
    let mut trace_comparisons = Vec::new();
    for a in 0..names.len() {
        for b in (a + 1)..names.len() {
            if let Some(c) = compare_traces(
                reps,
                (names[a], a),
                (names[b], b),
                cfg.bootstrap_resamples,
                boot_seed.wrapping_add((a * names.len() + b) as u64),
            ) {
                trace_comparisons.push(c);
            }
        }
    }
    let slot = |n: &str| names.iter().position(|x| *x == n);
    let efficiency = match (slot("optimal"), slot("chipperfield")) {
        (Some(o), Some(c)) => compare_traces(
            reps,
            ("optimal", o),
            ("chipperfield", c),
            cfg.bootstrap_resamples,
            boot_seed,
        )
        .map(efficiency_verdict),
        _ => None,
    };
    let failures = reps
        .iter()
        .flat_map(|r| {
            r.estimates.iter().filter(|e| !e.converged).map(move |e| FailureRecord {
                replication: r.index,
                estimator: e.estimator.clone(),
                reason: e.error.clone().unwrap_or_default(),
            })
        })
        .collect();
    McReport {
        n: cfg.scenario.n,
        beta_true: beta_true.iter().copied().collect(),
        review_probability: cfg.scenario.review_probability,
        replications: cfg.replications,
        base_seed: cfg.base_seed,
        table_mode: cfg.table_mode,
        low_precision: reps.len() < 30,
        seeds: reps.iter().map(|r| r.seed).collect(),
        estimators,
        trace_comparisons,
        efficiency,
        failures,
    }
}

pub fn run_mc(cfg: &McConfig) -> Result<(McReport, Vec<Replication>)> {
    let reps = run_replications(cfg)?;
    Ok((aggregate(cfg, &reps), reps))
}

/// Per-replication estimates as CSV:
/// `replication,seed,estimator,converged,beta1..betap`.
pub fn write_replications_csv<W: Write>(reps: &[Replication], dim: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| Error::Serialize(e.to_string());
    let mut header: Vec<String> = ["replication", "seed", "estimator", "converged"]
        .map(String::from)
        .to_vec();
    header.extend((1..=dim).map(|k| format!("beta{k}")));
    w.write_record(&header).map_err(ser)?;
    for r in reps {
        for e in &r.estimates {
            let mut row = vec![
                r.index.to_string(),
                r.seed.to_string(),
                e.estimator.clone(),
                u8::from(e.converged).to_string(),
            ];
            match &e.beta {
                Some(b) => row.extend(b.as_slice().iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), dim)),
            }
            w.write_record(&row).map_err(ser)?;
        }
    }
    w.flush().map_err(|e| Error::Serialize(e.to_string()))
}

/// JSON document written by `linkreg fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub estimator: String,
    pub table_mode: Option<TableMode>,
    pub n_records: usize,
    pub n_reviewed: usize,
    pub beta: Vec<f64>,
    pub standard_errors: Option<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
    #[serde(with = "json::opt_matrix")]
    pub covariance: Option<DMatrix<f64>>,
    /// Number of table cells per provenance.
    pub table_provenance: BTreeMap<Provenance, usize>,
    pub review_probability: Option<f64>,
    pub first_step_beta: Option<Vec<f64>>,
}

impl FitReport {
    fn new(kind: &EstimatorKind, ds: &LinkedDataset, fit: &FitResult) -> Self {
        Self {
            estimator: kind.name().into(),
            table_mode: None,
            n_records: ds.len(),
            n_reviewed: ds.reviewed_count(),
            beta: fit.beta.to_vec(),
            standard_errors: fit
                .covariance
                .as_ref()
                .map(|c| (0..c.nrows()).map(|k| c[(k, k)].sqrt()).collect()),
            converged: fit.converged,
            iterations: fit.iterations,
            final_score_norm: fit.final_score_norm,
            covariance: fit.covariance.clone(),
            table_provenance: BTreeMap::new(),
            review_probability: None,
            first_step_beta: None,
        }
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `linkreg simulate`: write a dataset CSV, returning the seed used.
pub fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<u64> {
    let mut cfg = formats::load_scenario(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    formats::save_dataset_csv(&ds, out)?;
    Ok(cfg.seed)
}

pub struct FitRequest<'a> {
    pub data: &'a Path,
    pub estimator: EstimatorKind,
    pub table_mode: TableMode,
    /// Scenario file; required for the oracle table.
    pub config: Option<&'a Path>,
    /// Known review probability for the optimal estimator. Defaults to the
    /// scenario's value when a config is given, else the reviewed fraction.
    pub review_probability: Option<f64>,
    pub out: &'a Path,
    pub table_out: Option<&'a Path>,
    pub solver: SolverOptions,
}

/// `linkreg fit`.
pub fn cmd_fit(req: &FitRequest<'_>) -> Result<FitReport> {
    let ds = formats::load_dataset_csv(req.data)?;
    let scenario = req.config.map(formats::load_scenario).transpose()?;
    let needs_table = matches!(
        req.estimator,
        EstimatorKind::Chipperfield | EstimatorKind::OptimalTwoStep { .. }
    );
    let table = if needs_table {
        Some(match req.table_mode {
            TableMode::Oracle => {
                let cfg = scenario.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("oracle table requires --config with the generating scenario".into())
                })?;
                if cfg.dim() != ds.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: cfg.dim(),
                        found: ds.dim(),
                    });
                }
                oracle_table(cfg)
            }
            TableMode::Estimated => estimate_match_prob(&ds, FallbackPolicy::Hierarchical)?,
        })
    } else {
        None
    };
    if let (Some(path), Some(t)) = (req.table_out, &table) {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        formats::write_table_csv(t, std::io::BufWriter::new(file))?;
    }

    let mut review_probability = None;
    let mut first_step_beta = None;
    let fit = match req.estimator {
        EstimatorKind::Oracle => {
            if !ds.has_ground_truth() {
                return Err(Error::MissingGroundTruth(
                    "oracle estimator needs d and y_latent on every row".into(),
                ));
            }
            fit_oracle(&ds, &req.solver)?
        }
        EstimatorKind::Naive => fit_naive(&ds, &req.solver)?,
        EstimatorKind::Chipperfield => {
            fit_chipperfield(&ds, table.as_ref().expect("table built"), &req.solver)?
        }
        EstimatorKind::OptimalTwoStep {
            extra_iterations, ..
        } => {
            let p = req
                .review_probability
                .or(scenario.as_ref().map(|s| s.review_probability))
                .unwrap_or(ds.reviewed_count() as f64 / ds.len() as f64);
            review_probability = Some(p);
            let two = fit_optimal_two_step(
                &ds,
                p,
                &req.solver,
                &TwoStepOptions {
                    table: TableSource::Provided(table.clone().expect("table built")),
                    extra_iterations,
                },
            )?;
            first_step_beta = Some(two.first_step.beta.to_vec());
            two.fit
        }
    };
    let mut report = FitReport::new(&req.estimator, &ds, &fit);
    if let Some(t) = &table {
        report.table_mode = Some(req.table_mode);
        report.table_provenance = t.provenance_summary();
    }
    report.review_probability = review_probability;
    report.first_step_beta = first_step_beta;
    write_json(&report, req.out)?;
    Ok(report)
}

pub struct McRequest<'a> {
    pub config: &'a Path,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub plot_data: Option<&'a Path>,
}

/// `linkreg mc`.
pub fn cmd_mc(req: &McRequest<'_>) -> Result<McReport> {
    let mut cfg = formats::load_mc_config(req.config)?;
    if let Some(s) = req.seed {
        cfg.base_seed = s;
    }
    if let Some(r) = req.replications {
        cfg.replications = r;
    }
    let (report, reps) = run_mc(&cfg)?;
    write_json(&report, req.out)?;
    if let Some(path) = req.plot_data {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_replications_csv(&reps, cfg.scenario.dim(), std::io::BufWriter::new(file))?;
    }
    Ok(report)
}

/// `linkreg audit`.
pub fn cmd_score_audit(
    config: &Path,
    beta: Option<Coefficients>,
    n_mc: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<GapReport> {
    let mut cfg = formats::load_scenario(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let beta = beta.unwrap_or_else(|| cfg.beta_true.clone());
    let report = score_identity_audit(&cfg, &beta, n_mc)?;
    write_json(&report, out)?;
    Ok(report)
}
