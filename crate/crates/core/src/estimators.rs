//! The four fitting procedures.
//!
//! * `Oracle` fits the classical score on the true responses (simulation
//!   only).
//! * `Naive` fits the classical score on the observed responses, ignoring
//!   linkage error.
//! * `Chipperfield` solves `Σ xᵢ Hᵢ(β) = 0` with
//!   `Hᵢ = {rᵢdᵢ + (1−rᵢ)P(D=1|xᵢ,y*ᵢ)}(y*ᵢ − μᵢ(β))`, directly by Newton's
//!   method.
//! * `OptimalTwoStep` solves `Σ Aᵢ* Hᵢ(β) = 0` with the optimal multiplier
//!   `Aᵢ*` evaluated at a first-step `Chipperfield` estimate and then held
//!   fixed.
//!
//! All four are weighted logistic equations, so they share one solver and
//! one sandwich routine.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::sandwich;
use crate::linkage_sim::{LinkedDataset, LinkedRecord};
use crate::match_prob::{
    estimate_match_prob, estimate_residual_moment, FallbackPolicy, MatchProbTable,
    ResidualMomentTable,
};
use crate::model_core::{
    logistic, logistic_variance, Coefficients, Covariates, EstimatingEquation, FitResult,
    SolverOptions, WeightedLogisticEquation, WeightedRow,
};

/// Denominators of the optimal multiplier at or below this are degenerate.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EstimatorKind {
    Oracle,
    Naive,
    Chipperfield,
    OptimalTwoStep {
        review_probability: f64,
        #[serde(default)]
        extra_iterations: usize,
    },
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Oracle => "oracle",
            EstimatorKind::Naive => "naive",
            EstimatorKind::Chipperfield => "chipperfield",
            EstimatorKind::OptimalTwoStep { .. } => "optimal",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let EstimatorKind::OptimalTwoStep {
            review_probability, ..
        } = self
        {
            if !(*review_probability > 0.0 && *review_probability <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "review probability {review_probability} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses the estimator name only; an `optimal` estimator gets a
/// placeholder review probability of 1 that callers must replace.
impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(EstimatorKind::Oracle),
            "naive" => Ok(EstimatorKind::Naive),
            "chipperfield" => Ok(EstimatorKind::Chipperfield),
            "optimal" => Ok(EstimatorKind::OptimalTwoStep {
                review_probability: 1.0,
                extra_iterations: 0,
            }),
            other => Err(Error::InvalidConfig(format!("unknown estimator '{other}'"))),
        }
    }
}

/// `Hᵢ(β)` for one record; bounded by 1 in absolute value.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct HValue(pub f64);

impl HValue {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `rd + (1−r)p̂(x, y*)`. Reviewed records use their clerical match status
/// and never consult the table.
pub fn review_weight(record: &LinkedRecord, table: &MatchProbTable) -> Result<f64> {
    if record.r {
        let d = record.d.ok_or_else(|| {
            Error::DataIntegrity(format!(
                "reviewed record at {} has no match status",
                record.x
            ))
        })?;
        Ok(f64::from(u8::from(d)))
    } else {
        table.p_hat(&record.x, record.y_star)
    }
}

pub fn h_value(record: &LinkedRecord, table: &MatchProbTable, beta: &Coefficients) -> Result<HValue> {
    if record.x.dim() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: record.x.dim(),
        });
    }
    let w = review_weight(record, table)?;
    Ok(HValue(w * (record.y_star_f64() - logistic(record.x.dot(beta.as_vector())))))
}

/// Classical score on the true responses.
pub fn oracle_equation(ds: &LinkedDataset) -> Result<WeightedLogisticEquation> {
    let rows = ds
        .records()
        .iter()
        .map(|r| {
            let y = r.y_latent.ok_or_else(|| {
                Error::MissingGroundTruth("oracle estimator needs y_latent on every record".into())
            })?;
            Ok(WeightedRow {
                x: r.x.clone(),
                response: f64::from(u8::from(y)),
                weight: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedLogisticEquation::new(rows)
}

/// Classical score on the observed responses.
pub fn naive_equation(ds: &LinkedDataset) -> Result<WeightedLogisticEquation> {
    WeightedLogisticEquation::new(
        ds.records()
            .iter()
            .map(|r| WeightedRow {
                x: r.x.clone(),
                response: r.y_star_f64(),
                weight: 1.0,
            })
            .collect(),
    )
}

/// `Σ xᵢ Hᵢ(β)`: Jacobian `−Σ wᵢ μᵢ(1−μᵢ) xᵢxᵢᵀ`.
pub fn chipperfield_equation(
    ds: &LinkedDataset,
    table: &MatchProbTable,
) -> Result<WeightedLogisticEquation> {
    let rows = ds
        .records()
        .iter()
        .map(|r| {
            Ok(WeightedRow {
                x: r.x.clone(),
                response: r.y_star_f64(),
                weight: review_weight(r, table)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedLogisticEquation::new(rows)
}

/// Solve `eq` from zero and attach the sandwich covariance when converged.
pub fn solve_with_sandwich(
    eq: &impl EstimatingEquation,
    init: &Coefficients,
    opts: &SolverOptions,
) -> Result<FitResult> {
    let mut fit = eq.solve(init, opts)?;
    if fit.converged {
        fit.covariance = Some(sandwich(eq, &fit.beta)?.covariance);
    }
    Ok(fit)
}

pub fn fit_oracle(ds: &LinkedDataset, opts: &SolverOptions) -> Result<FitResult> {
    solve_with_sandwich(&oracle_equation(ds)?, &Coefficients::zeros(ds.dim()), opts)
}

pub fn fit_naive(ds: &LinkedDataset, opts: &SolverOptions) -> Result<FitResult> {
    solve_with_sandwich(&naive_equation(ds)?, &Coefficients::zeros(ds.dim()), opts)
}

pub fn fit_chipperfield(
    ds: &LinkedDataset,
    table: &MatchProbTable,
    opts: &SolverOptions,
) -> Result<FitResult> {
    solve_with_sandwich(
        &chipperfield_equation(ds, table)?,
        &Coefficients::zeros(ds.dim()),
        opts,
    )
}

/// Positive scalar `s(x)` with `A* = −s(x)·x`:
///
/// `s = μ(1−μ)P(D=1|x) / [p μ(1−μ)P(D=1|x) + (1−p) m(x)]`.
pub fn optimal_scale(
    x: &Covariates,
    table: &MatchProbTable,
    moments: &ResidualMomentTable,
    review_probability: f64,
    beta: &Coefficients,
) -> Result<f64> {
    if x.dim() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: x.dim(),
        });
    }
    let v = logistic_variance(x.dot(beta.as_vector()));
    let pd = table.match_given_x(x)?;
    let m = moments.get(x)?.m_hat;
    let num = v * pd;
    let denom = review_probability * num + (1.0 - review_probability) * m;
    if denom <= DEGENERATE_DENOMINATOR {
        return Err(Error::DegenerateCell {
            level: x.to_string(),
            denominator: denom,
        });
    }
    Ok(num / denom)
}

/// The optimal multiplier `Aᵢ*` for one record.
pub fn optimal_weight(
    record: &LinkedRecord,
    table: &MatchProbTable,
    moments: &ResidualMomentTable,
    review_probability: f64,
    beta: &Coefficients,
) -> Result<DVector<f64>> {
    let s = optimal_scale(&record.x, table, moments, review_probability, beta)?;
    Ok(record.x.to_vector() * -s)
}

/// `Σ s(xᵢ) xᵢ Hᵢ(β)` with `s` frozen at `beta_frozen`. This is `−Σ Aᵢ*Hᵢ`;
/// the sign does not change the root or the sandwich covariance.
pub fn optimal_equation(
    ds: &LinkedDataset,
    table: &MatchProbTable,
    moments: &ResidualMomentTable,
    review_probability: f64,
    beta_frozen: &Coefficients,
) -> Result<WeightedLogisticEquation> {
    let mut scales = std::collections::BTreeMap::new();
    for x in ds.levels() {
        let s = optimal_scale(&x, table, moments, review_probability, beta_frozen)?;
        scales.insert(x, s);
    }
    let rows = ds
        .records()
        .iter()
        .map(|r| {
            Ok(WeightedRow {
                x: r.x.clone(),
                response: r.y_star_f64(),
                weight: scales[&r.x] * review_weight(r, table)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    WeightedLogisticEquation::new(rows)
}

/// Where the two-step procedure gets its match probabilities.
#[derive(Clone, Debug)]
pub enum TableSource {
    Estimated(FallbackPolicy),
    Provided(MatchProbTable),
}

#[derive(Clone, Debug)]
pub struct TwoStepOptions {
    pub table: TableSource,
    /// Extra rounds of re-freezing the multipliers at the latest estimate.
    pub extra_iterations: usize,
}

impl Default for TwoStepOptions {
    fn default() -> Self {
        Self {
            table: TableSource::Estimated(FallbackPolicy::Hierarchical),
            extra_iterations: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStepFit {
    pub first_step: FitResult,
    pub fit: FitResult,
    pub table: MatchProbTable,
    pub moments: ResidualMomentTable,
}

/// Two-step optimal estimator.
///
/// 0. match-probability table (estimated from the clerical sample, or given);
/// 1. first-step `Chipperfield` fit `β⁽¹⁾`;
/// 2. residual moments at `β⁽¹⁾`, multipliers `Aᵢ*` frozen at `β⁽¹⁾`, then
///    solve `Σ Aᵢ*Hᵢ(β) = 0`, starting from `β⁽¹⁾`.
pub fn fit_optimal_two_step(
    ds: &LinkedDataset,
    review_probability: f64,
    opts: &SolverOptions,
    two_step: &TwoStepOptions,
) -> Result<TwoStepFit> {
    EstimatorKind::OptimalTwoStep {
        review_probability,
        extra_iterations: two_step.extra_iterations,
    }
    .validate()?;
    if ds.reviewed_count() == 0 {
        return Err(Error::NoReviewedRecords);
    }
    let table = match &two_step.table {
        TableSource::Estimated(policy) => estimate_match_prob(ds, *policy)?,
        TableSource::Provided(t) => t.clone(),
    };
    let first_step = fit_chipperfield(ds, &table, opts)?;
    let mut frozen = first_step.beta.clone();
    let mut rounds = 0;
    loop {
        let moments = estimate_residual_moment(ds, &table, &frozen)?;
        let eq = optimal_equation(ds, &table, &moments, review_probability, &frozen)?;
        let fit = solve_with_sandwich(&eq, &frozen, opts)?;
        if rounds == two_step.extra_iterations || !fit.converged {
            return Ok(TwoStepFit {
                first_step,
                fit,
                table,
                moments,
            });
        }
        frozen = fit.beta.clone();
        rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkage_sim::tests::two_level_config;
    use crate::linkage_sim::{analysis_view, generate};
    use crate::match_prob::oracle_table;

    fn cx(x: f64) -> Covariates {
        Covariates::new(vec![1.0, x]).unwrap()
    }

    fn rec(x: f64, y_star: bool, r: bool, d: Option<bool>) -> LinkedRecord {
        LinkedRecord {
            x: cx(x),
            y_star,
            r,
            d,
            y_latent: None,
        }
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn h_value_examples() {
        let cfg = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        let table = oracle_table(&cfg);
        let zero = Coefficients::zeros(2);
        for y in [false, true] {
            let h = h_value(&rec(1.0, y, true, Some(false)), &table, &zero).unwrap();
            assert_eq!(h.value(), 0.0);
        }
        let beta = Coefficients::new(vec![-(3.0_f64.ln()), 0.0]).unwrap();
        let h = h_value(&rec(1.0, true, true, Some(true)), &table, &beta).unwrap();
        assert!((h.value() - 0.75).abs() < 1e-15);
        let h = h_value(&rec(1.0, false, false, None), &table, &zero).unwrap();
        assert!((h.value() + 0.4).abs() < 1e-15);
        assert!(matches!(
            h_value(&rec(1.0, false, true, None), &table, &zero),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn intercept_only_closed_forms() {
        let cfg = crate::linkage_sim::ScenarioConfig {
            levels: vec![crate::linkage_sim::CovariateLevel {
                x: Covariates::new(vec![1.0]).unwrap(),
                weight: 1.0,
            }],
            beta_true: Coefficients::new(vec![0.0]).unwrap(),
            ..two_level_config(0.8, 0.5, &[0.0, 0.0], 50_000)
        };
        let ds = generate(&cfg).unwrap();
        let n = ds.len() as f64;
        let ybar = ds.records().iter().filter(|r| r.y_latent == Some(true)).count() as f64 / n;
        let fit = fit_oracle(&ds, &SolverOptions::default()).unwrap();
        assert!((fit.beta.as_slice()[0] - logit(ybar)).abs() < 1e-9);
        // Sandwich collapses to 1/(n μ̂(1−μ̂)).
        let var = fit.covariance.unwrap()[(0, 0)];
        assert!((var * n * ybar * (1.0 - ybar) - 1.0).abs() < 1e-9);

        let ystar = ds.records().iter().filter(|r| r.y_star).count() as f64 / n;
        let fit = fit_naive(&analysis_view(&ds), &SolverOptions::default()).unwrap();
        assert!((fit.beta.as_slice()[0] - logit(ystar)).abs() < 1e-9);
    }

    #[test]
    fn lambda_one_reductions() {
        let ds = generate(&two_level_config(1.0, 0.4, &[-0.5, 1.0], 20_000)).unwrap();
        let view = analysis_view(&ds);
        let opts = SolverOptions::default();
        let oracle = fit_oracle(&ds, &opts).unwrap();
        let naive = fit_naive(&view, &opts).unwrap();
        assert_eq!(oracle.beta, naive.beta);
        let table = oracle_table(ds.config_echo().unwrap());
        let chip = fit_chipperfield(&view, &table, &opts).unwrap();
        assert!((&chip.beta.as_vector().clone() - oracle.beta.as_vector()).amax() < 1e-8);
        let cov_diff = chip.covariance.as_ref().unwrap() - oracle.covariance.as_ref().unwrap();
        assert!(cov_diff.amax() < 1e-12);
        let two = fit_optimal_two_step(
            &view,
            0.4,
            &opts,
            &TwoStepOptions {
                table: TableSource::Provided(table),
                extra_iterations: 0,
            },
        )
        .unwrap();
        assert!((two.fit.beta.as_vector() - oracle.beta.as_vector()).amax() < 1e-8);
    }

    #[test]
    fn optimal_weight_examples() {
        let cfg = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        let table = oracle_table(&cfg);
        let zero = Coefficients::zeros(2);
        let record = rec(-1.0, true, false, None);
        let view = LinkedDataset::new(vec![record.clone(), rec(-1.0, false, false, None)], None).unwrap();
        let moments = estimate_residual_moment(&view, &table, &zero).unwrap();
        // Empirical moment over one y*=1 and one y*=0 row: 0.64·0.25 = 0.16.
        assert!((moments.get(&cx(-1.0)).unwrap().m_hat - 0.16).abs() < 1e-15);
        let a = optimal_weight(&record, &table, &moments, 1.0, &zero).unwrap();
        assert_eq!(a.as_slice(), &[-1.0, 1.0]);
        let a = optimal_weight(&record, &table, &moments, 0.5, &zero).unwrap();
        let s: f64 = 0.25 * 0.8 / (0.5 * 0.25 * 0.8 + 0.5 * 0.16);
        assert!((s - 2.0 / 1.8).abs() < 1e-15);
        assert!((a[0] + s).abs() < 1e-15 && (a[1] - s).abs() < 1e-15);

        // With p̂ ≡ 1 the moment is E[(y*−μ)²|x] = μ(1−μ) and Aᵢ* = −x.
        let view = LinkedDataset::new(
            vec![rec(1.0, true, true, Some(true)), rec(1.0, false, true, Some(true))],
            None,
        )
        .unwrap();
        let table = estimate_match_prob(&view, FallbackPolicy::Hierarchical).unwrap();
        let moments = estimate_residual_moment(&view, &table, &zero).unwrap();
        for p in [0.1, 0.5, 0.9] {
            let a = optimal_weight(&view.records()[0], &table, &moments, p, &zero).unwrap();
            assert_eq!(a.as_slice(), &[-1.0, -1.0]);
        }
    }

    #[test]
    fn degenerate_denominator_names_level() {
        let data = LinkedDataset::new(
            vec![rec(2.0, true, true, Some(false)), rec(2.0, false, true, Some(false))],
            None,
        )
        .unwrap();
        let table = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let moments = estimate_residual_moment(&data, &table, &Coefficients::zeros(2)).unwrap();
        let err = optimal_weight(&data.records()[0], &table, &moments, 0.5, &Coefficients::zeros(2))
            .unwrap_err();
        match err {
            Error::DegenerateCell { level, .. } => assert_eq!(level, "[1, 2]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn all_zero_weights_are_singular() {
        let data = LinkedDataset::new(
            vec![
                rec(0.0, true, true, Some(false)),
                rec(1.0, false, true, Some(false)),
                rec(1.0, true, false, None),
            ],
            None,
        )
        .unwrap();
        let table = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let err = fit_chipperfield(&data, &table, &SolverOptions::default()).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }));
    }

    #[test]
    fn estimator_kind_parsing() {
        assert_eq!("naive".parse::<EstimatorKind>().unwrap(), EstimatorKind::Naive);
        assert!("mle".parse::<EstimatorKind>().is_err());
        assert!(EstimatorKind::OptimalTwoStep {
            review_probability: 0.0,
            extra_iterations: 0
        }
        .validate()
        .is_err());
    }
}
