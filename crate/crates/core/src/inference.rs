//! Sandwich covariance and the score-identity audit.
//!
//! For the clerical-review estimating function `S̃ᵢ = xᵢHᵢ(β)`, a true
//! likelihood score would satisfy `E[−∂S̃ᵢ/∂βᵀ] = E[S̃ᵢS̃ᵢᵀ]`. With known match
//! probabilities the difference of the two sides is
//!
//! ```text
//! (1−p)·E[P(D=1|X) μ(1−μ) XXᵀ] − (1−p)·E[P(D=1|X,Y*)² (Y*−μ)² XXᵀ]
//! ```
//!
//! which vanishes only under full review. The audit measures both sides by
//! simulation, computes them exactly by enumerating the finite
//! `(x, d, y*, r)` support, and, for the null-slope constant-rate case,
//! compares against `(1−p)φ(1−φ)λ(1−λ)E[XXᵀ]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{h_value, review_weight};
use crate::json;
use crate::linkage_sim::{analysis_view, generate, LinkedDataset, ScenarioConfig};
use crate::match_prob::{oracle_table, MatchProbTable};
use crate::model_core::{logistic, logistic_variance, Coefficients, Covariates, EstimatingEquation};
use crate::stats::{mean_and_se, symmetrize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichEstimate {
    #[serde(with = "json::matrix")]
    pub bread: DMatrix<f64>,
    #[serde(with = "json::matrix")]
    pub meat: DMatrix<f64>,
    #[serde(with = "json::matrix")]
    pub covariance: DMatrix<f64>,
    pub n: usize,
}

/// `n⁻¹ B⁻¹ M B⁻ᵀ` with `B = n⁻¹Σ∂Gᵢ/∂βᵀ` and `M = n⁻¹ΣGᵢGᵢᵀ` at `beta`.
pub fn sandwich(eq: &impl EstimatingEquation, beta: &Coefficients) -> Result<SandwichEstimate> {
    let n = eq.len();
    let p = eq.dim();
    if beta.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: beta.dim(),
        });
    }
    let b = beta.as_vector();
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let (g, _) = eq.contribution(i, b);
        meat += &g * g.transpose();
    }
    let nf = n as f64;
    meat /= nf;
    let bread = eq.jacobian(b) / nf;
    let inv = crate::model_core::solve_checked_matrix(&bread).ok_or(Error::SingularBread)?;
    let covariance = symmetrize(&(&inv * &meat * inv.transpose())) / nf;
    Ok(SandwichEstimate {
        bread,
        meat,
        covariance,
        n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefiniteCheck {
    pub positive_definite: bool,
    pub min_eigenvalue: f64,
}

/// Default tolerance `1e-9·(1 + ‖m‖_F)`.
pub fn default_pd_tolerance(m: &DMatrix<f64>) -> f64 {
    1e-9 * (1.0 + m.norm())
}

/// Smallest eigenvalue of `(m + mᵀ)/2` and whether it exceeds `tol`.
pub fn check_positive_definite(m: &DMatrix<f64>, tol: f64) -> Result<DefiniteCheck> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            found: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(DefiniteCheck {
        positive_definite: min_eigenvalue > tol,
        min_eigenvalue,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub beta: Coefficients,
    pub n_mc: usize,
    /// Mean of `−∂S̃ᵢ/∂βᵀ` over the simulated records.
    #[serde(with = "json::matrix")]
    pub empirical_lhs: DMatrix<f64>,
    /// Mean of `S̃ᵢS̃ᵢᵀ`.
    #[serde(with = "json::matrix")]
    pub empirical_rhs: DMatrix<f64>,
    #[serde(with = "json::matrix")]
    pub gap: DMatrix<f64>,
    /// Entrywise Monte Carlo standard error of `gap`.
    #[serde(with = "json::matrix")]
    pub gap_standard_error: DMatrix<f64>,
    /// Exact expectation of the gap by enumeration of the finite support.
    #[serde(with = "json::matrix")]
    pub enumerated_gap: DMatrix<f64>,
    /// `(1−p)φ(1−φ)λ(1−λ)E[XXᵀ]`, present when the scenario has null slopes
    /// and a match probability that depends on neither `x` nor `y*`.
    #[serde(with = "json::opt_matrix")]
    pub closed_form_gap: Option<DMatrix<f64>>,
    pub min_eigenvalue: f64,
    pub positive_definite: bool,
}

/// Exact `(E[−∂S̃/∂βᵀ], E[S̃S̃ᵀ])` at `beta` for data generated by `config`
/// with oracle match probabilities.
pub fn enumerated_identity_sides(
    config: &ScenarioConfig,
    beta: &Coefficients,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    config.validate()?;
    let table = oracle_table(config);
    let p = config.dim();
    if beta.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: beta.dim(),
        });
    }
    let rp = config.review_probability;
    let mut lhs = DMatrix::zeros(p, p);
    let mut rhs = DMatrix::zeros(p, p);
    for (k, level) in config.levels.iter().enumerate() {
        let x = level.x.to_vector();
        let xx = &x * x.transpose();
        let t = level.x.dot(beta.as_vector());
        let mu = logistic(t);
        let v = logistic_variance(t);
        let lambda = config.match_rate(k);
        for d in [false, true] {
            let pd = if d { lambda } else { 1.0 - lambda };
            let rate = if d { config.true_mean(k) } else { config.mismatch_rate(k) };
            for y in [false, true] {
                let py = if y { rate } else { 1.0 - rate };
                let prob = level.weight * pd * py;
                if prob == 0.0 {
                    continue;
                }
                let cell = table.p_hat(&level.x, y)?;
                let resid = f64::from(u8::from(y)) - mu;
                for (r_prob, w) in [(rp, f64::from(u8::from(d))), (1.0 - rp, cell)] {
                    let mass = prob * r_prob;
                    lhs += &xx * (mass * w * v);
                    rhs += &xx * (mass * w * w * resid * resid);
                }
            }
        }
    }
    Ok((lhs, rhs))
}

/// The two-term difference of the score identity at the scenario's true
/// coefficients.
pub fn two_term_gap(config: &ScenarioConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let p = config.dim();
    let rp = config.review_probability;
    let mut gap = DMatrix::zeros(p, p);
    for (k, level) in config.levels.iter().enumerate() {
        let x = level.x.to_vector();
        let xx = &x * x.transpose();
        let mu = config.true_mean(k);
        let pd = config.match_rate(k);
        let py1 = config.observed_mean(k);
        let mut second = 0.0;
        for (y, py) in [(false, 1.0 - py1), (true, py1)] {
            if py == 0.0 {
                continue;
            }
            let pc = crate::linkage_sim::true_match_prob(config, &level.x, y)?;
            let resid = f64::from(u8::from(y)) - mu;
            second += py * pc * pc * resid * resid;
        }
        gap += &xx * (level.weight * (1.0 - rp) * (pd * mu * (1.0 - mu) - second));
    }
    Ok(gap)
}

/// `(1−p)φ(1−φ)λ(1−λ)E[XXᵀ]`; errors unless the scenario has null slopes,
/// one match rate `λ ∈ (0,1)` that does not depend on `y*`, `P(Y*=1) = φ`,
/// and a positive definite `E[XXᵀ]`.
pub fn closed_form_gap(config: &ScenarioConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let bad = |m: &str| Err(Error::InvalidConfig(format!("closed-form gap: {m}")));
    let beta = config.beta_true.as_slice();
    if beta[1..].iter().any(|b| *b != 0.0) {
        return bad("slopes must all be zero");
    }
    let phi = logistic(beta[0]);
    let lambda = config.match_rate(0);
    if !(lambda > 0.0 && lambda < 1.0) {
        return bad("match rate must lie strictly inside (0, 1)");
    }
    let p = config.dim();
    let mut exx = DMatrix::zeros(p, p);
    for (k, level) in config.levels.iter().enumerate() {
        if (config.match_rate(k) - lambda).abs() > 1e-12 {
            return bad("match rate must not depend on x");
        }
        for y in [false, true] {
            let pc = crate::linkage_sim::true_match_prob(config, &level.x, y)?;
            if (pc - lambda).abs() > 1e-12 {
                return bad("match probability must not depend on y*");
            }
        }
        if (config.observed_mean(k) - phi).abs() > 1e-12 {
            return bad("P(Y*=1) must equal the model mean");
        }
        let x = level.x.to_vector();
        exx += &x * x.transpose() * level.weight;
    }
    if !check_positive_definite(&exx, default_pd_tolerance(&exx))?.positive_definite {
        return bad("E[XXᵀ] is not positive definite");
    }
    Ok(exx * ((1.0 - config.review_probability) * phi * (1.0 - phi) * lambda * (1.0 - lambda)))
}

/// Simulate `n_mc` links from `config` and measure both sides of the score
/// identity for `S̃ᵢ = xᵢHᵢ(beta)` with oracle match probabilities.
pub fn score_identity_audit(config: &ScenarioConfig, beta: &Coefficients, n_mc: usize) -> Result<GapReport> {
    if n_mc < 2 {
        return Err(Error::InvalidConfig("n_mc must be at least 2".into()));
    }
    let mut cfg = config.clone();
    cfg.n = n_mc;
    let ds = analysis_view(&generate(&cfg)?);
    let table = oracle_table(&cfg);
    let p = cfg.dim();
    if beta.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            found: beta.dim(),
        });
    }

    // Per-record scalars: the matrices are these times xxᵀ.
    let mut lhs = DMatrix::zeros(p, p);
    let mut rhs = DMatrix::zeros(p, p);
    let mut sum_gap = DMatrix::<f64>::zeros(p, p);
    let mut sum_gap_sq = DMatrix::<f64>::zeros(p, p);
    for r in ds.records() {
        let w = review_weight(r, &table)?;
        let t = r.x.dot(beta.as_vector());
        let h = w * (r.y_star_f64() - logistic(t));
        let a = w * logistic_variance(t);
        let b = h * h;
        let x = r.x.as_slice();
        for i in 0..p {
            for j in 0..p {
                let xx = x[i] * x[j];
                lhs[(i, j)] += a * xx;
                rhs[(i, j)] += b * xx;
                let g = (a - b) * xx;
                sum_gap[(i, j)] += g;
                sum_gap_sq[(i, j)] += g * g;
            }
        }
    }
    let nf = n_mc as f64;
    let empirical_lhs = symmetrize(&(lhs / nf));
    let empirical_rhs = symmetrize(&(rhs / nf));
    let gap = &empirical_lhs - &empirical_rhs;
    let mean = &sum_gap / nf;
    let gap_standard_error = DMatrix::from_fn(p, p, |i, j| {
        let var = (sum_gap_sq[(i, j)] / nf - mean[(i, j)].powi(2)) * nf / (nf - 1.0);
        (var.max(0.0) / nf).sqrt()
    });
    let (e_lhs, e_rhs) = enumerated_identity_sides(&cfg, beta)?;
    let enumerated_gap = symmetrize(&(e_lhs - e_rhs));
    let closed_form_gap = closed_form_gap(&cfg).ok();
    let check = check_positive_definite(&gap, default_pd_tolerance(&gap))?;
    Ok(GapReport {
        beta: beta.clone(),
        n_mc,
        empirical_lhs,
        empirical_rhs,
        gap,
        gap_standard_error,
        enumerated_gap,
        closed_form_gap,
        min_eigenvalue: check.min_eigenvalue,
        positive_definite: check.positive_definite,
    })
}

/// Per-level Monte Carlo mean against its expected value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellCheck {
    pub level: Covariates,
    pub count: usize,
    pub mean: f64,
    pub standard_error: f64,
    pub expected: f64,
}

impl CellCheck {
    /// `|mean − expected| ≤ k·SE`.
    pub fn within(&self, k: f64) -> bool {
        (self.mean - self.expected).abs() <= k * self.standard_error
    }
}

fn per_level<F>(ds: &LinkedDataset, mut value: F, expected: impl Fn(&Covariates) -> f64) -> Result<Vec<CellCheck>>
where
    F: FnMut(&crate::linkage_sim::LinkedRecord) -> Result<f64>,
{
    let mut out = Vec::new();
    for level in ds.levels() {
        let values = ds
            .records()
            .iter()
            .filter(|r| r.x == level)
            .map(&mut value)
            .collect::<Result<Vec<f64>>>()?;
        let (mean, standard_error) = mean_and_se(&values);
        out.push(CellCheck {
            expected: expected(&level),
            level,
            count: values.len(),
            mean,
            standard_error,
        });
    }
    Ok(out)
}

/// Within-level means of `Hᵢ(beta)`; expected value 0 at the true
/// coefficients when `table` holds the true match probabilities.
pub fn h_cell_means(ds: &LinkedDataset, table: &MatchProbTable, beta: &Coefficients) -> Result<Vec<CellCheck>> {
    per_level(ds, |r| h_value(r, table, beta).map(|h| h.value()), |_| 0.0)
}

/// Within-level means of `D(Y*−μ)²` on ground-truth data, against
/// `P(D=1|X) μ(1−μ)`.
pub fn matched_residual_check(ds: &LinkedDataset, config: &ScenarioConfig) -> Result<Vec<CellCheck>> {
    let beta = config.beta_true.as_vector().clone();
    per_level(
        ds,
        |r| {
            let d = r
                .d
                .ok_or_else(|| Error::MissingGroundTruth("match status needed on every record".into()))?;
            let resid = r.y_star_f64() - logistic(r.x.dot(&beta));
            Ok(f64::from(u8::from(d)) * resid * resid)
        },
        |x| {
            let k = config.level_index(x).expect("level from generated data");
            let mu = config.true_mean(k);
            config.match_rate(k) * mu * (1.0 - mu)
        },
    )
}

/// `E[XXᵀ]` over a scenario's covariate design.
pub fn design_second_moment(config: &ScenarioConfig) -> DMatrix<f64> {
    let p = config.dim();
    config.levels.iter().fold(DMatrix::zeros(p, p), |acc, l| {
        let x: DVector<f64> = l.x.to_vector();
        acc + &x * x.transpose() * l.weight
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkage_sim::tests::two_level_config;
    use crate::linkage_sim::{CovariateLevel, MatchModel, MismatchModel};
    use crate::model_core::{WeightedLogisticEquation, WeightedRow};

    #[test]
    fn pd_check_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let c = check_positive_definite(&id, 1e-9).unwrap();
        assert!(c.positive_definite);
        assert!((c.min_eigenvalue - 1.0).abs() < 1e-12);
        let z = DMatrix::<f64>::zeros(2, 2);
        assert!(!check_positive_definite(&z, default_pd_tolerance(&z)).unwrap().positive_definite);
        let g = DMatrix::<f64>::identity(2, 2) * 0.02;
        let c = check_positive_definite(&g, default_pd_tolerance(&g)).unwrap();
        assert!(c.positive_definite && (c.min_eigenvalue - 0.02).abs() < 1e-15);
        let mut bad = id.clone();
        bad[(0, 1)] = f64::NAN;
        assert!(check_positive_definite(&bad, 1e-9).is_err());
    }

    #[test]
    fn closed_form_example_value() {
        let cfg = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        let g = closed_form_gap(&cfg).unwrap();
        let expected = DMatrix::<f64>::identity(2, 2) * 0.02;
        assert!((g - expected).amax() < 1e-15);

        // Every one of the required conditions is checked.
        assert!(closed_form_gap(&two_level_config(0.8, 0.5, &[0.0, 0.3], 10)).is_err());
        assert!(closed_form_gap(&two_level_config(1.0, 0.5, &[0.0, 0.0], 10)).is_err());
        let mut c = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        c.mismatch_model = MismatchModel::PerLevel(vec![0.3, 0.3]);
        assert!(closed_form_gap(&c).is_err());
        let mut c = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        c.match_model = MatchModel::CellTable(vec![0.8, 0.7]);
        assert!(closed_form_gap(&c).is_err());
        let mut c = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        c.levels = vec![CovariateLevel {
            x: Covariates::new(vec![1.0, 2.0]).unwrap(),
            weight: 1.0,
        }];
        assert!(closed_form_gap(&c).is_err());
    }

    #[test]
    fn enumeration_agrees_with_two_term_form() {
        let mut cfg = two_level_config(0.7, 0.4, &[-0.5, 1.0], 10);
        cfg.levels = vec![
            CovariateLevel { x: Covariates::new(vec![1.0, 0.0]).unwrap(), weight: 0.3 },
            CovariateLevel { x: Covariates::new(vec![1.0, 1.0]).unwrap(), weight: 0.5 },
            CovariateLevel { x: Covariates::new(vec![1.0, 2.5]).unwrap(), weight: 0.2 },
        ];
        cfg.match_model = MatchModel::CellTable(vec![0.6, 0.9, 0.75]);
        let (lhs, rhs) = enumerated_identity_sides(&cfg, &cfg.beta_true).unwrap();
        let two = two_term_gap(&cfg).unwrap();
        assert!((lhs - rhs - two).amax() < 1e-14);
    }

    #[test]
    fn full_review_has_no_gap_exactly() {
        let cfg = two_level_config(0.6, 1.0, &[-0.5, 1.0], 10);
        let (lhs, rhs) = enumerated_identity_sides(&cfg, &cfg.beta_true).unwrap();
        assert!((lhs - rhs).amax() < 1e-15);
        assert!(two_term_gap(&cfg).unwrap().amax() < 1e-15);
    }

    #[test]
    fn sandwich_intercept_only_and_singular() {
        let rows: Vec<WeightedRow> = [true, false, false, true, true]
            .iter()
            .map(|&y| WeightedRow {
                x: Covariates::new(vec![1.0]).unwrap(),
                response: f64::from(u8::from(y)),
                weight: 1.0,
            })
            .collect();
        let eq = WeightedLogisticEquation::new(rows).unwrap();
        let beta = Coefficients::new(vec![(0.6_f64 / 0.4).ln()]).unwrap();
        let s = sandwich(&eq, &beta).unwrap();
        assert!((s.covariance[(0, 0)] - 1.0 / (5.0 * 0.24)).abs() < 1e-12);

        let zero_rows = vec![WeightedRow {
            x: Covariates::new(vec![1.0, 2.0]).unwrap(),
            response: 1.0,
            weight: 0.0,
        }];
        let eq = WeightedLogisticEquation::new(zero_rows).unwrap();
        assert!(matches!(
            sandwich(&eq, &Coefficients::zeros(2)),
            Err(Error::SingularBread)
        ));
    }

    #[test]
    fn audit_small_run_is_consistent_with_enumeration() {
        let cfg = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        let report = score_identity_audit(&cfg, &cfg.beta_true, 200_000).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let diff = (report.gap[(i, j)] - report.enumerated_gap[(i, j)]).abs();
                assert!(diff <= 4.0 * report.gap_standard_error[(i, j)], "({i},{j}) diff {diff}");
            }
        }
        assert!(report.closed_form_gap.is_some());
    }
}
