//! Logistic mean function, the classical score, and the Newton–Raphson
//! root finder shared by every estimator.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regression coefficients, intercept first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Coefficients(DVector<f64>);

impl Coefficients {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("coefficient vector is empty".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite coefficient {v}")));
        }
        Ok(Self(DVector::from_vec(values)))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim.max(1)))
    }

    pub fn from_vector(v: DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.iter().copied().collect()
    }
}

impl TryFrom<Vec<f64>> for Coefficients {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Coefficients> for Vec<f64> {
    fn from(c: Coefficients) -> Self {
        c.to_vec()
    }
}

impl std::ops::Neg for &Coefficients {
    type Output = Coefficients;

    fn neg(self) -> Coefficients {
        Coefficients(-&self.0)
    }
}

/// One covariate vector. The first entry is the intercept column and is
/// always exactly 1.
///
/// Equality, hashing and ordering are bit-exact on the entries, so a
/// `Covariates` value doubles as the key of a discrete covariate cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Covariates(Vec<f64>);

impl Covariates {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        match values.first() {
            None => return Err(Error::InvalidInput("covariate vector is empty".into())),
            Some(&first) if first != 1.0 => {
                return Err(Error::InvalidInput(format!(
                    "first covariate must be the intercept 1, found {first}"
                )))
            }
            _ => {}
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite covariate {v}")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    /// `xᵀβ` without dimension checks.
    #[inline]
    pub(crate) fn dot(&self, beta: &DVector<f64>) -> f64 {
        self.0.iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for Covariates {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Covariates> for Vec<f64> {
    fn from(c: Covariates) -> Self {
        c.0
    }
}

impl PartialEq for Covariates {
    fn eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for Covariates {}

impl Hash for Covariates {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.len().hash(state);
        for v in &self.0 {
            v.to_bits().hash(state);
        }
    }
}

impl PartialOrd for Covariates {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Covariates {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

impl fmt::Display for Covariates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

/// Logistic function `eᵗ/(1+eᵗ)`, branching on the sign of `t` so that no
/// intermediate overflows.
#[inline]
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `μ(1−μ)` at linear predictor `t`, without cancellation in the tails.
#[inline]
pub fn logistic_variance(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

fn check_dims(beta: &Coefficients, x: &Covariates) -> Result<()> {
    if beta.dim() != x.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: x.dim(),
        });
    }
    Ok(())
}

/// Logistic mean `μ(β; x) = P(Y=1 | X=x)`.
pub fn mu(beta: &Coefficients, x: &Covariates) -> Result<f64> {
    check_dims(beta, x)?;
    Ok(logistic(x.dot(beta.as_vector())))
}

/// Classical logistic score `Σ xᵢ (yᵢ − μᵢ(β))`.
pub fn classical_score(rows: &[(Covariates, bool)], beta: &Coefficients) -> Result<DVector<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("classical score needs at least one row".into()));
    }
    let mut score = DVector::zeros(beta.dim());
    for (x, y) in rows {
        check_dims(beta, x)?;
        let resid = f64::from(u8::from(*y)) - logistic(x.dot(beta.as_vector()));
        for (s, xv) in score.iter_mut().zip(x.as_slice()) {
            *s += xv * resid;
        }
    }
    Ok(score)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub max_step_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-10,
            max_step_halvings: 30,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be positive".into()));
        }
        if !(self.step_tolerance > 0.0 && self.step_tolerance.is_finite()) {
            return Err(Error::InvalidConfig("step_tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a root search.
///
/// `final_score_norm` is the sup-norm of the Newton-scaled score
/// `J(β)⁻¹ G(β)` at the returned `β`, i.e. the size of the step the solver
/// would take next. It is measured in coefficient units so that it can be
/// compared with `SolverOptions::step_tolerance` regardless of sample size.
#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub beta: Coefficients,
    pub converged: bool,
    pub iterations: usize,
    pub final_score_norm: f64,
    pub covariance: Option<DMatrix<f64>>,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Solve `J δ = rhs`, rejecting Jacobians whose LU pivot ratio falls below
/// `1e-14`.
pub(crate) fn solve_checked(
    jac: DMatrix<f64>,
    rhs: &DVector<f64>,
    iteration: usize,
) -> Result<DVector<f64>> {
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { iteration });
    }
    let lu = jac.lu();
    let u = lu.u();
    let (min, max) = u
        .diagonal()
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
    if max == 0.0 || min / max < 1e-14 {
        return Err(Error::SingularJacobian { iteration });
    }
    lu.solve(rhs).ok_or(Error::SingularJacobian { iteration })
}

/// Inverse of `m`, or `None` when its LU pivot ratio falls below `1e-14`.
pub(crate) fn solve_checked_matrix(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let cols: Vec<DVector<f64>> = (0..n)
        .map(|j| {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            solve_checked(m.clone(), &e, 0).ok()
        })
        .collect::<Option<_>>()?;
    Some(DMatrix::from_columns(&cols))
}

/// Newton–Raphson with step halving.
///
/// Stops once the sup-norm of the Newton step is at most
/// `opts.step_tolerance` and the next step would be as small. Step halving
/// kicks in whenever a full step fails to decrease the sup-norm of the
/// score. Reaching `max_iterations` is not an error: the best iterate seen
/// is returned with `converged = false`.
pub fn newton_solve<S, J>(
    score_fn: S,
    jacobian_fn: J,
    init: &Coefficients,
    opts: &SolverOptions,
) -> Result<FitResult>
where
    S: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    opts.validate()?;
    let dim = init.dim();
    let mut beta = init.as_vector().clone();
    let mut score = score_fn(&beta);
    if score.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: score.len(),
        });
    }
    if !all_finite(&score) {
        return Err(Error::Divergence { iteration: 0 });
    }
    let mut best = (inf_norm(&score), beta.clone());

    for iteration in 1..=opts.max_iterations {
        let jac = jacobian_fn(&beta);
        if jac.nrows() != dim || jac.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: jac.nrows(),
            });
        }
        let mut step = solve_checked(jac, &(-&score), iteration)?;
        let score_norm = inf_norm(&score);
        let mut candidate = &beta + &step;
        let mut cand_score = score_fn(&candidate);
        if inf_norm(&step) > opts.step_tolerance {
            let mut halvings = 0;
            while !(all_finite(&cand_score) && inf_norm(&cand_score) < score_norm)
                && halvings < opts.max_step_halvings
            {
                step *= 0.5;
                candidate = &beta + &step;
                cand_score = score_fn(&candidate);
                halvings += 1;
            }
        }
        if !all_finite(&candidate) || !all_finite(&cand_score) {
            return Err(Error::Divergence { iteration });
        }
        beta = candidate;
        score = cand_score;
        let norm = inf_norm(&score);
        if norm <= best.0 {
            best = (norm, beta.clone());
        }

        if inf_norm(&step) <= opts.step_tolerance {
            let scaled = scaled_score_norm(&jacobian_fn, &beta, &score, iteration);
            if scaled <= opts.step_tolerance {
                return Ok(FitResult {
                    beta: Coefficients::from_vector(beta)?,
                    converged: true,
                    iterations: iteration,
                    final_score_norm: scaled,
                    covariance: None,
                });
            }
        }
    }

    let beta = best.1;
    let score = score_fn(&beta);
    let scaled = scaled_score_norm(&jacobian_fn, &beta, &score, opts.max_iterations);
    Ok(FitResult {
        beta: Coefficients::from_vector(beta)?,
        converged: false,
        iterations: opts.max_iterations,
        final_score_norm: scaled,
        covariance: None,
    })
}

fn scaled_score_norm<J>(jacobian_fn: &J, beta: &DVector<f64>, score: &DVector<f64>, iteration: usize) -> f64
where
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    solve_checked(jacobian_fn(beta), score, iteration)
        .map(|d| inf_norm(&d))
        .unwrap_or(f64::INFINITY)
}

/// An estimating function `G(β) = Σᵢ Gᵢ(β)` with per-record contributions
/// and analytic derivatives.
pub trait EstimatingEquation {
    fn dim(&self) -> usize;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn score(&self, beta: &DVector<f64>) -> DVector<f64>;

    /// `∂G/∂βᵀ`.
    fn jacobian(&self, beta: &DVector<f64>) -> DMatrix<f64>;

    /// `(Gᵢ(β), ∂Gᵢ/∂βᵀ)` for record `i`.
    fn contribution(&self, i: usize, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);

    fn solve(&self, init: &Coefficients, opts: &SolverOptions) -> Result<FitResult> {
        if init.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: init.dim(),
            });
        }
        newton_solve(|b| self.score(b), |b| self.jacobian(b), init, opts)
    }
}

/// One row of a [`WeightedLogisticEquation`].
#[derive(Clone, Debug)]
pub struct WeightedRow {
    pub x: Covariates,
    pub response: f64,
    /// Fixed multiplier; does not vary with `β`.
    pub weight: f64,
}

/// `G(β) = Σᵢ cᵢ xᵢ (yᵢ − μᵢ(β))` with fixed multipliers `cᵢ`.
///
/// Every estimator in this crate is of this form: the classical score has
/// `cᵢ = 1`, the clerical-review equation has `cᵢ = rᵢdᵢ + (1−rᵢ)p̂ᵢ`, and
/// the optimal equation rescales those multipliers by a per-level factor
/// frozen at a preliminary estimate.
#[derive(Clone, Debug)]
pub struct WeightedLogisticEquation {
    dim: usize,
    rows: Vec<WeightedRow>,
}

impl WeightedLogisticEquation {
    pub fn new(rows: Vec<WeightedRow>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.x.dim())
            .ok_or_else(|| Error::InvalidInput("estimating equation has no rows".into()))?;
        for r in &rows {
            if r.x.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: r.x.dim(),
                });
            }
            if !r.response.is_finite() || !r.weight.is_finite() {
                return Err(Error::InvalidInput("non-finite response or weight".into()));
            }
        }
        Ok(Self { dim, rows })
    }

    pub fn rows(&self) -> &[WeightedRow] {
        &self.rows
    }
}

impl EstimatingEquation for WeightedLogisticEquation {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn score(&self, beta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for row in &self.rows {
            if row.weight == 0.0 {
                continue;
            }
            let c = row.weight * (row.response - logistic(row.x.dot(beta)));
            for (o, xv) in out.iter_mut().zip(row.x.as_slice()) {
                *o += c * xv;
            }
        }
        out
    }

    fn jacobian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let p = self.dim;
        let mut out = DMatrix::zeros(p, p);
        for row in &self.rows {
            if row.weight == 0.0 {
                continue;
            }
            let c = -row.weight * logistic_variance(row.x.dot(beta));
            let x = row.x.as_slice();
            for a in 0..p {
                for b in 0..=a {
                    out[(a, b)] += c * x[a] * x[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                out[(b, a)] = out[(a, b)];
            }
        }
        out
    }

    fn contribution(&self, i: usize, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let row = &self.rows[i];
        let x = row.x.to_vector();
        let t = row.x.dot(beta);
        let g = &x * (row.weight * (row.response - logistic(t)));
        let d = (&x * x.transpose()) * (-row.weight * logistic_variance(t));
        (g, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cov(v: &[f64]) -> Covariates {
        Covariates::new(v.to_vec()).unwrap()
    }

    fn coef(v: &[f64]) -> Coefficients {
        Coefficients::new(v.to_vec()).unwrap()
    }

    #[test]
    fn mu_examples() {
        assert_eq!(mu(&coef(&[0.0, 0.0]), &cov(&[1.0, 3.2])).unwrap(), 0.5);
        let m = mu(&coef(&[3.0_f64.ln(), 0.0]), &cov(&[1.0, 7.3])).unwrap();
        assert!((m - 0.75).abs() < 1e-15);
        // e²/(1+e²) to 20 digits: 0.88079707797788244406
        let m = mu(&coef(&[1.0, 2.0]), &cov(&[1.0, 0.5])).unwrap();
        assert!((m - 0.880_797_077_977_882_4).abs() < 1e-15);
    }

    #[test]
    fn mu_dimension_mismatch() {
        let err = mu(&coef(&[0.0]), &cov(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn logistic_extremes_do_not_overflow() {
        for t in [-700.0, -300.0, 300.0, 700.0] {
            let v = logistic(t);
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
            assert!(logistic_variance(t) >= 0.0);
        }
        assert!(logistic(-700.0) > 0.0);
    }

    #[test]
    fn covariates_require_intercept() {
        assert!(Covariates::new(vec![0.5, 1.0]).is_err());
        assert!(Covariates::new(vec![]).is_err());
        assert!(Covariates::new(vec![1.0, f64::NAN]).is_err());
        assert!(Coefficients::new(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn classical_score_examples() {
        let rows = vec![(cov(&[1.0, 2.0]), true), (cov(&[1.0, 2.0]), false)];
        let s = classical_score(&rows, &coef(&[0.0, 0.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 0.0]);

        let s = classical_score(&[(cov(&[1.0]), true)], &coef(&[0.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.5]);

        let rows = vec![(cov(&[1.0, 1.0]), true), (cov(&[1.0, -1.0]), false)];
        let s = classical_score(&rows, &coef(&[0.0, 0.0])).unwrap();
        assert_eq!(s.as_slice(), &[0.0, 1.0]);

        assert!(classical_score(&[], &coef(&[0.0])).is_err());
    }

    #[test]
    fn newton_linear_root_in_one_step() {
        let init = coef(&[3.0, -2.0, 7.5]);
        let fit = newton_solve(
            |b| -b.clone(),
            |b| -DMatrix::identity(b.len(), b.len()),
            &init,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        assert_eq!(fit.beta.as_slice(), &[0.0, 0.0, 0.0]);
        // The first step lands on the root; the second confirms it.
        assert!(fit.iterations <= 2);
    }

    #[test]
    fn newton_reports_singular_jacobian() {
        let err = newton_solve(
            |b| DVector::from_element(b.len(), 1.0),
            |b| DMatrix::zeros(b.len(), b.len()),
            &coef(&[0.0, 0.0]),
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { iteration: 1 }));
    }

    #[test]
    fn newton_reports_divergence() {
        let err = newton_solve(
            |_| DVector::from_element(1, f64::NAN),
            |_| DMatrix::identity(1, 1),
            &coef(&[0.0]),
            &SolverOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration: 0 }));
    }

    #[test]
    fn complete_separation_is_reported_not_panicked() {
        let data = [(-2.0, false), (-1.0, false), (-0.5, false), (0.5, true), (1.0, true), (3.0, true)];
        let eq = WeightedLogisticEquation::new(
            data.iter()
                .map(|&(x, y)| WeightedRow {
                    x: cov(&[1.0, x]),
                    response: f64::from(u8::from(y)),
                    weight: 1.0,
                })
                .collect(),
        )
        .unwrap();
        match eq.solve(&Coefficients::zeros(2), &SolverOptions::default()) {
            Ok(fit) => assert!(!fit.converged),
            Err(e) => assert!(matches!(e, Error::SingularJacobian { .. } | Error::Divergence { .. })),
        }
    }

    #[test]
    fn weighted_equation_matches_classical_score() {
        let rows = vec![
            (cov(&[1.0, 0.3]), true),
            (cov(&[1.0, -1.2]), false),
            (cov(&[1.0, 2.0]), true),
        ];
        let eq = WeightedLogisticEquation::new(
            rows.iter()
                .map(|(x, y)| WeightedRow {
                    x: x.clone(),
                    response: f64::from(u8::from(*y)),
                    weight: 1.0,
                })
                .collect(),
        )
        .unwrap();
        let beta = coef(&[0.2, -0.4]);
        let a = eq.score(beta.as_vector());
        let b = classical_score(&rows, &beta).unwrap();
        assert!((a - b).amax() < 1e-15);
    }

    proptest! {
        #[test]
        fn mu_is_a_probability_and_antisymmetric(
            b in proptest::collection::vec(-3.0f64..3.0, 3),
            x in proptest::collection::vec(-4.0f64..4.0, 2),
        ) {
            let beta = coef(&b);
            let xs = cov(&[1.0, x[0], x[1]]);
            let m = mu(&beta, &xs).unwrap();
            prop_assert!(m > 0.0 && m < 1.0);
            let m_neg = mu(&-&beta, &xs).unwrap();
            prop_assert!((m + m_neg - 1.0).abs() < 1e-12);
        }

        #[test]
        fn mu_gradient_matches_central_differences(
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            x in proptest::collection::vec(-3.0f64..3.0, 2),
        ) {
            let xs = cov(&[1.0, x[0], x[1]]);
            let m = mu(&coef(&b), &xs).unwrap();
            let h = 1e-6;
            for k in 0..3 {
                let mut up = b.clone();
                let mut dn = b.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (mu(&coef(&up), &xs).unwrap() - mu(&coef(&dn), &xs).unwrap()) / (2.0 * h);
                let analytic = m * (1.0 - m) * xs.as_slice()[k];
                let scale = analytic.abs().max(1e-3);
                prop_assert!((fd - analytic).abs() / scale <= 1e-6, "k={} fd={} an={}", k, fd, analytic);
            }
        }
    }
}
