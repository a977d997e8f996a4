//! Synthetic linked files with false-positive links and a Bernoulli
//! clerical-review sample.
//!
//! Each record is one link. Its covariates `x` are drawn from a finite
//! support, the true response from the logistic model, the match status
//! from the configured match model, and the observed response `y*` equals
//! the true response for matched links. For false-positive links `y*` is an
//! independent Bernoulli draw with rate `q(x)`, so that the true response
//! carries no information about `y*` once `x` is known and the link is a
//! mismatch. Review indicators are independent Bernoulli(`p`) draws.
//!
//! Randomness comes from ChaCha8 with the scenario seed as key and the
//! record index as stream id. Record `i` always consumes the same five
//! uniforms from its own stream, so output is bit-identical regardless of
//! thread count or scheduling.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_core::{logistic, Coefficients, Covariates};

/// One point of the discrete covariate support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovariateLevel {
    pub x: Covariates,
    pub weight: f64,
}

/// Probability that a link is a true match, given the covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MatchModel {
    Constant(f64),
    /// One rate per covariate level, aligned with `ScenarioConfig::levels`.
    CellTable(Vec<f64>),
}

/// Rate `q(x) = P(Y*=1 | X=x, D=0)` of the response carried by a
/// false-positive link.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MismatchModel {
    /// `q(x) = Σ_levels w·μ(β_true, x)`: the link picked up the response of a
    /// random member of the population.
    PopulationMarginal,
    /// One rate per covariate level.
    PerLevel(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n: usize,
    pub beta_true: Coefficients,
    pub levels: Vec<CovariateLevel>,
    pub match_model: MatchModel,
    pub mismatch_model: MismatchModel,
    pub review_probability: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.levels.is_empty() {
            return bad("covariate_levels is empty".into());
        }
        let p = self.beta_true.dim();
        let mut seen = BTreeSet::new();
        let mut total = 0.0;
        for level in &self.levels {
            if level.x.dim() != p {
                return bad(format!(
                    "covariate level {} has dimension {}, beta_true has {p}",
                    level.x,
                    level.x.dim()
                ));
            }
            if !(level.weight >= 0.0 && level.weight.is_finite()) {
                return bad(format!("level {} has invalid weight {}", level.x, level.weight));
            }
            if !seen.insert(level.x.clone()) {
                return bad(format!("duplicate covariate level {}", level.x));
            }
            total += level.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("covariate level weights sum to {total}, not 1"));
        }
        let in_unit_open = |v: f64| v > 0.0 && v <= 1.0;
        match &self.match_model {
            MatchModel::Constant(l) if !in_unit_open(*l) => {
                return bad(format!("match rate {l} outside (0, 1]"));
            }
            MatchModel::CellTable(t) => {
                if t.len() != self.levels.len() {
                    return bad(format!(
                        "match table has {} entries for {} levels",
                        t.len(),
                        self.levels.len()
                    ));
                }
                if let Some(l) = t.iter().find(|l| !in_unit_open(**l)) {
                    return bad(format!("match rate {l} outside (0, 1]"));
                }
            }
            _ => {}
        }
        if let MismatchModel::PerLevel(q) = &self.mismatch_model {
            if q.len() != self.levels.len() {
                return bad(format!(
                    "mismatch rates have {} entries for {} levels",
                    q.len(),
                    self.levels.len()
                ));
            }
            if let Some(v) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return bad(format!("mismatch rate {v} outside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.review_probability) {
            return bad(format!(
                "review_probability {} outside [0, 1]",
                self.review_probability
            ));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.beta_true.dim()
    }

    pub fn level_index(&self, x: &Covariates) -> Option<usize> {
        self.levels.iter().position(|l| &l.x == x)
    }

    fn level_or_err(&self, x: &Covariates) -> Result<usize> {
        self.level_index(x)
            .ok_or_else(|| Error::InvalidInput(format!("covariate {x} is not in the scenario support")))
    }

    /// `λ(x) = P(D=1 | X=x)` for level index `k`.
    pub fn match_rate(&self, k: usize) -> f64 {
        match &self.match_model {
            MatchModel::Constant(l) => *l,
            MatchModel::CellTable(t) => t[k],
        }
    }

    /// `μ(β_true, x)` for level index `k`.
    pub fn true_mean(&self, k: usize) -> f64 {
        logistic(self.levels[k].x.dot(self.beta_true.as_vector()))
    }

    /// `q(x)` for level index `k`.
    pub fn mismatch_rate(&self, k: usize) -> f64 {
        match &self.mismatch_model {
            MismatchModel::PopulationMarginal => self.marginal_mean(),
            MismatchModel::PerLevel(q) => q[k],
        }
    }

    /// `Σ_levels w·μ(β_true, x)`.
    pub fn marginal_mean(&self) -> f64 {
        (0..self.levels.len())
            .map(|k| self.levels[k].weight * self.true_mean(k))
            .sum()
    }

    /// `P(Y*=1 | X=x)` for level index `k`.
    pub fn observed_mean(&self, k: usize) -> f64 {
        let l = self.match_rate(k);
        l * self.true_mean(k) + (1.0 - l) * self.mismatch_rate(k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkedRecord {
    pub x: Covariates,
    pub y_star: bool,
    pub r: bool,
    pub d: Option<bool>,
    pub y_latent: Option<bool>,
}

impl LinkedRecord {
    pub fn y_star_f64(&self) -> f64 {
        f64::from(u8::from(self.y_star))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkedDataset {
    records: Vec<LinkedRecord>,
    config_echo: Option<ScenarioConfig>,
}

impl LinkedDataset {
    pub fn new(records: Vec<LinkedRecord>, config_echo: Option<ScenarioConfig>) -> Result<Self> {
        let dim = records
            .first()
            .map(|r| r.x.dim())
            .ok_or_else(|| Error::InvalidInput("dataset has no records".into()))?;
        for (i, r) in records.iter().enumerate() {
            if r.x.dim() != dim {
                return Err(Error::DataIntegrity(format!(
                    "record {i} has {} covariates, expected {dim}",
                    r.x.dim()
                )));
            }
            if let (Some(true), Some(y)) = (r.d, r.y_latent) {
                if y != r.y_star {
                    return Err(Error::DataIntegrity(format!(
                        "record {i} is a match but y_star differs from y_latent"
                    )));
                }
            }
        }
        Ok(Self {
            records,
            config_echo,
        })
    }

    pub fn records(&self) -> &[LinkedRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.records[0].x.dim()
    }

    pub fn config_echo(&self) -> Option<&ScenarioConfig> {
        self.config_echo.as_ref()
    }

    /// True when every record carries its match status and true response.
    pub fn has_ground_truth(&self) -> bool {
        self.records
            .iter()
            .all(|r| r.d.is_some() && r.y_latent.is_some())
    }

    /// Distinct covariate vectors, in sorted order.
    pub fn levels(&self) -> BTreeSet<Covariates> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    pub fn reviewed_count(&self) -> usize {
        self.records.iter().filter(|r| r.r).count()
    }
}

/// Draw a linked dataset from `config`.
pub fn generate(config: &ScenarioConfig) -> Result<LinkedDataset> {
    config.validate()?;
    let k = config.levels.len();
    let mut cumulative = Vec::with_capacity(k);
    let mut acc = 0.0;
    for level in &config.levels {
        acc += level.weight;
        cumulative.push(acc);
    }
    let means: Vec<f64> = (0..k).map(|i| config.true_mean(i)).collect();
    let lambdas: Vec<f64> = (0..k).map(|i| config.match_rate(i)).collect();
    let q: Vec<f64> = (0..k).map(|i| config.mismatch_rate(i)).collect();
    let p = config.review_probability;
    let seed = config.seed;

    let records: Vec<LinkedRecord> = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let u_x: f64 = rng.gen();
            let u_y: f64 = rng.gen();
            let u_d: f64 = rng.gen();
            let u_mis: f64 = rng.gen();
            let u_r: f64 = rng.gen();
            let level = cumulative.iter().position(|&c| u_x < c).unwrap_or(k - 1);
            let y_latent = u_y < means[level];
            let d = u_d < lambdas[level];
            let y_star = if d { y_latent } else { u_mis < q[level] };
            LinkedRecord {
                x: config.levels[level].x.clone(),
                y_star,
                r: u_r < p,
                d: Some(d),
                y_latent: Some(y_latent),
            }
        })
        .collect();
    LinkedDataset::new(records, Some(config.clone()))
}

/// What an analyst sees: true responses dropped everywhere, match status
/// dropped for links outside the clerical sample.
pub fn analysis_view(ds: &LinkedDataset) -> LinkedDataset {
    let records = ds
        .records
        .iter()
        .map(|r| LinkedRecord {
            x: r.x.clone(),
            y_star: r.y_star,
            r: r.r,
            d: if r.r { r.d } else { None },
            y_latent: None,
        })
        .collect();
    LinkedDataset {
        records,
        config_echo: ds.config_echo.clone(),
    }
}

/// Exact `P(D=1 | X=x, Y*=y*)` under the generating model, by Bayes' rule
/// over the matched and mismatched branches.
pub fn true_match_prob(config: &ScenarioConfig, x: &Covariates, y_star: bool) -> Result<f64> {
    let k = config.level_or_err(x)?;
    let lambda = config.match_rate(k);
    let bern = |rate: f64| if y_star { rate } else { 1.0 - rate };
    let matched = lambda * bern(config.true_mean(k));
    let mismatched = (1.0 - lambda) * bern(config.mismatch_rate(k));
    let denom = matched + mismatched;
    if denom <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "y*={} has probability zero at covariate {x}",
            u8::from(y_star)
        )));
    }
    Ok(matched / denom)
}
