//! Plug-in estimates from the clerical sample: the cell ratio estimate of
//! `P(D=1 | X, Y*)` and the per-level residual moment
//! `E[P(D=1|X,Y*)² (Y*−μ)² | X]`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkage_sim::{true_match_prob, LinkedDataset, ScenarioConfig};
use crate::model_core::{logistic, Coefficients, Covariates};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Cell,
    PooledOverY,
    Global,
    Oracle,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Cell => "cell",
            Provenance::PooledOverY => "pooled-over-y",
            Provenance::Global => "global",
            Provenance::Oracle => "oracle",
        })
    }
}

/// What to do with an `(x, y*)` cell that has no reviewed links.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FallbackPolicy {
    /// cell → pooled over `y*` within the level → global pooled.
    #[default]
    Hierarchical,
    Strict,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    pub p_hat: f64,
    pub n_matched: u64,
    pub n_unmatched: u64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchProbTable {
    cells: BTreeMap<(Covariates, bool), CellEstimate>,
    /// `P(D=1 | X=x)` per level.
    level_match: BTreeMap<Covariates, f64>,
}

impl MatchProbTable {
    pub fn cells(&self) -> impl Iterator<Item = (&Covariates, bool, &CellEstimate)> {
        self.cells.iter().map(|((x, y), c)| (x, *y, c))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, x: &Covariates, y_star: bool) -> Result<&CellEstimate> {
        // BTreeMap lookups need an owned key tuple.
        self.cells
            .get(&(x.clone(), y_star))
            .ok_or_else(|| Error::MissingCell {
                level: x.to_string(),
                y_star: u8::from(y_star),
            })
    }

    pub fn p_hat(&self, x: &Covariates, y_star: bool) -> Result<f64> {
        self.cell(x, y_star).map(|c| c.p_hat)
    }

    /// `P(D=1 | X=x)`: analytic for oracle tables, otherwise the cell
    /// estimates averaged over the empirical `y*` distribution of the level.
    pub fn match_given_x(&self, x: &Covariates) -> Result<f64> {
        self.level_match
            .get(x)
            .copied()
            .ok_or_else(|| Error::MissingLevel {
                level: x.to_string(),
            })
    }

    pub fn provenance_summary(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for c in self.cells.values() {
            *out.entry(c.provenance).or_insert(0) += 1;
        }
        out
    }

    /// Replace every estimate by a constant, keeping the cell keys.
    pub fn with_constant(&self, value: f64) -> Self {
        let cells = self
            .cells
            .iter()
            .map(|(k, c)| {
                (
                    k.clone(),
                    CellEstimate {
                        p_hat: value,
                        ..*c
                    },
                )
            })
            .collect();
        let level_match = self.level_match.keys().map(|k| (k.clone(), value)).collect();
        Self { cells, level_match }
    }
}

#[derive(Default, Clone, Copy)]
struct Counts {
    matched: u64,
    unmatched: u64,
}

impl Counts {
    fn total(&self) -> u64 {
        self.matched + self.unmatched
    }

    fn ratio(&self) -> f64 {
        self.matched as f64 / self.total() as f64
    }
}

/// Cell ratio estimator of `P(D=1 | X, Y*)` from the reviewed links.
pub fn estimate_match_prob(ds: &LinkedDataset, policy: FallbackPolicy) -> Result<MatchProbTable> {
    let mut reviewed: BTreeMap<(Covariates, bool), Counts> = BTreeMap::new();
    let mut all_rows: BTreeMap<(Covariates, bool), u64> = BTreeMap::new();
    for (i, r) in ds.records().iter().enumerate() {
        *all_rows.entry((r.x.clone(), r.y_star)).or_insert(0) += 1;
        if r.r {
            let d = r.d.ok_or_else(|| {
                Error::DataIntegrity(format!("record {i} is reviewed but has no match status"))
            })?;
            let c = reviewed.entry((r.x.clone(), r.y_star)).or_default();
            if d {
                c.matched += 1;
            } else {
                c.unmatched += 1;
            }
        }
    }
    let mut per_level: BTreeMap<Covariates, Counts> = BTreeMap::new();
    let mut global = Counts::default();
    for ((x, _), c) in &reviewed {
        let l = per_level.entry(x.clone()).or_default();
        l.matched += c.matched;
        l.unmatched += c.unmatched;
        global.matched += c.matched;
        global.unmatched += c.unmatched;
    }
    if global.total() == 0 {
        return Err(Error::NoReviewedRecords);
    }

    let mut cells = BTreeMap::new();
    for key in all_rows.keys() {
        let (counts, provenance) = match reviewed.get(key) {
            Some(c) if c.total() > 0 => (*c, Provenance::Cell),
            _ if policy == FallbackPolicy::Strict => {
                return Err(Error::EmptyCell {
                    level: key.0.to_string(),
                    y_star: u8::from(key.1),
                })
            }
            _ => match per_level.get(&key.0) {
                Some(c) if c.total() > 0 => (*c, Provenance::PooledOverY),
                _ => (global, Provenance::Global),
            },
        };
        cells.insert(
            key.clone(),
            CellEstimate {
                p_hat: counts.ratio(),
                n_matched: counts.matched,
                n_unmatched: counts.unmatched,
                provenance,
            },
        );
    }

    let mut level_totals: BTreeMap<Covariates, (f64, u64)> = BTreeMap::new();
    for (key, &count) in &all_rows {
        let e = level_totals.entry(key.0.clone()).or_insert((0.0, 0));
        e.0 += cells[key].p_hat * count as f64;
        e.1 += count;
    }
    let level_match = level_totals
        .into_iter()
        .map(|(x, (num, count))| (x, num / count as f64))
        .collect();

    Ok(MatchProbTable { cells, level_match })
}

/// The exact match probabilities implied by a simulation scenario. Cells
/// whose `y*` value is impossible under the scenario are left out.
pub fn oracle_table(config: &ScenarioConfig) -> MatchProbTable {
    let mut cells = BTreeMap::new();
    let mut level_match = BTreeMap::new();
    for (k, level) in config.levels.iter().enumerate() {
        for y in [false, true] {
            if let Ok(p_hat) = true_match_prob(config, &level.x, y) {
                cells.insert(
                    (level.x.clone(), y),
                    CellEstimate {
                        p_hat,
                        n_matched: 0,
                        n_unmatched: 0,
                        provenance: Provenance::Oracle,
                    },
                );
            }
        }
        level_match.insert(level.x.clone(), config.match_rate(k));
    }
    MatchProbTable { cells, level_match }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub m_hat: f64,
    pub count: u64,
}

/// Per-level estimate of `E[P(D=1|X,Y*)² (Y*−μ)² | X=x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMomentTable {
    levels: BTreeMap<Covariates, MomentEstimate>,
}

impl ResidualMomentTable {
    pub fn get(&self, x: &Covariates) -> Result<&MomentEstimate> {
        self.levels.get(x).ok_or_else(|| Error::MissingLevel {
            level: x.to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Covariates, &MomentEstimate)> {
        self.levels.iter()
    }
}

/// Ratio estimator over all rows of `ds` (reviewed or not), with `μ̂`
/// evaluated at `beta`.
pub fn estimate_residual_moment(
    ds: &LinkedDataset,
    table: &MatchProbTable,
    beta: &Coefficients,
) -> Result<ResidualMomentTable> {
    if ds.dim() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: ds.dim(),
        });
    }
    let mut sums: BTreeMap<Covariates, (f64, u64)> = BTreeMap::new();
    for r in ds.records() {
        let p = table.p_hat(&r.x, r.y_star)?;
        let resid = r.y_star_f64() - logistic(r.x.dot(beta.as_vector()));
        let e = sums.entry(r.x.clone()).or_insert((0.0, 0));
        e.0 += p * p * resid * resid;
        e.1 += 1;
    }
    let levels = sums
        .into_iter()
        .map(|(x, (s, count))| {
            (
                x,
                MomentEstimate {
                    m_hat: s / count as f64,
                    count,
                },
            )
        })
        .collect();
    Ok(ResidualMomentTable { levels })
}

/// The population moment `Σ_{y*} P(Y*=y*|x) P(D=1|x,y*)² (y*−μ)²` for every
/// level of a scenario, with `μ` evaluated at `beta`. `count` is zero.
pub fn oracle_residual_moment(config: &ScenarioConfig, beta: &Coefficients) -> Result<ResidualMomentTable> {
    if config.dim() != beta.dim() {
        return Err(Error::DimensionMismatch {
            expected: beta.dim(),
            found: config.dim(),
        });
    }
    let mut levels = BTreeMap::new();
    for (k, level) in config.levels.iter().enumerate() {
        let mu = logistic(level.x.dot(beta.as_vector()));
        let q = config.observed_mean(k);
        let mut m_hat = 0.0;
        for (y, prob) in [(false, 1.0 - q), (true, q)] {
            if prob > 0.0 {
                let p = true_match_prob(config, &level.x, y)?;
                let resid = f64::from(u8::from(y)) - mu;
                m_hat += prob * p * p * resid * resid;
            }
        }
        levels.insert(level.x.clone(), MomentEstimate { m_hat, count: 0 });
    }
    Ok(ResidualMomentTable { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkage_sim::tests::two_level_config;
    use crate::linkage_sim::{analysis_view, generate, LinkedRecord};

    fn rec(x: f64, y_star: bool, r: bool, d: Option<bool>) -> LinkedRecord {
        LinkedRecord {
            x: Covariates::new(vec![1.0, x]).unwrap(),
            y_star,
            r,
            d,
            y_latent: None,
        }
    }

    fn ds(records: Vec<LinkedRecord>) -> LinkedDataset {
        LinkedDataset::new(records, None).unwrap()
    }

    fn cx(x: f64) -> Covariates {
        Covariates::new(vec![1.0, x]).unwrap()
    }

    #[test]
    fn cell_ratio() {
        let data = ds(vec![
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(false)),
            rec(0.0, true, false, None),
            rec(0.0, false, true, Some(true)),
            rec(0.0, false, true, Some(true)),
        ]);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let c = t.cell(&cx(0.0), true).unwrap();
        assert_eq!(c.p_hat, 0.75);
        assert_eq!((c.n_matched, c.n_unmatched, c.provenance), (3, 1, Provenance::Cell));
        assert_eq!(t.p_hat(&cx(0.0), false).unwrap(), 1.0);
        // P(D=1|X) = (5·0.75 + 2·1)/7
        assert!((t.match_given_x(&cx(0.0)).unwrap() - 5.75 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn pooled_and_global_fallbacks() {
        let data = ds(vec![
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(false)),
            rec(0.0, false, true, Some(true)),
            rec(1.0, false, false, None),
            rec(1.0, true, false, None),
            rec(1.0, true, false, None),
        ]);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        // Level 0 has every cell reviewed. Level 1 has nothing reviewed, so it
        // falls back to the global pool (4 matched, 1 unmatched).
        let c = t.cell(&cx(1.0), false).unwrap();
        assert_eq!((c.p_hat, c.provenance), (0.8, Provenance::Global));

        let data = ds(vec![
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(false)),
            rec(0.0, false, true, Some(true)),
            rec(0.0, false, false, None),
            rec(2.0, true, false, None),
        ]);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let c = t.cell(&cx(0.0), false).unwrap();
        assert_eq!((c.p_hat, c.provenance), (1.0, Provenance::Cell));
        let c = t.cell(&cx(2.0), true).unwrap();
        assert_eq!(c.provenance, Provenance::Global);

        // Pooled over y* within a level: 4 matched, 1 unmatched at x=0, and
        // an unreviewed y*=0 cell there.
        let data = ds(vec![
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(true)),
            rec(0.0, true, true, Some(false)),
            rec(0.0, false, false, None),
        ]);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let c = t.cell(&cx(0.0), false).unwrap();
        assert_eq!((c.p_hat, c.n_matched, c.n_unmatched), (0.8, 4, 1));
        assert_eq!(c.provenance, Provenance::PooledOverY);

        let err = estimate_match_prob(&data, FallbackPolicy::Strict).unwrap_err();
        assert!(matches!(err, Error::EmptyCell { y_star: 0, .. }));
    }

    #[test]
    fn no_reviewed_records_is_an_error() {
        let data = ds(vec![rec(0.0, true, false, None), rec(1.0, false, false, None)]);
        assert!(matches!(
            estimate_match_prob(&data, FallbackPolicy::Hierarchical),
            Err(Error::NoReviewedRecords)
        ));
    }

    #[test]
    fn reviewed_without_status_is_integrity_error() {
        let data = ds(vec![rec(0.0, true, true, None)]);
        assert!(matches!(
            estimate_match_prob(&data, FallbackPolicy::Hierarchical),
            Err(Error::DataIntegrity(_))
        ));
    }

    #[test]
    fn residual_moment_examples() {
        let beta = Coefficients::new(vec![3.0_f64.ln(), 0.0]).unwrap();
        let data = ds(vec![rec(0.0, true, true, Some(true)), rec(0.0, true, true, Some(true))]);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let m = estimate_residual_moment(&data, &t, &beta).unwrap();
        assert!((m.get(&cx(0.0)).unwrap().m_hat - 0.0625).abs() < 1e-15);

        let data = ds(vec![rec(0.0, true, true, Some(false)), rec(0.0, false, true, Some(false))]);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let m = estimate_residual_moment(&data, &t, &beta).unwrap();
        assert_eq!(m.get(&cx(0.0)).unwrap().m_hat, 0.0);

        // p̂ = 0.8 at y*=1 (4 of 5), p̂ = 0.6 at y*=0 (3 of 5); μ̂ = 0.5.
        let mut records = vec![];
        for d in [true, true, true, true, false] {
            records.push(rec(0.0, true, true, Some(d)));
        }
        for d in [true, true, true, false, false] {
            records.push(rec(0.0, false, true, Some(d)));
        }
        let data = ds(records);
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let m = estimate_residual_moment(&data, &t, &Coefficients::zeros(2)).unwrap();
        let est = m.get(&cx(0.0)).unwrap();
        assert!((est.m_hat - 0.125).abs() < 1e-15);
        assert_eq!(est.count, 10);
    }

    #[test]
    fn oracle_table_examples() {
        let t = oracle_table(&two_level_config(0.8, 0.5, &[0.0, 0.0], 10));
        assert_eq!(t.len(), 4);
        for (_, _, c) in t.cells() {
            assert!((c.p_hat - 0.8).abs() < 1e-15);
            assert_eq!(c.provenance, Provenance::Oracle);
        }
        let t = oracle_table(&two_level_config(1.0, 0.5, &[0.3, 0.9], 10));
        assert!(t.cells().all(|(_, _, c)| c.p_hat == 1.0));
    }

    #[test]
    fn ratio_invariant_under_permutation_and_duplication() {
        let data = analysis_view(&generate(&two_level_config(0.7, 0.3, &[-0.5, 1.0], 4000)).unwrap());
        let t = estimate_match_prob(&data, FallbackPolicy::Hierarchical).unwrap();
        let mut rev: Vec<_> = data.records().to_vec();
        rev.reverse();
        let t_rev = estimate_match_prob(&ds(rev), FallbackPolicy::Hierarchical).unwrap();
        let mut dup: Vec<_> = data.records().to_vec();
        dup.extend_from_slice(data.records());
        let t_dup = estimate_match_prob(&ds(dup), FallbackPolicy::Hierarchical).unwrap();
        for ((x, y, c), (_, _, c_dup)) in t.cells().zip(t_dup.cells()) {
            assert_eq!(c.p_hat, t_rev.p_hat(x, y).unwrap());
            assert_eq!(c.p_hat, c_dup.p_hat);
        }
    }

    #[test]
    fn oracle_moment_enumeration() {
        let cfg = two_level_config(0.8, 0.5, &[0.0, 0.0], 10);
        let m = oracle_residual_moment(&cfg, &Coefficients::zeros(2)).unwrap();
        for (_, e) in m.iter() {
            assert!((e.m_hat - 0.16).abs() < 1e-15);
        }
        // Without false positives the moment is the Bernoulli variance.
        let cfg = two_level_config(1.0, 0.5, &[-0.5, 1.0], 10);
        let m = oracle_residual_moment(&cfg, &cfg.beta_true).unwrap();
        for (k, level) in cfg.levels.iter().enumerate() {
            let mu = cfg.true_mean(k);
            assert!((m.get(&level.x).unwrap().m_hat - mu * (1.0 - mu)).abs() < 1e-15);
        }
    }
}
