//! Marginal imputation distributions under MAR and reference-based
//! assumptions, conditional mean imputation, random imputation from the
//! conditional normal, and δ-adjustment of imputed datasets.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{split_observed_missing, IceHandling, Strategy, Subject, TrialDataset};
use crate::linalg;
use crate::mmrm::{MmrmError, MmrmFit};

#[derive(Debug, Error)]
pub enum ImputeError {
    #[error("reference-based strategy requires ICE records")]
    MissingIceRecords,
    #[error("reference-based imputation with group-specific covariance matrices is not supported")]
    UnsupportedCovariance,
    #[error("observed-block covariance for subject '{subject}' is numerically singular (condition number {condition:.3e})")]
    Singular { subject: String, condition: f64 },
    #[error(transparent)]
    Model(#[from] MmrmError),
}

/// How each subject's imputation strategy is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyRule {
    /// Use the strategy stored in each subject's ICE record.
    #[default]
    FromData,
    /// Apply one strategy to every treatment-policy ICE.
    Override(Strategy),
}

impl StrategyRule {
    /// Effective strategy for a subject; subjects without an ICE (and
    /// hypothetical ICEs) are always imputed under MAR.
    pub fn strategy_for(&self, s: &Subject) -> Strategy {
        match s.ice {
            None => Strategy::Mar,
            Some(ice) if ice.handling == IceHandling::Hypothetical => Strategy::Mar,
            Some(ice) => match self {
                StrategyRule::FromData => ice.strategy,
                StrategyRule::Override(x) => *x,
            },
        }
    }

    /// Copy of the dataset with every ICE record carrying its effective strategy.
    pub fn apply(&self, d: &TrialDataset) -> TrialDataset {
        let mut out = d.clone();
        for s in &mut out.subjects {
            let eff = self.strategy_for(s);
            if let Some(ice) = s.ice.as_mut() {
                ice.strategy = eff;
            }
        }
        out
    }

    /// Fails when a reference-based strategy is requested but no subject has an ICE.
    pub fn check(&self, d: &TrialDataset) -> Result<(), ImputeError> {
        if let StrategyRule::Override(x) = self {
            if x.is_reference_based() && d.subjects.iter().all(|s| s.ice.is_none()) {
                return Err(ImputeError::MissingIceRecords);
            }
        }
        Ok(())
    }
}

/// Mean and covariance of a subject's marginal imputation distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDistribution {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

/// Combine the subject's own predicted mean with the reference-arm prediction
/// according to the strategy. `last_visit` counts pre-ICE visits.
pub fn reference_based_mean(
    own: &DVector<f64>,
    reference: &DVector<f64>,
    strategy: Strategy,
    last_visit: usize,
) -> DVector<f64> {
    let j = own.len();
    match strategy {
        Strategy::Mar => own.clone(),
        Strategy::CopyReference => reference.clone(),
        Strategy::JumpToReference => {
            DVector::from_fn(j, |v, _| if v < last_visit { own[v] } else { reference[v] })
        }
        Strategy::CopyIncrementsInReference => {
            if last_visit == 0 {
                // At baseline both arms share the same mean, so increments start there.
                return reference.clone();
            }
            let anchor = last_visit - 1;
            DVector::from_fn(j, |v, _| {
                if v < last_visit {
                    own[v]
                } else {
                    own[anchor] + (reference[v] - reference[anchor])
                }
            })
        }
    }
}

pub fn marginal_distribution(
    s: &Subject,
    fit: &MmrmFit,
    strategy: Strategy,
) -> Result<MarginalDistribution, ImputeError> {
    let reference = fit.mean_spec.reference_group;
    let own = fit.predict(s, s.group)?;
    let sigma = fit.sigma_for(s.group).clone();
    let Some(ice) = s.ice else {
        return Ok(MarginalDistribution { mu: own, sigma });
    };
    if s.group == reference || !strategy.is_reference_based() {
        return Ok(MarginalDistribution { mu: own, sigma });
    }
    if !fit.is_shared() {
        return Err(ImputeError::UnsupportedCovariance);
    }
    let mu_ref = fit.predict(s, reference)?;
    let mu = reference_based_mean(&own, &mu_ref, strategy, ice.last_visit.min(own.len()));
    Ok(MarginalDistribution { mu, sigma })
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Regression of the missing block on the observed block and the Cholesky
/// factor of the conditional covariance, for one missingness pattern.
#[derive(Debug, Clone)]
pub struct PatternFactors {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
    /// `Σ_?! Σ_!!⁻¹`, `|missing| × |observed|`.
    pub regression: DMatrix<f64>,
    /// Lower Cholesky factor of `Σ_?? − Σ_?! Σ_!!⁻¹ Σ_!?`.
    pub conditional_chol: DMatrix<f64>,
}

impl PatternFactors {
    pub fn new(sigma: &DMatrix<f64>, observed: Vec<usize>, missing: Vec<usize>) -> Option<Self> {
        let s_mm = linalg::select(sigma, &missing, &missing);
        let s_mo = linalg::select(sigma, &missing, &observed);
        let (regression, cond) = if observed.is_empty() {
            (DMatrix::zeros(missing.len(), 0), s_mm)
        } else {
            let s_oo = linalg::select(sigma, &observed, &observed);
            let chol = linalg::cholesky(&s_oo)?;
            // Σ_!!⁻¹ Σ_!? then transpose: avoids forming the inverse.
            let reg = chol.solve(&s_mo.transpose()).transpose();
            let cond = &s_mm - &reg * s_mo.transpose();
            (reg, cond)
        };
        let conditional_chol = if missing.is_empty() {
            DMatrix::zeros(0, 0)
        } else {
            linalg::cholesky(&cond)?.l()
        };
        Some(PatternFactors {
            observed,
            missing,
            regression,
            conditional_chol,
        })
    }

    fn conditional_mean(&self, s: &Subject, mu: &DVector<f64>) -> Vec<f64> {
        let mut filled: Vec<f64> = s.outcomes.iter().map(|y| y.unwrap_or(f64::NAN)).collect();
        if self.missing.is_empty() {
            return filled;
        }
        let resid = DVector::from_iterator(
            self.observed.len(),
            self.observed.iter().map(|&v| filled[v] - mu[v]),
        );
        let shift = &self.regression * resid;
        for (k, &v) in self.missing.iter().enumerate() {
            filled[v] = mu[v] + shift[k];
        }
        filled
    }
}

fn factors_for(s: &Subject, m: &MarginalDistribution) -> Result<PatternFactors, ImputeError> {
    let (observed, missing) = split_observed_missing(s);
    PatternFactors::new(&m.sigma, observed.clone(), missing).ok_or_else(|| ImputeError::Singular {
        subject: s.id.clone(),
        condition: condition_number(&linalg::select(&m.sigma, &observed, &observed)),
    })
}

/// Observed outcomes verbatim; missing ones replaced by `E(Y_? | Y_!)`.
pub fn conditional_mean_impute(s: &Subject, m: &MarginalDistribution) -> Result<Vec<f64>, ImputeError> {
    Ok(factors_for(s, m)?.conditional_mean(s, &m.mu))
}

/// One draw of the missing outcomes from the conditional normal given the observed ones.
pub fn random_impute<R: Rng + ?Sized>(
    s: &Subject,
    m: &MarginalDistribution,
    rng: &mut R,
) -> Result<Vec<f64>, ImputeError> {
    let f = factors_for(s, m)?;
    Ok(draw(&f, s, &m.mu, rng))
}

fn draw<R: Rng + ?Sized>(f: &PatternFactors, s: &Subject, mu: &DVector<f64>, rng: &mut R) -> Vec<f64> {
    let mut filled = f.conditional_mean(s, mu);
    if f.missing.is_empty() {
        return filled;
    }
    let z = DVector::from_iterator(f.missing.len(), (0..f.missing.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise = &f.conditional_chol * z;
    for (k, &v) in f.missing.iter().enumerate() {
        filled[v] += noise[k];
    }
    filled
}

/// Conditional-normal factors cached per (covariance level, missingness pattern).
pub struct Imputer<'a> {
    fit: &'a MmrmFit,
    cache: HashMap<(bool, Vec<bool>), PatternFactors>,
}

impl<'a> Imputer<'a> {
    pub fn new(fit: &'a MmrmFit) -> Self {
        Imputer {
            fit,
            cache: HashMap::new(),
        }
    }

    fn factors(&mut self, s: &Subject, m: &MarginalDistribution) -> Result<&PatternFactors, ImputeError> {
        let level = !self.fit.is_shared() && s.group != self.fit.mean_spec.reference_group;
        let key = (level, s.outcomes.iter().map(Option::is_some).collect::<Vec<_>>());
        if !self.cache.contains_key(&key) {
            let f = factors_for(s, m)?;
            self.cache.insert(key.clone(), f);
        }
        Ok(&self.cache[&key])
    }

    pub fn conditional_mean(&mut self, s: &Subject, strategy: Strategy) -> Result<Vec<f64>, ImputeError> {
        let m = marginal_distribution(s, self.fit, strategy)?;
        let f = self.factors(s, &m)?;
        Ok(f.conditional_mean(s, &m.mu))
    }

    pub fn random<R: Rng + ?Sized>(
        &mut self,
        s: &Subject,
        strategy: Strategy,
        rng: &mut R,
    ) -> Result<Vec<f64>, ImputeError> {
        let m = marginal_distribution(s, self.fit, strategy)?;
        let f = self.factors(s, &m)?;
        Ok(draw(f, s, &m.mu, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    Imputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedDataset {
    pub base: TrialDataset,
    pub filled: Vec<Vec<f64>>,
    pub provenance: Vec<Vec<Provenance>>,
}

impl ImputedDataset {
    /// Build from per-subject filled vectors; provenance follows the base missingness.
    pub fn from_filled(base: TrialDataset, filled: Vec<Vec<f64>>) -> Self {
        let provenance = base
            .subjects
            .iter()
            .map(|s| {
                s.outcomes
                    .iter()
                    .map(|y| if y.is_some() { Provenance::Observed } else { Provenance::Imputed })
                    .collect()
            })
            .collect();
        ImputedDataset {
            base,
            filled,
            provenance,
        }
    }

    /// Completed data with no imputation needed.
    pub fn complete(base: TrialDataset) -> Option<Self> {
        let filled = base
            .subjects
            .iter()
            .map(|s| s.outcomes.iter().copied().collect::<Option<Vec<f64>>>())
            .collect::<Option<Vec<_>>>()?;
        Some(Self::from_filled(base, filled))
    }

    /// Long-format CSV: the input columns plus a provenance column.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let covs: Vec<&str> = self.base.schema.covariates.iter().map(|c| c.name.as_str()).collect();
        let mut header = vec!["subject_id", "group", "visit", "outcome"];
        header.extend(covs.iter().copied());
        header.extend(["ice_visit", "ice_strategy", "provenance"]);
        w.write_record(&header)?;
        let grid = &self.base.grid;
        for (i, s) in self.base.subjects.iter().enumerate() {
            for (v, label) in grid.labels().iter().enumerate() {
                let mut rec = vec![
                    s.id.clone(),
                    s.group.to_string(),
                    label.clone(),
                    self.filled[i][v].to_string(),
                ];
                for c in &covs {
                    rec.push(s.covariate_at(c, v).map(|x| x.to_string()).unwrap_or_default());
                }
                match s.ice {
                    Some(ice) => {
                        rec.push(if ice.last_visit == 0 {
                            grid.baseline_label().to_string()
                        } else {
                            grid.labels()[ice.last_visit - 1].clone()
                        });
                        rec.push(ice.strategy.to_string());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
                rec.push(match self.provenance[i][v] {
                    Provenance::Observed => "observed".into(),
                    Provenance::Imputed => "imputed".into(),
                });
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Conditional mean imputation of every subject under the rule's strategies.
pub fn impute_dataset(
    d: &TrialDataset,
    fit: &MmrmFit,
    rule: StrategyRule,
) -> Result<ImputedDataset, ImputeError> {
    let mut imputer = Imputer::new(fit);
    let filled = d
        .subjects
        .iter()
        .map(|s| imputer.conditional_mean(s, rule.strategy_for(s)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImputedDataset::from_filled(d.clone(), filled))
}

/// One random imputation of every subject. Subject `i` of draw `m` uses its
/// own ChaCha stream, so results do not depend on evaluation order.
pub fn random_impute_dataset(
    d: &TrialDataset,
    fit: &MmrmFit,
    rule: StrategyRule,
    seed: u64,
    draw: u64,
) -> Result<ImputedDataset, ImputeError> {
    let mut imputer = Imputer::new(fit);
    let filled = d
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((draw << 24) | i as u64);
            imputer.random(s, rule.strategy_for(s), &mut rng)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ImputedDataset::from_filled(d.clone(), filled))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaScope {
    #[default]
    ImputedOnly,
    AllPostIce,
}

/// Per-subject, per-visit offsets added to imputed (or post-ICE) cells.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaAdjustment {
    pub offsets: BTreeMap<String, Vec<f64>>,
    #[serde(default)]
    pub applies_to: DeltaScope,
}

impl DeltaAdjustment {
    /// The same per-visit offsets for every subject.
    pub fn uniform(d: &TrialDataset, per_visit: &[f64], applies_to: DeltaScope) -> Self {
        DeltaAdjustment {
            offsets: d
                .subjects
                .iter()
                .map(|s| (s.id.clone(), per_visit.to_vec()))
                .collect(),
            applies_to,
        }
    }
}

pub fn apply_delta(d: &ImputedDataset, delta: &DeltaAdjustment) -> ImputedDataset {
    let mut out = d.clone();
    for (i, s) in d.base.subjects.iter().enumerate() {
        let Some(offsets) = delta.offsets.get(&s.id) else { continue };
        for (v, off) in offsets.iter().enumerate().take(out.filled[i].len()) {
            let targeted = match delta.applies_to {
                DeltaScope::ImputedOnly => d.provenance[i][v] == Provenance::Imputed,
                DeltaScope::AllPostIce => s.ice.is_some_and(|ice| ice.is_post_ice(v)),
            };
            if targeted {
                out.filled[i][v] += off;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{CovariateSchema, Group, IceRecord, VisitGrid};

    fn mvn(mu: &[f64], sigma: &[f64]) -> MarginalDistribution {
        let j = mu.len();
        MarginalDistribution {
            mu: DVector::from_row_slice(mu),
            sigma: DMatrix::from_row_slice(j, j, sigma),
        }
    }

    #[test]
    fn strategy_means_by_hand() {
        let own = DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        let reference = DVector::zeros(4);
        let j2r = reference_based_mean(&own, &reference, Strategy::JumpToReference, 2);
        let cir = reference_based_mean(&own, &reference, Strategy::CopyIncrementsInReference, 2);
        let cr = reference_based_mean(&own, &reference, Strategy::CopyReference, 2);
        assert_eq!(j2r.as_slice(), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(cir.as_slice(), &[1.0, 2.0, 2.0, 2.0]);
        assert_eq!(cr.as_slice(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conditional_mean_examples() {
        let m = mvn(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]);
        let s = Subject::new("a", Group::Control, vec![Some(2.0), None]);
        assert_eq!(conditional_mean_impute(&s, &m).unwrap(), vec![2.0, 1.0]);

        let full = Subject::new("b", Group::Control, vec![Some(2.0), Some(-1.0)]);
        assert_eq!(conditional_mean_impute(&full, &m).unwrap(), vec![2.0, -1.0]);

        let m = mvn(&[3.0, 4.0], &[1.0, 0.5, 0.5, 1.0]);
        let none = Subject::new("c", Group::Control, vec![None, None]);
        assert_eq!(conditional_mean_impute(&none, &m).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn random_impute_leaves_complete_subjects_alone() {
        let m = mvn(&[0.0, 0.0], &[1.0, 0.5, 0.5, 1.0]);
        let full = Subject::new("b", Group::Control, vec![Some(2.0), Some(-1.0)]);
        for seed in 0..5 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(random_impute(&full, &m, &mut rng).unwrap(), vec![2.0, -1.0]);
        }
    }

    #[test]
    fn random_impute_moments() {
        let m = mvn(
            &[1.0, 2.0, 3.0],
            &[2.0, 0.8, 0.5, 0.8, 1.5, 0.7, 0.5, 0.7, 1.2],
        );
        let s = Subject::new("a", Group::Control, vec![Some(0.5), None, None]);
        let cm = conditional_mean_impute(&s, &m).unwrap();
        let f = factors_for(&s, &m).unwrap();
        let cond_cov = &f.conditional_chol * f.conditional_chol.transpose();
        let n = 100_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let y = random_impute(&s, &m, &mut rng).unwrap();
            for v in 1..3 {
                sum[v] += y[v];
                sq[v] += (y[v] - cm[v]).powi(2);
            }
        }
        for (k, v) in [1usize, 2].into_iter().enumerate() {
            let sd = cond_cov[(k, k)].sqrt();
            let mean = sum[v] / n as f64;
            assert!((mean - cm[v]).abs() < 3.0 * sd / (n as f64).sqrt(), "visit {v}");
            let var = sq[v] / n as f64;
            assert!((var / cond_cov[(k, k)] - 1.0).abs() < 0.05, "visit {v}");
        }
    }

    #[test]
    fn delta_examples() {
        let grid = VisitGrid::numbered(3);
        let a = Subject::new("a", Group::Intervention, vec![Some(1.0), None, None])
            .with_ice(IceRecord::new(1, Strategy::JumpToReference));
        let b = Subject::new("b", Group::Control, vec![Some(1.0), Some(2.0), None]);
        let base = TrialDataset::new(grid, CovariateSchema::default(), vec![a, b]);
        let imp = ImputedDataset::from_filled(
            base.clone(),
            vec![vec![1.0, 5.0, 6.0], vec![1.0, 2.0, 3.0]],
        );

        let zero = DeltaAdjustment::uniform(&base, &[0.0; 3], DeltaScope::ImputedOnly);
        assert_eq!(apply_delta(&imp, &zero), imp);

        let mut one = DeltaAdjustment::default();
        one.offsets.insert("a".into(), vec![1.0; 3]);
        let out = apply_delta(&imp, &one);
        assert_eq!(out.filled[0], vec![1.0, 6.0, 7.0]);
        assert_eq!(out.filled[1], imp.filled[1]);
        assert_eq!(out.provenance, imp.provenance);

        let mut observed_only = DeltaAdjustment::default();
        observed_only.offsets.insert("b".into(), vec![10.0, 10.0, 0.0]);
        assert_eq!(apply_delta(&imp, &observed_only).filled[1], imp.filled[1]);
    }
}
