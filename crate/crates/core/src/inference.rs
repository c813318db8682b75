//! Pipeline runner (mask, fit, impute, analyse) with jackknife and bootstrap
//! inference, percentile intervals, bootstrap p-values, and the finite-B
//! accuracy calculator for bootstrap p-values.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF, Normal};
use thiserror::Error;

use crate::analysis::{fit_ancova, AnalysisError, AncovaSpec, EffectEstimate};
use crate::dataset::{Group, MaskRule, TrialDataset, ValidationReport};
use crate::impute::{apply_delta, impute_dataset, DeltaAdjustment, ImputeError, StrategyRule};
use crate::mmrm::{fit_reml_from, CovarianceSpec, FitOptions, MeanModelSpec, MmrmError, WarmStart};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validation,
    ModelFit,
    Imputation,
    Analysis,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Validation => "validation",
            Stage::ModelFit => "model fit",
            Stage::Imputation => "imputation",
            Stage::Analysis => "analysis",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("validation: {0}")]
    Validation(ValidationReport),
    #[error("model fit: {0}")]
    Fit(#[from] MmrmError),
    #[error("imputation: {0}")]
    Impute(#[from] ImputeError),
    #[error("analysis: {0}")]
    Analysis(#[from] AnalysisError),
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Validation(_) => Stage::Validation,
            PipelineError::Fit(_) => Stage::ModelFit,
            PipelineError::Impute(ImputeError::Model(_)) => Stage::ModelFit,
            PipelineError::Impute(_) => Stage::Imputation,
            PipelineError::Analysis(_) => Stage::Analysis,
        }
    }
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("leave-one-out fit without subject '{subject}' failed: {source}")]
    Jackknife { subject: String, source: PipelineError },
    #[error("{replaced} bootstrap resamples failed and were replaced, more than the {allowed} allowed for B = {b}; last error: {last}")]
    TooManyReplacements {
        replaced: usize,
        allowed: usize,
        b: usize,
        last: String,
    },
    #[error("B = {b} is too small for a percentile interval at alpha = {alpha}")]
    TooFewReplicates { b: usize, alpha: f64 },
    #[error("jackknife needs at least two subjects")]
    TooFewSubjects,
}

/// Everything needed to turn a dataset into a treatment effect estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub mean_spec: MeanModelSpec,
    #[serde(default)]
    pub cov_spec: CovarianceSpec,
    #[serde(default)]
    pub strategy: StrategyRule,
    #[serde(default)]
    pub mask: MaskRule,
    pub ancova: AncovaSpec,
    #[serde(default)]
    pub delta: Option<DeltaAdjustment>,
    #[serde(default)]
    pub fit_options: FitOptions,
}

impl Pipeline {
    pub fn new(mean_spec: MeanModelSpec, ancova: AncovaSpec) -> Self {
        Pipeline {
            mean_spec,
            cov_spec: CovarianceSpec::shared(),
            strategy: StrategyRule::FromData,
            mask: MaskRule::ReferenceBased,
            ancova,
            delta: None,
            fit_options: FitOptions::default(),
        }
    }

    pub fn with_strategy(mut self, rule: StrategyRule) -> Self {
        self.strategy = rule;
        self
    }

    pub fn with_mask(mut self, mask: MaskRule) -> Self {
        self.mask = mask;
        self
    }
}

/// Estimates for several strategy rules on one dataset, plus the optima
/// reached, which seed the resampled fits.
struct Evaluation {
    estimates: Vec<EffectEstimate>,
    warm: Vec<WarmStart>,
}

fn evaluate(
    d: &TrialDataset,
    p: &Pipeline,
    rules: &[StrategyRule],
    warm: &[WarmStart],
    validate: bool,
) -> Result<Evaluation, PipelineError> {
    if validate {
        let report = d.validate();
        if !report.is_valid() {
            return Err(PipelineError::Validation(report));
        }
    }
    let mut fits: Vec<(TrialDataset, crate::mmrm::MmrmFit)> = Vec::new();
    let mut estimates = Vec::with_capacity(rules.len());
    for rule in rules {
        rule.check(d)?;
        let assigned = rule.apply(d);
        let masked = assigned.mask_with(p.mask);
        // Only the outcomes enter the fit; strategy labels may differ.
        let same = |m: &TrialDataset| m.subjects.iter().zip(&masked.subjects).all(|(a, b)| a.outcomes == b.outcomes);
        let k = match fits.iter().position(|(m, _)| same(m)) {
            Some(k) => k,
            None => {
                let fit = fit_reml_from(&masked, &p.mean_spec, &p.cov_spec, &p.fit_options, warm.get(fits.len()))?;
                fits.push((masked, fit));
                fits.len() - 1
            }
        };
        let mut imputed = impute_dataset(&assigned, &fits[k].1, StrategyRule::FromData)?;
        if let Some(delta) = &p.delta {
            imputed = apply_delta(&imputed, delta);
        }
        estimates.push(fit_ancova(&imputed, &p.ancova)?);
    }
    Ok(Evaluation {
        estimates,
        warm: fits.iter().map(|(_, f)| f.warm_start()).collect(),
    })
}

/// Conditional mean imputation estimate of the treatment effect.
pub fn run_pipeline(d: &TrialDataset, p: &Pipeline) -> Result<EffectEstimate, PipelineError> {
    Ok(evaluate(d, p, &[p.strategy], &[], true)?.estimates[0])
}

/// Estimates for several strategy rules, sharing model fits whenever the
/// masked data coincide.
pub fn run_strategies(
    d: &TrialDataset,
    p: &Pipeline,
    rules: &[StrategyRule],
) -> Result<Vec<EffectEstimate>, PipelineError> {
    Ok(evaluate(d, p, rules, &[], true)?.estimates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JackknifeResult {
    pub theta_hat: f64,
    pub leave_one_out: Vec<f64>,
    pub se_jack: f64,
}

/// `[(n−1)/n · Σ(θ₋ᵢ − θ̄)²]^½`.
pub fn jackknife_se(leave_one_out: &[f64]) -> f64 {
    let n = leave_one_out.len() as f64;
    let mean = leave_one_out.iter().sum::<f64>() / n;
    let ss: f64 = leave_one_out.iter().map(|t| (t - mean).powi(2)).sum();
    ((n - 1.0) / n * ss).sqrt()
}

impl JackknifeResult {
    pub fn from_replicates(theta_hat: f64, leave_one_out: Vec<f64>) -> Self {
        let se_jack = jackknife_se(&leave_one_out);
        JackknifeResult {
            theta_hat,
            leave_one_out,
            se_jack,
        }
    }
}

pub fn jackknife(d: &TrialDataset, p: &Pipeline) -> Result<JackknifeResult, InferenceError> {
    Ok(jackknife_strategies(d, p, &[p.strategy])?.remove(0))
}

/// Jackknife for several strategy rules; each leave-one-out dataset is fitted
/// once per distinct masking and warm-started from the full-data optimum.
pub fn jackknife_strategies(
    d: &TrialDataset,
    p: &Pipeline,
    rules: &[StrategyRule],
) -> Result<Vec<JackknifeResult>, InferenceError> {
    if d.subjects.len() < 2 {
        return Err(InferenceError::TooFewSubjects);
    }
    let full = evaluate(d, p, rules, &[], true)?;
    let replicates: Vec<Result<Vec<EffectEstimate>, PipelineError>> = (0..d.subjects.len())
        .into_par_iter()
        .map(|i| Ok(evaluate(&d.without_subject(i), p, rules, &full.warm, true)?.estimates))
        .collect();
    let mut per_rule = vec![Vec::with_capacity(d.subjects.len()); rules.len()];
    for (i, r) in replicates.into_iter().enumerate() {
        let est = r.map_err(|source| InferenceError::Jackknife {
            subject: d.subjects[i].id.clone(),
            source,
        })?;
        for (k, e) in est.iter().enumerate() {
            per_rule[k].push(e.theta);
        }
    }
    Ok(per_rule
        .into_iter()
        .zip(&full.estimates)
        .map(|(loo, e)| JackknifeResult::from_replicates(e.theta, loo))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapOptions {
    /// Resample within each randomized group, keeping the group sizes fixed.
    pub stratified: bool,
    /// Failed resamples tolerated, as a fraction of B, before aborting.
    pub max_replacement_fraction: f64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            stratified: false,
            max_replacement_fraction: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub theta_hat: f64,
    pub draws: Vec<f64>,
    /// Empirical standard deviation of the draws; NaN when B = 1.
    pub se_boot: f64,
    pub b: usize,
    pub seed: u64,
    /// Resamples whose pipeline failed and were redrawn.
    pub replaced: usize,
}

fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

fn resample_indices<R: Rng>(d: &TrialDataset, stratified: bool, rng: &mut R) -> Vec<usize> {
    let n = d.subjects.len();
    if !stratified {
        return (0..n).map(|_| rng.gen_range(0..n)).collect();
    }
    let mut out = Vec::with_capacity(n);
    for g in [Group::Control, Group::Intervention] {
        let members: Vec<usize> = (0..n).filter(|&i| d.subjects[i].group == g).collect();
        for _ in 0..members.len() {
            out.push(members[rng.gen_range(0..members.len())]);
        }
    }
    out
}

/// Random generator for bootstrap replicate `b`: one ChaCha stream per replicate.
pub fn replicate_rng(seed: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng
}

pub fn bootstrap(
    d: &TrialDataset,
    p: &Pipeline,
    b: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<BootstrapResult, InferenceError> {
    Ok(bootstrap_strategies(d, p, &[p.strategy], b, seed, opts)?.remove(0))
}

pub fn bootstrap_strategies(
    d: &TrialDataset,
    p: &Pipeline,
    rules: &[StrategyRule],
    b: usize,
    seed: u64,
    opts: &BootstrapOptions,
) -> Result<Vec<BootstrapResult>, InferenceError> {
    let full = evaluate(d, p, rules, &[], true)?;
    let allowed = (opts.max_replacement_fraction * b as f64).floor() as usize;
    let replicates: Vec<(Result<Vec<EffectEstimate>, PipelineError>, usize)> = (0..b)
        .into_par_iter()
        .map(|r| {
            let mut rng = replicate_rng(seed, r as u64);
            let mut failures = 0;
            loop {
                let idx = resample_indices(d, opts.stratified, &mut rng);
                match evaluate(&d.resample(&idx), p, rules, &full.warm, true) {
                    Ok(e) => return (Ok(e.estimates), failures),
                    Err(e) if failures >= allowed => return (Err(e), failures + 1),
                    Err(_) => failures += 1,
                }
            }
        })
        .collect();
    let replaced: usize = replicates.iter().map(|(_, f)| f).sum();
    let mut per_rule = vec![Vec::with_capacity(b); rules.len()];
    let mut last_error = None;
    for (r, _) in replicates {
        match r {
            Ok(est) => {
                for (k, e) in est.iter().enumerate() {
                    per_rule[k].push(e.theta);
                }
            }
            Err(e) => last_error = Some(e.to_string()),
        }
    }
    if replaced > allowed || last_error.is_some() {
        return Err(InferenceError::TooManyReplacements {
            replaced,
            allowed,
            b,
            last: last_error.unwrap_or_default(),
        });
    }
    Ok(per_rule
        .into_iter()
        .zip(&full.estimates)
        .map(|(draws, e)| BootstrapResult {
            theta_hat: e.theta,
            se_boot: sample_sd(&draws),
            draws,
            b,
            seed,
            replaced,
        })
        .collect())
}

/// Value at a 1-based, possibly fractional, rank of sorted data.
fn interpolated_order_statistic(sorted: &[f64], rank: f64) -> f64 {
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let a = sorted[lo - 1];
    if frac == 0.0 || lo >= sorted.len() {
        a
    } else {
        a + frac * (sorted[lo] - a)
    }
}

/// Order statistics at ranks `(B+1)α/2` and `(B+1)(1−α/2)`.
pub fn percentile_ci(draws: &[f64], alpha: f64) -> Result<(f64, f64), InferenceError> {
    let b = draws.len();
    let lo_rank = (b as f64 + 1.0) * alpha / 2.0;
    let hi_rank = (b as f64 + 1.0) * (1.0 - alpha / 2.0);
    if !(alpha > 0.0 && alpha < 1.0) || lo_rank < 1.0 || hi_rank > b as f64 {
        return Err(InferenceError::TooFewReplicates { b, alpha });
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((
        interpolated_order_statistic(&sorted, lo_rank),
        interpolated_order_statistic(&sorted, hi_rank),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(#{θ* < θ₀} + 1)/(B + 1)`.
    Below,
    /// `(#{θ* > θ₀} + 1)/(B + 1)`.
    Above,
    TwoSided,
}

pub fn bootstrap_pvalue(draws: &[f64], theta0: f64, direction: Direction) -> f64 {
    let denom = draws.len() as f64 + 1.0;
    let below = (draws.iter().filter(|&&t| t < theta0).count() as f64 + 1.0) / denom;
    let above = (draws.iter().filter(|&&t| t > theta0).count() as f64 + 1.0) / denom;
    match direction {
        Direction::Below => below,
        Direction::Above => above,
        Direction::TwoSided => (2.0 * below.min(above)).min(1.0),
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMethod {
    Jackknife,
    Bootstrap,
    BootstrapPercentile,
}

impl fmt::Display for InferenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InferenceMethod::Jackknife => "jackknife",
            InferenceMethod::Bootstrap => "bootstrap",
            InferenceMethod::BootstrapPercentile => "bootstrap_percentile",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub method: InferenceMethod,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_two_sided: f64,
    pub alpha: f64,
    pub theta0: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub b: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub failures: Vec<String>,
}

/// Wald interval and two-sided test from `Z = (θ̂ − θ₀)/se`.
pub fn normal_approximation(estimate: f64, se: f64, theta0: f64, alpha: f64) -> (f64, f64, f64) {
    let z = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    let p = if se > 0.0 {
        2.0 * std_normal().cdf(-((estimate - theta0) / se).abs())
    } else if estimate == theta0 {
        1.0
    } else {
        0.0
    };
    (estimate - z * se, estimate + z * se, p.min(1.0))
}

impl InferenceResult {
    pub fn from_jackknife(j: &JackknifeResult, theta0: f64, alpha: f64) -> Self {
        let (lo, hi, p) = normal_approximation(j.theta_hat, j.se_jack, theta0, alpha);
        InferenceResult {
            method: InferenceMethod::Jackknife,
            estimate: j.theta_hat,
            se: j.se_jack,
            ci_low: lo,
            ci_high: hi,
            p_two_sided: p,
            alpha,
            theta0,
            n: Some(j.leave_one_out.len()),
            b: None,
            seed: None,
            failures: Vec::new(),
        }
    }

    fn bootstrap_failures(r: &BootstrapResult) -> Vec<String> {
        if r.replaced == 0 {
            Vec::new()
        } else {
            vec![format!("{} failed resamples replaced", r.replaced)]
        }
    }

    pub fn from_bootstrap(r: &BootstrapResult, theta0: f64, alpha: f64) -> Self {
        let (lo, hi, p) = normal_approximation(r.theta_hat, r.se_boot, theta0, alpha);
        InferenceResult {
            method: InferenceMethod::Bootstrap,
            estimate: r.theta_hat,
            se: r.se_boot,
            ci_low: lo,
            ci_high: hi,
            p_two_sided: p,
            alpha,
            theta0,
            n: None,
            b: Some(r.b),
            seed: Some(r.seed),
            failures: Self::bootstrap_failures(r),
        }
    }

    /// Percentile interval and inverted-percentile two-sided p-value.
    pub fn from_bootstrap_percentile(r: &BootstrapResult, theta0: f64, alpha: f64) -> Result<Self, InferenceError> {
        let (lo, hi) = percentile_ci(&r.draws, alpha)?;
        Ok(InferenceResult {
            method: InferenceMethod::BootstrapPercentile,
            estimate: r.theta_hat,
            se: r.se_boot,
            ci_low: lo,
            ci_high: hi,
            p_two_sided: bootstrap_pvalue(&r.draws, theta0, Direction::TwoSided),
            alpha,
            theta0,
            n: None,
            b: Some(r.b),
            seed: Some(r.seed),
            failures: Self::bootstrap_failures(r),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Normal approximation with a bootstrap standard error.
    Normal,
    /// Inverted percentile interval.
    Percentile,
}

impl std::str::FromStr for PValueMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(PValueMethod::Normal),
            "percentile" => Ok(PValueMethod::Percentile),
            other => Err(format!("unknown method '{other}' (expected normal or percentile)")),
        }
    }
}

/// Sampling distribution of a bootstrap p-value `p̂_B` computed from `B`
/// replicates when the infinite-B p-value is `p_inf`.
#[derive(Debug, Clone, Copy)]
pub struct PbAccuracy {
    pub method: PValueMethod,
    pub p_inf: f64,
    pub b: usize,
}

pub fn pb_accuracy(method: PValueMethod, p_inf: f64, b: usize) -> Result<PbAccuracy, String> {
    if !(p_inf > 0.0 && p_inf < 1.0) {
        return Err(format!("p_inf must lie strictly between 0 and 1, got {p_inf}"));
    }
    if b < 2 {
        return Err(format!("B must be at least 2, got {b}"));
    }
    Ok(PbAccuracy { method, p_inf, b })
}

impl PbAccuracy {
    fn chi2(&self) -> ChiSquared {
        ChiSquared::new((self.b - 1) as f64).expect("positive degrees of freedom")
    }

    fn binomial(&self) -> Binomial {
        Binomial::new(self.p_inf, self.b as u64).expect("valid binomial")
    }

    fn q(&self) -> f64 {
        std_normal().inverse_cdf(self.p_inf)
    }

    /// Quantile of `p̂_B` at probability `prob`.
    pub fn quantile(&self, prob: f64) -> f64 {
        let bf = self.b as f64;
        match self.method {
            PValueMethod::Normal => {
                let q = self.q();
                if q == 0.0 {
                    return 0.5;
                }
                // p̂_B increases with Z when q < 0 and decreases when q > 0.
                let zp = if q < 0.0 { prob } else { 1.0 - prob };
                let z = self.chi2().inverse_cdf(zp);
                std_normal().cdf(q / (z / (bf - 1.0)).sqrt())
            }
            PValueMethod::Percentile => {
                let bin = self.binomial();
                let (mut lo, mut hi) = (0u64, self.b as u64);
                while lo < hi {
                    let mid = lo + (hi - lo) / 2;
                    if bin.cdf(mid) >= prob {
                        hi = mid;
                    } else {
                        lo = mid + 1;
                    }
                }
                (lo as f64 + 1.0) / (bf + 1.0)
            }
        }
    }

    /// Central 95% range of `p̂_B`.
    pub fn range95(&self) -> (f64, f64) {
        (self.quantile(0.025), self.quantile(0.975))
    }

    /// `P(p̂_B ≤ τ)`.
    pub fn prob_at_most(&self, tau: f64) -> f64 {
        let bf = self.b as f64;
        match self.method {
            PValueMethod::Normal => {
                let q = self.q();
                let c = std_normal().inverse_cdf(tau.clamp(0.0, 1.0));
                if q == 0.0 {
                    return if 0.5 <= tau { 1.0 } else { 0.0 };
                }
                if q < 0.0 {
                    if c >= 0.0 {
                        1.0
                    } else {
                        self.chi2().cdf((bf - 1.0) * (q / c).powi(2))
                    }
                } else if c <= 0.0 {
                    0.0
                } else {
                    1.0 - self.chi2().cdf((bf - 1.0) * (q / c).powi(2))
                }
            }
            PValueMethod::Percentile => {
                let k = (tau * (bf + 1.0) - 1.0 + 1e-9).floor();
                if k < 0.0 {
                    0.0
                } else {
                    self.binomial().cdf(k as u64)
                }
            }
        }
    }

    pub fn prob_above(&self, tau: f64) -> f64 {
        1.0 - self.prob_at_most(tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jackknife_formula() {
        assert!((jackknife_se(&[1.0, 4.0]) - 1.5).abs() < 1e-15);
        assert_eq!(jackknife_se(&[2.0; 7]), 0.0);
    }

    #[test]
    fn percentile_ci_examples() {
        let draws: Vec<f64> = (1..=999).rev().map(f64::from).collect();
        assert_eq!(percentile_ci(&draws, 0.05).unwrap(), (25.0, 975.0));

        let draws: Vec<f64> = (1..=10).map(|v| f64::from(v * v)).collect();
        let (lo, hi) = percentile_ci(&draws, 0.5).unwrap();
        // ranks 2.75 and 8.25: 4 + 0.75·5 and 64 + 0.25·17
        assert!((lo - 7.75).abs() < 1e-12);
        assert!((hi - 68.25).abs() < 1e-12);

        assert!(matches!(percentile_ci(&draws, 0.05), Err(InferenceError::TooFewReplicates { .. })));
    }

    #[test]
    fn bootstrap_pvalue_examples() {
        let mut draws = vec![-1.0; 24];
        draws.extend(std::iter::repeat(1.0).take(975));
        assert!((bootstrap_pvalue(&draws, 0.0, Direction::Below) - 0.025).abs() < 1e-15);
        assert!((bootstrap_pvalue(&draws, -5.0, Direction::Below) - 0.001).abs() < 1e-15);
        let sym: Vec<f64> = (-500..=500).filter(|&v| v != 0).map(f64::from).collect();
        assert!(bootstrap_pvalue(&sym, 0.0, Direction::TwoSided) > 0.99);
    }

    #[test]
    fn normal_approximation_brackets_estimate() {
        let (lo, hi, p) = normal_approximation(2.13, 0.86, 0.0, 0.05);
        assert!(lo < 2.13 && 2.13 < hi);
        assert!((p - 0.01326).abs() < 1e-4);
    }

    #[test]
    fn pb_median_is_symmetric() {
        for method in [PValueMethod::Normal, PValueMethod::Percentile] {
            let a = pb_accuracy(method, 0.5, 999).unwrap();
            let (lo, hi) = a.range95();
            assert!(lo <= 0.5 && 0.5 <= hi);
            if method == PValueMethod::Normal {
                assert_eq!((lo, hi), (0.5, 0.5));
            } else {
                assert!(((0.5 - lo) - (hi - 0.5)).abs() <= 1.0 / 1000.0 + 1e-12);
            }
        }
    }
}
