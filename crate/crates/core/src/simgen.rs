//! Trial generator for the operating-characteristic study and the study
//! harness that aggregates estimates, standard errors and rejection rates.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::AncovaSpec;
use crate::dataset::{CovariateSchema, Group, IceRecord, MaskRule, Strategy, Subject, TrialDataset, VisitGrid};
use crate::impute::StrategyRule;
use crate::inference::{
    bootstrap_strategies, jackknife_strategies, normal_approximation, BootstrapOptions, InferenceMethod, Pipeline,
};
use crate::mmrm::{MeanModelSpec, Term};

/// Name of the baseline-outcome covariate in generated datasets.
pub const BASELINE: &str = "BASE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_per_group: usize,
    /// Follow-up visit times in months; baseline is month 0.
    pub visit_months: Vec<f64>,
    pub placebo_intercept: f64,
    /// Placebo mean slope, points per year.
    pub placebo_slope: f64,
    /// Month from which the active-group slope changes under the alternative.
    pub alt_change_month: f64,
    /// Active-group slope multiplier after `alt_change_month` under the alternative.
    pub alt_slope_multiplier: f64,
    pub re_sd_intercept: f64,
    /// Random-slope SD, points per year.
    pub re_sd_slope: f64,
    pub re_corr: f64,
    pub resid_sd: f64,
    /// Per-visit discontinuation probability at outcomes at or below the threshold.
    pub disc_base_prob_placebo: f64,
    pub disc_base_prob_active: f64,
    pub disc_threshold: f64,
    /// Outcome increment over which the discontinuation odds are multiplied by `disc_odds_ratio`.
    pub disc_step: f64,
    pub disc_odds_ratio: f64,
    /// Also evaluate discontinuation right after the baseline assessment.
    pub disc_from_baseline: bool,
    pub dropout_prob_at_disc: f64,
    /// Treat the discontinuation-visit outcome itself as missing on dropout.
    pub dropout_includes_disc_visit: bool,
}

impl Default for SimConfig {
    /// Calibrated to the published discontinuation rates and treatment-policy effect.
    fn default() -> Self {
        SimConfig {
            n_per_group: 100,
            visit_months: vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0],
            placebo_intercept: 50.0,
            placebo_slope: 10.0,
            alt_change_month: 4.0,
            alt_slope_multiplier: 0.5,
            re_sd_intercept: 5.0,
            re_sd_slope: 5.0,
            re_corr: 0.25,
            resid_sd: 2.5,
            disc_base_prob_placebo: 0.015,
            disc_base_prob_active: 0.025,
            disc_threshold: 50.0,
            disc_step: 10.0,
            disc_odds_ratio: 1.5f64.exp(),
            disc_from_baseline: true,
            dropout_prob_at_disc: 0.75,
            dropout_includes_disc_visit: false,
        }
    }
}

impl SimConfig {
    /// The design read word for word: odds ×1.5 per 10 points, evaluated
    /// after follow-up visits only. Gives markedly lower discontinuation rates.
    pub fn literal() -> Self {
        SimConfig {
            disc_odds_ratio: 1.5,
            disc_from_baseline: false,
            ..SimConfig::default()
        }
    }

    /// All problems at once; empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let prob = |name: &str, v: f64, out: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                out.push(format!("{name} must lie in [0, 1], got {v}"));
            }
        };
        prob("disc_base_prob_placebo", self.disc_base_prob_placebo, &mut out);
        prob("disc_base_prob_active", self.disc_base_prob_active, &mut out);
        prob("dropout_prob_at_disc", self.dropout_prob_at_disc, &mut out);
        for (name, v) in [
            ("re_sd_intercept", self.re_sd_intercept),
            ("re_sd_slope", self.re_sd_slope),
            ("resid_sd", self.resid_sd),
            ("disc_step", self.disc_step),
            ("disc_odds_ratio", self.disc_odds_ratio),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.re_corr.abs() < 1.0) {
            out.push(format!("re_corr must lie in (-1, 1), got {}", self.re_corr));
        }
        if self.n_per_group < 2 {
            out.push(format!("n_per_group must be at least 2, got {}", self.n_per_group));
        }
        if self.visit_months.is_empty() {
            out.push("visit_months must not be empty".into());
        }
        if self.visit_months.iter().any(|m| !(*m > 0.0)) || self.visit_months.windows(2).any(|w| w[1] <= w[0]) {
            out.push("visit_months must be positive and strictly increasing".into());
        }
        out
    }

    pub fn n_visits(&self) -> usize {
        self.visit_months.len()
    }

    fn time(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.visit_months[k - 1] / 12.0
        }
    }

    pub fn placebo_mean(&self, t: f64) -> f64 {
        self.placebo_intercept + self.placebo_slope * t
    }

    pub fn active_mean(&self, t: f64, h: Hypothesis) -> f64 {
        let tc = self.alt_change_month / 12.0;
        match h {
            Hypothesis::Alternative if t > tc => {
                self.placebo_mean(tc) + self.placebo_slope * self.alt_slope_multiplier * (t - tc)
            }
            _ => self.placebo_mean(t),
        }
    }

    /// Probability of discontinuing right after observing `y`.
    pub fn disc_prob(&self, group: Group, y: f64) -> f64 {
        let base = match group {
            Group::Control => self.disc_base_prob_placebo,
            Group::Intervention => self.disc_base_prob_active,
        };
        if base <= 0.0 || base >= 1.0 {
            return base;
        }
        let excess = ((y - self.disc_threshold) / self.disc_step).max(0.0);
        let logit = (base / (1.0 - base)).ln() + self.disc_odds_ratio.ln() * excess;
        1.0 / (1.0 + (-logit).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hypothesis {
    Null,
    Alternative,
}

impl FromStr for Hypothesis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "null" => Ok(Hypothesis::Null),
            "alternative" => Ok(Hypothesis::Alternative),
            other => Err(format!("unknown hypothesis '{other}' (expected null or alternative)")),
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Hypothesis::Null => "null",
            Hypothesis::Alternative => "alternative",
        })
    }
}

/// One simulated subject before dropout is applied to the record.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSubject {
    pub group: Group,
    pub baseline: f64,
    /// Follow-up outcomes as they would be observed without dropout.
    pub full: Vec<f64>,
    /// Visit (0 = baseline) after which study drug was discontinued.
    pub disc_visit: Option<usize>,
    pub dropped_out: bool,
}

impl SimSubject {
    pub fn outcomes(&self, c: &SimConfig) -> Vec<Option<f64>> {
        self.full
            .iter()
            .enumerate()
            .map(|(k, &y)| {
                let visit = k + 1;
                let missing = match (self.dropped_out, self.disc_visit) {
                    (true, Some(j)) => visit > j || (c.dropout_includes_disc_visit && visit == j),
                    _ => false,
                };
                if missing {
                    None
                } else {
                    Some(y)
                }
            })
            .collect()
    }
}

pub fn simulate_subject<R: Rng + ?Sized>(c: &SimConfig, h: Hypothesis, group: Group, rng: &mut R) -> SimSubject {
    let j = c.n_visits();
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    let b0 = c.re_sd_intercept * z1;
    let b1 = c.re_sd_slope * (c.re_corr * z1 + (1.0 - c.re_corr * c.re_corr).sqrt() * z2);
    let resid: Vec<f64> = (0..=j).map(|_| c.resid_sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let u_disc: Vec<f64> = (0..j).map(|_| rng.gen::<f64>()).collect();
    let u_drop: f64 = rng.gen();

    let group_mean = |t: f64| match group {
        Group::Control => c.placebo_mean(t),
        Group::Intervention => c.active_mean(t, h),
    };
    let mut y = Vec::with_capacity(j + 1);
    let mut disc: Option<usize> = None;
    for k in 0..=j {
        let t = c.time(k);
        let mean = match (group, disc) {
            // After discontinuation the active mean follows the placebo slope.
            (Group::Intervention, Some(d)) => {
                let td = c.time(d);
                group_mean(td) + c.placebo_slope * (t - td)
            }
            _ => group_mean(t),
        };
        let yk = mean + b0 + b1 * t + resid[k];
        y.push(yk);
        let eligible = k < j && (k > 0 || c.disc_from_baseline);
        if disc.is_none() && eligible && u_disc[k] < c.disc_prob(group, yk) {
            disc = Some(k);
        }
    }
    SimSubject {
        group,
        baseline: y[0],
        full: y[1..].to_vec(),
        disc_visit: disc,
        dropped_out: disc.is_some() && u_drop < c.dropout_prob_at_disc,
    }
}

/// Generator for subject `i` of simulation `sim`: one ChaCha stream each.
pub fn subject_rng(seed: u64, sim: u64, i: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sim << 24) | i);
    rng
}

fn subject_group(c: &SimConfig, i: usize) -> Group {
    if i < c.n_per_group {
        Group::Control
    } else {
        Group::Intervention
    }
}

pub fn generate_trial(c: &SimConfig, h: Hypothesis, seed: u64) -> TrialDataset {
    generate_trial_indexed(c, h, seed, 0)
}

/// Trial number `sim` of a study seeded with `seed`; controls come first.
pub fn generate_trial_indexed(c: &SimConfig, h: Hypothesis, seed: u64, sim: u64) -> TrialDataset {
    let subjects = (0..2 * c.n_per_group)
        .map(|i| {
            let group = subject_group(c, i);
            let s = simulate_subject(c, h, group, &mut subject_rng(seed, sim, i as u64));
            let mut subject = Subject::new(format!("s{:04}", i + 1), group, s.outcomes(c)).with_baseline(BASELINE, s.baseline);
            if let Some(d) = s.disc_visit {
                subject = subject.with_ice(IceRecord::new(d, Strategy::Mar));
            }
            subject
        })
        .collect();
    TrialDataset::new(
        VisitGrid::numbered(c.n_visits()),
        CovariateSchema::baseline(&[BASELINE]),
        subjects,
    )
}

/// Large-sample moments of the generator, from `n_per_group` subjects per arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationMoments {
    pub n_per_group: usize,
    pub sd_baseline: f64,
    pub sd_last: f64,
    pub disc_rate_control: f64,
    pub disc_rate_intervention: f64,
    pub mean_change_control: f64,
    pub mean_change_intervention: f64,
    /// Monte Carlo SE of the difference in mean change.
    pub se_difference: f64,
}

impl PopulationMoments {
    pub fn treatment_effect(&self) -> f64 {
        self.mean_change_intervention - self.mean_change_control
    }
}

pub fn population_moments(c: &SimConfig, h: Hypothesis, n_per_group: usize, seed: u64) -> PopulationMoments {
    #[derive(Default, Clone, Copy)]
    struct Acc {
        n: f64,
        disc: f64,
        change: f64,
        change_sq: f64,
        base: f64,
        base_sq: f64,
        last: f64,
        last_sq: f64,
    }
    let chunk = 10_000usize;
    let n_chunks = n_per_group.div_ceil(chunk);
    let per_chunk: Vec<[Acc; 2]> = (0..n_chunks)
        .into_par_iter()
        .map(|ch| {
            let mut acc = [Acc::default(); 2];
            for (g, group) in [Group::Control, Group::Intervention].into_iter().enumerate() {
                for i in ch * chunk..((ch + 1) * chunk).min(n_per_group) {
                    let idx = (2 * i + g) as u64;
                    let s = simulate_subject(c, h, group, &mut subject_rng(seed, 0, idx));
                    let last = *s.full.last().expect("at least one visit");
                    let ch = last - s.baseline;
                    let a = &mut acc[g];
                    a.n += 1.0;
                    a.disc += f64::from(u8::from(s.disc_visit.is_some()));
                    a.change += ch;
                    a.change_sq += ch * ch;
                    a.base += s.baseline;
                    a.base_sq += s.baseline * s.baseline;
                    a.last += last;
                    a.last_sq += last * last;
                }
            }
            acc
        })
        .collect();
    let mut tot = [Acc::default(); 2];
    for acc in per_chunk {
        for g in 0..2 {
            let (t, a) = (&mut tot[g], acc[g]);
            t.n += a.n;
            t.disc += a.disc;
            t.change += a.change;
            t.change_sq += a.change_sq;
            t.base += a.base;
            t.base_sq += a.base_sq;
            t.last += a.last;
            t.last_sq += a.last_sq;
        }
    }
    let var = |s: f64, sq: f64, n: f64| (sq - s * s / n) / (n - 1.0);
    // Null-hypothesis marginal SDs are the same in both arms; pool them.
    let pooled_sd = |f: fn(&Acc) -> (f64, f64)| {
        let (s0, q0) = f(&tot[0]);
        let (s1, q1) = f(&tot[1]);
        ((var(s0, q0, tot[0].n) + var(s1, q1, tot[1].n)) / 2.0).sqrt()
    };
    let mean_change = |a: &Acc| a.change / a.n;
    let var_mean_change = |a: &Acc| var(a.change, a.change_sq, a.n) / a.n;
    PopulationMoments {
        n_per_group,
        sd_baseline: pooled_sd(|a| (a.base, a.base_sq)),
        sd_last: pooled_sd(|a| (a.last, a.last_sq)),
        disc_rate_control: tot[0].disc / tot[0].n,
        disc_rate_intervention: tot[1].disc / tot[1].n,
        mean_change_control: mean_change(&tot[0]),
        mean_change_intervention: mean_change(&tot[1]),
        se_difference: (var_mean_change(&tot[0]) + var_mean_change(&tot[1])).sqrt(),
    }
}

/// Imputation model with group, visit, group×visit, baseline and
/// baseline×visit; every ICE masked; ANCOVA of change at the last visit.
pub fn default_pipeline() -> Pipeline {
    Pipeline::new(
        MeanModelSpec::minimal()
            .with(Term::Covariate(BASELINE.into()))
            .with(Term::CovariateByVisit(BASELINE.into())),
        AncovaSpec::change_from_baseline(BASELINE),
    )
    .with_mask(MaskRule::AllIces)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StudyMethod {
    Jackknife,
    Bootstrap { b: usize },
}

impl StudyMethod {
    pub fn inference_method(&self) -> InferenceMethod {
        match self {
            StudyMethod::Jackknife => InferenceMethod::Jackknife,
            StudyMethod::Bootstrap { .. } => InferenceMethod::Bootstrap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub strategies: Vec<Strategy>,
    pub methods: Vec<StudyMethod>,
    pub n_sims: usize,
    pub seed: u64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.05
}

impl StudySpec {
    pub fn new(strategies: &[Strategy], methods: &[StudyMethod], n_sims: usize, seed: u64) -> Self {
        StudySpec {
            strategies: strategies.to_vec(),
            methods: methods.to_vec(),
            n_sims,
            seed,
            alpha: default_alpha(),
        }
    }
}

/// One (simulation, strategy, method) result.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub sim: usize,
    pub strategy: Strategy,
    pub method: InferenceMethod,
    pub theta: f64,
    pub se: f64,
    pub reject: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimOutcome {
    Completed(Vec<RunRecord>),
    Failed { sim: usize, message: String },
}

/// Seed of the bootstrap for simulation `sim`, independent of the data streams.
fn bootstrap_seed(seed: u64, sim: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(sim);
    rng.next_u64()
}

pub fn run_simulation(c: &SimConfig, h: Hypothesis, spec: &StudySpec, p: &Pipeline, sim: usize) -> SimOutcome {
    let d = generate_trial_indexed(c, h, spec.seed, sim as u64);
    let rules: Vec<StrategyRule> = spec.strategies.iter().map(|&s| StrategyRule::Override(s)).collect();
    let mut records = Vec::new();
    for method in &spec.methods {
        let results: Result<Vec<(f64, f64)>, String> = match method {
            StudyMethod::Jackknife => jackknife_strategies(&d, p, &rules)
                .map(|r| r.iter().map(|j| (j.theta_hat, j.se_jack)).collect())
                .map_err(|e| e.to_string()),
            StudyMethod::Bootstrap { b } => {
                bootstrap_strategies(&d, p, &rules, *b, bootstrap_seed(spec.seed, sim as u64), &BootstrapOptions::default())
                    .map(|r| r.iter().map(|x| (x.theta_hat, x.se_boot)).collect())
                    .map_err(|e| e.to_string())
            }
        };
        match results {
            Ok(v) => {
                for (&strategy, (theta, se)) in spec.strategies.iter().zip(v) {
                    let (_, _, pval) = normal_approximation(theta, se, 0.0, spec.alpha);
                    records.push(RunRecord {
                        sim,
                        strategy,
                        method: method.inference_method(),
                        theta,
                        se,
                        reject: pval < spec.alpha,
                    });
                }
            }
            Err(message) => return SimOutcome::Failed { sim, message },
        }
    }
    SimOutcome::Completed(records)
}

pub fn run_study(c: &SimConfig, h: Hypothesis, spec: &StudySpec, p: &Pipeline) -> SummaryTable {
    let outcomes: Vec<SimOutcome> = (0..spec.n_sims)
        .into_par_iter()
        .map(|sim| run_simulation(c, h, spec, p, sim))
        .collect();
    summarize(&outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub method: InferenceMethod,
    pub n_sims: usize,
    pub n_fit_failures: usize,
    pub mean_theta: f64,
    /// NaN when fewer than two simulations contributed.
    pub sd_theta: f64,
    pub mean_se: f64,
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

pub fn summarize(outcomes: &[SimOutcome]) -> SummaryTable {
    let n_sims = outcomes.len();
    let failures = outcomes.iter().filter(|o| matches!(o, SimOutcome::Failed { .. })).count();
    let records: Vec<&RunRecord> = outcomes
        .iter()
        .filter_map(|o| match o {
            SimOutcome::Completed(r) => Some(r),
            SimOutcome::Failed { .. } => None,
        })
        .flatten()
        .collect();
    let mut keys: Vec<(Strategy, InferenceMethod)> = Vec::new();
    for r in &records {
        if !keys.contains(&(r.strategy, r.method)) {
            keys.push((r.strategy, r.method));
        }
    }
    let rows = keys
        .into_iter()
        .map(|(strategy, method)| {
            let sel: Vec<&&RunRecord> = records.iter().filter(|r| r.strategy == strategy && r.method == method).collect();
            let n = sel.len() as f64;
            let mean_theta = sel.iter().map(|r| r.theta).sum::<f64>() / n;
            let sd_theta = if sel.len() < 2 {
                f64::NAN
            } else {
                (sel.iter().map(|r| (r.theta - mean_theta).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            };
            SummaryRow {
                strategy,
                method,
                n_sims,
                n_fit_failures: failures,
                mean_theta,
                sd_theta,
                mean_se: sel.iter().map(|r| r.se).sum::<f64>() / n,
                rejection_rate: sel.iter().filter(|r| r.reject).count() as f64 / n,
            }
        })
        .collect();
    SummaryTable { rows }
}

impl SummaryTable {
    pub fn row(&self, strategy: Strategy, method: InferenceMethod) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.strategy == strategy && r.method == method)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, csv::Error> {
        let rows = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(input)
            .deserialize()
            .collect::<Result<Vec<SummaryRow>, _>>()?;
        Ok(SummaryTable { rows })
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let header = ["strategy", "method", "mean theta", "SD theta", "mean se", "reject", "sims", "failed"];
        let cells: Vec<[String; 8]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.strategy.to_string(),
                    r.method.to_string(),
                    format!("{:.3}", r.mean_theta),
                    format!("{:.3}", r.sd_theta),
                    format!("{:.3}", r.mean_se),
                    format!("{:.1}%", 100.0 * r.rejection_rate),
                    r.n_sims.to_string(),
                    r.n_fit_failures.to_string(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for row in &cells {
            for (k, c) in row.iter().enumerate() {
                widths[k] = widths[k].max(c.len());
            }
        }
        let line = |row: &[String]| {
            row.iter()
                .enumerate()
                .map(|(k, c)| if k < 2 { format!("{c:<w$}", w = widths[k]) } else { format!("{c:>w$}", w = widths[k]) })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}
