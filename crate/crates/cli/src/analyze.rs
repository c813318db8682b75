use std::io::Write;
use std::path::PathBuf;
use std::time::SystemTime;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use condmean::dataset::{load_csv, Strategy, TrialDataset};
use condmean::impute::{apply_delta, impute_dataset, StrategyRule};
use condmean::inference::{
    bootstrap_strategies, jackknife_strategies, run_strategies, BootstrapOptions, InferenceError, InferenceResult,
    Pipeline,
};
use condmean::mmrm::fit_reml;
use serde::Serialize;

use crate::config::{self, AnalyzeConfig};
use crate::manifest::{self, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Jackknife,
    /// Bootstrap standard error with the normal approximation.
    Bootstrap,
    /// Percentile interval and inverted-percentile p-value.
    BootstrapPercentile,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Long-format CSV: subject_id, group, visit, outcome, covariates, optional ICE columns.
    #[arg(long)]
    data: PathBuf,
    /// TOML (or .json) file with the data schema and model settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategies for post-ICE data (MAR, CR, J2R, CIR or all). Default: as recorded in the data.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<String>,
    #[arg(long, value_enum, default_value_t = Method::Jackknife)]
    method: Method,
    /// Bootstrap replicates.
    #[arg(long = "B", default_value_t = 10_000)]
    b: usize,
    #[arg(long, default_value_t = 20_240_101)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Resample within randomized groups.
    #[arg(long)]
    stratified: bool,
    #[arg(long, default_value = "condmean-analysis")]
    out: PathBuf,
}

#[derive(Args)]
pub struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Strategy applied to every treatment-policy ICE. Default: as recorded.
    #[arg(long)]
    strategy: Option<String>,
    /// Output CSV; the run manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

fn parse_rules(names: &[String]) -> anyhow::Result<Vec<(String, StrategyRule)>> {
    if names.is_empty() {
        return Ok(vec![("as recorded".into(), StrategyRule::FromData)]);
    }
    let mut out = Vec::new();
    for n in names {
        if n.eq_ignore_ascii_case("all") {
            out.extend(Strategy::ALL.iter().map(|s| (s.to_string(), StrategyRule::Override(*s))));
        } else {
            let s: Strategy = n.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            out.push((s.to_string(), StrategyRule::Override(s)));
        }
    }
    Ok(out)
}

fn load(data: &PathBuf, config: &Option<PathBuf>) -> anyhow::Result<(AnalyzeConfig, TrialDataset, Pipeline)> {
    let cfg: AnalyzeConfig = match config {
        Some(path) => config::read(path)?,
        None => AnalyzeConfig::default(),
    };
    let d = load_csv(data, &cfg.data).with_context(|| format!("data: cannot load {}", data.display()))?;
    let report = d.validate();
    if !report.is_valid() {
        bail!("validation: {report}");
    }
    let p = cfg.pipeline(&d);
    Ok((cfg, d, p))
}

#[derive(Serialize)]
struct StrategyOutcome {
    strategy: String,
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lsmean_control: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lsmean_intervention: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inference: Option<InferenceResult>,
}

#[derive(Serialize)]
struct AnalysisReport<'a> {
    manifest: &'a str,
    data: String,
    n_subjects: usize,
    method: Method,
    results: Vec<StrategyOutcome>,
}

fn infer(
    d: &TrialDataset,
    p: &Pipeline,
    rules: &[StrategyRule],
    args: &AnalyzeArgs,
) -> Result<Vec<InferenceResult>, InferenceError> {
    let opts = BootstrapOptions {
        stratified: args.stratified,
        ..BootstrapOptions::default()
    };
    match args.method {
        Method::Jackknife => Ok(jackknife_strategies(d, p, rules)?
            .iter()
            .map(|j| InferenceResult::from_jackknife(j, 0.0, args.alpha))
            .collect()),
        Method::Bootstrap => Ok(bootstrap_strategies(d, p, rules, args.b, args.seed, &opts)?
            .iter()
            .map(|r| InferenceResult::from_bootstrap(r, 0.0, args.alpha))
            .collect()),
        Method::BootstrapPercentile => bootstrap_strategies(d, p, rules, args.b, args.seed, &opts)?
            .iter()
            .map(|r| InferenceResult::from_bootstrap_percentile(r, 0.0, args.alpha))
            .collect(),
    }
}

fn outcome(label: &str, d: &TrialDataset, p: &Pipeline, rule: StrategyRule, inf: Result<InferenceResult, String>) -> StrategyOutcome {
    let est = run_strategies(d, p, &[rule]).map(|e| e[0]);
    match (est, inf) {
        (Ok(e), Ok(i)) => StrategyOutcome {
            strategy: label.to_string(),
            status: "ok",
            error: None,
            lsmean_control: Some(e.lsmean_control),
            lsmean_intervention: Some(e.lsmean_intervention),
            inference: Some(i),
        },
        (Err(e), _) => failed(label, e.to_string()),
        (_, Err(e)) => failed(label, e),
    }
}

fn failed(label: &str, error: String) -> StrategyOutcome {
    StrategyOutcome {
        strategy: label.to_string(),
        status: "error",
        error: Some(error),
        lsmean_control: None,
        lsmean_intervention: None,
        inference: None,
    }
}

fn table(results: &[StrategyOutcome], alpha: f64) -> String {
    let level = format!("{:.0}% CI", 100.0 * (1.0 - alpha));
    let header = ["strategy", "LS mean control", "LS mean intervention", "difference", "SE", level.as_str(), "p"];
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| match (&r.inference, r.lsmean_control, r.lsmean_intervention) {
            (Some(i), Some(c), Some(t)) => vec![
                r.strategy.clone(),
                format!("{c:.2}"),
                format!("{t:.2}"),
                format!("{:.2}", i.estimate),
                format!("{:.2}", i.se),
                format!("({:.2}, {:.2})", i.ci_low, i.ci_high),
                format!("{:.3}", i.p_two_sided),
            ],
            _ => vec![r.strategy.clone(), format!("failed: {}", r.error.clone().unwrap_or_default())],
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows.iter().filter(|r| r.len() == header.len()) {
        for (k, c) in row.iter().enumerate() {
            widths[k] = widths[k].max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(k, c)| match widths.get(k) {
                Some(&w) if cells.len() == header.len() && k > 0 => format!("{c:>w$}"),
                Some(&w) if cells.len() == header.len() => format!("{c:<w$}"),
                _ => c.clone(),
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&header.map(String::from)) + "\n";
    for r in &rows {
        out += &line(r);
        out.push('\n');
    }
    out
}

pub fn run(args: AnalyzeArgs, argv: &[String]) -> anyhow::Result<bool> {
    let started = SystemTime::now();
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        bail!("--alpha must lie strictly between 0 and 1");
    }
    if args.method != Method::Jackknife && args.b < 1 {
        bail!("--B must be at least 1");
    }
    let rules = parse_rules(&args.strategy)?;
    let (cfg, d, p) = load(&args.data, &args.config)?;
    let plain: Vec<StrategyRule> = rules.iter().map(|(_, r)| *r).collect();

    // All strategies at once share model fits; on failure, redo them one by
    // one so every strategy gets its own status.
    let results: Vec<StrategyOutcome> = match infer(&d, &p, &plain, &args) {
        Ok(inf) => rules
            .iter()
            .zip(inf)
            .map(|((label, rule), i)| outcome(label, &d, &p, *rule, Ok(i)))
            .collect(),
        Err(_) => rules
            .iter()
            .map(|(label, rule)| {
                let inf = infer(&d, &p, &[*rule], &args).map(|mut v| v.remove(0)).map_err(|e| e.to_string());
                outcome(label, &d, &p, *rule, inf)
            })
            .collect(),
    };

    crate::ensure_dir(&args.out)?;
    let text = table(&results, args.alpha);
    print!("{text}");
    for r in results.iter().filter(|r| r.status != "ok") {
        eprintln!("error: {}: {}", r.strategy, r.error.as_deref().unwrap_or(""));
    }
    let all_ok = results.iter().all(|r| r.status == "ok");
    let report = AnalysisReport {
        manifest: manifest::FILE_NAME,
        data: args.data.display().to_string(),
        n_subjects: d.subjects.len(),
        method: args.method,
        results,
    };
    std::fs::write(args.out.join("analysis.txt"), format!("{text}# manifest: {}\n", manifest::FILE_NAME))?;
    std::fs::write(args.out.join("analysis.json"), serde_json::to_string_pretty(&report)? + "\n")?;

    #[derive(Serialize)]
    struct Effective<'a> {
        config: &'a AnalyzeConfig,
        pipeline: &'a Pipeline,
        strategies: &'a [String],
        method: Method,
        b: usize,
        alpha: f64,
        stratified: bool,
    }
    let effective = Effective {
        config: &cfg,
        pipeline: &p,
        strategies: &args.strategy,
        method: args.method,
        b: args.b,
        alpha: args.alpha,
        stratified: args.stratified,
    };
    let seed = (args.method != Method::Jackknife).then_some(args.seed);
    RunManifest::new("analyze", argv, &effective, seed, started).write(
        &args.out.join(manifest::FILE_NAME),
        vec!["analysis.txt".into(), "analysis.json".into()],
    )?;
    Ok(all_ok)
}

pub fn run_impute(args: ImputeArgs, argv: &[String]) -> anyhow::Result<bool> {
    let started = SystemTime::now();
    let rule = match &args.strategy {
        None => StrategyRule::FromData,
        Some(s) => StrategyRule::Override(s.parse().map_err(|e| anyhow::anyhow!("{e}"))?),
    };
    let (cfg, d, p) = load(&args.data, &args.config)?;
    rule.check(&d).context("imputation")?;
    let assigned = rule.apply(&d);
    let fit = fit_reml(&assigned.mask_with(p.mask), &p.mean_spec, &p.cov_spec, &p.fit_options).context("model fit")?;
    let mut imputed = impute_dataset(&assigned, &fit, StrategyRule::FromData).context("imputation")?;
    if let Some(delta) = &p.delta {
        imputed = apply_delta(&imputed, delta);
    }
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::ensure_dir(&dir.to_path_buf())?;
    }
    let manifest_path = args.out.with_extension("manifest.json");
    let manifest_name = manifest_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut file = std::fs::File::create(&args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    writeln!(file, "# manifest: {manifest_name}")?;
    imputed.write_csv(&mut file)?;
    RunManifest::new("impute", argv, &(&cfg, &p, &args.strategy), None, started)
        .write(&manifest_path, vec![args.out.display().to_string()])?;
    println!("wrote {}", args.out.display());
    Ok(true)
}
