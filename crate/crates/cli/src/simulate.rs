use std::io::Write;
use std::path::PathBuf;
use std::time::SystemTime;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use condmean::dataset::Strategy;
use condmean::simgen::{default_pipeline, run_study, Hypothesis, SimConfig, StudyMethod, StudySpec};
use serde::Serialize;

use crate::manifest::{self, RunManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Discontinuation model calibrated to the published rates.
    Calibrated,
    /// Discontinuation model read word for word.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodName {
    Jackknife,
    Bootstrap,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// TOML (or .json) file overriding generator parameters of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Calibrated)]
    preset: Preset,
    #[arg(long)]
    hypothesis: Hypothesis,
    #[arg(long = "n-sims", default_value_t = 1000)]
    n_sims: usize,
    #[arg(long, default_value_t = 20_240_101)]
    seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "jackknife")]
    methods: Vec<MethodName>,
    /// Bootstrap replicates per simulated trial.
    #[arg(long = "B", default_value_t = 1000)]
    b: usize,
    #[arg(long, value_delimiter = ',', default_value = "MAR,CR,J2R,CIR")]
    strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value = "condmean-simulation")]
    out: PathBuf,
}

/// Preset with the fields of the config file laid over it.
fn load_config(args: &SimulateArgs) -> anyhow::Result<SimConfig> {
    let preset = match args.preset {
        Preset::Calibrated => SimConfig::default(),
        Preset::Literal => SimConfig::literal(),
    };
    let Some(path) = &args.config else { return Ok(preset) };
    let overrides: serde_json::Value = crate::config::read(path)?;
    let serde_json::Value::Object(overrides) = overrides else {
        bail!("config {} must be a table of generator parameters", path.display());
    };
    let mut merged = serde_json::to_value(&preset)?;
    let obj = merged.as_object_mut().expect("config serializes to an object");
    for (k, v) in overrides {
        obj.insert(k, v);
    }
    serde_json::from_value(merged).with_context(|| format!("invalid simulation config {}", path.display()))
}

pub fn run(args: SimulateArgs, argv: &[String]) -> anyhow::Result<bool> {
    let started = SystemTime::now();
    let config = load_config(&args)?;
    let mut problems = config.problems();
    if args.n_sims < 1 {
        problems.push("--n-sims must be at least 1".into());
    }
    if args.methods.contains(&MethodName::Bootstrap) && args.b < 2 {
        problems.push("--B must be at least 2".into());
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        problems.push("--alpha must lie strictly between 0 and 1".into());
    }
    if args.strategies.is_empty() {
        problems.push("at least one strategy is required".into());
    }
    if !problems.is_empty() {
        bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    let methods: Vec<StudyMethod> = args
        .methods
        .iter()
        .map(|m| match m {
            MethodName::Jackknife => StudyMethod::Jackknife,
            MethodName::Bootstrap => StudyMethod::Bootstrap { b: args.b },
        })
        .collect();
    let mut spec = StudySpec::new(&args.strategies, &methods, args.n_sims, args.seed);
    spec.alpha = args.alpha;
    let pipeline = default_pipeline();
    let table = run_study(&config, args.hypothesis, &spec, &pipeline);

    crate::ensure_dir(&args.out)?;
    let text = table.to_text();
    print!("{text}");
    std::fs::write(args.out.join("summary.txt"), format!("{text}# manifest: {}\n", manifest::FILE_NAME))?;
    let mut csv = std::fs::File::create(args.out.join("summary.csv"))?;
    writeln!(csv, "# manifest: {}", manifest::FILE_NAME)?;
    table.write_csv(&mut csv)?;

    #[derive(Serialize)]
    struct Effective<'a> {
        generator: &'a SimConfig,
        hypothesis: Hypothesis,
        study: &'a StudySpec,
    }
    RunManifest::new(
        "simulate",
        argv,
        &Effective {
            generator: &config,
            hypothesis: args.hypothesis,
            study: &spec,
        },
        Some(args.seed),
        started,
    )
    .write(
        &args.out.join(manifest::FILE_NAME),
        vec!["summary.txt".into(), "summary.csv".into()],
    )?;
    Ok(true)
}
