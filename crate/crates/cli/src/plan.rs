use anyhow::bail;
use clap::{Args, ValueEnum};
use condmean::inference::{pb_accuracy, PValueMethod};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlanMethod {
    Normal,
    Percentile,
    Both,
}

#[derive(Args)]
pub struct PlanArgs {
    /// p-value that infinitely many replicates would give.
    #[arg(long = "p-inf")]
    p_inf: f64,
    #[arg(long = "B", default_value_t = 999)]
    b: usize,
    #[arg(long, value_enum, default_value_t = PlanMethod::Both)]
    method: PlanMethod,
    /// Significance threshold for the decision probabilities.
    #[arg(long, default_value_t = 0.025)]
    tau: f64,
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

pub fn run(args: PlanArgs) -> anyhow::Result<bool> {
    if !(args.p_inf > 0.0 && args.p_inf < 1.0) {
        bail!("--p-inf must lie strictly between 0 and 1, got {}", args.p_inf);
    }
    if !(args.tau > 0.0 && args.tau < 1.0) {
        bail!("--tau must lie strictly between 0 and 1, got {}", args.tau);
    }
    let methods = match args.method {
        PlanMethod::Normal => vec![PValueMethod::Normal],
        PlanMethod::Percentile => vec![PValueMethod::Percentile],
        PlanMethod::Both => vec![PValueMethod::Normal, PValueMethod::Percentile],
    };
    for m in methods {
        let a = pb_accuracy(m, args.p_inf, args.b).map_err(anyhow::Error::msg)?;
        let (lo, hi) = a.range95();
        let name = match m {
            PValueMethod::Normal => "normal",
            PValueMethod::Percentile => "percentile",
        };
        println!("{name} method, B = {}, p_inf = {}", args.b, pct(args.p_inf));
        println!("  95% range of p_B: {} to {}", pct(lo), pct(hi));
        println!("  P(p_B <= {}) = {}", pct(args.tau), pct(a.prob_at_most(args.tau)));
        println!("  P(p_B > {}) = {}", pct(args.tau), pct(a.prob_above(args.tau)));
    }
    Ok(true)
}
