//! ANCOVA of a completed dataset at one visit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Group;
use crate::impute::ImputedDataset;
use crate::linalg;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("unknown target visit '{0}'")]
    UnknownVisit(String),
    #[error("missing value at the target visit for subject '{0}'")]
    MissingTarget(String),
    #[error("missing covariate '{covariate}' for subject '{subject}'")]
    MissingCovariate { covariate: String, subject: String },
    #[error("ANCOVA design is rank deficient (columns: {})", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("ANCOVA needs more subjects than parameters ({n} subjects, {p} parameters)")]
    TooFewSubjects { n: usize, p: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Dependent {
    Outcome,
    /// Outcome minus the named baseline covariate.
    ChangeFromBaseline { baseline: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncovaSpec {
    /// Visit label; the last visit when absent.
    #[serde(default)]
    pub target_visit: Option<String>,
    pub dependent: Dependent,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl AncovaSpec {
    /// Outcome at the last visit on group alone.
    pub fn unadjusted() -> Self {
        AncovaSpec {
            target_visit: None,
            dependent: Dependent::Outcome,
            covariates: Vec::new(),
        }
    }

    /// Change from `baseline` at the last visit, adjusted for `baseline`.
    pub fn change_from_baseline(baseline: &str) -> Self {
        AncovaSpec {
            target_visit: None,
            dependent: Dependent::ChangeFromBaseline {
                baseline: baseline.to_string(),
            },
            covariates: vec![baseline.to_string()],
        }
    }

    pub fn with_covariate(mut self, name: &str) -> Self {
        self.covariates.push(name.to_string());
        self
    }

    pub fn at_visit(mut self, label: &str) -> Self {
        self.target_visit = Some(label.to_string());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub theta: f64,
    pub lsmean_control: f64,
    pub lsmean_intervention: f64,
    pub residual_df: usize,
}

impl EffectEstimate {
    pub fn ls_means(&self) -> (f64, f64) {
        (self.lsmean_control, self.lsmean_intervention)
    }
}

pub fn fit_ancova(d: &ImputedDataset, spec: &AncovaSpec) -> Result<EffectEstimate, AnalysisError> {
    let grid = &d.base.grid;
    let target = match &spec.target_visit {
        None => grid.len() - 1,
        Some(label) => grid
            .position(label)
            .ok_or_else(|| AnalysisError::UnknownVisit(label.clone()))?,
    };
    let n = d.base.subjects.len();
    let mut y = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut covs = vec![Vec::with_capacity(n); spec.covariates.len()];
    let covariate = |s: &crate::dataset::Subject, name: &str| {
        s.covariate_at(name, target).ok_or_else(|| AnalysisError::MissingCovariate {
            covariate: name.to_string(),
            subject: s.id.clone(),
        })
    };
    for (i, s) in d.base.subjects.iter().enumerate() {
        let v = d.filled[i][target];
        if !v.is_finite() {
            return Err(AnalysisError::MissingTarget(s.id.clone()));
        }
        let v = match &spec.dependent {
            Dependent::Outcome => v,
            Dependent::ChangeFromBaseline { baseline } => v - covariate(s, baseline)?,
        };
        y.push(v);
        groups.push(s.group);
        for (k, name) in spec.covariates.iter().enumerate() {
            covs[k].push(covariate(s, name)?);
        }
    }
    ancova(&y, &groups, &covs, &spec.covariates)
}

/// Least squares of `y ~ 1 + group + covariates` with covariates centred at
/// their overall means, so the intercept is the control LS mean.
pub fn ancova(
    y: &[f64],
    groups: &[Group],
    covariates: &[Vec<f64>],
    names: &[String],
) -> Result<EffectEstimate, AnalysisError> {
    let n = y.len();
    let p = 2 + covariates.len();
    if n <= p {
        return Err(AnalysisError::TooFewSubjects { n, p });
    }
    let centred: Vec<Vec<f64>> = covariates
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|x| x - m).collect()
        })
        .collect();
    let row = |i: usize, out: &mut [f64]| {
        out[0] = 1.0;
        out[1] = groups[i].indicator();
        for (k, c) in centred.iter().enumerate() {
            out[2 + k] = c[i];
        }
    };
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    let mut x = vec![0.0; p];
    for i in 0..n {
        row(i, &mut x);
        for a in 0..p {
            xty[a] += x[a] * y[i];
            for b in 0..=a {
                xtx[a * p + b] += x[a] * x[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[b * p + a] = xtx[a * p + b];
        }
    }
    let dependent = linalg::dependent_columns(&xtx, p, 1e-10);
    if !dependent.is_empty() {
        let label = |c: usize| match c {
            0 => "(Intercept)".to_string(),
            1 => "group".to_string(),
            k => names.get(k - 2).cloned().unwrap_or_else(|| format!("x{}", k - 2)),
        };
        return Err(AnalysisError::RankDeficient {
            columns: dependent.into_iter().map(label).collect(),
        });
    }
    let mut l = xtx;
    linalg::cholesky_in_place(&mut l, p).map_err(|_| AnalysisError::RankDeficient { columns: Vec::new() })?;
    let mut beta = xty;
    linalg::chol_solve_in_place(&l, p, &mut beta);
    Ok(EffectEstimate {
        theta: beta[1],
        lsmean_control: beta[0],
        lsmean_intervention: beta[0] + beta[1],
        residual_df: n - p,
    })
}
