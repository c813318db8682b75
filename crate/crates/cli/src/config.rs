//! Configuration files: TOML, or JSON when the extension is `.json`.

use std::path::Path;

use anyhow::Context;
use condmean::analysis::AncovaSpec;
use condmean::dataset::{CovariateKind, CsvSchema, MaskRule, TrialDataset};
use condmean::impute::{DeltaAdjustment, DeltaScope};
use condmean::inference::Pipeline;
use condmean::mmrm::{CovarianceSpec, FitOptions, MeanModelSpec, Term};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub fn read<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("invalid JSON config {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("invalid TOML config {}", path.display()))
    }
}

/// The same offsets at every visit for every subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformDelta {
    pub per_visit: Vec<f64>,
    #[serde(default)]
    pub applies_to: DeltaScope,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub data: CsvSchema,
    /// Default: group, visit, group×visit plus each baseline covariate and its visit interaction.
    pub mean_model: Option<MeanModelSpec>,
    pub covariance: CovarianceSpec,
    pub mask: MaskRule,
    /// Default: outcome at the last visit adjusted for every baseline covariate.
    pub ancova: Option<AncovaSpec>,
    pub delta: Option<UniformDelta>,
    pub fit: FitOptions,
}

impl AnalyzeConfig {
    fn baseline_covariates(&self) -> Vec<String> {
        self.data
            .covariates
            .covariates
            .iter()
            .filter(|c| c.kind == CovariateKind::Baseline)
            .map(|c| c.name.clone())
            .collect()
    }

    pub fn pipeline(&self, d: &TrialDataset) -> Pipeline {
        let names = self.baseline_covariates();
        let mean_spec = self.mean_model.clone().unwrap_or_else(|| {
            names.iter().fold(MeanModelSpec::minimal(), |m, n| {
                m.with(Term::Covariate(n.clone())).with(Term::CovariateByVisit(n.clone()))
            })
        });
        let ancova = self.ancova.clone().unwrap_or_else(|| {
            names.iter().fold(AncovaSpec::unadjusted(), |a, n| a.with_covariate(n))
        });
        let mut p = Pipeline::new(mean_spec, ancova).with_mask(self.mask);
        p.cov_spec = self.covariance;
        p.fit_options = self.fit;
        p.delta = self
            .delta
            .as_ref()
            .map(|u| DeltaAdjustment::uniform(d, &u.per_visit, u.applies_to));
        p
    }
}
