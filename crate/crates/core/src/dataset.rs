//! Trial data: visit grid, subjects, intercurrent events (ICEs), CSV ingestion,
//! validation, and the masking that produces the imputation-model view of the data.
//!
//! Visits are stored 0-based internally. An ICE is recorded by the number of
//! follow-up visits completed before it (`last_visit`), so visits
//! `0..last_visit` are pre-ICE and `last_visit..J` are post-ICE. A value of 0
//! means the event happened right after the baseline assessment.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token accepted in CSV cells (besides an empty cell) for a missing value.
pub const MISSING_TOKEN: &str = "NA";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("required column '{0}' not found in header")]
    MissingColumn(String),
    #[error("duplicate row for subject '{subject}' at visit '{visit}'")]
    DuplicateRow { subject: String, visit: String },
    #[error("unknown visit label '{visit}' (subject '{subject}')")]
    UnknownVisit { subject: String, visit: String },
    #[error("missing covariate '{covariate}' for subject '{subject}'")]
    MissingCovariate { subject: String, covariate: String },
    #[error("malformed strategy '{0}' (expected MAR, CR, J2R or CIR)")]
    MalformedStrategy(String),
    #[error("malformed ICE handling '{0}' (expected treatment_policy or hypothetical)")]
    MalformedHandling(String),
    #[error("unknown group label '{label}' for subject '{subject}'")]
    UnknownGroup { subject: String, label: String },
    #[error("cannot parse '{value}' as a number in column '{column}' (subject '{subject}')")]
    MalformedNumber {
        subject: String,
        column: String,
        value: String,
    },
    #[error("subject '{subject}' has conflicting values for '{field}' across rows")]
    Inconsistent { subject: String, field: String },
    #[error("subject '{0}' has an ICE strategy without an ICE visit (or vice versa)")]
    IncompleteIce(String),
    #[error("visit grid is invalid: {0}")]
    Grid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Control,
    Intervention,
}

impl Group {
    /// 0 for control, 1 for intervention (treatment coding).
    pub fn indicator(self) -> f64 {
        match self {
            Group::Control => 0.0,
            Group::Intervention => 1.0,
        }
    }

    pub fn flipped(self) -> Group {
        match self {
            Group::Control => Group::Intervention,
            Group::Intervention => Group::Control,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Control => f.write_str("control"),
            Group::Intervention => f.write_str("intervention"),
        }
    }
}

/// Imputation strategy for post-ICE missing outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MAR")]
    Mar,
    #[serde(rename = "CR")]
    CopyReference,
    #[serde(rename = "J2R")]
    JumpToReference,
    #[serde(rename = "CIR")]
    CopyIncrementsInReference,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Mar,
        Strategy::JumpToReference,
        Strategy::CopyReference,
        Strategy::CopyIncrementsInReference,
    ];

    pub fn is_reference_based(self) -> bool {
        !matches!(self, Strategy::Mar)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mar => "MAR",
            Strategy::CopyReference => "CR",
            Strategy::JumpToReference => "J2R",
            Strategy::CopyIncrementsInReference => "CIR",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "MAR" => Ok(Strategy::Mar),
            "CR" => Ok(Strategy::CopyReference),
            "J2R" => Ok(Strategy::JumpToReference),
            "CIR" => Ok(Strategy::CopyIncrementsInReference),
            other => Err(DataError::MalformedStrategy(other.to_string())),
        }
    }
}

/// How the estimand treats outcomes after the ICE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IceHandling {
    /// Post-ICE outcomes are relevant and kept when observed.
    #[default]
    TreatmentPolicy,
    /// Post-ICE outcomes must already be missing; they are imputed under MAR.
    Hypothetical,
}

impl FromStr for IceHandling {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "treatment_policy" => Ok(IceHandling::TreatmentPolicy),
            "hypothetical" => Ok(IceHandling::Hypothetical),
            other => Err(DataError::MalformedHandling(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IceRecord {
    /// Number of follow-up visits completed before the ICE (`t̃`).
    pub last_visit: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub handling: IceHandling,
}

impl IceRecord {
    pub fn new(last_visit: usize, strategy: Strategy) -> Self {
        IceRecord {
            last_visit,
            strategy,
            handling: IceHandling::TreatmentPolicy,
        }
    }

    /// True when visit `j` (0-based) lies after the event.
    pub fn is_post_ice(&self, j: usize) -> bool {
        j >= self.last_visit
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitGrid {
    labels: Vec<String>,
    baseline_label: String,
}

impl VisitGrid {
    pub fn new(labels: Vec<String>, baseline_label: impl Into<String>) -> Result<Self, DataError> {
        let baseline_label = baseline_label.into();
        if labels.is_empty() {
            return Err(DataError::Grid("at least one follow-up visit is required".into()));
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(DataError::Grid(format!("duplicate visit label '{l}'")));
            }
            if *l == baseline_label {
                return Err(DataError::Grid(format!(
                    "baseline label '{l}' also used as a follow-up visit"
                )));
            }
        }
        Ok(VisitGrid {
            labels,
            baseline_label,
        })
    }

    /// Grid with labels `v1..vJ` and baseline `v0`.
    pub fn numbered(j: usize) -> Self {
        VisitGrid::new((1..=j).map(|k| format!("v{k}")).collect(), "v0")
            .expect("numbered grid is valid")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn baseline_label(&self) -> &str {
        &self.baseline_label
    }

    /// 0-based position of a follow-up label.
    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Baseline,
    TimeVarying,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CovariateDef {
    pub name: String,
    pub kind: CovariateKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateSchema {
    pub covariates: Vec<CovariateDef>,
}

impl CovariateSchema {
    pub fn baseline(names: &[&str]) -> Self {
        CovariateSchema {
            covariates: names
                .iter()
                .map(|n| CovariateDef {
                    name: n.to_string(),
                    kind: CovariateKind::Baseline,
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CovariateDef> {
        self.covariates.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub group: Group,
    pub baseline: BTreeMap<String, f64>,
    #[serde(default)]
    pub time_varying: BTreeMap<String, Vec<f64>>,
    pub outcomes: Vec<Option<f64>>,
    pub ice: Option<IceRecord>,
}

impl Subject {
    pub fn new(id: impl Into<String>, group: Group, outcomes: Vec<Option<f64>>) -> Self {
        Subject {
            id: id.into(),
            group,
            baseline: BTreeMap::new(),
            time_varying: BTreeMap::new(),
            outcomes,
            ice: None,
        }
    }

    pub fn with_baseline(mut self, name: &str, value: f64) -> Self {
        self.baseline.insert(name.to_string(), value);
        self
    }

    pub fn with_ice(mut self, ice: IceRecord) -> Self {
        self.ice = Some(ice);
        self
    }

    /// Covariate value at a 0-based visit; baseline covariates are constant.
    pub fn covariate_at(&self, name: &str, visit: usize) -> Option<f64> {
        self.baseline
            .get(name)
            .copied()
            .or_else(|| self.time_varying.get(name).and_then(|v| v.get(visit).copied()))
    }

    pub fn n_visits(&self) -> usize {
        self.outcomes.len()
    }

    /// Strategy used for this subject's missing post-ICE data, if it is reference-based.
    pub fn reference_strategy(&self) -> Option<(usize, Strategy)> {
        self.ice
            .filter(|ice| ice.strategy.is_reference_based())
            .map(|ice| (ice.last_visit, ice.strategy))
    }
}

/// Partition of visits (0-based) into observed and missing, both in visit order.
pub fn split_observed_missing(s: &Subject) -> (Vec<usize>, Vec<usize>) {
    let mut observed = Vec::with_capacity(s.outcomes.len());
    let mut missing = Vec::new();
    for (j, y) in s.outcomes.iter().enumerate() {
        if y.is_some() {
            observed.push(j);
        } else {
            missing.push(j);
        }
    }
    (observed, missing)
}

/// Which ICEs have their post-ICE outcomes removed before fitting the imputation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Only ICEs handled by a reference-based strategy.
    #[default]
    ReferenceBased,
    /// Every recorded ICE, whatever its strategy.
    AllIces,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TooFewSubjects(usize),
    EmptyGroup(Group),
    DuplicateSubject(String),
    OutcomeLength {
        subject: String,
        expected: usize,
        found: usize,
    },
    MissingCovariate {
        subject: String,
        covariate: String,
    },
    HypotheticalPostIceObserved {
        subject: String,
        visit: usize,
    },
    IceAtFinalVisit {
        subject: String,
        last_visit: usize,
    },
    NonFinite {
        subject: String,
        field: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TooFewSubjects(n) => write!(f, "dataset has {n} subjects; at least 2 required"),
            Violation::EmptyGroup(g) => write!(f, "group without subjects: {g}"),
            Violation::DuplicateSubject(id) => write!(f, "duplicate subject id '{id}'"),
            Violation::OutcomeLength {
                subject,
                expected,
                found,
            } => write!(
                f,
                "subject '{subject}' has {found} outcomes; the visit grid has {expected}"
            ),
            Violation::MissingCovariate { subject, covariate } => {
                write!(f, "missing covariate '{covariate}' for subject '{subject}'")
            }
            Violation::HypotheticalPostIceObserved { subject, visit } => write!(
                f,
                "subject '{subject}' has an observed outcome at visit {} after a hypothetical ICE",
                visit + 1
            ),
            Violation::IceAtFinalVisit {
                subject,
                last_visit,
            } => write!(
                f,
                "subject '{subject}' has an ICE after visit {last_visit}, leaving no visit to impute"
            ),
            Violation::NonFinite { subject, field } => {
                write!(f, "subject '{subject}' has a non-finite value in '{field}'")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.violations.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub grid: VisitGrid,
    pub schema: CovariateSchema,
    pub subjects: Vec<Subject>,
}

impl TrialDataset {
    pub fn new(grid: VisitGrid, schema: CovariateSchema, subjects: Vec<Subject>) -> Self {
        TrialDataset {
            grid,
            schema,
            subjects,
        }
    }

    pub fn n_visits(&self) -> usize {
        self.grid.len()
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn validate(&self) -> ValidationReport {
        let j = self.grid.len();
        let mut violations = Vec::new();
        if self.subjects.len() < 2 {
            violations.push(Violation::TooFewSubjects(self.subjects.len()));
        }
        for g in [Group::Control, Group::Intervention] {
            if !self.subjects.iter().any(|s| s.group == g) {
                violations.push(Violation::EmptyGroup(g));
            }
        }
        let mut ids = HashSet::new();
        for s in &self.subjects {
            if !ids.insert(s.id.as_str()) {
                violations.push(Violation::DuplicateSubject(s.id.clone()));
            }
            if s.outcomes.len() != j {
                violations.push(Violation::OutcomeLength {
                    subject: s.id.clone(),
                    expected: j,
                    found: s.outcomes.len(),
                });
            }
            if s.outcomes.iter().flatten().any(|y| !y.is_finite()) {
                violations.push(Violation::NonFinite {
                    subject: s.id.clone(),
                    field: "outcome".into(),
                });
            }
            for def in &self.schema.covariates {
                let ok = match def.kind {
                    CovariateKind::Baseline => s.baseline.get(&def.name).map(|v| v.is_finite()),
                    CovariateKind::TimeVarying => s
                        .time_varying
                        .get(&def.name)
                        .map(|v| v.len() == j && v.iter().all(|x| x.is_finite())),
                };
                if ok != Some(true) {
                    violations.push(Violation::MissingCovariate {
                        subject: s.id.clone(),
                        covariate: def.name.clone(),
                    });
                }
            }
            if let Some(ice) = &s.ice {
                if ice.last_visit >= j {
                    violations.push(Violation::IceAtFinalVisit {
                        subject: s.id.clone(),
                        last_visit: ice.last_visit,
                    });
                }
                if ice.handling == IceHandling::Hypothetical {
                    if let Some(visit) = (ice.last_visit..s.outcomes.len())
                        .find(|&v| s.outcomes[v].is_some())
                    {
                        violations.push(Violation::HypotheticalPostIceObserved {
                            subject: s.id.clone(),
                            visit,
                        });
                    }
                }
            }
        }
        ValidationReport { violations }
    }

    /// The imputation-model view: post-ICE outcomes of reference-based ICEs set missing.
    pub fn mask_for_imputation(&self) -> TrialDataset {
        self.mask_with(MaskRule::ReferenceBased)
    }

    pub fn mask_with(&self, rule: MaskRule) -> TrialDataset {
        let mut out = self.clone();
        for s in &mut out.subjects {
            let Some(ice) = s.ice else { continue };
            let applies = match rule {
                MaskRule::ReferenceBased => ice.strategy.is_reference_based(),
                MaskRule::AllIces => true,
            };
            if applies {
                for y in s.outcomes.iter_mut().skip(ice.last_visit) {
                    *y = None;
                }
            }
        }
        out
    }

    /// Copy of the dataset without the subject at `index`.
    pub fn without_subject(&self, index: usize) -> TrialDataset {
        let mut subjects = Vec::with_capacity(self.subjects.len().saturating_sub(1));
        subjects.extend(
            self.subjects
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != index)
                .map(|(_, s)| s.clone()),
        );
        TrialDataset {
            grid: self.grid.clone(),
            schema: self.schema.clone(),
            subjects,
        }
    }

    /// Dataset built from the given subject indices (repeats allowed); ids are
    /// suffixed with the draw position so they stay unique.
    pub fn resample(&self, indices: &[usize]) -> TrialDataset {
        let subjects = indices
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let mut s = self.subjects[i].clone();
                s.id = format!("{}#{k}", s.id);
                s
            })
            .collect();
        TrialDataset {
            grid: self.grid.clone(),
            schema: self.schema.clone(),
            subjects,
        }
    }
}

/// Column names and group labels for the long-format CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    /// Follow-up visit labels in order. When absent, order of first appearance is used.
    pub visits: Option<Vec<String>>,
    pub baseline_label: String,
    pub covariates: CovariateSchema,
    pub control_label: String,
    pub intervention_label: String,
    pub subject_column: String,
    pub group_column: String,
    pub visit_column: String,
    pub outcome_column: String,
    pub ice_visit_column: String,
    pub ice_strategy_column: String,
    pub ice_handling_column: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            visits: None,
            baseline_label: "baseline".into(),
            covariates: CovariateSchema::default(),
            control_label: "control".into(),
            intervention_label: "intervention".into(),
            subject_column: "subject_id".into(),
            group_column: "group".into(),
            visit_column: "visit".into(),
            outcome_column: "outcome".into(),
            ice_visit_column: "ice_visit".into(),
            ice_strategy_column: "ice_strategy".into(),
            ice_handling_column: "ice_handling".into(),
        }
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == MISSING_TOKEN
}

fn parse_number(cell: &str, subject: &str, column: &str) -> Result<Option<f64>, DataError> {
    let cell = cell.trim();
    if is_missing(cell) {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| DataError::MalformedNumber {
            subject: subject.to_string(),
            column: column.to_string(),
            value: cell.to_string(),
        })
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TrialDataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

#[derive(Default)]
struct RawSubject {
    group: Option<Group>,
    baseline: BTreeMap<String, f64>,
    rows: HashMap<String, (Option<f64>, BTreeMap<String, f64>)>,
    ice_visit: Option<String>,
    ice_strategy: Option<Strategy>,
    ice_handling: Option<IceHandling>,
}

fn set_consistent<T: PartialEq>(
    slot: &mut Option<T>,
    value: T,
    subject: &str,
    field: &str,
) -> Result<(), DataError> {
    match slot {
        Some(existing) if *existing != value => Err(DataError::Inconsistent {
            subject: subject.to_string(),
            field: field.to_string(),
        }),
        Some(_) => Ok(()),
        None => {
            *slot = Some(value);
            Ok(())
        }
    }
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<TrialDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| col(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let c_subject = required(&schema.subject_column)?;
    let c_group = required(&schema.group_column)?;
    let c_visit = required(&schema.visit_column)?;
    let c_outcome = required(&schema.outcome_column)?;
    let c_cov: Vec<(usize, &CovariateDef)> = schema
        .covariates
        .covariates
        .iter()
        .map(|def| required(&def.name).map(|c| (c, def)))
        .collect::<Result<_, _>>()?;
    let c_ice_visit = col(&schema.ice_visit_column);
    let c_ice_strategy = col(&schema.ice_strategy_column);
    let c_ice_handling = col(&schema.ice_handling_column);

    let mut order: Vec<String> = Vec::new();
    let mut raw: HashMap<String, RawSubject> = HashMap::new();
    let mut visit_order: Vec<String> = Vec::new();

    for record in rdr.records() {
        let record = record?;
        let id = record.get(c_subject).unwrap_or("").to_string();
        let entry = raw.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            RawSubject::default()
        });

        let group_label = record.get(c_group).unwrap_or("");
        let group = if group_label == schema.control_label {
            Group::Control
        } else if group_label == schema.intervention_label {
            Group::Intervention
        } else {
            return Err(DataError::UnknownGroup {
                subject: id,
                label: group_label.to_string(),
            });
        };
        set_consistent(&mut entry.group, group, &id, "group")?;

        let visit = record.get(c_visit).unwrap_or("").to_string();
        match &schema.visits {
            Some(labels) => {
                if !labels.contains(&visit) {
                    return Err(DataError::UnknownVisit { subject: id, visit });
                }
            }
            None => {
                if visit == schema.baseline_label || visit.is_empty() {
                    return Err(DataError::UnknownVisit { subject: id, visit });
                }
                if !visit_order.contains(&visit) {
                    visit_order.push(visit.clone());
                }
            }
        }
        if entry.rows.contains_key(&visit) {
            return Err(DataError::DuplicateRow { subject: id, visit });
        }

        let outcome = parse_number(record.get(c_outcome).unwrap_or(""), &id, &schema.outcome_column)?;
        let mut tv = BTreeMap::new();
        for (c, def) in &c_cov {
            let value = parse_number(record.get(*c).unwrap_or(""), &id, &def.name)?.ok_or_else(|| {
                DataError::MissingCovariate {
                    subject: id.clone(),
                    covariate: def.name.clone(),
                }
            })?;
            match def.kind {
                CovariateKind::Baseline => match entry.baseline.get(&def.name) {
                    Some(v) if *v != value => {
                        return Err(DataError::Inconsistent {
                            subject: id,
                            field: def.name.clone(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        entry.baseline.insert(def.name.clone(), value);
                    }
                },
                CovariateKind::TimeVarying => {
                    tv.insert(def.name.clone(), value);
                }
            }
        }

        if let Some(c) = c_ice_visit {
            let cell = record.get(c).unwrap_or("");
            if !is_missing(cell) {
                set_consistent(&mut entry.ice_visit, cell.to_string(), &id, "ice_visit")?;
            }
        }
        if let Some(c) = c_ice_strategy {
            let cell = record.get(c).unwrap_or("");
            if !is_missing(cell) {
                set_consistent(&mut entry.ice_strategy, cell.parse()?, &id, "ice_strategy")?;
            }
        }
        if let Some(c) = c_ice_handling {
            let cell = record.get(c).unwrap_or("");
            if !is_missing(cell) {
                set_consistent(&mut entry.ice_handling, cell.parse()?, &id, "ice_handling")?;
            }
        }
        entry.rows.insert(visit, (outcome, tv));
    }

    let labels = schema.visits.clone().unwrap_or(visit_order);
    let grid = VisitGrid::new(labels, schema.baseline_label.clone())?;
    let j = grid.len();

    let mut subjects = Vec::with_capacity(order.len());
    for id in order {
        let mut r = raw.remove(&id).expect("subject recorded");
        let mut outcomes = vec![None; j];
        let mut time_varying: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (k, label) in grid.labels().iter().enumerate() {
            let row = r.rows.remove(label);
            if let Some((y, _)) = &row {
                outcomes[k] = *y;
            }
            for def in &schema.covariates.covariates {
                if def.kind != CovariateKind::TimeVarying {
                    continue;
                }
                let value = row
                    .as_ref()
                    .and_then(|(_, tv)| tv.get(&def.name).copied())
                    .ok_or_else(|| DataError::MissingCovariate {
                        subject: id.clone(),
                        covariate: def.name.clone(),
                    })?;
                time_varying.entry(def.name.clone()).or_default().push(value);
            }
        }
        if schema
            .covariates
            .covariates
            .iter()
            .any(|d| d.kind == CovariateKind::Baseline && !r.baseline.contains_key(&d.name))
        {
            let missing = schema
                .covariates
                .covariates
                .iter()
                .find(|d| d.kind == CovariateKind::Baseline && !r.baseline.contains_key(&d.name))
                .expect("checked above");
            return Err(DataError::MissingCovariate {
                subject: id,
                covariate: missing.name.clone(),
            });
        }
        let ice = match (r.ice_visit.take(), r.ice_strategy.take()) {
            (None, None) => None,
            (Some(visit), Some(strategy)) => {
                let last_visit = if visit == schema.baseline_label {
                    0
                } else {
                    grid.position(&visit)
                        .ok_or_else(|| DataError::UnknownVisit {
                            subject: id.clone(),
                            visit: visit.clone(),
                        })?
                        + 1
                };
                Some(IceRecord {
                    last_visit,
                    strategy,
                    handling: r.ice_handling.unwrap_or_default(),
                })
            }
            _ => return Err(DataError::IncompleteIce(id)),
        };
        subjects.push(Subject {
            id,
            group: r.group.expect("group set on first row"),
            baseline: std::mem::take(&mut r.baseline),
            time_varying,
            outcomes,
            ice,
        });
    }

    Ok(TrialDataset::new(grid, schema.covariates.clone(), subjects))
}
