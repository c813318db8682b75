//! Mixed model for repeated measures (MMRM) with an unstructured covariance,
//! fitted by restricted maximum likelihood on the masked data.
//!
//! The fixed effects are profiled out by generalized least squares; the
//! covariance is optimized over its log-Cholesky parameters (log of the
//! diagonal, free strictly-lower entries) with BFGS and an analytic gradient.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Group, Subject, TrialDataset, VisitGrid};
use crate::linalg;

#[derive(Debug, Error)]
pub enum MmrmError {
    #[error("mean model is missing the required term '{0}'")]
    IncompleteMeanModel(&'static str),
    #[error("missing covariate '{covariate}' for subject '{subject}'")]
    MissingCovariate { subject: String, covariate: String },
    #[error("visit without observations: '{visit}' has no observed outcome ({level})")]
    VisitWithoutObservations { visit: String, level: String },
    #[error("design is rank deficient; dependent columns: {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("not enough observations ({n_obs}) for {n_params} mean parameters")]
    TooFewObservations { n_obs: usize, n_params: usize },
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("REML optimisation did not converge after {} iterations", .best.iterations)]
    NotConverged { best: Box<MmrmFit> },
}

/// One term of the mean model. Visit-indexed terms drop the first visit when
/// the corresponding main effect is also present (treatment coding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Group,
    Visit,
    GroupByVisit,
    Covariate(String),
    CovariateByVisit(String),
    CovariateByGroup(String),
    CovariateByGroupByVisit(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanModelSpec {
    pub terms: Vec<Term>,
    /// Group treated as control; it is the reference for reference-based imputation.
    #[serde(default = "default_reference")]
    pub reference_group: Group,
}

fn default_reference() -> Group {
    Group::Control
}

impl Default for MeanModelSpec {
    fn default() -> Self {
        Self::minimal()
    }
}

impl MeanModelSpec {
    /// Intercept, group, visit and group-by-visit.
    pub fn minimal() -> Self {
        MeanModelSpec {
            terms: vec![Term::Intercept, Term::Group, Term::Visit, Term::GroupByVisit],
            reference_group: Group::Control,
        }
    }

    pub fn with(mut self, term: Term) -> Self {
        self.terms.push(term);
        self
    }

    /// Minimal terms plus `covariate` and `covariate × visit` for each name.
    pub fn with_covariates_by_visit(mut self, names: &[&str]) -> Self {
        for n in names {
            self.terms.push(Term::Covariate(n.to_string()));
            self.terms.push(Term::CovariateByVisit(n.to_string()));
        }
        self
    }

    pub fn check(&self) -> Result<(), MmrmError> {
        for (term, name) in [
            (Term::Group, "group"),
            (Term::Visit, "visit"),
            (Term::GroupByVisit, "group:visit"),
        ] {
            if !self.terms.contains(&term) {
                return Err(MmrmError::IncompleteMeanModel(name));
            }
        }
        Ok(())
    }

    pub fn indicator(&self, group: Group) -> f64 {
        if group == self.reference_group {
            0.0
        } else {
            1.0
        }
    }

    fn has(&self, t: &Term) -> bool {
        self.terms.contains(t)
    }

    fn columns(&self, j: usize) -> Vec<Column> {
        let first = |main_present: bool| usize::from(main_present);
        let mut cols = Vec::new();
        for t in &self.terms {
            match t {
                Term::Intercept => cols.push(Column::Intercept),
                Term::Group => cols.push(Column::Group),
                Term::Visit => {
                    let s = first(self.has(&Term::Intercept));
                    cols.extend((s..j).map(Column::Visit));
                }
                Term::GroupByVisit => {
                    let s = first(self.has(&Term::Group));
                    cols.extend((s..j).map(Column::GroupVisit));
                }
                Term::Covariate(c) => cols.push(Column::Cov(c.clone())),
                Term::CovariateByVisit(c) => {
                    let s = first(self.has(&Term::Covariate(c.clone())));
                    cols.extend((s..j).map(|k| Column::CovVisit(c.clone(), k)));
                }
                Term::CovariateByGroup(c) => cols.push(Column::CovGroup(c.clone())),
                Term::CovariateByGroupByVisit(c) => {
                    let s = first(self.has(&Term::CovariateByGroup(c.clone())));
                    cols.extend((s..j).map(|k| Column::CovGroupVisit(c.clone(), k)));
                }
            }
        }
        cols
    }

    pub fn n_params(&self, j: usize) -> usize {
        self.columns(j).len()
    }

    pub fn column_names(&self, grid: &VisitGrid) -> Vec<String> {
        let v = |k: usize| grid.labels()[k].as_str();
        self.columns(grid.len())
            .iter()
            .map(|c| match c {
                Column::Intercept => "(Intercept)".to_string(),
                Column::Group => "group".to_string(),
                Column::Visit(k) => format!("visit[{}]", v(*k)),
                Column::GroupVisit(k) => format!("group:visit[{}]", v(*k)),
                Column::Cov(c) => c.clone(),
                Column::CovVisit(c, k) => format!("{c}:visit[{}]", v(*k)),
                Column::CovGroup(c) => format!("{c}:group"),
                Column::CovGroupVisit(c, k) => format!("{c}:group:visit[{}]", v(*k)),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
enum Column {
    Intercept,
    Group,
    Visit(usize),
    GroupVisit(usize),
    Cov(String),
    CovVisit(String, usize),
    CovGroup(String),
    CovGroupVisit(String, usize),
}

/// `J×p` design matrix of a subject, computed as if it belonged to `as_group`.
/// With `as_group` equal to the subject's group this is `X_i`; with the
/// reference group it is `X_{i,ref}` (covariates kept at observed values).
pub fn build_design(
    s: &Subject,
    spec: &MeanModelSpec,
    as_group: Group,
) -> Result<DMatrix<f64>, MmrmError> {
    let j = s.n_visits();
    let cols = spec.columns(j);
    let g = spec.indicator(as_group);
    let cov = |name: &str, v: usize| {
        s.covariate_at(name, v).ok_or_else(|| MmrmError::MissingCovariate {
            subject: s.id.clone(),
            covariate: name.to_string(),
        })
    };
    let mut x = DMatrix::zeros(j, cols.len());
    for v in 0..j {
        for (c, col) in cols.iter().enumerate() {
            let at = |k: usize| if k == v { 1.0 } else { 0.0 };
            x[(v, c)] = match col {
                Column::Intercept => 1.0,
                Column::Group => g,
                Column::Visit(k) => at(*k),
                Column::GroupVisit(k) => g * at(*k),
                Column::Cov(name) => cov(name, v)?,
                Column::CovVisit(name, k) => cov(name, v)? * at(*k),
                Column::CovGroup(name) => cov(name, v)? * g,
                Column::CovGroupVisit(name, k) => cov(name, v)? * g * at(*k),
            };
        }
    }
    Ok(x)
}

/// Rows of `x` at the given visit indices, in order.
pub fn subset_rows(x: &DMatrix<f64>, observed: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(observed.len(), x.ncols(), |i, c| x[(observed[i], c)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceGrouping {
    #[default]
    Shared,
    ByGroup,
}

/// Covariance model; the structure is always unstructured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub grouping: CovarianceGrouping,
}

impl CovarianceSpec {
    pub fn shared() -> Self {
        CovarianceSpec {
            grouping: CovarianceGrouping::Shared,
        }
    }

    pub fn by_group() -> Self {
        CovarianceSpec {
            grouping: CovarianceGrouping::ByGroup,
        }
    }

    fn n_levels(&self) -> usize {
        match self.grouping {
            CovarianceGrouping::Shared => 1,
            CovarianceGrouping::ByGroup => 2,
        }
    }

    fn level(&self, g: Group) -> usize {
        match (self.grouping, g) {
            (CovarianceGrouping::Shared, _) => 0,
            (CovarianceGrouping::ByGroup, Group::Control) => 0,
            (CovarianceGrouping::ByGroup, Group::Intervention) => 1,
        }
    }

    fn level_name(&self, level: usize) -> String {
        match self.grouping {
            CovarianceGrouping::Shared => "all subjects".to_string(),
            CovarianceGrouping::ByGroup if level == 0 => "control group".to_string(),
            CovarianceGrouping::ByGroup => "intervention group".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Relative change of the objective between iterations.
    pub tol: f64,
    /// Largest gradient component relative to `max(1, |objective|)`.
    pub gtol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            gtol: 1e-6,
            max_iter: 200,
        }
    }
}

/// Optimizer state reused to start a nearby fit (jackknife, bootstrap).
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub params: Vec<f64>,
    pub inv_hessian: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct MmrmFit {
    pub beta: DVector<f64>,
    pub beta_names: Vec<String>,
    /// One matrix per covariance level (a single one when shared).
    pub sigma: Vec<DMatrix<f64>>,
    pub cov_spec: CovarianceSpec,
    pub mean_spec: MeanModelSpec,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Log-Cholesky parameters at the optimum.
    pub params: Vec<f64>,
    pub inv_hessian: Option<DMatrix<f64>>,
    /// REML log-likelihood after each accepted iteration (starting value first).
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl MmrmFit {
    pub fn sigma_for(&self, g: Group) -> &DMatrix<f64> {
        &self.sigma[self.cov_spec.level(g)]
    }

    pub fn is_shared(&self) -> bool {
        self.cov_spec.grouping == CovarianceGrouping::Shared
    }

    /// `X β̂` for the subject computed as a member of `as_group`.
    pub fn predict(&self, s: &Subject, as_group: Group) -> Result<DVector<f64>, MmrmError> {
        Ok(build_design(s, &self.mean_spec, as_group)? * &self.beta)
    }

    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            params: self.params.clone(),
            inv_hessian: self.inv_hessian.clone(),
        }
    }

    pub fn diagnostics(&self) -> FitDiagnostics {
        FitDiagnostics {
            reml_loglik: self.reml_loglik,
            converged: self.converged,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
        }
    }
}

/// Subjects sharing a covariance level and missingness pattern.
struct Block {
    level: usize,
    obs: Vec<usize>,
    /// Row-major `k×p` design rows of each subject, concatenated.
    xs: Vec<f64>,
    ys: Vec<f64>,
    count: usize,
}

struct RemlProblem {
    j: usize,
    p: usize,
    n_levels: usize,
    n_obs: usize,
    blocks: Vec<Block>,
    names: Vec<String>,
}

struct Evaluation {
    objective: f64,
    gradient: Vec<f64>,
    beta: Vec<f64>,
}

fn n_chol(j: usize) -> usize {
    j * (j + 1) / 2
}

fn tri_index(a: usize, b: usize) -> usize {
    a * (a + 1) / 2 + b
}

/// Lower Cholesky factor (row-major `J×J`) from log-Cholesky parameters.
fn params_to_chol(params: &[f64], j: usize) -> Vec<f64> {
    let mut l = vec![0.0; j * j];
    for a in 0..j {
        for b in 0..=a {
            let v = params[tri_index(a, b)];
            l[a * j + b] = if a == b { v.exp() } else { v };
        }
    }
    l
}

fn chol_to_sigma(l: &[f64], j: usize) -> Vec<f64> {
    let mut s = vec![0.0; j * j];
    for a in 0..j {
        for b in 0..=a {
            let v: f64 = (0..=b).map(|k| l[a * j + k] * l[b * j + k]).sum();
            s[a * j + b] = v;
            s[b * j + a] = v;
        }
    }
    s
}

fn sigma_to_params(sigma: &DMatrix<f64>) -> Result<Vec<f64>, MmrmError> {
    let j = sigma.nrows();
    let mut flat: Vec<f64> = (0..j * j).map(|k| sigma[(k / j, k % j)]).collect();
    linalg::cholesky_in_place(&mut flat, j).map_err(|_| MmrmError::NotPositiveDefinite)?;
    let mut params = vec![0.0; n_chol(j)];
    for a in 0..j {
        for b in 0..=a {
            let v = flat[a * j + b];
            params[tri_index(a, b)] = if a == b { v.ln() } else { v };
        }
    }
    Ok(params)
}

fn flat_to_matrix(flat: &[f64], j: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(j, j, flat)
}

impl RemlProblem {
    fn new(
        d: &TrialDataset,
        mean: &MeanModelSpec,
        cov: &CovarianceSpec,
    ) -> Result<Self, MmrmError> {
        mean.check()?;
        let j = d.n_visits();
        let names = mean.column_names(&d.grid);
        let p = names.len();
        let n_levels = cov.n_levels();

        let mut counts = vec![vec![0usize; j]; n_levels];
        let mut map: BTreeMap<(usize, Vec<usize>), Block> = BTreeMap::new();
        let mut n_obs = 0;
        for s in &d.subjects {
            let level = cov.level(s.group);
            let obs: Vec<usize> = (0..j).filter(|&v| s.outcomes[v].is_some()).collect();
            if obs.is_empty() {
                continue;
            }
            let x = build_design(s, mean, s.group)?;
            let block = map.entry((level, obs.clone())).or_insert_with(|| Block {
                level,
                obs: obs.clone(),
                xs: Vec::new(),
                ys: Vec::new(),
                count: 0,
            });
            for &v in &obs {
                counts[level][v] += 1;
                block.xs.extend((0..p).map(|c| x[(v, c)]));
                block.ys.push(s.outcomes[v].expect("observed"));
            }
            block.count += 1;
            n_obs += obs.len();
        }
        for (level, c) in counts.iter().enumerate() {
            if let Some(v) = c.iter().position(|&n| n == 0) {
                return Err(MmrmError::VisitWithoutObservations {
                    visit: d.grid.labels()[v].clone(),
                    level: cov.level_name(level),
                });
            }
        }
        if n_obs <= p {
            return Err(MmrmError::TooFewObservations {
                n_obs,
                n_params: p,
            });
        }
        Ok(RemlProblem {
            j,
            p,
            n_levels,
            n_obs,
            blocks: map.into_values().collect(),
            names,
        })
    }

    fn n_params(&self) -> usize {
        self.n_levels * n_chol(self.j)
    }

    fn rank_error(&self, a: &[f64]) -> MmrmError {
        let columns = linalg::dependent_columns(a, self.p, 1e-10)
            .into_iter()
            .map(|c| self.names[c].clone())
            .collect();
        MmrmError::RankDeficient { columns }
    }

    /// Per-block inverse covariance and log-determinant.
    fn block_inverses(&self, sigmas: &[Vec<f64>]) -> Result<Vec<(Vec<f64>, f64)>, MmrmError> {
        let j = self.j;
        self.blocks
            .iter()
            .map(|b| {
                let k = b.obs.len();
                let sig = &sigmas[b.level];
                let mut s = vec![0.0; k * k];
                for (r, &a) in b.obs.iter().enumerate() {
                    for (c, &bb) in b.obs.iter().enumerate() {
                        s[r * k + c] = sig[a * j + bb];
                    }
                }
                linalg::cholesky_in_place(&mut s, k).map_err(|_| MmrmError::NotPositiveDefinite)?;
                let logdet = linalg::chol_log_det(&s, k);
                let mut inv = vec![0.0; k * k];
                linalg::chol_inverse(&s, k, &mut inv);
                Ok((inv, logdet))
            })
            .collect()
    }

    /// Accumulate `A = Σ XᵀS⁻¹X` and `b = Σ XᵀS⁻¹y`.
    fn normal_equations(&self, inverses: &[(Vec<f64>, f64)]) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let mut a = vec![0.0; p * p];
        let mut rhs = vec![0.0; p];
        let mut w = Vec::new();
        for (b, (sinv, _)) in self.blocks.iter().zip(inverses) {
            let k = b.obs.len();
            w.resize(k * p, 0.0);
            for i in 0..b.count {
                let x = &b.xs[i * k * p..(i + 1) * k * p];
                let y = &b.ys[i * k..(i + 1) * k];
                // w = S⁻¹ x
                for r in 0..k {
                    let wr = &mut w[r * p..(r + 1) * p];
                    wr.iter_mut().for_each(|v| *v = 0.0);
                    for t in 0..k {
                        let s = sinv[r * k + t];
                        let xt = &x[t * p..(t + 1) * p];
                        for c in 0..p {
                            wr[c] += s * xt[c];
                        }
                    }
                }
                for r in 0..k {
                    let xr = &x[r * p..(r + 1) * p];
                    let wr = &w[r * p..(r + 1) * p];
                    for c in 0..p {
                        let xc = xr[c];
                        if xc == 0.0 {
                            continue;
                        }
                        let row = &mut a[c * p..(c + 1) * p];
                        for e in c..p {
                            row[e] += xc * wr[e];
                        }
                    }
                    let yr = y[r];
                    for c in 0..p {
                        rhs[c] += wr[c] * yr;
                    }
                }
            }
        }
        for c in 0..p {
            for e in 0..c {
                a[c * p + e] = a[e * p + c];
            }
        }
        (a, rhs)
    }

    fn sigmas(&self, params: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = n_chol(self.j);
        let chols: Vec<Vec<f64>> = (0..self.n_levels)
            .map(|l| params_to_chol(&params[l * m..(l + 1) * m], self.j))
            .collect();
        let sigmas = chols.iter().map(|l| chol_to_sigma(l, self.j)).collect();
        (chols, sigmas)
    }

    fn gls_beta(&self, sigmas: &[Vec<f64>]) -> Result<Vec<f64>, MmrmError> {
        let inverses = self.block_inverses(sigmas)?;
        let (a, mut rhs) = self.normal_equations(&inverses);
        let mut l = a.clone();
        if linalg::cholesky_in_place(&mut l, self.p).is_err() {
            return Err(self.rank_error(&a));
        }
        linalg::chol_solve_in_place(&l, self.p, &mut rhs);
        Ok(rhs)
    }

    /// Negative REML log-likelihood and its gradient in log-Cholesky coordinates.
    fn evaluate(&self, params: &[f64]) -> Result<Evaluation, MmrmError> {
        let (j, p) = (self.j, self.p);
        let (chols, sigmas) = self.sigmas(params);
        let inverses = self.block_inverses(&sigmas)?;
        let (a, mut beta) = self.normal_equations(&inverses);
        let mut la = a.clone();
        if linalg::cholesky_in_place(&mut la, p).is_err() {
            return Err(self.rank_error(&a));
        }
        let logdet_a = linalg::chol_log_det(&la, p);
        linalg::chol_solve_in_place(&la, p, &mut beta);
        let mut ainv = vec![0.0; p * p];
        linalg::chol_inverse(&la, p, &mut ainv);

        let mut g_levels = vec![vec![0.0; j * j]; self.n_levels];
        let mut quad = 0.0;
        let mut logdet_sum = 0.0;
        let mut m = Vec::new();
        let mut r = Vec::new();
        let mut t = Vec::new();
        for (b, (sinv, logdet)) in self.blocks.iter().zip(&inverses) {
            let k = b.obs.len();
            logdet_sum += b.count as f64 * logdet;
            m.clear();
            m.resize(k * k, 0.0);
            r.resize(k, 0.0);
            t.resize(k * p, 0.0);
            for i in 0..b.count {
                let x = &b.xs[i * k * p..(i + 1) * k * p];
                let y = &b.ys[i * k..(i + 1) * k];
                for row in 0..k {
                    let xr = &x[row * p..(row + 1) * p];
                    r[row] = y[row] - xr.iter().zip(&beta).map(|(u, v)| u * v).sum::<f64>();
                }
                // t = x A⁻¹
                for row in 0..k {
                    let xr = &x[row * p..(row + 1) * p];
                    let tr = &mut t[row * p..(row + 1) * p];
                    tr.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..p {
                        let xc = xr[c];
                        if xc == 0.0 {
                            continue;
                        }
                        let arow = &ainv[c * p..(c + 1) * p];
                        for e in 0..p {
                            tr[e] += xc * arow[e];
                        }
                    }
                }
                for u in 0..k {
                    let tu = &t[u * p..(u + 1) * p];
                    for v in 0..=u {
                        let xv = &x[v * p..(v + 1) * p];
                        let h: f64 = tu.iter().zip(xv).map(|(a, b)| a * b).sum();
                        m[u * k + v] += r[u] * r[v] + h;
                    }
                }
                for u in 0..k {
                    let su: f64 = (0..k).map(|v| sinv[u * k + v] * r[v]).sum();
                    quad += r[u] * su;
                }
            }
            for u in 0..k {
                for v in 0..u {
                    m[v * k + u] = m[u * k + v];
                }
            }
            // G_block = S⁻¹ M S⁻¹ − n S⁻¹, scattered into the level's J×J gradient.
            let mut sm = vec![0.0; k * k];
            for u in 0..k {
                for v in 0..k {
                    sm[u * k + v] = (0..k).map(|w| sinv[u * k + w] * m[w * k + v]).sum();
                }
            }
            let g = &mut g_levels[b.level];
            for u in 0..k {
                for v in 0..k {
                    let val: f64 = (0..k).map(|w| sm[u * k + w] * sinv[w * k + v]).sum::<f64>()
                        - b.count as f64 * sinv[u * k + v];
                    g[b.obs[u] * j + b.obs[v]] += val;
                }
            }
        }

        let objective =
            0.5 * ((self.n_obs - p) as f64 * (2.0 * PI).ln() + logdet_sum + quad + logdet_a);
        let mc = n_chol(j);
        let mut gradient = vec![0.0; self.n_params()];
        for (level, (g, l)) in g_levels.iter().zip(&chols).enumerate() {
            for a in 0..j {
                for bb in 0..=a {
                    // d(-loglik)/dL_ab = -(G L)_ab
                    let gl: f64 = (0..j).map(|w| g[a * j + w] * l[w * j + bb]).sum();
                    let mut d = -gl;
                    if a == bb {
                        d *= l[a * j + a];
                    }
                    gradient[level * mc + tri_index(a, bb)] = d;
                }
            }
        }
        Ok(Evaluation {
            objective,
            gradient,
            beta,
        })
    }

    /// Pairwise-complete covariance of OLS residuals, shrunk toward its diagonal until PD.
    fn starting_params(&self) -> Result<Vec<f64>, MmrmError> {
        let (j, p) = (self.j, self.p);
        let identity: Vec<f64> = (0..j * j).map(|k| if k / j == k % j { 1.0 } else { 0.0 }).collect();
        let beta = self.gls_beta(&vec![identity; self.n_levels])?;
        let mut params = Vec::with_capacity(self.n_params());
        for level in 0..self.n_levels {
            let mut sum = vec![0.0; j * j];
            let mut cnt = vec![0usize; j * j];
            for b in self.blocks.iter().filter(|b| b.level == level) {
                let k = b.obs.len();
                for i in 0..b.count {
                    let x = &b.xs[i * k * p..(i + 1) * k * p];
                    let y = &b.ys[i * k..(i + 1) * k];
                    let res: Vec<f64> = (0..k)
                        .map(|row| {
                            y[row]
                                - x[row * p..(row + 1) * p]
                                    .iter()
                                    .zip(&beta)
                                    .map(|(u, v)| u * v)
                                    .sum::<f64>()
                        })
                        .collect();
                    for u in 0..k {
                        for v in 0..k {
                            sum[b.obs[u] * j + b.obs[v]] += res[u] * res[v];
                            cnt[b.obs[u] * j + b.obs[v]] += 1;
                        }
                    }
                }
            }
            let mut s = DMatrix::from_fn(j, j, |a, b| {
                let n = cnt[a * j + b];
                if n == 0 {
                    0.0
                } else {
                    sum[a * j + b] / n as f64
                }
            });
            for a in 0..j {
                if !(s[(a, a)] > 1e-8) {
                    s[(a, a)] = 1.0;
                }
            }
            let diag = DMatrix::from_diagonal(&s.diagonal());
            let mut tries = 0;
            while !linalg::is_positive_definite(&s) {
                s = &s * 0.95 + &diag * 0.05;
                tries += 1;
                if tries > 500 {
                    s = diag.clone();
                }
            }
            params.extend(sigma_to_params(&s)?);
        }
        Ok(params)
    }
}

struct Optimum {
    params: Vec<f64>,
    eval: Evaluation,
    inv_hessian: DMatrix<f64>,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// BFGS with Armijo backtracking on the negative REML log-likelihood.
fn bfgs(
    problem: &RemlProblem,
    start: Vec<f64>,
    h0: Option<DMatrix<f64>>,
    opts: &FitOptions,
) -> Result<Optimum, MmrmError> {
    let n = start.len();
    let mut x = DVector::from_vec(start);
    let mut cur = problem.evaluate(x.as_slice())?;
    let mut g = DVector::from_column_slice(&cur.gradient);
    let fresh = |g: &DVector<f64>| DMatrix::<f64>::identity(n, n) / g.norm().max(1.0);
    let mut h = match h0 {
        Some(h) if h.nrows() == n => h,
        _ => fresh(&g),
    };
    let mut trace = vec![-cur.objective];
    let mut iterations = 0;
    let scaled = |e: &Evaluation| inf_norm(&e.gradient) / e.objective.abs().max(1.0);
    let mut converged = scaled(&cur) < opts.gtol * 1e-2;

    while !converged && iterations < opts.max_iter {
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = fresh(&g);
            d = -(&h * &g);
            slope = g.dot(&d);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &d * step;
            if let Ok(e) = problem.evaluate(trial.as_slice()) {
                if e.objective.is_finite() && e.objective <= cur.objective + 1e-4 * step * slope {
                    accepted = Some((trial, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, next)) = accepted else {
            // No decrease possible: at the rounding floor this is the optimum.
            if scaled(&cur) < opts.gtol {
                converged = true;
                break;
            }
            // Retry once from a reset curvature estimate before giving up.
            if h != fresh(&g) {
                h = fresh(&g);
                continue;
            }
            break;
        };
        iterations += 1;
        let g_new = DVector::from_column_slice(&next.gradient);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if iterations == 1 && h == fresh(&g) {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let rel = (cur.objective - next.objective).abs() / next.objective.abs().max(1.0);
        x = x_new;
        g = g_new;
        cur = next;
        trace.push(-cur.objective);
        converged = rel < opts.tol && scaled(&cur) < opts.gtol || scaled(&cur) < opts.gtol * 1e-2;
    }
    Ok(Optimum {
        params: x.as_slice().to_vec(),
        eval: cur,
        inv_hessian: h,
        iterations,
        converged,
        trace,
    })
}

/// Inverse of the central-difference Jacobian of the analytic gradient, if positive definite.
fn numerical_inverse_hessian(problem: &RemlProblem, params: &[f64]) -> Option<DMatrix<f64>> {
    let n = params.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut x = params.to_vec();
    for k in 0..n {
        let h = 1e-4 * params[k].abs().max(1.0);
        x[k] = params[k] + h;
        let up = problem.evaluate(&x).ok()?.gradient;
        x[k] = params[k] - h;
        let down = problem.evaluate(&x).ok()?.gradient;
        x[k] = params[k];
        for r in 0..n {
            hess[(r, k)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    let sym = (&hess + hess.transpose()) * 0.5;
    sym.cholesky().map(|c| c.inverse())
}

/// REML fit of the imputation model on (already masked) data.
pub fn fit_reml(
    d: &TrialDataset,
    mean: &MeanModelSpec,
    cov: &CovarianceSpec,
    opts: &FitOptions,
) -> Result<MmrmFit, MmrmError> {
    fit_reml_from(d, mean, cov, opts, None)
}

/// As [`fit_reml`], starting from a previous optimum when given.
pub fn fit_reml_from(
    d: &TrialDataset,
    mean: &MeanModelSpec,
    cov: &CovarianceSpec,
    opts: &FitOptions,
    warm: Option<&WarmStart>,
) -> Result<MmrmFit, MmrmError> {
    let problem = RemlProblem::new(d, mean, cov)?;
    let (start, h0) = match warm {
        Some(w) if w.params.len() == problem.n_params() => (w.params.clone(), w.inv_hessian.clone()),
        _ => (problem.starting_params()?, None),
    };
    let cold = h0.is_none();
    let mut opt = bfgs(&problem, start, h0, opts)?;
    if cold && opt.converged {
        // Resampled fits start here; exact curvature lets them finish in a few steps.
        if let Some(h) = numerical_inverse_hessian(&problem, &opt.params) {
            opt.inv_hessian = h;
        }
    }
    let (_, sigmas) = problem.sigmas(&opt.params);
    let fit = MmrmFit {
        beta: DVector::from_vec(opt.eval.beta),
        beta_names: problem.names.clone(),
        sigma: sigmas.iter().map(|s| flat_to_matrix(s, problem.j)).collect(),
        cov_spec: *cov,
        mean_spec: mean.clone(),
        reml_loglik: -opt.eval.objective,
        converged: opt.converged,
        iterations: opt.iterations,
        gradient_norm: inf_norm(&opt.eval.gradient),
        params: opt.params,
        inv_hessian: Some(opt.inv_hessian),
        trace: opt.trace,
    };
    if fit.converged {
        Ok(fit)
    } else {
        Err(MmrmError::NotConverged { best: Box::new(fit) })
    }
}

/// Generalized least squares coefficients at a fixed shared covariance matrix.
pub fn profile_beta(
    d: &TrialDataset,
    mean: &MeanModelSpec,
    sigma: &DMatrix<f64>,
) -> Result<DVector<f64>, MmrmError> {
    let problem = RemlProblem::new(d, mean, &CovarianceSpec::shared())?;
    let j = problem.j;
    let flat: Vec<f64> = (0..j * j).map(|k| sigma[(k / j, k % j)]).collect();
    Ok(DVector::from_vec(problem.gls_beta(&[flat])?))
}

/// REML log-likelihood at given covariance matrices (one per level), β profiled.
pub fn reml_loglik_at(
    d: &TrialDataset,
    mean: &MeanModelSpec,
    cov: &CovarianceSpec,
    sigmas: &[DMatrix<f64>],
) -> Result<f64, MmrmError> {
    let problem = RemlProblem::new(d, mean, cov)?;
    let params: Vec<f64> = sigmas
        .iter()
        .map(sigma_to_params)
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    Ok(-problem.evaluate(&params)?.objective)
}
