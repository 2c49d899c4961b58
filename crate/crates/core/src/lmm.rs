//! Univariate two-level linear mixed models fitted by ML or REML.
//!
//! The random-effects covariance is written `Ψ = σ² ΛΛ'` with `Λ` lower
//! triangular. The optimizer works on `θ`, the row-major lower triangle of
//! `Λ` with log-transformed diagonal. For fixed `θ`, `β` and `σ²` have closed
//! forms, so only `θ` is searched.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::formula::{build_design, parse_formula, DesignMatrices, ModelFormula};
use crate::linalg::{cholesky, full_rank_cholesky, log_det_chol, psd_factor, serde_matrix};
use crate::optim::{nelder_mead, NelderMeadOptions};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;
/// Lower clamp on log-diagonal entries of `Λ`.
const MIN_LOG_DIAG: f64 = -25.0;
/// A diagonal entry of `Λ` below this is reported as a boundary estimate.
pub const BOUNDARY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Ml,
    Reml,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" => Ok(Method::Ml),
            "reml" => Ok(Method::Reml),
            _ => Err(Error::validation(format!("unknown method '{s}' (expected ml or reml)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ml => "ML",
            Method::Reml => "REML",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisModel {
    pub formula: ModelFormula,
    pub method: Method,
}

impl AnalysisModel {
    pub fn new(formula: ModelFormula, method: Method) -> Result<Self> {
        if formula.responses.len() != 1 {
            return Err(Error::validation(format!(
                "analysis models take exactly one response, got {}",
                formula.responses.len()
            )));
        }
        if formula.random.is_none() {
            return Err(Error::validation(
                "analysis model needs a random-effects block such as (1|group)",
            ));
        }
        Ok(AnalysisModel { formula, method })
    }

    pub fn parse(text: &str, method: Method) -> Result<Self> {
        AnalysisModel::new(parse_formula(text)?, method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponent {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub formula: String,
    pub method: Method,
    pub fixed_names: Vec<String>,
    pub beta: Vec<f64>,
    #[serde(with = "serde_matrix")]
    pub vcov: DMatrix<f64>,
    pub random_names: Vec<String>,
    pub group: String,
    #[serde(with = "serde_matrix")]
    pub psi: DMatrix<f64>,
    pub sigma2: f64,
    pub components: Vec<VarianceComponent>,
    /// Log-likelihood (restricted log-likelihood for REML).
    pub loglik: f64,
    pub deviance: f64,
    pub n_obs: usize,
    pub n_groups: usize,
    pub df_com: f64,
    pub n_params: usize,
    pub theta: Vec<f64>,
    pub boundary: bool,
    pub converged: bool,
    pub evaluations: usize,
}

impl LmmFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.beta.len()).map(|i| self.vcov[(i, i)].sqrt()).collect()
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.value)
    }
}

/// Names in the order `(i, j)` for `i ≤ j`, then the residual.
pub fn component_names(random_names: &[String], group: &str) -> Vec<String> {
    let q = random_names.len();
    let mut out = Vec::new();
    for i in 0..q {
        for j in i..q {
            out.push(format!("{}~~{}|{group}", random_names[i], random_names[j]));
        }
    }
    out.push("Residual~~Residual".to_string());
    out
}

pub fn variance_components(random_names: &[String], group: &str, psi: &DMatrix<f64>, sigma2: f64) -> Vec<VarianceComponent> {
    let q = random_names.len();
    let mut values = Vec::new();
    for i in 0..q {
        for j in i..q {
            values.push(psi[(i, j)]);
        }
    }
    values.push(sigma2);
    component_names(random_names, group)
        .into_iter()
        .zip(values)
        .map(|(name, value)| VarianceComponent { name, value })
        .collect()
}

struct GroupStats {
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
}

struct Problem {
    p: usize,
    q: usize,
    n: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
    groups: Vec<GroupStats>,
}

struct Profile {
    deviance: f64,
    beta: DVector<f64>,
    a: DMatrix<f64>,
    sigma2: f64,
}

fn theta_len(q: usize) -> usize {
    q * (q + 1) / 2
}

fn lambda_from_theta(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j {
                theta[k].max(MIN_LOG_DIAG).exp()
            } else {
                theta[k]
            };
            k += 1;
        }
    }
    l
}

fn complete_response(design: &DesignMatrices) -> Result<DVector<f64>> {
    if let Some(i) = design.observed.iter().position(|o| !o[0]) {
        return Err(Error::validation(format!(
            "response '{}' has missing values (first at row {}); analysis needs complete data",
            design.response_names[0],
            i + 1
        )));
    }
    Ok(design.y.column(0).into_owned())
}

impl Problem {
    fn new(design: &DesignMatrices) -> Result<Self> {
        let (n, p, q) = (design.n(), design.p(), design.q());
        let y = complete_response(design)?;
        if n <= p {
            return Err(Error::validation(format!(
                "need more observations ({n}) than fixed effects ({p})"
            )));
        }
        if design.n_groups() < 2 {
            return Err(Error::validation(
                "at least 2 groups are needed to separate the variance components",
            ));
        }
        let xtx = design.x.transpose() * &design.x;
        full_rank_cholesky(&xtx, "X'X").map_err(|_| {
            Error::numerical("fixed-effects design is singular (collinear or constant predictors)")
        })?;
        let xty = design.x.transpose() * &y;
        let yty = y.dot(&y);
        let groups = design
            .groups
            .rows
            .iter()
            .map(|rows| {
                let zj = design.z.select_rows(rows);
                let xj = design.x.select_rows(rows);
                let yj = DVector::from_iterator(rows.len(), rows.iter().map(|&i| y[i]));
                GroupStats {
                    ztz: zj.transpose() * &zj,
                    ztx: zj.transpose() * &xj,
                    zty: zj.transpose() * &yj,
                }
            })
            .collect();
        Ok(Problem {
            p,
            q,
            n,
            xtx,
            xty,
            yty,
            groups,
        })
    }

    fn profile(&self, theta: &[f64], method: Method) -> Option<Profile> {
        let lambda = lambda_from_theta(theta, self.q);
        let lt = lambda.transpose();
        let mut a = self.xtx.clone();
        let mut c = self.xty.clone();
        let mut yvy = self.yty;
        let mut logdet_m = 0.0;
        let eye = DMatrix::<f64>::identity(self.q, self.q);
        for g in &self.groups {
            let m = &lt * &g.ztz * &lambda + &eye;
            let chol = nalgebra::Cholesky::new(m)?;
            logdet_m += log_det_chol(&chol);
            let u = &lt * &g.ztx;
            let v = &lt * &g.zty;
            let minv_u = chol.solve(&u);
            let minv_v = chol.solve(&v);
            a -= u.transpose() * &minv_u;
            c -= u.transpose() * &minv_v;
            yvy -= v.dot(&minv_v);
        }
        let a_chol = nalgebra::Cholesky::new(a.clone())?;
        let beta = a_chol.solve(&c);
        let r2 = yvy - c.dot(&beta);
        if !(r2 > 0.0) {
            return None;
        }
        let n = self.n as f64;
        let (deviance, sigma2) = match method {
            Method::Ml => (logdet_m + n * (1.0 + LOG_2PI + (r2 / n).ln()), r2 / n),
            Method::Reml => {
                let dof = n - self.p as f64;
                (
                    logdet_m + log_det_chol(&a_chol) + dof * (1.0 + LOG_2PI + (r2 / dof).ln()),
                    r2 / dof,
                )
            }
        };
        deviance.is_finite().then_some(Profile {
            deviance,
            beta,
            a,
            sigma2,
        })
    }
}

fn optimize(problem: &Problem, method: Method) -> Result<(Vec<f64>, f64, bool, usize)> {
    let k = theta_len(problem.q);
    let objective = |t: &[f64]| {
        problem
            .profile(t, method)
            .map_or(f64::INFINITY, |p| p.deviance)
    };
    let opts = NelderMeadOptions::default();
    let diag_idx: Vec<usize> = (0..problem.q).map(|i| i * (i + 1) / 2 + i).collect();
    let mut evaluations = 0;
    let mut best = nelder_mead(objective, &vec![0.0; k], &opts);
    evaluations += best.evaluations;
    // Restart from the optimum until it stops moving.
    for _ in 0..4 {
        let again = nelder_mead(objective, &best.x, &opts);
        evaluations += again.evaluations;
        let improved = again.f < best.f - 1e-10 * (1.0 + best.f.abs());
        if again.f <= best.f {
            best = again;
        }
        if !improved {
            break;
        }
    }
    // Near the boundary the simplex can stall; try again from the interior.
    if diag_idx.iter().any(|&i| best.x[i] < BOUNDARY_TOL.ln()) {
        let mut start = best.x.clone();
        for &i in &diag_idx {
            if start[i] < BOUNDARY_TOL.ln() {
                start[i] = -1.0;
            }
        }
        let alt = nelder_mead(objective, &start, &opts);
        evaluations += alt.evaluations;
        if alt.f < best.f {
            best = alt;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::numerical("deviance is not finite anywhere the optimizer looked"));
    }
    if !best.converged {
        return Err(Error::NoConvergence {
            evaluations,
            best: best.f,
        });
    }
    let boundary = diag_idx.iter().any(|&i| best.x[i].max(MIN_LOG_DIAG).exp() < BOUNDARY_TOL);
    Ok((best.x, best.f, boundary, evaluations))
}

pub fn fit_lmm(model: &AnalysisModel, d: &Dataset) -> Result<LmmFit> {
    let design = build_design(&model.formula, d)?;
    fit_design(model, &design)
}

pub fn fit_design(model: &AnalysisModel, design: &DesignMatrices) -> Result<LmmFit> {
    let problem = Problem::new(design)?;
    let (theta, deviance, boundary, evaluations) = optimize(&problem, model.method)?;
    let prof = problem
        .profile(&theta, model.method)
        .ok_or_else(|| Error::numerical("profiled deviance failed at the optimum"))?;
    let q = problem.q;
    let mut lambda = lambda_from_theta(&theta, q);
    for i in 0..q {
        if lambda[(i, i)] < BOUNDARY_TOL {
            lambda[(i, i)] = 0.0;
        }
    }
    let mut psi = &lambda * lambda.transpose() * prof.sigma2;
    crate::linalg::symmetrize(&mut psi);
    let a_inv = cholesky(&prof.a, "A")?.inverse();
    let mut vcov = a_inv * prof.sigma2;
    crate::linalg::symmetrize(&mut vcov);
    let group = model.formula.group().unwrap_or_default().to_string();
    let components = variance_components(&design.random_names, &group, &psi, prof.sigma2);
    Ok(LmmFit {
        formula: model.formula.to_string(),
        method: model.method,
        fixed_names: design.fixed_names.clone(),
        beta: prof.beta.iter().copied().collect(),
        vcov,
        random_names: design.random_names.clone(),
        group,
        psi,
        sigma2: prof.sigma2,
        components,
        loglik: -0.5 * deviance,
        deviance,
        n_obs: problem.n,
        n_groups: problem.groups.len(),
        df_com: (problem.n - problem.p) as f64,
        n_params: problem.p + theta_len(q) + 1,
        theta,
        boundary,
        converged: true,
        evaluations,
    })
}

/// Intraclass correlation from an intercept-only fit.
pub fn icc(fit: &LmmFit) -> Result<f64> {
    if fit.fixed_names != ["Intercept"] || fit.random_names != ["Intercept"] {
        return Err(Error::validation(
            "ICC needs an intercept-only model such as y ~ 1 + (1|group)",
        ));
    }
    let tau = fit.psi[(0, 0)];
    let total = tau + fit.sigma2;
    if !(total > 0.0) {
        return Err(Error::numerical("total variance is zero"));
    }
    Ok(tau / total)
}

/// ML log-likelihood of `d` under `model` at the given parameter values.
pub fn loglik_at(
    model: &AnalysisModel,
    d: &Dataset,
    beta: &[f64],
    psi: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    let design = build_design(&model.formula, d)?;
    loglik_design(&design, beta, psi, sigma2)
}

pub fn loglik_design(
    design: &DesignMatrices,
    beta: &[f64],
    psi: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    let (p, q) = (design.p(), design.q());
    if beta.len() != p {
        return Err(Error::validation(format!("expected {p} fixed effects, got {}", beta.len())));
    }
    if psi.shape() != (q, q) {
        return Err(Error::validation(format!("random-effects covariance must be {q}x{q}")));
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::validation("residual variance must be positive"));
    }
    if (psi - psi.transpose()).amax() > 1e-10 * psi.amax().max(1.0) {
        return Err(Error::validation("random-effects covariance is not symmetric"));
    }
    psd_factor(psi, "random-effects covariance")?;
    let y = complete_response(design)?;
    let resid = &y - &design.x * DVector::from_column_slice(beta);
    let mut ll = 0.0;
    for rows in &design.groups.rows {
        let zj = design.z.select_rows(rows);
        let mut v = &zj * psi * zj.transpose();
        for i in 0..rows.len() {
            v[(i, i)] += sigma2;
        }
        let chol = cholesky(&v, "marginal covariance")?;
        let rj = DVector::from_iterator(rows.len(), rows.iter().map(|&i| resid[i]));
        let quad = rj.dot(&chol.solve(&rj));
        ll -= 0.5 * (rows.len() as f64 * LOG_2PI + log_det_chol(&chol) + quad);
    }
    Ok(ll)
}
