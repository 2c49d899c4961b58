//! Gibbs sampler for the multivariate linear mixed-effects model
//!
//! ```text
//! y_ij = x_ij β + z_ij b_j + e_ij,   vec(b_j) ~ N(0, Ψ),   e_ij ~ N(0, Σ)
//! ```
//!
//! with `β` p×r, `b_j` q×r, `Ψ` (qr)×(qr) and `Σ` r×r. Each scan draws, in
//! order: the missing responses, every `b_j`, `β`, `Σ` and `Ψ`. After
//! `n_burn` scans a completed dataset is saved every `n_between` scans until
//! `m` datasets exist.
//!
//! Priors are conjugate: `β` flat, `Σ⁻¹ ~ Wishart(ν_Σ, Λ_Σ⁻¹)` and
//! `Ψ⁻¹ ~ Wishart(ν_Ψ, Λ_Ψ⁻¹)`, so the full conditionals are
//!
//! ```text
//! Σ | · ~ InvWishart(ν_Σ + N, Λ_Σ + Σ_j E_j'E_j)
//! Ψ | · ~ InvWishart(ν_Ψ + J, Λ_Ψ + Σ_j vec(b_j) vec(b_j)')
//! ```
//!
//! The `Λ` matrices therefore live on the covariance scale.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::formula::{build_design, parse_formula, DesignMatrices};
use crate::linalg::{
    self, cholesky, full_rank_cholesky, sample_inverse_wishart, sample_mvn_canonical, serde_matrix, spd_inverse,
    std_normal_matrix, SimRng,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub nu_sigma: f64,
    #[serde(with = "serde_matrix")]
    pub lambda_sigma: DMatrix<f64>,
    pub nu_psi: f64,
    #[serde(with = "serde_matrix")]
    pub lambda_psi: DMatrix<f64>,
}

impl Prior {
    pub fn validate(&self, r: usize, q: usize) -> Result<()> {
        let qr = q * r;
        if self.lambda_sigma.shape() != (r, r) {
            return Err(Error::validation(format!("lambda_sigma must be {r}x{r}")));
        }
        if self.lambda_psi.shape() != (qr, qr) {
            return Err(Error::validation(format!("lambda_psi must be {qr}x{qr}")));
        }
        if self.nu_sigma < r as f64 {
            return Err(Error::validation(format!("nu_sigma must be at least {r}")));
        }
        if self.nu_psi < qr as f64 {
            return Err(Error::validation(format!("nu_psi must be at least {qr}")));
        }
        for (m, name) in [(&self.lambda_sigma, "lambda_sigma"), (&self.lambda_psi, "lambda_psi")] {
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
                return Err(Error::validation(format!("{name} is not symmetric")));
            }
            cholesky(m, name).map_err(|_| {
                Error::validation(format!("{name} is not positive definite"))
            })?;
        }
        Ok(())
    }
}

/// Weakly informative default: degrees of freedom equal to the matrix
/// dimension and diagonal scales set to the observed-case variances.
pub fn default_prior(r: usize, q: usize, variances: &[f64]) -> Result<Prior> {
    if r == 0 || q == 0 {
        return Err(Error::validation("prior needs r >= 1 and q >= 1"));
    }
    if variances.len() != r {
        return Err(Error::validation(format!(
            "expected {r} response variances, got {}",
            variances.len()
        )));
    }
    if let Some(k) = variances.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::validation(format!(
            "response {} has zero or undefined observed variance",
            k + 1
        )));
    }
    let lambda_sigma = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
    // vec(b_j) index k*q + a belongs to response k.
    let lambda_psi =
        DMatrix::from_diagonal(&DVector::from_fn(q * r, |idx, _| variances[idx / q]));
    Ok(Prior {
        nu_sigma: r as f64,
        lambda_sigma,
        nu_psi: (q * r) as f64,
        lambda_psi,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputationMode {
    /// Random effects sampled as specified by the formula.
    #[default]
    Multilevel,
    /// Random effects fixed at zero: an ordinary single-level multivariate
    /// normal regression imputation that ignores the clustering.
    SingleLevel,
}

fn default_stride() -> u64 {
    10
}

/// Serializable run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationSpec {
    pub formula: String,
    pub n_burn: u64,
    pub n_between: u64,
    pub m: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Prior>,
    #[serde(default = "default_stride")]
    pub trace_stride: u64,
    #[serde(default)]
    pub mode: ImputationMode,
    /// Holds Σ at this value instead of sampling it.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_matrix::option")]
    pub fixed_sigma: Option<DMatrix<f64>>,
    /// Holds Ψ at this value instead of sampling it.
    #[serde(default, skip_serializing_if = "Option::is_none", with = "serde_matrix::option")]
    pub fixed_psi: Option<DMatrix<f64>>,
}

impl ImputationSpec {
    pub fn new(formula: impl Into<String>, n_burn: u64, n_between: u64, m: usize, seed: u64) -> Self {
        ImputationSpec {
            formula: formula.into(),
            n_burn,
            n_between,
            m,
            seed,
            prior: None,
            trace_stride: default_stride(),
            mode: ImputationMode::Multilevel,
            fixed_sigma: None,
            fixed_psi: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_between < 1 {
            return Err(Error::validation("n_between must be at least 1"));
        }
        if self.m < 1 {
            return Err(Error::validation("m must be at least 1"));
        }
        if self.trace_stride < 1 {
            return Err(Error::validation("trace_stride must be at least 1"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> u64 {
        self.n_burn + self.m as u64 * self.n_between
    }
}

#[derive(Debug, Clone)]
pub struct GibbsState {
    pub beta: DMatrix<f64>,
    pub b: Vec<DMatrix<f64>>,
    pub psi: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    /// Responses with missing cells holding the current draws.
    pub y: DMatrix<f64>,
    pub rng: SimRng,
    pub iteration: u64,
}

struct GroupBlock {
    rows: Vec<usize>,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
}

struct MissingPattern {
    missing: Vec<usize>,
    observed: Vec<usize>,
    rows: Vec<usize>,
}

/// Precomputed design quantities plus the sampling steps.
pub struct Sampler<'a> {
    design: &'a DesignMatrices,
    prior: Prior,
    mode: ImputationMode,
    sample_sigma: bool,
    sample_psi: bool,
    groups: Vec<GroupBlock>,
    xtx_chol: Cholesky<f64, Dyn>,
    patterns: Vec<MissingPattern>,
}

impl<'a> Sampler<'a> {
    pub fn new(design: &'a DesignMatrices, prior: Prior, mode: ImputationMode) -> Result<Self> {
        let (p, q, r) = (design.p(), design.q(), design.r());
        prior.validate(r, q)?;
        let xtx = design.x.transpose() * &design.x;
        let xtx_chol = full_rank_cholesky(&xtx, "X'X").map_err(|_| {
            Error::numerical(
                "X'X is singular; remove collinear or constant predictors from the formula",
            )
        })?;
        let groups = design
            .groups
            .rows
            .iter()
            .map(|rows| {
                let mut ztz = DMatrix::zeros(q, q);
                let mut ztx = DMatrix::zeros(q, p);
                for &i in rows {
                    for a in 0..q {
                        let za = design.z[(i, a)];
                        for c in 0..q {
                            ztz[(a, c)] += za * design.z[(i, c)];
                        }
                        for c in 0..p {
                            ztx[(a, c)] += za * design.x[(i, c)];
                        }
                    }
                }
                GroupBlock {
                    rows: rows.clone(),
                    ztz,
                    ztx,
                }
            })
            .collect();
        let mut by_pattern: std::collections::BTreeMap<Vec<bool>, Vec<usize>> = Default::default();
        for (i, obs) in design.observed.iter().enumerate() {
            if obs.iter().any(|&o| !o) {
                by_pattern.entry(obs.clone()).or_default().push(i);
            }
        }
        let patterns = by_pattern
            .into_iter()
            .map(|(obs, rows)| MissingPattern {
                missing: (0..r).filter(|&k| !obs[k]).collect(),
                observed: (0..r).filter(|&k| obs[k]).collect(),
                rows,
            })
            .collect();
        Ok(Sampler {
            design,
            prior,
            mode,
            sample_sigma: true,
            sample_psi: mode == ImputationMode::Multilevel,
            groups,
            xtx_chol,
            patterns,
        })
    }

    pub fn design(&self) -> &DesignMatrices {
        self.design
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// Keeps Σ and/or Ψ at their current values during scans.
    pub fn hold(&mut self, sigma: bool, psi: bool) {
        self.sample_sigma = !sigma;
        self.sample_psi = self.mode == ImputationMode::Multilevel && !psi;
    }

    /// Mean-filled responses, OLS β ignoring groups, `b_j = 0`, Σ and Ψ at
    /// their prior scales.
    pub fn init_state(&self, seed: u64) -> Result<GibbsState> {
        let d = self.design;
        let (n, r) = (d.n(), d.r());
        let mut y = d.y.clone();
        for k in 0..r {
            let obs: Vec<f64> = (0..n).filter(|&i| d.observed[i][k]).map(|i| d.y[(i, k)]).collect();
            if obs.is_empty() {
                return Err(Error::validation(format!(
                    "response '{}' has no observed values",
                    d.response_names[k]
                )));
            }
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            for i in 0..n {
                if !d.observed[i][k] {
                    y[(i, k)] = mean;
                }
            }
        }
        let beta = self.xtx_chol.solve(&(d.x.transpose() * &y));
        Ok(GibbsState {
            beta,
            b: vec![DMatrix::zeros(d.q(), r); d.n_groups()],
            psi: self.prior.lambda_psi.clone(),
            sigma: self.prior.lambda_sigma.clone(),
            y,
            rng: linalg::seeded_rng(seed),
            iteration: 0,
        })
    }

    /// Z_j'(Y_j − X_j β), q×r.
    fn group_residual_cross(&self, state: &GibbsState, j: usize) -> DMatrix<f64> {
        let d = self.design;
        let g = &self.groups[j];
        let (q, r) = (d.q(), d.r());
        let mut zty = DMatrix::zeros(q, r);
        for &i in &g.rows {
            for k in 0..r {
                let yik = state.y[(i, k)];
                for a in 0..q {
                    zty[(a, k)] += d.z[(i, a)] * yik;
                }
            }
        }
        zty - &g.ztx * &state.beta
    }

    /// Precision `Ψ⁻¹ + Σ⁻¹ ⊗ Z_j'Z_j` and mean of `vec(b_j)` given the rest.
    pub fn b_conditional(
        &self,
        state: &GibbsState,
        j: usize,
    ) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let psi_inv = spd_inverse(&state.psi, "Psi")?;
        let sigma_inv = spd_inverse(&state.sigma, "Sigma")?;
        let (precision, h) = self.b_canonical(state, j, &psi_inv, &sigma_inv);
        let chol = cholesky(&precision, &format!("random-effect precision of group {}", j + 1))?;
        let mean = chol.solve(&h);
        Ok((precision, mean))
    }

    fn b_canonical(
        &self,
        state: &GibbsState,
        j: usize,
        psi_inv: &DMatrix<f64>,
        sigma_inv: &DMatrix<f64>,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let precision = psi_inv + sigma_inv.kronecker(&self.groups[j].ztz);
        let rhs = self.group_residual_cross(state, j) * sigma_inv;
        (precision, DVector::from_column_slice(rhs.as_slice()))
    }

    pub fn draw_b(&self, state: &mut GibbsState) -> Result<()> {
        if self.mode == ImputationMode::SingleLevel {
            return Ok(());
        }
        let (q, r) = (self.design.q(), self.design.r());
        let psi_inv = spd_inverse(&state.psi, "Psi")?;
        let sigma_inv = spd_inverse(&state.sigma, "Sigma")?;
        for j in 0..self.groups.len() {
            let (precision, h) = self.b_canonical(state, j, &psi_inv, &sigma_inv);
            let what = format!("random-effect precision of group {}", j + 1);
            let v = sample_mvn_canonical(&precision, &h, &mut state.rng, &what)?;
            state.b[j] = DMatrix::from_column_slice(q, r, v.as_slice());
        }
        Ok(())
    }

    /// `(Σ_j X_j'X_j)⁻¹ Σ_j X_j'(Y_j − Z_j b_j)`.
    pub fn beta_hat(&self, state: &GibbsState) -> DMatrix<f64> {
        let d = self.design;
        let mut rhs = d.x.transpose() * &state.y;
        if self.mode == ImputationMode::Multilevel {
            for (g, b) in self.groups.iter().zip(&state.b) {
                rhs -= g.ztx.transpose() * b;
            }
        }
        self.xtx_chol.solve(&rhs)
    }

    pub fn draw_beta(&self, state: &mut GibbsState) -> Result<()> {
        let (p, r) = (self.design.p(), self.design.r());
        let beta_hat = self.beta_hat(state);
        let sigma_l = cholesky(&state.sigma, "Sigma")?.l();
        let noise = std_normal_matrix(p, r, &mut state.rng);
        // (X'X)⁻¹ = L⁻ᵀL⁻¹, so L⁻ᵀ W Lσ' has covariance Σ ⊗ (X'X)⁻¹.
        let scaled = self
            .xtx_chol
            .l()
            .transpose()
            .solve_upper_triangular(&noise)
            .ok_or_else(|| Error::numerical("singular X'X factor"))?;
        state.beta = beta_hat + scaled * sigma_l.transpose();
        Ok(())
    }

    /// Σ_j E_j'E_j with E_j = Y_j − X_jβ − Z_j b_j.
    pub fn residual_cross_product(&self, state: &GibbsState) -> DMatrix<f64> {
        let d = self.design;
        let (p, q, r) = (d.p(), d.q(), d.r());
        let mut ete = DMatrix::zeros(r, r);
        let mut e = vec![0.0; r];
        for (j, g) in self.groups.iter().enumerate() {
            let b = &state.b[j];
            for &i in &g.rows {
                for k in 0..r {
                    let mut fit = 0.0;
                    for c in 0..p {
                        fit += d.x[(i, c)] * state.beta[(c, k)];
                    }
                    if self.mode == ImputationMode::Multilevel {
                        for a in 0..q {
                            fit += d.z[(i, a)] * b[(a, k)];
                        }
                    }
                    e[k] = state.y[(i, k)] - fit;
                }
                for k in 0..r {
                    for l in 0..=k {
                        ete[(k, l)] += e[k] * e[l];
                    }
                }
            }
        }
        for k in 0..r {
            for l in 0..k {
                ete[(l, k)] = ete[(k, l)];
            }
        }
        ete
    }

    pub fn draw_sigma(&self, state: &mut GibbsState) -> Result<()> {
        if !self.sample_sigma {
            return Ok(());
        }
        let scale = &self.prior.lambda_sigma + self.residual_cross_product(state);
        let df = self.prior.nu_sigma + self.design.n() as f64;
        state.sigma = sample_inverse_wishart(df, &scale, &mut state.rng, "Sigma scale")?;
        Ok(())
    }

    pub fn draw_psi(&self, state: &mut GibbsState) -> Result<()> {
        if !self.sample_psi {
            return Ok(());
        }
        let mut scale = self.prior.lambda_psi.clone();
        for b in &state.b {
            let v = DVector::from_column_slice(b.as_slice());
            scale += &v * v.transpose();
        }
        let df = self.prior.nu_psi + self.groups.len() as f64;
        state.psi = sample_inverse_wishart(df, &scale, &mut state.rng, "Psi scale")?;
        Ok(())
    }

    fn row_mean(&self, state: &GibbsState, i: usize, j: usize, k: usize) -> f64 {
        let d = self.design;
        let mut mu = 0.0;
        for c in 0..d.p() {
            mu += d.x[(i, c)] * state.beta[(c, k)];
        }
        if self.mode == ImputationMode::Multilevel {
            for a in 0..d.q() {
                mu += d.z[(i, a)] * state.b[j][(a, k)];
            }
        }
        mu
    }

    /// Draws every missing cell from its conditional normal given the row's
    /// observed responses.
    pub fn impute_missing(&self, state: &mut GibbsState) -> Result<()> {
        let row_group = &self.design.groups.row_group;
        let r = self.design.r();
        for pat in &self.patterns {
            let nm = pat.missing.len();
            let no = pat.observed.len();
            let s_mm = DMatrix::from_fn(nm, nm, |a, b| state.sigma[(pat.missing[a], pat.missing[b])]);
            let (gain, cond) = if no == 0 {
                (DMatrix::zeros(nm, 0), s_mm)
            } else {
                let s_oo =
                    DMatrix::from_fn(no, no, |a, b| state.sigma[(pat.observed[a], pat.observed[b])]);
                let s_om =
                    DMatrix::from_fn(no, nm, |a, b| state.sigma[(pat.observed[a], pat.missing[b])]);
                let chol_oo = cholesky(&s_oo, "observed block of Sigma").map_err(|_| {
                    Error::numerical(format!(
                        "observed block of Sigma is singular (row {})",
                        pat.rows[0] + 1
                    ))
                })?;
                // K = Σ_mo Σ_oo⁻¹, C = Σ_mm − K Σ_om
                let gain = chol_oo.solve(&s_om).transpose();
                let cond = &s_mm - &gain * &s_om;
                (gain, cond)
            };
            let mut cond = cond;
            linalg::symmetrize(&mut cond);
            let cond_l = cholesky(&cond, "conditional covariance")
                .map_err(|_| {
                    Error::numerical(format!(
                        "conditional covariance of missing responses is singular (row {})",
                        pat.rows[0] + 1
                    ))
                })?
                .l();
            let mut mu = vec![0.0; r];
            for &i in &pat.rows {
                let j = row_group[i];
                for (k, m) in mu.iter_mut().enumerate() {
                    *m = self.row_mean(state, i, j, k);
                }
                let dev_o = DVector::from_fn(no, |a, _| {
                    let k = pat.observed[a];
                    state.y[(i, k)] - mu[k]
                });
                let shift = &gain * dev_o;
                let z = linalg::std_normal_vector(nm, &mut state.rng);
                let noise = &cond_l * z;
                for (a, &k) in pat.missing.iter().enumerate() {
                    state.y[(i, k)] = mu[k] + shift[a] + noise[a];
                }
            }
        }
        Ok(())
    }

    /// One full scan in the fixed order.
    pub fn scan(&self, state: &mut GibbsState) -> Result<()> {
        state.iteration += 1;
        let it = state.iteration;
        let tag = |e: Error| match e {
            Error::Numerical(message) => Error::Divergence {
                iteration: it,
                message,
            },
            other => other,
        };
        self.impute_missing(state).map_err(tag)?;
        self.draw_b(state).map_err(tag)?;
        self.draw_beta(state).map_err(tag)?;
        self.draw_sigma(state).map_err(tag)?;
        self.draw_psi(state).map_err(tag)?;
        let finite = state.beta.iter().all(|v| v.is_finite())
            && state.sigma.iter().all(|v| v.is_finite())
            && state.psi.iter().all(|v| v.is_finite())
            && state.b.iter().all(|b| b.iter().all(|v| v.is_finite()))
            && state.y.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence {
                iteration: it,
                message: "non-finite parameter or imputed value".into(),
            });
        }
        Ok(())
    }

    /// Parameter names in trace order.
    pub fn parameter_names(&self) -> Vec<String> {
        let d = self.design;
        let mut names = Vec::new();
        for i in 0..d.p() {
            for k in 0..d.r() {
                names.push(format!("Beta[{},{}]", i + 1, k + 1));
            }
        }
        if self.mode == ImputationMode::Multilevel {
            let qr = d.q() * d.r();
            for i in 0..qr {
                for j in 0..=i {
                    names.push(format!("Psi[{},{}]", i + 1, j + 1));
                }
            }
        }
        for i in 0..d.r() {
            for j in 0..=i {
                names.push(format!("Sigma[{},{}]", i + 1, j + 1));
            }
        }
        names
    }

    fn parameter_values(&self, state: &GibbsState) -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..state.beta.nrows() {
            for k in 0..state.beta.ncols() {
                v.push(state.beta[(i, k)]);
            }
        }
        if self.mode == ImputationMode::Multilevel {
            v.extend(linalg::lower_triangle(&state.psi));
        }
        v.extend(linalg::lower_triangle(&state.sigma));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Burnin,
    Imputation,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Burnin => "burnin",
            Phase::Imputation => "imputation",
        }
    }
}

/// Stored parameter traces, one row per stored iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStore {
    pub names: Vec<String>,
    pub iterations: Vec<u64>,
    /// Last burn-in iteration; later iterations belong to the imputation phase.
    pub burn_in: u64,
    /// One trace per parameter.
    pub values: Vec<Vec<f64>>,
}

impl ChainStore {
    pub fn new(names: Vec<String>, burn_in: u64) -> Self {
        let values = vec![Vec::new(); names.len()];
        ChainStore {
            names,
            iterations: Vec::new(),
            burn_in,
            values,
        }
    }

    pub fn push(&mut self, iteration: u64, row: &[f64]) {
        assert_eq!(row.len(), self.names.len());
        self.iterations.push(iteration);
        for (trace, &v) in self.values.iter_mut().zip(row) {
            trace.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn phase(&self, idx: usize) -> Phase {
        if self.iterations[idx] <= self.burn_in {
            Phase::Burnin
        } else {
            Phase::Imputation
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn trace(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|k| self.values[k].as_slice())
    }

    /// Index of the first stored imputation-phase iteration.
    pub fn imputation_start(&self) -> usize {
        self.iterations.partition_point(|&t| t <= self.burn_in)
    }

    pub fn imputation_trace(&self, name: &str) -> Option<&[f64]> {
        let start = self.imputation_start();
        self.trace(name).map(|t| &t[start..])
    }

    /// Columnar file: `iteration,phase,<one column per parameter>`.
    pub fn write_delimited<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iteration".to_string(), "phase".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for idx in 0..self.len() {
            let mut rec = vec![self.iterations[idx].to_string(), self.phase(idx).as_str().to_string()];
            rec.extend(self.values.iter().map(|t| crate::data::fmt_f64(t[idx])));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_delimited<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if header.len() < 2 || header[0] != "iteration" || header[1] != "phase" {
            return Err(Error::validation(
                "chain file must start with 'iteration,phase' columns",
            ));
        }
        let names = header[2..].to_vec();
        let mut store = ChainStore::new(names, 0);
        let mut burn_in = 0;
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |col: &str, msg: String| Error::Parse {
                row: r + 1,
                column: col.to_string(),
                message: msg,
            };
            let it: u64 = rec[0]
                .parse()
                .map_err(|_| bad("iteration", format!("'{}' is not an integer", &rec[0])))?;
            if &rec[1] == "burnin" {
                burn_in = it;
            }
            let row: Vec<f64> = (2..rec.len())
                .map(|k| {
                    rec[k]
                        .parse::<f64>()
                        .map_err(|_| bad(&header[k], format!("'{}' is not a number", &rec[k])))
                })
                .collect::<Result<_>>()?;
            store.push(it, &row);
        }
        store.burn_in = burn_in;
        Ok(store)
    }
}

/// Appends `other`'s traces to `self`, treating them as one longer chain
/// segment list. Both stores must have the same parameters.
pub fn concatenate_chains(stores: &[ChainStore]) -> Result<Vec<(String, Vec<f64>)>> {
    let first = stores
        .first()
        .ok_or_else(|| Error::validation("no chains to merge"))?;
    if stores.iter().any(|s| s.names != first.names) {
        return Err(Error::validation("chains have different parameters"));
    }
    Ok(first
        .names
        .iter()
        .map(|n| {
            let v = stores
                .iter()
                .flat_map(|s| s.imputation_trace(n).unwrap().iter().copied())
                .collect();
            (n.clone(), v)
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub imputations: Vec<Dataset>,
    pub chain: ChainStore,
    pub spec: ImputationSpec,
    pub iterations: u64,
    pub elapsed: Duration,
}

/// Observed-case variance of each response (denominator n − 1).
pub fn observed_variances(design: &DesignMatrices) -> Vec<f64> {
    (0..design.r())
        .map(|k| {
            let v: Vec<f64> = (0..design.n())
                .filter(|&i| design.observed[i][k])
                .map(|i| design.y[(i, k)])
                .collect();
            if v.len() < 2 {
                return f64::NAN;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        })
        .collect()
}

fn completed_dataset(source: &Dataset, design: &DesignMatrices, y: &DMatrix<f64>) -> Result<Dataset> {
    let mut out = source.clone();
    for (k, name) in design.response_names.iter().enumerate() {
        let col = source.require(name)?;
        let values = col
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| Some(v.unwrap_or(y[(i, k)])))
            .collect();
        out.set_values(name, values)?;
    }
    Ok(out)
}

/// Runs one chain and collects `spec.m` completed datasets.
pub fn run_imputation(spec: &ImputationSpec, data: &Dataset) -> Result<ImputationResult> {
    let start = Instant::now();
    spec.validate()?;
    let formula = parse_formula(&spec.formula)?;
    let design = build_design(&formula, data)?;
    let prior = match &spec.prior {
        Some(p) => p.clone(),
        None => default_prior(design.r(), design.q(), &observed_variances(&design))?,
    };
    let mut sampler = Sampler::new(&design, prior, spec.mode)?;
    sampler.hold(spec.fixed_sigma.is_some(), spec.fixed_psi.is_some());
    let mut state = sampler.init_state(spec.seed)?;
    if let Some(s) = &spec.fixed_sigma {
        if s.shape() != state.sigma.shape() {
            return Err(Error::validation("fixed_sigma has the wrong dimensions"));
        }
        state.sigma = s.clone();
    }
    if let Some(p) = &spec.fixed_psi {
        if p.shape() != state.psi.shape() {
            return Err(Error::validation("fixed_psi has the wrong dimensions"));
        }
        state.psi = p.clone();
    }

    let mut chain = ChainStore::new(sampler.parameter_names(), spec.n_burn);
    let mut imputations = Vec::with_capacity(spec.m);
    let total = spec.total_iterations();
    for t in 1..=total {
        sampler.scan(&mut state)?;
        if t % spec.trace_stride == 0 {
            chain.push(t, &sampler.parameter_values(&state));
        }
        if t > spec.n_burn && (t - spec.n_burn).is_multiple_of(spec.n_between) {
            imputations.push(completed_dataset(data, &design, &state.y)?);
        }
    }
    Ok(ImputationResult {
        imputations,
        chain,
        spec: spec.clone(),
        iterations: total,
        elapsed: start.elapsed(),
    })
}

/// Runs independent chains in parallel with seeds `spec.seed + k`.
pub fn run_chains(spec: &ImputationSpec, data: &Dataset, n_chains: usize) -> Result<Vec<ImputationResult>> {
    use rayon::prelude::*;
    (0..n_chains as u64)
        .into_par_iter()
        .map(|k| {
            let mut s = spec.clone();
            s.seed = spec.seed.wrapping_add(k);
            run_imputation(&s, data)
        })
        .collect()
}
