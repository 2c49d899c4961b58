//! Synthetic two-level data with known parameters, and missingness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{psd_factor, seeded_rng, serde_matrix, std_normal_vector, SimRng};

fn default_group_name() -> String {
    "group".into()
}

/// Generating model
/// `y_ij = x_ij β + z_ij b_j + e_ij` with `x_ij = (1, covariates)` and
/// `z_ij = (1, random_slopes)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLevelSpec {
    pub n_groups: usize,
    pub group_size: usize,
    #[serde(default = "default_group_name")]
    pub group_name: String,
    pub responses: Vec<String>,
    /// Standard-normal level-1 predictors.
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Share of each covariate's unit variance that sits between groups.
    #[serde(default)]
    pub covariate_icc: f64,
    /// Covariates that also carry random slopes.
    #[serde(default)]
    pub random_slopes: Vec<String>,
    /// (1 + covariates) × responses.
    #[serde(with = "serde_matrix")]
    pub beta: DMatrix<f64>,
    /// Covariance of vec(b_j), (q·r) × (q·r).
    #[serde(with = "serde_matrix")]
    pub psi: DMatrix<f64>,
    #[serde(with = "serde_matrix")]
    pub sigma: DMatrix<f64>,
    pub seed: u64,
}

impl TwoLevelSpec {
    /// Intercept-only model for one response with the given variance split.
    pub fn random_intercept(n_groups: usize, group_size: usize, tau: f64, sigma2: f64, seed: u64) -> Self {
        TwoLevelSpec {
            n_groups,
            group_size,
            group_name: default_group_name(),
            responses: vec!["y".into()],
            covariates: Vec::new(),
            covariate_icc: 0.0,
            random_slopes: Vec::new(),
            beta: DMatrix::zeros(1, 1),
            psi: DMatrix::from_element(1, 1, tau),
            sigma: DMatrix::from_element(1, 1, sigma2),
            seed,
        }
    }

    fn validate(&self) -> Result<(usize, usize, usize)> {
        let r = self.responses.len();
        let p = 1 + self.covariates.len();
        let q = 1 + self.random_slopes.len();
        if r == 0 {
            return Err(Error::validation("at least one response is required"));
        }
        if self.n_groups == 0 || self.group_size == 0 {
            return Err(Error::validation("n_groups and group_size must be positive"));
        }
        if let Some(s) = self.random_slopes.iter().find(|s| !self.covariates.contains(s)) {
            return Err(Error::validation(format!("random slope '{s}' is not a covariate")));
        }
        if !(0.0..=1.0).contains(&self.covariate_icc) {
            return Err(Error::validation("covariate_icc must lie in [0, 1]"));
        }
        if self.beta.shape() != (p, r) {
            return Err(Error::validation(format!("beta must be {p}x{r}")));
        }
        if self.psi.shape() != (q * r, q * r) {
            return Err(Error::validation(format!("psi must be {0}x{0}", q * r)));
        }
        if self.sigma.shape() != (r, r) {
            return Err(Error::validation(format!("sigma must be {r}x{r}")));
        }
        let mut names: Vec<&String> = self.responses.iter().chain(&self.covariates).collect();
        names.push(&self.group_name);
        let n = names.len();
        names.sort();
        names.dedup();
        if names.len() != n {
            return Err(Error::validation("variable names must be distinct"));
        }
        Ok((p, q, r))
    }

    /// Population ICC of each response's intercept component.
    pub fn intercept_icc(&self) -> Vec<(String, f64)> {
        let q = 1 + self.random_slopes.len();
        self.responses
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let tau = self.psi[(k * q, k * q)];
                (name.clone(), tau / (tau + self.sigma[(k, k)]))
            })
            .collect()
    }
}

/// True parameters written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: TwoLevelSpec,
    pub icc: Vec<(String, f64)>,
}

/// Draws one dataset. Groups are labelled `1..=n_groups`.
pub fn generate_two_level(spec: &TwoLevelSpec) -> Result<(Dataset, Truth)> {
    let (p, q, r) = spec.validate()?;
    let psi_f = psd_factor(&spec.psi, "psi")?;
    let sigma_f = psd_factor(&spec.sigma, "sigma")?;
    let mut rng = seeded_rng(spec.seed);
    let n = spec.n_groups * spec.group_size;
    let nc = spec.covariates.len();
    let slope_idx: Vec<usize> = spec
        .random_slopes
        .iter()
        .map(|s| spec.covariates.iter().position(|c| c == s).unwrap())
        .collect();
    let mut y = vec![vec![0.0; n]; r];
    let mut x = vec![vec![0.0; n]; nc];
    let mut labels = Vec::with_capacity(n);
    let (wb, ww) = (spec.covariate_icc.sqrt(), (1.0 - spec.covariate_icc).sqrt());
    let mut row = 0;
    for j in 0..spec.n_groups {
        let b_vec = &psi_f * std_normal_vector(q * r, &mut rng);
        let b = DMatrix::from_column_slice(q, r, b_vec.as_slice());
        let cov_means = std_normal_vector(nc, &mut rng);
        for _ in 0..spec.group_size {
            let xi = DVector::from_fn(nc, |c, _| {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                wb * cov_means[c] + ww * z
            });
            let e = &sigma_f * std_normal_vector(r, &mut rng);
            for k in 0..r {
                let mut v = spec.beta[(0, k)] + b[(0, k)] + e[k];
                for c in 0..nc {
                    v += xi[c] * spec.beta[(c + 1, k)];
                }
                for (a, &c) in slope_idx.iter().enumerate() {
                    v += xi[c] * b[(a + 1, k)];
                }
                y[k][row] = v;
            }
            for c in 0..nc {
                x[c][row] = xi[c];
            }
            labels.push((j + 1).to_string());
            row += 1;
        }
    }
    debug_assert_eq!(p, nc + 1);
    let mut columns: Vec<Column> = spec
        .responses
        .iter()
        .zip(&y)
        .map(|(name, v)| Column::complete(name.clone(), v))
        .collect();
    columns.extend(spec.covariates.iter().zip(&x).map(|(name, v)| Column::complete(name.clone(), v)));
    let d = Dataset::new(spec.group_name.clone(), labels, columns)?;
    Ok((
        d,
        Truth {
            spec: spec.clone(),
            icc: spec.intercept_icc(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "UPPERCASE")]
pub enum Mechanism {
    Mcar,
    /// Missingness probability `logistic(a + slope·z)` with `z` the
    /// standardized driver and `a` calibrated to the target rate.
    Mar { driver: String, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Amputation {
    pub mechanism: Mechanism,
    pub rates: Vec<(String, f64)>,
    pub seed: u64,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Intercept `a` with mean of `logistic(a + slope·z)` equal to `rate`.
pub fn calibrate_intercept(z: &[f64], slope: f64, rate: f64) -> f64 {
    let mean_p = |a: f64| z.iter().map(|&v| logistic(a + slope * v)).sum::<f64>() / z.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_p(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    0.5 * (lo + hi)
}

fn standardized(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    if sd > 0.0 {
        v.iter().map(|x| (x - m) / sd).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// One Bernoulli draw per row; `true` marks a cell to delete.
fn mar_mask(driver: &[f64], slope: f64, rate: f64, rng: &mut SimRng) -> Vec<bool> {
    let z = standardized(driver);
    let a = calibrate_intercept(&z, slope, rate);
    z.iter().map(|&v| rng.random::<f64>() < logistic(a + slope * v)).collect()
}

fn mcar_mask(n: usize, rate: f64, rng: &mut SimRng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < rate).collect()
}

fn delete(d: &mut Dataset, name: &str, mask: &[bool]) -> Result<()> {
    let values = d
        .require(name)?
        .values
        .iter()
        .zip(mask)
        .map(|(v, &m)| if m { None } else { *v })
        .collect();
    d.set_values(name, values)
}

fn driver_values(d: &Dataset, driver: &str) -> Result<Vec<f64>> {
    let col = d.require(driver)?;
    col.values
        .iter()
        .map(|v| {
            v.ok_or_else(|| Error::validation(format!("MAR driver '{driver}' has missing values")))
        })
        .collect()
}

/// Deletes values in the listed variables. Variables are processed in the
/// order given, each with its own draws.
pub fn ampute(d: &Dataset, spec: &Amputation) -> Result<Dataset> {
    for (name, rate) in &spec.rates {
        if !(0.0..1.0).contains(rate) {
            return Err(Error::validation(format!("rate for '{name}' must lie in [0, 1)")));
        }
        if name == d.group_name() {
            return Err(Error::validation("the group column cannot be amputed"));
        }
        d.require(name)?;
    }
    let driver = match &spec.mechanism {
        Mechanism::Mar { driver, .. } => {
            if spec.rates.iter().any(|(n, _)| n == driver) {
                return Err(Error::validation(format!(
                    "MAR driver '{driver}' cannot itself be amputed"
                )));
            }
            Some(driver_values(d, driver)?)
        }
        Mechanism::Mcar => None,
    };
    let mut rng = seeded_rng(spec.seed);
    let mut out = d.clone();
    for (name, rate) in &spec.rates {
        if *rate == 0.0 {
            continue;
        }
        let mask = match (&spec.mechanism, &driver) {
            (Mechanism::Mar { slope, .. }, Some(v)) => mar_mask(v, *slope, *rate, &mut rng),
            _ => mcar_mask(d.n_rows(), *rate, &mut rng),
        };
        delete(&mut out, name, &mask)?;
    }
    Ok(out)
}

/// Variables of the demo dataset in column order.
pub const PIRLS_VARIABLES: [&str; 7] = ["MA", "RA", "CA", "SES", "DPM", "DPR", "SC"];

/// Target pairwise correlations (upper triangle, row-major over
/// `PIRLS_VARIABLES`).
const PIRLS_CORRELATIONS: [f64; 21] = [
    0.528, 0.530, 0.232, -0.234, -0.238, -0.217, //
    0.493, 0.299, -0.291, -0.294, -0.327, //
    0.240, -0.265, -0.251, -0.221, //
    -0.154, -0.155, -0.123, //
    0.782, 0.399, //
    0.419,
];

const PIRLS_ICC: [f64; 7] = [0.121, 0.12, 0.10, 0.122, 0.179, 0.18, 0.25];
const PIRLS_MEAN: [f64; 7] = [500.0, 500.0, 100.0, 50.0, 2.5, 2.5, 3.0];
const PIRLS_SD: [f64; 7] = [100.0, 100.0, 15.0, 20.0, 1.0, 1.0, 0.7];

pub fn pirls_correlation() -> DMatrix<f64> {
    let mut r = DMatrix::identity(7, 7);
    let mut k = 0;
    for i in 0..7 {
        for j in (i + 1)..7 {
            r[(i, j)] = PIRLS_CORRELATIONS[k];
            r[(j, i)] = PIRLS_CORRELATIONS[k];
            k += 1;
        }
    }
    r
}

/// Between- and within-group covariance of the standardized variables:
/// `Σ_B = S R S` with `S = diag(√icc)` and `Σ_W = R − Σ_B`.
pub fn pirls_covariances() -> (DMatrix<f64>, DMatrix<f64>) {
    let r = pirls_correlation();
    let s = DMatrix::from_diagonal(&DVector::from_iterator(7, PIRLS_ICC.iter().map(|v| v.sqrt())));
    let between = &s * &r * &s;
    let within = &r - &between;
    (between, within)
}

/// 8,767 rows in 475 groups with the demo correlation and missingness profile.
///
/// Missingness, applied in this order:
/// * MA, DPM, DPR and SC deleted together for about 19% of rows, more
///   likely for low RA;
/// * DPM deleted for a random half of the rows (planned missingness);
/// * SES deleted for 35% of rows, more likely for low CA;
/// * a few extra independent deletions in DPM, DPR, SC and MA.
pub fn pirls_like(seed: u64) -> Result<Dataset> {
    let (n_groups, big_groups) = (475, 217);
    let (between, within) = pirls_covariances();
    let fb = psd_factor(&between, "between covariance")?;
    let fw = psd_factor(&within, "within covariance")?;
    let mut rng = seeded_rng(seed);
    let mut cols = vec![Vec::new(); 7];
    let mut labels = Vec::new();
    for j in 0..n_groups {
        let size = if j < big_groups { 19 } else { 18 };
        let u = &fb * std_normal_vector(7, &mut rng);
        for _ in 0..size {
            let e = &fw * std_normal_vector(7, &mut rng);
            for k in 0..7 {
                cols[k].push(PIRLS_MEAN[k] + PIRLS_SD[k] * (u[k] + e[k]));
            }
            labels.push((j + 1).to_string());
        }
    }
    let n = labels.len();
    let columns = PIRLS_VARIABLES
        .iter()
        .zip(&cols)
        .map(|(name, v)| Column::complete(*name, v))
        .collect();
    let mut d = Dataset::new("ID", labels, columns)?;

    let unit = mar_mask(&cols[1], -0.5, 0.19, &mut rng);
    for name in ["MA", "DPM", "DPR", "SC"] {
        delete(&mut d, name, &unit)?;
    }
    delete(&mut d, "DPM", &mcar_mask(n, 0.5, &mut rng))?;
    delete(&mut d, "SES", &mar_mask(&cols[2], -0.5, 0.35, &mut rng))?;
    for (name, rate) in [("DPM", 0.047), ("DPR", 0.031), ("SC", 0.033), ("MA", 0.005)] {
        delete(&mut d, name, &mcar_mask(n, rate, &mut rng))?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        let s = TwoLevelSpec::random_intercept(10, 5, 0.2, 0.8, 3);
        let (a, _) = generate_two_level(&s).unwrap();
        let (b, _) = generate_two_level(&s).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_rows(), 50);
        assert_eq!(a.group_index().n_groups(), 10);
    }

    #[test]
    fn zero_sigma_is_constant_within_group() {
        let s = TwoLevelSpec::random_intercept(4, 6, 1.0, 0.0, 1);
        let (d, truth) = generate_two_level(&s).unwrap();
        let y = &d.column("y").unwrap().values;
        for g in d.group_index().rows {
            assert!(g.iter().all(|&i| y[i] == y[g[0]]));
        }
        assert_eq!(truth.icc[0].1, 1.0);
    }

    #[test]
    fn invalid_covariance_is_rejected() {
        let mut s = TwoLevelSpec::random_intercept(4, 6, 1.0, 1.0, 1);
        s.sigma[(0, 0)] = -1.0;
        assert!(generate_two_level(&s).is_err());
    }

    #[test]
    fn calibration_hits_rate() {
        let z: Vec<f64> = (0..1000).map(|i| (i as f64 / 999.0 - 0.5) * 4.0).collect();
        for rate in [0.05, 0.3, 0.8] {
            let a = calibrate_intercept(&z, 1.5, rate);
            let m = z.iter().map(|&v| logistic(a + 1.5 * v)).sum::<f64>() / z.len() as f64;
            assert!((m - rate).abs() < 1e-9);
        }
    }

    #[test]
    fn ampute_rules() {
        let mut s = TwoLevelSpec::random_intercept(20, 10, 0.2, 0.8, 1);
        s.covariates = vec!["x".into()];
        s.beta = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let (d, _) = generate_two_level(&s).unwrap();
        let none = ampute(
            &d,
            &Amputation {
                mechanism: Mechanism::Mcar,
                rates: vec![("y".into(), 0.0)],
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(none, d);
        let bad = Amputation {
            mechanism: Mechanism::Mar {
                driver: "x".into(),
                slope: 1.0,
            },
            rates: vec![("x".into(), 0.2)],
            seed: 1,
        };
        assert!(ampute(&d, &bad).is_err());
        let mar = Amputation {
            mechanism: Mechanism::Mar {
                driver: "x".into(),
                slope: 1.0,
            },
            rates: vec![("y".into(), 0.3)],
            seed: 1,
        };
        let out = ampute(&d, &mar).unwrap();
        assert_eq!(out.column("x"), d.column("x"));
        assert_eq!(out.group_labels(), d.group_labels());
    }

    #[test]
    fn pirls_within_is_positive_definite() {
        let (b, w) = pirls_covariances();
        assert!(nalgebra::Cholesky::new(w).is_some());
        assert!(nalgebra::Cholesky::new(b).is_some());
    }
}
