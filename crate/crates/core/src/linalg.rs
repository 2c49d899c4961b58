//! Dense helpers shared by the sampler, the fitter and the generators.
//!
//! vec convention: `vec(M)` stacks the columns of `M`, which is exactly the
//! column-major storage order of `nalgebra::DMatrix`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    use rand::SeedableRng;
    SimRng::seed_from_u64(seed)
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{what} has non-finite entries")));
    }
    Cholesky::new(m.clone())
        .ok_or_else(|| Error::numerical(format!("{what} is not positive definite")))
}

/// Cholesky that also rejects numerically rank-deficient matrices.
pub fn full_rank_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let c = cholesky(m, what)?;
    let l = c.l_dirty();
    for i in 0..m.nrows() {
        if l[(i, i)] * l[(i, i)] <= 1e-12 * m[(i, i)].abs() {
            return Err(Error::numerical(format!("{what} is singular")));
        }
    }
    Ok(c)
}

/// Copies the lower triangle onto the upper one.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = cholesky(m, what)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn std_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

pub fn std_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // Filled column by column so the draw order is the vec order.
    let data: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Draws from Normal(P⁻¹ h, P⁻¹) given the precision `P` and `h`.
pub fn sample_mvn_canonical<R: Rng + ?Sized>(
    precision: &DMatrix<f64>,
    h: &DVector<f64>,
    rng: &mut R,
    what: &str,
) -> Result<DVector<f64>> {
    let chol = cholesky(precision, what)?;
    let mean = chol.solve(h);
    let z = std_normal_vector(h.len(), rng);
    // P = L L'  =>  L'⁻¹ z has covariance P⁻¹.
    let dev = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::numerical(format!("{what}: singular factor")))?;
    Ok(mean + dev)
}

/// Bartlett factor: lower-triangular `A` with `A_ii² ~ χ²(df − i)` and
/// standard normal entries below the diagonal, so `L A A' L'` is
/// Wishart(df, L L').
pub fn bartlett_factor<R: Rng + ?Sized>(d: usize, df: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if df <= (d as f64) - 1.0 {
        return Err(Error::numerical(format!(
            "Wishart degrees of freedom {df} too small for dimension {d}"
        )));
    }
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| Error::numerical(format!("chi-square draw: {e}")))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    Ok(a)
}

/// Wishart(df, scale) draw via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let l = cholesky(scale, "Wishart scale")?.l();
    let a = bartlett_factor(scale.nrows(), df, rng)?;
    let t = l * a;
    let mut w = &t * t.transpose();
    symmetrize(&mut w);
    Ok(w)
}

/// Draws a covariance `C` whose inverse is Wishart(df, S⁻¹), i.e. `C` is
/// inverse-Wishart with `df` degrees of freedom and scale `S`.
/// `E[C] = S / (df − d − 1)`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    df: f64,
    s: &DMatrix<f64>,
    rng: &mut R,
    what: &str,
) -> Result<DMatrix<f64>> {
    let d = s.nrows();
    let wishart_scale = spd_inverse(s, what)?;
    let l = cholesky(&wishart_scale, what)?.l();
    let a = bartlett_factor(d, df, rng)?;
    let t = l * a;
    // C = (T T')⁻¹ = T⁻ᵀ T⁻¹
    let t_inv = t
        .solve_lower_triangular(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::numerical(format!("{what}: singular Wishart factor")))?;
    let mut c = t_inv.transpose() * t_inv;
    symmetrize(&mut c);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("{what}: non-finite draw")));
    }
    Ok(c)
}

/// Square-root factor `F` with `F F' = m` for a positive semidefinite `m`.
/// Uses Cholesky when possible and a clipped eigendecomposition otherwise.
pub fn psd_factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.l());
    }
    let scale = m.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1.0);
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * scale) {
        return Err(Error::validation(format!("{what} is not positive semidefinite")));
    }
    let sqrt_l = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * sqrt_l)
}

/// Lower-triangle entries (row ≥ column) in row-major order.
pub fn lower_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in 0..=i {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Serde adapter writing matrices as row-major nested arrays.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("matrix rows have unequal lengths".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            m.as_ref().map(to_rows).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(
            d: D,
        ) -> Result<Option<DMatrix<f64>>, D::Error> {
            let rows = Option::<Vec<Vec<f64>>>::deserialize(d)?;
            rows.map(|r| from_rows(&r).map_err(D::Error::custom)).transpose()
        }
    }
}
