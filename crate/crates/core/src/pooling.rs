//! Combining inferences from multiply imputed datasets.
//!
//! `pool_estimates` applies Rubin's rules parameter by parameter. The three
//! multiparameter tests are `pool_constraints` (D1, Wald tests of
//! constraints through the delta method), `pool_chisq_d2` (D2, pooling of
//! chi-square statistics) and `pool_lrt_d3` (D3, pooled likelihood-ratio
//! tests).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::serde_matrix;
use crate::lmm::{LmmFit, Method};

/// Writes infinite values as the string `"Inf"` and reads them back.
pub mod serde_inf {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "Inf" } else { "-Inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        match Num::deserialize(d)? {
            Num::F(v) => Ok(v),
            Num::S(s) if s == "Inf" => Ok(f64::INFINITY),
            Num::S(s) if s == "-Inf" => Ok(f64::NEG_INFINITY),
            Num::S(s) => Err(D::Error::custom(format!("expected a number or \"Inf\", got '{s}'"))),
        }
    }
}

/// Formats a number for tables, printing infinity as `Inf`.
pub fn fmt_num(v: f64, decimals: usize) -> String {
    if v.is_infinite() {
        if v > 0.0 { "Inf".into() } else { "-Inf".into() }
    } else {
        format!("{v:.decimals$}")
    }
}

/// Point estimates and their covariance from one completed dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub names: Vec<String>,
    pub values: Vec<f64>,
    #[serde(with = "serde_matrix")]
    pub vcov: DMatrix<f64>,
    pub df_com: Option<f64>,
    /// Quantities pooled as plain means without standard errors.
    #[serde(default)]
    pub components: Vec<(String, f64)>,
}

impl Estimates {
    pub fn new(names: Vec<String>, values: Vec<f64>, vcov: DMatrix<f64>) -> Result<Self> {
        let k = names.len();
        if values.len() != k || vcov.shape() != (k, k) {
            return Err(Error::validation("estimate names, values and covariance disagree in size"));
        }
        Ok(Estimates {
            names,
            values,
            vcov,
            df_com: None,
            components: Vec::new(),
        })
    }

    pub fn from_fit(fit: &LmmFit) -> Self {
        Estimates {
            names: fit.fixed_names.clone(),
            values: fit.beta.clone(),
            vcov: fit.vcov.clone(),
            df_com: Some(fit.df_com),
            components: fit.components.iter().map(|c| (c.name.clone(), c.value)).collect(),
        }
    }
}

/// Rubin's rules for one scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RubinScalar {
    pub m: usize,
    pub qbar: f64,
    pub ubar: f64,
    pub b: f64,
    pub t: f64,
    pub riv: f64,
    pub df: f64,
    pub fmi: f64,
}

/// Mean computed around the first value, so identical inputs return that
/// value exactly.
fn mean(x: &[f64]) -> f64 {
    let x0 = x[0];
    x0 + x.iter().map(|v| v - x0).sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Combines estimates `q` with squared standard errors `u`. With
/// `df_com` the Barnard–Rubin small-sample degrees of freedom are used.
pub fn rubin_scalar(q: &[f64], u: &[f64], df_com: Option<f64>) -> Result<RubinScalar> {
    let m = q.len();
    if m < 2 {
        return Err(Error::validation("pooling needs at least 2 imputations"));
    }
    if u.len() != m {
        return Err(Error::validation("estimates and variances differ in length"));
    }
    let mf = m as f64;
    let qbar = mean(q);
    let ubar = mean(u);
    let b = sample_variance(q);
    let t = ubar + (1.0 + 1.0 / mf) * b;
    let riv = if b == 0.0 {
        0.0
    } else if ubar == 0.0 {
        f64::INFINITY
    } else {
        (1.0 + 1.0 / mf) * b / ubar
    };
    let rubin_df = if riv == 0.0 {
        f64::INFINITY
    } else {
        (mf - 1.0) * (1.0 + 1.0 / riv).powi(2)
    };
    let df = match df_com {
        Some(dc) => barnard_rubin_df(m, b, ubar, dc)?,
        None => rubin_df,
    };
    let fmi = if riv.is_infinite() {
        1.0
    } else {
        (riv + 2.0 / (df + 3.0)) / (riv + 1.0)
    };
    Ok(RubinScalar {
        m,
        qbar,
        ubar,
        b,
        t,
        riv,
        df,
        fmi,
    })
}

/// Small-sample degrees of freedom of Barnard and Rubin.
pub fn barnard_rubin_df(m: usize, b: f64, ubar: f64, df_com: f64) -> Result<f64> {
    if !(df_com > 0.0) {
        return Err(Error::validation("complete-data degrees of freedom must be positive"));
    }
    let mf = m as f64;
    let t = ubar + (1.0 + 1.0 / mf) * b;
    let gamma = if t > 0.0 { (1.0 + 1.0 / mf) * b / t } else { 0.0 };
    let nu_obs = (df_com + 1.0) / (df_com + 3.0) * df_com * (1.0 - gamma);
    let nu = if b == 0.0 {
        f64::INFINITY
    } else {
        (mf - 1.0) / (gamma * gamma)
    };
    Ok(1.0 / (1.0 / nu + 1.0 / nu_obs))
}

/// Beyond this many degrees of freedom the t and F references are replaced
/// by their normal and chi-square limits.
const LARGE_DF: f64 = 1e10;

/// Two-sided p-value of `t` against a t distribution (normal when `df` is infinite).
pub fn t_test_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if df > LARGE_DF {
        statrs::function::erf::erfc(t.abs() / std::f64::consts::SQRT_2)
    } else {
        statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t * t))
    }
}

/// Upper-tail p-value of `f` against F(df1, df2) (scaled chi-square when `df2` is infinite).
pub fn f_test_p(f: f64, df1: f64, df2: f64) -> f64 {
    if f.is_nan() {
        return f64::NAN;
    }
    if f <= 0.0 {
        return 1.0;
    }
    if df2 > LARGE_DF {
        statrs::function::gamma::gamma_ur(df1 / 2.0, df1 * f / 2.0)
    } else {
        statrs::function::beta::beta_reg(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledParameter {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    #[serde(with = "serde_inf")]
    pub df: f64,
    pub p_value: f64,
    pub riv: f64,
    pub fmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledComponent {
    pub name: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimates {
    pub m: usize,
    pub adjusted_df: bool,
    pub parameters: Vec<PooledParameter>,
    pub components: Vec<PooledComponent>,
}

impl PooledEstimates {
    pub fn get(&self, name: &str) -> Option<&PooledParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Final parameter estimates and inferences obtained from {} imputed data sets.\n",
            self.m
        );
        let w = self
            .parameters
            .iter()
            .map(|p| p.name.len())
            .chain(self.components.iter().map(|c| c.name.len()))
            .max()
            .unwrap_or(0)
            .max(4);
        let _ = writeln!(
            s,
            "{:<w$} {:>10} {:>10} {:>9} {:>10} {:>9} {:>7} {:>7}",
            "", "Estimate", "Std.Error", "t.value", "df", "P(>|t|)", "RIV", "FMI"
        );
        for p in &self.parameters {
            let _ = writeln!(
                s,
                "{:<w$} {:>10.3} {:>10.3} {:>9.3} {:>10} {:>9.3} {:>7.3} {:>7.3}",
                p.name,
                p.estimate,
                p.std_error,
                p.t_value,
                fmt_num(p.df, 1),
                p.p_value,
                p.riv,
                p.fmi
            );
        }
        if !self.components.is_empty() {
            let _ = writeln!(s, "\n{:<w$} {:>10}", "", "Estimate");
            for c in &self.components {
                let _ = writeln!(s, "{:<w$} {:>10.3}", c.name, c.estimate);
            }
        }
        let _ = writeln!(
            s,
            "\n{}",
            if self.adjusted_df {
                "Hypothesis test adjusted for small samples with df=[complete-data residual df]."
            } else {
                "Unadjusted hypothesis test as appropriate in larger samples."
            }
        );
        s
    }
}

fn check_same_names(sets: &[Estimates]) -> Result<()> {
    let first = &sets[0];
    for (l, e) in sets.iter().enumerate().skip(1) {
        if e.names != first.names {
            return Err(Error::validation(format!(
                "imputation {} has parameters [{}] but imputation 1 has [{}]",
                l + 1,
                e.names.join(", "),
                first.names.join(", ")
            )));
        }
        let cn: Vec<&String> = e.components.iter().map(|c| &c.0).collect();
        let fn_: Vec<&String> = first.components.iter().map(|c| &c.0).collect();
        if cn != fn_ {
            return Err(Error::validation(format!(
                "imputation {} has different variance components from imputation 1",
                l + 1
            )));
        }
    }
    Ok(())
}

/// Rubin's rules for every parameter. With `adjust_df`, each set's
/// `df_com` drives the Barnard–Rubin correction.
pub fn pool_estimates(sets: &[Estimates], adjust_df: bool) -> Result<PooledEstimates> {
    if sets.len() < 2 {
        return Err(Error::validation("pooling needs at least 2 imputations"));
    }
    check_same_names(sets)?;
    let df_com = if adjust_df {
        Some(sets[0].df_com.ok_or_else(|| {
            Error::validation("small-sample adjustment needs complete-data degrees of freedom")
        })?)
    } else {
        None
    };
    let parameters = sets[0]
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let q: Vec<f64> = sets.iter().map(|e| e.values[i]).collect();
            let u: Vec<f64> = sets.iter().map(|e| e.vcov[(i, i)]).collect();
            let r = rubin_scalar(&q, &u, df_com)?;
            let se = r.t.sqrt();
            let t_value = r.qbar / se;
            Ok(PooledParameter {
                name: name.clone(),
                estimate: r.qbar,
                std_error: se,
                t_value,
                df: r.df,
                p_value: t_test_p(t_value, r.df),
                riv: r.riv,
                fmi: r.fmi,
            })
        })
        .collect::<Result<_>>()?;
    let m = sets.len() as f64;
    let components = sets[0]
        .components
        .iter()
        .enumerate()
        .map(|(k, (name, _))| PooledComponent {
            name: name.clone(),
            estimate: sets.iter().map(|e| e.components[k].1).sum::<f64>() / m,
        })
        .collect();
    Ok(PooledEstimates {
        m: sets.len(),
        adjusted_df: adjust_df,
        parameters,
        components,
    })
}

// ---------------------------------------------------------------------------
// Constraint expressions

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(f64),
    Param(usize),
    Neg(Box<Expr>),
    Bin(char, Box<Expr>, Box<Expr>),
}

impl Expr {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Param(i) => x[*i],
            Expr::Neg(e) => -e.eval(x),
            Expr::Bin(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                match op {
                    '+' => a + b,
                    '-' => a - b,
                    '*' => a * b,
                    _ => a / b,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Name(String),
    Op(char),
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let is_name_start = |c: u8| c.is_ascii_alphabetic() || c == b'_' || c == b'.';
    let is_name = |c: u8| c.is_ascii_alphanumeric() || c == b'_' || c == b'.' || c == b':';
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    i = j;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let s = &text[start..i];
            let v = s.parse::<f64>().map_err(|_| Error::Syntax {
                offset: start,
                message: format!("malformed number '{s}'"),
            })?;
            out.push((start, Tok::Num(v)));
        } else if is_name_start(c) {
            let start = i;
            while i < bytes.len() && is_name(bytes[i]) {
                i += 1;
            }
            out.push((start, Tok::Name(text[start..i].to_string())));
        } else if b"+-*/".contains(&c) {
            out.push((i, Tok::Op(c as char)));
            i += 1;
        } else if c == b'(' {
            out.push((i, Tok::LParen));
            i += 1;
        } else if c == b')' {
            out.push((i, Tok::RParen));
            i += 1;
        } else {
            let ch = text[i..].chars().next().unwrap();
            return Err(Error::Syntax {
                offset: i,
                message: format!("unexpected character '{ch}'"),
            });
        }
    }
    Ok(out)
}

struct ExprParser<'a> {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
    names: &'a [String],
}

impl ExprParser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(op @ ('+' | '-'))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(op @ ('*' | '/'))) = self.peek() {
            let op = *op;
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Some(Tok::Name(n)) => {
                self.pos += 1;
                let idx = self.names.iter().position(|x| *x == n).ok_or_else(|| {
                    Error::validation(format!(
                        "constraint refers to unknown parameter '{n}' (known: {})",
                        self.names.join(", ")
                    ))
                })?;
                Ok(Expr::Param(idx))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(Error::Syntax {
                        offset: self.offset(),
                        message: "expected ')'".into(),
                    });
                }
                self.pos += 1;
                Ok(e)
            }
            Some(t) => Err(Error::Syntax {
                offset,
                message: format!("unexpected {t:?}"),
            }),
            None => Err(Error::Syntax {
                offset,
                message: "unexpected end of expression".into(),
            }),
        }
    }
}

/// A parsed function of named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub text: String,
    expr: Expr,
}

impl Constraint {
    pub fn parse(text: &str, names: &[String]) -> Result<Self> {
        let toks = tokenize(text)?;
        let mut p = ExprParser {
            toks,
            pos: 0,
            end: text.len(),
            names,
        };
        let expr = p.expr()?;
        if p.pos < p.toks.len() {
            return Err(Error::Syntax {
                offset: p.offset(),
                message: "unexpected trailing input".into(),
            });
        }
        Ok(Constraint {
            text: text.trim().to_string(),
            expr,
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.expr.eval(x)
    }
}

/// Value and delta-method variance of `g(θ̂)`, with the gradient from
/// central differences.
pub fn delta_method(constraint: &Constraint, values: &[f64], vcov: &DMatrix<f64>) -> (f64, f64) {
    let grad = gradient(constraint, values);
    let value = constraint.eval(values);
    let variance = (grad.transpose() * vcov * &grad)[(0, 0)];
    (value, variance)
}

fn gradient(c: &Constraint, values: &[f64]) -> DVector<f64> {
    let mut x = values.to_vec();
    DVector::from_fn(values.len(), |i, _| {
        let h = 1e-6 * values[i].abs().max(1.0);
        x[i] = values[i] + h;
        let up = c.eval(&x);
        x[i] = values[i] - h;
        let down = c.eval(&x);
        x[i] = values[i];
        (up - down) / (2.0 * h)
    })
}

// ---------------------------------------------------------------------------
// Multiparameter tests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Procedure {
    D1,
    D2,
    D3,
}

impl std::fmt::Display for Procedure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintEstimate {
    pub constraint: String,
    pub estimate: f64,
    pub std_error: f64,
    pub fmi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DTestResult {
    pub procedure: Procedure,
    pub m: usize,
    pub f_value: f64,
    pub df1: f64,
    #[serde(with = "serde_inf")]
    pub df2: f64,
    pub p_value: f64,
    pub riv: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl DTestResult {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.constraints.is_empty() {
            let _ = writeln!(s, "Model comparison calculated from {} imputed data sets.", self.m);
        } else {
            let _ = writeln!(
                s,
                "Hypothesis test calculated from {} imputed data sets. The following\nconstraints were specified:\n",
                self.m
            );
            let w = self.constraints.iter().map(|c| c.constraint.len() + 1).max().unwrap_or(0);
            let _ = writeln!(s, "  {:<w$} {:>10} {:>10}", "", "Estimate", "Std.Error");
            for c in &self.constraints {
                let _ = writeln!(
                    s,
                    "  {:<w$} {:>10.3} {:>10.3}",
                    format!("{}:", c.constraint),
                    c.estimate,
                    c.std_error
                );
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(s, "Combination method: {}\n", self.procedure);
        let _ = writeln!(
            s,
            "  {:>9} {:>7} {:>10} {:>9} {:>9}",
            "F.value", "df1", "df2", "P(>F)", "RIV"
        );
        let _ = writeln!(
            s,
            "  {:>9.3} {:>7} {:>10} {:>9.3} {:>9.3}",
            self.f_value,
            fmt_num(self.df1, 0),
            fmt_num(self.df2, 1),
            self.p_value,
            self.riv
        );
        for n in &self.notes {
            let _ = writeln!(s, "\nNote: {n}");
        }
        s
    }
}

/// Denominator degrees of freedom shared by D1 and D3.
fn li_df2(k: f64, m: f64, r: f64) -> f64 {
    if r == 0.0 {
        return f64::INFINITY;
    }
    let t = k * (m - 1.0);
    if t > 4.0 {
        4.0 + (t - 4.0) * (1.0 + (1.0 - 2.0 / t) / r).powi(2)
    } else {
        t * (1.0 + 1.0 / k) * (1.0 + 1.0 / r).powi(2) / 2.0
    }
}

/// D1: Wald test of `constraints = 0`.
pub fn pool_constraints(sets: &[Estimates], constraints: &[&str]) -> Result<DTestResult> {
    let m = sets.len();
    if m < 2 {
        return Err(Error::validation("pooling needs at least 2 imputations"));
    }
    if constraints.is_empty() {
        return Err(Error::validation("at least one constraint is required"));
    }
    check_same_names(sets)?;
    let parsed: Vec<Constraint> = constraints
        .iter()
        .map(|c| Constraint::parse(c, &sets[0].names))
        .collect::<Result<_>>()?;
    let k = parsed.len();
    let mut qs: Vec<DVector<f64>> = Vec::with_capacity(m);
    let mut us: Vec<DMatrix<f64>> = Vec::with_capacity(m);
    for e in sets {
        let grads: Vec<DVector<f64>> = parsed.iter().map(|c| gradient(c, &e.values)).collect();
        let g = DMatrix::from_fn(k, e.values.len(), |i, j| grads[i][j]);
        qs.push(DVector::from_iterator(k, parsed.iter().map(|c| c.eval(&e.values))));
        us.push(&g * &e.vcov * g.transpose());
    }
    let mf = m as f64;
    let qbar = qs.iter().fold(DVector::zeros(k), |a, q| a + q) / mf;
    let ubar = us.iter().fold(DMatrix::zeros(k, k), |a, u| a + u) / mf;
    let mut b = DMatrix::zeros(k, k);
    for q in &qs {
        let d = q - &qbar;
        b += &d * d.transpose();
    }
    b /= mf - 1.0;
    let ubar_inv = crate::linalg::full_rank_cholesky(&ubar, "U")
        .map_err(|_| {
            Error::numerical(
                "pooled within-imputation covariance of the constraints is singular \
                 (constant or redundant constraints)",
            )
        })?
        .inverse();
    let r1 = (1.0 + 1.0 / mf) * (&b * &ubar_inv).trace() / k as f64;
    let kf = k as f64;
    let f_value = (qbar.transpose() * &ubar_inv * &qbar)[(0, 0)] / (kf * (1.0 + r1));
    let df2 = li_df2(kf, mf, r1);

    let mut fmis = Vec::with_capacity(k);
    let mut estimates = Vec::with_capacity(k);
    for (i, c) in parsed.iter().enumerate() {
        let q: Vec<f64> = qs.iter().map(|v| v[i]).collect();
        let u: Vec<f64> = us.iter().map(|v| v[(i, i)]).collect();
        let r = rubin_scalar(&q, &u, None)?;
        fmis.push(r.fmi);
        estimates.push(ConstraintEstimate {
            constraint: c.text.clone(),
            estimate: r.qbar,
            std_error: r.t.sqrt(),
            fmi: r.fmi,
        });
    }
    let mut notes = Vec::new();
    fmi_spread_note(&fmis, &mut notes);
    Ok(DTestResult {
        procedure: Procedure::D1,
        m,
        f_value,
        df1: kf,
        df2,
        p_value: f_test_p(f_value, kf, df2),
        riv: r1,
        constraints: estimates,
        notes,
    })
}

fn fmi_spread_note(fmis: &[f64], notes: &mut Vec<String>) {
    let lo = fmis.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = fmis.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.2 {
        notes.push(format!(
            "fractions of missing information differ across the tested parameters \
             ({lo:.3} to {hi:.3}); the pooled test assumes they are roughly equal"
        ));
    }
}

/// D2: pooled chi-square statistics on `k` degrees of freedom.
pub fn pool_chisq_d2(stats: &[f64], k: usize) -> Result<DTestResult> {
    let m = stats.len();
    if m < 2 {
        return Err(Error::validation("pooling needs at least 2 imputations"));
    }
    if k == 0 {
        return Err(Error::validation("degrees of freedom k must be at least 1"));
    }
    if let Some(i) = stats.iter().position(|s| !(*s >= 0.0)) {
        return Err(Error::validation(format!(
            "chi-square statistic {} of imputation {} is negative or undefined",
            stats[i],
            i + 1
        )));
    }
    let (mf, kf) = (m as f64, k as f64);
    let dbar = stats.iter().sum::<f64>() / mf;
    let roots: Vec<f64> = stats.iter().map(|s| s.sqrt()).collect();
    let r2 = (1.0 + 1.0 / mf) * sample_variance(&roots);
    let raw = (dbar / kf - (mf + 1.0) / (mf - 1.0) * r2) / (1.0 + r2);
    let mut notes = Vec::new();
    let f_value = if raw < 0.0 {
        notes.push(format!("negative D2 statistic ({raw:.4}) set to 0"));
        0.0
    } else {
        raw
    };
    let df2 = if r2 == 0.0 {
        f64::INFINITY
    } else {
        kf.powf(-3.0 / mf) * (mf - 1.0) * (1.0 + 1.0 / r2).powi(2)
    };
    Ok(DTestResult {
        procedure: Procedure::D2,
        m,
        f_value,
        df1: kf,
        df2,
        p_value: f_test_p(f_value, kf, df2),
        riv: r2,
        constraints: Vec::new(),
        notes,
    })
}

/// Average of per-imputation ML estimates of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanParameters {
    pub beta: Vec<f64>,
    pub psi: DMatrix<f64>,
    pub sigma2: f64,
}

impl MeanParameters {
    pub fn from_fits(fits: &[LmmFit]) -> Result<Self> {
        let first = fits.first().ok_or_else(|| Error::validation("no fits to average"))?;
        let m = fits.len() as f64;
        let mut beta = vec![0.0; first.beta.len()];
        let mut psi = DMatrix::zeros(first.psi.nrows(), first.psi.ncols());
        let mut sigma2 = 0.0;
        for f in fits {
            if f.fixed_names != first.fixed_names || f.random_names != first.random_names {
                return Err(Error::validation("fits of one model have different parameters"));
            }
            for (a, b) in beta.iter_mut().zip(&f.beta) {
                *a += b / m;
            }
            psi += &f.psi / m;
            sigma2 += f.sigma2 / m;
        }
        Ok(MeanParameters { beta, psi, sigma2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Full,
    Null,
}

fn same_model(a: &LmmFit, b: &LmmFit) -> bool {
    a.fixed_names == b.fixed_names && a.random_names == b.random_names && a.group == b.group
}

/// D3: pooled likelihood-ratio test of `null` against `full`.
///
/// `loglik` evaluates the ML log-likelihood of one model on imputation `l`
/// at the given parameter values.
pub fn pool_lrt_d3<F>(full: &[LmmFit], null: &[LmmFit], mut loglik: F) -> Result<DTestResult>
where
    F: FnMut(Which, usize, &MeanParameters) -> Result<f64>,
{
    let m = full.len();
    if m < 2 {
        return Err(Error::validation("pooling needs at least 2 imputations"));
    }
    if null.len() != m {
        return Err(Error::validation("both models need one fit per imputation"));
    }
    if full.iter().chain(null).any(|f| f.method != Method::Ml) {
        return Err(Error::validation(
            "likelihood-ratio pooling needs ML fits; REML likelihoods of models with \
             different fixed effects are not comparable",
        ));
    }
    let k = full[0].n_params as i64 - null[0].n_params as i64;
    if k == 0 && same_model(&full[0], &null[0]) {
        return Ok(DTestResult {
            procedure: Procedure::D3,
            m,
            f_value: 0.0,
            df1: 0.0,
            df2: f64::INFINITY,
            p_value: 1.0,
            riv: 0.0,
            constraints: Vec::new(),
            notes: vec!["the two models are identical".into()],
        });
    }
    if k <= 0 {
        return Err(Error::validation(format!(
            "the null model must be nested in the full model with fewer parameters \
             (full has {}, null has {})",
            full[0].n_params, null[0].n_params
        )));
    }
    let (mf, kf) = (m as f64, k as f64);
    let dbar = full
        .iter()
        .zip(null)
        .map(|(a, b)| 2.0 * (a.loglik - b.loglik))
        .sum::<f64>()
        / mf;
    let pf = MeanParameters::from_fits(full)?;
    let pn = MeanParameters::from_fits(null)?;
    let mut dtilde = 0.0;
    for l in 0..m {
        dtilde += 2.0 * (loglik(Which::Full, l, &pf)? - loglik(Which::Null, l, &pn)?);
    }
    dtilde /= mf;
    let raw = (mf + 1.0) / (kf * (mf - 1.0)) * (dbar - dtilde);
    let mut notes = Vec::new();
    let r3 = if raw < 0.0 {
        notes.push(format!("negative D3 variance ratio ({raw:.4}) set to 0"));
        0.0
    } else {
        raw
    };
    let f_raw = dtilde / (kf * (1.0 + r3));
    let f_value = if f_raw < 0.0 {
        notes.push(format!("negative D3 statistic ({f_raw:.4}) set to 0"));
        0.0
    } else {
        f_raw
    };
    let df2 = li_df2(kf, mf, r3);
    Ok(DTestResult {
        procedure: Procedure::D3,
        m,
        f_value,
        df1: kf,
        df2,
        p_value: f_test_p(f_value, kf, df2),
        riv: r3,
        constraints: Vec::new(),
        notes,
    })
}

/// Per-imputation likelihood-ratio statistics `2(ℓ_full − ℓ_null)` for D2.
pub fn lrt_statistics(full: &[LmmFit], null: &[LmmFit]) -> Result<(Vec<f64>, usize)> {
    if full.len() != null.len() || full.is_empty() {
        return Err(Error::validation("both models need one fit per imputation"));
    }
    if full.iter().chain(null).any(|f| f.method != Method::Ml) {
        return Err(Error::validation("likelihood-ratio statistics need ML fits"));
    }
    let k = full[0].n_params as i64 - null[0].n_params as i64;
    if k <= 0 {
        return Err(Error::validation("the null model must have fewer parameters than the full model"));
    }
    let stats = full
        .iter()
        .zip(null)
        .map(|(a, b)| (2.0 * (a.loglik - b.loglik)).max(0.0))
        .collect();
    Ok((stats, k as usize))
}
