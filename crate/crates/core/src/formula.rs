//! Model formulas and design matrices.
//!
//! Grammar (whitespace is insignificant):
//!
//! ```text
//! formula  := lhs "~" rhs
//! lhs      := name ("+" name)*
//! rhs      := term ("+" term)*
//! term     := "1" | name | "(" inner "|" name ")"
//! inner    := "1" ("+" name)*
//! name     := letter (letter | digit | "." | "_")*
//! ```
//!
//! There is no implicit intercept: `y ~ x + (1|g)` has no fixed intercept.
//! The canonical printed form lists the intercept first, then predictors in
//! declaration order, then the random block.

use std::fmt;

use nalgebra::DMatrix;

use crate::data::{Dataset, GroupIndex};
use crate::error::{Error, Result};

/// Display name of the intercept column.
pub const INTERCEPT: &str = "Intercept";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomBlock {
    pub intercept: bool,
    pub vars: Vec<String>,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelFormula {
    pub responses: Vec<String>,
    pub intercept: bool,
    pub fixed: Vec<String>,
    pub random: Option<RandomBlock>,
}

impl ModelFormula {
    /// Fixed-effect column names in design order.
    pub fn fixed_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.fixed.len() + 1);
        if self.intercept {
            names.push(INTERCEPT.to_string());
        }
        names.extend(self.fixed.iter().cloned());
        names
    }

    /// Random-effect column names in design order.
    pub fn random_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(rb) = &self.random {
            if rb.intercept {
                names.push(INTERCEPT.to_string());
            }
            names.extend(rb.vars.iter().cloned());
        }
        names
    }

    pub fn group(&self) -> Option<&str> {
        self.random.as_ref().map(|r| r.group.as_str())
    }

    /// Same formula with the random block replaced.
    pub fn with_random(&self, random: Option<RandomBlock>) -> Self {
        ModelFormula {
            random,
            ..self.clone()
        }
    }
}

impl fmt::Display for ModelFormula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ ", self.responses.join(" + "))?;
        let mut terms: Vec<String> = Vec::new();
        if self.intercept {
            terms.push("1".into());
        }
        terms.extend(self.fixed.iter().cloned());
        if let Some(rb) = &self.random {
            let mut inner: Vec<String> = Vec::new();
            if rb.intercept {
                inner.push("1".into());
            }
            inner.extend(rb.vars.iter().cloned());
            terms.push(format!("({} | {})", inner.join(" + "), rb.group));
        }
        write!(f, "{}", terms.join(" + "))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    One,
    Plus,
    Tilde,
    Bar,
    LParen,
    RParen,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'+' => {
                out.push((i, Tok::Plus));
                i += 1;
            }
            b'~' => {
                out.push((i, Tok::Tilde));
                i += 1;
            }
            b'|' => {
                out.push((i, Tok::Bar));
                i += 1;
            }
            b'(' => {
                out.push((i, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((i, Tok::RParen));
                i += 1;
            }
            b'0'..=b'9' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if &text[start..i] != "1" {
                    return Err(Error::Syntax {
                        offset: start,
                        message: format!("unexpected number '{}'; only '1' is allowed", &text[start..i]),
                    });
                }
                out.push((start, Tok::One));
            }
            c if c.is_ascii_alphabetic() => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.' || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((start, Tok::Name(text[start..i].to_string())));
            }
            _ => {
                return Err(Error::Syntax {
                    offset: i,
                    message: format!("unexpected character '{}'", text[i..].chars().next().unwrap()),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.0).unwrap_or(self.end)
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<()> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.err(format!("expected {what}"))
        }
    }

    fn name(&mut self) -> Result<(usize, String)> {
        match self.toks.get(self.pos) {
            Some((off, Tok::Name(n))) => {
                let out = (*off, n.clone());
                self.pos += 1;
                Ok(out)
            }
            _ => self.err("expected a variable name"),
        }
    }
}

fn duplicate(offset: usize, what: &str, name: &str) -> Error {
    Error::Syntax {
        offset,
        message: format!("duplicate {what} '{name}'"),
    }
}

/// Parses a formula such as `MA + SES ~ 1 + CA.cwc + (1 + CA.cwc | ID)`.
pub fn parse_formula(text: &str) -> Result<ModelFormula> {
    if text.trim().is_empty() {
        return Err(Error::Syntax {
            offset: 0,
            message: "empty formula".into(),
        });
    }
    let mut p = Parser {
        toks: tokenize(text)?,
        pos: 0,
        end: text.len(),
    };

    let mut responses = Vec::new();
    if p.peek() == Some(&Tok::Tilde) {
        return p.err("formula has no response on the left-hand side");
    }
    loop {
        let (off, name) = p.name()?;
        if responses.contains(&name) {
            return Err(duplicate(off, "response", &name));
        }
        responses.push(name);
        if p.peek() == Some(&Tok::Plus) {
            p.pos += 1;
        } else {
            break;
        }
    }
    p.expect(Tok::Tilde, "'~'")?;

    let mut intercept = false;
    let mut fixed: Vec<String> = Vec::new();
    let mut random: Option<RandomBlock> = None;
    let mut random_offsets: Vec<(usize, String)> = Vec::new();
    loop {
        match p.peek() {
            Some(Tok::One) => {
                if intercept {
                    return Err(duplicate(p.offset(), "term", "1"));
                }
                intercept = true;
                p.pos += 1;
            }
            Some(Tok::Name(_)) => {
                let (off, name) = p.name()?;
                if fixed.contains(&name) {
                    return Err(duplicate(off, "term", &name));
                }
                if responses.contains(&name) {
                    return Err(Error::Syntax {
                        offset: off,
                        message: format!("'{name}' appears on both sides of the formula"),
                    });
                }
                fixed.push(name);
            }
            Some(Tok::LParen) => {
                let block_offset = p.offset();
                if random.is_some() {
                    return Err(Error::Syntax {
                        offset: block_offset,
                        message: "only one random-effects block is supported".into(),
                    });
                }
                p.pos += 1;
                if p.peek() != Some(&Tok::One) {
                    return p.err("random block must start with the intercept '1'");
                }
                p.pos += 1;
                let mut vars = Vec::new();
                while p.peek() == Some(&Tok::Plus) {
                    p.pos += 1;
                    let (off, name) = p.name()?;
                    if vars.contains(&name) {
                        return Err(duplicate(off, "random term", &name));
                    }
                    random_offsets.push((off, name.clone()));
                    vars.push(name);
                }
                p.expect(Tok::Bar, "'|'")?;
                let (_, group) = p.name()?;
                p.expect(Tok::RParen, "')'")?;
                random = Some(RandomBlock {
                    intercept: true,
                    vars,
                    group,
                });
            }
            _ => return p.err("expected '1', a variable name or a random block"),
        }
        match p.peek() {
            Some(Tok::Plus) => p.pos += 1,
            None => break,
            _ => return p.err("expected '+' or end of formula"),
        }
    }
    if !intercept && fixed.is_empty() {
        return Err(Error::Syntax {
            offset: text.len(),
            message: "formula has no fixed-effect terms".into(),
        });
    }
    for (off, name) in random_offsets {
        if !fixed.contains(&name) {
            return Err(Error::Syntax {
                offset: off,
                message: format!("random term '{name}' is not among the fixed terms"),
            });
        }
    }
    Ok(ModelFormula {
        responses,
        intercept,
        fixed,
        random,
    })
}

/// Numeric design for one formula on one dataset.
///
/// `y` holds responses with missing cells set to NaN; `observed` is the
/// matching mask (true = observed).
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub y: DMatrix<f64>,
    pub observed: Vec<Vec<bool>>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub groups: GroupIndex,
    pub response_names: Vec<String>,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.y.nrows()
    }
    pub fn r(&self) -> usize {
        self.y.ncols()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn q(&self) -> usize {
        self.z.ncols()
    }
    pub fn n_groups(&self) -> usize {
        self.groups.n_groups()
    }
    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|row| row.iter().all(|&o| o))
    }
}

fn complete_column(d: &Dataset, name: &str) -> Result<Vec<f64>> {
    let col = d.require(name)?;
    col.values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| {
                Error::validation(format!(
                    "predictor '{name}' has missing values (first at row {}); \
                     right-hand-side variables must be completely observed",
                    i + 1
                ))
            })
        })
        .collect()
}

/// Assembles Y, X and Z for `f` from `d`.
pub fn build_design(f: &ModelFormula, d: &Dataset) -> Result<DesignMatrices> {
    let rb = f
        .random
        .as_ref()
        .ok_or_else(|| Error::validation("formula has no random-effects block"))?;
    if rb.group != d.group_name() {
        return Err(Error::validation(format!(
            "formula groups by '{}' but the dataset's group column is '{}'",
            rb.group,
            d.group_name()
        )));
    }
    let n = d.n_rows();
    let r = f.responses.len();
    let mut y = DMatrix::from_element(n, r, f64::NAN);
    let mut observed = vec![vec![false; r]; n];
    for (k, name) in f.responses.iter().enumerate() {
        let col = d.require(name)?;
        for (i, v) in col.values.iter().enumerate() {
            if let Some(v) = v {
                y[(i, k)] = *v;
                observed[i][k] = true;
            }
        }
    }
    let build = |intercept: bool, vars: &[String]| -> Result<DMatrix<f64>> {
        let cols: Vec<Vec<f64>> = vars
            .iter()
            .map(|v| complete_column(d, v))
            .collect::<Result<_>>()?;
        let width = cols.len() + usize::from(intercept);
        let mut m = DMatrix::zeros(n, width);
        let offset = usize::from(intercept);
        for i in 0..n {
            if intercept {
                m[(i, 0)] = 1.0;
            }
            for (k, c) in cols.iter().enumerate() {
                m[(i, k + offset)] = c[i];
            }
        }
        Ok(m)
    };
    let x = build(f.intercept, &f.fixed)?;
    let z = build(rb.intercept, &rb.vars)?;
    Ok(DesignMatrices {
        y,
        observed,
        x,
        z,
        groups: d.group_index(),
        response_names: f.responses.clone(),
        fixed_names: f.fixed_names(),
        random_names: f.random_names(),
    })
}
