//! Group means and group-mean centering, applied before imputation or to
//! every imputed dataset.
//!
//! Scripts are declarative lists. The text form is
//! `groupmean(SES -> SES.mean); cwc(SES -> SES.cwc)`, optionally naming the
//! grouping column explicitly: `cwc(SES by ID -> SES.cwc)`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{Column, Dataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformOp {
    #[serde(alias = "group_mean")]
    GroupMean,
    Cwc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub op: TransformOp,
    pub var: String,
    /// Grouping column; the dataset's own group column when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub out: String,
}

fn group_keys(d: &Dataset, group: Option<&str>) -> Result<Vec<String>> {
    match group {
        None => Ok(d.group_labels().to_vec()),
        Some(g) if g == d.group_name() => Ok(d.group_labels().to_vec()),
        Some(g) => {
            let col = d.require(g)?;
            col.values
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    v.map(crate::data::fmt_f64).ok_or_else(|| {
                        Error::validation(format!(
                            "grouping column '{g}' is missing a value at row {}",
                            i + 1
                        ))
                    })
                })
                .collect()
        }
    }
}

/// Observed-case mean of `var` per group, broadcast to rows.
fn broadcast_means(d: &Dataset, var: &str, group: Option<&str>) -> Result<Vec<Option<f64>>> {
    let col = d.require(var)?;
    let keys = group_keys(d, group)?;
    let mut acc: HashMap<&str, (f64, usize)> = HashMap::new();
    for (k, v) in keys.iter().zip(&col.values) {
        let e = acc.entry(k.as_str()).or_insert((0.0, 0));
        if let Some(v) = v {
            e.0 += v;
            e.1 += 1;
        }
    }
    Ok(keys
        .iter()
        .map(|k| {
            let (s, n) = acc[k.as_str()];
            (n > 0).then(|| s / n as f64)
        })
        .collect())
}

/// Adds `out` = mean of `var` over the observed rows of each group.
pub fn group_means(d: &Dataset, var: &str, group: Option<&str>, out: &str) -> Result<Dataset> {
    if d.has_name(out) {
        return Err(Error::validation(format!("output column '{out}' already exists")));
    }
    let means = broadcast_means(d, var, group)?;
    let mut res = d.clone();
    res.add_column(Column::new(out, means))?;
    Ok(res)
}

/// Adds `out` = `var` minus its group mean; missing cells stay missing.
pub fn center_within_group(
    d: &Dataset,
    var: &str,
    group: Option<&str>,
    out: &str,
) -> Result<Dataset> {
    if d.has_name(out) {
        return Err(Error::validation(format!("output column '{out}' already exists")));
    }
    let means = broadcast_means(d, var, group)?;
    let col = d.require(var)?;
    let centered = col
        .values
        .iter()
        .zip(&means)
        .map(|(v, m)| Some((*v)? - (*m)?))
        .collect();
    let mut res = d.clone();
    res.add_column(Column::new(out, centered))?;
    Ok(res)
}

impl Transform {
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        let group = self.group.as_deref();
        match self.op {
            TransformOp::GroupMean => group_means(d, &self.var, group, &self.out),
            TransformOp::Cwc => center_within_group(d, &self.var, group, &self.out),
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = match self.op {
            TransformOp::GroupMean => "groupmean",
            TransformOp::Cwc => "cwc",
        };
        match &self.group {
            Some(g) => write!(f, "{op}({} by {g} -> {})", self.var, self.out),
            None => write!(f, "{op}({} -> {})", self.var, self.out),
        }
    }
}

pub fn apply_script(d: &Dataset, script: &[Transform]) -> Result<Dataset> {
    let mut cur = d.clone();
    for t in script {
        cur = t.apply(&cur)?;
    }
    Ok(cur)
}

/// Applies the script to every dataset independently; group means are
/// recomputed per dataset.
pub fn apply_to_all(imps: &[Dataset], script: &[Transform]) -> Result<Vec<Dataset>> {
    imps.iter()
        .enumerate()
        .map(|(l, d)| {
            let mut cur = d.clone();
            for t in script {
                cur = t.apply(&cur).map_err(|e| {
                    Error::validation(format!("dataset {} transform '{t}': {e}", l + 1))
                })?;
            }
            Ok(cur)
        })
        .collect()
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '.' || c == '_'
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.text[self.pos..].chars().next() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Syntax {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            self.err(format!("expected '{s}'"))
        }
    }

    fn name(&mut self) -> Result<String> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        match rest.chars().next() {
            Some(c) if c.is_ascii_alphabetic() => {}
            _ => return self.err("expected a variable name"),
        }
        let len = rest.find(|c: char| !is_name_char(c)).unwrap_or(rest.len());
        self.pos += len;
        Ok(rest[..len].to_string())
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.text.len()
    }
}

/// Parses `op(var [by group] -> out); ...`. An empty script is valid.
pub fn parse_script(text: &str) -> Result<Vec<Transform>> {
    let mut c = Cursor { text, pos: 0 };
    let mut out = Vec::new();
    while !c.at_end() {
        let op_pos = c.pos;
        let op = match c.name()?.as_str() {
            "groupmean" | "group_mean" => TransformOp::GroupMean,
            "cwc" => TransformOp::Cwc,
            other => {
                return Err(Error::Syntax {
                    offset: op_pos,
                    message: format!("unknown transform '{other}' (expected groupmean or cwc)"),
                })
            }
        };
        c.expect("(")?;
        let var = c.name()?;
        let group = if c.eat("by ") || c.eat("by\t") {
            Some(c.name()?)
        } else {
            None
        };
        c.expect("->")?;
        let out_name = c.name()?;
        c.expect(")")?;
        out.push(Transform {
            op,
            var,
            group,
            out: out_name,
        });
        if !c.eat(";") && !c.at_end() {
            return c.err("expected ';' between transforms");
        }
    }
    Ok(out)
}
