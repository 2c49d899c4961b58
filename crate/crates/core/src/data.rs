//! Two-level datasets with explicit missing cells.
//!
//! A [`Dataset`] holds one group (cluster) identifier column, kept as raw
//! string labels, and any number of numeric columns whose cells are
//! `Option<f64>` (`None` = missing). In delimited files a missing cell is the
//! token `NA` or an empty field.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token written for missing cells.
pub const MISSING_TOKEN: &str = "NA";

/// Shortest representation that parses back to the same `f64` bits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

impl Column {
    pub fn new(name: impl Into<String>, values: Vec<Option<f64>>) -> Self {
        Column {
            name: name.into(),
            values,
        }
    }

    pub fn complete(name: impl Into<String>, values: &[f64]) -> Self {
        Column::new(name, values.iter().copied().map(Some).collect())
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn observed(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().filter_map(|v| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    group_name: String,
    group_labels: Vec<String>,
    /// Position of the group column among all columns when written out.
    group_position: usize,
    columns: Vec<Column>,
}

impl Dataset {
    /// Builds a dataset with the group column written first.
    pub fn new(
        group_name: impl Into<String>,
        group_labels: Vec<String>,
        columns: Vec<Column>,
    ) -> Result<Self> {
        Self::with_group_position(group_name, group_labels, columns, 0)
    }

    pub fn with_group_position(
        group_name: impl Into<String>,
        group_labels: Vec<String>,
        columns: Vec<Column>,
        group_position: usize,
    ) -> Result<Self> {
        let group_name = group_name.into();
        let n = group_labels.len();
        if n == 0 {
            return Err(Error::validation("dataset must have at least one row"));
        }
        if group_name.is_empty() {
            return Err(Error::validation("group column name is empty"));
        }
        if let Some(row) = group_labels.iter().position(|l| l.is_empty() || l == MISSING_TOKEN) {
            return Err(Error::validation(format!(
                "group column '{group_name}' is missing a value at row {}",
                row + 1
            )));
        }
        let mut seen = HashMap::new();
        seen.insert(group_name.as_str(), ());
        for c in &columns {
            if c.name.is_empty() {
                return Err(Error::validation("column names must be nonempty"));
            }
            if seen.insert(c.name.as_str(), ()).is_some() {
                return Err(Error::validation(format!("duplicate column name '{}'", c.name)));
            }
            if c.values.len() != n {
                return Err(Error::validation(format!(
                    "column '{}' has {} rows, expected {n}",
                    c.name,
                    c.values.len()
                )));
            }
            if c.observed().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "column '{}' contains a non-finite value",
                    c.name
                )));
            }
        }
        let group_position = group_position.min(columns.len());
        Ok(Dataset {
            group_name,
            group_labels,
            group_position,
            columns,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.group_labels.len()
    }

    pub fn group_name(&self) -> &str {
        &self.group_name
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Numeric column names in storage order.
    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column> {
        self.column(name)
            .ok_or_else(|| Error::validation(format!("unknown column '{name}'")))
    }

    pub fn has_name(&self, name: &str) -> bool {
        name == self.group_name || self.column(name).is_some()
    }

    pub fn add_column(&mut self, column: Column) -> Result<()> {
        if self.has_name(&column.name) {
            return Err(Error::validation(format!(
                "column '{}' already exists",
                column.name
            )));
        }
        if column.values.len() != self.n_rows() {
            return Err(Error::validation(format!(
                "column '{}' has {} rows, expected {}",
                column.name,
                column.values.len(),
                self.n_rows()
            )));
        }
        self.columns.push(column);
        Ok(())
    }

    /// Replaces the values of an existing column.
    pub fn set_values(&mut self, name: &str, values: Vec<Option<f64>>) -> Result<()> {
        let n = self.n_rows();
        let idx = self
            .column_index(name)
            .ok_or_else(|| Error::validation(format!("unknown column '{name}'")))?;
        if values.len() != n {
            return Err(Error::validation(format!(
                "replacement for '{name}' has {} rows, expected {n}",
                values.len()
            )));
        }
        self.columns[idx].values = values;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.columns.iter().all(|c| c.n_missing() == 0)
    }

    pub fn missing_mask(&self) -> MissingMask {
        MissingMask {
            names: self.columns.iter().map(|c| c.name.clone()).collect(),
            cells: (0..self.n_rows())
                .map(|i| self.columns.iter().map(|c| c.values[i].is_none()).collect())
                .collect(),
        }
    }

    pub fn group_index(&self) -> GroupIndex {
        group_index(self)
    }

    /// Copy restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let labels = rows.iter().map(|&i| self.group_labels[i].clone()).collect();
        let columns = self
            .columns
            .iter()
            .map(|c| Column::new(c.name.clone(), rows.iter().map(|&i| c.values[i]).collect()))
            .collect();
        Dataset::with_group_position(self.group_name.clone(), labels, columns, self.group_position)
    }

    /// Writes the dataset as delimited text with a header row.
    pub fn write_delimited<W: Write>(&self, writer: W, delimiter: u8) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(writer);
        w.write_record(self.header())?;
        for i in 0..self.n_rows() {
            w.write_record(self.row_fields(i))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_delimited_string(&self, delimiter: u8) -> Result<String> {
        let mut buf = Vec::new();
        self.write_delimited(&mut buf, delimiter)?;
        Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.columns.iter().map(|c| c.name.clone()).collect();
        h.insert(self.group_position, self.group_name.clone());
        h
    }

    fn row_fields(&self, i: usize) -> Vec<String> {
        let mut row: Vec<String> = self
            .columns
            .iter()
            .map(|c| match c.values[i] {
                Some(v) => fmt_f64(v),
                None => MISSING_TOKEN.to_string(),
            })
            .collect();
        row.insert(self.group_position, self.group_labels[i].clone());
        row
    }
}

/// Options for [`load_dataset`].
#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub group: String,
    pub delimiter: u8,
    /// Restrict to these numeric columns (in file order); `None` keeps all.
    pub columns: Option<Vec<String>>,
}

impl LoadOptions {
    pub fn new(group: impl Into<String>) -> Self {
        LoadOptions {
            group: group.into(),
            delimiter: b',',
            columns: None,
        }
    }
}

fn parse_cell(field: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let t = field.trim();
    if t.is_empty() || t == MISSING_TOKEN {
        return Ok(None);
    }
    match t.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value '{t}'"),
        }),
        Err(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("'{t}' is not a number"),
        }),
    }
}

/// Reads a delimited text stream with a header row.
///
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_dataset<R: Read>(source: R, options: &LoadOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .has_headers(true)
        .from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let group_idx = header
        .iter()
        .position(|h| *h == options.group)
        .ok_or_else(|| {
            Error::validation(format!("group column '{}' not found in header", options.group))
        })?;
    let keep: Vec<usize> = (0..header.len())
        .filter(|&k| k != group_idx)
        .filter(|&k| match &options.columns {
            Some(cols) => cols.iter().any(|c| *c == header[k]),
            None => true,
        })
        .collect();
    if let Some(cols) = &options.columns {
        if let Some(c) = cols.iter().find(|c| !header.contains(c)) {
            return Err(Error::validation(format!("column '{c}' not found in header")));
        }
    }
    let mut labels = Vec::new();
    let mut values: Vec<Vec<Option<f64>>> = vec![Vec::new(); keep.len()];
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let g = record.get(group_idx).unwrap_or("").trim();
        if g.is_empty() || g == MISSING_TOKEN {
            return Err(Error::validation(format!(
                "group column '{}' is missing a value at row {row}",
                options.group
            )));
        }
        labels.push(g.to_string());
        for (slot, &k) in keep.iter().enumerate() {
            let field = record.get(k).unwrap_or("");
            values[slot].push(parse_cell(field, row, &header[k])?);
        }
    }
    let group_position = keep.iter().filter(|&&k| k < group_idx).count();
    let columns = keep
        .iter()
        .zip(values)
        .map(|(&k, v)| Column::new(header[k].clone(), v))
        .collect();
    Dataset::with_group_position(options.group.clone(), labels, columns, group_position)
}

/// Name of the imputation index column in long-format files.
pub const IMP_COLUMN: &str = ".imp";

/// Writes several datasets with identical layout as one long-format table,
/// prefixed by a 1-based `.imp` column.
pub fn write_long_format<W: Write>(datasets: &[Dataset], writer: W, delimiter: u8) -> Result<()> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::validation("no datasets to write"))?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let mut header = vec![IMP_COLUMN.to_string()];
    header.extend(first.header());
    w.write_record(&header)?;
    for (l, d) in datasets.iter().enumerate() {
        if d.header() != first.header() {
            return Err(Error::validation(format!(
                "dataset {} has a different column layout",
                l + 1
            )));
        }
        for i in 0..d.n_rows() {
            let mut row = vec![(l + 1).to_string()];
            row.extend(d.row_fields(i));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a long-format table back into one dataset per `.imp` value, in
/// ascending index order.
pub fn read_long_format<R: Read>(source: R, options: &LoadOptions) -> Result<Vec<Dataset>> {
    let mut text = String::new();
    let mut source = source;
    source.read_to_string(&mut text)?;
    let mut opts = options.clone();
    if let Some(cols) = &mut opts.columns {
        cols.push(IMP_COLUMN.to_string());
    }
    let all = load_dataset(text.as_bytes(), &opts)?;
    let imp = all.require(IMP_COLUMN)?;
    if imp.n_missing() > 0 {
        return Err(Error::validation("'.imp' column has missing values"));
    }
    let mut by_imp: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, v) in imp.values.iter().enumerate() {
        by_imp.entry(v.unwrap() as i64).or_default().push(i);
    }
    let imp_idx = all.column_index(IMP_COLUMN).unwrap();
    let mut stripped = all.clone();
    stripped.columns.remove(imp_idx);
    if imp_idx < stripped.group_position {
        stripped.group_position -= 1;
    }
    by_imp.values().map(|rows| stripped.select_rows(rows)).collect()
}

/// Row-by-variable missingness indicators (true = missing). The group column
/// is excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    pub names: Vec<String>,
    pub cells: Vec<Vec<bool>>,
}

impl MissingMask {
    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    /// Group labels in first-appearance order; position = dense group id.
    pub labels: Vec<String>,
    /// Row indices belonging to each group, ascending.
    pub rows: Vec<Vec<usize>>,
    /// Dense group id per row.
    pub row_group: Vec<usize>,
}

impl GroupIndex {
    pub fn n_groups(&self) -> usize {
        self.rows.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }
}

/// Densifies group labels to `0..J` in order of first appearance.
pub fn group_index(d: &Dataset) -> GroupIndex {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut row_group = Vec::with_capacity(d.n_rows());
    for (i, label) in d.group_labels.iter().enumerate() {
        let g = *ids.entry(label.as_str()).or_insert_with(|| {
            labels.push(label.clone());
            rows.push(Vec::new());
            labels.len() - 1
        });
        rows[g].push(i);
        row_group.push(g);
    }
    GroupIndex {
        labels,
        rows,
        row_group,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    /// Per-variable flags, true = missing.
    pub missing: Vec<bool>,
    pub count: usize,
    pub rel_pct: f64,
    pub cum_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTable {
    pub names: Vec<String>,
    pub n_rows: usize,
    /// Number of distinct patterns before truncation.
    pub n_patterns: usize,
    pub rows: Vec<PatternRow>,
}

fn pattern_key(p: &[bool]) -> String {
    p.iter().map(|&m| if m { 'x' } else { 'o' }).collect()
}

/// Distinct row-wise missingness patterns, most frequent first (ties by the
/// `o`/`x` pattern string). Rows are kept until the cumulative share first
/// reaches `min_cum_pct` (a fraction); pass 1.0 for the full table.
pub fn pattern_summary(d: &Dataset, min_cum_pct: f64) -> PatternTable {
    let mask = d.missing_mask();
    let mut counts: HashMap<Vec<bool>, usize> = HashMap::new();
    for row in &mask.cells {
        *counts.entry(row.clone()).or_insert(0) += 1;
    }
    let mut patterns: Vec<(Vec<bool>, usize)> = counts.into_iter().collect();
    patterns.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then_with(|| pattern_key(&a.0).cmp(&pattern_key(&b.0)))
    });
    let n = d.n_rows();
    let n_patterns = patterns.len();
    let mut rows = Vec::new();
    let mut cum = 0usize;
    for (missing, count) in patterns {
        cum += count;
        let cum_pct = cum as f64 / n as f64;
        rows.push(PatternRow {
            missing,
            count,
            rel_pct: count as f64 / n as f64,
            cum_pct,
        });
        if cum_pct >= min_cum_pct {
            break;
        }
    }
    PatternTable {
        names: mask.names,
        n_rows: n,
        n_patterns,
        rows,
    }
}

impl PatternTable {
    /// Delimited layout: Pattern, one o/x column per variable, Cases, Rel.%, Cum.%.
    pub fn to_delimited(&self, delimiter: u8) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(Vec::new());
        let mut header = vec!["Pattern".to_string()];
        header.extend(self.names.iter().cloned());
        header.extend(["Cases".into(), "Rel.%".into(), "Cum.%".into()]);
        w.write_record(&header)?;
        for (k, row) in self.rows.iter().enumerate() {
            let mut rec = vec![(k + 1).to_string()];
            rec.extend(row.missing.iter().map(|&m| if m { "x" } else { "o" }.to_string()));
            rec.push(row.count.to_string());
            rec.push(format!("{:.1}", 100.0 * row.rel_pct));
            rec.push(format!("{:.1}", 100.0 * row.cum_pct));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_text(&self) -> String {
        let width = self.names.iter().map(|n| n.len()).max().unwrap_or(1).max(1);
        let mut out = String::new();
        let _ = write!(out, "{:>7}", "Pattern");
        for n in &self.names {
            let _ = write!(out, " {:>width$}", n);
        }
        let _ = writeln!(out, " {:>8} {:>7} {:>7}", "Cases", "Rel.%", "Cum.%");
        for (k, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{:>7}", k + 1);
            for &m in &row.missing {
                let _ = write!(out, " {:>width$}", if m { "x" } else { "o" });
            }
            let _ = writeln!(
                out,
                " {:>8} {:>6.1}% {:>6.1}%",
                row.count,
                100.0 * row.rel_pct,
                100.0 * row.cum_pct
            );
        }
        let _ = writeln!(
            out,
            "\n{} of {} patterns shown; o = observed, x = missing; N = {}",
            self.rows.len(),
            self.n_patterns,
            self.n_rows
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub names: Vec<String>,
    /// Symmetric matrix; `None` marks an undefined correlation.
    pub r: Vec<Vec<Option<f64>>>,
    /// Jointly observed rows per pair.
    pub n_pairs: Vec<Vec<usize>>,
    /// Fraction of missing cells per variable.
    pub missing: Vec<f64>,
}

fn pearson_pairwise(a: &[Option<f64>], b: &[Option<f64>]) -> (Option<f64>, usize) {
    let pairs: Vec<(f64, f64)> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .collect();
    let n = pairs.len();
    if n < 2 {
        return (None, n);
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return (None, n);
    }
    (Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)), n)
}

/// Pearson correlations over pairwise-complete rows plus per-variable
/// missing fractions.
pub fn pairwise_correlations(d: &Dataset) -> Result<CorrelationTable> {
    let cols = d.columns();
    if cols.len() < 2 {
        return Err(Error::validation(
            "pairwise correlations need at least two numeric variables",
        ));
    }
    let v = cols.len();
    let mut r = vec![vec![None; v]; v];
    let mut n_pairs = vec![vec![0; v]; v];
    for i in 0..v {
        for j in i..v {
            let (rij, n) = if i == j {
                let (rr, n) = pearson_pairwise(&cols[i].values, &cols[i].values);
                (rr.map(|_| 1.0), n)
            } else {
                pearson_pairwise(&cols[i].values, &cols[j].values)
            };
            r[i][j] = rij;
            r[j][i] = rij;
            n_pairs[i][j] = n;
            n_pairs[j][i] = n;
        }
    }
    let n = d.n_rows() as f64;
    Ok(CorrelationTable {
        names: cols.iter().map(|c| c.name.clone()).collect(),
        r,
        n_pairs,
        missing: cols.iter().map(|c| c.n_missing() as f64 / n).collect(),
    })
}

impl CorrelationTable {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.r[i][j]
    }

    /// Delimited layout: upper triangle with one row per variable, then a
    /// "Missing Data" row of percentages.
    pub fn to_delimited(&self, delimiter: u8) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .delimiter(delimiter)
            .from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let v = self.names.len();
        for i in 0..v.saturating_sub(1) {
            let mut rec = vec![self.names[i].clone()];
            for j in 0..v {
                rec.push(if j <= i {
                    String::new()
                } else {
                    match self.r[i][j] {
                        Some(x) => format!("{x:.3}"),
                        None => "undefined".to_string(),
                    }
                });
            }
            w.write_record(&rec)?;
        }
        let mut rec = vec!["Missing Data".to_string()];
        rec.extend(self.missing.iter().map(|m| format!("{:.1}%", 100.0 * m)));
        w.write_record(&rec)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_text(&self) -> String {
        let width = self.names.iter().map(|n| n.len()).max().unwrap_or(1).max(9);
        let mut out = String::new();
        let _ = write!(out, "{:<width$}", "");
        for n in &self.names {
            let _ = write!(out, " {:>width$}", n);
        }
        out.push('\n');
        let v = self.names.len();
        for i in 0..v.saturating_sub(1) {
            let _ = write!(out, "{:<width$}", self.names[i]);
            for j in 0..v {
                let cell = if j <= i {
                    String::new()
                } else {
                    match self.r[i][j] {
                        Some(x) => format!("{x:.3}"),
                        None => "undefined".to_string(),
                    }
                };
                let _ = write!(out, " {:>width$}", cell);
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}", "Missing");
        for m in &self.missing {
            let _ = write!(out, " {:>width$}", format!("{:.1}%", 100.0 * m));
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<Dataset> {
        load_dataset(text.as_bytes(), &LoadOptions::new("ID"))
    }

    #[test]
    fn na_cell_is_missing() {
        let d = load("ID,MA,SES\n1,500,NA\n1,480,2.5\n2,510,3\n").unwrap();
        assert_eq!(d.n_rows(), 3);
        let mask = d.missing_mask();
        assert_eq!(mask.names, vec!["MA", "SES"]);
        assert!(mask.cells[0][1]);
        assert_eq!(mask.cells.iter().flatten().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn empty_field_is_missing() {
        let d = load("ID,a\n1,\n1,2\n").unwrap();
        assert_eq!(d.column("a").unwrap().values, vec![None, Some(2.0)]);
    }

    #[test]
    fn empty_group_cell_is_rejected() {
        let err = load("ID,a\n1,1\n,2\n").unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("row 2")), "{err}");
    }

    #[test]
    fn malformed_number_reports_location() {
        match load("ID,a,b\n1,1,2\n1,3,abc\n").unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn long_header_has_eight_columns() {
        let text = "ID,MathAchiev,ReadAchiev,CognAbility,SES,DisprMat,DisprRea,SchoolClimate\n\
                    1001,NA,466.2,23,27,NA,1.5,NA\n";
        let d = load(text).unwrap();
        assert_eq!(d.columns().len() + 1, 8);
        assert_eq!(d.group_name(), "ID");
    }

    #[test]
    fn write_back_keeps_column_order_and_values() {
        let text = "a,ID,b\n0.1,g1,NA\n1e-300,g2,-3.25\n";
        let d = load(text).unwrap();
        let out = d.to_delimited_string(b',').unwrap();
        assert!(out.starts_with("a,ID,b\n"));
        let again = load(&out).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn group_index_examples() {
        let cols = vec![Column::complete("y", &[0.0; 6])];
        let labels = ["1", "1", "2", "2", "3", "3"].map(String::from).to_vec();
        let g = Dataset::new("g", labels, cols).unwrap().group_index();
        assert_eq!(g.n_groups(), 3);
        assert_eq!(g.sizes(), vec![2, 2, 2]);

        let cols = vec![Column::complete("y", &[0.0; 4])];
        let labels = ["1", "2", "1", "2"].map(String::from).to_vec();
        let g = Dataset::new("g", labels, cols).unwrap().group_index();
        assert_eq!(g.rows, vec![vec![0, 2], vec![1, 3]]);
        assert_eq!(g.row_group, vec![0, 1, 0, 1]);

        let cols = vec![Column::complete("y", &[0.0; 3])];
        let g = Dataset::new("g", vec!["a".into(); 3], cols).unwrap().group_index();
        assert_eq!(g.sizes(), vec![3]);
    }

    #[test]
    fn first_appearance_order() {
        let cols = vec![Column::complete("y", &[0.0; 3])];
        let labels = ["z", "a", "z"].map(String::from).to_vec();
        let g = Dataset::new("g", labels, cols).unwrap().group_index();
        assert_eq!(g.labels, vec!["z", "a"]);
    }

    #[test]
    fn complete_table_has_one_pattern() {
        let cols = vec![Column::complete("a", &[1.0; 10]), Column::complete("b", &[2.0; 10])];
        let t = pattern_summary(&Dataset::new("g", vec!["1".into(); 10], cols).unwrap(), 0.95);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].count, 10);
        assert_eq!(t.rows[0].cum_pct, 1.0);
    }

    #[test]
    fn handmade_two_patterns() {
        let d = load("ID,a,b\n1,1,2\n1,NA,2\n2,3,4\n2,5,6\n").unwrap();
        let t = pattern_summary(&d, 1.0);
        let counts: Vec<usize> = t.rows.iter().map(|r| r.count).collect();
        assert_eq!(counts, vec![3, 1]);
        assert_eq!(t.rows[0].cum_pct, 0.75);
        assert_eq!(t.rows[1].cum_pct, 1.0);
        assert_eq!(t.rows[1].missing, vec![true, false]);
    }

    #[test]
    fn truncation_keeps_first_pattern_reaching_threshold() {
        let d = load("ID,a,b\n1,1,2\n1,NA,2\n2,3,4\n2,5,6\n").unwrap();
        let t = pattern_summary(&d, 0.5);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.n_patterns, 2);
    }

    #[test]
    fn pattern_ties_sort_lexicographically() {
        let d = load("ID,a,b\n1,NA,2\n1,1,NA\n").unwrap();
        let t = pattern_summary(&d, 1.0);
        assert_eq!(t.rows[0].missing, vec![false, true]);
    }

    #[test]
    fn correlations_handmade() {
        let d = load("ID,x,y\n1,1,2\n1,2,1\n2,3,5\n2,4,NA\n3,5,7\n").unwrap();
        let t = pairwise_correlations(&d).unwrap();
        // complete pairs: (1,2),(2,1),(3,5),(5,7)
        let xs = [1.0, 2.0, 3.0, 5.0];
        let ys = [2.0, 1.0, 5.0, 7.0];
        let mx = 11.0 / 4.0;
        let my = 15.0 / 4.0;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let expected = sxy / (sxx * syy).sqrt();
        assert!((t.get("x", "y").unwrap() - expected).abs() < 1e-12);
        assert_eq!(t.get("x", "x"), Some(1.0));
        assert_eq!(t.n_pairs[0][1], 4);
        assert!((t.missing[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn insufficient_overlap_is_undefined() {
        let d = load("ID,x,y\n1,1,NA\n1,NA,2\n2,3,NA\n").unwrap();
        let t = pairwise_correlations(&d).unwrap();
        assert_eq!(t.get("x", "y"), None);
        assert!(t.to_delimited(b',').unwrap().contains("undefined"));
    }

    #[test]
    fn long_format_round_trip() {
        let a = load("ID,x\n1,1\n2,2\n").unwrap();
        let mut b = a.clone();
        b.set_values("x", vec![Some(3.0), Some(4.0)]).unwrap();
        let mut buf = Vec::new();
        write_long_format(&[a.clone(), b.clone()], &mut buf, b',').unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(".imp,ID,x\n1,1,1.0\n"));
        let back = read_long_format(text.as_bytes(), &LoadOptions::new("ID")).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
