//! Column-major numeric datasets with outcome / treatment / group / covariate roles.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Propensity score source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Propensity {
    Constant(f64),
    Column(String),
}

/// Column-role mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Propensity>,
}

impl Roles {
    pub fn new(outcome: &str, covariates: &[&str]) -> Self {
        Self {
            outcome: outcome.to_string(),
            treatment: None,
            group: None,
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            propensity: None,
        }
    }

    fn referenced(&self) -> Vec<&str> {
        let mut v = vec![self.outcome.as_str()];
        v.extend(self.treatment.as_deref());
        v.extend(self.group.as_deref());
        v.extend(self.covariates.iter().map(|s| s.as_str()));
        if let Some(Propensity::Column(c)) = &self.propensity {
            v.push(c);
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MissingPolicy {
    #[default]
    Strict,
    Drop,
}

/// Sorted, duplicate-free row indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RowIndexSet(Vec<usize>);

impl RowIndexSet {
    /// Sorts and deduplicates.
    pub fn new(mut idx: Vec<usize>) -> Self {
        idx.sort_unstable();
        idx.dedup();
        Self(idx)
    }

    pub fn from_sorted(idx: Vec<usize>) -> Self {
        debug_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        Self(idx)
    }

    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Complement within `[0, n)`.
    pub fn complement(&self, n: usize) -> Self {
        let mut out = Vec::with_capacity(n.saturating_sub(self.0.len()));
        let mut it = self.0.iter().peekable();
        for i in 0..n {
            if it.peek() == Some(&&i) {
                it.next();
            } else {
                out.push(i);
            }
        }
        Self(out)
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }
}

/// Immutable numeric table.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    cols: Vec<Vec<f64>>,
    roles: Roles,
    outcome: usize,
    treatment: Option<usize>,
    group: Option<usize>,
    covariates: Vec<usize>,
    propensity: Option<PropensityIdx>,
    dropped: usize,
}

#[derive(Clone, Debug, PartialEq)]
enum PropensityIdx {
    Constant(f64),
    Column(usize),
}

impl Dataset {
    /// Build from named columns; validates lengths and role invariants.
    pub fn from_columns(names: Vec<String>, cols: Vec<Vec<f64>>, roles: Roles) -> Result<Self> {
        if names.len() != cols.len() {
            return Err(Error::InvalidArgument("names and columns differ in length".into()));
        }
        let n = cols.first().map_or(0, |c| c.len());
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidArgument("columns differ in length".into()));
        }
        if n < 2 {
            return Err(Error::TooFewRows(n));
        }
        let find =
            |c: &str| -> Result<usize> { names.iter().position(|x| x == c).ok_or_else(|| Error::MissingColumn(c.to_string())) };
        let outcome = find(&roles.outcome)?;
        let treatment = roles.treatment.as_deref().map(find).transpose()?;
        let group = roles.group.as_deref().map(find).transpose()?;
        let covariates = roles.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        let propensity = match &roles.propensity {
            None => None,
            Some(Propensity::Constant(p)) => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::InvalidPropensity { row: 0, value: *p });
                }
                Some(PropensityIdx::Constant(*p))
            }
            Some(Propensity::Column(c)) => Some(PropensityIdx::Column(find(c)?)),
        };
        for (j, col) in cols.iter().enumerate() {
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonNumericCell { column: names[j].clone(), row: i, value: col[i].to_string() });
            }
        }
        if let Some(t) = treatment {
            if let Some(i) = cols[t].iter().position(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::NonBinaryTreatment { column: names[t].clone(), row: i, value: cols[t][i] });
            }
        }
        if let Some(PropensityIdx::Column(p)) = propensity {
            if let Some(i) = cols[p].iter().position(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(Error::InvalidPropensity { row: i, value: cols[p][i] });
            }
        }
        Ok(Self { names, cols, roles, outcome, treatment, group, covariates, propensity, dropped: 0 })
    }

    pub fn n(&self) -> usize {
        self.cols[0].len()
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Rows removed during ingestion under the drop policy.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|x| x == name)
            .map(|j| self.cols[j].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    pub fn y(&self) -> &[f64] {
        &self.cols[self.outcome]
    }

    pub fn treatment(&self) -> Option<&[f64]> {
        self.treatment.map(|j| self.cols[j].as_slice())
    }

    pub fn group(&self) -> Option<&[f64]> {
        self.group.map(|j| self.cols[j].as_slice())
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.cols[self.covariates[j]]
    }

    /// Copy covariates of row `i` into `buf`.
    pub fn covariate_row(&self, i: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.covariates.iter().map(|&j| self.cols[j][i]));
    }

    pub fn has_propensity(&self) -> bool {
        self.propensity.is_some()
    }

    pub fn propensity(&self, i: usize) -> Option<f64> {
        match self.propensity.as_ref()? {
            PropensityIdx::Constant(p) => Some(*p),
            PropensityIdx::Column(j) => Some(self.cols[*j][i]),
        }
    }

    /// Restrict to rows in `s`, preserving index order and roles.
    pub fn subset(&self, s: &RowIndexSet) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::EmptySubset);
        }
        let n = self.n();
        if let Some(&bad) = s.as_slice().iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, n });
        }
        let cols = self.cols.iter().map(|c| s.as_slice().iter().map(|&i| c[i]).collect()).collect();
        Ok(Self { cols, dropped: 0, ..self.clone_meta() })
    }

    fn clone_meta(&self) -> Self {
        Self {
            names: self.names.clone(),
            cols: Vec::new(),
            roles: self.roles.clone(),
            outcome: self.outcome,
            treatment: self.treatment,
            group: self.group,
            covariates: self.covariates.clone(),
            propensity: self.propensity.clone(),
            dropped: self.dropped,
        }
    }

    /// Copy with the treatment column replaced (used by shuffled designs).
    pub fn with_column(&self, name: &str, values: Vec<f64>) -> Result<Self> {
        let j = self.names.iter().position(|x| x == name).ok_or_else(|| Error::MissingColumn(name.into()))?;
        let mut names = self.names.clone();
        let mut cols = self.cols.clone();
        names[j] = name.to_string();
        cols[j] = values;
        Dataset::from_columns(names, cols, self.roles.clone())
    }

    /// Row tuple over all stored columns.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[i]).collect()
    }

    /// Write as CSV with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.names)?;
        for i in 0..self.n() {
            w.write_record(self.cols.iter().map(|c| format_cell(c[i])))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn format_cell(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

/// Ingestion options.
#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub missing_policy: MissingPolicy,
    pub missing_sentinels: Vec<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { missing_policy: MissingPolicy::Strict, missing_sentinels: vec![String::new(), "NA".into()] }
    }
}

/// Read an RFC-4180 CSV with a header. Only columns named in `roles` are kept,
/// in header order.
pub fn ingest_csv(path: &Path, roles: &Roles, opts: &CsvOptions) -> Result<Dataset> {
    let rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    ingest_reader(rdr, roles, opts)
}

pub fn ingest_str(text: &str, roles: &Roles, opts: &CsvOptions) -> Result<Dataset> {
    let rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    ingest_reader(rdr, roles, opts)
}

fn ingest_reader<R: std::io::Read>(mut rdr: csv::Reader<R>, roles: &Roles, opts: &CsvOptions) -> Result<Dataset> {
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let wanted = roles.referenced();
    for w in &wanted {
        if !header.iter().any(|h| h == w) {
            return Err(Error::MissingColumn(w.to_string()));
        }
    }
    let keep: Vec<usize> = (0..header.len()).filter(|&j| wanted.contains(&header[j].as_str())).collect();
    let names: Vec<String> = keep.iter().map(|&j| header[j].clone()).collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); keep.len()];
    let mut dropped = 0;
    let mut cells = vec![0.0; keep.len()];
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut missing = false;
        for (c, &j) in keep.iter().enumerate() {
            let raw = rec.get(j).unwrap_or("").trim();
            if opts.missing_sentinels.iter().any(|s| s == raw) {
                if opts.missing_policy == MissingPolicy::Strict {
                    return Err(Error::NonNumericCell { column: names[c].clone(), row, value: raw.into() });
                }
                missing = true;
                continue;
            }
            cells[c] = raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumericCell {
                column: names[c].clone(),
                row,
                value: raw.into(),
            })?;
        }
        if missing {
            dropped += 1;
            continue;
        }
        for (col, &v) in cols.iter_mut().zip(&cells) {
            col.push(v);
        }
    }
    if cols.first().is_none_or(|c| c.is_empty()) {
        return Err(Error::EmptyAfterDrop { dropped });
    }
    let mut d = Dataset::from_columns(names, cols, roles.clone())?;
    d.dropped = dropped;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roles() -> Roles {
        Roles::new("y", &["x"])
    }

    #[test]
    fn parses_three_rows() {
        let d = ingest_str("y,x\n1,2\n0,3\n1,4\n", &roles(), &CsvOptions::default()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.y(), &[1.0, 0.0, 1.0]);
        assert_eq!(d.covariate(0), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn drop_policy_counts_rows() {
        let opts = CsvOptions { missing_policy: MissingPolicy::Drop, ..Default::default() };
        let d = ingest_str("y,x\n1,2\n0,\n1,4\n", &roles(), &opts).unwrap();
        assert_eq!((d.n(), d.dropped()), (2, 1));
        let err = ingest_str("y,x\n1,2\n0,\n1,4\n", &roles(), &CsvOptions::default());
        assert!(matches!(err, Err(Error::NonNumericCell { .. })));
        let err = ingest_str("y,x\n1,NA\n", &roles(), &opts);
        assert!(matches!(err, Err(Error::EmptyAfterDrop { dropped: 1 })));
    }

    #[test]
    fn rejects_bad_treatment_and_missing_column() {
        let mut r = roles();
        r.treatment = Some("t".into());
        let err = ingest_str("y,x,t\n1,2,0\n0,3,2\n", &r, &CsvOptions::default());
        assert!(matches!(err, Err(Error::NonBinaryTreatment { .. })));
        let err = ingest_str("y,z\n1,2\n0,3\n", &roles(), &CsvOptions::default());
        assert!(matches!(err, Err(Error::MissingColumn(c)) if c == "x"));
        let err = ingest_str("y,x\n1,abc\n0,3\n", &roles(), &CsvOptions::default());
        assert!(matches!(err, Err(Error::NonNumericCell { .. })));
    }

    #[test]
    fn subset_behaviour() {
        let cols = vec![vec![0.0, 1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0, 9.0]];
        let d = Dataset::from_columns(vec!["y".into(), "x".into()], cols, roles()).unwrap();
        let s = d.subset(&RowIndexSet::new(vec![2, 0])).unwrap();
        assert_eq!(s.y(), &[0.0, 2.0]);
        assert_eq!(d.subset(&RowIndexSet::all(5)).unwrap(), d);
        assert!(matches!(d.subset(&RowIndexSet::new(vec![])), Err(Error::EmptySubset)));
        assert!(matches!(d.subset(&RowIndexSet::new(vec![7])), Err(Error::IndexOutOfRange { .. })));
        assert_eq!(RowIndexSet::new(vec![1, 3]).complement(5).as_slice(), &[0, 2, 4]);
    }
}
