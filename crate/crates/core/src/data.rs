//! Response/covariate container and its CSV form.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ValidationErrors};

/// `y` is `T × q`, `x` is `T × p`; row `t` is one time point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub time_labels: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(y: DMatrix<f64>, x: DMatrix<f64>) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(Error::dimension(format!(
                "y has {} rows but x has {}",
                y.nrows(),
                x.nrows()
            )));
        }
        Ok(Self {
            y,
            x,
            time_labels: None,
        })
    }

    pub fn t(&self) -> usize {
        self.y.nrows()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub(crate) fn check_into(&self, errs: &mut ValidationErrors) {
        if self.x.nrows() != self.y.nrows() {
            errs.push("x", "row count differs from y");
        }
        if self.y.iter().chain(self.x.iter()).any(|v| !v.is_finite()) {
            errs.push("data", "contains missing or non-finite values");
        }
        if self.t() <= self.q() {
            errs.push("T", format!("must exceed q = {}", self.q()));
        }
        if self.t() <= self.p() {
            errs.push("T", format!("must exceed p = {}", self.p()));
        }
        if let Some(labels) = &self.time_labels {
            if labels.len() != self.t() {
                errs.push("time_labels", "length differs from T");
            }
        }
    }

    /// Rows of `y` and `x` at the given time indices.
    pub fn subset(&self, rows: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.y.select_rows(rows), self.x.select_rows(rows))
    }

    /// Reads a CSV with header `y1..yq, x1..xp`, optionally preceded by a
    /// `time` column of free-form labels.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(file)
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
        let has_time = header.first().is_some_and(|h| h == "time" || h == "t");
        let start = usize::from(has_time);
        let mut y_cols = Vec::new();
        let mut x_cols = Vec::new();
        for (i, h) in header.iter().enumerate().skip(start) {
            let (prefix, idx) = h.split_at(1.min(h.len()));
            let n: usize = idx
                .parse()
                .map_err(|_| Error::Parse(format!("unexpected column `{h}`")))?;
            match prefix {
                "y" => y_cols.push((n, i)),
                "x" => x_cols.push((n, i)),
                _ => return Err(Error::Parse(format!("unexpected column `{h}`"))),
            }
        }
        for (name, cols) in [("y", &y_cols), ("x", &x_cols)] {
            let expected: Vec<usize> = (1..=cols.len()).collect();
            let got: Vec<usize> = cols.iter().map(|c| c.0).collect();
            if cols.is_empty() || got != expected {
                return Err(Error::Parse(format!(
                    "{name} columns must be {name}1..{name}n in order"
                )));
            }
        }
        if y_cols.last().map(|c| c.1) > x_cols.first().map(|c| c.1) {
            return Err(Error::Parse("y columns must precede x columns".into()));
        }
        let mut y_vals = Vec::new();
        let mut x_vals = Vec::new();
        let mut labels = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse(format!("row {} has {} fields", rows + 1, rec.len())));
            }
            if has_time {
                labels.push(rec[0].to_owned());
            }
            let parse = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| {
                    Error::Parse(format!("row {}: `{}` is not a number", rows + 1, &rec[i]))
                })
            };
            for &(_, i) in &y_cols {
                y_vals.push(parse(i)?);
            }
            for &(_, i) in &x_cols {
                x_vals.push(parse(i)?);
            }
            rows += 1;
        }
        let y = DMatrix::from_row_slice(rows, y_cols.len(), &y_vals);
        let x = DMatrix::from_row_slice(rows, x_cols.len(), &x_vals);
        let mut ds = Self::new(y, x)?;
        if has_time {
            ds.time_labels = Some(labels);
        }
        Ok(ds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::new();
        if self.time_labels.is_some() {
            header.push("time".to_owned());
        }
        header.extend((1..=self.q()).map(|j| format!("y{j}")));
        header.extend((1..=self.p()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for t in 0..self.t() {
            let mut row = Vec::with_capacity(header.len());
            if let Some(l) = &self.time_labels {
                row.push(l[t].clone());
            }
            row.extend(self.y.row(t).iter().map(|v| format!("{v:?}")));
            row.extend(self.x.row(t).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}
