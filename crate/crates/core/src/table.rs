//! Row-major numeric datasets and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{DamsError, Result};

/// `n × d` covariates stored row-major, with column names.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledTable {
    names: Vec<String>,
    n: usize,
    data: Vec<f64>,
}

/// Covariates plus one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTable {
    pub x: UnlabeledTable,
    pub y: Vec<f64>,
    pub label: String,
}

impl UnlabeledTable {
    pub fn new(names: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let d = names.len();
        if d == 0 {
            return Err(DamsError::InvalidParameter(
                "table needs at least one column".into(),
            ));
        }
        if data.len() % d != 0 {
            return Err(DamsError::DimensionMismatch {
                expected: d,
                found: data.len() % d,
            });
        }
        Ok(Self {
            n: data.len() / d,
            names,
            data,
        })
    }

    /// Columns named `x1..xd`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(DamsError::EmptyTable)?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for row in rows {
            if row.len() != d {
                return Err(DamsError::DimensionMismatch {
                    expected: d,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(default_names(d), data)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_cols())
    }

    pub fn rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let d = self.n_cols();
        self.data.chunks_exact_mut(d)
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[j])
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.n_cols());
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            names: self.names.clone(),
            n: idx.len(),
            data,
        }
    }

    /// Appends an all-ones column named `intercept`.
    pub fn with_constant_column(&self) -> Self {
        let d = self.n_cols();
        let mut data = Vec::with_capacity(self.n * (d + 1));
        for r in self.rows() {
            data.extend_from_slice(r);
            data.push(1.0);
        }
        let mut names = self.names.clone();
        names.push("intercept".into());
        Self {
            names,
            n: self.n,
            data,
        }
    }

    pub fn with_labels(self, y: Vec<f64>, label: impl Into<String>) -> Result<LabeledTable> {
        LabeledTable::new(self, y, label)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let (x, _) = read_csv_impl(std::fs::File::open(path)?, None)?;
        Ok(x)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        Ok(read_csv_impl(reader, None)?.0)
    }

    /// Reads covariates, discarding `label` if the file carries it.
    pub fn read_csv_ignoring(path: impl AsRef<Path>, label: &str) -> Result<Self> {
        let (x, _) = read_csv_impl(std::fs::File::open(path)?, Some(label))?;
        Ok(x)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_csv_impl(self, None, writer)
    }
}

impl LabeledTable {
    pub fn new(x: UnlabeledTable, y: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if y.len() != x.n_rows() {
            return Err(DamsError::DimensionMismatch {
                expected: x.n_rows(),
                found: y.len(),
            });
        }
        Ok(Self {
            x,
            y,
            label: label.into(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.x.n_rows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.n_cols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            label: self.label.clone(),
        }
    }

    pub fn read_csv(path: impl AsRef<Path>, label: &str) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, label)
    }

    pub fn from_csv_reader<R: Read>(reader: R, label: &str) -> Result<Self> {
        let (x, y) = read_csv_impl(reader, Some(label))?;
        let y = y.ok_or_else(|| DamsError::Parse(format!("label column `{label}` not found")))?;
        Self::new(x, y, label)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_csv_impl(&self.x, Some((&self.label, &self.y)), writer)
    }
}

pub(crate) fn default_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

fn read_csv_impl<R: Read>(
    reader: R,
    label: Option<&str>,
) -> Result<(UnlabeledTable, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = label.and_then(|l| headers.iter().position(|h| h == l));
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut data = Vec::new();
    let mut y = label_idx.map(|_| Vec::new());
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                DamsError::Parse(format!(
                    "row {}: column `{}` has non-numeric value `{field}`",
                    line + 1,
                    headers[i]
                ))
            })?;
            if Some(i) == label_idx {
                y.as_mut().expect("label column present").push(v);
            } else {
                data.push(v);
            }
        }
    }
    let x = UnlabeledTable::new(names, data)?;
    if x.n_rows() == 0 {
        return Err(DamsError::EmptyTable);
    }
    Ok((x, y))
}

fn write_csv_impl<W: Write>(
    x: &UnlabeledTable,
    label: Option<(&String, &Vec<f64>)>,
    writer: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = x.names().iter().map(String::as_str).collect();
    if let Some((name, _)) = label {
        header.push(name);
    }
    wtr.write_record(&header)?;
    let mut fields = Vec::with_capacity(header.len());
    for (i, row) in x.rows().enumerate() {
        fields.clear();
        fields.extend(row.iter().map(|v| v.to_string()));
        if let Some((_, y)) = label {
            fields.push(y[i].to_string());
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}
