//! Raw mixed-type CSV → numeric covariate table.
//!
//! Steps, in order: drop listed columns, one-hot encode categoricals (first
//! sorted level dropped), min-max scale non-binary numerics to `[0, 1]`, drop
//! binary columns whose prevalence is below `min_binary_prevalence`, then drop
//! columns whose variance is below `min_variance`.

use std::collections::BTreeSet;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{DamsError, Result};
use crate::table::UnlabeledTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Columns removed before anything else, e.g. the original label.
    pub drop: Vec<String>,
    /// Columns forced to be categorical. Non-numeric columns always are.
    pub categorical: Vec<String>,
    pub normalize: bool,
    pub min_binary_prevalence: f64,
    pub min_variance: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            drop: Vec::new(),
            categorical: Vec::new(),
            normalize: true,
            min_binary_prevalence: 0.05,
            min_variance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub kept: Vec<String>,
    pub dropped_rare_binary: Vec<String>,
    pub dropped_low_variance: Vec<String>,
}

struct Column {
    name: String,
    values: Vec<f64>,
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0 || x == 1.0)
}

fn population_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn preprocess<R: Read>(
    reader: R,
    spec: &PreprocessSpec,
) -> Result<(UnlabeledTable, PreprocessReport)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for name in spec.drop.iter().chain(&spec.categorical) {
        if !headers.contains(name) {
            return Err(DamsError::Parse(format!("column `{name}` not found")));
        }
    }
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in rdr.records() {
        let record = record?;
        for (col, field) in raw.iter_mut().zip(record.iter()) {
            col.push(field.trim().to_string());
        }
    }
    let n = raw.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(DamsError::EmptyTable);
    }

    let mut columns = Vec::new();
    for (name, values) in headers.iter().zip(raw) {
        if spec.drop.contains(name) {
            continue;
        }
        let parsed: Option<Vec<f64>> = values.iter().map(|v| v.parse().ok()).collect();
        match parsed {
            Some(mut nums) if !spec.categorical.contains(name) => {
                if spec.normalize && !is_binary(&nums) {
                    let lo = nums.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = nums.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let range = hi - lo;
                    for v in &mut nums {
                        *v = if range > 0.0 { (*v - lo) / range } else { 0.0 };
                    }
                }
                columns.push(Column {
                    name: name.clone(),
                    values: nums,
                });
            }
            _ => {
                let levels: BTreeSet<&str> = values.iter().map(String::as_str).collect();
                for level in levels.into_iter().skip(1) {
                    columns.push(Column {
                        name: format!("{name}_{level}"),
                        values: values
                            .iter()
                            .map(|v| f64::from(u8::from(v == level)))
                            .collect(),
                    });
                }
            }
        }
    }

    let mut report = PreprocessReport {
        kept: Vec::new(),
        dropped_rare_binary: Vec::new(),
        dropped_low_variance: Vec::new(),
    };
    let mut kept = Vec::new();
    for col in columns {
        if is_binary(&col.values) {
            let prevalence = col.values.iter().sum::<f64>() / n as f64;
            if prevalence < spec.min_binary_prevalence {
                report.dropped_rare_binary.push(col.name);
                continue;
            }
        }
        if population_variance(&col.values) < spec.min_variance {
            report.dropped_low_variance.push(col.name);
            continue;
        }
        kept.push(col);
    }
    if kept.is_empty() {
        return Err(DamsError::InvalidParameter(
            "preprocessing removed every column".into(),
        ));
    }
    report.kept = kept.iter().map(|c| c.name.clone()).collect();
    let mut data = Vec::with_capacity(n * kept.len());
    for i in 0..n {
        data.extend(kept.iter().map(|c| c.values[i]));
    }
    Ok((UnlabeledTable::new(report.kept.clone(), data)?, report))
}
