//! CSV ingestion and emission.
//!
//! Trial data has the fixed header `unit_id,cluster,period,treatment,outcome`.
//! Conformal data has covariate columns, a `y` column left empty on the last
//! (test) row, and optionally a `weight` column holding the density ratio of
//! the test distribution to the training distribution at each row.

use std::io::{Read, Write};

use crt_core::error::{CrtError, Result};
use crt_core::hypothesis::{Exposure, UnitMeta};
use crt_core::stepped_wedge::TrialData;

pub const TRIAL_HEADER: [&str; 5] = ["unit_id", "cluster", "period", "treatment", "outcome"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecords {
    pub unit_ids: Vec<String>,
    pub meta: Vec<UnitMeta>,
    pub treatment: Vec<Exposure>,
    pub outcomes: Vec<f64>,
}

impl TrialRecords {
    pub fn len(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn to_trial(&self) -> Result<TrialData> {
        TrialData::from_records(self.meta.clone(), self.treatment.clone(), self.outcomes.clone())
    }

    pub fn unit_index(&self, id: &str) -> Result<usize> {
        self.unit_ids
            .iter()
            .position(|u| u == id)
            .ok_or_else(|| CrtError::Config(format!("unknown unit id {id:?}")))
    }
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, col: usize, line: u64) -> Result<T> {
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse().map_err(|_| {
        CrtError::Data(format!(
            "line {line}: column {} has invalid value {raw:?}",
            TRIAL_HEADER[col]
        ))
    })
}

fn line_of(record: &csv::StringRecord) -> u64 {
    record.position().map_or(0, |p| p.line())
}

fn csv_error(e: csv::Error) -> CrtError {
    let line = e.position().map_or(0, |p| p.line());
    CrtError::Data(format!("line {line}: {e}"))
}

pub fn read_trial<R: Read>(input: R) -> Result<TrialRecords> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != TRIAL_HEADER {
        return Err(CrtError::Data(format!(
            "line 1: expected header {:?}, found {:?}",
            TRIAL_HEADER.join(","),
            names.join(",")
        )));
    }
    let mut out = TrialRecords {
        unit_ids: Vec::new(),
        meta: Vec::new(),
        treatment: Vec::new(),
        outcomes: Vec::new(),
    };
    let mut seen = std::collections::HashSet::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = line_of(&record);
        let id = record.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(CrtError::Data(format!("line {line}: empty unit_id")));
        }
        if !seen.insert(id.clone()) {
            return Err(CrtError::Data(format!("line {line}: duplicate unit_id {id:?}")));
        }
        let outcome: f64 = field(&record, 4, line)?;
        if !outcome.is_finite() {
            return Err(CrtError::Data(format!("line {line}: outcome must be finite")));
        }
        out.unit_ids.push(id);
        out.meta.push(UnitMeta {
            cluster: field(&record, 1, line)?,
            period: field(&record, 2, line)?,
        });
        out.treatment.push(field(&record, 3, line)?);
        out.outcomes.push(outcome);
    }
    if out.unit_ids.is_empty() {
        return Err(CrtError::Data("no data rows".into()));
    }
    Ok(out)
}

pub fn write_trial<W: Write>(output: W, data: &TrialData) -> Result<()> {
    let mut writer = csv::Writer::from_writer(output);
    let io = |e: csv::Error| CrtError::Data(e.to_string());
    writer.write_record(TRIAL_HEADER).map_err(io)?;
    for (i, m) in data.meta.iter().enumerate() {
        writer
            .write_record([
                format!("u{i}"),
                m.cluster.to_string(),
                m.period.to_string(),
                data.treatment[i].to_string(),
                data.outcomes[i].to_string(),
            ])
            .map_err(io)?;
    }
    writer.flush().map_err(|e| CrtError::Data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConformalRecords {
    pub x: Vec<Vec<f64>>,
    /// Outcomes of all rows but the last.
    pub y: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

pub fn read_conformal<R: Read>(input: R) -> Result<ConformalRecords> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(csv_error)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let y_col = names
        .iter()
        .position(|&n| n == "y")
        .ok_or_else(|| CrtError::Data("line 1: header needs a y column".into()))?;
    let w_col = names.iter().position(|&n| n == "weight");
    let x_cols: Vec<usize> = (0..names.len())
        .filter(|&c| c != y_col && Some(c) != w_col)
        .collect();
    let parse = |record: &csv::StringRecord, c: usize, line: u64| -> Result<f64> {
        let raw = record.get(c).unwrap_or("").trim();
        raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
            CrtError::Data(format!(
                "line {line}: column {} has invalid value {raw:?}",
                names[c]
            ))
        })
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        rows.push(record);
    }
    if rows.len() < 2 {
        return Err(CrtError::Data(
            "need at least one training row and a test row".into(),
        ));
    }
    let mut out = ConformalRecords {
        x: Vec::new(),
        y: Vec::new(),
        weights: w_col.map(|_| Vec::new()),
    };
    let last = rows.len() - 1;
    for (k, record) in rows.iter().enumerate() {
        let line = line_of(record);
        out.x.push(
            x_cols
                .iter()
                .map(|&c| parse(record, c, line))
                .collect::<Result<_>>()?,
        );
        if k < last {
            out.y.push(parse(record, y_col, line)?);
        } else if !record.get(y_col).unwrap_or("").trim().is_empty() {
            return Err(CrtError::Data(format!(
                "line {line}: y of the test row must be empty"
            )));
        }
        if let (Some(c), Some(w)) = (w_col, out.weights.as_mut()) {
            w.push(parse(record, c, line)?);
        }
    }
    Ok(out)
}
