//! Metric rows and their CSV / line-delimited JSON encodings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// CSV column order; JSON records use the same names.
pub const CSV_HEADER: [&str; 9] = [
    "step",
    "split",
    "loss",
    "parameter_id",
    "full_rank_ratio",
    "sum_group_rank_over_full",
    "full_update_sq_fro",
    "grouped_update_sq_fro",
    "gap",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Profile,
}

/// One row of a run. `step` is the optimizer step count, which keeps the
/// stream reproducible; wall-clock time is never recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: Split,
    pub loss: Option<f64>,
    pub parameter_id: Option<String>,
    pub full_rank_ratio: Option<f64>,
    pub sum_group_rank_over_full: Option<f64>,
    pub full_update_sq_fro: Option<f64>,
    pub grouped_update_sq_fro: Option<f64>,
    pub gap: Option<f64>,
}

impl MetricsRecord {
    pub fn loss(step: u64, split: Split, loss: f64) -> Self {
        Self {
            step,
            split,
            loss: Some(loss),
            parameter_id: None,
            full_rank_ratio: None,
            sum_group_rank_over_full: None,
            full_update_sq_fro: None,
            grouped_update_sq_fro: None,
            gap: None,
        }
    }

    pub fn profile(step: u64, parameter_id: &str) -> Self {
        Self { loss: None, parameter_id: Some(parameter_id.to_string()), ..Self::loss(step, Split::Profile, 0.0) }
    }
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn to_jsonl_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_jsonl(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("json output is utf-8"))
}

pub fn read_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
