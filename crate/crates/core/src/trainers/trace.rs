use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Stage tag of the record taken before the first step.
pub const STAGE_INIT: u8 = 0;
/// Steps driven by augmented (or mixed) gradients.
pub const STAGE_AUGMENTED: u8 = 1;
/// Steps driven by original-data gradients only.
pub const STAGE_ORIGINAL: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub stage: u8,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_tilde")]
    pub l_tilde: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    pub grad_norm: f64,
    /// `L̃(w_t) − L̃_floor`.
    pub constraint: f64,
}

impl TraceRecord {
    pub fn is_finite(&self) -> bool {
        [self.l, self.l_tilde, self.l_c, self.grad_norm, self.constraint]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub scheme: String,
    pub seed: u64,
    pub l_floor: f64,
    pub records: Vec<TraceRecord>,
    pub final_params: Vec<f64>,
    /// Step sizes, batch sizes and constants the run was configured with.
    pub resolved: BTreeMap<String, f64>,
    /// `(t, w_t)` pairs kept when the config asks for snapshots.
    #[serde(default)]
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl TrainTrace {
    pub fn initial_gap(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.l - self.l_floor)
    }

    pub fn final_gap(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.l - self.l_floor)
    }

    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    /// Records whose step belonged to `stage`.
    pub fn stage_records(&self, stage: u8) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_records(&self.records, out)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }
}

pub fn write_records<W: Write>(records: &[TraceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(["t", "stage", "L", "L_tilde", "L_c", "grad_norm", "constraint"])
            .map_err(|e| invalid(e.to_string()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| invalid(format!("writing trace: {e}")))?;
    }
    w.flush().map_err(|e| invalid(format!("writing trace: {e}")))
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| invalid(format!("reading trace: {e}")))?;
    if header != vec!["t", "stage", "L", "L_tilde", "L_c", "grad_norm", "constraint"] {
        return Err(invalid(format!("unexpected trace header {header:?}")));
    }
    r.deserialize()
        .map(|rec| rec.map_err(|e| invalid(format!("reading trace: {e}"))))
        .collect()
}
