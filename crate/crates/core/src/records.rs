//! Patch-record CSV interchange.
//!
//! Columns: `slide_id,grid_x,grid_y,tissue,label,s_mel,s_nev,s_other,in_annotation`.
//! `label` and the score columns are empty when absent.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PatchClass, PatchKey, PatchRecord, ScoreTriplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub slide_id: String,
    pub grid_x: u32,
    pub grid_y: u32,
    pub tissue: bool,
    pub label: Option<PatchClass>,
    pub s_mel: Option<f64>,
    pub s_nev: Option<f64>,
    pub s_other: Option<f64>,
    pub in_annotation: bool,
}

impl PatchRow {
    pub fn from_record(slide_id: &str, r: &PatchRecord) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            grid_x: r.grid_x,
            grid_y: r.grid_y,
            tissue: r.tissue,
            label: r.label,
            s_mel: r.scores.map(|s| s.s_mel),
            s_nev: r.scores.map(|s| s.s_nev),
            s_other: r.scores.map(|s| s.s_other),
            in_annotation: r.in_annotation,
        }
    }

    pub fn key(&self) -> PatchKey {
        PatchKey::new(self.slide_id.clone(), self.grid_x, self.grid_y)
    }

    /// Raw score columns, if all three are present.
    pub fn raw_scores(&self) -> Result<Option<[f64; 3]>> {
        match (self.s_mel, self.s_nev, self.s_other) {
            (Some(a), Some(b), Some(c)) => Ok(Some([a, b, c])),
            (None, None, None) => Ok(None),
            _ => Err(Error::Validation(format!(
                "partial score columns for patch {}",
                self.key()
            ))),
        }
    }

    pub fn into_record(self) -> Result<(String, PatchRecord)> {
        let scores = match self.raw_scores()? {
            Some([a, b, c]) => Some(ScoreTriplet::new(a, b, c)?),
            None => None,
        };
        let rec = PatchRecord {
            grid_x: self.grid_x,
            grid_y: self.grid_y,
            tissue: self.tissue,
            label: self.label,
            scores,
            in_annotation: self.in_annotation,
        };
        Ok((self.slide_id, rec))
    }
}

pub fn write_rows<W: Write>(out: W, rows: &[PatchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> Result<Vec<PatchRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
