use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One patient: all non-discharge notes in order, plus optional task labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, usize>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>, notes: Vec<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            notes,
            labels: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, task: impl Into<String>, class: usize) -> Self {
        self.labels.insert(task.into(), class);
        self
    }
}

pub fn check_unique_ids(records: &[PatientRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.patient_id.as_str()) {
            return Err(Error::Data(format!("duplicate patient_id {:?}", r.patient_id)));
        }
    }
    Ok(())
}

/// Reads one [`PatientRecord`] per non-blank line.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(rec);
    }
    check_unique_ids(&out)?;
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[PatientRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
