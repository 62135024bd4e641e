use serde::{Deserialize, Serialize};

/// A dense vector for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub patient_id: String,
    pub values: Vec<f64>,
}

impl Representation {
    pub fn new(patient_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            patient_id: patient_id.into(),
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}
