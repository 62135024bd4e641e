//! Feed-forward classifiers over dense representations, task metrics and
//! randomized hyperparameter search.

mod metrics;
mod mlp;
mod search;

pub use metrics::{accuracy, auroc, weighted_f1};
pub use mlp::{
    evaluate, predict, predict_proba, train_mlp_classifier, Dataset, EvalReport, MlpConfig,
    MlpModel, PrimaryMetric, SelectionCriterion, TaskSpec,
};
pub use search::{random_hyperparameter_search, sample_configs, SearchOutcome, SearchSpace, Trial};

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::repr::Representation;

/// Per-patient concatenation `[a ; b]`, aligned by patient id, in `a`'s order.
pub fn concat_representations(
    a: &[Representation],
    b: &[Representation],
) -> Result<Vec<Representation>> {
    let b_index: HashMap<&str, &Representation> =
        b.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    let a_ids: BTreeSet<&str> = a.iter().map(|r| r.patient_id.as_str()).collect();
    let b_ids: BTreeSet<&str> = b_index.keys().copied().collect();
    if a_ids.len() != a.len() || b_ids.len() != b.len() {
        return Err(Error::Data("duplicate patient ids in representations".into()));
    }
    if a_ids != b_ids {
        let diff: Vec<&str> = a_ids.symmetric_difference(&b_ids).copied().collect();
        return Err(Error::Data(format!(
            "representation patient ids differ: {}",
            diff.join(", ")
        )));
    }
    Ok(a.iter()
        .map(|ra| {
            let rb = b_index[ra.patient_id.as_str()];
            let mut values = Vec::with_capacity(ra.dim() + rb.dim());
            values.extend_from_slice(&ra.values);
            values.extend_from_slice(&rb.values);
            Representation::new(ra.patient_id.clone(), values)
        })
        .collect())
}
