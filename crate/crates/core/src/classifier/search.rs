use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{train_mlp_classifier, Dataset, MlpConfig, MlpModel, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::RmsPropConfig;
use crate::rng::Rng;

/// Random-search ranges. Learning rate is sampled log-uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub hidden_sizes: Vec<Vec<usize>>,
    pub learning_rate: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub epochs: usize,
    pub patience: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![vec![64], vec![128], vec![256], vec![256, 128]],
            learning_rate: (1e-4, 1e-2),
            batch_sizes: vec![32, 64, 128],
            epochs: 100,
            patience: 10,
            n_samples: 20,
            seed: 0,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Config(format!("bad learning-rate range ({lo}, {hi})")));
        }
        if self.hidden_sizes.is_empty() || self.batch_sizes.is_empty() {
            return Err(Error::Config("search space has an empty choice list".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `n_samples` configurations; trial `i` uses `Rng::split(i)` so the
/// list is stable regardless of how many are drawn.
pub fn sample_configs(space: &SearchSpace) -> Result<Vec<MlpConfig>> {
    space.validate()?;
    let root = Rng::new(space.seed);
    let (lo, hi) = space.learning_rate;
    Ok((0..space.n_samples)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let hidden = space.hidden_sizes[rng.below(space.hidden_sizes.len())].clone();
            let lr = (lo.ln() + rng.uniform() * (hi.ln() - lo.ln())).exp();
            let batch_size = space.batch_sizes[rng.below(space.batch_sizes.len())];
            MlpConfig {
                hidden_sizes: hidden,
                epochs: space.epochs,
                batch_size,
                optimizer: RmsPropConfig {
                    learning_rate: lr,
                    ..Default::default()
                },
                patience: space.patience,
                seed: rng.split(0).seed(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: MlpConfig,
    pub validation_metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best_index: usize,
    pub best: MlpModel,
    pub best_metric: f64,
    pub leaderboard: Vec<Trial>,
}

/// Trains every sampled configuration and keeps the one with the highest
/// validation score; ties go to the lowest trial index.
pub fn random_hyperparameter_search(
    train: Dataset,
    validation: Dataset,
    task: &TaskSpec,
    space: &SearchSpace,
) -> Result<SearchOutcome> {
    let configs = sample_configs(space)?;
    let results: Vec<Result<MlpModel>> = configs
        .par_iter()
        .map(|c| train_mlp_classifier(train, task, c, validation))
        .collect();

    let mut leaderboard = Vec::with_capacity(configs.len());
    let mut best: Option<(usize, MlpModel)> = None;
    for (index, (config, result)) in configs.into_iter().zip(results).enumerate() {
        match result {
            Ok(model) => {
                let score = model.best_validation;
                leaderboard.push(Trial {
                    index,
                    config,
                    validation_metric: Some(score),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((_, b)) => score > b.best_validation,
                };
                if better {
                    best = Some((index, model));
                }
            }
            Err(e) => {
                warn!("search trial {index} failed: {e}");
                leaderboard.push(Trial {
                    index,
                    config,
                    validation_metric: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    match best {
        Some((best_index, model)) => Ok(SearchOutcome {
            best_index,
            best_metric: model.best_validation,
            best: model,
            leaderboard,
        }),
        None => {
            let msgs: Vec<String> = leaderboard
                .iter()
                .filter_map(|t| t.error.as_ref().map(|e| format!("trial {}: {e}", t.index)))
                .collect();
            Err(Error::Training(format!("all search trials failed: {}", msgs.join("; "))))
        }
    }
}
