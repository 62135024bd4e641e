use serde::{Deserialize, Serialize};

use super::layer::{DenseLayer, LayerGradient};
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmsPropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Config(format!("rmsprop rho {} not in (0,1)", self.rho)));
        }
        // zero is allowed for learning rate so a frozen step can be expressed
        if !(self.learning_rate >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "rmsprop learning rate {} / epsilon {} out of range",
                self.learning_rate, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Running mean of squared gradients, one accumulator block per parameter
/// block.
#[derive(Debug, Clone)]
pub struct RmsPropState {
    pub config: RmsPropConfig,
    accumulators: Vec<Vec<f64>>,
}

impl RmsPropState {
    pub fn new(config: RmsPropConfig, block_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            accumulators: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    /// Two blocks (weights, bias) per layer.
    pub fn for_layers(config: RmsPropConfig, layers: &[DenseLayer]) -> Result<Self> {
        let sizes: Vec<usize> = layers
            .iter()
            .flat_map(|l| [l.weights.as_slice().len(), l.bias.len()])
            .collect();
        Self::new(config, &sizes)
    }

    pub fn accumulators(&self) -> &[Vec<f64>] {
        &self.accumulators
    }

    /// `E ← ρE + (1−ρ)g²; θ ← θ − η g / √(E+ε)`. Nothing is modified when a
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.accumulators.len() || grads.len() != self.accumulators.len() {
            return Err(contract(format!(
                "rmsprop expects {} parameter blocks, got {} params / {} grads",
                self.accumulators.len(),
                params.len(),
                grads.len()
            )));
        }
        for (b, ((p, g), acc)) in params.iter().zip(grads).zip(&self.accumulators).enumerate() {
            if p.len() != g.len() || g.len() != acc.len() {
                return Err(contract(format!("rmsprop block {b} shape mismatch")));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} at block {b}, index {i}",
                    g[i]
                )));
            }
        }
        let RmsPropConfig {
            learning_rate,
            rho,
            epsilon,
        } = self.config;
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            for ((theta, &gi), e) in p.iter_mut().zip(g.iter()).zip(acc.iter_mut()) {
                *e = rho * *e + (1.0 - rho) * gi * gi;
                if gi != 0.0 {
                    *theta -= learning_rate * gi / (*e + epsilon).sqrt();
                }
            }
        }
        Ok(())
    }

    pub fn step_layers(&mut self, layers: &mut [DenseLayer], grads: &[LayerGradient]) -> Result<()> {
        if layers.len() != grads.len() {
            return Err(contract("rmsprop: layer/gradient count mismatch"));
        }
        let mut params: Vec<&mut [f64]> = Vec::with_capacity(layers.len() * 2);
        for l in layers.iter_mut() {
            params.push(l.weights.as_mut_slice());
            params.push(&mut l.bias);
        }
        let g: Vec<&[f64]> = grads
            .iter()
            .flat_map(|g| [g.weights.as_slice(), g.bias.as_slice()])
            .collect();
        self.step(&mut params, &g)
    }
}

pub fn rmsprop_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut RmsPropState,
) -> Result<()> {
    state.step(params, grads)
}
