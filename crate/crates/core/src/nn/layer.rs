use serde::{Deserialize, Serialize};

use super::matrix::{axpy, Matrix};
use crate::error::{contract, ensure_dims, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Linear,
    Softmax,
}

impl Activation {
    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::Sigmoid => z.iter().map(|&v| sigmoid(v)).collect(),
            Activation::Linear => z.to_vec(),
            Activation::Softmax => softmax(z),
        }
    }

    /// Multiplies an upstream gradient `g = ∂L/∂y` by the activation
    /// Jacobian, giving `∂L/∂z` for pre-activation `z` with output `y`.
    fn backward(self, y: &[f64], g: &[f64]) -> Vec<f64> {
        match self {
            Activation::Sigmoid => y.iter().zip(g).map(|(y, g)| g * y * (1.0 - y)).collect(),
            Activation::Linear => g.to_vec(),
            Activation::Softmax => {
                let gy: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                y.iter().zip(g).map(|(y, g)| y * (g - gy)).collect()
            }
        }
    }

    /// Right-multiplies `jac` (rows × n) by `∂y/∂z` (n × n) in place.
    pub(crate) fn right_multiply_jacobian(self, y: &[f64], jac: &mut Matrix) {
        match self {
            Activation::Linear => {}
            Activation::Sigmoid => {
                for r in 0..jac.rows() {
                    for (v, y) in jac.row_mut(r).iter_mut().zip(y) {
                        *v *= y * (1.0 - y);
                    }
                }
            }
            Activation::Softmax => {
                for r in 0..jac.rows() {
                    let row = jac.row_mut(r);
                    let ry: f64 = row.iter().zip(y).map(|(a, b)| a * b).sum();
                    for (v, y) in row.iter_mut().zip(y) {
                        *v = y * (*v - ry);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Fully connected layer `y = activation(W x + b)` with `W` of shape out × in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        ensure_dims("layer bias", weights.rows(), bias.len())?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(output_dim, input_dim),
            bias: vec![0.0; output_dim],
            activation,
        }
    }

    /// Weights uniform in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn glorot_uniform(
        input_dim: usize,
        output_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let limit = (6.0 / (input_dim + output_dim).max(1) as f64).sqrt();
        let weights = Matrix::from_fn(output_dim, input_dim, |_, _| {
            rng.uniform_range(-limit, limit)
        });
        Self {
            weights,
            bias: vec![0.0; output_dim],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    pub fn pre_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        ensure_dims("dense layer input", self.input_dim(), x.len())?;
        let mut z = self.weights.matvec(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        Ok(z)
    }

    /// Pre-activation from a sparse input given as parallel index/value slices.
    pub fn pre_activation_sparse(&self, indices: &[u32], values: &[f64]) -> Vec<f64> {
        let mut z = self.bias.clone();
        let cols = self.input_dim();
        let w = self.weights.as_slice();
        for (&j, &v) in indices.iter().zip(values) {
            let j = j as usize;
            for (m, zm) in z.iter_mut().enumerate() {
                *zm += w[m * cols + j] * v;
            }
        }
        z
    }
}

pub fn dense_forward(layer: &DenseLayer, x: &[f64]) -> Result<Vec<f64>> {
    Ok(layer.activation.apply(&layer.pre_activation(x)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `(1/d) Σ (ŷ − t)²`
    Mse,
    /// `−Σ t ln p` over a softmax output and one-hot target.
    CrossEntropy,
}

/// Pre-activations and outputs of every layer for one input.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre_activations: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().unwrap_or(&self.input)
    }

    fn layer_input(&self, l: usize) -> &[f64] {
        if l == 0 {
            &self.input
        } else {
            &self.outputs[l - 1]
        }
    }
}

pub fn forward_trace(layers: &[DenseLayer], x: &[f64]) -> Result<ForwardTrace> {
    let mut trace = ForwardTrace {
        input: x.to_vec(),
        pre_activations: Vec::with_capacity(layers.len()),
        outputs: Vec::with_capacity(layers.len()),
    };
    for layer in layers {
        let z = layer.pre_activation(trace.output())?;
        let y = layer.activation.apply(&z);
        trace.pre_activations.push(z);
        trace.outputs.push(y);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGradient {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Matrix::zeros(layer.output_dim(), layer.input_dim()),
            bias: vec![0.0; layer.output_dim()],
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &LayerGradient, s: f64) {
        axpy(s, other.weights.as_slice(), self.weights.as_mut_slice());
        axpy(s, &other.bias, &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    pub loss: f64,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weights.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

fn validate_loss(layers: &[DenseLayer], target: &[f64], loss: Loss) -> Result<()> {
    if loss == Loss::CrossEntropy {
        match layers.last() {
            Some(l) if l.activation == Activation::Softmax => {}
            _ => {
                return Err(contract(
                    "cross-entropy loss requires a softmax final layer",
                ))
            }
        }
        let ones = target.iter().filter(|&&t| t == 1.0).count();
        let zeros = target.iter().filter(|&&t| t == 0.0).count();
        if ones != 1 || ones + zeros != target.len() {
            return Err(contract("cross-entropy target must be one-hot"));
        }
    }
    Ok(())
}

/// Loss of a finished forward pass against `target`.
pub fn loss_value(trace: &ForwardTrace, target: &[f64], loss: Loss) -> f64 {
    let y = trace.output();
    match loss {
        Loss::Mse => {
            let d = y.len().max(1) as f64;
            y.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / d
        }
        Loss::CrossEntropy => {
            // log-softmax from the logits for stability
            let z = trace.pre_activations.last().expect("softmax layer");
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            z.iter()
                .zip(target)
                .filter(|(_, &t)| t != 0.0)
                .map(|(zi, t)| -t * (zi - lse))
                .sum()
        }
    }
}

/// Exact gradients of the scalar loss for one (input, target) pair.
pub fn backprop_gradients(
    layers: &[DenseLayer],
    x: &[f64],
    target: &[f64],
    loss: Loss,
) -> Result<Gradients> {
    validate_loss(layers, target, loss)?;
    let trace = forward_trace(layers, x)?;
    ensure_dims("loss target", trace.output().len(), target.len())?;
    let loss_val = loss_value(&trace, target, loss);

    let mut grads: Vec<LayerGradient> = layers.iter().map(LayerGradient::zeros_like).collect();
    if layers.is_empty() {
        return Ok(Gradients {
            layers: grads,
            loss: loss_val,
        });
    }

    let last = layers.len() - 1;
    let y = trace.output();
    let mut delta: Vec<f64> = match loss {
        Loss::CrossEntropy => y.iter().zip(target).map(|(p, t)| p - t).collect(),
        Loss::Mse => {
            let d = y.len() as f64;
            let g: Vec<f64> = y.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / d).collect();
            layers[last].activation.backward(y, &g)
        }
    };

    for l in (0..layers.len()).rev() {
        let input = trace.layer_input(l);
        let gw = &mut grads[l].weights;
        for (r, &dr) in delta.iter().enumerate() {
            if dr != 0.0 {
                axpy(dr, input, gw.row_mut(r));
            }
        }
        grads[l].bias.copy_from_slice(&delta);
        if l > 0 {
            let upstream = layers[l].weights.transpose_matvec(&delta);
            delta = layers[l - 1]
                .activation
                .backward(&trace.outputs[l - 1], &upstream);
        }
    }

    Ok(Gradients {
        layers: grads,
        loss: loss_val,
    })
}

/// Which quantity of the final layer an input Jacobian differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JacobianOutput {
    /// Post-activation outputs (probabilities for a softmax head).
    #[default]
    Activations,
    /// Pre-activation logits of the final layer.
    Logits,
}

/// `∂output/∂input` as an (output dim × input dim) matrix.
pub fn input_jacobian(layers: &[DenseLayer], x: &[f64], mode: JacobianOutput) -> Result<Matrix> {
    let trace = forward_trace(layers, x)?;
    Ok(jacobian_from_trace(layers, &trace, mode))
}

pub(crate) fn jacobian_from_trace(
    layers: &[DenseLayer],
    trace: &ForwardTrace,
    mode: JacobianOutput,
) -> Matrix {
    let Some(last) = layers.last() else {
        return Matrix::identity(trace.input.len());
    };
    let mut jac = Matrix::identity(last.output_dim());
    if mode == JacobianOutput::Activations {
        last.activation
            .right_multiply_jacobian(trace.output(), &mut jac);
    }
    for l in (0..layers.len()).rev() {
        jac = jac
            .matmul(&layers[l].weights)
            .expect("layer shapes chain");
        if l > 0 {
            layers[l - 1]
                .activation
                .right_multiply_jacobian(&trace.outputs[l - 1], &mut jac);
        }
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_sigmoid_layer_outputs_half() {
        let layer = DenseLayer::zeros(3, 4, Activation::Sigmoid);
        assert_eq!(dense_forward(&layer, &[1.0, -2.0, 3.0]).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn identity_linear_layer_is_identity() {
        let layer =
            DenseLayer::new(Matrix::identity(3), vec![0.0; 3], Activation::Linear).unwrap();
        assert_eq!(
            dense_forward(&layer, &[1.5, -2.0, 0.25]).unwrap(),
            vec![1.5, -2.0, 0.25]
        );
    }

    #[test]
    fn zero_softmax_is_uniform() {
        let layer = DenseLayer::zeros(5, 2, Activation::Softmax);
        assert_eq!(dense_forward(&layer, &[1.0; 5]).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let layer = DenseLayer::zeros(3, 2, Activation::Linear);
        assert!(matches!(
            dense_forward(&layer, &[1.0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn mse_scalar_hand_gradient() {
        let layer = DenseLayer::zeros(1, 1, Activation::Linear);
        let g = backprop_gradients(&[layer], &[1.0], &[1.0], Loss::Mse).unwrap();
        assert_eq!(g.loss, 1.0);
        assert_eq!(g.layers[0].weights[(0, 0)], -2.0);
        assert_eq!(g.layers[0].bias[0], -2.0);
    }

    #[test]
    fn softmax_cross_entropy_logit_gradient() {
        // zero weights, so the bias gradient equals the logit gradient
        let layer = DenseLayer::zeros(2, 2, Activation::Softmax);
        let g = backprop_gradients(&[layer], &[0.3, -0.7], &[1.0, 0.0], Loss::CrossEntropy)
            .unwrap();
        assert_eq!(g.layers[0].bias, vec![-0.5, 0.5]);
        assert_abs_diff_eq!(g.loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn cross_entropy_requires_softmax_and_one_hot() {
        let lin = DenseLayer::zeros(2, 2, Activation::Linear);
        assert!(backprop_gradients(&[lin], &[0.0, 0.0], &[1.0, 0.0], Loss::CrossEntropy).is_err());
        let sm = DenseLayer::zeros(2, 2, Activation::Softmax);
        assert!(backprop_gradients(&[sm], &[0.0, 0.0], &[0.5, 0.5], Loss::CrossEntropy).is_err());
    }

    #[test]
    fn softmax_sums_to_one_for_extreme_logits() {
        let p = softmax(&[1000.0, -1000.0, 0.0]);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn sparse_pre_activation_matches_dense() {
        let mut rng = Rng::new(1);
        let layer = DenseLayer::glorot_uniform(6, 3, Activation::Sigmoid, &mut rng);
        let dense = [0.0, 0.5, 0.0, 0.0, -1.0, 0.0];
        let a = layer.pre_activation(&dense).unwrap();
        let b = layer.pre_activation_sparse(&[1, 4], &[0.5, -1.0]);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }
}
