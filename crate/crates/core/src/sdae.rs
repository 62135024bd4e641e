//! Stacked denoising autoencoder.
//!
//! Layers are trained greedily: layer `k` learns to reconstruct the clean
//! hidden output of layers `1..k` from a masked copy of it. Encoders are
//! sigmoid, decoders linear, the loss is per-coordinate mean squared error
//! and parameters move by RMSProp mini-batches. The first layer reads
//! sparse TF-IDF rows and only touches encoder columns of non-zero inputs.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{FeatureMatrix, SparseRow};
use crate::error::{contract, ensure_dims, Error, Result};
use crate::nn::{
    dense_forward, sigmoid, Activation, DenseLayer, LayerGradient, RmsPropConfig, RmsPropState,
};
use crate::repr::Representation;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdaeConfig {
    pub hidden_sizes: Vec<usize>,
    /// Masking probability applied to each layer's input while it trains.
    pub noise: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    pub seed: u64,
}

impl Default for SdaeConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![800],
            noise: 0.05,
            epochs: 30,
            batch_size: 64,
            optimizer: RmsPropConfig::default(),
            seed: 0,
        }
    }
}

impl SdaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::Config("sdae layer sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} not in [0,1]", self.noise)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// One denoising autoencoder: sigmoid encoder, linear decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaeLayer {
    pub encoder: DenseLayer,
    pub decoder: DenseLayer,
    pub noise: f64,
}

impl DaeLayer {
    pub fn new(encoder: DenseLayer, decoder: DenseLayer, noise: f64) -> Result<Self> {
        if encoder.activation != Activation::Sigmoid || decoder.activation != Activation::Linear
        {
            return Err(contract("dae layer needs a sigmoid encoder and linear decoder"));
        }
        ensure_dims("decoder output", encoder.input_dim(), decoder.output_dim())?;
        ensure_dims("decoder input", encoder.output_dim(), decoder.input_dim())?;
        Ok(Self {
            encoder,
            decoder,
            noise,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    fn encode_sparse(&self, row: &SparseRow) -> Vec<f64> {
        let mut z = self
            .encoder
            .pre_activation_sparse(&row.indices, &row.values);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdaeModel {
    pub input_dim: usize,
    pub layers: Vec<DaeLayer>,
    pub config: SdaeConfig,
    /// Mean training loss per epoch, one trace per layer.
    pub loss_trace: Vec<Vec<f64>>,
}

impl SdaeModel {
    /// Seeded initialization only, no training.
    pub fn initialize(input_dim: usize, config: &SdaeConfig) -> Result<Self> {
        config.validate()?;
        let master = Rng::new(config.seed);
        let mut layers = Vec::with_capacity(config.hidden_sizes.len());
        let mut in_dim = input_dim;
        for (k, &hidden) in config.hidden_sizes.iter().enumerate() {
            let mut rng = master.split(2 * k as u64);
            let encoder = DenseLayer::glorot_uniform(in_dim, hidden, Activation::Sigmoid, &mut rng);
            let decoder = DenseLayer::glorot_uniform(hidden, in_dim, Activation::Linear, &mut rng);
            layers.push(DaeLayer::new(encoder, decoder, config.noise)?);
            in_dim = hidden;
        }
        Ok(Self {
            input_dim,
            layers,
            config: config.clone(),
            loss_trace: vec![Vec::new(); config.hidden_sizes.len()],
        })
    }

    pub fn representation_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, DaeLayer::hidden_dim)
    }

    /// Clean input propagated through every encoder.
    pub fn encode_row(&self, row: &SparseRow) -> Vec<f64> {
        let mut layers = self.layers.iter();
        let Some(first) = layers.next() else {
            return row.to_dense(self.input_dim);
        };
        let mut h = first.encode_sparse(row);
        for layer in layers {
            h = dense_forward(&layer.encoder, &h).expect("stacked dims validated");
        }
        h
    }

    /// All hidden activations for one input, first layer first.
    pub fn encode_trace(&self, row: &SparseRow) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter().enumerate() {
            let h = if k == 0 {
                layer.encode_sparse(row)
            } else {
                dense_forward(&layer.encoder, &out[k - 1]).expect("stacked dims validated")
            };
            out.push(h);
        }
        out
    }

    /// First layer's decode of its clean encode.
    pub fn reconstruct_first_layer(&self, row: &SparseRow) -> Vec<f64> {
        let first = &self.layers[0];
        let h = first.encode_sparse(row);
        dense_forward(&first.decoder, &h).expect("decoder dims validated")
    }

    fn check_features(&self, features: &FeatureMatrix) -> Result<()> {
        ensure_dims("sdae input", self.input_dim, features.dim)
    }
}

struct LayerTrainer<'a> {
    layer: &'a mut DaeLayer,
    optimizer: RmsPropState,
    grads: [LayerGradient; 2],
    x_dense: Vec<f64>,
}

impl<'a> LayerTrainer<'a> {
    fn new(layer: &'a mut DaeLayer, config: RmsPropConfig) -> Result<Self> {
        let optimizer = RmsPropState::for_layers(
            config,
            &[layer.encoder.clone(), layer.decoder.clone()],
        )?;
        let grads = [
            LayerGradient::zeros_like(&layer.encoder),
            LayerGradient::zeros_like(&layer.decoder),
        ];
        let x_dense = vec![0.0; layer.input_dim()];
        Ok(Self {
            layer,
            optimizer,
            grads,
            x_dense,
        })
    }

    /// Accumulates gradients for one (corrupted, clean) pair and returns its loss.
    fn accumulate(&mut self, corrupted: &SparseRow, clean: &SparseRow) -> f64 {
        let d = self.layer.input_dim();
        let hidden = self.layer.hidden_dim();
        let h = self.layer.encode_sparse(corrupted);
        let mut out = self.layer.decoder.pre_activation(&h).expect("dims");

        for (i, v) in clean.iter() {
            self.x_dense[i] = v;
        }
        let scale = 2.0 / d as f64;
        let mut loss = 0.0;
        for (o, x) in out.iter_mut().zip(&self.x_dense) {
            let diff = *o - x;
            loss += diff * diff;
            *o = scale * diff;
        }
        for (i, _) in clean.iter() {
            self.x_dense[i] = 0.0;
        }
        let g_out = out;

        let [g_enc, g_dec] = &mut self.grads;
        let dec_w = self.layer.decoder.weights.as_slice();
        let g_dec_w = g_dec.weights.as_mut_slice();
        let mut g_h = vec![0.0; hidden];
        for (i, &g) in g_out.iter().enumerate() {
            g_dec.bias[i] += g;
            if g == 0.0 {
                continue;
            }
            let row = i * hidden;
            for m in 0..hidden {
                g_dec_w[row + m] += g * h[m];
                g_h[m] += g * dec_w[row + m];
            }
        }

        let g_enc_w = g_enc.weights.as_mut_slice();
        for m in 0..hidden {
            let delta = g_h[m] * h[m] * (1.0 - h[m]);
            g_enc.bias[m] += delta;
            let row = m * d;
            for (j, xj) in corrupted.iter() {
                g_enc_w[row + j] += delta * xj;
            }
        }
        loss / d as f64
    }

    fn apply(&mut self, batch_len: usize) -> Result<()> {
        let inv = 1.0 / batch_len as f64;
        for g in &mut self.grads {
            g.weights.scale(inv);
            g.bias.iter_mut().for_each(|v| *v *= inv);
        }
        let [g_enc, g_dec] = &self.grads;
        {
            let enc = &mut self.layer.encoder;
            let dec = &mut self.layer.decoder;
            let mut params: [&mut [f64]; 4] = [
                enc.weights.as_mut_slice(),
                &mut enc.bias,
                dec.weights.as_mut_slice(),
                &mut dec.bias,
            ];
            self.optimizer.step(
                &mut params,
                &[
                    g_enc.weights.as_slice(),
                    &g_enc.bias,
                    g_dec.weights.as_slice(),
                    &g_dec.bias,
                ],
            )?;
        }
        for g in &mut self.grads {
            g.weights.as_mut_slice().fill(0.0);
            g.bias.fill(0.0);
        }
        Ok(())
    }
}

fn corrupt(row: &SparseRow, p: f64, rng: &mut Rng) -> SparseRow {
    if p == 0.0 {
        return row.clone();
    }
    let mut out = SparseRow::default();
    for (i, v) in row.iter() {
        // zero coordinates stay zero under masking, so only non-zeros draw
        if rng.uniform() >= p {
            out.indices.push(i as u32);
            out.values.push(v);
        }
    }
    out
}

fn train_layer(
    layer: &mut DaeLayer,
    inputs: &[SparseRow],
    config: &SdaeConfig,
    rng: &mut Rng,
    layer_index: usize,
) -> Result<Vec<f64>> {
    let mut trainer = LayerTrainer::new(layer, config.optimizer)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut batch_loss = 0.0;
            for &i in batch {
                let corrupted = corrupt(&inputs[i], trainer.layer.noise, rng);
                batch_loss += trainer.accumulate(&corrupted, &inputs[i]);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss in layer {} epoch {} batch {b}",
                    layer_index + 1,
                    epoch + 1
                )));
            }
            trainer.apply(batch.len()).map_err(|e| {
                Error::Training(format!(
                    "layer {} epoch {} batch {b}: {e}",
                    layer_index + 1,
                    epoch + 1
                ))
            })?;
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / inputs.len() as f64;
        info!("sdae layer {} epoch {}: loss {mean:.6e}", layer_index + 1, epoch + 1);
        trace.push(mean);
    }
    Ok(trace)
}

/// Greedy layer-wise training. Layer `k` trains on the clean hidden
/// outputs of layers `1..k`.
pub fn train_sdae(features: &FeatureMatrix, config: &SdaeConfig) -> Result<SdaeModel> {
    if features.is_empty() {
        return Err(contract("cannot train an autoencoder on zero rows"));
    }
    let mut model = SdaeModel::initialize(features.dim, config)?;
    let master = Rng::new(config.seed);
    let mut inputs: Vec<SparseRow> = features.rows.clone();
    let n_layers = model.layers.len();
    for k in 0..n_layers {
        let mut rng = master.split(2 * k as u64 + 1);
        let trace = train_layer(&mut model.layers[k], &inputs, config, &mut rng, k)?;
        model.loss_trace[k] = trace;
        if k + 1 < n_layers {
            let layer = &model.layers[k];
            inputs = inputs
                .par_iter()
                .map(|row| SparseRow::from_dense(&layer.encode_sparse(row)))
                .collect();
        }
    }
    Ok(model)
}

/// Dense representation of every row, order preserved.
pub fn encode(model: &SdaeModel, features: &FeatureMatrix) -> Result<Vec<Representation>> {
    model.check_features(features)?;
    Ok(features
        .rows
        .par_iter()
        .zip(features.patient_ids.par_iter())
        .map(|(row, id)| Representation::new(id.clone(), model.encode_row(row)))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// Mean squared reconstruction error per input feature.
    pub errors: Vec<f64>,
    /// Feature ids by descending error (ties by id).
    pub ranking: Vec<usize>,
    pub n_instances: usize,
}

const RECON_CHUNK: usize = 64;

/// Per-feature squared error of the first layer's clean reconstruction,
/// averaged over instances.
pub fn feature_reconstruction_error(
    model: &SdaeModel,
    features: &FeatureMatrix,
) -> Result<ReconstructionReport> {
    if features.is_empty() {
        return Err(contract("reconstruction error needs at least one instance"));
    }
    model.check_features(features)?;
    let d = model.input_dim;
    // fixed chunking keeps the summation order independent of thread count
    let partials: Vec<Vec<f64>> = features
        .rows
        .par_chunks(RECON_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0; d];
            for row in chunk {
                let mut xhat = model.reconstruct_first_layer(row);
                for (i, v) in row.iter() {
                    xhat[i] -= v;
                }
                for (a, e) in acc.iter_mut().zip(&xhat) {
                    *a += e * e;
                }
            }
            acc
        })
        .collect();
    let n = features.len() as f64;
    let mut errors = vec![0.0; d];
    for p in &partials {
        for (e, v) in errors.iter_mut().zip(p) {
            *e += v;
        }
    }
    errors.iter_mut().for_each(|e| *e /= n);
    let ranking = rank_descending(&errors);
    Ok(ReconstructionReport {
        errors,
        ranking,
        n_instances: features.len(),
    })
}

pub(crate) fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use approx::assert_abs_diff_eq;

    fn features(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        let dim = rows[0].len();
        let ids = (0..rows.len()).map(|i| format!("p{i}")).collect();
        FeatureMatrix::new(dim, "h", ids, rows.iter().map(|r| SparseRow::from_dense(r)).collect())
            .unwrap()
    }

    fn random_rows(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| if rng.bernoulli(0.4) { rng.uniform() } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    fn zero_model(d: usize, h: usize) -> SdaeModel {
        let layer = DaeLayer::new(
            DenseLayer::zeros(d, h, Activation::Sigmoid),
            DenseLayer::zeros(h, d, Activation::Linear),
            0.0,
        )
        .unwrap();
        SdaeModel {
            input_dim: d,
            layers: vec![layer],
            config: SdaeConfig {
                hidden_sizes: vec![h],
                ..Default::default()
            },
            loss_trace: vec![vec![]],
        }
    }

    #[test]
    fn identity_capacity_reaches_tiny_loss() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..10).map(|j| (i == j) as u8 as f64).collect())
            .collect();
        let f = features(rows);
        let config = SdaeConfig {
            hidden_sizes: vec![10],
            noise: 0.0,
            epochs: 500,
            batch_size: 1,
            optimizer: RmsPropConfig {
                learning_rate: 0.002,
                ..Default::default()
            },
            seed: 1,
        };
        let model = train_sdae(&f, &config).unwrap();
        let report = feature_reconstruction_error(&model, &f).unwrap();
        let mse = report.errors.iter().sum::<f64>() / 10.0;
        assert!(mse < 1e-3, "mse {mse}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let f = features(random_rows(5, 6, &mut Rng::new(1)));
        let config = SdaeConfig {
            hidden_sizes: vec![3],
            epochs: 0,
            ..Default::default()
        };
        let model = train_sdae(&f, &config).unwrap();
        assert_eq!(model, SdaeModel::initialize(6, &config).unwrap());
        assert_eq!(encode(&model, &f).unwrap().len(), 5);
    }

    #[test]
    fn stacked_shapes() {
        let config = SdaeConfig {
            hidden_sizes: vec![800, 400],
            ..Default::default()
        };
        let model = SdaeModel::initialize(1000, &config).unwrap();
        assert_eq!(model.layers[1].encoder.input_dim(), 800);
        assert_eq!(model.representation_dim(), 400);
        assert_eq!(SdaeModel::initialize(50, &SdaeConfig::default()).unwrap().representation_dim(), 800);
    }

    #[test]
    fn zero_model_encodes_to_half_and_errors_are_mean_squares() {
        let rows = random_rows(7, 5, &mut Rng::new(4));
        let f = features(rows.clone());
        let model = zero_model(5, 3);
        for r in encode(&model, &f).unwrap() {
            assert_eq!(r.values, vec![0.5; 3]);
        }
        let report = feature_reconstruction_error(&model, &f).unwrap();
        for i in 0..5 {
            let expected = rows.iter().map(|r| r[i] * r[i]).sum::<f64>() / 7.0;
            assert_abs_diff_eq!(report.errors[i], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn exact_inverse_gives_zero_error() {
        // encoder z = x (values in (0,1) map through sigmoid), decoder maps
        // h back by logit on inputs that are all equal to one fixed vector
        let x = [0.2, 0.7];
        let mut model = zero_model(2, 2);
        model.layers[0].encoder.weights = Matrix::identity(2);
        let h: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
        // linear map sending h to x: diagonal scale
        model.layers[0].decoder.weights =
            Matrix::from_vec(2, 2, vec![x[0] / h[0], 0.0, 0.0, x[1] / h[1]]).unwrap();
        let f = features(vec![x.to_vec(), x.to_vec()]);
        let report = feature_reconstruction_error(&model, &f).unwrap();
        for e in report.errors {
            assert!(e < 1e-30);
        }
    }

    #[test]
    fn reconstruction_error_matches_brute_force() {
        let mut rng = Rng::new(21);
        let rows = random_rows(4, 6, &mut rng);
        let f = features(rows.clone());
        let model = SdaeModel::initialize(
            6,
            &SdaeConfig {
                hidden_sizes: vec![3],
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        let layer = &model.layers[0];
        let mut expected = vec![0.0; 6];
        for x in &rows {
            let xhat = dense_forward(&layer.decoder, &dense_forward(&layer.encoder, x).unwrap())
                .unwrap();
            for i in 0..6 {
                expected[i] += (xhat[i] - x[i]).powi(2) / 4.0;
            }
        }
        let report = feature_reconstruction_error(&model, &f).unwrap();
        for i in 0..6 {
            assert_abs_diff_eq!(report.errors[i], expected[i], epsilon = 1e-12);
        }
        for w in report.ranking.windows(2) {
            assert!(report.errors[w[0]] >= report.errors[w[1]]);
        }
        // instance order does not matter
        let reversed = f.select(&[3, 2, 1, 0]);
        let again = feature_reconstruction_error(&model, &reversed).unwrap();
        for (a, b) in again.errors.iter().zip(&report.errors) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn encode_is_composition_of_encoders() {
        let mut rng = Rng::new(8);
        let rows = random_rows(6, 12, &mut rng);
        let f = features(rows.clone());
        let config = SdaeConfig {
            hidden_sizes: vec![6, 4, 3],
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        };
        let model = train_sdae(&f, &config).unwrap();
        let reps = encode(&model, &f).unwrap();
        let again = encode(&model, &f).unwrap();
        assert_eq!(reps, again);
        for (x, r) in rows.iter().zip(&reps) {
            let mut h = x.clone();
            for layer in &model.layers {
                h = dense_forward(&layer.encoder, &h).unwrap();
            }
            for (a, b) in h.iter().zip(&r.values) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
            assert!(r.values.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(model.loss_trace.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2, 2]);
    }

    #[test]
    fn dimension_mismatch_and_empty() {
        let model = zero_model(5, 2);
        let f = features(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(encode(&model, &f), Err(Error::Contract(_))));
        let empty = FeatureMatrix::new(5, "h", vec![], vec![]).unwrap();
        assert!(feature_reconstruction_error(&model, &empty).is_err());
        assert!(train_sdae(&empty, &SdaeConfig::default()).is_err());
    }

    #[test]
    fn sparse_layer_gradients_match_dense_backprop() {
        use crate::nn::{backprop_gradients, Loss};
        let mut rng = Rng::new(17);
        let x = random_rows(1, 9, &mut rng).remove(0);
        let mut model = SdaeModel::initialize(
            9,
            &SdaeConfig {
                hidden_sizes: vec![4],
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap();
        let layer = model.layers[0].clone();
        let expected = backprop_gradients(
            &[layer.encoder.clone(), layer.decoder.clone()],
            &x,
            &x,
            Loss::Mse,
        )
        .unwrap();
        let row = SparseRow::from_dense(&x);
        let mut trainer = LayerTrainer::new(&mut model.layers[0], RmsPropConfig::default()).unwrap();
        let loss = trainer.accumulate(&row, &row);
        assert_abs_diff_eq!(loss, expected.loss, epsilon = 1e-15);
        for (got, want) in trainer.grads.iter().zip(&expected.layers) {
            for (a, b) in got.weights.as_slice().iter().zip(want.weights.as_slice()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
            for (a, b) in got.bias.iter().zip(&want.bias) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let f = features(random_rows(20, 8, &mut Rng::new(2)));
        let config = SdaeConfig {
            hidden_sizes: vec![4],
            epochs: 3,
            batch_size: 8,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(train_sdae(&f, &config).unwrap(), train_sdae(&f, &config).unwrap());
    }
}
