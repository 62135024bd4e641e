//! Feature attributions: input sensitivities through a frozen encoder and
//! classifier, and chi-squared feature ranking.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::MlpModel;
use crate::corpus::{FeatureMatrix, SparseRow};
use crate::error::{contract, ensure_dims, Error, Result};
use crate::nn::{input_jacobian, JacobianOutput, Matrix};
use crate::sdae::{rank_descending, SdaeModel};

fn check_pair(sdae: &SdaeModel, clf: &MlpModel) -> Result<()> {
    ensure_dims("classifier input vs representation", sdae.representation_dim(), clf.input_dim)
}

/// `∂o_k/∂z_i` for one input row as a (classes × input features) matrix:
/// the classifier Jacobian with respect to the representation, chained
/// through every encoder layer's Jacobian.
pub fn per_instance_sensitivity(
    sdae: &SdaeModel,
    clf: &MlpModel,
    z: &SparseRow,
    mode: JacobianOutput,
) -> Result<Matrix> {
    check_pair(sdae, clf)?;
    if let Some(&i) = z.indices.iter().find(|&&i| i as usize >= sdae.input_dim) {
        return Err(contract(format!("feature index {i} outside input dim {}", sdae.input_dim)));
    }
    let hidden = sdae.encode_trace(z);
    let r = hidden.last().cloned().unwrap_or_else(|| z.to_dense(sdae.input_dim));
    let mut jac = input_jacobian(&clf.layers, &r, mode)?;
    for (layer, h) in sdae.layers.iter().zip(&hidden).rev() {
        layer.encoder.activation.right_multiply_jacobian(h, &mut jac);
        jac = jac.matmul(&layer.encoder.weights)?;
    }
    Ok(jac)
}

/// Root mean square over instances, entrywise.
pub fn aggregate_sensitivities(per_instance: &[Matrix]) -> Result<Matrix> {
    let first = per_instance
        .first()
        .ok_or_else(|| contract("sensitivity aggregation needs at least one instance"))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for s in per_instance {
        if (s.rows(), s.cols()) != (first.rows(), first.cols()) {
            return Err(contract("sensitivity matrices differ in shape"));
        }
        for (a, v) in acc.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *a += v * v;
        }
    }
    let n = per_instance.len() as f64;
    acc.as_mut_slice().iter_mut().for_each(|a| *a = (*a / n).sqrt());
    Ok(acc)
}

/// Column-wise maximum over outputs, with the arg-max output (lowest on ties).
pub fn significance_from_aggregated(aggregated: &Matrix) -> (Vec<f64>, Vec<usize>) {
    let mut phi = vec![f64::NEG_INFINITY; aggregated.cols()];
    let mut arg = vec![0; aggregated.cols()];
    for k in 0..aggregated.rows() {
        for (i, &v) in aggregated.row(k).iter().enumerate() {
            if v > phi[i] {
                phi[i] = v;
                arg[i] = k;
            }
        }
    }
    (phi, arg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SensitivityOptions {
    pub output: JacobianOutput,
    /// Rank only features that are non-zero in at least one instance.
    pub present_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: usize,
    pub token: String,
    pub phi: f64,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub n_instances: usize,
    pub patient_ids: Vec<String>,
    pub options: SensitivityOptions,
    /// RMS over instances, (outputs × features).
    pub aggregated: Matrix,
    pub phi: Vec<f64>,
    pub argmax_output: Vec<usize>,
    pub ranking: Vec<RankedFeature>,
}

impl SensitivityReport {
    pub fn top(&self, k: usize) -> &[RankedFeature] {
        &self.ranking[..k.min(self.ranking.len())]
    }
}

const SENS_CHUNK: usize = 8;

/// Per-feature significance over a set of instances: RMS of the
/// per-instance sensitivities, then the maximum over classifier outputs.
pub fn feature_significance(
    sdae: &SdaeModel,
    clf: &MlpModel,
    instances: &FeatureMatrix,
    tokens: &[String],
    options: SensitivityOptions,
) -> Result<SensitivityReport> {
    if instances.is_empty() {
        return Err(contract("feature significance needs at least one instance"));
    }
    check_pair(sdae, clf)?;
    ensure_dims("instance features", sdae.input_dim, instances.dim)?;
    ensure_dims("token list", sdae.input_dim, tokens.len())?;

    // squared sums per fixed chunk, reduced in chunk order
    let partials: Vec<Result<Vec<f64>>> = instances
        .rows
        .par_chunks(SENS_CHUNK)
        .map(|chunk| {
            let mut acc: Vec<f64> = Vec::new();
            for row in chunk {
                let s = per_instance_sensitivity(sdae, clf, row, options.output)?;
                if acc.is_empty() {
                    acc = vec![0.0; s.as_slice().len()];
                }
                for (a, v) in acc.iter_mut().zip(s.as_slice()) {
                    *a += v * v;
                }
            }
            Ok(acc)
        })
        .collect();
    let k = clf.n_classes();
    let d = sdae.input_dim;
    let mut sum = vec![0.0; k * d];
    for p in partials {
        for (a, v) in sum.iter_mut().zip(p?) {
            *a += v;
        }
    }
    let n = instances.len() as f64;
    sum.iter_mut().for_each(|a| *a = (*a / n).sqrt());
    let aggregated = Matrix::from_vec(k, d, sum)?;
    let (phi, argmax_output) = significance_from_aggregated(&aggregated);
    if phi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite sensitivity; check model weights".into()));
    }

    let present: Option<BTreeSet<usize>> = options.present_only.then(|| {
        instances
            .rows
            .iter()
            .flat_map(|r| r.indices.iter().map(|&i| i as usize))
            .collect()
    });
    let ranking = rank_descending(&phi)
        .into_iter()
        .filter(|i| present.as_ref().is_none_or(|p| p.contains(i)))
        .map(|i| RankedFeature {
            feature: i,
            token: tokens[i].clone(),
            phi: phi[i],
            output: argmax_output[i],
        })
        .collect();
    Ok(SensitivityReport {
        n_instances: instances.len(),
        patient_ids: instances.patient_ids.clone(),
        options,
        aggregated,
        phi,
        argmax_output,
        ranking,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chi2Report {
    pub n_instances: usize,
    pub n_classes: usize,
    /// One-vs-rest statistic per class, indexed `[class][feature]`.
    pub scores: Vec<Vec<f64>>,
    /// Feature ids by descending statistic per class (ties by id).
    pub rankings: Vec<Vec<usize>>,
}

/// Pearson statistic of a 2×2 table `[[a, b], [c, d]]`; cells with zero
/// expected count contribute nothing.
pub fn chi2_2x2(table: [[f64; 2]; 2]) -> f64 {
    let n: f64 = table.iter().flatten().sum();
    if n == 0.0 {
        return 0.0;
    }
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut chi = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let e = rows[r] * cols[c] / n;
            if e > 0.0 {
                let diff = table[r][c] - e;
                chi += diff * diff / e;
            }
        }
    }
    chi
}

/// Presence/absence chi-squared of each feature against each class,
/// one class versus the rest.
pub fn chi2_feature_scores(
    features: &FeatureMatrix,
    labels: &[usize],
    n_classes: usize,
) -> Result<Chi2Report> {
    if labels.len() != features.len() {
        return Err(contract(format!(
            "chi2: {} labels for {} rows",
            labels.len(),
            features.len()
        )));
    }
    if features.len() < 2 {
        return Err(contract("chi2 needs at least two instances"));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(contract(format!("label {bad} outside [0, {n_classes})")));
    }
    if labels.iter().all(|&c| c == labels[0]) {
        return Err(Error::UndefinedMetric("chi2: labels contain a single class".into()));
    }
    let d = features.dim;
    let mut class_size = vec![0.0; n_classes];
    // present[c][i]: rows of class c containing feature i
    let mut present = vec![vec![0.0; d]; n_classes];
    for (row, &c) in features.rows.iter().zip(labels) {
        class_size[c] += 1.0;
        for &i in &row.indices {
            present[c][i as usize] += 1.0;
        }
    }
    let n = features.len() as f64;
    let total_present: Vec<f64> = (0..d).map(|i| present.iter().map(|p| p[i]).sum()).collect();
    let scores: Vec<Vec<f64>> = (0..n_classes)
        .map(|c| {
            (0..d)
                .map(|i| {
                    let a = present[c][i];
                    let b = total_present[i] - a;
                    let cc = class_size[c] - a;
                    let dd = (n - class_size[c]) - b;
                    chi2_2x2([[a, b], [cc, dd]])
                })
                .collect()
        })
        .collect();
    let rankings = scores.iter().map(|s| rank_descending(s)).collect();
    Ok(Chi2Report {
        n_instances: features.len(),
        n_classes,
        scores,
        rankings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{MlpConfig, PrimaryMetric, TaskSpec};
    use crate::nn::{relative_error, softmax};
    use crate::rng::Rng;
    use crate::sdae::SdaeConfig;
    use approx::assert_abs_diff_eq;

    fn random_pair(vocab: usize, hidden: &[usize], clf_hidden: &[usize], k: usize, seed: u64) -> (SdaeModel, MlpModel) {
        let sdae = SdaeModel::initialize(
            vocab,
            &SdaeConfig {
                hidden_sizes: hidden.to_vec(),
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let task = TaskSpec::new("t", k, PrimaryMetric::WeightedF1).unwrap();
        let mut clf = MlpModel::initialize(
            *hidden.last().unwrap(),
            &task,
            &MlpConfig {
                hidden_sizes: clf_hidden.to_vec(),
                seed: seed + 1,
                ..Default::default()
            },
        )
        .unwrap();
        let mut rng = Rng::new(seed + 2);
        for l in &mut clf.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-0.5, 0.5));
        }
        (sdae, clf)
    }

    fn probs(sdae: &SdaeModel, clf: &MlpModel, z: &[f64]) -> Vec<f64> {
        let r = sdae.encode_row(&SparseRow::from_dense(z));
        clf.proba_row(&r).unwrap()
    }

    fn dense_input(d: usize, rng: &mut Rng) -> Vec<f64> {
        (0..d).map(|_| rng.uniform_range(0.05, 1.0)).collect()
    }

    #[test]
    fn zero_classifier_has_no_sensitivity() {
        let (sdae, mut clf) = random_pair(6, &[3], &[4], 2, 1);
        for l in &mut clf.layers {
            l.weights.as_mut_slice().fill(0.0);
        }
        let z = SparseRow::from_dense(&[0.3, 0.0, 1.0, 0.2, 0.0, 0.5]);
        let s = per_instance_sensitivity(&sdae, &clf, &z, JacobianOutput::Activations).unwrap();
        assert!(s.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_hidden_unit_matches_product_form() {
        let (sdae, clf) = random_pair(7, &[1], &[], 3, 4);
        let mut rng = Rng::new(9);
        let zd = dense_input(7, &mut rng);
        let z = SparseRow::from_dense(&zd);
        let s = per_instance_sensitivity(&sdae, &clf, &z, JacobianOutput::Activations).unwrap();
        let r = sdae.encode_row(&z)[0];
        let head = &clf.layers[0];
        let o = softmax(&head.pre_activation(&[r]).unwrap());
        let w_enc = sdae.layers[0].encoder.weights.row(0);
        for k in 0..3 {
            let mut do_dr = 0.0;
            for c in 0..3 {
                let delta = if c == k { 1.0 } else { 0.0 };
                do_dr += o[c] * (delta - o[k]) * head.weights[(c, 0)];
            }
            for i in 0..7 {
                let expected = do_dr * (r * (1.0 - r)) * w_enc[i];
                assert_eq!(s[(k, i)], expected, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn matches_finite_differences() {
        let h = 1e-5;
        let mut rng = Rng::new(21);
        for (trial, hidden) in [vec![4], vec![5, 4]].into_iter().enumerate() {
            let (sdae, clf) = random_pair(12, &hidden, &[6], 3, 30 + trial as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let zd = dense_input(12, &mut rng);
                let s = per_instance_sensitivity(&sdae, &clf, &SparseRow::from_dense(&zd), JacobianOutput::Activations)
                    .unwrap();
                for _ in 0..5 {
                    let (k, i) = (rng.below(3), rng.below(12));
                    let fd = {
                        let mut up = zd.clone();
                        up[i] += h;
                        let mut dn = zd.clone();
                        dn[i] -= h;
                        (probs(&sdae, &clf, &up)[k] - probs(&sdae, &clf, &dn)[k]) / (2.0 * h)
                    };
                    worst = worst.max(relative_error(s[(k, i)], fd));
                }
            }
            assert!(worst < 1e-5, "hidden {hidden:?}: {worst}");
        }
    }

    #[test]
    fn logit_mode_skips_softmax() {
        let (sdae, clf) = random_pair(5, &[3], &[], 2, 8);
        let z = SparseRow::from_dense(&[0.2, 0.4, 0.0, 0.0, 1.0]);
        let s = per_instance_sensitivity(&sdae, &clf, &z, JacobianOutput::Logits).unwrap();
        let r = sdae.encode_row(&z);
        let w = &clf.layers[0].weights;
        let enc = &sdae.layers[0].encoder.weights;
        for i in 0..5 {
            let expected: f64 = (0..3).map(|m| w[(1, m)] * r[m] * (1.0 - r[m]) * enc[(m, i)]).sum();
            assert_abs_diff_eq!(s[(1, i)], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn rms_and_max_rules() {
        let a = Matrix::from_vec(2, 1, vec![3.0, 0.2]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![-4.0, 0.2]).unwrap();
        let agg = aggregate_sensitivities(&[a.clone(), b]).unwrap();
        assert_abs_diff_eq!(agg[(0, 0)], 12.5f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(agg[(0, 0)], 3.535534, epsilon = 1e-6);
        let single = aggregate_sensitivities(&[Matrix::from_vec(1, 2, vec![-0.3, 2.0]).unwrap()]).unwrap();
        assert_eq!(single.as_slice(), &[0.3, 2.0]);
        let (phi, arg) = significance_from_aggregated(&Matrix::from_vec(2, 1, vec![0.2, 0.7]).unwrap());
        assert_eq!((phi[0], arg[0]), (0.7, 1));
        assert!(aggregate_sensitivities(&[]).is_err());
    }

    fn matrix_of(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::new(
            rows[0].len(),
            "h",
            (0..rows.len()).map(|i| format!("p{i}")).collect(),
            rows.iter().map(|r| SparseRow::from_dense(r)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn significance_report_and_duplication_invariance() {
        let (sdae, clf) = random_pair(6, &[4], &[3], 2, 12);
        let mut rng = Rng::new(5);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|i| if i % 3 == 0 { 0.0 } else { rng.uniform() }).collect())
            .collect();
        let tokens: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let f = matrix_of(&rows);
        let opts = SensitivityOptions::default();
        let rep = feature_significance(&sdae, &clf, &f, &tokens, opts).unwrap();
        let per: Vec<Matrix> = f
            .rows
            .iter()
            .map(|r| per_instance_sensitivity(&sdae, &clf, r, opts.output).unwrap())
            .collect();
        let agg = aggregate_sensitivities(&per).unwrap();
        for (a, b) in agg.as_slice().iter().zip(rep.aggregated.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(rep.phi.iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert!(rep.ranking.windows(2).all(|w| w[0].phi >= w[1].phi));

        let doubled: Vec<Vec<f64>> = rows.iter().chain(rows.iter().rev()).cloned().collect();
        let rep2 = feature_significance(&sdae, &clf, &matrix_of(&doubled), &tokens, opts).unwrap();
        for (a, b) in rep.phi.iter().zip(&rep2.phi) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }

        let present = feature_significance(
            &sdae,
            &clf,
            &f,
            &tokens,
            SensitivityOptions { present_only: true, ..opts },
        )
        .unwrap();
        assert_eq!(present.ranking.len(), 4);
        assert!(present.ranking.iter().all(|r| r.feature % 3 != 0));
    }

    #[test]
    fn explicit_single_layer_formula() {
        // ∂o/∂R · diag(R(1−R)) · W assembled by hand
        let (sdae, clf) = random_pair(5, &[3], &[2], 2, 40);
        let zd = vec![0.1, 0.7, 0.3, 0.9, 0.5];
        let z = SparseRow::from_dense(&zd);
        let r = sdae.encode_row(&z);
        let do_dr = input_jacobian(&clf.layers, &r, JacobianOutput::Activations).unwrap();
        let enc = &sdae.layers[0].encoder.weights;
        let s = per_instance_sensitivity(&sdae, &clf, &z, JacobianOutput::Activations).unwrap();
        for k in 0..2 {
            for i in 0..5 {
                let v: f64 = (0..3).map(|m| do_dr[(k, m)] * r[m] * (1.0 - r[m]) * enc[(m, i)]).sum();
                assert_abs_diff_eq!(s[(k, i)], v, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let (sdae, _) = random_pair(5, &[3], &[2], 2, 1);
        let (_, clf) = random_pair(5, &[4], &[2], 2, 1);
        let z = SparseRow::from_dense(&[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            per_instance_sensitivity(&sdae, &clf, &z, JacobianOutput::Activations),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn chi2_examples() {
        assert_abs_diff_eq!(chi2_2x2([[10.0, 0.0], [0.0, 10.0]]), 20.0, epsilon = 1e-12);
        assert_eq!(chi2_2x2([[5.0, 5.0], [5.0, 5.0]]), 0.0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let class = (i >= 10) as usize;
            rows.push(vec![if class == 0 { 1.0 } else { 0.0 }, if i % 2 == 0 { 1.0 } else { 0.0 }, 1.0]);
            labels.push(class);
        }
        let rep = chi2_feature_scores(&matrix_of(&rows), &labels, 2).unwrap();
        assert_abs_diff_eq!(rep.scores[0][0], 20.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.scores[1][0], 20.0, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.scores[0][1], 0.0, epsilon = 1e-10);
        assert_eq!(rep.scores[0][2], 0.0);
        assert_eq!(rep.rankings[0][0], 0);
        assert!(chi2_feature_scores(&matrix_of(&rows), &[0; 20], 2).is_err());
    }

    fn brute_chi2(rows: &[Vec<f64>], labels: &[usize], class: usize, feature: usize) -> f64 {
        let n = rows.len() as f64;
        let mut obs = [[0.0; 2]; 2];
        for (r, &l) in rows.iter().zip(labels) {
            let p = if r[feature] > 0.0 { 0 } else { 1 };
            let c = if l == class { 0 } else { 1 };
            obs[p][c] += 1.0;
        }
        let mut chi = 0.0;
        for p in 0..2 {
            for c in 0..2 {
                let row: f64 = obs[p].iter().sum();
                let col = obs[0][c] + obs[1][c];
                let e = row * col / n;
                if e != 0.0 {
                    chi += (obs[p][c] - e).powi(2) / e;
                }
            }
        }
        chi
    }

    #[test]
    fn chi2_brute_force_and_relabeling() {
        let mut rng = Rng::new(77);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..8).map(|_| if rng.bernoulli(0.4) { rng.uniform() + 0.01 } else { 0.0 }).collect())
            .collect();
        let labels: Vec<usize> = (0..40).map(|_| rng.below(3)).collect();
        let f = matrix_of(&rows);
        let rep = chi2_feature_scores(&f, &labels, 3).unwrap();
        for c in 0..3 {
            for i in 0..8 {
                assert_abs_diff_eq!(rep.scores[c][i], brute_chi2(&rows, &labels, c, i), epsilon = 1e-10);
            }
        }
        let perm = [2, 0, 1];
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let rep2 = chi2_feature_scores(&f, &relabeled, 3).unwrap();
        for c in 0..3 {
            assert_eq!(rep.scores[c], rep2.scores[perm[c]]);
            assert_eq!(rep.rankings[c], rep2.rankings[perm[c]]);
        }
    }
}
