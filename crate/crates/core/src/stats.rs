//! Agreement, rank correlation and paired significance testing.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::Rng;

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share rank mean of (i+1)..=j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

pub fn cohens_kappa(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("kappa: lengths {} and {} differ", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(contract("kappa: empty label vectors"));
    }
    let n = a.len() as f64;
    let labels: BTreeSet<usize> = a.iter().chain(b).copied().collect();
    let p_o = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n;
    let p_e: f64 = labels
        .iter()
        .map(|&c| {
            let ca = a.iter().filter(|&&x| x == c).count() as f64;
            let cb = b.iter().filter(|&&x| x == c).count() as f64;
            ca * cb / (n * n)
        })
        .sum();
    if p_e >= 1.0 {
        return if p_o >= 1.0 {
            Ok(1.0)
        } else {
            Err(Error::UndefinedMetric("kappa: chance agreement is 1".into()))
        };
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant list".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(contract(format!("spearman: lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(contract("spearman: need at least two observations"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Aligned outputs of two systems and the gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcomes<P> {
    pub a: Vec<P>,
    pub b: Vec<P>,
    pub truth: Vec<usize>,
}

impl<P> PairedOutcomes<P> {
    pub fn new(a: Vec<P>, b: Vec<P>, truth: Vec<usize>) -> Result<Self> {
        if a.len() != b.len() || a.len() != truth.len() {
            return Err(contract(format!(
                "paired outcomes lengths differ: {}, {}, {}",
                a.len(),
                b.len(),
                truth.len()
            )));
        }
        if a.is_empty() {
            return Err(contract("paired outcomes are empty"));
        }
        Ok(Self { a, b, truth })
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub metric: String,
    pub t: f64,
    pub p: f64,
    #[serde(rename = "R")]
    pub shuffles: usize,
    pub adjusted_alpha: f64,
    pub significant: bool,
    pub undefined_shuffles: usize,
}

pub const DEFAULT_SHUFFLES: usize = 9999;
pub const BASE_ALPHA: f64 = 0.05;

/// Two-tailed paired approximate randomization test. Each shuffle swaps
/// the systems' outputs per instance with probability 1/2; shuffle `i`
/// draws from `Rng::new(seed).split(i)`.
pub fn approx_randomization_test<P, F>(
    outcomes: &PairedOutcomes<P>,
    metric_name: &str,
    metric: F,
    shuffles: usize,
    seed: u64,
    n_hypotheses: usize,
) -> Result<SignificanceResult>
where
    P: Clone + Send + Sync,
    F: Fn(&[P], &[usize]) -> Result<f64> + Sync,
{
    if shuffles == 0 {
        return Err(contract("randomization test needs at least one shuffle"));
    }
    if n_hypotheses == 0 {
        return Err(contract("n_hypotheses must be positive"));
    }
    let t = (metric(&outcomes.a, &outcomes.truth)? - metric(&outcomes.b, &outcomes.truth)?).abs();
    let root = Rng::new(seed);
    let undefined = AtomicUsize::new(0);
    let hits: Result<usize> = (0..shuffles)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.split(i as u64);
            let mut sa = outcomes.a.clone();
            let mut sb = outcomes.b.clone();
            for (x, y) in sa.iter_mut().zip(sb.iter_mut()) {
                if rng.bernoulli(0.5) {
                    std::mem::swap(x, y);
                }
            }
            let stat = metric(&sa, &outcomes.truth)
                .and_then(|ma| Ok((ma - metric(&sb, &outcomes.truth)?).abs()));
            match stat {
                Ok(s) => Ok((s >= t) as usize),
                Err(Error::UndefinedMetric(_)) => {
                    undefined.fetch_add(1, Ordering::Relaxed);
                    Ok(1)
                }
                Err(e) => Err(e),
            }
        })
        .sum();
    let hits = hits?;
    let undefined_shuffles = undefined.into_inner();
    if undefined_shuffles > 0 {
        warn!("{undefined_shuffles} of {shuffles} shuffles had an undefined {metric_name}; counted as extreme");
    }
    let p = (hits + 1) as f64 / (shuffles + 1) as f64;
    let adjusted_alpha = BASE_ALPHA / n_hypotheses as f64;
    Ok(SignificanceResult {
        metric: metric_name.to_string(),
        t,
        p,
        shuffles,
        adjusted_alpha,
        significant: p < adjusted_alpha,
        undefined_shuffles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn acc(pred: &[usize], truth: &[usize]) -> Result<f64> {
        Ok(pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0; 3]);
        assert!(average_ranks(&[]).is_empty());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohens_kappa(&[1, 1, 0, 0], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_abs_diff_eq!(cohens_kappa(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cohens_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(cohens_kappa(&[3, 3], &[3, 3]).unwrap(), 1.0);
        assert!(matches!(cohens_kappa(&[1], &[1, 2]), Err(Error::Contract(_))));
    }

    #[test]
    fn spearman_examples() {
        assert_abs_diff_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap(), -1.0, epsilon = 1e-12);
        // rank vectors (1, 2.5, 2.5, 4) and (1, 2, 3, 4): 4.5 / sqrt(4.5 * 5)
        let rho = spearman_rho(&[1.0, 2.0, 2.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(rho, 4.5 / 22.5f64.sqrt(), epsilon = 1e-10);
        assert_abs_diff_eq!(rho, 0.9487, epsilon = 1e-4);
        assert!(matches!(spearman_rho(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn identical_systems_give_p_one() {
        let o = PairedOutcomes::new(vec![0, 1, 1, 0], vec![0, 1, 1, 0], vec![0, 1, 0, 0]).unwrap();
        let r = approx_randomization_test(&o, "accuracy", acc, 99, 1, 36).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert!(!r.significant);
        assert_abs_diff_eq!(r.adjusted_alpha, 0.05 / 36.0, epsilon = 1e-15);
    }

    #[test]
    fn p_value_floor() {
        let n = 200;
        let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let o = PairedOutcomes::new(truth.clone(), truth.iter().map(|t| 1 - t).collect(), truth).unwrap();
        let r = approx_randomization_test(&o, "accuracy", acc, 999, 2, 1).unwrap();
        assert_eq!(r.p, 1.0 / 1000.0);
        assert!(r.significant);
    }

    #[test]
    fn undefined_shuffles_counted_conservatively() {
        let o = PairedOutcomes::new(vec![0, 1], vec![1, 0], vec![0, 1]).unwrap();
        let never = |_: &[usize], _: &[usize]| -> Result<f64> { Ok(0.0) };
        // undefined only for the swapped state [1, 1]
        let flaky = |p: &[usize], _: &[usize]| -> Result<f64> {
            if p == [1, 1] {
                Err(Error::UndefinedMetric("x".into()))
            } else {
                Ok(0.0)
            }
        };
        assert_eq!(approx_randomization_test(&o, "m", never, 50, 3, 1).unwrap().undefined_shuffles, 0);
        let r = approx_randomization_test(&o, "m", flaky, 200, 3, 1).unwrap();
        assert!(r.undefined_shuffles > 0);
        assert_eq!(r.p, 1.0);
        let observed_undefined = PairedOutcomes::new(vec![1, 1], vec![0, 0], vec![0, 1]).unwrap();
        assert!(approx_randomization_test(&observed_undefined, "m", flaky, 50, 3, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let truth: Vec<usize> = (0..50).map(|i| (i * 7 % 3 == 0) as usize).collect();
        let a: Vec<usize> = (0..50).map(|i| (i % 4 == 0) as usize).collect();
        let o = PairedOutcomes::new(a, truth.clone(), truth).unwrap();
        let r1 = approx_randomization_test(&o, "accuracy", acc, 500, 11, 1).unwrap();
        let r2 = approx_randomization_test(&o, "accuracy", acc, 500, 11, 1).unwrap();
        assert_eq!(r1, r2);
        assert!(r1.p >= 1.0 / 501.0 && r1.p <= 1.0);
    }

    proptest! {
        #[test]
        fn kappa_symmetric(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40)) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            match (cohens_kappa(&a, &b), cohens_kappa(&b, &a)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn spearman_monotone_invariant(xs in prop::collection::vec(-50i32..50, 2..30), ys in prop::collection::vec(-50i32..50, 2..30)) {
            let n = xs.len().min(ys.len());
            let x: Vec<f64> = xs[..n].iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = ys[..n].iter().map(|&v| v as f64).collect();
            let tx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() + 3.0).collect();
            if let Ok(r) = spearman_rho(&x, &y) {
                let r2 = spearman_rho(&tx, &y).unwrap();
                prop_assert!((r - r2).abs() < 1e-12);
            }
        }
    }
}
