use crate::error::{contract, Result};
use crate::rng::Rng;

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(contract(format!("masking probability {p} not in [0,1]")));
    }
    Ok(())
}

/// Zeroes each coordinate independently with probability `p`. Survivors are
/// not rescaled.
pub fn apply_masking_noise(x: &[f64], p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    mask_in_place(&mut out, p, rng)?;
    Ok(out)
}

pub fn mask_in_place(values: &mut [f64], p: f64, rng: &mut Rng) -> Result<()> {
    check_probability(p)?;
    for v in values.iter_mut() {
        if rng.uniform() < p {
            *v = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremes() {
        let x: Vec<f64> = (1..=50).map(|v| v as f64).collect();
        let mut rng = Rng::new(9);
        assert_eq!(apply_masking_noise(&x, 0.0, &mut rng).unwrap(), x);
        assert!(apply_masking_noise(&x, 1.0, &mut rng)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(apply_masking_noise(&x, 1.5, &mut rng).is_err());
    }

    #[test]
    fn five_percent_rate_concentrates() {
        let x = vec![1.0; 100_000];
        let out = apply_masking_noise(&x, 0.05, &mut Rng::new(2024)).unwrap();
        let frac = out.iter().filter(|&&v| v == 0.0).count() as f64 / x.len() as f64;
        assert!((0.045..=0.055).contains(&frac), "zeroed fraction {frac}");
        // survivors untouched
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
