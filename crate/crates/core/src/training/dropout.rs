use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::nn::Mode;

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. A zero rate yields all ones without drawing.
pub fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<f64> {
    if rate <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

/// Returns the masked vector and the mask. Inference mode is the identity.
pub fn apply_dropout<R: Rng + ?Sized>(
    h: ArrayView1<'_, f64>,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> (Array1<f64>, Array1<f64>) {
    let mask = match mode {
        Mode::Inference => Array1::ones(h.len()),
        Mode::Train => dropout_mask((1, h.len()), rate, rng).row(0).to_owned(),
    };
    (&h * &mask, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inference_is_identity() {
        let h = Array1::linspace(-1.0, 1.0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, mask) = apply_dropout(h.view(), 0.2, &mut rng, Mode::Inference);
        assert_eq!(out, h);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn zero_rate_keeps_everything() {
        let h = Array1::linspace(-1.0, 1.0, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, mask) = apply_dropout(h.view(), 0.0, &mut rng, Mode::Train);
        assert_eq!(out, h);
        assert!(mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn dropped_fraction_concentrates() {
        let h = Array1::ones(100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, mask) = apply_dropout(h.view(), 0.2, &mut rng, Mode::Train);
        let zeroed = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 1e5;
        assert!((zeroed - 0.2).abs() <= 0.01, "{zeroed}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.25));
    }
}
