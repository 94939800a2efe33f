//! Normalized log-MAE loss with pad-border forgiveness.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Guards both MAEs against zero.
    pub tau: f64,
    pub pad_width: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 1e-12, pad_width: 32 }
    }
}

/// On masked pixels replaces the prediction by `max(pred, target)`, so
/// under-prediction at the border (fire entering from outside) is free.
pub fn pad_mask_adjust<T: Scalar>(y_p: &Array2<T>, y_t: &Array2<T>, pad_mask: &Array2<bool>) -> Array2<T> {
    Zip::from(y_p).and(y_t).and(pad_mask).map_collect(|&p, &t, &m| if m && t > p { t } else { p })
}

fn mae<T: Scalar>(a: &Array2<T>, b: &Array2<T>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// `log10((MAE(y_p, y_t) + τ) / (MAE(y_i, y_t) + τ))`; zero for the trivial prediction `y_p = y_i`.
pub fn emulator_loss<T: Scalar>(y_i: &Array2<T>, y_t: &Array2<T>, y_p: &Array2<T>, tau: f64) -> f64 {
    ((mae(y_p, y_t) + tau) / (mae(y_i, y_t) + tau)).log10()
}

/// Loss and its gradient with respect to `y_p`.
pub fn emulator_loss_grad<T: Scalar>(y_i: &Array2<T>, y_t: &Array2<T>, y_p: &Array2<T>, tau: f64) -> (f64, Array2<f64>) {
    let num = mae(y_p, y_t) + tau;
    let loss = (num / (mae(y_i, y_t) + tau)).log10();
    let scale = 1.0 / (y_p.len() as f64 * num * std::f64::consts::LN_10);
    let grad = Zip::from(y_p).and(y_t).map_collect(|&p, &t| {
        let d = p.as_f64() - t.as_f64();
        if d > 0.0 {
            scale
        } else if d < 0.0 {
            -scale
        } else {
            0.0
        }
    });
    (loss, grad)
}

/// Loss after [`pad_mask_adjust`], with the gradient carried through the max.
pub fn masked_loss_and_grad<T: Scalar>(y_i: &Array2<T>, y_t: &Array2<T>, y_p: &Array2<T>, pad_mask: &Array2<bool>, tau: f64) -> (f64, Array2<f64>) {
    let adjusted = pad_mask_adjust(y_p, y_t, pad_mask);
    let (loss, mut grad) = emulator_loss_grad(y_i, y_t, &adjusted, tau);
    Zip::from(&mut grad).and(y_p).and(y_t).and(pad_mask).for_each(|g, &p, &t, &m| {
        if m && t > p {
            *g = 0.0;
        }
    });
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn arr(v: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap()
    }

    #[test]
    fn adjust_examples() {
        let mask = Array2::from_shape_vec((1, 3), vec![true, true, false]).unwrap();
        let adj = pad_mask_adjust(&arr(&[0.0, 0.5, 0.0]), &arr(&[0.5, 0.0, 0.5]), &mask);
        assert_eq!(adj, arr(&[0.5, 0.5, 0.0]));
    }

    #[test]
    fn loss_examples() {
        let y_t = arr(&[0.0, 0.0, 0.0, 0.0]);
        let y_i = arr(&[0.1, 0.1, 0.1, 0.1]);
        let y_p = arr(&[0.01, 0.01, 0.01, 0.01]);
        assert!((emulator_loss(&y_i, &y_t, &y_p, 1e-12) + 1.0).abs() < 1e-9);
        assert_eq!(emulator_loss(&y_i, &y_t, &y_i, 1e-12), 0.0);
        assert_eq!(emulator_loss(&y_t, &y_t, &y_t, 1e-12), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng_from(4);
        for _ in 0..5 {
            let r = |rng: &mut rand_chacha::ChaCha8Rng| Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>());
            let (y_i, y_t, y_p) = (r(&mut rng), r(&mut rng), r(&mut rng));
            let (_, g) = emulator_loss_grad(&y_i, &y_t, &y_p, 1e-12);
            let h = 1e-7;
            for idx in [(0, 0), (3, 5), (7, 7)] {
                let mut a = y_p.clone();
                a[idx] += h;
                let mut b = y_p.clone();
                b[idx] -= h;
                let fd = (emulator_loss(&y_i, &y_t, &a, 1e-12) - emulator_loss(&y_i, &y_t, &b, 1e-12)) / (2.0 * h);
                assert!(((fd - g[idx]) / fd).abs() <= 1e-4, "{fd} vs {}", g[idx]);
            }
        }
    }
}
