//! Point-wise transforms applied to a batch of tensor values before row
//! selection. Minimization uses a monotone decreasing exponential so that
//! the largest transformed entries mark the smallest raw values; the mirror
//! image is used for maximization. Parameters are re-estimated from each
//! batch, which makes the selected rows invariant under affine rescaling of
//! the raw values.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    /// `exp(-(x - x0) / sigma)`, strictly decreasing; for minimization.
    ExpMin,
    /// `exp((x - x0) / sigma)`, strictly increasing; for maximization.
    ExpMax,
}

impl TransformKind {
    /// Applies the transform in place. `x0` is the batch mean and `sigma`
    /// the population standard deviation; a near-constant batch falls back
    /// to `sigma = 1` to stay defined.
    pub fn apply(&self, a: &mut Array2<f64>) {
        if *self == TransformKind::Identity {
            return;
        }
        let n = a.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut sigma = var.sqrt();
        if sigma < 1e-12 {
            sigma = 1.0;
        }
        match self {
            TransformKind::ExpMin => a.mapv_inplace(|v| (-(v - mean) / sigma).exp()),
            TransformKind::ExpMax => a.mapv_inplace(|v| ((v - mean) / sigma).exp()),
            TransformKind::Identity => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exp_min_reverses_order() {
        let mut a = array![[1.0, 5.0], [3.0, -2.0]];
        TransformKind::ExpMin.apply(&mut a);
        // smallest raw value now carries the largest transformed value
        let mut flat: Vec<(f64, f64)> = vec![
            (1.0, a[[0, 0]]),
            (5.0, a[[0, 1]]),
            (3.0, a[[1, 0]]),
            (-2.0, a[[1, 1]]),
        ];
        flat.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        for w in flat.windows(2) {
            assert!(w[0].1 > w[1].1);
        }
    }

    #[test]
    fn exp_max_preserves_order() {
        let mut a = array![[1.0, 5.0], [3.0, -2.0]];
        TransformKind::ExpMax.apply(&mut a);
        assert!(a[[0, 1]] > a[[1, 0]]);
        assert!(a[[1, 0]] > a[[0, 0]]);
        assert!(a[[0, 0]] > a[[1, 1]]);
    }

    #[test]
    fn constant_batch_stays_finite() {
        let mut a = Array2::from_elem((3, 3), 4.2);
        TransformKind::ExpMin.apply(&mut a);
        assert!(a.iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn argmax_of_exp_min_is_argmin_of_raw() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let raw = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-10.0..10.0));
            let mut t = raw.clone();
            TransformKind::ExpMin.apply(&mut t);
            let argmin_raw = raw
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let argmax_t = t
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmin_raw, argmax_t);
        }
    }
}
