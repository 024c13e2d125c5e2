//! Minimal dense-tensor kernels with reverse-mode gradients.
//!
//! This is the substrate for every model operation: 2-D [`Tensor`]s, a
//! [`Tape`] that records primitives and replays them backward, and a
//! finite-difference [`grad_check`] used to verify every backward rule.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Precision, Tape, ValId};
pub use tensor::{matmul, rms_norm, row_log_softmax, row_softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    // Logit gaps are kept below ~30 so exp(-gap) stays representable next to
    // 1.0 in f64; beyond that the strict (0,1) bound underflows away.
    fn small_matrix() -> impl Strategy<Value = Tensor> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-14.0f64..14.0, r * c)
                .prop_map(move |data| Tensor::new(r, c, data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(x in small_matrix()) {
            let y = row_softmax(&x);
            for i in 0..y.rows() {
                let sum: f64 = y.row_slice(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for &v in y.row_slice(i) {
                    prop_assert!(v > 0.0 && v < 1.0 || y.cols() == 1);
                }
            }
        }

        #[test]
        fn matmul_is_bilinear(alpha in -4.0f64..4.0, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::randn(&mut rng, 3, 4, 1.0);
            let b = Tensor::randn(&mut rng, 4, 2, 1.0);
            let mut scaled_a = a.clone();
            scaled_a.scale_in_place(alpha);
            let left = matmul(&scaled_a, &b).unwrap();
            let mut right = matmul(&a, &b).unwrap();
            right.scale_in_place(alpha);
            for (l, r) in left.data().iter().zip(right.data().iter()) {
                prop_assert!((l - r).abs() < 1e-9 * (1.0 + r.abs()));
            }
        }
    }
}
