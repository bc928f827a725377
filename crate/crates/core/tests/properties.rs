//! Property tests for the numeric kernels, encodings and block contracts.

use proptest::prelude::*;
use weightsmith::encodings::make_binary_encodings;
use weightsmith::numerics::{
    leaky_relu, leaky_relu_inverse, temp_softmax, LeakyAlpha, Matrix, Temperature,
};

fn finite_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-100.0f64..100.0, rows * cols)
        .prop_map(move |data| Matrix::new(rows, cols, data).unwrap())
}

proptest! {
    /// Every softmax output column is a probability vector.
    #[test]
    fn softmax_columns_are_stochastic(
        data in prop::collection::vec(-50.0f64..50.0, 12),
        lambda in 0.1f64..50.0,
    ) {
        let scores = Matrix::new(4, 3, data).unwrap();
        let s = temp_softmax(&scores, Temperature::new(lambda).unwrap()).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for r in 0..4 {
                let v = s.get(r, c);
                prop_assert!(v >= 0.0);
                sum += v;
            }
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    /// With a unique maximum, the max entry's probability never drops as
    /// the temperature grows.
    #[test]
    fn softmax_sharpens_monotonically(
        data in prop::collection::vec(-5.0f64..5.0, 5),
    ) {
        let mut col = data.clone();
        // force a unique max
        let (imax, _) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        col[imax] += 1.0;
        let scores = Matrix::new(5, 1, col.clone()).unwrap();
        let mut last = 0.0;
        for lambda in [1.0, 10.0, 100.0, 1000.0] {
            let s = temp_softmax(&scores, Temperature::new(lambda).unwrap()).unwrap();
            let p = s.get(imax, 0);
            prop_assert!(p + 1e-12 >= last, "p={p} last={last} lambda={lambda}");
            last = p;
        }
    }

    /// The inverse activation undoes the leaky ReLU to relative precision.
    #[test]
    fn leaky_relu_round_trip(
        data in prop::collection::vec(-1000.0f64..1000.0, 8),
    ) {
        let x = Matrix::new(2, 4, data).unwrap();
        for alpha in [0.1, 0.5, 1.0] {
            let a = LeakyAlpha::new(alpha).unwrap();
            let back = leaky_relu_inverse(&leaky_relu(&x, a), a);
            for (u, v) in x.data().iter().zip(back.data()) {
                let tol = 1e-15 * u.abs().max(1.0);
                prop_assert!((u - v).abs() <= tol);
            }
        }
    }

    /// Slope one leaves every input unchanged.
    #[test]
    fn leaky_alpha_one_is_identity(
        data in prop::collection::vec(-100.0f64..100.0, 6),
    ) {
        let x = Matrix::new(3, 2, data).unwrap();
        let a = LeakyAlpha::new(1.0).unwrap();
        prop_assert_eq!(leaky_relu(&x, a), x);
    }

    /// Any generated encoding family separates self from cross products by
    /// at least two.
    #[test]
    fn encodings_keep_margin_two(n in 1usize..70) {
        let enc = make_binary_encodings(n).unwrap();
        for i in 0..n {
            let selfdot = enc[i].dot(&enc[i]);
            for j in 0..n {
                if i != j {
                    prop_assert!(selfdot >= enc[i].dot(&enc[j]) + 2.0);
                }
            }
        }
    }

    /// Attention and layer forwards preserve the input shape and are
    /// reproducible bit for bit.
    #[test]
    fn forward_shape_and_determinism(x in finite_matrix(5, 4)) {
        use weightsmith::transformer::{layer_forward, AttentionHead, TransformerLayer};
        let head = AttentionHead::new(
            Matrix::identity(5),
            Matrix::identity(5),
            Matrix::identity(5),
        )
        .unwrap();
        let layer = TransformerLayer::new(
            vec![head],
            Matrix::identity(5),
            Matrix::zeros(5, 1),
            Matrix::identity(5).scale(0.25),
            Matrix::zeros(5, 1),
            Temperature::new(2.0).unwrap(),
        )
        .unwrap();
        let scaled = x.scale(1e-2);
        let a = layer_forward(&layer, &scaled).unwrap();
        let b = layer_forward(&layer, &scaled).unwrap();
        prop_assert_eq!(a.rows(), 5);
        prop_assert_eq!(a.cols(), 4);
        prop_assert_eq!(a, b);
    }
}
