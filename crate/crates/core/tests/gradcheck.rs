mod common;

use common::graphs::{first_order_error, sample, second_order_error, Kind};
use poseforge::numerics::{backward, gradient_node, Tape, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backward_matches_differences(seed in any::<u64>()) {
        let g = sample(seed, Kind::Matrix);
        let e = first_order_error(&g);
        prop_assert!(e < 1e-4, "seed {seed} ops {:?}: rel error {e}", g.ops);
    }

    #[test]
    fn image_ops_match_differences(seed in any::<u64>()) {
        let g = sample(seed, Kind::Image);
        let e = first_order_error(&g);
        prop_assert!(e < 1e-4, "seed {seed} ops {:?}: rel error {e}", g.ops);
    }

    #[test]
    fn double_backward_matches_differences(seed in any::<u64>()) {
        let g = sample(seed, Kind::SecondOrder);
        let e = second_order_error(&g);
        prop_assert!(e < 1e-3, "seed {seed} ops {:?}: rel error {e}", g.ops);
    }

    /// f = ½ xᵀAx with symmetric A: Hessian-vector products equal A·v exactly.
    #[test]
    fn quadratic_hessian(
        a in prop::collection::vec(-2.0f64..2.0, 9),
        x in prop::collection::vec(-1.0f64..1.0, 3),
        v in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let sym: Vec<f64> = (0..9).map(|k| 0.5 * (a[k] + a[(k % 3) * 3 + k / 3])).collect();
        let mut t = Tape::new();
        let xi = t.leaf(Tensor::matrix(1, 3, x).unwrap()).unwrap();
        let am = t.leaf(Tensor::matrix(3, 3, sym.clone()).unwrap()).unwrap();
        let xa = t.matmul(xi, am).unwrap();
        let q = t.mul(xa, xi).unwrap();
        let s = t.sum(q).unwrap();
        let f = t.scale(s, 0.5).unwrap();
        let g = gradient_node(&mut t, f, xi).unwrap();
        let gv = t.mul_const(g, Tensor::matrix(1, 3, v.clone()).unwrap()).unwrap();
        let hv_out = t.sum(gv).unwrap();
        let hv = backward(&t, hv_out, &[xi]).unwrap();
        for i in 0..3 {
            let want: f64 = (0..3).map(|j| sym[i * 3 + j] * v[j]).sum();
            prop_assert!((hv.get(xi).unwrap().data()[i] - want).abs() < 1e-12);
        }
    }

    /// d²/dx² [tanh(ax)·tanh(bx)] against the closed form.
    #[test]
    fn tanh_product_second_derivative(a in -2.0f64..2.0, b in -2.0f64..2.0, x in -1.5f64..1.5) {
        let mut t = Tape::new();
        let xi = t.leaf(Tensor::scalar(x)).unwrap();
        let ax = t.scale(xi, a).unwrap();
        let bx = t.scale(xi, b).unwrap();
        let ta = t.tanh(ax).unwrap();
        let tb = t.tanh(bx).unwrap();
        let f = t.mul(ta, tb).unwrap();
        let g = gradient_node(&mut t, f, xi).unwrap();
        let gs = t.sum(g).unwrap();
        let h = backward(&t, gs, &[xi]).unwrap().get(xi).unwrap().item();
        let (u, w) = ((a * x).tanh(), (b * x).tanh());
        let (du, dw) = (a * (1.0 - u * u), b * (1.0 - w * w));
        let (ddu, ddw) = (-2.0 * a * u * du, -2.0 * b * w * dw);
        let want = ddu * w + 2.0 * du * dw + u * ddw;
        prop_assert!((h - want).abs() < 1e-10, "{h} vs {want}");
    }
}

#[test]
fn menu_covers_the_op_set() {
    let mut seen = std::collections::BTreeSet::new();
    for seed in 0..300 {
        for kind in [Kind::Matrix, Kind::Image] {
            seen.extend(sample(seed, kind).ops);
        }
    }
    for op in [
        "matmul", "transpose", "add", "sub", "mul", "mul_const", "scale", "add_scalar", "concat", "slice", "pad", "broadcast_rows",
        "broadcast_cols", "broadcast_scalar", "sum_rows", "sum_cols", "sum", "mean", "leaky_relu", "tanh", "sigmoid", "square",
        "row_norm", "recip", "log", "abs", "clamp", "log_sigmoid", "log_softmax", "linear", "conv2d", "upsample2x", "concat_channels",
    ] {
        assert!(seen.contains(op), "op {op} never sampled");
    }
}
