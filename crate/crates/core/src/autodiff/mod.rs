//! Reverse-mode automatic differentiation over 2-D `f64` tensors and the Adam
//! optimizer.

mod adam;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState, ParamSpec};
pub use tape::{logistic, Gradients, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn s(x: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), x)
    }

    #[test]
    fn product_rule() {
        let mut t = Tape::new();
        let a = t.param(s(3.0));
        let b = t.param(s(4.0));
        let y = t.mul(a, b);
        let g = t.backward(y).unwrap();
        assert_eq!(g.scalar(a), 4.0);
        assert_eq!(g.scalar(b), 3.0);
    }

    #[test]
    fn logistic_slope_at_zero() {
        let mut t = Tape::new();
        let a = t.param(s(0.0));
        let y = t.logistic(a);
        assert_eq!(t.backward(y).unwrap().scalar(a), 0.25);
    }

    #[test]
    fn stable_logistic_extremes() {
        assert_eq!(logistic(-800.0), 0.0);
        assert_eq!(logistic(800.0), 1.0);
        assert!(logistic(-700.0) > 0.0);
    }

    #[test]
    fn kink_conventions() {
        let mut t = Tape::new();
        let a = t.param(s(0.0));
        let r = t.relu(a);
        assert_eq!(t.backward(r).unwrap().scalar(a), 0.0);
        let m = t.max_const(a, 0.0);
        assert_eq!(t.backward(m).unwrap().scalar(a), 0.0);
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut t = Tape::new();
        let a = t.param(s(-1.0));
        let y = t.log(a);
        let err = t.backward(y).unwrap_err();
        match err {
            crate::Error::NonFinite { kind, index, value } => {
                assert_eq!(kind, "log");
                assert_eq!(index, 1);
                assert!(value.is_nan());
            }
            e => panic!("unexpected error {e}"),
        }
        let mut t = Tape::new();
        let a = t.param(s(1000.0));
        let y = t.exp(a);
        assert!(matches!(t.backward(y), Err(crate::Error::NonFinite { kind: "exp", .. })));
    }

    #[test]
    fn gradients_of_unused_params_are_absent() {
        let mut t = Tape::new();
        let a = t.param(s(2.0));
        let b = t.param(s(5.0));
        let y = t.scale(a, 3.0);
        let g = t.backward(y).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(&t, b), s(0.0));
        assert_eq!(g.scalar(a), 3.0);
    }

    #[test]
    fn backward_is_repeatable() {
        let mut t = Tape::new();
        let w = t.param(array![[0.3, -0.2], [0.1, 0.5]]);
        let x = t.constant(array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]]);
        let h = t.matmul_t(x, w);
        let h = t.logistic(h);
        let l = t.mean(h);
        let g1 = t.backward(l).unwrap().wrt(&t, w);
        let g2 = t.backward(l).unwrap().wrt(&t, w);
        assert_eq!(g1, g2);
    }

    #[test]
    fn segment_ops_match_hand_values() {
        let mut t = Tape::new();
        let x = t.param(array![[1.0], [2.0], [3.0], [4.0], [5.0]]);
        let segs: Arc<[usize]> = Arc::from(vec![2, 3]);
        let c = t.segment_cumsum(x, segs.clone());
        assert_eq!(t.value(c).column(0).to_vec(), vec![1.0, 3.0, 3.0, 7.0, 12.0]);
        let init = t.param(s(0.5));
        let d = t.segment_diff(c, init, segs);
        assert_eq!(t.value(d).column(0).to_vec(), vec![0.5, 2.0, 2.5, 4.0, 5.0]);
        let picked = t.gather(d, Arc::from(vec![1, 4]));
        let l = t.mean(picked);
        let g = t.backward(l).unwrap();
        // l = (x1 + x4) / 2 after cumsum/diff cancel, independent of init
        assert_eq!(g.wrt(&t, x).column(0).to_vec(), vec![0.0, 0.5, 0.0, 0.0, 0.5]);
        assert_eq!(g.scalar(init), 0.0);
    }

    /// Builds one of several random compositions of the primitives.
    fn compose(t: &mut Tape, which: u8, a: Var, b: Var) -> Var {
        match which % 4 {
            0 => {
                let p = t.mul(a, b);
                let e = t.logistic(p);
                t.mean(e)
            }
            1 => {
                let sa = t.exp(a);
                let q = t.add(sa, b);
                let r = t.relu(q);
                t.mean(r)
            }
            2 => {
                let sq = t.mul(a, a);
                let o = t.scale(sq, 0.5);
                let one = t.scalar_constant(1.0);
                let o = t.add(o, one);
                let l = t.log(o);
                t.mean(l)
            }
            _ => {
                let n = t.neg(b);
                let m = t.max_const(n, -0.2);
                let one = t.scalar_constant(2.0);
                let o = t.add(m, one);
                let r = t.recip(o);
                let w = t.mul(r, a);
                t.mean(w)
            }
        }
    }

    proptest! {
        #[test]
        fn gradient_is_linear(
            av in proptest::collection::vec(-1.5f64..1.5, 6),
            bv in proptest::collection::vec(-1.5f64..1.5, 6),
            f in 0u8..4, g in 0u8..4,
            alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
        ) {
            let am = Array2::from_shape_vec((3, 2), av).unwrap();
            let bm = Array2::from_shape_vec((3, 2), bv).unwrap();
            let grads = |combine: Option<(f64, f64)>, which: u8| {
                let mut t = Tape::new();
                let a = t.param(am.clone());
                let b = t.param(bm.clone());
                let out = match combine {
                    None => compose(&mut t, which, a, b),
                    Some((x, y)) => {
                        let u = compose(&mut t, f, a, b);
                        let v = compose(&mut t, g, a, b);
                        let u = t.scale(u, x);
                        let v = t.scale(v, y);
                        t.add(u, v)
                    }
                };
                let gr = t.backward(out).unwrap();
                (gr.wrt(&t, a), gr.wrt(&t, b))
            };
            let (fa, fb) = grads(None, f);
            let (ga, gb) = grads(None, g);
            let (ca, cb) = grads(Some((alpha, beta)), 0);
            for (c, (x, y)) in ca.iter().zip(fa.iter().zip(ga.iter())) {
                prop_assert!((c - (alpha * x + beta * y)).abs() < 1e-12);
            }
            for (c, (x, y)) in cb.iter().zip(fb.iter().zip(gb.iter())) {
                prop_assert!((c - (alpha * x + beta * y)).abs() < 1e-12);
            }
        }
    }
}
