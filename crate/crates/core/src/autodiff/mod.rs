//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records eagerly evaluated operations; [`Tape::backward`]
//! writes gradients for every parameter in a [`ParamStore`]. The operation
//! set is what the forecasting models need: affine maps, Swish, graph
//! aggregation, stacking and linear combinations (for the unrolled ODE),
//! and row-wise (log-)softmax.

mod params;
mod tape;

pub use params::{Checkpoint, Param, ParamStore, StoredArray, CHECKPOINT_VERSION};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, EdgeList, Tape, Var};

use crate::error::Result;

/// Denominator floor for relative gradient errors. Central differences
/// with h = 1e-5 carry round-off near 1e-10 for O(1) losses, so gradients
/// smaller than this are effectively compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

/// Compares the gradients stored in `store` against central differences
/// of `loss` with step `h`. `entries` selects `(name, flat index)` pairs;
/// `None` checks every scalar. Parameter values are restored afterwards.
pub fn finite_difference_check(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
    h: f64,
    entries: Option<&[(String, usize)]>,
) -> Result<GradCheck> {
    let all: Vec<(String, usize)>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = store
                .iter()
                .flat_map(|(name, p)| (0..p.value.len()).map(move |i| (name.to_string(), i)))
                .collect();
            &all
        }
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (name, i) in entries {
        let analytic = store.grad(name).expect("known parameter").data()[*i];
        let original = store.get(name).expect("known parameter").data()[*i];
        store.get_mut(name).unwrap().data_mut()[*i] = original + h;
        let plus = loss(store)?;
        store.get_mut(name).unwrap().data_mut()[*i] = original - h;
        let minus = loss(store)?;
        store.get_mut(name).unwrap().data_mut()[*i] = original;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some((name.clone(), *i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::error::Error;
    use crate::linalg::DenseMatrix;

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn store_with(entries: &[(&str, DenseMatrix)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in entries {
            s.insert(*k, v.clone());
        }
        s
    }

    fn grad_check(store: &mut ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store).unwrap();
        tape.backward(loss, store).unwrap();
        let report = finite_difference_check(
            store,
            |s| {
                let mut t = Tape::new();
                let l = f(&mut t, s)?;
                Ok(t.value(l).data()[0])
            },
            1e-5,
            None,
        )
        .unwrap();
        report.max_rel_err
    }

    #[test]
    fn affine_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(4, 3, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.constant(DenseMatrix::identity(3));
        let b = tape.constant(DenseMatrix::zeros(1, 3));
        let y = tape.affine(xv, w, b).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn affine_bias_gradient_counts_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = store_with(&[("b", randn(1, 3, &mut rng))]);
        let mut tape = Tape::new();
        let x = tape.constant(randn(5, 2, &mut rng));
        let w = tape.constant(randn(2, 3, &mut rng));
        let b = tape.param(&store, "b").unwrap();
        let y = tape.affine(x, w, b).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("b").unwrap().data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn affine_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = store_with(&[
            ("x", randn(4, 3, &mut rng)),
            ("w", randn(3, 2, &mut rng)),
            ("b", randn(1, 2, &mut rng)),
        ]);
        let err = grad_check(&mut store, |t, s| {
            let x = t.param(s, "x")?;
            let w = t.param(s, "w")?;
            let b = t.param(s, "b")?;
            let y = t.affine(x, w, b)?;
            let y = t.swish(y);
            Ok(t.sum(y))
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn affine_shape_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::zeros(2, 3));
        let w = tape.constant(DenseMatrix::zeros(2, 2));
        let b = tape.constant(DenseMatrix::zeros(1, 2));
        assert!(matches!(tape.affine(x, w, b), Err(Error::Shape(_))));
    }

    #[test]
    fn swish_values() {
        let mut store = store_with(&[("x", DenseMatrix::row_vector(vec![0.0, 20.0]))]);
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.swish(x);
        assert_eq!(tape.value(y).data()[0], 0.0);
        assert!((tape.value(y).data()[1] - 20.0).abs() < 1e-7);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data()[0], 0.5);
    }

    #[test]
    fn swish_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = store_with(&[("x", randn(3, 4, &mut rng))]);
        let err = grad_check(&mut store, |t, s| {
            let x = t.param(s, "x")?;
            let y = t.swish(x);
            let y = t.swish(y);
            Ok(t.sum(y))
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::row_vector(vec![0.7; 5]));
        let y = tape.softmax_rows(x);
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

        let x = tape.constant(DenseMatrix::row_vector(vec![1000.0, 0.0]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert!(tape.value(y).data()[1] < 1e-300);
        let ly = tape.log_softmax_rows(x);
        assert_eq!(tape.value(ly).data(), &[0.0, -1000.0]);
    }

    #[test]
    fn softmax_shift_invariance_for_exact_shifts() {
        let logits = vec![0.5, -1.25, 3.0, 0.0];
        let mut a = logits.clone();
        softmax_in_place(&mut a);
        for c in [1.0, -4.0, 64.0] {
            let mut b: Vec<f64> = logits.iter().map(|x| x + c).collect();
            softmax_in_place(&mut b);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn log_softmax_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = store_with(&[("x", randn(3, 5, &mut rng))]);
        let err = grad_check(&mut store, |t, s| {
            let x = t.param(s, "x")?;
            let l = t.log_softmax_rows(x);
            let p = t.softmax_rows(x);
            let picked = t.gather(l, vec![(0, 1), (2, 4), (2, 0)])?;
            let a = t.sum(picked);
            let sq = t.gather(p, vec![(1, 3)])?;
            let sq = t.swish(sq);
            let b = t.sum(sq);
            let total = t.lin_comb(&[(a, -0.5), (b, 2.0)])?;
            Ok(total)
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = store_with(&[
            ("a", randn(3, 2, &mut rng)),
            ("b", randn(3, 2, &mut rng)),
            ("w", randn(3, 1, &mut rng)),
        ]);
        let edges: EdgeList = Arc::from(vec![(0, 1, 0.5), (2, 1, 1.5), (1, 0, 2.0)]);
        let err = grad_check(&mut store, |t, s| {
            let a = t.param(s, "a")?;
            let b = t.param(s, "b")?;
            let w = t.param(s, "w")?;
            let ab = t.concat_cols(a, b)?;
            let tiled = t.tile(ab, 2);
            let agg = t.aggregate(tiled, edges.clone(), 3)?;
            let stacked = t.stack_lin_comb(vec![vec![(a, 1.0)], vec![(a, 0.25), (b, -1.5)]])?;
            let st = t.concat_cols(stacked, stacked)?;
            let mixed = t.add(st, agg)?;
            let mixed = t.reshape(mixed, 12, 2)?;
            let wide = t.concat_cols(w, w)?;
            let wide = t.tile(wide, 4);
            let m = t.lin_comb(&[(mixed, 1.0), (wide, 0.3)])?;
            let m = t.swish(m);
            let s = t.sum(m);
            Ok(t.scale(s, 0.7))
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn aggregate_isolated_and_weighted() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::from_vec(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
        let edges: EdgeList = Arc::from(vec![(0, 1, 0.5), (2, 1, 1.0)]);
        let y = tape.aggregate(x, edges, 3).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 6.5, 4.0]);
    }

    #[test]
    fn backward_examples() {
        let mut store = store_with(&[
            ("p", DenseMatrix::row_vector(vec![0.3, -2.0, 5.0])),
            ("q", DenseMatrix::row_vector(vec![1.0])),
        ]);
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let loss = tape.sum(p);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(store.grad("q").unwrap().data(), &[0.0]);

        assert!(matches!(tape.backward(loss, &mut store), Err(Error::DoubleBackward)));
        store.zero_grad();
        tape.backward(loss, &mut store).unwrap();

        store.zero_grad();
        let mut tape = Tape::new();
        let _p = tape.param(&store, "p").unwrap();
        let c = tape.constant(DenseMatrix::scalar(3.0));
        let loss = tape.scale(c, 2.0);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("p").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = store_with(&[("p", DenseMatrix::row_vector(vec![1.0, 2.0]))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        assert!(matches!(tape.backward(p, &mut store), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = store_with(&[("b.w", randn(2, 3, &mut rng)), ("a", randn(1, 1, &mut rng))]);
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, vec!["a", "b.w"]);
        let text = serde_json::to_string(&store.to_checkpoint()).unwrap();
        let back = ParamStore::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, store);
        let mut bad = store.to_checkpoint();
        bad.version = 99;
        assert!(ParamStore::from_checkpoint(bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn composed_expressions_match_finite_differences(seed in any::<u64>(), n in 1usize..5, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = store_with(&[
                ("x", randn(n, d, &mut rng)),
                ("w1", randn(d, 3, &mut rng)),
                ("b1", randn(1, 3, &mut rng)),
                ("w2", randn(3, 1, &mut rng)),
                ("b2", randn(1, 1, &mut rng)),
            ]);
            let target: Vec<(usize, usize)> = (0..n).map(|i| (0, i)).collect();
            let err = grad_check(&mut store, |t, s| {
                let x = t.param(s, "x")?;
                let (w1, b1, w2, b2) = (t.param(s, "w1")?, t.param(s, "b1")?, t.param(s, "w2")?, t.param(s, "b2")?);
                let h = t.affine(x, w1, b1)?;
                let h = t.swish(h);
                let o = t.affine(h, w2, b2)?;
                let o = t.reshape(o, 1, n)?;
                let l = t.log_softmax_rows(o);
                let picked = t.gather(l, target.clone())?;
                let s = t.sum(picked);
                Ok(t.scale(s, -1.0))
            });
            prop_assert!(err < 1e-4, "relative error {}", err);
        }
    }
}
