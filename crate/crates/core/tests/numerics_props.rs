use protognn::numerics::{softmax_rows, AdamState, Matrix, ParamStore, Tape};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

fn shaped() -> impl Strategy<Value = (Matrix, Matrix)> {
    (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(r, k, c)| (matrix(r, k), matrix(k, c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[cfg_attr(not(acceptance), test)]
    fn grads_have_value_shapes((a, b) in shaped()) {
        let mut store = ParamStore::new();
        let pa = store.add("a", a.clone());
        let pb = store.add("b", b.clone());
        let mut tape = Tape::new();
        let va = tape.param(&store, pa);
        let vb = tape.param(&store, pb);
        let ab = tape.matmul(va, vb).unwrap();
        let s = tape.sigmoid(ab);
        let sq = tape.square(va);
        let l = tape.sum(s);
        let r = tape.sum(sq);
        let root = tape.add(l, r).unwrap();
        tape.backward(root, &mut store).unwrap();
        prop_assert_eq!(store.grad(pa).shape(), a.shape());
        prop_assert_eq!(store.grad(pb).shape(), b.shape());
    }

    /// A variable used along several paths receives each contribution once.
    #[cfg_attr(not(acceptance), test)]
    fn shared_subexpressions_accumulate_once(a in matrix(3, 2)) {
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone());
        let sq = tape.square(x);
        let lin = tape.scale(x, 3.0);
        let both = tape.add(sq, lin).unwrap();
        let twice = tape.add(both, x).unwrap();
        let root = tape.sum(twice);
        tape.backward(root, &mut ParamStore::new()).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, ai) in g.data().iter().zip(a.data()) {
            prop_assert!((gi - (2.0 * ai + 4.0)).abs() < 1e-12);
        }
    }

    #[cfg_attr(not(acceptance), test)]
    fn softmax_rows_are_shift_invariant_distributions(a in matrix(4, 5), shift in -50.0f64..50.0, t in 0.1f64..5.0) {
        let p = softmax_rows(&a, t, None);
        let q = softmax_rows(&a.map(|x| x + shift), t, None);
        for i in 0..4 {
            prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-9);
        let mut tape = Tape::new();
        let v = tape.constant(a);
        let s = tape.softmax_rows(v, t).unwrap();
        prop_assert!(tape.value(s).max_abs_diff(&p) < 1e-12);
    }

    #[cfg_attr(not(acceptance), test)]
    fn adam_moments_match_params_and_steps_increase(
        (a, b) in shaped(),
        steps in 1usize..6,
        lr in 1e-4f64..1e-1,
    ) {
        let mut store = ParamStore::new();
        let pa = store.add("a", a.clone());
        store.add("b", b.clone());
        let mut adam = AdamState::new(lr);
        let mut last = adam.step;
        for _ in 0..steps {
            let mut tape = Tape::new();
            let va = tape.param(&store, pa);
            let sq = tape.square(va);
            let root = tape.sum(sq);
            tape.backward(root, &mut store).unwrap();
            adam.step(&mut store);
            prop_assert!(adam.step > last);
            last = adam.step;
        }
        for (i, (_, p)) in store.iter().enumerate() {
            prop_assert_eq!(adam.first_moment(i).unwrap().shape(), p.value.shape());
            prop_assert_eq!(adam.second_moment(i).unwrap().shape(), p.value.shape());
        }
    }

    #[cfg_attr(not(acceptance), test)]
    fn adam_with_zero_gradients_is_a_noop((a, b) in shaped(), lr in 1e-4f64..1.0) {
        let mut store = ParamStore::new();
        store.add("a", a.clone());
        store.add("b", b.clone());
        let before = store.clone();
        let mut adam = AdamState::new(lr);
        for _ in 0..3 {
            adam.step(&mut store);
        }
        for ((_, p), (_, q)) in store.iter().zip(before.iter()) {
            prop_assert_eq!(&p.value, &q.value);
        }
    }
}

/// Every check in this file, for the acceptance runner.
#[allow(dead_code)]
pub fn suite() -> Vec<(&'static str, fn())> {
    vec![
        ("grads_have_value_shapes", grads_have_value_shapes),
        ("shared_subexpressions_accumulate_once", shared_subexpressions_accumulate_once),
        ("softmax_rows_are_shift_invariant_distributions", softmax_rows_are_shift_invariant_distributions),
        ("adam_moments_match_params_and_steps_increase", adam_moments_match_params_and_steps_increase),
        ("adam_with_zero_gradients_is_a_noop", adam_with_zero_gradients_is_a_noop),
    ]
}
