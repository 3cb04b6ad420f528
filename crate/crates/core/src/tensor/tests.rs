use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = entries
        .iter()
        .map(|(n, shape, d)| s.insert(n, shape.clone(), d.clone()).unwrap())
        .collect();
    (s, ids)
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn matmul_of_ones() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.input(2, 3, vec![1.0; 6]).unwrap();
    let b = g.input(3, 1, vec![1.0; 3]).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), (2, 1));
    assert_eq!(g.value(c), &[3.0, 3.0]);
}

#[test]
fn log_softmax_of_equal_logits() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.input(1, 2, vec![0.0, 0.0]).unwrap();
    let l = g.log_softmax(a);
    for v in g.value(l) {
        assert!((v - 0.5f64.ln()).abs() < 1e-15);
    }
}

#[test]
fn relu_clamps_negatives() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.input(1, 2, vec![-1.0, 2.0]).unwrap();
    let r = g.relu(a);
    assert_eq!(g.value(r), &[0.0, 2.0]);
}

#[test]
fn shape_mismatch_names_the_node() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let a = g.input(2, 3, vec![0.0; 6]).unwrap();
    let b = g.input(2, 3, vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::ShapeMismatch { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
        }
        other => panic!("expected shape mismatch, got {:?}", other.map(|v| v.index())),
    }
}

#[test]
fn sum_of_squares_gradient() {
    let (s, ids) = store_with(&[("w", vec![2], vec![1.0, -2.0])]);
    let mut g = Graph::new(&s);
    let w = g.param(ids[0]);
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let bw = g.backward(loss).unwrap();
    assert_eq!(bw.params.get(ids[0]).unwrap(), &[2.0, -4.0]);
}

#[test]
fn sigmoid_gradient_at_zero() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.input_with_grad(1, 1, vec![0.0]).unwrap();
    let y = g.sigmoid(x);
    let bw = g.backward(y).unwrap();
    assert_eq!(bw.grad(x).unwrap(), &[0.25]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let x = g.input_with_grad(1, 2, vec![0.0, 1.0]).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss { rows: 1, cols: 2 })));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let (s, ids) = store_with(&[("a", vec![2], vec![1.0, 2.0]), ("b", vec![2], vec![3.0, 4.0])]);
    let mask = TrainableMask(vec![true, false]);
    let mut g = Graph::with_mask(&s, &mask);
    let a = g.param(ids[0]);
    let b = g.param(ids[1]);
    let p = g.mul(a, b).unwrap();
    let loss = g.sum(p);
    let bw = g.backward(loss).unwrap();
    assert_eq!(bw.params.get(ids[0]).unwrap(), &[3.0, 4.0]);
    assert!(bw.params.get(ids[1]).is_none());
}

#[test]
fn linear_function_gradcheck_is_exact() {
    let (mut s, ids) = store_with(&[("w", vec![1, 3], vec![0.3, -0.2, 0.9])]);
    let err = gradcheck(&mut s, &ids.clone(), 1e-5, |g| {
        let w = g.param(ids[0]);
        let x = g.input(3, 1, vec![1.5, -2.0, 0.25])?;
        g.matmul(w, x)
    })
    .unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn every_op_kind_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut s, ids) = store_with(&[
        ("x", vec![3, 4], random(&mut rng, 12)),
        ("w", vec![5, 4], random(&mut rng, 20)),
        ("b", vec![5], random(&mut rng, 5)),
        ("m", vec![5, 2], random(&mut rng, 10)),
        ("map", vec![5, 4 * 2], random(&mut rng, 40)),
        ("k", vec![2, 18], random(&mut rng, 36)),
        ("alpha", vec![1, 6], random(&mut rng, 6)),
        ("kern", vec![3, 5], random(&mut rng, 15)),
        ("emb", vec![4, 3], random(&mut rng, 12)),
    ]);
    let all = ids.clone();
    let err = gradcheck(&mut s, &all, 1e-5, |g| {
        let x = g.param(ids[0]);
        let w = g.param(ids[1]);
        let b = g.param(ids[2]);
        let m = g.param(ids[3]);
        // affine, tanh, sigmoid, matmul, log_softmax, gather
        let h = g.affine(x, w, Some(b))?;
        let t = g.tanh(h);
        let sg = g.sigmoid(h);
        let prod = g.mul(t, sg)?;
        let mm = g.matmul(prod, m)?;
        let ls = g.log_softmax(mm);
        let picked = g.gather(ls, &[0, 1, 1])?;
        let mut total = g.sum(picked);
        // softmax, concat, slice, add_row, sub, scale
        let sm = g.softmax(h);
        let cat = g.concat_cols(&[sm, t])?;
        let sl = g.slice_cols(cat, 3, 4)?;
        let rows = g.concat_rows(&[sl, sl])?;
        let r2 = g.slice_rows(rows, 1, 3)?;
        let bias4 = g.slice_cols(b, 0, 4)?;
        let ar = g.add_row(r2, bias4)?;
        let d = g.sub(ar, sl)?;
        let sc = g.scale(d, 0.7);
        let sq = g.mul(sc, sc)?;
        let s2 = g.mean(sq);
        total = g.add(total, s2)?;
        // conv block: im2col + affine + relu + max-pool on a 5x4x2 map
        let map = g.param(ids[4]);
        let cols = g.im2col3x3(map, 5, 4, 2)?;
        let k = g.param(ids[5]);
        let conv = g.affine(cols, k, None)?;
        let act = g.tanh(conv);
        let pooled = g.max_pool2x2(act, 5, 4, 2)?;
        let flat = g.reshape(pooled, 3, 4)?;
        let s3 = g.sum(flat);
        total = g.add(total, s3)?;
        // location conv + embedding + dropout
        let alpha = g.param(ids[6]);
        let sa = g.softmax(alpha);
        let kern = g.param(ids[7]);
        let loc = g.conv1d(sa, kern)?;
        let lt = g.tanh(loc);
        let s4 = g.sum(lt);
        let emb = g.param(ids[8]);
        let e = g.embedding(emb, &[2, 0, 2])?;
        let dr = g.dropout(e, vec![2.0, 0.0, 2.0, 0.0, 2.0, 2.0, 2.0, 2.0, 0.0])?;
        let et = g.tanh(dr);
        let s5 = g.sum(et);
        let s45 = g.add(s4, s5)?;
        g.add(total, s45)
    })
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn relu_gradient_away_from_kink() {
    let (mut s, ids) = store_with(&[("x", vec![1, 4], vec![-0.7, 0.3, 1.2, -0.1])]);
    let err = gradcheck(&mut s, &ids.clone(), 1e-5, |g| {
        let x = g.param(ids[0]);
        let r = g.relu(x);
        let q = g.mul(r, r)?;
        Ok(g.sum(q))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s, ids) = store_with(&[("w", vec![6, 5], random(&mut rng, 30))]);
    let run = || {
        let mut g = Graph::inference(&s);
        let w = g.param(ids[0]);
        let t = g.tanh(w);
        let l = g.log_softmax(t);
        g.value(l).to_vec()
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let s = ParamStore::new();
            let mut g = Graph::inference(&s);
            let a = g.input(3, 4, vals).unwrap();
            let l = g.log_softmax(a);
            for row in g.value(l).chunks(4) {
                let total: f64 = row.iter().map(|v| v.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }
}
