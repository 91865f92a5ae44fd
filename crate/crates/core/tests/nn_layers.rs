use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revcore::nn::{FeedForward, Mat, MultiHeadAttention, ParamStore, Tape};

fn fill(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let dim = store.get(id).dim();
        store.set(id, Mat::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)));
    }
}

#[test]
fn two_head_two_key_attention_matches_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    fill(&mut store, &mut rng);
    let q = array![[0.3, -0.2, 0.5, 1.0], [0.0, 0.7, -0.4, 0.2], [1.1, 0.1, 0.0, -0.6]];
    let kv = array![[0.9, -0.5, 0.1, 0.4], [-0.3, 0.8, 0.6, -0.1]];

    let mut t = Tape::new(&store);
    let qv = t.constant(q.clone());
    let kvv = t.constant(kv.clone());
    let out = mha.forward(&mut t, qv, kvv, kvv, None).unwrap();
    let got = t.value(out).clone();

    let w = |id| store.get(id).clone();
    let (qp, kp, vp) = (q.dot(&w(mha.wq)), kv.dot(&w(mha.wk)), kv.dot(&w(mha.wv)));
    let mut cat = Mat::zeros((3, 4));
    for h in 0..2 {
        for i in 0..3 {
            let s: Vec<f64> = (0..2)
                .map(|j| (0..2).map(|c| qp[[i, 2 * h + c]] * kp[[j, 2 * h + c]]).sum::<f64>() / 2f64.sqrt())
                .collect();
            let z = s[0].exp() + s[1].exp();
            for c in 0..2 {
                cat[[i, 2 * h + c]] = (s[0].exp() * vp[[0, 2 * h + c]] + s[1].exp() * vp[[1, 2 * h + c]]) / z;
            }
        }
    }
    let want = cat.dot(&w(mha.wo));
    assert_eq!(got.dim(), (3, 4));
    for (a, b) in got.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn single_key_identity_attention_returns_the_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "a", 3, 1, &mut rng).unwrap();
    for id in [mha.wq, mha.wk, mha.wv, mha.wo] {
        store.set(id, Mat::eye(3));
    }
    let mut t = Tape::new(&store);
    let q = t.constant(array![[1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]]);
    let kv = t.constant(array![[0.5, -0.5, 2.0]]);
    let out = mha.forward(&mut t, q, kv, kv, None).unwrap();
    assert_eq!(t.value(out), &array![[0.5, -0.5, 2.0], [0.5, -0.5, 2.0]]);
}

#[test]
fn feed_forward_matches_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "f", 4, 5, &mut rng);
    fill(&mut store, &mut rng);
    let x = Mat::from_shape_fn((3, 4), |_| rng.random_range(-2.0..2.0));
    let mut t = Tape::new(&store);
    let xv = t.constant(x.clone());
    let out = ffn.forward(&mut t, xv, 0.0);
    let got = t.value(out).clone();

    let p = |id: Option<_>| store.get(id.unwrap()).clone();
    let h = (x.dot(store.get(ffn.lin1.w)) + p(ffn.lin1.b)).mapv(|v| v.max(0.0));
    let want = h.dot(store.get(ffn.lin2.w)) + p(ffn.lin2.b);
    for (a, b) in got.iter().zip(want.iter()) {
        assert!((a - b).abs() < 1e-9);
    }

    let b2 = p(ffn.lin2.b);

    // Zero input with zero first bias leaves only the second bias.
    store.set(ffn.lin1.b.unwrap(), Mat::zeros((1, 5)));
    let mut t = Tape::new(&store);
    let z = t.constant(Mat::zeros((2, 4)));
    let out = ffn.forward(&mut t, z, 0.0);
    for r in t.value(out).rows() {
        assert_eq!(r, b2.row(0));
    }
}
