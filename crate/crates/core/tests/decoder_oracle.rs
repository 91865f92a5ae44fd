//! Dense re-implementation of a micro dialogue model (d_model 8, two heads)
//! checked against the taped forward pass: every decoder sublayer output
//! plus the final token distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revcore::corpus::{EntityId, TokenId, Vocabulary, BOS, SEP};
use revcore::dialogue::{DialogueConfig, DialogueInput, DialogueModel, DialogueVariant};
use revcore::nn::{Mat, ParamStore};

type M = Vec<Vec<f64>>;

const TOL: f64 = 1e-5;

fn param(store: &ParamStore, name: &str) -> M {
    let id = store.id(name).unwrap_or_else(|| panic!("missing {name}"));
    store.get(id).rows().into_iter().map(|r| r.to_vec()).collect()
}

fn row(store: &ParamStore, name: &str) -> Vec<f64> {
    param(store, name).remove(0)
}

fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
        for j in 0..m {
            out[i][j] = (0..k).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

fn cols(a: &M, start: usize, len: usize) -> M {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Softmax over the kept entries; a row with nothing kept is all zeros.
fn masked_softmax(x: &[f64], keep: &[bool]) -> Vec<f64> {
    let max = x
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; x.len()];
    }
    let e: Vec<f64> = x.iter().zip(keep).map(|(v, &k)| if k { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    masked_softmax(x, &vec![true; x.len()])
}

fn layer_norm(x: &M, store: &ParamStore, name: &str) -> M {
    let g = row(store, &format!("{name}.gamma"));
    let b = row(store, &format!("{name}.beta"));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter().enumerate().map(|(j, v)| (v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

fn linear(x: &M, store: &ParamStore, name: &str) -> M {
    let y = matmul(x, &param(store, &format!("{name}.w")));
    match store.id(&format!("{name}.b")) {
        Some(_) => add_bias(&y, &row(store, &format!("{name}.b"))),
        None => y,
    }
}

fn ffn(x: &M, store: &ParamStore, name: &str) -> M {
    let h = linear(x, store, &format!("{name}.lin1"));
    let h: M = h.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect();
    linear(&h, store, &format!("{name}.lin2"))
}

/// `keep(i, j)`: may query `i` see key `j`.
fn mha(q: &M, kv: &M, heads: usize, store: &ParamStore, name: &str, keep: &dyn Fn(usize, usize) -> bool) -> M {
    let d = q[0].len();
    let dh = d / heads;
    let qp = matmul(q, &param(store, &format!("{name}.wq")));
    let kp = matmul(kv, &param(store, &format!("{name}.wk")));
    let vp = matmul(kv, &param(store, &format!("{name}.wv")));
    let mut cat = vec![Vec::with_capacity(d); q.len()];
    for h in 0..heads {
        let (qh, kh, vh) = (cols(&qp, h * dh, dh), cols(&kp, h * dh, dh), cols(&vp, h * dh, dh));
        for i in 0..q.len() {
            let scores: Vec<f64> = kh
                .iter()
                .map(|k| k.iter().zip(&qh[i]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mask: Vec<bool> = (0..kh.len()).map(|j| keep(i, j)).collect();
            let p = masked_softmax(&scores, &mask);
            for c in 0..dh {
                cat[i].push((0..vh.len()).map(|j| p[j] * vh[j][c]).sum());
            }
        }
    }
    matmul(&cat, &param(store, &format!("{name}.wo")))
}

fn embed(store: &ParamStore, ids: &[TokenId]) -> M {
    let table = param(store, "dlg.embed");
    let d = table[0].len();
    ids.iter()
        .enumerate()
        .map(|(pos, &id)| {
            (0..d)
                .map(|i| {
                    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                    table[id][i] + if i % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

fn encoder(store: &ParamStore, name: &str, x: M, layers: usize, heads: usize) -> M {
    let mut h = x;
    for l in 0..layers {
        let p = format!("{name}.layer{l}");
        let n = layer_norm(&h, store, &format!("{p}.ln_attn"));
        h = add(&h, &mha(&n, &n, heads, store, &format!("{p}.attn"), &|_, _| true));
        let n = layer_norm(&h, store, &format!("{p}.ln_ffn"));
        h = add(&h, &ffn(&n, store, &format!("{p}.ffn")));
    }
    layer_norm(&h, store, &format!("{name}.ln_out"))
}

fn scatter(p: &[f64], scope: &[TokenId], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for (v, &tok) in p.iter().zip(scope) {
        out[tok] += v;
    }
    out
}

struct Oracle {
    layers: Vec<[M; 5]>,
    pr: Vec<f64>,
    vocab: Vec<f64>,
    kg: Vec<f64>,
    review: Vec<f64>,
    gates: Vec<f64>,
}

fn oracle(model: &DialogueModel, input: &DialogueInput, prefix: &[TokenId], kg_scope: &[TokenId]) -> Oracle {
    let s = model.store();
    let cfg = model.config();
    let h = cfg.heads;
    let d = cfg.d_model;
    let x = encoder(s, "dlg.ctx", embed(s, &input.context), cfg.encoder_layers, h);
    let r = encoder(s, "dlg.rev", embed(s, &input.reviews), cfg.encoder_layers, h);
    let states = param(s, "dlg.entity_states");
    let ent_rows: M = input.entities.iter().map(|e| states[e.index()].clone()).collect();
    let ent = linear(&ent_rows, s, "dlg.bridge");

    let mut hid = embed(s, prefix);
    let mut layers = Vec::new();
    for l in 0..cfg.decoder_layers {
        let p = format!("dlg.dec{l}");
        let n = layer_norm(&hid, s, &format!("{p}.ln_self"));
        let a0 = add(&hid, &mha(&n, &n, h, s, &format!("{p}.self"), &|i, j| j <= i));
        let cross = |inp: &M, mem: &M, ln: &str, att: &str| {
            let n = layer_norm(inp, s, &format!("{p}.{ln}"));
            add(inp, &mha(&n, mem, h, s, &format!("{p}.{att}"), &|_, _| true))
        };
        let a1 = cross(&a0, &x, "ln_ctx", "ctx");
        let a2 = cross(&a1, &ent, "ln_ent", "ent");
        let a3 = cross(&a2, &r, "ln_rev", "rev");
        let n = layer_norm(&a3, s, &format!("{p}.ln_ffn"));
        hid = add(&a3, &ffn(&n, s, &format!("{p}.ffn")));
        layers.push([a0, a1, a2, a3, hid.clone()]);
    }
    let y = layer_norm(&hid, s, "dlg.ln_out");
    let y = vec![y[y.len() - 1].clone()];
    let v = model.vocab().len();
    let vocab = softmax(&linear(&y, s, "dlg.vocab_head")[0]);

    let copy = |w: &str, keys: &M, scope: &[TokenId]| {
        let q = matmul(&y, &param(s, w));
        let scores: Vec<f64> = matmul(&q, &transpose(keys))[0].iter().map(|v| v / (d as f64).sqrt()).collect();
        scatter(&softmax(&scores), scope, v)
    };
    let table = param(s, "dlg.embed");
    let kg_keys: M = kg_scope.iter().map(|&t| table[t].clone()).collect();
    let kg = copy("dlg.copy.kg", &kg_keys, kg_scope);
    let (pos, toks): (Vec<usize>, Vec<TokenId>) = input
        .reviews
        .iter()
        .enumerate()
        .filter(|(_, &t)| !Vocabulary::is_reserved(t))
        .map(|(i, &t)| (i, t))
        .unzip();
    let rev_keys: M = pos.iter().map(|&i| r[i].clone()).collect();
    let review = copy("dlg.copy.rev", &rev_keys, &toks);
    let gates = softmax(&linear(&y, s, "dlg.gate")[0]);
    let pr = (0..v).map(|i| gates[0] * vocab[i] + gates[1] * kg[i] + gates[2] * review[i]).collect();
    Oracle {
        layers,
        pr,
        vocab,
        kg,
        review,
        gates,
    }
}

fn max_diff(a: &Mat, b: &M) -> f64 {
    assert_eq!(a.dim(), (b.len(), b[0].len()));
    a.indexed_iter().map(|((i, j), v)| (v - b[i][j]).abs()).fold(0.0, f64::max)
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn micro_model(seed: u64) -> DialogueModel {
    let words: Vec<String> = "a b c d e f g".split(' ').map(String::from).collect();
    let vocab = Vocabulary::build([words.as_slice()], 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = Mat::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let ent_tokens = vec![vec![vocab.id("a")], vec![vocab.id("b"), vocab.id("c")], vec![]];
    let cfg = DialogueConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 2,
        ffn_dim: 6,
        dropout: 0.0,
        max_response_len: 30,
        variant: DialogueVariant::default(),
        seed,
    };
    let mut model = DialogueModel::new(vocab, states, ent_tokens, cfg).unwrap();
    // Perturb every parameter so norms, biases and gates are all non-trivial.
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let shape = model.store().get(id).dim();
        let value = Mat::from_shape_fn(shape, |_| rng.random_range(-0.8..0.8));
        model.store_mut().set(id, value);
    }
    model
}

#[test]
fn micro_decoder_step_matches_dense_oracle() {
    for seed in [1u64, 2, 3] {
        let model = micro_model(seed);
        let v = model.vocab();
        let ids = |s: &str| s.split(' ').map(|w| v.id(w)).collect::<Vec<_>>();
        let mut reviews = ids("d e");
        reviews.push(SEP);
        reviews.extend(ids("f g"));
        let input = DialogueInput {
            context: ids("a b g c"),
            reviews,
            entities: vec![EntityId(0), EntityId(1), EntityId(0)],
        };
        let mut prefix = vec![BOS];
        prefix.extend(ids("c a f"));
        let kg_scope = model.kg_scope(&input.entities);
        assert_eq!(kg_scope, {
            let mut s = ids("a b c");
            s.sort_unstable();
            s
        });

        let want = oracle(&model, &input, &prefix, &kg_scope);
        let state = model.decoder_state(&input, &prefix).unwrap();
        assert_eq!(state.layers.len(), 2);
        for (l, (got, exp)) in state.layers.iter().zip(&want.layers).enumerate() {
            let review = got.review_attention.as_ref().unwrap();
            let parts = [&got.self_attention, &got.context_attention, &got.entity_attention, review, &got.output];
            for (k, (g, e)) in parts.iter().zip(exp).enumerate() {
                let err = max_diff(g, e);
                assert!(err < TOL, "seed {seed} layer {l} sublayer {k}: {err}");
                assert_eq!(g.dim(), (prefix.len(), 8));
            }
        }
        let dist = model.token_distribution(&input, &prefix).unwrap();
        assert!(vec_diff(&dist.vocab, &want.vocab) < TOL);
        assert!(vec_diff(&dist.kg_copy, &want.kg) < TOL);
        assert!(vec_diff(&dist.review_copy, &want.review) < TOL);
        assert!(vec_diff(&dist.gates, &want.gates) < TOL);
        assert!(vec_diff(&dist.pr, &want.pr) < TOL);
    }
}
