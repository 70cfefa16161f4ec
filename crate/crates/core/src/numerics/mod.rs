//! Dense matrices, reverse-mode differentiation, gradient checking and Adam.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{bce, sigmoid, Graph, Segment, Var, PROB_CLAMP};
pub use optim::Adam;
pub use params::{ParamGrads, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{Error, Result};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_store(shapes: &[(&str, usize, usize)], seed: u64) -> (ParamStore, Vec<ParamId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|&(n, r, c)| store.add_uniform(n, r, c, 1.0, &mut rng).unwrap())
            .collect();
        (store, ids)
    }

    fn check<F>(store: &ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Result<Var>,
    {
        let report = grad_check(store, f, &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.checked > 0);
    }

    // Reduces a node to a scalar through a fixed random projection so every
    // output entry carries a distinct upstream gradient.
    fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
        let [r, c] = g.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let w = g.constant(w);
        let m = g.mul(v, w)?;
        Ok(g.sum_all(m))
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let (store, ids) = rand_store(&[("a", 5, 7)], 1);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let a = g.scale(a, 30.0);
        let s = g.softmax_rows(a);
        for r in 0..5 {
            let sum: f64 = g.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn analytic_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.scalar(s), 0.5);
        assert_eq!(g.scalar(t), 0.0);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let (store, ids) = rand_store(&[("a", 2, 3), ("b", 2, 3)], 2);
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let b = g.param(ids[1]);
        match g.matmul(a, b) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, [2, 3]);
                assert_eq!(right, [2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = g.constant(Tensor::zeros(3, 2));
        assert!(g.add(a, c).is_err());
        let col = g.constant(Tensor::zeros(3, 1));
        assert!(g.mul_col(a, col).is_err());
    }

    #[test]
    fn domain_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let neg = g.constant(Tensor::row_vector(vec![1.0, -1.0]));
        assert!(matches!(g.log(neg), Err(Error::Domain { .. })));
        let big = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(big), Err(Error::Domain { .. })));
        let zero = g.constant(Tensor::zeros(1, 3));
        assert!(g.l2_norm(zero).is_err());
    }

    #[test]
    fn matmul_family_gradients() {
        let (store, ids) = rand_store(&[("a", 3, 4), ("b", 4, 5), ("c", 6, 5)], 3);
        check(&store, |g| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let c = g.param(ids[2]);
            let ab = g.matmul(a, b)?;
            let abct = g.matmul_nt(ab, c)?;
            project(g, abct, 10)
        });
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let (store, ids) = rand_store(&[("a", 3, 4), ("b", 3, 4), ("row", 1, 4), ("col", 3, 1)], 4);
        check(&store, |g| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let row = g.param(ids[2]);
            let col = g.param(ids[3]);
            let x = g.add(a, b)?;
            let x = g.sub(x, b)?;
            let x = g.mul(x, b)?;
            let x = g.add_row(x, row)?;
            let x = g.mul_row(x, row)?;
            let x = g.mul_col(x, col)?;
            let x = g.affine(x, 0.7, 0.3);
            let r = g.broadcast_rows(row, 3)?;
            let x = g.add(x, r)?;
            project(g, x, 11)
        });
    }

    #[test]
    fn structural_gradients() {
        let (store, ids) = rand_store(&[("a", 4, 3), ("b", 4, 2), ("c", 2, 3), ("e", 6, 3)], 5);
        check(&store, |g| {
            let a = g.param(ids[0]);
            let b = g.param(ids[1]);
            let c = g.param(ids[2]);
            let cc = g.concat_cols(&[a, b])?;
            let cr = g.concat_rows(&[a, c])?;
            let s1 = g.slice_cols(cc, 1, 3)?;
            let s2 = g.slice_rows(cr, 2, 4)?;
            let x = g.mul(s1, s2)?;
            let gath = g.gather_rows(x, &[3, 0, 3])?;
            let emb = g.embedding_lookup(ids[3], &[5, 1, 5])?;
            let y = g.add(gath, emb)?;
            let m = g.mean_pool(y)?;
            let sc = g.sum_cols(y);
            let p1 = project(g, m, 12)?;
            let p2 = project(g, sc, 13)?;
            let ss = g.sum_squares(a);
            let t = g.add(p1, p2)?;
            g.add(t, ss)
        });
    }

    #[test]
    fn nonlinearity_gradients() {
        let (store, ids) = rand_store(&[("a", 3, 5), ("p", 1, 4)], 6);
        check(&store, |g| {
            let a = g.param(ids[0]);
            let s = g.sigmoid(a);
            let t = g.tanh(a);
            let r = g.relu(a);
            let e = g.exp(a)?;
            let l = g.log(e)?;
            let sm = g.softmax_rows(a);
            let ln = g.layer_norm_rows(a, 1e-5);
            let nrm = g.l2_norm(a)?;
            let mut total = g.constant(Tensor::scalar(0.0));
            for (i, v) in [s, t, r, l, sm, ln, nrm].into_iter().enumerate() {
                let p = project(g, v, 20 + i as u64)?;
                total = g.add(total, p)?;
            }
            let lse = g.logsumexp_rows(a, None)?;
            let p = project(g, lse, 30)?;
            total = g.add(total, p)?;
            let mask: Vec<bool> = (0..15).map(|i| i % 3 != 1).collect();
            let lse_m = g.logsumexp_rows(a, Some(&mask))?;
            let p = project(g, lse_m, 31)?;
            total = g.add(total, p)?;
            // bce on probabilities strictly inside the clamp
            let pv = g.param(ids[1]);
            let pv = g.sigmoid(pv);
            let eye = g_constant_eye_row(g, 4);
            let col = g.matmul_nt(eye, pv)?;
            let loss = g.bce_mean(col, &[1.0, 0.0, 1.0, 0.0])?;
            g.add(total, loss)
        });
    }

    // `I * p^T` turns a `1 x n` row into an `n x 1` column.
    fn g_constant_eye_row(g: &mut Graph, n: usize) -> Var {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        g.constant(Tensor::new(n, n, data).unwrap())
    }

    #[test]
    fn random_composite_graphs_match_finite_differences() {
        for seed in 0..8u64 {
            let (store, ids) = rand_store(&[("x", 4, 6), ("w1", 6, 5), ("b1", 1, 5), ("w2", 5, 6)], 100 + seed);
            check(&store, |g| {
                let x = g.param(ids[0]);
                let w1 = g.param(ids[1]);
                let b1 = g.param(ids[2]);
                let w2 = g.param(ids[3]);
                let h = g.matmul(x, w1)?;
                let h = g.add_row(h, b1)?;
                let h = match seed % 3 {
                    0 => g.tanh(h),
                    1 => g.sigmoid(h),
                    _ => g.softmax_rows(h),
                };
                let o = g.matmul(h, w2)?;
                let o = g.add(o, x)?;
                let o = g.layer_norm_rows(o, 1e-5);
                let scores = g.matmul_nt(o, x)?;
                let att = g.softmax_rows(scores);
                let ctx = g.matmul(att, x)?;
                let pooled = g.mean_pool(ctx)?;
                project(g, pooled, seed)
            });
        }
    }

    #[test]
    fn gradient_is_linear_in_the_objective() {
        let (store, ids) = rand_store(&[("x", 3, 4), ("w", 4, 4)], 7);
        let f = |g: &mut Graph| -> Result<Var> {
            let x = g.param(ids[0]);
            let w = g.param(ids[1]);
            let h = g.matmul(x, w)?;
            let h = g.tanh(h);
            project(g, h, 1)
        };
        let h = |g: &mut Graph| -> Result<Var> {
            let w = g.param(ids[1]);
            let s = g.sigmoid(w);
            project(g, s, 2)
        };
        let grads_of = |which: u8| {
            let mut g = Graph::new(&store);
            let loss = match which {
                0 => f(&mut g).unwrap(),
                1 => h(&mut g).unwrap(),
                _ => {
                    let a = f(&mut g).unwrap();
                    let b = h(&mut g).unwrap();
                    g.add(a, b).unwrap()
                }
            };
            g.backward(loss).unwrap()
        };
        let (gf, gh, gs) = (grads_of(0), grads_of(1), grads_of(2));
        for &id in &ids {
            let zero = Tensor::zeros(store.value(id).rows(), store.value(id).cols());
            let a = gf.get(id).unwrap_or(&zero);
            let b = gh.get(id).unwrap_or(&zero);
            let s = gs.get(id).unwrap();
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(s.data()) {
                assert!((x + y - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ops_never_mutate_inputs() {
        let (store, ids) = rand_store(&[("a", 3, 3)], 8);
        let before = store.value(ids[0]).clone();
        let mut g = Graph::new(&store);
        let a = g.param(ids[0]);
        let snapshot = g.value(a).clone();
        let s = g.softmax_rows(a);
        let l = g.layer_norm_rows(s, 1e-5);
        let m = g.matmul(l, a).unwrap();
        let loss = g.sum_squares(m);
        let _ = g.backward(loss).unwrap();
        assert_eq!(g.value(a), &snapshot);
        assert_eq!(store.value(ids[0]), &before);
    }

    #[test]
    fn repeated_param_calls_share_a_node() {
        let (store, ids) = rand_store(&[("a", 2, 2)], 9);
        let mut g = Graph::new(&store);
        let a1 = g.param(ids[0]);
        let a2 = g.param(ids[0]);
        assert_eq!(a1, a2);
        let m = g.mul(a1, a2).unwrap();
        let loss = g.sum_all(m);
        let grads = g.backward(loss).unwrap();
        for (x, gx) in store.value(ids[0]).data().iter().zip(grads.get(ids[0]).unwrap().data()) {
            assert!((2.0 * x - gx).abs() < 1e-15);
        }
    }

    #[test]
    fn segment_ops_match_finite_differences() {
        let (store, ids) = rand_store(&[("x", 7, 4), ("wq", 4, 4), ("wk", 4, 4), ("wv", 4, 4), ("t", 5, 4)], 11);
        let segs = [(0, 3), (3, 1), (4, 3)];
        check(&store, |g| {
            let x = g.param(ids[0]);
            let wq = g.param(ids[1]);
            let wk = g.param(ids[2]);
            let wv = g.param(ids[3]);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let att = g.segment_attention(q, k, v, &segs, 2)?;
            let mean = g.segment_mean(att, &segs)?;
            let t = g.param(ids[4]);
            let pool = g.segment_attn_pool(att, &[(0, 3), (3, 0), (4, 3), (0, 7)], t, &[0, 1, 2, 3, 2])?;
            let a = project(g, mean, 1)?;
            let b = project(g, pool, 2)?;
            let c = project(g, att, 3)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        });
    }

    #[test]
    fn segment_attention_matches_dense_attention_per_segment() {
        let (store, ids) = rand_store(&[("q", 6, 4), ("k", 6, 4), ("v", 6, 4)], 12);
        let mut g = Graph::new(&store);
        let (q, k, v) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
        let out = g.segment_attention(q, k, v, &[(0, 2), (2, 4)], 1).unwrap();
        let out = g.value(out).clone();
        // dense oracle on the second segment alone
        let (tq, tk, tv) = (store.value(ids[0]), store.value(ids[1]), store.value(ids[2]));
        for i in 2..6 {
            let logits: Vec<f64> = (2..6)
                .map(|j| (0..4).map(|t| tq.get(i, t) * tk.get(j, t)).sum::<f64>() / 2.0)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for t in 0..4 {
                let want: f64 = (2..6).map(|j| logits[j - 2].exp() / z * tv.get(j, t)).sum();
                assert!((out.get(i, t) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_attention_never_crosses_segments() {
        let (store, ids) = rand_store(&[("x", 5, 2)], 13);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let out = g.segment_attention(x, x, x, &[(0, 2), (2, 3)], 1).unwrap();
        let first = g.slice_rows(out, 0, 2).unwrap();
        let loss = g.sum_squares(first);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(ids[0]).unwrap();
        assert!(gx.data()[4..].iter().all(|&v| v == 0.0));
        assert!(gx.data()[..4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn segment_ops_reject_bad_inputs() {
        let (store, ids) = rand_store(&[("x", 3, 4)], 14);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        assert!(g.segment_attention(x, x, x, &[(0, 3)], 3).is_err());
        assert!(g.segment_mean(x, &[(2, 2)]).is_err());
        assert!(g.segment_attn_pool(x, &[(0, 3)], x, &[0, 0]).is_err());
        assert!(g.segment_attn_pool(x, &[(0, 3)], x, &[0, 0, 1]).is_err());
        let m = g.segment_mean(x, &[(1, 0)]).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }
}
