//! Mixed-precision attention.
//!
//! Every query sees the keys and values of tokens on its own device at full
//! precision and those of every other device through their quantized
//! reconstructions. Scores run over the concatenated key set `[K | K̂]` and a
//! boolean mask picks, per query, which copy of each token is visible.

use crate::autodiff::{Eager, Graph};
use crate::cluster::ShardPlan;
use crate::error::{Error, Result};
use crate::tensor::{self, BoolMatrix, Tensor};

/// `T × 2T` visibility mask. Columns `[0, T)` are full-precision keys,
/// columns `[T, 2T)` their quantized counterparts.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedPrecisionMask {
    tokens: usize,
    devices: usize,
    causal: bool,
    matrix: BoolMatrix,
}

impl MixedPrecisionMask {
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn devices(&self) -> usize {
        self.devices
    }
    pub fn causal(&self) -> bool {
        self.causal
    }
    pub fn matrix(&self) -> &BoolMatrix {
        &self.matrix
    }
    pub fn active_columns(&self, query: usize) -> Vec<usize> {
        self.matrix.active_in_row(query).collect()
    }
}

pub fn build_mask(t: usize, plan: &ShardPlan, causal: bool) -> Result<MixedPrecisionMask> {
    if plan.total() != t {
        return Err(Error::Plan(format!("plan covers {} tokens, mask needs {t}", plan.total())));
    }
    let matrix = BoolMatrix::from_fn(t, 2 * t, |i, c| {
        let (j, quantized) = if c < t { (c, false) } else { (c - t, true) };
        if causal && j > i {
            return false;
        }
        (plan.owner(i) != plan.owner(j)) == quantized
    });
    Ok(MixedPrecisionMask {
        tokens: t,
        devices: plan.devices(),
        causal,
        matrix,
    })
}

/// Multi-head scaled dot-product attention of `q` (`R × D`) over `k`, `v`
/// (`C × D`) under an `R × C` mask. `d_k = D / heads`.
pub fn attend<G: Graph>(g: &mut G, q: &G::V, k: &G::V, v: &G::V, mask: &BoolMatrix, heads: usize) -> Result<G::V> {
    let (r, d) = g.value(q).dims();
    let (c, dk_all) = g.value(k).dims();
    if dk_all != d || g.value(v).dims() != (c, d) {
        return Err(Error::dim("attention", "query/key/value widths differ"));
    }
    if mask.rows() != r || mask.cols() != c {
        return Err(Error::dim(
            "attention",
            format!("mask {}x{} for {r} queries and {c} keys", mask.rows(), mask.cols()),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Precondition(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q.clone(), k.clone(), v.clone())
        } else {
            (g.slice_cols(q, a, b)?, g.slice_cols(k, a, b)?, g.slice_cols(v, a, b)?)
        };
        let kt = g.transpose(&kh);
        let logits = g.matmul(&qh, &kt)?;
        let logits = g.scale(&logits, scale);
        let w = g.masked_softmax(&logits, mask)?;
        outs.push(g.matmul(&w, &vh)?);
    }
    if heads == 1 {
        Ok(outs.pop().unwrap())
    } else {
        g.concat_cols(&outs)
    }
}

/// Attention over `[K | K̂]` and `[V | V̂]` with a mixed-precision mask.
#[allow(clippy::too_many_arguments)]
pub fn mixed_precision_attention<G: Graph>(
    g: &mut G,
    q: &G::V,
    k: &G::V,
    k_hat: &G::V,
    v: &G::V,
    v_hat: &G::V,
    mask: &MixedPrecisionMask,
    heads: usize,
) -> Result<G::V> {
    let t = mask.tokens();
    for (name, x) in [("Q", q), ("K", k), ("K̂", k_hat), ("V", v), ("V̂", v_hat)] {
        if g.value(x).rows() != t {
            return Err(Error::dim("mixed_precision_attention", format!("{name} must have {t} rows")));
        }
    }
    let keys = g.concat_rows(&[k.clone(), k_hat.clone()])?;
    let values = g.concat_rows(&[v.clone(), v_hat.clone()])?;
    attend(g, q, &keys, &values, mask.matrix(), heads)
}

/// Standard attention on plain tensors.
pub fn standard_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool, heads: usize) -> Result<Tensor> {
    let (t, _) = q.dims();
    if k.rows() != t {
        return Err(Error::dim("standard_attention", "query and key counts differ"));
    }
    let mask = BoolMatrix::from_fn(t, t, |i, j| !causal || j <= i);
    attend(&mut Eager::new(), q, k, v, &mask, heads)
}

/// Per-head attention weight matrices (`R × C` each).
pub fn attention_weights(q: &Tensor, k: &Tensor, mask: &BoolMatrix, heads: usize) -> Result<Vec<Tensor>> {
    let d = q.cols();
    if heads == 0 || d % heads != 0 || k.cols() != d {
        return Err(Error::dim("attention_weights", "incompatible widths"));
    }
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let qh = tensor::slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tensor::slice_cols(k, h * dh, (h + 1) * dh)?;
            let logits = tensor::scale(&tensor::matmul(&qh, &tensor::transpose(&kh))?, 1.0 / (dh as f64).sqrt());
            tensor::masked_softmax(&logits, mask)
        })
        .collect()
}

/// First-order change of `softmax(a)` under a logit perturbation `e`, given
/// `alpha = softmax(a)`: `δα_j = α_j (e_j − Σ_k α_k e_k)`.
pub fn softmax_perturbation_first_order(alpha: &[f64], e: &[f64]) -> Vec<f64> {
    assert_eq!(alpha.len(), e.len(), "α and e lengths differ");
    let mean: f64 = alpha.iter().zip(e).map(|(a, x)| a * x).sum();
    alpha.iter().zip(e).map(|(a, x)| a * (x - mean)).collect()
}

pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = a.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::partition_tokens;
    use crate::tensor::Precision;
    use crate::vq::Codebook;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize, p: Precision) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(), p).unwrap()
    }

    #[test]
    fn mask_examples() {
        let plan = partition_tokens(4, 2).unwrap();
        let m = build_mask(4, &plan, false).unwrap();
        assert_eq!(m.active_columns(0), vec![0, 1, 6, 7]);
        let m = build_mask(4, &plan, true).unwrap();
        assert_eq!(m.active_columns(2), vec![2, 4, 5]);
        let single = partition_tokens(5, 1).unwrap();
        let m = build_mask(5, &single, true).unwrap();
        for i in 0..5 {
            assert_eq!(m.active_columns(i), (0..=i).collect::<Vec<_>>());
        }
        assert!(matches!(build_mask(6, &plan, false), Err(Error::Plan(_))));
    }

    proptest! {
        #[test]
        fn mask_invariants(n in 1usize..6, extra in 0usize..20, causal: bool) {
            let t = n + extra;
            let plan = partition_tokens(t, n).unwrap();
            let m = build_mask(t, &plan, causal).unwrap();
            for i in 0..t {
                let mut any = false;
                for j in 0..t {
                    let full = m.matrix().get(i, j);
                    let quant = m.matrix().get(i, t + j);
                    any |= full || quant;
                    if causal && j > i {
                        prop_assert!(!full && !quant);
                    } else {
                        prop_assert!(full != quant);
                        prop_assert_eq!(full, plan.owner(i) == plan.owner(j));
                    }
                }
                prop_assert!(any);
            }
        }

        #[test]
        fn identity_quantization_matches_standard(
            seed in 0u64..1000,
            t in 1usize..=32,
            d_choice in 0usize..3,
            n_choice in 0usize..3,
            causal: bool,
        ) {
            let d = [4, 8, 16][d_choice];
            let n = [1, 2, 4][n_choice].min(t);
            let heads = if d >= 8 { 2 } else { 1 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_t(&mut rng, t, d, Precision::F64);
            let (wq, wk, wv) = (
                rand_t(&mut rng, d, d, Precision::F64),
                rand_t(&mut rng, d, d, Precision::F64),
                rand_t(&mut rng, d, d, Precision::F64),
            );
            let cb = Codebook::from_rows(0, &x).unwrap();
            let (_, x_hat) = cb.quantize(&x).unwrap();
            let q = tensor::matmul(&x, &wq).unwrap();
            let k = tensor::matmul(&x, &wk).unwrap();
            let v = tensor::matmul(&x, &wv).unwrap();
            let kh = tensor::matmul(&x_hat, &wk).unwrap();
            let vh = tensor::matmul(&x_hat, &wv).unwrap();
            let plan = partition_tokens(t, n).unwrap();
            let mask = build_mask(t, &plan, causal).unwrap();
            let out = mixed_precision_attention(&mut Eager::new(), &q, &k, &kh, &v, &vh, &mask, heads).unwrap();
            let reference = standard_attention(&q, &k, &v, causal, heads).unwrap();
            prop_assert!(out.max_abs_diff(&reference) < 1e-5);
        }

        #[test]
        fn weights_are_probability_vectors(seed in 0u64..1000, n in 1usize..4, causal: bool) {
            let t = 9;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_t(&mut rng, t, 4, Precision::F64);
            let k = rand_t(&mut rng, 2 * t, 4, Precision::F64);
            let mask = build_mask(t, &partition_tokens(t, n).unwrap(), causal).unwrap();
            for w in attention_weights(&q, &k, mask.matrix(), 2).unwrap() {
                for i in 0..t {
                    let s: f64 = w.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn first_order_perturbation_sums_to_zero(seed in 0u64..1000, n in 2usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let e: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d = softmax_perturbation_first_order(&softmax(&a), &e);
            prop_assert!(d.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = rand_t(&mut rng, 1, 4, Precision::F64);
        let k = rand_t(&mut rng, 1, 4, Precision::F64);
        let v = rand_t(&mut rng, 1, 4, Precision::F64);
        let kh = rand_t(&mut rng, 1, 4, Precision::F64);
        let vh = rand_t(&mut rng, 1, 4, Precision::F64);
        let mask = build_mask(1, &partition_tokens(1, 1).unwrap(), false).unwrap();
        let out = mixed_precision_attention(&mut Eager::new(), &q, &k, &kh, &v, &vh, &mask, 2).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    /// Dense reference: materialise the full masked score matrix in f64 and
    /// do everything with explicit loops.
    fn dense_reference(q: &Tensor, keys: &Tensor, values: &Tensor, mask: &BoolMatrix, heads: usize) -> Vec<f64> {
        let (t, d) = q.dims();
        let c = keys.rows();
        let dh = d / heads;
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let mut scores = vec![0.0; c];
                for j in 0..c {
                    let mut s = 0.0;
                    for x in h * dh..(h + 1) * dh {
                        s += q.get(i, x) * keys.get(j, x);
                    }
                    scores[j] = s / (dh as f64).sqrt() + if mask.get(i, j) { 0.0 } else { -1e9 };
                }
                let w = softmax(&scores);
                for x in h * dh..(h + 1) * dh {
                    out[i * d + x] = (0..c).map(|j| w[j] * values.get(j, x)).sum();
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (t, d) = (8, 8);
        let parts: Vec<Tensor> = (0..5).map(|_| rand_t(&mut rng, t, d, Precision::F64)).collect();
        let (q, k, kh, v, vh) = (&parts[0], &parts[1], &parts[2], &parts[3], &parts[4]);
        for causal in [false, true] {
            let mask = build_mask(t, &partition_tokens(t, 2).unwrap(), causal).unwrap();
            assert_eq!((mask.matrix().rows(), mask.matrix().cols()), (8, 16));
            let out = mixed_precision_attention(&mut Eager::new(), q, k, kh, v, vh, &mask, 2).unwrap();
            let keys = tensor::concat_rows(&[k, kh]).unwrap();
            let values = tensor::concat_rows(&[v, vh]).unwrap();
            let reference = dense_reference(q, &keys, &values, mask.matrix(), 2);
            for (a, b) in out.data().iter().zip(&reference) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn standard_attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = rand_t(&mut rng, 5, 4, Precision::F64);
        let k = Tensor::matrix(5, 4, [0.3, -0.1, 0.7, 0.2].repeat(5), Precision::F64).unwrap();
        let v = rand_t(&mut rng, 5, 4, Precision::F64);
        let out = standard_attention(&q, &k, &v, false, 1).unwrap();
        let mean = tensor::mean_rows(&v);
        for i in 0..5 {
            for j in 0..4 {
                assert!((out.get(i, j) - mean.get(0, j)).abs() < 1e-12);
            }
        }
        let k = rand_t(&mut rng, 5, 4, Precision::F64);
        let out = standard_attention(&q, &k, &v, true, 2).unwrap();
        for j in 0..4 {
            assert!((out.get(0, j) - v.get(0, j)).abs() < 1e-15);
        }
        let reference = dense_reference(&q, &k, &v, &BoolMatrix::from_fn(5, 5, |i, j| j <= i), 2);
        for (a, b) in out.data().iter().zip(&reference) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn device_permutation_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = 9;
        let parts: Vec<Tensor> = (0..5).map(|_| rand_t(&mut rng, t, 4, Precision::F64)).collect();
        let a = ShardPlan::from_ranges(t, vec![0..3, 3..6, 6..9]).unwrap();
        let b = ShardPlan::from_ranges(t, vec![6..9, 0..3, 3..6]).unwrap();
        let run = |plan: &ShardPlan| {
            let mask = build_mask(t, plan, true).unwrap();
            mixed_precision_attention(
                &mut Eager::new(),
                &parts[0],
                &parts[1],
                &parts[2],
                &parts[3],
                &parts[4],
                &mask,
                2,
            )
            .unwrap()
        };
        assert_eq!(run(&a), run(&b));
    }

    #[test]
    fn single_centroid_collapses_remote_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&mut rng, 6, 4, Precision::F64);
        let cb = Codebook::from_centroids(0, 1, 1, 4, vec![0.1, 0.2, 0.3, 0.4], Default::default()).unwrap();
        let (q, x_hat) = cb.quantize(&x).unwrap();
        assert!(q.indices.iter().all(|&i| i == 0));
        for i in 1..6 {
            assert_eq!(x_hat.row(i), x_hat.row(0));
        }
    }

    #[test]
    fn perturbation_hand_cases() {
        let d = softmax_perturbation_first_order(&[0.2, 0.3, 0.5], &[0.7, 0.7, 0.7]);
        assert!(d.iter().all(|x| x.abs() < 1e-16));
        let eps = 1e-3;
        let d = softmax_perturbation_first_order(&[0.5, 0.5], &[eps, -eps]);
        assert!((d[0] - 0.5 * eps).abs() < 1e-18 && (d[1] + 0.5 * eps).abs() < 1e-18);
    }

    #[test]
    fn perturbation_remainder_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ratios = Vec::new();
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dir: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            let alpha = softmax(&a);
            let residual = |eps: f64| {
                let e: Vec<f64> = dir.iter().map(|x| x / norm * eps).collect();
                let shifted: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x + y).collect();
                let exact = softmax(&shifted);
                let lin = softmax_perturbation_first_order(&alpha, &e);
                exact
                    .iter()
                    .zip(&alpha)
                    .zip(&lin)
                    .map(|((s, a), l)| (s - a - l).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            ratios.push(residual(1e-2) / residual(5e-3));
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((3.5..=4.5).contains(&mean), "{mean}");
    }

    #[test]
    fn fully_masked_row_is_rejected() {
        let q = Tensor::zeros(&[2, 2], Precision::F64);
        let mut mask = BoolMatrix::new(2, 2, true);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        assert_eq!(
            attend(&mut Eager::new(), &q, &q, &q, &mask, 1),
            Err(Error::InvalidMask { row: 1 })
        );
    }
}
