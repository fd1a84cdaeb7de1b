//! Forward kernels shared by the autodiff graph and the inference path.

use crate::error::{contract, dim_err, Result};
use crate::masks::AttentionMask;

use super::tensor::{gemm_into, matmul, MatRef, Scalar, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `x·w + b` with `b` broadcast over rows.
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.len() != w.cols() {
        return dim_err(format!("bias of {} for {} outputs", b.len(), w.cols()));
    }
    let mut out = matmul(x, w)?;
    add_bias_in_place(&mut out, b);
    Ok(out)
}

pub(crate) fn add_bias_in_place<T: Scalar>(out: &mut Tensor<T>, b: &Tensor<T>) {
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        for (o, &bj) in row.iter_mut().zip(b.data()) {
            *o = *o + bj;
        }
    }
}

/// Row-wise softmax, stabilized by subtracting the row maximum.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of one row, evaluated in `f64`.
pub fn log_softmax(row: &[impl Scalar]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v.as_f64() - lse).collect()
}

/// Intermediate values of a layer-norm forward pass.
pub(crate) struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization to zero mean and unit (population) variance,
/// followed by `gain` and `bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    Ok(layer_norm_cached(x, gain, bias, eps)?.0)
}

pub(crate) fn layer_norm_cached<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return dim_err(format!("layer norm over {d} features with gain {}", gain.len()));
    }
    let n = T::of_f64(d as f64);
    let eps = T::of_f64(eps);
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (xr, or) in xhat.data_mut().chunks_mut(d).zip(out.data_mut().chunks_mut(d)) {
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
        let is = T::one() / (var + eps).sqrt();
        for ((h, o), (&g, &b)) in xr
            .iter_mut()
            .zip(or.iter_mut())
            .zip(gain.data().iter().zip(bias.data()))
        {
            *h = (*h - mean) * is;
            *o = *h * g + b;
        }
        inv_std.push(is);
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, skipping positions whose target is listed in `ignore`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], ignore: &[usize]) -> Result<f64> {
    if targets.len() != logits.rows() {
        return dim_err(format!("{} targets for {} rows", targets.len(), logits.rows()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if ignore.contains(&t) {
            continue;
        }
        if t >= logits.cols() {
            return contract(format!("target {t} outside vocabulary of {}", logits.cols()));
        }
        total -= log_softmax(logits.row(i))[t];
        count += 1;
    }
    if count == 0 {
        return contract("cross entropy over an empty set of positions");
    }
    Ok(total / count as f64)
}

/// Relative-position key/value tables indexed by clamped offset.
#[derive(Clone, Copy)]
pub struct RelativeTables<'a, T> {
    /// `(2w+1) × d_head` key embeddings.
    pub keys: &'a Tensor<T>,
    /// `(2w+1) × d_head` value embeddings.
    pub values: &'a Tensor<T>,
    pub window: usize,
}

/// Row index into a relative table for query `i` and key `j`.
#[inline]
pub fn relative_bucket(i: usize, j: usize, window: usize) -> usize {
    let w = window as isize;
    ((j as isize - i as isize).clamp(-w, w) + w) as usize
}

/// Attention probabilities kept for the backward pass, laid out
/// `[head][query][key]`.
pub(crate) struct AttentionCache<T> {
    pub probs: Vec<T>,
}

fn head_view<T: Scalar>(t: &Tensor<T>, head: usize, d_head: usize) -> MatRef<'_, T> {
    MatRef::strided(&t.data()[head * d_head..], t.rows(), d_head, t.cols() as isize, 1)
}

/// Multi-head scaled dot-product attention with optional relative-position
/// tables shared across heads.
///
/// `q` is `n × d`, `k` and `v` are `m × d`. With tables present,
/// `logit[i][j] = (q_i·k_j + q_i·R_k[clip(j−i)]) / √d_head` and
/// `out_i = Σ_j p_ij (v_j + R_v[clip(j−i)])`.
pub fn multi_head_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    rel: Option<RelativeTables<'_, T>>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<T>> {
    Ok(attention_cached(q, k, v, heads, rel, mask)?.0)
}

pub(crate) fn attention_cached<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    rel: Option<RelativeTables<'_, T>>,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (n, m, d) = (q.rows(), k.rows(), q.cols());
    if heads == 0 || d % heads != 0 {
        return dim_err(format!("{d} features over {heads} heads"));
    }
    if k.cols() != d || v.cols() != d || v.rows() != m {
        return dim_err("query/key/value widths disagree");
    }
    let dh = d / heads;
    if let Some(mask) = mask {
        if mask.rows() != n || mask.cols() != m {
            return dim_err(format!("{}x{} mask for {n}x{m} scores", mask.rows(), mask.cols()));
        }
    }
    if let Some(r) = rel {
        let buckets = 2 * r.window + 1;
        if r.keys.rows() != buckets || r.values.rows() != buckets || r.keys.cols() != dh || r.values.cols() != dh {
            return dim_err("relative tables must be (2w+1) × d_head");
        }
    }
    let scale = T::of_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * m];
    let mut scores = vec![T::zero(); n * m];
    let mut head_out = vec![T::zero(); n * dh];

    for h in 0..heads {
        let qh = head_view(q, h, dh);
        let kh = head_view(k, h, dh);
        let vh = head_view(v, h, dh);
        gemm_into(qh, kh.t(), &mut scores, false)?;
        if let Some(r) = rel {
            let nb = 2 * r.window + 1;
            let mut qr = vec![T::zero(); n * nb];
            gemm_into(qh, MatRef::of(r.keys).t(), &mut qr, false)?;
            for i in 0..n {
                for j in 0..m {
                    scores[i * m + j] = scores[i * m + j] + qr[i * nb + relative_bucket(i, j, r.window)];
                }
            }
        }
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        for i in 0..n {
            let srow = &scores[i * m..(i + 1) * m];
            let prow = &mut p[i * m..(i + 1) * m];
            let mut max = T::neg_infinity();
            for (j, &s) in srow.iter().enumerate() {
                if mask.is_none_or(|mk| mk.allows(i, j)) {
                    max = max.max(s * scale);
                }
            }
            if max == T::neg_infinity() {
                return contract(format!("attention row {i} has no allowed key"));
            }
            let mut sum = T::zero();
            for j in 0..m {
                if mask.is_none_or(|mk| mk.allows(i, j)) {
                    let e = (srow[j] * scale - max).exp();
                    prow[j] = e;
                    sum = sum + e;
                }
            }
            for pj in prow.iter_mut() {
                *pj = *pj / sum;
            }
        }
        let pm = MatRef::strided(p, n, m, m as isize, 1);
        gemm_into(pm, vh, &mut head_out, false)?;
        if let Some(r) = rel {
            let nb = 2 * r.window + 1;
            let pb = bucket_sums(p, n, m, r.window);
            gemm_into(
                MatRef::strided(&pb, n, nb, nb as isize, 1),
                MatRef::of(r.values),
                &mut head_out,
                true,
            )?;
        }
        for i in 0..n {
            out[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
        }
    }
    Ok((Tensor::matrix(n, d, out)?, AttentionCache { probs }))
}

/// Collapses an `n × m` matrix into `n × (2w+1)` by summing entries that
/// share a relative bucket.
pub(crate) fn bucket_sums<T: Scalar>(a: &[T], n: usize, m: usize, window: usize) -> Vec<T> {
    let nb = 2 * window + 1;
    let mut out = vec![T::zero(); n * nb];
    for i in 0..n {
        for j in 0..m {
            let b = relative_bucket(i, j, window);
            out[i * nb + b] = out[i * nb + b] + a[i * m + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    #[test]
    fn affine_small_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[2.0, 0.0]);

        let x = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(affine(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(3, 4, &mut rng);
        let w = random(4, 2, &mut rng);
        let b = random(1, 2, &mut rng);
        let got = affine(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = b.data()[j];
                for m in 0..4 {
                    acc += x.get(i, m) * w.get(m, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affine_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let w = Tensor::<f64>::zeros(&[2, 2]);
        let b = Tensor::<f64>::zeros(&[2]);
        assert!(affine(&x, &w, &b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap());
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let b = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        let x = Tensor::from_rows(&[vec![5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap().data(), &[0.0; 3]);

        let g = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let x = Tensor::from_rows(&[vec![-1.0, 1.0]]).unwrap();
        assert_eq!(layer_norm(&x, &g, &b, 0.0).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_matches_explicit_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(1, 7, &mut rng);
        let g = random(1, 7, &mut rng);
        let b = random(1, 7, &mut rng);
        let got = layer_norm(&x, &g, &b, LAYER_NORM_EPS).unwrap();
        let row = x.row(0);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for (j, &v) in row.iter().enumerate() {
            let want = (v - mean) / (var + LAYER_NORM_EPS).sqrt() * g.data()[j] + b.data()[j];
            assert!((got.data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap();
        assert!(cross_entropy(&logits, &[1], &[]).unwrap().abs() < 1e-12);

        let logits = Tensor::<f64>::zeros(&[2, 4]);
        let l = cross_entropy(&logits, &[1, 3], &[]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&logits, &[0, 0], &[0]),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_softmax_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(2, 3, &mut rng);
        let targets = [2, 0];
        let p = softmax_rows(&logits);
        let want = -(p.get(0, 2).ln() + p.get(1, 0).ln()) / 2.0;
        let got = cross_entropy(&logits, &targets, &[]).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn relative_bucket_clamps() {
        assert_eq!(relative_bucket(0, 0, 2), 2);
        assert_eq!(relative_bucket(5, 0, 2), 0);
        assert_eq!(relative_bucket(0, 9, 2), 4);
    }

    fn plain_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
        let (n, m, d) = (q.rows(), k.rows(), q.cols());
        let dh = d / heads;
        let mut out = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            for i in 0..n {
                let mut s: Vec<f64> = (0..m)
                    .map(|j| {
                        (0..dh)
                            .map(|c| q.get(i, h * dh + c) * k.get(j, h * dh + c))
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                softmax_in_place(&mut s);
                for c in 0..dh {
                    out.row_mut(i)[h * dh + c] = (0..m).map(|j| s[j] * v.get(j, h * dh + c)).sum();
                }
            }
        }
        out
    }

    #[test]
    fn zero_relative_tables_reduce_to_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, k, v) = (random(5, 8, &mut rng), random(5, 8, &mut rng), random(5, 8, &mut rng));
        let zeros = Tensor::zeros(&[5, 4]);
        let rel = RelativeTables {
            keys: &zeros,
            values: &zeros,
            window: 2,
        };
        let full = AttentionMask::full(5).unwrap();
        let got = multi_head_attention(&q, &k, &v, 2, Some(rel), Some(&full)).unwrap();
        let want = plain_attention(&q, &k, &v, 2);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_position_returns_value_plus_relative_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(1, 4, &mut rng), random(1, 4, &mut rng), random(1, 4, &mut rng));
        let rk = random(3, 4, &mut rng);
        let rv = random(3, 4, &mut rng);
        let rel = RelativeTables {
            keys: &rk,
            values: &rv,
            window: 1,
        };
        let out = multi_head_attention(&q, &k, &v, 1, Some(rel), None).unwrap();
        for c in 0..4 {
            assert!((out.get(0, c) - (v.get(0, c) + rv.get(1, c))).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_brute_force_relative_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 6;
        let (q, k, v) = (random(n, 4, &mut rng), random(n, 4, &mut rng), random(n, 4, &mut rng));
        let w = 2;
        let rk = random(2 * w + 1, 2, &mut rng);
        let rv = random(2 * w + 1, 2, &mut rng);
        let mask = AttentionMask::causal(n).unwrap();
        let rel = RelativeTables {
            keys: &rk,
            values: &rv,
            window: w,
        };
        let got = multi_head_attention(&q, &k, &v, 2, Some(rel), Some(&mask)).unwrap();
        for h in 0..2 {
            for i in 0..n {
                let clip = |j: usize| (j as i64 - i as i64).clamp(-(w as i64), w as i64) + w as i64;
                let mut s: Vec<f64> = (0..=i)
                    .map(|j| {
                        let o = clip(j) as usize;
                        (0..2)
                            .map(|c| q.get(i, h * 2 + c) * (k.get(j, h * 2 + c) + rk.get(o, c)))
                            .sum::<f64>()
                            / 2f64.sqrt()
                    })
                    .collect();
                softmax_in_place(&mut s);
                for c in 0..2 {
                    let want: f64 = (0..=i)
                        .map(|j| s[j] * (v.get(j, h * 2 + c) + rv.get(clip(j) as usize, c)))
                        .sum();
                    assert!((got.get(i, h * 2 + c) - want).abs() < 1e-12);
                }
            }
        }
    }
}
