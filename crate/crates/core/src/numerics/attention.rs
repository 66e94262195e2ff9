//! Multi-head self-attention over a token matrix `[n, e]`.

use super::ops::{
    linear, linear_backward, matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_row, softmax_row_backward,
};
use super::{NumericsError, Scalar, Tensor};

/// Fused query/key/value projection followed by the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<S: Scalar = f32> {
    /// `[e, 3e]`, columns ordered q | k | v.
    pub wqkv: Tensor<S>,
    pub bqkv: Tensor<S>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<S: Scalar> {
    x: Tensor<S>,
    qkv: Vec<S>,
    /// Per head `[n, n]` attention weights.
    probs: Vec<Vec<S>>,
    concat: Tensor<S>,
}

impl<S: Scalar> Attention<S> {
    pub fn zeros(embed: usize) -> Self {
        Self {
            wqkv: Tensor::zeros(&[embed, 3 * embed]),
            bqkv: Tensor::zeros(&[3 * embed]),
            wo: Tensor::zeros(&[embed, embed]),
            bo: Tensor::zeros(&[embed]),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, heads: usize) -> Result<(Tensor<S>, AttentionCache<S>), NumericsError> {
        let (n, e) = x.dims2()?;
        if heads == 0 || e % heads != 0 {
            return Err(NumericsError::BadHeadCount { embed: e, heads });
        }
        let dh = e / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let qkv = linear(x, &self.wqkv, &self.bqkv)?;
        let qkv = qkv.into_data();
        let w3 = 3 * e;

        let mut concat = vec![S::zero(); n * e];
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = gather_cols(&qkv, n, w3, h * dh, dh);
            let k = gather_cols(&qkv, n, w3, e + h * dh, dh);
            let v = gather_cols(&qkv, n, w3, 2 * e + h * dh, dh);
            let mut scores = matmul_nt_raw(&q, &k, n, dh, n);
            for row in scores.chunks_mut(n) {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                softmax_row(row);
            }
            let o = matmul_raw(&scores, &v, n, n, dh);
            scatter_cols(&mut concat, &o, n, e, h * dh, dh);
            probs.push(scores);
        }
        let concat = Tensor::new(vec![n, e], concat)?;
        let out = linear(&concat, &self.wo, &self.bo)?;
        Ok((
            out,
            AttentionCache {
                x: x.clone(),
                qkv,
                probs,
                concat,
            },
        ))
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(
        &self,
        cache: &AttentionCache<S>,
        grad_out: &Tensor<S>,
        heads: usize,
    ) -> Result<(Tensor<S>, Attention<S>), NumericsError> {
        let (n, e) = cache.x.dims2()?;
        let dh = e / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let w3 = 3 * e;

        let out_grads = linear_backward(&cache.concat, &self.wo, grad_out)?;
        let dconcat = out_grads.x.into_data();
        let mut dqkv = vec![S::zero(); n * w3];
        let mut ds = vec![S::zero(); n * n];
        for h in 0..heads {
            let q = gather_cols(&cache.qkv, n, w3, h * dh, dh);
            let k = gather_cols(&cache.qkv, n, w3, e + h * dh, dh);
            let v = gather_cols(&cache.qkv, n, w3, 2 * e + h * dh, dh);
            let p = &cache.probs[h];
            let d_o = gather_cols(&dconcat, n, e, h * dh, dh);
            let dp = matmul_nt_raw(&d_o, &v, n, dh, n);
            let dv = matmul_tn_raw(p, &d_o, n, n, dh);
            for r in 0..n {
                softmax_row_backward(
                    &p[r * n..(r + 1) * n],
                    &dp[r * n..(r + 1) * n],
                    &mut ds[r * n..(r + 1) * n],
                );
            }
            for s in ds.iter_mut() {
                *s *= scale;
            }
            let dq = matmul_raw(&ds, &k, n, n, dh);
            let dk = matmul_tn_raw(&ds, &q, n, n, dh);
            scatter_cols(&mut dqkv, &dq, n, w3, h * dh, dh);
            scatter_cols(&mut dqkv, &dk, n, w3, e + h * dh, dh);
            scatter_cols(&mut dqkv, &dv, n, w3, 2 * e + h * dh, dh);
        }
        let dqkv = Tensor::new(vec![n, w3], dqkv)?;
        let in_grads = linear_backward(&cache.x, &self.wqkv, &dqkv)?;
        Ok((
            in_grads.x,
            Attention {
                wqkv: in_grads.w,
                bqkv: in_grads.b,
                wo: out_grads.w,
                bo: out_grads.b,
            },
        ))
    }
}

fn gather_cols<S: Scalar>(src: &[S], rows: usize, width: usize, start: usize, count: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(rows * count);
    for r in 0..rows {
        out.extend_from_slice(&src[r * width + start..r * width + start + count]);
    }
    out
}

fn scatter_cols<S: Scalar>(dst: &mut [S], src: &[S], rows: usize, width: usize, start: usize, count: usize) {
    for r in 0..rows {
        dst[r * width + start..r * width + start + count].copy_from_slice(&src[r * count..(r + 1) * count]);
    }
}
