//! Differentiable primitives. Each forward has a matching `*_backward` that
//! maps the upstream gradient to gradients for every input.

use super::{NumericsError, Scalar, Tensor};

fn mismatch(msg: String) -> NumericsError {
    NumericsError::ShapeMismatch(msg)
}

/// `[m,k] x [k,n] -> [m,n]`, accumulating over `k` innermost in index order.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(mismatch(format!("matmul inner dims {:?} x {:?}", a.shape(), b.shape())));
    }
    let out = matmul_raw(a.data(), b.data(), m, k, n);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    // Column-major copy of b keeps the k loop contiguous without changing
    // the summation order.
    let mut bt = vec![S::zero(); k * n];
    for kk in 0..k {
        for j in 0..n {
            bt[j * k + kk] = b[kk * n + j];
        }
    }
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let col = &bt[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc += row[kk] * col[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a^T b` for `a: [m,k]`, `b: [m,n]`, giving `[k,n]`.
pub(crate) fn matmul_tn_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (kk, &av) in ar.iter().enumerate() {
            let o = &mut out[kk * n..(kk + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m,k]`, `b: [n,k]`, giving `[m,n]`.
pub(crate) fn matmul_nt_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for kk in 0..k {
                acc += ar[kk] * br[kk];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Gradients of `matmul` with respect to `a` and `b`.
pub fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>), NumericsError> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if grad_out.shape() != [m, n] {
        return Err(mismatch(format!("matmul grad {:?}", grad_out.shape())));
    }
    let da = matmul_nt_raw(grad_out.data(), b.data(), m, n, k);
    let db = matmul_tn_raw(a.data(), grad_out.data(), m, k, n);
    Ok((Tensor::new(vec![m, k], da)?, Tensor::new(vec![k, n], db)?))
}

/// Affine map `x w + b` for `x: [n,in]`, `w: [in,out]`, `b: [out]`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    let mut y = matmul(x, w)?;
    let (_, out) = y.dims2()?;
    if b.len() != out {
        return Err(mismatch(format!("bias {:?} for width {out}", b.shape())));
    }
    for row in y.data_mut().chunks_mut(out) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(y)
}

pub struct LinearGrads<S: Scalar> {
    pub x: Tensor<S>,
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

pub fn linear_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LinearGrads<S>, NumericsError> {
    let (dx, dw) = matmul_backward(x, w, grad_out)?;
    let (_, out) = grad_out.dims2()?;
    let mut db = vec![S::zero(); out];
    for row in grad_out.data().chunks(out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        x: dx,
        w: dw,
        b: Tensor::new(w.shape()[1..].to_vec(), db)?,
    })
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<S: Scalar> {
    xhat: Vec<S>,
    rstd: Vec<S>,
}

pub const LN_EPS: f64 = 1e-6;

/// Row-wise `(x - mean) / sqrt(var + eps) * gamma + beta` with biased variance.
pub fn layer_norm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> Result<(Tensor<S>, LayerNormCache<S>), NumericsError> {
    let (n, e) = x.dims2()?;
    if gamma.len() != e || beta.len() != e {
        return Err(mismatch(format!(
            "layer_norm width {e} with gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let eps = S::lit(LN_EPS);
    let ef = S::lit(e as f64);
    let mut y = vec![S::zero(); n * e];
    let mut xhat = vec![S::zero(); n * e];
    let mut rstd = vec![S::zero(); n];
    for r in 0..n {
        let row = &x.data()[r * e..(r + 1) * e];
        let mean = row.iter().copied().sum::<S>() / ef;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / ef;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..e {
            let h = (row[c] - mean) * rs;
            xhat[r * e + c] = h;
            y[r * e + c] = h * gamma.data()[c] + beta.data()[c];
        }
    }
    Ok((Tensor::new(vec![n, e], y)?, LayerNormCache { xhat, rstd }))
}

pub struct LayerNormGrads<S: Scalar> {
    pub x: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub fn layer_norm_backward<S: Scalar>(
    cache: &LayerNormCache<S>,
    gamma: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> Result<LayerNormGrads<S>, NumericsError> {
    let (n, e) = grad_out.dims2()?;
    if cache.xhat.len() != n * e || gamma.len() != e {
        return Err(mismatch("layer_norm backward shapes".into()));
    }
    let ef = S::lit(e as f64);
    let mut dx = vec![S::zero(); n * e];
    let mut dgamma = vec![S::zero(); e];
    let mut dbeta = vec![S::zero(); e];
    let mut dxhat = vec![S::zero(); e];
    for r in 0..n {
        let dy = &grad_out.data()[r * e..(r + 1) * e];
        let xh = &cache.xhat[r * e..(r + 1) * e];
        let mut mean_d = S::zero();
        let mut mean_dx = S::zero();
        for c in 0..e {
            dgamma[c] += dy[c] * xh[c];
            dbeta[c] += dy[c];
            dxhat[c] = dy[c] * gamma.data()[c];
            mean_d += dxhat[c];
            mean_dx += dxhat[c] * xh[c];
        }
        mean_d /= ef;
        mean_dx /= ef;
        let rs = cache.rstd[r];
        for c in 0..e {
            dx[r * e + c] = rs * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    Ok(LayerNormGrads {
        x: Tensor::new(vec![n, e], dx)?,
        gamma: Tensor::new(gamma.shape().to_vec(), dgamma)?,
        beta: Tensor::new(gamma.shape().to_vec(), dbeta)?,
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    x.map(|v| half * v * (S::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<S: Scalar>(x: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    if x.shape() != grad_out.shape() {
        return Err(mismatch("gelu backward shapes".into()));
    }
    let c = S::lit(GELU_C);
    let a = S::lit(GELU_A);
    let half = S::lit(0.5);
    let three_a = S::lit(3.0 * GELU_A);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let t = (c * (v + a * v * v * v)).tanh();
            let d = half * (S::one() + t) + half * v * (S::one() - t * t) * c * (S::one() + three_a * v * v);
            d * g
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Max-subtracted softmax over the last dimension.
pub fn softmax_lastdim<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| mismatch("softmax of rank-0 tensor".into()))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        softmax_row(row);
    }
    Ok(out)
}

pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of softmax given its output `y`.
pub fn softmax_lastdim_backward<S: Scalar>(y: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>, NumericsError> {
    if y.shape() != grad_out.shape() {
        return Err(mismatch("softmax backward shapes".into()));
    }
    let n = *y.shape().last().unwrap_or(&1);
    let mut dx = vec![S::zero(); y.len()];
    for ((yr, gr), dr) in y.data().chunks(n).zip(grad_out.data().chunks(n)).zip(dx.chunks_mut(n)) {
        softmax_row_backward(yr, gr, dr);
    }
    Tensor::new(y.shape().to_vec(), dx)
}

pub(crate) fn softmax_row_backward<S: Scalar>(y: &[S], dy: &[S], dx: &mut [S]) {
    let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for i in 0..y.len() {
        dx[i] = y[i] * (dy[i] - dot);
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}
