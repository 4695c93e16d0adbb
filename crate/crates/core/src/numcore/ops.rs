//! Pure forward kernels. The tape reuses these for its forward values.

use super::tape::{AttentionLayout, MASKED_LOGIT};
use super::tensor::{Real, Tensor};
use super::NumError;

/// `out += a[m×k] · b[k×n]`
pub(crate) fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `out += a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

/// Eight interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumError::Shape {
            op: "matmul",
            detail: format!("inner extents differ: {}×{} by {}×{}", m, k, k2, n),
        });
    }
    let mut out = vec![T::zero(); m * n];
    mm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NumError::InvalidAxis { axis, rank: shape.len() });
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let idx = |j: usize| base + j * inner;
            let mut max = T::neg_infinity();
            for j in 0..extent {
                max = max.max(out[idx(j)]);
            }
            let mut sum = T::zero();
            for j in 0..extent {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..extent {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// In-place softmax of one contiguous slice.
pub(crate) fn softmax_slice<T: Real>(xs: &mut [T]) {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise normalization over the last axis, followed by `gain * x̂ + bias`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NumError> {
    let (out, _, _) = layer_norm_parts(x, gain, bias, eps)?;
    Ok(out)
}

/// Forward layer norm returning `(output, x̂, 1/σ per row)`.
pub(crate) fn layer_norm_parts<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>), NumError> {
    let d = *x.shape().last().ok_or(NumError::Shape {
        op: "layer_norm",
        detail: "scalar input".into(),
    })?;
    if gain.len() != d || bias.len() != d {
        return Err(NumError::Shape {
            op: "layer_norm",
            detail: format!("gain/bias length {}/{} vs embedding {}", gain.len(), bias.len(), d),
        });
    }
    let rows = x.len() / d.max(1);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); x.len()];
    let g = gain.data();
    let b = bias.data();
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = g[j] * h + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU.
#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), NumError> {
    if a.shape() != b.shape() {
        return Err(NumError::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    Ok(())
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `x[n×d] + bias[d]` broadcast over rows.
pub fn add_row_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NumError> {
    let (_, d) = x.dims2()?;
    if bias.len() != d {
        return Err(NumError::Shape {
            op: "add_row_bias",
            detail: format!("bias length {} vs width {}", bias.len(), d),
        });
    }
    let b = bias.data();
    let data = x.data().iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn gelu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| gelu(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn gather_rows<T: Real>(x: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>, NumError> {
    let (n, d) = x.dims2()?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(NumError::Shape { op: "gather_rows", detail: format!("row {} out of {}", bad, n) });
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

/// Grouped multi-head attention forward. When `keep_probs` is set, the
/// per-(group, head) probability matrices are returned for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    sink: Option<(&Tensor<T>, &Tensor<T>)>,
    layout: &AttentionLayout,
    heads: usize,
    keep_probs: bool,
) -> Result<(Tensor<T>, Vec<Vec<T>>), NumError> {
    let (n, d) = q.dims2()?;
    for other in [k, v] {
        if other.shape() != [n, d] {
            return Err(NumError::Shape {
                op: "attention",
                detail: format!("q/k/v shapes differ: {:?} vs {:?}", [n, d], other.shape()),
            });
        }
    }
    if heads == 0 || d % heads != 0 {
        return Err(NumError::Shape {
            op: "attention",
            detail: format!("width {} not divisible by {} heads", d, heads),
        });
    }
    if let Some((sk, sv)) = sink {
        if sk.len() != d || sv.len() != d {
            return Err(NumError::Shape { op: "attention", detail: "sink width".into() });
        }
    }
    for g in &layout.groups {
        if g.members.len() != g.key_ok.len() || g.members.iter().any(|&m| m >= n) {
            return Err(NumError::Shape { op: "attention", detail: "bad group".into() });
        }
    }

    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let masked = T::from_f64(MASKED_LOGIT);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let sink_data = sink.map(|(sk, sv)| (sk.data(), sv.data()));
    let extra = usize::from(sink.is_some());

    let mut out = vec![T::zero(); n * d];
    let mut probs = Vec::new();
    let mut scratch = Vec::new();
    for g in &layout.groups {
        let m = g.members.len();
        let width = m + extra;
        for h in 0..heads {
            let off = h * dh;
            let mut p = if keep_probs { vec![T::zero(); m * width] } else { Vec::new() };
            for (qi, &qc) in g.members.iter().enumerate() {
                let qrow = &qd[qc * d + off..qc * d + off + dh];
                let prow: &mut [T] = if keep_probs {
                    &mut p[qi * width..(qi + 1) * width]
                } else {
                    scratch.clear();
                    scratch.resize(width, T::zero());
                    &mut scratch
                };
                for (kj, &kc) in g.members.iter().enumerate() {
                    prow[kj] = if g.key_ok[kj] {
                        scale * dot(qrow, &kd[kc * d + off..kc * d + off + dh])
                    } else {
                        masked
                    };
                }
                if let Some((sk, _)) = sink_data {
                    prow[m] = scale * dot(qrow, &sk[off..off + dh]);
                }
                softmax_slice(prow);
                let orow = &mut out[qc * d + off..qc * d + off + dh];
                for (kj, &kc) in g.members.iter().enumerate() {
                    let w = prow[kj];
                    if w == T::zero() {
                        continue;
                    }
                    let vrow = &vd[kc * d + off..kc * d + off + dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += w * vv;
                    }
                }
                if let Some((_, sv)) = sink_data {
                    let w = prow[m];
                    for (o, &vv) in orow.iter_mut().zip(&sv[off..off + dh]) {
                        *o += w * vv;
                    }
                }
            }
            if keep_probs {
                probs.push(p);
            }
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, probs))
}
