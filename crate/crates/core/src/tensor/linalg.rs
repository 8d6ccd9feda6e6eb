//! Matrix products, softmax, layer normalization and grouped multi-head
//! attention.

use super::tape::{AttentionGroups, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn reach(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Strided `c = alpha·a·b + beta·c` for `a: m×k`, `b: k×n`, `c: m×n`.
/// Strides are `(row, column)` element strides. Panics if any addressed
/// element falls outside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    beta: T,
    c: &mut [T],
    sc: (usize, usize),
) {
    assert!(reach(m, k, sa) <= a.len(), "gemm: lhs out of bounds");
    assert!(reach(k, n, sb) <= b.len(), "gemm: rhs out of bounds");
    assert!(reach(m, n, sc) <= c.len(), "gemm: output out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}

fn matrix_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(
            op,
            format!("expected a matrix, got {shape:?}"),
        )),
    }
}

pub(crate) fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a.shape(), "matmul")?;
    let (k2, n) = matrix_dims(b.shape(), "matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {m}×{k} · {k2}×{n}"),
        ));
    }
    let mut c = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        (k, 1),
        b.data(),
        (n, 1),
        T::zero(),
        &mut c,
        (n, 1),
    );
    Ok(Tensor::from_parts(vec![m, n], c))
}

pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut da = vec![T::zero(); m * k];
    let mut db = vec![T::zero(); k * n];
    gemm(
        m,
        n,
        k,
        T::one(),
        g.data(),
        (n, 1),
        b.data(),
        (1, n),
        T::zero(),
        &mut da,
        (k, 1),
    );
    gemm(
        k,
        m,
        n,
        T::one(),
        a.data(),
        (1, k),
        g.data(),
        (n, 1),
        T::zero(),
        &mut db,
        (n, 1),
    );
    (
        Tensor::from_parts(vec![m, k], da),
        Tensor::from_parts(vec![k, n], db),
    )
}

fn softmax_rows<T: Scalar>(data: &mut [T], n: usize) {
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().expect("non-empty shape");
    let mut dx = vec![T::zero(); y.numel()];
    for ((yr, gr), dr) in y
        .data()
        .chunks(n)
        .zip(g.data().chunks(n))
        .zip(dx.chunks_mut(n))
    {
        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        for i in 0..n {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let inv_d = T::one() / T::c(d as f64);
    let mut dx = vec![T::zero(); g.numel()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for (r, ((gr, xr), dr)) in g
        .data()
        .chunks(d)
        .zip(xhat.chunks(d))
        .zip(dx.chunks_mut(d))
        .enumerate()
    {
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            dgamma[i] += gr[i] * xr[i];
            dbeta[i] += gr[i];
            let dxh = gr[i] * gamma.data()[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xr[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            let dxh = gr[i] * gamma.data()[i];
            dr[i] = rstd[r] * (dxh - mean_dxhat - xr[i] * mean_dxhat_xhat);
        }
    }
    (
        Tensor::from_parts(g.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

struct HeadDims {
    tokens: usize,
    dq: usize,
    dv: usize,
    hq: usize,
    hv: usize,
}

fn attention_dims(
    q: &[usize],
    k: &[usize],
    v: &[usize],
    groups: &AttentionGroups,
    heads: usize,
) -> Result<HeadDims> {
    let (n, dq) = matrix_dims(q, "attention")?;
    let (nk, dk) = matrix_dims(k, "attention")?;
    let (nv, dv) = matrix_dims(v, "attention")?;
    if n != nk || n != nv || dq != dk {
        return Err(Error::shape(
            "attention",
            format!("q {q:?}, k {k:?}, v {v:?} are inconsistent"),
        ));
    }
    if n != groups.tokens() {
        return Err(Error::shape(
            "attention",
            format!("{n} tokens but the grouping covers {}", groups.tokens()),
        ));
    }
    if heads == 0 || dq % heads != 0 || dv % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads must divide the query/key width {dq} and the value width {dv}"
        )));
    }
    Ok(HeadDims {
        tokens: n,
        dq,
        dv,
        hq: dq / heads,
        hv: dv / heads,
    })
}

/// Copies the columns `col0..col0+width` of the selected rows into a dense
/// `rows.len()×width` block.
fn gather<T: Scalar>(
    src: &[T],
    stride: usize,
    rows: &[usize],
    col0: usize,
    width: usize,
    dst: &mut Vec<T>,
) {
    dst.clear();
    for &r in rows {
        dst.extend_from_slice(&src[r * stride + col0..][..width]);
    }
}

fn scatter_add<T: Scalar>(
    dst: &mut [T],
    stride: usize,
    rows: &[usize],
    col0: usize,
    width: usize,
    block: &[T],
) {
    for (i, &r) in rows.iter().enumerate() {
        let d = &mut dst[r * stride + col0..][..width];
        for (a, b) in d.iter_mut().zip(&block[i * width..(i + 1) * width]) {
            *a += *b;
        }
    }
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    groups: &AttentionGroups,
    heads: usize,
    scale: T,
) -> Result<(Tensor<T>, Vec<T>)> {
    let hd = attention_dims(q.shape(), k.shape(), v.shape(), groups, heads)?;
    let mut out = vec![T::zero(); hd.tokens * hd.dv];
    let probs_len: usize = groups
        .groups()
        .iter()
        .map(|g| heads * g.len() * g.len())
        .sum();
    let mut probs = Vec::with_capacity(probs_len);
    let (mut qg, mut kg, mut vg) = (Vec::new(), Vec::new(), Vec::new());
    for rows in groups.groups() {
        let n = rows.len();
        for h in 0..heads {
            gather(q.data(), hd.dq, rows, h * hd.hq, hd.hq, &mut qg);
            gather(k.data(), hd.dq, rows, h * hd.hq, hd.hq, &mut kg);
            gather(v.data(), hd.dv, rows, h * hd.hv, hd.hv, &mut vg);
            let start = probs.len();
            probs.resize(start + n * n, T::zero());
            let p = &mut probs[start..];
            gemm(
                n,
                hd.hq,
                n,
                scale,
                &qg,
                (hd.hq, 1),
                &kg,
                (1, hd.hq),
                T::zero(),
                p,
                (n, 1),
            );
            softmax_rows(p, n);
            let mut o = vec![T::zero(); n * hd.hv];
            gemm(
                n,
                n,
                hd.hv,
                T::one(),
                p,
                (n, 1),
                &vg,
                (hd.hv, 1),
                T::zero(),
                &mut o,
                (hd.hv, 1),
            );
            scatter_add(&mut out, hd.dv, rows, h * hd.hv, hd.hv, &o);
        }
    }
    Ok((Tensor::from_parts(vec![hd.tokens, hd.dv], out), probs))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    groups: &AttentionGroups,
    heads: usize,
    scale: T,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let hd = attention_dims(q.shape(), k.shape(), v.shape(), groups, heads)
        .expect("validated in forward");
    let mut dq = vec![T::zero(); q.numel()];
    let mut dk = vec![T::zero(); k.numel()];
    let mut dv = vec![T::zero(); v.numel()];
    let (mut qg, mut kg, mut vg, mut gg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut off = 0;
    for rows in groups.groups() {
        let n = rows.len();
        for h in 0..heads {
            let p = &probs[off..off + n * n];
            off += n * n;
            gather(q.data(), hd.dq, rows, h * hd.hq, hd.hq, &mut qg);
            gather(k.data(), hd.dq, rows, h * hd.hq, hd.hq, &mut kg);
            gather(v.data(), hd.dv, rows, h * hd.hv, hd.hv, &mut vg);
            gather(g.data(), hd.dv, rows, h * hd.hv, hd.hv, &mut gg);

            let mut dvg = vec![T::zero(); n * hd.hv];
            gemm(
                n,
                n,
                hd.hv,
                T::one(),
                p,
                (1, n),
                &gg,
                (hd.hv, 1),
                T::zero(),
                &mut dvg,
                (hd.hv, 1),
            );
            scatter_add(&mut dv, hd.dv, rows, h * hd.hv, hd.hv, &dvg);

            let mut ds = vec![T::zero(); n * n];
            gemm(
                n,
                hd.hv,
                n,
                T::one(),
                &gg,
                (hd.hv, 1),
                &vg,
                (1, hd.hv),
                T::zero(),
                &mut ds,
                (n, 1),
            );
            for (dr, pr) in ds.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = dr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = *pv * (*d - dot);
                }
            }
            let mut dqg = vec![T::zero(); n * hd.hq];
            gemm(
                n,
                n,
                hd.hq,
                scale,
                &ds,
                (n, 1),
                &kg,
                (hd.hq, 1),
                T::zero(),
                &mut dqg,
                (hd.hq, 1),
            );
            scatter_add(&mut dq, hd.dq, rows, h * hd.hq, hd.hq, &dqg);
            let mut dkg = vec![T::zero(); n * hd.hq];
            gemm(
                n,
                n,
                hd.hq,
                scale,
                &ds,
                (1, n),
                &qg,
                (hd.hq, 1),
                T::zero(),
                &mut dkg,
                (hd.hq, 1),
            );
            scatter_add(&mut dk, hd.dq, rows, h * hd.hq, hd.hq, &dkg);
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dv),
    )
}

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = *x.shape().last().expect("non-empty shape");
        let mut data = x.data().to_vec();
        softmax_rows(&mut data, n);
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Softmax { input }, &[input])
    }

    /// Normalizes each last-axis slice to zero mean and unit (biased)
    /// variance, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let x = self.value(input);
        let d = *x.shape().last().expect("non-empty shape");
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} must be [{d}]",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let eps = T::c(eps);
        let inv_d = T::one() / T::c(d as f64);
        let rows = x.numel() / d;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.numel()];
        for (r, xr) in x.data().chunks(d).enumerate() {
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (xr[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = gv.data()[i] * h + bv.data()[i];
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[input, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention restricted to token groups.
    /// Head `h` uses query/key columns `h·dq/H..(h+1)·dq/H` and value columns
    /// `h·dv/H..(h+1)·dv/H`; head outputs are concatenated column-wise.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: &AttentionGroups,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let scale = T::c(scale);
        let (out, probs) = attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            groups,
            heads,
            scale,
        )?;
        let op = Op::Attention {
            q,
            k,
            v,
            groups: groups.clone(),
            heads,
            scale,
            probs,
        };
        Ok(self.push(out, op, &[q, k, v]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_honours_strides() {
        // a = [[1,2],[3,4]] read transposed via strides
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn gemm_rejects_short_buffers() {
        let mut c = [0.0f64; 3];
        gemm(
            2,
            2,
            2,
            1.0,
            &[0.0; 4],
            (2, 1),
            &[0.0; 4],
            (2, 1),
            0.0,
            &mut c,
            (2, 1),
        );
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul_forward(&a, &b).is_err());
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut row = [1000.0f64, 0.0];
        softmax_rows(&mut row, 2);
        assert!((row[0] - 1.0).abs() < 1e-12 && row[1] < 1e-300 + 1e-12);
        assert!(row.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn attention_heads_must_divide_widths() {
        let q = Tensor::<f64>::zeros(&[4, 6]);
        let v = Tensor::<f64>::zeros(&[4, 4]);
        let err = attention_forward(&q, &q, &v, &AttentionGroups::joint(4), 4, 1.0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
