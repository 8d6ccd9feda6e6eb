//! Elementwise ops, reductions and layout changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn same_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

pub(crate) fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    (zip_map(g, b, |g, b| g * b), zip_map(g, a, |g, a| g * a))
}

pub(crate) fn row_bias_grad<T: Scalar>(g: &Tensor<T>, d: usize) -> Tensor<T> {
    let mut db = vec![T::zero(); d];
    for row in g.data().chunks(d) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    Tensor::from_parts(vec![d], db)
}

pub(crate) fn relu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(x, g, |x, g| if x > T::zero() { g } else { T::zero() })
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (k, a) = (T::c(SQRT_2_OVER_PI), T::c(GELU_CUBIC));
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (k, a) = (T::c(SQRT_2_OVER_PI), T::c(GELU_CUBIC));
    let half = T::c(0.5);
    let t = (k * (x + a * x * x * x)).tanh();
    let du = k * (T::one() + T::c(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub(crate) fn gelu_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_map(x, g, |x, g| g * gelu_grad(x))
}

pub(crate) fn concat_backward<T: Scalar>(shapes: &[&[usize]], g: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_parts(s.to_vec(), g.data()[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[i_0, .., i_r] = x[j]` where output axis `a` walks input axis `axes[a]`.
fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[src]);
        for a in (0..rank).rev() {
            idx[a] += 1;
            src += src_strides[a];
            if idx[a] < out_shape[a] {
                break;
            }
            src -= src_strides[a] * out_shape[a];
            idx[a] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn permute_backward<T: Scalar>(g: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    permute_data(g, &inverse_axes(axes))
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a length-`d` vector to every row of an `…×d` tensor.
    pub fn add_row_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(input).last().expect("non-empty shape");
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_row_bias",
                format!("bias {:?} for rows of {d}", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let x = self.value(input);
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += *bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRowBias { input, bias }, &[input, bias]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let factor = T::c(factor);
        let out = map(self.value(input), |x| x * factor);
        self.push(out, Op::Scale { input, factor }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = map(self.value(input), |x| x.max(T::zero()));
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn gelu(&mut self, input: Var) -> Var {
        let out = map(self.value(input), gelu);
        self.push(out, Op::Gelu { input }, &[input])
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let s = self.shape(v);
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims {:?} vs {tail:?}", &s[1..]),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { input }, &[input]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.value(input).rank();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..rank).collect::<Vec<_>>() {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let out = permute_data(self.value(input), axes);
        Ok(self.push(
            out,
            Op::Permute {
                input,
                axes: axes.to_vec(),
            },
            &[input],
        ))
    }

    /// Inverted dropout with drop probability `p`. Identity unless the tape
    /// is in training mode.
    pub fn dropout(&mut self, input: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.training() || p == 0.0 {
            return Ok(input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::c(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.push(out, Op::Dropout { input, mask }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        self.push(out, Op::Sum { input }, &[input])
    }

    /// `Σ w_i x_i` with fixed weights; the usual scalar probe for gradient
    /// checks.
    pub fn weighted_sum(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} elements", weights.len(), x.numel()),
            ));
        }
        let weights: Vec<T> = weights.iter().map(|w| T::c(*w)).collect();
        let s = x.data().iter().zip(&weights).map(|(a, w)| *a * *w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum { input, weights },
            &[input],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trips() {
        let x = Tensor::<f64>::from_f64(&[2, 3, 4], &(0..24).map(f64::from).collect::<Vec<_>>())
            .unwrap();
        let p = permute_data(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        assert_eq!(permute_backward(&p, &[2, 0, 1]), x);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert!((gelu(-3.0f64) + 0.003_637_392_081_772_99).abs() < 1e-12);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[10]));
        assert_eq!(tape.dropout(x, 0.5, 1).unwrap(), x);
        tape.set_training(true);
        let y = tape.dropout(x, 0.5, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn concat_checks_trailing_dims() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 2, 3]));
        assert!(tape.concat(&[a, b]).is_err());
    }
}
