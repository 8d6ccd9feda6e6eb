use super::params::{Bound, Builder, Init, ParamId};
use crate::error::Result;
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

/// 3D convolution layer `C_in → C_out`.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub spec: ConvSpec,
    pub(crate) weight: ParamId,
    pub(crate) bias: Option<ParamId>,
}

impl Conv {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        Self::build_with(b, name, cin, cout, spec, bias, None)
    }

    /// Like [`Conv::build`] with an explicit weight initializer.
    pub fn build_with<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        spec: ConvSpec,
        bias: bool,
        init: Option<Init>,
    ) -> Result<Self> {
        let cin_g = cin / spec.groups;
        let [kh, kw, kd] = spec.kernel;
        let init = init.unwrap_or(Init::Kaiming {
            fan_in: cin_g * spec.taps(),
        });
        b.scoped(name, |b| {
            let weight = b.param("weight", &[cout, cin_g, kh, kw, kd], init)?;
            let bias = if bias {
                Some(b.param("bias", &[cout], Init::Zeros)?)
            } else {
                None
            };
            Ok(Self {
                name: b.qualify(""),
                cin,
                cout,
                spec,
                weight,
                bias,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv3d(
            x,
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            &self.spec,
        )
    }

    pub fn params(&self) -> u64 {
        let w = self.cout * (self.cin / self.spec.groups) * self.spec.taps();
        (w + if self.bias.is_some() { self.cout } else { 0 }) as u64
    }

    /// Output extents and multiply-accumulate count for `in_dims`.
    pub fn cost(&self, in_dims: [usize; 3]) -> Result<([usize; 3], u64)> {
        let out = self.spec.output_dims(in_dims)?;
        let vox: usize = out.iter().product();
        let macs = vox * self.cout * (self.cin / self.spec.groups) * self.spec.taps();
        Ok((out, macs as u64))
    }
}

/// Token-wise affine map `x·W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub(crate) weight: ParamId,
    pub(crate) bias: Option<ParamId>,
}

impl Linear {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::build_with(b, name, d_in, d_out, bias, Init::Kaiming { fan_in: d_in })
    }

    pub fn build_with<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.param("weight", &[d_in, d_out], init)?;
            let bias = if bias {
                Some(b.param("bias", &[d_out], Init::Zeros)?)
            } else {
                None
            };
            Ok(Self {
                name: b.qualify(""),
                d_in,
                d_out,
                weight,
                bias,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(b) => tape.add_row_bias(y, p.var(b)),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> u64 {
        (self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }) as u64
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.d_in * self.d_out) as u64
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
}

impl LayerNorm {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let gamma = b.param("weight", &[dim], Init::Ones)?;
            let beta = b.param("bias", &[dim], Init::Zeros)?;
            Ok(Self {
                name: b.qualify(""),
                dim,
                gamma,
                beta,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }

    pub fn params(&self) -> u64 {
        2 * self.dim as u64
    }
}
