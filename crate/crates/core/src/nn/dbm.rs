use super::layers::Conv;
use super::params::{Bound, Builder, Init};
use super::CostSink;
use crate::complexity::Section;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DbmConfig {
    pub channels: usize,
    pub reduction: usize,
    /// Deformable kernel size `S`.
    pub kernel: usize,
}

impl DbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "DBM reduction {} must divide its {} channels",
                self.reduction, self.channels
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "deformable kernel {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn reduced(&self) -> usize {
        self.channels / self.reduction
    }

    /// Three offset components per kernel tap.
    pub fn offset_channels(&self) -> usize {
        3 * self.kernel.pow(3)
    }
}

/// Deformable bottleneck: 1×1×1 reduce, offsets from a 3×3×3 conv on the
/// reduced features, deformable conv, 1×1×1 restore, residual add.
#[derive(Debug, Clone)]
pub struct Dbm {
    pub cfg: DbmConfig,
    pub reduce: Conv,
    pub offset: Conv,
    pub deform: Conv,
    pub expand: Conv,
}

impl Dbm {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cfg: DbmConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, m, s) = (cfg.channels, cfg.reduced(), cfg.kernel);
        b.scoped(name, |b| {
            Ok(Self {
                cfg,
                reduce: Conv::build(b, "reduce", c, m, ConvSpec::cube(1, 1, 0), true)?,
                // zero offsets make the module start as a plain bottleneck
                offset: Conv::build_with(
                    b,
                    "offset",
                    m,
                    cfg.offset_channels(),
                    ConvSpec::same(3),
                    true,
                    Some(Init::Zeros),
                )?,
                deform: Conv::build(b, "deform", m, m, ConvSpec::same(s), true)?,
                expand: Conv::build(b, "expand", m, c, ConvSpec::cube(1, 1, 0), true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let r = self.reduce.forward(tape, p, x)?;
        let r = tape.relu(r);
        let off = self.offset.forward(tape, p, r)?;
        let bias = self.deform.bias.map(|b| p.var(b));
        let h = tape.deform_conv3d(r, p.var(self.deform.weight), off, bias, &self.deform.spec)?;
        let h = tape.relu(h);
        let h = self.expand.forward(tape, p, h)?;
        tape.add(x, h)
    }

    pub fn params(&self) -> u64 {
        [&self.reduce, &self.offset, &self.deform, &self.expand]
            .iter()
            .map(|c| c.params())
            .sum()
    }

    pub fn cost(&self, sink: &mut CostSink, dims: [usize; 3]) -> Result<()> {
        let s = Section::Dbm;
        let vox = dims.iter().product::<usize>() as u64;
        let m = self.cfg.reduced() as u64;
        for conv in [&self.reduce, &self.offset] {
            let (_, macs) = conv.cost(dims)?;
            sink.push(s, &conv.name, conv.params(), macs, 0);
        }
        // trilinear sampling: 8 reads per tap and channel, counted as aux
        let (_, macs) = self.deform.cost(dims)?;
        let taps = self.deform.spec.taps() as u64;
        sink.push(
            s,
            &self.deform.name,
            self.deform.params(),
            macs,
            vox * m * taps * 8 + 2 * vox * m,
        );
        let (_, macs) = self.expand.cost(dims)?;
        sink.push(
            s,
            &self.expand.name,
            self.expand.params(),
            macs,
            vox * self.cfg.channels as u64,
        );
        Ok(())
    }
}
