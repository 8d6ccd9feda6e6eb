use super::layers::Conv;
use super::params::{Bound, Builder};
use super::CostSink;
use crate::complexity::Section;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

/// Pre-activated residual block: `x + conv2(relu(conv1(relu(x))))`.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResBlock {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                conv1: Conv::build(b, "conv1", channels, channels, ConvSpec::same(3), true)?,
                conv2: Conv::build(b, "conv2", channels, channels, ConvSpec::same(3), true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.relu(x);
        let h = self.conv1.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        tape.add(x, h)
    }

    fn cost(&self, sink: &mut CostSink, section: Section, dims: [usize; 3]) -> Result<()> {
        let vox: u64 = dims.iter().product::<usize>() as u64;
        let c = self.conv1.cin as u64;
        for conv in [&self.conv1, &self.conv2] {
            let (_, macs) = conv.cost(dims)?;
            // relu before each conv, residual add after the second
            sink.push(section, &conv.name, conv.params(), macs, vox * c);
        }
        sink.rows.last_mut().expect("just pushed").aux_ops += vox * c;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub down: Conv,
    pub blocks: Vec<ResBlock>,
}

/// Stem plus three stride-2 stages, each followed by residual blocks.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub stem: Conv,
    pub stages: Vec<Stage>,
}

pub struct EncoderOutput {
    /// Deepest feature map (`K×H/8×W/8×D/8`).
    pub features: Var,
    /// Full, half and quarter resolution maps, shallowest first.
    pub skips: Vec<Var>,
}

impl Encoder {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        in_channels: usize,
        stem: usize,
        widths: &[usize],
        blocks_per_stage: usize,
    ) -> Result<Self> {
        b.scoped("encoder", |b| {
            let stem_conv = Conv::build(b, "stem", in_channels, stem, ConvSpec::same(3), true)?;
            let mut cin = stem;
            let mut stages = Vec::with_capacity(widths.len());
            for (i, &w) in widths.iter().enumerate() {
                let stage = b.scoped(&format!("stage{}", i + 1), |b| {
                    let down = Conv::build(b, "down", cin, w, ConvSpec::cube(3, 2, 1), true)?;
                    let blocks = (0..blocks_per_stage)
                        .map(|r| ResBlock::build(b, &format!("res{}", r + 1), w))
                        .collect::<Result<_>>()?;
                    Ok(Stage { down, blocks })
                })?;
                stages.push(stage);
                cin = w;
            }
            Ok(Self {
                stem: stem_conv,
                stages,
            })
        })
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.cout, |s| s.down.cout)
    }

    /// Channel count of each skip tensor, shallowest first.
    pub fn skip_channels(&self) -> Vec<usize> {
        let mut c = vec![self.stem.cout];
        c.extend(
            self.stages
                .iter()
                .take(self.stages.len().saturating_sub(1))
                .map(|s| s.down.cout),
        );
        c
    }

    pub fn downsampling(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.downsampling();
        match shape {
            [c, dims @ ..] if dims.len() == 3 => {
                if *c != self.stem.cin {
                    return Err(Error::shape(
                        "encoder",
                        format!("input has {c} channels, model expects {}", self.stem.cin),
                    ));
                }
                if dims.iter().any(|&n| n == 0 || n % f != 0) {
                    return Err(Error::Config(format!(
                        "spatial dims {dims:?} must be positive multiples of {f}"
                    )));
                }
                Ok(())
            }
            _ => Err(Error::shape(
                "encoder",
                format!("expected C×H×W×D input, got {shape:?}"),
            )),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<EncoderOutput> {
        self.check_input(tape.shape(x))?;
        let mut h = self.stem.forward(tape, p, x)?;
        let mut skips = vec![h];
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.down.forward(tape, p, h)?;
            for block in &stage.blocks {
                h = block.forward(tape, p, h)?;
            }
            if i + 1 < self.stages.len() {
                skips.push(h);
            }
        }
        Ok(EncoderOutput { features: h, skips })
    }

    pub fn cost(&self, sink: &mut CostSink, dims: [usize; 3]) -> Result<[usize; 3]> {
        let s = Section::Encoder;
        let (mut dims, macs) = self.stem.cost(dims)?;
        sink.push(s, &self.stem.name, self.stem.params(), macs, 0);
        for stage in &self.stages {
            let (out, macs) = stage.down.cost(dims)?;
            sink.push(s, &stage.down.name, stage.down.params(), macs, 0);
            dims = out;
            for block in &stage.blocks {
                block.cost(sink, s, dims)?;
            }
        }
        Ok(dims)
    }
}
