use super::layers::Conv;
use super::params::{Bound, Builder, Init};
use super::CostSink;
use crate::complexity::Section;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

/// Initial classifier bias of the background class, roughly the log-odds of
/// background against one small foreground class. Background takes no part
/// in the loss, so it has to start out dominant; otherwise a foreground
/// class can claim the background region, where its loss gradient then
/// vanishes.
///
/// The classifier weights start at zero, so every voxel begins with the
/// same prediction and no class gets a head start on a region it does not
/// own.
pub const BACKGROUND_LOGIT: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct UpStage {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// Progressive 2× upsampling with skip concatenation, then a 1×1×1
/// classifier.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub stages: Vec<UpStage>,
    pub head: Conv,
}

impl Decoder {
    /// `skips` lists skip channel counts shallowest first; stages run deepest
    /// first and output the matching skip width.
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        k: usize,
        skips: &[usize],
        classes: usize,
    ) -> Result<Self> {
        b.scoped("decoder", |b| {
            let mut cin = k;
            let mut stages = Vec::new();
            for (i, &cs) in skips.iter().rev().enumerate() {
                let stage = b.scoped(&format!("up{}", i + 1), |b| {
                    Ok(UpStage {
                        conv1: Conv::build(b, "conv1", cin + cs, cs, ConvSpec::same(3), true)?,
                        conv2: Conv::build(b, "conv2", cs, cs, ConvSpec::same(3), true)?,
                    })
                })?;
                stages.push(stage);
                cin = cs;
            }
            let head = Conv::build_with(
                b,
                "head",
                cin,
                classes,
                ConvSpec::cube(1, 1, 0),
                true,
                Some(Init::Zeros),
            )?;
            if let Some(bias) = head.bias {
                b.value_mut(bias).data_mut()[0] = T::c(BACKGROUND_LOGIT);
            }
            Ok(Self { stages, head })
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        skips: &[Var],
    ) -> Result<Var> {
        if skips.len() != self.stages.len() {
            return Err(Error::Config(format!(
                "decoder has {} stages but received {} skips",
                self.stages.len(),
                skips.len()
            )));
        }
        let mut h = x;
        for (stage, &skip) in self.stages.iter().zip(skips.iter().rev()) {
            let up = tape.trilinear_upsample(h, 2)?;
            let cat = tape.concat(&[up, skip])?;
            let a = stage.conv1.forward(tape, p, cat)?;
            let a = tape.relu(a);
            let a = stage.conv2.forward(tape, p, a)?;
            h = tape.relu(a);
        }
        self.head.forward(tape, p, h)
    }

    pub fn cost(&self, sink: &mut CostSink, mut dims: [usize; 3]) -> Result<[usize; 3]> {
        let s = Section::Decoder;
        for stage in &self.stages {
            let cin = stage.conv1.cin - stage.conv1.cout;
            dims = dims.map(|n| 2 * n);
            let vox = dims.iter().product::<usize>() as u64;
            let (_, macs) = stage.conv1.cost(dims)?;
            // interpolation output counted with the first conv
            let aux = vox * cin as u64 + vox * stage.conv1.cout as u64;
            sink.push(s, &stage.conv1.name, stage.conv1.params(), macs, aux);
            let (_, macs) = stage.conv2.cost(dims)?;
            sink.push(
                s,
                &stage.conv2.name,
                stage.conv2.params(),
                macs,
                vox * stage.conv2.cout as u64,
            );
        }
        let (_, macs) = self.head.cost(dims)?;
        sink.push(s, &self.head.name, self.head.params(), macs, 0);
        Ok(dims)
    }
}
