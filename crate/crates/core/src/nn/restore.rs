use super::layers::Conv;
use super::params::{Bound, Builder};
use super::CostSink;
use crate::complexity::Section;
use crate::error::Result;
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

/// Two 3×3×3 convolutions `d → mid → K`, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct Restore {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl Restore {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        d: usize,
        mid: usize,
        k: usize,
    ) -> Result<Self> {
        b.scoped("restore", |b| {
            Ok(Self {
                conv1: Conv::build(b, "conv1", d, mid, ConvSpec::same(3), true)?,
                conv2: Conv::build(b, "conv2", mid, k, ConvSpec::same(3), true)?,
            })
        })
    }

    /// Maps a `d×h×w×s` volume to `K×h×w×s`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, p, h)?;
        Ok(tape.relu(h))
    }

    pub fn cost(&self, sink: &mut CostSink, dims: [usize; 3]) -> Result<()> {
        let vox = dims.iter().product::<usize>() as u64;
        for conv in [&self.conv1, &self.conv2] {
            let (_, macs) = conv.cost(dims)?;
            sink.push(
                Section::Decoder,
                &conv.name,
                conv.params(),
                macs,
                vox * conv.cout as u64,
            );
        }
        Ok(())
    }
}
