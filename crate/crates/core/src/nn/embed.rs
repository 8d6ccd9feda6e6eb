use super::layers::Conv;
use super::params::{Bound, Builder, Init, ParamId};
use super::{grid_tokens, CostSink, Grid};
use crate::complexity::Section;
use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Scalar, Tape, Var};

pub const PE_STD: f64 = 0.02;

/// `C×h×w×s` volume to `N×C` tokens.
pub(crate) fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
    tape.permute(flat, &[1, 0])
}

/// `N×C` tokens back to a `C×h×w×s` volume.
pub(crate) fn to_volume<T: Scalar>(tape: &mut Tape<T>, z: Var, grid: Grid) -> Result<Var> {
    let [n, c] = *tape.shape(z) else {
        return Err(Error::shape(
            "to_volume",
            format!("expected N×d tokens, got {:?}", tape.shape(z)),
        ));
    };
    if n != grid_tokens(grid) {
        return Err(Error::Config(format!(
            "{n} tokens do not fill a {grid:?} grid"
        )));
    }
    let t = tape.permute(z, &[1, 0])?;
    tape.reshape(t, &[c, grid[0], grid[1], grid[2]])
}

/// Optional channel-lifting convolution followed by flattening and a
/// learnable position encoding bound to one token grid.
#[derive(Debug, Clone)]
pub struct Embed {
    pub expand: Option<Conv>,
    pub grid: Grid,
    pub dim: usize,
    pub pe_name: String,
    pub(crate) pe: ParamId,
}

impl Embed {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        k: usize,
        dim: usize,
        grid: Grid,
        expand: bool,
    ) -> Result<Self> {
        if !expand && k != dim {
            return Err(Error::Config(format!(
                "without feature expansion the embedding width must equal K ({dim} != {k})"
            )));
        }
        let expand = if expand {
            Some(b.scoped("embed", |b| {
                Conv::build(b, "expand", k, dim, ConvSpec::same(3), true)
            })?)
        } else {
            None
        };
        let pe = b.scoped("transformer", |b| {
            b.param(
                "pos_embed",
                &[grid_tokens(grid), dim],
                Init::Normal { std: PE_STD },
            )
        })?;
        Ok(Self {
            expand,
            grid,
            dim,
            pe_name: b.qualify("transformer.pos_embed"),
            pe,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, f: Var) -> Result<Var> {
        let dims = &tape.shape(f)[1..];
        if dims != self.grid {
            return Err(Error::Config(format!(
                "position encoding is bound to a {:?} token grid, features are {dims:?}",
                self.grid
            )));
        }
        let h = match &self.expand {
            Some(conv) => conv.forward(tape, p, f)?,
            None => f,
        };
        let z = to_tokens(tape, h)?;
        tape.add(z, p.var(self.pe))
    }

    pub fn cost(&self, sink: &mut CostSink, dims: [usize; 3]) -> Result<()> {
        if let Some(conv) = &self.expand {
            let (_, macs) = conv.cost(dims)?;
            sink.push(Section::Embedding, &conv.name, conv.params(), macs, 0);
        }
        let n = grid_tokens(self.grid) as u64;
        let d = self.dim as u64;
        sink.push(Section::Transformer, &self.pe_name, n * d, 0, n * d);
        Ok(())
    }
}
