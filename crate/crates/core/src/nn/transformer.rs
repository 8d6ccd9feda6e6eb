use super::attention::{Attention, AttentionConfig};
use super::layers::{LayerNorm, Linear};
use super::params::{Bound, Builder};
use super::{grid_tokens, CostSink, Grid};
use crate::complexity::Section;
use crate::error::Result;
use crate::tensor::{Scalar, Tape, Var};

/// `d → ratio·d → d` with GELU in between.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, d: usize, ratio: usize) -> Result<Self> {
        b.scoped("ffn", |b| {
            Ok(Self {
                fc1: Linear::build(b, "fc1", d, ratio * d, true)?,
                fc2: Linear::build(b, "fc2", ratio * d, d, true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm block: `z' = attn(LN z) + z`, `out = FFN(LN z') + z'`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub name: String,
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl TransformerBlock {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: AttentionConfig,
        ffn_ratio: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                name: b.qualify(""),
                norm1: LayerNorm::build(b, "norm1", cfg.d)?,
                attn: Attention::build(b, cfg)?,
                norm2: LayerNorm::build(b, "norm2", cfg.d)?,
                ffn: Ffn::build(b, cfg.d, ffn_ratio)?,
            })
        })
    }

    /// Output plus the attention nodes evaluated inside the block.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z: Var,
        grid: Grid,
    ) -> Result<(Var, Vec<Var>)> {
        let h = self.norm1.forward(tape, p, z)?;
        let (a, weights) = self.attn.forward_with_weights(tape, p, h, grid)?;
        let z1 = tape.add(a, z)?;
        let h = self.norm2.forward(tape, p, z1)?;
        let f = self.ffn.forward(tape, p, h)?;
        Ok((tape.add(f, z1)?, weights))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        z: Var,
        grid: Grid,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, z, grid)?.0)
    }

    pub fn params(&self) -> u64 {
        self.norm1.params()
            + self.attn.params()
            + self.norm2.params()
            + self.ffn.fc1.params()
            + self.ffn.fc2.params()
    }

    pub fn cost(&self, sink: &mut CostSink, grid: Grid) -> Result<()> {
        let s = Section::Transformer;
        let n = grid_tokens(grid);
        let nd = (n * self.norm1.dim) as u64;
        sink.push(s, &self.norm1.name, self.norm1.params(), 0, nd);
        self.attn.cost(sink, grid)?;
        sink.rows.last_mut().expect("attention rows").aux_ops += nd;
        sink.push(s, &self.norm2.name, self.norm2.params(), 0, nd);
        let hidden = (n * self.ffn.fc1.d_out) as u64;
        sink.push(
            s,
            &self.ffn.fc1.name,
            self.ffn.fc1.params(),
            self.ffn.fc1.macs(n),
            hidden,
        );
        sink.push(
            s,
            &self.ffn.fc2.name,
            self.ffn.fc2.params(),
            self.ffn.fc2.macs(n),
            nd,
        );
        Ok(())
    }
}
