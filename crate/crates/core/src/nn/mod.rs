//! Parameterized building blocks. Blocks hold parameter handles and sizes
//! only; values live in a [`ParamStore`] and are bound onto a tape per
//! forward pass.

mod attention;
mod dbm;
mod decoder;
mod embed;
mod encoder;
mod layers;
mod params;
mod restore;
mod transformer;

pub use attention::{Attention, AttentionConfig, AttentionMode, FwMhsa};
pub use dbm::{Dbm, DbmConfig};
pub use decoder::{Decoder, BACKGROUND_LOGIT};
pub(crate) use embed::to_volume as tokens_to_volume;
pub use embed::Embed;
pub use encoder::{Encoder, EncoderOutput, ResBlock};
pub use layers::{Conv, LayerNorm, Linear};
pub use params::{Bound, Builder, Init, Param, ParamId, ParamStore};
pub use restore::Restore;
pub use transformer::{Ffn, TransformerBlock};

use crate::complexity::{LayerCost, Section};

/// Collects per-layer cost rows while walking a network description.
#[derive(Debug, Default)]
pub struct CostSink {
    pub rows: Vec<LayerCost>,
}

impl CostSink {
    pub fn push(&mut self, section: Section, name: &str, params: u64, macs: u64, aux: u64) {
        self.rows.push(LayerCost {
            name: name.to_string(),
            section,
            params,
            macs,
            aux_ops: aux,
        });
    }
}

/// Token layout of a flattened `h×w×s` grid: token `(i·w + j)·s + k`.
pub type Grid = [usize; 3];

pub(crate) fn grid_tokens(grid: Grid) -> usize {
    grid.iter().product()
}
