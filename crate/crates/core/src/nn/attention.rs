use serde::{Deserialize, Serialize};

use super::embed::{to_tokens, to_volume};
use super::layers::{Conv, LayerNorm, Linear};
use super::params::{Bound, Builder};
use super::{grid_tokens, CostSink, Grid};
use crate::complexity::Section;
use crate::error::{Error, Result};
use crate::tensor::{AttentionGroups, ConvSpec, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// All `N` tokens attend to each other.
    Joint,
    /// Attention within each depth slice over its `h·w` tokens.
    SpatialOnly,
    /// Spatial attention, then a residual slice stage across depth.
    SplitCascaded,
    /// Spatial and slice attention on the same input, summed.
    SplitParallel,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [
        Self::Joint,
        Self::SpatialOnly,
        Self::SplitCascaded,
        Self::SplitParallel,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::SpatialOnly => "spatial_only",
            Self::SplitCascaded => "split_cascaded",
            Self::SplitParallel => "split_parallel",
        }
    }

    fn has_slice_stage(self) -> bool {
        matches!(self, Self::SplitCascaded | Self::SplitParallel)
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown attention mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    /// Token width.
    pub d: usize,
    /// Query/key width after expansion.
    pub d_m: usize,
    pub heads: usize,
    pub mode: AttentionMode,
    /// Depthwise conv + layer norm on the key/value path.
    pub kv_local_conv: bool,
}

impl AttentionConfig {
    pub fn new(
        d: usize,
        expansion: f64,
        heads: usize,
        mode: AttentionMode,
        kv_local_conv: bool,
    ) -> Result<Self> {
        if expansion.is_nan() || expansion < 1.0 {
            return Err(Error::Config(format!(
                "expansion ratio {expansion} must be at least 1"
            )));
        }
        let d_m = (expansion * d as f64).round() as usize;
        let cfg = Self {
            d,
            d_m,
            heads,
            mode,
            kv_local_conv,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0
            || !self.d.is_multiple_of(self.heads)
            || !self.d_m.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "{} heads must divide both d={} and d_m={}",
                self.heads, self.d, self.d_m
            )));
        }
        Ok(())
    }

    /// Softmax temperature `1/√d`.
    pub fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }
}

/// Multi-head self-attention with expanded query/key width and an optional
/// local depthwise conv on the key/value path.
#[derive(Debug, Clone)]
pub struct FwMhsa {
    pub name: String,
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub kv_conv: Option<(Conv, LayerNorm)>,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl FwMhsa {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, dm) = (cfg.d, cfg.d_m);
        b.scoped(name, |b| {
            let q = Linear::build(b, "q", d, dm, false)?;
            let kv_conv = if cfg.kv_local_conv {
                let spec = ConvSpec::same(3).with_groups(d);
                Some((
                    Conv::build(b, "kv_dwconv", d, d, spec, true)?,
                    LayerNorm::build(b, "kv_norm", d)?,
                ))
            } else {
                None
            };
            Ok(Self {
                name: b.qualify(""),
                cfg,
                q,
                kv_conv,
                k: Linear::build(b, "k", d, dm, false)?,
                v: Linear::build(b, "v", d, d, true)?,
                proj: Linear::build(b, "proj", d, d, true)?,
            })
        })
    }

    /// Returns the projected output and the raw attention node (for
    /// inspecting weights).
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: Grid,
        groups: &AttentionGroups,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, p, x)?;
        let kv_in = match &self.kv_conv {
            Some((conv, norm)) => {
                let vol = to_volume(tape, x, grid)?;
                let vol = conv.forward(tape, p, vol)?;
                let t = to_tokens(tape, vol)?;
                norm.forward(tape, p, t)?
            }
            None => x,
        };
        let k = self.k.forward(tape, p, kv_in)?;
        let v = self.v.forward(tape, p, kv_in)?;
        let a = tape.attention(q, k, v, groups, self.cfg.heads, self.cfg.scale())?;
        Ok((self.proj.forward(tape, p, a)?, a))
    }

    pub fn params(&self) -> u64 {
        let local = self
            .kv_conv
            .as_ref()
            .map_or(0, |(c, n)| c.params() + n.params());
        self.q.params() + local + self.k.params() + self.v.params() + self.proj.params()
    }

    fn cost(&self, sink: &mut CostSink, grid: Grid, groups: &AttentionGroups) -> Result<()> {
        let s = Section::Transformer;
        let n = grid_tokens(grid);
        let (d, dm, heads) = (
            self.cfg.d as u64,
            self.cfg.d_m as u64,
            self.cfg.heads as u64,
        );
        sink.push(s, &self.q.name, self.q.params(), self.q.macs(n), 0);
        if let Some((conv, norm)) = &self.kv_conv {
            let (_, macs) = conv.cost(grid)?;
            sink.push(s, &conv.name, conv.params(), macs, 0);
            sink.push(s, &norm.name, norm.params(), 0, n as u64 * d);
        }
        sink.push(s, &self.k.name, self.k.params(), self.k.macs(n), 0);
        sink.push(s, &self.v.name, self.v.params(), self.v.macs(n), 0);
        let pairs: u64 = groups
            .groups()
            .iter()
            .map(|g| (g.len() * g.len()) as u64)
            .sum();
        // q·kᵀ over the expanded width, weights·v over the value width
        sink.push(
            s,
            &format!("{}.scores", self.name),
            0,
            pairs * (dm + d),
            pairs * heads,
        );
        sink.push(s, &self.proj.name, self.proj.params(), self.proj.macs(n), 0);
        Ok(())
    }
}

/// Attention sub-layer in one of the four token-grouping modes.
#[derive(Debug, Clone)]
pub struct Attention {
    pub mode: AttentionMode,
    pub main: FwMhsa,
    pub slice: Option<FwMhsa>,
}

impl Attention {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, cfg: AttentionConfig) -> Result<Self> {
        let main = FwMhsa::build(b, "attn", cfg)?;
        let slice = if cfg.mode.has_slice_stage() {
            Some(FwMhsa::build(b, "attn_slice", cfg)?)
        } else {
            None
        };
        Ok(Self {
            mode: cfg.mode,
            main,
            slice,
        })
    }

    fn main_groups(&self, grid: Grid) -> AttentionGroups {
        match self.mode {
            AttentionMode::Joint => AttentionGroups::joint(grid_tokens(grid)),
            _ => AttentionGroups::spatial(grid),
        }
    }

    /// Output plus every attention node evaluated on the way.
    pub fn forward_with_weights<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: Grid,
    ) -> Result<(Var, Vec<Var>)> {
        let main_groups = self.main_groups(grid);
        let (y, a) = self
            .main
            .forward_with_weights(tape, p, x, grid, &main_groups)?;
        let Some(slice) = &self.slice else {
            return Ok((y, vec![a]));
        };
        let slice_groups = AttentionGroups::slice(grid);
        match self.mode {
            AttentionMode::SplitCascaded => {
                let (s, a2) = slice.forward_with_weights(tape, p, y, grid, &slice_groups)?;
                Ok((tape.add(y, s)?, vec![a, a2]))
            }
            _ => {
                let (s, a2) = slice.forward_with_weights(tape, p, x, grid, &slice_groups)?;
                Ok((tape.add(y, s)?, vec![a, a2]))
            }
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: Grid,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x, grid)?.0)
    }

    pub fn params(&self) -> u64 {
        self.main.params() + self.slice.as_ref().map_or(0, FwMhsa::params)
    }

    pub fn cost(&self, sink: &mut CostSink, grid: Grid) -> Result<()> {
        self.main.cost(sink, grid, &self.main_groups(grid))?;
        if let Some(slice) = &self.slice {
            slice.cost(sink, grid, &AttentionGroups::slice(grid))?;
            let n = grid_tokens(grid) as u64;
            sink.rows.last_mut().expect("just pushed").aux_ops += n * self.main.cfg.d as u64;
        }
        Ok(())
    }
}
