use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AttentionMode;

/// Complete architecture description. Every parameter name and shape is a
/// pure function of this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Training/evaluation crop `H, W, D`; the position encoding is bound
    /// to the matching token grid.
    pub input_size: [usize; 3],
    pub stem_channels: usize,
    /// Widths of the stride-2 stages; the last one is `K`.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Token width `d` when feature expansion is on.
    pub embed_dim: usize,
    /// Query/key expansion ratio `E`.
    pub expansion: f64,
    /// Number of transformer blocks `L`.
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub attention_mode: AttentionMode,
    pub kv_local_conv: bool,
    pub restore_channels: usize,
    pub deform_kernel: usize,
    /// One reduction ratio per skip connection, shallowest first.
    pub dbm_reduction: Vec<usize>,
    pub use_transformer: bool,
    pub use_fem: bool,
    pub use_dbm: bool,
    pub use_qk_expand: bool,
}

/// Cumulative ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Base,
    Transformer,
    Expansion,
    Deformable,
    Full,
}

impl Variant {
    pub const LADDER: [Variant; 5] = [
        Self::Base,
        Self::Transformer,
        Self::Expansion,
        Self::Deformable,
        Self::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Base => "B",
            Self::Transformer => "B+TR",
            Self::Expansion => "B+TR+FEM",
            Self::Deformable => "B+TR+FEM+DBM",
            Self::Full => "full",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::LADDER
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation variant '{s}'")))
    }
}

impl ModelConfig {
    /// Shallow-wide hybrid: one block at `d = 512`, `E = 1.5`, deformable
    /// bottlenecks on every skip.
    pub fn transbtsv2() -> Self {
        Self {
            name: "transbtsv2".into(),
            in_channels: 4,
            num_classes: 4,
            input_size: [128, 128, 128],
            stem_channels: 16,
            stage_channels: vec![32, 64, 128],
            blocks_per_stage: 2,
            embed_dim: 512,
            expansion: 1.5,
            depth: 1,
            heads: 8,
            ffn_ratio: 4,
            attention_mode: AttentionMode::Joint,
            kv_local_conv: true,
            restore_channels: 256,
            deform_kernel: 3,
            dbm_reduction: vec![8, 2, 2],
            use_transformer: true,
            use_fem: true,
            use_dbm: true,
            use_qk_expand: true,
        }
    }

    /// Deep-narrow reference: four plain blocks, wide FFN, no deformable
    /// bottlenecks and no local key/value conv.
    pub fn transbts_v1() -> Self {
        Self {
            name: "transbts_v1".into(),
            expansion: 1.0,
            depth: 4,
            ffn_ratio: 8,
            kv_local_conv: false,
            use_dbm: false,
            use_qk_expand: false,
            ..Self::transbtsv2()
        }
    }

    pub fn ablation(variant: Variant) -> Self {
        let full = Self::transbtsv2();
        let mut c = Self {
            name: format!("ablation {}", variant.label()),
            ..full
        };
        let rank = Variant::LADDER
            .iter()
            .position(|v| *v == variant)
            .expect("ladder member");
        c.use_transformer = rank >= 1;
        c.use_fem = rank >= 2;
        c.use_dbm = rank >= 3;
        c.use_qk_expand = rank >= 4;
        if !c.use_qk_expand {
            c.expansion = 1.0;
        }
        if !c.use_fem {
            c.embed_dim = c.k();
        }
        c
    }

    /// `(deep_narrow, shallow_wide)` for the width-versus-depth comparison.
    pub fn depth_width_pair() -> (Self, Self) {
        let deep = Self {
            name: "deep_narrow".into(),
            embed_dim: 256,
            depth: 8,
            ..Self::transbtsv2()
        };
        let wide = Self {
            name: "shallow_wide".into(),
            ..Self::transbtsv2()
        };
        (deep, wide)
    }

    /// Deepest encoder width `K`.
    pub fn k(&self) -> usize {
        self.stage_channels
            .last()
            .copied()
            .unwrap_or(self.stem_channels)
    }

    /// Width the transformer actually runs at.
    pub fn token_dim(&self) -> usize {
        if self.use_fem {
            self.embed_dim
        } else {
            self.k()
        }
    }

    pub fn downsampling(&self) -> usize {
        1 << self.stage_channels.len()
    }

    pub fn token_grid(&self) -> [usize; 3] {
        self.input_size.map(|n| n / self.downsampling())
    }

    pub fn effective_expansion(&self) -> f64 {
        if self.use_qk_expand {
            self.expansion
        } else {
            1.0
        }
    }

    pub fn input_shape(&self) -> [usize; 4] {
        let [h, w, d] = self.input_size;
        [self.in_channels, h, w, d]
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return err("channel counts must be positive".into());
        }
        if self.stage_channels.is_empty() {
            return err("at least one encoder stage is required".into());
        }
        if self.num_classes < 2 {
            return err(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        let f = self.downsampling();
        if self.input_size.iter().any(|&n| n == 0 || n % f != 0) {
            return err(format!(
                "input_size {:?} must be positive multiples of {f}",
                self.input_size
            ));
        }
        if self.use_transformer && self.depth == 0 {
            return err("depth must be at least 1 when the transformer is enabled".into());
        }
        if self.use_fem && !self.use_transformer {
            return err("feature expansion requires the transformer".into());
        }
        if self.expansion.is_nan() || self.expansion < 1.0 {
            return err(format!(
                "expansion ratio must be at least 1, got {}",
                self.expansion
            ));
        }
        if self.use_transformer {
            let d = self.token_dim();
            let dm = (self.effective_expansion() * d as f64).round() as usize;
            if self.heads == 0 || !d.is_multiple_of(self.heads) || !dm.is_multiple_of(self.heads) {
                return err(format!(
                    "heads {} must divide d={d} and d_m={dm}",
                    self.heads
                ));
            }
            if self.ffn_ratio == 0 {
                return err("ffn_ratio must be positive".into());
            }
        }
        if self.use_dbm {
            let skips = self.stage_channels.len();
            if self.dbm_reduction.len() != skips {
                return err(format!(
                    "dbm_reduction lists {} ratios for {skips} skip connections",
                    self.dbm_reduction.len()
                ));
            }
            let mut widths = vec![self.stem_channels];
            widths.extend(&self.stage_channels[..skips - 1]);
            for (c, r) in widths.iter().zip(&self.dbm_reduction) {
                if *r == 0 || c % r != 0 {
                    return err(format!("DBM reduction {r} must divide skip width {c}"));
                }
            }
            if self.deform_kernel.is_multiple_of(2) {
                return err(format!(
                    "deform_kernel must be odd, got {}",
                    self.deform_kernel
                ));
            }
        }
        if self.restore_channels == 0 {
            return err("restore_channels must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::transbtsv2().validate().unwrap();
        ModelConfig::transbts_v1().validate().unwrap();
        for v in Variant::LADDER {
            ModelConfig::ablation(v).validate().unwrap();
        }
        let (a, b) = ModelConfig::depth_width_pair();
        a.validate().unwrap();
        b.validate().unwrap();
    }

    #[test]
    fn indivisible_input_rejected() {
        let c = ModelConfig {
            input_size: [128, 100, 128],
            ..ModelConfig::transbtsv2()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_base_runs_at_k() {
        let b = ModelConfig::ablation(Variant::Base);
        assert!(!b.use_transformer && !b.use_dbm);
        assert_eq!(ModelConfig::ablation(Variant::Transformer).token_dim(), 128);
        assert_eq!("b+tr+fem".parse::<Variant>().unwrap(), Variant::Expansion);
    }
}
