//! Whole-network assembly from a [`ModelConfig`].

mod ablation;
mod checkpoint;
mod config;

pub use ablation::{ablation_ladder, AblationRow};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, ManifestEntry};
pub use config::{ModelConfig, Variant};

use crate::complexity::{ComplexityReport, Convention};
use crate::error::{Error, Result};
use crate::nn::{
    AttentionConfig, Bound, Builder, CostSink, Dbm, DbmConfig, Decoder, Embed, Encoder, ParamStore,
    Restore, TransformerBlock,
};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Parameter-free description of the forward program.
#[derive(Debug, Clone)]
pub struct Network {
    pub encoder: Encoder,
    pub embed: Option<Embed>,
    pub blocks: Vec<TransformerBlock>,
    pub restore: Restore,
    pub dbms: Vec<Option<Dbm>>,
    pub decoder: Decoder,
    pub grid: [usize; 3],
}

/// Intermediate handles from one forward pass.
pub struct ForwardTrace {
    pub logits: Var,
    /// Every attention node, in evaluation order.
    pub attention: Vec<Var>,
}

impl Network {
    fn build<T: Scalar>(cfg: &ModelConfig, b: &mut Builder<'_, T>) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.k();
        let grid = cfg.token_grid();
        let encoder = Encoder::build(
            b,
            cfg.in_channels,
            cfg.stem_channels,
            &cfg.stage_channels,
            cfg.blocks_per_stage,
        )?;
        let d = cfg.token_dim();
        let (embed, blocks) = if cfg.use_transformer {
            let embed = Embed::build(b, k, d, grid, cfg.use_fem)?;
            let att = AttentionConfig::new(
                d,
                cfg.effective_expansion(),
                cfg.heads,
                cfg.attention_mode,
                cfg.kv_local_conv,
            )?;
            let blocks = b.scoped("transformer", |b| {
                (0..cfg.depth)
                    .map(|i| {
                        TransformerBlock::build(b, &format!("block{}", i + 1), att, cfg.ffn_ratio)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            (Some(embed), blocks)
        } else {
            (None, Vec::new())
        };
        let restore_in = if cfg.use_transformer { d } else { k };
        let restore = Restore::build(b, restore_in, cfg.restore_channels, k)?;
        let skips = encoder.skip_channels();
        let dbms = b.scoped("dbm", |b| {
            skips
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    if !cfg.use_dbm {
                        return Ok(None);
                    }
                    let dc = DbmConfig {
                        channels: c,
                        reduction: cfg.dbm_reduction[i],
                        kernel: cfg.deform_kernel,
                    };
                    Dbm::build(b, &format!("skip{}", i + 1), dc).map(Some)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let decoder = Decoder::build(b, k, &skips, cfg.num_classes)?;
        Ok(Self {
            encoder,
            embed,
            blocks,
            restore,
            dbms,
            decoder,
            grid,
        })
    }

    /// Structure only; parameter values are zero and never read.
    pub fn describe(cfg: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::<f32>::new();
        let mut b = Builder::new(&mut store, 0).structural();
        Self::build(cfg, &mut b)
    }

    pub fn forward_trace<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
    ) -> Result<ForwardTrace> {
        let enc = self.encoder.forward(tape, p, x)?;
        let mut attention = Vec::new();
        let bottleneck = match &self.embed {
            Some(embed) => {
                let mut z = embed.forward(tape, p, enc.features)?;
                for block in &self.blocks {
                    let (out, w) = block.forward_with_weights(tape, p, z, self.grid)?;
                    attention.extend(w);
                    z = out;
                }
                crate::nn::tokens_to_volume(tape, z, self.grid)?
            }
            None => enc.features,
        };
        let h = self.restore.forward(tape, p, bottleneck)?;
        let skips = self
            .dbms
            .iter()
            .zip(&enc.skips)
            .map(|(dbm, &s)| match dbm {
                Some(m) => m.forward(tape, p, s),
                None => Ok(s),
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = self.decoder.forward(tape, p, h, &skips)?;
        Ok(ForwardTrace { logits, attention })
    }

    pub fn costs(&self, input_size: [usize; 3]) -> Result<CostSink> {
        let mut sink = CostSink::default();
        let deep = self.encoder.cost(&mut sink, input_size)?;
        if let Some(embed) = &self.embed {
            if deep != embed.grid {
                return Err(Error::Config(format!(
                    "input {input_size:?} gives a {deep:?} token grid, model is bound to {:?}",
                    embed.grid
                )));
            }
            embed.cost(&mut sink, deep)?;
            for block in &self.blocks {
                block.cost(&mut sink, deep)?;
            }
        }
        self.restore.cost(&mut sink, deep)?;
        let mut dims = input_size;
        for dbm in &self.dbms {
            if let Some(m) = dbm {
                m.cost(&mut sink, dims)?;
            }
            dims = dims.map(|n| n / 2);
        }
        self.decoder.cost(&mut sink, deep)?;
        Ok(sink)
    }
}

/// Configured network plus its parameter values.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub net: Network,
}

impl<T: Scalar> Model<T> {
    /// Deterministic build: values are drawn from one seeded stream in
    /// parameter order, in 64-bit and then rounded to `T`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::build(config, &mut Builder::new(&mut params, seed))?;
        Ok(Self {
            config: config.clone(),
            params,
            net,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.net.forward_trace(tape, p, x)?.logits)
    }

    /// Logits for one volume, without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.encoder.check_input(x.shape())?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
        }
    }

    pub fn num_params(&self) -> u64 {
        self.params.numel()
    }
}

/// Complexity of `config` at its configured input size.
pub fn analyze(
    config: &ModelConfig,
    convention: Convention,
    include_aux: bool,
) -> Result<ComplexityReport> {
    analyze_at(config, config.input_shape(), convention, include_aux)
}

pub fn analyze_at(
    config: &ModelConfig,
    input_shape: [usize; 4],
    convention: Convention,
    include_aux: bool,
) -> Result<ComplexityReport> {
    if input_shape[0] != config.in_channels {
        return Err(Error::shape(
            "complexity",
            format!(
                "input has {} channels, model expects {}",
                input_shape[0], config.in_channels
            ),
        ));
    }
    let net = Network::describe(config)?;
    let sink = net.costs([input_shape[1], input_shape[2], input_shape[3]])?;
    Ok(ComplexityReport::from_costs(
        &config.name,
        input_shape,
        convention,
        include_aux,
        &sink.rows,
    ))
}
