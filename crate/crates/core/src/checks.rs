//! Gradient-check suites over primitives, network blocks and a whole micro
//! model, all in 64-bit.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{
    Attention, AttentionConfig, AttentionMode, Bound, Builder, Dbm, DbmConfig, Decoder, Encoder,
    ParamStore, Restore, TransformerBlock,
};
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::tensor::{AttentionGroups, ConvSpec, Tape, Tensor, Var};

/// Finite-difference step for composite blocks. Their gradients reach
/// 1e-7 or less, where a 1e-6 step leaves too little signal above roundoff.
pub const BLOCK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitives,
    Blocks,
    End2end,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Primitives, Scope::Blocks, Scope::End2end];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Primitives => "primitives",
            Scope::Blocks => "blocks",
            Scope::End2end => "end2end",
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown gradcheck scope {s:?} (primitives, blocks, end2end)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub scope: Scope,
    pub name: String,
    pub max_rel_error: f64,
    /// Element of the worst input, e.g. `offsets[17]`.
    pub worst: String,
    pub checked: usize,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    pub tol: f64,
    /// Op whose backward is perturbed in every unit, to prove the suite
    /// notices.
    pub fault: Option<String>,
}

type Named = Vec<(String, Tensor<f64>)>;

struct Unit {
    name: &'static str,
    run: fn(&GradCheckOptions) -> Result<GradCheckReport>,
    step: f64,
    max_elements: Option<usize>,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .expect("shape matches")
}

fn named(items: Vec<(&str, Tensor<f64>)>) -> Named {
    items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Fixed random projection to a scalar.
fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.weighted_sum(out, &w)
}

fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = random(&mut rng, &shape, scale);
    }
}

fn with_params(x: Tensor<f64>, store: &ParamStore<f64>) -> Named {
    let mut inputs = vec![("input".to_string(), x)];
    inputs.extend(store.iter().map(|p| (p.name.clone(), p.value.clone())));
    inputs
}

fn check_block<F>(
    x: Tensor<f64>,
    store: &ParamStore<f64>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var>,
{
    grad_check(
        &with_params(x, store),
        |tape, vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let y = f(tape, &p, vars[0])?;
            probe(tape, y, 77)
        },
        opts,
    )
}

// --- primitives -------------------------------------------------------------

fn conv3d(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let inputs = named(vec![
        ("x", random(&mut rng, &[4, 4, 3, 5], 1.0)),
        ("w", random(&mut rng, &[4, 2, 3, 3, 3], 1.0)),
        ("b", random(&mut rng, &[4], 1.0)),
    ]);
    let spec = ConvSpec::cube(3, 2, 1).with_groups(2);
    grad_check(
        &inputs,
        |t, v| {
            let y = t.conv3d(v[0], v[1], Some(v[2]), &spec)?;
            probe(t, y, 1)
        },
        o,
    )
}

fn depthwise_conv(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let inputs = named(vec![
        ("x", random(&mut rng, &[3, 3, 2, 3], 1.0)),
        ("w", random(&mut rng, &[3, 1, 3, 3, 3], 1.0)),
    ]);
    let spec = ConvSpec::same(3).with_groups(3);
    grad_check(
        &inputs,
        |t, v| {
            let y = t.conv3d(v[0], v[1], None, &spec)?;
            probe(t, y, 2)
        },
        o,
    )
}

fn deform_conv3d(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // offsets away from integers keep samples off the interpolant's kinks
    let off: Vec<f64> = (0..81 * 27)
        .map(|_| rng.gen_range(-0.45..0.45) + 0.05)
        .collect();
    let inputs = named(vec![
        ("x", random(&mut rng, &[2, 3, 3, 3], 1.0)),
        ("w", random(&mut rng, &[2, 2, 3, 3, 3], 1.0)),
        ("offsets", Tensor::new(vec![81, 3, 3, 3], off)?),
        ("b", random(&mut rng, &[2], 1.0)),
    ]);
    grad_check(
        &inputs,
        |t, v| {
            let y = t.deform_conv3d(v[0], v[1], v[2], Some(v[3]), &ConvSpec::same(3))?;
            probe(t, y, 3)
        },
        o,
    )
}

fn grid_sample(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let locs: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.8..3.6)).collect();
    let inputs = named(vec![
        ("x", random(&mut rng, &[2, 3, 3, 3], 1.0)),
        ("loc", Tensor::new(vec![6, 3], locs)?),
    ]);
    grad_check(
        &inputs,
        |t, v| {
            let y = t.grid_sample_trilinear(v[0], v[1])?;
            probe(t, y, 4)
        },
        o,
    )
}

fn upsample(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let inputs = named(vec![("x", random(&mut rng, &[2, 2, 3, 2], 1.0))]);
    grad_check(
        &inputs,
        |t, v| {
            let y = t.trilinear_upsample(v[0], 2)?;
            probe(t, y, 5)
        },
        o,
    )
}

fn dense(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let inputs = named(vec![
        ("a", random(&mut rng, &[4, 6], 1.0)),
        ("b", random(&mut rng, &[6, 5], 1.0)),
        ("bias", random(&mut rng, &[5], 1.0)),
        ("gamma", random(&mut rng, &[5], 1.0)),
        ("beta", random(&mut rng, &[5], 1.0)),
    ]);
    grad_check(
        &inputs,
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.add_row_bias(m, v[2])?;
            let n = t.layer_norm(m, v[3], v[4], 1e-5)?;
            let g = t.gelu(n);
            let s = t.softmax_lastdim(g);
            let s = t.scale(s, 1.7);
            probe(t, s, 6)
        },
        o,
    )
}

fn layout(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    // relu inputs stay away from the kink at zero
    let r: Vec<f64> = (0..24)
        .map(|i| if i % 2 == 0 { 0.3 } else { -0.3 } + rng.gen_range(-0.2..0.2))
        .collect();
    let inputs = named(vec![
        ("a", Tensor::new(vec![2, 3, 4], r)?),
        ("b", random(&mut rng, &[1, 3, 4], 1.0)),
    ]);
    grad_check(
        &inputs,
        |t, v| {
            let a = t.relu(v[0]);
            let c = t.concat(&[a, v[1]])?;
            let p = t.permute(c, &[2, 0, 1])?;
            let r = t.reshape(p, &[12, 3])?;
            let m = t.mul(r, r)?;
            let s = t.add(m, r)?;
            probe(t, s, 7)
        },
        o,
    )
}

fn dropout(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    let inputs = named(vec![("x", random(&mut rng, &[20], 1.0))]);
    grad_check(
        &inputs,
        |t, v| {
            t.set_training(true);
            let y = t.dropout(v[0], 0.3, 99)?;
            probe(t, y, 8)
        },
        o,
    )
}

fn attention_groupings(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let grid = [2, 2, 3];
    let groups = [
        AttentionGroups::joint(12),
        AttentionGroups::spatial(grid),
        AttentionGroups::slice(grid),
    ];
    let mut all = GradCheckReport { inputs: Vec::new() };
    for (g, groups) in groups.iter().enumerate() {
        let inputs = named(vec![
            ("q", random(&mut rng, &[12, 8], 1.0)),
            ("k", random(&mut rng, &[12, 8], 1.0)),
            ("v", random(&mut rng, &[12, 6], 1.0)),
        ]);
        let mut r = grad_check(
            &inputs,
            |t, v| {
                let y = t.attention(v[0], v[1], v[2], groups, 2, 0.5)?;
                probe(t, y, 9)
            },
            o,
        )?;
        r.inputs
            .iter_mut()
            .for_each(|i| i.name = format!("{}/{}", i.name, ["joint", "spatial", "slice"][g]));
        all.inputs.extend(r.inputs);
    }
    Ok(all)
}

fn softmax_dice(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let labels: Vec<u8> = (0..27).map(|_| rng.gen_range(0..4)).collect();
    let inputs = named(vec![("logits", random(&mut rng, &[4, 3, 3, 3], 1.0))]);
    grad_check(&inputs, |t, v| t.softmax_dice(v[0], &labels), o)
}

// --- blocks ------------------------------------------------------------------

fn attention_modes(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut all = GradCheckReport { inputs: Vec::new() };
    for (i, mode) in AttentionMode::ALL.into_iter().enumerate() {
        let cfg = AttentionConfig::new(4, 1.5, 2, mode, true)?;
        let mut store = ParamStore::<f64>::new();
        let att = Attention::build(&mut Builder::new(&mut store, i as u64), cfg)?;
        randomize(&mut store, i as u64, 1.2);
        let x = random(&mut ChaCha8Rng::seed_from_u64(40 + i as u64), &[6, 4], 1.0);
        let mut r = check_block(x, &store, o, |t, p, x| att.forward(t, p, x, [2, 1, 3]))?;
        r.inputs
            .iter_mut()
            .for_each(|inp| inp.name = format!("{}/{}", mode.as_str(), inp.name));
        all.inputs.extend(r.inputs);
    }
    Ok(all)
}

fn transformer_block(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = AttentionConfig::new(4, 1.5, 2, AttentionMode::Joint, true)?;
    let mut store = ParamStore::<f64>::new();
    let block = TransformerBlock::build(&mut Builder::new(&mut store, 3), "block1", cfg, 2)?;
    randomize(&mut store, 3, 0.6);
    let x = random(&mut ChaCha8Rng::seed_from_u64(8), &[4, 4], 1.0);
    check_block(x, &store, o, |t, p, x| block.forward(t, p, x, [2, 2, 1]))
}

fn dbm(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let dbm = Dbm::build(
        &mut Builder::new(&mut store, 4),
        "dbm",
        DbmConfig {
            channels: 4,
            reduction: 2,
            kernel: 3,
        },
    )?;
    // nonzero offsets keep sampling points off the lattice
    randomize(&mut store, 4, 0.3);
    let x = random(&mut ChaCha8Rng::seed_from_u64(5), &[4, 3, 3, 3], 1.0);
    check_block(x, &store, o, |t, p, x| dbm.forward(t, p, x))
}

fn encoder_decoder(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut store = ParamStore::<f64>::new();
    let mut b = Builder::new(&mut store, 6);
    let enc = Encoder::build(&mut b, 2, 2, &[3, 4], 1)?;
    let restore = Restore::build(&mut b, 4, 3, 4)?;
    let dec = Decoder::build(&mut b, 4, &enc.skip_channels(), 2)?;
    randomize(&mut store, 6, 0.5);
    let x = random(&mut ChaCha8Rng::seed_from_u64(7), &[2, 4, 4, 4], 1.0);
    check_block(x, &store, o, |t, p, x| {
        let e = enc.forward(t, p, x)?;
        let h = restore.forward(t, p, e.features)?;
        dec.forward(t, p, h, &e.skips)
    })
}

// --- end to end -------------------------------------------------------------

/// Smallest configuration that still exercises every component.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        name: "micro".into(),
        in_channels: 2,
        num_classes: 2,
        input_size: [8, 8, 8],
        stem_channels: 2,
        stage_channels: vec![4, 4, 4],
        blocks_per_stage: 1,
        embed_dim: 4,
        heads: 2,
        restore_channels: 4,
        dbm_reduction: vec![2, 2, 2],
        ffn_ratio: 2,
        ..ModelConfig::transbtsv2()
    }
}

fn micro_model(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut m = Model::<f64>::build(&micro_config(), 41)?;
    randomize(&mut m.params, 41, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = random(&mut rng, &[2, 8, 8, 8], 1.0);
    let labels: Vec<u8> = (0..512).map(|_| rng.gen_range(0..2)).collect();
    grad_check(
        &with_params(x, &m.params),
        |tape, vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let y = m.forward(tape, &p, vars[0])?;
            tape.softmax_dice(y, &labels)
        },
        o,
    )
}

fn units(scope: Scope) -> Vec<Unit> {
    let prim = |name, run| Unit {
        name,
        run,
        step: 1e-6,
        max_elements: None,
    };
    let block = |name, run| Unit {
        name,
        run,
        step: BLOCK_STEP,
        max_elements: Some(12),
    };
    match scope {
        Scope::Primitives => vec![
            prim("conv3d", conv3d),
            prim("depthwise_conv3d", depthwise_conv),
            prim("deform_conv3d", deform_conv3d),
            prim("grid_sample", grid_sample),
            prim("upsample", upsample),
            prim("dense", dense),
            prim("layout", layout),
            prim("dropout", dropout),
            prim("attention", attention_groupings),
            prim("softmax_dice", softmax_dice),
        ],
        Scope::Blocks => vec![
            block("attention_modes", attention_modes),
            block("transformer_block", transformer_block),
            block("dbm", dbm),
            Unit {
                max_elements: Some(8),
                ..block("encoder_restore_decoder", encoder_decoder)
            },
        ],
        Scope::End2end => vec![Unit {
            max_elements: Some(4),
            ..block("micro_model", micro_model)
        }],
    }
}

/// Runs every unit of `scope`. A unit whose gradients cannot even be
/// evaluated (for instance non-finite ones) is an error, not a failure.
pub fn run_scope(scope: Scope, opts: &SuiteOptions) -> Result<Vec<UnitResult>> {
    units(scope)
        .into_iter()
        .map(|u| {
            let g = GradCheckOptions {
                step: u.step,
                max_elements: u.max_elements,
                seed: 9,
                fault: opts.fault.clone(),
            };
            let start = Instant::now();
            let report = (u.run)(&g)?;
            let worst = report
                .inputs
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .map(|r| format!("{}[{}]", r.name, r.worst_index))
                .unwrap_or_default();
            let max_rel_error = report.max_rel_error();
            Ok(UnitResult {
                scope,
                name: u.name.to_string(),
                max_rel_error,
                worst,
                checked: report.inputs.iter().map(|r| r.checked).sum(),
                passed: max_rel_error <= opts.tol,
                seconds: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}
