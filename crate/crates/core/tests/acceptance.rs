//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! The overfit criterion trains for the full 200 steps at 32³ and dominates
//! the runtime. The repeatability criterion replays every deterministic
//! report and a shortened f64 training leg; set `VOLSEG_ACCEPTANCE_FULL=1`
//! to replay the full 200-step training in f64 instead.

mod common;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use volseg::checks::{run_scope, Scope, SuiteOptions};
use volseg::complexity::{compare, Convention};
use volseg::config::{Preset, RunConfig};
use volseg::model::{ablation_ladder, analyze, save_checkpoint, Model, ModelConfig};
use volseg::nn::{Attention, AttentionConfig, AttentionMode, Builder, ParamStore};
use volseg::tensor::{ConvSpec, DType, Tape, Tensor};
use volseg::train::{dice_score, evaluate, hd95, train, ConfidenceHistogram, MetricLog};

use common::{brute_dice, brute_hd95, random_labels, D8};

const GRADCHECK_BUDGET: Duration = Duration::from_secs(5 * 60);
const OVERFIT_BUDGET: Duration = Duration::from_secs(30 * 60);
const SHORT_REPLAY_STEPS: usize = 3;

struct Outcome {
    pass: bool,
    /// Deterministic summary; compared byte-for-byte across runs.
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x / target - 1.0).abs() <= rel
}

fn params_match_targets() -> Outcome {
    let v2 = analyze(&ModelConfig::transbtsv2(), Convention::Mac, false)
        .unwrap()
        .totals
        .params;
    let v1 = analyze(&ModelConfig::transbts_v1(), Convention::Mac, false)
        .unwrap()
        .totals
        .params;
    let built = Model::<f32>::build(&ModelConfig::transbtsv2(), 0)
        .unwrap()
        .num_params();
    let pass = within(v2 as f64, 15.30e6, 0.10) && within(v1 as f64, 32.99e6, 0.10) && built == v2;
    Outcome::new(
        pass,
        format!(
            "v2 {:.3}M (built {built}), v1 {:.3}M",
            v2 as f64 / 1e6,
            v1 as f64 / 1e6
        ),
    )
}

fn v1_to_v2_reductions() -> Outcome {
    let v2 = analyze(&ModelConfig::transbtsv2(), Convention::Mac, false).unwrap();
    let v1 = analyze(&ModelConfig::transbts_v1(), Convention::Mac, false).unwrap();
    let r = compare(&v1, &v2).unwrap();
    let pass = v2.input_shape == [4, 128, 128, 128]
        && (r.params_pct - 53.62).abs() <= 3.0
        && (r.flops_pct - 27.75).abs() <= 3.0;
    Outcome::new(
        pass,
        format!(
            "params -{:.2}%, flops -{:.2}% at {:?}",
            r.params_pct, r.flops_pct, v2.input_shape
        ),
    )
}

fn per_slice_is_exact() -> Outcome {
    let mut worst = 0.0f64;
    let mut pass = true;
    for conv in [Convention::Mac, Convention::Flops2] {
        for cfg in [ModelConfig::transbtsv2(), ModelConfig::transbts_v1()] {
            let r = analyze(&cfg, conv, false).unwrap();
            let per_case = r.totals.flops as f64;
            pass &= r.per_slice == per_case / 128.0 && r.per_slice * 128.0 == per_case;
            worst = worst.max((r.per_slice * 128.0 - per_case).abs());
        }
    }
    Outcome::new(pass, format!("max |128·per_slice − per_case| = {worst}"))
}

fn ablation_ladder_shape() -> Outcome {
    let rows = ablation_ladder(Convention::Mac).unwrap();
    let params: Vec<u64> = rows.iter().map(|r| r.params).collect();
    let monotone = params.windows(2).all(|w| w[0] < w[1]);
    let full = ModelConfig::transbtsv2();
    let d = full.embed_dim as u64;
    let dm = (full.expansion * d as f64).round() as u64;
    let qk = params[4] - params[3];
    let dbm = params[3] - params[2];
    let pass = rows.len() == 5
        && monotone
        && within(params[0] as f64, 4.76e6, 0.15)
        && within(qk as f64, 0.27e6, 0.25)
        && qk == 2 * d * (dm - d)
        && within(dbm as f64, 0.15e6, 0.25);
    let ladder: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.3}M", r.variant, r.params as f64 / 1e6))
        .collect();
    Outcome::new(
        pass,
        format!(
            "{}; QK↑ +{qk} (2·d·(d_m−d) = {}), DBM +{dbm}",
            ladder.join(" < "),
            2 * d * (dm - d)
        ),
    )
}

fn width_beats_depth() -> Outcome {
    let (deep, wide) = ModelConfig::depth_width_pair();
    let a = analyze(&deep, Convention::Mac, false).unwrap().totals;
    let b = analyze(&wide, Convention::Mac, false).unwrap().totals;
    let gap = (a.params as f64 - b.params as f64).abs() / b.params as f64;
    let pass = gap <= 0.05 && a.flops > b.flops;
    Outcome::new(
        pass,
        format!(
            "deep {:.3}M/{:.1}G, wide {:.3}M/{:.1}G, param gap {:.2}%",
            a.params as f64 / 1e6,
            a.flops as f64 / 1e9,
            b.params as f64 / 1e6,
            b.flops as f64 / 1e9,
            100.0 * gap
        ),
    )
}

fn gradient_suite() -> (Outcome, Duration) {
    let start = Instant::now();
    let opts = SuiteOptions {
        tol: 1e-4,
        fault: None,
    };
    let mut results = Vec::new();
    for scope in Scope::ALL {
        results.extend(run_scope(scope, &opts).unwrap());
    }
    let elapsed = start.elapsed();
    let worst = results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let has = |name: &str| results.iter().any(|r| r.name == name);
    let pass = failed.is_empty()
        && has("deform_conv3d")
        && has("micro_model")
        && elapsed <= GRADCHECK_BUDGET;
    let mut detail = format!(
        "{} units at tol 1e-4 in f64, worst {} {:.2e}",
        results.len(),
        worst.name,
        worst.max_rel_error
    );
    if !failed.is_empty() {
        let _ = write!(detail, "; failed: {}", failed.join(", "));
    }
    (Outcome::new(pass, detail), elapsed)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn zero_offset_deformable() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    let cases = 20;
    for _ in 0..cases {
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let dims: [usize; 3] = std::array::from_fn(|_| rng.gen_range(3..7));
        let spec = ConvSpec::same(3);
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[cin, dims[0], dims[1], dims[2]]));
        let w = tape.constant(random_tensor(&mut rng, &[cout, cin, 3, 3, 3]));
        let b = tape.constant(random_tensor(&mut rng, &[cout]));
        let off = tape.constant(Tensor::zeros(&[81, dims[0], dims[1], dims[2]]));
        let plain = tape.conv3d(x, w, Some(b), &spec).unwrap();
        let deformed = tape.deform_conv3d(x, w, off, Some(b), &spec).unwrap();
        worst = worst.max(tape.value(plain).max_abs_diff(tape.value(deformed)));
    }
    Outcome::new(
        worst < 1e-12,
        format!("{cases} random cases, max |Δ| = {worst:.1e}"),
    )
}

fn attention_rows() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let cases = 128;
    let (mut worst, mut rows_checked) = (0.0f64, 0usize);
    for case in 0..cases {
        let mode = AttentionMode::ALL[case % 4];
        let grid: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..5));
        let expansion = if rng.gen_bool(0.5) { 1.5 } else { 1.0 };
        let cfg = AttentionConfig::new(8, expansion, 2, mode, rng.gen_bool(0.5)).unwrap();
        let mut store = ParamStore::<f64>::new();
        let att = Attention::build(&mut Builder::new(&mut store, rng.gen()), cfg).unwrap();
        let n: usize = grid.iter().product();
        let mut x = random_tensor(&mut rng, &[n, 8]);
        x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (_, nodes) = att.forward_with_weights(&mut tape, &p, xv, grid).unwrap();
        for node in nodes {
            for row in tape.attention_rows(node).unwrap() {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                rows_checked += 1;
            }
        }
    }
    Outcome::new(
        worst <= 1e-9,
        format!("{cases} cases over 4 modes, {rows_checked} rows, max |Σ−1| = {worst:.1e}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for _ in 0..200 {
        let (p, t) = (random_labels(&mut rng), random_labels(&mut rng));
        for class in 1..3u8 {
            let a: Vec<bool> = p.iter().map(|&v| v == class).collect();
            let b: Vec<bool> = t.iter().map(|&v| v == class).collect();
            mismatches += (dice_score(&p, &t, class) != brute_dice(&a, &b)) as usize;
            mismatches += (hd95(&p, &t, D8, class) != brute_hd95(&a, &b)) as usize;
        }
    }
    // histograms from random probability fields over random labels
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let truth = random_labels(&mut rng);
        let mut probs = vec![0.0; 3 * truth.len()];
        for v in 0..truth.len() {
            let raw: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0f64..1.0).powi(3));
            let s: f64 = raw.iter().sum::<f64>().max(1e-300);
            for c in 0..3 {
                probs[c * truth.len() + v] = raw[c] / s;
            }
        }
        let mut h = ConfidenceHistogram::new(3);
        h.accumulate(&probs, &truth);
        for bins in h.proportions().into_iter().flatten() {
            worst = worst.max((bins.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Outcome::new(
        mismatches == 0 && worst <= 1e-9,
        format!(
            "200 pairs × 2 classes, {mismatches} mismatches; histogram max |Σ−1| = {worst:.1e}"
        ),
    )
}

struct TrainLeg {
    checkpoint: Vec<u8>,
    log: Vec<u8>,
    losses: Vec<f64>,
    final_dice: Vec<f64>,
}

/// Trains the overfit recipe, writing checkpoint and log under `dir`.
fn overfit_leg(dir: &Path, precision: DType, steps: usize) -> TrainLeg {
    let mut cfg = RunConfig::preset(Preset::Overfit);
    cfg.train.precision = precision;
    if steps < cfg.train.total_epochs {
        cfg.train.total_epochs = steps;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.min(steps - 1);
    }
    cfg.validate().unwrap();
    let data = cfg.data.load(cfg.model.num_classes).unwrap();
    match precision {
        DType::F32 => run_leg::<f32>(&cfg, &data, dir),
        DType::F64 => run_leg::<f64>(&cfg, &data, dir),
    }
}

fn run_leg<T: volseg::tensor::Scalar>(
    cfg: &RunConfig,
    data: &[volseg::train::SegmentationSample],
    dir: &Path,
) -> TrainLeg {
    fs::create_dir_all(dir).unwrap();
    let mut model = Model::<T>::build(&cfg.model, cfg.train.seed).unwrap();
    let mut log = MetricLog::create(&dir.join("metrics.jsonl")).unwrap();
    let report = train(&mut model, data, &cfg.train, |r| {
        let epoch = r.epoch.unwrap_or(0);
        if epoch % 20 == 0 {
            eprintln!(
                "  epoch {epoch:>3}  loss {:.4}  dice {:.3?}",
                r.loss, r.dice
            );
        }
        log.append(r)
    })
    .unwrap();
    drop(log);
    assert!(
        report.halted.is_none(),
        "training halted: {:?}",
        report.halted
    );
    save_checkpoint(&model.params, &cfg.model.name, &dir.join("checkpoint")).unwrap();
    let final_dice = evaluate(&model, data).unwrap().dice;
    TrainLeg {
        checkpoint: fs::read(dir.join("checkpoint.bin")).unwrap(),
        log: fs::read(dir.join("metrics.jsonl")).unwrap(),
        losses: report.records.iter().map(|r| r.loss).collect(),
        final_dice,
    }
}

fn overfit(dir: &Path) -> (Outcome, Duration) {
    let start = Instant::now();
    let leg = overfit_leg(dir, DType::F32, usize::MAX);
    let elapsed = start.elapsed();
    let mean = leg.final_dice.iter().sum::<f64>() / leg.final_dice.len() as f64;
    let (l1, l100) = (leg.losses[0], leg.losses[99]);
    let pass =
        leg.losses.len() == 200 && mean >= 0.90 && l100 < 0.5 * l1 && elapsed <= OVERFIT_BUDGET;
    let dice: Vec<String> = leg.final_dice.iter().map(|d| format!("{d:.3}")).collect();
    (
        Outcome::new(
            pass,
            format!(
                "seed 7, {} steps, mean fg Dice {mean:.3} [{}], loss(1) {l1:.4} → loss(100) {l100:.4}",
                leg.losses.len(),
                dice.join(", ")
            ),
        ),
        elapsed,
    )
}

/// The deterministic part of criteria 1–8 and 10.
fn report_pass() -> Vec<(usize, &'static str, Outcome, Option<Duration>)> {
    let (grad, grad_time) = gradient_suite();
    vec![
        (1, "parameter totals", params_match_targets(), None),
        (2, "v1 → v2 reductions", v1_to_v2_reductions(), None),
        (3, "per-slice FLOPs", per_slice_is_exact(), None),
        (4, "ablation ladder", ablation_ladder_shape(), None),
        (5, "width vs depth", width_beats_depth(), None),
        (6, "gradient suite", grad, Some(grad_time)),
        (
            7,
            "zero-offset deformable conv",
            zero_offset_deformable(),
            None,
        ),
        (8, "attention rows", attention_rows(), None),
        (10, "metric oracles", metric_oracles(), None),
    ]
}

fn digest(text: &[u8]) -> String {
    Sha256::digest(text)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn line(id: usize, name: &str, o: &Outcome, time: Option<Duration>) -> String {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    let time = time
        .map(|t| format!(" ({:.1}s)", t.as_secs_f64()))
        .unwrap_or_default();
    format!("[{verdict}] {id:>2}. {name}: {}{time}", o.detail)
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // `cargo test -- --list` probes every target; there is nothing to enumerate
        return ExitCode::SUCCESS;
    }
    let full = std::env::var("VOLSEG_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let work = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut all_pass = true;

    let first = report_pass();
    let mut report_a = String::new();
    for (id, name, o, t) in &first {
        let _ = writeln!(report_a, "{id} {}", o.detail);
        all_pass &= o.pass;
        lines.push((*id, line(*id, name, o, *t)));
    }

    eprintln!("overfit run (f32, 200 steps) ...");
    let (fit, fit_time) = overfit(&work.path().join("overfit"));
    all_pass &= fit.pass;
    lines.push((9, line(9, "overfit", &fit, Some(fit_time))));
    lines.sort_by_key(|(id, _)| *id);

    // repeatability: a second full pass over the reports plus two f64 training legs
    let second = report_pass();
    let report_b: String = second
        .iter()
        .map(|(id, _, o, _)| format!("{id} {}\n", o.detail))
        .collect();
    let steps = if full { usize::MAX } else { SHORT_REPLAY_STEPS };
    eprintln!(
        "f64 replay legs ({}) ...",
        if full {
            "200 steps".to_string()
        } else {
            format!("{steps} steps")
        }
    );
    let a = overfit_leg(&work.path().join("f64-a"), DType::F64, steps);
    let b = overfit_leg(&work.path().join("f64-b"), DType::F64, steps);
    let same_reports = report_a == report_b;
    let same_ckpt = a.checkpoint == b.checkpoint && a.log == b.log;
    let repeat = Outcome::new(
        same_reports && same_ckpt,
        format!(
            "reports {} ({}), f64 checkpoints after {} steps {} ({})",
            if same_reports { "identical" } else { "DIFFER" },
            &digest(report_a.as_bytes())[..16],
            a.losses.len(),
            if same_ckpt { "identical" } else { "DIFFER" },
            &digest(&a.checkpoint)[..16]
        ),
    );
    all_pass &= repeat.pass;
    lines.push((11, line(11, "repeatability", &repeat, None)));

    println!("acceptance:");
    for (_, l) in &lines {
        println!("{l}");
    }
    let passed = lines
        .iter()
        .filter(|(_, l)| l.starts_with("[PASS]"))
        .count();
    println!("{passed}/{} criteria passed", lines.len());
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
