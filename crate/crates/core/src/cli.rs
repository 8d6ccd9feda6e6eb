//! The `volseg` command line. Data goes to stdout, progress and errors to
//! stderr; the exit code is zero only on full success.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks::{run_scope, Scope, SuiteOptions, UnitResult};
use crate::complexity::{compare, ComplexityReport, Convention};
use crate::config::{load_model_config, Preset, RunConfig};
use crate::error::{Error, Result};
use crate::model::{
    ablation_ladder, analyze_at, load_checkpoint, save_checkpoint, AblationRow, Model, ModelConfig,
};
use crate::tensor::{DType, Scalar};
use crate::train::{
    configure_threads, evaluate, load_dataset, train, MetricLog, MetricsRecord, CONFIDENCE_EDGES,
};

/// Exit status when training stopped on a non-finite loss or gradient.
pub const EXIT_HALTED: i32 = 3;
/// Exit status when a gradient check exceeded its tolerance.
pub const EXIT_CHECK_FAILED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "volseg",
    version,
    about = "Hybrid CNN/Transformer volumetric segmentation toolkit"
)]
pub struct Cli {
    /// Run configuration (TOML). `complexity` also accepts a bare model table.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub precision: Option<PrecisionArg>,
    #[arg(long, global = true, value_enum, default_value = "mac")]
    pub convention: ConventionArg,
    #[arg(long, global = true, value_enum, default_value = "table")]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for DType {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => DType::F32,
            PrecisionArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Mac,
    Flops2,
}

impl From<ConventionArg> for Convention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Mac => Convention::Mac,
            ConventionArg::Flops2 => Convention::Flops2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Csv,
    JsonLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    Primitives,
    Blocks,
    End2end,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and FLOP accounting, optionally against a second model.
    Complexity(ComplexityArgs),
    /// Finite-difference verification of the analytic gradients (always 64-bit).
    Gradcheck(GradcheckArgs),
    /// Train from a run config; writes a checkpoint and a JSONL metric log.
    Train(TrainArgs),
    /// Score a checkpoint: per-class Dice, HD95 and confidence histogram.
    Eval(EvalArgs),
    /// Write a complete run config for a preset.
    InitConfig(InitConfigArgs),
    /// Params and FLOPs of the five cumulative ablation variants.
    AblationTable(AblationArgs),
}

#[derive(Debug, Args)]
pub struct ComplexityArgs {
    /// Model preset used when --config is absent.
    #[arg(long, default_value = "transbtsv2")]
    pub preset: String,
    /// `C,H,W,D`; defaults to the model's own input shape.
    #[arg(long, value_delimiter = ',')]
    pub input_shape: Option<Vec<usize>>,
    /// Second model: a config path or a preset name.
    #[arg(long)]
    pub compare: Option<String>,
    /// Count element-wise ops (norms, softmax, activations) as well.
    #[arg(long)]
    pub include_aux: bool,
    /// Also write the full report as JSON here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub scope: ScopeArg,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Test hook: perturb the backward pass of this op (e.g. `conv3d`).
    #[arg(long)]
    pub fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory for `checkpoint.{json,bin}`, `metrics.jsonl` and the
    /// resolved `config.toml`.
    #[arg(long)]
    pub out: PathBuf,
    /// Reads `sample_NNNN.vol/.lbl` pairs instead of the config's data source.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Preset used when --config is absent.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint stem: `<stem>.json` plus its payload.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct InitConfigArgs {
    #[arg(long, default_value = "transbtsv2")]
    pub preset: String,
    /// Written to stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    /// Also write the table here, in the chosen format.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            // help and version are data; parse errors are diagnostics
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
            } else {
                let _ = write!(out, "{}", e.render());
            }
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let threads = configure_threads()?;
    let _ = writeln!(err, "using {threads} thread(s)");
    match &cli.command {
        Command::Complexity(a) => cmd_complexity(cli, a, out),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a, out, err),
        Command::Train(a) => cmd_train(cli, a, out, err),
        Command::Eval(a) => cmd_eval(cli, a, out, err),
        Command::InitConfig(a) => cmd_init_config(a, out, err),
        Command::AblationTable(a) => cmd_ablation(cli, a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A config file when `spec` names an existing path, otherwise a preset.
fn model_from(spec: &str) -> Result<ModelConfig> {
    let path = Path::new(spec);
    if path.exists() {
        load_model_config(path)
    } else {
        Ok(RunConfig::preset(Preset::parse(spec)?).model)
    }
}

fn run_config(cli: &Cli, preset: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(p)) => RunConfig::preset(Preset::parse(p)?),
        (None, None) => return Err(Error::Config("--config or --preset is required".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.train.precision = p.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

// --- complexity ---------------------------------------------------------------

fn cmd_complexity(cli: &Cli, a: &ComplexityArgs, out: &mut dyn Write) -> Result<i32> {
    let model = match &cli.config {
        Some(path) => load_model_config(path)?,
        None => model_from(&a.preset)?,
    };
    let shape = match &a.input_shape {
        Some(v) => <[usize; 4]>::try_from(v.as_slice()).map_err(|_| {
            Error::Config(format!(
                "--input-shape needs C,H,W,D, got {} values",
                v.len()
            ))
        })?,
        None => model.input_shape(),
    };
    let convention: Convention = cli.convention.into();
    let report = analyze_at(&model, shape, convention, a.include_aux)?;
    if let Some(path) = &a.output {
        write_file(path, &report.to_json())?;
    }
    let other = match &a.compare {
        Some(spec) => Some(analyze_at(
            &model_from(spec)?,
            shape,
            convention,
            a.include_aux,
        )?),
        None => None,
    };
    let text = match (&other, cli.format) {
        (None, Format::Table) => report.to_table(),
        (None, Format::Csv) => report.to_csv(),
        (None, Format::JsonLike) => report.to_json() + "\n",
        (Some(b), fmt) => comparison(&report, b, fmt)?,
    };
    emit(out, &text)?;
    Ok(0)
}

/// `--compare` output: how much smaller `candidate` is than `baseline`.
fn comparison(
    candidate: &ComplexityReport,
    baseline: &ComplexityReport,
    fmt: Format,
) -> Result<String> {
    let red = compare(baseline, candidate)?;
    let (first, second) = (baseline, candidate);
    let mut s = String::new();
    match fmt {
        Format::Table => {
            let _ = writeln!(
                s,
                "{:<24}  {:>14}  {:>18}  {:>14}",
                "model", "params", "flops", "per slice"
            );
            for r in [first, second] {
                let _ = writeln!(
                    s,
                    "{:<24}  {:>14}  {:>18}  {:>14.0}",
                    r.model, r.totals.params, r.totals.flops, r.per_slice
                );
            }
            let _ = writeln!(
                s,
                "{} vs {}: params -{:.2}%  flops -{:.2}%  ({})",
                second.model,
                first.model,
                red.params_pct,
                red.flops_pct,
                candidate.convention.as_str()
            );
        }
        Format::Csv => {
            let _ = writeln!(s, "model,params,flops,per_slice");
            for r in [first, second] {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    r.model, r.totals.params, r.totals.flops, r.per_slice
                );
            }
            let _ = writeln!(s, "reduction_pct,{},{},", red.params_pct, red.flops_pct);
        }
        Format::JsonLike => {
            let v = serde_json::json!({
                "baseline": serde_json::from_str::<serde_json::Value>(&first.summary_json()).expect("valid json"),
                "candidate": serde_json::from_str::<serde_json::Value>(&second.summary_json()).expect("valid json"),
                "reduction": red,
            });
            let _ = writeln!(s, "{v}");
        }
    }
    Ok(s)
}

// --- gradcheck ----------------------------------------------------------------

fn cmd_gradcheck(
    cli: &Cli,
    a: &GradcheckArgs,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    if cli.precision == Some(PrecisionArg::F32) {
        let _ = writeln!(
            err,
            "note: gradient checks always run in f64; --precision f32 is ignored"
        );
    }
    let scopes: Vec<Scope> = match a.scope {
        ScopeArg::Primitives => vec![Scope::Primitives],
        ScopeArg::Blocks => vec![Scope::Blocks],
        ScopeArg::End2end => vec![Scope::End2end],
        ScopeArg::All => Scope::ALL.to_vec(),
    };
    let opts = SuiteOptions {
        tol: a.tol,
        fault: a.fault.clone(),
    };
    let mut results = Vec::new();
    for scope in scopes {
        let _ = writeln!(err, "checking {scope} ...");
        results.extend(run_scope(scope, &opts)?);
    }
    emit(out, &gradcheck_text(&results, a.tol, cli.format))?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(0)
    } else {
        let _ = writeln!(err, "gradient check failed for: {}", failed.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

fn gradcheck_text(results: &[UnitResult], tol: f64, fmt: Format) -> String {
    let mut s = String::new();
    match fmt {
        Format::Table => {
            let _ = writeln!(
                s,
                "{:<10}  {:<24}  {:>12}  {:>8}  {:<28}  result",
                "scope", "unit", "max rel err", "checked", "worst"
            );
            for r in results {
                let verdict = if r.passed { "pass" } else { "FAIL" };
                let _ = writeln!(
                    s,
                    "{:<10}  {:<24}  {:>12.3e}  {:>8}  {:<40}  {verdict}",
                    r.scope.as_str(),
                    r.name,
                    r.max_rel_error,
                    r.checked,
                    r.worst
                );
            }
            let _ = writeln!(s, "tolerance {tol:e}");
        }
        Format::Csv => {
            let _ = writeln!(s, "scope,unit,max_rel_error,checked,worst,passed");
            for r in results {
                let _ = writeln!(
                    s,
                    "{},{},{:e},{},{},{}",
                    r.scope.as_str(),
                    r.name,
                    r.max_rel_error,
                    r.checked,
                    r.worst,
                    r.passed
                );
            }
        }
        Format::JsonLike => {
            let _ = writeln!(s, "{}", serde_json::json!({ "tol": tol, "units": results }));
        }
    }
    s
}

// --- train / eval -------------------------------------------------------------

fn load_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<Vec<crate::train::SegmentationSample>> {
    match dir {
        Some(d) => load_dataset(d),
        None => cfg.data.load(cfg.model.num_classes),
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(cli, a.preset.as_deref())?;
    let data = load_data(&cfg, a.data_dir.as_deref())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("config.toml"), &cfg.to_toml())?;
    let _ = writeln!(
        err,
        "training {} on {} samples for {} epochs ({:?})",
        cfg.model.name,
        data.len(),
        cfg.train.total_epochs,
        cfg.train.precision
    );
    match cfg.train.precision {
        DType::F32 => train_as::<f32>(&cfg, &data, &a.out, cli.format, out, err),
        DType::F64 => train_as::<f64>(&cfg, &data, &a.out, cli.format, out, err),
    }
}

fn train_as<T: Scalar>(
    cfg: &RunConfig,
    data: &[crate::train::SegmentationSample],
    dir: &Path,
    fmt: Format,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<i32> {
    let mut model = Model::<T>::build(&cfg.model, cfg.train.seed)?;
    let mut log = MetricLog::create(&dir.join("metrics.jsonl"))?;
    let report = train(&mut model, data, &cfg.train, |r| {
        let _ = writeln!(
            err,
            "epoch {:>4}  lr {:.3e}  loss {:.5}  mean dice {:.4}",
            r.epoch.unwrap_or(0),
            r.lr.unwrap_or(0.0),
            r.loss,
            r.mean_dice()
        );
        log.append(r)
    })?;
    let digest = save_checkpoint(&model.params, &cfg.model.name, &dir.join("checkpoint"))?;
    let _ = writeln!(
        err,
        "checkpoint {} (sha256 {digest})",
        dir.join("checkpoint.json").display()
    );
    if let Some(last) = report.records.last() {
        emit(out, &metrics_text(last, fmt))?;
    }
    match report.halted {
        Some(reason) => {
            let _ = writeln!(
                err,
                "training halted: {reason}; the checkpoint holds the last good parameters"
            );
            Ok(EXIT_HALTED)
        }
        None => Ok(0),
    }
}

fn cmd_eval(cli: &Cli, a: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(cli, a.preset.as_deref())?;
    let data = load_data(&cfg, a.data_dir.as_deref())?;
    let precision = cli
        .precision
        .map(DType::from)
        .unwrap_or(cfg.train.precision);
    let record = match precision {
        DType::F32 => eval_as::<f32>(&cfg, &data, &a.checkpoint, err)?,
        DType::F64 => eval_as::<f64>(&cfg, &data, &a.checkpoint, err)?,
    };
    emit(out, &metrics_text(&record, cli.format))?;
    Ok(0)
}

fn eval_as<T: Scalar>(
    cfg: &RunConfig,
    data: &[crate::train::SegmentationSample],
    stem: &Path,
    err: &mut dyn Write,
) -> Result<MetricsRecord> {
    let mut model = Model::<T>::build(&cfg.model, cfg.train.seed)?;
    let manifest = load_checkpoint(&mut model.params, stem)?;
    let _ = writeln!(
        err,
        "loaded {} ({} tensors) for {}",
        stem.display(),
        manifest.tensors.len(),
        manifest.model
    );
    evaluate(&model, data)
}

pub fn metrics_text(r: &MetricsRecord, fmt: Format) -> String {
    let mut s = String::new();
    let hd = |h: Option<f64>| h.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    match fmt {
        Format::Table => {
            let edges = CONFIDENCE_EDGES;
            let _ = writeln!(
                s,
                "{:<6}  {:>7}  {:>8}  {:>9}  {:>9}  {:>9}  {:>9}",
                "class",
                "dice",
                "hd95",
                format!("<{}", edges[0]),
                format!("{}-{}", edges[0], edges[1]),
                format!("{}-{}", edges[1], edges[2]),
                format!(">={}", edges[2])
            );
            for c in 0..r.dice.len() {
                let bins = r.histogram.get(c).copied().flatten();
                let cell = |i: usize| bins.map_or("n/a".to_string(), |b| format!("{:.4}", b[i]));
                let _ = writeln!(
                    s,
                    "{:<6}  {:>7.4}  {:>8}  {:>9}  {:>9}  {:>9}  {:>9}",
                    c + 1,
                    r.dice[c],
                    hd(r.hd95[c]),
                    cell(0),
                    cell(1),
                    cell(2),
                    cell(3)
                );
            }
            let _ = writeln!(s, "loss {:.6}  mean dice {:.4}", r.loss, r.mean_dice());
        }
        Format::Csv => {
            let _ = writeln!(s, "class,dice,hd95,p_lt_0.1,p_0.1_0.5,p_0.5_0.9,p_ge_0.9");
            for c in 0..r.dice.len() {
                let bins = r.histogram.get(c).copied().flatten();
                let cell = |i: usize| bins.map_or(String::new(), |b| b[i].to_string());
                let hd = r.hd95[c].map_or(String::new(), |v| v.to_string());
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    c + 1,
                    r.dice[c],
                    hd,
                    cell(0),
                    cell(1),
                    cell(2),
                    cell(3)
                );
            }
        }
        Format::JsonLike => {
            let _ = writeln!(
                s,
                "{}",
                serde_json::to_string(r).expect("record serializes")
            );
        }
    }
    s
}

// --- config scaffolding and ablation ----------------------------------------------

fn cmd_init_config(a: &InitConfigArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let text = RunConfig::preset(Preset::parse(&a.preset)?).to_toml();
    match &a.output {
        Some(path) => {
            write_file(path, &text)?;
            let _ = writeln!(err, "wrote {}", path.display());
        }
        None => emit(out, &text)?,
    }
    Ok(0)
}

fn cmd_ablation(cli: &Cli, a: &AblationArgs, out: &mut dyn Write) -> Result<i32> {
    let rows = ablation_ladder(cli.convention.into())?;
    let text = ablation_text(&rows, cli.format);
    if let Some(path) = &a.output {
        write_file(path, &text)?;
    }
    emit(out, &text)?;
    Ok(0)
}

pub fn ablation_text(rows: &[AblationRow], fmt: Format) -> String {
    let mut s = String::new();
    match fmt {
        Format::Table => {
            let _ = writeln!(
                s,
                "{:<14}  {:>12}  {:>16}  {:>11}  {:>15}",
                "variant", "params", "flops", "Δparams", "Δflops"
            );
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<14}  {:>12}  {:>16}  {:>+11}  {:>+15}",
                    r.variant, r.params, r.flops, r.delta_params, r.delta_flops
                );
            }
        }
        Format::Csv => {
            let _ = writeln!(s, "variant,params,flops,delta_params,delta_flops");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.variant, r.params, r.flops, r.delta_params, r.delta_flops
                );
            }
        }
        Format::JsonLike => {
            let _ = writeln!(
                s,
                "{}",
                serde_json::to_string(rows).expect("rows serialize")
            );
        }
    }
    s
}
