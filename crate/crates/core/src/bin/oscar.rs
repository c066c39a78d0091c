use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use oscar_kv::cache::{evaluate_dump, summarize, CacheLayout, EvalMode, EvalOptions};
use oscar_kv::calibration::{calibrate_bundle, CalibrationOptions, ClipScope, SharingMode, DEFAULT_CLIP_GRID};
use oscar_kv::io::{load_bundle, load_dump, save_bundle, save_dump};
use oscar_kv::synth::{generate, SynthConfig};
use oscar_kv::verify::{run_all, worked_example_report, VerifyConfig};
use oscar_kv::{OscarError, Result};

#[derive(Parser)]
#[command(name = "oscar", version, about = "KV-cache rotation calibration and INT2 cache simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic activation dump.
    Synth(SynthArgs),
    /// Calibrate rotations and clip ratios from an activation dump.
    Calibrate(CalibrateArgs),
    /// Simulate the quantized cache and report distortion metrics.
    Eval(EvalArgs),
    /// Run the numerical oracles; exits 1 if any check fails.
    Verify(VerifyArgs),
    /// Compare the five rotation families on one kv-head.
    Table(TableArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    tokens: usize,
    #[arg(long, default_value_t = 128)]
    head_dim: usize,
    #[arg(long, default_value_t = 2)]
    kv_heads: usize,
    #[arg(long, default_value_t = 4)]
    gqa_ratio: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    outlier_channels: usize,
    #[arg(long, default_value_t = 10.0)]
    outlier_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    spectrum_decay: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Group size for both keys and values.
    #[arg(long, default_value_t = 128)]
    group_size: usize,
    #[arg(long)]
    key_group: Option<usize>,
    #[arg(long)]
    value_group: Option<usize>,
    /// Comma-separated candidate clip ratios.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CLIP_GRID.to_vec())]
    clip_grid: Vec<f64>,
    /// Share one rotation across the kv-heads of a layer.
    #[arg(long)]
    share_heads: bool,
    /// Calibrate one clip pair per layer (`false` for a single global pair).
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    per_layer_clip: bool,
    #[arg(long, default_value_t = 2)]
    bits: u8,
    /// Use unmasked attention scores for the value target.
    #[arg(long)]
    non_causal: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Override the bundle's bit width.
    #[arg(long)]
    bits: Option<u8>,
    /// Override the bundle's group size for keys and values.
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long, default_value_t = 64)]
    sink: usize,
    #[arg(long, default_value_t = 256)]
    recent: usize,
    /// oscar | hadamard | eigen | eigen-hadamard | none | passthrough
    #[arg(long, default_value = "oscar")]
    rotation: String,
    /// Truncate scales and zero points to bf16.
    #[arg(long)]
    bf16_meta: bool,
    /// Tokens written by prefill before token-by-token decode.
    #[arg(long)]
    prefill: Option<usize>,
    /// Context length for the effective-BPE figure.
    #[arg(long, default_value_t = 131_072)]
    bpe_context: usize,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated power-of-two dimensions for the Hadamard check.
    #[arg(long, value_delimiter = ',', default_values_t = VerifyConfig::default().dims)]
    dims: Vec<usize>,
    /// Random instances per check.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Orthogonal samples per instance.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Comma-separated dimensions (at most 7) for the permutation oracle.
    #[arg(long, value_delimiter = ',', default_values_t = VerifyConfig::default().enumeration_dims)]
    enumeration_dims: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TableArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    #[arg(long, default_value_t = 64)]
    group_size: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| OscarError::Format(e.to_string()))?;
    match path {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        tokens: a.tokens,
        head_dim: a.head_dim,
        kv_heads: a.kv_heads,
        gqa_ratio: a.gqa_ratio,
        layers: a.layers,
        outlier_channels: a.outlier_channels,
        outlier_scale: a.outlier_scale,
        spectrum_decay: a.spectrum_decay,
        seed: a.seed,
    };
    let dump = generate(&config)?;
    save_dump(&dump, &a.out)?;
    eprintln!("wrote {} ({})", a.out.display(), dump.content_hash());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let dump = load_dump(&a.activations)?;
    let options = CalibrationOptions {
        sharing: if a.share_heads { SharingMode::Shared } else { SharingMode::PerHead },
        bits: a.bits,
        key_group: a.key_group.unwrap_or(a.group_size),
        value_group: a.value_group.unwrap_or(a.group_size),
        clip_grid: a.clip_grid,
        clip_scope: if a.per_layer_clip { ClipScope::PerLayer } else { ClipScope::Global },
        causal: !a.non_causal,
    };
    let bundle = calibrate_bundle(&dump, &options)?;
    save_bundle(&bundle, &a.out)?;
    for s in &bundle.slots {
        eprintln!(
            "layer {} head {}: rho_k {} rho_v {}",
            s.layer,
            s.head.map_or("*".to_string(), |h| h.to_string()),
            s.key.clip_ratio,
            s.value.clip_ratio
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    rotation: String,
    sink: usize,
    recent: usize,
    bits: u8,
    key_group: usize,
    value_group: usize,
    bf16_meta: bool,
    summary: oscar_kv::cache::DistortionSummary,
    heads: &'a [oscar_kv::cache::DistortionReport],
}

fn eval(a: EvalArgs) -> Result<()> {
    let dump = load_dump(&a.activations)?;
    let mut bundle = load_bundle(&a.bundle)?;
    if let Some(g) = a.group_size {
        bundle.key_group = g;
        bundle.value_group = g;
    }
    let mode: EvalMode = a.rotation.parse()?;
    let options = EvalOptions {
        layout: CacheLayout::new(a.sink, a.recent),
        mode,
        prefill: a.prefill,
        bpe_context: a.bpe_context,
        bf16_meta: a.bf16_meta,
        causal: true,
    };
    let reports = evaluate_dump(&dump, &bundle, a.bits, &options)?;
    let out = EvalOutput {
        rotation: mode.to_string(),
        sink: a.sink,
        recent: a.recent,
        bits: a.bits.unwrap_or(bundle.bits),
        key_group: bundle.key_group,
        value_group: bundle.value_group,
        bf16_meta: a.bf16_meta,
        summary: summarize(&reports),
        heads: &reports,
    };
    emit(&out, a.metrics.as_deref())
}

fn verify(a: VerifyArgs) -> Result<bool> {
    let config = VerifyConfig {
        seed: a.seed,
        dims: a.dims,
        enumeration_dims: a.enumeration_dims,
        trials: a.trials,
        samples: a.samples,
    };
    let report = run_all(&config)?;
    for c in &report.checks {
        eprintln!(
            "{} {:<28} measured {:.3e} tolerance {:.1e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    emit(&report, a.out.as_deref())?;
    Ok(report.passed())
}

fn table(a: TableArgs) -> Result<()> {
    let dump = load_dump(&a.activations)?;
    let rows = worked_example_report(dump.head(a.layer, a.head)?, a.group_size)?;
    eprintln!("{:<8} {:>10} {:>12} {:>10} {:>12}", "mode", "max|K~|", "group range", "imp ratio", "tr(E_K)");
    for r in &rows {
        eprintln!(
            "{:<8} {:>10.3} {:>12.3} {:>10.3} {:>12.3}",
            r.mode, r.max_abs, r.mean_group_range, r.importance_ratio, r.trace_residual
        );
    }
    emit(&rows, a.out.as_deref())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Calibrate(a) => calibrate(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Verify(a) => verify(a),
        Command::Table(a) => table(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ OscarError::Consistency(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
