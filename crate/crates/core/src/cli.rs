//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 invalid configuration, 3 unreadable or malformed file,
//! 4 shape mismatch, 5 comparison threshold exceeded.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::cost::{format_ratio, mac_counts, CostReport};
use crate::engine::{
    dequantized_reference, relative_rms, run_fp_model, run_model_traced, ActivationConfig, BnParams, DsconvLayer,
    FpLayer,
};
use crate::error::{Error, Result};
use crate::io::{
    read_fp32_file, read_model_file, write_model_file, write_tensor_file, Model, NamedLayer, TensorPayload,
};
use crate::synth;
use crate::tensor::{ConvParams, Shape4};
use crate::weight::{QuantConfig, ScaleFit};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_SHAPE: i32 = 4;
pub const EXIT_THRESHOLD: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "dsconv", version, about = "Block-quantized convolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded Gaussian fp32 tensor.
    Gen(GenArgs),
    /// Quantize fp32 weight tensors into a model file.
    Quantize(QuantizeArgs),
    /// Run a model on an fp32 input tensor.
    Infer(InferArgs),
    /// Compare model output against full-precision references.
    Compare(CompareArgs),
    /// Print memory and compute cost estimates.
    Cost(CostArgs),
    /// Fold batch-norm parameters into a model.
    FoldBn(FoldBnArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum, PartialEq, Eq)]
pub enum ReportFormat {
    #[default]
    Text,
    /// Line-delimited `key=value`.
    Kv,
}

#[derive(Debug, Clone, Copy, Default, ValueEnum, PartialEq, Eq)]
pub enum FitMode {
    #[default]
    L2,
    Kl,
}

impl From<FitMode> for ScaleFit {
    fn from(m: FitMode) -> Self {
        match m {
            FitMode::L2 => ScaleFit::L2,
            FitMode::Kl => ScaleFit::Kl,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Extents as `d0,d1,d2,d3`.
    #[arg(long)]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f32,
    /// Apply ReLU to the samples.
    #[arg(long)]
    pub nonneg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// fp32 weight tensor, one per layer, in order.
    #[arg(long = "weights", required = true)]
    pub weights: Vec<PathBuf>,
    /// Optional fp32 bias tensor per layer (C_o elements).
    #[arg(long = "bias")]
    pub bias: Vec<PathBuf>,
    /// Weight bit width.
    #[arg(long = "b")]
    pub bits: u8,
    /// Block size along the input-channel axis.
    #[arg(long = "B")]
    pub block: usize,
    #[arg(long, value_enum, default_value_t = FitMode::L2)]
    pub mode: FitMode,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub pad: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Activation mantissa bit width.
    #[arg(long = "b-act", default_value_t = 8)]
    pub b_act: u8,
    /// Apply ReLU to the input before the first layer.
    #[arg(long)]
    pub relu_first: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Original fp32 weights, one per layer. Enables the full-precision comparison.
    #[arg(long = "weights")]
    pub weights: Vec<PathBuf>,
    #[arg(long = "b-act", default_value_t = 8)]
    pub b_act: u8,
    #[arg(long)]
    pub relu_first: bool,
    /// Exit with code 5 when the relative RMS exceeds this value. Checked
    /// against the full-precision comparison when weights are given, else
    /// against the dequantized one.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Input channels C_i.
    pub ci_pos: Option<usize>,
    /// Block size B.
    pub block_pos: Option<usize>,
    /// Weight bit width b.
    pub bits_pos: Option<u32>,
    #[arg(long = "ci")]
    pub ci: Option<usize>,
    #[arg(long = "B")]
    pub block: Option<usize>,
    #[arg(long = "b")]
    pub bits: Option<u32>,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    /// Output channels, for total MAC counts.
    #[arg(long, default_value_t = 1)]
    pub co: usize,
    /// Kernel as `KhxKw`.
    #[arg(long, default_value = "1x1")]
    pub kernel: String,
    /// Output spatial size as `HxW`.
    #[arg(long = "out-size", default_value = "1x1")]
    pub out_size: String,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct FoldBnArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// JSON file: a BN object, or an array with one BN object (or null) per layer.
    #[arg(long)]
    pub bn: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Lib(Error),
    Threshold(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult = std::result::Result<(), CliError>;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Value(_) | Error::DegenerateBlock => EXIT_CONFIG,
        Error::Format { .. } | Error::Io(_) => EXIT_FORMAT,
        Error::Shape(_) => EXIT_SHAPE,
    }
}

/// Parse `args` (including the program name) and run. Reports go to `out`,
/// diagnostics to `err`; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Infer(a) => cmd_infer(a, out),
        Command::Compare(a) => cmd_compare(a, out),
        Command::Cost(a) => cmd_cost(a, out),
        Command::FoldBn(a) => cmd_fold_bn(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(CliError::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
        Err(CliError::Threshold(msg)) => {
            let _ = writeln!(err, "{msg}");
            EXIT_THRESHOLD
        }
    }
}

fn parse_list(s: &str, sep: char, n: usize, what: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(sep)
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::config(format!("cannot parse {what} '{s}'")))?;
    if v.len() != n {
        return Err(Error::config(format!("{what} needs {n} values, got '{s}'")));
    }
    Ok(v)
}

/// Small report writer for the two output formats.
struct Report<'a> {
    out: &'a mut dyn Write,
    format: ReportFormat,
}

impl Report<'_> {
    fn text(&mut self, line: impl AsRef<str>) {
        if self.format == ReportFormat::Text {
            let _ = writeln!(self.out, "{}", line.as_ref());
        }
    }

    fn kv(&mut self, key: impl AsRef<str>, value: impl std::fmt::Display) {
        if self.format == ReportFormat::Kv {
            let _ = writeln!(self.out, "{}={}", key.as_ref(), value);
        }
    }
}

fn cmd_gen(a: GenArgs) -> CliResult {
    let d = parse_list(&a.shape, ',', 4, "shape")?;
    let shape = Shape4::new(d[0], d[1], d[2], d[3])?;
    let t = if a.nonneg {
        synth::rectified_gaussian(shape, a.seed, a.std)?
    } else {
        synth::gaussian(shape, a.seed, a.std)?
    };
    write_tensor_file(&a.out, &TensorPayload::Fp32(t))?;
    Ok(())
}

fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

fn cmd_quantize(a: QuantizeArgs, out: &mut dyn Write) -> CliResult {
    let cfg = QuantConfig::new(a.bits, a.block)?;
    let params = ConvParams::new((a.stride, a.stride), (a.pad, a.pad))?;
    if !a.bias.is_empty() && a.bias.len() != a.weights.len() {
        return Err(Error::config(format!(
            "{} bias files for {} weight files",
            a.bias.len(),
            a.weights.len()
        ))
        .into());
    }
    let mut r = Report { out, format: a.format };
    let mut model = Model::default();
    for (i, path) in a.weights.iter().enumerate() {
        let w = read_fp32_file(path)?;
        let [c_out, c_in, kh, kw] = w.shape().dims();
        let bias = match a.bias.get(i) {
            Some(p) => {
                let b = read_fp32_file(p)?.into_data();
                if b.len() != c_out {
                    return Err(
                        Error::shape(format!("bias file has {} values, layer has {c_out} filters", b.len())).into(),
                    );
                }
                b
            }
            None => vec![0.0; c_out],
        };
        let layer = DsconvLayer::from_weights(&w, bias, cfg, params, a.mode.into())?;
        let deq = layer.dequantized_weights();
        let diff: Vec<f32> = deq.data().iter().zip(w.data()).map(|(x, y)| x - y).collect();
        let err_rms = rms(&diff);
        let rel = if rms(w.data()) > 0.0 {
            err_rms / rms(w.data())
        } else {
            0.0
        };
        let saving = crate::cost::memory_saving(c_in, cfg.block(), u32::from(cfg.bits()))?;
        let macs = mac_counts(w.shape(), cfg.block(), (1, 1))?;
        let name = format!("conv{i}");

        r.text(format!(
            "layer {i} ({name}): weights {}, b={}, B={}, mode={:?}",
            w.shape(),
            cfg.bits(),
            cfg.block(),
            a.mode
        ));
        r.text(format!("  reconstruction RMS: {err_rms:.6e} (relative {rel:.6e})"));
        r.text(format!("  memory saving: {}", saving.percent(3)));
        r.text(format!(
            "  FP MACs/filter-pos: {} → {}",
            macs.int_per_position, macs.fp_per_position
        ));
        r.kv(format!("layer.{i}.name"), &name);
        r.kv(format!("layer.{i}.shape"), w.shape());
        r.kv(format!("layer.{i}.kernel"), format!("{kh}x{kw}"));
        r.kv(format!("layer.{i}.recon_rms"), format!("{err_rms:e}"));
        r.kv(format!("layer.{i}.recon_rel_rms"), format!("{rel:e}"));
        r.kv(format!("layer.{i}.memory_saving"), saving.as_f64());
        r.kv(format!("layer.{i}.memory_saving_pct"), saving.percent(3));
        r.kv(format!("layer.{i}.fp_macs_per_filter_pos_fp32"), macs.int_per_position);
        r.kv(format!("layer.{i}.fp_macs_per_filter_pos"), macs.fp_per_position);
        model.layers.push(NamedLayer { name, layer });
    }
    write_model_file(&a.out, &model)?;
    Ok(())
}

fn cmd_infer(a: InferArgs, out: &mut dyn Write) -> CliResult {
    let act = ActivationConfig::new(a.b_act, a.relu_first)?;
    let model = read_model_file(&a.model)?;
    let input = read_fp32_file(&a.input)?;
    let layers = model.dsconv_layers();
    let trace = run_model_traced(&layers, act, &input)?;
    let output = trace.last().map(|t| t.output.clone()).unwrap_or(input);
    write_tensor_file(&a.out, &TensorPayload::Fp32(output.clone()))?;

    let mut r = Report { out, format: a.format };
    let (mut fp, mut int) = (0u64, 0u64);
    for (i, (t, l)) in trace.iter().zip(&model.layers).enumerate() {
        fp += t.counts.fp_macs;
        int += t.counts.int_macs;
        r.text(format!(
            "layer {i} ({}): output {}, FP MACs {}, INT MACs {}, clamped mantissas {}",
            l.name,
            t.output.shape(),
            t.counts.fp_macs,
            t.counts.int_macs,
            t.encode_stats.clamped
        ));
        r.kv(format!("layer.{i}.output_shape"), t.output.shape());
        r.kv(format!("layer.{i}.fp_macs"), t.counts.fp_macs);
        r.kv(format!("layer.{i}.int_macs"), t.counts.int_macs);
        r.kv(format!("layer.{i}.clamped"), t.encode_stats.clamped);
    }
    r.text(format!("total: FP MACs {fp}, INT MACs {int}"));
    r.kv("total.fp_macs", fp);
    r.kv("total.int_macs", int);
    r.kv("output_shape", output.shape());
    Ok(())
}

fn cmd_compare(a: CompareArgs, out: &mut dyn Write) -> CliResult {
    let act = ActivationConfig::new(a.b_act, a.relu_first)?;
    if let Some(t) = a.threshold {
        if t.is_nan() || t < 0.0 {
            return Err(Error::config(format!("threshold must be >= 0, got {t}")).into());
        }
    }
    let model = read_model_file(&a.model)?;
    let input = read_fp32_file(&a.input)?;
    let layers = model.dsconv_layers();
    let trace = run_model_traced(&layers, act, &input)?;

    let mut r = Report { out, format: a.format };
    let mut worst_deq = 0.0f64;
    for (i, (t, layer)) in trace.iter().zip(&layers).enumerate() {
        let reference = dequantized_reference(layer, &t.encoded_input)?;
        let e = relative_rms(&t.output, &reference)?;
        worst_deq = worst_deq.max(e);
        r.text(format!("layer {i}: relative RMS vs dequantized FP conv: {e:.3e}"));
        r.kv(format!("layer.{i}.rel_rms_dequantized"), format!("{e:e}"));
    }
    r.text(format!("max relative RMS vs dequantized FP conv: {worst_deq:.3e}"));
    r.kv("rel_rms_dequantized", format!("{worst_deq:e}"));

    let mut checked = worst_deq;
    if !a.weights.is_empty() {
        if a.weights.len() != layers.len() {
            return Err(Error::config(format!("{} weight files for {} layers", a.weights.len(), layers.len())).into());
        }
        let fp_layers = a
            .weights
            .iter()
            .zip(&layers)
            .map(|(p, l)| {
                let w = read_fp32_file(p)?;
                if w.shape() != l.vqk().shape() {
                    return Err(Error::shape(format!(
                        "weights {} do not match layer {}",
                        w.shape(),
                        l.vqk().shape()
                    )));
                }
                Ok(FpLayer {
                    weights: w,
                    bias: l.bias().to_vec(),
                    params: l.params(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = run_fp_model(&fp_layers, a.relu_first, &input)?;
        let got = trace.last().map(|t| t.output.clone()).unwrap_or_else(|| input.clone());
        let e = relative_rms(&got, &reference)?;
        r.text(format!("relative RMS vs full-precision model: {e:.3e}"));
        r.kv("rel_rms_fp", format!("{e:e}"));
        checked = e;
    }

    if let Some(t) = a.threshold {
        if checked.is_nan() || checked > t {
            return Err(CliError::Threshold(format!(
                "relative RMS {checked:.3e} exceeds threshold {t:.3e}"
            )));
        }
    }
    Ok(())
}

fn cmd_cost(a: CostArgs, out: &mut dyn Write) -> CliResult {
    let ci = a.ci.or(a.ci_pos);
    let block = a
        .block
        .or(a.block_pos)
        .ok_or_else(|| Error::config("block size B is required"))?;
    let bits = a.bits.or(a.bits_pos);
    if block == 0 {
        return Err(Error::config("B must be >= 1").into());
    }
    if !a.eta.is_finite() || a.eta < 0.0 {
        return Err(Error::config(format!("eta must be >= 0, got {}", a.eta)).into());
    }
    if let Some(b) = bits {
        if b == 0 || b > 32 {
            return Err(Error::config(format!("b must be in 1..=32, got {b}")).into());
        }
    }
    let k = parse_list(&a.kernel, 'x', 2, "kernel")?;
    let o = parse_list(&a.out_size, 'x', 2, "output size")?;
    let mut r = Report { out, format: a.format };

    r.kv("B", block);
    r.kv("eta", a.eta);
    match ci {
        Some(ci) => {
            let report =
                CostReport::new(ci, block, bits.unwrap_or(32), a.eta)?.with_macs(a.co, (k[0], k[1]), (o[0], o[1]))?;
            r.kv("ci", ci);
            if let Some(b) = bits {
                r.kv("b", b);
                r.text(format!("saving {}", report.memory_saving.percent(3)));
                r.kv("memory_saving", report.memory_saving.as_f64());
                r.kv("memory_saving_pct", report.memory_saving.percent(3));
            }
            r.text(format!("ratio {}", format_ratio(report.speed_ratio_threshold)));
            r.text(format!("max speedup {}", report.max_speedup));
            r.kv("speed_ratio_threshold", format_ratio(report.speed_ratio_threshold));
            r.kv("max_speedup", report.max_speedup);
            if let Some(m) = report.macs {
                r.text(format!(
                    "FP MACs/filter-pos: {} → {}",
                    m.int_per_position, m.fp_per_position
                ));
                r.text(format!("total MACs: INT {}, FP {}", m.int_total, m.fp_total));
                r.kv("int_macs_per_filter_pos", m.int_per_position);
                r.kv("fp_macs_per_filter_pos", m.fp_per_position);
                r.kv("int_macs", m.int_total);
                r.kv("fp_macs", m.fp_total);
            }
        }
        None => {
            if bits.is_some() {
                return Err(Error::config("memory saving needs C_i").into());
            }
            let ratio = crate::cost::speed_ratio_divisible(block, a.eta)?;
            r.text(format!("ratio {}", format_ratio(ratio)));
            r.kv("speed_ratio_threshold", format_ratio(ratio));
        }
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum BnFile {
    PerLayer(Vec<Option<BnParams>>),
    Single(BnParams),
}

fn cmd_fold_bn(a: FoldBnArgs) -> CliResult {
    let mut model = read_model_file(&a.model)?;
    let text = std::fs::read_to_string(&a.bn).map_err(Error::from)?;
    let parsed: BnFile =
        serde_json::from_str(&text).map_err(|e| Error::format(0, format!("BN parameter file: {e}")))?;
    let per_layer = match parsed {
        BnFile::PerLayer(v) => v,
        BnFile::Single(bn) => vec![Some(bn)],
    };
    if per_layer.len() != model.layers.len() {
        return Err(Error::config(format!(
            "BN file has {} entries for {} layers",
            per_layer.len(),
            model.layers.len()
        ))
        .into());
    }
    for (l, bn) in model.layers.iter_mut().zip(per_layer) {
        if let Some(bn) = bn {
            l.layer = l.layer.fold_bn(&bn)?;
        }
    }
    write_model_file(&a.out, &model)?;
    Ok(())
}
