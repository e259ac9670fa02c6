//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 when `verify` finds a violation, 2 for usage,
//! format, or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{CcqError, Result};
use crate::family::{Family, DEFAULT_GROUP_SIZE};
use crate::kernels::{bench_gemv, dequantize_tensor, report_to_csv, BenchOptions, BenchRow, BENCH_M, BENCH_SHAPES};
use crate::metrics::{closed_form_bpw, compression_summary, error_report, CompressionSummary};
use crate::packing::{
    decode_container, encode_container, measured_bpw, pack_tensor, read_packed, unpack_tensor, write_packed,
    Checksums, ContainerHeader,
};
use crate::quantizer::{quantize_tensor, rtn_quantize, QuantizerOptions, DEFAULT_ROUNDS};
use crate::tensor::{read_raw, write_raw, Matrix};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ccq", version, about = "Convolutional code weight quantization codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Distribution {
    Gaussian,
    Uniform,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic f32 tensor and its JSON sidecar.
    Gen {
        /// Shape as ROWSxCOLS.
        #[arg(long, value_parser = parse_shape)]
        shape: (usize, usize),
        #[arg(long, value_enum, default_value = "gaussian")]
        dist: Distribution,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a raw tensor into a .ccq container and print an error report.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Code family: 2.75, 2.5 or 2.06.
        #[arg(long, default_value = "2.75", value_parser = parse_family)]
        bpw: Family,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long, default_value_t = DEFAULT_ROUNDS)]
        rounds: usize,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a container back to a raw f32 tensor.
    Dequantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the container header and measured bits per weight.
    Inspect { container: PathBuf },
    /// Check container integrity, optionally against the original tensor.
    Verify {
        container: PathBuf,
        #[arg(long)]
        original: Option<PathBuf>,
    },
    /// Time dense, dequantize-then-dense, and fused GEMV; print CSV.
    Bench {
        /// Comma-separated ROWSxCOLS list.
        #[arg(long, value_delimiter = ',', value_parser = parse_shape)]
        shapes: Option<Vec<(usize, usize)>>,
        #[arg(long = "m", value_delimiter = ',')]
        m_sizes: Option<Vec<usize>>,
        #[arg(long, default_value = "2.06", value_parser = parse_family)]
        bpw: Family,
        #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
        group_size: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn parse_shape(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("shape {s:?} is not ROWSxCOLS"))?;
    let r = r.trim().parse().map_err(|e| format!("rows: {e}"))?;
    let c = c.trim().parse().map_err(|e| format!("cols: {e}"))?;
    Ok((r, c))
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: CcqError| e.to_string())
}

pub fn cmd_gen(shape: (usize, usize), dist: Distribution, seed: u64, out: &Path) -> Result<Matrix> {
    let (rows, cols) = shape;
    if rows == 0 || cols == 0 {
        return Err(CcqError::Shape(format!("refusing to generate an empty {rows}x{cols} tensor")));
    }
    let m = match dist {
        Distribution::Gaussian => Matrix::gaussian(rows, cols, seed),
        Distribution::Uniform => Matrix::uniform(rows, cols, seed),
    };
    write_raw(out, &m)?;
    Ok(m)
}

#[derive(Debug, Serialize)]
pub struct QuantizeReport {
    pub family: Family,
    pub configs: Vec<String>,
    pub group_size: usize,
    pub rounds: usize,
    pub mse: f64,
    pub max_abs: f64,
    pub rel_frobenius: f64,
    /// Same matrix through 2-bit min-max RTN at the same group size, when defined.
    pub rtn2_rel_frobenius: Option<f64>,
    pub compression: CompressionSummary,
}

pub fn cmd_quantize(input: &Path, output: &Path, options: &QuantizerOptions) -> Result<QuantizeReport> {
    let m = read_raw(input)?;
    let t = quantize_tensor(&m, options)?;
    let packed = pack_tensor(&t)?.with_rounds(options.refinement_rounds);
    write_packed(&packed, output)?;
    let recon = dequantize_tensor(&packed)?;
    let err = error_report(&m, &recon, options.group_size)?;
    let rtn = rtn_quantize(&m, 2, options.group_size)
        .and_then(|r| error_report(&m, &r, options.group_size))
        .ok()
        .map(|r| r.rel_frobenius);
    Ok(QuantizeReport {
        family: options.family,
        configs: options.family.configs().iter().map(|c| c.to_string()).collect(),
        group_size: options.group_size,
        rounds: options.refinement_rounds,
        mse: err.mse,
        max_abs: err.max_abs,
        rel_frobenius: err.rel_frobenius,
        rtn2_rel_frobenius: rtn,
        compression: compression_summary(&packed, (m.len() * 4) as u64)?,
    })
}

pub fn cmd_dequantize(input: &Path, output: &Path) -> Result<Matrix> {
    let m = dequantize_tensor(&read_packed(input)?)?;
    write_raw(output, &m)?;
    Ok(m)
}

#[derive(Debug, Serialize)]
pub struct InspectReport {
    pub header: ContainerHeader,
    pub configs: Vec<String>,
    pub measured_bpw: f64,
    pub overhead_bpw: f64,
    pub file_bytes: u64,
}

pub fn cmd_inspect(path: &Path) -> Result<InspectReport> {
    let bytes = fs::read(path)?;
    let p = decode_container(&bytes, Checksums::Verify)?;
    let bpw = measured_bpw(&p);
    Ok(InspectReport {
        configs: p.header.configs.iter().map(|c| c.to_string()).collect(),
        header: p.header,
        measured_bpw: bpw.value(),
        overhead_bpw: bpw.overhead(),
        file_bytes: bytes.len() as u64,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }

    fn push(&mut self, name: &'static str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name,
            passed,
            detail: detail.into(),
        });
    }
}

/// Runs the container checks. Errors are returned only when the file cannot be
/// parsed at all; everything else becomes a failed check.
pub fn cmd_verify(path: &Path, original: Option<&Path>) -> Result<VerifyReport> {
    let bytes = fs::read(path)?;
    let packed = decode_container(&bytes, Checksums::Skip)?;
    let mut report = VerifyReport::default();

    let bad = packed.checksum_mismatches();
    report.push("checksum", bad.is_empty(), if bad.is_empty() {
        "all section digests match".to_string()
    } else {
        format!("sections failing their digest: {}", bad.join(", "))
    });

    let tensor = match unpack_tensor(&packed) {
        Ok(t) => {
            report.push("decode", true, "codes, scales and cluster parameters are in range");
            t
        }
        Err(e) => {
            report.push("decode", false, e.to_string());
            return Ok(report);
        }
    };

    let repacked = pack_tensor(&tensor).and_then(|p| {
        let p = match packed.header.refinement_rounds {
            Some(r) => p.with_rounds(r),
            None => p,
        };
        encode_container(&p)
    });
    match repacked {
        Ok(b) if b == bytes => report.push("round_trip", true, "unpack then pack reproduces the file"),
        Ok(_) => report.push("round_trip", false, "repacked bytes differ from the file"),
        Err(e) => report.push("round_trip", false, e.to_string()),
    }

    let measured = measured_bpw(&packed).value();
    match closed_form_bpw(packed.header.family, packed.header.group_size) {
        Ok(expected) if packed.header.weight_count() == 0 || measured == expected => {
            report.push("bpw", true, format!("{measured} bits per weight"))
        }
        Ok(expected) => report.push("bpw", false, format!("measured {measured}, closed form {expected}")),
        Err(e) => report.push("bpw", false, e.to_string()),
    }

    let kernel = match dequantize_tensor(&packed) {
        Ok(k) => k,
        Err(e) => {
            report.push("kernel_agreement", false, e.to_string());
            return Ok(report);
        }
    };
    let quantizer_side = tensor.reconstruct();
    let same = kernel
        .data()
        .iter()
        .zip(quantizer_side.data())
        .all(|(a, b)| a.to_bits() == b.to_bits());
    report.push("kernel_agreement", same, if same {
        "kernel decode equals quantizer reconstruction bit for bit"
    } else {
        "kernel decode differs from quantizer reconstruction"
    });

    if let Some(orig_path) = original {
        let m = read_raw(orig_path)?;
        if m.shape() != (tensor.rows, tensor.cols) {
            report.push("original_shape", false, format!(
                "original is {:?}, container is {}x{}",
                m.shape(),
                tensor.rows,
                tensor.cols
            ));
            return Ok(report);
        }
        let options = QuantizerOptions::new(tensor.family)
            .with_group_size(tensor.group_size)
            .with_rounds(packed.header.refinement_rounds.unwrap_or(DEFAULT_ROUNDS));
        match quantize_tensor(&m, &options) {
            Ok(t) if t == tensor => report.push("requantize", true, "quantizing the original reproduces the container"),
            Ok(_) => report.push("requantize", false, "quantizing the original gives different codes or scales"),
            Err(e) => report.push("requantize", false, e.to_string()),
        }
        let kernel_errors = error_report(&m, &kernel, tensor.group_size)?.per_group_error;
        let quantizer_errors = tensor.group_errors(&m)?;
        let mismatched = kernel_errors
            .iter()
            .zip(&quantizer_errors)
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        report.push("group_error", mismatched == 0, format!(
            "{mismatched} of {} groups disagree on squared error",
            quantizer_errors.len()
        ));
    }
    Ok(report)
}

pub fn cmd_bench(shapes: &[(usize, usize)], m_sizes: &[usize], opts: &BenchOptions) -> Result<(Vec<BenchRow>, String)> {
    let rows = bench_gemv(shapes, m_sizes, opts)?;
    let csv = report_to_csv(&rows)?;
    Ok((rows, csv))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Gen { shape, dist, seed, out } => {
            cmd_gen(shape, dist, seed, &out)?;
            println!("wrote {} ({}x{})", out.display(), shape.0, shape.1);
        }
        Command::Quantize {
            input,
            output,
            bpw,
            group_size,
            rounds,
            report,
        } => {
            let options = QuantizerOptions::new(bpw).with_group_size(group_size).with_rounds(rounds);
            let r = cmd_quantize(&input, &output, &options)?;
            if let Some(path) = report {
                fs::write(path, serde_json::to_vec_pretty(&r)?)?;
            }
            print_json(&r)?;
        }
        Command::Dequantize { input, output } => {
            let m = cmd_dequantize(&input, &output)?;
            println!("wrote {} ({}x{})", output.display(), m.rows(), m.cols());
        }
        Command::Inspect { container } => print_json(&cmd_inspect(&container)?)?,
        Command::Verify { container, original } => {
            let report = cmd_verify(&container, original.as_deref())?;
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if !report.passed() {
                eprintln!("verification failed: {}", report.failed().join(", "));
                return Ok(EXIT_VERIFY_FAILED);
            }
        }
        Command::Bench {
            shapes,
            m_sizes,
            bpw,
            group_size,
            repeats,
            seed,
            out,
        } => {
            let shapes = shapes.unwrap_or_else(|| BENCH_SHAPES.to_vec());
            let m_sizes = m_sizes.unwrap_or_else(|| BENCH_M.to_vec());
            let opts = BenchOptions {
                family: bpw,
                group_size,
                repeats,
                seed,
            };
            let (_, csv) = cmd_bench(&shapes, &m_sizes, &opts)?;
            match out {
                Some(path) => fs::write(path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(EXIT_OK)
}

/// Runs a parsed command and maps the outcome to an exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
