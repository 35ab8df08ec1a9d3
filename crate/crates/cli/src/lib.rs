//! `hvsim` command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure or simulation error,
//! 2 usage error (bad flags, unreadable or invalid inputs).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hvsim_core::functional::{
    calibrate_scales, forward_quantized_with_stats, quantize, write_dump, CalibratedParams, DumpData, FloatTensor,
    QuantizedModel, WeightGen,
};
use hvsim_core::ir::{load_network_with_input, NetworkGraph, TensorShape};
use hvsim_core::report::ReportFile;
use hvsim_core::sched::{plan_schedule_with, simulate_schedule, HardwareConfig, PlanOptions};
use hvsim_core::verify::verify_with;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Environment variable holding the log filter (e.g. `info`, `hvsim_core=debug`).
pub const LOG_ENV: &str = "HVSIM_LOG";

#[derive(Debug, Parser)]
#[command(name = "hvsim", version, about = "Cycle-level simulator of a hybrid CNN/attention FPGA accelerator")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Calibrate, schedule and simulate a network; write the run report.
    Simulate(SimulateArgs),
    /// Randomized engine vs. reference vs. float-oracle sweep.
    Verify(VerifyArgs),
    /// Reformat a saved report.
    Report(ReportArgs),
    /// Calibrate quantization scales and write them as JSON.
    Calibrate(CalibrateArgs),
}

#[derive(Debug, Args)]
struct NetworkArgs {
    /// Network config (`.json` may be omitted).
    #[arg(long)]
    network: PathBuf,
    /// Override the config's input resolution, as HxW.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<(usize, usize)>,
    /// Seed of the synthetic weights and calibration inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    net: NetworkArgs,
    /// Hardware config (`.json` may be omitted); defaults are used without it.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Report destination; `.csv` writes the stage table as CSV.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Calibrated scales from `calibrate` instead of calibrating here.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Layer-by-layer baseline: no DW→PW or MSA fusion, no on-chip residency.
    #[arg(long)]
    no_fusion: bool,
    /// Calibration samples when `--params` is absent.
    #[arg(long, default_value_t = 2)]
    samples: usize,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random conv layers; a tenth as many MSA blocks are added.
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Write every case's input, reference and engine outputs as tensor dumps here.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report written by `simulate`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
    /// Destination file; standard output without it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    net: NetworkArgs,
    #[arg(long, default_value_t = 2)]
    samples: usize,
    #[arg(long, default_value = "params.json")]
    out: PathBuf,
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 224x224")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Errors caused by what the user supplied rather than by a run.
#[derive(Debug)]
struct UsageError(anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(r: anyhow::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| UsageError(e).into())
}

struct Ctx<'a> {
    workdir: PathBuf,
    out: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    /// Reads `p`, falling back to `p.json`.
    fn read_config(&self, p: &Path) -> anyhow::Result<(PathBuf, String)> {
        let direct = self.path(p);
        let with_ext = direct.with_extension("json");
        for cand in [direct, with_ext] {
            if cand.is_file() {
                let text = fs::read_to_string(&cand).with_context(|| format!("reading {}", cand.display()))?;
                return Ok((cand, text));
            }
        }
        bail!("config {} not found (also tried .json)", self.path(p).display())
    }

    fn hardware(&self, p: Option<&Path>) -> anyhow::Result<HardwareConfig> {
        usage((|| {
            let Some(p) = p else {
                return Ok(HardwareConfig::default());
            };
            let (path, text) = self.read_config(p)?;
            let hw = HardwareConfig::from_json(&text).with_context(|| format!("hardware config {}", path.display()))?;
            hw.validate().with_context(|| format!("hardware config {}", path.display()))?;
            Ok(hw)
        })())
    }

    fn network(&self, a: &NetworkArgs) -> anyhow::Result<(String, NetworkGraph)> {
        usage((|| {
            let (path, text) = self.read_config(&a.network)?;
            let input = a.resolution.map(|(h, w)| TensorShape::chw(3, h, w));
            let g = load_network_with_input(&text, input).with_context(|| format!("network config {}", path.display()))?;
            let name = path.file_stem().map_or("network".into(), |s| s.to_string_lossy().into_owned());
            Ok((name, g))
        })())
    }

    fn write(&self, p: &Path, text: &str) -> anyhow::Result<PathBuf> {
        let dst = self.path(p);
        if let Some(dir) = dst.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&dst, text).with_context(|| format!("writing {}", dst.display()))?;
        Ok(dst)
    }
}

/// Synthetic weights (there is no trained checkpoint) calibrated on random
/// inputs drawn from the same seed.
fn calibrated(g: &NetworkGraph, seed: u64, samples: usize) -> anyhow::Result<(QuantizedModel, FloatTensor)> {
    if samples == 0 {
        return usage(Err(anyhow::anyhow!("--samples must be at least 1")));
    }
    let mut gen = WeightGen::new(seed);
    let weights = gen.network(g);
    let xs: Vec<_> = (0..samples).map(|_| gen.input(g.input_shape(), 1.0)).collect();
    log::info!("calibrating {} layers on {samples} sample(s)", g.len());
    let params = calibrate_scales(g, &weights, &xs)?;
    let first = xs.into_iter().next().expect("one sample");
    Ok((QuantizedModel::new(g.clone(), &weights, params)?, first))
}

fn simulate(ctx: &mut Ctx, a: &SimulateArgs) -> anyhow::Result<i32> {
    let (name, g) = ctx.network(&a.net)?;
    let hw = ctx.hardware(a.hw.as_deref())?;
    let (model, x) = if let Some(p) = &a.params {
        let (path, text) = usage(ctx.read_config(p))?;
        let params = usage(CalibratedParams::from_json(&text).with_context(|| format!("params {}", path.display())))?;
        let mut gen = WeightGen::new(a.net.seed);
        let weights = gen.network(&g);
        let x = gen.input(g.input_shape(), 1.0);
        (usage(QuantizedModel::new(g.clone(), &weights, params).context("params do not fit the network"))?, x)
    } else {
        calibrated(&g, a.net.seed, a.samples)?
    };
    let xq = quantize(&x, model.params.input);
    let opts = if a.no_fusion { PlanOptions::UNFUSED } else { PlanOptions::FUSED };
    let schedule = plan_schedule_with(&g, &hw, opts)?;
    log::info!("{} fusion groups planned", schedule.groups.len());
    let (_, run) = simulate_schedule(&schedule, &model, &xq)?;
    let report = ReportFile::build(&name, &run, &g, &hw)?;
    let is_csv = a.out.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let dst = ctx.write(&a.out, &if is_csv { report.to_csv() } else { report.to_json() })?;
    write!(ctx.out, "{}", report.render_table())?;
    writeln!(ctx.out, "report written to {}", dst.display())?;
    Ok(EXIT_OK)
}

fn verify(ctx: &mut Ctx, a: &VerifyArgs) -> anyhow::Result<i32> {
    let hw = ctx.hardware(a.hw.as_deref())?;
    let dump = a.dump.as_ref().map(|d| ctx.path(d));
    if let Some(d) = &dump {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let s = verify_with(a.seed, a.cases, &hw, |i, case, outcome| {
        let Some(d) = &dump else { return Ok(()) };
        write_dump(&d.join(format!("case{i}.input")), &DumpData::Int8(case.x.clone()))?;
        write_dump(&d.join(format!("case{i}.reference")), &DumpData::Int8(outcome.reference.clone()))?;
        for (engine, r) in &outcome.engines {
            let stem = format!("case{i}.{}", engine.to_lowercase().replace('-', "_"));
            write_dump(&d.join(stem), &DumpData::Int8(r.outputs.clone()))?;
        }
        Ok(())
    })?;
    writeln!(
        ctx.out,
        "{} conv cases, {} MSA cases; engine mismatches {}, activity mismatches {}",
        s.layer_cases, s.msa_cases, s.engine_mismatches, s.activity_mismatches
    )?;
    if s.passed() {
        writeln!(ctx.out, "max error ≤ 1 LSB")?;
        Ok(EXIT_OK)
    } else {
        writeln!(ctx.out, "FAILED: max error {} LSB vs float oracle, {} LSB engine vs reference", s.max_float_lsb, s.max_engine_lsb)?;
        Ok(EXIT_FAILURE)
    }
}

fn report(ctx: &mut Ctx, a: &ReportArgs) -> anyhow::Result<i32> {
    let src = ctx.path(&a.input);
    let r = usage(
        fs::read_to_string(&src)
            .map_err(anyhow::Error::from)
            .and_then(|t| Ok(ReportFile::from_json(&t)?))
            .with_context(|| format!("report {}", src.display())),
    )?;
    let text = match a.format {
        Format::Table => r.render_table(),
        Format::Json => r.to_json() + "\n",
        Format::Csv => r.to_csv(),
    };
    match &a.out {
        Some(p) => {
            let dst = ctx.write(p, &text)?;
            writeln!(ctx.out, "written to {}", dst.display())?;
        }
        None => write!(ctx.out, "{text}")?,
    }
    Ok(EXIT_OK)
}

fn calibrate(ctx: &mut Ctx, a: &CalibrateArgs) -> anyhow::Result<i32> {
    let (_, g) = ctx.network(&a.net)?;
    let (model, _) = calibrated(&g, a.net.seed, a.samples)?;
    let x = quantize(&WeightGen::new(a.net.seed ^ 1).input(g.input_shape(), 1.0), model.params.input);
    let (_, stats) = forward_quantized_with_stats(&model, &x)?;
    let dst = ctx.write(&a.out, &model.params.to_json())?;
    writeln!(
        ctx.out,
        "{} layers calibrated; worst saturation on a fresh input {:.4}%; written to {}",
        g.len(),
        100.0 * stats.worst_fraction(),
        dst.display()
    )?;
    Ok(EXIT_OK)
}

/// Run with `argv` (program name first), writing normal output to `out`.
pub fn run_cli_with<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let mut ctx = Ctx {
        workdir: cli.workdir,
        out,
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(&mut ctx, a),
        Command::Verify(a) => verify(&mut ctx, a),
        Command::Report(a) => report(&mut ctx, a),
        Command::Calibrate(a) => calibrate(&mut ctx, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_cli_with(argv, &mut std::io::stdout().lock())
}

/// Logging from `HVSIM_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::default().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
