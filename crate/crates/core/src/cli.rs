//! `blockpipe` command line: `run`, `verify`, `analyze` and `noise-demo`.
//!
//! Exit codes: 0 success, 1 verification failure (or a failed run), 2
//! configuration error, 3 I/O error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analytics::{
    bubble_fraction, bubble_sweep, method_cost, scaling_sweep, BubbleParams, CostParams, Method, SweepAxis,
};
use crate::config::{ReportFormat, RunConfig};
use crate::error::{Error, Result};
use crate::noise::{audit_windows, FrameShape, InitStrategy, NoisePool};
use crate::pipeline::{measure_bubbles, run_pipeline_with, EngineMode, RunOptions};
use crate::queue::ProcessingOrder;
use crate::report::{self, BlockSummary, FormulaComparison, LedgerReport, RunSummary};
use crate::verify::{render_table, run_checks, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "blockpipe", version, about = "Block-wise video diffusion pipeline simulator")]
pub struct Cli {
    /// Flat JSON config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the pipeline and write artifacts.
    Run(Overrides),
    /// Run equivalence and invariant checks.
    Verify(VerifyArgs),
    /// Evaluate closed-form bubble and cost models.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Compare noise initialization strategies.
    NoiseDemo(NoiseArgs),
}

/// Per-key overrides of the run config.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, visible_alias = "N")]
    pub devices: Option<usize>,
    #[arg(long)]
    pub order: Option<ProcessingOrder>,
    #[arg(long)]
    pub cache_enabled: Option<bool>,
    #[arg(long)]
    pub num_b: Option<usize>,
    #[arg(long)]
    pub num_c: Option<usize>,
    #[arg(long, visible_alias = "blocks")]
    pub block_num: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long, visible_alias = "T")]
    pub steps: Option<usize>,
    /// Sets model, noise and context seeds to `s`, `s+1`, `s+2`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub context_seed: Option<u64>,
    #[arg(long)]
    pub strategy: Option<InitStrategy>,
    #[arg(long)]
    pub retain_head_context: Option<bool>,
    #[arg(long)]
    pub emit_first_block_surplus: Option<bool>,
    #[arg(long, value_parser = parse_engine)]
    pub engine: Option<EngineMode>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
}

fn parse_engine(s: &str) -> std::result::Result<EngineMode, String> {
    match s {
        "threaded" => Ok(EngineMode::Threaded),
        "single-threaded" => Ok(EngineMode::SingleThreaded),
        other => Err(format!("unknown engine `{other}` (threaded | single-threaded)")),
    }
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Flip one bit of one cached key; the cache check must then fail.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long, default_value_t = 1000)]
    pub noise_appends: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BubbleArgs {
    #[arg(long, visible_alias = "N", default_value_t = 4)]
    pub devices: usize,
    #[arg(long, visible_alias = "T", default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value = "reverse")]
    pub order: ProcessingOrder,
}

#[derive(Debug, Clone, Args)]
pub struct CostArgs {
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub token_h: usize,
    #[arg(long, default_value_t = 4)]
    pub token_w: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub latent_h: usize,
    #[arg(long, default_value_t = 4)]
    pub latent_w: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub cost_devices: usize,
    #[arg(long, default_value_t = 8)]
    pub num_b: usize,
    #[arg(long, default_value_t = 8)]
    pub num_c: usize,
    #[arg(long, default_value_t = 1.0)]
    pub model_mem: f64,
    #[arg(long, default_value_t = 1.0)]
    pub kv_mem: f64,
    /// Ring attention with the `(N-1)/N` factor.
    #[arg(long)]
    pub ring_exact: bool,
}

impl CostArgs {
    pub fn params(&self) -> CostParams {
        CostParams {
            frames: self.frames,
            token_h: self.token_h,
            token_w: self.token_w,
            hidden: self.hidden,
            channels: self.channels,
            latent_h: self.latent_h,
            latent_w: self.latent_w,
            layers: self.layers,
            devices: self.cost_devices,
            num_b: self.num_b,
            num_c: self.num_c,
            model_mem: self.model_mem,
            kv_mem: self.kv_mem,
            ring_exact: self.ring_exact,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Analyze {
    /// Bubble ratio for one configuration.
    Bubble {
        #[command(flatten)]
        bubble: BubbleArgs,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Communication and memory cost per method.
    Costs {
        /// Method name or `all`; repeatable.
        #[arg(long, default_value = "all")]
        method: Vec<String>,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
    /// Bubble ratio over Block_num, or costs over N or F.
    Sweep {
        #[command(flatten)]
        bubble: BubbleArgs,
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        devices_list: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        frames_list: Vec<usize>,
        #[arg(long, default_value = "all")]
        method: Vec<String>,
        #[command(flatten)]
        cost: CostArgs,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
    },
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    /// One strategy; all when omitted.
    #[arg(long)]
    pub strategy: Option<InitStrategy>,
    #[arg(long, default_value_t = 8)]
    pub num_b: usize,
    #[arg(long, default_value_t = 8)]
    pub num_c: usize,
    #[arg(long, default_value_t = 1000)]
    pub appends: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "text")]
    pub format: ReportFormat,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Partition { .. } | Error::Json(_) => EXIT_CONFIG,
        Error::Io(_) => EXIT_IO,
        _ => EXIT_VERIFY,
    }
}

/// Effective config: defaults (seeded from the environment), then the file,
/// then flags.
pub fn resolve_config(file: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut c = RunConfig::with_base_seed(RunConfig::env_seed()?.unwrap_or(1));
    if let Some(path) = file {
        c = RunConfig::load(path, &c)?;
    }
    macro_rules! set {
        ($($field:ident),*) => {$( if let Some(v) = o.$field.clone() { c.$field = v; } )*};
    }
    if let Some(s) = o.seed {
        c.model_seed = s;
        c.noise_seed = s.wrapping_add(1);
        c.context_seed = s.wrapping_add(2);
    }
    set!(
        devices,
        order,
        cache_enabled,
        num_b,
        num_c,
        block_num,
        layers,
        hidden,
        channels,
        height,
        width,
        heads,
        context_len,
        steps,
        model_seed,
        noise_seed,
        context_seed,
        strategy,
        retain_head_context,
        emit_first_block_surplus,
        engine,
        out_dir,
        format
    );
    c.validate()?;
    Ok(c)
}

/// Runs the pipeline and writes `latents.bin`, `schedule.csv`, `ledger.json`
/// and `summary.json` into `cfg.out_dir`.
pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let pcfg = cfg.pipeline_config();
    let run = run_pipeline_with(&pcfg, &RunOptions { mode: cfg.engine, ..Default::default() })?;
    let stats = measure_bubbles(&run.events, pcfg.devices)?;
    let formula = bubble_fraction(&BubbleParams::new(pcfg.devices, pcfg.steps(), pcfg.block_num, pcfg.order))?;
    let config_json = cfg.to_json();
    let dir = &cfg.out_dir;

    report::write_latents(
        report::create(&dir.join("latents.bin"))?,
        &run.blocks,
        [cfg.height, cfg.width, cfg.channels],
        &config_json,
    )?;
    report::write_schedule(report::create(&dir.join("schedule.csv"))?, &run.events, &config_json)?;
    report::write_json(report::create(&dir.join("ledger.json"))?, &LedgerReport { config: cfg, ledger: &run.ledger })?;
    let summary = RunSummary {
        config: cfg,
        bubbles: &stats,
        comparison: FormulaComparison {
            formula,
            formula_ratio: formula.ratio(),
            measured_bubble: stats.bubble_size,
            measured_ratio: stats.ratio,
            busy_per_device_expected: (pcfg.steps() * pcfg.block_num) as u64,
        },
        blocks: run.blocks.iter().map(BlockSummary::of).collect(),
        rounds: &run.plan.rounds,
    };
    report::write_json(report::create(&dir.join("summary.json"))?, &summary)?;
    match cfg.format {
        ReportFormat::Text => write!(out, "{}", summary.text())?,
        ReportFormat::Csv => write!(out, "{}", summary.csv())?,
        ReportFormat::Json => report::write_json(&mut *out, &summary)?,
    }
    Ok(())
}

/// Returns whether every check passed.
pub fn cmd_verify(cfg: &RunConfig, opts: &VerifyOptions, out: &mut dyn Write) -> Result<bool> {
    let checks = run_checks(&cfg.pipeline_config(), opts)?;
    match cfg.format {
        ReportFormat::Json => report::write_json(&mut *out, &checks)?,
        ReportFormat::Csv => {
            writeln!(out, "check,passed,detail")?;
            for c in &checks {
                writeln!(out, "\"{}\",{},\"{}\"", c.name, c.passed, c.detail)?;
            }
        }
        ReportFormat::Text => write!(out, "{}", render_table(&checks))?,
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn methods(names: &[String]) -> Result<Vec<Method>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Method::ALL.to_vec());
    }
    names.iter().map(|n| n.parse()).collect()
}

#[derive(Serialize)]
struct BubbleLine {
    devices: usize,
    steps: usize,
    blocks: usize,
    order: ProcessingOrder,
    numerator: i128,
    denominator: i128,
    ratio: f64,
}

fn bubble_line(b: &BubbleArgs, blocks: usize) -> Result<BubbleLine> {
    let f = bubble_fraction(&BubbleParams::new(b.devices, b.steps, blocks, b.order))?;
    Ok(BubbleLine {
        devices: b.devices,
        steps: b.steps,
        blocks,
        order: b.order,
        numerator: f.bubble,
        denominator: f.denominator(),
        ratio: f.ratio(),
    })
}

pub fn cmd_analyze(what: &Analyze, out: &mut dyn Write) -> Result<()> {
    match what {
        Analyze::Bubble { bubble, blocks, format } => {
            let line = bubble_line(bubble, *blocks)?;
            match format {
                ReportFormat::Json => report::write_json(&mut *out, &line)?,
                ReportFormat::Csv => writeln!(
                    out,
                    "devices,steps,blocks,order,numerator,denominator,ratio\n{},{},{},{},{},{},{}",
                    line.devices, line.steps, line.blocks, line.order, line.numerator, line.denominator, line.ratio
                )?,
                ReportFormat::Text => writeln!(
                    out,
                    "bubble_ratio(N={}, T={}, Block_num={}, {}) = {}/{} = {:.5}",
                    line.devices, line.steps, line.blocks, line.order, line.numerator, line.denominator, line.ratio
                )?,
            }
        }
        Analyze::Costs { method, cost, format } => {
            let cp = cost.params();
            let rows = methods(method)?.into_iter().map(|m| method_cost(m, &cp)).collect::<Result<Vec<_>>>()?;
            match format {
                ReportFormat::Json => report::write_json(&mut *out, &rows)?,
                ReportFormat::Csv => {
                    writeln!(out, "method,comm_scalars,comm_overlap,model_mem,kv_mem")?;
                    for r in &rows {
                        writeln!(
                            out,
                            "{},{},{},{},{}",
                            r.method, r.comm_scalars, r.comm_overlap, r.model_mem, r.kv_mem
                        )?;
                    }
                }
                ReportFormat::Text => {
                    writeln!(out, "{:<16}{:>16}{:>9}{:>12}{:>12}", "method", "comm", "overlap", "model", "kv")?;
                    for r in &rows {
                        writeln!(
                            out,
                            "{:<16}{:>16}{:>9}{:>12}{:>12}",
                            r.method.name(),
                            r.comm_scalars,
                            if r.comm_overlap { "yes" } else { "no" },
                            r.model_mem,
                            r.kv_mem
                        )?;
                    }
                }
            }
        }
        Analyze::Sweep { bubble, blocks, devices_list, frames_list, method, cost, format } => {
            if !blocks.is_empty() {
                let pts = bubble_sweep(bubble.devices, bubble.steps, bubble.order, blocks)?;
                let lines = pts.iter().map(|(b, _)| bubble_line(bubble, *b)).collect::<Result<Vec<_>>>()?;
                match format {
                    ReportFormat::Json => report::write_json(&mut *out, &lines)?,
                    _ => {
                        let sep = if *format == ReportFormat::Csv { "," } else { "\t" };
                        writeln!(out, "blocks{sep}numerator{sep}denominator{sep}ratio")?;
                        for l in &lines {
                            writeln!(out, "{}{sep}{}{sep}{}{sep}{:e}", l.blocks, l.numerator, l.denominator, l.ratio)?;
                        }
                    }
                }
                return Ok(());
            }
            let (axis, values) = match (devices_list.is_empty(), frames_list.is_empty()) {
                (false, true) => (SweepAxis::Devices, devices_list),
                (true, false) => (SweepAxis::Frames, frames_list),
                _ => return Err(Error::config("sweep needs exactly one of --blocks, --devices-list, --frames-list")),
            };
            let r = scaling_sweep(&cost.params(), &methods(method)?, axis, values)?;
            match format {
                ReportFormat::Json => report::write_json(&mut *out, &r)?,
                _ => {
                    let sep = if *format == ReportFormat::Csv { "," } else { "\t" };
                    writeln!(out, "value{sep}method{sep}comm_scalars{sep}model_mem{sep}kv_mem")?;
                    for p in &r.points {
                        for c in &p.costs {
                            writeln!(
                                out,
                                "{}{sep}{}{sep}{}{sep}{}{sep}{}",
                                p.value, c.method, c.comm_scalars, c.model_mem, c.kv_mem
                            )?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn cmd_noise_demo(args: &NoiseArgs, out: &mut dyn Write) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => RunConfig::env_seed()?.unwrap_or(1),
    };
    let strategies = match args.strategy {
        Some(s) => vec![s],
        None => InitStrategy::ALL.to_vec(),
    };
    let shape = FrameShape { height: 2, width: 2, channels: 4 };
    let audits = strategies
        .into_iter()
        .map(|s| audit_windows(s, NoisePool::new(args.num_b, args.num_c, shape, seed)?, seed, args.appends))
        .collect::<Result<Vec<_>>>()?;
    match args.format {
        ReportFormat::Json => report::write_json(&mut *out, &audits)?,
        ReportFormat::Csv => {
            writeln!(out, "strategy,appends,appends_with_overlap,overlapping_ids,coverage_gaps")?;
            for a in &audits {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    a.strategy, a.appends, a.appends_with_overlap, a.overlapping_ids, a.coverage_gaps
                )?;
            }
        }
        ReportFormat::Text => {
            writeln!(out, "{:<18}{:>8}{:>10}{:>10}{:>8}", "strategy", "appends", "overlaps", "ids", "gaps")?;
            for a in &audits {
                writeln!(
                    out,
                    "{:<18}{:>8}{:>10}{:>10}{:>8}",
                    a.strategy.name(),
                    a.appends,
                    a.appends_with_overlap,
                    a.overlapping_ids,
                    a.coverage_gaps
                )?;
            }
        }
    }
    Ok(())
}

/// Dispatches a parsed command; returns the exit code.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Run(o) => {
            let cfg = resolve_config(file, o)?;
            cmd_run(&cfg, out)?;
            Ok(EXIT_OK)
        }
        Command::Verify(v) => {
            let cfg = resolve_config(file, &v.overrides)?;
            let opts = VerifyOptions { inject_fault: v.inject_fault, noise_appends: v.noise_appends };
            Ok(if cmd_verify(&cfg, &opts, out)? { EXIT_OK } else { EXIT_VERIFY })
        }
        Command::Analyze { what } => cmd_analyze(what, out).map(|_| EXIT_OK),
        Command::NoiseDemo(args) => cmd_noise_demo(args, out).map(|_| EXIT_OK),
    }
}

/// Parses `args`, runs, prints diagnostics to stderr; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("blockpipe: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("blockpipe").chain(args.iter().copied())).unwrap()
    }

    fn output(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = execute(&parse(args), &mut buf).unwrap();
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn analyze_bubble_prints_exact_fraction() {
        let (code, text) = output(&["analyze", "bubble", "--N", "4", "--T", "50", "--blocks", "4"]);
        assert_eq!(code, 0);
        assert!(text.contains("11/211 = 0.05213"), "{text}");
    }

    #[test]
    fn overrides_apply_over_defaults() {
        let cli = parse(&["run", "--devices", "4", "--order", "sequential", "--seed", "9"]);
        let Command::Run(o) = &cli.command else { panic!() };
        let c = resolve_config(None, o).unwrap();
        assert_eq!(c.devices, 4);
        assert_eq!(c.order, ProcessingOrder::Sequential);
        assert_eq!((c.model_seed, c.noise_seed, c.context_seed), (9, 10, 11));
    }

    #[test]
    fn indivisible_devices_is_config_error() {
        let cli = parse(&["run", "--devices", "3"]);
        let Command::Run(o) = &cli.command else { panic!() };
        let e = resolve_config(None, o).unwrap_err();
        assert_eq!(exit_code(&e), EXIT_CONFIG);
    }

    #[test]
    fn costs_and_sweeps_render() {
        let (_, text) = output(&["analyze", "costs", "--method", "dualparal", "--format", "csv"]);
        assert_eq!(text.lines().nth(1).unwrap(), "dualparal,3072,true,0.25,16");
        let (_, text) = output(&["analyze", "sweep", "--N", "8", "--blocks", "4,100,1000000", "--format", "csv"]);
        assert_eq!(text.lines().count(), 4);
        let (_, text) = output(&["analyze", "sweep", "--devices-list", "1,2", "--method", "ulysses"]);
        assert_eq!(text.lines().count(), 3);
        let bad = execute(&parse(&["analyze", "sweep"]), &mut Vec::new()).unwrap_err();
        assert_eq!(exit_code(&bad), EXIT_CONFIG);
    }

    #[test]
    fn noise_demo_reports_each_strategy() {
        let (_, text) = output(&["noise-demo", "--appends", "20", "--format", "csv"]);
        assert_eq!(text.lines().count(), 1 + InitStrategy::ALL.len());
        assert!(text.contains("coordinated,20,0,0,0"));
    }
}
