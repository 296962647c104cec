//! Equivalence and invariant checks behind `blockpipe verify`.

use serde::Serialize;

use crate::analytics::{bubble_fraction, BubbleParams};
use crate::error::Result;
use crate::noise::{audit_windows, InitStrategy, NoisePool};
use crate::pipeline::{
    check_precedence, default_fault, explicit_recompute_oracle, first_mismatch, first_trace_mismatch, measure_bubbles,
    run_pipeline_with, serial_oracle, EngineMode, PipelineConfig, RunOptions,
};
use crate::queue::ProcessingOrder;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Perturb one cached key by one ulp in the cache-equivalence run.
    pub inject_fault: bool,
    pub noise_appends: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { inject_fault: false, noise_appends: 1000 }
    }
}

fn mismatch_detail(m: Option<crate::pipeline::Mismatch>) -> String {
    match m {
        None => "bitwise equal".into(),
        Some(m) => match m.index {
            Some(i) => format!("block {} differs first at element {i}", m.block_id),
            None => format!("block {} differs in shape or presence", m.block_id),
        },
    }
}

/// Runs the suite around `base`. Errors only on invalid configuration.
pub fn run_checks(base: &PipelineConfig, opts: &VerifyOptions) -> Result<Vec<Check>> {
    base.validate()?;
    let mut checks = Vec::new();

    for n in [1, 2, 4].into_iter().filter(|n| base.model.layers.is_multiple_of(*n)) {
        for cache in [true, false] {
            let cfg = PipelineConfig { devices: n, cache_enabled: cache, ..base.clone() };
            let out = run_pipeline_with(&cfg, &RunOptions::default())?;
            let m = first_mismatch(&out.blocks, &serial_oracle(&cfg)?);
            checks.push(Check::new(
                format!("pipeline == serial oracle (N={n}, cache={cache})"),
                m.is_none(),
                mismatch_detail(m),
            ));
        }
    }

    let threaded = run_pipeline_with(base, &RunOptions::default())?;
    let single = run_pipeline_with(base, &RunOptions { mode: EngineMode::SingleThreaded, ..Default::default() })?;
    let m = first_mismatch(&threaded.blocks, &single.blocks);
    let same_log = threaded.events == single.events && threaded.ledger == single.ledger;
    checks.push(Check::new(
        "threaded == single-threaded",
        m.is_none() && same_log,
        if same_log { mismatch_detail(m) } else { "event log or ledger differs".into() },
    ));

    let cached = PipelineConfig { cache_enabled: true, order: ProcessingOrder::Reverse, ..base.clone() };
    let fault = opts.inject_fault.then(|| default_fault(&cached.plan())).flatten();
    let run = run_pipeline_with(&cached, &RunOptions { trace_cache: true, fault, ..Default::default() })?;
    let reference = explicit_recompute_oracle(&cached)?;
    let trace = first_trace_mismatch(&run.cache_trace, &reference.cache_trace);
    let m = first_mismatch(&run.blocks, &reference.blocks);
    let detail = match trace {
        Some((seq, layer)) => format!("consumed cache differs at pass {seq}, layer {layer}"),
        None => format!("{} cache reads equal; latents {}", run.cache_trace.len(), mismatch_detail(m.clone())),
    };
    let name = if opts.inject_fault { "cache == recompute (fault injected)" } else { "cache == recompute" };
    checks.push(Check::new(name, trace.is_none() && m.is_none(), detail));

    let rev = PipelineConfig { cache_enabled: false, order: ProcessingOrder::Reverse, ..base.clone() };
    let seq = PipelineConfig { order: ProcessingOrder::Sequential, ..rev.clone() };
    let m = first_mismatch(&serial_oracle(&rev)?, &serial_oracle(&seq)?);
    checks.push(Check::new("reverse == sequential (cache off)", m.is_none(), mismatch_detail(m)));

    let pool = || NoisePool::new(base.num_b, base.num_c, base.frame_shape(), base.seeds.noise);
    let coord = audit_windows(InitStrategy::Coordinated, pool()?, base.seeds.noise, opts.noise_appends)?;
    checks.push(Check::new(
        format!("coordinated noise window ({} appends)", coord.appends),
        coord.appends_with_overlap == 0 && coord.coverage_gaps == 0,
        format!("{} overlapping ids, {} coverage gaps", coord.overlapping_ids, coord.coverage_gaps),
    ));
    if base.num_c > 0 {
        let rep = audit_windows(InitStrategy::Repeat, pool()?, base.seeds.noise, opts.noise_appends)?;
        checks.push(Check::new(
            "repeat strategy overlaps every append",
            rep.appends_with_overlap == rep.appends,
            format!("{} of {} appends overlap", rep.appends_with_overlap, rep.appends),
        ));
    }

    for order in [ProcessingOrder::Reverse, ProcessingOrder::Sequential] {
        let cfg = PipelineConfig { order, ..base.clone() };
        let out = if order == base.order { threaded.clone() } else { run_pipeline_with(&cfg, &RunOptions::default())? };
        let stats = measure_bubbles(&out.events, cfg.devices)?;
        let formula = bubble_fraction(&BubbleParams::new(cfg.devices, cfg.steps(), cfg.block_num, order))?;
        let busy = (cfg.steps() * cfg.block_num) as u64;
        let busy_ok = stats.busy_per_device.iter().all(|&b| b == busy);
        let close = (stats.bubble_size - formula.bubble as f64).abs() <= cfg.devices as f64;
        // Sequential order stalls each round while the queue holds only N blocks.
        let saturated = match order {
            ProcessingOrder::Reverse => cfg.devices <= cfg.block_num,
            ProcessingOrder::Sequential => cfg.devices < cfg.block_num.min(cfg.steps()),
        };
        let steady_ok = !saturated || stats.steady_idle == 0;
        // The closed forms assume the queue fills to N blocks.
        let comparable = cfg.steps() >= cfg.devices && (saturated || order == ProcessingOrder::Reverse);
        let close = close || !comparable;
        let precedence = check_precedence(&out.events, cfg.devices).is_ok();
        checks.push(Check::new(
            format!("bubble cross-check ({order})"),
            busy_ok && close && steady_ok && precedence,
            format!(
                "busy/device {:?} (expect {busy}), bubble {} vs formula {}, steady idle {}",
                stats.busy_per_device, stats.bubble_size, formula.bubble, stats.steady_idle
            ),
        ));
    }
    Ok(checks)
}

pub fn render_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| format!("{}  {:<width$}  {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}
