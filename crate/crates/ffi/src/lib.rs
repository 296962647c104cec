//! C ABI over the blockpipe simulator and analytics.
//!
//! Every entry point returns a [`BpStatus`]. On failure the message is kept
//! per thread and read back with [`bp_last_error`]. Simulations are opaque
//! [`BpSimulation`] handles released with [`bp_sim_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use blockpipe::analytics::{bubble_fraction, method_cost, BubbleParams, CostParams, Method};
use blockpipe::config::RunConfig;
use blockpipe::pipeline::{measure_bubbles, run_pipeline_with, RunOptions, RunOutput};
use blockpipe::queue::ProcessingOrder;
use blockpipe::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    NotRun = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: BpStatus, msg: impl Into<String>) -> BpStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> BpStatus {
    let status = match e {
        Error::Config(_) | Error::Partition { .. } | Error::Json(_) => BpStatus::Config,
        Error::Io(_) => BpStatus::Io,
        _ => BpStatus::Runtime,
    };
    fail(status, e.to_string())
}

/// Runs `f`, mapping panics to [`BpStatus::Panic`].
fn guard(f: impl FnOnce() -> BpStatus) -> BpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(BpStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, BpStatus> {
    if p.is_null() {
        return Err(fail(BpStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(BpStatus::InvalidUtf8, "string argument is not UTF-8"))
}

macro_rules! out_ref {
    ($p:expr) => {
        match unsafe { $p.as_mut() } {
            Some(r) => r,
            None => return fail(BpStatus::NullPointer, concat!("null `", stringify!($p), "`")),
        }
    };
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

fn order(sequential: c_int) -> ProcessingOrder {
    if sequential != 0 {
        ProcessingOrder::Sequential
    } else {
        ProcessingOrder::Reverse
    }
}

/// Exact closed-form bubble fraction `numerator / denominator`.
///
/// # Safety
/// `numerator` and `denominator` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bp_bubble_fraction(
    devices: usize,
    steps: usize,
    blocks: usize,
    sequential: c_int,
    numerator: *mut i64,
    denominator: *mut i64,
) -> BpStatus {
    guard(|| {
        let num = out_ref!(numerator);
        let den = out_ref!(denominator);
        match bubble_fraction(&BubbleParams::new(devices, steps, blocks, order(sequential))) {
            Ok(f) => match (i64::try_from(f.bubble), i64::try_from(f.denominator())) {
                (Ok(n), Ok(d)) => {
                    *num = n;
                    *den = d;
                    BpStatus::Ok
                }
                _ => fail(BpStatus::OutOfRange, "fraction does not fit in 64 bits"),
            },
            Err(e) => from_error(e),
        }
    })
}

/// Closed-form bubble ratio.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bp_bubble_ratio(
    devices: usize,
    steps: usize,
    blocks: usize,
    sequential: c_int,
    out: *mut f64,
) -> BpStatus {
    guard(|| {
        let out = out_ref!(out);
        match bubble_fraction(&BubbleParams::new(devices, steps, blocks, order(sequential))) {
            Ok(f) => {
                *out = f.ratio();
                BpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpCostParams {
    pub frames: usize,
    pub token_h: usize,
    pub token_w: usize,
    pub hidden: usize,
    pub channels: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub layers: usize,
    pub devices: usize,
    pub num_b: usize,
    pub num_c: usize,
    pub model_mem: f64,
    pub kv_mem: f64,
    pub ring_exact: c_int,
}

impl From<&BpCostParams> for CostParams {
    fn from(p: &BpCostParams) -> Self {
        CostParams {
            frames: p.frames,
            token_h: p.token_h,
            token_w: p.token_w,
            hidden: p.hidden,
            channels: p.channels,
            latent_h: p.latent_h,
            latent_w: p.latent_w,
            layers: p.layers,
            devices: p.devices,
            num_b: p.num_b,
            num_c: p.num_c,
            model_mem: p.model_mem,
            kv_mem: p.kv_mem,
            ring_exact: p.ring_exact != 0,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BpMethodCost {
    pub comm_scalars: f64,
    pub comm_overlap: c_int,
    pub model_mem: f64,
    pub kv_mem: f64,
}

/// Fills `params` with the library defaults.
///
/// # Safety
/// `params` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bp_cost_params_default(params: *mut BpCostParams) -> BpStatus {
    guard(|| {
        let p = out_ref!(params);
        let d = CostParams::default();
        *p = BpCostParams {
            frames: d.frames,
            token_h: d.token_h,
            token_w: d.token_w,
            hidden: d.hidden,
            channels: d.channels,
            latent_h: d.latent_h,
            latent_w: d.latent_w,
            layers: d.layers,
            devices: d.devices,
            num_b: d.num_b,
            num_c: d.num_c,
            model_mem: d.model_mem,
            kv_mem: d.kv_mem,
            ring_exact: d.ring_exact as c_int,
        };
        BpStatus::Ok
    })
}

/// Cost of one method: `ring-attention`, `ulysses`, `video-infinity`,
/// `fifo` or `dualparal`.
///
/// # Safety
/// `method` must be a NUL-terminated string, `params` readable and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bp_method_cost(
    method: *const c_char,
    params: *const BpCostParams,
    out: *mut BpMethodCost,
) -> BpStatus {
    guard(|| {
        let name = match str_arg(method) {
            Ok(s) => s,
            Err(s) => return s,
        };
        let Some(params) = params.as_ref() else {
            return fail(BpStatus::NullPointer, "null `params`");
        };
        let out = out_ref!(out);
        let m: Method = match name.parse() {
            Ok(m) => m,
            Err(e) => return from_error(e),
        };
        match method_cost(m, &params.into()) {
            Ok(c) => {
                *out = BpMethodCost {
                    comm_scalars: c.comm_scalars,
                    comm_overlap: c.comm_overlap as c_int,
                    model_mem: c.model_mem,
                    kv_mem: c.kv_mem,
                };
                BpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Opaque simulation handle.
pub struct BpSimulation {
    config: RunConfig,
    output: Option<RunOutput>,
}

/// Creates a simulation from a flat JSON config (null for defaults). Unset
/// keys take their defaults; `BLOCKPIPE_SEED` sets the base seed.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_new(config_json: *const c_char, out: *mut *mut BpSimulation) -> BpStatus {
    guard(|| {
        let out = out_ref!(out);
        *out = std::ptr::null_mut();
        let base = match RunConfig::env_seed() {
            Ok(s) => RunConfig::with_base_seed(s.unwrap_or(1)),
            Err(e) => return from_error(e),
        };
        let config = if config_json.is_null() {
            Ok(base)
        } else {
            match str_arg(config_json) {
                Ok(text) => base.merge_json(text),
                Err(s) => return s,
            }
        };
        match config.and_then(|c| c.validate().map(|_| c)) {
            Ok(config) => {
                *out = Box::into_raw(Box::new(BpSimulation { config, output: None }));
                BpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sim` must be null or a handle from [`bp_sim_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_free(sim: *mut BpSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs the pipeline, replacing any earlier result.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_run(sim: *mut BpSimulation) -> BpStatus {
    guard(|| {
        let sim = out_ref!(sim);
        let opts = RunOptions { mode: sim.config.engine, ..Default::default() };
        match run_pipeline_with(&sim.config.pipeline_config(), &opts) {
            Ok(o) => {
                sim.output = Some(o);
                BpStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

fn output(sim: &BpSimulation) -> Result<&RunOutput, BpStatus> {
    sim.output.as_ref().ok_or_else(|| fail(BpStatus::NotRun, "simulation has not been run"))
}

macro_rules! try_status {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Number of emitted blocks.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_block_count(sim: *const BpSimulation, out: *mut usize) -> BpStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(BpStatus::NullPointer, "null `sim`");
        };
        let out = out_ref!(out);
        *out = try_status!(output(sim)).blocks.len();
        BpStatus::Ok
    })
}

/// Id, frame count and value count of emitted block `index`.
///
/// # Safety
/// `sim` must be a live handle; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_block_info(
    sim: *const BpSimulation,
    index: usize,
    block_id: *mut u64,
    frames: *mut usize,
    values: *mut usize,
) -> BpStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(BpStatus::NullPointer, "null `sim`");
        };
        let (id, f, v) = (out_ref!(block_id), out_ref!(frames), out_ref!(values));
        let out = try_status!(output(sim));
        let Some(b) = out.blocks.get(index) else {
            return fail(BpStatus::OutOfRange, format!("block index {index} of {}", out.blocks.len()));
        };
        *id = b.block_id;
        *f = b.frames.shape()[0];
        *v = b.frames.len();
        BpStatus::Ok
    })
}

/// Copies the `[f, H, W, C]` latents of block `index` into `buf`.
///
/// # Safety
/// `sim` must be a live handle; `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_block_data(
    sim: *const BpSimulation,
    index: usize,
    buf: *mut f64,
    len: usize,
) -> BpStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(BpStatus::NullPointer, "null `sim`");
        };
        if buf.is_null() {
            return fail(BpStatus::NullPointer, "null `buf`");
        }
        let out = try_status!(output(sim));
        let Some(b) = out.blocks.get(index) else {
            return fail(BpStatus::OutOfRange, format!("block index {index} of {}", out.blocks.len()));
        };
        let data = b.frames.data();
        if len < data.len() {
            return fail(BpStatus::BufferTooSmall, format!("need {} values, got {len}", data.len()));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        BpStatus::Ok
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BpBubbleStats {
    pub devices: usize,
    pub total_busy: u64,
    pub total_idle: u64,
    pub warmup_idle: u64,
    pub steady_idle: u64,
    pub cooldown_idle: u64,
    pub bubble_size: f64,
    pub ratio: f64,
    pub formula_numerator: i64,
    pub formula_denominator: i64,
}

/// Measured idle accounting of the last run next to the closed form.
///
/// # Safety
/// `sim` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_bubble_stats(sim: *const BpSimulation, out: *mut BpBubbleStats) -> BpStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(BpStatus::NullPointer, "null `sim`");
        };
        let dst = out_ref!(out);
        let run = try_status!(output(sim));
        let cfg = sim.config.pipeline_config();
        let stats = match measure_bubbles(&run.events, cfg.devices) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        let f = match bubble_fraction(&BubbleParams::new(cfg.devices, cfg.steps(), cfg.block_num, cfg.order)) {
            Ok(f) => f,
            Err(e) => return from_error(e),
        };
        let (Ok(num), Ok(den)) = (i64::try_from(f.bubble), i64::try_from(f.denominator())) else {
            return fail(BpStatus::OutOfRange, "fraction does not fit in 64 bits");
        };
        *dst = BpBubbleStats {
            devices: stats.devices,
            total_busy: stats.total_busy,
            total_idle: stats.total_idle,
            warmup_idle: stats.warmup_idle,
            steady_idle: stats.steady_idle,
            cooldown_idle: stats.cooldown_idle,
            bubble_size: stats.bubble_size,
            ratio: stats.ratio,
            formula_numerator: num,
            formula_denominator: den,
        };
        BpStatus::Ok
    })
}

/// Copies the effective config as compact JSON into `buf` (NUL-terminated).
/// `needed` receives the length without the NUL.
///
/// # Safety
/// `sim` must be a live handle; `buf` null or valid for `len` bytes;
/// `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn bp_sim_config_json(
    sim: *const BpSimulation,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> BpStatus {
    guard(|| {
        let Some(sim) = sim.as_ref() else {
            return fail(BpStatus::NullPointer, "null `sim`");
        };
        let needed = out_ref!(needed);
        let json = sim.config.to_json();
        *needed = json.len();
        if buf.is_null() || len <= json.len() {
            return fail(BpStatus::BufferTooSmall, format!("need {} bytes", json.len() + 1));
        }
        std::ptr::copy_nonoverlapping(json.as_ptr(), buf.cast::<u8>(), json.len());
        *buf.add(json.len()) = 0;
        BpStatus::Ok
    })
}
