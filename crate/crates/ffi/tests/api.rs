use std::ffi::{CStr, CString};
use std::ptr;

use blockpipe::analytics::{method_cost, CostParams, Method};
use blockpipe::config::RunConfig;
use blockpipe::pipeline::run_pipeline;
use blockpipe_ffi::*;

fn new_sim(json: &str) -> *mut BpSimulation {
    let json = CString::new(json).unwrap();
    let mut sim = ptr::null_mut();
    assert_eq!(unsafe { bp_sim_new(json.as_ptr(), &mut sim) }, BpStatus::Ok);
    sim
}

#[test]
fn bubble_entry_points_agree() {
    let (mut n, mut d, mut r) = (0i64, 0i64, 0.0f64);
    unsafe {
        assert_eq!(bp_bubble_fraction(4, 50, 4, 0, &mut n, &mut d), BpStatus::Ok);
        assert_eq!(bp_bubble_ratio(4, 50, 4, 0, &mut r), BpStatus::Ok);
    }
    assert_eq!((n, d), (11, 211));
    assert_eq!(r, 11.0 / 211.0);
    assert_eq!(unsafe { bp_bubble_ratio(0, 50, 4, 0, &mut r) }, BpStatus::Config);
}

#[test]
fn method_cost_matches_core() {
    let mut p = unsafe { std::mem::zeroed::<BpCostParams>() };
    assert_eq!(unsafe { bp_cost_params_default(&mut p) }, BpStatus::Ok);
    for m in Method::ALL {
        let name = CString::new(m.name()).unwrap();
        let mut out = BpMethodCost::default();
        assert_eq!(unsafe { bp_method_cost(name.as_ptr(), &p, &mut out) }, BpStatus::Ok);
        let expect = method_cost(m, &CostParams::default()).unwrap();
        assert_eq!(out.comm_scalars, expect.comm_scalars);
        assert_eq!(out.comm_overlap != 0, expect.comm_overlap);
        assert_eq!((out.model_mem, out.kv_mem), (expect.model_mem, expect.kv_mem));
    }
}

#[test]
fn simulation_matches_library_run() {
    let json = r#"{"devices": 4, "block_num": 5, "steps": 6}"#;
    let sim = new_sim(json);
    assert_eq!(unsafe { bp_sim_run(sim) }, BpStatus::Ok);
    let expect = run_pipeline(&RunConfig::default().merge_json(json).unwrap().pipeline_config()).unwrap();

    let mut count = 0;
    assert_eq!(unsafe { bp_sim_block_count(sim, &mut count) }, BpStatus::Ok);
    assert_eq!(count, expect.blocks.len());
    for (i, b) in expect.blocks.iter().enumerate() {
        let (mut id, mut frames, mut values) = (0, 0, 0);
        assert_eq!(unsafe { bp_sim_block_info(sim, i, &mut id, &mut frames, &mut values) }, BpStatus::Ok);
        assert_eq!((id, frames, values), (b.block_id, b.frames.shape()[0], b.frames.len()));
        let mut buf = vec![0.0; values];
        assert_eq!(unsafe { bp_sim_block_data(sim, i, buf.as_mut_ptr(), buf.len()) }, BpStatus::Ok);
        assert_eq!(buf, b.frames.data());
        if values > 0 {
            assert_eq!(unsafe { bp_sim_block_data(sim, i, buf.as_mut_ptr(), values - 1) }, BpStatus::BufferTooSmall);
        }
    }
    let (mut id, mut f, mut v) = (0, 0, 0);
    assert_eq!(unsafe { bp_sim_block_info(sim, count, &mut id, &mut f, &mut v) }, BpStatus::OutOfRange);

    let mut stats = BpBubbleStats::default();
    assert_eq!(unsafe { bp_sim_bubble_stats(sim, &mut stats) }, BpStatus::Ok);
    assert_eq!(stats.devices, 4);
    assert_eq!(stats.total_busy, 4 * 6 * 5);

    let mut needed = 0;
    assert_eq!(unsafe { bp_sim_config_json(sim, ptr::null_mut(), 0, &mut needed) }, BpStatus::BufferTooSmall);
    let mut buf = vec![0u8; needed + 1];
    assert_eq!(unsafe { bp_sim_config_json(sim, buf.as_mut_ptr().cast(), buf.len(), &mut needed) }, BpStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr().cast()) }.to_str().unwrap();
    assert!(text.contains("\"devices\":4"));
    unsafe { bp_sim_free(sim) };
}

#[test]
fn invalid_inputs_set_last_error() {
    let mut sim = ptr::null_mut();
    let bad = CString::new("{not json").unwrap();
    assert_eq!(unsafe { bp_sim_new(bad.as_ptr(), &mut sim) }, BpStatus::Config);
    let len = unsafe { bp_last_error(ptr::null_mut(), 0) };
    assert!(len > 0);
    let invalid = [0xffu8, 0];
    assert_eq!(unsafe { bp_sim_new(invalid.as_ptr().cast(), &mut sim) }, BpStatus::InvalidUtf8);
    assert_eq!(unsafe { bp_sim_run(ptr::null_mut()) }, BpStatus::NullPointer);
    unsafe { bp_sim_free(ptr::null_mut()) };
}
