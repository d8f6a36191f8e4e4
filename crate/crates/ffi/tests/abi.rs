use std::ffi::{CStr, CString};
use std::ptr;

use scene_mtl_ffi::*;

const TINY: &str = "dataset.sd_frames=12
dataset.td_frames=10
model.crop_size=16
model.channels=4,8
model.d_model=16
model.n_memory=2
model.n_enc=1
model.n_dec=1
model.ffn_dim=16
model.semantic_dim=8
model.graph_hidden=16
model.edge_hidden=8
curriculum.radius=1
regime.pretrain.epochs=1
regime.caption.epochs=1
regime.scenegraph.epochs=1
regime.finetune.epochs=1
regime.joint.epochs=1
regime.adapt.epochs=1
regime.warmup_steps=10
";

fn last_error() -> String {
    let p = smtl_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

#[test]
fn kernel_is_zero_sum_and_checks_its_buffer() {
    let mut buf = vec![0.0; 25];
    assert_eq!(unsafe { smtl_log_kernel(1.0, 2, buf.as_mut_ptr(), buf.len()) }, SmtlStatus::Ok);
    assert!(smtl_last_error().is_null());
    assert!(buf.iter().sum::<f64>().abs() < 1e-12);
    assert_eq!(buf[12], buf.iter().cloned().fold(f64::INFINITY, f64::min));
    assert_eq!(unsafe { smtl_log_kernel(1.0, 2, buf.as_mut_ptr(), 9) }, SmtlStatus::InvalidArgument);
    assert!(last_error().contains("holds 9"));
    assert_eq!(unsafe { smtl_log_kernel(-1.0, 2, buf.as_mut_ptr(), 25) }, SmtlStatus::InvalidArgument);
    assert_eq!(unsafe { smtl_log_kernel(1.0, 2, ptr::null_mut(), 25) }, SmtlStatus::NullPointer);
}

#[test]
fn config_text_round_trips_through_handles() {
    let mut cfg = ptr::null_mut();
    let (desk, regime, proto) = (c("desk"), c("mtl_kd"), c("few"));
    assert_eq!(unsafe { smtl_config_new(desk.as_ptr(), regime.as_ptr(), proto.as_ptr(), &mut cfg) }, SmtlStatus::Ok);
    assert_eq!(unsafe { smtl_config_set_seed(cfg, 42) }, SmtlStatus::Ok);
    let mut text = ptr::null_mut();
    assert_eq!(unsafe { smtl_config_to_text(cfg, &mut text) }, SmtlStatus::Ok);
    let owned = unsafe { CStr::from_ptr(text) }.to_owned();
    let s = owned.to_str().unwrap();
    assert!(s.contains("seed=42") && s.contains("regime.regime=MTL_KD") && s.contains("protocol=FEW"), "{s}");

    let mut back = ptr::null_mut();
    assert_eq!(unsafe { smtl_config_parse(text, &mut back) }, SmtlStatus::Ok);
    let mut text2 = ptr::null_mut();
    assert_eq!(unsafe { smtl_config_to_text(back, &mut text2) }, SmtlStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(text2) }, owned.as_c_str());
    unsafe {
        smtl_string_free(text);
        smtl_string_free(text2);
        smtl_config_free(cfg);
        smtl_config_free(back);
        smtl_config_free(ptr::null_mut());
        smtl_string_free(ptr::null_mut());
    }
}

#[test]
fn errors_map_to_status_codes() {
    let mut cfg = ptr::null_mut();
    let bad = c("regime.finetun.epochs=3");
    assert_eq!(unsafe { smtl_config_parse(bad.as_ptr(), &mut cfg) }, SmtlStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("regime.finetun.epochs"));
    assert_eq!(unsafe { smtl_config_parse(ptr::null(), &mut cfg) }, SmtlStatus::NullPointer);
    let (huge, r, p) = (c("huge"), c("MTL_FT"), c("UDA"));
    assert_eq!(unsafe { smtl_config_new(huge.as_ptr(), r.as_ptr(), p.as_ptr(), &mut cfg) }, SmtlStatus::Config);
    let missing = c("/nonexistent/run");
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { smtl_manifest_read(missing.as_ptr(), &mut m) }, SmtlStatus::Io);
    let mut out = SmtlMetrics::default();
    assert_eq!(unsafe { smtl_evaluate(missing.as_ptr(), missing.as_ptr(), &mut out) }, SmtlStatus::Io);
    assert!(!unsafe { smtl_manifest_is_success(ptr::null()) });
}

#[test]
fn run_then_read_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let text = c(TINY);
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { smtl_config_parse(text.as_ptr(), &mut cfg) }, SmtlStatus::Ok);
    let od = c(out_dir.to_str().unwrap());
    assert_eq!(unsafe { smtl_config_set_output_dir(cfg, od.as_ptr()) }, SmtlStatus::Ok);

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { smtl_run(cfg, &mut m) }, SmtlStatus::Ok, "{}", last_error());
    assert!(unsafe { smtl_manifest_is_success(m) });
    let mut bg_td = SmtlMetrics::default();
    assert_eq!(unsafe { smtl_manifest_report(m, SmtlCheckpoint::BestGraph, SmtlSplit::Td, &mut bg_td) }, SmtlStatus::Ok);
    assert_eq!(bg_td.split, 1);
    assert!(bg_td.n_samples > 0);

    // Rerunning into the same directory reproduces the report.
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { smtl_run(cfg, &mut m2) }, SmtlStatus::Ok);
    let mut again = SmtlMetrics::default();
    unsafe { smtl_manifest_report(m2, SmtlCheckpoint::BestGraph, SmtlSplit::Td, &mut again) };
    assert_eq!(again, bg_td);

    let mut read = ptr::null_mut();
    assert_eq!(unsafe { smtl_manifest_read(od.as_ptr(), &mut read) }, SmtlStatus::Ok);
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { smtl_manifest_to_json(read, &mut json) }, SmtlStatus::Ok);
    assert!(unsafe { CStr::from_ptr(json) }.to_str().unwrap().contains("\"config_hash\""));

    let final_ckpt = std::fs::read_dir(out_dir.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().ends_with("-final"))
        .unwrap();
    let (ck, td) = (c(final_ckpt.to_str().unwrap()), c(out_dir.join("data/td").to_str().unwrap()));
    let mut a = SmtlMetrics::default();
    let mut b = SmtlMetrics::default();
    assert_eq!(unsafe { smtl_evaluate(ck.as_ptr(), td.as_ptr(), &mut a) }, SmtlStatus::Ok);
    assert_eq!(unsafe { smtl_evaluate(ck.as_ptr(), td.as_ptr(), &mut b) }, SmtlStatus::Ok);
    assert_eq!(a, b);
    assert_eq!(a.split, 1);

    unsafe {
        smtl_string_free(json);
        smtl_manifest_free(m);
        smtl_manifest_free(m2);
        smtl_manifest_free(read);
        smtl_config_free(cfg);
    }
}
