use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use jemlab::data::synth_toy;
use jemlab::data::ToyKind;
use jemlab::eval;
use jemlab::trainer::{load_checkpoint, train, TrainConfig};
use jemlab::Real;
use jemlab_ffi::*;

fn trained<T: Real>(dir: &Path) -> PathBuf {
    let ds = synth_toy::<T>(ToyKind::Gaussians8, 256, 0.1, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        hidden: vec![16],
        lr: 0.01,
        buffer_capacity: 64,
        ..TrainConfig::default()
    };
    let out = train(cfg, &ds, None, Some(dir), &serde_json::Value::Null).unwrap();
    out.checkpoints.last().unwrap().clone()
}

fn load(path: &Path) -> *mut JemModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { jem_model_load(c.as_ptr(), &mut m) }, JemStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = jem_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn f64_checkpoint_matches_core_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained::<f64>(dir.path());
    let m = load(&path);
    let core = load_checkpoint::<f64>(&path).unwrap();
    unsafe {
        assert_eq!(jem_model_input_len(m), 2);
        assert_eq!(jem_model_classes(m), 2);
    }
    let x = [0.5, -3.0, 10.0, 0.0, -7.5, 7.5];
    let mut logits = [0.0; 6];
    let mut energy = [0.0; 3];
    unsafe {
        assert_eq!(jem_model_logits(m, x.as_ptr(), 3, logits.as_mut_ptr()), JemStatus::Ok);
        assert_eq!(jem_model_energy(m, x.as_ptr(), 3, energy.as_mut_ptr()), JemStatus::Ok);
    }
    let xt = jemlab::Tensor::new(vec![3, 2], x.to_vec()).unwrap();
    assert_eq!(logits.to_vec(), eval::batched_logits(&core.model, &xt).unwrap().data().to_vec());
    assert_eq!(energy.to_vec(), eval::batched_energy(&core.model, &xt).unwrap().data().to_vec());
    unsafe { jem_model_free(m) };
}

#[test]
fn f32_checkpoint_loads_and_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained::<f32>(dir.path());
    let m = load(&path);
    let core = load_checkpoint::<f32>(&path).unwrap();
    let x = [1.0f64, 2.0, -4.0, 6.0];
    let mut e = [0.0; 2];
    unsafe { assert_eq!(jem_model_energy(m, x.as_ptr(), 2, e.as_mut_ptr()), JemStatus::Ok) };
    let xt = jemlab::Tensor::new(vec![2, 2], x.iter().map(|&v| v as f32).collect()).unwrap();
    let want = eval::batched_energy(&core.model, &xt).unwrap();
    for (a, b) in e.iter().zip(want.data()) {
        assert!((a - *b as f64).abs() <= 1e-4 * (1.0 + a.abs()), "{a} vs {b}");
    }
    unsafe { jem_model_free(m) };
}

#[test]
fn sampling_is_seeded_and_clamped() {
    let dir = tempfile::tempdir().unwrap();
    let path = trained::<f64>(dir.path());
    let m = load(&path);
    let core = load_checkpoint::<f64>(&path).unwrap();
    let (mut a, mut b) = (vec![0.0; 40], vec![0.0; 40]);
    unsafe {
        assert_eq!(jem_model_sample(m, 20, 10, 1.0, 0.01, -1, 9, a.as_mut_ptr()), JemStatus::Ok);
        assert_eq!(jem_model_sample(m, 20, 10, 1.0, 0.01, -1, 9, b.as_mut_ptr()), JemStatus::Ok);
        assert_eq!(jem_model_sample(m, 20, 10, 1.0, 0.01, 1, 9, b.as_mut_ptr()), JemStatus::Ok);
    }
    assert!(a.iter().all(|v| (core.clamp.lo..=core.clamp.hi).contains(v)));
    assert_ne!(a, b);
    unsafe {
        assert_eq!(jem_model_sample(m, 0, 10, 1.0, 0.0, -1, 9, ptr::null_mut()), JemStatus::Ok);
        assert_eq!(jem_model_sample(m, 2, 10, 1.0, 0.0, 2, 9, a.as_mut_ptr()), JemStatus::InvalidArgument);
        jem_model_free(m);
    }
    assert!(last_error().contains("out of range"));
}

#[test]
fn error_codes_and_messages() {
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(jem_model_load(missing.as_ptr(), &mut m), JemStatus::Io);
        assert!(m.is_null());
        assert_eq!(jem_model_load(ptr::null(), &mut m), JemStatus::NullPointer);
        assert_eq!(jem_model_logits(ptr::null(), ptr::null(), 0, ptr::null_mut()), JemStatus::NullPointer);
        jem_model_free(ptr::null_mut());
        assert_eq!(jem_model_classes(ptr::null()), 0);
    }
    assert!(last_error().contains("model"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let c = CString::new(junk.to_str().unwrap()).unwrap();
    unsafe { assert_eq!(jem_model_load(c.as_ptr(), &mut m), JemStatus::Format) };

    let path = trained::<f64>(dir.path());
    let m = load(&path);
    let mut out = [0.0; 2];
    unsafe {
        assert_eq!(jem_model_logits(m, ptr::null(), 1, out.as_mut_ptr()), JemStatus::NullPointer);
        jem_model_free(m);
    }
}

#[test]
fn metrics_match_core() {
    let ins = [0.9, 0.8, 0.4, 0.7];
    let outs = [0.1, 0.4, 0.3];
    let mut r = 0.0;
    unsafe { assert_eq!(jem_auroc(ins.as_ptr(), 4, outs.as_ptr(), 3, &mut r), JemStatus::Ok) };
    assert_eq!(r, eval::auroc(&ins, &outs).unwrap());

    let conf = [0.95, 0.6, 0.8, 0.3];
    let correct = [1u8, 0, 1, 1];
    unsafe { assert_eq!(jem_ece(conf.as_ptr(), correct.as_ptr(), 4, 20, &mut r), JemStatus::Ok) };
    let want = eval::ece(&conf, &[true, false, true, true], 20).unwrap().ece;
    assert_eq!(r, want);

    unsafe { assert_eq!(jem_auroc(ins.as_ptr(), 4, outs.as_ptr(), 0, &mut r), JemStatus::InvalidArgument) };
    unsafe { assert_eq!(jem_ece(conf.as_ptr(), correct.as_ptr(), 4, 20, ptr::null_mut()), JemStatus::NullPointer) };
}

#[test]
fn header_declares_every_entry_point() {
    let h = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/jemlab.h")).unwrap();
    for f in [
        "jem_version",
        "jem_last_error",
        "jem_model_load",
        "jem_model_free",
        "jem_model_input_len",
        "jem_model_classes",
        "jem_model_logits",
        "jem_model_energy",
        "jem_model_sample",
        "jem_auroc",
        "jem_ece",
    ] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(h.contains("typedef struct JemModel JemModel;"));
    let v = unsafe { CStr::from_ptr(jem_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
