use std::ffi::{CStr, CString};
use std::ptr;

use midway::harness::testing::tiny_config;
use midway::harness::train::initial_state;
use midway::harness::Checkpoint;
use midway_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mw_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn config_roundtrip_and_errors() {
    unsafe {
        let mut cfg = ptr::null_mut();
        let name = CString::new("toy").unwrap();
        assert_eq!(mw_config_new(name.as_ptr(), &mut cfg), MwStatus::Ok);

        let mut buf = [0 as std::ffi::c_char; 32];
        let mut needed = 0;
        assert_eq!(mw_config_hash(cfg, buf.as_mut_ptr(), buf.len(), &mut needed), MwStatus::Ok);
        assert_eq!(needed, 17);
        let before = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned();
        assert_eq!(before, midway::harness::RunConfig::toy().hash());

        let (k, v) = (CString::new("run.seed").unwrap(), CString::new("7").unwrap());
        assert_eq!(mw_config_set(cfg, k.as_ptr(), v.as_ptr()), MwStatus::Ok);
        mw_config_hash(cfg, buf.as_mut_ptr(), buf.len(), &mut needed);
        assert_ne!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), before);

        let bad = CString::new("run.nope").unwrap();
        assert_eq!(mw_config_set(cfg, bad.as_ptr(), v.as_ptr()), MwStatus::Config);
        assert!(last_error().contains("run.nope"), "{}", last_error());

        let mut small = [0 as std::ffi::c_char; 4];
        assert_eq!(mw_config_hash(cfg, small.as_mut_ptr(), small.len(), &mut needed), MwStatus::BufferTooSmall);
        assert_eq!(needed, 17);
        mw_config_free(cfg);

        let unknown = CString::new("huge").unwrap();
        assert_eq!(mw_config_new(unknown.as_ptr(), &mut cfg), MwStatus::Config);
        assert_eq!(mw_config_new(ptr::null(), &mut cfg), MwStatus::NullArgument);
        mw_config_free(ptr::null_mut());
    }
}

#[test]
fn model_load_and_perturb() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let config = tiny_config();
    let state = initial_state(&config);
    Checkpoint { config, state }.save(&path).unwrap();

    unsafe {
        let mut model = ptr::null_mut();
        let p = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(mw_model_load(p.as_ptr(), &mut model), MwStatus::Ok);
        let (mut size, mut grid, mut step) = (0, 0, 99);
        assert_eq!(mw_model_dims(model, &mut size, &mut grid), MwStatus::Ok);
        assert_eq!((size, grid), (16, 4));
        assert_eq!(mw_model_step(model, &mut step), MwStatus::Ok);
        assert_eq!(step, 0);

        let frame: Vec<u8> = (0..size * size * 3).map(|i| (i * 37 % 251) as u8).collect();
        let mut scores = vec![f64::NAN; grid * grid];
        assert_eq!(mw_perturb(model, frame.as_ptr(), frame.as_ptr(), size, 5, 4, 1, scores.as_mut_ptr(), scores.len()), MwStatus::Ok);
        assert!(scores.iter().all(|s| s.is_finite() && s.abs() <= 1.0 + 1e-12));

        assert_eq!(mw_perturb(model, frame.as_ptr(), frame.as_ptr(), 8, 5, 4, 1, scores.as_mut_ptr(), scores.len()), MwStatus::InvalidArgument);
        assert_eq!(mw_perturb(model, frame.as_ptr(), frame.as_ptr(), size, 5, 4, 1, scores.as_mut_ptr(), 3), MwStatus::BufferTooSmall);
        assert_eq!(mw_perturb(model, frame.as_ptr(), frame.as_ptr(), size, 99, 4, 1, scores.as_mut_ptr(), scores.len()), MwStatus::Config);
        assert_eq!(mw_perturb(model, ptr::null(), frame.as_ptr(), size, 5, 4, 1, scores.as_mut_ptr(), scores.len()), MwStatus::NullArgument);
        mw_model_free(model);

        let missing = CString::new(dir.path().join("absent.ckpt").to_str().unwrap()).unwrap();
        assert_eq!(mw_model_load(missing.as_ptr(), &mut model), MwStatus::Io);
        assert!(last_error().contains("absent.ckpt"));
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/midway.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["mw_last_error", "mw_config_new", "mw_model_load", "mw_perturb", "MW_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ return mw_last_error() == 0; }}\n")).unwrap();
    match std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror"]).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
