use std::ffi::{CStr, CString};
use std::ptr;

use itda_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = itda_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn shard(rows: &[f32], d: usize) -> *mut ItdaShard {
    let mut out = ptr::null_mut();
    let st = itda_shard_from_rows(
        c("m").as_ptr(),
        c("0").as_ptr(),
        c("ds").as_ptr(),
        rows.as_ptr(),
        rows.len() / d,
        d,
        &mut out,
    );
    assert_eq!(st, ItdaStatus::Ok);
    out
}

const ROWS: [f32; 12] = [
    1.0, 0.0, 0.0, //
    0.0, 2.0, 0.0, //
    0.0, 0.0, -1.0, //
    0.6, 0.8, 0.0,
];

#[test]
fn version_and_defaults() {
    let v = unsafe { CStr::from_ptr(itda_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let cfg = itda_train_config_default();
    assert_eq!(cfg.l0, 8);
    assert_eq!(cfg.batch_size, 1024);
    assert_eq!(cfg.max_dict_size, 0);
    assert!(!cfg.relative_tau);
}

#[test]
fn train_save_load_decompose_round_trip() {
    unsafe {
        let s = shard(&ROWS, 3);
        assert_eq!(itda_shard_count(s), 4);
        assert_eq!(itda_shard_d_model(s), 3);
        let mut cfg = itda_train_config_default();
        cfg.tau = 1e-9;
        cfg.l0 = 1;
        let mut dict = ptr::null_mut();
        let shards = [s as *const ItdaShard];
        assert_eq!(itda_train(shards.as_ptr(), 1, &cfg, &mut dict), ItdaStatus::Ok);
        assert_eq!(itda_dictionary_len(dict), 4);

        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("d.itda").to_str().unwrap());
        assert_eq!(itda_dictionary_save(dict, path.as_ptr()), ItdaStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(itda_dictionary_load(path.as_ptr(), &mut loaded), ItdaStatus::Ok);
        assert_eq!(itda_dictionary_len(loaded), 4);
        assert_eq!(itda_dictionary_d_model(loaded), 3);

        let (mut seq, mut tok) = (u64::MAX, u64::MAX);
        assert_eq!(itda_dictionary_label(loaded, 3, &mut seq, &mut tok), ItdaStatus::Ok);
        assert_eq!((seq, tok), (3, 0));
        assert_eq!(
            itda_dictionary_label(loaded, 4, &mut seq, &mut tok),
            ItdaStatus::InvalidArgument
        );

        let mut j = -1.0;
        assert_eq!(itda_jaccard(dict, loaded, &mut j), ItdaStatus::Ok);
        assert_eq!(j, 1.0);

        let signals = [0.0f32, 3.0, 0.0, 1.0, 1.0, 0.0];
        let mut atoms = [0i64; 4];
        let mut coeffs = [9.0f64; 4];
        let mut losses = [9.0f64; 2];
        let st = itda_decompose(
            loaded,
            signals.as_ptr(),
            2,
            3,
            2,
            atoms.as_mut_ptr(),
            coeffs.as_mut_ptr(),
            losses.as_mut_ptr(),
        );
        assert_eq!(st, ItdaStatus::Ok);
        assert_eq!(atoms[0], 1);
        assert!((coeffs[0] - 3.0).abs() < 1e-6);
        assert!(losses[0] < 1e-10);
        // Encoding stops once the residual is gone, leaving the slot unused.
        assert_eq!(atoms[1], -1);
        assert_eq!(coeffs[1], 0.0);
        assert!(losses[1] >= 0.0 && losses[1] < 2.0);

        let mut cropped = ptr::null_mut();
        assert_eq!(itda_dictionary_crop(loaded, 2, &mut cropped), ItdaStatus::Ok);
        assert_eq!(itda_dictionary_len(cropped), 2);
        assert_eq!(itda_jaccard(dict, cropped, &mut j), ItdaStatus::Ok);
        assert_eq!(j, 0.5);

        let mut deduped = ptr::null_mut();
        assert_eq!(itda_dictionary_dedup(loaded, 0.5, &mut deduped), ItdaStatus::Ok);
        assert_eq!(itda_dictionary_len(deduped), 3);

        for d in [dict, loaded, cropped, deduped] {
            itda_dictionary_free(d);
        }
        itda_shard_free(s);
    }
}

#[test]
fn shard_file_round_trip() {
    unsafe {
        let s = shard(&ROWS, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = c(dir.path().join("a.acts").to_str().unwrap());
        assert_eq!(itda_shard_write(s, path.as_ptr()), ItdaStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(itda_shard_read(path.as_ptr(), &mut back), ItdaStatus::Ok);
        assert_eq!(itda_shard_count(back), 4);
        itda_shard_free(back);
        itda_shard_free(s);
    }
}

#[test]
fn null_pointers_are_reported() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(itda_shard_read(ptr::null(), &mut out), ItdaStatus::NullPointer);
        assert!(last_error().contains("path"));
        assert_eq!(
            itda_dictionary_load(c("x").as_ptr(), ptr::null_mut()),
            ItdaStatus::NullPointer
        );
        let mut v = 0.0;
        assert_eq!(itda_jaccard(ptr::null(), ptr::null(), &mut v), ItdaStatus::NullPointer);
        assert_eq!(
            itda_ce_loss_score(1.0, 2.0, 3.0, ptr::null_mut()),
            ItdaStatus::NullPointer
        );
        assert_eq!(
            itda_train(ptr::null(), 1, &itda_train_config_default(), &mut ptr::null_mut()),
            ItdaStatus::NullPointer
        );
        assert_eq!(itda_shard_count(ptr::null()), 0);
        assert_eq!(itda_dictionary_len(ptr::null()), 0);
        itda_shard_free(ptr::null_mut());
        itda_dictionary_free(ptr::null_mut());
    }
}

#[test]
fn io_and_validation_errors() {
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(
            itda_dictionary_load(c("/nonexistent/d.itda").as_ptr(), &mut d),
            ItdaStatus::Io
        );
        assert!(d.is_null());
        assert!(last_error().contains("/nonexistent/d.itda"));

        let nan = [f32::NAN, 0.0];
        let mut s = ptr::null_mut();
        let st = itda_shard_from_rows(
            c("m").as_ptr(),
            c("0").as_ptr(),
            c("ds").as_ptr(),
            nan.as_ptr(),
            1,
            2,
            &mut s,
        );
        assert_eq!(st, ItdaStatus::Validation);

        let mut v = 0.0;
        assert_eq!(itda_ce_loss_score(1.0, 1.0, 1.0, &mut v), ItdaStatus::Validation);
        assert_eq!(itda_ce_loss_score(2.0, 3.0, 6.0, &mut v), ItdaStatus::Ok);
        assert_eq!(v, 0.75);

        let good = shard(&ROWS, 3);
        let mut cfg = itda_train_config_default();
        cfg.l0 = 0;
        let shards = [good as *const ItdaShard];
        assert_eq!(itda_train(shards.as_ptr(), 1, &cfg, &mut d), ItdaStatus::Validation);
        itda_shard_free(good);
    }
}

#[test]
fn decompose_rejects_width_mismatch() {
    unsafe {
        let s = shard(&ROWS, 3);
        let mut cfg = itda_train_config_default();
        cfg.tau = 1e-9;
        let shards = [s as *const ItdaShard];
        let mut dict = ptr::null_mut();
        assert_eq!(itda_train(shards.as_ptr(), 1, &cfg, &mut dict), ItdaStatus::Ok);
        let signals = [1.0f32, 0.0];
        let (mut a, mut co, mut l) = ([0i64; 1], [0f64; 1], [0f64; 1]);
        let st = itda_decompose(
            dict,
            signals.as_ptr(),
            1,
            2,
            1,
            a.as_mut_ptr(),
            co.as_mut_ptr(),
            l.as_mut_ptr(),
        );
        assert_eq!(st, ItdaStatus::InvalidArgument);
        assert!(last_error().contains("width"));
        itda_dictionary_free(dict);
        itda_shard_free(s);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/itda.h")).unwrap();
    for sym in [
        "itda_train",
        "itda_decompose",
        "itda_last_error",
        "ITDA_STATUS_NULL_POINTER",
        "typedef struct ItdaDictionary",
    ] {
        assert!(header.contains(sym), "{sym} missing from itda.h");
    }
}
