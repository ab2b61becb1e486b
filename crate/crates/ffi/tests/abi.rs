use std::ffi::{c_char, CString};
use std::ptr;

use tractfuse::agents::{Algo, Hyper, PolicyBundle};
use tractfuse::rng;
use tractfuse_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { tf_last_error(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn tube() -> *mut TfPhantom {
    let name = CString::new("straight_tube").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { tf_phantom_generate(name.as_ptr(), 1, &mut p) }, TfStatus::Ok);
    p
}

#[test]
fn reward_matches_library() {
    let a = [1.0, 0.0, 0.0];
    let prev = [0.6, 0.8, 0.0];
    let peaks = [0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    let mut r = f64::NAN;
    let st = unsafe { tf_reward(a.as_ptr(), prev.as_ptr(), peaks.as_ptr(), 2, &mut r) };
    assert_eq!(st, TfStatus::Ok);
    let expect = tractfuse::env::reward(a, Some(prev), &[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(r, expect);

    let st = unsafe { tf_reward(a.as_ptr(), ptr::null(), peaks.as_ptr(), 2, &mut r) };
    assert_eq!(st, TfStatus::Ok);
    assert_eq!(r, tractfuse::env::reward(a, None, &[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]).unwrap());
}

#[test]
fn null_output_is_reported() {
    let a = [1.0, 0.0, 0.0];
    let st = unsafe { tf_reward(a.as_ptr(), ptr::null(), ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(st, TfStatus::NullPointer);
    assert!(last_error().contains("out_reward"));
}

#[test]
fn error_message_truncates_and_reports_length() {
    let name = CString::new("torus").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { tf_phantom_generate(name.as_ptr(), 1, &mut p) }, TfStatus::InvalidArgument);
    assert!(p.is_null());
    let full = unsafe { tf_last_error(ptr::null_mut(), 0) };
    let mut small = [0x7fu8; 8];
    let n = unsafe { tf_last_error(small.as_mut_ptr().cast::<c_char>(), small.len()) };
    assert_eq!(n, full);
    assert_eq!(small[7], 0);
    assert!(last_error().contains("torus"));
}

#[test]
fn mdf_of_reversed_line_is_zero() {
    let a = [0.0f32, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
    let b = [2.0f32, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let mut d = f64::NAN;
    assert_eq!(unsafe { tf_mdf(a.as_ptr(), b.as_ptr(), 3, 2.0, &mut d) }, TfStatus::Ok);
    assert!(d.abs() < 1e-9, "{d}");

    let c = [0.0f32, 1.0, 0.0, 1.0, 1.0, 0.0, 2.0, 1.0, 0.0];
    assert_eq!(unsafe { tf_mdf(a.as_ptr(), c.as_ptr(), 3, 2.0, &mut d) }, TfStatus::Ok);
    assert!((d - 2.0).abs() < 1e-6, "{d}");
}

#[test]
fn score_of_masks() {
    let c = [1u8, 1, 0, 0];
    let t = [1u8, 0, 1, 0];
    let mut s = TfScore::default();
    assert_eq!(unsafe { tf_score(c.as_ptr(), t.as_ptr(), 4, &mut s) }, TfStatus::Ok);
    assert_eq!(s, TfScore { dice: 0.5, ol: 0.5, or_: 0.5 });

    let empty = [0u8; 4];
    assert_eq!(unsafe { tf_score(c.as_ptr(), empty.as_ptr(), 4, &mut s) }, TfStatus::InvalidArgument);
}

#[test]
fn phantom_info_and_missing_file() {
    let p = tube();
    let mut bundles = 0;
    let mut dims = [0usize; 3];
    assert_eq!(unsafe { tf_phantom_info(p, &mut bundles, dims.as_mut_ptr()) }, TfStatus::Ok);
    assert_eq!(bundles, 1);
    assert!(dims.iter().all(|&d| d > 0));
    unsafe { tf_phantom_free(p) };

    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("none.phn").to_str().unwrap()).unwrap();
    let mut q = ptr::null_mut();
    let st = unsafe { tf_phantom_load(missing.as_ptr(), &mut q) };
    assert!(matches!(st, TfStatus::MissingFile | TfStatus::Io), "{st:?}");
    assert!(last_error().contains("none.phn"));
}

#[test]
fn track_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ckp = dir.path().join("td3.ckp");
    let mut r = rng::stream(3, "ffi-test");
    PolicyBundle::new(Algo::Td3, Hyper::defaults(Algo::Td3), &mut r).save(&ckp).unwrap();

    let ph = tube();
    let path = CString::new(ckp.to_str().unwrap()).unwrap();
    let mut pol = ptr::null_mut();
    assert_eq!(unsafe { tf_policy_load(path.as_ptr(), &mut pol) }, TfStatus::Ok);

    let mut set = ptr::null_mut();
    assert_eq!(unsafe { tf_track_policy(pol, ph, 0, 1, 9, &mut set) }, TfStatus::Ok);
    let mut count = 0;
    assert_eq!(unsafe { tf_streamlines_count(set, &mut count) }, TfStatus::Ok);
    assert!(count > 0);

    let mut pts = ptr::null();
    let mut n = 0;
    assert_eq!(unsafe { tf_streamline_points(set, 0, &mut pts, &mut n) }, TfStatus::Ok);
    assert!(n >= 2 && !pts.is_null());
    assert_eq!(unsafe { tf_streamline_points(set, count, &mut pts, &mut n) }, TfStatus::InvalidArgument);

    let out = CString::new(dir.path().join("t.stl").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tf_streamlines_save(set, out.as_ptr()) }, TfStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { tf_streamlines_load(out.as_ptr(), &mut back) }, TfStatus::Ok);
    let mut count2 = 0;
    assert_eq!(unsafe { tf_streamlines_count(back, &mut count2) }, TfStatus::Ok);
    assert_eq!(count, count2);

    let mut s = TfScore::default();
    assert_eq!(unsafe { tf_evaluate(back, ph, 0, f64::INFINITY, &mut s) }, TfStatus::Ok);
    assert!((0.0..=1.0).contains(&s.dice) && s.ol > 0.0);
    assert_eq!(unsafe { tf_evaluate(back, ph, 5, 5.0, &mut s) }, TfStatus::InvalidArgument);

    unsafe {
        tf_streamlines_free(set);
        tf_streamlines_free(back);
        tf_policy_free(pol);
        tf_phantom_free(ph);
        tf_phantom_free(ptr::null_mut());
    }
}
