use std::ffi::{CStr, CString, c_char};
use std::ptr;

use twin_ffi::*;

fn new_session(seed: u64) -> *mut TwinSession {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { twin_session_new(ptr::null(), seed, &mut s) }, TwinStatus::Ok);
    assert!(!s.is_null());
    s
}

fn take(p: *mut c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { twin_string_free(p) };
    s
}

fn hash(s: *mut TwinSession) -> String {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { twin_session_telemetry_hash(s, &mut out) }, TwinStatus::Ok);
    take(out)
}

#[test]
fn drive_and_poll_telemetry() {
    let s = new_session(1);
    let cmd = CString::new(r#"{"topic":"drive_cmd","payload":{"mode":"velocity","left":0.5,"right":0.5}}"#).unwrap();
    assert_eq!(unsafe { twin_session_publish(s, cmd.as_ptr()) }, TwinStatus::Ok);
    assert_eq!(unsafe { twin_session_step(s, 200) }, TwinStatus::Ok);
    let mut pose = TwinPose::default();
    assert_eq!(unsafe { twin_session_pose(s, &mut pose) }, TwinStatus::Ok);
    assert!(pose.x > 0.3, "{pose:?}");
    let mut t = 0;
    assert_eq!(unsafe { twin_session_time_ns(s, &mut t) }, TwinStatus::Ok);
    assert_eq!(t, 2_000_000_000);

    let mut n = 0;
    let mut line = ptr::null_mut();
    while unsafe { twin_session_poll(s, &mut line) } == TwinStatus::Ok {
        assert!(take(line).starts_with("{\"topic\":"));
        n += 1;
    }
    // telemetry stamped t+dt arrives one tick later: 198 rounds of 3 topics + Start + AntennaPose
    assert_eq!(n, 3 * 198 + 2);
    unsafe { twin_session_free(s) };
}

#[test]
fn errors_are_reported() {
    let s = new_session(1);
    let bad = CString::new(r#"{"topic":"odometry","payload":{}}"#).unwrap();
    assert_eq!(unsafe { twin_session_publish(s, bad.as_ptr()) }, TwinStatus::InvalidCommand);
    let msg = unsafe { CStr::from_ptr(twin_last_error()) }.to_str().unwrap();
    assert!(msg.contains("odometry"), "{msg}");
    assert_eq!(unsafe { twin_session_step(ptr::null_mut(), 1) }, TwinStatus::NullArgument);
    assert_eq!(unsafe { twin_session_publish(s, ptr::null()) }, TwinStatus::NullArgument);

    let cfg = CString::new("[physics]\nmu_static = 0.1\nmu_dynamic = 0.3\n").unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { twin_session_new(cfg.as_ptr(), 0, &mut h) }, TwinStatus::Config);
    assert!(h.is_null());
    unsafe { twin_session_free(s) };
}

#[test]
fn snapshot_restore_keeps_hash() {
    let run = |restore: bool| {
        let s = new_session(9);
        let cmd = CString::new(r#"{"topic":"drive_cmd","payload":{"mode":"velocity","left":0.2,"right":0.4}}"#).unwrap();
        unsafe { twin_session_publish(s, cmd.as_ptr()) };
        unsafe { twin_session_step(s, 150) };
        if restore {
            let mut doc = ptr::null_mut();
            assert_eq!(unsafe { twin_session_snapshot(s, &mut doc) }, TwinStatus::Ok);
            let doc = CString::new(take(doc)).unwrap();
            assert_eq!(unsafe { twin_session_restore(s, doc.as_ptr()) }, TwinStatus::Ok);
        }
        unsafe { twin_session_reset(s) };
        unsafe { twin_session_step(s, 150) };
        let h = hash(s);
        unsafe { twin_session_free(s) };
        h
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn quantize() {
    let step = 0.0888f64.to_radians();
    let q = twin_quantize_joint(1.0, step);
    assert!(((q / step).round() * step - q).abs() < 1e-12);
    assert!((q - 1.0).abs() <= step / 2.0);
    assert!(twin_quantize_joint(1.0, 0.0).is_nan());
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/twin.h")).unwrap();
    for sym in ["twin_session_new", "twin_session_poll", "TWIN_STATUS_EMPTY", "typedef struct TwinSession TwinSession"] {
        assert!(h.contains(sym), "missing {sym}");
    }
}
