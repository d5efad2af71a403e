//! C ABI over a twin session.
//!
//! Every function returns a [`TwinStatus`]; on failure a message is kept
//! for the calling thread and can be read with [`twin_last_error`]. Strings
//! handed out by the library must be released with [`twin_string_free`].

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{CStr, CString, c_char};
use std::panic::{AssertUnwindSafe, catch_unwind};

use twin_core::bus::Direction;
use twin_core::kinematics::quantize_joint;
use twin_core::model::WorldSnapshot;
use twin_core::server::parse_command;
use twin_core::{Error, Session, TwinConfig, load_config};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TwinStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Configuration text failed to parse or validate.
    Config = 3,
    /// A command line was malformed or used a non-command topic.
    InvalidCommand = 4,
    /// A snapshot document failed to parse.
    Snapshot = 5,
    /// No telemetry is waiting.
    Empty = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TwinPose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Opaque session handle.
pub struct TwinSession {
    session: Session,
    telemetry: VecDeque<String>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), (TwinStatus, String)>) -> TwinStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TwinStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside twin library");
            TwinStatus::Internal
        }
    }
}

fn with_status(status: TwinStatus) -> impl Fn(Error) -> (TwinStatus, String) {
    move |e| (status, e.to_string())
}

unsafe fn text<'a>(p: *const c_char) -> Result<&'a str, (TwinStatus, String)> {
    if p.is_null() {
        return Err((TwinStatus::NullArgument, "null string argument".into()));
    }
    // SAFETY: caller passes a NUL-terminated string valid for the call.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|e| (TwinStatus::InvalidUtf8, e.to_string()))
}

unsafe fn handle<'a>(s: *mut TwinSession) -> Result<&'a mut TwinSession, (TwinStatus, String)> {
    // SAFETY: non-null handles come from twin_session_new and are not shared across threads.
    unsafe { s.as_mut() }.ok_or((TwinStatus::NullArgument, "null session handle".into()))
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), (TwinStatus, String)> {
    if out.is_null() {
        return Err((TwinStatus::NullArgument, "null output pointer".into()));
    }
    let c = CString::new(s).map_err(|e| (TwinStatus::Internal, e.to_string()))?;
    // SAFETY: out checked non-null above.
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message for the last failed call on this thread. Owned by the library;
/// valid until the next failing call on the same thread.
#[unsafe(no_mangle)]
pub extern "C" fn twin_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: produced by CString::into_raw in give_string.
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Creates a session. `config_toml` may be null for the built-in config.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_new(config_toml: *const c_char, seed: u64, out: *mut *mut TwinSession) -> TwinStatus {
    guard(|| {
        if out.is_null() {
            return Err((TwinStatus::NullArgument, "null output pointer".into()));
        }
        let cfg = if config_toml.is_null() {
            TwinConfig::builtin()
        } else {
            load_config(unsafe { text(config_toml) }?).map_err(with_status(TwinStatus::Config))?
        };
        let session = Session::twin(&cfg, seed).map_err(with_status(TwinStatus::Config))?;
        let h = Box::new(TwinSession {
            session,
            telemetry: VecDeque::new(),
        });
        // SAFETY: out checked non-null above.
        unsafe { *out = Box::into_raw(h) };
        Ok(())
    })
}

/// Destroys a session. Null is ignored.
///
/// # Safety
/// `s` must come from `twin_session_new` and not have been freed.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_free(s: *mut TwinSession) {
    if !s.is_null() {
        // SAFETY: produced by Box::into_raw in twin_session_new.
        drop(unsafe { Box::from_raw(s) });
    }
}

/// Advances `ticks` fixed steps, queueing delivered telemetry for polling.
///
/// # Safety
/// `s` must be a live session handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_step(s: *mut TwinSession, ticks: u32) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        for _ in 0..ticks {
            for e in h.session.tick() {
                if e.topic.direction() == Direction::Telemetry {
                    h.telemetry.push_back(e.to_line());
                }
            }
        }
        Ok(())
    })
}

/// Publishes one command record (`{"topic": ..., "payload": ...}`) at the current sim time.
///
/// # Safety
/// `s` must be a live session handle; `line` a NUL-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_publish(s: *mut TwinSession, line: *const c_char) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        let payload = parse_command(unsafe { text(line) }?).map_err(with_status(TwinStatus::InvalidCommand))?;
        h.session.publish(payload).map_err(with_status(TwinStatus::InvalidCommand))?;
        Ok(())
    })
}

/// Pops the oldest queued telemetry record as a JSON line, or returns
/// `TWIN_STATUS_EMPTY`. Free the string with `twin_string_free`.
///
/// # Safety
/// `s` must be a live session handle; `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_poll(s: *mut TwinSession, out: *mut *mut c_char) -> TwinStatus {
    let mut empty = false;
    let status = guard(|| {
        let h = unsafe { handle(s) }?;
        if out.is_null() {
            return Err((TwinStatus::NullArgument, "null output pointer".into()));
        }
        match h.telemetry.pop_front() {
            Some(line) => give_string(line, out),
            None => {
                empty = true;
                Ok(())
            }
        }
    });
    if empty { TwinStatus::Empty } else { status }
}

/// Requests a scenario reset through the command bus.
///
/// # Safety
/// `s` must be a live session handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_reset(s: *mut TwinSession) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        h.session
            .publish(twin_core::bus::Payload::Reset)
            .map_err(with_status(TwinStatus::InvalidCommand))?;
        Ok(())
    })
}

/// World state as a TOML document. Free with `twin_string_free`.
///
/// # Safety
/// `s` must be a live session handle; `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_snapshot(s: *mut TwinSession, out: *mut *mut c_char) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        let doc = h.session.world_snapshot().to_document().map_err(with_status(TwinStatus::Snapshot))?;
        give_string(doc, out)
    })
}

/// Replaces the world state with a document from `twin_session_snapshot`.
///
/// # Safety
/// `s` must be a live session handle; `doc` a NUL-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_restore(s: *mut TwinSession, doc: *const c_char) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        let snap = WorldSnapshot::from_document(unsafe { text(doc) }?).map_err(with_status(TwinStatus::Snapshot))?;
        h.session.restore_world(&snap);
        Ok(())
    })
}

/// # Safety
/// `s` must be a live session handle; `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_pose(s: *mut TwinSession, out: *mut TwinPose) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        // SAFETY: caller guarantees out is writable when non-null.
        let out = unsafe { out.as_mut() }.ok_or((TwinStatus::NullArgument, "null output pointer".to_string()))?;
        let r = h.session.state().rover;
        *out = TwinPose {
            x: r.x,
            y: r.y,
            heading: r.heading,
        };
        Ok(())
    })
}

/// Current sim time in nanoseconds.
///
/// # Safety
/// `s` must be a live session handle; `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_time_ns(s: *mut TwinSession, out: *mut u64) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        // SAFETY: caller guarantees out is writable when non-null.
        let out = unsafe { out.as_mut() }.ok_or((TwinStatus::NullArgument, "null output pointer".to_string()))?;
        *out = h.session.now_ns();
        Ok(())
    })
}

/// Hex SHA-256 over all telemetry delivered so far. Free with `twin_string_free`.
///
/// # Safety
/// `s` must be a live session handle; `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn twin_session_telemetry_hash(s: *mut TwinSession, out: *mut *mut c_char) -> TwinStatus {
    guard(|| {
        let h = unsafe { handle(s) }?;
        give_string(h.session.telemetry_hash(), out)
    })
}

/// Rounds `angle` (radians) to the nearest multiple of `step`. Returns NaN
/// for a non-positive or non-finite step.
#[unsafe(no_mangle)]
pub extern "C" fn twin_quantize_joint(angle: f64, step: f64) -> f64 {
    if !(step.is_finite() && step > 0.0) {
        return f64::NAN;
    }
    quantize_joint(angle, step)
}
