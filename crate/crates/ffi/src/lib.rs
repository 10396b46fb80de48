//! C ABI over the deepmon library.
//!
//! Objects cross the boundary as opaque handles created by `*_load` and
//! released by the matching `*_free`. Every fallible call returns a
//! `DeepmonStatus`; on failure `deepmon_last_error` describes the cause.
//! Strings returned through out-parameters are owned by the caller and
//! must be released with `deepmon_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use deepmon::goalnet::{infer_topk, GoalNetParams};
use deepmon::harness::{run_trial, LoadedScenario, Mode};
use deepmon::monitor::MonitorConfig;
use deepmon::pddl::PlanLibrary;
use deepmon::planner::{self, PlanOptions};
use deepmon::symbolic::State;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepmonStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    LoadFailed = 3,
    NotFound = 4,
    InvalidInput = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeepmonMode {
    Kn = 0,
    M = 1,
    GPr = 2,
}

/// Opaque plan library.
pub struct DeepmonLibrary(PlanLibrary);

/// Opaque scenario with its library.
pub struct DeepmonScenario(LoadedScenario);

/// Opaque trained goal predictor.
pub struct DeepmonPredictor(GoalNetParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

type Res<T> = Result<T, (DeepmonStatus, String)>;

fn guard(f: impl FnOnce() -> Res<()>) -> DeepmonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DeepmonStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            DeepmonStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Res<&'a str> {
    if p.is_null() {
        return Err((DeepmonStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (DeepmonStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Res<&'a T> {
    p.as_ref().ok_or((DeepmonStatus::NullArgument, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Res<()> {
    if p.is_null() {
        Err((DeepmonStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn load_err(e: impl std::fmt::Display) -> (DeepmonStatus, String) {
    (DeepmonStatus::LoadFailed, e.to_string())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn deepmon_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn deepmon_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn deepmon_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a plan library manifest.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_library_load(path: *const c_char, out: *mut *mut DeepmonLibrary) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = text(path, "path")?;
        let lib = PlanLibrary::load(path).map_err(load_err)?;
        *out = Box::into_raw(Box::new(DeepmonLibrary(lib)));
        Ok(())
    })
}

/// # Safety
/// `lib` must come from `deepmon_library_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn deepmon_library_free(lib: *mut DeepmonLibrary) {
    if !lib.is_null() {
        drop(Box::from_raw(lib));
    }
}

/// Number of entries in the library.
///
/// # Safety
/// `lib` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_library_len(lib: *const DeepmonLibrary, out: *mut usize) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        *out = handle(lib, "lib")?.0.entries.len();
        Ok(())
    })
}

/// Solves one entry; writes the actions, one per line.
///
/// # Safety
/// `lib` must be a live handle, `entry` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_plan(
    lib: *const DeepmonLibrary,
    entry: *const c_char,
    out: *mut *mut c_char,
) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let lib = &handle(lib, "lib")?.0;
        let name = text(entry, "entry")?;
        let e = lib.entry(name).ok_or_else(|| (DeepmonStatus::NotFound, format!("no entry `{name}`")))?;
        let p = planner::plan(e, &PlanOptions::default()).map_err(|e| (DeepmonStatus::InvalidInput, e.to_string()))?;
        let lines: String = p.steps.iter().map(|s| format!("{s}\n")).collect();
        *out = c_string(lines);
        Ok(())
    })
}

/// Best-matching library entry for a goal state written as
/// `Atom(a, b); Atom(c)`. Writes the entry name.
///
/// # Safety
/// `lib` must be a live handle, `goal` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_match(
    lib: *const DeepmonLibrary,
    goal: *const c_char,
    out: *mut *mut c_char,
) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let lib = &handle(lib, "lib")?.0;
        let g = State::parse(text(goal, "goal")?).map_err(|e| (DeepmonStatus::InvalidInput, e.to_string()))?;
        let m = planner::match_plan(lib, &g).map_err(|e| (DeepmonStatus::NotFound, e.to_string()))?;
        *out = c_string(m.entry);
        Ok(())
    })
}

/// Loads a trained predictor checkpoint for the library's vocabulary.
///
/// # Safety
/// `lib` must be a live handle, `path` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_predictor_load(
    lib: *const DeepmonLibrary,
    path: *const c_char,
    out: *mut *mut DeepmonPredictor,
) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let lib = &handle(lib, "lib")?.0;
        let params = GoalNetParams::load(text(path, "path")?, &lib.vocab).map_err(load_err)?;
        *out = Box::into_raw(Box::new(DeepmonPredictor(params)));
        Ok(())
    })
}

/// # Safety
/// `net` must come from `deepmon_predictor_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn deepmon_predictor_free(net: *mut DeepmonPredictor) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Top-`k` next goals for a task and state, as a JSON array of
/// `{"rank", "log_prob", "goal": [atoms]}` objects.
///
/// # Safety
/// Handles must be live, strings nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_predict(
    net: *const DeepmonPredictor,
    lib: *const DeepmonLibrary,
    task: *const c_char,
    state: *const c_char,
    k: usize,
    out: *mut *mut c_char,
) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let net = &handle(net, "net")?.0;
        let lib = &handle(lib, "lib")?.0;
        let id = text(task, "task")?;
        let task = lib.vocab.task(id).ok_or_else(|| (DeepmonStatus::NotFound, format!("unknown task `{id}`")))?;
        let s = State::parse(text(state, "state")?).map_err(|e| (DeepmonStatus::InvalidInput, e.to_string()))?;
        let props = infer_topk(task, &s, net, &lib.vocab, k).map_err(|e| (DeepmonStatus::InvalidInput, e.to_string()))?;
        let json: Vec<_> = props
            .iter()
            .map(|p| serde_json::json!({"rank": p.rank, "log_prob": p.log_prob, "goal": p.goal.to_strings()}))
            .collect();
        *out = c_string(serde_json::Value::from(json).to_string());
        Ok(())
    })
}

/// Loads a scenario file and everything it references.
///
/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_scenario_load(path: *const c_char, out: *mut *mut DeepmonScenario) -> DeepmonStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let sc = LoadedScenario::load(text(path, "path")?).map_err(load_err)?;
        *out = Box::into_raw(Box::new(DeepmonScenario(sc)));
        Ok(())
    })
}

/// # Safety
/// `sc` must come from `deepmon_scenario_load` and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn deepmon_scenario_free(sc: *mut DeepmonScenario) {
    if !sc.is_null() {
        drop(Box::from_raw(sc));
    }
}

/// Runs one trial with the default monitor configuration. `net` may be
/// null except in `DEEPMON_MODE_G_PR`. Writes 1 or 0 to `success` and, if
/// `trace` is not null, the JSON-lines trace.
///
/// # Safety
/// Handles must be live; `success` writable; `trace` null or writable.
#[no_mangle]
pub unsafe extern "C" fn deepmon_run_trial(
    sc: *const DeepmonScenario,
    mode: DeepmonMode,
    net: *const DeepmonPredictor,
    seed: u64,
    success: *mut i32,
    trace: *mut *mut c_char,
) -> DeepmonStatus {
    guard(|| {
        out_ptr(success, "success")?;
        let sc = &handle(sc, "scenario")?.0;
        let mode = match mode {
            DeepmonMode::Kn => Mode::Kn,
            DeepmonMode::M => Mode::M,
            DeepmonMode::GPr => Mode::GPr,
        };
        let net = net.as_ref().map(|n| &n.0);
        if mode == Mode::GPr && net.is_none() {
            return Err((DeepmonStatus::NullArgument, "GPr mode needs a predictor".into()));
        }
        let t = run_trial(sc, mode, net, &MonitorConfig::default(), seed);
        *success = t.success as i32;
        if !trace.is_null() {
            *trace = c_string(t.trace.to_jsonl());
        }
        Ok(())
    })
}

