//! C interface over the assignment engine: opaque run handles configured by
//! the same flat key/value text the CLI reads, plus a string-in/string-out
//! exact solver for callers that only want assignments.
//!
//! Conventions, in the order a binding author needs them:
//!
//! * Every function returns an [`OdeassignStatus`]; `ODEASSIGN_STATUS_OK`
//!   is zero. On any failure the thread-local message retrieved by
//!   [`odeassign_last_error`] describes what went wrong, and stays valid
//!   until the next call from the same thread.
//! * Strings handed out through `char **` parameters are owned by the
//!   caller and must be released with [`odeassign_string_free`]; strings
//!   returned as `const char *` are borrowed and must not be freed.
//! * A run handle is a mutable configuration plus nothing else: operations
//!   read and write the dataset, checkpoint, and output directories named
//!   in the configuration, exactly like the CLI, and every operation writes
//!   `config.resolved` into its output directory.
//! * No function is re-entrant on the same handle; handles are cheap, so
//!   give each thread its own.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};

use odeassign::ilp::{solve_exact, AssignmentProblem};
use odeassign::odesolve::fmt_f64;
use odeassign::pipeline::{
    evaluate, load_checkpoint, model_init, save_checkpoint, train_with, Setting, TrainState,
};
use odeassign::runcfg::RunConfig;
use odeassign::taskgen::{gen_dataset, load_dataset, write_dataset};
use odeassign::Error;

/// Result of every call. Zero is success; anything else is an error whose
/// message [`odeassign_last_error`] returns.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeassignStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// Input text (config, problem JSON, setting name) failed to parse.
    Parse = 3,
    /// The configuration or problem is structurally invalid.
    Config = 4,
    /// Numerical failure: non-finite values, step-size underflow, step
    /// budget exhausted, or training divergence.
    Numeric = 5,
    /// A file could not be read or written.
    Io = 6,
    /// An internal invariant failed; the library caught the panic at the
    /// boundary instead of unwinding into the caller.
    Panic = 7,
}

/// An opaque, mutable run configuration. Create with [`odeassign_run_new`],
/// adjust with [`odeassign_run_set`], destroy with [`odeassign_run_free`].
pub struct OdeassignRun {
    cfg: RunConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn status_of(e: &Error) -> OdeassignStatus {
    match e {
        Error::Parse { .. } => OdeassignStatus::Parse,
        Error::Config(_) | Error::Infeasible(_) => OdeassignStatus::Config,
        Error::Io { .. } => OdeassignStatus::Io,
        _ => OdeassignStatus::Numeric,
    }
}

fn fail(e: &Error) -> OdeassignStatus {
    set_error(&e.to_string());
    status_of(e)
}

/// Run `body` with a panic trap so no unwind crosses the C boundary.
fn guarded(body: impl FnOnce() -> OdeassignStatus) -> OdeassignStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic; the handle may be in an inconsistent state");
            OdeassignStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point at a NUL-terminated string.
unsafe fn arg_str<'a>(name: &str, p: *const c_char) -> Result<&'a str, OdeassignStatus> {
    if p.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(OdeassignStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        OdeassignStatus::Utf8
    })
}

fn give_string(text: String, out: *mut *mut c_char) -> OdeassignStatus {
    match CString::new(text.replace('\0', " ")) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            OdeassignStatus::Ok
        }
        Err(_) => {
            set_error("output string could not be represented");
            OdeassignStatus::Panic
        }
    }
}

/// The library version as a borrowed, static string.
#[no_mangle]
pub extern "C" fn odeassign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// The message of the most recent failure on this thread. Borrowed; valid
/// until the next library call from the same thread. Empty before any
/// failure.
#[no_mangle]
pub extern "C" fn odeassign_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a run handle. `config_text` may be null (defaults) or hold the
/// same `key = value` lines a config file would.
///
/// # Safety
/// `config_text` must be null or NUL-terminated; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_new(
    config_text: *const c_char,
    out: *mut *mut OdeassignRun,
) -> OdeassignStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out must not be null");
            return OdeassignStatus::NullArgument;
        }
        let cfg = if config_text.is_null() {
            RunConfig::default()
        } else {
            let text = match arg_str("config_text", config_text) {
                Ok(t) => t,
                Err(status) => return status,
            };
            match text.parse::<RunConfig>() {
                Ok(cfg) => cfg,
                Err(e) => return fail(&e),
            }
        };
        *out = Box::into_raw(Box::new(OdeassignRun { cfg }));
        OdeassignStatus::Ok
    })
}

/// Destroy a handle from [`odeassign_run_new`]. Null is ignored.
///
/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_free(run: *mut OdeassignRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

macro_rules! deref_run {
    ($run:expr) => {
        match $run.as_ref() {
            Some(r) => r,
            None => {
                set_error("run must not be null");
                return OdeassignStatus::NullArgument;
            }
        }
    };
}

/// Assign one configuration key, e.g. `("lr", "0.0001")`. Keys and value
/// spellings match the config file format exactly.
///
/// # Safety
/// `run` must be a live handle; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_set(
    run: *mut OdeassignRun,
    key: *const c_char,
    value: *const c_char,
) -> OdeassignStatus {
    guarded(|| {
        let run = match run.as_mut() {
            Some(r) => r,
            None => {
                set_error("run must not be null");
                return OdeassignStatus::NullArgument;
            }
        };
        let key = match arg_str("key", key) {
            Ok(k) => k,
            Err(s) => return s,
        };
        let value = match arg_str("value", value) {
            Ok(v) => v,
            Err(s) => return s,
        };
        match run.cfg.apply_kv(key, value) {
            Ok(()) => OdeassignStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// The handle's complete configuration as config-file text (caller frees).
///
/// # Safety
/// `run` must be a live handle; `out` must be valid to receive the string.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_resolved(
    run: *const OdeassignRun,
    out: *mut *mut c_char,
) -> OdeassignStatus {
    guarded(|| {
        let run = deref_run!(run);
        if out.is_null() {
            set_error("out must not be null");
            return OdeassignStatus::NullArgument;
        }
        give_string(run.cfg.resolved_text(), out)
    })
}

/// Generate the dataset described by the configuration into its `dataset`
/// directory. On success, `out_manifest_json` (if non-null) receives the
/// manifest as JSON (caller frees).
///
/// # Safety
/// `run` must be a live handle; `out_manifest_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_generate(
    run: *const OdeassignRun,
    out_manifest_json: *mut *mut c_char,
) -> OdeassignStatus {
    guarded(|| {
        let run = deref_run!(run);
        let cfg = &run.cfg;
        if let Err(e) = cfg.validate() {
            return fail(&e);
        }
        let ds = match gen_dataset(&cfg.task, cfg.n_scenes, cfg.split) {
            Ok(ds) => ds,
            Err(e) => return fail(&e),
        };
        let manifest = match write_dataset(&cfg.dataset, &ds, &cfg.task) {
            Ok(m) => m,
            Err(e) => return fail(&e),
        };
        if let Err(e) = cfg.write_resolved(&cfg.out) {
            return fail(&e);
        }
        if out_manifest_json.is_null() {
            return OdeassignStatus::Ok;
        }
        match serde_json::to_string_pretty(&manifest) {
            Ok(json) => give_string(json, out_manifest_json),
            Err(e) => {
                set_error(&format!("manifest serialization failed: {e}"));
                OdeassignStatus::Panic
            }
        }
    })
}

fn train_body(cfg: &RunConfig, out_final_epoch: *mut u64) -> Result<(), Error> {
    let (ds, manifest) = load_dataset(&cfg.dataset)?;
    if manifest.config != cfg.task {
        return Err(Error::config(
            "dataset was generated with different task keys than this configuration",
        ));
    }
    cfg.write_resolved(&cfg.out)?;

    let (mut state, resumed) = match &cfg.checkpoint {
        Some(dir) => {
            let (state, stored) = load_checkpoint(dir)?;
            let mut stored_rest = stored;
            stored_rest.epochs = cfg.train.epochs;
            if stored_rest != cfg.train {
                return Err(Error::config(
                    "checkpoint was trained under different settings; \
                     only the epochs key may change on resume",
                ));
            }
            (state, true)
        }
        None => (TrainState::new(model_init(&cfg.task, &cfg.train)?), false),
    };

    let log_path = cfg.out.join("train_log.csv");
    let mut log: Box<dyn std::io::Write> = if resumed && log_path.exists() {
        Box::new(
            fs::OpenOptions::new()
                .append(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?,
        )
    } else {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "epoch,train_loss,val_obj_acc,val_recall50,nfe_mean")
            .map_err(|e| Error::io(&log_path, e))?;
        Box::new(f)
    };

    let ckpt_dir = cfg.out.join("checkpoints").join("last");
    let tc = cfg.train.clone();
    train_with(&mut state, &ds, &tc, |st, row| {
        writeln!(
            log,
            "{},{},{},{},{}",
            row.epoch,
            fmt_f64(row.train_loss),
            fmt_f64(row.val_obj_acc),
            fmt_f64(row.val_recall50),
            fmt_f64(row.nfe_mean)
        )
        .map_err(|e| Error::io(&log_path, e))?;
        save_checkpoint(&ckpt_dir, st, &tc)
    })?;
    if state.epoch == 0 {
        save_checkpoint(&ckpt_dir, &state, &tc)?;
    }
    if !out_final_epoch.is_null() {
        unsafe { *out_final_epoch = state.epoch as u64 };
    }
    Ok(())
}

/// Train per the configuration: reads the dataset directory, resumes from
/// `checkpoint` when set, writes `train_log.csv` and `checkpoints/last`
/// under the output directory. `out_final_epoch` (if non-null) receives the
/// epoch count reached.
///
/// # Safety
/// `run` must be a live handle; `out_final_epoch` may be null.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_train(
    run: *const OdeassignRun,
    out_final_epoch: *mut u64,
) -> OdeassignStatus {
    guarded(|| {
        let run = deref_run!(run);
        if let Err(e) = run.cfg.validate() {
            return fail(&e);
        }
        match train_body(&run.cfg, out_final_epoch) {
            Ok(()) => OdeassignStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

fn evaluate_body(cfg: &RunConfig, setting: Setting) -> Result<String, Error> {
    let (ds, manifest) = load_dataset(&cfg.dataset)?;
    if manifest.config != cfg.task {
        return Err(Error::config(
            "dataset was generated with different task keys than this configuration",
        ));
    }
    let ckpt = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::config("evaluation needs the checkpoint key"))?;
    let (state, _) = load_checkpoint(ckpt)?;
    let scenes = cfg.eval_split.of(&ds);
    let report = evaluate(&state.model, scenes, setting, &cfg.train.solver)?;
    cfg.write_resolved(&cfg.out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::parse("report", e.to_string()))?;
    let path = cfg.out.join(format!("report_{setting}.json"));
    fs::write(&path, format!("{json}\n")).map_err(|e| Error::io(&path, e))?;
    Ok(json)
}

/// Evaluate the configured checkpoint on the configured split. `setting` is
/// `"predcls"` or `"sgcls"`. Writes `report_<setting>.json` under the
/// output directory and (if `out_report_json` is non-null) returns the same
/// JSON (caller frees).
///
/// # Safety
/// `run` must be a live handle; `setting` must be NUL-terminated;
/// `out_report_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn odeassign_run_evaluate(
    run: *const OdeassignRun,
    setting: *const c_char,
    out_report_json: *mut *mut c_char,
) -> OdeassignStatus {
    guarded(|| {
        let run = deref_run!(run);
        let setting = match arg_str("setting", setting) {
            Ok(s) => s,
            Err(status) => return status,
        };
        let setting: Setting = match setting.parse() {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        if let Err(e) = run.cfg.validate() {
            return fail(&e);
        }
        match evaluate_body(&run.cfg, setting) {
            Ok(json) => {
                if out_report_json.is_null() {
                    OdeassignStatus::Ok
                } else {
                    give_string(json, out_report_json)
                }
            }
            Err(e) => fail(&e),
        }
    })
}

/// Solve one assignment problem exactly. `problem_json` and the returned
/// string use the same JSON schema as the CLI's `ilp` subcommand: the
/// problem carries node/label counts, a row-major unary score table, sparse
/// `[u, v, l_u, l_v, score]` pairwise entries, the pairwise weight, and the
/// per-node cap; the solution carries the chosen label sets and the
/// objective. Caller frees the output via [`odeassign_string_free`].
///
/// # Safety
/// `problem_json` must be NUL-terminated; `out_solution_json` must be valid
/// to receive the string.
#[no_mangle]
pub unsafe extern "C" fn odeassign_ilp_solve(
    problem_json: *const c_char,
    out_solution_json: *mut *mut c_char,
) -> OdeassignStatus {
    guarded(|| {
        let text = match arg_str("problem_json", problem_json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out_solution_json.is_null() {
            set_error("out_solution_json must not be null");
            return OdeassignStatus::NullArgument;
        }
        let problem: AssignmentProblem = match serde_json::from_str(text) {
            Ok(p) => p,
            Err(e) => {
                set_error(&format!("problem JSON: {e}"));
                return OdeassignStatus::Parse;
            }
        };
        let solution = match solve_exact(&problem) {
            Ok(s) => s,
            Err(e) => return fail(&e),
        };
        match serde_json::to_string(&solution) {
            Ok(json) => give_string(json, out_solution_json),
            Err(e) => {
                set_error(&format!("solution serialization failed: {e}"));
                OdeassignStatus::Panic
            }
        }
    })
}

/// Release a string previously handed out through a `char **` parameter.
/// Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn odeassign_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
