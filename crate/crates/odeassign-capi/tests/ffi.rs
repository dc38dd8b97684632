//! Drives the C entry points the way a foreign binding would: everything
//! goes through the extern "C" functions with C strings, statuses, and
//! explicit frees; nothing reaches into the underlying crate except to
//! cross-check results.

use std::ffi::{c_char, CStr, CString};
use std::ptr;

use odeassign_capi::{
    odeassign_ilp_solve, odeassign_last_error, odeassign_run_evaluate, odeassign_run_free,
    odeassign_run_generate, odeassign_run_new, odeassign_run_resolved, odeassign_run_set,
    odeassign_run_train, odeassign_string_free, odeassign_version, OdeassignRun, OdeassignStatus,
};

fn last_error() -> String {
    unsafe { CStr::from_ptr(odeassign_last_error()) }
        .to_string_lossy()
        .into_owned()
}

/// Copies and frees a string the library handed out.
fn take_string(p: *mut c_char) -> String {
    assert!(!p.is_null(), "expected an output string");
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned();
    unsafe { odeassign_string_free(p) };
    s
}

struct Run(*mut OdeassignRun);

impl Run {
    fn new(config: Option<&str>) -> Run {
        let text = config.map(|s| CString::new(s).unwrap());
        let text_ptr = text.as_ref().map_or(ptr::null(), |c| c.as_ptr());
        let mut out = ptr::null_mut();
        let status = unsafe { odeassign_run_new(text_ptr, &mut out) };
        assert_eq!(status, OdeassignStatus::Ok, "run_new: {}", last_error());
        Run(out)
    }

    fn try_set(&self, key: &str, value: &str) -> OdeassignStatus {
        let k = CString::new(key).unwrap();
        let v = CString::new(value).unwrap();
        unsafe { odeassign_run_set(self.0, k.as_ptr(), v.as_ptr()) }
    }

    fn set(&self, key: &str, value: &str) {
        let status = self.try_set(key, value);
        assert_eq!(
            status,
            OdeassignStatus::Ok,
            "set {key}={value}: {}",
            last_error()
        );
    }

    fn resolved(&self) -> String {
        let mut out = ptr::null_mut();
        let status = unsafe { odeassign_run_resolved(self.0, &mut out) };
        assert_eq!(status, OdeassignStatus::Ok, "resolved: {}", last_error());
        take_string(out)
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        unsafe { odeassign_run_free(self.0) };
    }
}

fn solve(problem_json: &str) -> (OdeassignStatus, Option<String>) {
    let text = CString::new(problem_json).unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { odeassign_ilp_solve(text.as_ptr(), &mut out) };
    let solution = (status == OdeassignStatus::Ok).then(|| take_string(out));
    (status, solution)
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(odeassign_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn defaults_resolve_and_round_trip() {
    let run = Run::new(None);
    let text = run.resolved();
    assert!(text.contains("n_scenes = 500"));
    assert!(text.contains("grad_path = discretize"));

    // Feeding the resolved text back in must describe the identical run.
    let reparsed = Run::new(Some(&text));
    assert_eq!(reparsed.resolved(), text);
}

#[test]
fn set_updates_the_configuration() {
    let run = Run::new(None);
    run.set("lr", "0.5");
    run.set("checkpoint", "ckpt/last");
    let text = run.resolved();
    assert!(text.contains("lr = 0.5"), "{text}");
    assert!(text.contains("checkpoint = ckpt/last"), "{text}");
}

#[test]
fn set_rejects_unknown_keys_and_bad_values() {
    let run = Run::new(None);

    let status = run.try_set("learning_rate", "0.5");
    assert_eq!(status, OdeassignStatus::Parse);
    assert!(
        last_error().contains("learning_rate"),
        "message should name the key: {}",
        last_error()
    );

    let status = run.try_set("epochs", "three");
    assert_eq!(status, OdeassignStatus::Parse);
    assert!(!last_error().is_empty());
}

#[test]
fn malformed_config_text_is_a_parse_error() {
    let text = CString::new("epochs piled high").unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { odeassign_run_new(text.as_ptr(), &mut out) };
    assert_eq!(status, OdeassignStatus::Parse);
    assert!(out.is_null() || { unsafe { odeassign_run_free(out) }; true });
}

#[test]
fn null_arguments_are_reported_not_crashed() {
    let mut out: *mut OdeassignRun = ptr::null_mut();
    assert_eq!(
        unsafe { odeassign_run_new(ptr::null(), ptr::null_mut()) },
        OdeassignStatus::NullArgument
    );
    assert_eq!(
        unsafe { odeassign_run_set(ptr::null_mut(), ptr::null(), ptr::null()) },
        OdeassignStatus::NullArgument
    );
    assert_eq!(
        unsafe { odeassign_ilp_solve(ptr::null(), ptr::null_mut()) },
        OdeassignStatus::NullArgument
    );
    assert!(last_error().contains("null"));
    // Frees of null are harmless no-ops.
    unsafe { odeassign_run_free(ptr::null_mut()) };
    unsafe { odeassign_string_free(ptr::null_mut()) };
    // Keep the unused binding exercised so the happy path above stays honest.
    assert_eq!(unsafe { odeassign_run_new(ptr::null(), &mut out) }, OdeassignStatus::Ok);
    unsafe { odeassign_run_free(out) };
}

#[test]
fn invalid_utf8_is_reported() {
    let bad = [0xffu8, 0xfe, 0x00];
    let mut out = ptr::null_mut();
    let status =
        unsafe { odeassign_ilp_solve(bad.as_ptr() as *const c_char, &mut out) };
    assert_eq!(status, OdeassignStatus::Utf8);
}

#[test]
fn ilp_solve_round_trips_json() {
    let problem = r#"{
        "n_nodes": 2,
        "n_labels": 2,
        "alpha": [3.0, 0.0, 0.0, 2.0],
        "beta": [[0, 1, 0, 1, 4.0]],
        "w": 1.0,
        "per_node_cap": 1
    }"#;
    let (status, solution) = solve(problem);
    assert_eq!(status, OdeassignStatus::Ok, "{}", last_error());
    let solution: serde_json::Value = serde_json::from_str(&solution.unwrap()).unwrap();
    assert_eq!(solution["chosen"], serde_json::json!([[0], [1]]));
    // alpha(0,0) + alpha(1,1) + w * beta = 3 + 2 + 4
    assert_eq!(solution["objective"], serde_json::json!(9.0));
}

#[test]
fn ilp_solve_rejects_malformed_and_infeasible_input() {
    let (status, _) = solve("{ not json");
    assert_eq!(status, OdeassignStatus::Parse);
    assert!(!last_error().is_empty());

    // Structurally valid JSON, structurally invalid problem.
    let (status, _) = solve(
        r#"{"n_nodes": 1, "n_labels": 2, "alpha": [1.0], "beta": [], "w": 0.0, "per_node_cap": 1}"#,
    );
    assert_eq!(status, OdeassignStatus::Config, "{}", last_error());
}

/// One tiny end-to-end pass through the handle API: configure, generate,
/// train, evaluate, all in a scratch directory.
#[test]
fn generate_train_evaluate_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let run = Run::new(None);
    for (key, value) in [
        ("n_obj_labels", "4"),
        ("n_pred_labels", "3"),
        ("feat_dim", "4"),
        ("objects_min", "2"),
        ("objects_max", "3"),
        ("task_seed", "11"),
        ("n_scenes", "12"),
        ("split", "0.5,0.25,0.25"),
        ("epochs", "1"),
        ("batch_size", "4"),
        ("lr", "0.005"),
        ("train_seed", "3"),
        ("obj_state", "6"),
        ("pair_state", "6"),
        ("embed_dim", "3"),
        ("pred_hidden", "5"),
        ("preproc_width", "3"),
        ("ode_hidden", "5"),
    ] {
        run.set(key, value);
    }
    run.set("dataset", root.join("dataset").to_str().unwrap());
    run.set("out", root.join("out").to_str().unwrap());

    let mut manifest_out = ptr::null_mut();
    let status = unsafe { odeassign_run_generate(run.0, &mut manifest_out) };
    assert_eq!(status, OdeassignStatus::Ok, "generate: {}", last_error());
    let manifest: serde_json::Value =
        serde_json::from_str(&take_string(manifest_out)).unwrap();
    assert_eq!(manifest["n_scenes"], serde_json::json!(12));
    assert_eq!(manifest["split_sizes"], serde_json::json!([6, 3, 3]));

    let mut final_epoch = u64::MAX;
    let status = unsafe { odeassign_run_train(run.0, &mut final_epoch) };
    assert_eq!(status, OdeassignStatus::Ok, "train: {}", last_error());
    assert_eq!(final_epoch, 1);
    assert!(root.join("out/train_log.csv").is_file());
    assert!(root.join("out/checkpoints/last/params.bin").is_file());
    assert!(root.join("out/config.resolved").is_file());

    // Evaluating needs the checkpoint key; before it is set the call fails
    // with a configuration error rather than a crash.
    let setting = CString::new("sgcls").unwrap();
    let mut report_out = ptr::null_mut();
    let status = unsafe { odeassign_run_evaluate(run.0, setting.as_ptr(), &mut report_out) };
    assert_eq!(status, OdeassignStatus::Config);
    assert!(last_error().contains("checkpoint"));

    run.set(
        "checkpoint",
        root.join("out/checkpoints/last").to_str().unwrap(),
    );
    let status = unsafe { odeassign_run_evaluate(run.0, setting.as_ptr(), &mut report_out) };
    assert_eq!(status, OdeassignStatus::Ok, "evaluate: {}", last_error());
    let report: serde_json::Value = serde_json::from_str(&take_string(report_out)).unwrap();
    assert_eq!(report["setting"], serde_json::json!("sgcls"));
    assert_eq!(report["n_scenes"], serde_json::json!(3));
    for k in ["20", "50", "100"] {
        assert!(
            report["recall"][k].is_number(),
            "recall@{k} missing: {report}"
        );
    }
    assert!(root.join("out/report_sgcls.json").is_file());

    // An unknown setting name is a parse error, not a crash.
    let bogus = CString::new("sgdet").unwrap();
    let status =
        unsafe { odeassign_run_evaluate(run.0, bogus.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, OdeassignStatus::Parse);
}
