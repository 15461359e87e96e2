use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use autoshard_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(autoshard_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn derive_rewrite_verify_round_trip() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(
            autoshard_graph_transformer(2, 16, 2, &mut g),
            AutoshardStatus::Ok
        );
        assert!(autoshard_graph_node_count(g) > 0);

        let mut plan = ptr::null_mut();
        let status = autoshard_plan_derive(g, ptr::null(), 1, 4, 2, 1, &mut plan);
        assert_eq!(status, AutoshardStatus::Ok, "{}", last_error());
        assert!(autoshard_plan_total_cost(plan) >= 0.0);

        let mut json = ptr::null_mut();
        assert_eq!(
            autoshard_plan_report_json(plan, &mut json),
            AutoshardStatus::Ok
        );
        let report: serde_json::Value =
            serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert_eq!(report["mesh"]["devices"], 4);
        autoshard_string_free(json);

        let mut pg = ptr::null_mut();
        assert_eq!(autoshard_rewrite(g, plan, &mut pg), AutoshardStatus::Ok);
        assert_eq!(autoshard_parallel_device_count(pg), 4);

        let (mut passed, mut worst) = (false, f64::NAN);
        let status = autoshard_verify(g, pg, 2, 0.0, 7, &mut passed, &mut worst);
        assert_eq!(status, AutoshardStatus::Ok, "{}", last_error());
        assert!(passed, "worst error {worst}");

        autoshard_parallel_free(pg);
        autoshard_plan_free(plan);
        autoshard_graph_free(g);
    }
}

#[test]
fn plan_derive_matches_library_split_count() {
    let lib = autoshard::ir::gen_transformer_stack(2, 16, 2).unwrap();
    let grouped = autoshard::ir::trim_and_group(&lib).unwrap();
    let mesh = autoshard::cost::ClusterSpec::new(1, 2);
    let want = autoshard::search::derive_plan(&grouped, &mesh, 2, &Default::default())
        .unwrap()
        .assignments
        .values()
        .filter(|s| s.is_split())
        .count();
    unsafe {
        let mut g = ptr::null_mut();
        autoshard_graph_transformer(2, 16, 2, &mut g);
        let mut plan = ptr::null_mut();
        autoshard_plan_derive(g, ptr::null(), 1, 2, 2, 0, &mut plan);
        assert_eq!(autoshard_plan_split_count(plan), want);
        autoshard_plan_free(plan);
        autoshard_graph_free(g);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut g = ptr::null_mut();
        let bad = CString::new("{not json").unwrap();
        assert_eq!(
            autoshard_graph_from_json(bad.as_ptr(), &mut g),
            AutoshardStatus::Parse
        );
        assert!(g.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(
            autoshard_graph_from_json(ptr::null(), &mut g),
            AutoshardStatus::NullArgument
        );

        autoshard_graph_transformer(2, 16, 2, &mut g);
        let mut plan = ptr::null_mut();
        assert_eq!(
            autoshard_plan_derive(g, ptr::null(), 0, 4, 2, 1, &mut plan),
            AutoshardStatus::Config
        );
        let cluster = CString::new(r#"{"m":1,"n":1,"bogus":1}"#).unwrap();
        assert_eq!(
            autoshard_plan_derive(g, cluster.as_ptr(), 1, 2, 2, 1, &mut plan),
            AutoshardStatus::Config
        );
        assert!(plan.is_null());
        autoshard_graph_free(g);
    }
}

#[test]
fn json_graph_loads() {
    let doc = autoshard::ir::save_graph(&autoshard::ir::gen_wide_classifier(8, 4).unwrap());
    let c = CString::new(doc).unwrap();
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(
            autoshard_graph_from_json(c.as_ptr(), &mut g),
            AutoshardStatus::Ok
        );
        assert!(autoshard_graph_node_count(g) > 0);
        autoshard_graph_free(g);
    }
}

#[test]
fn null_handles_are_harmless() {
    unsafe {
        autoshard_graph_free(ptr::null_mut());
        autoshard_plan_free(ptr::null_mut());
        autoshard_parallel_free(ptr::null_mut());
        autoshard_string_free(ptr::null_mut());
        assert_eq!(autoshard_graph_node_count(ptr::null()), 0);
        assert!(autoshard_plan_total_cost(ptr::null()).is_nan());
    }
    let v = unsafe { CStr::from_ptr(autoshard_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/autoshard.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "autoshard_graph_transformer",
        "autoshard_plan_derive",
        "autoshard_rewrite",
        "autoshard_verify",
        "AUTOSHARD_STATUS_OK",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"autoshard.h\"\nint main(void) { AutoshardGraph *g = 0; \
         return autoshard_graph_transformer(2, 16, 2, &g) == AUTOSHARD_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler; header syntax not checked");
        return;
    };
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
