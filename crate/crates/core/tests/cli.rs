use std::path::Path;
use std::process::Command;

use bnnq::cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use bnnq::graph::ExecMode;
use bnnq::model_io::load_model_file;

const ROOT: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/");

fn fixture(name: &str) -> String {
    format!("{ROOT}{name}")
}

fn model() -> String {
    fixture("toy-digits-float.zbnn")
}

fn images() -> String {
    fixture("digits-test-images.idx3-ubyte")
}

fn labels() -> String {
    fixture("digits-test-labels.idx1-ubyte")
}

fn call(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("bnnq").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn transform_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let z = path(dir.path(), "z.zbnn");
    let (code, out, _) = call(&["transform", "--model", &model(), "--bits", "16", "--out", &z]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("seed: 0\n"));
    assert!(out.contains("eliminated 14 Q/D nodes"));
    assert_eq!(load_model_file(&z).unwrap().mode(), ExecMode::ZeroOverhead);

    let (code, out, _) = call(&["infer", "--model", &z, "--images", &images(), "--labels", &labels(), "--limit", "100"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("(100 images)"));

    let c = path(dir.path(), "c.zbnn");
    assert_eq!(call(&["transform", "--model", &model(), "--bits", "8", "--out", &c, "--conventional"]).0, EXIT_OK);
    let g = load_model_file(&c).unwrap();
    assert_eq!((g.mode(), g.node_count()), (ExecMode::Conventional, 28));
}

#[test]
fn inject_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = |name| {
        let p = path(dir.path(), name);
        let (code, text, _) = call(&["inject", "--model", &model(), "--rate", "1e-3", "--seed", "4", "--trial", "2", "--target", "kind:bn", "--out", &p]);
        assert_eq!(code, EXIT_OK);
        assert!(text.starts_with("seed: 4\n"));
        std::fs::read(p).unwrap()
    };
    let a = out("a.zbnn");
    assert_eq!(a, out("b.zbnn"));
    assert_ne!(a, std::fs::read(model()).unwrap());
}

#[test]
fn sweep_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "r.csv");
    let base = ["sweep", "--model", &model(), "--images", &images(), "--labels", &labels(), "--trials", "4", "--eval", "32", "--seed", "3"];
    let mut args = base.to_vec();
    args.extend(["--rates", "1e-4,1e-3", "--variants", "float,zobnn", "--report", &csv]);
    let (code, out, err) = call(&args);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.starts_with("seed: 3\n"));
    let text = std::fs::read_to_string(&csv).unwrap();
    // 2 variants x 2 rates x (4 trials + 1 aggregate) + header
    assert_eq!(text.lines().count(), 21);
    assert!(text.lines().any(|l| l.starts_with("zobnn-acc-all,0.001,aggregate,")));

    let json = path(dir.path(), "r.json");
    let mut args = base.to_vec();
    args.extend(["--metric", "dev", "--target", "bn2", "--report", &json, "--format", "json", "--rates", "1e-3", "--workers", "2"]);
    assert_eq!(call(&args).0, EXIT_OK);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
    assert_eq!(v[0]["experiment"], "zobnn-dev-bn2");
    assert_eq!(v[0]["trials"], 4);
}

#[test]
fn footprint_lists_every_width_for_float_models() {
    let (code, out, _) = call(&["footprint", "--model", &model()]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("total         188160 bits"));
    assert!(out.contains("zobnn-16     99840 bits"));
    assert!(out.contains("zobnn-8      55680 bits"));
}

#[test]
fn bench_and_selftest_run() {
    let (code, out, err) = call(&["bench", "--model", &model(), "--repeats", "20"]);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("zobnn        nodes=14"));
    assert!(out.contains("conventional nodes=28"));
    let (code, out, _) = call(&["selftest", "--seed", "1"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.ends_with("selftest PASS\n"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = path(dir.path(), "o.zbnn");
    for args in [
        vec!["transform", "--model", "m", "--bits", "17", "--out", "o"],
        vec!["transform", "--model", "m", "--bits", "1", "--out", "o"],
        vec!["inject", "--model", "m", "--rate", "-0.1", "--out", "o"],
        vec!["sweep", "--model", "m", "--images", "i", "--labels", "l", "--report", "r", "--rates", "1e-3,x"],
        vec!["sweep", "--model", "m", "--images", "i", "--labels", "l", "--report", "r", "--metric", "loss"],
        vec!["frobnicate"],
        vec![],
    ] {
        let (code, _, err) = call(&args);
        assert_eq!(code, EXIT_USAGE, "{args:?}: {err}");
    }
    // unknown layer names are caught once the model is loaded
    let (code, _, err) = call(&["inject", "--model", &model(), "--rate", "0.1", "--target", "bn9", "--out", &o]);
    assert_eq!(code, EXIT_USAGE, "{err}");
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = path(dir.path(), "junk");
    std::fs::write(&junk, b"not a model").unwrap();
    let o = path(dir.path(), "o");
    let (code, _, err) = call(&["transform", "--model", &junk, "--bits", "8", "--out", &o]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("magic"), "{err}");
    let (code, _, _) = call(&["infer", "--model", &model(), "--images", &labels(), "--labels", &labels()]);
    assert_eq!(code, EXIT_DATA);
    let (code, _, _) = call(&["footprint", "--model", &path(dir.path(), "missing")]);
    assert_eq!(code, EXIT_DATA);
}

#[test]
fn help_and_version_succeed() {
    let (code, out, _) = call(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for sub in ["transform", "infer", "inject", "sweep", "footprint", "bench", "selftest"] {
        assert!(out.contains(sub), "{sub}");
    }
    assert_eq!(call(&["--version"]).0, EXIT_OK);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_bnnq");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["footprint", "--model", &model()]), Some(0));
    assert_eq!(status(&["transform", "--bits", "8"]), Some(1));
    assert_eq!(status(&["footprint", "--model", "/nonexistent"]), Some(2));
}
