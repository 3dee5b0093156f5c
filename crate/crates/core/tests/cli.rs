//! End-to-end runs of the `smoothcert` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
seed = 3
[data]
train_count = 120
test_count = 12
[vit]
image_size = 8
patch_size = 4
embed_dim = 16
num_heads = 2
depth = 1
[pretrain]
epochs = 2
[train]
epochs = 1
batch_size = 16
[smoothing]
n0 = 20
n = 100
batch = 50
[report]
radius_max = 0.5
radius_step = 0.25
";

fn smoothcert(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoothcert"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = smoothcert(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn body(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.rsplit_once('\t').map_or(l, |(b, _)| b).to_string())
        .collect()
}

#[test]
fn pipeline_report_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    let base = ["--config", "tiny.cfg"];
    let with = |extra: &[&'static str]| -> Vec<&str> { base.iter().copied().chain(extra.iter().copied()).collect() };

    let out = ok(d, &with(&["pretrain"]));
    assert!(out.contains("wrote out/backbone.psmc"), "{out}");
    ok(d, &with(&["finetune", "--peft", "lora", "--rank", "2"]));
    ok(d, &with(&["certify", "--peft", "lora", "--rank", "2"]));
    let tsv = d.join("out/results.tsv");
    let text = fs::read_to_string(&tsv).unwrap();
    assert!(text.lines().any(|l| l == "idx\tlabel\tpredict\tradius\tcorrect\ttime"));
    assert!(text.lines().any(|l| l.starts_with("# smoothing.sigma=")));
    assert_eq!(body(&tsv).len(), 13);

    ok(d, &with(&["report", "--peft", "lora", "--rank", "2"]));
    let curve = fs::read_to_string(d.join("out/curve.csv")).unwrap();
    assert!(curve.contains("radius,certified_accuracy"));
    assert!(curve.contains("# curve.adapted_parameters=128"), "{curve}");

    // The report reads only the results file.
    fs::remove_file(d.join("out/finetuned.psmc")).unwrap();
    fs::remove_file(d.join("out/backbone.psmc")).unwrap();
    fs::remove_file(d.join("out/curve.csv")).unwrap();
    ok(d, &with(&["report", "--peft", "lora", "--rank", "2"]));
    assert_eq!(fs::read_to_string(d.join("out/curve.csv")).unwrap(), curve);

    ok(d, &with(&["compare", "out/curve.csv", "out/curve.csv"]));
    assert!(fs::read_to_string(d.join("out/compare.csv")).unwrap().contains('='));
}

#[test]
fn certification_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["--config", "tiny.cfg", "pretrain"]);
    ok(d, &["--config", "tiny.cfg", "certify", "--workers", "1", "--set", "paths.results=one.tsv"]);
    ok(d, &["--config", "tiny.cfg", "certify", "--workers", "3", "--set", "paths.results=three.tsv"]);
    let one = fs::read_to_string(d.join("one.tsv")).unwrap();
    assert!(one.lines().any(|l| l.starts_with("# certify.skip=")));
    assert_eq!(body(&d.join("one.tsv")), body(&d.join("three.tsv")));
    assert!(!d.join("out/.smoothcert.lock").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(smoothcert(d, &["bogus"]).status.code(), Some(2));
    assert_eq!(smoothcert(d, &["certify", "--set", "smoothing.alpha=2"]).status.code(), Some(2));
    assert_eq!(smoothcert(d, &["certify", "--set", "no.such.key=1"]).status.code(), Some(2));
    let missing = smoothcert(d, &["certify"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("backbone.psmc"));

    fs::create_dir_all(d.join("out")).unwrap();
    fs::write(d.join("out/.smoothcert.lock"), "").unwrap();
    assert_eq!(smoothcert(d, &["pretrain"]).status.code(), Some(3));
}

#[test]
fn cifar_fixture_loads() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cifar_three.bin");
    let ds = smoothcert::data::load_dataset(&fixture, smoothcert::data::DataFormat::Cifar10Bin, smoothcert::data::Split::Test)
        .unwrap();
    assert_eq!(ds.labels, vec![7, 2, 9]);
    assert_eq!((ds.channels, ds.height, ds.width), (3, 32, 32));
    let bytes = fs::read(&fixture).unwrap();
    assert_eq!(ds.images[0], bytes[1] as f32 / 255.0);
}
