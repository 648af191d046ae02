use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
synth.train_images = 20
synth.test_images = 6
gmm.k = 4
pca.dim = 12
pca.samples = 2000
gmm.samples = 2000
svm.epochs = 5
fusion.epochs = 5
prior.epochs = 5
";

fn fusiondet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusiondet"))
        .arg("--out-dir")
        .arg(dir)
        .arg("--config")
        .arg(dir.join("config.txt"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fusiondet(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(dir: &Path, args: &[&str]) -> String {
    let out = fusiondet(dir, args);
    assert!(!out.status.success(), "{args:?} should fail");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic must be one line: {err:?}");
    err
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("config.txt"), SMALL).unwrap();
    dir
}

#[test]
fn stage_by_stage_run() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth"]);
    let train = d.join("train.txt");
    let test = d.join("test.txt");
    let (train, test) = (train.to_str().unwrap(), test.to_str().unwrap());
    for m in [train, test] {
        ok(d, &["propose", "--manifest", m]);
    }
    ok(d, &["train-codebook", "--manifest", train]);
    ok(d, &["extract", "--manifest", train]);
    ok(d, &["extract", "--manifest", test, "--channel", "cnn", "--channel", "hog", "--channel", "ifv"]);
    for stage in ["train-svm", "train-fusion", "train-regressor", "train-prior"] {
        ok(d, &[stage, "--manifest", train]);
    }
    ok(d, &["detect", "--manifest", test]);
    let report = ok(d, &["eval", "--manifest", test]);
    assert!(report.starts_with("category ap num_gt\n"));
    assert!(report.lines().last().unwrap().starts_with("mAP "));

    ok(d, &["detect", "--manifest", test, "--scoring", "ifv", "--no-prior", "--output", "ifv"]);
    ok(d, &["eval", "--manifest", test, "--detections", "ifv", "--report", "report_ifv"]);
    let fused = format!("fused={}", d.join("test/report.txt").display());
    let ifv = format!("ifv={}", d.join("test/report_ifv.txt").display());
    let out = d.join("compare.txt");
    let won = ok(d, &["compare", "--report", &fused, "--report", &ifv, "--output", out.to_str().unwrap()]);
    assert_eq!(won.lines().count(), 2);
    ok(d, &["render", "--manifest", test, "--min-score", "-1"]);
    assert!(d.join("test/render/test_0000.ppm").exists());
}

#[test]
fn all_runs_and_repeats_identically() {
    let a = setup();
    let b = setup();
    let first = ok(a.path(), &["all", "--seed", "3"]);
    let second = ok(b.path(), &["all", "--seed", "3"]);
    assert_eq!(first, second);
    assert!(first.contains("mAP "));
    for f in ["report.txt", "report_noprior.txt", "compare.txt", "detections.txt"] {
        assert_eq!(
            std::fs::read(a.path().join("test").join(f)).unwrap(),
            std::fs::read(b.path().join("test").join(f)).unwrap(),
            "{f}"
        );
    }
    let log = std::fs::read_to_string(a.path().join("logs/train-svm-train.log")).unwrap();
    assert!(log.contains("seed 3"));
}

#[test]
fn errors_are_single_line() {
    let dir = setup();
    let d = dir.path();
    let missing = d.join("nope.txt");
    assert!(failure(d, &["propose", "--manifest", missing.to_str().unwrap()]).starts_with("error:"));

    ok(d, &["synth"]);
    let test = d.join("test.txt");
    let err = failure(d, &["extract", "--manifest", test.to_str().unwrap()]);
    assert!(err.contains("propose"), "{err}");
    ok(d, &["propose", "--manifest", test.to_str().unwrap()]);
    let err = failure(d, &["detect", "--manifest", test.to_str().unwrap(), "--scoring", "rgb"]);
    assert!(err.contains("unknown scoring"), "{err}");

    std::fs::write(d.join("config.txt"), "seed = 1\ngmm.k = 0\n").unwrap();
    let err = failure(d, &["synth"]);
    assert!(err.contains("line 2"), "{err}");
    std::fs::write(d.join("config.txt"), "colour = red\n").unwrap();
    let err = failure(d, &["synth"]);
    assert!(err.contains("line 1"), "{err}");
}
