use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sact")).args(args).output().expect("run sact")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
input_channels=3
stem.width=4
stem.kernel=3
expansion=2
classes=4
halting=sact
epsilon=0.01
tau=0.01
blocks=2
block1.units=2
block1.width=2
block1.stride=1
block2.units=2
block2.width=4
block2.stride=2
train.epochs=1
train.batch_size=8
data.train_count=24
data.test_count=8
";

#[test]
fn flops_prints_resnet101_total() {
    let o = sact(&["flops", "--arch", config("resnet101.cfg").to_str().unwrap(), "--resolution", "224"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("total\t")).unwrap().to_string();
    let total: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
    assert!((total / 1.56e10 - 1.0).abs() < 0.02, "{line}");
}

#[test]
fn gradcheck_passes_in_double() {
    let o = sact(&["gradcheck", "--seed", "7", "--precision", "double"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 10);
    assert!(out.lines().all(|l| l.starts_with("param ") && l.ends_with(" PASS")), "{out}");
    let single = sact(&["gradcheck", "--precision", "single"]);
    assert!(!single.status.success());
}

#[test]
fn unknown_command_and_flag_fail_with_usage() {
    let o = sact(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = sact(&["flops", "--arch", "x.cfg", "--bogus", "1"]);
    assert!(!o.status.success());
}

#[test]
fn missing_files_name_path_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let arch = dir.path().join("tiny.cfg");
    fs::write(&arch, TINY).unwrap();
    let o = sact(&[
        "eval",
        "--arch",
        arch.to_str().unwrap(),
        "--checkpoint",
        "/nonexistent/model.ckpt",
        "--data",
        "/nonexistent/test.sactdata",
    ]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: --checkpoint /nonexistent/model.ckpt"), "{err}");
    let o = sact(&["flops", "--arch", "/nonexistent/a.cfg"]);
    assert!(stderr(&o).starts_with("error: --arch /nonexistent/a.cfg"), "{}", stderr(&o));
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let arch = d.join("tiny.cfg");
    fs::write(&arch, TINY).unwrap();
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let data = d.join("data");
    let o = sact(&["make-data", "--out", &p(&data), "--seed", "3", "--resolution", "16", "--arch", &p(&arch)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let again = d.join("data2");
    sact(&["make-data", "--out", &p(&again), "--seed", "3", "--resolution", "16", "--arch", &p(&arch)]);
    for f in ["train.sactdata", "test.sactdata", "train.sactmask", "test.sactmask"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let run = d.join("run");
    let o = sact(&["train", "--arch", &p(&arch), "--data", &p(&data.join("train.sactdata")), "--out", &p(&run), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    assert!(log.starts_with("# epoch\tloss\tponder1\tponder2\tunits1\tunits2\tacc\tflops\n"), "{log}");

    let ck = run.join("model.ckpt");
    let o = sact(&["eval", "--arch", &p(&arch), "--checkpoint", &p(&ck), "--data", &p(&data.join("test.sactdata"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("accuracy\t") && out.contains("block2\tunits ") && out.contains("flops\t"), "{out}");

    let maps = d.join("maps");
    let o = sact(&[
        "ponder-map",
        "--arch",
        &p(&arch),
        "--checkpoint",
        &p(&ck),
        "--data",
        &p(&data.join("test.sactdata")),
        "--out",
        &p(&maps),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["block1.pgm", "block1.csv", "block2.pgm", "total.pgm", "total.csv"] {
        assert!(maps.join(f).exists(), "{f}");
    }
    assert!(fs::read(maps.join("total.pgm")).unwrap().starts_with(b"P5\n4 4\n255\n"));

    let fix = d.join("fix.csv");
    fs::write(&fix, "row,col\n5,5\n8,9\n").unwrap();
    let o = sact(&[
        "saliency-eval",
        "--data",
        &p(&maps.join("total.csv")),
        "--fixations",
        &p(&fix),
        "--resolution",
        "16",
        "--blur-s",
        "2",
        "--gamma",
        "0.005",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let auc: f64 = stdout(&o).trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let o = sact(&[
        "saliency-eval",
        "--arch",
        &p(&arch),
        "--checkpoint",
        &p(&ck),
        "--data",
        &p(&data.join("test.sactdata")),
        "--fixations",
        &p(&fix),
        "--blur-s",
        "1,2",
        "--gamma",
        "0,0.005",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("best_s\t"));

    let o = sact(&["eval", "--arch", &p(&config("desk.cfg")), "--checkpoint", &p(&ck), "--data", &p(&data.join("test.sactdata"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}
