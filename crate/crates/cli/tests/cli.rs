use assert_cmd::Command;

fn spacenet() -> Command {
    let mut cmd = Command::cargo_bin("spacenet").unwrap();
    cmd.env("RUST_LOG", "warn");
    cmd
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spacenet().args(["report", "--runs"]).arg(tmp.path()).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no records found"));
}

#[test]
fn unknown_override_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spacenet()
        .args(["prepare-data", "--run-dir"])
        .arg(tmp.path().join("r"))
        .args(["--train.lrr", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lrr"));
}

#[test]
fn tiny_run_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let small = [
        "--data.size=[32, 32]",
        "--data.train_count=4",
        "--data.test_count=2",
        "--model.width=2",
        "--train.epochs=1",
        "--train.batch_size=4",
    ];
    spacenet().args(["train", "--run-dir"]).arg(&run).args(small).assert().success();
    let out = spacenet().args(["eval", "--run-dir"]).arg(&run).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("acc_space"));
    spacenet().args(["ratemap", "--run-dir"]).arg(&run).assert().success();
    spacenet().args(["waviness", "--run-dir"]).arg(&run).assert().success();
    let out = spacenet().args(["report", "--runs"]).arg(tmp.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("Acc_space") && table.contains("wave-pattern"));
    assert!(tmp.path().join("report/table.csv").exists());
}
