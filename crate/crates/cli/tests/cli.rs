//! Exit-code and artifact behaviour of the command-line binary.

use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_viewshift"))
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("unknown subcommand"), "{msg}");
}

#[test]
fn invalid_config_field_exits_2_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "synth-data",
            "--override",
            "arch.not_a_field=3",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("not_a_field"), "{msg}");
}

#[test]
fn runtime_failure_exits_1() {
    // translate without a bundle checkpoint is a runtime error, not a
    // config error.
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["translate", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn synth_data_writes_dataset_and_config_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "synth-data",
            "--override",
            "data.n_per_class=2",
            "--override",
            "arch.image_res=16",
            "--override",
            "arch.feat_res=4",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("resolved-config.json").exists());
    assert!(dir.path().join("dataset/manifest.json").exists());
    assert!(dir.path().join("dataset/c1_red_spheres/00001.png").exists());

    // The snapshot holds the resolved values.
    let cfg: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("resolved-config.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(cfg["data"]["n_per_class"], 2);
    assert_eq!(cfg["arch"]["image_res"], 16);
}

#[test]
fn accelerator_device_falls_back_to_cpu() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "synth-data",
            "--device",
            "accelerator",
            "--override",
            "data.n_per_class=1",
            "--override",
            "arch.image_res=16",
            "--override",
            "arch.feat_res=4",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cpu"));
}
