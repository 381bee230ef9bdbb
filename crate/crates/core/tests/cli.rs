use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_dwnas");

fn tiny() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/tiny.json"))
}

fn run(args: &[&str]) -> (i32, String) {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "error").output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tiny()).unwrap()).unwrap();
    v["search"]["eta_alhpa"] = 0.1.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let (code, err) = run(&["gen-data", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("eta_alhpa"), "{err}");
}

#[test]
fn missing_config_flag_is_a_usage_error() {
    let (code, _) = run(&["search"]);
    assert_ne!(code, 0);
}

#[test]
fn missing_upstream_artifact_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = run(&["train", "--config", tiny().to_str().unwrap(), "--out", out]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn gen_data_embeds_seed_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, err) = run(&["gen-data", "--config", tiny().to_str().unwrap(), "--out", out, "--seed", "7"]);
    assert_eq!(code, 0, "{err}");
    let names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let json = names.iter().find(|n| n.ends_with(".json")).expect("a json artifact");
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(json)).unwrap()).unwrap();
    let text = v.to_string();
    assert!(text.contains("\"seed\":7"), "{text}");
    assert!(text.contains("config_hash"), "{text}");
}
