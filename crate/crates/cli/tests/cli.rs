use std::path::PathBuf;
use std::process::Command;

fn rwre() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rwre"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn speed_writes_bundle_and_exits_zero() {
    let out = std::env::temp_dir().join(format!("rwre-cli-{}", std::process::id()));
    let status = rwre()
        .args(["speed", "--seed", "5", "--config"])
        .arg(scenario("scalar_biased.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["master_seed"], 5);
    assert_eq!(summary["task"], "speed");
    let v = summary["results"]["v_p"]["value"].as_f64().unwrap();
    assert!((v - 1.0 / 3.0).abs() < 1e-12);
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn task_errors_exit_one() {
    let missing = rwre().arg("speed").output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let bad = rwre().args(["speed", "--config", "/nonexistent/scenario.toml"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
}

#[test]
fn rejected_model_exits_one_and_names_task() {
    let dir = std::env::temp_dir().join(format!("rwre-cli-persistent-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("p.toml");
    std::fs::write(&cfg, "task = \"speed\"\nbuiltin_model = \"persistent-walk\"\n").unwrap();
    let out = rwre().arg("lln").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("task lln failed"));
    std::fs::remove_dir_all(dir).unwrap();
}
