use std::path::Path;
use std::process::Command;

fn hitta(dir: &Path, args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_hitta"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "hitta {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generate_train_and_evaluate_a_small_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut cfg = hitta(dir, &["init-config", "--compact"]);
    for (key, value) in [
        ("source_train", "4"),
        ("source_val", "2"),
        ("target_count", "2"),
        ("epochs", "1"),
        ("min_halfway_dsc", "0.0"),
    ] {
        let line = cfg.lines().find(|l| l.starts_with(&format!("{key} ="))).unwrap().to_string();
        cfg = cfg.replacen(&line, &format!("{key} = {value}"), 1);
    }
    cfg = cfg.replacen(
        cfg.lines().find(|l| l.starts_with("methods =")).unwrap(),
        r#"methods = ["no_tta", "tbn"]"#,
        1,
    );
    std::fs::write(dir.join("run.toml"), &cfg).unwrap();

    assert!(hitta(dir, &["-c", "run.toml", "gen-data"]).contains("samples written"));
    assert!(dir.join("data/manifest.json").is_file());
    hitta(dir, &["-c", "run.toml", "train-source"]);
    assert!(dir.join("runs/source.json").is_file());

    let summary = hitta(dir, &["-c", "run.toml", "matrix"]);
    assert!(summary.contains("| no_tta |") && summary.contains("| tbn |"));
    for f in ["table.csv", "table.json", "summary.md", "streams.json"] {
        assert!(dir.join("runs/matrix").join(f).is_file(), "{f}");
    }
    assert_eq!(hitta(dir, &["-c", "run.toml", "report"]), summary);

    hitta(dir, &["-c", "run.toml", "run", "--method", "tbn", "--out", "tbn.json"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("tbn.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 8);

    let out = hitta(dir, &["-c", "run.toml", "overlays", "--method", "tbn", "--limit", "2", "--out", "ov"]);
    assert!(out.starts_with("2 overlays"));
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = hitta(tmp.path(), &["--seed", "77", "init-config"]);
    assert!(cfg.lines().any(|l| l == "seed = 77"));
}
