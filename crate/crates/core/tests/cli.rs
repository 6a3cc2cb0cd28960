use std::path::Path;

use pudding::cli::run;

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("pudding").chain(args.iter().copied()))
}

fn fixture(dir: &Path) -> String {
    assert_eq!(cli(&["--out", dir.to_str().unwrap(), "fixture"]), 0);
    dir.join("pudding.toml").to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["frobnicate"]), 2);
    assert_eq!(cli(&["search", "--k", "notanumber"]), 2);
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("absent.toml");
    assert_eq!(cli(&["-c", cfg.to_str().unwrap(), "search"]), 2);
}

#[test]
fn k_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    assert_eq!(cli(&["-c", &cfg, "search", "--k", "99"]), 2);
    assert!(!dir.path().join("out/pool.json").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out = dir.path().join("out");
    assert_eq!(cli(&["-c", &cfg, "--dry-run", "search"]), 0);
    assert!(!out.exists());
    // a dry run still validates inputs
    assert_eq!(cli(&["-c", &cfg, "--dry-run", "build-dataset"]), 2);

    assert_eq!(cli(&["-c", &cfg, "search"]), 0);
    assert_eq!(cli(&["-c", &cfg, "--dry-run", "build-dataset"]), 0);
    assert!(!out.join("router_dataset.jsonl").exists());
    assert_eq!(cli(&["-c", &cfg, "build-dataset"]), 0);
    assert_eq!(cli(&["-c", &cfg, "--dry-run", "train"]), 0);
    assert!(!out.join("router.pudr").exists());
}

#[test]
fn stages_need_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    assert_eq!(cli(&["-c", &cfg, "build-dataset"]), 2);
    assert_eq!(cli(&["-c", &cfg, "train"]), 2);
    assert_eq!(cli(&["-c", &cfg, "infer"]), 2);
}

#[test]
fn empty_prompts_and_untrained_router() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("epochs = 30"));
    std::fs::write(&cfg, text.replace("epochs = 30", "epochs = 0")).unwrap();

    assert_eq!(cli(&["-c", &cfg, "search"]), 0);
    assert_eq!(cli(&["-c", &cfg, "build-dataset"]), 0);
    assert_eq!(cli(&["-c", &cfg, "train"]), 0);
    assert!(dir.path().join("out/router.pudr").is_file());

    let empty = dir.path().join("none.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(cli(&["-c", &cfg, "infer", "--prompts", empty.to_str().unwrap()]), 0);
    let report = std::fs::read_to_string(dir.path().join("out/infer_report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 0);
}

#[test]
fn edited_pool_breaks_the_router_binding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    for cmd in ["search", "build-dataset", "train"] {
        assert_eq!(cli(&["-c", &cfg, cmd]), 0, "{cmd}");
    }
    let pool_path = dir.path().join("out/pool.json");
    let mut pool: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&pool_path).unwrap()).unwrap();
    pool["sets"][0]["loss"] = serde_json::json!(123.0);
    std::fs::write(&pool_path, serde_json::to_string_pretty(&pool).unwrap() + "\n").unwrap();
    assert_eq!(cli(&["-c", &cfg, "infer"]), 3);
}

#[test]
fn out_flag_redirects_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let elsewhere = dir.path().join("elsewhere");
    assert_eq!(
        cli(&["-c", &cfg, "--out", elsewhere.to_str().unwrap(), "search", "--k", "1"]),
        0
    );
    let pool = std::fs::read_to_string(elsewhere.join("pool.json")).unwrap();
    assert!(pool.contains("\"k\": 1"));
}
