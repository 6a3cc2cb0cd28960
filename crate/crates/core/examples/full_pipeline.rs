//! The whole command-line workflow on the bundled fixture, in a scratch directory.

fn main() {
    let dir = tempfile::tempdir().expect("scratch directory");
    let root = dir.path().to_str().unwrap().to_string();
    let cfg = format!("{root}/pudding.toml");
    let steps: Vec<Vec<&str>> = vec![
        vec!["--out", &root, "fixture"],
        vec!["-c", &cfg, "search"],
        vec!["-c", &cfg, "build-dataset"],
        vec!["-c", &cfg, "train"],
        vec!["-c", &cfg, "infer", "--max-new", "4"],
        vec!["-c", &cfg, "bench"],
    ];
    for args in steps {
        println!("$ pudding {}", args.join(" "));
        let code = pudding::cli::run(std::iter::once("pudding").chain(args));
        if code != 0 {
            std::process::exit(code);
        }
    }
    let report = std::fs::read_to_string(format!("{root}/out/infer_report.jsonl")).unwrap();
    println!("first report line: {}", report.lines().next().unwrap_or(""));
}
