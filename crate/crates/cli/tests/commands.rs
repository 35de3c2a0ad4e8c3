use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_laoc");

fn laoc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn data_rows(path: &str) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().filter(|l| !l.starts_with('#')).skip(1).map(str::to_string).collect()
}

#[test]
fn gen_writes_the_requested_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(dir.path(), "a.csv"), p(dir.path(), "b.csv"));
    for out in [&a, &b] {
        let o = laoc(&["gen", "--seed", "1", "--episodes", "10", "--horizon", "24", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(data_rows(&a).len(), 240);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("# config: {"));
}

#[test]
fn gen_rejects_zero_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let o = laoc(&["gen", "--horizon", "0", "--out", &p(dir.path(), "x.csv")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_ood_changes_only_demand() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(dir.path(), "a.csv"), p(dir.path(), "b.csv"));
    laoc(&["gen", "--seed", "4", "--episodes", "3", "--out", &a]);
    laoc(&["gen", "--seed", "4", "--episodes", "3", "--out", &b, "--ood"]);
    let (ra, rb) = (data_rows(&a), data_rows(&b));
    assert_eq!(ra.len(), rb.len());
    let mut moved = 0;
    for (x, y) in ra.iter().zip(&rb) {
        let (x, y): (Vec<&str>, Vec<&str>) = (x.split(',').collect(), y.split(',').collect());
        assert_eq!((x[0], x[2], x[3]), (y[0], y[2], y[3]));
        moved += usize::from(x[1] != y[1]);
    }
    assert!(moved > 0);
}

#[test]
fn train_defaults_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let traces = p(dir.path(), "t.csv");
    laoc(&["gen", "--seed", "2", "--episodes", "20", "--out", &traces]);
    let o = laoc(&["train", "--traces", &traces, "--mode", "finetune", "--out", &p(dir.path(), "f.json")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--lambda"));

    let (a, b) = (p(dir.path(), "a.json"), p(dir.path(), "b.json"));
    for out in [&a, &b] {
        let o = laoc(&["train", "--traces", &traces, "--seed", "5", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(v["training"]["epochs"], 400);
    assert_eq!(v["training"]["learning_rate"], 5e-4);
    assert_eq!(v["training"]["mode"], "pure");
}

#[test]
fn finetune_from_an_initial_policy() {
    let dir = tempfile::tempdir().unwrap();
    let traces = p(dir.path(), "t.csv");
    let (pure, tuned) = (p(dir.path(), "pure.json"), p(dir.path(), "tuned.json"));
    laoc(&["gen", "--seed", "3", "--episodes", "20", "--out", &traces]);
    assert!(laoc(&["train", "--traces", &traces, "--epochs", "30", "--out", &pure]).status.success());
    let o = laoc(&[
        "train", "--traces", &traces, "--epochs", "10", "--mode", "finetune", "--lambda", "0.4", "--prior", "robd", "--init", &pure, "--out", &tuned,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&tuned).unwrap()).unwrap();
    assert_eq!(v["training"]["mode"], "finetune");
    assert_eq!(v["training"]["lambda"], 0.4);
    assert_eq!(v["training"]["prior"], "robd");
}

#[test]
fn bench_rows_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let traces = p(dir.path(), "t.csv");
    laoc(&["gen", "--seed", "6", "--episodes", "30", "--out", &traces]);

    let out = p(dir.path(), "prior.csv");
    assert!(laoc(&["bench", "--traces", &traces, "--controllers", "prior", "--out", &out]).status.success());
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 1);
    let fields: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(fields[0], "prior");
    assert_eq!(fields[6], "1");

    let out = p(dir.path(), "laoc.csv");
    let o = laoc(&["bench", "--traces", &traces, "--controllers", "laoc", "--lambdas", "0.1,0.4,0.8", "--out", &out]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("untrained"));
    let rows = data_rows(&out);
    assert_eq!(rows.len(), 3);
    for (row, lambda) in rows.iter().zip(["0.1", "0.4", "0.8"]) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!((f[0], f[1], f[2], f[7], f[8]), ("laoc", lambda, "t", "0", "30"));
    }
}

#[test]
fn bench_reports_missing_files_and_bad_names() {
    let o = laoc(&["bench", "--traces", "/no/such/traces.csv", "--controllers", "prior"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/traces.csv"));
    let o = laoc(&["bench", "--traces", "/no/such/traces.csv", "--controllers", "magic"]);
    assert_eq!(o.status.code(), Some(2));
    let o = laoc(&["bench", "--traces", "/no/such/traces.csv", "--controllers", "lin_plus", "--lambdas", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_feeds_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"system": {"horizon": 12}, "seed": 9, "profile": {"demand_noise": 0.0}}"#).unwrap();
    let (a, b) = (p(dir.path(), "a.csv"), p(dir.path(), "b.csv"));
    assert!(laoc(&["--config", &cfg, "gen", "--episodes", "2", "--out", &a]).status.success());
    assert_eq!(data_rows(&a).len(), 24);
    assert!(std::fs::read_to_string(&a).unwrap().contains("\"seed\":9"));
    assert!(laoc(&["--config", &cfg, "gen", "--episodes", "2", "--horizon", "5", "--out", &b]).status.success());
    assert_eq!(data_rows(&b).len(), 10);

    std::fs::write(&cfg, r#"{"sytem": {}}"#).unwrap();
    assert_eq!(laoc(&["--config", &cfg, "gen", "--out", &a]).status.code(), Some(2));
}

#[test]
fn corrupted_reservation_fails_non_emptiness() {
    let o = laoc(&["verify", "--quick", "--inject-corrupt-q"]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("[FAIL] C2 ")), "{text}");
}
