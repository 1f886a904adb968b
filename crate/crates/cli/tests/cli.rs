use std::process::Command;

fn scattermoe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_scattermoe")).args(args).output().expect("binary runs")
}

#[test]
fn sparsity_csv_has_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sparsity.csv");
    let out = scattermoe(&[
        "sweep-sparsity",
        "--d-model",
        "8",
        "--d-expert",
        "4",
        "--tokens",
        "6",
        "--k",
        "1,2,64",
        "--repeats",
        "2",
        "--warmup",
        "0",
        "--csv",
        path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "mode,k,E,d_model,d_expert,T,median_ns,p5_ns,p95_ns,macs,peak_bytes,tokens_per_s"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let (p5, med, p95): (u64, u64, u64) = (r[7].parse().unwrap(), r[6].parse().unwrap(), r[8].parse().unwrap());
        assert!(p5 <= med && med <= p95, "{r:?}");
    }
    let macs: Vec<u64> = rows.iter().map(|r| r[9].parse().unwrap()).collect();
    assert_eq!(macs[3], macs[0]);
    assert_eq!(macs[1] * 64, macs[0]);
}

#[test]
fn granularity_dry_run_prints_published_derivations() {
    let out = scattermoe(&["sweep-granularity", "--preset", "paper", "--dry-run"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let k4: Vec<&str> = stdout
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .find(|c| c[0] == "fused" && c[1] == "4")
        .expect("fused k=4 row")
        .into_iter()
        .take(5)
        .collect();
    assert_eq!(k4, ["fused", "4", "32", "2048", "4"]);
}

#[test]
fn granularity_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.csv");
    let out = scattermoe(&["sweep-granularity", "--dry-run", "--csv", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("mode,k,E,d_model,d_ff,d_expert,G,T,median_ns,"), "{text}");
    assert_eq!(text.lines().count(), 1 + 1 + 2 * 5);
}

#[test]
fn attention_train_phase_skips_the_forward_only_baseline() {
    let out = scattermoe(&[
        "bench-attention",
        "--d-model",
        "32",
        "--tokens",
        "16",
        "--k",
        "1,2",
        "--phase",
        "train",
        "--repeats",
        "1",
        "--warmup",
        "0",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(!stdout.contains("baseline"));
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with("fused")).count(), 2);
}

#[test]
fn ledger_reports_all_three_pipelines() {
    let out = scattermoe(&["ledger", "--tokens", "32", "--d-model", "16", "--k", "2"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for name in ["fused-inference,", "fused-training,", "baseline,", "pipeline,buffer,phase,rows,cols,bytes"] {
        assert!(stdout.contains(name), "missing {name}");
    }
}

#[test]
fn verify_fails_on_injected_fault() {
    let out = scattermoe(&["verify", "--trials", "3", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAILED"));
}

#[test]
fn worker_count_comes_from_the_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_scattermoe"))
        .args(["sweep-sparsity", "--d-model", "8", "--d-expert", "4", "--tokens", "4", "--k", "2"])
        .args(["--repeats", "1", "--warmup", "0"])
        .env("SCATTERMLP_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "zero workers must be rejected");
}
