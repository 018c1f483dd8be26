use rangeloc::measurement::StampedPose;
use rangeloc::metrics::MetricsReport;
use rangeloc::stability::StabilityReport;
use rangeloc_cli::commands::{BenchReport, RunSummary};
use std::path::Path;
use std::process::{Command, Output};

fn rangeloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rangeloc"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn jsonl<T: serde::de::DeserializeOwned>(p: &Path) -> Vec<T> {
    rangeloc::io::read_jsonl(p).unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const STATIC_NOISELESS: &str = r#"
[sim]
duration = 6.0
speed = 0.0
shape = { kind = "static", position = [0.4, -0.7, 1.1] }
[sim.noise]
eta = 0.0
"#;

#[test]
fn simulate_preset_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = rangeloc(&[
            "simulate",
            "--preset",
            "paper-indoor",
            "--seed",
            "7",
            "--out",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "anchors.jsonl",
        "ranges.jsonl",
        "orientations.jsonl",
        "truth.jsonl",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        std::fs::read_to_string(a.join("anchors.jsonl")).unwrap(),
        "{\"id\":0,\"p\":[3.0,3.0,1.95]}\n{\"id\":1,\"p\":[3.0,-3.0,0.53]}\n\
         {\"id\":2,\"p\":[-3.0,3.0,0.54]}\n{\"id\":3,\"p\":[-3.0,-3.0,1.98]}\n"
    );
    let c = dir.path().join("c");
    rangeloc(&[
        "simulate",
        "--preset",
        "paper-indoor",
        "--seed",
        "8",
        "--out",
        s(&c),
    ]);
    assert_ne!(
        std::fs::read(a.join("ranges.jsonl")).unwrap(),
        std::fs::read(c.join("ranges.jsonl")).unwrap()
    );
}

#[test]
fn zero_duration_gives_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sim]\nduration = 0.0\n");
    let o = rangeloc(&[
        "simulate",
        "--config",
        &cfg,
        "--preset",
        "paper-indoor",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("ranges.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn noiseless_localize_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, STATIC_NOISELESS);
    assert_eq!(
        code(&rangeloc(&[
            "simulate",
            "--config",
            &cfg,
            "--preset",
            "paper-indoor",
            "--out",
            s(d)
        ])),
        0
    );
    let o = rangeloc(&[
        "localize",
        "--config",
        &cfg,
        "--preset",
        "paper-indoor",
        "--input",
        s(d),
        "--out",
        s(d),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let est: Vec<StampedPose> = jsonl(&d.join("estimates.jsonl"));
    let ranges: Vec<serde_json::Value> = jsonl(&d.join("ranges.jsonl"));
    // one estimate per accepted measurement after bootstrap
    assert_eq!(est.len(), ranges.len() - 9);
    assert!(est.iter().all(|e| e.rotation.is_none()));
    let truth: Vec<StampedPose> = jsonl(&d.join("truth.jsonl"));
    assert!(est
        .iter()
        .all(|e| (e.position - truth[0].position).norm() < 1e-3));
    let run: RunSummary =
        serde_json::from_str(&std::fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
    assert_eq!(run.stats.restarts, 0);
    let reports: Vec<serde_json::Value> = jsonl(&d.join("reports.jsonl"));
    assert_eq!(reports.len(), est.len());

    let o = rangeloc(&[
        "evaluate",
        "--estimates",
        s(&d.join("estimates.jsonl")),
        "--truth",
        s(&d.join("truth.jsonl")),
        "--run",
        s(&d.join("run.json")),
        "--out",
        s(d),
    ]);
    assert_eq!(code(&o), 0);
    let m: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(d.join("metrics.json")).unwrap()).unwrap();
    assert!(m.e_t < 1e-3 && m.e_t <= m.e_rmse);
    assert_eq!(m.cdf.iter().map(|b| b.count).sum::<usize>(), m.count);
    assert_eq!(m.cdf.last().unwrap().cumulative, 1.0);
    assert!(m.mean_solve_time.is_some());
    assert!(std::fs::read_to_string(d.join("cdf.csv"))
        .unwrap()
        .starts_with("upper_m,count,cumulative\n0.01,"));
}

#[test]
fn fused_localize_writes_rotations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "[sim]\nduration = 4.0\n[sim.noise]\neta = 0.0\n");
    rangeloc(&[
        "simulate",
        "--config",
        &cfg,
        "--preset",
        "paper-indoor",
        "--out",
        s(d),
    ]);
    let o = rangeloc(&[
        "localize",
        "--config",
        &cfg,
        "--preset",
        "paper-indoor",
        "--mode",
        "fused",
        "--input",
        s(d),
        "--out",
        s(d),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let est: Vec<StampedPose> = jsonl(&d.join("estimates.jsonl"));
    assert!(!est.is_empty() && est.iter().all(|e| e.rotation.is_some()));

    std::fs::remove_file(d.join("orientations.jsonl")).unwrap();
    let o = rangeloc(&[
        "localize",
        "--preset",
        "paper-indoor",
        "--mode",
        "fused",
        "--input",
        s(d),
        "--out",
        s(d),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn all_outliers_require_restart() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    rangeloc(&["simulate", "--preset", "paper-indoor", "--out", s(d)]);
    // ranges that jump by metres between consecutive readings
    let mut text = String::new();
    for k in 0..600 {
        let dist = if k % 2 == 0 { 1.0 } else { 6.0 };
        text.push_str(&format!(
            "{{\"t\":{},\"anchor\":{},\"d\":{dist}}}\n",
            k as f64 * 0.03,
            k % 4
        ));
    }
    std::fs::write(d.join("ranges.jsonl"), text).unwrap();
    let o = rangeloc(&[
        "localize",
        "--preset",
        "paper-indoor",
        "--input",
        s(d),
        "--out",
        s(d),
    ]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("estimates.jsonl").exists());
}

#[test]
fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    rangeloc(&["simulate", "--preset", "paper-indoor", "--out", s(d)]);

    let bad = write_config(d, "[estimator]\nwindw = 3\n");
    assert_eq!(
        code(&rangeloc(&[
            "localize",
            "--config",
            &bad,
            "--input",
            s(d),
            "--out",
            s(d)
        ])),
        2
    );
    assert_eq!(
        code(&rangeloc(&[
            "simulate",
            "--preset",
            "nowhere",
            "--out",
            s(d)
        ])),
        2
    );

    let broken = write_config(d, "[estimator\n");
    assert_eq!(
        code(&rangeloc(&["simulate", "--config", &broken, "--out", s(d)])),
        5
    );

    let ranges = std::fs::read_to_string(d.join("ranges.jsonl")).unwrap();
    std::fs::write(d.join("ranges.jsonl"), format!("{ranges}{{\"t\": oops}}\n")).unwrap();
    assert_eq!(
        code(&rangeloc(&["localize", "--input", s(d), "--out", s(d)])),
        5
    );
    std::fs::write(d.join("ranges.jsonl"), ranges).unwrap();

    std::fs::write(
        d.join("anchors.jsonl"),
        "{\"id\":0,\"p\":[0,0,0]}\n{\"id\":1,\"p\":[4,0,0]}\n{\"id\":2,\"p\":[0,4,0]}\n{\"id\":3,\"p\":[4,4,0]}\n",
    )
    .unwrap();
    assert_eq!(
        code(&rangeloc(&["localize", "--input", s(d), "--out", s(d)])),
        3
    );
}

#[test]
fn diagnose_flags_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(
        d,
        &format!("{STATIC_NOISELESS}\n[stability]\nsamples = 40\nevery = 10\n"),
    );
    rangeloc(&[
        "simulate",
        "--config",
        &cfg,
        "--preset",
        "paper-indoor",
        "--out",
        s(d),
    ]);
    let o = rangeloc(&[
        "diagnose",
        "--config",
        &cfg,
        "--preset",
        "paper-indoor",
        "--input",
        s(d),
        "--out",
        s(d),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("PASS"), "{stdout}");
    let text = std::fs::read_to_string(d.join("stability.jsonl")).unwrap();
    let reports: Vec<StabilityReport> = jsonl(&d.join("stability.jsonl"));
    assert!(!reports.is_empty() && reports.iter().all(|r| r.alpha < 1.0 && r.beta.is_some()));
    assert_eq!(
        String::from_utf8(rangeloc::io::to_jsonl(&reports)).unwrap(),
        text
    );
}

#[test]
fn bench_reports_budget_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = write_config(dir.path(), "[sim]\nduration = 5.0\n");
    for out in [&a, &b] {
        let o = rangeloc(&[
            "bench",
            "--config",
            &cfg,
            "--preset",
            "paper-indoor",
            "--seed",
            "3",
            "--window",
            "10",
            "--iters",
            "10",
            "--out",
            s(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        std::fs::read(a.join("ranges.jsonl")).unwrap(),
        std::fs::read(b.join("ranges.jsonl")).unwrap()
    );
    let r: BenchReport =
        serde_json::from_str(&std::fs::read_to_string(a.join("bench.json")).unwrap()).unwrap();
    assert_eq!((r.window, r.iterations), (10, 10));
    assert!((r.budget - 0.0308).abs() < 1e-4);
    assert!(!r.per_iteration.is_empty() && r.steps > 0);
}
