use std::fs;
use std::path::Path;
use std::process::Command;

fn qbi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_qbi")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("exp.cfg");
    fs::write(&p, body).unwrap();
    p.display().to_string()
}

const PRECESSION: &str = "\
model.kind = precession
model.lower = 0
model.upper = 1
truth = 0.5
experiment.shots = 30
heuristic.kind = fixed-grid
heuristic.increment = 0.5
sampler.particles = 100
";

#[test]
fn infer_writes_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PRECESSION);
    let out = dir.path().join("out");
    let o = out.display().to_string();
    let run = || {
        qbi(&[
            "infer",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--runs",
            "3",
            "--out",
            &o,
            "--workers",
            "1",
        ])
    };
    let first = run();
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let runs = fs::read_to_string(out.join("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    assert!(out.join("traces/run_00002.csv").exists());
    let second = run();
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(agg, fs::read_to_string(out.join("aggregate.csv")).unwrap());
    assert_eq!(runs, fs::read_to_string(out.join("runs.jsonl")).unwrap());

    let rep = qbi(&["report", "--dir", &o]);
    assert!(rep.status.success());
    assert_eq!(rep.stdout, first.stdout);
    assert_eq!(agg, fs::read_to_string(out.join("aggregate.csv")).unwrap());
}

#[test]
fn simulate_then_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PRECESSION);
    let data = dir.path().join("data.csv").display().to_string();
    let s = qbi(&["simulate", "--config", &cfg, "--seed", "2", "--out", &data]);
    assert!(s.status.success());
    let text = fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("t,m,theta_ctl,outcome\n"));
    assert_eq!(text.lines().count(), 31);
    let ingest = PRECESSION.replace("truth = 0.5", &format!("dataset = {data}"));
    let cfg2 = write_config(dir.path(), &ingest);
    let r = qbi(&["infer", "--config", &cfg2, "--runs", "2"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("omega = "));
}

#[test]
fn sweep_writes_one_directory_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), PRECESSION);
    let o = dir.path().join("sweep").display().to_string();
    let r = qbi(&[
        "sweep",
        "--config",
        &cfg,
        "--key",
        "sampler.particles",
        "--values",
        "50,80",
        "--out",
        &o,
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(dir.path().join("sweep/sampler.particles=50/summary.txt").exists());
    assert!(dir.path().join("sweep/sampler.particles=80/summary.txt").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), &format!("{PRECESSION}hmc.epsilon = fast\n"));
    let r = qbi(&["infer", "--config", &bad]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("hmc.epsilon"));
    let r = qbi(&["infer", "--config", "/nonexistent/exp.cfg"]);
    assert_eq!(r.status.code(), Some(2));

    // outcome 0 at zero delay is impossible under T1 decay
    let data = dir.path().join("impossible.csv");
    fs::write(&data, "t,m,theta_ctl,outcome\n0,,,0\n").unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            "model.kind = t1-decay\nmodel.lower = 1\nmodel.upper = 2\ndataset = {}\nsampler.particles = 10\n",
            data.display()
        ),
    );
    let r = qbi(&["infer", "--config", &cfg, "--runs", "2"]);
    assert_eq!(r.status.code(), Some(3));

    let r = qbi(&["infer", "--config", &bad, "--format", "xml"]);
    assert_eq!(r.status.code(), Some(2));
}
