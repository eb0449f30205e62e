use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cvel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvel")).args(args).output().expect("cvel runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_linear_csv(path: &Path, n: usize) {
    let mut s = String::from("x,y\n");
    for i in 0..n {
        let x = (i as f64 / n as f64 - 0.5) * 4.0;
        let y = 0.8 * x + 0.3 * ((i * 7919 % 101) as f64 / 101.0 - 0.5);
        s.push_str(&format!("{x},{y}\n"));
    }
    fs::write(path, s).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn discover_writes_fit_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pair.csv");
    write_linear_csv(&input, 120);
    let out = dir.path().join("out");
    let o = cvel(&["discover", "--input", p(&input), "--family", "b-lin", "--iters", "50", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let fit = fs::read_to_string(out.join("fit.json")).unwrap();
    assert!(fit.contains("\"loss_xy\""));
    assert!(fit.contains("\"decision\""));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().count() > 1);
}

#[test]
fn unknown_family_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pair.csv");
    write_linear_csv(&input, 50);
    let o = cvel(&["discover", "--input", p(&input), "--family", "b-cubic", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analytic_scores_need_a_generator() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pair.csv");
    write_linear_csv(&input, 50);
    let o = cvel(&["discover", "--input", p(&input), "--estimator", "analytic", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn out_of_range_trim_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pair.csv");
    write_linear_csv(&input, 50);
    let o = cvel(&["discover", "--input", p(&input), "--trim", "0.7", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_and_malformed_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = cvel(&["discover", "--input", p(&missing), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y\n1,2\n3,abc\n").unwrap();
    let o = cvel(&["discover", "--input", p(&bad), "--out", p(dir.path())]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv"));
}

#[test]
fn generated_benchmark_runs_identically_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = cvel(&[
        "benchmark", "generate", "--benchmark", "anm", "--datasets", "4", "--n", "150", "--seed", "3", "--out", p(&data),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.json").exists());

    let mut reports = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("run{workers}"));
        let o = cvel(&[
            "benchmark", "run", "--data", p(&data), "--family", "b-quad", "--iters", "100", "--workers", workers, "--out", p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let results = fs::read_to_string(out.join("results.csv")).unwrap();
        assert_eq!(results.lines().count(), 5);
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn conflicting_sources_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = cvel(&["benchmark", "run", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = cvel(&["benchmark", "run", "--data", p(dir.path()), "--benchmark", "anm", "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn too_many_failed_datasets_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let tb = dir.path().join("tb");
    fs::create_dir(&tb).unwrap();
    let mut meta = String::new();
    for id in 1..=4u32 {
        meta.push_str(&format!("{id} 1 1 2 2 1\n"));
        let mut rows = String::new();
        for i in 0..60 {
            let x = i as f64 / 10.0;
            // pairs 2..4 have a constant effect
            let y = if id == 1 { (x * 1.3).sin() + 0.01 * i as f64 } else { 5.0 };
            rows.push_str(&format!("{x} {y}\n"));
        }
        fs::write(tb.join(format!("pair{id:04}.txt")), rows).unwrap();
    }
    fs::write(tb.join("pairmeta.txt"), meta).unwrap();
    let out = dir.path().join("out");
    let o = cvel(&["benchmark", "run", "--tuebingen", p(&tb), "--family", "b-lin", "--iters", "20", "--out", p(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 5);
}

#[test]
fn curves_are_written_in_original_units() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pair.csv");
    write_linear_csv(&input, 100);
    let out = dir.path().join("out");
    let o = cvel(&[
        "curves", "--input", p(&input), "--family", "b-lin", "--iters", "50", "--points", "3", "--grid", "11", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.contains('x') && header.contains('y'));
    assert_eq!(lines.count(), 33);
}

#[test]
fn score_eval_writes_quartiles() {
    let dir = tempfile::tempdir().unwrap();
    let o = cvel(&[
        "score-eval", "--n", "50", "80", "--datasets", "3", "--estimator", "stein", "kde", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().next().unwrap().contains("mse_cause_marg"));
}
