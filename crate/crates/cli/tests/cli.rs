use std::path::Path;
use std::process::{Command, Output};

fn snewt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snewt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SMALL_RUN: &str = "\
[problem]
family = linear
d = 3
[method]
tau = 2
[experiment]
n_iters = 100
n_reps = 2
record_every = 10
[output]
aggregate = agg.csv
summary = sum.csv
";

#[test]
fn run_writes_deterministic_tables() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", SMALL_RUN);
    let first = snewt(dir.path(), &["run", "run.cfg"]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let agg = std::fs::read_to_string(dir.path().join("agg.csv")).unwrap();
    let sum = std::fs::read_to_string(dir.path().join("sum.csv")).unwrap();
    assert_eq!(agg.lines().count(), 11);
    assert!(agg.starts_with("t,rel_cov_err_wsc,rel_cov_err_plugin,rel_cov_err_bm,cov_wsc"));
    assert!(String::from_utf8_lossy(&first.stdout).contains("wsc"));

    let second = snewt(dir.path(), &["run", "run.cfg"]);
    assert!(second.status.success());
    assert_eq!(
        std::fs::read_to_string(dir.path().join("agg.csv")).unwrap(),
        agg
    );
    assert_eq!(
        std::fs::read_to_string(dir.path().join("sum.csv")).unwrap(),
        sum
    );
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "run.cfg", SMALL_RUN);
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = Command::new(env!("CARGO_BIN_EXE_snewt"))
            .args(["run", "run.cfg"])
            .env("SNEWT_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(std::fs::read_to_string(dir.path().join("agg.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn oracle_prints_parseable_matrices() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "o.cfg",
        "[problem]\nfamily = linear\nd = 3\n[method]\ntau = exact\n[schedule]\nbeta = 0.7\n",
    );
    let out = snewt(dir.path(), &["oracle", "o.cfg"]);
    assert!(out.status.success());
    let blocks =
        snewt::oracle::parse_named_matrices(&String::from_utf8(out.stdout).unwrap()).unwrap();
    let xi = &blocks.iter().find(|(n, _)| n == "xi_star").unwrap().1;
    assert_eq!(xi.shape(), (3, 3));
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(xi[(i, j)], if i == j { 0.5 } else { 0.0 });
        }
    }

    let to_file = snewt(dir.path(), &["oracle", "o.cfg", "--out", "m.txt"]);
    assert!(to_file.status.success());
    assert!(std::fs::read_to_string(dir.path().join("m.txt"))
        .unwrap()
        .contains("# omega_star"));
}

#[test]
fn slope_of_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from(
        "t,rel_cov_err_wsc,rel_cov_err_plugin,rel_cov_err_bm,cov_wsc,cov_plugin,cov_bm,cov_oracle,rel_var_err_wsc,rel_var_err_plugin\n",
    );
    for k in 1..=50 {
        let t = 100 * k;
        csv.push_str(&format!("{t},{},,,1,,,1,0,\n", (t as f64).powf(-0.25)));
    }
    write(dir.path(), "a.csv", &csv);
    let out = snewt(dir.path(), &["slope", "a.csv"]);
    assert!(out.status.success());
    let slope: f64 = String::from_utf8(out.stdout)
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((slope + 0.25).abs() < 1e-6);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "bad.cfg",
        "[problem]\nfamily = linear\nd = 2\n[schedule]\nbeta = 1.5\n",
    );
    let bad = snewt(dir.path(), &["run", "bad.cfg"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("schedule.beta"));

    assert_eq!(
        snewt(dir.path(), &["run", "missing.cfg"]).status.code(),
        Some(4)
    );
    assert_eq!(
        snewt(dir.path(), &["slope", "missing.csv"]).status.code(),
        Some(4)
    );

    // Singular averaged Hessian without a prior weight: every replication fails.
    write(
        dir.path(),
        "div.cfg",
        "[problem]\nfamily = linear\nd = 3\n[method]\ntau = exact\n[experiment]\nn_iters = 50\nn_reps = 2\nrecord_every = 10\n[output]\naggregate = d.csv\nsummary = s.csv\n",
    );
    assert_eq!(
        snewt(dir.path(), &["run", "div.cfg"]).status.code(),
        Some(3)
    );
}
