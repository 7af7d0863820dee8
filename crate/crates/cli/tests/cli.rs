use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use emckt_cli::{run, Mode, RunConfig};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Small cavity config in `dir` driving `deck` (a file under configs/).
fn write_config(dir: &Path, deck: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"
[mesh]
source = "box"
cells = [4, 3, 2]
size = [0.2, 0.15, 0.1]

[[port]]
label = "feed"
from = [0.1, 0.05, 0.0]
to = [0.1, 0.05, 0.05]

[time]
dt = "auto"
f_max = 2e9
steps = 300

[circuit]
netlist = "{}"

[archive]
path = "cavity.empx"

[output]
dir = "out"
{extra}
"#,
        configs().join(deck).display()
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn emckt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emckt")).args(args).output().unwrap()
}

fn csv_voltages(path: &Path) -> Vec<f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn compare_reports_l2_consistent_with_its_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "chebyshev.cir", "");
    let out = emckt(&["compare", "--config", cfg.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("relative L2"));
    let o = dir.path().join("out");
    let (c, r) = (csv_voltages(&o.join("coupled.csv")), csv_voltages(&o.join("replay.csv")));
    let num: f64 = c.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = c.iter().map(|a| a * a).sum();
    let recomputed = (num / den).sqrt();
    let reported: f64 = std::fs::read_to_string(o.join("compare.csv"))
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix("relative_l2,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(reported <= 1e-10);
    assert!((recomputed - reported).abs() <= 1e-12 * reported, "{recomputed} vs {reported}");
}

#[test]
fn replay_with_mismatched_time_step_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "chebyshev.cir", "");
    assert_eq!(emckt(&["extract", "--config", cfg.to_str().unwrap()]).status.code(), Some(0));
    let other = dir.path().join("other.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("f_max = 2e9", "f_max = 3e9");
    std::fs::write(&other, text).unwrap();
    let out = emckt(&["replay", "--config", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn extract_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "chebyshev.cir", "");
    let c = cfg.to_str().unwrap();
    let a = dir.path().join("a.empx");
    let b = dir.path().join("b.empx");
    for p in [&a, &b] {
        assert_eq!(emckt(&["extract", "--config", c, "--archive", p.to_str().unwrap()]).status.code(), Some(0));
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn failed_comparison_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "chebyshev.cir", "[compare]\nthreshold = 1e-30\n");
    let out = emckt(&["compare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_inputs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(emckt(&["coupled", "--config", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(emckt(&["simulate", "--config", "x"]).status.code(), Some(2));
    let cfg = write_config(dir.path(), "no_such.cir", "");
    assert_eq!(emckt(&["coupled", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn linear_resistor_port_needs_one_newton_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let deck = dir.path().join("thevenin.cir");
    std::fs::write(&deck, "V VS 1 0 gauss 1.5g 0.5g 1\nR RS 1 2 50\nP EM 2 0 port=0\n").unwrap();
    let cfg = write_config(dir.path(), "chebyshev.cir", "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace(&configs().join("chebyshev.cir").display().to_string(), &deck.display().to_string())
        .replace("steps = 300", "steps = 120");
    let cfg = RunConfig::parse(&text, dir.path()).unwrap();
    let report = run(Mode::Bench, &cfg).unwrap();
    let cost = report.cost.unwrap();
    assert_eq!(cost.newton_per_step, 1.0);
    assert_eq!(cost.n_p, 1);
    assert!(dir.path().join("out/cost_report.csv").exists());
    assert!(dir.path().join("out/cumulative_time.csv").exists());
}
