use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_effcon");

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models/relativistic_particle.cfg")
}

fn bundled_text() -> String {
    fs::read_to_string(bundled()).unwrap()
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

/// Writes `text` as a config inside `dir`.
fn config(dir: &TempDir, text: &str) -> PathBuf {
    let path = dir.path().join("model.cfg");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Columns of the trajectory CSV by header name.
fn csv_column(text: &str, name: &str) -> Vec<f64> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("no column {}", name));
    lines.map(|l| l.split(',').nth(k).unwrap().parse().unwrap()).collect()
}

#[test]
fn derive_writes_golden_constraints() {
    let dir = TempDir::new().unwrap();
    let o = run(&["derive"], &bundled(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("constraints.txt")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# half_order 2: 5 functions over 14 variables");
    assert_eq!(lines[1], "C[1] = <pt>^2 - <p>^2 - m^2 + D(pt^2) - D(p^2)");
    assert_eq!(lines[2], "C[t] = 2*<pt>*D(t pt) + i*<pt>*hbar - 2*<p>*D(t p)");
    let gauge = fs::read_to_string(dir.path().join("gauge.txt")).unwrap();
    assert_eq!(gauge.lines().next(), Some("# clock t"));
    assert!(gauge.contains("D(t p) = 0"));
}

#[test]
fn abelian_toy_has_one_nontrivial_constraint() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        &dir,
        "[algebra]\ngenerators = [a, b]\n[parameters]\nc = 3\n[constraint]\nelement = \"a - c*one\"\n[gauge]\nclock = \"b\"\n",
    );
    let o = run(&["derive"], &cfg, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("constraints.txt")).unwrap();
    assert!(text.lines().any(|l| l == "C[1] = <a> - c"), "{}", text);
}

#[test]
fn unknown_generator_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, &bundled_text().replace("pt^2 - p^2 - m^2", "pt^2 - w^2"));
    let o = run(&["derive"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 15, column 19"), "{}", stderr(&o));
    assert!(stderr(&o).contains("`w`"));
}

#[test]
fn unit_constraint_is_inconsistent() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, &bundled_text().replace("\"pt^2 - p^2 - m^2\"", "\"one\""));
    let o = run(&["solve"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("constraint inconsistent: ⟨𝟙⟩ = 1 ≠ 0"), "{}", stderr(&o));
}

#[test]
fn broken_jacobi_is_rejected() {
    let dir = TempDir::new().unwrap();
    let text = bundled_text().replace("\"q,p\" = \"i*hbar*one\"", "\"q,p\" = \"i*hbar*one\"\n\"t,q\" = \"i*hbar*t\"");
    let cfg = config(&dir, &text);
    let o = run(&["derive"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = run(&["check"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).lines().any(|l| l.starts_with("CHECK algebra FAIL")), "{}", stdout(&o));
}

#[test]
fn solve_reports_mirrored_branches() {
    let dir = TempDir::new().unwrap();
    let o = run(&["solve", "--branch", "+"], &bundled(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let plus = fs::read_to_string(dir.path().join("reduced.txt")).unwrap();
    assert!(plus.contains("C_Ham = -sqrt(<p>^2 + m^2) + <pt> - 1/2*sqrt(<p>^2 + m^2)^-3*D(p^2)*m^2"), "{}", plus);
    assert!(plus.contains("{<t>, C_Ham} = 1"));
    let residual: f64 = plus
        .lines()
        .find_map(|l| l.strip_prefix("newton_residual = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(residual < 1e-12);

    let o = run(&["solve", "--branch", "-"], &bundled(), dir.path());
    assert!(o.status.success());
    let minus = fs::read_to_string(dir.path().join("reduced.txt")).unwrap();
    assert!(minus.contains("<pt> = (-sqrt(<p>^2 + m^2))"));
    assert!(minus.contains("C_Ham = -(-sqrt(<p>^2 + m^2)) + <pt>"));
}

#[test]
fn newton_mode_lists_values() {
    let dir = TempDir::new().unwrap();
    let o = run(&["solve", "--mode", "newton"], &bundled(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("reduced.txt")).unwrap();
    assert!(text.contains("mode = newton"));
    assert!(text.contains("# newton values"));
}

#[test]
fn evolve_free_packet() {
    let dir = TempDir::new().unwrap();
    let o = run(&["evolve"], &bundled(), dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let t = csv_column(&csv, "clock");
    let q = csv_column(&csv, "<q>.re");
    let pp = csv_column(&csv, "D(p^2).re");
    assert_eq!(t.len(), 1001);
    let v = (q[q.len() - 1] - q[0]) / (t[t.len() - 1] - t[0]);
    for k in 0..t.len() {
        assert!((q[k] - q[0] - v * (t[k] - t[0])).abs() < 1e-12);
        assert_eq!(pp[k], pp[0]);
    }
    let log = fs::read_to_string(dir.path().join("monitor.log")).unwrap();
    assert_eq!(log.trim(), "no monitor violations");
}

#[test]
fn zero_moments_follow_the_classical_trajectory() {
    let dir = TempDir::new().unwrap();
    let text = bundled_text()
        .replace("\"D(q^2)\" = 0.25", "\"D(q^2)\" = 0")
        .replace("\"D(p^2)\" = \"hbar^2\"", "\"D(p^2)\" = 0");
    let cfg = config(&dir, &text);
    let o = run(&["evolve"], &cfg, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let t = csv_column(&csv, "clock");
    let q = csv_column(&csv, "<q>.re");
    let speed = 0.5 / (0.25f64 + 1.0).sqrt();
    for (tk, qk) in t.iter().zip(&q) {
        assert!((qk - speed * tk).abs() < 1e-12, "{} {}", tk, qk);
    }
    for name in ["D(q^2).re", "D(q p).re", "D(p^2).re"] {
        assert!(csv_column(&csv, name).iter().all(|x| *x == 0.0));
    }
}

#[test]
fn halting_on_uncertainty_violation() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, &bundled_text().replace("\"D(q^2)\" = 0.25", "\"D(q^2)\" = 1e-8"));
    let o = run(&["evolve", "--halt-on-violation"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("monitor.log")).unwrap();
    assert!(log.contains("determinant margin"), "{}", log);
}

#[test]
fn outputs_are_byte_stable() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for cmd in ["derive", "solve", "evolve"] {
        assert!(run(&[cmd], &bundled(), a.path()).status.success());
        assert!(run(&[cmd], &bundled(), b.path()).status.success());
    }
    for f in ["constraints.txt", "gauge.txt", "reduced.txt", "trajectory.csv", "monitor.log"] {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{} differs", f);
    }
}

#[test]
fn bundled_check_passes() {
    let dir = TempDir::new().unwrap();
    let o = run(&["check"], &bundled(), dir.path());
    let out = stdout(&o);
    assert!(o.status.success(), "{}", out);
    let lines: Vec<&str> = out.lines().filter(|l| l.starts_with("CHECK ")).collect();
    assert_eq!(lines.len(), 22);
    assert!(lines.iter().all(|l| l.split(' ').nth(2) == Some("PASS")));
}

#[test]
fn closure_holds_at_higher_order() {
    let dir = TempDir::new().unwrap();
    let o = run(&["check", "--half-order", "3"], &bundled(), dir.path());
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("CHECK first_class_closure PASS")), "{}", out);
}
