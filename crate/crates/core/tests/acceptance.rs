//! End-to-end acceptance run on the bundled relativistic particle.
//!
//! Prints one `ACCEPT <n> PASS|FAIL` line per criterion and exits non-zero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;

use effcon::checks::{
    bracket_properties, effective_energy, hbar_grading, oscillator_error, pbw_confluence, rk4_order_ratio, run_checks,
};
use effcon::config::parse_variable;
use effcon::constraints::{count_independent_flows, default_elimination, solve_newton, ReducedSystem};
use effcon::dynamics::derive_equations;
use effcon::moments::{MomentVar, StatePoint};
use effcon::oracle::{energy_quadrature, wavepacket_moments, GaussianSpec};
use effcon::pipeline::{derive, solve, Model};
use effcon::poly::Poly;

const CFG: &str = include_str!("../../../models/relativistic_particle.cfg");

const GOLDEN_C: &str = "<pt>^2 - <p>^2 - m^2 + D(pt^2) - D(p^2)";
const GOLDEN_CT: &str = "2*<pt>*D(t pt) + i*<pt>*hbar - 2*<p>*D(t p)";

struct Outcome {
    passed: bool,
    metric: String,
}

fn outcome(passed: bool, metric: impl Into<String>) -> Outcome {
    Outcome { passed, metric: metric.into() }
}

fn model() -> Model {
    Model::parse(CFG).expect("bundled config parses")
}

fn var(model: &Model, name: &str) -> MomentVar {
    parse_variable(name, model.names()).unwrap_or_else(|| panic!("unknown variable {}", name))
}

fn eval(p: &Poly, s: &StatePoint) -> Complex64 {
    p.eval(&|a| s.lookup(a)).expect("evaluable")
}

fn golden(label: &str, expected: &str, limit: Duration) -> Outcome {
    let start = Instant::now();
    let m = model();
    let d = derive(&m);
    let line = d
        .constraints_txt
        .lines()
        .find_map(|l| l.strip_prefix(&format!("C[{}] = ", label)))
        .unwrap_or("")
        .to_string();
    let took = start.elapsed();
    outcome(line == expected && took < limit, format!("dump=\"{}\" runtime={:.3}s", line, took.as_secs_f64()))
}

fn counts() -> Outcome {
    let m = model();
    let d = derive(&m);
    let cs = d.constraints.as_ref().unwrap();
    let gf = d.gauge.as_ref().unwrap();
    let s = solve(&m, &d, None).unwrap();
    let rs = s.reduced.as_ref().unwrap();
    let elim = default_elimination(&m.ma, rs.clock, cs.half_order).unwrap();
    // A generic on-shell point: clock moments away from their gauge values.
    let mut at = rs.complete_state(&m.initial_state().unwrap()).unwrap();
    for (k, (v, _)) in gf.conditions.iter().enumerate() {
        if !elim.contains(v) {
            at.set(v.clone(), 2e-5 * (k as f64 + 1.0));
        }
    }
    let ns = solve_newton(cs, None, &elim, &at, Some(rs.branch)).unwrap();
    let rank = count_independent_flows(&m.ma, cs, &ns.point, 1e-9, 1e-9).unwrap();
    let vars = cs.variables().len();
    outcome(
        cs.len() == 5 && vars == 14 && rank == 4,
        format!("functions={} variables={} independent_flows={}", cs.len(), vars, rank),
    )
}

fn reduced(m: &Model, branch: i8) -> (ReducedSystem, Option<f64>) {
    let d = derive(m);
    let s = solve(m, &d, Some(branch)).unwrap();
    (s.reduced.unwrap(), s.newton_residual)
}

/// Largest deviation of the eliminated variables from the closed-form
/// branch relations, with every second moment and hbar scaled by `eps`.
fn branch_deviation(m: &Model, rs: &ReducedSystem, eps: f64) -> f64 {
    let s = rs.branch as f64;
    let (mass, p) = (1.0, 0.5);
    let mut st = StatePoint::new(eps);
    st.set_param("m", mass);
    st.set(var(m, "t"), 0.3);
    st.set(var(m, "q"), -0.2);
    st.set(var(m, "p"), p);
    for (name, x) in [
        ("D(t^2)", 0.7),
        ("D(t q)", 0.4),
        ("D(t p)", -0.6),
        ("D(q^2)", 1.3),
        ("D(q p)", 0.35),
        ("D(p^2)", 0.9),
    ] {
        st.set(var(m, name), x * eps);
    }
    let (dtp, dqp, dpp) = (-0.6 * eps, 0.35 * eps, 0.9 * eps);
    let w = p * p + mass * mass;
    let e = w.sqrt() * (1.0 + mass * mass * dpp / (2.0 * w * w));
    let half_i_hbar = Complex64::new(0.0, eps / 2.0);
    let expected = [
        ("pt", Complex64::from(s * e)),
        ("D(t pt)", s * p / e * dtp - half_i_hbar),
        ("D(pt^2)", Complex64::from(w + dpp - e * e)),
        ("D(pt q)", s * p / e * (dqp + half_i_hbar)),
        ("D(pt p)", Complex64::from(s * p / e * dpp)),
    ];
    let mut worst: f64 = 0.0;
    for (name, want) in expected {
        let v = var(m, name);
        let (_, expr) = rs.eliminated.iter().find(|(x, _)| *x == v).expect("eliminated");
        worst = worst.max((eval(expr, &st) - want).norm());
    }
    worst
}

fn solution_branches() -> Outcome {
    let m = model();
    let mut metric = String::new();
    let mut ok = true;
    for branch in [1i8, -1] {
        let (rs, residual) = reduced(&m, branch);
        let coarse = branch_deviation(&m, &rs, 1e-3);
        let fine = branch_deviation(&m, &rs, 1e-4);
        // Agreement to working order: what is left is second order in eps.
        let scales = fine <= coarse / 50.0 + 1e-15;
        let residual = residual.unwrap_or(f64::INFINITY);
        ok &= fine < 1e-7 && scales && residual < 1e-12;
        metric.push_str(&format!(
            "branch{}: dev(1e-3)={:.2e} dev(1e-4)={:.2e} newton_residual={:.2e} ",
            if branch > 0 { "+" } else { "-" },
            coarse,
            fine,
            residual
        ));
    }
    outcome(ok, metric.trim_end())
}

fn residual_generator() -> Outcome {
    let m = model();
    let mut ok = true;
    let mut metric = String::new();
    for branch in [1i8, -1] {
        let (rs, _) = reduced(&m, branch);
        let c_ham = rs.c_ham.clone().unwrap();
        let rate = rs
            .on_surface(&m.ma.poisson_bracket(&MomentVar::Expect(rs.clock).poly(), &c_ham))
            .unwrap();
        let mut worst: f64 = 0.0;
        for (p, pt, dpp) in [(0.5, 1.2, 1e-4), (-1.7, 0.3, 3e-3), (2.4, -2.0, 5e-2)] {
            let mut st = StatePoint::new(0.01);
            st.set_param("m", 1.0);
            st.set(var(&m, "p"), p);
            st.set(var(&m, "pt"), pt);
            st.set(var(&m, "D(p^2)"), dpp);
            let w: f64 = p * p + 1.0;
            let e = w.sqrt() * (1.0 + dpp / (2.0 * w * w));
            let want = pt - branch as f64 * e;
            worst = worst.max((eval(&c_ham, &st) - want).norm());
        }
        ok &= rate == Poly::one() && worst < 1e-12;
        metric.push_str(&format!(
            "branch{}: |C_Ham - (pt {} E)|={:.2e} {{t,C_Ham}}={} ",
            if branch > 0 { "+" } else { "-" },
            if branch > 0 { "-" } else { "+" },
            worst,
            rate.dump(m.names())
        ));
    }
    outcome(ok, metric.trim_end())
}

fn energy_oracle() -> Outcome {
    let start = Instant::now();
    let m = model();
    let (rs, _) = reduced(&m, -1);
    let init = m.initial_state().unwrap();
    let mut ok = true;
    let mut metric = String::new();
    for (dpp, tol) in [(1e-4, 1e-6), (1e-2, 1e-3)] {
        let g = GaussianSpec::from_momentum_variance(0.0, 0.5, dpp, 0.01);
        let exact = energy_quadrature(&g, 1.0).unwrap();
        let eff = effective_energy(&rs, &init, 0.5, dpp).unwrap();
        let rel = ((eff - exact) / exact).abs();
        ok &= rel < tol;
        metric.push_str(&format!("dpp={:e}: rel={:.3e} (tol {:e}) ", dpp, rel, tol));
    }
    let took = start.elapsed();
    ok &= took < Duration::from_secs(5);
    metric.push_str(&format!("runtime={:.3}s", took.as_secs_f64()));
    outcome(ok, metric)
}

fn motion_oracle() -> Outcome {
    let m = model();
    let (rs, _) = reduced(&m, -1);
    let (p0, hbar) = (0.5, 0.01);
    let dp = 0.02 * p0;
    let mut init = m.initial_state().unwrap();
    init.set(var(&m, "p"), p0);
    init.set(var(&m, "D(p^2)"), dp * dp);
    let es = derive_equations(&m.ma, &rs).unwrap();
    let v_eff = eval(es.rhs_of(&var(&m, "q")).unwrap(), &init).re;
    let g = GaussianSpec::from_momentum_variance(0.0, p0, dp * dp, hbar);
    let h = 1e-3;
    let w = wavepacket_moments(&g, 1.0, &[-h, h]).unwrap();
    let q = |s: &StatePoint| s.get(&MomentVar::Expect(0)).unwrap().re;
    let v_oracle = (q(&w[1]) - q(&w[0])) / (2.0 * h);
    let rel = ((v_eff - v_oracle) / v_oracle).abs();
    outcome(rel < 1e-4, format!("effective={:.12} oracle={:.12} rel={:.3e}", v_eff, v_oracle, rel))
}

fn property_suites() -> Outcome {
    let m = model();
    let alg = m.ma.algebra();
    let mut parts = vec![pbw_confluence(alg, 200, 11), hbar_grading(alg, 100, 11)];
    parts.extend(bracket_properties(&m.ma, 100, 11));
    let wanted = ["branch_symmetry", "determinant_drift"];
    parts.extend(run_checks(&m).into_iter().filter(|c| wanted.contains(&c.name.as_str())));
    let ratio = rk4_order_ratio();
    let mut ok = parts.iter().all(|c| c.passed) && parts.len() == 7 && (ratio - 16.0).abs() <= 2.0;
    ok &= parts.iter().any(|c| c.name == "determinant_drift");
    let mut metric: Vec<String> = parts.iter().map(|c| format!("{}[{}]", c.name, c.metric)).collect();
    metric.push(format!("rk4_ratio={:.3}", ratio));
    outcome(ok, metric.join(" "))
}

fn oscillator_exactness() -> Outcome {
    // One period of the unit oscillator at step just under 1e-3.
    let e = oscillator_error(6284);
    outcome(e < 1e-9, format!("max_error={:.3e}", e))
}

fn main() -> ExitCode {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "golden_C", || golden("1", GOLDEN_C, Duration::from_secs(1))),
        (2, "golden_C_t", || golden("t", GOLDEN_CT, Duration::from_secs(1))),
        (3, "counts", counts),
        (4, "solution_branches", solution_branches),
        (5, "residual_generator", residual_generator),
        (6, "energy_oracle", energy_oracle),
        (7, "motion_oracle", motion_oracle),
        (8, "property_suites", property_suites),
        (9, "oscillator_exactness", oscillator_exactness),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        let o = std::panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {}", msg))
        });
        if !o.passed {
            failed += 1;
        }
        println!("ACCEPT {} {} {} {}", n, name, if o.passed { "PASS" } else { "FAIL" }, o.metric);
    }
    if failed > 0 {
        println!("{} acceptance criteria failed", failed);
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
