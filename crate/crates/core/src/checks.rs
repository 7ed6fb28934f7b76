//! Invariant suites and oracle comparisons behind the `check` command.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::algebra::{canonical_bracket, normal_order, AlgebraSpec, BracketEntry, OperatorPoly};
use crate::constraints::{
    check_first_class, count_independent_flows, default_elimination, solve_newton, ReducedSystem,
};
use crate::dynamics::{from_hamiltonian, integrate, uniform_grid, IntegratorConfig};
use crate::moments::{state_variables, MomentAlgebra, MomentPoly, MomentVar, StatePoint};
use crate::oracle::{energy_quadrature, wavepacket_moments, GaussianSpec};
use crate::pipeline::{derive, solve, Derived, Model};
use crate::poly::{Atom, Exps, Poly};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub metric: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, metric: impl Into<String>) -> Self {
        CheckResult { name: name.to_string(), passed, metric: metric.into() }
    }

    pub fn line(&self) -> String {
        format!("CHECK {} {} {}", self.name, if self.passed { "PASS" } else { "FAIL" }, self.metric)
    }
}

fn random_word(rng: &mut ChaCha8Rng, n: usize, max_len: usize) -> Vec<usize> {
    let len = rng.gen_range(1..=max_len);
    (0..len).map(|_| rng.gen_range(0..n)).collect()
}

/// Reducing a word in one go agrees with reducing any split and multiplying.
pub fn pbw_confluence(alg: &Arc<AlgebraSpec>, words: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..words {
        let w = random_word(&mut rng, alg.n(), 6);
        let whole = normal_order(alg, &w);
        for k in 1..w.len() {
            let split = normal_order(alg, &w[..k]).multiply(&normal_order(alg, &w[k..]));
            if split.as_ref() != Ok(&whole) {
                bad += 1;
            }
        }
    }
    CheckResult::new("pbw_confluence", bad == 0, format!("words={} mismatches={}", words, bad))
}

pub fn hbar_grading(alg: &Arc<AlgebraSpec>, cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table_ok = alg.check_hbar_grading().is_ok();
    let mut worst = i32::MAX;
    for _ in 0..cases {
        let a = normal_order(alg, &random_word(&mut rng, alg.n(), 3));
        let b = normal_order(alg, &random_word(&mut rng, alg.n(), 3));
        if let Ok(c) = a.commutator(&b) {
            if let Some(k) = c.min_hbar_power() {
                worst = worst.min(k);
            }
        }
    }
    let passed = table_ok && worst >= 1;
    let shown = if worst == i32::MAX { "none".to_string() } else { worst.to_string() };
    CheckResult::new("hbar_grading", passed, format!("min_hbar_power={}", shown))
}

fn random_moment_poly(rng: &mut ChaCha8Rng, vars: &[MomentVar]) -> MomentPoly {
    let mut p = Poly::zero();
    for _ in 0..rng.gen_range(1..=2) {
        let c = rng.gen_range(-3i64..=3);
        if c == 0 {
            continue;
        }
        let mut t = Poly::int(c);
        for _ in 0..rng.gen_range(1..=2) {
            t = t.mul(&vars[rng.gen_range(0..vars.len())].poly());
        }
        p = p.add(&t);
    }
    p
}

/// Antisymmetry, Jacobi and Leibniz rule of the moment bracket on random
/// polynomials, compared exactly.
pub fn bracket_properties(ma: &MomentAlgebra, cases: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars = state_variables(ma.n(), 2);
    let (mut anti, mut jac, mut leib) = (0, 0, 0);
    for _ in 0..cases {
        let f = random_moment_poly(&mut rng, &vars);
        let g = random_moment_poly(&mut rng, &vars);
        let h = random_moment_poly(&mut rng, &vars);
        let fg = ma.poisson_bracket(&f, &g);
        if !fg.add(&ma.poisson_bracket(&g, &f)).is_zero() {
            anti += 1;
        }
        let j = ma
            .poisson_bracket(&f, &ma.poisson_bracket(&g, &h))
            .add(&ma.poisson_bracket(&g, &ma.poisson_bracket(&h, &f)))
            .add(&ma.poisson_bracket(&h, &fg));
        if !j.is_zero() {
            jac += 1;
        }
        let lhs = ma.poisson_bracket(&f, &g.mul(&h));
        let rhs = fg.mul(&h).add(&g.mul(&ma.poisson_bracket(&f, &h)));
        if !lhs.sub(&rhs).is_zero() {
            leib += 1;
        }
    }
    vec![
        CheckResult::new("bracket_antisymmetry", anti == 0, format!("cases={} failures={}", cases, anti)),
        CheckResult::new("bracket_jacobi", jac == 0, format!("cases={} failures={}", cases, jac)),
        CheckResult::new("bracket_leibniz", leib == 0, format!("cases={} failures={}", cases, leib)),
    ]
}

/// The canonical pair `(q, p)` used by the integrator checks.
pub fn oscillator_algebra() -> MomentAlgebra {
    let names: Vec<String> = vec!["q".into(), "p".into()];
    let entries = vec![BracketEntry { left: 0, right: 1, value: canonical_bracket(2) }];
    MomentAlgebra::new(Arc::new(AlgebraSpec::new(names, entries, None).expect("canonical pair")))
}

fn oscillator_exact(init: [f64; 5], t: f64) -> [f64; 5] {
    let [q, p, qq, qp, pp] = init;
    let (s, c) = t.sin_cos();
    [
        q * c + p * s,
        p * c - q * s,
        qq * c * c + 2.0 * qp * s * c + pp * s * s,
        (pp - qq) * s * c + qp * (c * c - s * s),
        qq * s * s - 2.0 * qp * s * c + pp * c * c,
    ]
}

/// Largest deviation of the RK4 solution for `H = (p^2 + q^2)/2` from the
/// exact rotation over one period with `steps` steps.
pub fn oscillator_error(steps: usize) -> f64 {
    let ma = oscillator_algebra();
    let a = ma.algebra().clone();
    let q = OperatorPoly::generator(&a, 0);
    let p = OperatorPoly::generator(&a, 1);
    let h = q
        .multiply(&q)
        .and_then(|qq| Ok(qq.add(&p.multiply(&p)?)))
        .expect("same algebra")
        .scale(&Poly::ratio(1, 2));
    let es = from_hamiltonian(&ma, &h, 2);
    let init = [1.0, 0.3, 0.02, 0.004, 0.01];
    let vars = [
        MomentVar::Expect(0),
        MomentVar::Expect(1),
        MomentVar::Moment(Exps::new(vec![2, 0])),
        MomentVar::Moment(Exps::new(vec![1, 1])),
        MomentVar::Moment(Exps::new(vec![0, 2])),
    ];
    let mut s = StatePoint::new(0.01);
    for (v, x) in vars.iter().zip(init) {
        s.set(v.clone(), x);
    }
    let grid = uniform_grid(0.0, 2.0 * PI, steps);
    let tr = integrate(&es, &ma, &s, &grid, &IntegratorConfig::default()).expect("oscillator integrates");
    let mut worst: f64 = 0.0;
    for (k, t) in tr.clock.iter().enumerate() {
        let exact = oscillator_exact(init, *t);
        let st = tr.state_at(k);
        for (v, x) in vars.iter().zip(exact) {
            worst = worst.max((st.get(v).unwrap_or_default() - x).norm());
        }
    }
    worst
}

pub fn rk4_order_ratio() -> f64 {
    oscillator_error(40) / oscillator_error(80)
}

fn generic_suite(model: &Model, out: &mut Vec<CheckResult>) {
    let alg = model.ma.algebra();
    let seed = model.cfg.check.seed;
    let cases = model.cfg.check.property_cases;
    out.push(CheckResult::new("algebra_antisymmetry", alg.is_antisymmetric(), "table"));
    out.push(CheckResult::new("algebra_jacobi", alg.jacobi_violation().is_none(), "all generator triples"));
    out.push(pbw_confluence(alg, 2 * cases, seed));
    out.push(hbar_grading(alg, cases, seed));
    out.extend(bracket_properties(&model.ma, cases, seed));
    let e = oscillator_error(6284);
    out.push(CheckResult::new("oscillator_exactness", e < 1e-9, format!("max_error={:.3e}", e)));
    let r = rk4_order_ratio();
    out.push(CheckResult::new("rk4_order", (r - 16.0).abs() <= 2.0, format!("ratio={:.3}", r)));
}

/// Sign of each coordinate under `(x, px) -> (-x, -px)` for the clock pair.
fn reflection_sign(v: &MomentVar, pair: [usize; 2]) -> f64 {
    let odd = match v {
        MomentVar::Expect(i) => pair.contains(i) as u32,
        MomentVar::Moment(e) => e.0[pair[0]] + e.0[pair[1]],
    };
    if odd % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn max_gap(a: &StatePoint, b: &StatePoint, vars: &[MomentVar], sign: impl Fn(&MomentVar) -> f64) -> f64 {
    vars.iter()
        .map(|v| (a.get(v).unwrap_or_default() - b.get(v).unwrap_or_default() * sign(v)).norm())
        .fold(0.0, f64::max)
}

fn constrained_suite(model: &Model, derived: &Derived, out: &mut Vec<CheckResult>) -> Option<(ReducedSystem, StatePoint)> {
    let cs = derived.constraints.as_ref()?;
    let gf = derived.gauge.as_ref()?;
    let n = model.ma.n();
    let quadratic = model.cfg.constraint.as_ref().map(|c| c.degree()) == Some(2);
    let expected = if quadratic && cs.half_order == 2 { Some(1 + n) } else { None };
    out.push(CheckResult::new(
        "constraint_count",
        expected.is_none_or(|e| e == cs.len()),
        format!("functions={} variables={}", cs.len(), cs.variables().len()),
    ));
    match check_first_class(&model.ma, cs) {
        Ok(rep) => {
            let worst = rep.pairs.iter().filter_map(|p| p.grade).min();
            let metric = match worst {
                Some(g) => format!("pairs={} min_residual_grade={}", rep.pairs.len(), g),
                None => format!("pairs={} residuals=0", rep.pairs.len()),
            };
            out.push(CheckResult::new("first_class_closure", rep.passed(), metric));
        }
        Err(e) => out.push(CheckResult::new("first_class_closure", false, e.to_string())),
    }

    let branch = model.cfg.solve.branch;
    let solved = match solve(model, derived, Some(branch)) {
        Ok(s) => s,
        Err(e) => {
            out.push(CheckResult::new("solve", false, e.to_string()));
            return None;
        }
    };
    let rs = solved.reduced.clone()?;
    let res = solved.newton_residual.unwrap_or(f64::INFINITY);
    out.push(CheckResult::new(
        "newton_residual",
        res < 1e-12,
        format!("residual={:.3e} series_gap={:.3e}", res, solved.series_newton_gap.unwrap_or(f64::NAN)),
    ));
    let c_ham = rs.c_ham.clone()?;
    let rate = rs
        .on_surface(&model.ma.poisson_bracket(&MomentVar::Expect(rs.clock).poly(), &c_ham))
        .ok();
    out.push(CheckResult::new(
        "clock_rate",
        rate.as_ref() == Some(&Poly::one()),
        format!("{{clock, C_Ham}}={}", rate.map(|r| r.dump(model.names())).unwrap_or_default()),
    ));
    let mut moved = 0;
    for (v, _) in &gf.conditions {
        let b = rs.on_surface(&model.ma.poisson_bracket(&v.poly(), &c_ham));
        if !b.map(|p| p.is_zero_mod_roots()).unwrap_or(false) {
            moved += 1;
        }
    }
    out.push(CheckResult::new(
        "gauge_preservation",
        moved == 0,
        format!("conditions={} violated={}", gf.conditions.len(), moved),
    ));

    let init = model.initial_state().ok()?;
    let mine = rs.complete_state(&init).ok()?;
    match solve(model, derived, Some(-branch)) {
        Ok(other) => {
            let ors = other.reduced.as_ref()?;
            let theirs = ors.complete_state(&init).ok()?;
            let pair = [rs.clock, rs.momentum];
            let elim: Vec<MomentVar> = rs.eliminated.iter().map(|(v, _)| v.clone()).collect();
            let gap = max_gap(&mine, &theirs, &elim, |v| reflection_sign(v, pair));
            let h1 = c_ham.eval(&|a| mine.lookup(a)).unwrap_or_default();
            let h2 = ors.c_ham.as_ref()?.eval(&|a| theirs.lookup(a)).unwrap_or_default();
            let hgap = (h1 + h2).norm();
            let gap = gap.max(hgap);
            out.push(CheckResult::new("branch_symmetry", gap < 1e-12, format!("max_gap={:.3e}", gap)));
        }
        Err(e) => out.push(CheckResult::new("branch_symmetry", false, e.to_string())),
    }

    let elim = model
        .cfg
        .solve
        .eliminate
        .clone()
        .or_else(|| default_elimination(&model.ma, rs.clock, cs.half_order).ok())?;
    let mut generic = mine.clone();
    for (k, (v, _)) in gf.conditions.iter().enumerate() {
        if !elim.contains(v) {
            let x = generic.get(v).unwrap_or_default();
            generic.set(v.clone(), x + 1e-5 * (k as f64 + 1.0) * if k % 2 == 0 { 1.0 } else { -1.0 });
        }
    }
    let flows = solve_newton(cs, None, &elim, &generic, Some(branch))
        .and_then(|ns| count_independent_flows(&model.ma, cs, &ns.point, 1e-9, 1e-9));
    match flows {
        Ok(r) => out.push(CheckResult::new(
            "independent_flows",
            r + 1 == cs.len(),
            format!("rank={} functions={}", r, cs.len()),
        )),
        Err(e) => out.push(CheckResult::new("independent_flows", false, e.to_string())),
    }
    Some((rs, mine))
}

/// `pt^2 - p^2 - m^2` on `[t, pt, q, p]` with clock `t`.
pub fn is_particle(model: &Model) -> bool {
    let names = model.names();
    if names != ["t", "pt", "q", "p"] || model.cfg.clock != Some(0) || !model.cfg.parameters.contains_key("m") {
        return false;
    }
    let alg = model.ma.algebra();
    let pt = OperatorPoly::generator(alg, 1);
    let p = OperatorPoly::generator(alg, 3);
    let m = Poly::atom(Atom::param("m"));
    let c = pt
        .multiply(&pt)
        .and_then(|a| Ok(a.sub(&p.multiply(&p)?)))
        .map(|a| a.sub(&OperatorPoly::scalar(alg, m.mul(&m))));
    c.ok().as_ref() == model.cfg.constraint.as_ref()
}

pub const GOLDEN_C: &str = "<pt>^2 - <p>^2 - m^2 + D(pt^2) - D(p^2)";
pub const GOLDEN_CT: &str = "2*<pt>*D(t pt) + i*<pt>*hbar - 2*<p>*D(t p)";

/// Effective energy `|<pt>|` of the solved surface at momentum `p0` and
/// spread `dpp`.
pub fn effective_energy(rs: &ReducedSystem, base: &StatePoint, p0: f64, dpp: f64) -> Option<f64> {
    let mut s = base.clone();
    s.set(MomentVar::Expect(3), p0);
    s.set(MomentVar::Moment(Exps::new(vec![0, 0, 0, 2])), dpp);
    let st = rs.complete_state(&s).ok()?;
    Some(st.get(&MomentVar::Expect(rs.momentum))?.re * rs.branch as f64)
}

fn particle_suite(model: &Model, derived: &Derived, rs: &ReducedSystem, init: &StatePoint, out: &mut Vec<CheckResult>) {
    let cs = derived.constraints.as_ref().expect("constrained model");
    let names = model.names();
    let dump_of = |label: &str| {
        (0..cs.len())
            .find(|&i| cs.label(i) == label)
            .map(|i| cs.functions[i].dump(names))
            .unwrap_or_default()
    };
    let c0 = dump_of("1");
    out.push(CheckResult::new("golden_C", c0 == GOLDEN_C, c0));
    if cs.half_order == 2 {
        let ct = dump_of("t");
        out.push(CheckResult::new("golden_C_t", ct == GOLDEN_CT, ct));
    }
    let m = model.cfg.param_values().get("m").map(|z| z.re).unwrap_or(1.0);
    let hbar = model.cfg.hbar;
    let p0 = init.get(&MomentVar::Expect(3)).unwrap_or_default().re;
    let dpp = init.get(&MomentVar::Moment(Exps::new(vec![0, 0, 0, 2]))).unwrap_or_default().re;
    if dpp > 0.0 && m > 0.0 {
        for (name, spread, tol) in [("energy_oracle", dpp, model.cfg.check.energy_tol), ("energy_oracle_wide", 1e-2, 1e-3)] {
            let g = GaussianSpec::from_momentum_variance(0.0, p0, spread, hbar);
            let res = energy_quadrature(&g, m).ok().zip(effective_energy(rs, init, p0, spread));
            match res {
                Some((exact, eff)) => {
                    let rel = ((eff - exact) / exact).abs();
                    out.push(CheckResult::new(name, rel < tol, format!("dpp={:e} rel_error={:.3e}", spread, rel)));
                }
                None => out.push(CheckResult::new(name, false, "quadrature or evaluation failed")),
            }
        }
        let g = GaussianSpec::from_momentum_variance(0.0, p0, dpp, hbar);
        let dt = 1e-3;
        let v_oracle = wavepacket_moments(&g, m, &[0.0, dt])
            .ok()
            .map(|w| (w[1].get(&MomentVar::Expect(0)).unwrap_or_default().re - g.q0) / dt);
        let v_eff = crate::dynamics::derive_equations(&model.ma, rs)
            .ok()
            .and_then(|es| es.rhs_of(&MomentVar::Expect(2)).cloned())
            .and_then(|r| r.eval(&|a| init.lookup(a)).ok());
        match v_oracle.zip(v_eff) {
            Some((vo, ve)) => {
                let target = -(rs.branch as f64) * vo;
                let rel = ((ve.re - target) / target).abs();
                out.push(CheckResult::new(
                    "velocity_oracle",
                    rel < model.cfg.check.velocity_tol,
                    format!("rel_error={:.3e}", rel),
                ));
            }
            None => out.push(CheckResult::new("velocity_oracle", false, "evaluation failed")),
        }
    }
    let drift = crate::dynamics::derive_equations(&model.ma, rs).ok().and_then(|es| {
        let tr = integrate(&es, &model.ma, init, &uniform_grid(0.0, 10.0, 10_000), &IntegratorConfig::default()).ok()?;
        let det = |k: usize| {
            let s = tr.state_at(k);
            let g = |e: [u32; 4]| s.get(&MomentVar::Moment(Exps::new(e.to_vec()))).unwrap_or_default().re;
            g([0, 0, 2, 0]) * g([0, 0, 0, 2]) - g([0, 0, 1, 1]).powi(2)
        };
        let d0 = det(0);
        Some((0..tr.clock.len()).map(|k| (det(k) - d0).abs()).fold(0.0, f64::max))
    });
    match drift {
        Some(d) => out.push(CheckResult::new(
            "determinant_drift",
            d < model.cfg.check.drift_tol,
            format!("steps=10000 max_drift={:.3e}", d),
        )),
        None => out.push(CheckResult::new("determinant_drift", false, "integration failed")),
    }
}

/// Runs every applicable suite for the model.
pub fn run_checks(model: &Model) -> Vec<CheckResult> {
    let mut out = Vec::new();
    generic_suite(model, &mut out);
    let derived = derive(model);
    if let Some((rs, init)) = constrained_suite(model, &derived, &mut out) {
        if is_particle(model) {
            particle_suite(model, &derived, &rs, &init, &mut out);
        }
    }
    out
}


#[cfg(test)]
mod bundled {
    use super::*;

    #[test]
    fn bundled_particle_passes_every_check() {
        let model = Model::parse(include_str!("../../../models/relativistic_particle.cfg")).unwrap();
        let results = run_checks(&model);
        for r in &results {
            println!("{}", r.line());
        }
        assert!(results.iter().all(|r| r.passed));
        assert!(results.len() >= 20);
    }
}
