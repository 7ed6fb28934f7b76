//! Effective equations of motion in clock time, a fixed-step RK4 integrator
//! and the positivity and semiclassicality monitors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use num_complex::Complex64;
use thiserror::Error;

use crate::algebra::OperatorPoly;
use crate::constraints::{ReducedSystem, ReductionError};
use crate::moments::{state_variables, truncate, MomentAlgebra, MomentPoly, MomentVar, StatePoint};
use crate::poly::{Atom, Poly};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("clock does not advance along the residual flow")]
    DegenerateClock,
    #[error("reduced system has no residual generator")]
    MissingGenerator,
    #[error("step rejected at clock {clock}: non-finite state")]
    StepRejected { clock: f64 },
    #[error("monitor tripped at clock {clock}: {message}")]
    MonitorTripped { clock: f64, message: String },
    #[error("initial state has no value for {0}")]
    MissingInitial(String),
    #[error("clock grid must be strictly increasing")]
    BadGrid,
    #[error(transparent)]
    Reduction(#[from] ReductionError),
}

/// Right-hand sides `d v / d clock` for the physical coordinates.
#[derive(Clone, Debug)]
pub struct EffectiveSystem {
    /// Generator whose expectation value is the clock; `None` for plain
    /// Hamiltonian time evolution.
    pub clock: Option<usize>,
    pub names: Vec<String>,
    pub variables: Vec<MomentVar>,
    pub rhs: Vec<MomentPoly>,
    pub half_order: u32,
}

impl EffectiveSystem {
    pub fn clock_label(&self) -> String {
        match self.clock {
            Some(c) => MomentVar::Expect(c).name(&self.names),
            None => "time".to_string(),
        }
    }

    pub fn rhs_of(&self, v: &MomentVar) -> Option<&MomentPoly> {
        self.variables.iter().position(|w| w == v).map(|i| &self.rhs[i])
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (v, r) in self.variables.iter().zip(&self.rhs) {
            let _ = writeln!(out, "d{}/d{} = {}", v.name(&self.names), self.clock_label(), r.dump(&self.names));
        }
        out
    }
}

/// Equations generated by the residual generator of a reduced system.
pub fn derive_equations(ma: &MomentAlgebra, rs: &ReducedSystem) -> Result<EffectiveSystem, DynamicsError> {
    let c_ham = rs.c_ham.as_ref().ok_or(DynamicsError::MissingGenerator)?;
    let rate = rs.on_surface(&ma.poisson_bracket(&MomentVar::Expect(rs.clock).poly(), c_ham))?;
    if rate.is_zero_mod_roots() {
        return Err(DynamicsError::DegenerateClock);
    }
    let h = rs.half_order;
    let rhs = rs
        .physical_vars
        .iter()
        .map(|v| Ok(truncate(&rs.on_surface(&ma.poisson_bracket(&v.poly(), c_ham))?, h)))
        .collect::<Result<Vec<_>, ReductionError>>()?;
    Ok(EffectiveSystem {
        clock: Some(rs.clock),
        names: ma.names().to_vec(),
        variables: rs.physical_vars.clone(),
        rhs,
        half_order: h,
    })
}

/// Unconstrained evolution `d v / dt = {v, <H>}` for every coordinate up to
/// moment degree `half_order`.
pub fn from_hamiltonian(ma: &MomentAlgebra, h: &OperatorPoly, half_order: u32) -> EffectiveSystem {
    let vars = state_variables(ma.n(), half_order);
    let rhs = ma
        .hamiltonian_flow(h, &vars)
        .into_iter()
        .map(|(_, r)| truncate(&r, half_order))
        .collect();
    EffectiveSystem {
        clock: None,
        names: ma.names().to_vec(),
        variables: vars,
        rhs,
        half_order,
    }
}

#[derive(Clone, Debug)]
enum Factor {
    Slot(usize),
    Root(Box<Compiled>, f64),
}

/// Polynomial with constants folded in and variables mapped to slots.
#[derive(Clone, Debug)]
struct Compiled {
    terms: Vec<(Complex64, Vec<(Factor, i32)>)>,
}

impl Compiled {
    fn new(p: &Poly, slots: &BTreeMap<Atom, usize>, consts: &dyn Fn(&Atom) -> Option<Complex64>) -> Result<Self, String> {
        let mut terms = Vec::new();
        for (t, c) in p.terms() {
            let mut k = c.to_c64();
            let mut factors = Vec::new();
            for (a, e) in t {
                if let Some(&s) = slots.get(a) {
                    factors.push((Factor::Slot(s), *e));
                } else if let Atom::Root(r) = a {
                    let inner = Compiled::new(&r.radicand, slots, consts)?;
                    factors.push((Factor::Root(Box::new(inner), r.sign as f64), *e));
                } else {
                    let v = consts(a).ok_or_else(|| format!("{:?}", a))?;
                    k *= v.powi(*e);
                }
            }
            terms.push((k, factors));
        }
        Ok(Compiled { terms })
    }

    fn eval(&self, y: &[Complex64]) -> Complex64 {
        let mut total = Complex64::new(0.0, 0.0);
        for (k, factors) in &self.terms {
            let mut v = *k;
            for (f, e) in factors {
                let base = match f {
                    Factor::Slot(s) => y[*s],
                    Factor::Root(inner, sign) => inner.eval(y).sqrt() * *sign,
                };
                v *= if *e == 1 { base } else { base.powi(*e) };
            }
            total += v;
        }
        total
    }
}

/// Integrator options.
#[derive(Clone, Debug)]
pub struct IntegratorConfig {
    /// RK4 steps per grid interval.
    pub substeps: usize,
    pub halt_on_violation: bool,
    pub reality_tol: f64,
    /// Budget multiplier for the semiclassicality monitor; `None` disables it.
    pub semiclassical_budget: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            substeps: 1,
            halt_on_violation: false,
            reality_tol: 1e-9,
            semiclassical_budget: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepFlags {
    pub positivity_ok: bool,
    pub semiclassical_ok: bool,
    pub messages: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub clock_label: String,
    pub names: Vec<String>,
    pub variables: Vec<MomentVar>,
    pub clock: Vec<f64>,
    pub states: Vec<Vec<Complex64>>,
    pub flags: Vec<StepFlags>,
    pub hbar: f64,
}

impl Trajectory {
    pub fn column(&self, v: &MomentVar) -> Option<Vec<Complex64>> {
        let i = self.variables.iter().position(|w| w == v)?;
        Some(self.states.iter().map(|s| s[i]).collect())
    }

    pub fn state_at(&self, k: usize) -> StatePoint {
        let mut s = StatePoint::new(self.hbar);
        for (v, x) in self.variables.iter().zip(&self.states[k]) {
            s.set(v.clone(), *x);
        }
        s
    }

    pub fn write_csv<W: io::Write>(&self, mut w: W) -> io::Result<()> {
        let mut header = String::from("clock");
        for v in &self.variables {
            let name = v.name(&self.names);
            let _ = write!(header, ",{0}.re,{0}.im", name);
        }
        writeln!(w, "{}", header)?;
        for (t, row) in self.clock.iter().zip(&self.states) {
            let mut line = format!("{:.16e}", t);
            for x in row {
                let _ = write!(line, ",{:.16e},{:.16e}", x.re, x.im);
            }
            writeln!(w, "{}", line)?;
        }
        Ok(())
    }

    /// One line per grid point that raised a monitor message.
    pub fn monitor_log(&self) -> String {
        let mut out = String::new();
        for (t, f) in self.clock.iter().zip(&self.flags) {
            for m in &f.messages {
                let _ = writeln!(out, "{:.16e} {}", t, m);
            }
        }
        if out.is_empty() {
            out.push_str("no monitor violations\n");
        }
        out
    }
}

/// `n` equal intervals from `t0` to `t1`.
pub fn uniform_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| t0 + (t1 - t0) * k as f64 / n as f64).collect()
}

/// Fixed-step RK4 over the grid. The clock coordinate is set to the grid
/// values exactly.
pub fn integrate(
    es: &EffectiveSystem,
    ma: &MomentAlgebra,
    init: &StatePoint,
    grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory, DynamicsError> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DynamicsError::BadGrid);
    }
    let n = es.variables.len();
    let mut slots: BTreeMap<Atom, usize> = es.variables.iter().enumerate().map(|(i, v)| (v.atom(), i)).collect();
    let clock_slot = n;
    if let Some(c) = es.clock {
        slots.insert(Atom::Expect(c), clock_slot);
    }
    let consts = |a: &Atom| init.lookup(a);
    let compiled: Vec<Compiled> = es
        .rhs
        .iter()
        .map(|r| Compiled::new(r, &slots, &consts))
        .collect::<Result<_, _>>()
        .map_err(DynamicsError::MissingInitial)?;
    let mut y: Vec<Complex64> = Vec::with_capacity(n + 1);
    for v in &es.variables {
        y.push(init.get(v).ok_or_else(|| DynamicsError::MissingInitial(v.name(&es.names)))?);
    }
    y.push(Complex64::new(grid.first().copied().unwrap_or(0.0), 0.0));

    let f = |y: &[Complex64]| -> Vec<Complex64> { compiled.iter().map(|c| c.eval(y)).collect() };
    let mut traj = Trajectory {
        clock_label: es.clock_label(),
        names: es.names.clone(),
        variables: es.variables.clone(),
        clock: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        flags: Vec::with_capacity(grid.len()),
        hbar: init.hbar,
    };
    let record = |traj: &mut Trajectory, t: f64, y: &[Complex64]| -> Result<(), DynamicsError> {
        let mut s = StatePoint::new(init.hbar);
        for (v, x) in es.variables.iter().zip(y) {
            s.set(v.clone(), *x);
        }
        let pos = positivity_check(&s, ma, cfg.reality_tol);
        let mut flags = StepFlags {
            positivity_ok: pos.passed(cfg.reality_tol),
            semiclassical_ok: true,
            messages: pos.violations(cfg.reality_tol),
        };
        if let Some(c) = cfg.semiclassical_budget {
            let sc = semiclassicality_monitor(&s, c, &es.names);
            flags.semiclassical_ok = sc.passed();
            for (name, r) in &sc.flagged {
                flags.messages.push(format!("semiclassical budget exceeded by {} (ratio {:.6e})", name, r));
            }
        }
        let tripped = cfg.halt_on_violation && !(flags.positivity_ok && flags.semiclassical_ok);
        let message = flags.messages.join("; ");
        traj.clock.push(t);
        traj.states.push(y[..n].to_vec());
        traj.flags.push(flags);
        if tripped {
            return Err(DynamicsError::MonitorTripped { clock: t, message });
        }
        Ok(())
    };
    if let Some(&t0) = grid.first() {
        record(&mut traj, t0, &y)?;
    }
    let substeps = cfg.substeps.max(1);
    for w in grid.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let h = (tb - ta) / substeps as f64;
        for s in 0..substeps {
            let t = ta + h * s as f64;
            y[clock_slot] = Complex64::new(t, 0.0);
            let k1 = f(&y);
            let stage = |k: &[Complex64], a: f64, tt: f64| -> Vec<Complex64> {
                let mut z: Vec<Complex64> = y.iter().zip(k.iter().chain(std::iter::once(&Complex64::new(0.0, 0.0)))).map(|(x, d)| x + d * a).collect();
                z[clock_slot] = Complex64::new(tt, 0.0);
                z
            };
            let k2 = f(&stage(&k1, h / 2.0, t + h / 2.0));
            let k3 = f(&stage(&k2, h / 2.0, t + h / 2.0));
            let k4 = f(&stage(&k3, h, t + h));
            for i in 0..n {
                y[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (h / 6.0);
            }
            if y[..n].iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(DynamicsError::StepRejected { clock: t + h });
            }
        }
        y[clock_slot] = Complex64::new(tb, 0.0);
        record(&mut traj, tb, &y)?;
    }
    Ok(traj)
}

/// Reality, variance and uncertainty margins of a state.
#[derive(Clone, Debug, Default)]
pub struct PositivityReport {
    pub max_imag: f64,
    pub worst_imag: Option<String>,
    /// Smallest real part among the variances `(Δa)^2`.
    pub min_variance: Option<(String, f64)>,
    /// `(ΔA)^2 (ΔB)^2 - Re Δ(AB)^2 - |c hbar|^2 / 4` for canonical pairs.
    pub determinant_margins: Vec<(String, f64)>,
}

impl PositivityReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.violations(tol).is_empty()
    }

    pub fn violations(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_imag > tol {
            out.push(format!(
                "reality violated by {} (imaginary part {:.6e})",
                self.worst_imag.as_deref().unwrap_or("?"),
                self.max_imag
            ));
        }
        if let Some((name, v)) = &self.min_variance {
            if *v < -tol {
                out.push(format!("negative variance {} = {:.6e}", name, v));
            }
        }
        for (name, m) in &self.determinant_margins {
            if *m < -tol {
                out.push(format!("uncertainty determinant margin {} = {:.6e}", name, m));
            }
        }
        out
    }
}

/// Checks the physical coordinates present in `s`.
pub fn positivity_check(s: &StatePoint, ma: &MomentAlgebra, _tol: f64) -> PositivityReport {
    let names = ma.names();
    let mut rep = PositivityReport::default();
    for (v, x) in &s.values {
        if x.im.abs() > rep.max_imag {
            rep.max_imag = x.im.abs();
            rep.worst_imag = Some(v.name(names));
        }
        if let MomentVar::Moment(k) = v {
            if k.degree() == 2 && k.0.contains(&2) {
                let better = rep.min_variance.as_ref().is_none_or(|(_, m)| x.re < *m);
                if better {
                    rep.min_variance = Some((v.name(names), x.re));
                }
            }
        }
    }
    let n = ma.n();
    let alg = ma.algebra();
    let var = |i: usize, j: usize| -> Option<Complex64> {
        let mut e = vec![0u32; n];
        e[i] += 1;
        e[j] += 1;
        s.get(&MomentVar::Moment(crate::poly::Exps::new(e)))
    };
    for i in 0..n {
        for j in (i + 1)..n {
            let b = alg.bracket(i, j);
            if !b.linear.iter().all(Poly::is_zero) {
                continue;
            }
            let Some(c) = b.central.div_i_hbar().and_then(|q| q.as_constant()) else {
                continue;
            };
            if c.is_zero() {
                continue;
            }
            let (Some(a), Some(bb), Some(ab)) = (var(i, i), var(j, j), var(i, j)) else {
                continue;
            };
            let bound = (c.to_c64().norm() * s.hbar).powi(2) / 4.0;
            let margin = a.re * bb.re - ab.re * ab.re - bound;
            rep.determinant_margins
                .push((format!("{} {}", names[i], names[j]), margin));
        }
    }
    rep
}

#[derive(Clone, Debug, Default)]
pub struct SemiclassicalReport {
    /// Largest `|M| / (c hbar^(deg/2))` over the moments.
    pub worst_ratio: f64,
    pub flagged: Vec<(String, f64)>,
}

impl SemiclassicalReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

pub fn semiclassicality_monitor(s: &StatePoint, c: f64, names: &[String]) -> SemiclassicalReport {
    let mut rep = SemiclassicalReport::default();
    for (v, x) in &s.values {
        if let MomentVar::Moment(k) = v {
            let ratio = x.norm() / (c * s.hbar.powf(k.degree() as f64 / 2.0));
            rep.worst_ratio = rep.worst_ratio.max(ratio);
            if ratio > 1.0 {
                rep.flagged.push((v.name(names), ratio));
            }
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{canonical_bracket, AlgebraSpec, BracketEntry};
    use crate::poly::Exps;
    use std::sync::Arc;

    fn qp() -> MomentAlgebra {
        let names: Vec<String> = ["q", "p"].iter().map(|s| s.to_string()).collect();
        let entries = vec![BracketEntry { left: 0, right: 1, value: canonical_bracket(2) }];
        MomentAlgebra::new(Arc::new(AlgebraSpec::new(names, entries, None).unwrap()))
    }

    fn m2(a: u32, b: u32) -> MomentVar {
        MomentVar::Moment(Exps::new(vec![a, b]))
    }

    #[test]
    fn positivity_examples() {
        let ma = qp();
        let mut s = StatePoint::new(0.01);
        s.set(m2(2, 0), 0.005).set(m2(0, 2), 0.005).set(m2(1, 1), 0.0);
        let r = positivity_check(&s, &ma, 1e-9);
        assert!(r.determinant_margins[0].1.abs() < 1e-18);
        s.set(m2(2, 0), 1.0).set(m2(0, 2), 1.0);
        let r = positivity_check(&s, &ma, 1e-9);
        assert!((r.determinant_margins[0].1 - (1.0 - 0.000025)).abs() < 1e-15);
        assert!(r.passed(1e-9));
        s.set(m2(1, 1), Complex64::new(0.0, 0.1));
        let r = positivity_check(&s, &ma, 1e-9);
        assert!((r.max_imag - 0.1).abs() < 1e-15);
        assert!(!r.passed(1e-9));
    }

    #[test]
    fn semiclassical_examples() {
        let names: Vec<String> = vec!["q".into(), "p".into()];
        let mut s = StatePoint::new(0.01);
        s.set(m2(2, 0), 0.005).set(m2(0, 2), 0.005).set(m2(1, 1), 0.0);
        let r = semiclassicality_monitor(&s, 2.0, &names);
        assert!(r.passed() && (r.worst_ratio - 0.25).abs() < 1e-12);
        s.set(m2(2, 0), 1.0);
        assert!(!semiclassicality_monitor(&s, 2.0, &names).passed());
        let zero: StatePoint = {
            let mut z = StatePoint::new(0.01);
            z.set(m2(2, 0), 0.0);
            z
        };
        assert_eq!(semiclassicality_monitor(&zero, 2.0, &names).worst_ratio, 0.0);
    }

    #[test]
    fn oscillator_flow_and_rk4() {
        let ma = qp();
        let a = ma.algebra().clone();
        let q = OperatorPoly::generator(&a, 0);
        let p = OperatorPoly::generator(&a, 1);
        let h = q.multiply(&q).unwrap().add(&p.multiply(&p).unwrap()).scale(&Poly::ratio(1, 2));
        let es = from_hamiltonian(&ma, &h, 2);
        assert_eq!(es.rhs_of(&m2(2, 0)).unwrap(), &Poly::atom(m2(1, 1).atom()).scale(&crate::coeff::Coeff::from_int(2)));
        let mut init = StatePoint::new(0.01);
        init.set(MomentVar::Expect(0), 1.0).set(MomentVar::Expect(1), 0.0);
        init.set(m2(2, 0), 0.01).set(m2(1, 1), 0.0).set(m2(0, 2), 0.0025);
        let grid = uniform_grid(0.0, std::f64::consts::PI / 2.0, 200);
        let tr = integrate(&es, &ma, &init, &grid, &IntegratorConfig::default()).unwrap();
        let last = tr.states.last().unwrap();
        assert!((last[0].re - 0.0).abs() < 1e-9);
        assert!((last[1].re + 1.0).abs() < 1e-9);
        assert!((last[2].re - 0.0025).abs() < 1e-9);
        let mut csv = Vec::new();
        tr.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("clock,<q>.re,<q>.im,<p>.re,<p>.im,D(q^2).re"));
    }

    fn particle() -> (MomentAlgebra, OperatorPoly) {
        let names: Vec<String> = ["t", "pt", "q", "p"].iter().map(|s| s.to_string()).collect();
        let entries = vec![
            BracketEntry { left: 0, right: 1, value: canonical_bracket(4) },
            BracketEntry { left: 2, right: 3, value: canonical_bracket(4) },
        ];
        let alg = Arc::new(AlgebraSpec::new(names, entries, None).unwrap());
        let pt = OperatorPoly::generator(&alg, 1);
        let p = OperatorPoly::generator(&alg, 3);
        let m = Poly::atom(Atom::param("m"));
        let c = pt
            .multiply(&pt)
            .unwrap()
            .sub(&p.multiply(&p).unwrap())
            .sub(&OperatorPoly::scalar(&alg, m.mul(&m)));
        (MomentAlgebra::new(alg), c)
    }

    fn m4(v: [u32; 4]) -> MomentVar {
        MomentVar::Moment(Exps::new(v.to_vec()))
    }

    #[test]
    fn particle_velocity_and_determinant() {
        use crate::constraints::*;
        let (ma, c) = particle();
        let cs = generate_constraints(&ma, &c, 2);
        let gf = clock_gauge_conditions(&ma, 0, 2);
        let elim = default_elimination(&ma, 0, 2).unwrap();
        let mut rs = solve_surface(&cs, &gf, &elim, -1).unwrap();
        residual_generator(&ma, &cs, &mut rs).unwrap();
        let es = derive_equations(&ma, &rs).unwrap();
        let mut init = StatePoint::new(0.01);
        init.set_param("m", 1.0);
        init.set(MomentVar::Expect(2), 0.0).set(MomentVar::Expect(3), 1.0);
        init.set(m4([0, 0, 2, 0]), 0.005).set(m4([0, 0, 1, 1]), 0.0).set(m4([0, 0, 0, 2]), 0.005);
        let grid = uniform_grid(0.0, 10.0, 1000);
        let tr = integrate(&es, &ma, &init, &grid, &IntegratorConfig::default()).unwrap();
        let e = (2.0f64).sqrt();
        let q = tr.column(&MomentVar::Expect(2)).unwrap();
        let v0 = 1.0 / e * (1.0 - 3.0 * 0.005 / 8.0);
        assert!((q.last().unwrap().re - 10.0 * v0).abs() < 1e-10, "{:?}", q.last());
        let det = |k: usize| {
            let s = tr.state_at(k);
            let g = |v| s.get(&v).unwrap().re;
            g(m4([0, 0, 2, 0])) * g(m4([0, 0, 0, 2])) - g(m4([0, 0, 1, 1])).powi(2)
        };
        assert!((det(1000) - det(0)).abs() < 1e-12);
        assert_eq!(*tr.clock.last().unwrap(), 10.0);
    }
}
