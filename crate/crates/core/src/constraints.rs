//! Truncated constraint functions, closure and flow counting, clock gauge
//! fixing, solution of the constraint surface and the residual generator.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::algebra::{AlgebraSpec, OperatorPoly};
use crate::moments::{exponents_of_degree, state_variables, truncate, MomentAlgebra, MomentPoly, MomentVar, StatePoint};
use crate::poly::{Atom, Exps, Poly, PolyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("state is not on the constraint surface (|C| = {0:e})")]
    NotOnSurface(f64),
    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("seed is equidistant from both solution branches")]
    BranchAmbiguous,
    #[error("constraint inconsistent: {0}")]
    Inconsistent(String),
    #[error("gauge conditions leave no residual flow")]
    NoResidualFlow,
    #[error("gauge conditions leave {0} independent residual flows")]
    MultipleResidualFlows(usize),
    #[error("unsupported system: {0}")]
    UnsupportedSystem(String),
    #[error("unsupported generator: {0}")]
    UnsupportedGenerator(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
}

/// Truncated tower `<delta^A C>` for centered prefixes `A`.
#[derive(Clone, Debug)]
pub struct ConstraintSet {
    pub element: OperatorPoly,
    pub functions: Vec<MomentPoly>,
    pub labels: Vec<Exps>,
    pub half_order: u32,
}

impl ConstraintSet {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// All coordinates up to moment degree `half_order`.
    pub fn variables(&self) -> Vec<MomentVar> {
        state_variables(self.element.algebra().n(), self.half_order)
    }

    pub fn label(&self, i: usize) -> String {
        let names = self.element.algebra().names();
        prefix_label(&self.labels[i], names)
    }
}

pub fn prefix_label(a: &Exps, names: &[String]) -> String {
    if a.degree() == 0 {
        "1".to_string()
    } else {
        a.label(names)
    }
}

/// `prod_i (a_i - <a_i>)^{A_i}` in generator order.
pub fn prefix_operator(alg: &std::sync::Arc<AlgebraSpec>, a: &Exps) -> OperatorPoly {
    let mut op = OperatorPoly::identity(alg);
    for g in a.word() {
        op = op
            .multiply(&OperatorPoly::centered_generator(alg, g))
            .expect("same algebra");
    }
    op
}

pub fn generate_constraints(ma: &MomentAlgebra, c: &OperatorPoly, half_order: u32) -> ConstraintSet {
    let alg = ma.algebra();
    let mut functions = Vec::new();
    let mut labels = Vec::new();
    for d in 0..half_order {
        for a in exponents_of_degree(alg.n(), d) {
            let op = prefix_operator(alg, &a).multiply(c).expect("same algebra");
            let f = truncate(&ma.expand_expectation(&op), half_order);
            if f.is_zero() || functions.contains(&f) {
                continue;
            }
            functions.push(f);
            labels.push(a);
        }
    }
    ConstraintSet {
        element: c.clone(),
        functions,
        labels,
        half_order,
    }
}

/// Operator element for messages; the identity prints as `𝟙`.
pub fn element_label(c: &OperatorPoly) -> String {
    if *c == OperatorPoly::identity(c.algebra()) {
        "\u{1d7d9}".to_string()
    } else {
        c.dump()
    }
}

fn inconsistency(cs: &ConstraintSet) -> Option<ReductionError> {
    for (i, f) in cs.functions.iter().enumerate() {
        if let Some(c) = f.as_constant() {
            if !c.is_zero() {
                let what = if cs.labels[i].degree() == 0 {
                    element_label(&cs.element)
                } else {
                    format!("({})*C", cs.label(i))
                };
                return Some(ReductionError::Inconsistent(format!("\u{27e8}{}\u{27e9} = {} \u{2260} 0", what, c)));
            }
        }
    }
    None
}

/// Generator conjugate to `x`: the first `g` with a purely central,
/// nonzero bracket `[x, g]`.
pub fn conjugate_of(alg: &AlgebraSpec, x: usize) -> Option<usize> {
    (0..alg.n()).find(|&g| {
        g != x && {
            let b = alg.bracket(x, g);
            !b.central.is_zero() && b.linear.iter().all(Poly::is_zero)
        }
    })
}

/// `<g>` together with every moment `M(A + e_g)`, `1 <= |A| < half_order`.
pub fn direction_variables(n: usize, g: usize, half_order: u32) -> Vec<MomentVar> {
    let mut out = vec![MomentVar::Expect(g)];
    for d in 1..half_order {
        for a in exponents_of_degree(n, d) {
            out.push(MomentVar::Moment(a.add(&Exps::unit(n, g))));
        }
    }
    out
}

/// Powers of `x` in `p` with their coefficients; `None` for negative powers.
fn collect_powers(p: &Poly, x: &Atom) -> Option<BTreeMap<i32, Poly>> {
    let mut out: BTreeMap<i32, Poly> = BTreeMap::new();
    for (t, c) in p.terms() {
        let mut e = 0;
        let mut rest = Vec::with_capacity(t.len());
        for (a, k) in t {
            if a == x {
                e = *k;
            } else {
                rest.push((a.clone(), *k));
            }
        }
        if e < 0 {
            return None;
        }
        out.entry(e).or_default().add_assign(&Poly::monomial(rest, c.clone()));
    }
    Some(out)
}

/// First generator in which the classical part of the degree-0 function is
/// linear or quadratic with a single-term leading coefficient.
pub fn constraint_direction(cs: &ConstraintSet) -> Option<usize> {
    let f0 = cs.functions.iter().zip(&cs.labels).find(|(_, l)| l.degree() == 0)?.0;
    let classical = f0.grade_part(0);
    (0..cs.element.algebra().n()).find(|&g| {
        let Some(pw) = collect_powers(&classical, &Atom::Expect(g)) else {
            return false;
        };
        match pw.keys().max() {
            Some(&top) if top == 1 || top == 2 => pw[&top].as_monomial().is_some(),
            _ => false,
        }
    })
}

/// Classical solution for `x` of the grade-0 part of `f`; a quadratic picks
/// the root with the given sign.
fn classical_root(f: &Poly, x: &Atom, branch: i8) -> Result<Poly, ReductionError> {
    let pw = collect_powers(&f.grade_part(0), x)
        .ok_or_else(|| ReductionError::UnsupportedSystem("negative power of an eliminated variable".into()))?;
    let get = |k: i32| pw.get(&k).cloned().unwrap_or_default();
    match pw.keys().max() {
        Some(1) => {
            let inv = get(1)
                .inverse_monomial()
                .ok_or_else(|| ReductionError::UnsupportedSystem("linear coefficient is not a single term".into()))?;
            Ok(get(0).mul(&inv).neg())
        }
        Some(2) => {
            let (a, b, c) = (get(2), get(1), get(0));
            let inv_a = a
                .inverse_monomial()
                .ok_or_else(|| ReductionError::UnsupportedSystem("quadratic coefficient is not a single term".into()))?;
            let half = Poly::ratio(1, 2);
            let center = b.mul(&inv_a).mul(&half).neg();
            let disc = b.mul(&b).sub(&a.mul(&c).mul(&Poly::int(4)));
            let radicand = disc.mul(&inv_a).mul(&inv_a).mul(&Poly::ratio(1, 4));
            Ok(center.add(&Poly::root(radicand, branch)))
        }
        _ => Err(ReductionError::UnsupportedSystem(
            "classical constraint is not linear or quadratic in the eliminated expectation value".into(),
        )),
    }
}

fn var_grade(v: &MomentVar) -> i64 {
    match v {
        MomentVar::Expect(_) => 0,
        MomentVar::Moment(k) => k.degree() as i64,
    }
}

fn tidy(p: &Poly, max_grade: i64) -> Poly {
    p.truncate(max_grade).normalize_roots().truncate(max_grade)
}

/// Gauss-Jordan inverse using single-term pivots only.
fn invert_monomial_pivots(m: &[Vec<Poly>]) -> Result<Vec<Vec<Poly>>, ReductionError> {
    let n = m.len();
    let mut a: Vec<Vec<Poly>> = m.to_vec();
    let mut e: Vec<Vec<Poly>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { Poly::one() } else { Poly::zero() }).collect())
        .collect();
    let mut used_rows = vec![false; n];
    let mut pivots = Vec::with_capacity(n);
    for c in 0..n {
        let r = (0..n)
            .find(|&r| !used_rows[r] && a[r][c].as_monomial().is_some())
            .ok_or_else(|| ReductionError::UnsupportedSystem("leading Jacobian has no single-term pivot".into()))?;
        used_rows[r] = true;
        pivots.push((r, c));
        let inv = a[r][c].inverse_monomial().ok_or(PolyError::NotInvertible)?;
        for j in 0..n {
            a[r][j] = a[r][j].mul(&inv).normalize_roots();
            e[r][j] = e[r][j].mul(&inv).normalize_roots();
        }
        for k in 0..n {
            if k == r || a[k][c].is_zero() {
                continue;
            }
            let f = a[k][c].clone();
            for j in 0..n {
                a[k][j] = a[k][j].sub(&f.mul(&a[r][j])).normalize_roots();
                e[k][j] = e[k][j].sub(&f.mul(&e[r][j])).normalize_roots();
            }
        }
    }
    let mut inv = vec![Vec::new(); n];
    for (r, c) in pivots {
        inv[c] = e[r].clone();
    }
    Ok(inv)
}

/// Solves `funcs = 0` for `unknowns` as series in half-orders: a classical
/// root for the eliminated expectation value, then corrections from the
/// leading-order Jacobian until the truncated residuals vanish.
pub fn perturbative_solve(
    funcs: &[Poly],
    unknowns: &[MomentVar],
    half_order: u32,
    branch: i8,
) -> Result<Vec<Poly>, ReductionError> {
    let h = half_order as i64;
    if funcs.len() != unknowns.len() {
        return Err(ReductionError::UnsupportedSystem(format!(
            "{} functions for {} eliminated variables",
            funcs.len(),
            unknowns.len()
        )));
    }
    let atoms: Vec<Atom> = unknowns.iter().map(MomentVar::atom).collect();
    let mut x: Vec<Poly> = vec![Poly::zero(); unknowns.len()];
    let expects: Vec<usize> = (0..unknowns.len())
        .filter(|&i| matches!(unknowns[i], MomentVar::Expect(_)))
        .collect();
    if expects.len() > 1 {
        return Err(ReductionError::UnsupportedSystem("more than one eliminated expectation value".into()));
    }
    if let Some(&i) = expects.first() {
        let f = funcs
            .iter()
            .find(|f| f.grade_part(0).contains_atom(&atoms[i]))
            .ok_or_else(|| ReductionError::UnsupportedSystem("no classical equation for the eliminated expectation value".into()))?;
        x[i] = classical_root(f, &atoms[i], branch)?;
    }
    let subst = |x: &[Poly]| -> BTreeMap<Atom, Poly> { atoms.iter().cloned().zip(x.iter().cloned()).collect() };

    let map0 = subst(&x);
    let mut jac = vec![vec![Poly::zero(); unknowns.len()]; funcs.len()];
    for (a, f) in funcs.iter().enumerate() {
        let partials: Vec<Poly> = atoms
            .iter()
            .map(|u| f.partial(u).substitute(&map0).map(|p| p.normalize_roots()))
            .collect::<Result<_, _>>()?;
        // expectation values enter quantum functions only through factors
        // that are already small on the classical solution
        let quantum = f.grade_part(0).is_zero();
        let grade_of = |moments_only: bool| {
            partials
                .iter()
                .zip(unknowns)
                .filter(|(_, u)| !moments_only || matches!(u, MomentVar::Moment(_)))
                .filter_map(|(p, u)| p.min_grade().map(|g| g + var_grade(u)))
                .min()
        };
        let lead = (if quantum { grade_of(true) } else { None })
            .or_else(|| grade_of(false))
            .ok_or_else(|| ReductionError::UnsupportedSystem("function independent of the eliminated variables".into()))?;
        for (b, p) in partials.iter().enumerate() {
            jac[a][b] = p.grade_part(lead - var_grade(&unknowns[b]));
        }
    }
    let jinv = invert_monomial_pivots(&jac)?;

    let max_iter = 3 * half_order as usize + 6;
    for _ in 0..=max_iter {
        let map = subst(&x);
        let resid: Vec<Poly> = funcs
            .iter()
            .map(|f| f.substitute(&map).map(|p| tidy(&p, h)))
            .collect::<Result<_, _>>()?;
        if resid.iter().all(Poly::is_zero_mod_roots) {
            return Ok(x);
        }
        for (b, xb) in x.iter_mut().enumerate() {
            let mut delta = Poly::zero();
            for (a, r) in resid.iter().enumerate() {
                delta.add_assign(&jinv[b][a].mul_truncated(r, h));
            }
            *xb = tidy(&xb.sub(&delta), h);
        }
    }
    Err(ReductionError::NoConvergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// One pair of the closure check.
#[derive(Clone, Debug)]
pub struct PairResidual {
    pub i: usize,
    pub j: usize,
    /// Lowest grade surviving on the surface; `None` when nothing survives
    /// at or below the working order.
    pub grade: Option<i64>,
    pub residual: Poly,
}

#[derive(Clone, Debug)]
pub struct ClosureReport {
    pub half_order: u32,
    pub pairs: Vec<PairResidual>,
}

impl ClosureReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn failures(&self) -> impl Iterator<Item = &PairResidual> {
        self.pairs.iter().filter(|p| p.grade.is_some())
    }
}

/// Brackets every pair of functions and reduces the result on the surface
/// they cut out, using the chart solved for the constraint's leading
/// direction.
pub fn check_first_class(ma: &MomentAlgebra, cs: &ConstraintSet) -> Result<ClosureReport, ReductionError> {
    let h = cs.half_order as i64;
    let mut pairs = Vec::new();
    if cs.len() < 2 {
        return Ok(ClosureReport { half_order: cs.half_order, pairs });
    }
    let g = constraint_direction(cs)
        .ok_or_else(|| ReductionError::UnsupportedSystem("no generator to solve the constraint for".into()))?;
    let unknowns = direction_variables(ma.n(), g, cs.half_order);
    let values = perturbative_solve(&cs.functions, &unknowns, cs.half_order, 1)?;
    let chart: BTreeMap<Atom, Poly> = unknowns.iter().map(MomentVar::atom).zip(values).collect();
    for i in 0..cs.len() {
        for j in (i + 1)..cs.len() {
            let b = ma.poisson_bracket(&cs.functions[i], &cs.functions[j]);
            let r = tidy(&b.substitute(&chart)?, h);
            let grade = if r.is_zero_mod_roots() { None } else { r.min_grade() };
            pairs.push(PairResidual { i, j, grade, residual: r });
        }
    }
    Ok(ClosureReport { half_order: cs.half_order, pairs })
}

/// Numeric rank of the flow matrix `{v, C_A}` at a point on the surface.
pub fn count_independent_flows(
    ma: &MomentAlgebra,
    cs: &ConstraintSet,
    at: &StatePoint,
    rel_tol: f64,
    surface_tol: f64,
) -> Result<usize, ReductionError> {
    if cs.is_empty() {
        return Ok(0);
    }
    let env = |a: &Atom| at.lookup(a);
    let mut worst: f64 = 0.0;
    for f in &cs.functions {
        worst = worst.max(f.eval(&env)?.norm());
    }
    if worst > surface_tol {
        return Err(ReductionError::NotOnSurface(worst));
    }
    let vars = cs.variables();
    let mut m = DMatrix::<Complex64>::zeros(vars.len(), cs.len());
    for (r, v) in vars.iter().enumerate() {
        for (c, f) in cs.functions.iter().enumerate() {
            m[(r, c)] = ma.poisson_bracket(&v.poly(), f).eval(&env)?;
        }
    }
    let sv = m.svd(false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > rel_tol * top).count())
}

/// Clock gauge: every moment containing the clock is fixed by
/// `<delta X W(delta^A)> = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeFixing {
    pub clock: usize,
    pub conditions: Vec<(MomentVar, MomentPoly)>,
}

impl GaugeFixing {
    pub fn map(&self) -> BTreeMap<Atom, Poly> {
        self.conditions.iter().map(|(v, p)| (v.atom(), p.clone())).collect()
    }

    pub fn fixes(&self, v: &MomentVar) -> bool {
        self.conditions.iter().any(|(w, _)| w == v)
    }
}

pub fn clock_gauge_conditions(ma: &MomentAlgebra, x: usize, half_order: u32) -> GaugeFixing {
    let n = ma.n();
    let mut conditions: Vec<(MomentVar, Poly)> = Vec::new();
    for d in 1..half_order {
        for a in exponents_of_degree(n, d) {
            let k = a.add(&Exps::unit(n, x));
            let words = word_orderings(&a);
            let mut lhs = Poly::zero();
            for w in &words {
                let mut full = vec![x];
                full.extend_from_slice(w);
                lhs.add_assign(&ma.weyl_from_ordered(&full));
            }
            let lhs = lhs.scale(&crate::coeff::Coeff::from_ratio(1, words.len() as i64));
            let m = Poly::atom(Atom::Moment(k.clone()));
            let known: BTreeMap<Atom, Poly> = conditions.iter().map(|(v, p)| (v.atom(), p.clone())).collect();
            let value = m
                .sub(&lhs)
                .substitute(&known)
                .expect("gauge values are polynomial");
            conditions.push((MomentVar::Moment(k), value));
        }
    }
    GaugeFixing { clock: x, conditions }
}

fn word_orderings(a: &Exps) -> Vec<Vec<usize>> {
    let mut words: Vec<Vec<usize>> = Vec::new();
    fn rec(counts: &mut [u32], left: u32, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(acc.clone());
            return;
        }
        for g in 0..counts.len() {
            if counts[g] > 0 {
                counts[g] -= 1;
                acc.push(g);
                rec(counts, left - 1, acc, out);
                acc.pop();
                counts[g] += 1;
            }
        }
    }
    let mut counts = a.0.to_vec();
    rec(&mut counts, a.degree(), &mut Vec::new(), &mut words);
    words
}

/// Constraint surface solved for the variables along the clock's conjugate
/// direction, plus the gauge and (once computed) the residual generator.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    pub clock: usize,
    /// Eliminated expectation value playing the role of the clock momentum.
    pub momentum: usize,
    pub branch: i8,
    pub half_order: u32,
    pub gauge: GaugeFixing,
    pub eliminated: Vec<(MomentVar, MomentPoly)>,
    pub physical_vars: Vec<MomentVar>,
    pub c_ham: Option<MomentPoly>,
    /// Coefficients of the constraint functions in the residual flow.
    pub combination: Vec<MomentPoly>,
}

impl ReducedSystem {
    /// Substitutes the solution and the gauge, truncated to working order.
    pub fn on_surface(&self, p: &Poly) -> Result<Poly, ReductionError> {
        let elim: BTreeMap<Atom, Poly> = self.eliminated.iter().map(|(v, q)| (v.atom(), q.clone())).collect();
        let h = self.half_order as i64;
        let q = p.substitute(&elim)?.substitute(&self.gauge.map())?;
        Ok(tidy(&q, h))
    }

    /// Eliminated variables with the gauge imposed.
    pub fn eliminated_physical(&self) -> Result<Vec<(MomentVar, Poly)>, ReductionError> {
        let h = self.half_order as i64;
        self.eliminated
            .iter()
            .map(|(v, p)| Ok((v.clone(), tidy(&p.substitute(&self.gauge.map())?, h))))
            .collect()
    }

    /// Fills in the eliminated and gauge-fixed coordinates at a point.
    pub fn complete_state(&self, at: &StatePoint) -> Result<StatePoint, ReductionError> {
        let mut out = at.clone();
        for (v, p) in &self.gauge.conditions {
            let x = p.eval(&|a| out.lookup(a))?;
            out.set(v.clone(), x);
        }
        let mut vals = Vec::new();
        for (v, p) in &self.eliminated {
            vals.push((v.clone(), p.eval(&|a| out.lookup(a))?));
        }
        for (v, x) in vals {
            out.set(v, x);
        }
        Ok(out)
    }
}

/// Default eliminated set: everything along the clock's conjugate direction.
pub fn default_elimination(ma: &MomentAlgebra, clock: usize, half_order: u32) -> Result<Vec<MomentVar>, ReductionError> {
    let g = conjugate_of(ma.algebra(), clock)
        .ok_or_else(|| ReductionError::UnsupportedSystem("clock has no conjugate generator".into()))?;
    Ok(direction_variables(ma.n(), g, half_order))
}

fn momentum_of(eliminate: &[MomentVar]) -> Result<usize, ReductionError> {
    eliminate
        .iter()
        .find_map(|v| match v {
            MomentVar::Expect(i) => Some(*i),
            _ => None,
        })
        .ok_or_else(|| ReductionError::UnsupportedSystem("no expectation value among the eliminated variables".into()))
}

/// Symbolic-perturbative solution of the constraint surface.
pub fn solve_surface(
    cs: &ConstraintSet,
    gf: &GaugeFixing,
    eliminate: &[MomentVar],
    branch: i8,
) -> Result<ReducedSystem, ReductionError> {
    if let Some(e) = inconsistency(cs) {
        return Err(e);
    }
    let momentum = momentum_of(eliminate)?;
    let values = perturbative_solve(&cs.functions, eliminate, cs.half_order, branch)?;
    let eliminated: Vec<(MomentVar, Poly)> = eliminate.iter().cloned().zip(values).collect();
    let physical_vars = cs
        .variables()
        .into_iter()
        .filter(|v| !eliminate.contains(v) && !gf.fixes(v) && *v != MomentVar::Expect(gf.clock))
        .collect();
    let rs = ReducedSystem {
        clock: gf.clock,
        momentum,
        branch,
        half_order: cs.half_order,
        gauge: gf.clone(),
        eliminated,
        physical_vars,
        c_ham: None,
        combination: Vec::new(),
    };
    for f in &cs.functions {
        if !rs.on_surface(f)?.is_zero_mod_roots() {
            return Err(ReductionError::UnsupportedSystem("solution does not satisfy the constraints".into()));
        }
    }
    Ok(rs)
}

/// Numerically solved surface point.
#[derive(Clone, Debug)]
pub struct NumericSurface {
    pub point: StatePoint,
    pub residual: f64,
    pub iterations: usize,
    pub branch: i8,
}

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;

/// Damped Newton solve of the truncated constraints for `eliminate`, all
/// other coordinates fixed at the seed (gauge values imposed when given).
pub fn solve_newton(
    cs: &ConstraintSet,
    gf: Option<&GaugeFixing>,
    eliminate: &[MomentVar],
    seed: &StatePoint,
    branch: Option<i8>,
) -> Result<NumericSurface, ReductionError> {
    if let Some(e) = inconsistency(cs) {
        return Err(e);
    }
    if cs.len() != eliminate.len() {
        return Err(ReductionError::UnsupportedSystem(format!(
            "{} functions for {} eliminated variables",
            cs.len(),
            eliminate.len()
        )));
    }
    let mut point = seed.clone();
    for (v, p) in gf.map(|g| g.conditions.as_slice()).unwrap_or_default() {
        if !eliminate.contains(v) {
            let x = p.eval(&|a| point.lookup(a))?;
            point.set(v.clone(), x);
        }
    }
    let atoms: Vec<Atom> = eliminate.iter().map(MomentVar::atom).collect();
    for v in eliminate {
        if point.get(v).is_none() && !matches!(v, MomentVar::Expect(_)) {
            point.set(v.clone(), 0.0);
        }
    }

    let mut chosen = branch.unwrap_or(1);
    if let Some(k) = eliminate.iter().position(|v| matches!(v, MomentVar::Expect(_))) {
        let f = cs
            .functions
            .iter()
            .find(|f| f.grade_part(0).contains_atom(&atoms[k]))
            .ok_or_else(|| ReductionError::UnsupportedSystem("no classical equation for the eliminated expectation value".into()))?;
        let roots = [1i8, -1].map(|s| classical_root(f, &atoms[k], s));
        let mut vals = Vec::new();
        for r in roots {
            vals.push(r?.eval(&|a| point.lookup(a))?);
        }
        match point.get(&eliminate[k]) {
            Some(x0) => {
                let (dp, dm) = ((x0 - vals[0]).norm(), (x0 - vals[1]).norm());
                if (dp - dm).abs() <= 1e-12 * dp.max(dm).max(1e-300) {
                    return Err(ReductionError::BranchAmbiguous);
                }
                chosen = if dp < dm { 1 } else { -1 };
            }
            None => {
                let x0 = if chosen > 0 { vals[0] } else { vals[1] };
                point.set(eliminate[k].clone(), x0);
            }
        }
    }

    let partials: Vec<Vec<Poly>> = cs
        .functions
        .iter()
        .map(|f| atoms.iter().map(|u| f.partial(u)).collect())
        .collect();
    let residual_of = |p: &StatePoint| -> Result<(Vec<Complex64>, f64), ReductionError> {
        let r: Vec<Complex64> = cs
            .functions
            .iter()
            .map(|f| f.eval(&|a| p.lookup(a)))
            .collect::<Result<_, _>>()?;
        let norm = r.iter().map(|z| z.norm()).fold(0.0, f64::max);
        Ok((r, norm))
    };
    let (mut r, mut norm) = residual_of(&point)?;
    let mut iterations = 0;
    while norm >= NEWTON_TOL {
        if iterations == NEWTON_MAX_ITER {
            return Err(ReductionError::NoConvergence { iterations, residual: norm });
        }
        iterations += 1;
        let n = atoms.len();
        let mut j = DMatrix::<Complex64>::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                j[(a, b)] = partials[a][b].eval(&|x| point.lookup(x))?;
            }
        }
        let rhs = nalgebra::DVector::from_vec(r.clone());
        let step = j
            .lu()
            .solve(&rhs)
            .ok_or(ReductionError::NoConvergence { iterations, residual: norm })?;
        let mut scale = 1.0;
        loop {
            let mut trial = point.clone();
            for (b, v) in eliminate.iter().enumerate() {
                let x = point.get(v).unwrap_or_default() - step[b] * scale;
                trial.set(v.clone(), x);
            }
            let (tr, tn) = residual_of(&trial)?;
            if tn <= norm || scale < 1e-6 {
                point = trial;
                r = tr;
                norm = tn;
                break;
            }
            scale *= 0.5;
        }
    }
    Ok(NumericSurface {
        point,
        residual: norm,
        iterations,
        branch: chosen,
    })
}

/// Finds the combination of constraint flows that preserves every gauge
/// condition, normalized to advance the clock at unit rate, and returns the
/// deparametrized generator `<pi> - P` with `P` the solved clock momentum.
pub fn residual_generator(
    ma: &MomentAlgebra,
    cs: &ConstraintSet,
    rs: &mut ReducedSystem,
) -> Result<MomentPoly, ReductionError> {
    let h = cs.half_order as i64;
    let vars = cs.variables();
    let mut flows: Vec<Vec<Poly>> = Vec::with_capacity(cs.len());
    for f in &cs.functions {
        let col = vars
            .iter()
            .map(|v| rs.on_surface(&ma.poisson_bracket(&v.poly(), f)))
            .collect::<Result<Vec<_>, _>>()?;
        flows.push(col);
    }
    let keep: Vec<usize> = (0..cs.len())
        .filter(|&a| flows[a].iter().any(|x| !x.is_zero_mod_roots()))
        .collect();
    let clock_idx = vars
        .iter()
        .position(|v| *v == MomentVar::Expect(rs.clock))
        .expect("clock is a coordinate");
    let clock_row: Vec<Poly> = keep.iter().map(|&a| flows[a][clock_idx].clone()).collect();

    let mut rows: Vec<Vec<Poly>> = Vec::new();
    for (v, value) in &rs.gauge.conditions {
        let g = v.poly().sub(value);
        let row = keep
            .iter()
            .map(|&a| rs.on_surface(&ma.poisson_bracket(&g, &cs.functions[a])))
            .collect::<Result<Vec<_>, _>>()?;
        if row.iter().any(|x| !x.is_zero_mod_roots()) {
            rows.push(row);
        }
    }
    // Prefer leaving free the column that drives the clock classically.
    let avoid = (0..keep.len()).find(|&c| !clock_row[c].grade_part(0).is_zero());
    let lambda = null_vector(rows, keep.len(), avoid, h)?;

    let mut rate = Poly::zero();
    for (l, c) in lambda.iter().zip(&clock_row) {
        rate.add_assign(&l.mul(c));
    }
    let rate = tidy(&rate, h);
    let inv = rate
        .series_inverse(h)
        .map_err(|_| ReductionError::UnsupportedGenerator("clock rate has no invertible leading term".into()))?;
    let lambda: Vec<Poly> = lambda.iter().map(|l| tidy(&l.mul(&inv), h)).collect();

    let pi = Poly::atom(Atom::Expect(rs.momentum));
    let c_ham = tidy(&pi.sub(&rs.on_surface(&pi)?), h);

    let names = ma.names();
    let check_vars: Vec<(usize, &MomentVar)> = vars
        .iter()
        .enumerate()
        .filter(|(_, v)| rs.physical_vars.contains(v) || **v == MomentVar::Expect(rs.clock))
        .collect();
    for (idx, v) in check_vars {
        let mut lhs = Poly::zero();
        for (l, &a) in lambda.iter().zip(&keep) {
            lhs.add_assign(&l.mul(&flows[a][idx]));
        }
        let rhs = rs.on_surface(&ma.poisson_bracket(&v.poly(), &c_ham))?;
        if !tidy(&lhs.sub(&rhs), h).is_zero_mod_roots() {
            return Err(ReductionError::UnsupportedGenerator(format!(
                "residual flow of {} is not generated by the deparametrized Hamiltonian",
                v.name(names)
            )));
        }
    }

    let mut combination = vec![Poly::zero(); cs.len()];
    for (l, &a) in lambda.iter().zip(&keep) {
        combination[a] = l.clone();
    }
    rs.combination = combination;
    rs.c_ham = Some(c_ham.clone());
    Ok(c_ham)
}

/// `num / den` in the Laurent ring modulo the root relations, falling back
/// to a truncated series when the division is not exact.
fn divide(num: &Poly, den: &Poly, budget: i64) -> Option<Poly> {
    if num.is_zero() {
        return Some(Poly::zero());
    }
    if let Some(inv) = den.inverse_monomial() {
        return Some(tidy(&num.mul(&inv), budget));
    }
    let (sn, sd) = (num.root_clearing_factor(), den.root_clearing_factor());
    let n = num.mul(&sn).reduce_roots();
    let d = den.mul(&sd).reduce_roots();
    let back = sd.mul(&sn.inverse_monomial()?);
    if let Some(q) = n.exact_div(&d) {
        return Some(tidy(&q.mul(&back), budget));
    }
    let lead = d.min_grade()?;
    let shifted = d.mul(&d.grade_part(lead).inverse_monomial()?);
    let inv = shifted.series_inverse(budget - lead).ok()?;
    Some(tidy(&n.mul(&d.grade_part(lead).inverse_monomial()?).mul(&inv).mul(&back), budget))
}

/// Single null vector of `rows` (columns `0..ncols`) by fraction-free
/// Gauss-Jordan elimination, free variable set to one.
fn null_vector(
    mut rows: Vec<Vec<Poly>>,
    ncols: usize,
    avoid: Option<usize>,
    h: i64,
) -> Result<Vec<Poly>, ReductionError> {
    let mut budget = vec![h; rows.len()];
    let mut order: Vec<usize> = (0..ncols).filter(|&c| Some(c) != avoid).collect();
    if let Some(a) = avoid {
        order.push(a);
    }
    let mut used = vec![false; rows.len()];
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    for &c in &order {
        let candidates: Vec<usize> = (0..rows.len()).filter(|&r| !used[r] && !rows[r][c].is_zero()).collect();
        let Some(&r) = candidates.iter().min_by_key(|&&r| rows[r][c].len()) else {
            continue;
        };
        used[r] = true;
        pivots.push((r, c));
        let p = rows[r][c].clone();
        if let Some(inv) = p.inverse_monomial() {
            budget[r] -= p.min_grade().unwrap_or(0);
            for j in 0..ncols {
                rows[r][j] = tidy(&rows[r][j].mul(&inv), budget[r]);
            }
        }
        let p = rows[r][c].clone();
        let monic = p.is_one_poly();
        for k in 0..rows.len() {
            if k == r || rows[k][c].is_zero() {
                continue;
            }
            let f = rows[k][c].clone();
            if !monic {
                budget[k] += p.min_grade().unwrap_or(0);
            }
            for j in 0..ncols {
                let scaled = if monic { rows[k][j].clone() } else { rows[k][j].mul(&p) };
                let v = tidy(&scaled.sub(&f.mul(&rows[r][j])), budget[k]);
                rows[k][j] = if v.is_zero_mod_roots() { Poly::zero() } else { v };
            }
        }
    }
    let free: Vec<usize> = (0..ncols).filter(|c| !pivots.iter().any(|(_, pc)| pc == c)).collect();
    match free.len() {
        0 => return Err(ReductionError::NoResidualFlow),
        1 => {}
        k => return Err(ReductionError::MultipleResidualFlows(k)),
    }
    let f = free[0];
    let mut lambda = vec![Poly::zero(); ncols];
    lambda[f] = Poly::one();
    for (r, c) in pivots {
        lambda[c] = divide(&rows[r][f].neg(), &rows[r][c], h).ok_or_else(|| {
            ReductionError::UnsupportedGenerator("gauge-preservation equations are not exactly solvable".into())
        })?;
    }
    Ok(lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{canonical_bracket, BracketEntry};
    use std::sync::Arc;

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
        let c = pt.multiply(&pt).unwrap()
            .sub(&p.multiply(&p).unwrap())
            .sub(&OperatorPoly::scalar(&alg, m.mul(&m)));
        (MomentAlgebra::new(alg), c)
    }

    #[test]
    fn particle_tower() {
        let (ma, c) = particle();
        let cs = generate_constraints(&ma, &c, 2);
        assert_eq!(cs.len(), 5);
        assert_eq!(cs.variables().len(), 14);
        let labels: Vec<String> = (0..5).map(|i| cs.label(i)).collect();
        assert_eq!(labels, ["1", "t", "pt", "q", "p"]);
        assert_eq!(
            cs.functions[3].dump(ma.names()),
            "2*<pt>*D(pt q) - 2*<p>*D(q p) - i*<p>*hbar"
        );
    }

    #[test]
    fn gauge_lists() {
        let (ma, _) = particle();
        let gf = clock_gauge_conditions(&ma, 0, 2);
        let text: Vec<String> = gf
            .conditions
            .iter()
            .map(|(v, p)| format!("{} = {}", v.name(ma.names()), p.dump(ma.names())))
            .collect();
        assert_eq!(text, ["D(t^2) = 0", "D(t pt) = -1/2*i*hbar", "D(t q) = 0", "D(t p) = 0"]);
        let gq = clock_gauge_conditions(&ma, 2, 2);
        let text: Vec<String> = gq
            .conditions
            .iter()
            .map(|(v, p)| format!("{} = {}", v.name(ma.names()), p.dump(ma.names())))
            .collect();
        assert_eq!(text, ["D(t q) = 0", "D(pt q) = 0", "D(q^2) = 0", "D(q p) = -1/2*i*hbar"]);
    }

    #[test]
    fn inconsistent_identity_constraint() {
        let (ma, _) = particle();
        let one = OperatorPoly::identity(ma.algebra());
        let cs = generate_constraints(&ma, &one, 2);
        assert_eq!(cs.len(), 1);
        let gf = clock_gauge_conditions(&ma, 0, 2);
        let err = solve_surface(&cs, &gf, &[MomentVar::Expect(1)], 1).unwrap_err();
        assert_eq!(err.to_string(), "constraint inconsistent: \u{27e8}\u{1d7d9}\u{27e9} = 1 \u{2260} 0");
    }

    #[test]
    fn conjugate_detection() {
        let (ma, c) = particle();
        assert_eq!(conjugate_of(ma.algebra(), 0), Some(1));
        assert_eq!(conjugate_of(ma.algebra(), 3), Some(2));
        let cs = generate_constraints(&ma, &c, 2);
        assert_eq!(constraint_direction(&cs), Some(1));
    }

    fn at(v: MomentVar) -> Poly {
        v.poly()
    }

    fn d(v: [u32; 4]) -> Poly {
        at(MomentVar::Moment(Exps::new(v.to_vec())))
    }

    #[test]
    fn perturbative_branch_matches_closed_form() {
        let (ma, c) = particle();
        let cs = generate_constraints(&ma, &c, 2);
        let gf = clock_gauge_conditions(&ma, 0, 2);
        let elim = default_elimination(&ma, 0, 2).unwrap();
        for branch in [1i8, -1] {
            let mut rs = solve_surface(&cs, &gf, &elim, branch).unwrap();
            let p = at(MomentVar::Expect(3));
            let m = Poly::atom(Atom::param("m"));
            let r = Poly::root(p.mul(&p).add(&m.mul(&m)), branch);
            let dpp = d([0, 0, 0, 2]);
            let half_ih = Poly::i().mul(&Poly::hbar()).mul(&Poly::ratio(1, 2));
            let e = r.add(&m.mul(&m).mul(&dpp).mul(&Poly::atom_pow(r.as_monomial().unwrap().0[0].0.clone(), -3)).mul(&Poly::ratio(1, 2)));
            let e_inv = e.series_inverse(2).unwrap();
            let expected = [
                e.clone(),
                p.mul(&e_inv).mul(&d([1, 0, 0, 1])).sub(&half_ih),
                p.mul(&p).add(&m.mul(&m)).add(&dpp).sub(&e.mul(&e)),
                p.mul(&e_inv).mul(&d([0, 0, 1, 1]).add(&half_ih)),
                p.mul(&e_inv).mul(&dpp),
            ];
            for ((v, got), want) in rs.eliminated.iter().zip(expected.iter()) {
                let diff = got.sub(want).truncate(2);
                assert!(diff.is_zero_mod_roots(), "{}: {}", v.name(ma.names()), got.dump(ma.names()));
            }
            let h = residual_generator(&ma, &cs, &mut rs).unwrap();
            let want = at(MomentVar::Expect(1)).sub(&rs.on_surface(&e).unwrap());
            assert!(h.sub(&want).truncate(2).is_zero_mod_roots());
            let rate = rs.on_surface(&ma.poisson_bracket(&at(MomentVar::Expect(0)), &h)).unwrap();
            assert_eq!(rate, Poly::one());
        }
    }

    #[test]
    fn closure_at_second_order() {
        let (ma, c) = particle();
        let cs = generate_constraints(&ma, &c, 2);
        let report = check_first_class(&ma, &cs).unwrap();
        assert_eq!(report.pairs.len(), 10);
        assert!(report.passed());
        let mut broken = cs.clone();
        broken.functions[0] = broken.functions[0].add(&at(MomentVar::Expect(2)));
        let report = check_first_class(&ma, &broken).unwrap();
        assert!(!report.passed());
    }

    fn seed() -> StatePoint {
        let mut s = StatePoint::new(0.01);
        s.set_param("m", 1.0);
        s.set(MomentVar::Expect(0), 0.0).set(MomentVar::Expect(2), 0.0).set(MomentVar::Expect(3), 0.5);
        s.set(MomentVar::Moment(Exps::new(vec![0, 0, 2, 0])), 0.25);
        s.set(MomentVar::Moment(Exps::new(vec![0, 0, 1, 1])), 0.0);
        s.set(MomentVar::Moment(Exps::new(vec![0, 0, 0, 2])), 1e-4);
        s
    }

    #[test]
    fn newton_agrees_with_series_and_counts_four_flows() {
        let (ma, c) = particle();
        let cs = generate_constraints(&ma, &c, 2);
        let gf = clock_gauge_conditions(&ma, 0, 2);
        let elim = default_elimination(&ma, 0, 2).unwrap();
        let ns = solve_newton(&cs, Some(&gf), &elim, &seed(), Some(1)).unwrap();
        assert!(ns.residual < 1e-12);
        assert_eq!(ns.branch, 1);
        let rs = solve_surface(&cs, &gf, &elim, 1).unwrap();
        let series = rs.complete_state(&seed()).unwrap();
        for v in &elim {
            let d = (series.get(v).unwrap() - ns.point.get(v).unwrap()).norm();
            assert!(d < 1e-7, "{}: {}", v.name(ma.names()), d);
        }
        let mut generic = seed();
        generic.set(MomentVar::Moment(Exps::new(vec![2, 0, 0, 0])), 3e-5);
        generic.set(MomentVar::Moment(Exps::new(vec![1, 0, 0, 1])), -2e-5);
        generic.set(MomentVar::Moment(Exps::new(vec![1, 0, 1, 0])), 4e-5);
        let on_shell = solve_newton(&cs, None, &elim, &generic, Some(1)).unwrap();
        assert_eq!(count_independent_flows(&ma, &cs, &on_shell.point, 1e-9, 1e-9).unwrap(), 4);
        let mut off = on_shell.point.clone();
        off.set(MomentVar::Expect(1), 1.2);
        let err = count_independent_flows(&ma, &cs, &off, 1e-9, 1e-9).unwrap_err();
        assert!(matches!(err, ReductionError::NotOnSurface(_)));
        let mut neg = seed();
        neg.set(MomentVar::Expect(1), -1.0);
        assert_eq!(solve_newton(&cs, Some(&gf), &elim, &neg, None).unwrap().branch, -1);
        neg.set(MomentVar::Expect(1), 0.0);
        assert_eq!(solve_newton(&cs, Some(&gf), &elim, &neg, None).unwrap_err(), ReductionError::BranchAmbiguous);
    }
}
