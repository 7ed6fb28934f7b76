//! Moment coordinates on the state space: expectation values and Weyl-ordered
//! central moments, the induced Poisson bracket and semiclassical truncation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use thiserror::Error;

use crate::algebra::{AlgebraSpec, OperatorPoly};
use crate::coeff::Coeff;
use crate::poly::{Atom, Exps, Poly, PolyError};

/// Polynomial in expectation values and moments.
pub type MomentPoly = Poly;

/// Basic state coordinate.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum MomentVar {
    Expect(usize),
    /// Weyl-ordered central moment, total degree at least two.
    Moment(Exps),
}

impl MomentVar {
    pub fn moment(k: Exps) -> Option<Self> {
        (k.degree() >= 2).then_some(MomentVar::Moment(k))
    }

    pub fn atom(&self) -> Atom {
        match self {
            MomentVar::Expect(i) => Atom::Expect(*i),
            MomentVar::Moment(k) => Atom::Moment(k.clone()),
        }
    }

    pub fn from_atom(a: &Atom) -> Option<Self> {
        match a {
            Atom::Expect(i) => Some(MomentVar::Expect(*i)),
            Atom::Moment(k) => Some(MomentVar::Moment(k.clone())),
            _ => None,
        }
    }

    pub fn poly(&self) -> Poly {
        Poly::atom(self.atom())
    }

    pub fn degree(&self) -> u32 {
        match self {
            MomentVar::Expect(_) => 1,
            MomentVar::Moment(k) => k.degree(),
        }
    }

    pub fn name(&self, names: &[String]) -> String {
        self.atom().name(names)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MomentError {
    #[error("state point has no value for {0}")]
    MissingMoment(String),
    #[error("{0}")]
    Poly(#[from] PolyError),
}

/// Numeric state: values of the coordinates, `hbar` and parameters.
#[derive(Clone, Debug, Default)]
pub struct StatePoint {
    pub hbar: f64,
    pub params: BTreeMap<String, Complex64>,
    pub values: BTreeMap<MomentVar, Complex64>,
}

impl StatePoint {
    pub fn new(hbar: f64) -> Self {
        StatePoint {
            hbar,
            ..Default::default()
        }
    }

    pub fn set(&mut self, v: MomentVar, x: impl Into<Complex64>) -> &mut Self {
        self.values.insert(v, x.into());
        self
    }

    pub fn get(&self, v: &MomentVar) -> Option<Complex64> {
        self.values.get(v).copied()
    }

    pub fn set_param(&mut self, name: &str, x: impl Into<Complex64>) -> &mut Self {
        self.params.insert(name.to_string(), x.into());
        self
    }

    /// Highest moment degree for which every coordinate is present.
    pub fn complete_order(&self, n: usize) -> u32 {
        let mut order = 0;
        for deg in 1..=8 {
            let all = exponents_of_degree(n, deg).into_iter().all(|k| {
                let v = if deg == 1 {
                    MomentVar::Expect(k.word()[0])
                } else {
                    MomentVar::Moment(k)
                };
                self.values.contains_key(&v)
            });
            if !all {
                break;
            }
            order = deg;
        }
        order
    }

    /// `|moment of degree M| <= c * hbar^(M/2)` for every stored moment.
    pub fn semiclassical(&self, c: f64) -> bool {
        self.values.iter().all(|(v, x)| match v {
            MomentVar::Expect(_) => true,
            MomentVar::Moment(k) => x.norm() <= c * self.hbar.powf(k.degree() as f64 / 2.0),
        })
    }

    pub fn lookup(&self, a: &Atom) -> Option<Complex64> {
        match a {
            Atom::Hbar => Some(Complex64::new(self.hbar, 0.0)),
            Atom::Param(p) => self.params.get(p.as_ref()).copied(),
            other => MomentVar::from_atom(other).and_then(|v| self.get(&v)),
        }
    }
}

/// All exponent vectors over `n` generators of total degree `deg`, in
/// canonical order.
pub fn exponents_of_degree(n: usize, deg: u32) -> Vec<Exps> {
    fn rec(n: usize, left: u32, acc: &mut Vec<u32>, out: &mut Vec<Exps>) {
        if acc.len() == n - 1 {
            acc.push(left);
            out.push(Exps::new(acc.clone()));
            acc.pop();
            return;
        }
        for e in (0..=left).rev() {
            acc.push(e);
            rec(n, left - e, acc, out);
            acc.pop();
        }
    }
    if n == 0 {
        return if deg == 0 { vec![Exps::zeros(0)] } else { vec![] };
    }
    let mut out = Vec::new();
    rec(n, deg, &mut Vec::new(), &mut out);
    out
}

/// Expectation values followed by moments of degree `2..=max_degree`.
pub fn state_variables(n: usize, max_degree: u32) -> Vec<MomentVar> {
    let mut out: Vec<MomentVar> = (0..n).map(MomentVar::Expect).collect();
    for d in 2..=max_degree {
        out.extend(exponents_of_degree(n, d).into_iter().map(MomentVar::Moment));
    }
    out
}

/// Distinct orderings of the word of `k`.
fn distinct_words(k: &Exps) -> Vec<Vec<usize>> {
    fn rec(counts: &mut Vec<u32>, left: usize, acc: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
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
    let mut counts: Vec<u32> = k.0.to_vec();
    let mut out = Vec::new();
    rec(&mut counts, k.degree() as usize, &mut Vec::new(), &mut out);
    out
}

fn binomial(n: u32, k: u32) -> i64 {
    let mut r: i64 = 1;
    for j in 0..k {
        r = r * (n - j) as i64 / (j + 1) as i64;
    }
    r
}

/// Exponent vectors `j <= k` componentwise.
fn sub_exponents(k: &Exps) -> Vec<Exps> {
    let mut out = vec![Vec::new()];
    for &e in k.0.iter() {
        out = out
            .into_iter()
            .flat_map(|v: Vec<u32>| {
                (0..=e).map(move |x| {
                    let mut w = v.clone();
                    w.push(x);
                    w
                })
            })
            .collect();
    }
    out.into_iter().map(Exps::new).collect()
}

fn binomial_product(k: &Exps, j: &Exps) -> i64 {
    k.0.iter().zip(j.0.iter()).map(|(&a, &b)| binomial(a, b)).product()
}

/// `prod_i x_i^{k_i - j_i}` with `x_i` given per generator.
fn power_product(k: &Exps, j: &Exps, x: &dyn Fn(usize) -> Poly) -> Poly {
    let mut out = Poly::one();
    for (i, (&a, &b)) in k.0.iter().zip(j.0.iter()).enumerate() {
        if a > b {
            out = out.mul(&x(i).pow(a - b));
        }
    }
    out
}

/// Moment calculus over one kinematical algebra. Caches are internal and
/// guarded, so a shared instance can be used from several threads.
#[derive(Debug)]
pub struct MomentAlgebra {
    alg: Arc<AlgebraSpec>,
    centered: Arc<AlgebraSpec>,
    sorted: Mutex<HashMap<Exps, Poly>>,
    raw_brackets: Mutex<HashMap<(Exps, Exps), Poly>>,
    brackets: Mutex<HashMap<(Atom, Atom), Poly>>,
}

impl MomentAlgebra {
    pub fn new(alg: Arc<AlgebraSpec>) -> Self {
        let centered = Arc::new(alg.centered());
        MomentAlgebra {
            alg,
            centered,
            sorted: Mutex::new(HashMap::new()),
            raw_brackets: Mutex::new(HashMap::new()),
            brackets: Mutex::new(HashMap::new()),
        }
    }

    pub fn algebra(&self) -> &Arc<AlgebraSpec> {
        &self.alg
    }

    pub fn n(&self) -> usize {
        self.alg.n()
    }

    pub fn names(&self) -> &[String] {
        self.alg.names()
    }

    /// `<delta^k>` with the centered factors in generator order.
    fn sorted_expectation(&self, k: &Exps) -> Poly {
        match k.degree() {
            0 => return Poly::one(),
            1 => return Poly::zero(),
            _ => {}
        }
        if let Some(hit) = self.sorted.lock().unwrap().get(k) {
            return hit.clone();
        }
        // W(delta^k) = avg_sigma sigma(word), and each ordering differs from
        // the sorted word by lower-degree terms.
        let words = distinct_words(k);
        let mut correction = Poly::zero();
        for w in &words {
            for (m, c) in self.centered.normal_order_word(w) {
                if m != *k {
                    correction.add_assign(&c.mul(&self.sorted_expectation(&m)));
                }
            }
        }
        let avg = correction.scale(&Coeff::from_ratio(1, words.len() as i64));
        let value = Poly::atom(Atom::Moment(k.clone())).sub(&avg);
        self.sorted.lock().unwrap().insert(k.clone(), value.clone());
        value
    }

    /// Expectation value of an ordered product of centered generators.
    pub fn weyl_from_ordered(&self, word: &[usize]) -> MomentPoly {
        let mut out = Poly::zero();
        for (m, c) in self.centered.normal_order_word(word) {
            out.add_assign(&c.mul(&self.sorted_expectation(&m)));
        }
        out
    }

    /// `<A>` in expectation values and moments, exact.
    pub fn expand_expectation(&self, a: &OperatorPoly) -> MomentPoly {
        let mut out = Poly::zero();
        for (n, c) in a.terms() {
            let mut sum = Poly::zero();
            for k in sub_exponents(n) {
                let e = power_product(n, &k, &|i| Poly::atom(Atom::Expect(i)));
                let b = binomial_product(n, &k);
                sum.add_assign(&e.mul(&self.sorted_expectation(&k)).scale(&Coeff::from_int(b)));
            }
            out.add_assign(&sum.mul(c));
        }
        out
    }

    /// Weyl-symmetrized product `W(a^k)` in the operator algebra.
    pub fn weyl_operator(&self, k: &Exps) -> OperatorPoly {
        let words = distinct_words(k);
        let mut out = OperatorPoly::zero(&self.alg);
        for w in &words {
            for (m, c) in self.alg.normal_order_word(w) {
                out.add_term(m, c);
            }
        }
        out.scale(&Poly::ratio(1, words.len() as i64))
    }

    fn raw(&self, k: &Exps) -> Poly {
        Poly::atom(Atom::Raw(k.clone()))
    }

    /// Basic coordinate as a polynomial in `<W(a^j)>`.
    fn lift(&self, a: &Atom) -> Poly {
        let n = self.n();
        match a {
            Atom::Expect(i) => self.raw(&Exps::unit(n, *i)),
            Atom::Moment(k) => {
                let mut out = Poly::zero();
                for j in sub_exponents(k) {
                    let r = match j.degree() {
                        0 => Poly::one(),
                        _ => self.raw(&j),
                    };
                    let e = power_product(k, &j, &|i| self.raw(&Exps::unit(n, i)).neg());
                    out.add_assign(&e.mul(&r).scale(&Coeff::from_int(binomial_product(k, &j))));
                }
                out
            }
            _ => Poly::atom(a.clone()),
        }
    }

    /// Inverse of `lift` on raw atoms.
    fn unlift_map(&self, raws: &BTreeSet<Atom>) -> BTreeMap<Atom, Poly> {
        let mut map = BTreeMap::new();
        for a in raws {
            let Atom::Raw(k) = a else { continue };
            let value = if k.degree() == 1 {
                Poly::atom(Atom::Expect(k.word()[0]))
            } else {
                let mut out = Poly::zero();
                for j in sub_exponents(k) {
                    let m = match j.degree() {
                        0 => Poly::one(),
                        1 => continue,
                        _ => Poly::atom(Atom::Moment(j.clone())),
                    };
                    let e = power_product(k, &j, &|i| Poly::atom(Atom::Expect(i)));
                    out.add_assign(&e.mul(&m).scale(&Coeff::from_int(binomial_product(k, &j))));
                }
                out
            };
            map.insert(a.clone(), value);
        }
        map
    }

    fn unlift(&self, p: &Poly) -> Poly {
        let raws: BTreeSet<Atom> = p.atoms().into_iter().filter(|a| matches!(a, Atom::Raw(_))).collect();
        if raws.is_empty() {
            return p.clone();
        }
        p.substitute(&self.unlift_map(&raws)).expect("raw atoms appear with nonnegative powers")
    }

    /// `{<W(a^u)>, <W(a^v)>} = <[W(a^u), W(a^v)]> / (i hbar)`.
    fn raw_bracket(&self, u: &Exps, v: &Exps) -> Poly {
        let key = (u.clone(), v.clone());
        if let Some(hit) = self.raw_brackets.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let wu = self.weyl_operator(u);
        let wv = self.weyl_operator(v);
        let comm = wu.commutator(&wv).expect("same algebra");
        let value = self
            .expand_expectation(&comm)
            .div_i_hbar()
            .expect("bracket table carries a factor of hbar");
        self.raw_brackets.lock().unwrap().insert(key, value.clone());
        value
    }

    /// Bracket of two basic coordinates.
    pub fn basic_bracket(&self, x: &Atom, y: &Atom) -> Poly {
        if !x.is_basic() || !y.is_basic() || x == y {
            return Poly::zero();
        }
        let key = (x.clone(), y.clone());
        if let Some(hit) = self.brackets.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let lx = self.lift(x);
        let ly = self.lift(y);
        let mut out = Poly::zero();
        for r in lx.atoms() {
            let Atom::Raw(u) = &r else { continue };
            let dx = lx.partial(&r);
            for s in ly.atoms() {
                let Atom::Raw(v) = &s else { continue };
                let br = self.raw_bracket(u, v);
                if br.is_zero() {
                    continue;
                }
                let dy = ly.partial(&s);
                out.add_assign(&self.unlift(&dx.mul(&dy)).mul(&br));
            }
        }
        let mut cache = self.brackets.lock().unwrap();
        cache.insert((y.clone(), x.clone()), out.neg());
        cache.insert(key, out.clone());
        out
    }

    /// Poisson bracket extended to polynomials by the Leibniz rule.
    pub fn poisson_bracket(&self, f: &MomentPoly, g: &MomentPoly) -> MomentPoly {
        let fv = f.basic_vars();
        let gv = g.basic_vars();
        let mut out = Poly::zero();
        let gd: Vec<(Atom, Poly)> = gv.iter().map(|y| (y.clone(), g.partial(y))).collect();
        for x in &fv {
            let dfx = f.partial(x);
            if dfx.is_zero() {
                continue;
            }
            for (y, dgy) in &gd {
                if dgy.is_zero() {
                    continue;
                }
                let b = self.basic_bracket(x, y);
                if !b.is_zero() {
                    out.add_assign(&dfx.mul(dgy).mul(&b));
                }
            }
        }
        out
    }

    /// Right-hand sides `{v, <H>}` for the listed coordinates.
    pub fn hamiltonian_flow(&self, h: &OperatorPoly, vars: &[MomentVar]) -> Vec<(MomentVar, MomentPoly)> {
        let eh = self.expand_expectation(h);
        vars.iter()
            .map(|v| (v.clone(), self.poisson_bracket(&v.poly(), &eh)))
            .collect()
    }
}

/// Drops every term above the given grade.
pub fn truncate(f: &MomentPoly, half_order: u32) -> MomentPoly {
    f.truncate(half_order as i64)
}

/// Numeric value at a state point.
pub fn evaluate(f: &MomentPoly, s: &StatePoint, names: &[String]) -> Result<Complex64, MomentError> {
    for a in f.basic_vars() {
        if s.lookup(&a).is_none() {
            return Err(MomentError::MissingMoment(a.name(names)));
        }
    }
    f.eval(&|a| s.lookup(a)).map_err(|e| match e {
        PolyError::Missing(m) => MomentError::MissingMoment(m),
        other => MomentError::Poly(other),
    })
}
