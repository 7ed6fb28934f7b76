//! Commutative Laurent polynomials over symbolic atoms.
//!
//! Every scalar quantity in the engine (operator coefficients, expectation
//! values, moments, brackets, solved surfaces) lives in this ring. Atoms are
//! the formal symbol `hbar`, named parameters, expectation values, Weyl
//! moments, and signed square roots of other polynomials. Integer exponents
//! may be negative, which lets monomial pivots be inverted exactly.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::coeff::Coeff;

/// Exponent vector over the generators of an algebra.
///
/// Ordered so that vectors with larger exponents on earlier generators come
/// first, which puts `D(pt^2)` ahead of `D(p^2)` when `pt` is declared first.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Exps(pub Box<[u32]>);

impl Exps {
    pub fn new(v: Vec<u32>) -> Self {
        Exps(v.into_boxed_slice())
    }

    pub fn zeros(n: usize) -> Self {
        Exps::new(vec![0; n])
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut v = vec![0; n];
        v[i] = 1;
        Exps::new(v)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add(&self, other: &Exps) -> Exps {
        Exps::new(self.0.iter().zip(other.0.iter()).map(|(a, b)| a + b).collect())
    }

    /// Generator indices in ascending order, each repeated by its exponent.
    pub fn word(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.degree() as usize);
        for (i, &e) in self.0.iter().enumerate() {
            for _ in 0..e {
                w.push(i);
            }
        }
        w
    }

    pub fn from_word(n: usize, word: &[usize]) -> Exps {
        let mut v = vec![0; n];
        for &g in word {
            v[g] += 1;
        }
        Exps::new(v)
    }

    /// Human readable form such as `t pt` or `q^2 p`.
    pub fn label(&self, names: &[String]) -> String {
        let mut parts = Vec::new();
        for (i, &e) in self.0.iter().enumerate() {
            match e {
                0 => {}
                1 => parts.push(names[i].clone()),
                _ => parts.push(format!("{}^{}", names[i], e)),
            }
        }
        parts.join(" ")
    }
}

impl Ord for Exps {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.cmp(&self.0)
    }
}

impl PartialOrd for Exps {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// A signed square root `sign * sqrt(radicand)`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct RootDef {
    pub radicand: Poly,
    pub sign: i8,
}

/// Symbolic atom of the scalar ring. Variant order fixes dump order.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Atom {
    Root(Arc<RootDef>),
    /// Expectation value of generator `i`.
    Expect(usize),
    /// Weyl-ordered central moment.
    Moment(Exps),
    Param(Arc<str>),
    Hbar,
    /// Expectation value of the Weyl-symmetrized (uncentered) product; only
    /// used internally while lifting moments to operators.
    Raw(Exps),
}

impl Atom {
    pub fn param(name: &str) -> Atom {
        Atom::Param(Arc::from(name))
    }

    /// Semiclassical grade in half powers of `hbar`.
    pub fn grade(&self) -> i64 {
        match self {
            Atom::Moment(e) => e.degree() as i64,
            Atom::Hbar => 2,
            _ => 0,
        }
    }

    pub fn is_basic(&self) -> bool {
        matches!(self, Atom::Expect(_) | Atom::Moment(_))
    }

    pub fn name(&self, names: &[String]) -> String {
        match self {
            Atom::Root(r) => {
                let inner = format!("sqrt({})", r.radicand.dump(names));
                if r.sign < 0 {
                    format!("(-{})", inner)
                } else {
                    inner
                }
            }
            Atom::Expect(i) => format!("<{}>", names.get(*i).map(String::as_str).unwrap_or("?")),
            Atom::Moment(e) => format!("D({})", e.label(names)),
            Atom::Param(p) => p.to_string(),
            Atom::Hbar => "hbar".to_string(),
            Atom::Raw(e) => format!("W({})", e.label(names)),
        }
    }
}

pub type Term = Vec<(Atom, i32)>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("cannot invert non-monomial expression substituted for a negative power")]
    NonMonomialInverse,
    #[error("expression has no invertible leading part")]
    NotInvertible,
    #[error("missing value for {0}")]
    Missing(String),
}

fn term_grade(t: &Term) -> i64 {
    t.iter().map(|(a, e)| a.grade() * *e as i64).sum()
}

fn mul_terms(a: &Term, b: &Term) -> Term {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            Ordering::Less => {
                out.push(a[i].clone());
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j].clone());
                j += 1;
            }
            Ordering::Equal => {
                let e = a[i].1 + b[j].1;
                if e != 0 {
                    out.push((a[i].0.clone(), e));
                }
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

fn invert_term(t: &Term) -> Term {
    t.iter().map(|(a, e)| (a.clone(), -e)).collect()
}

/// Laurent polynomial with exact complex rational coefficients.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub struct Poly {
    terms: BTreeMap<Term, Coeff>,
}

impl Poly {
    pub fn zero() -> Self {
        Poly::default()
    }

    pub fn one() -> Self {
        Poly::constant(Coeff::one())
    }

    pub fn constant(c: Coeff) -> Self {
        Poly::monomial(Vec::new(), c)
    }

    pub fn int(n: i64) -> Self {
        Poly::constant(Coeff::from_int(n))
    }

    pub fn ratio(n: i64, d: i64) -> Self {
        Poly::constant(Coeff::from_ratio(n, d))
    }

    pub fn i() -> Self {
        Poly::constant(Coeff::i())
    }

    pub fn hbar() -> Self {
        Poly::atom(Atom::Hbar)
    }

    pub fn atom(a: Atom) -> Self {
        Poly::monomial(vec![(a, 1)], Coeff::one())
    }

    pub fn atom_pow(a: Atom, e: i32) -> Self {
        if e == 0 {
            return Poly::one();
        }
        Poly::monomial(vec![(a, e)], Coeff::one())
    }

    pub fn monomial(term: Term, c: Coeff) -> Self {
        let mut terms = BTreeMap::new();
        if !c.is_zero() {
            terms.insert(term, c);
        }
        Poly { terms }
    }

    /// Signed square root of `radicand`, as an atom.
    pub fn root(radicand: Poly, sign: i8) -> Self {
        Poly::atom(Atom::Root(Arc::new(RootDef { radicand, sign })))
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Term, &Coeff)> {
        self.terms.iter()
    }

    /// Constant value if the polynomial has no atoms.
    pub fn as_constant(&self) -> Option<Coeff> {
        match self.terms.len() {
            0 => Some(Coeff::zero()),
            1 => self.terms.get(&Vec::new()).cloned(),
            _ => None,
        }
    }

    pub fn is_one_poly(&self) -> bool {
        self.as_constant().is_some_and(|c| c.is_one())
    }

    pub fn as_monomial(&self) -> Option<(&Term, &Coeff)> {
        if self.terms.len() == 1 {
            self.terms.iter().next()
        } else {
            None
        }
    }

    fn add_term(&mut self, t: Term, c: Coeff) {
        if c.is_zero() {
            return;
        }
        match self.terms.get_mut(&t) {
            Some(existing) => {
                let s = &*existing + &c;
                if s.is_zero() {
                    self.terms.remove(&t);
                } else {
                    *existing = s;
                }
            }
            None => {
                self.terms.insert(t, c);
            }
        }
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (t, c) in &other.terms {
            out.add_term(t.clone(), c.clone());
        }
        out
    }

    pub fn add_assign(&mut self, other: &Poly) {
        for (t, c) in &other.terms {
            self.add_term(t.clone(), c.clone());
        }
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        let mut out = self.clone();
        for (t, c) in &other.terms {
            out.add_term(t.clone(), -c);
        }
        out
    }

    pub fn neg(&self) -> Poly {
        self.scale(&Coeff::from_int(-1))
    }

    pub fn scale(&self, c: &Coeff) -> Poly {
        if c.is_zero() {
            return Poly::zero();
        }
        Poly {
            terms: self.terms.iter().map(|(t, k)| (t.clone(), k * c)).collect(),
        }
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        let mut out = Poly::zero();
        for (ta, ca) in &self.terms {
            for (tb, cb) in &other.terms {
                out.add_term(mul_terms(ta, tb), ca * cb);
            }
        }
        out
    }

    /// Product truncated to terms of grade at most `max_grade`.
    pub fn mul_truncated(&self, other: &Poly, max_grade: i64) -> Poly {
        let mut out = Poly::zero();
        for (ta, ca) in &self.terms {
            let ga = term_grade(ta);
            for (tb, cb) in &other.terms {
                if ga + term_grade(tb) > max_grade {
                    continue;
                }
                out.add_term(mul_terms(ta, tb), ca * cb);
            }
        }
        out
    }

    pub fn pow(&self, n: u32) -> Poly {
        let mut out = Poly::one();
        for _ in 0..n {
            out = out.mul(self);
        }
        out
    }

    /// Complex conjugate of the coefficients, atoms treated as real.
    pub fn conj(&self) -> Poly {
        Poly {
            terms: self.terms.iter().map(|(t, c)| (t.clone(), c.conj())).collect(),
        }
    }

    pub fn grade_of(term: &Term) -> i64 {
        term_grade(term)
    }

    /// Lowest grade present, `None` for zero.
    pub fn min_grade(&self) -> Option<i64> {
        self.terms.keys().map(term_grade).min()
    }

    pub fn max_grade(&self) -> Option<i64> {
        self.terms.keys().map(term_grade).max()
    }

    /// Drops every term of grade above `max_grade`.
    pub fn truncate(&self, max_grade: i64) -> Poly {
        Poly {
            terms: self
                .terms
                .iter()
                .filter(|(t, _)| term_grade(t) <= max_grade)
                .map(|(t, c)| (t.clone(), c.clone()))
                .collect(),
        }
    }

    /// Terms of exactly the given grade.
    pub fn grade_part(&self, grade: i64) -> Poly {
        Poly {
            terms: self
                .terms
                .iter()
                .filter(|(t, _)| term_grade(t) == grade)
                .map(|(t, c)| (t.clone(), c.clone()))
                .collect(),
        }
    }

    /// Top-level atoms.
    pub fn atoms(&self) -> BTreeSet<Atom> {
        self.terms
            .keys()
            .flat_map(|t| t.iter().map(|(a, _)| a.clone()))
            .collect()
    }

    pub fn contains_atom(&self, atom: &Atom) -> bool {
        self.terms.keys().any(|t| t.iter().any(|(a, _)| a == atom))
    }

    /// Expectation values and moments this polynomial depends on, including
    /// through root radicands.
    pub fn basic_vars(&self) -> BTreeSet<Atom> {
        let mut out = BTreeSet::new();
        for a in self.atoms() {
            match &a {
                Atom::Expect(_) | Atom::Moment(_) => {
                    out.insert(a);
                }
                Atom::Root(r) => out.extend(r.radicand.basic_vars()),
                _ => {}
            }
        }
        out
    }

    /// Partial derivative with respect to an atom, with the chain rule
    /// applied through roots.
    pub fn partial(&self, x: &Atom) -> Poly {
        let mut out = Poly::zero();
        for (t, c) in &self.terms {
            for (k, (a, e)) in t.iter().enumerate() {
                let inner = if a == x {
                    Poly::one()
                } else if let Atom::Root(r) = a {
                    let d = r.radicand.partial(x);
                    if d.is_zero() {
                        continue;
                    }
                    // d sqrt(u) = u' / (2 sqrt(u))
                    d.mul(&Poly::atom_pow(a.clone(), -1)).scale(&Coeff::from_ratio(1, 2))
                } else {
                    continue;
                };
                let mut rest: Term = t.clone();
                if *e == 1 {
                    rest.remove(k);
                } else {
                    rest[k].1 = e - 1;
                }
                let factor = Poly::monomial(rest, c * &Coeff::from_int(*e as i64));
                out.add_assign(&factor.mul(&inner));
            }
        }
        out
    }

    /// Replaces atoms by polynomials. Negative powers of a replaced atom need
    /// a monomial replacement.
    pub fn substitute(&self, map: &BTreeMap<Atom, Poly>) -> Result<Poly, PolyError> {
        if map.is_empty() {
            return Ok(self.clone());
        }
        let mut out = Poly::zero();
        for (t, c) in &self.terms {
            let mut acc = Poly::constant(c.clone());
            let mut kept: Term = Vec::new();
            for (a, e) in t {
                if let Some(rep) = map.get(a) {
                    let factor = if *e >= 0 {
                        rep.pow(*e as u32)
                    } else {
                        rep.inverse_monomial()
                            .ok_or(PolyError::NonMonomialInverse)?
                            .pow((-e) as u32)
                    };
                    acc = acc.mul(&factor);
                } else if let Atom::Root(r) = a {
                    let rad = r.radicand.substitute(map)?;
                    if rad == r.radicand {
                        kept.push((a.clone(), *e));
                    } else {
                        acc = acc.mul(&Poly::atom_pow(
                            Atom::Root(Arc::new(RootDef { radicand: rad, sign: r.sign })),
                            *e,
                        ));
                    }
                } else {
                    kept.push((a.clone(), *e));
                }
            }
            out.add_assign(&acc.mul(&Poly::monomial(kept, Coeff::one())));
        }
        Ok(out)
    }

    /// Inverse of a single-term polynomial.
    pub fn inverse_monomial(&self) -> Option<Poly> {
        let (t, c) = self.as_monomial()?;
        Some(Poly::monomial(invert_term(t), c.inv()?))
    }

    /// Truncated power-series inverse. The grade-0 part must be a single
    /// monomial and no term may have negative grade.
    pub fn series_inverse(&self, max_grade: i64) -> Result<Poly, PolyError> {
        let lead = self.grade_part(0);
        let lead_inv = lead.inverse_monomial().ok_or(PolyError::NotInvertible)?;
        if self.min_grade().is_some_and(|g| g < 0) {
            return Err(PolyError::NotInvertible);
        }
        // 1/f = lead^-1 * sum_k (-u)^k, u = (f - lead) / lead
        let u = self.sub(&lead).mul(&lead_inv);
        if u.is_zero() {
            return Ok(lead_inv);
        }
        let minus_u = u.neg();
        let mut sum = Poly::one();
        let mut power = Poly::one();
        let steps = max_grade.max(0) + 1;
        for _ in 0..steps {
            power = power.mul_truncated(&minus_u, max_grade);
            if power.is_zero() {
                break;
            }
            sum.add_assign(&power);
        }
        Ok(sum.mul_truncated(&lead_inv, max_grade))
    }

    /// Divides by `i*hbar`; every term must carry a nonnegative-exponent
    /// `hbar` factor.
    pub fn div_i_hbar(&self) -> Option<Poly> {
        let minus_i = Coeff::from_int(-1);
        let minus_i = &minus_i * &Coeff::i();
        let mut out = Poly::zero();
        for (t, c) in &self.terms {
            let mut nt = t.clone();
            let pos = nt.iter().position(|(a, e)| *a == Atom::Hbar && *e >= 1)?;
            if nt[pos].1 == 1 {
                nt.remove(pos);
            } else {
                nt[pos].1 -= 1;
            }
            out.add_term(nt, c * &minus_i);
        }
        Some(out)
    }

    /// Smallest `hbar` exponent over all terms.
    pub fn min_hbar_power(&self) -> Option<i32> {
        self.terms
            .keys()
            .map(|t| {
                t.iter()
                    .find(|(a, _)| *a == Atom::Hbar)
                    .map(|(_, e)| *e)
                    .unwrap_or(0)
            })
            .min()
    }

    /// Rewrites `R^e`, `e >= 2`, as `R^(e-2) * radicand` for every root atom.
    pub fn reduce_roots(&self) -> Poly {
        let mut out = Poly::zero();
        let mut changed = false;
        for (t, c) in &self.terms {
            if let Some(k) = t
                .iter()
                .position(|(a, e)| matches!(a, Atom::Root(_)) && *e >= 2)
            {
                let Atom::Root(r) = &t[k].0 else { unreachable!() };
                let mut rest = t.clone();
                if rest[k].1 == 2 {
                    rest.remove(k);
                } else {
                    rest[k].1 -= 2;
                }
                out.add_assign(&Poly::monomial(rest, c.clone()).mul(&r.radicand));
                changed = true;
            } else {
                out.add_term(t.clone(), c.clone());
            }
        }
        if changed {
            out.reduce_roots()
        } else {
            out
        }
    }

    /// Even powers of each root needed to clear its negative exponents.
    fn root_shifts(&self) -> BTreeMap<Atom, i32> {
        let mut min_exp: BTreeMap<Atom, i32> = BTreeMap::new();
        for t in self.terms.keys() {
            for (a, e) in t {
                if matches!(a, Atom::Root(_)) && *e < 0 {
                    let m = min_exp.entry(a.clone()).or_insert(0);
                    *m = (*m).min(*e);
                }
            }
        }
        min_exp.into_iter().map(|(a, e)| (a, (-e + 1) / 2 * 2)).collect()
    }

    /// Product of the even root powers used by `clear_and_reduce_roots`.
    pub fn root_clearing_factor(&self) -> Poly {
        let mut f = Poly::one();
        for (a, k) in self.root_shifts() {
            f = f.mul(&Poly::atom_pow(a, k));
        }
        f
    }

    /// Multiplies by even powers of each root so that no root carries a
    /// negative exponent, then reduces. Zero iff the original is zero modulo
    /// `R^2 = radicand`.
    pub fn clear_and_reduce_roots(&self) -> Poly {
        let mut scaled = self.clone();
        for (a, k) in self.root_shifts() {
            scaled = scaled.mul(&Poly::atom_pow(a, k));
        }
        scaled.reduce_roots()
    }

    /// Representative modulo `R^2 = radicand` with a reduced numerator over
    /// a single even power of each root.
    pub fn normalize_roots(&self) -> Poly {
        let shifts = self.root_shifts();
        let mut out = self.clear_and_reduce_roots();
        for (a, k) in shifts {
            let Atom::Root(r) = &a else { continue };
            // N R^-k = sum_j rem_j R^(2j - k), peeling radicand factors off N.
            let mut acc = Poly::zero();
            let mut cur = out;
            let mut k = k;
            while k >= 2 && !cur.is_zero() {
                let (q, rem) = cur.div_rem(&r.radicand);
                acc.add_assign(&rem.mul(&Poly::atom_pow(a.clone(), -k)));
                cur = q;
                k -= 2;
            }
            acc.add_assign(&cur.mul(&Poly::atom_pow(a.clone(), -k)));
            out = acc;
        }
        out
    }

    pub fn is_zero_mod_roots(&self) -> bool {
        self.is_zero() || self.clear_and_reduce_roots().is_zero()
    }

    /// Exact quotient `self / divisor` in the Laurent ring, or `None` when the
    /// division leaves a remainder. Root atoms are treated as free symbols.
    pub fn exact_div(&self, divisor: &Poly) -> Option<Poly> {
        if divisor.is_zero() {
            return None;
        }
        if self.is_zero() {
            return Some(Poly::zero());
        }
        if let Some(inv) = divisor.inverse_monomial() {
            return Some(self.mul(&inv));
        }
        let (a, shift_a) = self.shift_nonnegative();
        let (b, shift_b) = divisor.shift_nonnegative();
        let universe: Vec<Atom> = a.atoms().union(&b.atoms()).cloned().collect();
        let dense = |t: &Term| -> Vec<i32> {
            let mut v = vec![0; universe.len()];
            for (atom, e) in t {
                let k = universe.binary_search(atom).unwrap();
                v[k] = *e;
            }
            v
        };
        let order = |x: &Vec<i32>, y: &Vec<i32>| -> Ordering {
            let dx: i32 = x.iter().sum();
            let dy: i32 = y.iter().sum();
            dx.cmp(&dy).then_with(|| x.cmp(y))
        };
        let leading = |p: &Poly| -> Option<(Term, Coeff, Vec<i32>)> {
            p.terms
                .iter()
                .map(|(t, c)| (t.clone(), c.clone(), dense(t)))
                .max_by(|x, y| order(&x.2, &y.2))
        };
        let (lt_b, lc_b, ld_b) = leading(&b)?;
        let lc_b_inv = lc_b.inv()?;
        let mut rem = a;
        let mut quot = Poly::zero();
        let max_iter = 10_000;
        for _ in 0..max_iter {
            let Some((lt_r, lc_r, ld_r)) = leading(&rem) else {
                return Some(quot.mul(&Poly::monomial(mul_terms(&shift_a, &invert_term(&shift_b)), Coeff::one())));
            };
            if ld_r.iter().zip(&ld_b).any(|(r, d)| r < d) {
                return None;
            }
            let qt = mul_terms(&lt_r, &invert_term(&lt_b));
            let q = Poly::monomial(qt, &lc_r * &lc_b_inv);
            rem = rem.sub(&q.mul(&b));
            quot.add_assign(&q);
        }
        None
    }

    /// Multivariate division by `divisor` in degree-then-lex order over the
    /// atoms present; returns quotient and fully reduced remainder.
    pub fn div_rem(&self, divisor: &Poly) -> (Poly, Poly) {
        if divisor.is_zero() {
            return (Poly::zero(), self.clone());
        }
        let universe: Vec<Atom> = self.atoms().union(&divisor.atoms()).cloned().collect();
        let dense = |t: &Term| -> Vec<i32> {
            let mut v = vec![0; universe.len()];
            for (atom, e) in t {
                let k = universe.binary_search(atom).unwrap();
                v[k] = *e;
            }
            v
        };
        let key = |x: &Vec<i32>| (x.iter().sum::<i32>(), x.clone());
        let (lt_b, lc_b) = divisor
            .terms
            .iter()
            .max_by_key(|(t, _)| key(&dense(t)))
            .map(|(t, c)| (t.clone(), c.clone()))
            .unwrap();
        let ld_b = dense(&lt_b);
        let lc_b_inv = lc_b.inv().unwrap();
        let mut rest = self.clone();
        let mut quot = Poly::zero();
        let mut rem = Poly::zero();
        while let Some((t, c)) = rest
            .terms
            .iter()
            .max_by_key(|(t, _)| key(&dense(t)))
            .map(|(t, c)| (t.clone(), c.clone()))
        {
            let d = dense(&t);
            if d.iter().zip(&ld_b).all(|(x, y)| x >= y) {
                let q = Poly::monomial(mul_terms(&t, &invert_term(&lt_b)), &c * &lc_b_inv);
                rest = rest.sub(&q.mul(divisor));
                quot.add_assign(&q);
            } else {
                let m = Poly::monomial(t, c);
                rest = rest.sub(&m);
                rem.add_assign(&m);
            }
        }
        (quot, rem)
    }

    /// Splits off the monomial of per-atom minimum exponents, returning the
    /// nonnegative remainder and the extracted monomial term.
    fn shift_nonnegative(&self) -> (Poly, Term) {
        let mut mins: BTreeMap<Atom, i32> = BTreeMap::new();
        let all = self.atoms();
        for a in &all {
            mins.insert(a.clone(), i32::MAX);
        }
        for t in self.terms.keys() {
            for a in &all {
                let e = t.iter().find(|(x, _)| x == a).map(|(_, e)| *e).unwrap_or(0);
                let m = mins.get_mut(a).unwrap();
                *m = (*m).min(e);
            }
        }
        let shift: Term = mins.into_iter().filter(|(_, e)| *e != 0).collect();
        let inv = invert_term(&shift);
        let shifted = Poly {
            terms: self
                .terms
                .iter()
                .map(|(t, c)| (mul_terms(t, &inv), c.clone()))
                .collect(),
        };
        (shifted, shift)
    }

    /// Numeric value with atom values supplied by `env`. Roots are evaluated
    /// from their radicands with the principal square root.
    pub fn eval<F>(&self, env: &F) -> Result<Complex64, PolyError>
    where
        F: Fn(&Atom) -> Option<Complex64>,
    {
        let mut total = Complex64::new(0.0, 0.0);
        for (t, c) in &self.terms {
            let mut v = c.to_c64();
            for (a, e) in t {
                let base = match a {
                    Atom::Root(r) => {
                        let rad = r.radicand.eval(env)?;
                        rad.sqrt() * r.sign as f64
                    }
                    other => env(other).ok_or_else(|| PolyError::Missing(format!("{:?}", other)))?,
                };
                v *= base.powi(*e);
            }
            total += v;
        }
        Ok(total)
    }

    /// Deterministic text form: terms ordered by grade, then by atom key.
    pub fn dump(&self, names: &[String]) -> String {
        if self.terms.is_empty() {
            return "0".to_string();
        }
        let mut ordered: Vec<(&Term, &Coeff)> = self.terms.iter().collect();
        ordered.sort_by(|a, b| term_grade(a.0).cmp(&term_grade(b.0)).then_with(|| a.0.cmp(b.0)));
        let mut out = String::new();
        for (k, (t, c)) in ordered.into_iter().enumerate() {
            let (negative, mag) = split_sign(c);
            if k == 0 {
                if negative {
                    out.push('-');
                }
            } else {
                out.push_str(if negative { " - " } else { " + " });
            }
            let mut factors: Vec<String> = Vec::new();
            let mag_s = mag.to_string();
            if !(mag.is_one() && !t.is_empty()) {
                factors.push(mag_s);
            }
            for (a, e) in t {
                let n = a.name(names);
                if *e == 1 {
                    factors.push(n);
                } else {
                    factors.push(format!("{}^{}", n, e));
                }
            }
            let _ = write!(out, "{}", factors.join("*"));
        }
        out
    }
}

/// Pulls an overall sign out of purely real or purely imaginary coefficients.
fn split_sign(c: &Coeff) -> (bool, Coeff) {
    use num_traits::{Signed, Zero};
    if c.im.is_zero() && c.re.is_negative() {
        return (true, -c);
    }
    if c.re.is_zero() && c.im.is_negative() {
        return (true, -c);
    }
    (false, c.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> Poly {
        Poly::atom(Atom::Expect(0))
    }
    fn y() -> Poly {
        Poly::atom(Atom::Expect(1))
    }

    #[test]
    fn arithmetic_cancels() {
        let p = x().add(&y());
        let q = x().sub(&y());
        let prod = p.mul(&q);
        let expect = x().pow(2).sub(&y().pow(2));
        assert_eq!(prod, expect);
        assert!(p.sub(&p).is_zero());
    }

    #[test]
    fn grading_and_truncation() {
        let m2 = Poly::atom(Atom::Moment(Exps::new(vec![2, 0])));
        let f = x().add(&m2).add(&m2.mul(&m2)).add(&Poly::hbar());
        assert_eq!(f.truncate(2), x().add(&m2).add(&Poly::hbar()));
        assert_eq!(f.min_grade(), Some(0));
        assert_eq!(f.max_grade(), Some(4));
    }

    #[test]
    fn root_derivative_and_reduction() {
        let rad = x().pow(2).add(&Poly::atom(Atom::param("m")).pow(2));
        let r = Poly::root(rad.clone(), 1);
        let d = r.partial(&Atom::Expect(0));
        // d/dx sqrt(x^2 + m^2) = x / sqrt(...)
        let r_atom = r.atoms().into_iter().next().unwrap();
        assert_eq!(d, x().mul(&Poly::atom_pow(r_atom.clone(), -1)));
        // R^2 - rad == 0 modulo the root relation
        assert!(r.pow(2).sub(&rad).is_zero_mod_roots());
        // R^-1 * rad - R == 0
        assert!(Poly::atom_pow(r_atom, -1).mul(&rad).sub(&r).is_zero_mod_roots());
    }

    #[test]
    fn exact_division() {
        let a = x().add(&y());
        let b = x().sub(&y()).mul(&Poly::atom_pow(Atom::Expect(2), -1));
        let prod = a.mul(&b);
        assert_eq!(prod.exact_div(&a).unwrap(), b);
        assert_eq!(prod.exact_div(&b).unwrap(), a);
        assert!(x().add(&Poly::one()).exact_div(&a).is_none());
    }

    #[test]
    fn series_inverse_matches_geometric() {
        let m2 = Poly::atom(Atom::Moment(Exps::new(vec![2, 0])));
        let f = Poly::int(2).mul(&x()).add(&m2);
        let inv = f.series_inverse(4).unwrap();
        let check = f.mul(&inv).truncate(4);
        assert_eq!(check, Poly::one());
    }

    #[test]
    fn substitution_with_negative_powers() {
        let f = Poly::atom_pow(Atom::Expect(0), -2).mul(&y());
        let mut map = BTreeMap::new();
        map.insert(Atom::Expect(0), Poly::int(3).mul(&y()));
        let g = f.substitute(&map).unwrap();
        assert_eq!(g, Poly::ratio(1, 9).mul(&Poly::atom_pow(Atom::Expect(1), -1)));
        map.insert(Atom::Expect(0), y().add(&Poly::one()));
        assert!(f.substitute(&map).is_err());
    }

    #[test]
    fn dump_is_ordered_by_grade() {
        let names = vec!["q".to_string(), "p".to_string()];
        let m = Poly::atom(Atom::Moment(Exps::new(vec![1, 1])));
        let f = m.add(&x().pow(2).neg()).add(&Poly::i().mul(&Poly::hbar()).scale(&Coeff::from_ratio(-1, 2)));
        assert_eq!(f.dump(&names), "-<q>^2 + D(q p) - 1/2*i*hbar");
    }
}
