//! Kinematical operator algebra: generators, bracket table and reduction of
//! operator words to the ordered monomial basis.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::coeff::Coeff;
use crate::poly::{Atom, Exps, Poly};

/// Ordered monomial `a_1^{n_1} ... a_N^{n_N}`.
pub type Monomial = Exps;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgebraError {
    #[error("line {line}: {message} (at `{token}`)")]
    MalformedSpec {
        line: usize,
        token: String,
        message: String,
    },
    #[error("inconsistent algebra: {0}")]
    AlgebraInconsistent(String),
    #[error("operands belong to different algebras")]
    AlgebraMismatch,
}

/// `[a_i, a_j] = central * 1 + sum_k linear[k] * a_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bracket {
    pub central: Poly,
    pub linear: Vec<Poly>,
}

impl Bracket {
    pub fn zero(n: usize) -> Self {
        Bracket {
            central: Poly::zero(),
            linear: vec![Poly::zero(); n],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.central.is_zero() && self.linear.iter().all(Poly::is_zero)
    }

    fn neg(&self) -> Bracket {
        Bracket {
            central: self.central.neg(),
            linear: self.linear.iter().map(Poly::neg).collect(),
        }
    }

    fn add_scaled(&mut self, other: &Bracket, s: &Poly) {
        self.central.add_assign(&other.central.mul(s));
        for (a, b) in self.linear.iter_mut().zip(&other.linear) {
            a.add_assign(&b.mul(s));
        }
    }
}

type ProductCache = Mutex<HashMap<(Exps, Exps), Vec<(Exps, Poly)>>>;

/// Generators, star involution and structure constants of a kinematical
/// algebra with linear-plus-central brackets.
#[derive(Debug)]
pub struct AlgebraSpec {
    names: Vec<String>,
    brackets: BTreeMap<(usize, usize), Bracket>,
    star: Vec<usize>,
    products: ProductCache,
}

impl PartialEq for AlgebraSpec {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.brackets == other.brackets && self.star == other.star
    }
}

/// One declared table entry `[a_i, a_j] = value`.
#[derive(Clone, Debug)]
pub struct BracketEntry {
    pub left: usize,
    pub right: usize,
    pub value: Bracket,
}

impl AlgebraSpec {
    /// Builds and validates an algebra: antisymmetry, Jacobi identity and
    /// the `hbar` grading of every bracket coefficient.
    pub fn new(
        names: Vec<String>,
        entries: Vec<BracketEntry>,
        star: Option<Vec<usize>>,
    ) -> Result<Self, AlgebraError> {
        let spec = Self::from_entries(names, entries, star)?;
        spec.check_hbar_grading()?;
        if let Some((i, j, k)) = spec.jacobi_violation() {
            return Err(AlgebraError::AlgebraInconsistent(format!(
                "Jacobi identity fails for ({}, {}, {})",
                spec.names[i], spec.names[j], spec.names[k]
            )));
        }
        Ok(spec)
    }

    /// Builds the table checking only antisymmetry of duplicate entries.
    pub fn from_entries(
        names: Vec<String>,
        entries: Vec<BracketEntry>,
        star: Option<Vec<usize>>,
    ) -> Result<Self, AlgebraError> {
        let n = names.len();
        let mut brackets: BTreeMap<(usize, usize), Bracket> = BTreeMap::new();
        for e in entries {
            if e.left >= n || e.right >= n || e.value.linear.len() != n {
                return Err(AlgebraError::AlgebraInconsistent("bracket entry out of range".into()));
            }
            if e.left == e.right {
                if !e.value.is_zero() {
                    return Err(AlgebraError::AlgebraInconsistent(format!(
                        "[{0}, {0}] must vanish",
                        names[e.left]
                    )));
                }
                continue;
            }
            let (key, value) = if e.left < e.right {
                ((e.left, e.right), e.value)
            } else {
                ((e.right, e.left), e.value.neg())
            };
            if let Some(existing) = brackets.get(&key) {
                if *existing != value {
                    return Err(AlgebraError::AlgebraInconsistent(format!(
                        "[{0}, {1}] and [{1}, {0}] are not antisymmetric",
                        names[key.0], names[key.1]
                    )));
                }
            }
            if !value.is_zero() {
                brackets.insert(key, value);
            }
        }
        let star = star.unwrap_or_else(|| (0..n).collect());
        if star.len() != n || (0..n).any(|i| star[i] >= n || star[star[i]] != i) {
            return Err(AlgebraError::AlgebraInconsistent("star map is not an involution".into()));
        }
        Ok(AlgebraSpec {
            names,
            brackets,
            star,
            products: Mutex::new(HashMap::new()),
        })
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn star_of(&self, i: usize) -> usize {
        self.star[i]
    }

    /// `[a_i, a_j]` for any pair.
    pub fn bracket(&self, i: usize, j: usize) -> Bracket {
        use std::cmp::Ordering::*;
        match i.cmp(&j) {
            Equal => Bracket::zero(self.n()),
            Less => self.brackets.get(&(i, j)).cloned().unwrap_or_else(|| Bracket::zero(self.n())),
            Greater => self
                .brackets
                .get(&(j, i))
                .map(Bracket::neg)
                .unwrap_or_else(|| Bracket::zero(self.n())),
        }
    }

    /// True when the stored table is antisymmetric (always, by construction
    /// of the canonical `i < j` storage) and diagonal-free.
    pub fn is_antisymmetric(&self) -> bool {
        (0..self.n()).all(|i| {
            (0..self.n()).all(|j| {
                let a = self.bracket(i, j);
                let b = self.bracket(j, i);
                a.central == b.central.neg()
                    && a.linear.iter().zip(&b.linear).all(|(x, y)| *x == y.neg())
            })
        })
    }

    /// `[a_i, [a_j, a_k]]` expressed in the extended basis.
    fn nested(&self, i: usize, j: usize, k: usize) -> Bracket {
        let inner = self.bracket(j, k);
        let mut out = Bracket::zero(self.n());
        for (l, c) in inner.linear.iter().enumerate() {
            if !c.is_zero() {
                out.add_scaled(&self.bracket(i, l), c);
            }
        }
        out
    }

    /// First generator triple violating the Jacobi identity, if any.
    pub fn jacobi_violation(&self) -> Option<(usize, usize, usize)> {
        let n = self.n();
        for i in 0..n {
            for j in (i + 1)..n {
                for k in (j + 1)..n {
                    let mut sum = self.nested(i, j, k);
                    sum.add_scaled(&self.nested(j, k, i), &Poly::one());
                    sum.add_scaled(&self.nested(k, i, j), &Poly::one());
                    if !sum.is_zero() {
                        return Some((i, j, k));
                    }
                }
            }
        }
        None
    }

    /// Every bracket coefficient must carry at least one power of `hbar` and
    /// no state-dependent atoms.
    pub fn check_hbar_grading(&self) -> Result<(), AlgebraError> {
        for ((i, j), b) in &self.brackets {
            for c in std::iter::once(&b.central).chain(b.linear.iter()) {
                if c.is_zero() {
                    continue;
                }
                if c.min_hbar_power().unwrap_or(0) < 1 {
                    return Err(AlgebraError::AlgebraInconsistent(format!(
                        "[{}, {}] has a term without a factor of hbar",
                        self.names[*i], self.names[*j]
                    )));
                }
                if c.atoms().iter().any(|a| a.is_basic()) {
                    return Err(AlgebraError::AlgebraInconsistent(format!(
                        "[{}, {}] depends on state variables",
                        self.names[*i], self.names[*j]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same algebra written for the centered generators `a_i - <a_i>`: the
    /// linear part of each bracket shifts into the central slot.
    pub fn centered(&self) -> AlgebraSpec {
        let mut brackets = BTreeMap::new();
        for (key, b) in &self.brackets {
            let mut central = b.central.clone();
            for (k, c) in b.linear.iter().enumerate() {
                central.add_assign(&c.mul(&Poly::atom(Atom::Expect(k))));
            }
            brackets.insert(
                *key,
                Bracket {
                    central,
                    linear: b.linear.clone(),
                },
            );
        }
        AlgebraSpec {
            names: self.names.clone(),
            brackets,
            star: self.star.clone(),
            products: Mutex::new(HashMap::new()),
        }
    }

    /// Reduces a word of generator indices to the ordered basis by repeatedly
    /// swapping the leftmost out-of-order adjacent pair.
    pub fn normal_order_word(&self, word: &[usize]) -> Vec<(Exps, Poly)> {
        let n = self.n();
        let mut pending: BTreeMap<Vec<usize>, Poly> = BTreeMap::new();
        pending.insert(word.to_vec(), Poly::one());
        let mut result: BTreeMap<Exps, Poly> = BTreeMap::new();
        while let Some((w, c)) = pending.pop_last() {
            match w.windows(2).position(|p| p[0] > p[1]) {
                None => {
                    let key = Exps::from_word(n, &w);
                    let slot = result.entry(key).or_default();
                    slot.add_assign(&c);
                }
                Some(pos) => {
                    let (a, b) = (w[pos], w[pos + 1]);
                    let mut swapped = w.clone();
                    swapped.swap(pos, pos + 1);
                    accumulate(&mut pending, swapped, &c);
                    // u a b v = u b a v + u [a, b] v
                    let br = self.bracket(a, b);
                    let mut shorter: Vec<usize> = w[..pos].to_vec();
                    shorter.extend_from_slice(&w[pos + 2..]);
                    if !br.central.is_zero() {
                        accumulate(&mut pending, shorter.clone(), &c.mul(&br.central));
                    }
                    for (k, lc) in br.linear.iter().enumerate() {
                        if lc.is_zero() {
                            continue;
                        }
                        let mut wk: Vec<usize> = w[..pos].to_vec();
                        wk.push(k);
                        wk.extend_from_slice(&w[pos + 2..]);
                        accumulate(&mut pending, wk, &c.mul(lc));
                    }
                }
            }
        }
        result.into_iter().filter(|(_, c)| !c.is_zero()).collect()
    }

    fn monomial_product(&self, a: &Exps, b: &Exps) -> Vec<(Exps, Poly)> {
        let key = (a.clone(), b.clone());
        if let Some(hit) = self.products.lock().unwrap().get(&key) {
            return hit.clone();
        }
        let mut word = a.word();
        word.extend(b.word());
        let value = self.normal_order_word(&word);
        self.products.lock().unwrap().insert(key, value.clone());
        value
    }
}

fn accumulate(map: &mut BTreeMap<Vec<usize>, Poly>, key: Vec<usize>, c: &Poly) {
    let slot = map.entry(key.clone()).or_default();
    slot.add_assign(c);
    if slot.is_zero() {
        map.remove(&key);
    }
}

/// Element of the operator algebra in the ordered monomial basis. The
/// coefficients are scalar polynomials (in `hbar`, parameters and, for
/// centered expressions, expectation values).
#[derive(Clone, Debug)]
pub struct OperatorPoly {
    alg: Arc<AlgebraSpec>,
    terms: BTreeMap<Monomial, Poly>,
}

impl PartialEq for OperatorPoly {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.alg, &other.alg) || self.alg == other.alg) && self.terms == other.terms
    }
}

impl OperatorPoly {
    pub fn zero(alg: &Arc<AlgebraSpec>) -> Self {
        OperatorPoly {
            alg: alg.clone(),
            terms: BTreeMap::new(),
        }
    }

    pub fn scalar(alg: &Arc<AlgebraSpec>, c: Poly) -> Self {
        let mut out = Self::zero(alg);
        out.add_term(Exps::zeros(alg.n()), c);
        out
    }

    pub fn identity(alg: &Arc<AlgebraSpec>) -> Self {
        Self::scalar(alg, Poly::one())
    }

    pub fn generator(alg: &Arc<AlgebraSpec>, i: usize) -> Self {
        let mut out = Self::zero(alg);
        out.add_term(Exps::unit(alg.n(), i), Poly::one());
        out
    }

    /// Ordered monomial with coefficient one.
    pub fn monomial(alg: &Arc<AlgebraSpec>, m: Monomial) -> Self {
        let mut out = Self::zero(alg);
        out.add_term(m, Poly::one());
        out
    }

    /// `a_i - <a_i> 1`.
    pub fn centered_generator(alg: &Arc<AlgebraSpec>, i: usize) -> Self {
        Self::generator(alg, i).sub(&Self::scalar(alg, Poly::atom(Atom::Expect(i))))
    }

    pub fn algebra(&self) -> &Arc<AlgebraSpec> {
        &self.alg
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Poly)> {
        self.terms.iter()
    }

    pub fn coeff(&self, m: &Monomial) -> Poly {
        self.terms.get(m).cloned().unwrap_or_default()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Highest total degree among stored monomials.
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(Exps::degree).max().unwrap_or(0)
    }

    pub fn add_term(&mut self, m: Monomial, c: Poly) {
        if c.is_zero() {
            return;
        }
        let slot = self.terms.entry(m.clone()).or_default();
        slot.add_assign(&c);
        if slot.is_zero() {
            self.terms.remove(&m);
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.neg())
    }

    pub fn neg(&self) -> Self {
        self.scale(&Poly::int(-1))
    }

    pub fn scale(&self, c: &Poly) -> Self {
        let mut out = Self::zero(&self.alg);
        for (m, k) in &self.terms {
            out.add_term(m.clone(), k.mul(c));
        }
        out
    }

    fn same_algebra(&self, other: &Self) -> Result<(), AlgebraError> {
        if Arc::ptr_eq(&self.alg, &other.alg) || *self.alg == *other.alg {
            Ok(())
        } else {
            Err(AlgebraError::AlgebraMismatch)
        }
    }

    /// Associative product, reduced to the ordered basis.
    pub fn multiply(&self, other: &Self) -> Result<Self, AlgebraError> {
        self.same_algebra(other)?;
        let mut out = Self::zero(&self.alg);
        for (ma, ca) in &self.terms {
            for (mb, cb) in &other.terms {
                let c = ca.mul(cb);
                for (m, k) in self.alg.monomial_product(ma, mb) {
                    out.add_term(m, k.mul(&c));
                }
            }
        }
        Ok(out)
    }

    pub fn commutator(&self, other: &Self) -> Result<Self, AlgebraError> {
        Ok(self.multiply(other)?.sub(&other.multiply(self)?))
    }

    /// Adjoint: reverses products, maps generators through the star map and
    /// conjugates coefficients.
    pub fn star(&self) -> Self {
        let mut out = Self::zero(&self.alg);
        for (m, c) in &self.terms {
            let word: Vec<usize> = m.word().into_iter().rev().map(|g| self.alg.star_of(g)).collect();
            let cc = c.conj();
            for (mm, k) in self.alg.normal_order_word(&word) {
                out.add_term(mm, k.mul(&cc));
            }
        }
        out
    }

    /// Smallest power of `hbar` over all coefficients.
    pub fn min_hbar_power(&self) -> Option<i32> {
        self.terms.values().filter_map(Poly::min_hbar_power).min()
    }

    pub fn dump(&self) -> String {
        if self.terms.is_empty() {
            return "0".into();
        }
        let names = self.alg.names();
        self.terms
            .iter()
            .map(|(m, c)| {
                let label = if m.degree() == 0 { "1".to_string() } else { m.label(names).replace(' ', "*") };
                format!("({})*{}", c.dump(names), label)
            })
            .collect::<Vec<_>>()
            .join(" + ")
    }
}

/// Reduces a generator word to the ordered basis.
pub fn normal_order(alg: &Arc<AlgebraSpec>, word: &[usize]) -> OperatorPoly {
    let mut out = OperatorPoly::zero(alg);
    for (m, c) in alg.normal_order_word(word) {
        out.add_term(m, c);
    }
    out
}

/// `i * hbar * 1` as a bracket value.
pub fn canonical_bracket(n: usize) -> Bracket {
    Bracket {
        central: Poly::i().mul(&Poly::hbar()),
        linear: vec![Poly::zero(); n],
    }
}

/// `c * i * hbar` as a scalar.
pub fn i_hbar(c: Coeff) -> Poly {
    Poly::constant(c).mul(&Poly::i()).mul(&Poly::hbar())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn particle() -> Arc<AlgebraSpec> {
        let names: Vec<String> = ["t", "pt", "q", "p"].iter().map(|s| s.to_string()).collect();
        let entries = vec![
            BracketEntry { left: 0, right: 1, value: canonical_bracket(4) },
            BracketEntry { left: 2, right: 3, value: canonical_bracket(4) },
        ];
        Arc::new(AlgebraSpec::new(names, entries, None).unwrap())
    }

    fn su2() -> Result<AlgebraSpec, AlgebraError> {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let lin = |k: usize, c: i64| {
            let mut linear = vec![Poly::zero(); 3];
            linear[k] = i_hbar(Coeff::from_int(c));
            Bracket { central: Poly::zero(), linear }
        };
        AlgebraSpec::new(
            names,
            vec![
                BracketEntry { left: 0, right: 1, value: lin(2, 1) },
                BracketEntry { left: 1, right: 2, value: lin(0, 1) },
                BracketEntry { left: 0, right: 2, value: lin(1, -1) },
            ],
            None,
        )
    }

    #[test]
    fn lie_type_algebra_passes_jacobi() {
        let alg = su2().unwrap();
        assert!(alg.is_antisymmetric());
        assert_eq!(alg.jacobi_violation(), None);
    }

    #[test]
    fn broken_jacobi_is_rejected() {
        // [a, b] = i hbar b, [b, c] = i hbar c, [a, c] = 0
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let lin = |k: usize| {
            let mut linear = vec![Poly::zero(); 3];
            linear[k] = i_hbar(Coeff::one());
            Bracket { central: Poly::zero(), linear }
        };
        let entries = vec![
            BracketEntry { left: 0, right: 1, value: lin(1) },
            BracketEntry { left: 1, right: 2, value: lin(2) },
        ];
        let err = AlgebraSpec::new(names, entries, None).unwrap_err();
        assert!(matches!(err, AlgebraError::AlgebraInconsistent(_)));
    }

    #[test]
    fn bracket_without_hbar_is_rejected() {
        let names: Vec<String> = ["q", "p"].iter().map(|s| s.to_string()).collect();
        let entries = vec![BracketEntry {
            left: 0,
            right: 1,
            value: Bracket { central: Poly::i(), linear: vec![Poly::zero(); 2] },
        }];
        assert!(AlgebraSpec::new(names, entries, None).is_err());
    }

    #[test]
    fn abelian_single_generator() {
        let alg = Arc::new(AlgebraSpec::new(vec!["a".into()], vec![], None).unwrap());
        let w = normal_order(&alg, &[0, 0, 0]);
        assert_eq!(w, OperatorPoly::monomial(&alg, Exps::new(vec![3])));
    }

    #[test]
    fn swap_produces_central_term() {
        let alg = particle();
        // pt t = t pt - i hbar
        let w = normal_order(&alg, &[1, 0]);
        let expect = OperatorPoly::monomial(&alg, Exps::new(vec![1, 1, 0, 0]))
            .sub(&OperatorPoly::scalar(&alg, i_hbar(Coeff::one())));
        assert_eq!(w, expect);
        // p q p = q p^2 - i hbar p
        let w = normal_order(&alg, &[3, 2, 3]);
        let expect = OperatorPoly::monomial(&alg, Exps::new(vec![0, 0, 1, 2]))
            .sub(&OperatorPoly::generator(&alg, 3).scale(&i_hbar(Coeff::one())));
        assert_eq!(w, expect);
        assert_eq!(normal_order(&alg, &[]), OperatorPoly::identity(&alg));
    }

    #[test]
    fn commutator_of_time_with_constraint() {
        let alg = particle();
        let pt = OperatorPoly::generator(&alg, 1);
        let p = OperatorPoly::generator(&alg, 3);
        let m = Poly::atom(Atom::param("m"));
        let c = pt.multiply(&pt).unwrap()
            .sub(&p.multiply(&p).unwrap())
            .sub(&OperatorPoly::scalar(&alg, m.mul(&m)));
        let t = OperatorPoly::generator(&alg, 0);
        let br = t.commutator(&c).unwrap();
        assert_eq!(br, pt.scale(&i_hbar(Coeff::from_int(2))));
        assert_eq!(c.star(), c);
    }

    #[test]
    fn star_reorders_products() {
        let alg = particle();
        let tpt = OperatorPoly::monomial(&alg, Exps::new(vec![1, 1, 0, 0]));
        let expect = tpt.sub(&OperatorPoly::scalar(&alg, i_hbar(Coeff::one())));
        assert_eq!(tpt.star(), expect);
        let ih = OperatorPoly::scalar(&alg, i_hbar(Coeff::one()));
        assert_eq!(ih.star(), ih.neg());
        assert_eq!(tpt.star().star(), tpt);
    }

    #[test]
    fn mismatched_algebras_are_rejected() {
        let a = particle();
        let b = Arc::new(AlgebraSpec::new(vec!["x".into()], vec![], None).unwrap());
        let x = OperatorPoly::generator(&a, 0);
        let y = OperatorPoly::generator(&b, 0);
        assert_eq!(x.multiply(&y).unwrap_err(), AlgebraError::AlgebraMismatch);
    }
}
