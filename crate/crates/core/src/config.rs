//! Model configuration: a section/key/value text format, the expression
//! grammar used inside it, and the typed [`ModelConfig`].
//!
//! ```text
//! [algebra]
//! generators = [t, pt, q, p]
//! [brackets]
//! "t,pt" = "i*hbar*one"
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::algebra::{AlgebraError, AlgebraSpec, Bracket, BracketEntry, OperatorPoly};
use crate::coeff::Coeff;
use crate::moments::MomentVar;
use crate::poly::{Atom, Exps, Poly};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message} (at `{token}`)")]
    Syntax {
        line: usize,
        column: usize,
        token: String,
        message: String,
    },
    #[error(transparent)]
    Algebra(#[from] AlgebraError),
}

impl ConfigError {
    fn at(line: usize, column: usize, token: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Syntax {
            line,
            column,
            token: token.into(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Str(String),
    Num(String),
    Bool(bool),
    List(Vec<(String, usize)>),
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub key: String,
    pub value: Value,
    pub line: usize,
    /// 1-based column where the value starts (inside the quotes for strings).
    pub column: usize,
}

impl Entry {
    fn err(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::at(self.line, self.column, self.raw(), message)
    }

    fn raw(&self) -> String {
        match &self.value {
            Value::Str(s) | Value::Num(s) => s.clone(),
            Value::Bool(b) => b.to_string(),
            Value::List(items) => items.iter().map(|(s, _)| s.as_str()).collect::<Vec<_>>().join(", "),
        }
    }

    pub fn as_str(&self) -> Result<&str, ConfigError> {
        match &self.value {
            Value::Str(s) => Ok(s),
            _ => Err(self.err("expected a quoted string")),
        }
    }

    pub fn as_f64(&self) -> Result<f64, ConfigError> {
        match &self.value {
            Value::Num(s) => s.parse().map_err(|_| self.err("expected a number")),
            _ => Err(self.err("expected a number")),
        }
    }

    pub fn as_usize(&self) -> Result<usize, ConfigError> {
        match &self.value {
            Value::Num(s) => s.parse().map_err(|_| self.err("expected a nonnegative integer")),
            _ => Err(self.err("expected a nonnegative integer")),
        }
    }

    pub fn as_bool(&self) -> Result<bool, ConfigError> {
        match &self.value {
            Value::Bool(b) => Ok(*b),
            _ => Err(self.err("expected true or false")),
        }
    }

    pub fn as_list(&self) -> Result<&[(String, usize)], ConfigError> {
        match &self.value {
            Value::List(v) => Ok(v),
            _ => Err(self.err("expected a list")),
        }
    }

    /// Numbers and expression strings alike, as exact scalars.
    fn as_expr_text(&self) -> Result<(String, usize), ConfigError> {
        match &self.value {
            Value::Str(s) | Value::Num(s) => Ok((s.clone(), self.column)),
            _ => Err(self.err("expected a number or an expression string")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

fn is_bare(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '+' | '.')
}

/// Reads a quoted string starting at `s[0] == '"'`; returns content and the
/// byte length consumed.
fn quoted(s: &str, line: usize, col: usize) -> Result<(String, usize), ConfigError> {
    match s[1..].find('"') {
        Some(end) => Ok((s[1..1 + end].to_string(), end + 2)),
        None => Err(ConfigError::at(line, col, s, "unterminated string")),
    }
}

pub fn parse_document(text: &str) -> Result<Document, ConfigError> {
    let mut doc = Document::default();
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let body = strip_comment(raw);
        let trimmed = body.trim();
        if trimmed.is_empty() {
            continue;
        }
        let indent = body.len() - body.trim_start().len();
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::at(line_no, indent + 1, trimmed, "unterminated section header"))?
                .trim();
            if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.') {
                return Err(ConfigError::at(line_no, indent + 2, name, "invalid section name"));
            }
            if doc.section(name).is_some() {
                return Err(ConfigError::at(line_no, indent + 2, name, "duplicate section"));
            }
            doc.sections.push(Section {
                name: name.to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let Some(section) = doc.sections.last_mut() else {
            return Err(ConfigError::at(line_no, indent + 1, trimmed, "entry outside of any section"));
        };
        let (key, key_len) = if trimmed.starts_with('"') {
            quoted(trimmed, line_no, indent + 1)?
        } else {
            let end = trimmed.find(|c: char| !is_bare(c)).unwrap_or(trimmed.len());
            (trimmed[..end].to_string(), end)
        };
        if key.is_empty() {
            return Err(ConfigError::at(line_no, indent + 1, trimmed, "expected a key"));
        }
        let after_key = &trimmed[key_len..];
        let after_ws = after_key.trim_start();
        let Some(value_part) = after_ws.strip_prefix('=') else {
            let col = indent + key_len + (after_key.len() - after_ws.len()) + 1;
            return Err(ConfigError::at(line_no, col, after_ws, "expected `=`"));
        };
        let value_text = value_part.trim();
        let value_col = indent + (trimmed.len() - value_part.len()) + (value_part.len() - value_part.trim_start().len()) + 1;
        let (value, column) = parse_value(value_text, line_no, value_col)?;
        if section.get(&key).is_some() {
            return Err(ConfigError::at(line_no, indent + 1, key, "duplicate key"));
        }
        section.entries.push(Entry { key, value, line: line_no, column });
    }
    Ok(doc)
}

fn parse_value(v: &str, line: usize, col: usize) -> Result<(Value, usize), ConfigError> {
    if v.is_empty() {
        return Err(ConfigError::at(line, col, v, "missing value"));
    }
    if v.starts_with('"') {
        let (s, used) = quoted(v, line, col)?;
        if !v[used..].trim().is_empty() {
            return Err(ConfigError::at(line, col + used, &v[used..], "unexpected text after string"));
        }
        return Ok((Value::Str(s), col + 1));
    }
    if let Some(inner) = v.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| ConfigError::at(line, col, v, "unterminated list"))?;
        let mut items = Vec::new();
        let mut rest = inner;
        let mut offset = col + 1;
        loop {
            let lead = rest.len() - rest.trim_start().len();
            rest = rest.trim_start();
            offset += lead;
            if rest.is_empty() {
                break;
            }
            let (item, used) = if rest.starts_with('"') {
                quoted(rest, line, offset)?
            } else {
                let end = rest.find(',').unwrap_or(rest.len());
                (rest[..end].trim_end().to_string(), end)
            };
            if item.is_empty() {
                return Err(ConfigError::at(line, offset, rest, "empty list item"));
            }
            items.push((item, offset));
            rest = &rest[used..];
            offset += used;
            let lead = rest.len() - rest.trim_start().len();
            rest = rest.trim_start();
            offset += lead;
            match rest.strip_prefix(',') {
                Some(r) => {
                    rest = r;
                    offset += 1;
                }
                None if rest.is_empty() => break,
                None => return Err(ConfigError::at(line, offset, rest, "expected `,` in list")),
            }
        }
        return Ok((Value::List(items), col));
    }
    match v {
        "true" => return Ok((Value::Bool(true), col)),
        "false" => return Ok((Value::Bool(false), col)),
        _ => {}
    }
    if v.parse::<f64>().is_ok() {
        return Ok((Value::Num(v.to_string()), col));
    }
    Err(ConfigError::at(line, col, v, "expected a string, number, boolean or list"))
}

/// Parsed arithmetic expression.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(Coeff),
    Ident(String, usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>, usize),
    Pow(Box<Expr>, u32),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(String),
    Ident(String),
    Op(char),
}

struct Lexed {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    end_col: usize,
}

fn lex(s: &str, line: usize, col: usize) -> Result<Lexed, ConfigError> {
    let chars: Vec<char> = s.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let at = col + i;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            toks.push((Tok::Num(chars[start..i].iter().collect()), at));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            toks.push((Tok::Ident(chars[start..i].iter().collect()), at));
        } else if "+-*/^()".contains(c) {
            toks.push((Tok::Op(c), at));
            i += 1;
        } else {
            return Err(ConfigError::at(line, at, c.to_string(), "unexpected character"));
        }
    }
    Ok(Lexed {
        toks,
        pos: 0,
        line,
        end_col: col + chars.len(),
    })
}

impl Lexed {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.pos)
    }

    fn err_here(&self, message: &str) -> ConfigError {
        match self.peek() {
            Some((t, c)) => {
                let text = match t {
                    Tok::Num(s) | Tok::Ident(s) => s.clone(),
                    Tok::Op(c) => c.to_string(),
                };
                ConfigError::at(self.line, *c, text, message)
            }
            None => ConfigError::at(self.line, self.end_col, "", message),
        }
    }

    fn eat(&mut self, op: char) -> bool {
        if matches!(self.peek(), Some((Tok::Op(c), _)) if *c == op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ConfigError> {
        let mut lhs = self.term()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ConfigError> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if matches!(self.peek(), Some((Tok::Op('/'), _))) {
                let col = self.peek().map(|t| t.1).unwrap_or(0);
                self.pos += 1;
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?), col);
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ConfigError> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ConfigError> {
        let base = self.atom()?;
        if self.eat('^') {
            match self.peek().cloned() {
                Some((Tok::Num(n), _)) => {
                    let k: u32 = n.parse().map_err(|_| self.err_here("exponent must be a nonnegative integer"))?;
                    self.pos += 1;
                    return Ok(Expr::Pow(Box::new(base), k));
                }
                _ => return Err(self.err_here("exponent must be a nonnegative integer")),
            }
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ConfigError> {
        match self.peek().cloned() {
            Some((Tok::Num(n), _)) => {
                let c = Coeff::parse_decimal(&n).ok_or_else(|| self.err_here("malformed number"))?;
                self.pos += 1;
                Ok(Expr::Num(c))
            }
            Some((Tok::Ident(name), col)) => {
                self.pos += 1;
                Ok(Expr::Ident(name, col))
            }
            Some((Tok::Op('('), _)) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(')') {
                    return Err(self.err_here("expected `)`"));
                }
                Ok(e)
            }
            _ => Err(self.err_here("expected a number, name or `(`")),
        }
    }
}

/// Parses `s`, which starts at `column` of `line` in the source file.
pub fn parse_expr(s: &str, line: usize, column: usize) -> Result<Expr, ConfigError> {
    let mut lx = lex(s, line, column)?;
    if lx.toks.is_empty() {
        return Err(ConfigError::at(line, column, s, "empty expression"));
    }
    let e = lx.expr()?;
    if lx.pos != lx.toks.len() {
        return Err(lx.err_here("unexpected token"));
    }
    Ok(e)
}

/// Names that may appear in expressions besides generators.
#[derive(Clone, Debug, Default)]
pub struct Scope {
    pub parameters: Vec<String>,
}

impl Scope {
    fn scalar(&self, name: &str) -> Option<Poly> {
        match name {
            "i" => Some(Poly::i()),
            "hbar" => Some(Poly::hbar()),
            "one" => Some(Poly::one()),
            _ if self.parameters.iter().any(|p| p == name) => Some(Poly::atom(Atom::param(name))),
            _ => None,
        }
    }
}

/// Evaluates `e` with generators `gens[k]` mapped to `Atom::param` markers so
/// that the result is a commutative polynomial.
fn eval_commutative(e: &Expr, scope: &Scope, gens: &[String], line: usize) -> Result<Poly, ConfigError> {
    let rec = |x: &Expr| eval_commutative(x, scope, gens, line);
    Ok(match e {
        Expr::Num(c) => Poly::constant(c.clone()),
        Expr::Ident(name, col) => {
            if let Some(p) = scope.scalar(name) {
                p
            } else if gens.iter().any(|g| g == name) {
                Poly::atom(Atom::param(&format!("\u{0}gen:{}", name)))
            } else {
                return Err(ConfigError::at(line, *col, name.clone(), "unknown name"));
            }
        }
        Expr::Add(a, b) => rec(a)?.add(&rec(b)?),
        Expr::Sub(a, b) => rec(a)?.sub(&rec(b)?),
        Expr::Neg(a) => rec(a)?.neg(),
        Expr::Mul(a, b) => rec(a)?.mul(&rec(b)?),
        Expr::Div(a, b, col) => {
            let d = rec(b)?;
            let inv = d
                .as_constant()
                .and_then(|c| c.inv())
                .ok_or_else(|| ConfigError::at(line, *col, "/", "division only by nonzero numbers"))?;
            rec(a)?.scale(&inv)
        }
        Expr::Pow(a, k) => rec(a)?.pow(*k),
    })
}

/// Scalar expression over `i`, `hbar`, `one` and declared parameters.
pub fn eval_scalar(e: &Expr, scope: &Scope, line: usize) -> Result<Poly, ConfigError> {
    eval_commutative(e, scope, &[], line)
}

/// Operator expression; products are normal ordered in the algebra.
pub fn eval_operator(e: &Expr, alg: &Arc<AlgebraSpec>, scope: &Scope, line: usize) -> Result<OperatorPoly, ConfigError> {
    let rec = |x: &Expr| eval_operator(x, alg, scope, line);
    Ok(match e {
        Expr::Num(c) => OperatorPoly::scalar(alg, Poly::constant(c.clone())),
        Expr::Ident(name, col) => {
            if let Some(i) = alg.index_of(name) {
                OperatorPoly::generator(alg, i)
            } else if let Some(p) = scope.scalar(name) {
                OperatorPoly::scalar(alg, p)
            } else {
                return Err(ConfigError::at(line, *col, name.clone(), "unknown generator or parameter"));
            }
        }
        Expr::Add(a, b) => rec(a)?.add(&rec(b)?),
        Expr::Sub(a, b) => rec(a)?.sub(&rec(b)?),
        Expr::Neg(a) => rec(a)?.neg(),
        Expr::Mul(a, b) => rec(a)?.multiply(&rec(b)?)?,
        Expr::Div(a, b, col) => {
            let d = eval_scalar(b, scope, line)?;
            let inv = d
                .as_constant()
                .and_then(|c| c.inv())
                .ok_or_else(|| ConfigError::at(line, *col, "/", "division only by nonzero numbers"))?;
            rec(a)?.scale(&Poly::constant(inv))
        }
        Expr::Pow(a, k) => {
            let base = rec(a)?;
            let mut acc = OperatorPoly::identity(alg);
            for _ in 0..*k {
                acc = acc.multiply(&base)?;
            }
            acc
        }
    })
}

/// Builds an algebra from the `[algebra]` and `[brackets]` sections.
pub fn load_algebra(doc: &Document) -> Result<Arc<AlgebraSpec>, ConfigError> {
    let sec = doc
        .section("algebra")
        .ok_or_else(|| ConfigError::at(1, 1, "", "missing [algebra] section"))?;
    check_keys(sec, &["generators", "star"])?;
    let gens_entry = sec
        .get("generators")
        .ok_or_else(|| ConfigError::at(sec.line, 1, "algebra", "missing `generators`"))?;
    let mut names: Vec<String> = Vec::new();
    for (g, col) in gens_entry.as_list()? {
        let valid = g.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_')
            && g.chars().all(|c| c.is_alphanumeric() || c == '_');
        if !valid || matches!(g.as_str(), "i" | "hbar" | "one" | "D") {
            return Err(ConfigError::at(gens_entry.line, *col, g.clone(), "invalid generator name"));
        }
        if names.contains(g) {
            return Err(ConfigError::at(gens_entry.line, *col, g.clone(), "duplicate generator"));
        }
        names.push(g.clone());
    }
    if names.is_empty() {
        return Err(gens_entry.err("at least one generator is required"));
    }
    let n = names.len();
    let index = |name: &str, line: usize, col: usize| {
        names
            .iter()
            .position(|g| g == name)
            .ok_or_else(|| ConfigError::at(line, col, name, "unknown generator"))
    };
    let star = match sec.get("star") {
        None => None,
        Some(e) => {
            let items = e.as_list()?;
            if items.len() != n {
                return Err(e.err("star must list one adjoint per generator"));
            }
            Some(items.iter().map(|(s, c)| index(s, e.line, *c)).collect::<Result<Vec<_>, _>>()?)
        }
    };
    let scope = Scope::default();
    let mut entries = Vec::new();
    if let Some(bs) = doc.section("brackets") {
        for e in &bs.entries {
            let Some((l, r)) = e.key.split_once(',') else {
                return Err(ConfigError::at(e.line, 1, e.key.clone(), "bracket key must read \"a,b\""));
            };
            let left = index(l.trim(), e.line, 1)?;
            let right = index(r.trim(), e.line, 1)?;
            let expr = parse_expr(e.as_str()?, e.line, e.column)?;
            let value = eval_commutative(&expr, &scope, &names, e.line)?;
            let mut bracket = Bracket::zero(n);
            let markers: Vec<Atom> = names.iter().map(|g| Atom::param(&format!("\u{0}gen:{}", g))).collect();
            for (t, c) in value.terms() {
                let gens: Vec<(usize, i32)> = t
                    .iter()
                    .filter_map(|(a, k)| markers.iter().position(|m| m == a).map(|i| (i, *k)))
                    .collect();
                let rest: Vec<(Atom, i32)> = t.iter().filter(|(a, _)| !markers.contains(a)).cloned().collect();
                let mut coeff = Poly::constant(c.clone());
                for (a, k) in rest {
                    coeff = coeff.mul(&Poly::atom_pow(a, k));
                }
                match gens.as_slice() {
                    [] => bracket.central = bracket.central.add(&coeff),
                    [(i, 1)] => bracket.linear[*i] = bracket.linear[*i].add(&coeff),
                    _ => return Err(e.err("bracket values must be linear in the generators")),
                }
            }
            entries.push(BracketEntry { left, right, value: bracket });
        }
    }
    Ok(Arc::new(AlgebraSpec::new(names, entries, star)?))
}

fn check_keys(sec: &Section, allowed: &[&str]) -> Result<(), ConfigError> {
    for e in &sec.entries {
        if !allowed.contains(&e.key.as_str()) {
            return Err(ConfigError::at(e.line, 1, e.key.clone(), format!("unknown key in [{}]", sec.name)));
        }
    }
    Ok(())
}

/// Parses `q`, `<q>`, `D(q^2)` or `D(q p)` into a coordinate.
pub fn parse_variable(s: &str, names: &[String]) -> Option<MomentVar> {
    let s = s.trim();
    let find = |g: &str| names.iter().position(|n| n == g);
    if let Some(inner) = s.strip_prefix("D(").and_then(|r| r.strip_suffix(')')) {
        let mut e = vec![0u32; names.len()];
        for part in inner.split_whitespace() {
            let (g, k) = match part.split_once('^') {
                Some((g, k)) => (g, k.parse::<u32>().ok()?),
                None => (part, 1),
            };
            e[find(g)?] += k;
        }
        return MomentVar::moment(Exps::new(e));
    }
    let bare = s.strip_prefix('<').and_then(|r| r.strip_suffix('>')).unwrap_or(s);
    find(bare).map(MomentVar::Expect)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Perturbative,
    Newton,
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveMode::Perturbative => "perturbative",
            SolveMode::Newton => "newton",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub eliminate: Option<Vec<MomentVar>>,
    pub branch: i8,
    pub mode: SolveMode,
}

#[derive(Clone, Debug)]
pub struct EvolveOptions {
    /// Exact initial values; coordinates not listed start at zero.
    pub initial: Vec<(MomentVar, Poly)>,
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
    pub substeps: usize,
    pub halt_on_violation: bool,
    pub reality_tol: f64,
    pub semiclassical_budget: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub energy_tol: f64,
    pub velocity_tol: f64,
    pub drift_tol: f64,
    pub property_cases: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub algebra: Arc<AlgebraSpec>,
    pub parameters: BTreeMap<String, Poly>,
    pub hbar: f64,
    pub constraint: Option<OperatorPoly>,
    pub hamiltonian: Option<OperatorPoly>,
    pub clock: Option<usize>,
    pub half_order: u32,
    pub solve: SolveOptions,
    pub evolve: EvolveOptions,
    pub check: CheckOptions,
}

impl ModelConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc = parse_document(text)?;
        const KNOWN: [&str; 10] = [
            "algebra",
            "brackets",
            "parameters",
            "constraint",
            "hamiltonian",
            "gauge",
            "truncation",
            "solve",
            "evolve",
            "evolve.initial",
        ];
        for s in &doc.sections {
            if !KNOWN.contains(&s.name.as_str()) && s.name != "check" {
                return Err(ConfigError::at(s.line, 2, s.name.clone(), "unknown section"));
            }
        }
        let algebra = load_algebra(&doc)?;
        let names = algebra.names().to_vec();

        let mut parameters = BTreeMap::new();
        let mut hbar = 0.01;
        if let Some(sec) = doc.section("parameters") {
            for e in &sec.entries {
                if e.key == "hbar" {
                    hbar = e.as_f64()?;
                    if !(hbar > 0.0) {
                        return Err(e.err("hbar must be positive"));
                    }
                    continue;
                }
                if names.contains(&e.key) || matches!(e.key.as_str(), "i" | "one" | "D") {
                    return Err(ConfigError::at(e.line, 1, e.key.clone(), "parameter name is reserved"));
                }
                let (text, col) = e.as_expr_text()?;
                let c = eval_scalar(&parse_expr(&text, e.line, col)?, &Scope::default(), e.line)?.as_constant();
parameters.insert(e.key.clone(), Poly::constant(c.ok_or_else(|| e.err("expected a number"))?));
            }
        }
        let scope = Scope { parameters: parameters.keys().cloned().collect() };

        let operator_of = |sec: &str, key: &str| -> Result<Option<OperatorPoly>, ConfigError> {
            let Some(s) = doc.section(sec) else { return Ok(None) };
            check_keys(s, &[key])?;
            let e = s.get(key).ok_or_else(|| ConfigError::at(s.line, 1, sec, format!("missing `{}`", key)))?;
            let expr = parse_expr(e.as_str()?, e.line, e.column)?;
            Ok(Some(eval_operator(&expr, &algebra, &scope, e.line)?))
        };
        let constraint = operator_of("constraint", "element")?;
        let hamiltonian = operator_of("hamiltonian", "operator")?;
        if constraint.is_none() && hamiltonian.is_none() {
            return Err(ConfigError::at(1, 1, "", "need a [constraint] or [hamiltonian] section"));
        }

        let clock = match doc.section("gauge") {
            None => None,
            Some(s) => {
                check_keys(s, &["clock"])?;
                let e = s.get("clock").ok_or_else(|| ConfigError::at(s.line, 1, "gauge", "missing `clock`"))?;
                let name = e.as_str()?;
                Some(algebra.index_of(name).ok_or_else(|| e.err("unknown generator"))?)
            }
        };
        if constraint.is_some() && clock.is_none() {
            return Err(ConfigError::at(1, 1, "", "a constrained model needs [gauge] clock"));
        }

        let mut half_order = 2;
        if let Some(s) = doc.section("truncation") {
            check_keys(s, &["half_order"])?;
            if let Some(e) = s.get("half_order") {
                half_order = e.as_usize()? as u32;
                if half_order < 2 {
                    return Err(e.err("half_order must be at least 2"));
                }
            }
        }

        let mut solve = SolveOptions { eliminate: None, branch: 1, mode: SolveMode::Perturbative };
        if let Some(s) = doc.section("solve") {
            check_keys(s, &["eliminate", "branch", "mode"])?;
            if let Some(e) = s.get("eliminate") {
                let mut vars = Vec::new();
                for (item, col) in e.as_list()? {
                    vars.push(
                        parse_variable(item, &names)
                            .ok_or_else(|| ConfigError::at(e.line, *col, item.clone(), "unknown variable"))?,
                    );
                }
                solve.eliminate = Some(vars);
            }
            if let Some(e) = s.get("branch") {
                solve.branch = parse_branch(e.as_str()?).ok_or_else(|| e.err("branch must be \"+\" or \"-\""))?;
            }
            if let Some(e) = s.get("mode") {
                solve.mode = parse_mode(e.as_str()?).ok_or_else(|| e.err("mode must be perturbative or newton"))?;
            }
        }

        let mut evolve = EvolveOptions {
            initial: Vec::new(),
            start: 0.0,
            stop: 10.0,
            steps: 1000,
            substeps: 1,
            halt_on_violation: false,
            reality_tol: 1e-9,
            semiclassical_budget: None,
        };
        if let Some(s) = doc.section("evolve") {
            check_keys(
                s,
                &["start", "stop", "steps", "substeps", "halt_on_violation", "reality_tol", "semiclassical_budget"],
            )?;
            for e in &s.entries {
                match e.key.as_str() {
                    "start" => evolve.start = e.as_f64()?,
                    "stop" => evolve.stop = e.as_f64()?,
                    "steps" => evolve.steps = e.as_usize()?,
                    "substeps" => evolve.substeps = e.as_usize()?,
                    "halt_on_violation" => evolve.halt_on_violation = e.as_bool()?,
                    "reality_tol" => evolve.reality_tol = e.as_f64()?,
                    _ => evolve.semiclassical_budget = Some(e.as_f64()?),
                }
            }
            if !(evolve.stop > evolve.start) || evolve.steps == 0 {
                return Err(ConfigError::at(s.line, 1, "evolve", "grid must be strictly increasing"));
            }
        }
        if let Some(s) = doc.section("evolve.initial") {
            for e in &s.entries {
                let v = parse_variable(&e.key, &names)
                    .ok_or_else(|| ConfigError::at(e.line, 1, e.key.clone(), "unknown variable"))?;
                let (text, col) = e.as_expr_text()?;
                let expr = parse_expr(&text, e.line, col)?;
                evolve.initial.push((v, eval_scalar(&expr, &scope, e.line)?));
            }
        }

        let mut check = CheckOptions {
            energy_tol: 1e-6,
            velocity_tol: 1e-4,
            drift_tol: 1e-10,
            property_cases: 100,
            seed: 7,
        };
        if let Some(s) = doc.section("check") {
            check_keys(s, &["energy_tol", "velocity_tol", "drift_tol", "property_cases", "seed"])?;
            for e in &s.entries {
                match e.key.as_str() {
                    "energy_tol" => check.energy_tol = e.as_f64()?,
                    "velocity_tol" => check.velocity_tol = e.as_f64()?,
                    "drift_tol" => check.drift_tol = e.as_f64()?,
                    "property_cases" => check.property_cases = e.as_usize()?,
                    _ => check.seed = e.as_usize()? as u64,
                }
            }
        }

        Ok(ModelConfig {
            algebra,
            parameters,
            hbar,
            constraint,
            hamiltonian,
            clock,
            half_order,
            solve,
            evolve,
            check,
        })
    }

    pub fn param_values(&self) -> BTreeMap<String, Complex64> {
        self.parameters
            .iter()
            .map(|(k, v)| (k.clone(), v.as_constant().map(|c| c.to_c64()).unwrap_or_default()))
            .collect()
    }
}

pub fn parse_branch(s: &str) -> Option<i8> {
    match s {
        "+" => Some(1),
        "-" => Some(-1),
        _ => None,
    }
}

pub fn parse_mode(s: &str) -> Option<SolveMode> {
    match s {
        "perturbative" => Some(SolveMode::Perturbative),
        "newton" => Some(SolveMode::Newton),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PARTICLE: &str = r#"
[algebra]
generators = [t, pt, q, p]
[brackets]
"t,pt" = "i*hbar*one"
"q,p" = "i*hbar*one"
[parameters]
m = 1.0
[constraint]
element = "pt^2 - p^2 - m^2"
[gauge]
clock = "t"
[solve]
eliminate = [pt, "D(t pt)", "D(pt^2)", "D(pt q)", "D(pt p)"]
branch = "-"
"#;

    #[test]
    fn particle_config() {
        let cfg = ModelConfig::parse(PARTICLE).unwrap();
        assert_eq!(cfg.algebra.n(), 4);
        assert_eq!(cfg.clock, Some(0));
        assert_eq!(cfg.solve.branch, -1);
        assert_eq!(cfg.solve.eliminate.as_ref().unwrap().len(), 5);
        assert_eq!(cfg.constraint.unwrap().dump(), "(1)*pt^2 + (-1)*p^2 + (-m^2)*1");
    }

    #[test]
    fn unknown_generator_reports_location() {
        let bad = PARTICLE.replace("pt^2 - p^2 - m^2", "pt^2 - x^2 - m^2");
        let err = ModelConfig::parse(&bad).unwrap_err();
        assert_eq!(
            err,
            ConfigError::Syntax {
                line: 10,
                column: 19,
                token: "x".into(),
                message: "unknown generator or parameter".into()
            }
        );
    }

    #[test]
    fn algebra_variants() {
        let one = parse_document("[algebra]\ngenerators = [a]\n").unwrap();
        let a = load_algebra(&one).unwrap();
        assert_eq!(a.n(), 1);
        let su2 = "[algebra]\ngenerators = [a, b, c]\n[brackets]\n\"a,b\" = \"i*hbar*c\"\n\"b,c\" = \"i*hbar*a\"\n\"a,c\" = \"-i*hbar*b\"\n";
        assert!(load_algebra(&parse_document(su2).unwrap()).is_ok());
        let broken = su2.replace("\"a,c\" = \"-i*hbar*b\"", "\"a,c\" = \"i*hbar*a\"");
        assert!(matches!(
            load_algebra(&parse_document(&broken).unwrap()),
            Err(ConfigError::Algebra(AlgebraError::AlgebraInconsistent(_)))
        ));
    }

    #[test]
    fn syntax_errors() {
        let err = parse_document("[algebra\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        let err = parse_document("x = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        let err = parse_expr("p^-1", 3, 1).unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 3, column: 3, .. }));
        let err = parse_expr("(p + q", 1, 1).unwrap_err();
        assert!(err.to_string().contains("expected `)`"));
    }

    #[test]
    fn variable_names() {
        let names: Vec<String> = ["t", "pt", "q", "p"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_variable("<q>", &names), Some(MomentVar::Expect(2)));
        assert_eq!(parse_variable("p", &names), Some(MomentVar::Expect(3)));
        assert_eq!(
            parse_variable("D(p q)", &names),
            Some(MomentVar::Moment(Exps::new(vec![0, 0, 1, 1])))
        );
        assert_eq!(parse_variable("D(q)", &names), None);
        let v = parse_variable("D(t pt)", &names).unwrap();
        assert_eq!(v.name(&names), "D(t pt)");
    }

    #[test]
    fn exact_numbers() {
        let e = parse_expr("0.25*hbar/2 + 1e-4", 1, 1).unwrap();
        let p = eval_scalar(&e, &Scope::default(), 1).unwrap();
        assert_eq!(p.dump(&[]), "1/10000 + 1/8*hbar");
    }
}
