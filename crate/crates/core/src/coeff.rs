//! Exact complex rational coefficients.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

/// A complex number `re + i*im` with arbitrary precision rational parts.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct Coeff {
    pub re: BigRational,
    pub im: BigRational,
}

impl Coeff {
    pub fn new(re: BigRational, im: BigRational) -> Self {
        Coeff { re, im }
    }

    pub fn zero() -> Self {
        Coeff::new(BigRational::zero(), BigRational::zero())
    }

    pub fn one() -> Self {
        Coeff::from_int(1)
    }

    pub fn i() -> Self {
        Coeff::new(BigRational::zero(), BigRational::one())
    }

    pub fn from_int(n: i64) -> Self {
        Coeff::new(BigRational::from_integer(BigInt::from(n)), BigRational::zero())
    }

    pub fn from_ratio(num: i64, den: i64) -> Self {
        Coeff::new(
            BigRational::new(BigInt::from(num), BigInt::from(den)),
            BigRational::zero(),
        )
    }

    pub fn real(re: BigRational) -> Self {
        Coeff::new(re, BigRational::zero())
    }

    pub fn is_zero(&self) -> bool {
        self.re.is_zero() && self.im.is_zero()
    }

    pub fn is_one(&self) -> bool {
        self.re.is_one() && self.im.is_zero()
    }

    pub fn is_real(&self) -> bool {
        self.im.is_zero()
    }

    pub fn conj(&self) -> Self {
        Coeff::new(self.re.clone(), -self.im.clone())
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inv(&self) -> Option<Self> {
        if self.is_zero() {
            return None;
        }
        let norm = &self.re * &self.re + &self.im * &self.im;
        Some(Coeff::new(&self.re / &norm, -(&self.im / &norm)))
    }

    pub fn to_c64(&self) -> Complex64 {
        Complex64::new(
            self.re.to_f64().unwrap_or(f64::NAN),
            self.im.to_f64().unwrap_or(f64::NAN),
        )
    }

    /// Parses a decimal literal such as `12`, `0.25` or `1e-4` exactly.
    pub fn parse_decimal(text: &str) -> Option<Self> {
        let lower = text.to_ascii_lowercase();
        let (mantissa, exponent) = match lower.split_once('e') {
            Some((m, e)) => (m.to_string(), e.parse::<i32>().ok()?),
            None => (lower.clone(), 0),
        };
        let (int_part, frac_part) = match mantissa.split_once('.') {
            Some((a, b)) => (a.to_string(), b.to_string()),
            None => (mantissa.clone(), String::new()),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.chars().chain(frac_part.chars()).all(|c| c.is_ascii_digit()) {
            return None;
        }
        let digits: BigInt = format!("{}{}", int_part, frac_part).parse().ok()?;
        let shift = exponent - frac_part.len() as i32;
        let ten = BigInt::from(10);
        let value = if shift >= 0 {
            BigRational::from_integer(digits * num_traits::pow(ten, shift as usize))
        } else {
            BigRational::new(digits, num_traits::pow(ten, (-shift) as usize))
        };
        Some(Coeff::real(value))
    }
}

impl Ord for Coeff {
    fn cmp(&self, other: &Self) -> Ordering {
        self.re.cmp(&other.re).then_with(|| self.im.cmp(&other.im))
    }
}

impl PartialOrd for Coeff {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Add for &Coeff {
    type Output = Coeff;
    fn add(self, rhs: &Coeff) -> Coeff {
        Coeff::new(&self.re + &rhs.re, &self.im + &rhs.im)
    }
}

impl Sub for &Coeff {
    type Output = Coeff;
    fn sub(self, rhs: &Coeff) -> Coeff {
        Coeff::new(&self.re - &rhs.re, &self.im - &rhs.im)
    }
}

impl Mul for &Coeff {
    type Output = Coeff;
    fn mul(self, rhs: &Coeff) -> Coeff {
        Coeff::new(
            &self.re * &rhs.re - &self.im * &rhs.im,
            &self.re * &rhs.im + &self.im * &rhs.re,
        )
    }
}

impl Neg for &Coeff {
    type Output = Coeff;
    fn neg(self) -> Coeff {
        Coeff::new(-self.re.clone(), -self.im.clone())
    }
}

fn fmt_rational(r: &BigRational) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Formats as `a`, `a*i`, `i`, or `(a + b*i)`; the sign of a purely real or
/// purely imaginary value is kept in front.
impl fmt::Display for Coeff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.im.is_zero() {
            return write!(f, "{}", fmt_rational(&self.re));
        }
        if self.re.is_zero() {
            if self.im.is_one() {
                return write!(f, "i");
            }
            if (-self.im.clone()).is_one() {
                return write!(f, "-i");
            }
            return write!(f, "{}*i", fmt_rational(&self.im));
        }
        let sign = if self.im.is_negative() { "-" } else { "+" };
        write!(
            f,
            "({} {} {}*i)",
            fmt_rational(&self.re),
            sign,
            fmt_rational(&self.im.abs())
        )
    }
}
