//! Exact quantum references for Gaussian packets of a free relativistic
//! particle. States use the two-generator labelling `q = 0`, `p = 1`; see
//! [`embed`] to move them into a larger algebra.

use num_complex::Complex64;
use thiserror::Error;

use crate::moments::{exponents_of_degree, MomentVar, StatePoint};
use crate::poly::Exps;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("quadrature failed to converge on [{a}, {b}]")]
    QuadratureFail { a: f64, b: f64 },
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSpec {
    pub q0: f64,
    pub p0: f64,
    /// Position-space standard deviation.
    pub sigma: f64,
    pub hbar: f64,
}

impl GaussianSpec {
    pub fn momentum_variance(&self) -> f64 {
        self.hbar * self.hbar / (4.0 * self.sigma * self.sigma)
    }

    /// Packet with the given momentum variance.
    pub fn from_momentum_variance(q0: f64, p0: f64, dpp: f64, hbar: f64) -> Self {
        GaussianSpec { q0, p0, sigma: hbar / (2.0 * dpp.sqrt()), hbar }
    }
}

/// `E[x^k]` for a centered normal with variance `var`.
fn normal_moment(k: u32, var: f64) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut double_fact = 1.0;
    let mut j = k as i64 - 1;
    while j > 1 {
        double_fact *= j as f64;
        j -= 2;
    }
    double_fact * var.powi(k as i32 / 2)
}

/// Weyl moments up to `max_degree`. The Wigner function factorizes, so each
/// moment is a product of one-dimensional normal moments.
pub fn gaussian_moments(g: &GaussianSpec, max_degree: u32) -> StatePoint {
    let mut s = StatePoint::new(g.hbar);
    s.set(MomentVar::Expect(0), g.q0).set(MomentVar::Expect(1), g.p0);
    let vq = g.sigma * g.sigma;
    let vp = g.momentum_variance();
    for deg in 2..=max_degree {
        for e in exponents_of_degree(2, deg) {
            let v = normal_moment(e.0[0], vq) * normal_moment(e.0[1], vp);
            s.set(MomentVar::Moment(e), v);
        }
    }
    s
}

/// Relabels a `(q, p)` state into an algebra with `n` generators where `q`
/// and `p` sit at `map[0]` and `map[1]`.
pub fn embed(s: &StatePoint, n: usize, map: [usize; 2]) -> StatePoint {
    let mut out = StatePoint::new(s.hbar);
    out.params = s.params.clone();
    for (v, x) in &s.values {
        let w = match v {
            MomentVar::Expect(i) => MomentVar::Expect(map[*i]),
            MomentVar::Moment(e) => {
                let mut k = vec![0u32; n];
                k[map[0]] = e.0[0];
                k[map[1]] = e.0[1];
                MomentVar::Moment(Exps::new(k))
            }
        };
        out.set(w, *x);
    }
    out
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss-Kronrod (7/15) integration to relative tolerance `rel`.
pub fn integrate_gk<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel: f64) -> Result<f64, OracleError> {
    let (whole, _) = kronrod15(&f, a, b);
    let scale = whole.abs().max(f64::MIN_POSITIVE);
    let mut stack = vec![(a, b, 0u32)];
    let mut total = 0.0;
    while let Some((lo, hi, depth)) = stack.pop() {
        let (v, err) = kronrod15(&f, lo, hi);
        let width = (hi - lo) / (b - a);
        if err <= rel * scale * width || err < 1e-300 {
            total += v;
        } else if depth >= 40 {
            return Err(OracleError::QuadratureFail { a: lo, b: hi });
        } else {
            let mid = 0.5 * (lo + hi);
            stack.push((lo, mid, depth + 1));
            stack.push((mid, hi, depth + 1));
        }
    }
    Ok(total)
}

pub const QUAD_REL_TOL: f64 = 1e-12;
const WINDOW: f64 = 12.0;

/// `E_rho[f(k)]` for the packet's momentum density.
fn momentum_average<F: Fn(f64) -> f64>(g: &GaussianSpec, f: F, rel: f64) -> Result<f64, OracleError> {
    let var = g.momentum_variance();
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Ok(f(g.p0));
    }
    // standardized variable keeps node spacing exact for narrow packets
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    integrate_gk(|z| norm * (-0.5 * z * z).exp() * f(g.p0 + sd * z), -WINDOW, WINDOW, rel)
}

/// `<sqrt(p^2 + m^2)>` in the packet.
pub fn energy_quadrature(g: &GaussianSpec, m: f64) -> Result<f64, OracleError> {
    energy_quadrature_tol(g, m, QUAD_REL_TOL)
}

pub fn energy_quadrature_tol(g: &GaussianSpec, m: f64, rel: f64) -> Result<f64, OracleError> {
    if !(m > 0.0) {
        return Err(OracleError::BadParameter(format!("mass {} must be positive", m)));
    }
    momentum_average(g, |k| (k * k + m * m).sqrt(), rel)
}

/// Moments of the positive-frequency packet under free Klein-Gordon
/// evolution. Each amplitude picks up the phase `exp(-i w(k) t / hbar)`,
/// so the position operator `i hbar d/dk` acts as `q0 + t k / w(k)` on the
/// phase plus the static width.
pub fn wavepacket_moments(g: &GaussianSpec, m: f64, times: &[f64]) -> Result<Vec<StatePoint>, OracleError> {
    if !(m > 0.0) {
        return Err(OracleError::BadParameter(format!("mass {} must be positive", m)));
    }
    let vel = |k: f64| k / (k * k + m * m).sqrt();
    let mean_v = momentum_average(g, vel, QUAD_REL_TOL)?;
    let var_v = momentum_average(g, |k| (vel(k) - mean_v).powi(2), QUAD_REL_TOL)?;
    let cov_kv = momentum_average(g, |k| (k - g.p0) * (vel(k) - mean_v), QUAD_REL_TOL)?;
    let vp = g.momentum_variance();
    let q = MomentVar::Expect(0);
    let p = MomentVar::Expect(1);
    let mom = |a, b| MomentVar::Moment(Exps::new(vec![a, b]));
    Ok(times
        .iter()
        .map(|&t| {
            let mut s = StatePoint::new(g.hbar);
            s.set(q.clone(), g.q0 + t * mean_v)
                .set(p.clone(), g.p0)
                .set(mom(2, 0), g.sigma * g.sigma + t * t * var_v)
                .set(mom(1, 1), t * cov_kv)
                .set(mom(0, 2), vp);
            s.set_param("m", m);
            s
        })
        .collect())
}

/// Group velocity `<k / w(k)>` of the packet.
pub fn group_velocity(g: &GaussianSpec, m: f64) -> Result<f64, OracleError> {
    momentum_average(g, |k| k / (k * k + m * m).sqrt(), QUAD_REL_TOL)
}

pub fn re(s: &StatePoint, v: &MomentVar) -> f64 {
    s.get(v).unwrap_or(Complex64::new(f64::NAN, 0.0)).re
}
