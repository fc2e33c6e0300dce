//! The periodic potential v through its Fourier data, and the cubic
//! Gauss sums w, w₁.
//!
//! Convention: v(x) = Σ v̂(n) e^{−2πinx}, v̂(n) = ∫₀¹ e^{2πinx} v(x) dx.

use crate::error::{Error, Result};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    pub v0: f64,
    pub beta: f64,
    pub n0: u64,
    /// v̂(1), …, v̂(n0 − 1); missing entries are zero.
    #[serde(default)]
    pub low_modes: Vec<Complex64>,
}

impl PotentialSpec {
    pub fn new(v0: f64, beta: f64, n0: u64) -> Result<Self> {
        let s = Self { v0, beta, n0, low_modes: Vec::new() };
        s.validate()?;
        Ok(s)
    }

    /// v̂ ≡ 0 with a valid exponent.
    pub fn zero() -> Self {
        Self { v0: 0.0, beta: 0.3, n0: 2, low_modes: Vec::new() }
    }

    pub fn with_low_modes(mut self, modes: Vec<Complex64>) -> Result<Self> {
        self.low_modes = modes;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 0.5) {
            return Err(Error::Domain(format!("beta = {} outside (0, 1/2)", self.beta)));
        }
        if self.n0 < 2 {
            return Err(Error::Domain(format!("n0 = {} must be at least 2", self.n0)));
        }
        if !self.v0.is_finite() {
            return Err(Error::Domain("v0 must be finite".into()));
        }
        if self.low_modes.len() as u64 > self.n0 - 1 {
            return Err(Error::Domain(format!(
                "{} low modes given but only n < n0 = {} are free",
                self.low_modes.len(),
                self.n0
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.v0 == 0.0 && self.low_modes.iter().all(|c| c.norm() == 0.0)
    }

    /// v̂(n).
    pub fn coeff(&self, n: i64) -> Complex64 {
        if n == 0 {
            return Complex64::new(0.0, 0.0);
        }
        let a = n.unsigned_abs();
        let c = if a >= self.n0 {
            Complex64::new(self.v0 * (a as f64).ln().powf(-self.beta), 0.0)
        } else {
            self.low_modes
                .get((a - 1) as usize)
                .copied()
                .unwrap_or_default()
        };
        if n < 0 {
            c.conj()
        } else {
            c
        }
    }

    /// The smooth profile v0 (ln s)^{−β} evaluated at real s > 1.
    pub fn profile(&self, s: f64) -> f64 {
        self.v0 * s.ln().powf(-self.beta)
    }
}

pub fn fourier_coeff(spec: &PotentialSpec, n: i64) -> Complex64 {
    spec.coeff(n)
}

/// Iterated backward difference v̂^(k)(n), k ∈ {1, 2, 3}.
pub fn finite_differences(spec: &PotentialSpec, n: i64, k: u32) -> Result<Complex64> {
    if !(1..=3).contains(&k) {
        return Err(Error::Domain(format!("difference order {k} not in 1..=3")));
    }
    Ok(diff(spec, n, k))
}

fn diff(spec: &PotentialSpec, n: i64, k: u32) -> Complex64 {
    if k == 0 {
        spec.coeff(n)
    } else {
        diff(spec, n, k - 1) - diff(spec, n - 1, k - 1)
    }
}

/// sup over n ∈ [n_lo, n_hi] of |v̂^(k)(n)|·⟨n⟩^k.
pub fn difference_bound(spec: &PotentialSpec, k: u32, n_lo: i64, n_hi: i64) -> Result<f64> {
    let mut sup: f64 = 0.0;
    for n in n_lo..=n_hi {
        let bracket = (1.0 + (n as f64).powi(2)).sqrt();
        sup = sup.max(finite_differences(spec, n, k)?.norm() * bracket.powi(k as i32));
    }
    Ok(sup)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    Fejer,
    Lanczos,
    #[default]
    ValleePoussin,
}

impl Smoothing {
    /// Weight applied to mode n of an N-mode synthesis.
    pub fn weight(self, n: u64, modes: u64) -> f64 {
        let t = n as f64 / (modes as f64 + 1.0);
        match self {
            Smoothing::None => 1.0,
            Smoothing::Fejer => 1.0 - t,
            Smoothing::Lanczos => {
                if n == 0 {
                    1.0
                } else {
                    (PI * t).sin() / (PI * t)
                }
            }
            Smoothing::ValleePoussin => {
                let h = modes as f64 / 2.0;
                if (n as f64) <= h {
                    1.0
                } else {
                    2.0 * (1.0 - n as f64 / modes as f64)
                }
            }
        }
    }
}

/// Σ_{|n|≤modes} σ_n v̂(n) e^{−2πinx}, summed directly.
pub fn eval_potential(spec: &PotentialSpec, x: f64, modes: u64, smoothing: Smoothing) -> f64 {
    let mut s = 0.0;
    for n in 1..=modes {
        let w = smoothing.weight(n, modes);
        if w == 0.0 {
            continue;
        }
        let phase = -2.0 * PI * (n as f64) * x.rem_euclid(1.0);
        s += 2.0 * w * (spec.coeff(n as i64) * Complex64::from_polar(1.0, phase)).re;
    }
    s
}

/// Truncated, smoothed synthesis of v tabulated on a uniform grid per
/// period and read back by periodic cubic interpolation.
#[derive(Debug, Clone)]
pub struct SynthesizedPotential {
    modes: u64,
    smoothing: Smoothing,
    values: Vec<f64>,
}

impl SynthesizedPotential {
    pub fn new(spec: &PotentialSpec, modes: u64, smoothing: Smoothing) -> Self {
        let g = ((32 * modes.max(1)) as usize).next_power_of_two();
        let mut buf = vec![Complex64::new(0.0, 0.0); g];
        for n in 1..=modes as usize {
            buf[n] = spec.coeff(n as i64) * smoothing.weight(n as u64, modes);
        }
        FftPlanner::new().plan_fft_forward(g).process(&mut buf);
        let values = buf.iter().map(|c| 2.0 * c.re).collect();
        Self { modes, smoothing, values }
    }

    pub fn modes(&self) -> u64 {
        self.modes
    }

    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn grid_len(&self) -> usize {
        self.values.len()
    }

    pub fn value(&self, x: f64) -> f64 {
        let g = self.values.len();
        let u = x.rem_euclid(1.0) * g as f64;
        let i = u.floor();
        let t = u - i;
        let i = i as usize;
        let at = |k: isize| self.values[((i as isize + k).rem_euclid(g as isize)) as usize];
        let (y0, y1, y2, y3) = (at(-1), at(0), at(1), at(2));
        // four-point Lagrange on nodes −1, 0, 1, 2
        let c0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let c1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let c2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let c3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        c0 * y0 + c1 * y1 + c2 * y2 + c3 * y3
    }

    /// ∫₀¹ |v_N| on the tabulation grid.
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() / self.values.len() as f64
    }

    /// Mean over one period on the tabulation grid.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GaussSumParams {
    pub p: u64,
    pub q: u64,
}

impl GaussSumParams {
    /// Reduces p/q to lowest terms.
    pub fn new(p: u64, q: u64) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(Error::Domain(format!("p = {p}, q = {q} must be positive")));
        }
        let g = gcd(p, q);
        Ok(Self { p: p / g, q: q / g })
    }
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// e^{−2πi(p/q)r³} with r³ reduced mod q before the division.
fn cubic_phase(params: &GaussSumParams, r: u64) -> f64 {
    let q = params.q as u128;
    let r3 = (r as u128 * r as u128 % q) * r as u128 % q;
    let num = (params.p as u128 % q) * r3 % q;
    -2.0 * PI * num as f64 / params.q as f64
}

/// w(s) = e^{iπ/4} Σ_{r<q} e^{−2πi(p/q)r³ + 2i(s/q)r}.
pub fn gauss_sum_w(params: &GaussSumParams, s: f64) -> Complex64 {
    let qf = params.q as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    for r in 0..params.q {
        let ph = cubic_phase(params, r) + 2.0 * (s / qf) * r as f64;
        acc += Complex64::from_polar(1.0, ph);
    }
    Complex64::from_polar(1.0, PI / 4.0) * acc
}

/// w₁(s) = Σ_{r=1}^{q−1} e^{−2πi(p/q)r³+2i(s/q)r} Σ_{r₁<r} e^{2πi(p/q)r₁³−2i(s/q)r₁}.
pub fn gauss_sum_w1(params: &GaussSumParams, s: f64) -> Complex64 {
    if params.q == 1 {
        return Complex64::new(0.0, 0.0);
    }
    let qf = params.q as f64;
    let mut acc = Complex64::new(0.0, 0.0);
    let mut inner = Complex64::new(0.0, 0.0);
    for r in 0..params.q {
        let ph = cubic_phase(params, r) + 2.0 * (s / qf) * r as f64;
        if r > 0 {
            acc += Complex64::from_polar(1.0, ph) * inner;
        }
        inner += Complex64::from_polar(1.0, -ph);
    }
    acc
}
