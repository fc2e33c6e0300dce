//! Exact reduction of ρΛ^m modulo a multiple of π.
//!
//! For m in the thousands ρΛ^m is astronomically large, so the phase is
//! obtained from a fixed-point big-integer power sequence Q_m = Λ^m / P
//! carrying enough fractional bits to keep frac(ρ Q_m) exact to double
//! precision. Λ is e^x for the double x, and ρ is the double given.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

const GUARD_BITS: u64 = 64;

/// Fixed-point e^x · 2^bits for a non-negative double x.
fn exp_fixed(x: f64, bits: u64) -> BigUint {
    let w = bits + GUARD_BITS;
    let one = BigUint::one() << w;
    if x == 0.0 {
        return one >> GUARD_BITS;
    }
    let (mant, exp) = decompose(x);
    let mut sum = one.clone();
    let mut term = one;
    let mut k: u64 = 1;
    loop {
        term = mul_pow2(term * mant, exp) / k;
        if term.is_zero() {
            break;
        }
        sum += &term;
        k += 1;
    }
    sum >> GUARD_BITS
}

/// Multiplies by 2^e (e may be negative, truncating).
fn mul_pow2(v: BigUint, e: i64) -> BigUint {
    if e >= 0 {
        v << (e as u64)
    } else {
        v >> ((-e) as u64)
    }
}

/// |x| = mant · 2^exp with an integer mantissa.
fn decompose(x: f64) -> (u64, i64) {
    let bits = x.abs().to_bits();
    let raw_exp = ((bits >> 52) & 0x7ff) as i64;
    let frac = bits & ((1u64 << 52) - 1);
    if raw_exp == 0 {
        (frac, -1074)
    } else {
        (frac | (1u64 << 52), raw_exp - 1075)
    }
}

/// Fixed-point atan(1/n) · 2^w.
fn atan_inv(n: u64, w: u64) -> BigUint {
    let n2 = n * n;
    let mut term = (BigUint::one() << w) / n;
    let mut pos = term.clone();
    let mut neg = BigUint::zero();
    let mut k: u64 = 1;
    loop {
        term /= n2;
        if term.is_zero() {
            break;
        }
        let t = &term / (2 * k + 1);
        if k % 2 == 1 {
            neg += t;
        } else {
            pos += t;
        }
        k += 1;
    }
    pos - neg
}

/// Fixed-point π · 2^bits by Machin's formula.
pub fn pi_fixed(bits: u64) -> BigUint {
    let w = bits + GUARD_BITS;
    let v = (atan_inv(5, w) << 4u32) - (atan_inv(239, w) << 2u32);
    v >> GUARD_BITS
}

/// Sequence Q_m = Λ^m / (period_multiple·π) in fixed point.
pub struct GeometricSequence {
    bits: u64,
    lambda: BigUint,
    q: BigUint,
    m: u64,
    period: f64,
}

impl GeometricSequence {
    /// Prepares the sequence for m ∈ [0, m_max], Λ = e^{ln_lambda}, and
    /// phases reduced modulo `period_multiple`·π.
    pub fn new(ln_lambda: f64, m_max: u64, period_multiple: u32) -> Self {
        assert!(ln_lambda >= 0.0 && ln_lambda.is_finite());
        assert!(period_multiple >= 1);
        let growth = (m_max as f64 * ln_lambda / std::f64::consts::LN_2).ceil() as u64;
        let bits = growth + 128 + 64 - (m_max.max(1)).leading_zeros() as u64;
        let lambda = exp_fixed(ln_lambda, bits);
        let p = pi_fixed(bits) * period_multiple;
        let q = (BigUint::one() << (2 * bits)) / p;
        Self {
            bits,
            lambda,
            q,
            m: 0,
            period: period_multiple as f64 * std::f64::consts::PI,
        }
    }

    pub fn index(&self) -> u64 {
        self.m
    }

    /// Advances to m + 1.
    pub fn advance(&mut self) {
        self.q = (&self.q * &self.lambda) >> self.bits;
        self.m += 1;
    }

    /// Advances until the current index equals m.
    pub fn seek(&mut self, m: u64) {
        assert!(m >= self.m, "sequence only moves forward");
        while self.m < m {
            self.advance();
        }
    }

    /// ρΛ^m reduced into [0, period).
    pub fn phase(&self, rho: f64) -> f64 {
        self.fraction(rho) * self.period
    }

    /// frac(ρ Λ^m / period) ∈ [0, 1).
    pub fn fraction(&self, rho: f64) -> f64 {
        if rho == 0.0 {
            return 0.0;
        }
        let (mant, e) = decompose(rho);
        // value = mant · Q · 2^{e − bits}; fractional bits T = bits − e
        let t = self.bits as i64 - e;
        if t <= 0 {
            return 0.0;
        }
        let t = t as u64;
        let s = t.saturating_sub(192);
        let digits: Vec<u64> = self
            .q
            .iter_u64_digits()
            .skip((s / 64) as usize)
            .take(5)
            .collect();
        let window = BigUint::from_slice(&to_u32(&digits)) >> (s % 64);
        let width = t - s;
        let mask = (BigUint::one() << width) - 1u32;
        let prod = (window * mant) & mask;
        let f = if width > 64 {
            (prod >> (width - 64)).to_u64().unwrap() as f64 / 2f64.powi(64)
        } else {
            prod.to_f64().unwrap() / 2f64.powi(width as i32)
        };
        let f = if rho < 0.0 && f > 0.0 { 1.0 - f } else { f };
        if f >= 1.0 {
            0.0
        } else {
            f
        }
    }
}

fn to_u32(d: &[u64]) -> Vec<u32> {
    d.iter()
        .flat_map(|&x| [x as u32, (x >> 32) as u32])
        .collect()
}

/// ρ_j Λ^m mod π for every ρ_j and every m ∈ [m0, m1), indexed [j][m − m0].
pub fn geometric_phases_mod_pi(ln_lambda: f64, rhos: &[f64], m0: u64, m1: u64) -> Vec<Vec<f64>> {
    let mut seq = GeometricSequence::new(ln_lambda, m1, 1);
    seq.seek(m0);
    let mut out = vec![Vec::with_capacity((m1 - m0) as usize); rhos.len()];
    for _ in m0..m1 {
        for (j, &rho) in rhos.iter().enumerate() {
            out[j].push(seq.phase(rho));
        }
        seq.advance();
    }
    out
}
