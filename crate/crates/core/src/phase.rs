//! Operator constants, the Liouville phase ξ, the resonance grids and the
//! per-index coefficients of the discrete system.
//!
//! The operator is −ψ″ − (Fx + κ ln⟨x⟩ + E)ψ + vψ with π²/F = 3p/q.

use crate::error::{Error, Result};
use crate::potential::{gauss_sum_w, gauss_sum_w1, GaussSumParams, PotentialSpec};
use crate::quad;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::RwLock;

pub const DEFAULT_ETA: f64 = 0.42;

/// Constants that exist only when κ > 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Adiabatic {
    pub lambda: f64,
    pub ln_lambda: f64,
    /// A = e^{−(E′+κ′)/κ′}/q.
    pub a: f64,
    pub mu: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatorParams {
    pub gauss: GaussSumParams,
    pub kappa: f64,
    pub energy: f64,
    pub field: f64,
    pub kappa_prime: f64,
    pub energy_prime: f64,
    pub s0: f64,
    pub adiabatic: Option<Adiabatic>,
}

impl OperatorParams {
    pub fn new(p: u64, q: u64, kappa: f64, energy: f64) -> Result<Self> {
        let gauss = GaussSumParams::new(p, q)?;
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::Domain(format!("kappa = {kappa} must be finite and non-negative")));
        }
        if !energy.is_finite() {
            return Err(Error::Domain("E must be finite".into()));
        }
        let (pf, qf) = (gauss.p as f64, gauss.q as f64);
        let field = PI * PI * qf / (3.0 * pf);
        let kappa_prime = 2.0 * kappa / field;
        let energy_prime = (energy - 2.0 * kappa + kappa * (3.0 * pf / qf).ln()) / field;
        let s0 = PI * qf * (energy_prime + kappa_prime);
        let adiabatic = (kappa > 0.0).then(|| {
            let e = (-(energy_prime + kappa_prime) / kappa_prime).exp();
            Adiabatic {
                lambda: (1.0 / (qf * kappa_prime)).exp(),
                ln_lambda: 1.0 / (qf * kappa_prime),
                a: e / qf,
                mu: PI * qf * kappa_prime,
                rho: -PI * kappa_prime * e,
            }
        });
        let out = Self { gauss, kappa, energy, field, kappa_prime, energy_prime, s0, adiabatic };
        if let Some(ad) = adiabatic {
            let lhs = ad.rho / (-PI * kappa_prime);
            if (lhs - qf * ad.a).abs() > 1e-12 * lhs.abs() {
                return Err(Error::Precision(format!("rho/(−πκ′) = {lhs} but qA = {}", qf * ad.a)));
            }
        }
        Ok(out)
    }

    /// Parameters with E chosen so that the adiabatic constant equals `rho`.
    pub fn from_rho(p: u64, q: u64, kappa: f64, rho: f64) -> Result<Self> {
        if !(kappa > 0.0) {
            return Err(Error::Domain("rho parametrization needs kappa > 0".into()));
        }
        if !(rho < 0.0) {
            return Err(Error::Domain(format!("rho = {rho} must be negative")));
        }
        let gauss = GaussSumParams::new(p, q)?;
        let (pf, qf) = (gauss.p as f64, gauss.q as f64);
        let field = PI * PI * qf / (3.0 * pf);
        let kp = 2.0 * kappa / field;
        let ep = -kp * (1.0 + (-rho / (PI * kp)).ln());
        let energy = ep * field + 2.0 * kappa - kappa * (3.0 * pf / qf).ln();
        Self::new(p, q, kappa, energy)
    }

    pub fn p(&self) -> u64 {
        self.gauss.p
    }

    pub fn q(&self) -> u64 {
        self.gauss.q
    }

    pub fn adiabatic(&self) -> Result<Adiabatic> {
        self.adiabatic
            .ok_or_else(|| Error::Precondition("adiabatic constants need kappa > 0".into()))
    }

    /// q(x) = κ ln⟨x⟩.
    pub fn log_term(&self, x: f64) -> f64 {
        0.5 * self.kappa * (x * x).ln_1p()
    }

    pub fn log_term_d1(&self, x: f64) -> f64 {
        self.kappa * x / (1.0 + x * x)
    }

    pub fn log_term_d2(&self, x: f64) -> f64 {
        let w = 1.0 + x * x;
        self.kappa * (1.0 - x * x) / (w * w)
    }

    /// Fx + q(x) + E.
    pub fn radicand(&self, x: f64) -> f64 {
        self.field * x + self.log_term(x) + self.energy
    }
}

/// Amplitude constants of the model system, derived from the operator
/// and the potential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelConstants {
    pub b0: f64,
    pub r0: Complex64,
    pub r_star: f64,
    pub mu_star: f64,
}

pub fn model_constants(params: &OperatorParams, spec: &PotentialSpec) -> Result<ModelConstants> {
    let ad = params.adiabatic()?;
    let qf = params.q() as f64;
    let beta = spec.beta;
    let b0 = spec.v0 * ad.mu.powf(beta - 0.5) / (2.0 * params.field * qf).sqrt();
    let r0 = Complex64::from_polar(PI.sqrt() * b0, -PI / 4.0);
    let r_star = r0.norm_sqr() * qf / (2.0 * (1.0 - 2.0 * beta));
    let mu_star = r_star / (2.0 * ad.ln_lambda).powf(1.0 - 2.0 * beta);
    Ok(ModelConstants { b0, r0, r_star, mu_star })
}

/// p(x, E) = (Fx + q(x) + E)^{1/2}.
pub fn momentum(params: &OperatorParams, x: f64) -> Result<f64> {
    let r = params.radicand(x);
    if !(r > 0.0) {
        return Err(Error::Domain(format!("x = {x} is left of the turning point")));
    }
    Ok(r.sqrt())
}

/// Closed-form part (2/(3F))P^{3/2} − (2κ/F)P^{1/2} of ξ.
pub fn phase_xi_leading(params: &OperatorParams, x: f64) -> Result<f64> {
    let pm = momentum(params, x)?;
    let f = params.field;
    Ok(pm * (2.0 / (3.0 * f) * pm * pm - 2.0 * params.kappa / f))
}

/// p − d/dx(leading part) = P^{−1/2}(κ/⟨x⟩² + q′(κ − q − E)/F).
fn remainder_density(params: &OperatorParams, y: f64) -> f64 {
    let r = params.radicand(y);
    let inner = params.kappa / (1.0 + y * y)
        + params.log_term_d1(y) * (params.kappa - params.log_term(y) - params.energy) / params.field;
    inner / r.sqrt()
}

/// −∫_x^∞ (p − leading′), evaluated as ∫₀¹ through y = x/u².
pub fn phase_xi_remainder(params: &OperatorParams, x: f64) -> Result<f64> {
    momentum(params, x)?;
    if params.kappa == 0.0 {
        return Ok(0.0);
    }
    if x <= 0.0 {
        return Err(Error::Domain(format!("remainder of xi needs x > 0, got {x}")));
    }
    let res = quad::integrate_panels(
        &mut |u: f64| {
            if u <= 0.0 {
                0.0
            } else {
                remainder_density(params, x / (u * u)) * 2.0 * x / (u * u * u)
            }
        },
        &[0.0, 1e-8, 1e-4, 1e-2, 0.1, 0.5, 1.0],
        1e-15,
        1e-13,
        4000,
    )?;
    Ok(-res.value)
}

/// ξ(x), anchored so that ξ − leading part → 0 as x → ∞.
pub fn phase_xi(params: &OperatorParams, x: f64) -> Result<f64> {
    Ok(phase_xi_leading(params, x)? + phase_xi_remainder(params, x)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GridKind {
    /// x_l = [x̃_l] − 1/2 with P(x̃_l) = π²(l − 1/2)².
    XLower,
    /// P(X_l) = π²l².
    XUpper,
    /// Fx* + q(x*) = π²(l − 1/2)².
    XStar,
    /// k_m = [k̃_m] with s(k̃_m) = π(m − 1/2).
    KLower,
}

/// Root of the increasing map x ↦ Fx + q(x) + offset = target on x > 0.
fn solve_radicand(params: &OperatorParams, offset: f64, target: f64) -> Result<f64> {
    let f = params.field;
    let g = |x: f64| f * x + params.log_term(x) + offset - target;
    if g(0.0) >= 0.0 {
        return Err(Error::NoRoot(format!("target {target} is not right of the turning point")));
    }
    let mut hi = (target - offset) / f;
    let mut lo = (target - offset - params.log_term(hi)) / f;
    lo = lo.max(0.0);
    if g(hi) < 0.0 {
        hi *= 4.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let gx = g(x);
        if gx == 0.0 {
            return Ok(x);
        }
        if gx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - gx / (f + params.log_term_d1(x));
        x = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi || (gx / (f + params.log_term_d1(x))).abs() <= 1e-15 * x.abs() {
            let gx = g(x);
            if gx.abs() <= 1e-10 * target.abs().max(1.0) {
                return Ok(x);
            }
        }
    }
    Err(Error::NoRoot(format!("bracketing did not converge for target {target}")))
}

/// k̃_m, the unique k with s(k) = π(m − 1/2).
pub fn k_tilde(params: &OperatorParams, m: i64) -> Result<f64> {
    let qf = params.q() as f64;
    let kp = params.kappa_prime;
    if kp == 0.0 {
        return Err(Error::NoRoot("s(k) is constant when kappa = 0".into()));
    }
    let ln_kq = (m as f64 - 0.5) / (qf * kp) - (params.energy_prime + kp) / kp;
    Ok(ln_kq.exp() / qf)
}

pub fn solve_grid(params: &OperatorParams, kind: GridKind, index: i64) -> Result<f64> {
    let l = index as f64;
    match kind {
        GridKind::XUpper => solve_radicand(params, params.energy, PI * PI * l * l),
        GridKind::XLower => {
            let t = solve_radicand(params, params.energy, PI * PI * (l - 0.5) * (l - 0.5))?;
            Ok(t.floor() - 0.5)
        }
        GridKind::XStar => solve_radicand(params, 0.0, PI * PI * (l - 0.5) * (l - 0.5)),
        GridKind::KLower => {
            let k = k_tilde(params, index)?;
            if !(k.is_finite() && k < 9.0e15) {
                return Err(Error::NoRoot(format!("k_m for m = {index} exceeds the integer range")));
            }
            Ok(k.floor())
        }
    }
}

/// Memoized grid values, safe for concurrent readers.
#[derive(Debug)]
pub struct GridCache {
    params: OperatorParams,
    values: RwLock<HashMap<(GridKind, i64), f64>>,
}

impl GridCache {
    pub fn new(params: OperatorParams) -> Self {
        Self { params, values: RwLock::new(HashMap::new()) }
    }

    pub fn params(&self) -> &OperatorParams {
        &self.params
    }

    pub fn get(&self, kind: GridKind, index: i64) -> Result<f64> {
        if let Some(v) = self.values.read().expect("grid cache poisoned").get(&(kind, index)) {
            return Ok(*v);
        }
        let v = solve_grid(&self.params, kind, index)?;
        self.values.write().expect("grid cache poisoned").insert((kind, index), v);
        Ok(v)
    }
}

/// s(k) = πq(E′ + κ′ + κ′ ln kq).
pub fn s_of_k(params: &OperatorParams, k: f64) -> f64 {
    let qf = params.q() as f64;
    let log = if params.kappa_prime == 0.0 { 0.0 } else { params.kappa_prime * (k * qf).ln() };
    PI * qf * (params.energy_prime + params.kappa_prime + log)
}

/// Ω(k) = πkq(E′ + κ′ ln kq).
pub fn omega(params: &OperatorParams, k: f64) -> f64 {
    let qf = params.q() as f64;
    let log = if params.kappa_prime == 0.0 { 0.0 } else { params.kappa_prime * (k * qf).ln() };
    PI * k * qf * (params.energy_prime + log)
}

/// (b(k), b₁(k)).
pub fn step_amplitudes(params: &OperatorParams, spec: &PotentialSpec, k: u64) -> (Complex64, f64) {
    let qf = params.q() as f64;
    let kf = k as f64;
    let vh = spec.coeff((params.q() * k) as i64);
    let s = s_of_k(params, kf);
    let b = vh * gauss_sum_w(&params.gauss, s) / (2.0 * params.field * qf * kf).sqrt();
    let b1 = vh.norm_sqr() * gauss_sum_w1(&params.gauss, s).im / (2.0 * params.field * qf * kf);
    (b, b1)
}

/// The turning-point grid K_m = AΛ^m and its η-neighbourhood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TurningGrid {
    pub eta: f64,
    pub a: f64,
    pub ln_lambda: f64,
}

impl TurningGrid {
    pub fn new(params: &OperatorParams, eta: f64) -> Result<Self> {
        if !(eta > 0.375 && eta < 0.5) {
            return Err(Error::Domain(format!("eta = {eta} outside (3/8, 1/2)")));
        }
        let ad = params.adiabatic()?;
        Ok(Self { eta, a: ad.a, ln_lambda: ad.ln_lambda })
    }

    pub fn ln_k(&self, m: i64) -> f64 {
        self.a.ln() + m as f64 * self.ln_lambda
    }

    pub fn k(&self, m: i64) -> f64 {
        self.ln_k(m).exp()
    }

    /// [K_m], the integer split point between the two half-periods.
    pub fn k_hat(&self, m: i64) -> f64 {
        self.k(m).floor()
    }

    pub fn k_minus(&self, m: i64) -> f64 {
        let k = self.k(m);
        (k - k.powf(1.0 - self.eta)).floor()
    }

    pub fn k_plus(&self, m: i64) -> f64 {
        let k = self.k(m);
        (k + k.powf(1.0 - self.eta)).floor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TurningData {
    pub d: Complex64,
    pub lambda: Complex64,
    /// ρΛ^m; infinite once Λ^m overflows.
    pub phi0: f64,
    /// Ω(K_m) − πmK_m, when K_m is representable.
    pub phi0_from_omega: Option<f64>,
}

/// d_m = b₀w(πm)(πm − s₀)^{−β}, λ_m = −i|d_m|²/2 and Φ₀(m).
pub fn turning_data(params: &OperatorParams, spec: &PotentialSpec, m: i64) -> Result<TurningData> {
    let ad = params.adiabatic()?;
    let pm = PI * m as f64;
    if pm <= params.s0 {
        return Err(Error::Degenerate(format!("πm = {pm} does not exceed s0 = {}", params.s0)));
    }
    let c = model_constants(params, spec)?;
    let d = c.b0 * gauss_sum_w(&params.gauss, pm) * (pm - params.s0).powf(-spec.beta);
    let lambda = Complex64::new(0.0, -0.5 * d.norm_sqr());
    let ln_k = ad.a.ln() + m as f64 * ad.ln_lambda;
    let phi0 = ad.rho * (m as f64 * ad.ln_lambda).exp();
    let phi0_from_omega = if ln_k < 30.0 {
        let k = ln_k.exp();
        let alt = omega(params, k) - pm * k;
        // the subtraction loses about log10(m/μ) digits
        let tol = 1e-9 * phi0.abs() + 8.0 * f64::EPSILON * pm * k;
        if (alt - phi0).abs() > tol {
            return Err(Error::Precision(format!(
                "Φ₀ mismatch at m = {m}: ρΛ^m = {phi0}, Ω(K) − πmK = {alt}"
            )));
        }
        Some(alt)
    } else {
        None
    };
    Ok(TurningData { d, lambda, phi0, phi0_from_omega })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// p = q = 1, κ′ = 1, E′ = 0.
    fn unit_params() -> OperatorParams {
        let f = PI * PI / 3.0;
        let kappa = f / 2.0;
        OperatorParams::new(1, 1, kappa, kappa * (2.0 - 3f64.ln())).unwrap()
    }

    #[test]
    fn derived_constants() {
        let p = unit_params();
        assert_relative_eq!(p.kappa_prime, 1.0, epsilon = 1e-15);
        assert!(p.energy_prime.abs() < 1e-15);
        let ad = p.adiabatic.unwrap();
        assert_relative_eq!(ad.a, 0.3678794411714423, max_relative = 1e-14);
        assert_relative_eq!(ad.rho, -1.1557273497909217, max_relative = 1e-14);
        assert_relative_eq!(ad.lambda, std::f64::consts::E, max_relative = 1e-14);

        let g = OperatorParams::new(2, 5, 0.7, 1.3).unwrap();
        assert_relative_eq!(g.field, 8.224670334241132, max_relative = 1e-14);
        assert_relative_eq!(g.kappa_prime, 0.17021958851912746, max_relative = 1e-14);
        assert_relative_eq!(g.energy_prime, 0.003358808150736309, max_relative = 1e-12);
        let ad = g.adiabatic.unwrap();
        assert_relative_eq!(ad.lambda, 3.2379904467359365, max_relative = 1e-13);
        assert_relative_eq!(ad.a, 0.07213830358322618, max_relative = 1e-12);
        assert_relative_eq!(ad.rho, -0.1928836157057751, max_relative = 1e-12);
    }

    #[test]
    fn reduces_fraction_and_rejects_bad_input() {
        let p = OperatorParams::new(4, 6, 1.0, 0.0).unwrap();
        assert_eq!((p.p(), p.q()), (2, 3));
        assert!(OperatorParams::new(0, 1, 1.0, 0.0).is_err());
        assert!(OperatorParams::new(1, 1, -1.0, 0.0).is_err());
        assert!(OperatorParams::new(1, 1, 0.0, 0.0).unwrap().adiabatic.is_none());
    }

    #[test]
    fn rho_back_solve() {
        for &rho in &[-0.3, -1.0, -2.7] {
            let p = OperatorParams::from_rho(2, 5, 0.7, rho).unwrap();
            assert_relative_eq!(p.adiabatic.unwrap().rho, rho, max_relative = 1e-12);
        }
    }

    #[test]
    fn momentum_values() {
        let free = OperatorParams { field: 1.0, ..OperatorParams::new(1, 1, 0.0, 0.0).unwrap() };
        assert_relative_eq!(momentum(&free, PI.powi(4)).unwrap(), PI * PI, max_relative = 1e-15);
        let p = OperatorParams::new(1, 1, 1.0, 0.0).unwrap();
        assert_relative_eq!(momentum(&p, 100.0).unwrap(), 18.264502006710546, max_relative = 1e-14);
        assert!(matches!(momentum(&p, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn xi_reference_values() {
        let p = OperatorParams::new(1, 1, 1.0, 0.0).unwrap();
        assert_relative_eq!(phase_xi_remainder(&p, 100.0).unwrap(), 0.18711145931053252, max_relative = 1e-10);
        assert_relative_eq!(phase_xi(&p, 100.0).unwrap(), 1223.761758395974, max_relative = 1e-13);
        assert_relative_eq!(phase_xi(&p, 5000.0).unwrap(), 427770.7496902439, max_relative = 1e-14);
    }

    #[test]
    fn xi_free_case_is_closed_form() {
        let p = OperatorParams::new(1, 1, 0.0, 0.7).unwrap();
        let x = 123.4;
        let want = 2.0 / (3.0 * p.field) * (p.field * x + 0.7f64).powf(1.5);
        assert_relative_eq!(phase_xi(&p, x).unwrap(), want, max_relative = 1e-15);
    }

    #[test]
    fn xi_derivative_is_momentum() {
        let p = OperatorParams::new(2, 5, 0.7, 1.3).unwrap();
        for &x in &[3.0f64, 40.0, 900.0] {
            let h = 1e-4 * x;
            let fd = (phase_xi(&p, x + h).unwrap() - phase_xi(&p, x - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(fd, momentum(&p, x).unwrap(), max_relative = 1e-8);
        }
    }

    #[test]
    fn xi_increments_grow() {
        let p = OperatorParams::new(1, 1, 1.0, 0.0).unwrap();
        let mut prev = 0.0;
        for l in 3..30 {
            let a = phase_xi(&p, solve_grid(&p, GridKind::XUpper, l - 1).unwrap()).unwrap();
            let b = phase_xi(&p, solve_grid(&p, GridKind::XUpper, l).unwrap()).unwrap();
            assert!(b - a > prev);
            prev = b - a;
        }
    }

    #[test]
    fn linear_grids() {
        let p = OperatorParams { field: 1.0, ..OperatorParams::new(1, 1, 0.0, 0.0).unwrap() };
        for l in 1..50 {
            let lf = l as f64;
            assert_relative_eq!(solve_grid(&p, GridKind::XUpper, l).unwrap(), PI * PI * lf * lf, max_relative = 1e-13);
            let t = PI * PI * (lf - 0.5) * (lf - 0.5);
            assert_eq!(solve_grid(&p, GridKind::XLower, l).unwrap(), t.floor() - 0.5);
        }
    }

    #[test]
    fn grid_residuals() {
        let p = OperatorParams::new(2, 5, 0.7, 1.3).unwrap();
        for l in [2, 10, 100, 1000] {
            let lf = l as f64;
            let x = solve_grid(&p, GridKind::XUpper, l).unwrap();
            let target = PI * PI * lf * lf;
            assert!((p.radicand(x) - target).abs() < 1e-10 * target);
            let xs = solve_grid(&p, GridKind::XStar, l).unwrap();
            let t2 = PI * PI * (lf - 0.5) * (lf - 0.5);
            assert!((p.field * xs + p.log_term(xs) - t2).abs() < 1e-10 * t2);
        }
        assert!(matches!(solve_grid(&p, GridKind::XUpper, 0), Err(Error::NoRoot(_))));
    }

    #[test]
    fn k_grid_closed_form_and_floor() {
        let p = unit_params();
        for m in 2..20 {
            let k = k_tilde(&p, m).unwrap();
            assert_relative_eq!(k, (m as f64 - 1.5).exp(), max_relative = 1e-13);
            // independent bisection on s(k) = π(m − 1/2)
            let (mut lo, mut hi) = (1e-3f64, 1e12f64);
            for _ in 0..200 {
                let mid = (lo * hi).sqrt();
                if s_of_k(&p, mid) < PI * (m as f64 - 0.5) { lo = mid } else { hi = mid }
            }
            assert_relative_eq!(k, lo, max_relative = 1e-12);
            let km = solve_grid(&p, GridKind::KLower, m).unwrap();
            assert_eq!(km, k.floor());
            let s = s_of_k(&p, km.max(1.0));
            assert!(s <= PI * (m as f64 - 0.5) + 1e-12);
        }
        let free = OperatorParams::new(1, 1, 0.0, 0.3).unwrap();
        assert!(matches!(k_tilde(&free, 5), Err(Error::NoRoot(_))));
    }

    #[test]
    fn cache_matches_direct() {
        let p = OperatorParams::new(1, 1, 1.0, 0.0).unwrap();
        let c = GridCache::new(p);
        for l in 5..15 {
            assert_eq!(c.get(GridKind::XLower, l).unwrap(), solve_grid(&p, GridKind::XLower, l).unwrap());
            assert_eq!(c.get(GridKind::XLower, l).unwrap(), solve_grid(&p, GridKind::XLower, l).unwrap());
        }
    }

    #[test]
    fn omega_and_s() {
        let p = unit_params();
        assert_relative_eq!(omega(&p, 7.0), PI * 7.0 * 7f64.ln(), max_relative = 1e-14);
        let g = OperatorParams::new(2, 5, 0.7, 1.3).unwrap();
        for &k in &[3.0, 50.0, 2000.0] {
            let h = 1e-4 * k;
            let fd = (omega(&g, k + h) - omega(&g, k - h)) / (2.0 * h);
            assert_relative_eq!(fd, s_of_k(&g, k), max_relative = 1e-8);
        }
        let grid = TurningGrid::new(&g, DEFAULT_ETA).unwrap();
        for m in 1..30 {
            assert_relative_eq!(s_of_k(&g, grid.k(m)), PI * m as f64, max_relative = 1e-12);
            assert_relative_eq!(grid.k(m + 1) / grid.k(m), g.adiabatic.unwrap().lambda, max_relative = 1e-13);
        }
    }

    #[test]
    fn amplitudes() {
        let spec = PotentialSpec::new(1.0, 0.3, 2).unwrap();
        let p = unit_params();
        for k in [2u64, 10, 77] {
            let (b, b1) = step_amplitudes(&p, &spec, k);
            let want = spec.coeff(k as i64) * Complex64::from_polar(1.0, PI / 4.0)
                / (2.0 * p.field * k as f64).sqrt();
            assert!((b - want).norm() < 1e-15);
            assert_eq!(b1, 0.0);
        }
        let g = OperatorParams::new(1, 3, 0.5, 0.2).unwrap();
        let (b, _) = step_amplitudes(&g, &spec, 100);
        let bound = 3.0 * spec.coeff(300).norm() / (2.0 * g.field * 300.0).sqrt();
        assert!(b.norm() <= bound * (1.0 + 1e-14));
        let (bz, b1z) = step_amplitudes(&g, &PotentialSpec::zero(), 100);
        assert_eq!((bz.norm(), b1z), (0.0, 0.0));
    }

    #[test]
    fn turning_data_reference() {
        let spec = PotentialSpec::new(1.0, 0.3, 2).unwrap();
        let p = unit_params();
        let t = turning_data(&p, &spec, 10).unwrap();
        assert_relative_eq!(t.d.re, 0.08045130067324955, max_relative = 1e-13);
        assert_relative_eq!(t.d.im, 0.08045130067324955, max_relative = 1e-13);
        assert_eq!(t.lambda.re, 0.0);
        assert_relative_eq!(t.lambda.im, -0.5 * t.d.norm_sqr());
        let c = model_constants(&p, &spec).unwrap();
        assert_relative_eq!(c.b0, 0.3100743073910664, max_relative = 1e-14);
        for m in 2..25 {
            let a = turning_data(&p, &spec, m).unwrap();
            let b = turning_data(&p, &spec, m + 1).unwrap();
            assert_relative_eq!(b.phi0 / a.phi0, std::f64::consts::E, max_relative = 1e-13);
            let alt = a.phi0_from_omega.unwrap();
            assert_relative_eq!(alt, a.phi0, max_relative = 1e-9);
        }
        assert!(matches!(turning_data(&p, &spec, 0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn turning_grid_bounds() {
        let p = unit_params();
        assert!(TurningGrid::new(&p, 0.3).is_err());
        let g = TurningGrid::new(&p, DEFAULT_ETA).unwrap();
        for m in 3..30 {
            assert!(g.k_minus(m) <= g.k_hat(m) && g.k_hat(m) <= g.k_plus(m));
        }
    }
}
