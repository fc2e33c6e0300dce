//! The discrete reduction: window recursion for (ln R̃, φ̃), adiabatic
//! phase increments, the components Φ₁, Φ₂±, Φ₃± and the closed step
//! 𝓐₀(m) = e^{−iΓ₊σ₃}S(d_m)e^{iΓ₋σ₃}.

use crate::error::{Error, Result};
use crate::hp::GeometricSequence;
use crate::mat2::{self, Mat2, Vec2};
use crate::oscillatory::{self, OracleContext};
use crate::phase::{self, GridKind, OperatorParams, TurningGrid};
use crate::potential::{gauss_sum_w, gauss_sum_w1, PotentialSpec};
use crate::quad;
use crate::turning::{self, ConnectionMatrix};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::OnceLock;

/// Whether Im 𝓘̃ is computed by the double-integral oracle or dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phi3Mode {
    Oracle,
    #[default]
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DiscreteState {
    pub ln_r: f64,
    pub phi: f64,
}

/// Terms of one recursion step before the implicit boundary correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepIncrements {
    pub d_ln_r: f64,
    pub d_phi: f64,
    pub im_i_tilde: f64,
    pub b: Complex64,
}

const FIXED_POINT_ITERS: usize = 60;

/// One step of the (ln R̃, φ̃) recursion from k to k + 1.
///
/// `oracle` supplies Im 𝓘̃_k; `boundary` switches the telescoping
/// t-terms on. φ̃(k+1) enters those terms, so the step is solved by
/// fixed-point iteration.
pub fn window_recursion_step(
    params: &OperatorParams,
    spec: &PotentialSpec,
    oracle: Option<&OracleContext>,
    boundary: bool,
    k: u64,
    state: DiscreteState,
) -> Result<(DiscreteState, StepIncrements)> {
    if k == 0 {
        return Err(Error::Domain("the recursion starts at k = 1".into()));
    }
    let (b, b1) = phase::step_amplitudes(params, spec, k);
    let om = phase::omega(params, k as f64);
    let e1 = Complex64::from_polar(1.0, 2.0 * om + 2.0 * state.phi) * b;
    let e2 = Complex64::from_polar(1.0, 4.0 * om + 4.0 * state.phi) * b * b;
    let im_i = match oracle {
        Some(ctx) => oscillatory::im_i_tilde(ctx, k as i64)?,
        None => 0.0,
    };
    let d_ln_r = e1.im + 0.5 * e2.re + 0.5 * b.norm_sqr();
    let d_phi = e1.re - 0.5 * e2.im - b1 - im_i;
    let inc = StepIncrements { d_ln_r, d_phi, im_i_tilde: im_i, b };
    if !boundary || spec.is_zero() {
        return Ok((DiscreteState { ln_r: state.ln_r + d_ln_r, phi: state.phi + d_phi }, inc));
    }
    let q = params.q() as i64;
    let qf = q as f64;
    let kf = k as f64;
    let t0 = oscillatory::boundary_term(params, spec, q * k as i64)?;
    let t1 = oscillatory::boundary_term(params, spec, q * (k as i64 + 1))?;
    let lower = Complex64::from_polar(1.0, 2.0 * state.phi) * t0 / kf;
    let c = 1.0 / (2.0 * PI * qf);
    let mut phi_next = state.phi + d_phi;
    for _ in 0..FIXED_POINT_ITERS {
        let diff = Complex64::from_polar(1.0, 2.0 * phi_next) * t1 / (kf + 1.0) - lower;
        let next = state.phi + d_phi + c * diff.re;
        let done = (next - phi_next).abs() <= 1e-15 * (1.0 + next.abs());
        phi_next = next;
        if done {
            break;
        }
    }
    let diff = Complex64::from_polar(1.0, 2.0 * phi_next) * t1 / (kf + 1.0) - lower;
    Ok((DiscreteState { ln_r: state.ln_r + d_ln_r + c * diff.im, phi: phi_next }, inc))
}

/// Runs the recursion from k0 to k1 and returns states at k0, …, k1.
pub fn run_window_recursion(
    params: &OperatorParams,
    spec: &PotentialSpec,
    oracle: Option<&OracleContext>,
    boundary: bool,
    k0: u64,
    k1: u64,
    init: DiscreteState,
) -> Result<Vec<DiscreteState>> {
    let mut out = Vec::with_capacity((k1.saturating_sub(k0) + 1) as usize);
    let mut s = init;
    out.push(s);
    for k in k0..k1 {
        s = window_recursion_step(params, spec, oracle, boundary, k, s)?.0;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Minus,
    Plus,
}

/// g(s) = |w(s)|²(s − s₀)^{−2β}.
fn profile_g(params: &OperatorParams, beta: f64, s: f64) -> f64 {
    gauss_sum_w(&params.gauss, s).norm_sqr() * (s - params.s0).powf(-2.0 * beta)
}

/// ∫_lo^hi ds cot s (g(s) − g(πm)); the integrand is regular at s = πm.
fn cot_bracket_integral(params: &OperatorParams, beta: f64, m: i64, lo: f64, hi: f64) -> Result<f64> {
    let pm = PI * m as f64;
    let gm = profile_g(params, beta, pm);
    let h = 1e-4;
    let slope = (profile_g(params, beta, pm + h) - profile_g(params, beta, pm - h)) / (2.0 * h);
    let f = |s: f64| {
        let u = s - pm;
        if u.abs() < 1e-6 {
            slope * if u == 0.0 { 1.0 } else { u / u.tan() }
        } else {
            (profile_g(params, beta, s) - gm) / u.tan()
        }
    };
    Ok(quad::integrate(f, lo, hi, 1e-13, 1e-11, 4000)?.value)
}

/// ∫_lo^hi ds Im w₁(s)(s − s₀)^{−2β}.
fn w1_integral(params: &OperatorParams, beta: f64, lo: f64, hi: f64) -> Result<f64> {
    if params.q() == 1 {
        return Ok(0.0);
    }
    let f = |s: f64| gauss_sum_w1(&params.gauss, s).im * (s - params.s0).powf(-2.0 * beta);
    Ok(quad::integrate(f, lo, hi, 1e-13, 1e-11, 4000)?.value)
}

/// Σ_{k=a}^{b} Im 𝓘̃_k.
fn i_tilde_sum(ctx: &OracleContext, a: i64, b: i64) -> Result<f64> {
    let mut s = 0.0;
    for k in a.max(1)..=b {
        s += oscillatory::im_i_tilde(ctx, k)?;
    }
    Ok(s)
}

fn check_turning(params: &OperatorParams, m: i64) -> Result<()> {
    if PI * m as f64 <= params.s0 {
        return Err(Error::Degenerate(format!("πm = {} does not exceed s0 = {}", PI * m as f64, params.s0)));
    }
    Ok(())
}

/// The half-period quadratures need π(m − 1/2) > s₀.
fn check_half_period(params: &OperatorParams, m: i64) -> Result<()> {
    let lo = PI * (m as f64 - 0.5);
    if lo <= params.s0 {
        return Err(Error::Degenerate(format!("π(m − 1/2) = {lo} does not exceed s0 = {}", params.s0)));
    }
    Ok(())
}

/// The φ̃-increment across J_m⁻ = [k_m, K_m⁻] or J_m⁺ = [K_m⁺, k_{m+1}]
/// in its adiabatic form.
pub fn adiabatic_phase_increment(
    params: &OperatorParams,
    spec: &PotentialSpec,
    oracle: Option<&OracleContext>,
    m: i64,
    side: Side,
    eta: f64,
) -> Result<f64> {
    check_half_period(params, m)?;
    let grid = TurningGrid::new(params, eta)?;
    let ad = params.adiabatic()?;
    let c = phase::model_constants(params, spec)?;
    let b0sq = c.b0 * c.b0;
    let beta = spec.beta;
    let pm = PI * m as f64;
    let log_term = 0.5 * b0sq * profile_g(params, beta, pm) * (ad.mu.ln() - eta * grid.ln_k(m));
    let out = match side {
        Side::Minus => {
            let lo = pm - 0.5 * PI;
            let sum = match oracle {
                Some(ctx) => {
                    let km = phase::solve_grid(params, GridKind::KLower, m)? as i64;
                    i_tilde_sum(ctx, km, grid.k_minus(m) as i64)?
                }
                None => 0.0,
            };
            -log_term - 0.5 * b0sq * cot_bracket_integral(params, beta, m, lo, pm)?
                - b0sq * w1_integral(params, beta, lo, pm)?
                - sum
        }
        Side::Plus => {
            let hi = pm + 0.5 * PI;
            let sliver = pm + ad.mu * (-eta * grid.ln_k(m)).exp();
            let sum = match oracle {
                Some(ctx) => {
                    let kn = phase::solve_grid(params, GridKind::KLower, m + 1)? as i64;
                    i_tilde_sum(ctx, grid.k_plus(m) as i64, kn)?
                }
                None => 0.0,
            };
            log_term - 0.5 * b0sq * cot_bracket_integral(params, beta, m, sliver.min(hi), hi)?
                - b0sq * w1_integral(params, beta, pm, hi)?
                - sum
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiComponents {
    pub phi1: f64,
    pub phi2_minus: f64,
    pub phi2_plus: f64,
    pub phi3_minus: f64,
    pub phi3_plus: f64,
}

/// Φ₁ = −(|d_m|²/4) ln(μ/(4K_m)).
pub fn phi1(params: &OperatorParams, d: Complex64, m: i64) -> Result<f64> {
    let ad = params.adiabatic()?;
    let ln_k = ad.a.ln() + m as f64 * ad.ln_lambda;
    Ok(-0.25 * d.norm_sqr() * ((ad.mu / 4.0).ln() - ln_k))
}

/// Φ₂± from the quadratures over half-periods on either side of πm.
pub fn phi2(params: &OperatorParams, spec: &PotentialSpec, m: i64) -> Result<(f64, f64)> {
    check_turning(params, m)?;
    if spec.is_zero() {
        return Ok((0.0, 0.0));
    }
    check_half_period(params, m)?;
    let c = phase::model_constants(params, spec)?;
    let b0sq = c.b0 * c.b0;
    let beta = spec.beta;
    let pm = PI * m as f64;
    let (lo, hi) = (pm - 0.5 * PI, pm + 0.5 * PI);
    let minus = -0.5 * b0sq * cot_bracket_integral(params, beta, m, lo, pm)? - b0sq * w1_integral(params, beta, lo, pm)?;
    let plus = 0.5 * b0sq * cot_bracket_integral(params, beta, m, pm, hi)? + b0sq * w1_integral(params, beta, pm, hi)?;
    Ok((minus, plus))
}

/// Raw Φ₃⁻ = −Σ_{k_m}^{K̂_m} Im 𝓘̃_k and Φ₃⁺ = Σ_{K̂_m}^{k_{m+1}} Im 𝓘̃_k.
pub fn phi3_raw(params: &OperatorParams, ctx: &OracleContext, m: i64) -> Result<(f64, f64)> {
    check_turning(params, m)?;
    let ad = params.adiabatic()?;
    let k_hat = (ad.a * (m as f64 * ad.ln_lambda).exp()).floor() as i64;
    let km = phase::solve_grid(params, GridKind::KLower, m)? as i64;
    let kn = phase::solve_grid(params, GridKind::KLower, m + 1)? as i64;
    Ok((-i_tilde_sum(ctx, km, k_hat)?, i_tilde_sum(ctx, k_hat, kn)?))
}

pub fn phi_components(
    params: &OperatorParams,
    spec: &PotentialSpec,
    oracle: Option<&OracleContext>,
    m: i64,
) -> Result<PhiComponents> {
    let td = phase::turning_data(params, spec, m)?;
    let (phi2_minus, phi2_plus) = phi2(params, spec, m)?;
    let (phi3_minus, phi3_plus) = match oracle {
        Some(ctx) => phi3_raw(params, ctx, m)?,
        None => (0.0, 0.0),
    };
    Ok(PhiComponents { phi1: phi1(params, td.d, m)?, phi2_minus, phi2_plus, phi3_minus, phi3_plus })
}

const BUMP_NODES: usize = 64;

/// Gauss–Legendre nodes with weights pre-multiplied by the normalized
/// bump c·e^{−1/(1−x²)} on (−1, 1).
fn bump_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = quad::gauss_legendre(BUMP_NODES);
        let raw: Vec<f64> = x.iter().zip(&w).map(|(&t, &wt)| wt * (-1.0 / (1.0 - t * t)).exp()).collect();
        let norm: f64 = raw.iter().sum();
        (x, raw.into_iter().map(|v| v / norm).collect())
    })
}

/// Abscissae and weights of the mollifier at (m, ρ).
pub fn mollifier_nodes(lambda1: f64, lambda: f64, m: i64, rho: f64) -> Result<Vec<(f64, f64)>> {
    if !(lambda1 > 1.0 && lambda1 < lambda) {
        return Err(Error::Precondition(format!("Λ₁ = {lambda1} must lie in (1, Λ = {lambda})")));
    }
    let width = lambda1.powf(-(m as f64));
    let (x, w) = bump_rule();
    Ok(x.iter().zip(w).map(|(&t, &wt)| (rho + width * t, wt)).collect())
}

/// ∫ κ_m φ(κ_m(y − ρ)) Φ₃(m, y) dy with κ_m = Λ₁^m, so the kernel has
/// width Λ₁^{−m} in ρ.
pub fn mollify_phi3<F: FnMut(i64, f64) -> Result<f64>>(
    lambda1: f64,
    lambda: f64,
    mut sampler: F,
    m: i64,
    rho: f64,
) -> Result<f64> {
    let mut s = 0.0;
    for (y, w) in mollifier_nodes(lambda1, lambda, m, rho)? {
        s += w * sampler(m, y)?;
    }
    Ok(s)
}

/// Default Λ₁ = √Λ.
pub fn default_lambda1(params: &OperatorParams) -> Result<f64> {
    Ok((0.5 * params.adiabatic()?.ln_lambda).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedStepCoeffs {
    pub m: i64,
    pub d_m: Complex64,
    /// ρΛ^m, possibly reduced modulo 2π.
    pub phi0: f64,
    pub phi1: f64,
    pub phi2_minus: f64,
    pub phi2_plus: f64,
    pub phi3_minus: f64,
    pub phi3_plus: f64,
    pub gamma_minus: f64,
    pub gamma_plus: f64,
    pub s: ConnectionMatrix,
}

impl ClosedStepCoeffs {
    /// Γ± = Φ₀ + Φ₁ + Φ₂± + Φ̃₃±.
    pub fn new(m: i64, d_m: Complex64, phi0: f64, phis: &PhiComponents) -> Self {
        Self {
            m,
            d_m,
            phi0,
            phi1: phis.phi1,
            phi2_minus: phis.phi2_minus,
            phi2_plus: phis.phi2_plus,
            phi3_minus: phis.phi3_minus,
            phi3_plus: phis.phi3_plus,
            gamma_minus: phi0 + phis.phi1 + phis.phi2_minus + phis.phi3_minus,
            gamma_plus: phi0 + phis.phi1 + phis.phi2_plus + phis.phi3_plus,
            s: turning::connection_matrix(d_m),
        }
    }

    /// 𝓐₀(m) = e^{−iΓ₊σ₃}S(d_m)e^{iΓ₋σ₃}.
    pub fn matrix(&self) -> Mat2 {
        mat2::mul(&mat2::phase(-self.gamma_plus), &mat2::mul(&self.s.matrix(), &mat2::phase(self.gamma_minus)))
    }
}

/// χ(m+1) = 𝓐₀(m)χ(m).
pub fn closed_step(coeffs: &ClosedStepCoeffs, chi: &Vec2) -> Vec2 {
    let s = coeffs.s.s_entry;
    let r = coeffs.s.r_entry;
    let u0 = Complex64::from_polar(1.0, coeffs.gamma_minus) * chi[0];
    let u1 = Complex64::from_polar(1.0, -coeffs.gamma_minus) * chi[1];
    let v0 = s * u0 + r.conj() * u1;
    let v1 = r * u0 + s * u1;
    [Complex64::from_polar(1.0, -coeffs.gamma_plus) * v0, Complex64::from_polar(1.0, coeffs.gamma_plus) * v1]
}

/// The spinor R(e^{iφ}, e^{−iφ}).
pub fn spinor(ln_r: f64, phi: f64) -> Vec2 {
    let r = ln_r.exp();
    [Complex64::from_polar(r, phi), Complex64::from_polar(r, -phi)]
}

/// (ln R, φ) of a conjugate-pair spinor.
pub fn prufer_of(chi: &Vec2) -> (f64, f64) {
    (chi[0].norm().ln(), chi[0].arg())
}

/// χ(K_m⁺) from χ(K_m⁻) through the conjugated connection matrix.
pub fn turning_transfer(
    params: &OperatorParams,
    spec: &PotentialSpec,
    m: i64,
    eta: f64,
    chi: &Vec2,
) -> Result<Vec2> {
    let grid = TurningGrid::new(params, eta)?;
    let ln_k = grid.ln_k(m);
    if (1.0 - eta) * ln_k < 0.0 {
        return Err(Error::Precondition(format!("K_m^(1−η) < 1 at m = {m}")));
    }
    let td = phase::turning_data(params, spec, m)?;
    let ad = params.adiabatic()?;
    let ell = 2f64.ln() + 0.5 * ad.mu.ln() + (0.5 - eta) * ln_k;
    let conj = turning_conjugator(td.lambda, ell);
    let inner = turning::rotated_connection(td.d, td.phi0);
    let t = mat2::mul(&conj, &mat2::mul(&inner, &mat2::inv(&conj)));
    Ok(mat2::apply(&t, chi))
}

/// exp(λσ₃·ℓ).
pub fn turning_conjugator(lambda: Complex64, ell: f64) -> Mat2 {
    mat2::exp_sigma3(lambda * ell)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainRecord {
    pub m: i64,
    pub chi: Vec2,
    pub ln_norm: f64,
    pub phase: f64,
    pub coeffs: Option<ClosedStepCoeffs>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOptions {
    pub phi3: Phi3Mode,
    pub lambda1: Option<f64>,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self { phi3: Phi3Mode::Zero, lambda1: None }
    }
}

/// Assembles the closed-step coefficients for m, with Φ₀ supplied by the
/// caller (it is ρΛ^m, usually reduced modulo 2π).
pub fn closed_step_coeffs(
    params: &OperatorParams,
    spec: &PotentialSpec,
    m: i64,
    phi0: f64,
    opts: &ChainOptions,
) -> Result<ClosedStepCoeffs> {
    let td = phase::turning_data(params, spec, m)?;
    let (phi2_minus, phi2_plus) = phi2(params, spec, m)?;
    let (phi3_minus, phi3_plus) = match opts.phi3 {
        Phi3Mode::Zero => (0.0, 0.0),
        Phi3Mode::Oracle => mollified_phi3(params, spec, m, opts)?,
    };
    let phis = PhiComponents { phi1: phi1(params, td.d, m)?, phi2_minus, phi2_plus, phi3_minus, phi3_plus };
    Ok(ClosedStepCoeffs::new(m, td.d, phi0, &phis))
}

fn mollified_phi3(params: &OperatorParams, spec: &PotentialSpec, m: i64, opts: &ChainOptions) -> Result<(f64, f64)> {
    let ad = params.adiabatic()?;
    let l1 = match opts.lambda1 {
        Some(v) => v,
        None => default_lambda1(params)?,
    };
    let (mut minus, mut plus) = (0.0, 0.0);
    for (rho, w) in mollifier_nodes(l1, ad.lambda, m, ad.rho)? {
        let pr = OperatorParams::from_rho(params.p(), params.q(), params.kappa, rho)?;
        let ctx = OracleContext::new(&pr, spec, oscillatory::DEFAULT_ORACLE_MODES);
        let (a, b) = phi3_raw(&pr, &ctx, m)?;
        minus += w * a;
        plus += w * b;
    }
    Ok((minus, plus))
}

/// Iterates the closed step from m0 to m1, with ρΛ^m reduced exactly
/// modulo 2π.
pub fn run_closed_chain(
    params: &OperatorParams,
    spec: &PotentialSpec,
    chi_init: Vec2,
    m0: i64,
    m1: i64,
    opts: &ChainOptions,
) -> Result<Vec<ChainRecord>> {
    if !(m1 > m0 && m0 >= 1) {
        return Err(Error::Domain(format!("chain range [{m0}, {m1}] is empty or starts below 1")));
    }
    let ad = params.adiabatic()?;
    let mut seq = GeometricSequence::new(ad.ln_lambda, m1 as u64, 2);
    seq.seek(m0 as u64);
    let mut chi = chi_init;
    let mut out = Vec::with_capacity((m1 - m0 + 1) as usize);
    for m in m0..m1 {
        let c = closed_step_coeffs(params, spec, m, seq.phase(ad.rho), opts)?;
        let (ln_norm, ph) = prufer_of(&chi);
        out.push(ChainRecord { m, chi, ln_norm, phase: ph, coeffs: Some(c) });
        chi = closed_step(&c, &chi);
        seq.advance();
    }
    let (ln_norm, ph) = prufer_of(&chi);
    out.push(ChainRecord { m: m1, chi, ln_norm, phase: ph, coeffs: None });
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KappaZeroCheck {
    /// sup over K₂ of |ln R̃(K₂)/R̃(K₁)|.
    pub sup_log_ratio: f64,
    /// Distance of 2E′q from the nearest integer.
    pub resonance_distance: f64,
    pub resonant: bool,
}

/// Runs the κ = 0 recursion from K₁ to K₂max.
pub fn kappa_zero_check(
    params: &OperatorParams,
    spec: &PotentialSpec,
    k1: u64,
    k2_max: u64,
    phi_init: f64,
) -> Result<KappaZeroCheck> {
    if params.kappa != 0.0 {
        return Err(Error::Precondition("kappa_zero_check needs kappa = 0".into()));
    }
    let t = 2.0 * params.energy_prime * params.q() as f64;
    let dist = (t - t.round()).abs();
    let mut s = DiscreteState { ln_r: 0.0, phi: phi_init };
    let mut sup = 0.0f64;
    for k in k1..k2_max {
        s = window_recursion_step(params, spec, None, false, k, s)?.0;
        sup = sup.max(s.ln_r.abs());
    }
    Ok(KappaZeroCheck { sup_log_ratio: sup, resonance_distance: dist, resonant: dist < 1e-6 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeRow {
    pub k: u64,
    pub x: f64,
    pub ln_r: f64,
    pub theta: f64,
    pub phi: f64,
    /// |ln R̃(k+1) − ln R(x_{q(k+1)})| after re-anchoring at x_{qk}.
    pub ln_r_error: f64,
    pub phi_error: f64,
}

/// Integrates the Prüfer system across windows k0..k1 and compares each
/// recursion step, started from the ODE state at x_{qk}, with the ODE
/// state at x_{q(k+1)}.
pub fn ode_bridge(
    params: &OperatorParams,
    spec: &PotentialSpec,
    k0: u64,
    k1: u64,
    tol: f64,
    theta0: f64,
) -> Result<Vec<BridgeRow>> {
    if !(k1 > k0 && k0 >= 1) {
        return Err(Error::Domain(format!("bridge range [{k0}, {k1}] is empty or starts below 1")));
    }
    let q = params.q() as i64;
    let ctx = OracleContext::new(params, spec, oscillatory::DEFAULT_ORACLE_MODES);
    let sys = crate::ode::PruferSystem::new(params, ctx.potential().clone());
    let xs = (k0..=k1)
        .map(|k| phase::solve_grid(params, GridKind::XLower, q * k as i64))
        .collect::<Result<Vec<_>>>()?;
    let init = crate::ode::PruferState::at(params, xs[0], 0.0, theta0)?;
    let tr = sys.integrate(xs[0], xs[xs.len() - 1], init, tol, &xs)?;
    let mut out = Vec::with_capacity(xs.len());
    for (i, k) in (k0..=k1).enumerate() {
        let st = tr[i].state;
        let (ln_r_error, phi_error) = if k < k1 {
            let s = DiscreteState { ln_r: st.ln_r, phi: st.phi };
            let (n, _) = window_recursion_step(params, spec, Some(&ctx), true, k, s)?;
            let next = tr[i + 1].state;
            ((n.ln_r - next.ln_r).abs(), (n.phi - next.phi).abs())
        } else {
            (f64::NAN, f64::NAN)
        };
        out.push(BridgeRow { k, x: xs[i], ln_r: st.ln_r, theta: st.theta, phi: st.phi, ln_r_error, phi_error });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PsiSqPoint {
    pub k: u64,
    pub n: f64,
    /// ∫₀^N ψ² built from ψ² ≈ ½p⁻¹R̃², divided by N^{1/2}.
    pub ratio: f64,
}

/// Window-by-window estimate of ∫₀^N ψ²/N^{1/2} from the recursion, with
/// each window contributing (πq/F)R̃(k)².
pub fn psi_sq_growth(
    params: &OperatorParams,
    spec: &PotentialSpec,
    k_max: u64,
    phi_init: f64,
) -> Result<Vec<PsiSqPoint>> {
    let q = params.q() as i64;
    let w = PI * params.q() as f64 / params.field;
    let mut s = DiscreteState { ln_r: 0.0, phi: phi_init };
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(k_max as usize);
    for k in 1..=k_max {
        acc += w * (2.0 * s.ln_r).exp();
        let n = phase::solve_grid(params, GridKind::XLower, q * (k as i64 + 1))?;
        out.push(PsiSqPoint { k, n, ratio: acc / n.sqrt() });
        s = window_recursion_step(params, spec, None, false, k, s)?.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params() -> OperatorParams {
        OperatorParams::new(1, 1, 1.0, 0.0).unwrap()
    }

    fn spec() -> PotentialSpec {
        PotentialSpec::new(1.0, 0.3, 2).unwrap()
    }

    /// q = 1, κ′ = 1 and E chosen so that ρ = −1.
    fn model_params() -> OperatorParams {
        let f = PI * PI / 3.0;
        OperatorParams::from_rho(1, 1, f / 2.0, -1.0).unwrap()
    }

    #[test]
    fn zero_potential_keeps_state() {
        let s0 = DiscreteState { ln_r: 0.4, phi: 1.2 };
        let out = run_window_recursion(&params(), &PotentialSpec::zero(), None, true, 5, 40, s0).unwrap();
        assert!(out.iter().all(|s| *s == s0));
    }

    #[test]
    fn single_step_is_bounded_by_amplitude() {
        let p = params();
        let sp = spec();
        for k in [5u64, 17, 60, 300] {
            for j in 0..8 {
                let s0 = DiscreteState { ln_r: 0.0, phi: j as f64 * PI / 8.0 };
                let (s1, inc) = window_recursion_step(&p, &sp, None, true, k, s0).unwrap();
                let b = inc.b.norm();
                let t_part = 2.0 / (2.0 * PI * k as f64) * 2.0;
                assert!(s1.ln_r.abs() <= 2.0 * b + 2.0 * b * b + t_part, "k={k}");
            }
        }
    }

    #[test]
    fn implicit_boundary_step_is_self_consistent() {
        let p = params();
        let sp = spec();
        let s0 = DiscreteState { ln_r: 0.0, phi: 0.3 };
        let (s1, inc) = window_recursion_step(&p, &sp, None, true, 25, s0).unwrap();
        let t0 = oscillatory::boundary_term(&p, &sp, 25).unwrap();
        let t1 = oscillatory::boundary_term(&p, &sp, 26).unwrap();
        let diff = Complex64::from_polar(1.0, 2.0 * s1.phi) * t1 / 26.0 - Complex64::from_polar(1.0, 0.6) * t0 / 25.0;
        assert_relative_eq!(s1.phi, 0.3 + inc.d_phi + diff.re / (2.0 * PI), epsilon = 1e-14);
        assert_relative_eq!(s1.ln_r, inc.d_ln_r + diff.im / (2.0 * PI), epsilon = 1e-14);
    }

    #[test]
    fn q1_increment_is_log_term_plus_bracket() {
        let p = model_params();
        let sp = spec();
        let m = 6;
        let eta = phase::DEFAULT_ETA;
        let minus = adiabatic_phase_increment(&p, &sp, None, m, Side::Minus, eta).unwrap();
        let plus = adiabatic_phase_increment(&p, &sp, None, m, Side::Plus, eta).unwrap();
        let c = phase::model_constants(&p, &sp).unwrap();
        let ad = p.adiabatic().unwrap();
        let grid = TurningGrid::new(&p, eta).unwrap();
        let g = (PI * m as f64 - p.s0).powf(-2.0 * sp.beta);
        let log = 0.5 * c.b0 * c.b0 * g * (ad.mu.ln() - eta * grid.ln_k(m));
        let pm = PI * m as f64;
        let br_m = cot_bracket_integral(&p, sp.beta, m, pm - PI / 2.0, pm).unwrap();
        let sliver = pm + ad.mu * (-eta * grid.ln_k(m)).exp();
        let br_p = cot_bracket_integral(&p, sp.beta, m, sliver, pm + PI / 2.0).unwrap();
        assert_relative_eq!(minus, -log - 0.5 * c.b0 * c.b0 * br_m, epsilon = 1e-14);
        assert_relative_eq!(plus, log - 0.5 * c.b0 * c.b0 * br_p, epsilon = 1e-14);
        // the bracket is not identically zero: (s − s₀)^{−2β} still varies
        assert!(br_m.abs() > 1e-4 && br_m.abs() < 0.1);
    }

    #[test]
    fn cot_integral_converges_under_refinement() {
        let p = OperatorParams::new(1, 3, 0.8, 0.4).unwrap();
        let m = 12;
        let pm = PI * m as f64;
        let coarse = cot_bracket_integral(&p, 0.3, m, pm - PI / 2.0, pm).unwrap();
        // split at the singular end
        let a = cot_bracket_integral(&p, 0.3, m, pm - PI / 2.0, pm - 1e-3).unwrap();
        let b = cot_bracket_integral(&p, 0.3, m, pm - 1e-3, pm).unwrap();
        assert_relative_eq!(coarse, a + b, epsilon = 1e-10);
        assert!(coarse.is_finite() && coarse != 0.0);
    }

    #[test]
    fn phi_components_signs_and_scaling() {
        let p = model_params();
        let sp = spec();
        let mut c1 = Vec::new();
        let mut c2 = Vec::new();
        for m in [10i64, 20, 40, 80, 160] {
            let pc = phi_components(&p, &sp, None, m).unwrap();
            assert!(pc.phi1 > 0.0, "Φ₁ at m = {m}");
            let mf = m as f64;
            c1.push(pc.phi1 / mf.powf(1.0 - 2.0 * sp.beta));
            c2.push(pc.phi2_minus.abs().max(pc.phi2_plus.abs()) * mf.powf(2.0 * sp.beta));
        }
        let spread = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max) / v.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread(&c1) < 3.0, "{c1:?}");
        assert!(c2.iter().all(|&c| c < 1.0), "{c2:?}");
        let z = phi_components(&p, &PotentialSpec::zero(), None, 10).unwrap();
        assert_eq!((z.phi1, z.phi2_minus, z.phi2_plus), (0.0, 0.0, 0.0));
    }

    #[test]
    fn log_terms_are_negatives_of_each_other() {
        let p = model_params();
        let sp = spec();
        let m = 8;
        let eta = 0.45;
        let minus = adiabatic_phase_increment(&p, &sp, None, m, Side::Minus, eta).unwrap();
        let plus = adiabatic_phase_increment(&p, &sp, None, m, Side::Plus, eta).unwrap();
        let pm = PI * m as f64;
        let c = phase::model_constants(&p, &sp).unwrap();
        let bsq = c.b0 * c.b0;
        let ad = p.adiabatic().unwrap();
        let grid = TurningGrid::new(&p, eta).unwrap();
        let sliver = pm + ad.mu * (-eta * grid.ln_k(m)).exp();
        let rest_m = -0.5 * bsq * cot_bracket_integral(&p, sp.beta, m, pm - PI / 2.0, pm).unwrap();
        let rest_p = -0.5 * bsq * cot_bracket_integral(&p, sp.beta, m, sliver, pm + PI / 2.0).unwrap();
        assert_relative_eq!(minus - rest_m, -(plus - rest_p), max_relative = 1e-13);
    }

    #[test]
    fn mollifier_preserves_affine_functions() {
        let c = mollify_phi3(1.5, 2.7, |_, _| Ok(0.37), 5, -1.0).unwrap();
        assert_relative_eq!(c, 0.37, epsilon = 1e-14);
        let l = mollify_phi3(1.5, 2.7, |_, y| Ok(2.0 - 3.0 * y), 5, -1.0).unwrap();
        assert_relative_eq!(l, 5.0, epsilon = 1e-13);
        assert!(mollify_phi3(3.0, 2.7, |_, _| Ok(0.0), 5, -1.0).is_err());
    }

    #[test]
    fn mollified_derivative_grows_like_lambda1_power() {
        let l1: f64 = 1.6;
        let mut scaled = Vec::new();
        for m in [4i64, 6, 8, 10, 12] {
            let k = l1.powi(m as i32);
            // Φ₃ varying on the kernel scale, the worst case for the bound
            let f = |_: i64, y: f64| Ok((3.0 * k * y).sin() + 0.5 * (7.0 * k * y + 1.0).cos() + y);
            let h = 1e-4 / k;
            let a = mollify_phi3(l1, 2.7, f, m, -1.0 + h).unwrap();
            let b = mollify_phi3(l1, 2.7, f, m, -1.0 - h).unwrap();
            scaled.push(((a - b) / (2.0 * h)).abs() / k);
        }
        let max = scaled.iter().cloned().fold(0.0, f64::max);
        assert!(max < 10.0, "{scaled:?}");
        assert!(scaled.iter().all(|&c| c > 0.1 * max), "{scaled:?}");
    }

    #[test]
    fn identity_connection_gives_pure_rotation() {
        let phis = PhiComponents { phi1: 0.1, phi2_minus: 0.2, phi2_plus: -0.3, phi3_minus: 0.0, phi3_plus: 0.05 };
        let c = ClosedStepCoeffs::new(3, Complex64::new(0.0, 0.0), 1.0, &phis);
        let chi = spinor(0.2, 0.4);
        let out = closed_step(&c, &chi);
        let (lr, ph) = prufer_of(&out);
        assert_relative_eq!(lr, 0.2, epsilon = 1e-15);
        assert_relative_eq!(ph, 0.4 + c.gamma_minus - c.gamma_plus, epsilon = 1e-14);
    }

    #[test]
    fn gamma_assembly_is_linear_in_phi0() {
        let p = model_params();
        let sp = spec();
        let opts = ChainOptions::default();
        let a = closed_step_coeffs(&p, &sp, 9, 0.8, &opts).unwrap();
        let b = closed_step_coeffs(&p, &sp, 9, 1.6, &opts).unwrap();
        assert_relative_eq!(b.gamma_minus - a.gamma_minus, 0.8, epsilon = 1e-14);
        assert_relative_eq!(b.gamma_plus - a.gamma_plus, 0.8, epsilon = 1e-14);
        assert_relative_eq!(a.gamma_minus - a.phi0, a.phi1 + a.phi2_minus + a.phi3_minus, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn closed_step_keeps_conjugate_pairs(
            steps in proptest::collection::vec((0.0..1.5f64, -PI..PI, -10.0..10.0f64, -10.0..10.0f64), 100),
            phi in -PI..PI,
        ) {
            let mut chi = spinor(0.0, phi);
            let mut ln_det = 0.0;
            for (dm, arg, gm, gp) in steps {
                let d = Complex64::from_polar(dm, arg);
                let phis = PhiComponents { phi1: 0.0, phi2_minus: 0.0, phi2_plus: 0.0, phi3_minus: 0.0, phi3_plus: 0.0 };
                let mut c = ClosedStepCoeffs::new(1, d, 0.0, &phis);
                c.gamma_minus = gm;
                c.gamma_plus = gp;
                chi = closed_step(&c, &chi);
                let n = chi[0].norm();
                prop_assert!((chi[1] - chi[0].conj()).norm() <= 1e-12 * n);
                let det = mat2::det(&c.matrix());
                prop_assert!((det - 1.0).norm() < 1e-12);
                ln_det += det.norm().ln();
                // renormalize to keep magnitudes moderate
                chi = [chi[0] / n, chi[1] / n];
            }
            prop_assert!(ln_det.abs() < 1e-10);
        }
    }

    #[test]
    fn transfer_bounds_and_identity() {
        let p = model_params();
        let eta = phase::DEFAULT_ETA;
        let chi = spinor(0.0, 0.7);
        let same = turning_transfer(&p, &PotentialSpec::zero(), 6, eta, &chi).unwrap();
        assert!((same[0] - chi[0]).norm() < 1e-14 && (same[1] - chi[1]).norm() < 1e-14);
        let sp = PotentialSpec::new(3.0, 0.3, 2).unwrap();
        for m in [4i64, 6, 9] {
            let td = phase::turning_data(&p, &sp, m).unwrap();
            let s = turning::connection_matrix(td.d);
            let hi = s.s_entry + s.r_entry.norm();
            for j in 0..6 {
                let c = spinor(0.0, j as f64 * 0.5);
                let out = turning_transfer(&p, &sp, m, eta, &c).unwrap();
                let ratio = mat2::norm2(&out) / mat2::norm2(&c);
                assert!(ratio <= hi * (1.0 + 1e-12) && ratio >= 1.0 / hi * (1.0 - 1e-12), "{ratio} vs {hi}");
            }
        }
    }

    #[test]
    fn transfer_matches_direct_turning_ode() {
        let p = model_params();
        let eta = phase::DEFAULT_ETA;
        for v0 in [0.5, 1.0, 2.0] {
            let sp = PotentialSpec::new(v0, 0.3, 2).unwrap();
            let m = 5;
            let td = phase::turning_data(&p, &sp, m).unwrap();
            assert!(td.d.norm() <= 1.0);
            let ad = p.adiabatic().unwrap();
            let grid = TurningGrid::new(&p, eta).unwrap();
            let ell = 2f64.ln() + 0.5 * ad.mu.ln() + (0.5 - eta) * grid.ln_k(m);
            let conj = turning_conjugator(td.lambda, ell);
            let oracle = turning::ode_connection_oracle(td.d, td.phi0, 30.0, 0.0).unwrap();
            let t = mat2::mul(&conj, &mat2::mul(&oracle, &mat2::inv(&conj)));
            let chi = spinor(0.0, 0.3);
            let want = mat2::apply(&t, &chi);
            let got = turning_transfer(&p, &sp, m, eta, &chi).unwrap();
            let rel = mat2::norm2(&[got[0] - want[0], got[1] - want[1]]) / mat2::norm2(&want);
            assert!(rel < 1e-4, "v0 = {v0}: {rel:e}");
        }
    }

    #[test]
    fn zero_potential_chain_keeps_norm() {
        let p = model_params();
        let out = run_closed_chain(&p, &PotentialSpec::zero(), spinor(0.0, 0.2), 3, 60, &ChainOptions::default()).unwrap();
        assert!(out.iter().all(|r| r.ln_norm.abs() < 1e-13));
    }

    #[test]
    fn chain_lower_envelope() {
        let p = model_params();
        let sp = spec();
        let beta = sp.beta;
        let mut c_fit = 0.0f64;
        for j in 0..4 {
            let out = run_closed_chain(&p, &sp, spinor(0.0, j as f64 * PI / 4.0), 3, 400, &ChainOptions::default())
                .unwrap();
            for w in out.windows(2) {
                let m = w[0].m as f64;
                let drop = 1.0 - (w[1].ln_norm - w[0].ln_norm).exp();
                c_fit = c_fit.max(drop * m.powf(beta));
            }
            let env = out.iter().map(|r| -r.ln_norm / (r.m as f64).powf(1.0 - beta)).fold(f64::MIN, f64::max);
            assert!(env < 1.0, "envelope constant {env}");
        }
        assert!(c_fit < 5.0, "C = {c_fit}");
    }

    #[test]
    fn kappa_zero_stability() {
        let p = OperatorParams::new(1, 1, 0.0, 0.9).unwrap();
        let sp = spec();
        let mut sups = Vec::new();
        for k1 in [64u64, 256, 1024, 4096] {
            let mut sup = 0.0f64;
            for j in 0..4 {
                let r = kappa_zero_check(&p, &sp, k1, 40 * k1, j as f64 * PI / 4.0).unwrap();
                assert!(!r.resonant);
                sup = sup.max(r.sup_log_ratio);
            }
            sups.push(sup);
        }
        assert!(sups.windows(2).all(|w| w[1] < w[0]), "{sups:?}");
        let z = kappa_zero_check(&p, &PotentialSpec::zero(), 10, 100, 0.0).unwrap();
        assert_eq!(z.sup_log_ratio, 0.0);
    }

    #[test]
    fn psi_sq_growth_counts_windows_for_zero_potential() {
        let p = OperatorParams::new(1, 1, 0.0, 0.3).unwrap();
        let g = psi_sq_growth(&p, &PotentialSpec::zero(), 50, 0.2).unwrap();
        let w = PI / p.field;
        for pt in &g {
            assert_relative_eq!(pt.ratio * pt.n.sqrt(), w * pt.k as f64, max_relative = 1e-12);
        }
    }

    #[test]
    fn bridge_rejects_empty_range() {
        assert!(ode_bridge(&params(), &spec(), 30, 30, 1e-6, 0.0).is_err());
        assert!(ode_bridge(&params(), &spec(), 0, 3, 1e-6, 0.0).is_err());
    }
}
