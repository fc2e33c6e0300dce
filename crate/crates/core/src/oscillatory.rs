//! Oscillatory integrals ∫ e^{2iξ}g, the window asymptotics and the
//! double integrals I_l.

use crate::error::{Error, Result};
use crate::phase::{self, GridKind, OperatorParams};
use crate::potential::{PotentialSpec, Smoothing, SynthesizedPotential};
use crate::quad;
use crate::rk::{self, Dopri5Options};
use num_complex::Complex64;
use serde::Serialize;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::RwLock;

const CHEB_NODES: usize = 16;
const SEGMENT_RATIO: f64 = 1.5;

/// ξ on an interval: closed-form leading part plus a piecewise Chebyshev
/// interpolant of the slowly varying remainder.
#[derive(Debug, Clone)]
pub struct PhaseTable {
    params: OperatorParams,
    segments: Vec<(f64, f64, Vec<f64>)>,
}

fn chebyshev_fit(f: impl Fn(f64) -> Result<f64>, a: f64, b: f64) -> Result<Vec<f64>> {
    let n = CHEB_NODES;
    let vals: Vec<f64> = (0..n)
        .map(|j| {
            let t = (PI * (j as f64 + 0.5) / n as f64).cos();
            f(0.5 * (a + b) + 0.5 * (b - a) * t)
        })
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|k| {
            let s: f64 = (0..n)
                .map(|j| vals[j] * (PI * k as f64 * (j as f64 + 0.5) / n as f64).cos())
                .sum();
            s * if k == 0 { 1.0 } else { 2.0 } / n as f64
        })
        .collect())
}

fn clenshaw(c: &[f64], t: f64) -> f64 {
    let (mut b1, mut b2) = (0.0, 0.0);
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * t * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2 + c[0]
}

impl PhaseTable {
    pub fn new(params: &OperatorParams, a: f64, b: f64) -> Result<Self> {
        if !(b > a) {
            return Err(Error::Domain(format!("empty phase interval [{a}, {b}]")));
        }
        phase::momentum(params, a)?;
        let mut segments = Vec::new();
        if params.kappa != 0.0 {
            if a <= 0.0 {
                return Err(Error::Domain("phase table needs a > 0 when kappa > 0".into()));
            }
            let mut lo = a;
            while lo < b {
                let hi = (lo * SEGMENT_RATIO).min(b);
                let c = chebyshev_fit(|x| phase::phase_xi_remainder(params, x), lo, hi)?;
                segments.push((lo, hi, c));
                lo = hi;
            }
        }
        Ok(Self { params: *params, segments })
    }

    pub fn params(&self) -> &OperatorParams {
        &self.params
    }

    pub fn remainder(&self, x: f64) -> f64 {
        if self.segments.is_empty() {
            return 0.0;
        }
        let i = self
            .segments
            .partition_point(|s| s.1 < x)
            .min(self.segments.len() - 1);
        let (lo, hi, c) = &self.segments[i];
        clenshaw(c, ((2.0 * x - lo - hi) / (hi - lo)).clamp(-1.0, 1.0))
    }

    pub fn momentum(&self, x: f64) -> f64 {
        self.params.radicand(x).max(0.0).sqrt()
    }

    fn leading(&self, x: f64) -> f64 {
        let pm = self.momentum(x);
        let f = self.params.field;
        pm * (2.0 / (3.0 * f) * pm * pm - 2.0 * self.params.kappa / f)
    }

    pub fn xi(&self, x: f64) -> f64 {
        self.leading(x) + self.remainder(x)
    }

    /// ξ(y) − ξ(x), with the leading part differenced without cancellation.
    pub fn xi_diff(&self, x: f64, y: f64) -> f64 {
        let pr = &self.params;
        let f = pr.field;
        let (px, py) = (self.momentum(x), self.momentum(y));
        let d_rad = f * (y - x) + 0.5 * pr.kappa * ((y - x) * (y + x) / (1.0 + x * x)).ln_1p();
        let dp = d_rad / (px + py);
        let lead = dp * (2.0 / (3.0 * f) * (py * py + py * px + px * px) - 2.0 * pr.kappa / f);
        lead + (self.remainder(y) - self.remainder(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OscIntegralResult {
    pub value: Complex64,
    pub est_error: f64,
    pub subdivisions: usize,
}

/// Breakpoints on [a, b], each panel spanning at most a quarter oscillation
/// of e^{2iξ}.
fn phase_panels(table: &PhaseTable, a: f64, b: f64) -> Vec<f64> {
    let width = |y: f64| PI / (4.0 * table.momentum(y).max(1e-300));
    let mut br = vec![a];
    let mut y = a;
    while y < b {
        let w0 = width(y);
        y = (y + w0.min(width(y + w0))).min(b);
        br.push(y);
    }
    br
}

/// ∫_a^b e^{2iξ(y)}g(y)dy with a ready phase table.
pub fn osc_integral_with<G: FnMut(f64) -> Complex64>(
    table: &PhaseTable,
    mut g: G,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<OscIntegralResult> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance {tol} must be positive")));
    }
    let breaks = phase_panels(table, a, b);
    let base = Complex64::from_polar(1.0, 2.0 * table.xi(a));
    let res = quad::integrate_panels(
        &mut |y: f64| Complex64::from_polar(1.0, 2.0 * table.xi_diff(a, y)) * g(y),
        &breaks,
        tol,
        0.0,
        breaks.len() * 64 + 1000,
    )?;
    Ok(OscIntegralResult {
        value: base * res.value,
        est_error: res.est_error,
        subdivisions: res.subdivisions,
    })
}

/// ∫_a^b e^{2iξ(y)}g(y)dy on panels no wider than π/(4p).
pub fn osc_integral<G: FnMut(f64) -> Complex64>(
    params: &OperatorParams,
    g: G,
    a: f64,
    b: f64,
    tol: f64,
) -> Result<OscIntegralResult> {
    let table = PhaseTable::new(params, a, b)?;
    osc_integral_with(&table, g, a, b, tol)
}

/// Modes with |n − l| ≤ this are integrated directly in the window oracle.
pub const NEAR_MODES: i64 = 6;
/// Far modes are summed to this index before the alternating-tail correction.
pub const FAR_MODES: i64 = 200_000;

/// ∫ e^{iΦ} ≈ e^{iΦ}(−i/Φ′ − Φ″/Φ′³ + i(3Φ″² − Φ′Φ‴)/Φ′⁵); returns the
/// bracket and the size of its last term.
fn endpoint_bracket(d1: f64, d2: f64, d3: f64) -> (Complex64, f64) {
    let t3 = (3.0 * d2 * d2 - d1 * d3) / d1.powi(5);
    (Complex64::new(-d2 / d1.powi(3), -1.0 / d1 + t3), t3.abs())
}

/// Σ over far modes of v̂(n)e^{−2πinx}·bracket at a half-integer x.
fn far_endpoint_sum(table: &PhaseTable, spec: &PotentialSpec, x: f64, l: i64) -> (Complex64, f64) {
    let p = table.momentum(x);
    let pr = table.params();
    let p1 = (pr.field + pr.log_term_d1(x)) / (2.0 * p);
    let p2 = pr.log_term_d2(x) / (2.0 * p) - p1 * p1 / p;
    let (d2, d3) = (2.0 * p1, 2.0 * p2);
    // e^{−2πinx} = (−1)^n at half-integers
    let mut acc = Complex64::new(0.0, 0.0);
    let mut err = 0.0;
    let term = |n: i64| -> (Complex64, f64) {
        let c = spec.coeff(n);
        let sign = if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
        let (br, e) = endpoint_bracket(2.0 * p - 2.0 * PI * n as f64, d2, d3);
        (c * br * sign, c.norm() * e)
    };
    for n in -FAR_MODES..=FAR_MODES {
        if (n - l).abs() <= NEAR_MODES {
            continue;
        }
        let (t, e) = term(n);
        acc += t;
        err += e;
    }
    for n in [FAR_MODES + 1, -FAR_MODES - 1] {
        let (t, _) = term(n);
        acc += 0.5 * t;
        err += 0.5 * t.norm() / FAR_MODES as f64;
    }
    (Complex64::from_polar(1.0, 2.0 * table.xi(x)) * acc, err)
}

/// The window oracle ∫_{x_l}^{x_{l+1}} e^{2iξ}v for the full Fourier series:
/// near-resonant modes by adaptive quadrature, the rest by their endpoint
/// expansions.
pub fn window_integral_oracle(params: &OperatorParams, spec: &PotentialSpec, l: i64) -> Result<OscIntegralResult> {
    let a = phase::solve_grid(params, GridKind::XLower, l)?;
    let b = phase::solve_grid(params, GridKind::XLower, l + 1)?;
    let table = PhaseTable::new(params, a, b)?;
    window_integral_with(&table, spec, l, a, b)
}

fn window_integral_with(
    table: &PhaseTable,
    spec: &PotentialSpec,
    l: i64,
    a: f64,
    b: f64,
) -> Result<OscIntegralResult> {
    if spec.is_zero() {
        return Ok(OscIntegralResult { value: Complex64::new(0.0, 0.0), est_error: 0.0, subdivisions: 0 });
    }
    // e^{−2πina} = (−1)^n because a is a half-integer
    let modes: Vec<(f64, Complex64)> = ((l - NEAR_MODES)..=(l + NEAR_MODES))
        .map(|n| (n as f64, spec.coeff(n) * if n.rem_euclid(2) == 0 { 1.0 } else { -1.0 }))
        .collect();
    let width = 1.0 / (2.0 * (NEAR_MODES as f64 + 2.0));
    let npan = ((b - a) / width).ceil().max(1.0) as usize;
    let breaks: Vec<f64> = (0..=npan).map(|i| a + (b - a) * i as f64 / npan as f64).collect();
    let near = quad::integrate_panels(
        &mut |y: f64| {
            let rel = 2.0 * table.xi_diff(a, y);
            modes
                .iter()
                .map(|&(n, c)| c * Complex64::from_polar(1.0, rel - 2.0 * PI * n * (y - a)))
                .sum::<Complex64>()
        },
        &breaks,
        1e-12 * npan as f64,
        0.0,
        npan * 16 + 1000,
    )?;
    let near_val = Complex64::from_polar(1.0, 2.0 * table.xi(a)) * near.value;
    let (fb, eb) = far_endpoint_sum(table, spec, b, l);
    let (fa, ea) = far_endpoint_sum(table, spec, a, l);
    Ok(OscIntegralResult {
        value: near_val + fb - fa,
        est_error: near.est_error + eb + ea,
        subdivisions: near.subdivisions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowAsymptotic {
    pub main_term: Complex64,
    pub t_l: Complex64,
    pub t_l_plus_1: Complex64,
    pub omega_l: f64,
}

/// ω_l = −π³l³/(3F) + πl(κ′ ln l + E′) + π/8.
pub fn omega_l(params: &OperatorParams, l: i64) -> f64 {
    let lf = l as f64;
    let log = if params.kappa_prime == 0.0 { 0.0 } else { params.kappa_prime * lf.ln() };
    -PI.powi(3) * lf.powi(3) / (3.0 * params.field) + PI * lf * (log + params.energy_prime) + PI / 8.0
}

/// t_l = e^{2iξ(n)}V(n)/(1 − e^{−2i(ξ(n) − ξ(n−1))}) at n = x_l − 1/2,
/// with V(n) the smooth profile of v̂ at ξ′(n)/π.
pub fn boundary_term(params: &OperatorParams, spec: &PotentialSpec, l: i64) -> Result<Complex64> {
    if spec.is_zero() {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let n = phase::solve_grid(params, GridKind::XLower, l)? - 0.5;
    let x1 = phase::phase_xi(params, n)?;
    let x0 = phase::phase_xi(params, n - 1.0)?;
    let s = phase::momentum(params, n)? / PI;
    let v = if s > 1.0 { spec.profile(s) } else { 0.0 };
    let den = Complex64::new(1.0, 0.0) - Complex64::from_polar(1.0, -2.0 * (x1 - x0));
    Ok(Complex64::from_polar(v, 2.0 * x1) / den)
}

pub fn window_sum_asymptotic(params: &OperatorParams, spec: &PotentialSpec, l: i64) -> Result<WindowAsymptotic> {
    let om = omega_l(params, l);
    let amp = PI * (2.0 * l as f64 / params.field).sqrt();
    Ok(WindowAsymptotic {
        main_term: Complex64::from_polar(amp, 2.0 * om) * spec.coeff(l),
        t_l: boundary_term(params, spec, l)?,
        t_l_plus_1: boundary_term(params, spec, l + 1)?,
        omega_l: om,
    })
}

impl WindowAsymptotic {
    /// main + t_{l+1} − t_l.
    pub fn total(&self) -> Complex64 {
        self.main_term + self.t_l_plus_1 - self.t_l
    }
}

/// Smooth even cutoff: 1 on [−1, 1], 0 outside [−2, 2].
pub fn cutoff(s: f64) -> f64 {
    let h = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    let a = s.abs();
    let up = h(2.0 - a);
    up / (up + h(a - 1.0))
}

/// Modes kept in the cutoff-windowed integral; the smooth cutoff makes the
/// others negligible.
const CUTOFF_MODES: i64 = 40;

/// ‖v‖₁ from a fine smoothed synthesis.
pub fn potential_l1_norm(spec: &PotentialSpec) -> f64 {
    SynthesizedPotential::new(spec, 4096, Smoothing::ValleePoussin).l1_norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowBounds {
    pub lhs_inner: f64,
    pub lhs_outer: f64,
    pub rhs_inner: f64,
    pub rhs_outer: f64,
}

/// Both sides of the cutoff-split window bounds with c = 1, for ratio
/// diagnostics: |∫χ_l e^{2iξ}v| against l^{1/2}|v̂_l| + ‖v‖₁ and the
/// complement against l^ν|v̂_l| + ‖v‖₁.
pub fn window_bounds(params: &OperatorParams, spec: &PotentialSpec, l: i64, nu: f64) -> Result<WindowBounds> {
    if !(nu > 0.0 && nu < 0.5) {
        return Err(Error::Domain(format!("nu = {nu} outside (0, 1/2)")));
    }
    if spec.is_zero() {
        return Ok(WindowBounds { lhs_inner: 0.0, lhs_outer: 0.0, rhs_inner: 0.0, rhs_outer: 0.0 });
    }
    let a = phase::solve_grid(params, GridKind::XLower, l)?;
    let b = phase::solve_grid(params, GridKind::XLower, l + 1)?;
    let xl = phase::solve_grid(params, GridKind::XUpper, l)?;
    let lf = l as f64;
    let scale = lf.powf(1.0 - nu);
    let (lo, hi) = ((xl - 2.0 * scale).max(a), (xl + 2.0 * scale).min(b));
    let table = PhaseTable::new(params, a, b)?;
    let modes: Vec<(f64, Complex64)> = ((l - CUTOFF_MODES)..=(l + CUTOFF_MODES))
        .map(|n| (n as f64, spec.coeff(n)))
        .collect();
    let width = 1.0 / (2.0 * (CUTOFF_MODES as f64 + 2.0));
    let npan = ((hi - lo) / width).ceil().max(1.0) as usize;
    let breaks: Vec<f64> = (0..=npan).map(|i| lo + (hi - lo) * i as f64 / npan as f64).collect();
    let inner = quad::integrate_panels(
        &mut |y: f64| {
            let rel = 2.0 * table.xi_diff(a, y);
            let chi = cutoff((y - xl) / scale);
            modes
                .iter()
                .map(|&(n, c)| c * Complex64::from_polar(chi, rel - 2.0 * PI * n * y))
                .sum::<Complex64>()
        },
        &breaks,
        1e-8,
        0.0,
        npan * 16 + 1000,
    )?;
    let inner = Complex64::from_polar(1.0, 2.0 * table.xi(a)) * inner.value;
    let full = window_integral_with(&table, spec, l, a, b)?.value;
    let vl = spec.coeff(l).norm();
    let l1 = potential_l1_norm(spec);
    Ok(WindowBounds {
        lhs_inner: inner.norm(),
        lhs_outer: (full - inner).norm(),
        rhs_inner: lf.sqrt() * vl + l1,
        rhs_outer: lf.powf(nu) * vl + l1,
    })
}

/// Fourier modes of the smoothed synthesis used by the I_l oracle.
pub const DEFAULT_ORACLE_MODES: u64 = 128;

/// Shared state for the double-integral oracle: a tabulated truncated
/// potential and memoized I_l values.
#[derive(Debug)]
pub struct OracleContext {
    params: OperatorParams,
    spec: PotentialSpec,
    potential: SynthesizedPotential,
    cache: RwLock<HashMap<i64, Complex64>>,
}

impl OracleContext {
    pub fn new(params: &OperatorParams, spec: &PotentialSpec, modes: u64) -> Self {
        Self {
            params: *params,
            spec: spec.clone(),
            potential: SynthesizedPotential::new(spec, modes, Smoothing::ValleePoussin),
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn params(&self) -> &OperatorParams {
        &self.params
    }

    pub fn spec(&self) -> &PotentialSpec {
        &self.spec
    }

    pub fn potential(&self) -> &SynthesizedPotential {
        &self.potential
    }

    /// Highest frequency (in 2π units) present in the synthesis.
    pub fn max_mode(&self) -> f64 {
        self.potential.modes() as f64
    }

    /// I_l = ∫_{x_l}^{x_{l+1}}dy ∫_y^{x_{l+1}}ds e^{2i(ξ(s)−ξ(y))}v(s)v(y).
    pub fn i_l(&self, l: i64) -> Result<Complex64> {
        if let Some(v) = self.cache.read().expect("oracle cache poisoned").get(&l) {
            return Ok(*v);
        }
        let v = self.compute_i_l(l)?;
        self.cache.write().expect("oracle cache poisoned").insert(l, v);
        Ok(v)
    }

    fn compute_i_l(&self, l: i64) -> Result<Complex64> {
        if self.spec.is_zero() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let a = phase::solve_grid(&self.params, GridKind::XLower, l)?;
        let b = phase::solve_grid(&self.params, GridKind::XLower, l + 1)?;
        let table = PhaseTable::new(&self.params, a, b)?;
        let pot = &self.potential;
        let fast = 4.0 * PI * self.max_mode();
        let opts = Dopri5Options { rtol: 1e-9, atol: 1e-11, ..Default::default() };
        // C(y) = ∫_y^b e^{2iξ_rel}v, I(y) = ∫_y^b v e^{−2iξ_rel}C, integrated from b down to a
        let (fin, _) = rk::solve(
            |y, s: &[f64; 4], out: &mut [f64; 4]| {
                let e = Complex64::from_polar(1.0, 2.0 * table.xi_diff(a, y));
                let v = pot.value(y);
                let c = Complex64::new(s[0], s[1]);
                let dc = -e * v;
                let di = -e.conj() * c * v;
                *out = [dc.re, dc.im, di.re, di.im];
            },
            b,
            [0.0; 4],
            a,
            &opts,
            |y| 1.0 / (2.0 * table.momentum(y) + fast),
            &[],
            |_, _, _| {},
        )?;
        Ok(Complex64::new(fin[2], fin[3]))
    }

    /// ∫_{x_l}^{x_{l+1}} e^{2iξ}v for the tabulated potential.
    pub fn window_integral(&self, l: i64, tol: f64) -> Result<OscIntegralResult> {
        let a = phase::solve_grid(&self.params, GridKind::XLower, l)?;
        let b = phase::solve_grid(&self.params, GridKind::XLower, l + 1)?;
        let table = PhaseTable::new(&self.params, a, b)?;
        // the interpolant is a cubic on each tabulation cell, so panels
        // start and end on cell edges
        let breaks = {
            let g = self.potential.grid_len() as f64;
            let w = 1.0 / (4.0 * self.max_mode() + 4.0 * table.momentum(b) / PI);
            let mut br = vec![a];
            let mut edge = (a * g).floor() + 1.0;
            loop {
                let next = (edge / g).min(b);
                let from = *br.last().expect("non-empty");
                let n = ((next - from) / w).ceil().max(1.0) as usize;
                br.extend((1..=n).map(|i| from + (next - from) * i as f64 / n as f64));
                if next >= b {
                    break;
                }
                edge += 1.0;
            }
            br
        };
        let res = quad::integrate_panels(
            &mut |y: f64| Complex64::from_polar(self.potential.value(y), 2.0 * table.xi_diff(a, y)),
            &breaks,
            tol,
            0.0,
            breaks.len() * 16 + 1000,
        )?;
        Ok(OscIntegralResult {
            value: Complex64::from_polar(1.0, 2.0 * table.xi(a)) * res.value,
            est_error: res.est_error,
            subdivisions: res.subdivisions,
        })
    }
}

/// I_l with a default-resolution synthesis of v.
pub fn i_l_oracle(params: &OperatorParams, spec: &PotentialSpec, l: i64) -> Result<Complex64> {
    OracleContext::new(params, spec, DEFAULT_ORACLE_MODES).i_l(l)
}

/// |v̂(l)|²π²l/F.
pub fn i_l_leading(params: &OperatorParams, spec: &PotentialSpec, l: i64) -> f64 {
    spec.coeff(l).norm_sqr() * PI * PI * l as f64 / params.field
}

/// Im 𝓘̃_k = Σ_{l=kq}^{(k+1)q−1} Im I_l / (4π²q²k²).
pub fn im_i_tilde(ctx: &OracleContext, k: i64) -> Result<f64> {
    let q = ctx.params.q() as i64;
    let mut s = 0.0;
    for l in k * q..(k + 1) * q {
        s += ctx.i_l(l)?.im;
    }
    Ok(s / (4.0 * PI * PI * (q * q * k * k) as f64))
}
