//! Direct integration of the Prüfer system for (ln R, θ) on the right
//! half-line.
//!
//! The fast part of θ is carried by ξ, so the integrated angle is the slow
//! phase φ = θ − ξ. Running integrals of ψ² = p⁻¹R² sin²θ and of p⁻¹R²
//! are accumulated by the same stepper.

use crate::error::{Error, Result};
use crate::oscillatory::{PhaseTable, DEFAULT_ORACLE_MODES};
use crate::phase::{self, GridKind, OperatorParams};
use crate::potential::{PotentialSpec, Smoothing, SynthesizedPotential};
use crate::rk::{self, Dopri5Options};
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PruferState {
    pub ln_r: f64,
    pub theta: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySample {
    pub x: f64,
    pub state: PruferState,
    pub psi_sq_integral: f64,
    pub p_inv_r_sq_integral: f64,
}

impl PruferState {
    /// State with the given amplitude and full angle at x.
    pub fn at(params: &OperatorParams, x: f64, ln_r: f64, theta: f64) -> Result<Self> {
        Ok(Self { ln_r, theta, phi: theta - phase::phase_xi(params, x)? })
    }
}

/// V = v/p + ¼q″p⁻³ − (5/16)(F + q′)²p⁻⁵ for a given value v(x).
pub fn effective_potential_at(params: &OperatorParams, v: f64, x: f64) -> Result<f64> {
    let p = phase::momentum(params, x)?;
    Ok(effective_from_momentum(params, v, x, p))
}

fn effective_from_momentum(params: &OperatorParams, v: f64, x: f64, p: f64) -> f64 {
    let fq = params.field + params.log_term_d1(x);
    let p2 = p * p;
    v / p + 0.25 * params.log_term_d2(x) / (p2 * p) - 5.0 / 16.0 * fq * fq / (p2 * p2 * p)
}

/// V(x) with v synthesized from the default truncation of `spec`.
pub fn effective_potential(params: &OperatorParams, spec: &PotentialSpec, x: f64) -> Result<f64> {
    let v = crate::potential::eval_potential(spec, x, DEFAULT_ORACLE_MODES, Smoothing::ValleePoussin);
    effective_potential_at(params, v, x)
}

/// The Prüfer system for one operator and one tabulated potential.
#[derive(Debug, Clone)]
pub struct PruferSystem {
    params: OperatorParams,
    potential: SynthesizedPotential,
}

impl PruferSystem {
    pub fn new(params: &OperatorParams, potential: SynthesizedPotential) -> Self {
        Self { params: *params, potential }
    }

    pub fn from_spec(params: &OperatorParams, spec: &PotentialSpec) -> Self {
        Self::new(params, SynthesizedPotential::new(spec, DEFAULT_ORACLE_MODES, Smoothing::ValleePoussin))
    }

    pub fn params(&self) -> &OperatorParams {
        &self.params
    }

    pub fn potential(&self) -> &SynthesizedPotential {
        &self.potential
    }

    /// Integrates from x0 to x1 (either direction) and reports the state
    /// at each entry of `samples`, which must be ordered along the
    /// direction of integration. The endpoint x1 is always appended.
    /// `tol` bounds the accumulated error, not the per-step error.
    pub fn integrate(
        &self,
        x0: f64,
        x1: f64,
        init: PruferState,
        tol: f64,
        samples: &[f64],
    ) -> Result<Vec<TrajectorySample>> {
        let pot = &self.potential;
        let fast = 2.0 * PI * pot.modes() as f64;
        let params = &self.params;
        let veff = |x: f64, p: f64| effective_from_momentum(params, pot.value(x), x, p);
        integrate_with(params, veff, fast, x0, x1, init, tol, samples)
    }
}

/// Core integrator for an arbitrary effective potential V(x, p); `fast`
/// is the largest angular frequency present in V.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with<G: Fn(f64, f64) -> f64>(
    params: &OperatorParams,
    veff: G,
    fast: f64,
    x0: f64,
    x1: f64,
    init: PruferState,
    tol: f64,
    samples: &[f64],
) -> Result<Vec<TrajectorySample>> {
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tol = {tol} must be positive")));
    }
    let (lo, hi) = if x0 <= x1 { (x0, x1) } else { (x1, x0) };
    let table = PhaseTable::new(params, lo, hi.max(lo * (1.0 + 1e-12) + 1e-12))?;
    let xi0 = table.xi(x0);
    // φ is carried relative to the table anchor at x0
    let theta0 = init.phi + phase::phase_xi(params, x0)?;
    let dir = if x1 >= x0 { 1.0 } else { -1.0 };
    if samples.windows(2).any(|w| (w[1] - w[0]) * dir < 0.0) {
        return Err(Error::Domain("samples must follow the direction of integration".into()));
    }
    if samples.iter().any(|&s| (s - lo) < 0.0 || (s - hi) > 0.0) {
        return Err(Error::Domain("sample outside the integration interval".into()));
    }
    let mut pts = samples.to_vec();
    if pts.last() != Some(&x1) {
        pts.push(x1);
    }
    // local errors add up over roughly one step per radian of phase
    let steps = (table.xi_diff(lo, hi) + fast * (hi - lo)).max(1.0);
    let local = (tol / steps).max(1e-15);
    let opts = Dopri5Options { rtol: local, atol: local, ..Default::default() };
    let mut out = Vec::with_capacity(pts.len());
    let y0 = [init.ln_r, theta0 - xi0, 0.0, 0.0];
    rk::solve(
        |x, s: &[f64; 4], d: &mut [f64; 4]| {
            let p = table.momentum(x);
            let vv = veff(x, p);
            let th = s[1] + table.xi_diff(x0, x) + xi0;
            let (sn, cs) = th.sin_cos();
            let r2 = (2.0 * s[0]).exp() / p;
            *d = [vv * sn * cs, -vv * sn * sn, r2 * sn * sn, r2];
        },
        x0,
        y0,
        x1,
        &opts,
        |x| 1.0 / (2.0 * table.momentum(x) + fast),
        &pts,
        |_, x, s| {
            let theta = s[1] + table.xi_diff(x0, x) + xi0;
            let xi_abs = phase::phase_xi(params, x).unwrap_or(table.xi(x));
            out.push(TrajectorySample {
                x,
                state: PruferState { ln_r: s[0], theta, phi: theta - xi_abs },
                psi_sq_integral: s[2],
                p_inv_r_sq_integral: s[3],
            });
        },
    )?;
    Ok(out)
}

/// Integrates with the default truncation of `spec`.
pub fn integrate_prufer(
    params: &OperatorParams,
    spec: &PotentialSpec,
    x0: f64,
    x1: f64,
    init: PruferState,
    tol: f64,
    samples: &[f64],
) -> Result<Vec<TrajectorySample>> {
    PruferSystem::from_spec(params, spec).integrate(x0, x1, init, tol, samples)
}

/// The window [x_l, x_{l+1}] sampled at `n` interior points plus ends.
pub fn window_samples(params: &OperatorParams, l: i64, n: usize) -> Result<Vec<f64>> {
    let a = phase::solve_grid(params, GridKind::XLower, l)?;
    let b = phase::solve_grid(params, GridKind::XLower, l + 1)?;
    Ok((0..=n + 1).map(|i| a + (b - a) * i as f64 / (n + 1) as f64).collect())
}

/// sup over samples in [x_l, x_{l+1}] of |ln R(x) − ln R(x_l)|.
pub fn ln_r_window_increment(params: &OperatorParams, trajectory: &[TrajectorySample], l: i64) -> Result<f64> {
    let a = phase::solve_grid(params, GridKind::XLower, l)?;
    let b = phase::solve_grid(params, GridKind::XLower, l + 1)?;
    let eps = 1e-9 * b;
    let base = trajectory
        .iter()
        .find(|s| (s.x - a).abs() <= eps)
        .ok_or_else(|| Error::Domain(format!("trajectory has no sample at x_{l} = {a}")))?;
    if !trajectory.iter().any(|s| (s.x - b).abs() <= eps) {
        return Err(Error::Domain(format!("trajectory does not reach x_{} = {b}", l + 1)));
    }
    Ok(trajectory
        .iter()
        .filter(|s| s.x >= a - eps && s.x <= b + eps)
        .map(|s| (s.state.ln_r - base.state.ln_r).abs())
        .fold(0.0, f64::max))
}

/// R₀R₁ sin(θ₀ − θ₁), the Wronskian of two solutions in Prüfer form.
pub fn prufer_wronskian(a: &PruferState, b: &PruferState) -> f64 {
    (a.ln_r + b.ln_r).exp() * (a.phi - b.phi).sin()
}
