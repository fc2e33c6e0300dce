//! The model system χ(m+1) = 𝓐₀(m)χ(m) in Prüfer form, together with the
//! Lyapunov, decaying-solution, subordinacy and mixing diagnostics built
//! on it.
//!
//! Every run at fixed ρ shares its coefficient stream across initial
//! phases; the spinor is carried in double-double alongside the Prüfer
//! pair so that Wronskians survive exponential growth.

use crate::dd::{self, Cdd};
use crate::discrete::{self, ChainOptions, ClosedStepCoeffs, Phi3Mode};
use crate::error::{Error, Result};
use crate::hp::GeometricSequence;
use crate::mat2::Vec2;
use crate::phase::{self, OperatorParams};
use crate::potential::{gauss_sum_w, PotentialSpec};
use crate::stats;
use num_complex::{Complex, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const PLATEAU_WINDOW: usize = 16;
pub const PLATEAU_TOL: f64 = 1e-8;

/// Initial phases used wherever "every α" is sampled.
pub const ALPHA_GRID: [f64; 4] = [0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRunConfig {
    pub alpha: f64,
    pub rho: f64,
    pub m0: i64,
    pub m_max: i64,
    #[serde(default)]
    pub phi3: Phi3Mode,
}

impl ModelRunConfig {
    pub fn new(alpha: f64, rho: f64, m0: i64, m_max: i64) -> Self {
        Self { alpha, rho, m0, m_max, phi3: Phi3Mode::Zero }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..PI).contains(&self.alpha) {
            return Err(Error::Domain(format!("alpha = {} outside [0, π)", self.alpha)));
        }
        if !self.rho.is_finite() {
            return Err(Error::Domain("rho must be finite".into()));
        }
        check_range(self.m0, self.m_max)
    }
}

fn check_range(m0: i64, m_max: i64) -> Result<()> {
    if m0 < 2 {
        return Err(Error::Domain(format!("M0 = {m0} must be at least 2")));
    }
    if m_max <= m0 {
        return Err(Error::Domain(format!("M_max = {m_max} must exceed M0 = {m0}")));
    }
    Ok(())
}

/// Prüfer state (ln R, φ) of χ = R e^{iφσ₃}(1, 1)ᵀ with ζ = e^{2iφ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelState {
    pub ln_r: f64,
    /// φ reduced into [0, 2π).
    pub phi: f64,
    pub zeta: Complex64,
}

impl ModelState {
    pub fn initial(alpha: f64) -> Self {
        Self { ln_r: 0.0, phi: alpha.rem_euclid(2.0 * PI), zeta: Complex64::from_polar(1.0, 2.0 * alpha) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelTrajectory {
    pub rho: f64,
    pub alpha: f64,
    pub beta: f64,
    pub m0: i64,
    pub ln_r: Vec<f64>,
    pub phi: Vec<f64>,
    pub zeta: Vec<Complex64>,
    pub sigma1_partial: Vec<Complex64>,
    pub sigma2_partial: Vec<Complex64>,
    pub n_partial: Vec<f64>,
    #[serde(skip)]
    pub spinor: Option<Vec<Vec2>>,
}

impl ModelTrajectory {
    pub fn len(&self) -> usize {
        self.ln_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ln_r.is_empty()
    }

    pub fn m_at(&self, i: usize) -> i64 {
        self.m0 + i as i64
    }

    pub fn m_max(&self) -> i64 {
        self.m0 + self.len() as i64 - 1
    }
}

/// One step of R and ζ:
/// R(m+1)/R(m) = |s + re^{2iΓ₋}ζ|,
/// ζ(m+1)/ζ(m) = e^{2iΔΓ}(s + r̄ζ̄e^{−2iΓ₋})/(s + rζe^{2iΓ₋}),
/// with φ advanced by ΔΓ + arg(s + r̄ζ̄e^{−2iΓ₋}).
pub fn model_step(c: &ClosedStepCoeffs, st: &ModelState) -> Result<ModelState> {
    let s = c.s.s_entry;
    let r = c.s.r_entry;
    if !(s > r.norm()) {
        return Err(Error::Degenerate(format!("s = {s} does not dominate |r| = {} at m = {}", r.norm(), c.m)));
    }
    let den = s + r * Complex64::from_polar(1.0, 2.0 * c.gamma_minus) * st.zeta;
    let num = den.conj();
    let dg = c.gamma_minus - c.gamma_plus;
    let z = Complex64::from_polar(1.0, 2.0 * dg) * st.zeta * num / den;
    Ok(ModelState {
        ln_r: st.ln_r + den.norm().ln(),
        phi: (st.phi + dg + num.arg()).rem_euclid(2.0 * PI),
        zeta: z / z.norm(),
    })
}

fn cdd_real(x: f64) -> Cdd {
    Complex::new(dd::dd(x), dd::dd(0.0))
}

fn spinor_dd(alpha: f64) -> [Cdd; 2] {
    let e = dd::unit(alpha);
    [e, e.conj()]
}

/// The closed step applied to a double-double spinor.
pub fn closed_step_dd(c: &ClosedStepCoeffs, chi: &[Cdd; 2]) -> [Cdd; 2] {
    let gm = dd::unit(c.gamma_minus);
    let gp = dd::unit(c.gamma_plus);
    let u0 = gm * chi[0];
    let u1 = gm.conj() * chi[1];
    let s = Complex::new(c.s.s_dd, dd::dd(0.0));
    let r = c.s.r_dd;
    let v0 = s * u0 + r.conj() * u1;
    let v1 = r * u0 + s * u1;
    [gp.conj() * v0, gp * v1]
}

fn to_vec2(chi: &[Cdd; 2]) -> Vec2 {
    [dd::to_c64(chi[0]), dd::to_c64(chi[1])]
}

fn det_dd(a: &[Cdd; 2], b: &[Cdd; 2]) -> Complex64 {
    dd::to_c64(a[0] * b[1] - a[1] * b[0])
}

fn rho_params(params: &OperatorParams, rho: f64) -> Result<OperatorParams> {
    OperatorParams::from_rho(params.p(), params.q(), params.kappa, rho)
}

/// Closed-step coefficients for m ∈ [m0, m_max] at spectral parameter ρ,
/// with ρΛ^m reduced exactly modulo 2π.
pub fn model_coefficients(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rho: f64,
    m0: i64,
    m_max: i64,
    phi3: Phi3Mode,
) -> Result<Vec<ClosedStepCoeffs>> {
    check_range(m0, m_max)?;
    let pr = rho_params(params, rho)?;
    let ad = pr.adiabatic()?;
    let opts = ChainOptions { phi3, lambda1: None };
    let mut seq = GeometricSequence::new(ad.ln_lambda, m_max as u64, 2);
    seq.seek(m0 as u64);
    let mut out = Vec::with_capacity((m_max - m0 + 1) as usize);
    for m in m0..=m_max {
        out.push(discrete::closed_step_coeffs(&pr, spec, m, seq.phase(ad.rho), &opts)?);
        seq.advance();
    }
    Ok(out)
}

struct Lane {
    state: ModelState,
    chi: [Cdd; 2],
    ln_r: Vec<f64>,
    phi: Vec<f64>,
    zeta: Vec<Complex64>,
    chis: Option<Vec<[Cdd; 2]>>,
}

struct Sweep {
    params: OperatorParams,
    gamma_minus: Vec<f64>,
    w: Vec<Complex64>,
    lanes: Vec<Lane>,
}

fn sweep(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rho: f64,
    alphas: &[f64],
    m0: i64,
    m_max: i64,
    phi3: Phi3Mode,
    keep_spinor: bool,
) -> Result<Sweep> {
    check_range(m0, m_max)?;
    let pr = rho_params(params, rho)?;
    let ad = pr.adiabatic()?;
    let opts = ChainOptions { phi3, lambda1: None };
    let len = (m_max - m0 + 1) as usize;
    let mut seq = GeometricSequence::new(ad.ln_lambda, m_max as u64, 2);
    seq.seek(m0 as u64);
    let mut lanes: Vec<Lane> = alphas
        .iter()
        .map(|&a| Lane {
            state: ModelState::initial(a),
            chi: spinor_dd(a),
            ln_r: Vec::with_capacity(len),
            phi: Vec::with_capacity(len),
            zeta: Vec::with_capacity(len),
            chis: keep_spinor.then(|| Vec::with_capacity(len)),
        })
        .collect();
    let mut gamma_minus = Vec::with_capacity(len);
    let mut w = Vec::with_capacity(len);
    for m in m0..=m_max {
        let c = discrete::closed_step_coeffs(&pr, spec, m, seq.phase(ad.rho), &opts)?;
        gamma_minus.push(c.gamma_minus);
        w.push(gauss_sum_w(&pr.gauss, PI * m as f64));
        for lane in lanes.iter_mut() {
            lane.ln_r.push(lane.state.ln_r);
            lane.phi.push(lane.state.phi);
            lane.zeta.push(lane.state.zeta);
            if let Some(h) = lane.chis.as_mut() {
                h.push(lane.chi);
            }
            if m < m_max {
                lane.state = model_step(&c, &lane.state)?;
                lane.chi = closed_step_dd(&c, &lane.chi);
            }
        }
        seq.advance();
    }
    Ok(Sweep { params: pr, gamma_minus, w, lanes })
}

/// Partial sums Σ₁(M) = Σ m^{−β}w(πm)e^{2iΓ₋}ζ and
/// Σ₂(M) = Σ m^{−2β}w²(πm)e^{4iΓ₋}ζ², both from m0.
pub fn partial_sums(
    m0: i64,
    beta: f64,
    gamma_minus: &[f64],
    w: &[Complex64],
    zeta: &[Complex64],
) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut s1 = Complex64::new(0.0, 0.0);
    let mut s2 = Complex64::new(0.0, 0.0);
    let mut out1 = Vec::with_capacity(zeta.len());
    let mut out2 = Vec::with_capacity(zeta.len());
    for (i, ((&g, &wm), &z)) in gamma_minus.iter().zip(w).zip(zeta).enumerate() {
        let m = (m0 + i as i64) as f64;
        let t = wm * Complex64::from_polar(1.0, 2.0 * g) * z;
        s1 += m.powf(-beta) * t;
        s2 += m.powf(-2.0 * beta) * t * t;
        out1.push(s1);
        out2.push(s2);
    }
    (out1, out2)
}

/// n(M) = Σ_{m=1}^{M} m^{−2β}|w(πm)|² for M ∈ [m0, m_max].
pub fn n_partial(params: &OperatorParams, beta: f64, m0: i64, m_max: i64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity((m_max - m0 + 1).max(0) as usize);
    for m in 1..=m_max {
        let mf = m as f64;
        acc += mf.powf(-2.0 * beta) * gauss_sum_w(&params.gauss, PI * mf).norm_sqr();
        if m >= m0 {
            out.push(acc);
        }
    }
    out
}

fn assemble(
    sw: &Sweep,
    n: &[f64],
    rho: f64,
    alpha: f64,
    beta: f64,
    m0: i64,
    ln_r: Vec<f64>,
    phi: Vec<f64>,
    zeta: Vec<Complex64>,
    spinor: Option<Vec<Vec2>>,
) -> ModelTrajectory {
    let (sigma1_partial, sigma2_partial) = partial_sums(m0, beta, &sw.gamma_minus, &sw.w, &zeta);
    ModelTrajectory {
        rho,
        alpha,
        beta,
        m0,
        ln_r,
        phi,
        zeta,
        sigma1_partial,
        sigma2_partial,
        n_partial: n.to_vec(),
        spinor,
    }
}

/// Runs several initial phases at one ρ on a shared coefficient stream.
pub fn run_model_alphas(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rho: f64,
    alphas: &[f64],
    m0: i64,
    m_max: i64,
    phi3: Phi3Mode,
    keep_spinor: bool,
) -> Result<Vec<ModelTrajectory>> {
    let sw = sweep(params, spec, rho, alphas, m0, m_max, phi3, keep_spinor)?;
    let n = n_partial(&sw.params, spec.beta, m0, m_max);
    Ok(sw
        .lanes
        .iter()
        .zip(alphas)
        .map(|(lane, &a)| {
            let sp = lane.chis.as_ref().map(|h| h.iter().map(to_vec2).collect());
            assemble(&sw, &n, rho, a, spec.beta, m0, lane.ln_r.clone(), lane.phi.clone(), lane.zeta.clone(), sp)
        })
        .collect())
}

pub fn run_model(config: &ModelRunConfig, params: &OperatorParams, spec: &PotentialSpec) -> Result<ModelTrajectory> {
    config.validate()?;
    let mut v = run_model_alphas(params, spec, config.rho, &[config.alpha], config.m0, config.m_max, config.phi3, false)?;
    Ok(v.remove(0))
}

/// Stratified midpoints in [lo, lo + 1).
pub fn stratified_rhos(lo: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| lo + (j as f64 + 0.5) / n as f64).collect()
}

/// Least-squares slope of ln R against m^{1−2β} over the last half.
pub fn lyapunov_slope(traj: &ModelTrajectory) -> Result<f64> {
    let start = traj.len() / 2;
    let e = 1.0 - 2.0 * traj.beta;
    let x: Vec<f64> = (start..traj.len()).map(|i| (traj.m_at(i) as f64).powf(e)).collect();
    Ok(stats::linear_fit(&x, &traj.ln_r[start..])?.slope)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovFit {
    pub samples: usize,
    pub slope_median: f64,
    pub slope_iqr: f64,
    pub r_star: f64,
}

pub const MIN_LYAPUNOV_SAMPLES: usize = 16;

pub fn summarize_slopes(slopes: &[f64], r_star: f64) -> Result<LyapunovFit> {
    if slopes.len() < MIN_LYAPUNOV_SAMPLES {
        return Err(Error::InsufficientSamples { need: MIN_LYAPUNOV_SAMPLES, got: slopes.len() });
    }
    Ok(LyapunovFit {
        samples: slopes.len(),
        slope_median: stats::median(slopes)?,
        slope_iqr: stats::iqr(slopes)?,
        r_star,
    })
}

pub fn lyapunov_fit(trajs: &[ModelTrajectory], params: &OperatorParams, spec: &PotentialSpec) -> Result<LyapunovFit> {
    let slopes = trajs.iter().map(lyapunov_slope).collect::<Result<Vec<_>>>()?;
    summarize_slopes(&slopes, phase::model_constants(params, spec)?.r_star)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovScan {
    pub fit: LyapunovFit,
    /// Median slope for each α of the grid.
    pub per_alpha: Vec<(f64, f64)>,
    /// Slopes indexed [ρ][α].
    pub slopes: Vec<Vec<f64>>,
    pub rhos: Vec<f64>,
}

/// Slopes for every (ρ, α), computed in parallel without keeping the
/// trajectories.
pub fn lyapunov_scan(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rhos: &[f64],
    alphas: &[f64],
    m0: i64,
    m_max: i64,
) -> Result<LyapunovScan> {
    let slopes: Vec<Vec<f64>> = rhos
        .par_iter()
        .map(|&rho| {
            run_model_alphas(params, spec, rho, alphas, m0, m_max, Phi3Mode::Zero, false)?
                .iter()
                .map(lyapunov_slope)
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = slopes.iter().flatten().copied().collect();
    let fit = summarize_slopes(&flat, phase::model_constants(params, spec)?.r_star)?;
    let per_alpha = alphas
        .iter()
        .enumerate()
        .map(|(j, &a)| Ok((a, stats::median(&slopes.iter().map(|s| s[j]).collect::<Vec<_>>())?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(LyapunovScan { fit, per_alpha, slopes, rhos: rhos.to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallnessRow {
    pub m: i64,
    pub threshold: f64,
    pub exceed_fraction: f64,
    pub median_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmallnessStats {
    pub eps0: f64,
    pub samples: usize,
    pub rows: Vec<SmallnessRow>,
}

/// Fractions of ρ samples with |Σ₂(M)| ≥ M^{1−2β−ε₀} and the median of
/// |Σ₂(M)|/n(M), for every M in `ms`.
pub fn sum_smallness_stats(
    params: &OperatorParams,
    spec: &PotentialSpec,
    ms: &[i64],
    rhos: &[f64],
    eps0: f64,
    m0: i64,
) -> Result<SmallnessStats> {
    let m_max = *ms.iter().max().ok_or_else(|| Error::Domain("empty M list".into()))?;
    if ms.iter().any(|&m| m < m0) {
        return Err(Error::Domain(format!("every M must be at least M0 = {m0}")));
    }
    let per_rho: Vec<Vec<(f64, f64)>> = rhos
        .par_iter()
        .map(|&rho| {
            let t = run_model_alphas(params, spec, rho, &[0.0], m0, m_max, Phi3Mode::Zero, false)?.remove(0);
            Ok(ms
                .iter()
                .map(|&m| {
                    let i = (m - m0) as usize;
                    (t.sigma2_partial[i].norm(), t.n_partial[i])
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows = ms
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let threshold = (m as f64).powf(1.0 - 2.0 * spec.beta - eps0);
            let exceed = per_rho.iter().filter(|v| v[j].0 >= threshold).count();
            let ratios: Vec<f64> = per_rho.iter().map(|v| v[j].0 / v[j].1).collect();
            Ok(SmallnessRow {
                m,
                threshold,
                exceed_fraction: exceed as f64 / rhos.len().max(1) as f64,
                median_ratio: stats::median(&ratios)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SmallnessStats { eps0, samples: rhos.len(), rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayingSolution {
    pub h: f64,
    /// |Im(−z∞e^{v∞})|.
    pub h_imag_residue: f64,
    pub v_inf: f64,
    pub z_inf: Complex64,
    pub z_inf_sq_residual: f64,
    pub plateau_start: i64,
    /// max_m |det(χ₀, χ_{π/2}) + 2i|.
    pub wronskian_deviation: f64,
    pub chi0: ModelTrajectory,
    pub chi_half: ModelTrajectory,
    pub traj_d: ModelTrajectory,
}

/// First index from which `PLATEAU_WINDOW` successive differences of v and
/// z stay below `PLATEAU_TOL`.
fn plateau_start(v: &[f64], z: &[Complex64]) -> Option<usize> {
    let mut run = 0usize;
    for i in 1..v.len() {
        if (v[i] - v[i - 1]).abs() < PLATEAU_TOL && (z[i] - z[i - 1]).norm() < PLATEAU_TOL {
            run += 1;
            if run >= PLATEAU_WINDOW {
                return Some(i - PLATEAU_WINDOW);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// χ^d = χ₀ + hχ_{π/2} with h = −z∞e^{v∞}.
pub fn decaying_solution(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rho: f64,
    m0: i64,
    m_max: i64,
) -> Result<DecayingSolution> {
    let sw = sweep(params, spec, rho, &[0.0, PI / 2.0], m0, m_max, Phi3Mode::Zero, true)?;
    decaying_from(&sw, 0, 1, spec, rho, m0, m_max)
}

/// The decaying combination of lanes `ia` (α = 0) and `ib` (α = π/2).
fn decaying_from(
    sw: &Sweep,
    ia: usize,
    ib: usize,
    spec: &PotentialSpec,
    rho: f64,
    m0: i64,
    m_max: i64,
) -> Result<DecayingSolution> {
    let h0 = sw.lanes[ia].chis.as_ref().expect("spinors kept");
    let h1 = sw.lanes[ib].chis.as_ref().expect("spinors kept");
    let mut v = Vec::with_capacity(h0.len());
    let mut z = Vec::with_capacity(h0.len());
    let mut wdev = 0.0f64;
    let target = Complex64::new(0.0, -2.0);
    for (a, b) in h0.iter().zip(h1) {
        let a0 = dd::to_c64(a[0]);
        let b0 = dd::to_c64(b[0]);
        v.push(a0.norm().ln() - b0.norm().ln());
        z.push(a0 * b0.conj() / (a0.norm() * b0.norm()));
        wdev = wdev.max((det_dd(a, b) - target).norm());
    }
    let start = plateau_start(&v, &z)
        .ok_or_else(|| Error::NoPlateau(format!("v(m), z(m) did not settle below {PLATEAU_TOL:e} by M = {m_max}")))?;
    let v_inf = *v.last().expect("nonempty");
    let z_inf = *z.last().expect("nonempty");
    let z_sq = (z_inf * z_inf - 1.0).norm();
    if z_sq > 1e-6 {
        return Err(Error::Degenerate(format!("z∞² = {} is not 1; no decaying direction", z_inf * z_inf)));
    }
    let hc = -z_inf * v_inf.exp();
    let h = hc.re;
    let hd = cdd_real(h);
    let n = n_partial(&sw.params, spec.beta, m0, m_max);
    let mut ln_r = Vec::with_capacity(h0.len());
    let mut phi = Vec::with_capacity(h0.len());
    let mut zeta = Vec::with_capacity(h0.len());
    let mut sp = Vec::with_capacity(h0.len());
    for (a, b) in h0.iter().zip(h1) {
        let c = [a[0] + hd * b[0], a[1] + hd * b[1]];
        let c0 = dd::to_c64(c[0]);
        ln_r.push(c0.norm().ln());
        let ph = c0.arg().rem_euclid(2.0 * PI);
        phi.push(ph);
        zeta.push(Complex64::from_polar(1.0, 2.0 * ph));
        sp.push(to_vec2(&c));
    }
    let build = |lane: &Lane, alpha: f64| {
        let s = lane.chis.as_ref().map(|h| h.iter().map(to_vec2).collect());
        assemble(sw, &n, rho, alpha, spec.beta, m0, lane.ln_r.clone(), lane.phi.clone(), lane.zeta.clone(), s)
    };
    let chi0 = build(&sw.lanes[ia], 0.0);
    let chi_half = build(&sw.lanes[ib], PI / 2.0);
    let traj_d = assemble(sw, &n, rho, f64::NAN, spec.beta, m0, ln_r, phi, zeta, Some(sp));
    Ok(DecayingSolution {
        h,
        h_imag_residue: hc.im.abs(),
        v_inf,
        z_inf,
        z_inf_sq_residual: z_sq,
        plateau_start: m0 + start as i64,
        wronskian_deviation: wdev,
        chi0,
        chi_half,
        traj_d,
    })
}

/// Slope of ln|χ^d| = ln R_d + ½ln 2 against m^{1−2β} over the last half.
pub fn decay_slope(ds: &DecayingSolution) -> Result<f64> {
    lyapunov_slope(&ds.traj_d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matching {
    pub g1: Vec<Complex64>,
    pub g2: Vec<Complex64>,
    pub g_inf: (f64, f64),
    /// max(|Im g¹|, |Im g²|) at the final index.
    pub imag_residue: f64,
    /// |g(m+1) − g(m)|.
    pub drift: Vec<f64>,
}

/// Solves χ̂(m) = g¹χ_α(m) + g²χ^d(m) at every m.
pub fn match_full_to_model(full: &[Vec2], model: &ModelTrajectory, traj_d: &ModelTrajectory) -> Result<Matching> {
    let (a, d) = match (&model.spinor, &traj_d.spinor) {
        (Some(a), Some(d)) => (a, d),
        _ => return Err(Error::Matching("both model trajectories must carry spinors".into())),
    };
    if full.len() != a.len() || a.len() != d.len() || full.is_empty() {
        return Err(Error::Matching(format!("length mismatch: {} / {} / {}", full.len(), a.len(), d.len())));
    }
    let mut g1 = Vec::with_capacity(full.len());
    let mut g2 = Vec::with_capacity(full.len());
    for ((x, u), w) in full.iter().zip(a).zip(d) {
        let det = u[0] * w[1] - u[1] * w[0];
        let scale = (u[0].norm() + u[1].norm()) * (w[0].norm() + w[1].norm());
        if !(det.norm() > 1e-12 * scale) {
            return Err(Error::Matching(format!("degenerate basis, |det| = {:e}", det.norm())));
        }
        g1.push((w[1] * x[0] - w[0] * x[1]) / det);
        g2.push((u[0] * x[1] - u[1] * x[0]) / det);
    }
    let drift = g1
        .windows(2)
        .zip(g2.windows(2))
        .map(|(p, q)| ((p[1] - p[0]).norm_sqr() + (q[1] - q[0]).norm_sqr()).sqrt())
        .collect();
    let (l1, l2) = (*g1.last().expect("nonempty"), *g2.last().expect("nonempty"));
    Ok(Matching { g1, g2, g_inf: (l1.re, l2.re), imag_residue: l1.im.abs().max(l2.im.abs()), drift })
}

/// ln ∫₀^N p^{−1}R² from the model chain, at the requested ln N.
///
/// On [k_m, K_m] the amplitude is R(m) and on [K_m, k_{m+1}] it is
/// R(m+1); each index k contributes (2πq/F)R² and N ↔ k through
/// N = π²q²k²/F. Contributions below k_{M0} are omitted.
pub fn bridge_l2(params: &OperatorParams, traj: &ModelTrajectory, ln_n: &[f64]) -> Result<Vec<f64>> {
    let ad = params.adiabatic()?;
    let qf = params.q() as f64;
    let f = params.field;
    let pref = (2.0 * PI * qf / f).ln();
    let offset = (PI * PI * qf * qf / f).ln();
    let ln_small_k = |m: i64| ad.a.ln() + (m as f64 - 0.5) * ad.ln_lambda;
    let ln_big_k = |m: i64| ad.a.ln() + m as f64 * ad.ln_lambda;
    // segment endpoints ln k and cumulative ln Q at each endpoint
    let mut edges = vec![ln_small_k(traj.m0)];
    let mut amps: Vec<f64> = Vec::new();
    for i in 0..traj.len() - 1 {
        let m = traj.m_at(i);
        edges.push(ln_big_k(m));
        amps.push(traj.ln_r[i]);
        edges.push(ln_small_k(m + 1));
        amps.push(traj.ln_r[i + 1]);
    }
    let ln_len = |a: f64, b: f64| b + (-(a - b).exp()).ln_1p();
    let mut cum = vec![f64::NEG_INFINITY];
    for j in 0..amps.len() {
        let add = pref + 2.0 * amps[j] + ln_len(edges[j], edges[j + 1]);
        cum.push(stats::log_sum_exp(&[cum[j], add]));
    }
    let mut out = Vec::with_capacity(ln_n.len());
    for &x in ln_n {
        let lk = 0.5 * (x - offset);
        if lk < edges[0] || lk > *edges.last().expect("nonempty") {
            return Err(Error::Domain(format!("ln N = {x} outside the chain range")));
        }
        let j = edges.partition_point(|&e| e <= lk).saturating_sub(1).min(amps.len() - 1);
        let partial = if lk > edges[j] { pref + 2.0 * amps[j] + ln_len(edges[j], lk) } else { f64::NEG_INFINITY };
        out.push(stats::log_sum_exp(&[cum[j], partial]));
    }
    Ok(out)
}

/// Range of dyadic exponents j with N = 2^j inside the chain.
pub fn dyadic_range(params: &OperatorParams, m0: i64, m_max: i64) -> Result<(i64, i64)> {
    let ad = params.adiabatic()?;
    let qf = params.q() as f64;
    let offset = (PI * PI * qf * qf / params.field).ln();
    let lo = offset + 2.0 * (ad.a.ln() + (m0 as f64 - 0.5) * ad.ln_lambda);
    let hi = offset + 2.0 * (ad.a.ln() + (m_max as f64 - 0.5) * ad.ln_lambda);
    Ok(((lo / std::f64::consts::LN_2).ceil() as i64, (hi / std::f64::consts::LN_2).floor() as i64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubordinacyReport {
    pub rho: f64,
    /// False when no decaying direction exists and χ_{π/2} stands in.
    pub subordinate: bool,
    pub ln_n: Vec<f64>,
    pub ln_q_d: Vec<f64>,
    pub ln_q_g: Vec<f64>,
    /// ln(∫R_d²/∫R_g²).
    pub ln_ratio: Vec<f64>,
    /// μ fitted in ln(Q_d/N^{1/2}) ≈ c − μ(ln N)^{1−2β}, over the tail.
    pub mu_fit_d: f64,
    /// μ fitted in ln(Q_g/N^{1/2}) ≈ c + μ(ln N)^{1−2β}, over the tail.
    pub mu_fit_g: f64,
    pub mu_star: f64,
    /// Slope of ln(−ln ratio) against ln ln N over the tail.
    pub exponent_slope: f64,
    pub ratio_strictly_decreasing: bool,
    /// Number of tail points where the ratio fails to decrease.
    pub tail_increases: usize,
}

/// Subordinacy diagnostics on dyadic N, with generic solution χ₀ and
/// subordinate candidate χ^d (or χ_{π/2} when no decaying direction
/// exists).
pub fn subordinacy_report(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rho: f64,
    m0: i64,
    m_max: i64,
) -> Result<SubordinacyReport> {
    let pr = rho_params(params, rho)?;
    match decaying_solution(params, spec, rho, m0, m_max) {
        Ok(ds) => subordinacy_from(&pr, spec, rho, &ds.chi0, &ds.traj_d, true),
        Err(Error::Degenerate(_)) | Err(Error::NoPlateau(_)) => {
            let v = run_model_alphas(params, spec, rho, &[0.0, PI / 2.0], m0, m_max, Phi3Mode::Zero, false)?;
            subordinacy_from(&pr, spec, rho, &v[0], &v[1], false)
        }
        Err(e) => Err(e),
    }
}

fn subordinacy_from(
    pr: &OperatorParams,
    spec: &PotentialSpec,
    rho: f64,
    gen: &ModelTrajectory,
    sub: &ModelTrajectory,
    subordinate: bool,
) -> Result<SubordinacyReport> {
    let (j0, j1) = dyadic_range(pr, gen.m0, gen.m_max())?;
    let ln_n: Vec<f64> = (j0..=j1).map(|j| j as f64 * std::f64::consts::LN_2).collect();
    if ln_n.len() < 8 {
        return Err(Error::InsufficientSamples { need: 8, got: ln_n.len() });
    }
    let ln_q_d = bridge_l2(pr, sub, &ln_n)?;
    let ln_q_g = bridge_l2(pr, gen, &ln_n)?;
    let ln_ratio: Vec<f64> = ln_q_d.iter().zip(&ln_q_g).map(|(a, b)| a - b).collect();
    let tail = ln_n.len() / 2;
    let e = 1.0 - 2.0 * spec.beta;
    let x: Vec<f64> = ln_n[tail..].iter().map(|v| v.powf(e)).collect();
    let yd: Vec<f64> = ln_n[tail..].iter().zip(&ln_q_d[tail..]).map(|(n, q)| q - 0.5 * n).collect();
    let yg: Vec<f64> = ln_n[tail..].iter().zip(&ln_q_g[tail..]).map(|(n, q)| q - 0.5 * n).collect();
    let mu_fit_d = -stats::linear_fit(&x, &yd)?.slope;
    let mu_fit_g = stats::linear_fit(&x, &yg)?.slope;
    let exponent_slope = if ln_ratio[tail..].iter().all(|&r| r < 0.0) {
        let lx: Vec<f64> = ln_n[tail..].iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ln_ratio[tail..].iter().map(|r| (-r).ln()).collect();
        stats::linear_fit(&lx, &ly)?.slope
    } else {
        f64::NAN
    };
    let tail_increases = ln_ratio[tail..].windows(2).filter(|w| !(w[1] < w[0])).count();
    Ok(SubordinacyReport {
        rho,
        subordinate,
        ln_n,
        ln_q_d,
        ln_q_g,
        ln_ratio,
        mu_fit_d,
        mu_fit_g,
        mu_star: phase::model_constants(pr, spec)?.mu_star,
        exponent_slope,
        ratio_strictly_decreasing: tail_increases == 0,
        tail_increases,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhoSample {
    pub rho: f64,
    /// Lyapunov slopes for `ALPHA_GRID`.
    pub slopes: Vec<f64>,
    /// max_m |det(χ₀, χ_{π/2}) + 2i| in double-double.
    pub wronskian_deviation: f64,
    pub decay_slope: Option<f64>,
    pub h: Option<f64>,
    pub h_imag_residue: Option<f64>,
    pub z_inf_sq_residual: Option<f64>,
    pub decay_error: Option<String>,
    pub subordinacy: Option<SubordinacyReport>,
    /// ln R of every α lane followed by ln R_d, when it exists.
    #[serde(skip)]
    pub ln_r_runs: Vec<Vec<f64>>,
}

/// Everything measured at one ρ from a single coefficient stream: slopes
/// for the α grid, the decaying solution and the subordinacy report.
pub fn rho_sample(params: &OperatorParams, spec: &PotentialSpec, rho: f64, m0: i64, m_max: i64) -> Result<RhoSample> {
    let sw = sweep(params, spec, rho, &ALPHA_GRID, m0, m_max, Phi3Mode::Zero, true)?;
    let n = n_partial(&sw.params, spec.beta, m0, m_max);
    let mut slopes = Vec::with_capacity(ALPHA_GRID.len());
    let mut ln_r_runs = Vec::with_capacity(ALPHA_GRID.len() + 1);
    for (lane, &a) in sw.lanes.iter().zip(&ALPHA_GRID) {
        let t = assemble(&sw, &n, rho, a, spec.beta, m0, lane.ln_r.clone(), Vec::new(), Vec::new(), None);
        slopes.push(lyapunov_slope(&t)?);
        ln_r_runs.push(t.ln_r);
    }
    let target = Complex64::new(0.0, -2.0);
    let wronskian_deviation = sw.lanes[0]
        .chis
        .as_ref()
        .expect("spinors kept")
        .iter()
        .zip(sw.lanes[2].chis.as_ref().expect("spinors kept"))
        .map(|(a, b)| (det_dd(a, b) - target).norm())
        .fold(0.0, f64::max);
    let mut out = RhoSample {
        rho,
        slopes,
        wronskian_deviation,
        decay_slope: None,
        h: None,
        h_imag_residue: None,
        z_inf_sq_residual: None,
        decay_error: None,
        subordinacy: None,
        ln_r_runs,
    };
    match decaying_from(&sw, 0, 2, spec, rho, m0, m_max) {
        Ok(ds) => {
            out.decay_slope = Some(decay_slope(&ds)?);
            out.h = Some(ds.h);
            out.h_imag_residue = Some(ds.h_imag_residue);
            out.z_inf_sq_residual = Some(ds.z_inf_sq_residual);
            out.subordinacy = Some(subordinacy_from(&sw.params, spec, rho, &ds.chi0, &ds.traj_d, true)?);
            out.ln_r_runs.push(ds.traj_d.ln_r);
        }
        Err(e @ (Error::Degenerate(_) | Error::NoPlateau(_))) => out.decay_error = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(out)
}

/// `rho_sample` over many ρ in parallel, in input order.
pub fn rho_ensemble(
    params: &OperatorParams,
    spec: &PotentialSpec,
    rhos: &[f64],
    m0: i64,
    m_max: i64,
) -> Result<Vec<RhoSample>> {
    rhos.par_iter().map(|&rho| rho_sample(params, spec, rho, m0, m_max)).collect()
}

/// The smallest C ≥ 0 with ln R(m) + C·m^{1−β} ≥ 0 on m ≤ m_fit, over
/// every run.
pub fn envelope_constant(runs: &[Vec<f64>], m0: i64, beta: f64, m_fit: i64) -> f64 {
    let mut c = 0.0f64;
    for run in runs {
        for (i, &v) in run.iter().enumerate() {
            let m = m0 + i as i64;
            if m > m_fit {
                break;
            }
            c = c.max(-v / (m as f64).powf(1.0 - beta));
        }
    }
    c
}

/// min over runs and m of ln R(m) + C·m^{1−β}.
pub fn envelope_minimum(runs: &[Vec<f64>], m0: i64, beta: f64, c: f64) -> f64 {
    runs.iter()
        .flat_map(|run| run.iter().enumerate().map(move |(i, &v)| v + c * ((m0 + i as i64) as f64).powf(1.0 - beta)))
        .fold(f64::INFINITY, f64::min)
}

/// A family f_n, assumed 4π-periodic, with sup-norms of f_n′.
pub struct MgfFamily<'a> {
    pub f: &'a (dyn Fn(usize, f64) -> f64 + Sync),
    pub f_prime_sup: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgfConfig {
    pub a: Vec<f64>,
    pub l: f64,
    /// Integer offset h in L^{h+n}.
    pub h: u32,
    /// g(y) = cos(ky + b); 2k must be an integer.
    pub g_k: f64,
    pub g_b: f64,
    pub t_grid: Vec<f64>,
    pub interval_lo: f64,
    /// Node cap; above it the rule switches to jittered stratified sampling.
    pub max_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MgfRow {
    pub t: f64,
    pub ln_integral: f64,
    /// ln I_t / (t²A² + t𝓠), floored at 0.
    pub b_t: f64,
    pub holdout: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MgfReport {
    pub a_sq: f64,
    pub q_n: f64,
    pub nodes: usize,
    pub stratified: bool,
    pub rows: Vec<MgfRow>,
    pub b_fit: f64,
    /// Holdout t (midpoints of the grid) where ln I_t exceeds the bound at
    /// the fitted B.
    pub violations: usize,
}

/// Weyl-jittered abscissae: one point per stratum of [lo, lo + 1).
fn nodes(lo: f64, n: usize, jitter: bool) -> Vec<f64> {
    const GOLDEN: f64 = 0.618_033_988_749_894_9;
    (0..n)
        .map(|j| {
            let u = if jitter { ((j as f64 + 1.0) * GOLDEN).fract() } else { 0.5 };
            lo + (j as f64 + u) / n as f64
        })
        .collect()
}

/// Estimates ∫_I e^{tS_N(ρ)}dρ over the t-grid and fits the single
/// constant B in e^{Bt²A² + Bt𝓠}.
pub fn mgf_bound_test(cfg: &MgfConfig, family: &MgfFamily) -> Result<MgfReport> {
    let n_terms = cfg.a.len();
    if !(cfg.l > 1.0) {
        return Err(Error::Precondition(format!("L = {} must exceed 1", cfg.l)));
    }
    if family.f_prime_sup.len() != n_terms {
        return Err(Error::Precondition("f′ bounds must match a(n)".into()));
    }
    if (2.0 * cfg.g_k).fract() != 0.0 || cfg.g_k == 0.0 {
        return Err(Error::Precondition(format!("g frequency k = {} must be a nonzero multiple of 1/2", cfg.g_k)));
    }
    let amax = cfg.a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if cfg.t_grid.iter().any(|&t| t < 0.0 || t * amax > 1.0) {
        return Err(Error::Precondition("every t must satisfy 0 ≤ t·max|a| ≤ 1".into()));
    }
    let ln_l = cfg.l.ln();
    let top = cfg.h as u64 + n_terms as u64;
    let fastest = ((cfg.h as f64 + n_terms as f64) * ln_l).exp();
    let wanted = (1e4f64).max(64.0 * fastest);
    let stratified = !(wanted <= cfg.max_nodes as f64);
    let count = if stratified { cfg.max_nodes } else { wanted.ceil() as usize };
    let rhos = nodes(cfg.interval_lo, count, stratified);
    let chunk = 1024;
    let sums: Vec<f64> = rhos
        .par_chunks(chunk)
        .flat_map_iter(|block| {
            let mut seq = GeometricSequence::new(ln_l, top, 4);
            seq.seek(cfg.h as u64);
            let mut s = vec![0.0; block.len()];
            for (n, &an) in cfg.a.iter().enumerate() {
                if an != 0.0 {
                    for (acc, &rho) in s.iter_mut().zip(block) {
                        let y = seq.phase(rho);
                        *acc += an * (family.f)(n, y) * (cfg.g_k * y + cfg.g_b).cos();
                    }
                }
                seq.advance();
            }
            s
        })
        .collect();
    let a_sq: f64 = cfg.a.iter().map(|v| v * v).sum();
    let q_n: f64 = cfg
        .a
        .iter()
        .enumerate()
        .map(|(n, v)| v.abs() * (family.f_prime_sup[n] + (-(cfg.h as f64 + n as f64) * ln_l).exp()))
        .sum();
    let ln_mean = |t: f64| {
        let terms: Vec<f64> = sums.iter().map(|s| t * s).collect();
        stats::log_sum_exp(&terms) - (count as f64).ln()
    };
    let expo = |t: f64| t * t * a_sq + t * q_n;
    let mut rows = Vec::new();
    let mut b_fit = 0.0f64;
    for &t in &cfg.t_grid {
        let li = ln_mean(t);
        let b_t = if expo(t) > 0.0 { (li / expo(t)).max(0.0) } else { 0.0 };
        b_fit = b_fit.max(b_t);
        rows.push(MgfRow { t, ln_integral: li, b_t, holdout: false });
    }
    let mut sorted = cfg.t_grid.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut violations = 0;
    for w in sorted.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let li = ln_mean(t);
        if li > b_fit * expo(t) + 1e-12 {
            violations += 1;
        }
        let b_t = if expo(t) > 0.0 { (li / expo(t)).max(0.0) } else { 0.0 };
        rows.push(MgfRow { t, ln_integral: li, b_t, holdout: true });
    }
    Ok(MgfReport { a_sq, q_n, nodes: count, stratified, rows, b_fit, violations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// q = 1, κ′ = 1.
    fn params() -> OperatorParams {
        let f = PI * PI / 3.0;
        OperatorParams::from_rho(1, 1, f / 2.0, -1.0).unwrap()
    }

    fn spec() -> PotentialSpec {
        PotentialSpec::new(1.0, 0.3, 2).unwrap()
    }

    /// v0 = 2, for runs that need the decaying direction to settle early.
    fn strong_spec() -> PotentialSpec {
        PotentialSpec::new(2.0, 0.3, 2).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelRunConfig::new(0.0, -1.0, 2, 10).validate().is_ok());
        assert!(ModelRunConfig::new(PI, -1.0, 2, 10).validate().is_err());
        assert!(ModelRunConfig::new(0.0, -1.0, 1, 10).validate().is_err());
        assert!(ModelRunConfig::new(0.0, -1.0, 5, 5).validate().is_err());
    }

    #[test]
    fn decoupled_step_rotates_zeta() {
        let mut c = model_coefficients(&params(), &spec(), -1.0, 3, 4, Phi3Mode::Zero).unwrap()[0];
        c.s = crate::turning::ConnectionMatrix::identity();
        let st = ModelState::initial(0.4);
        let out = model_step(&c, &st).unwrap();
        assert_eq!(out.ln_r, 0.0);
        let expect = Complex64::from_polar(1.0, 2.0 * (c.gamma_minus - c.gamma_plus)) * st.zeta;
        assert!((out.zeta - expect).norm() < 1e-15);
    }

    fn random_coeffs(d: Complex64, gm: f64, gp: f64) -> ClosedStepCoeffs {
        let phis = discrete::PhiComponents { phi1: 0.0, phi2_minus: gm, phi2_plus: gp, phi3_minus: 0.0, phi3_plus: 0.0 };
        ClosedStepCoeffs::new(5, d, 0.0, &phis)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn prufer_matches_spinor_route(
            dr in -1.2f64..1.2, di in -1.2f64..1.2,
            gm in -6.0f64..6.0, gp in -6.0f64..6.0,
            ln_r in -3.0f64..3.0, phi in 0.0f64..(2.0 * PI),
        ) {
            let c = random_coeffs(Complex64::new(dr, di), gm, gp);
            let st = ModelState { ln_r, phi, zeta: Complex64::from_polar(1.0, 2.0 * phi) };
            let out = model_step(&c, &st).unwrap();
            let chi = discrete::closed_step(&c, &discrete::spinor(ln_r, phi));
            let (lr, ph) = discrete::prufer_of(&chi);
            prop_assert!((out.ln_r - lr).abs() < 1e-12);
            let dphi = (out.phi - ph).rem_euclid(2.0 * PI);
            prop_assert!(dphi.min(2.0 * PI - dphi) < 1e-12);
            prop_assert!((out.zeta - Complex64::from_polar(1.0, 2.0 * ph)).norm() < 1e-12);
            prop_assert!((out.zeta.norm() - 1.0).abs() < 1e-14);
        }

        #[test]
        fn log_increment_is_bounded(
            dr in -2.0f64..2.0, di in -2.0f64..2.0,
            gm in -6.0f64..6.0, phi in 0.0f64..(2.0 * PI),
        ) {
            let c = random_coeffs(Complex64::new(dr, di), gm, 0.3);
            let st = ModelState { ln_r: 0.0, phi, zeta: Complex64::from_polar(1.0, 2.0 * phi) };
            let out = model_step(&c, &st).unwrap();
            let bound = (c.s.s_entry + c.s.r_entry.norm()).ln();
            prop_assert!(out.ln_r.abs() <= bound * (1.0 + 1e-14));
        }
    }

    #[test]
    fn zero_potential_keeps_amplitude() {
        let t = run_model(&ModelRunConfig::new(0.7, -1.2, 2, 200), &params(), &PotentialSpec::zero()).unwrap();
        assert!(t.ln_r.iter().all(|&v| v == 0.0));
        let st = sum_smallness_stats(&params(), &PotentialSpec::zero(), &[64, 128], &stratified_rhos(-1.5, 16), 0.1, 2).unwrap();
        assert!(st.rows.iter().all(|r| r.exceed_fraction == 0.0));
    }

    #[test]
    fn zeta_stays_unimodular() {
        let t = run_model(&ModelRunConfig::new(0.2, -0.9, 2, 3000), &params(), &spec()).unwrap();
        for (z, p) in t.zeta.iter().zip(&t.phi) {
            assert!((z.norm() - 1.0).abs() < 1e-10);
            assert!((z - Complex64::from_polar(1.0, 2.0 * p)).norm() < 1e-10);
        }
    }

    #[test]
    fn n_partial_matches_growth_law() {
        let p = params();
        let beta = 0.3;
        let n = n_partial(&p, beta, 2, 200_000);
        let m = 200_000f64;
        let ratio = n.last().unwrap() * (1.0 - 2.0 * beta) / m.powf(1.0 - 2.0 * beta);
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
        let p3 = OperatorParams::from_rho(1, 3, 1.0, -1.0).unwrap();
        let n3 = n_partial(&p3, beta, 2, 200_000);
        let ratio3 = n3.last().unwrap() * (1.0 - 2.0 * beta) / (3.0 * m.powf(1.0 - 2.0 * beta));
        assert!((ratio3 - 1.0).abs() < 0.01, "{ratio3}");
    }

    #[test]
    fn wronskian_conserved_in_double_double() {
        let sw = sweep(&params(), &spec(), -1.1, &[0.0, PI / 2.0], 2, 3000, Phi3Mode::Zero, true).unwrap();
        let a = sw.lanes[0].chis.as_ref().unwrap();
        let b = sw.lanes[1].chis.as_ref().unwrap();
        for (x, y) in a.iter().zip(b) {
            assert!((det_dd(x, y) - Complex64::new(0.0, -2.0)).norm() < 1e-12);
        }
        assert!(sw.lanes[0].ln_r.last().unwrap().abs() > 1.0);
    }

    #[test]
    fn decaying_solution_identities() {
        let ds = decaying_solution(&params(), &strong_spec(), -1.1, 2, 3000).unwrap();
        assert!(ds.wronskian_deviation < 1e-9);
        assert!(ds.z_inf_sq_residual < 1e-6);
        assert!(ds.h_imag_residue < 1e-6 * ds.h.abs().max(1.0));
        for i in (0..ds.chi0.len()).step_by(7) {
            if ds.chi0.ln_r[i] + ds.chi_half.ln_r[i] > 4.0 * 10f64.ln() {
                break;
            }
            let dz = (ds.chi0.zeta[i] - ds.chi_half.zeta[i]).norm();
            let prod = dz * (ds.chi0.ln_r[i] + ds.chi_half.ln_r[i]).exp();
            assert_relative_eq!(prod, 2.0, max_relative = 1e-8);
        }
        let last = ds.traj_d.len() - 1;
        assert!(ds.traj_d.ln_r[last] < ds.traj_d.ln_r[last / 2]);
        assert!(decay_slope(&ds).unwrap() < 0.0);
    }

    #[test]
    fn decaying_solution_needs_coupling() {
        let e = decaying_solution(&params(), &PotentialSpec::zero(), -1.1, 2, 200).unwrap_err();
        assert!(matches!(e, Error::Degenerate(_)));
    }

    #[test]
    fn plateau_detection_window() {
        let v: Vec<f64> = (0..40).map(|i| if i < 10 { i as f64 } else { 10.0 }).collect();
        let z = vec![Complex64::new(1.0, 0.0); 40];
        assert_eq!(plateau_start(&v, &z), Some(10));
        assert_eq!(plateau_start(&v[..20], &z[..20]), None);
    }

    #[test]
    fn forced_zero_coupling_gives_zero_slope() {
        let trajs: Vec<ModelTrajectory> = stratified_rhos(-1.5, 16)
            .iter()
            .map(|&rho| run_model(&ModelRunConfig::new(0.0, rho, 2, 300), &params(), &PotentialSpec::zero()).unwrap())
            .collect();
        let fit = lyapunov_fit(&trajs, &params(), &PotentialSpec::zero()).unwrap();
        assert_eq!(fit.slope_median, 0.0);
        assert!(lyapunov_fit(&trajs[..8], &params(), &spec()).is_err());
    }

    #[test]
    fn identical_chain_matches_with_unit_coefficients() {
        let ds = decaying_solution(&params(), &strong_spec(), -1.1, 2, 2000).unwrap();
        let full = ds.chi0.spinor.clone().unwrap();
        let m = match_full_to_model(&full, &ds.chi0, &ds.traj_d).unwrap();
        for (a, b) in m.g1.iter().zip(&m.g2) {
            assert!((a - 1.0).norm() < 1e-9 && b.norm() < 1e-9);
        }
    }

    #[test]
    fn perturbed_chain_plateaus() {
        let p = params();
        let sp = strong_spec();
        let (m0, m1) = (2i64, 400i64);
        let ds = decaying_solution(&p, &sp, -1.1, m0, 3000).unwrap();
        let coeffs = model_coefficients(&p, &sp, -1.1, m0, m1, Phi3Mode::Zero).unwrap();
        let gamma = 0.15;
        let mut chi = discrete::spinor(0.0, 0.0);
        let mut full = vec![chi];
        for (i, c) in coeffs.iter().take((m1 - m0) as usize).enumerate() {
            chi = discrete::closed_step(c, &chi);
            let m = (m0 + i as i64) as f64;
            let eps = Complex64::from_polar((-gamma * m).exp() * (chi[0].norm()), 0.7 * m);
            chi = [chi[0] + eps, chi[1] + eps.conj()];
            full.push(chi);
        }
        let n = full.len();
        let cut = |t: &ModelTrajectory| {
            let mut t = t.clone();
            t.spinor.as_mut().unwrap().truncate(n);
            t
        };
        let mt = match_full_to_model(&full, &cut(&ds.chi0), &cut(&ds.traj_d)).unwrap();
        assert!(mt.imag_residue < 1e-6);
        let (x, y): (Vec<f64>, Vec<f64>) = mt
            .drift
            .iter()
            .enumerate()
            .skip(10)
            .take(120)
            .filter(|(_, d)| **d > 0.0)
            .map(|(i, d)| ((m0 + i as i64) as f64, d.ln()))
            .unzip();
        let fit = stats::linear_fit(&x, &y).unwrap();
        assert!(fit.slope < -0.5 * gamma, "drift rate {}", fit.slope);
    }

    #[test]
    fn bridge_integral_grows_like_root_n_for_flat_amplitude() {
        let p = params();
        let t = run_model(&ModelRunConfig::new(0.0, -1.0, 2, 60), &p, &PotentialSpec::zero()).unwrap();
        let (j0, j1) = dyadic_range(&p, 2, 60).unwrap();
        let ln_n: Vec<f64> = (j0 + 20..=j1).map(|j| j as f64 * std::f64::consts::LN_2).collect();
        let q = bridge_l2(&p, &t, &ln_n).unwrap();
        let x: Vec<f64> = ln_n.clone();
        let fit = stats::linear_fit(&x, &q).unwrap();
        assert_relative_eq!(fit.slope, 0.5, max_relative = 1e-3);
        // ∫ p^{−1} over k ≤ k(N) is (2πq/F)k(N) to leading order
        let f = p.field;
        let lk = 0.5 * (ln_n[10] - (PI * PI / f).ln());
        assert_relative_eq!(q[10], (2.0 * PI / f).ln() + lk, epsilon = 1e-3);
    }

    #[test]
    fn zero_potential_subordinacy_ratio_is_constant() {
        let r = subordinacy_report(&params(), &PotentialSpec::zero(), -1.0, 2, 60).unwrap();
        assert!(!r.subordinate);
        let first = r.ln_ratio[0];
        assert!(r.ln_ratio.iter().all(|v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn mgf_zero_weights() {
        let f = |_: usize, _: f64| 1.0;
        let fam = MgfFamily { f: &f, f_prime_sup: vec![0.0; 4] };
        let cfg = MgfConfig {
            a: vec![0.0; 4],
            l: std::f64::consts::E,
            h: 0,
            g_k: 1.0,
            g_b: 0.0,
            t_grid: vec![0.25, 0.5, 1.0],
            interval_lo: 0.0,
            max_nodes: 1 << 14,
        };
        let r = mgf_bound_test(&cfg, &fam).unwrap();
        assert_eq!(r.b_fit, 0.0);
        assert!(r.rows.iter().all(|row| row.ln_integral.abs() < 1e-15));
    }

    #[test]
    fn mgf_single_term_matches_bessel() {
        // I₀(t) for t = 0.5, 1 (scipy.special.i0)
        let i0 = [(0.5, 1.0634833707413236), (1.0, 1.2660658777520082)];
        let f = |_: usize, _: f64| 1.0;
        let fam = MgfFamily { f: &f, f_prime_sup: vec![0.0] };
        let cfg = MgfConfig {
            a: vec![1.0],
            l: std::f64::consts::E,
            h: 11,
            g_k: 1.0,
            g_b: 0.0,
            t_grid: vec![0.5, 1.0],
            interval_lo: -0.5,
            max_nodes: 1 << 24,
        };
        let r = mgf_bound_test(&cfg, &fam).unwrap();
        assert!(!r.stratified);
        for (row, (t, v)) in r.rows.iter().filter(|r| !r.holdout).zip(i0) {
            assert_eq!(row.t, t);
            assert_relative_eq!(row.ln_integral.exp(), v, max_relative = 1e-4);
            assert!(row.ln_integral <= t * t);
        }
    }

    #[test]
    fn mgf_rejects_large_t() {
        let f = |_: usize, _: f64| 1.0;
        let fam = MgfFamily { f: &f, f_prime_sup: vec![0.0] };
        let cfg = MgfConfig {
            a: vec![2.0],
            l: 3.0,
            h: 0,
            g_k: 1.0,
            g_b: 0.0,
            t_grid: vec![0.75],
            interval_lo: 0.0,
            max_nodes: 1 << 14,
        };
        assert!(matches!(mgf_bound_test(&cfg, &fam), Err(Error::Precondition(_))));
    }

    #[test]
    fn r_star_scaling_laws() {
        let p = params();
        let base = phase::model_constants(&p, &spec()).unwrap().r_star;
        let doubled = phase::model_constants(&p, &PotentialSpec::new(2.0, 0.3, 2).unwrap()).unwrap().r_star;
        assert_relative_eq!(doubled / base, 4.0, max_relative = 1e-12);
        let b2 = phase::model_constants(&p, &PotentialSpec::new(1.0, 0.2, 2).unwrap()).unwrap().r_star;
        let mu = p.adiabatic().unwrap().mu;
        let expect = mu.powf(2.0 * 0.2 - 1.0) / (1.0 - 0.4) / (mu.powf(2.0 * 0.3 - 1.0) / (1.0 - 0.6));
        assert_relative_eq!(b2 / base, expect, max_relative = 1e-12);
    }
}
