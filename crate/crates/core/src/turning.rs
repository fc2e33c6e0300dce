//! Hermite functions of imaginary order on the ray e^{−iπ/4}ℝ, the exact
//! solutions of dψ/dy = D e^{iy²σ₃} ψ, and the connection matrix S(ξ).

use crate::dd::{self, Cdd};
use crate::error::{Error, Result};
use crate::mat2::{self, Mat2};
use crate::rk::{self, Dopri5Options};
use crate::special::{hermite_at_zero, hermite_derivative_at_zero};
use num_complex::{Complex, Complex64};
use serde::Serialize;
use std::f64::consts::PI;
use twofloat::TwoFloat;

/// Positive-ray abscissa beyond which the asymptotic series is used.
const ASYMPTOTIC_FROM: f64 = 8.0;
const CONSISTENCY_TOL: f64 = 1e-8;

fn ray() -> Complex64 {
    Complex64::from_polar(1.0, -PI / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HermiteEval {
    pub order: Complex64,
    pub argument: Complex64,
    pub value: Complex64,
    /// dH/dz.
    pub derivative: Complex64,
}

/// S(ξ) = [[s, r̄], [r, s]], carried in double-double with rounded copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConnectionMatrix {
    pub s_entry: f64,
    pub r_entry: Complex64,
    pub s_dd: TwoFloat,
    pub r_dd: Cdd,
}

impl ConnectionMatrix {
    pub fn identity() -> Self {
        Self {
            s_entry: 1.0,
            r_entry: Complex64::new(0.0, 0.0),
            s_dd: dd::dd(1.0),
            r_dd: dd::cdd(Complex64::new(0.0, 0.0)),
        }
    }

    /// [[s, r̄], [r, s]].
    pub fn matrix(&self) -> Mat2 {
        let s = Complex64::new(self.s_entry, 0.0);
        [[s, self.r_entry.conj()], [self.r_entry, s]]
    }

    /// |s² − |r|² − 1| evaluated in double-double.
    pub fn unimodularity_residual(&self) -> f64 {
        dd::to_f64(self.s_dd * self.s_dd - dd::norm_sqr(&self.r_dd) - dd::dd(1.0)).abs()
    }
}

/// Asymptotic expansion H_λ(z) ~ (2z)^λ Σ c_k (2z)^{−2k} and its
/// derivative. Returns None when the series has not converged to 1e−15.
fn hermite_asymptotic(lambda: Complex64, z: Complex64) -> Option<(Complex64, Complex64)> {
    let two_z = 2.0 * z;
    let inv_sq = 1.0 / (two_z * two_z);
    let lead = (lambda * two_z.ln()).exp();
    let mut c = Complex64::new(1.0, 0.0);
    let mut sum = c;
    let mut dsum = lambda * c;
    let mut last = f64::INFINITY;
    for k in 0..200 {
        let kf = k as f64;
        c = -c * (lambda - 2.0 * kf) * (lambda - 2.0 * kf - 1.0) * inv_sq / (kf + 1.0);
        let mag = c.norm();
        if mag > last {
            return None;
        }
        last = mag;
        sum += c;
        dsum += c * (lambda - 2.0 * (kf + 1.0));
        if mag < 1e-16 * sum.norm() {
            // d/dz Σ c_k (2z)^{λ−2k} = (2/(2z)) Σ (λ − 2k) c_k (2z)^{λ−2k}
            return Some((lead * sum, lead * dsum * 2.0 / two_z));
        }
    }
    None
}

/// H_λ, H_λ′, H_{λ−1}, H_{λ−1}′ at z = e^{−iπ/4}y for each y.
pub fn hermite_pair_on_ray(lambda: Complex64, ys: &[f64]) -> Result<Vec<[Complex64; 4]>> {
    let c = ray();
    let lm1 = lambda - 1.0;
    let mut out = vec![[Complex64::new(0.0, 0.0); 4]; ys.len()];
    let mut pos: Vec<(usize, f64)> = Vec::new();
    let mut neg: Vec<(usize, f64)> = Vec::new();
    for (i, &y) in ys.iter().enumerate() {
        if y >= ASYMPTOTIC_FROM {
            let z = c * y;
            match (hermite_asymptotic(lambda, z), hermite_asymptotic(lm1, z)) {
                (Some(a), Some(b)) => {
                    out[i] = [a.0, a.1, b.0, b.1];
                    continue;
                }
                _ => pos.push((i, y)),
            }
        } else if y >= 0.0 {
            pos.push((i, y));
        } else {
            neg.push((i, y));
        }
    }
    let h0 = [
        hermite_at_zero(lambda),
        hermite_derivative_at_zero(lambda),
        hermite_at_zero(lm1),
        hermite_derivative_at_zero(lm1),
    ];
    pos.sort_by(|a, b| a.1.total_cmp(&b.1));
    neg.sort_by(|a, b| b.1.total_cmp(&a.1));
    for group in [pos, neg] {
        if group.is_empty() {
            continue;
        }
        let targets: Vec<f64> = group.iter().map(|g| g.1).collect();
        let end = *targets.last().unwrap();
        // state: (g, g') for λ and λ−1 where g(y) = H(cy), g' = c H'
        let init = [
            h0[0].re,
            h0[0].im,
            (c * h0[1]).re,
            (c * h0[1]).im,
            h0[2].re,
            h0[2].im,
            (c * h0[3]).re,
            (c * h0[3]).im,
        ];
        let opts = Dopri5Options { rtol: 2e-15, atol: 1e-17, ..Default::default() };
        let mut samples = vec![[0.0; 8]; targets.len()];
        rk::solve(
            |y, s: &[f64; 8], d: &mut [f64; 8]| {
                for (blk, lam) in [(0usize, lambda), (4usize, lm1)] {
                    let g = Complex64::new(s[blk], s[blk + 1]);
                    let gp = Complex64::new(s[blk + 2], s[blk + 3]);
                    let gpp = Complex64::new(0.0, -1.0) * (2.0 * y * gp - 2.0 * lam * g);
                    d[blk] = gp.re;
                    d[blk + 1] = gp.im;
                    d[blk + 2] = gpp.re;
                    d[blk + 3] = gpp.im;
                }
            },
            0.0,
            init,
            end,
            &opts,
            |y| 0.05 / (1.0 + y.abs()),
            &targets,
            |k, _, s| samples[k] = *s,
        )?;
        for (k, &(i, _)) in group.iter().enumerate() {
            let s = samples[k];
            out[i] = [
                Complex64::new(s[0], s[1]),
                Complex64::new(s[2], s[3]) / c,
                Complex64::new(s[4], s[5]),
                Complex64::new(s[6], s[7]) / c,
            ];
        }
    }
    for (i, v) in out.iter().enumerate() {
        let lhs = v[1];
        let rhs = 2.0 * lambda * v[2];
        let scale = 1f64.max(v[0].norm()).max(lhs.norm());
        if (lhs - rhs).norm() > CONSISTENCY_TOL * scale {
            return Err(Error::Precision(format!(
                "H'_λ ≠ 2λH_(λ−1) at y = {}: {:e}",
                ys[i],
                (lhs - rhs).norm()
            )));
        }
    }
    Ok(out)
}

/// H_λ(z) and dH_λ/dz for z = 0 or z on the ray e^{−iπ/4}ℝ.
pub fn hermite(lambda: Complex64, z: Complex64) -> Result<HermiteEval> {
    let y = (z / ray()).re;
    if (ray() * y - z).norm() > 1e-12 * (1.0 + z.norm()) {
        return Err(Error::Domain(format!("argument {z} is not on the ray e^(-iπ/4)ℝ")));
    }
    if y == 0.0 {
        return Ok(HermiteEval {
            order: lambda,
            argument: z,
            value: hermite_at_zero(lambda),
            derivative: hermite_derivative_at_zero(lambda),
        });
    }
    let v = hermite_pair_on_ray(lambda, &[y])?[0];
    Ok(HermiteEval { order: lambda, argument: z, value: v[0], derivative: v[1] })
}

/// λ = −i|d|²/2.
pub fn turning_order(d: Complex64) -> Complex64 {
    Complex64::new(0.0, -0.5 * d.norm_sqr())
}

/// The coefficient matrix D e^{iy²σ₃} of the turning-point equation.
pub fn turning_rhs(d: Complex64, phi0: f64, y: f64) -> Mat2 {
    let i = Complex64::new(0.0, 1.0);
    let up = i * d.conj() * Complex64::from_polar(1.0, -2.0 * phi0 - y * y);
    let lo = -i * d * Complex64::from_polar(1.0, 2.0 * phi0 + y * y);
    [[Complex64::new(0.0, 0.0), up], [lo, Complex64::new(0.0, 0.0)]]
}

fn psi_from_pair(d: Complex64, phi0: f64, y: f64, h: &[Complex64; 4]) -> [Complex64; 2] {
    let f = Complex64::from_polar(1.0, 2.0 * phi0 + y * y - PI / 4.0);
    [h[0], -d * f * h[2]]
}

/// ψ(y) = (H_λ(cy), −d e^{2iΦ₀+iy²−iπ/4} H_{λ−1}(cy)), c = e^{−iπ/4}.
pub fn psi_solution(d: Complex64, phi0: f64, y: f64) -> Result<[Complex64; 2]> {
    let h = hermite_pair_on_ray(turning_order(d), &[y])?[0];
    Ok(psi_from_pair(d, phi0, y, &h))
}

/// ψ at several abscissae sharing one ray integration.
pub fn psi_solutions(d: Complex64, phi0: f64, ys: &[f64]) -> Result<Vec<[Complex64; 2]>> {
    let hs = hermite_pair_on_ray(turning_order(d), ys)?;
    Ok(ys.iter().zip(&hs).map(|(&y, h)| psi_from_pair(d, phi0, y, h)).collect())
}

fn psi_plus_from(psi: [Complex64; 2]) -> Mat2 {
    [[psi[0], psi[1].conj()], [psi[1], psi[0].conj()]]
}

/// (Ψ⁺(y), Ψ⁻(y)) with Ψ⁺ = (ψ, σ₁ψ̄) and Ψ⁻(y) = σ₃Ψ⁺(−y)σ₃.
pub fn fundamental_matrices(d: Complex64, phi0: f64, y: f64) -> Result<(Mat2, Mat2)> {
    let ps = psi_solutions(d, phi0, &[y, -y])?;
    let plus = psi_plus_from(ps[0]);
    let s3 = mat2::sigma3();
    let minus = mat2::mul(&s3, &mat2::mul(&psi_plus_from(ps[1]), &s3));
    Ok((plus, minus))
}

/// S(ξ) = S₀⁻¹σ₃S₀σ₃ with S₀ built from Hermite values at the origin.
pub fn connection_matrix(xi: Complex64) -> ConnectionMatrix {
    if xi.norm() == 0.0 {
        return ConnectionMatrix::identity();
    }
    let lam = turning_order(xi);
    let e = Complex64::from_polar(1.0, PI / 4.0);
    // S₀ = [[a, c̄], [c, ā]]; the conjugate pairs are exact because the
    // order is purely imaginary.
    let a = dd::cdd(hermite_at_zero(lam));
    let c = dd::cdd(-e.conj() * xi * hermite_at_zero(lam - 1.0));
    let big_a = dd::norm_sqr(&a);
    let big_c = dd::norm_sqr(&c);
    let det = big_a - big_c;
    let s_dd = dd::div(big_a + big_c, det);
    let ac = a * c;
    let r_dd = Complex::new(dd::div(-(ac.re + ac.re), det), dd::div(-(ac.im + ac.im), det));
    ConnectionMatrix {
        s_entry: dd::to_f64(s_dd),
        r_entry: dd::to_c64(r_dd),
        s_dd,
        r_dd,
    }
}

/// e^{−iΦ₀σ₃} S(d) e^{iΦ₀σ₃}.
pub fn rotated_connection(d: Complex64, phi0: f64) -> Mat2 {
    let s = connection_matrix(d).matrix();
    mat2::mul(&mat2::phase(-phi0), &mat2::mul(&s, &mat2::phase(phi0)))
}

fn integrate_matrix(d: Complex64, phi0: f64, y_from: f64, start: Mat2, y_to: f64) -> Result<Mat2> {
    let mut init = [0.0; 8];
    for i in 0..2 {
        for j in 0..2 {
            init[4 * i + 2 * j] = start[i][j].re;
            init[4 * i + 2 * j + 1] = start[i][j].im;
        }
    }
    let opts = Dopri5Options { rtol: 1e-12, atol: 1e-13, ..Default::default() };
    let (fin, _) = rk::solve(
        |y, s: &[f64; 8], out: &mut [f64; 8]| {
            let a = turning_rhs(d, phi0, y);
            for j in 0..2 {
                let x0 = Complex64::new(s[2 * j], s[2 * j + 1]);
                let x1 = Complex64::new(s[4 + 2 * j], s[4 + 2 * j + 1]);
                let r0 = a[0][1] * x1;
                let r1 = a[1][0] * x0;
                out[2 * j] = r0.re;
                out[2 * j + 1] = r0.im;
                out[4 + 2 * j] = r1.re;
                out[4 + 2 * j + 1] = r1.im;
            }
        },
        y_from,
        init,
        y_to,
        &opts,
        |y| 0.2 / (1.0 + y.abs()),
        &[],
        |_, _, _| {},
    )?;
    let mut m = [[Complex64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = Complex64::new(fin[4 * i + 2 * j], fin[4 * i + 2 * j + 1]);
        }
    }
    Ok(m)
}

/// Ψ⁺(y₀)⁻¹Ψ⁻(y₀) from solutions started on the asymptotic series at
/// ±Y and integrated directly.
pub fn ode_connection_oracle(d: Complex64, phi0: f64, big_y: f64, y0: f64) -> Result<Mat2> {
    if big_y < 10.0 {
        return Err(Error::Matching(format!("Y = {big_y} below the asymptotic regime")));
    }
    if d.norm() == 0.0 {
        return Ok(mat2::identity());
    }
    let lam = turning_order(d);
    let z = ray() * big_y;
    let (a, b) = match (hermite_asymptotic(lam, z), hermite_asymptotic(lam - 1.0, z)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::Matching(format!(
                "asymptotic series not converged at Y = {big_y} for |d| = {}",
                d.norm()
            )))
        }
    };
    let psi = psi_from_pair(d, phi0, big_y, &[a.0, a.1, b.0, b.1]);
    let plus_y = psi_plus_from(psi);
    let s3 = mat2::sigma3();
    let minus_neg_y = mat2::mul(&s3, &mat2::mul(&plus_y, &s3));
    let plus = integrate_matrix(d, phi0, big_y, plus_y, y0)?;
    let minus = integrate_matrix(d, phi0, -big_y, minus_neg_y, y0)?;
    Ok(mat2::mul(&mat2::inv(&plus), &minus))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn polynomial_orders() {
        let z = ray() * 1.7;
        let h0 = hermite(c(0.0, 0.0), z).unwrap();
        assert!((h0.value - 1.0).norm() < 1e-10 && h0.derivative.norm() < 1e-10);
        let h1 = hermite(c(1.0, 0.0), z).unwrap();
        assert!((h1.value - 2.0 * z).norm() < 1e-10);
        assert!((h1.derivative - 2.0).norm() < 1e-10);
        let far = hermite(c(1.0, 0.0), ray() * 12.0).unwrap();
        assert!((far.value - 24.0 * ray()).norm() < 1e-12);
    }

    #[test]
    fn off_ray_rejected() {
        assert!(hermite(c(0.0, -0.5), c(1.0, 0.0)).is_err());
    }

    #[test]
    fn ode_and_series_agree_at_switch() {
        let lam = c(0.0, -0.9);
        let z = ray() * 9.0;
        let (a, da) = hermite_asymptotic(lam, z).unwrap();
        let v = hermite_pair_on_ray(lam, &[7.99, 9.0 - 1e-9])
            .unwrap();
        assert!((v[1][0] - a).norm() < 1e-9 * a.norm());
        assert!((v[1][1] - da).norm() < 1e-8 * a.norm());
    }

    #[test]
    fn shooting_value_at_origin() {
        // integrate the defining equation inward from the asymptotic data
        // at y = 30 and compare with the Gamma representation at 0
        let lam = c(0.0, -0.5);
        let (a, da) = hermite_asymptotic(lam, ray() * 30.0).unwrap();
        let cc = ray();
        let init = [a.re, a.im, (cc * da).re, (cc * da).im];
        let opts = Dopri5Options { rtol: 1e-13, atol: 1e-14, ..Default::default() };
        let (fin, _) = rk::solve(
            |y, s: &[f64; 4], d: &mut [f64; 4]| {
                let g = c(s[0], s[1]);
                let gp = c(s[2], s[3]);
                let gpp = c(0.0, -1.0) * (2.0 * y * gp - 2.0 * lam * g);
                *d = [gp.re, gp.im, gpp.re, gpp.im];
            },
            30.0,
            init,
            0.0,
            &opts,
            |_| 0.01,
            &[],
            |_, _, _| {},
        )
        .unwrap();
        let h0 = hermite_at_zero(lam);
        assert!((c(fin[0], fin[1]) - h0).norm() < 1e-9, "{:?} vs {h0}", fin);
    }

    #[test]
    fn zero_d_trivial() {
        let p = psi_solution(c(0.0, 0.0), 0.3, 2.0).unwrap();
        assert!((p[0] - 1.0).norm() < 1e-10 && p[1].norm() == 0.0);
        let s = connection_matrix(c(0.0, 0.0));
        assert_eq!(s.s_entry, 1.0);
        let (pp, pm) = fundamental_matrices(c(0.0, 0.0), 0.0, 1.5).unwrap();
        assert!(mat2::max_abs(&mat2::sub(&pp, &mat2::identity())) < 1e-10);
        assert!(mat2::max_abs(&mat2::sub(&pm, &mat2::identity())) < 1e-10);
        let o = ode_connection_oracle(c(0.0, 0.0), 0.0, 30.0, 0.0).unwrap();
        assert_eq!(o, mat2::identity());
    }

    #[test]
    fn psi_residual_and_symmetries() {
        let d = Complex64::from_polar(0.8, 0.4);
        let phi0 = 0.7;
        let h = 5e-4;
        for &y in &[-5.0, -2.3, 0.0, 1.1, 4.9] {
            let ys: Vec<f64> = (-2..=2).map(|k| y + k as f64 * h).collect();
            let neg: Vec<f64> = ys.iter().map(|t| -t).collect();
            let ps = psi_solutions(d, phi0, &ys).unwrap();
            let pn = psi_solutions(d, phi0, &neg).unwrap();
            let a = turning_rhs(d, phi0, y);
            let sym = [
                ps.clone(),
                ps.iter().map(|p| [p[1].conj(), p[0].conj()]).collect(),
                pn.iter().map(|p| [p[0], -p[1]]).collect(),
            ];
            for (k, v) in sym.iter().enumerate() {
                for comp in 0..2 {
                    let deriv = (v[0][comp] - 8.0 * v[1][comp] + 8.0 * v[3][comp] - v[4][comp])
                        / (12.0 * h);
                    let rhs = a[comp][0] * v[2][0] + a[comp][1] * v[2][1];
                    let scale = 1.0 + v[2][0].norm() + v[2][1].norm();
                    let err = (deriv - rhs).norm() / scale;
                    assert!(err < 1e-7, "y={y} variant={k} comp={comp} {err}");
                }
            }
        }
    }

    #[test]
    fn determinant_is_constant() {
        for &m in &[0.3, 1.0, 2.0] {
            let d = Complex64::from_polar(m, 1.1);
            let want = (-PI * m * m / 4.0).exp();
            for &y in &[-4.0, 0.0, 4.0] {
                let (pp, pm) = fundamental_matrices(d, 0.7, y).unwrap();
                assert!((mat2::det(&pp) - want).norm() < 1e-9, "m={m} y={y} {} {want}", mat2::det(&pp));
                assert!((mat2::det(&pm) - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn connection_unimodular_and_linear() {
        for i in 0..50 {
            let d = Complex64::from_polar(3.0 * i as f64 / 49.0, 0.3);
            let s = connection_matrix(d);
            assert!(s.unimodularity_residual() < 1e-9, "{i} {:?}", s);
            assert!(s.s_entry >= 1.0 - 1e-12);
        }
        let xi = c(1e-3, 0.0);
        let lin = ray() * PI.sqrt() * xi;
        assert!((connection_matrix(xi).r_entry - lin).norm() < 1e-8);
    }

    #[test]
    fn reflection_for_imaginary_order() {
        let lam = c(0.0, -1.3);
        assert!((hermite_at_zero(-lam) - hermite_at_zero(lam).conj()).norm() < 1e-13);
    }

    #[test]
    fn oracle_matches_product_form() {
        let d = Complex64::from_polar(1.0, 0.25);
        let phi0 = 0.7;
        let o = ode_connection_oracle(d, phi0, 30.0, 0.0).unwrap();
        let o3 = ode_connection_oracle(d, phi0, 30.0, 3.0).unwrap();
        let s = rotated_connection(d, phi0);
        assert!(mat2::max_abs(&mat2::sub(&o, &s)) < 1e-5);
        assert!(mat2::max_abs(&mat2::sub(&o, &o3)) < 1e-6);
    }
}
