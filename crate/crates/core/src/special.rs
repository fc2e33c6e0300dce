//! Complex Gamma function (Lanczos, g = 7) and the Hermite function
//! H_λ at the origin.

use num_complex::Complex64;
use std::f64::consts::PI;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// ln Γ(z) for Re z ≥ 1/2 (principal branch of the Lanczos form).
fn ln_gamma_right(z: Complex64) -> Complex64 {
    let z = z - 1.0;
    let mut x = Complex64::new(LANCZOS_COEF[0], 0.0);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Γ(z) for complex z, reflection formula on Re z < 1/2.
pub fn gamma(z: Complex64) -> Complex64 {
    if z.re < 0.5 {
        PI / ((PI * z).sin() * gamma(1.0 - z))
    } else {
        ln_gamma_right(z).exp()
    }
}

/// 1/Γ(z); entire, exactly zero at the non-positive integers.
pub fn rgamma(z: Complex64) -> Complex64 {
    if z.re < 0.5 {
        if z.im == 0.0 && z.re == z.re.round() {
            return Complex64::new(0.0, 0.0);
        }
        (PI * z).sin() / PI * gamma(1.0 - z)
    } else {
        (-ln_gamma_right(z)).exp()
    }
}

/// H_λ(0) = 2^λ √π / Γ((1−λ)/2).
pub fn hermite_at_zero(lambda: Complex64) -> Complex64 {
    let two_pow = (lambda * std::f64::consts::LN_2).exp();
    two_pow * PI.sqrt() * rgamma((1.0 - lambda) * 0.5)
}

/// H_λ′(0) = −2^{λ+1} √π / Γ(−λ/2).
pub fn hermite_derivative_at_zero(lambda: Complex64) -> Complex64 {
    let two_pow = ((lambda + 1.0) * std::f64::consts::LN_2).exp();
    -two_pow * PI.sqrt() * rgamma(-lambda * 0.5)
}
