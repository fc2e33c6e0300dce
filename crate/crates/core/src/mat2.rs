//! 2×2 complex matrices and spinors.

use num_complex::Complex64;

pub type Mat2 = [[Complex64; 2]; 2];
pub type Vec2 = [Complex64; 2];

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

pub fn identity() -> Mat2 {
    [[ONE, ZERO], [ZERO, ONE]]
}

pub fn sigma1() -> Mat2 {
    [[ZERO, ONE], [ONE, ZERO]]
}

pub fn sigma3() -> Mat2 {
    [[ONE, ZERO], [ZERO, -ONE]]
}

/// e^{iθσ₃}.
pub fn phase(theta: f64) -> Mat2 {
    [
        [Complex64::from_polar(1.0, theta), ZERO],
        [ZERO, Complex64::from_polar(1.0, -theta)],
    ]
}

/// e^{zσ₃} for complex z.
pub fn exp_sigma3(z: Complex64) -> Mat2 {
    [[z.exp(), ZERO], [ZERO, (-z).exp()]]
}

pub fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[ZERO; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub fn apply(a: &Mat2, v: &Vec2) -> Vec2 {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

pub fn det(a: &Mat2) -> Complex64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

pub fn inv(a: &Mat2) -> Mat2 {
    let d = det(a);
    [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]]
}

pub fn sub(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] - b[0][0], a[0][1] - b[0][1]],
        [a[1][0] - b[1][0], a[1][1] - b[1][1]],
    ]
}

/// Largest entry modulus.
pub fn max_abs(a: &Mat2) -> f64 {
    a.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn conj(a: &Mat2) -> Mat2 {
    [
        [a[0][0].conj(), a[0][1].conj()],
        [a[1][0].conj(), a[1][1].conj()],
    ]
}

pub fn norm2(v: &Vec2) -> f64 {
    (v[0].norm_sqr() + v[1].norm_sqr()).sqrt()
}
