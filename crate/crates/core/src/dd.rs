//! Double-double complex helpers on top of `twofloat`.

use num_complex::{Complex, Complex64};
use twofloat::TwoFloat;

pub type Cdd = Complex<TwoFloat>;

pub fn dd(x: f64) -> TwoFloat {
    TwoFloat::from(x)
}

pub fn cdd(z: Complex64) -> Cdd {
    Complex::new(dd(z.re), dd(z.im))
}

pub fn to_c64(z: Cdd) -> Complex64 {
    Complex64::new(z.re.hi() + z.re.lo(), z.im.hi() + z.im.lo())
}

pub fn to_f64(x: TwoFloat) -> f64 {
    x.hi() + x.lo()
}

pub fn norm_sqr(z: &Cdd) -> TwoFloat {
    z.re * z.re + z.im * z.im
}

/// a / b at full double-double precision; `TwoFloat`'s own division
/// drops the low word.
pub fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let bh = b.hi() + b.lo();
    let q1 = a.hi() / bh;
    let r1 = a - b * dd(q1);
    let q2 = r1.hi() / bh;
    let r2 = r1 - b * dd(q2);
    let q3 = r2.hi() / bh;
    dd(q1) + dd(q2) + dd(q3)
}

pub fn cdiv(a: Cdd, b: Cdd) -> Cdd {
    let n = norm_sqr(&b);
    let p = a * b.conj();
    Complex::new(div(p.re, n), div(p.im, n))
}

/// Unit-modulus e^{iθ}, renormalized in double-double.
pub fn unit(theta: f64) -> Cdd {
    let (s, c) = theta.sin_cos();
    let z = Complex::new(dd(c), dd(s));
    let n = norm_sqr(&z).sqrt();
    Complex::new(div(z.re, n), div(z.im, n))
}

pub type Mat2dd = [[Cdd; 2]; 2];

pub fn mat_mul(a: &Mat2dd, b: &Mat2dd) -> Mat2dd {
    let z = Complex::new(dd(0.0), dd(0.0));
    let mut c = [[z; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub fn mat_det(a: &Mat2dd) -> Cdd {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

pub fn mat_inv(a: &Mat2dd) -> Mat2dd {
    let d = mat_det(a);
    [
        [cdiv(a[1][1], d), cdiv(-a[0][1], d)],
        [cdiv(-a[1][0], d), cdiv(a[0][0], d)],
    ]
}
