//! Exponential-coordinate rotations with first and second derivatives.
//!
//! `R(θ) = I + a(s)·K + b(s)·K²` with `K = [θ]×`, `s = ‖θ‖²`,
//! `a = sin r / r` and `b = (1 − cos r)/r²`. Both coefficients are expanded as
//! power series in `s` near the origin so every derivative stays finite there.

use crate::geometry::{Mat3, Vec3};

/// Below this `s = ‖θ‖²` the coefficients use their Taylor series.
const SERIES_LIMIT: f64 = 4.0;
const SERIES_TERMS: usize = 24;

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `(f, f_s, f_ss)` for `a(s)` and `b(s)`.
fn coefficients(s: f64) -> ([f64; 3], [f64; 3]) {
    if s < SERIES_LIMIT {
        // a = Σ (−s)^k/(2k+1)!,  b = Σ (−s)^k/(2k+2)!
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        let mut fact_a = 1.0; // (2k+1)!
        let mut fact_b = 2.0; // (2k+2)!
        for k in 0..SERIES_TERMS {
            let kf = k as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let p0 = s.powi(k as i32);
            let p1 = if k >= 1 { kf * s.powi(k as i32 - 1) } else { 0.0 };
            let p2 = if k >= 2 { kf * (kf - 1.0) * s.powi(k as i32 - 2) } else { 0.0 };
            a[0] += sign * p0 / fact_a;
            a[1] += sign * p1 / fact_a;
            a[2] += sign * p2 / fact_a;
            b[0] += sign * p0 / fact_b;
            b[1] += sign * p1 / fact_b;
            b[2] += sign * p2 / fact_b;
            fact_a *= (2.0 * kf + 2.0) * (2.0 * kf + 3.0);
            fact_b *= (2.0 * kf + 3.0) * (2.0 * kf + 4.0);
        }
        (a, b)
    } else {
        let r = s.sqrt();
        let (sn, cs) = r.sin_cos();
        let a = sn / r;
        let a_r = (r * cs - sn) / (r * r);
        let a_rr = (-r * r * sn - 2.0 * r * cs + 2.0 * sn) / (r * r * r);
        let omc = 1.0 - cs;
        let b = omc / (r * r);
        let b_r = (r * sn - 2.0 * omc) / (r * r * r);
        let b_rr = (r * r * cs - 4.0 * r * sn + 6.0 * omc) / (r * r * r * r);
        let to_s = |f_r: f64, f_rr: f64| (f_r / (2.0 * r), (f_rr - f_r / r) / (4.0 * r * r));
        let (a_s, a_ss) = to_s(a_r, a_rr);
        let (b_s, b_ss) = to_s(b_r, b_rr);
        ([a, a_s, a_ss], [b, b_s, b_ss])
    }
}

pub fn rotation_matrix(theta: &Vec3) -> Mat3 {
    let (a, b) = coefficients(theta.norm_squared());
    let k = skew(theta);
    Mat3::identity() + k * a[0] + k * k * b[0]
}

/// Rotation matrix with its first and second partial derivatives in `θ`.
#[derive(Clone, Debug)]
pub struct RotationJet {
    pub r: Mat3,
    pub d1: [Mat3; 3],
    pub d2: [[Mat3; 3]; 3],
}

impl RotationJet {
    pub fn new(theta: &Vec3) -> Self {
        let s = theta.norm_squared();
        let (a, b) = coefficients(s);
        let k = skew(theta);
        let k2 = k * k;
        let e: [Mat3; 3] = [skew(&Vec3::x()), skew(&Vec3::y()), skew(&Vec3::z())];
        // Chain s = ‖θ‖² into the coefficients.
        let da = |i: usize| a[1] * 2.0 * theta[i];
        let db = |i: usize| b[1] * 2.0 * theta[i];
        let dda = |i: usize, j: usize| a[2] * 4.0 * theta[i] * theta[j] + if i == j { 2.0 * a[1] } else { 0.0 };
        let ddb = |i: usize, j: usize| b[2] * 4.0 * theta[i] * theta[j] + if i == j { 2.0 * b[1] } else { 0.0 };
        let dk2 = |i: usize| e[i] * k + k * e[i];

        let d1 = [0, 1, 2].map(|i| k * da(i) + e[i] * a[0] + k2 * db(i) + dk2(i) * b[0]);
        let d2 = [0, 1, 2].map(|i| {
            [0, 1, 2].map(|j| {
                k * dda(i, j)
                    + e[j] * da(i)
                    + e[i] * da(j)
                    + k2 * ddb(i, j)
                    + dk2(j) * db(i)
                    + dk2(i) * db(j)
                    + (e[i] * e[j] + e[j] * e[i]) * b[0]
            })
        });
        Self {
            r: Mat3::identity() + k * a[0] + k2 * b[0],
            d1,
            d2,
        }
    }
}
