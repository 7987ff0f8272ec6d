//! Smoothstep interpolation between a near-field and a far-field potential.
//!
//! With `D = ‖x_I − x_J‖` and `φ = Φ((D − d1)/(d2 − d1))` the blend is
//! `P = (1 − φ)·P_near + φ·P_far`, whose derivatives carry the extra
//! product-rule terms through `∇φ`.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, SVector};

use crate::eval::{positions, union_support, Derivs, PotentialEval};
use crate::geometry::Vec3;

/// `Φ(t) = clamp(6t⁵ − 15t⁴ + 10t³, 0, 1)`.
pub fn smoothstep(t: f64) -> f64 {
    smoothstep_derivs(t).0
}

/// `(Φ, Φ', Φ'')`.
pub fn smoothstep_derivs(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0, 0.0)
    } else if t >= 1.0 {
        (1.0, 0.0, 0.0)
    } else {
        let t2 = t * t;
        (
            t2 * t * (10.0 + t * (-15.0 + 6.0 * t)),
            30.0 * t2 * (1.0 - t) * (1.0 - t),
            60.0 * t * (1.0 - t) * (1.0 - 2.0 * t),
        )
    }
}

/// Blend band `[d1, d2]` in center distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlendSpec {
    pub d1: f64,
    pub d2: f64,
}

impl BlendSpec {
    pub fn new(d1: f64, d2: f64) -> Self {
        assert!(0.0 < d1 && d1 < d2, "blend band needs 0 < d1 < d2");
        Self { d1, d2 }
    }

    /// `d1 = R_I + R_J`, `d2 = (1 + ε)·d1`.
    pub fn for_radii(r_i: f64, r_j: f64, eps: f64) -> Self {
        let d1 = r_i + r_j;
        Self::new(d1, (1.0 + eps) * d1)
    }

    /// `(φ, dφ/dD, d²φ/dD²)`.
    pub fn weight(&self, dist: f64) -> (f64, f64, f64) {
        let w = self.d2 - self.d1;
        let (p, p1, p2) = smoothstep_derivs((dist - self.d1) / w);
        (p, p1 / w, p2 / (w * w))
    }
}

/// Dense value/gradient/Hessian over a fixed local coordinate list.
#[derive(Clone, Debug)]
pub struct DenseEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl DenseEval {
    pub fn zero(n: usize) -> Self {
        Self { value: 0.0, grad: DVector::zeros(n), hess: DMatrix::zeros(n, n) }
    }
}

/// Center distance `D` with its derivatives in `(c_i, c_j)`.
pub fn center_distance(ci: &Vec3, cj: &Vec3) -> (f64, SVector<f64, 6>, SMatrix<f64, 6, 6>) {
    let delta = ci - cj;
    let dist = delta.norm();
    let u = delta / dist;
    let mut g = SVector::<f64, 6>::zeros();
    g.fixed_rows_mut::<3>(0).copy_from(&u);
    g.fixed_rows_mut::<3>(3).copy_from(&(-u));
    let p = (Matrix3::identity() - u * u.transpose()) / dist;
    let mut h = SMatrix::<f64, 6, 6>::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&p);
    h.fixed_view_mut::<3, 3>(3, 3).copy_from(&p);
    h.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-p));
    h.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-p));
    (dist, g, h)
}

/// Blend weight `φ` as a function of `(c_i, c_j)`.
pub fn blend_weight(spec: &BlendSpec, ci: &Vec3, cj: &Vec3) -> (f64, SVector<f64, 6>, SMatrix<f64, 6, 6>) {
    let (dist, dg, dh) = center_distance(ci, cj);
    let (p, p1, p2) = spec.weight(dist);
    (p, dg * p1, dg * dg.transpose() * p2 + dh * p1)
}

/// `(1−φ)·A + φ·B` over one dense coordinate list. `near` may be `None`
/// only when `φ = 1`.
pub fn blend_dense(near: Option<&DenseEval>, far: &DenseEval, phi: &DenseEval, derivs: Derivs) -> DenseEval {
    let w = phi.value;
    if w >= 1.0 {
        return far.clone();
    }
    let a = near.expect("near term is required below d2");
    if w <= 0.0 {
        return a.clone();
    }
    let diff = far.value - a.value;
    let mut out = DenseEval {
        value: (1.0 - w) * a.value + w * far.value,
        grad: DVector::zeros(0),
        hess: DMatrix::zeros(0, 0),
    };
    if derivs.grad() {
        out.grad = &a.grad * (1.0 - w) + &far.grad * w + &phi.grad * diff;
    }
    if derivs.hess() {
        let dg = &far.grad - &a.grad;
        out.hess = &a.hess * (1.0 - w)
            + &far.hess * w
            + &phi.grad * dg.transpose()
            + &dg * phi.grad.transpose()
            + &phi.hess * diff;
    }
    out
}

/// Blend of sparse evals over the union of their supports.
///
/// `near` may be `None` only when `φ = 1`; an infinite near term inside the
/// band propagates as infinite.
pub fn blend(near: Option<&PotentialEval>, far: &PotentialEval, phi: &PotentialEval, derivs: Derivs) -> PotentialEval {
    let w = phi.value;
    if w >= 1.0 {
        return far.clone();
    }
    let a = near.expect("near term is required below d2");
    if w <= 0.0 {
        return a.clone();
    }
    if a.infinite || far.infinite {
        return PotentialEval::infinite(derivs);
    }
    let support = union_support([a.support.as_slice(), far.support.as_slice(), phi.support.as_slice()]);
    let lift = |e: &PotentialEval| {
        let (g, h) = e.embedded(&support);
        DenseEval { value: e.value, grad: g, hess: h }
    };
    let out = blend_dense(Some(&lift(a)), &lift(far), &lift(phi), derivs);
    debug_assert!(positions(&a.support, &support).len() == a.support.len());
    PotentialEval {
        value: out.value,
        infinite: false,
        derivs,
        support,
        grad: out.grad,
        hess: out.hess,
    }
}
