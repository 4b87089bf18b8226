//! Gyrovector algebra on the Poincaré ball of curvature `-c`.
//!
//! The ball is `{x in R^n : c |x|^2 < 1}`. Every constructing operation
//! projects its result back to radius `(1 - BALL_EPS) / sqrt(c)` so that
//! distances and logarithms stay finite, and every `atanh` argument is
//! clamped to [`ATANH_CLAMP`].
//!
//! Two layers are exposed:
//!
//! * typed operations on [`BallPoint`] / [`TangentVector`] that check
//!   curvature and dimension agreement, and
//! * the [`raw`] slice kernels they delegate to, which the gradient tape
//!   reuses for its forward passes.
//!
//! ```
//! use hyperipc::geometry::{hyp_distance, BallPoint, Curvature};
//!
//! let c = Curvature::new(1.0).unwrap();
//! let o = BallPoint::origin(2, c);
//! let y = BallPoint::new(vec![0.5, 0.0], c).unwrap();
//! let d = hyp_distance(&o, &y).unwrap();
//! assert!((d - 3f64.ln()).abs() < 1e-12);
//! ```

use thiserror::Error;

/// Relative margin kept between projected points and the ball boundary.
pub const BALL_EPS: f64 = 1e-5;

/// Upper bound applied to every `atanh` argument.
pub const ATANH_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("curvature must be positive and finite, got {0}")]
    InvalidCurvature(f64),
    #[error("curvature mismatch: {0} vs {1}")]
    CurvatureMismatch(f64, f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("point lies outside the ball: c|x|^2 = {0}")]
    OutsideBall(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("operation requires at least one point")]
    Empty,
    #[error("distance argument saturated: sqrt(c)|-x + y| = {0}")]
    Saturated(f64),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Positive curvature magnitude `c` (the space has sectional curvature `-c`).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Self(c))
        } else {
            Err(GeometryError::InvalidCurvature(c))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Euclidean radius of the ball, `1 / sqrt(c)`.
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }

    /// Largest norm a projected point may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - BALL_EPS) / self.0.sqrt()
    }
}

/// A point strictly inside the Poincaré ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    c: Curvature,
}

impl BallPoint {
    /// Wraps `coords` without projecting; fails unless `c|x|^2 < 1`.
    pub fn new(coords: Vec<f64>, c: Curvature) -> Result<Self> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let cn2 = c.get() * raw::norm_sq(&coords);
        if cn2 >= 1.0 {
            return Err(GeometryError::OutsideBall(cn2));
        }
        Ok(Self { coords, c })
    }

    pub fn origin(dim: usize, c: Curvature) -> Self {
        Self {
            coords: vec![0.0; dim],
            c,
        }
    }

    pub(crate) fn from_raw(coords: Vec<f64>, c: Curvature) -> Self {
        debug_assert!(c.get() * raw::norm_sq(&coords) < 1.0);
        Self { coords, c }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn norm(&self) -> f64 {
        raw::norm(&self.coords)
    }

    /// Gyrogroup inverse `-x`.
    pub fn neg(&self) -> Self {
        Self {
            coords: self.coords.iter().map(|v| -v).collect(),
            c: self.c,
        }
    }

    /// Hyperbolic distance to the origin.
    pub fn radius(&self) -> f64 {
        raw::dist_to_origin(&self.coords, self.c.get())
    }

    fn same_space(&self, other: &Self) -> Result<()> {
        if self.c != other.c {
            return Err(GeometryError::CurvatureMismatch(self.c.get(), other.c.get()));
        }
        if self.dim() != other.dim() {
            return Err(GeometryError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(())
    }
}

/// Euclidean vector in the tangent space at some ball point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(pub Vec<f64>);

impl TangentVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        raw::norm(&self.0)
    }
}

/// `lambda_c^x = 2 / (1 - c|x|^2)`.
pub fn conformal_factor(x: &BallPoint) -> Result<f64> {
    let cn2 = x.c.get() * raw::norm_sq(&x.coords);
    if cn2 >= 1.0 {
        return Err(GeometryError::OutsideBall(cn2));
    }
    Ok(2.0 / (1.0 - cn2))
}

/// Möbius addition `x (+)_c y`, projected into the ball.
pub fn mobius_add(x: &BallPoint, y: &BallPoint) -> Result<BallPoint> {
    x.same_space(y)?;
    let c = x.c.get();
    let mut out = raw::mobius_add(&x.coords, &y.coords, c);
    raw::project_in_place(&mut out, c);
    Ok(BallPoint::from_raw(out, x.c))
}

/// Möbius scalar multiplication `r (x)_c x`.
pub fn mobius_scalar_mul(r: f64, x: &BallPoint) -> BallPoint {
    let c = x.c.get();
    let mut out = raw::mobius_scalar_mul(r, &x.coords, c);
    raw::project_in_place(&mut out, c);
    BallPoint::from_raw(out, x.c)
}

/// Geodesic distance `(2/sqrt c) atanh(sqrt c |-x (+)_c y|)`.
pub fn hyp_distance(x: &BallPoint, y: &BallPoint) -> Result<f64> {
    x.same_space(y)?;
    let c = x.c.get();
    let s = c.sqrt();
    let u = raw::mobius_add_neg(&x.coords, &y.coords, c);
    let arg = s * raw::norm(&u);
    if arg >= 1.0 {
        return Err(GeometryError::Saturated(arg));
    }
    Ok(2.0 / s * arg.min(ATANH_CLAMP).atanh())
}

/// Exponential map at `x`; `exp_map(x, 0) == x`.
pub fn exp_map(x: &BallPoint, v: &TangentVector) -> Result<BallPoint> {
    if x.dim() != v.0.len() {
        return Err(GeometryError::DimensionMismatch(x.dim(), v.0.len()));
    }
    if v.0.iter().any(|a| !a.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    Ok(BallPoint::from_raw(
        raw::exp_map(&x.coords, &v.0, x.c.get()),
        x.c,
    ))
}

/// Logarithmic map at `x`, the inverse of [`exp_map`].
pub fn log_map(x: &BallPoint, y: &BallPoint) -> Result<TangentVector> {
    x.same_space(y)?;
    Ok(TangentVector(raw::log_map(&x.coords, &y.coords, x.c.get())))
}

/// Conformal-factor-weighted gyromidpoint of a nonempty set of points.
pub fn gyromidpoint(points: &[BallPoint]) -> Result<BallPoint> {
    let first = points.first().ok_or(GeometryError::Empty)?;
    for p in &points[1..] {
        first.same_space(p)?;
    }
    let rows: Vec<&[f64]> = points.iter().map(|p| p.coords()).collect();
    let mut out = raw::gyromidpoint(&rows, first.c.get());
    raw::project_in_place(&mut out, first.c.get());
    Ok(BallPoint::from_raw(out, first.c))
}

/// Rescales `x` onto the clamp radius if it lies on or beyond it.
pub fn project_to_ball(x: &[f64], c: Curvature) -> BallPoint {
    let mut out = x.to_vec();
    raw::project_in_place(&mut out, c.get());
    BallPoint::from_raw(out, c)
}

/// Slice kernels shared by the typed API and the gradient tape.
///
/// None of these check dimensions; callers guarantee equal lengths.
pub mod raw {
    use super::{ATANH_CLAMP, BALL_EPS};

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[inline]
    pub fn norm_sq(a: &[f64]) -> f64 {
        dot(a, a)
    }

    #[inline]
    pub fn norm(a: &[f64]) -> f64 {
        norm_sq(a).sqrt()
    }

    #[inline]
    pub fn conformal_factor(x: &[f64], c: f64) -> f64 {
        2.0 / (1.0 - c * norm_sq(x))
    }

    #[inline]
    pub fn atanh_clamped(a: f64) -> f64 {
        a.min(ATANH_CLAMP).atanh()
    }

    /// Scalars of the Möbius sum: `(x_coef, y_coef, denominator)` such that
    /// `x (+) y = (x_coef * x + y_coef * y) / denominator`.
    #[inline]
    pub(crate) fn mobius_coefs(xy: f64, x2: f64, y2: f64, c: f64) -> (f64, f64, f64) {
        let a = 1.0 + 2.0 * c * xy + c * y2;
        let b = 1.0 - c * x2;
        let d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        (a, b, d.max(f64::MIN_POSITIVE))
    }

    pub fn mobius_add(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        let (a, b, d) = mobius_coefs(dot(x, y), norm_sq(x), norm_sq(y), c);
        x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / d).collect()
    }

    /// `(-x) (+) y` without materialising `-x`.
    pub fn mobius_add_neg(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        if x == y {
            return vec![0.0; x.len()];
        }
        let (a, b, d) = mobius_coefs(-dot(x, y), norm_sq(x), norm_sq(y), c);
        x.iter().zip(y).map(|(xi, yi)| (-a * xi + b * yi) / d).collect()
    }

    /// Returns true if the point was rescaled.
    pub fn project_in_place(x: &mut [f64], c: f64) -> bool {
        let max_norm = (1.0 - BALL_EPS) / c.sqrt();
        let n = norm(x);
        if n >= max_norm && n > 0.0 {
            let k = max_norm / n;
            x.iter_mut().for_each(|v| *v *= k);
            true
        } else {
            false
        }
    }

    pub fn mobius_scalar_mul(r: f64, x: &[f64], c: f64) -> Vec<f64> {
        let n = norm(x);
        if n == 0.0 {
            return x.iter().map(|v| r * v).collect();
        }
        let s = c.sqrt();
        let k = (r * atanh_clamped(s * n)).tanh() / (s * n);
        x.iter().map(|v| k * v).collect()
    }

    pub fn dist(x: &[f64], y: &[f64], c: f64) -> f64 {
        let s = c.sqrt();
        2.0 / s * atanh_clamped(s * norm(&mobius_add_neg(x, y, c)))
    }

    pub fn dist_to_origin(x: &[f64], c: f64) -> f64 {
        let s = c.sqrt();
        2.0 / s * atanh_clamped(s * norm(x))
    }

    /// Scale `phi` such that the exp-map displacement is `phi * v`.
    #[inline]
    pub(crate) fn lift_scale(lambda: f64, n: f64, s: f64) -> f64 {
        if n == 0.0 {
            lambda / 2.0
        } else {
            (s * lambda * n / 2.0).tanh() / (s * n)
        }
    }

    pub fn exp_map(x: &[f64], v: &[f64], c: f64) -> Vec<f64> {
        let n = norm(v);
        if n == 0.0 {
            let mut out = x.to_vec();
            project_in_place(&mut out, c);
            return out;
        }
        let phi = lift_scale(conformal_factor(x, c), n, c.sqrt());
        let w: Vec<f64> = v.iter().map(|vi| phi * vi).collect();
        let mut out = mobius_add(x, &w, c);
        project_in_place(&mut out, c);
        out
    }

    pub fn log_map(x: &[f64], y: &[f64], c: f64) -> Vec<f64> {
        let u = mobius_add_neg(x, y, c);
        let n = norm(&u);
        if n == 0.0 {
            return vec![0.0; x.len()];
        }
        let s = c.sqrt();
        let k = 2.0 / (s * conformal_factor(x, c)) * atanh_clamped(s * n) / n;
        u.into_iter().map(|ui| k * ui).collect()
    }

    /// Weighted sum `sum lambda_i z_i / sum (lambda_i - 1)` that precedes the
    /// half gyromultiplication of the midpoint.
    pub(crate) fn midpoint_aggregate(points: &[&[f64]], c: f64) -> (Vec<f64>, Vec<f64>, f64) {
        let dim = points[0].len();
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        let mut lambdas = Vec::with_capacity(points.len());
        for p in points {
            let lam = conformal_factor(p, c);
            lambdas.push(lam);
            for (acc, v) in num.iter_mut().zip(p.iter()) {
                *acc += lam * v;
            }
            den += lam - 1.0;
        }
        num.iter_mut().for_each(|v| *v /= den);
        (num, lambdas, den)
    }

    /// Unprojected gyromidpoint.
    pub fn gyromidpoint(points: &[&[f64]], c: f64) -> Vec<f64> {
        let (agg, _, _) = midpoint_aggregate(points, c);
        mobius_scalar_mul(0.5, &agg, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c1() -> Curvature {
        Curvature::new(1.0).unwrap()
    }

    fn pt(v: &[f64], c: Curvature) -> BallPoint {
        BallPoint::new(v.to_vec(), c).unwrap()
    }

    #[test]
    fn conformal_factor_values() {
        let c = c1();
        assert_eq!(conformal_factor(&BallPoint::origin(3, c)).unwrap(), 2.0);
        let x = pt(&[0.5, 0.0], c);
        assert!((conformal_factor(&x).unwrap() - 8.0 / 3.0).abs() < 1e-15);
        let tiny = Curvature::new(1e-300).unwrap();
        assert_eq!(conformal_factor(&pt(&[0.9, 0.3], tiny)).unwrap(), 2.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
        assert!(BallPoint::new(vec![1.0, 0.0], c1()).is_err());
        let a = BallPoint::origin(2, c1());
        let b = BallPoint::origin(2, Curvature::new(0.5).unwrap());
        assert!(matches!(
            mobius_add(&a, &b),
            Err(GeometryError::CurvatureMismatch(..))
        ));
        assert!(matches!(
            hyp_distance(&a, &BallPoint::origin(3, c1())),
            Err(GeometryError::DimensionMismatch(2, 3))
        ));
        assert_eq!(gyromidpoint(&[]), Err(GeometryError::Empty));
    }

    #[test]
    fn mobius_add_identity_inverse_and_collinear() {
        let c = c1();
        let x = pt(&[0.3, -0.2, 0.1], c);
        let o = BallPoint::origin(3, c);
        assert_eq!(mobius_add(&x, &o).unwrap(), x);
        let z = mobius_add(&x.neg(), &x).unwrap();
        assert!(z.norm() < 1e-15);
        let s = mobius_add(&pt(&[0.3, 0.0], c), &pt(&[0.4, 0.0], c)).unwrap();
        assert!((s.coords()[0] - 0.7 / 1.12).abs() < 1e-15);
        assert_eq!(s.coords()[1], 0.0);
    }

    #[test]
    fn scalar_mul_cases() {
        let c = Curvature::new(0.7).unwrap();
        let x = pt(&[0.4, 0.5, -0.3], c);
        let one = mobius_scalar_mul(1.0, &x);
        for (a, b) in one.coords().iter().zip(x.coords()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(mobius_scalar_mul(0.0, &x).norm(), 0.0);
        let back = mobius_scalar_mul(0.5, &mobius_scalar_mul(2.0, &x));
        for (a, b) in back.coords().iter().zip(x.coords()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distance_closed_forms() {
        let c = c1();
        let o = BallPoint::origin(2, c);
        let y = pt(&[0.5, 0.0], c);
        assert!((hyp_distance(&o, &y).unwrap() - 1.098_612_288_668_109_6).abs() < 1e-14);
        assert_eq!(hyp_distance(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn exp_log_at_origin() {
        let c = c1();
        let o = BallPoint::origin(2, c);
        let a = 0.8;
        let y = exp_map(&o, &TangentVector(vec![a, 0.0])).unwrap();
        assert!((y.coords()[0] - a.tanh()).abs() < 1e-15);
        let v = log_map(&o, &y).unwrap();
        assert!((v.0[0] - a).abs() < 1e-14);
        let x = pt(&[0.1, 0.2], c);
        assert_eq!(exp_map(&x, &TangentVector::zeros(2)).unwrap(), x);
        assert_eq!(log_map(&x, &x).unwrap(), TangentVector::zeros(2));
    }

    #[test]
    fn projection_clamps_exactly() {
        let p = project_to_ball(&[2.0, 0.0], c1());
        assert!((p.norm() - (1.0 - 1e-5)).abs() < 1e-15);
        let q = project_to_ball(&[0.3, 0.1], c1());
        assert_eq!(q.coords(), &[0.3, 0.1]);
    }

    #[test]
    fn midpoint_degenerate_cases() {
        let c = Curvature::new(0.3).unwrap();
        let x = pt(&[0.7, -0.9], c);
        let m = gyromidpoint(std::slice::from_ref(&x)).unwrap();
        for (a, b) in m.coords().iter().zip(x.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
        let m0 = gyromidpoint(&[x.clone(), x.neg()]).unwrap();
        assert!(m0.norm() < 1e-15);
    }

    #[test]
    fn near_boundary_sums_stay_finite() {
        let c = c1();
        let r = c.max_norm();
        let x = project_to_ball(&[r, 0.0], c);
        let y = project_to_ball(&[r * 0.6, r * 0.8], c);
        let s = mobius_add(&x, &y).unwrap();
        assert!(c.get() * raw::norm_sq(s.coords()) <= (1.0 - BALL_EPS).powi(2) + 1e-15);
        assert!(hyp_distance(&x, &s).unwrap().is_finite());
        assert!(hyp_distance(&x.neg(), &s).unwrap().is_finite());
    }
}
