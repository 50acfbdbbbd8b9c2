//! Closed-form spherical geometry: tangent-space projection and the
//! exponential map, broadcast over arbitrary leading axes.
//!
//! These are pure, non-differentiated kernels used by the geometry
//! verification suite; the in-layer geodesic update lives in [`crate::norm`]
//! and follows the guarded-denominator formulation instead.

use crate::tensor::{DenseTensor, Real, TensorError};

/// A batch of points on spheres of per-row radius `|x|`.
///
/// The trailing axis is the feature dimension; every leading axis is
/// treated as a batch axis.
#[derive(Debug, Clone)]
pub struct SpherePoint<T: Real> {
    x: DenseTensor<T>,
    radius: Vec<T>,
}

impl<T: Real> SpherePoint<T> {
    /// Wraps a tensor of base points, caching per-row norms.
    ///
    /// Every row must have a strictly positive norm.
    pub fn new(x: DenseTensor<T>) -> Result<Self, TensorError> {
        let radius: Vec<T> = (0..x.row_count()).map(|r| x.row_norm(r)).collect();
        if let Some(row) = radius.iter().position(|&r| !(r > T::zero())) {
            return Err(TensorError::ZeroNormRow { row });
        }
        Ok(Self { x, radius })
    }

    pub fn tensor(&self) -> &DenseTensor<T> {
        &self.x
    }

    /// Cached Euclidean norm of row `r`.
    pub fn radius(&self, r: usize) -> T {
        self.radius[r]
    }

    pub fn row_count(&self) -> usize {
        self.x.row_count()
    }

    pub fn dim(&self) -> usize {
        self.x.last_dim()
    }
}

/// A batch of tangent vectors attached to the base point they were
/// projected at.
#[derive(Debug, Clone)]
pub struct TangentVector<T: Real> {
    v: DenseTensor<T>,
    base: SpherePoint<T>,
}

impl<T: Real> TangentVector<T> {
    pub fn tensor(&self) -> &DenseTensor<T> {
        &self.v
    }

    pub fn base(&self) -> &SpherePoint<T> {
        &self.base
    }

    /// Scales every component by `c`, staying in the same tangent space.
    pub fn scaled(&self, c: T) -> Self {
        let data = self.v.data().iter().map(|&x| x * c).collect();
        Self {
            v: DenseTensor::from_vec(self.v.shape().to_vec(), data).expect("shape preserved"),
            base: self.base.clone(),
        }
    }

    /// Per-row cosine between the base point and this vector; zero rows
    /// report zero. Used by the orthogonality checks.
    pub fn base_alignment(&self, r: usize) -> T {
        let d = self.v.last_dim();
        let xrow = &self.base.x.data()[r * d..(r + 1) * d];
        let vrow = &self.v.data()[r * d..(r + 1) * d];
        let dot = xrow
            .iter()
            .zip(vrow)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let vnorm = self.v.row_norm(r);
        if vnorm > T::zero() {
            dot / (self.base.radius(r) * vnorm)
        } else {
            T::zero()
        }
    }
}

/// Removes the radial component of `s` at `x`: `v = s - (x.s / |x|^2) x`
/// per row.
pub fn tangent_project<T: Real>(
    x: &SpherePoint<T>,
    s: &DenseTensor<T>,
) -> Result<TangentVector<T>, TensorError> {
    if x.x.shape() != s.shape() {
        return Err(TensorError::DimensionMismatch {
            op: "tangent_project",
            lhs: x.x.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let d = x.dim();
    let mut data = vec![T::zero(); s.numel()];
    for r in 0..x.row_count() {
        let xrow = &x.x.data()[r * d..(r + 1) * d];
        let srow = &s.data()[r * d..(r + 1) * d];
        let dot = xrow
            .iter()
            .zip(srow)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let coef = dot / (x.radius(r) * x.radius(r));
        for ((o, &sv), &xv) in data[r * d..(r + 1) * d].iter_mut().zip(srow).zip(xrow) {
            *o = sv - coef * xv;
        }
    }
    Ok(TangentVector {
        v: DenseTensor::from_vec(s.shape().to_vec(), data)?,
        base: x.clone(),
    })
}

/// Moves along the geodesic with initial velocity `v` for unit time:
/// `cos(|v|/|x|) x + |x| sin(|v|/|x|) v/|v|` per row. A zero tangent row
/// returns the base row exactly; output rows keep the base-row norm.
pub fn exp_map<T: Real>(
    x: &SpherePoint<T>,
    v: &TangentVector<T>,
) -> Result<DenseTensor<T>, TensorError> {
    if x.x.shape() != v.v.shape() {
        return Err(TensorError::DimensionMismatch {
            op: "exp_map",
            lhs: x.x.shape().to_vec(),
            rhs: v.v.shape().to_vec(),
        });
    }
    let d = x.dim();
    let mut data = vec![T::zero(); x.x.numel()];
    for r in 0..x.row_count() {
        let xrow = &x.x.data()[r * d..(r + 1) * d];
        let vrow = &v.v.data()[r * d..(r + 1) * d];
        let out = &mut data[r * d..(r + 1) * d];
        let vnorm = v.v.row_norm(r);
        if vnorm == T::zero() {
            out.copy_from_slice(xrow);
            continue;
        }
        let radius = x.radius(r);
        let angle = vnorm / radius;
        let (cos_a, sin_a) = (angle.cos(), angle.sin());
        let vscale = radius * sin_a / vnorm;
        for ((o, &xv), &vv) in out.iter_mut().zip(xrow).zip(vrow) {
            *o = cos_a * xv + vscale * vv;
        }
    }
    DenseTensor::from_vec(x.x.shape().to_vec(), data)
}

/// Projects `s` to the tangent space at `x`, scales by `step_size`, and
/// applies the exponential map.
pub fn geodesic_step<T: Real>(
    x: &SpherePoint<T>,
    s: &DenseTensor<T>,
    step_size: T,
) -> Result<DenseTensor<T>, TensorError> {
    let v = tangent_project(x, s)?.scaled(step_size);
    exp_map(x, &v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn point(data: &[f64]) -> SpherePoint<f64> {
        SpherePoint::new(DenseTensor::from_vec(vec![1, data.len()], data.to_vec()).unwrap())
            .unwrap()
    }

    fn row(t: &DenseTensor<f64>) -> &[f64] {
        t.data()
    }

    #[test]
    fn project_keeps_tangential_input() {
        let x = point(&[1.0, 0.0]);
        let s = DenseTensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let v = tangent_project(&x, &s).unwrap();
        assert_eq!(row(v.tensor()), &[0.0, 1.0]);
    }

    #[test]
    fn project_removes_radial_input() {
        let x = point(&[1.0, 0.0]);
        let s = DenseTensor::from_vec(vec![1, 2], vec![5.0, 0.0]).unwrap();
        let v = tangent_project(&x, &s).unwrap();
        assert_eq!(row(v.tensor()), &[0.0, 0.0]);
    }

    #[test]
    fn project_hand_evaluated_mixed_input() {
        let x = point(&[1.0, 1.0]);
        let s = DenseTensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = tangent_project(&x, &s).unwrap();
        assert!((v.tensor().data()[0] - 0.5).abs() < 1e-15);
        assert!((v.tensor().data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn exp_map_zero_vector_is_identity() {
        let x = point(&[1.0, 0.0]);
        let v = tangent_project(&x, &DenseTensor::zeros(vec![1, 2])).unwrap();
        let y = exp_map(&x, &v).unwrap();
        assert_eq!(row(&y), &[1.0, 0.0]);
    }

    #[test]
    fn exp_map_quarter_turn() {
        let x = point(&[1.0, 0.0]);
        let s = DenseTensor::from_vec(vec![1, 2], vec![0.0, FRAC_PI_2]).unwrap();
        let v = tangent_project(&x, &s).unwrap();
        let y = exp_map(&x, &v).unwrap();
        assert!(y.data()[0].abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn exp_map_preserves_non_unit_radius() {
        let x = point(&[2.0, 0.0]);
        let s = DenseTensor::from_vec(vec![1, 2], vec![0.0, PI]).unwrap();
        let v = tangent_project(&x, &s).unwrap();
        let y = exp_map(&x, &v).unwrap();
        assert!(y.data()[0].abs() < 1e-15);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
        assert!((y.row_norm(0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn geodesic_step_composition() {
        let x = point(&[1.0, 0.0]);
        let s = DenseTensor::from_vec(vec![1, 2], vec![0.0, 1.0]).unwrap();
        // zero step is the identity
        let y = geodesic_step(&x, &s, 0.0).unwrap();
        assert_eq!(row(&y), &[1.0, 0.0]);
        // quarter-circle step
        let y = geodesic_step(&x, &s, FRAC_PI_2).unwrap();
        assert!(y.data()[0].abs() < 1e-15 && (y.data()[1] - 1.0).abs() < 1e-15);
        // radial directions project to zero: any step stays put
        let radial = DenseTensor::from_vec(vec![1, 2], vec![3.0, 0.0]).unwrap();
        let y = geodesic_step(&x, &radial, 7.5).unwrap();
        assert_eq!(row(&y), &[1.0, 0.0]);
    }

    #[test]
    fn zero_norm_base_point_is_rejected() {
        let x = DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(SpherePoint::new(x).is_err());
    }
}
