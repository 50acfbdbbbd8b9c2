//! Normalization layers: RMSNorm and the geodesic residual update.

use crate::params::{ParamId, ParamStore};
use crate::schedule::{schedule_factor, DecayKind, LayerContext};
use crate::tape::TensorRef;
use crate::tensor::{DenseTensor, Real, TensorError};
use thiserror::Error;

const TANGENT_NORM_FLOOR: f64 = 1e-8;
const RADIUS_FLOOR: f64 = 1e-6;
const RMSNORM_FLOOR: f64 = 1e-12;

/// Rescales every row to norm `sqrt(D)`. The optional per-dimension gain
/// is off by default so the output norm is exact.
#[derive(Debug, Clone)]
pub struct RmsNormLayer {
    dim: usize,
    gain: Option<ParamId>,
}

impl RmsNormLayer {
    pub fn new(dim: usize) -> Self {
        Self { dim, gain: None }
    }

    pub fn with_gain<T: Real>(dim: usize, store: &mut ParamStore<T>, name: &str) -> Self {
        let gain = store.register(name, DenseTensor::full(vec![dim], T::one()));
        Self {
            dim,
            gain: Some(gain),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(v / max(|v|, 1e-12)) * sqrt(D)` per row, gain afterward if enabled.
    pub fn forward<T: Real>(
        &self,
        v: &TensorRef<T>,
        store: &ParamStore<T>,
    ) -> Result<TensorRef<T>, TensorError> {
        let shape = v.shape();
        if *shape.last().unwrap() != self.dim {
            return Err(TensorError::DimensionMismatch {
                op: "rmsnorm",
                lhs: shape,
                rhs: vec![self.dim],
            });
        }
        let inv = v
            .norm_lastdim()
            .clamp_min(T::from_f64(RMSNORM_FLOOR))
            .recip();
        let out = v
            .mul(&inv)?
            .scale(T::from_f64((self.dim as f64).sqrt()));
        match self.gain {
            Some(id) => out.mul(&v.tape().param(store, id)),
            None => Ok(out),
        }
    }
}

/// Plain-tensor RMSNorm used by the oracle chains; no gain, wide or
/// narrow precision.
pub fn rmsnorm_value<T: Real>(v: &DenseTensor<T>) -> DenseTensor<T> {
    let d = v.last_dim();
    let scale = T::from_f64((d as f64).sqrt());
    let floor = T::from_f64(RMSNORM_FLOOR);
    let mut data = vec![T::zero(); v.numel()];
    for r in 0..v.row_count() {
        let norm = v.row_norm(r).max(floor);
        let row = &v.data()[r * d..(r + 1) * d];
        for (o, &x) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = x / norm * scale;
        }
    }
    DenseTensor::from_vec(v.shape().to_vec(), data).expect("shape preserved")
}

/// State of one geodesic-normalization site: two learnable scalars, the
/// angle clamp, and the depth-decay law.
#[derive(Debug, Clone)]
pub struct GeoNormParams {
    pub scale: ParamId,
    pub bias: ParamId,
    pub clamp: f64,
    pub decay: DecayKind,
}

#[derive(Debug, Error)]
pub enum GeoNormError {
    #[error("clamp {0} outside (0, pi/2]")]
    ClampOutOfRange(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl GeoNormParams {
    /// Registers scale (init 1.0) and bias (init 0.0) in the store.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        clamp: f64,
        decay: DecayKind,
    ) -> Result<Self, GeoNormError> {
        if !(clamp > 0.0 && clamp <= std::f64::consts::FRAC_PI_2) {
            return Err(GeoNormError::ClampOutOfRange(clamp));
        }
        let scale = store.register(format!("{name}.scale"), DenseTensor::scalar(T::one()));
        let bias = store.register(format!("{name}.bias"), DenseTensor::scalar(T::zero()));
        Ok(Self {
            scale,
            bias,
            clamp,
            decay,
        })
    }
}

/// Geodesic residual update. Per row:
///
/// 1. project the update `g` to the tangent space at `x`
/// 2. form the unit tangent with the norm floored at 1e-8
/// 3. floor the radius `|x|` at 1e-6
/// 4. angle = min(tangent_norm / radius, clamp)
/// 5. angle = min((angle * scale + bias) * decay_factor(k), clamp)
/// 6. output = x cos(angle) + unit_tangent * radius * sin(angle)
///
/// The same scheduled angle is used for every decay kind, and the clamp
/// passed at construction is the one applied.
pub fn geonorm<T: Real>(
    x: &TensorRef<T>,
    g: &TensorRef<T>,
    ctx: LayerContext,
    params: &GeoNormParams,
    store: &ParamStore<T>,
) -> Result<TensorRef<T>, TensorError> {
    if x.shape() != g.shape() {
        return Err(TensorError::DimensionMismatch {
            op: "geonorm",
            lhs: x.shape(),
            rhs: g.shape(),
        });
    }
    let clamp = T::from_f64(params.clamp);

    let x_dot_g = x.mul(g)?.sum_lastdim();
    let radius = x.norm_lastdim();
    let radius_sq = radius.mul(&radius)?;
    let tangent = g.sub(&x.mul(&x_dot_g.mul(&radius_sq.recip())?)?)?;

    let tangent_norm = tangent.norm_lastdim();
    let safe_tangent_norm = tangent_norm.clamp_min(T::from_f64(TANGENT_NORM_FLOOR));
    let unit_tangent = tangent.mul(&safe_tangent_norm.recip())?;

    let safe_radius = radius.clamp_min(T::from_f64(RADIUS_FLOOR));
    let raw_angle = safe_tangent_norm.mul(&safe_radius.recip())?.clamp_max(clamp);

    let scale = x.tape().param(store, params.scale);
    let bias = x.tape().param(store, params.bias);
    let factor = T::from_f64(schedule_factor(params.decay, ctx));
    let angle = raw_angle
        .mul(&scale)?
        .add(&bias)?
        .scale(factor)
        .clamp_max(clamp);

    let radial = x.mul(&angle.cos())?;
    let swept = unit_tangent.mul(&safe_radius.mul(&angle.sin())?)?;
    radial.add(&swept)
}

/// Same computation as [`geonorm`] on plain tensors, without gradients;
/// scale and bias are passed explicitly.
pub fn geonorm_value<T: Real>(
    x: &DenseTensor<T>,
    g: &DenseTensor<T>,
    ctx: LayerContext,
    clamp: f64,
    decay: DecayKind,
    scale: T,
    bias: T,
) -> Result<DenseTensor<T>, TensorError> {
    if x.shape() != g.shape() {
        return Err(TensorError::DimensionMismatch {
            op: "geonorm",
            lhs: x.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let d = x.last_dim();
    let clamp = T::from_f64(clamp);
    let factor = T::from_f64(schedule_factor(decay, ctx));
    let tn_floor = T::from_f64(TANGENT_NORM_FLOOR);
    let r_floor = T::from_f64(RADIUS_FLOOR);
    let mut data = vec![T::zero(); x.numel()];
    for r in 0..x.row_count() {
        let xrow = &x.data()[r * d..(r + 1) * d];
        let grow = &g.data()[r * d..(r + 1) * d];
        let out = &mut data[r * d..(r + 1) * d];
        let radius = x.row_norm(r);
        let dot = xrow
            .iter()
            .zip(grow)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let coef = dot / (radius * radius);
        let mut tn_sq = T::zero();
        for (o, (&gv, &xv)) in out.iter_mut().zip(grow.iter().zip(xrow)) {
            let t = gv - coef * xv;
            tn_sq = tn_sq + t * t;
            *o = t;
        }
        let safe_tn = tn_sq.sqrt().max(tn_floor);
        let safe_r = radius.max(r_floor);
        let raw_angle = (safe_tn / safe_r).min(clamp);
        let angle = ((raw_angle * scale + bias) * factor).min(clamp);
        let (cos_a, sin_a) = (angle.cos(), angle.sin());
        let swept = safe_r * sin_a / safe_tn;
        for (o, &xv) in out.iter_mut().zip(xrow) {
            *o = cos_a * xv + swept * *o;
        }
    }
    DenseTensor::from_vec(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use std::f64::consts::FRAC_PI_4;

    fn t(shape: &[usize], data: &[f64]) -> DenseTensor<f64> {
        DenseTensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn geonorm_fixture(
        x: &[f64],
        g: &[f64],
        clamp: f64,
        decay: DecayKind,
        k: usize,
        total: usize,
    ) -> Vec<f64> {
        let mut store = ParamStore::<f64>::new();
        let params = GeoNormParams::new(&mut store, "geo", clamp, decay).unwrap();
        let tape = Tape::new();
        let xr = tape.constant(t(&[1, x.len()], x));
        let gr = tape.constant(t(&[1, g.len()], g));
        let ctx = LayerContext::new(k, total).unwrap();
        geonorm(&xr, &gr, ctx, &params, &store)
            .unwrap()
            .value()
            .data()
            .to_vec()
    }

    #[test]
    fn rmsnorm_examples() {
        let store = ParamStore::<f64>::new();
        let layer = RmsNormLayer::new(4);
        let tape = Tape::new();
        let v = tape.constant(t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let out = layer.forward(&v, &store).unwrap().value();
        for &o in out.data() {
            assert!((o - 1.0).abs() < 1e-15);
        }

        let layer2 = RmsNormLayer::new(2);
        let v = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let out = layer2.forward(&v, &store).unwrap().value();
        assert!((out.data()[0] - 0.6 * 2.0f64.sqrt()).abs() < 1e-12);
        assert!((out.data()[1] - 0.8 * 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_positive_scale_invariance() {
        let store = ParamStore::<f64>::new();
        let layer = RmsNormLayer::new(2);
        let tape = Tape::new();
        let v = tape.constant(t(&[1, 2], &[3.0, 4.0]));
        let v5 = tape.constant(t(&[1, 2], &[15.0, 20.0]));
        let a = layer.forward(&v, &store).unwrap().value();
        let b = layer.forward(&v5, &store).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rmsnorm_zero_row_is_guarded() {
        let store = ParamStore::<f64>::new();
        let layer = RmsNormLayer::new(3);
        let tape = Tape::new();
        let v = tape.constant(DenseTensor::zeros(vec![1, 3]));
        let out = layer.forward(&v, &store).unwrap().value();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn geonorm_hand_evaluated_quarter_clamp() {
        let out = geonorm_fixture(
            &[1.0, 0.0],
            &[1.0, 1.0],
            FRAC_PI_4,
            DecayKind::Harmonic,
            0,
            4,
        );
        let c = FRAC_PI_4.cos();
        assert!((out[0] - c).abs() < 1e-12, "{out:?}");
        assert!((out[1] - c).abs() < 1e-12, "{out:?}");
    }

    #[test]
    fn geonorm_radial_update_is_near_identity() {
        let out = geonorm_fixture(
            &[1.0, 0.0],
            &[5.0, 0.0],
            FRAC_PI_4,
            DecayKind::Harmonic,
            0,
            4,
        );
        assert!((out[0] - 1.0).abs() < 1e-7, "{out:?}");
        assert!(out[1].abs() < 1e-7, "{out:?}");
    }

    #[test]
    fn geonorm_zero_update_is_near_identity() {
        let out = geonorm_fixture(
            &[0.6, 0.8],
            &[0.0, 0.0],
            FRAC_PI_4,
            DecayKind::Sqrt,
            2,
            4,
        );
        assert!((out[0] - 0.6).abs() < 1e-7);
        assert!((out[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn geonorm_preserves_radius_when_guards_inactive() {
        let x = [0.5, -1.25, 2.0, 0.75];
        let g = [1.0, 0.5, -0.25, 2.0];
        for k in 0..4 {
            let out = geonorm_fixture(&x, &g, FRAC_PI_4, DecayKind::Harmonic, k, 4);
            let rin: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rout: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(((rout - rin) / rin).abs() < 1e-6, "k={k} {out:?}");
        }
    }

    #[test]
    fn geonorm_taped_matches_plain_value() {
        let x = t(&[2, 3], &[0.4, -0.9, 1.2, 0.05, 0.6, -0.3]);
        let g = t(&[2, 3], &[1.0, 0.2, -0.5, 0.7, -0.8, 0.9]);
        let ctx = LayerContext::new(1, 3).unwrap();

        let mut store = ParamStore::<f64>::new();
        let params = GeoNormParams::new(&mut store, "geo", FRAC_PI_4, DecayKind::Sqrt).unwrap();
        let tape = Tape::new();
        let xr = tape.constant(x.clone());
        let gr = tape.constant(g.clone());
        let taped = geonorm(&xr, &gr, ctx, &params, &store).unwrap().value();

        let plain =
            geonorm_value(&x, &g, ctx, FRAC_PI_4, DecayKind::Sqrt, 1.0, 0.0).unwrap();
        for (a, b) in taped.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn clamp_bounds_are_enforced() {
        let mut store = ParamStore::<f64>::new();
        assert!(GeoNormParams::new(&mut store, "geo", 0.0, DecayKind::Harmonic).is_err());
        assert!(GeoNormParams::new(&mut store, "geo", 1.6, DecayKind::Harmonic).is_err());
        assert!(GeoNormParams::new(
            &mut store,
            "geo",
            std::f64::consts::FRAC_PI_2,
            DecayKind::Harmonic
        )
        .is_ok());
    }

    #[test]
    fn geonorm_shape_mismatch_is_rejected() {
        let mut store = ParamStore::<f64>::new();
        let params =
            GeoNormParams::new(&mut store, "geo", FRAC_PI_4, DecayKind::Harmonic).unwrap();
        let tape = Tape::new();
        let x = tape.constant(DenseTensor::zeros(vec![1, 2]));
        let g = tape.constant(DenseTensor::zeros(vec![1, 3]));
        let ctx = LayerContext::new(0, 1).unwrap();
        assert!(geonorm(&x, &g, ctx, &params, &store).is_err());
    }
}
