//! Executable oracle for the two Pre-Norm formulations: the standard
//! residual recursion and the scaled update rule agree after RMSNorm, and
//! the un-normalized iterates agree up to the sqrt(k+1) factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::model::{causal_self_attention, ffn, AttentionWeights, FfnWeights};
use crate::norm::rmsnorm_value;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::{DenseTensor, Precision, Real, TensorError};

const CHAIN_INIT_STD: f64 = 0.02;

/// Default pass tolerance on the normalized-output deviation.
pub fn default_tolerance(precision: Precision) -> f64 {
    match precision {
        Precision::Wide => 1e-6,
        Precision::Narrow => 1e-3,
    }
}

enum ChainModule {
    Attention(AttentionWeights),
    Ffn(FfnWeights),
    Identity,
    Zero,
}

/// An ordered list of fixed-weight sub-modules applied by both chains.
/// Chain tensors are `(batch, seq, dim)` so attention modules are
/// well-defined.
pub struct ChainModules<T: Real> {
    store: ParamStore<T>,
    mods: Vec<ChainModule>,
    dim: usize,
}

impl<T: Real> ChainModules<T> {
    /// Alternating attention / feed-forward modules with seeded
    /// normal(0, 0.02) weights, as in a transformer stack.
    pub fn random_transformer(count: usize, dim: usize, heads: usize, seed: u64) -> Self {
        assert!(dim % heads == 0, "dim must split across heads");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut normal = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>| {
            let data: Vec<T> = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    T::from_f64(v * CHAIN_INIT_STD)
                })
                .collect();
            store.register(name, DenseTensor::from_vec(shape, data).expect("init shape"))
        };
        let mods = (0..count)
            .map(|k| {
                let p = |suffix: &str| format!("chain{k}.{suffix}");
                if k % 2 == 0 {
                    ChainModule::Attention(AttentionWeights {
                        wq: normal(&mut store, p("wq"), vec![dim, dim]),
                        bq: store.register(p("bq"), DenseTensor::zeros(vec![dim])),
                        wk: normal(&mut store, p("wk"), vec![dim, dim]),
                        bk: store.register(p("bk"), DenseTensor::zeros(vec![dim])),
                        wv: normal(&mut store, p("wv"), vec![dim, dim]),
                        bv: store.register(p("bv"), DenseTensor::zeros(vec![dim])),
                        wo: normal(&mut store, p("wo"), vec![dim, dim]),
                        bo: store.register(p("bo"), DenseTensor::zeros(vec![dim])),
                        heads,
                    })
                } else {
                    ChainModule::Ffn(FfnWeights {
                        w1: normal(&mut store, p("w1"), vec![dim, 4 * dim]),
                        b1: store.register(p("b1"), DenseTensor::zeros(vec![4 * dim])),
                        w2: normal(&mut store, p("w2"), vec![4 * dim, dim]),
                        b2: store.register(p("b2"), DenseTensor::zeros(vec![dim])),
                    })
                }
            })
            .collect();
        Self { store, mods, dim }
    }

    /// Chain of identity maps.
    pub fn identity(count: usize, dim: usize) -> Self {
        Self {
            store: ParamStore::new(),
            mods: (0..count).map(|_| ChainModule::Identity).collect(),
            dim,
        }
    }

    /// Chain of zero maps.
    pub fn zero(count: usize, dim: usize) -> Self {
        Self {
            store: ParamStore::new(),
            mods: (0..count).map(|_| ChainModule::Zero).collect(),
            dim,
        }
    }

    pub fn len(&self) -> usize {
        self.mods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mods.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, k: usize, x: &DenseTensor<T>) -> Result<DenseTensor<T>, TensorError> {
        match &self.mods[k] {
            ChainModule::Identity => Ok(x.clone()),
            ChainModule::Zero => Ok(DenseTensor::zeros(x.shape().to_vec())),
            ChainModule::Attention(w) => {
                let tape = Tape::new();
                let xr = tape.constant(x.clone());
                Ok(causal_self_attention(&xr, w, &self.store)?.value())
            }
            ChainModule::Ffn(w) => {
                let tape = Tape::new();
                let xr = tape.constant(x.clone());
                Ok(ffn(&xr, w, &self.store)?.value())
            }
        }
    }
}

fn add_scaled<T: Real>(a: &DenseTensor<T>, ca: T, b: &DenseTensor<T>, cb: T) -> DenseTensor<T> {
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ca * x + cb * y)
        .collect();
    DenseTensor::from_vec(a.shape().to_vec(), data).expect("shape preserved")
}

/// Standard residual recursion `x_k = x_{k-1} + f_k(Norm(x_{k-1}))`;
/// returns the iterates `x_1 .. x_K`.
pub fn run_prenorm_chain<T: Real>(
    x0: &DenseTensor<T>,
    mods: &ChainModules<T>,
) -> Result<Vec<DenseTensor<T>>, TensorError> {
    let mut iterates = Vec::with_capacity(mods.len());
    let mut x = x0.clone();
    for k in 0..mods.len() {
        let update = mods.apply(k, &rmsnorm_value(&x))?;
        x = add_scaled(&x, T::one(), &update, T::one());
        iterates.push(x.clone());
    }
    Ok(iterates)
}

/// Scaled update rule with one-based coefficients:
/// `x_k = (sqrt(k)/sqrt(k+1)) x_{k-1} + (1/sqrt(k+1)) f_k(Norm(x_{k-1}))`.
pub fn run_alt_scaled_chain<T: Real>(
    x0: &DenseTensor<T>,
    mods: &ChainModules<T>,
) -> Result<Vec<DenseTensor<T>>, TensorError> {
    let mut iterates = Vec::with_capacity(mods.len());
    let mut x = x0.clone();
    for k in 1..=mods.len() {
        let kf = k as f64;
        let keep = T::from_f64((kf / (kf + 1.0)).sqrt());
        let take = T::from_f64(1.0 / (kf + 1.0).sqrt());
        let update = mods.apply(k - 1, &rmsnorm_value(&x))?;
        x = add_scaled(&x, keep, &update, take);
        iterates.push(x.clone());
    }
    Ok(iterates)
}

/// Effective per-layer rotation of the scaled update rule:
/// `arccos(sqrt(k)/sqrt(k+1))`, strictly decreasing toward zero.
pub fn implied_prenorm_angle(k: usize) -> f64 {
    let kf = k as f64;
    (kf / (kf + 1.0)).sqrt().acos()
}

/// Per-layer deviations between the two chains.
#[derive(Debug, Clone, Serialize)]
pub struct LayerDeviation {
    pub layer: usize,
    /// max over rows of |Norm(x_k) - Norm(x_k_alt)| / sqrt(D)
    pub normalized_dev: f64,
    /// max over rows of |x_k_alt * sqrt(k+1) - x_k| / |x_k|
    pub scaled_identity_dev: f64,
}

/// Outcome of running both chains on identical modules and input.
#[derive(Debug, Clone, Serialize)]
pub struct EquivalenceReport {
    pub layers: usize,
    pub precision: Precision,
    pub tolerance: f64,
    pub per_layer: Vec<LayerDeviation>,
    pub max_normalized_dev: f64,
    pub max_scaled_identity_dev: f64,
    pub pass: bool,
}

fn max_row_deviation<T: Real>(a: &DenseTensor<T>, b: &DenseTensor<T>, denom: impl Fn(usize) -> f64) -> f64 {
    let d = a.last_dim();
    let mut worst = 0.0f64;
    for r in 0..a.row_count() {
        let mut sq = 0.0f64;
        for (x, y) in a.data()[r * d..(r + 1) * d]
            .iter()
            .zip(&b.data()[r * d..(r + 1) * d])
        {
            let diff = x.as_f64() - y.as_f64();
            sq += diff * diff;
        }
        worst = worst.max(sq.sqrt() / denom(r));
    }
    worst
}

/// Runs both chains with identical weights and input, comparing the
/// RMSNorm of each iterate pair and the sqrt(k+1)-scaled identity.
pub fn check_equivalence<T: Real>(
    x0: &DenseTensor<T>,
    mods: &ChainModules<T>,
    tolerance: f64,
) -> Result<EquivalenceReport, TensorError> {
    let plain = run_prenorm_chain(x0, mods)?;
    let alt = run_alt_scaled_chain(x0, mods)?;
    let sqrt_d = (mods.dim() as f64).sqrt();

    let mut per_layer = Vec::with_capacity(mods.len());
    let mut max_norm_dev = 0.0f64;
    let mut max_scaled_dev = 0.0f64;
    for (i, (xk, xk_alt)) in plain.iter().zip(&alt).enumerate() {
        let k = i + 1;
        let normalized_dev =
            max_row_deviation(&rmsnorm_value(xk), &rmsnorm_value(xk_alt), |_| sqrt_d);
        let rescaled = add_scaled(
            xk_alt,
            T::from_f64(((k + 1) as f64).sqrt()),
            xk_alt,
            T::zero(),
        );
        let scaled_identity_dev = max_row_deviation(&rescaled, xk, |r| xk.row_norm(r).as_f64());
        max_norm_dev = max_norm_dev.max(normalized_dev);
        max_scaled_dev = max_scaled_dev.max(scaled_identity_dev);
        per_layer.push(LayerDeviation {
            layer: k,
            normalized_dev,
            scaled_identity_dev,
        });
    }

    Ok(EquivalenceReport {
        layers: mods.len(),
        precision: T::PRECISION,
        tolerance,
        per_layer,
        max_normalized_dev: max_norm_dev,
        max_scaled_identity_dev: max_scaled_dev,
        pass: max_norm_dev < tolerance,
    })
}

/// Random nonzero chain input of shape `(batch, seq, dim)`.
pub fn random_chain_input<T: Real>(
    batch: usize,
    seq: usize,
    dim: usize,
    seed: u64,
) -> DenseTensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<T> = (0..batch * seq * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::from_f64(v)
        })
        .collect();
    DenseTensor::from_vec(vec![batch, seq, dim], data).expect("input shape")
}
