//! Decoder-only transformer blocks wired under each normalization strategy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::norm::{geonorm, GeoNormError, GeoNormParams, RmsNormLayer};
use crate::params::{ParamId, ParamStore};
use crate::schedule::{DecayKind, LayerContext};
use crate::tape::{Tape, TensorRef};
use crate::tensor::{DenseTensor, Real, TensorError};

const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e30;

/// Block wiring choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum NormStrategy {
    PostNorm,
    PreNorm,
    DeepNorm,
    SandwichNorm,
    GeoNorm { clamp: f64, decay: DecayKind },
}

impl NormStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            NormStrategy::PostNorm => "postnorm",
            NormStrategy::PreNorm => "prenorm",
            NormStrategy::DeepNorm => "deepnorm",
            NormStrategy::SandwichNorm => "sandwichnorm",
            NormStrategy::GeoNorm { .. } => "geonorm",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub seq_len: usize,
    pub strategy: NormStrategy,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dim {dim} is not divisible by heads {heads}")]
    HeadSplit { dim: usize, heads: usize },
    #[error("{field} must be at least 1")]
    ZeroField { field: &'static str },
    #[error("sequence length {got} exceeds the configured maximum {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("token batch of {tokens} values does not fill {batch}x{seq}")]
    BatchShape {
        tokens: usize,
        batch: usize,
        seq: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    GeoNorm(#[from] GeoNormError),
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (field, v) in [
            ("vocab", self.vocab),
            ("dim", self.dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(ModelError::ZeroField { field });
            }
        }
        if self.dim % self.heads != 0 {
            return Err(ModelError::HeadSplit {
                dim: self.dim,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Projection weights of one attention module.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

/// Projection weights of one feed-forward module.
#[derive(Debug, Clone)]
pub struct FfnWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// One transformer block: attention and FFN weights plus, under the
/// geodesic strategy, an independent normalization site per sub-module.
#[derive(Debug, Clone)]
pub struct Block {
    pub attn: AttentionWeights,
    pub ffn: FfnWeights,
    pub geo_attn: Option<GeoNormParams>,
    pub geo_ffn: Option<GeoNormParams>,
}

/// Decoder-only transformer with embedding, positional table, block
/// stack, final RMSNorm, and an untied vocabulary head.
#[derive(Debug, Clone)]
pub struct TransformerModel<T: Real> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    blocks: Vec<Block>,
    norm: RmsNormLayer,
}

impl<T: Real> TransformerModel<T> {
    /// Builds a model with seeded normal(0, 0.02) projection weights and
    /// zero biases. Under DeepNorm the output projections are initialized
    /// with the (8T)^(-1/4) gain.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let hidden = 4 * d;

        let out_proj_gain = match config.strategy {
            NormStrategy::DeepNorm => (8.0 * config.layers as f64).powf(-0.25),
            _ => 1.0,
        };

        let mut normal = |store: &mut ParamStore<T>, name: String, shape: Vec<usize>, std: f64| {
            let data: Vec<T> = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    T::from_f64(v * std)
                })
                .collect();
            store.register(name, DenseTensor::from_vec(shape, data).expect("init shape"))
        };

        let tok_emb = normal(&mut store, "tok_emb".into(), vec![config.vocab, d], INIT_STD);
        let pos_emb = normal(
            &mut store,
            "pos_emb".into(),
            vec![config.seq_len, d],
            INIT_STD,
        );

        let mut blocks = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let p = |suffix: &str| format!("block{layer}.{suffix}");
            let attn = AttentionWeights {
                wq: normal(&mut store, p("wq"), vec![d, d], INIT_STD),
                bq: store.register(p("bq"), DenseTensor::zeros(vec![d])),
                wk: normal(&mut store, p("wk"), vec![d, d], INIT_STD),
                bk: store.register(p("bk"), DenseTensor::zeros(vec![d])),
                wv: normal(&mut store, p("wv"), vec![d, d], INIT_STD),
                bv: store.register(p("bv"), DenseTensor::zeros(vec![d])),
                wo: normal(&mut store, p("wo"), vec![d, d], INIT_STD * out_proj_gain),
                bo: store.register(p("bo"), DenseTensor::zeros(vec![d])),
                heads: config.heads,
            };
            let ffn = FfnWeights {
                w1: normal(&mut store, p("w1"), vec![d, hidden], INIT_STD),
                b1: store.register(p("b1"), DenseTensor::zeros(vec![hidden])),
                w2: normal(&mut store, p("w2"), vec![hidden, d], INIT_STD * out_proj_gain),
                b2: store.register(p("b2"), DenseTensor::zeros(vec![d])),
            };
            let (geo_attn, geo_ffn) = match config.strategy {
                NormStrategy::GeoNorm { clamp, decay } => (
                    Some(GeoNormParams::new(&mut store, &p("geo_attn"), clamp, decay)?),
                    Some(GeoNormParams::new(&mut store, &p("geo_ffn"), clamp, decay)?),
                ),
                _ => (None, None),
            };
            blocks.push(Block {
                attn,
                ffn,
                geo_attn,
                geo_ffn,
            });
        }

        let head_w = normal(&mut store, "head_w".into(), vec![d, config.vocab], INIT_STD);
        let head_b = store.register("head_b", DenseTensor::zeros(vec![config.vocab]));
        let norm = RmsNormLayer::new(d);

        Ok(Self {
            config,
            store,
            tok_emb,
            pos_emb,
            head_w,
            head_b,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn head_weight(&self) -> ParamId {
        self.head_w
    }

    /// Forward pass over a flat `batch x seq` token slab; returns logits
    /// of shape `(batch, seq, vocab)` recorded on `tape`.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<TensorRef<T>, ModelError> {
        if tokens.len() != batch * seq || batch == 0 || seq == 0 {
            return Err(ModelError::BatchShape {
                tokens: tokens.len(),
                batch,
                seq,
            });
        }
        if seq > self.config.seq_len {
            return Err(ModelError::SequenceTooLong {
                got: seq,
                max: self.config.seq_len,
            });
        }
        let store = &self.store;
        let tok_table = tape.param(store, self.tok_emb);
        let pos_table = tape.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..seq).collect();
        let tok = tape.embedding(&tok_table, tokens, &[batch, seq])?;
        let pos = tape.embedding(&pos_table, &positions, &[seq])?;
        let mut x = tok.add(&pos)?;

        // geodesic blocks assume a well-defined sphere radius, so the
        // embedded input is put on the sqrt(D) sphere first
        if matches!(self.config.strategy, NormStrategy::GeoNorm { .. }) {
            x = self.norm.forward(&x, store)?;
        }

        for (k, block) in self.blocks.iter().enumerate() {
            let ctx = LayerContext::new(k, self.config.layers).expect("valid layer index");
            x = block_forward(
                &x,
                ctx,
                self.config.strategy,
                block,
                &self.norm,
                store,
            )?;
        }

        let x = self.norm.forward(&x, store)?;
        let head_w = tape.param(store, self.head_w);
        let head_b = tape.param(store, self.head_b);
        Ok(x.matmul(&head_w)?.add(&head_b)?)
    }
}

/// Multi-head scaled dot-product attention with a strict causal mask.
pub fn causal_self_attention<T: Real>(
    x: &TensorRef<T>,
    w: &AttentionWeights,
    store: &ParamStore<T>,
) -> Result<TensorRef<T>, TensorError> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(TensorError::DimensionMismatch {
            op: "causal_self_attention",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    }
    let (batch, seq, dim) = (shape[0], shape[1], shape[2]);
    let heads = w.heads;
    let head_dim = dim / heads;
    let tape = x.tape();

    let project = |wid: ParamId, bid: ParamId| -> Result<TensorRef<T>, TensorError> {
        x.matmul(&tape.param(store, wid))?
            .add(&tape.param(store, bid))?
            .reshape(vec![batch, seq, heads, head_dim])?
            .swap_axes(1, 2)
    };
    let q = project(w.wq, w.bq)?;
    let k = project(w.wk, w.bk)?;
    let v = project(w.wv, w.bv)?;

    let scores = q
        .matmul(&k.swap_axes(2, 3)?)?
        .scale(T::from_f64(1.0 / (head_dim as f64).sqrt()));
    let mask = causal_mask::<T>(seq);
    let masked = scores.add(&tape.constant(mask))?;
    let weights = masked.softmax_lastdim();

    let merged = weights
        .matmul(&v)?
        .swap_axes(1, 2)?
        .reshape(vec![batch, seq, dim])?;
    merged
        .matmul(&tape.param(store, w.wo))?
        .add(&tape.param(store, w.bo))
}

/// `(seq, seq)` additive mask: zero on and below the diagonal, a large
/// negative value above it so softmax assigns exactly zero weight there.
fn causal_mask<T: Real>(seq: usize) -> DenseTensor<T> {
    let neg = T::from_f64(MASKED_SCORE);
    let mut data = vec![T::zero(); seq * seq];
    for t in 0..seq {
        for u in (t + 1)..seq {
            data[t * seq + u] = neg;
        }
    }
    DenseTensor::from_vec(vec![seq, seq], data).expect("mask shape")
}

/// Two-layer MLP with hidden width `4 * dim` and GELU nonlinearity.
pub fn ffn<T: Real>(
    x: &TensorRef<T>,
    w: &FfnWeights,
    store: &ParamStore<T>,
) -> Result<TensorRef<T>, TensorError> {
    let tape = x.tape();
    x.matmul(&tape.param(store, w.w1))?
        .add(&tape.param(store, w.b1))?
        .gelu()
        .matmul(&tape.param(store, w.w2))?
        .add(&tape.param(store, w.b2))
}

/// Residual multiplier used by the DeepNorm wiring.
pub fn deepnorm_beta(layers: usize) -> f64 {
    (2.0 * layers as f64).powf(0.25)
}

/// Applies one block under the given strategy: attention sub-step first,
/// then the FFN sub-step.
pub fn block_forward<T: Real>(
    x: &TensorRef<T>,
    ctx: LayerContext,
    strategy: NormStrategy,
    block: &Block,
    norm: &RmsNormLayer,
    store: &ParamStore<T>,
) -> Result<TensorRef<T>, ModelError> {
    let out = match strategy {
        NormStrategy::PostNorm => {
            let x1 = norm.forward(&x.add(&causal_self_attention(x, &block.attn, store)?)?, store)?;
            norm.forward(&x1.add(&ffn(&x1, &block.ffn, store)?)?, store)?
        }
        NormStrategy::PreNorm => {
            let x1 = x.add(&causal_self_attention(
                &norm.forward(x, store)?,
                &block.attn,
                store,
            )?)?;
            x1.add(&ffn(&norm.forward(&x1, store)?, &block.ffn, store)?)?
        }
        NormStrategy::GeoNorm { .. } => {
            let geo_attn = block.geo_attn.as_ref().expect("geonorm site");
            let geo_ffn = block.geo_ffn.as_ref().expect("geonorm site");
            let s = causal_self_attention(x, &block.attn, store)?;
            let x1 = geonorm(x, &s, ctx, geo_attn, store)?;
            let s2 = ffn(&x1, &block.ffn, store)?;
            geonorm(&x1, &s2, ctx, geo_ffn, store)?
        }
        NormStrategy::DeepNorm => {
            let beta = T::from_f64(deepnorm_beta(ctx.layer_total()));
            let x1 = norm.forward(
                &x.scale(beta)
                    .add(&causal_self_attention(x, &block.attn, store)?)?,
                store,
            )?;
            norm.forward(&x1.scale(beta).add(&ffn(&x1, &block.ffn, store)?)?, store)?
        }
        NormStrategy::SandwichNorm => {
            let inner = causal_self_attention(&norm.forward(x, store)?, &block.attn, store)?;
            let x1 = x.add(&norm.forward(&inner, store)?)?;
            let inner = ffn(&norm.forward(&x1, store)?, &block.ffn, store)?;
            x1.add(&norm.forward(&inner, store)?)?
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn strategies() -> Vec<NormStrategy> {
        vec![
            NormStrategy::PostNorm,
            NormStrategy::PreNorm,
            NormStrategy::DeepNorm,
            NormStrategy::SandwichNorm,
            NormStrategy::GeoNorm {
                clamp: FRAC_PI_4,
                decay: DecayKind::Harmonic,
            },
        ]
    }

    fn tiny_config(strategy: NormStrategy) -> ModelConfig {
        ModelConfig {
            vocab: 11,
            dim: 16,
            heads: 2,
            layers: 2,
            seq_len: 5,
            strategy,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(NormStrategy::PreNorm);
        c.dim = 15;
        assert!(c.validate().is_err());
        c.dim = 16;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shape_and_determinism() {
        for strategy in strategies() {
            let model = TransformerModel::<f64>::new(tiny_config(strategy), 7).unwrap();
            let tape = Tape::new();
            let logits = model.forward(&tape, &[3], 1, 1).unwrap();
            assert_eq!(logits.shape(), vec![1, 1, 11]);

            // identical prompts in a batch produce identical rows
            let tape = Tape::new();
            let logits = model
                .forward(&tape, &[1, 2, 3, 1, 2, 3], 2, 3)
                .unwrap()
                .value();
            let half = logits.numel() / 2;
            assert_eq!(&logits.data()[..half], &logits.data()[half..]);
        }
    }

    #[test]
    fn rejects_long_sequences_and_bad_tokens() {
        let model = TransformerModel::<f64>::new(tiny_config(NormStrategy::PreNorm), 7).unwrap();
        let tape = Tape::new();
        assert!(matches!(
            model.forward(&tape, &[0; 6], 1, 6),
            Err(ModelError::SequenceTooLong { got: 6, max: 5 })
        ));
        assert!(model.forward(&tape, &[11], 1, 1).is_err());
    }

    #[test]
    fn attention_hand_fixture_single_head() {
        // dim 2, one head, identity projections, two one-hot tokens
        let mut store = ParamStore::<f64>::new();
        let eye = DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zeros = DenseTensor::zeros(vec![2]);
        let w = AttentionWeights {
            wq: store.register("wq", eye.clone()),
            bq: store.register("bq", zeros.clone()),
            wk: store.register("wk", eye.clone()),
            bk: store.register("bk", zeros.clone()),
            wv: store.register("wv", eye.clone()),
            bv: store.register("bv", zeros.clone()),
            wo: store.register("wo", eye),
            bo: store.register("bo", zeros),
            heads: 1,
        };
        let tape = Tape::new();
        let x = tape.constant(
            DenseTensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let out = causal_self_attention(&x, &w, &store).unwrap().value();

        // position 0 sees only itself
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!(out.data()[1].abs() < 1e-15);
        // position 1: softmax over scores [0, 1/sqrt(2)]
        let p = (1.0f64 / 2.0f64.sqrt()).exp();
        let attn1 = p / (1.0 + p);
        assert!((out.data()[2] - (1.0 - attn1)).abs() < 1e-12);
        assert!((out.data()[3] - attn1).abs() < 1e-12);
    }

    #[test]
    fn attention_zero_value_projection_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let mut rng_data = vec![0.0; 4];
        rng_data[0] = 0.3;
        rng_data[3] = -0.2;
        let w = AttentionWeights {
            wq: store.register(
                "wq",
                DenseTensor::from_vec(vec![2, 2], rng_data.clone()).unwrap(),
            ),
            bq: store.register("bq", DenseTensor::zeros(vec![2])),
            wk: store.register(
                "wk",
                DenseTensor::from_vec(vec![2, 2], rng_data).unwrap(),
            ),
            bk: store.register("bk", DenseTensor::zeros(vec![2])),
            wv: store.register("wv", DenseTensor::zeros(vec![2, 2])),
            bv: store.register("bv", DenseTensor::zeros(vec![2])),
            wo: store.register(
                "wo",
                DenseTensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            ),
            bo: store.register("bo", DenseTensor::zeros(vec![2])),
            heads: 1,
        };
        let tape = Tape::new();
        let x = tape.constant(
            DenseTensor::from_vec(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
        );
        let out = causal_self_attention(&x, &w, &store).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_zero_input_zero_bias_gives_zero() {
        let mut store = ParamStore::<f64>::new();
        let w = FfnWeights {
            w1: store.register("w1", DenseTensor::full(vec![2, 8], 0.3)),
            b1: store.register("b1", DenseTensor::zeros(vec![8])),
            w2: store.register("w2", DenseTensor::full(vec![8, 2], -0.1)),
            b2: store.register("b2", DenseTensor::zeros(vec![2])),
        };
        let tape = Tape::new();
        let x = tape.constant(DenseTensor::zeros(vec![1, 3, 2]));
        let out = ffn(&x, &w, &store).unwrap().value();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[1, 3, 2]);
    }

    #[test]
    fn causality_under_every_strategy() {
        for strategy in strategies() {
            let model = TransformerModel::<f64>::new(tiny_config(strategy), 99).unwrap();
            let base = [1usize, 2, 3, 4, 5];
            let mut poked = base;
            poked[2] = 9;

            let tape = Tape::new();
            let a = model.forward(&tape, &base, 1, 5).unwrap().value();
            let tape = Tape::new();
            let b = model.forward(&tape, &poked, 1, 5).unwrap().value();

            let vocab = model.config().vocab;
            for pos in 0..5 {
                let (ra, rb) = (
                    &a.data()[pos * vocab..(pos + 1) * vocab],
                    &b.data()[pos * vocab..(pos + 1) * vocab],
                );
                if pos < 2 {
                    assert_eq!(ra, rb, "{}: leak at position {pos}", strategy.name());
                }
            }
            let tail_differs = a.data()[2 * vocab..] != b.data()[2 * vocab..];
            assert!(tail_differs, "{}: perturbation had no effect", strategy.name());
        }
    }

    #[test]
    fn parameter_counts_match_across_baselines() {
        let counts: Vec<usize> = strategies()
            .into_iter()
            .map(|s| {
                TransformerModel::<f64>::new(tiny_config(s), 1)
                    .unwrap()
                    .store
                    .total_scalars()
            })
            .collect();
        // postnorm, prenorm, deepnorm, sandwichnorm agree
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[0], counts[2]);
        assert_eq!(counts[0], counts[3]);
        // geonorm adds 2 scalars per site, 2 sites per layer
        assert_eq!(counts[4], counts[0] + 4 * 2);
    }

    #[test]
    fn hidden_state_radius_postnorm_and_geonorm() {
        let dim = 16usize;
        let sqrt_d = (dim as f64).sqrt();
        for (strategy, tol) in [
            (NormStrategy::PostNorm, 1e-6),
            (
                NormStrategy::GeoNorm {
                    clamp: FRAC_PI_4,
                    decay: DecayKind::Harmonic,
                },
                1e-4,
            ),
        ] {
            let model = TransformerModel::<f64>::new(tiny_config(strategy), 5).unwrap();
            let tape = Tape::new();
            let tokens = [1usize, 4, 7, 2, 9];
            let tok_table = tape.param(&model.store, model.tok_emb);
            let pos_table = tape.param(&model.store, model.pos_emb);
            let positions: Vec<usize> = (0..5).collect();
            let tok = tape.embedding(&tok_table, &tokens, &[1, 5]).unwrap();
            let pos = tape.embedding(&pos_table, &positions, &[5]).unwrap();
            let mut x = tok.add(&pos).unwrap();
            x = model.norm.forward(&x, &model.store).unwrap();
            for (k, block) in model.blocks.iter().enumerate() {
                let ctx = LayerContext::new(k, model.config().layers).unwrap();
                x = block_forward(&x, ctx, strategy, block, &model.norm, &model.store).unwrap();
                let v = x.value();
                for r in 0..v.row_count() {
                    let norm = v.row_norm(r);
                    assert!(
                        ((norm - sqrt_d) / sqrt_d).abs() < tol,
                        "{}: layer {k} row {r} norm {norm}",
                        strategy.name()
                    );
                }
            }
        }
    }

    #[test]
    fn zero_head_weights_give_uniform_loss() {
        let mut model = TransformerModel::<f64>::new(tiny_config(NormStrategy::PreNorm), 3).unwrap();
        let head_w = model.head_weight();
        for v in model.store.value_mut(head_w).data_mut() {
            *v = 0.0;
        }
        let tape = Tape::new();
        let logits = model.forward(&tape, &[1, 2, 3, 4, 5], 1, 5).unwrap();
        let loss = logits
            .cross_entropy(&[2, 3, 4, 5, 6])
            .unwrap()
            .value()
            .scalar_value();
        assert!((loss - (11.0f64).ln()).abs() < 1e-9);
    }
}
