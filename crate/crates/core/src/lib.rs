//! Geodesic normalization on the sphere for transformer residual updates,
//! with projection-based baselines, a tape-based autodiff tensor core, a
//! byte-level training harness, and executable verification suites.

pub mod params;
pub mod tape;
pub mod tensor;

pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, TensorRef};
pub use tensor::{DenseTensor, Precision, Real, TensorError};

pub mod norm;
pub mod schedule;
pub mod sphere;

pub use norm::{geonorm, geonorm_value, rmsnorm_value, GeoNormError, GeoNormParams, RmsNormLayer};
pub use schedule::{schedule_factor, DecayKind, LayerContext, LayerContextError};
pub use sphere::{exp_map, geodesic_step, tangent_project, SpherePoint, TangentVector};

pub mod model;

pub use model::{
    block_forward, causal_self_attention, deepnorm_beta, ffn, AttentionWeights, Block, FfnWeights,
    ModelConfig, ModelError, NormStrategy, TransformerModel,
};

pub mod data;
pub mod equivalence;
pub mod optim;
pub mod train;

pub use data::{load_corpus, sample_batch, Corpus, CorpusError, BYTE_VOCAB};
pub use equivalence::{
    check_equivalence, default_tolerance, implied_prenorm_angle, run_alt_scaled_chain,
    run_prenorm_chain, random_chain_input, ChainModules, EquivalenceReport, LayerDeviation,
};
pub use optim::{adam_step, AdamState};
pub use train::{DivergenceEvent, LossLog, LossRecord, Split, TrainConfig, TrainError};

pub mod check;

pub use check::{
    central_difference, geometry_suite, geonorm_contract_suite, gradient_suite,
    max_relative_error, rmsnorm_invariance_suite, GeoNormContractReport, GeometryReport,
    GradCheckCase, GradCheckReport,
};
