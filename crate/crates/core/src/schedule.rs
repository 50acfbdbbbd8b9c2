//! Layer-wise step-size decay factors for the geodesic angle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decay law applied to the geodesic angle as depth increases.
///
/// Layer indices are zero-based throughout, so the first layer always
/// receives a factor of 1 under `Harmonic` and `Sqrt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Harmonic,
    Sqrt,
    Linear,
}

impl DecayKind {
    pub const ALL: [DecayKind; 3] = [DecayKind::Harmonic, DecayKind::Sqrt, DecayKind::Linear];

    pub fn name(self) -> &'static str {
        match self {
            DecayKind::Harmonic => "harmonic",
            DecayKind::Sqrt => "sqrt",
            DecayKind::Linear => "linear",
        }
    }
}

impl std::fmt::Display for DecayKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown decay kind {0:?}; expected harmonic | sqrt | linear")]
pub struct ParseDecayError(String);

impl std::str::FromStr for DecayKind {
    type Err = ParseDecayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "harmonic" => Ok(DecayKind::Harmonic),
            "sqrt" => Ok(DecayKind::Sqrt),
            "linear" => Ok(DecayKind::Linear),
            other => Err(ParseDecayError(other.to_string())),
        }
    }
}

/// Position of a layer inside a stack of `layer_total` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerContext {
    layer_index: usize,
    layer_total: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayerContextError {
    #[error("layer_total must be at least 1")]
    EmptyStack,
    #[error("layer_index {index} out of range for {total} layers")]
    IndexOutOfRange { index: usize, total: usize },
}

impl LayerContext {
    pub fn new(layer_index: usize, layer_total: usize) -> Result<Self, LayerContextError> {
        if layer_total == 0 {
            return Err(LayerContextError::EmptyStack);
        }
        if layer_index >= layer_total {
            return Err(LayerContextError::IndexOutOfRange {
                index: layer_index,
                total: layer_total,
            });
        }
        Ok(Self {
            layer_index,
            layer_total,
        })
    }

    pub fn layer_index(self) -> usize {
        self.layer_index
    }

    pub fn layer_total(self) -> usize {
        self.layer_total
    }
}

/// Decay factor for layer `k` of `T`:
/// harmonic `1/(k+1)`, sqrt `1/sqrt(k+1)`, linear `(T-k)/T`.
pub fn schedule_factor(kind: DecayKind, ctx: LayerContext) -> f64 {
    let k = ctx.layer_index as f64;
    let t = ctx.layer_total as f64;
    match kind {
        DecayKind::Harmonic => 1.0 / (k + 1.0),
        DecayKind::Sqrt => 1.0 / (k + 1.0).sqrt(),
        DecayKind::Linear => (t - k) / t,
    }
}
