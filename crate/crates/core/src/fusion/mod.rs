//! Transformer classifiers over per-cell token sequences.
//!
//! Every cell becomes a short sequence (one token per modality the variant
//! consumes), which is run through a pre-norm encoder stack, mean-pooled and
//! classified with a linear head.

mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::BoundingBox;
use crate::error::{Error, Result};

pub use model::{FusionArch, FusionInputs, TokenSequence};
pub use train::{
    inverse_frequency_weights, predict_labels, train_classifier, train_classifier_with, weighted_cross_entropy,
    EpochCallback, Predictions, TrainedClassifier,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Gene embedding only.
    Unimodal,
    /// Gene embedding plus a sinusoidal spatial token.
    Spatial,
    /// Gene and morphology tokens, each tagged with a modality embedding.
    #[serde(rename = "dual")]
    DualModality,
    /// Gene, morphology and spatial tokens with a learned token-type attention bias.
    #[serde(rename = "multi")]
    MultiInput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenType {
    Gene,
    Morph,
    Spatial,
}

impl TokenType {
    pub fn index(self) -> usize {
        self as usize
    }
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::Unimodal,
        ModelVariant::Spatial,
        ModelVariant::DualModality,
        ModelVariant::MultiInput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Unimodal => "unimodal",
            ModelVariant::Spatial => "spatial",
            ModelVariant::DualModality => "dual",
            ModelVariant::MultiInput => "multi",
        }
    }

    pub fn token_types(self) -> &'static [TokenType] {
        use TokenType::*;
        match self {
            ModelVariant::Unimodal => &[Gene],
            ModelVariant::Spatial => &[Gene, Spatial],
            ModelVariant::DualModality => &[Gene, Morph],
            ModelVariant::MultiInput => &[Gene, Morph, Spatial],
        }
    }

    pub fn n_tokens(self) -> usize {
        self.token_types().len()
    }

    pub fn uses(self, t: TokenType) -> bool {
        self.token_types().contains(&t)
    }

    /// Whether tokens carry an additive modality embedding.
    pub fn tags_modalities(self) -> bool {
        matches!(self, ModelVariant::DualModality | ModelVariant::MultiInput)
    }

    pub fn has_type_bias(self) -> bool {
        self == ModelVariant::MultiInput
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unimodal" => Ok(ModelVariant::Unimodal),
            "spatial" => Ok(ModelVariant::Spatial),
            "dual" | "dualmodality" | "dual_modality" => Ok(ModelVariant::DualModality),
            "multi" | "multiinput" | "multi_input" => Ok(ModelVariant::MultiInput),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected unimodal, spatial, dual or multi)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub variant: ModelVariant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_factor: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub sinusoid_base: f64,
    pub coord_scale: f64,
    pub dropout: f64,
    /// Inverse-frequency class weights in the loss; plain cross-entropy when false.
    pub class_weighting: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            variant: ModelVariant::DualModality,
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            mlp_factor: 4,
            epochs: 20,
            lr: 3e-5,
            batch_size: 64,
            weight_decay: 0.01,
            seed: 0,
            sinusoid_base: 10000.0,
            coord_scale: 1000.0,
            dropout: 0.0,
            class_weighting: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.variant.uses(TokenType::Spatial) && !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model {} must be divisible by 4 for the spatial token", self.d_model));
        }
        if self.mlp_factor == 0 || self.batch_size == 0 {
            return bad("mlp_factor and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("invalid lr {} / weight_decay {}", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.sinusoid_base > 1.0 && self.coord_scale > 0.0) {
            return bad("sinusoid_base must exceed 1 and coord_scale must be positive".into());
        }
        Ok(())
    }
}

/// Sinusoidal encoding of a 2-d position.
///
/// The position is normalized to `[0,1]²` by `bbox` (no box, or a flat axis,
/// gives 0) and multiplied by `coord_scale`. The first `d/2` entries encode x
/// and the rest encode y; within each half, entry `2i` is `sin(p·base^(-2i/(d/2)))`
/// and `2i+1` the matching cosine.
pub fn sinusoidal_encode(
    pos: (f32, f32),
    bbox: Option<&BoundingBox>,
    d_model: usize,
    base: f64,
    coord_scale: f64,
) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "sinusoidal encoding width {d_model} must be a positive multiple of 4"
        )));
    }
    let (nx, ny) = bbox.map_or((0.0, 0.0), |b| b.normalize(pos.0, pos.1));
    let half = d_model / 2;
    let mut out = vec![0.0; d_model];
    for (offset, p) in [(0, nx * coord_scale), (half, ny * coord_scale)] {
        for i in 0..half / 2 {
            let angle = p / base.powf(2.0 * i as f64 / half as f64);
            out[offset + 2 * i] = angle.sin();
            out[offset + 2 * i + 1] = angle.cos();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> BoundingBox {
        BoundingBox {
            min_x: 0.0,
            max_x: 1.0,
            min_y: 0.0,
            max_y: 1.0,
        }
    }

    #[test]
    fn origin_encodes_to_sin_zero_cos_one() {
        let e = sinusoidal_encode((0.0, 0.0), Some(&unit_box()), 16, 10000.0, 1000.0).unwrap();
        for pair in e.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn half_x_matches_scalar_formula() {
        let e = sinusoidal_encode((0.5, 0.0), Some(&unit_box()), 8, 10000.0, 1000.0).unwrap();
        // half = 4: frequencies 1 and 1/100.
        let expect = [
            500f64.sin(),
            500f64.cos(),
            5f64.sin(),
            5f64.cos(),
            0.0,
            1.0,
            0.0,
            1.0,
        ];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoding_depends_on_normalized_position_only() {
        let a = BoundingBox {
            min_x: 0.0,
            max_x: 10.0,
            min_y: 0.0,
            max_y: 10.0,
        };
        let b = BoundingBox {
            min_x: 100.0,
            max_x: 120.0,
            min_y: -10.0,
            max_y: 10.0,
        };
        let ea = sinusoidal_encode((2.5, 5.0), Some(&a), 12, 10000.0, 1000.0).unwrap();
        let eb = sinusoidal_encode((105.0, 0.0), Some(&b), 12, 10000.0, 1000.0).unwrap();
        assert_eq!(ea, eb);
        assert!(sinusoidal_encode((0.0, 0.0), None, 6, 10000.0, 1000.0).is_err());
    }

    #[test]
    fn variant_arity_and_parsing() {
        let arity: Vec<usize> = ModelVariant::ALL.iter().map(|v| v.n_tokens()).collect();
        assert_eq!(arity, vec![1, 2, 2, 3]);
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.name()));
        }
        assert!("quad".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FusionConfig::default().validate().is_ok());
        let c = FusionConfig {
            d_model: 10,
            n_heads: 3,
            ..FusionConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = FusionConfig {
            variant: ModelVariant::Spatial,
            d_model: 6,
            n_heads: 2,
            ..FusionConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
