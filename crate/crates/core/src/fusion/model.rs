use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sinusoidal_encode, FusionConfig, TokenType};
use crate::dataset::{BoundingBox, CellDataset};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{self, encoder_layer, Dropout, EncoderLayerParams, LayerNormParams, LinearParams};
use crate::params::ParamStore;
use crate::seed::{self, StreamRng};
use crate::tensor::{Scalar, Tensor};

const TAG_INIT_STD: f64 = 0.02;

/// Shapes of a classifier: its config plus input widths and class count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionArch {
    pub config: FusionConfig,
    pub gene_dim: usize,
    /// Present exactly when the variant consumes morphology.
    pub morph_dim: Option<usize>,
    pub n_classes: usize,
}

/// Raw per-cell inputs for a batch, one row per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionInputs<T: Scalar = f32> {
    pub gene: Tensor<T>,
    pub morph: Option<Tensor<T>>,
    /// Sinusoidal position encodings, `B × d_model`.
    pub spatial: Option<Tensor<T>>,
}

impl<T: Scalar> FusionInputs<T> {
    pub fn len(&self) -> usize {
        self.gene.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            gene: self.gene.select_rows(idx),
            morph: self.morph.as_ref().map(|m| m.select_rows(idx)),
            spatial: self.spatial.as_ref().map(|s| s.select_rows(idx)),
        }
    }

    pub fn cast<U: Scalar>(&self) -> FusionInputs<U> {
        FusionInputs {
            gene: self.gene.cast(),
            morph: self.morph.as_ref().map(Tensor::cast),
            spatial: self.spatial.as_ref().map(Tensor::cast),
        }
    }
}

/// One cell's projected (and tagged) tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Scalar = f32> {
    /// `n_tokens × d_model`.
    pub tokens: Tensor<T>,
    pub token_types: Vec<TokenType>,
}

fn type_name(t: TokenType) -> &'static str {
    match t {
        TokenType::Gene => "gene",
        TokenType::Morph => "morph",
        TokenType::Spatial => "spatial",
    }
}

pub(crate) fn layer_prefix(i: usize) -> String {
    format!("encoder.{i}")
}

pub(crate) fn type_bias_name(i: usize) -> String {
    format!("encoder.{i}.type_bias")
}

impl FusionArch {
    pub fn new(config: FusionConfig, gene_dim: usize, morph_dim: Option<usize>, n_classes: usize) -> Result<Self> {
        config.validate()?;
        if gene_dim == 0 || n_classes == 0 {
            return Err(Error::Config("gene width and class count must be positive".into()));
        }
        let morph_dim = if config.variant.uses(TokenType::Morph) {
            match morph_dim {
                Some(d) if d > 0 => Some(d),
                _ => {
                    return Err(Error::MissingModality {
                        variant: config.variant.name(),
                        modality: "morph",
                    })
                }
            }
        } else {
            None
        };
        Ok(Self {
            config,
            gene_dim,
            morph_dim,
            n_classes,
        })
    }

    /// Architecture for a dataset; fails if the variant needs absent morphology.
    pub fn for_dataset(config: FusionConfig, ds: &CellDataset) -> Result<Self> {
        Self::new(config, ds.gene_dim(), ds.morph_dim(), ds.n_classes())
    }

    pub fn n_tokens(&self) -> usize {
        self.config.variant.n_tokens()
    }

    /// Freshly initialized parameters, seeded from `config.seed`.
    pub fn init_params<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let mut rng = seed::stream(cfg.seed, "fusion.init");
        let mut store = ParamStore::new();
        LinearParams::register(&mut store, "proj.gene", self.gene_dim, d, &mut rng)?;
        if let Some(dm) = self.morph_dim {
            LinearParams::register(&mut store, "proj.morph", dm, d, &mut rng)?;
        }
        if cfg.variant.uses(TokenType::Spatial) {
            LinearParams::register(&mut store, "proj.spatial", d, d, &mut rng)?;
        }
        if cfg.variant.tags_modalities() {
            for &t in cfg.variant.token_types() {
                store.insert(
                    format!("tag.{}", type_name(t)),
                    nn::normal_init(&mut rng, vec![d], TAG_INIT_STD),
                )?;
            }
        }
        let s = self.n_tokens();
        for i in 0..cfg.n_layers {
            EncoderLayerParams::register(&mut store, &layer_prefix(i), d, cfg.mlp_factor, &mut rng)?;
            if cfg.variant.has_type_bias() {
                store.insert(type_bias_name(i), Tensor::zeros(vec![cfg.n_heads, s, s]))?;
            }
        }
        LayerNormParams::register(&mut store, "encoder.final_norm", d)?;
        LinearParams::register(&mut store, "head", d, self.n_classes, &mut rng)?;
        Ok(store)
    }

    /// Gathers model inputs for the rows `indices` of `ds`, encoding positions against `bbox`.
    pub fn gather<T: Scalar>(
        &self,
        ds: &CellDataset,
        indices: &[usize],
        bbox: Option<&BoundingBox>,
    ) -> Result<FusionInputs<T>> {
        if ds.gene_dim() != self.gene_dim {
            return Err(Error::shape("gene embedding width", &[self.gene_dim], &[ds.gene_dim()]));
        }
        let gene = ds.gene().select_rows(indices).cast();
        let morph = match self.morph_dim {
            Some(dm) => {
                let m = ds.morph().ok_or(Error::MissingModality {
                    variant: self.config.variant.name(),
                    modality: "morph",
                })?;
                if m.cols() != dm {
                    return Err(Error::shape("morph embedding width", &[dm], &[m.cols()]));
                }
                Some(m.select_rows(indices).cast())
            }
            None => None,
        };
        let spatial = if self.config.variant.uses(TokenType::Spatial) {
            let d = self.config.d_model;
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                let p = ds.coords().row(i);
                let e = sinusoidal_encode((p[0], p[1]), bbox, d, self.config.sinusoid_base, self.config.coord_scale)?;
                data.extend(e.into_iter().map(T::lit));
            }
            Some(Tensor::new(vec![indices.len(), d], data)?)
        } else {
            None
        };
        Ok(FusionInputs { gene, morph, spatial })
    }

    fn check_inputs<T: Scalar>(&self, x: &FusionInputs<T>) -> Result<()> {
        let b = x.len();
        if b == 0 {
            return Err(Error::shape("fusion batch", &[1], &[0]));
        }
        if x.gene.shape() != [b, self.gene_dim] {
            return Err(Error::shape("gene tokens", &[b, self.gene_dim], x.gene.shape()));
        }
        match (self.morph_dim, &x.morph) {
            (Some(dm), Some(m)) if m.shape() != [b, dm] => {
                return Err(Error::shape("morph tokens", &[b, dm], m.shape()))
            }
            (Some(_), None) => {
                return Err(Error::MissingModality {
                    variant: self.config.variant.name(),
                    modality: "morph",
                })
            }
            _ => {}
        }
        if self.config.variant.uses(TokenType::Spatial) {
            let d = self.config.d_model;
            match &x.spatial {
                Some(s) if s.shape() != [b, d] => return Err(Error::shape("spatial tokens", &[b, d], s.shape())),
                None => {
                    return Err(Error::MissingModality {
                        variant: self.config.variant.name(),
                        modality: "spatial",
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Projected and tagged tokens, `(B·n_tokens) × d_model`, cell-major.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &FusionInputs<T>) -> Result<Var> {
        self.check_inputs(x)?;
        let variant = self.config.variant;
        let mut tokens = Vec::with_capacity(variant.n_tokens());
        for &t in variant.token_types() {
            let raw = match t {
                TokenType::Gene => &x.gene,
                TokenType::Morph => x.morph.as_ref().expect("checked"),
                TokenType::Spatial => x.spatial.as_ref().expect("checked"),
            };
            let input = g.constant(raw.clone());
            let proj = LinearParams::lookup(store, &format!("proj.{}", type_name(t)))?;
            let mut tok = proj.forward(g, store, input)?;
            if variant.tags_modalities() {
                let tag = g.param(store, nn::lookup(store, &format!("tag.{}", type_name(t)))?);
                tok = g.add_row(tok, tag)?;
            }
            tokens.push(tok);
        }
        if tokens.len() == 1 {
            Ok(tokens[0])
        } else {
            g.interleave(&tokens)
        }
    }

    /// Per-cell token sequences (values only).
    pub fn assemble_tokens<T: Scalar>(&self, store: &ParamStore<T>, x: &FusionInputs<T>) -> Result<Vec<TokenSequence<T>>> {
        let mut g = Graph::new();
        let v = self.embed(&mut g, store, x)?;
        let s = self.n_tokens();
        let all = g.value(v);
        let types = self.config.variant.token_types().to_vec();
        (0..x.len())
            .map(|b| {
                let rows: Vec<usize> = (b * s..(b + 1) * s).collect();
                Ok(TokenSequence {
                    tokens: all.select_rows(&rows),
                    token_types: types.clone(),
                })
            })
            .collect()
    }

    /// Logits, `B × n_classes`, with dropout disabled.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &FusionInputs<T>) -> Result<Var> {
        self.forward_impl::<T, StreamRng>(g, store, x, &mut None)
    }

    pub(crate) fn forward_impl<T: Scalar, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: &FusionInputs<T>,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let s = self.n_tokens();
        let mut h = self.embed(g, store, x)?;
        for i in 0..cfg.n_layers {
            let p = EncoderLayerParams::lookup(store, &layer_prefix(i))?;
            let bias = if cfg.variant.has_type_bias() {
                Some(g.param(store, nn::lookup(store, &type_bias_name(i))?))
            } else {
                None
            };
            h = encoder_layer(g, store, &p, h, cfg.n_heads, s, bias, dropout)?;
        }
        let h = LayerNormParams::lookup(store, "encoder.final_norm")?.forward(g, store, h)?;
        let pooled = g.mean_pool(h, s)?;
        LinearParams::lookup(store, "head")?.forward(g, store, pooled)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelVariant;
    use super::*;

    fn arch(variant: ModelVariant) -> FusionArch {
        let cfg = FusionConfig {
            variant,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            ..FusionConfig::default()
        };
        FusionArch::new(cfg, 5, Some(7), 3).unwrap()
    }

    fn inputs(a: &FusionArch, b: usize) -> FusionInputs<f64> {
        let mut rng = seed::stream(9, "test");
        FusionInputs {
            gene: nn::normal_init(&mut rng, vec![b, a.gene_dim], 1.0),
            morph: a.morph_dim.map(|d| nn::normal_init(&mut rng, vec![b, d], 1.0)),
            spatial: a
                .config
                .variant
                .uses(TokenType::Spatial)
                .then(|| nn::normal_init(&mut rng, vec![b, a.config.d_model], 1.0)),
        }
    }

    #[test]
    fn token_counts_follow_variant() {
        for v in ModelVariant::ALL {
            let a = arch(v);
            let store = a.init_params::<f64>().unwrap();
            let seqs = a.assemble_tokens(&store, &inputs(&a, 2)).unwrap();
            assert_eq!(seqs.len(), 2);
            assert_eq!(seqs[0].tokens.shape(), &[v.n_tokens(), 8]);
            assert_eq!(seqs[0].token_types, v.token_types());
        }
    }

    #[test]
    fn unimodal_token_is_projected_gene() {
        let a = arch(ModelVariant::Unimodal);
        let store = a.init_params::<f64>().unwrap();
        let x = inputs(&a, 1);
        let seq = &a.assemble_tokens(&store, &x).unwrap()[0];
        let w = store.by_name("proj.gene.weight").unwrap();
        let b = store.by_name("proj.gene.bias").unwrap();
        let mut expect = x.gene.matmul(w).unwrap();
        expect.data_mut().iter_mut().zip(b.data()).for_each(|(e, b)| *e += b);
        assert!(seq.tokens.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn missing_morph_is_reported() {
        let cfg = FusionConfig {
            variant: ModelVariant::DualModality,
            d_model: 8,
            n_heads: 2,
            ..FusionConfig::default()
        };
        assert!(matches!(
            FusionArch::new(cfg, 5, None, 3),
            Err(Error::MissingModality { modality: "morph", .. })
        ));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        for v in ModelVariant::ALL {
            let a = arch(v);
            let mut store = a.init_params::<f64>().unwrap();
            store.by_name_mut("head.weight").unwrap().data_mut().fill(0.0);
            let mut g = Graph::new();
            let logits = a.forward(&mut g, &store, &inputs(&a, 4)).unwrap();
            assert_eq!(g.value(logits).shape(), &[4, 3]);
            assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let a = arch(ModelVariant::Unimodal);
        let store = a.init_params::<f64>().unwrap();
        let mut x = inputs(&a, 2);
        x.gene = Tensor::zeros(vec![2, 4]);
        let mut g = Graph::new();
        assert!(matches!(a.forward(&mut g, &store, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn type_bias_masks_gene_to_morph_attention() {
        let a = arch(ModelVariant::MultiInput);
        let mut store = a.init_params::<f64>().unwrap();
        {
            let bias = store.by_name_mut(&type_bias_name(0)).unwrap();
            for h in 0..2 {
                bias.data_mut()[h * 9 + TokenType::Gene.index() * 3 + TokenType::Morph.index()] = -1e9;
            }
        }
        let mut g = Graph::new();
        g.record_attention();
        a.forward(&mut g, &store, &inputs(&a, 3)).unwrap();
        let maps = g.attention_maps();
        assert_eq!(maps.len(), 1);
        let m = &maps[0];
        assert_eq!(m.shape(), &[3, 2, 3, 3]);
        for b in 0..3 {
            for h in 0..2 {
                let base = (b * 2 + h) * 9;
                assert_eq!(m.data()[base + 1], 0.0);
                let row: f64 = m.data()[base..base + 3].iter().sum();
                assert!((row - 1.0).abs() < 1e-12);
            }
        }
    }
}
