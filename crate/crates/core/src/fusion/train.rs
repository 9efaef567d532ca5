use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{FusionArch, FusionInputs};
use super::FusionConfig;
use crate::dataset::{BoundingBox, CellDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{self, Dropout};
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

/// Called after every epoch with `(epoch, mean_loss)`.
pub type EpochCallback<'a> = &'a mut dyn FnMut(usize, f64);

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedClassifier {
    pub arch: FusionArch,
    pub class_names: Vec<String>,
    /// Coordinate extent of the training cells; positions are normalized against it.
    pub bbox: Option<BoundingBox>,
    pub params: ParamStore<f32>,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    pub class_weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    arch: FusionArch,
    class_names: Vec<String>,
    bbox: Option<BoundingBox>,
    history: Vec<f64>,
    class_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// `n × n_classes` softmax probabilities.
    pub probs: Tensor<f32>,
}

/// `w_c ∝ 1/count_c`, scaled so the weights average to 1 over classes.
pub fn inverse_frequency_weights(labels: &[usize], class_names: &[String]) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; class_names.len()];
    for &l in labels {
        if l >= counts.len() {
            return Err(Error::LabelOutOfRange {
                label: l,
                n_classes: counts.len(),
            });
        }
        counts[l] += 1;
    }
    let absent: Vec<String> = counts
        .iter()
        .zip(class_names)
        .filter(|(&c, _)| c == 0)
        .map(|(_, n)| n.clone())
        .collect();
    if !absent.is_empty() {
        return Err(Error::AbsentClasses(absent));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// `Σ w[yᵢ]·CEᵢ / Σ w[yᵢ]`, evaluated in 64-bit.
pub fn weighted_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize], class_weights: &[f64]) -> Result<f64> {
    if logits.rank() != 2 || logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("cross-entropy logits", &[labels.len(), class_weights.len()], logits.shape()));
    }
    let c = logits.cols();
    if class_weights.len() != c {
        return Err(Error::shape("class weights", &[c], &[class_weights.len()]));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
        let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        num += class_weights[y] * (lse - row[y]);
        den += class_weights[y];
    }
    Ok(num / den)
}

pub fn train_classifier(train: &CellDataset, cfg: &FusionConfig) -> Result<TrainedClassifier> {
    train_classifier_with(train, cfg, None)
}

/// Mini-batch AdamW on weighted cross-entropy. The epoch order is reshuffled
/// from a seeded stream, so equal data and config give equal parameters.
pub fn train_classifier_with(
    train: &CellDataset,
    cfg: &FusionConfig,
    mut on_epoch: Option<EpochCallback<'_>>,
) -> Result<TrainedClassifier> {
    let labels = train.require_labels()?;
    let arch = FusionArch::for_dataset(cfg.clone(), train)?;
    let mut class_weights = inverse_frequency_weights(&labels, train.class_names())?;
    if !cfg.class_weighting {
        class_weights.fill(1.0);
    }
    let bbox = train.bounding_box();
    let n = train.len();
    let all: Vec<usize> = (0..n).collect();
    let inputs: FusionInputs<f32> = arch.gather(train, &all, bbox.as_ref())?;
    let mut params = arch.init_params::<f32>()?;
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let mut shuffle_rng = seed::stream(cfg.seed, "fusion.shuffle");
    let mut dropout_rng = seed::stream(cfg.seed, "fusion.dropout");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = all;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = inputs.select(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let w: Vec<f32> = y.iter().map(|&c| class_weights[c] as f32).collect();
            let mut g = Graph::new();
            let mut dropout = (cfg.dropout > 0.0).then_some(Dropout {
                rate: cfg.dropout,
                rng: &mut dropout_rng,
            });
            let logits = arch.forward_impl(&mut g, &params, &x, &mut dropout)?;
            let loss = g.softmax_cross_entropy(logits, &y, Some(&w))?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            let grads = g.backward(loss, &params)?;
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}")));
            }
            opt.step(&mut params, &grads)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / n as f64;
        history.push(mean);
        if let Some(cb) = on_epoch.as_mut() {
            cb(epoch, mean);
        }
    }
    Ok(TrainedClassifier {
        arch,
        class_names: train.class_names().to_vec(),
        bbox,
        params,
        history,
        class_weights,
    })
}

fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Predicted class per cell (argmax, lowest index on ties) and class
/// probabilities. Batches are evaluated in parallel; results do not depend on
/// `batch_size`.
pub fn predict_labels(model: &TrainedClassifier, ds: &CellDataset, batch_size: usize) -> Result<Predictions> {
    let c = model.arch.n_classes;
    let n = ds.len();
    let all: Vec<usize> = (0..n).collect();
    let chunks: Vec<Result<Vec<f32>>> = all
        .par_chunks(batch_size.max(1))
        .map(|idx| {
            let x: FusionInputs<f32> = model.arch.gather(ds, idx, model.bbox.as_ref())?;
            let mut g = Graph::new();
            let logits = model.arch.forward(&mut g, &model.params, &x)?;
            Ok(g.value(logits).data().to_vec())
        })
        .collect();
    let mut logits = Vec::with_capacity(n * c);
    for chunk in chunks {
        logits.extend(chunk?);
    }
    let logits = Tensor::new(vec![n, c], logits)?;
    let labels = (0..n).map(|i| argmax_lowest(logits.row(i))).collect();
    let probs = if n == 0 { logits } else { nn::softmax(&logits, 1)? };
    Ok(Predictions { labels, probs })
}

impl TrainedClassifier {
    /// Untrained model with freshly initialized parameters.
    pub fn initialized(ds: &CellDataset, cfg: &FusionConfig) -> Result<Self> {
        let arch = FusionArch::for_dataset(cfg.clone(), ds)?;
        Ok(Self {
            params: arch.init_params()?,
            arch,
            class_names: ds.class_names().to_vec(),
            bbox: ds.bounding_box(),
            history: Vec::new(),
            class_weights: vec![1.0; ds.n_classes()],
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.arch.config
    }

    pub fn predict(&self, ds: &CellDataset) -> Result<Predictions> {
        predict_labels(self, ds, self.arch.config.batch_size)
    }

    /// Writes `<stem>.json` and `<stem>.f32` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let meta = ClassifierMeta {
            arch: self.arch.clone(),
            class_names: self.class_names.clone(),
            bbox: self.bbox,
            history: self.history.clone(),
            class_weights: self.class_weights.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::malformed("classifier metadata", e))?;
        save_checkpoint(dir, stem, &self.params, meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (params, meta) = load_checkpoint(dir, stem)?;
        let meta: ClassifierMeta =
            serde_json::from_value(meta).map_err(|e| Error::malformed("classifier metadata", e))?;
        meta.arch.config.validate()?;
        meta.arch.init_params::<f32>()?.check_same_layout(&params)?;
        if meta.class_names.len() != meta.arch.n_classes {
            return Err(Error::malformed("classifier metadata", "class name count differs from head width"));
        }
        Ok(Self {
            arch: meta.arch,
            class_names: meta.class_names,
            bbox: meta.bbox,
            params,
            history: meta.history,
            class_weights: meta.class_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelVariant;
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn small_cfg(variant: ModelVariant) -> FusionConfig {
        FusionConfig {
            variant,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            epochs: 3,
            lr: 1e-3,
            batch_size: 16,
            ..FusionConfig::default()
        }
    }

    fn data(n: usize) -> CellDataset {
        generate_synthetic(&SynthConfig {
            n_cells: n,
            n_classes: 2,
            gene_dim: 6,
            morph_dim: 10,
            gene_separation: 3.0,
            noise_sigma: 0.3,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(vec![5, 6]);
        let loss = weighted_cross_entropy(&logits, &[0, 1, 2, 3, 5], &[0.7; 6]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero_loss() {
        let logits = Tensor::new(vec![2, 2], vec![200.0f64, -200.0, -200.0, 200.0]).unwrap();
        assert!(weighted_cross_entropy(&logits, &[0, 1], &[1.0, 1.0]).unwrap() < 1e-12);
    }

    #[test]
    fn imbalanced_batch_matches_per_sample_sum() {
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i == 9)).collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let w = inverse_frequency_weights(&labels, &names).unwrap();
        // counts 9 and 1: inverse 1/9 and 1, mean 5/9.
        assert!((w[0] - 0.2).abs() < 1e-12 && (w[1] - 1.8).abs() < 1e-12);
        let logits = Tensor::from_fn(vec![10, 2], |k| ((k * 7 % 5) as f64) * 0.3 - 0.5);
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &y) in labels.iter().enumerate() {
            let r = logits.row(i);
            let ce = -(r[y].exp() / (r[0].exp() + r[1].exp())).ln();
            num += w[y] * ce;
            den += w[y];
        }
        let got = weighted_cross_entropy(&logits, &labels, &w).unwrap();
        assert!((got - num / den).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_named() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        match inverse_frequency_weights(&[0, 0, 2], &names) {
            Err(Error::AbsentClasses(v)) => assert_eq!(v, vec!["b".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let ds = data(40);
        let cfg = FusionConfig {
            epochs: 0,
            ..small_cfg(ModelVariant::Unimodal)
        };
        let m = train_classifier(&ds, &cfg).unwrap();
        assert!(m.history.is_empty());
        assert_eq!(m.params, TrainedClassifier::initialized(&ds, &cfg).unwrap().params);
    }

    #[test]
    fn separable_training_reduces_loss() {
        let ds = data(200);
        let m = train_classifier(&ds, &small_cfg(ModelVariant::DualModality)).unwrap();
        assert_eq!(m.history.len(), 3);
        assert!(m.history[2] < m.history[0]);
    }

    #[test]
    fn unlabeled_training_data_is_rejected() {
        let mut parts = data(20).into_parts();
        parts.labels[3] = None;
        let ds = CellDataset::new(parts).unwrap();
        assert!(matches!(
            train_classifier(&ds, &small_cfg(ModelVariant::Unimodal)),
            Err(Error::Unlabeled { .. })
        ));
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let ds = data(30);
        let mut m = TrainedClassifier::initialized(&ds, &small_cfg(ModelVariant::Spatial)).unwrap();
        m.params.by_name_mut("head.weight").unwrap().data_mut().fill(0.0);
        let p = m.predict(&ds).unwrap();
        assert!(p.labels.iter().all(|&l| l == 0));
        assert!(p.probs.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn predictions_do_not_depend_on_batch_size() {
        let ds = data(70);
        let m = train_classifier(&ds, &small_cfg(ModelVariant::MultiInput)).unwrap();
        let a = predict_labels(&m, &ds, 1).unwrap();
        let b = predict_labels(&m, &ds, 64).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-6);
        for i in 0..ds.len() {
            let s: f32 = a.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let ds = data(40);
        let m = train_classifier(&ds, &small_cfg(ModelVariant::MultiInput)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), "model").unwrap();
        let back = TrainedClassifier::load(dir.path(), "model").unwrap();
        assert_eq!(back, m);
    }
}
