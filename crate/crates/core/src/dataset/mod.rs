//! Paired per-cell embeddings: in-memory columns, the CellPack directory
//! format, seeded splitting and a synthetic generator.

mod io;
mod split;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_dataset, write_dataset, DatasetManifest, CELLPACK_FORMAT_VERSION};
pub use split::{split_dataset, split_dataset_stratified, split_indices};
pub use synth::{generate_synthetic, SynthConfig};

pub const DEFAULT_GENE_DIM: usize = 512;
pub const DEFAULT_MORPH_DIM: usize = 1536;

/// Axis-aligned extent of the observed coordinates, in micrometers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_x: f32,
    pub max_x: f32,
    pub min_y: f32,
    pub max_y: f32,
}

impl BoundingBox {
    pub fn of(coords: &Tensor<f32>) -> Option<Self> {
        if coords.rows() == 0 || coords.is_empty() {
            return None;
        }
        let mut b = BoundingBox {
            min_x: f32::INFINITY,
            max_x: f32::NEG_INFINITY,
            min_y: f32::INFINITY,
            max_y: f32::NEG_INFINITY,
        };
        for r in 0..coords.rows() {
            let p = coords.row(r);
            b.min_x = b.min_x.min(p[0]);
            b.max_x = b.max_x.max(p[0]);
            b.min_y = b.min_y.min(p[1]);
            b.max_y = b.max_y.max(p[1]);
        }
        Some(b)
    }

    /// Maps `(x, y)` into `[0, 1]²`; a zero-width axis maps to 0.
    pub fn normalize(&self, x: f32, y: f32) -> (f64, f64) {
        let axis = |v: f32, lo: f32, hi: f32| {
            let w = hi as f64 - lo as f64;
            if w > 0.0 {
                (v as f64 - lo as f64) / w
            } else {
                0.0
            }
        };
        (axis(x, self.min_x, self.max_x), axis(y, self.min_y, self.max_y))
    }
}

/// One cell's fields, gathered from the column store.
#[derive(Clone, Debug, PartialEq)]
pub struct CellRecord {
    pub cell_id: String,
    pub gene_emb: Vec<f32>,
    pub morph_emb: Option<Vec<f32>>,
    pub pos: (f32, f32),
    pub label: Option<usize>,
    pub label_source: Option<String>,
}

/// Raw columns handed to [`CellDataset::new`] for validation.
#[derive(Clone, Debug, Default)]
pub struct DatasetParts {
    pub cell_ids: Vec<String>,
    pub gene: Tensor<f32>,
    pub morph: Option<Tensor<f32>>,
    pub coords: Tensor<f32>,
    pub labels: Vec<Option<usize>>,
    pub label_sources: Vec<Option<String>>,
    pub class_names: Vec<String>,
}

/// Column-wise cell table. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellDataset {
    cell_ids: Vec<String>,
    gene: Tensor<f32>,
    morph: Option<Tensor<f32>>,
    coords: Tensor<f32>,
    labels: Vec<Option<usize>>,
    label_sources: Vec<Option<String>>,
    class_names: Vec<String>,
    bbox: Option<BoundingBox>,
}

fn check_matrix(field: &str, t: &Tensor<f32>, n: usize) -> Result<usize> {
    if t.rank() != 2 || t.rows() != n {
        return Err(Error::shape(field, &[n, t.cols()], t.shape()));
    }
    if let Some(index) = t.first_non_finite() {
        return Err(Error::NonFinite {
            field: field.to_string(),
            index,
        });
    }
    Ok(t.cols())
}

impl CellDataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let n = parts.cell_ids.len();
        check_matrix("gene", &parts.gene, n)?;
        if let Some(m) = &parts.morph {
            check_matrix("morph", m, n)?;
        }
        if check_matrix("coords", &parts.coords, n)? != 2 {
            return Err(Error::shape("coords", &[n, 2], parts.coords.shape()));
        }
        if parts.labels.len() != n {
            return Err(Error::shape("labels", &[n], &[parts.labels.len()]));
        }
        if parts.label_sources.len() != n {
            return Err(Error::shape("label sources", &[n], &[parts.label_sources.len()]));
        }
        let c = parts.class_names.len();
        if let Some(&bad) = parts.labels.iter().flatten().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes: c,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &parts.cell_ids {
            if id.is_empty() || id.contains(['\n', '\r']) {
                return Err(Error::malformed("cell_id", format!("invalid cell id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::malformed("cell_id", format!("duplicate cell id `{id}`")));
            }
        }
        let bbox = BoundingBox::of(&parts.coords);
        Ok(Self {
            cell_ids: parts.cell_ids,
            gene: parts.gene,
            morph: parts.morph,
            coords: parts.coords,
            labels: parts.labels,
            label_sources: parts.label_sources,
            class_names: parts.class_names,
            bbox,
        })
    }

    pub fn into_parts(self) -> DatasetParts {
        DatasetParts {
            cell_ids: self.cell_ids,
            gene: self.gene,
            morph: self.morph,
            coords: self.coords,
            labels: self.labels,
            label_sources: self.label_sources,
            class_names: self.class_names,
        }
    }

    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn gene_dim(&self) -> usize {
        self.gene.cols()
    }

    /// Morphology width, or `None` when the dataset carries no morphology.
    pub fn morph_dim(&self) -> Option<usize> {
        self.morph.as_ref().map(Tensor::cols)
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene(&self) -> &Tensor<f32> {
        &self.gene
    }

    pub fn morph(&self) -> Option<&Tensor<f32>> {
        self.morph.as_ref()
    }

    pub fn coords(&self) -> &Tensor<f32> {
        &self.coords
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn label_sources(&self) -> &[Option<String>] {
        &self.label_sources
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn bounding_box(&self) -> Option<BoundingBox> {
        self.bbox
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    pub fn is_fully_labeled(&self) -> bool {
        !self.is_empty() && self.labels.iter().all(Option::is_some)
    }

    /// Labels of a fully labeled dataset.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        let unlabeled = self.labels.iter().filter(|l| l.is_none()).count();
        if unlabeled > 0 || self.is_empty() {
            return Err(Error::Unlabeled {
                unlabeled,
                total: self.len(),
            });
        }
        Ok(self.labels.iter().map(|l| l.unwrap()).collect())
    }

    pub fn record(&self, i: usize) -> CellRecord {
        let p = self.coords.row(i);
        CellRecord {
            cell_id: self.cell_ids[i].clone(),
            gene_emb: self.gene.row(i).to_vec(),
            morph_emb: self.morph.as_ref().map(|m| m.row(i).to_vec()),
            pos: (p[0], p[1]),
            label: self.labels[i],
            label_source: self.label_sources[i].clone(),
        }
    }

    /// A new dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> CellDataset {
        let coords = self.coords.select_rows(indices);
        CellDataset {
            cell_ids: indices.iter().map(|&i| self.cell_ids[i].clone()).collect(),
            gene: self.gene.select_rows(indices),
            morph: self.morph.as_ref().map(|m| m.select_rows(indices)),
            bbox: BoundingBox::of(&coords),
            coords,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            label_sources: indices.iter().map(|&i| self.label_sources[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Drops cells without a label (ambiguous or low-confidence annotations).
    pub fn labeled_only(&self) -> CellDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i].is_some()).collect();
        self.subset(&keep)
    }

    /// Keeps cells whose label source equals `source`.
    pub fn with_label_source(&self, source: &str) -> CellDataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.label_sources[i].as_deref() == Some(source))
            .collect();
        self.subset(&keep)
    }

    pub fn index_of(&self, cell_id: &str) -> Option<usize> {
        self.cell_ids.iter().position(|c| c == cell_id)
    }
}
