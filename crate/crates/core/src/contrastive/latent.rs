use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{atomic_write, ensure_dir, f32_from_le_bytes, f32_to_le_bytes, read_bytes};
use crate::tensor::Tensor;

pub const LATENT_FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "latent.json";
const CELLS: &str = "cells.txt";
const MORPH: &str = "morph_latent.f32";
const GENE: &str = "gene_latent.f32";

/// Projected (post-normalization) latents of both modalities with cell ids
/// and any labels carried over from the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPack {
    pub cell_ids: Vec<String>,
    pub class_names: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub morph: Tensor<f32>,
    pub gene: Tensor<f32>,
}

#[derive(Serialize, Deserialize)]
struct LatentManifest {
    format_version: u32,
    n_cells: usize,
    latent_dim: usize,
    class_names: Vec<String>,
    labels: Vec<Option<usize>>,
    cells: String,
    morph: String,
    gene: String,
}

impl LatentPack {
    pub fn latent_dim(&self) -> usize {
        self.morph.cols()
    }

    pub fn len(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cell_ids.is_empty()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let n = self.len();
        let d = self.latent_dim();
        if self.morph.shape() != [n, d] || self.gene.shape() != [n, d] || self.labels.len() != n {
            return Err(Error::shape("latent pack", &[n, d], self.gene.shape()));
        }
        ensure_dir(dir)?;
        let manifest = LatentManifest {
            format_version: LATENT_FORMAT_VERSION,
            n_cells: n,
            latent_dim: d,
            class_names: self.class_names.clone(),
            labels: self.labels.clone(),
            cells: CELLS.into(),
            morph: MORPH.into(),
            gene: GENE.into(),
        };
        let mut ids = String::new();
        for id in &self.cell_ids {
            ids.push_str(id);
            ids.push('\n');
        }
        atomic_write(&dir.join(CELLS), ids.as_bytes())?;
        atomic_write(&dir.join(MORPH), &f32_to_le_bytes(self.morph.data()))?;
        atomic_write(&dir.join(GENE), &f32_to_le_bytes(self.gene.data()))?;
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::malformed("latent manifest", e))?;
        atomic_write(&dir.join(MANIFEST), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: LatentManifest = serde_json::from_slice(&read_bytes(&dir.join(MANIFEST), "latent manifest")?)
            .map_err(|e| Error::malformed("latent manifest", e))?;
        if m.format_version != LATENT_FORMAT_VERSION {
            return Err(Error::malformed("latent manifest", format!("unsupported format_version {}", m.format_version)));
        }
        let ids = String::from_utf8(read_bytes(&dir.join(&m.cells), "cells")?).map_err(|e| Error::malformed("cells", e))?;
        let cell_ids: Vec<String> = ids.lines().map(str::to_string).collect();
        let (n, d) = (m.n_cells, m.latent_dim);
        if cell_ids.len() != n || m.labels.len() != n {
            return Err(Error::shape("latent cells", &[n], &[cell_ids.len()]));
        }
        if let Some(&bad) = m.labels.iter().flatten().find(|&&l| l >= m.class_names.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                n_classes: m.class_names.len(),
            });
        }
        let read = |file: &str, field: &str| -> Result<Tensor<f32>> {
            let v = f32_from_le_bytes(&read_bytes(&dir.join(file), field)?, field)?;
            if v.len() != n * d {
                return Err(Error::shape(field, &[n * d], &[v.len()]));
            }
            Tensor::new(vec![n, d], v)
        };
        Ok(Self {
            morph: read(&m.morph, "morph latent")?,
            gene: read(&m.gene, "gene latent")?,
            cell_ids,
            class_names: m.class_names,
            labels: m.labels,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let pack = LatentPack {
            cell_ids: vec!["a".into(), "b".into()],
            class_names: vec!["x".into()],
            labels: vec![Some(0), None],
            morph: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.6, 0.8]).unwrap(),
            gene: Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.8, -0.6]).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        pack.write(dir.path()).unwrap();
        assert_eq!(LatentPack::load(dir.path()).unwrap(), pack);
        std::fs::write(dir.path().join(GENE), [0u8; 12]).unwrap();
        assert!(matches!(LatentPack::load(dir.path()), Err(Error::Shape { .. })));
    }
}
