//! The CellPack directory format.
//!
//! ```text
//! manifest.json   n_cells, D_g, D_m, class_names, file names, format_version
//! cells.txt       one cell id per line
//! gene.f32        n_cells × D_g little-endian binary32, row-major
//! morph.f32       n_cells × D_m (omitted when the dataset has no morphology)
//! coords.f32      n_cells × 2 (x, y in micrometers)
//! labels.csv      cell_id,label_index,label_source (omitted when unlabeled)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellDataset, DatasetParts};
use crate::error::{Error, Result};
use crate::io_util::{atomic_write, ensure_dir, f32_from_le_bytes, f32_to_le_bytes, read_bytes};
use crate::tensor::Tensor;

pub const CELLPACK_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldFiles {
    pub ids: String,
    pub gene: String,
    pub morph: Option<String>,
    pub coords: String,
    pub labels: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub n_cells: usize,
    #[serde(rename = "D_g")]
    pub gene_dim: usize,
    #[serde(rename = "D_m")]
    pub morph_dim: Option<usize>,
    pub class_names: Vec<String>,
    pub files: FieldFiles,
}

pub fn write_dataset(ds: &CellDataset, dir: &Path) -> Result<()> {
    ensure_dir(dir)?;
    let labeled = ds.has_labels() || ds.label_sources().iter().any(Option::is_some);
    let files = FieldFiles {
        ids: "cells.txt".into(),
        gene: "gene.f32".into(),
        morph: ds.morph().map(|_| "morph.f32".into()),
        coords: "coords.f32".into(),
        labels: labeled.then(|| "labels.csv".into()),
    };
    let manifest = DatasetManifest {
        format_version: CELLPACK_FORMAT_VERSION,
        n_cells: ds.len(),
        gene_dim: ds.gene_dim(),
        morph_dim: ds.morph_dim(),
        class_names: ds.class_names().to_vec(),
        files: files.clone(),
    };

    let mut ids = String::new();
    for id in ds.cell_ids() {
        ids.push_str(id);
        ids.push('\n');
    }
    atomic_write(&dir.join(&files.ids), ids.as_bytes())?;
    atomic_write(&dir.join(&files.gene), &f32_to_le_bytes(ds.gene().data()))?;
    match (ds.morph(), &files.morph) {
        (Some(m), Some(name)) => atomic_write(&dir.join(name), &f32_to_le_bytes(m.data()))?,
        _ => remove_stale(&dir.join("morph.f32"))?,
    }
    atomic_write(&dir.join(&files.coords), &f32_to_le_bytes(ds.coords().data()))?;
    match &files.labels {
        Some(name) => atomic_write(&dir.join(name), &labels_csv(ds)?)?,
        None => remove_stale(&dir.join("labels.csv"))?,
    }
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::malformed("manifest", e))?;
    atomic_write(&dir.join(MANIFEST_FILE), &json)
}

fn remove_stale(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn labels_csv(ds: &CellDataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::malformed("labels", e);
    w.write_record(["cell_id", "label_index", "label_source"]).map_err(wrap)?;
    for i in 0..ds.len() {
        let label = ds.labels()[i].map(|l| l.to_string()).unwrap_or_default();
        let source = ds.label_sources()[i].clone().unwrap_or_default();
        w.write_record([ds.cell_ids()[i].as_str(), &label, &source]).map_err(wrap)?;
    }
    w.into_inner().map_err(|e| Error::malformed("labels", e.to_string()))
}

fn read_matrix(dir: &Path, file: &str, field: &str, rows: usize, cols: usize) -> Result<Tensor<f32>> {
    let bytes = read_bytes(&dir.join(file), field)?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::shape(
            format!("{field} ({file}, bytes)"),
            &[expected],
            &[bytes.len()],
        ));
    }
    let values = f32_from_le_bytes(&bytes, field)?;
    Tensor::new(vec![rows, cols], values)
}

pub fn load_dataset(dir: &Path) -> Result<CellDataset> {
    let raw = read_bytes(&dir.join(MANIFEST_FILE), "manifest")?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&raw).map_err(|e| Error::malformed("manifest", e))?;
    if manifest.format_version != CELLPACK_FORMAT_VERSION {
        return Err(Error::malformed(
            "manifest",
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    let n = manifest.n_cells;
    let files = &manifest.files;

    let ids_text = String::from_utf8(read_bytes(&dir.join(&files.ids), "cell_id")?)
        .map_err(|e| Error::malformed("cell_id", e))?;
    let cell_ids: Vec<String> = ids_text.lines().map(str::to_string).collect();
    if cell_ids.len() != n {
        return Err(Error::shape("cell_id (rows)", &[n], &[cell_ids.len()]));
    }

    let gene = read_matrix(dir, &files.gene, "gene", n, manifest.gene_dim)?;
    let morph = match (&files.morph, manifest.morph_dim) {
        (Some(file), Some(dm)) => Some(read_matrix(dir, file, "morph", n, dm)?),
        (None, _) => None,
        (Some(_), None) => {
            return Err(Error::malformed("morph", "file listed but D_m missing from manifest"));
        }
    };
    let coords = read_matrix(dir, &files.coords, "coords", n, 2)?;

    let mut labels = vec![None; n];
    let mut label_sources = vec![None; n];
    if let Some(file) = &files.labels {
        let path = dir.join(file);
        let bytes = read_bytes(&path, "labels")?;
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let mut row = 0usize;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::malformed("labels", e))?;
            if row >= n {
                return Err(Error::shape("labels (rows)", &[n], &[row + 1]));
            }
            let id = rec.get(0).unwrap_or_default();
            if id != cell_ids[row] {
                return Err(Error::malformed(
                    "labels",
                    format!("row {row} has cell id `{id}`, expected `{}`", cell_ids[row]),
                ));
            }
            let label = rec.get(1).unwrap_or_default().trim();
            if !label.is_empty() {
                labels[row] = Some(label.parse::<usize>().map_err(|e| {
                    Error::malformed("labels", format!("row {row}: bad label_index `{label}`: {e}"))
                })?);
            }
            let source = rec.get(2).unwrap_or_default().trim();
            if !source.is_empty() {
                label_sources[row] = Some(source.to_string());
            }
            row += 1;
        }
        if row != n {
            return Err(Error::shape("labels (rows)", &[n], &[row]));
        }
    }

    CellDataset::new(DatasetParts {
        cell_ids,
        gene,
        morph,
        coords,
        labels,
        label_sources,
        class_names: manifest.class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn small(n: usize) -> CellDataset {
        generate_synthetic(&SynthConfig {
            n_cells: n,
            n_classes: 3,
            gene_dim: 5,
            morph_dim: 7,
            seed: 11,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(40);
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_writes_zero_length_arrays() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(0);
        write_dataset(&ds, dir.path()).unwrap();
        let m: DatasetManifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.n_cells, 0);
        assert_eq!(m.gene_dim, 5);
        assert_eq!(m.morph_dim, Some(7));
        assert_eq!(fs::metadata(dir.path().join("gene.f32")).unwrap().len(), 0);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.gene_dim(), 5);
        assert_eq!(back.morph_dim(), Some(7));
    }

    #[test]
    fn gene_file_length_is_cells_times_width_times_four() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(3), dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join("gene.f32")).unwrap().len(), 3 * 5 * 4);
    }

    #[test]
    fn second_write_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = small(25);
        write_dataset(&ds, a.path()).unwrap();
        write_dataset(&ds, b.path()).unwrap();
        for f in ["manifest.json", "cells.txt", "gene.f32", "morph.f32", "coords.f32", "labels.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn short_morph_file_is_a_shape_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SynthConfig {
            n_cells: 4,
            n_classes: 2,
            gene_dim: 3,
            morph_dim: 1536,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().morph().unwrap().shape(), &[4, 1536]);

        let p = dir.path().join("morph.f32");
        fs::write(&p, vec![0u8; 4 * 1535 * 4]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Shape { context, .. }) => assert!(context.contains("morph"), "{context}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_and_missing_file_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&small(4), dir.path()).unwrap();
        let p = dir.path().join("coords.f32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[4..8].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::NonFinite { ref field, index: 1 }) if field == "coords"
        ));
        fs::remove_file(&p).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::MissingFile { ref field, .. }) if field == "coords"
        ));
    }

    #[test]
    fn overwriting_with_unlabeled_data_drops_labels_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small(6);
        write_dataset(&ds, dir.path()).unwrap();
        let mut parts = ds.into_parts();
        parts.labels = vec![None; 6];
        parts.label_sources = vec![None; 6];
        parts.morph = None;
        let unlabeled = CellDataset::new(parts).unwrap();
        write_dataset(&unlabeled, dir.path()).unwrap();
        assert!(!dir.path().join("labels.csv").exists());
        assert!(!dir.path().join("morph.f32").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), unlabeled);
    }
}
