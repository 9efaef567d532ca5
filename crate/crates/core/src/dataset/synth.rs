//! Synthetic paired embeddings with controllable class geometry.
//!
//! Each class gets a gene-space and a morphology-space centroid built from
//! orthonormal directions (so distinct centroids sit `separation·√2` apart),
//! and a home niche: a Gaussian blob in the tissue plane. Classes named in
//! `confusable_pairs` share a gene centroid; those in
//! `morph_confusable_pairs` share a morphology centroid. An optional shared
//! per-cell latent is pushed into both modalities through fixed random maps,
//! which makes individual cells (not just classes) matchable across them.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CellDataset, DatasetParts, DEFAULT_GENE_DIM, DEFAULT_MORPH_DIM};
use crate::error::{Error, Result};
use crate::seed::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cells: usize,
    pub n_classes: usize,
    pub gene_dim: usize,
    pub morph_dim: usize,
    pub gene_separation: f64,
    pub morph_separation: f64,
    pub confusable_pairs: Vec<(usize, usize)>,
    pub morph_confusable_pairs: Vec<(usize, usize)>,
    pub niche_count: usize,
    /// Standard deviation of each niche blob, micrometers.
    pub niche_spread: f64,
    /// Niche index per class; defaults to `class % niche_count`.
    pub class_niches: Option<Vec<usize>>,
    /// Side length of the square tissue region niches are placed in, micrometers.
    pub tissue_size: f64,
    pub noise_sigma: f64,
    pub shared_latent_dim: usize,
    pub shared_latent_scale: f64,
    /// Relative class frequencies; uniform when absent.
    pub class_proportions: Option<Vec<f64>>,
    pub class_names: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cells: 1000,
            n_classes: 3,
            gene_dim: DEFAULT_GENE_DIM,
            morph_dim: DEFAULT_MORPH_DIM,
            gene_separation: 1.0,
            morph_separation: 1.0,
            confusable_pairs: Vec::new(),
            morph_confusable_pairs: Vec::new(),
            niche_count: 3,
            niche_spread: 60.0,
            class_niches: None,
            tissue_size: 1000.0,
            noise_sigma: 0.5,
            shared_latent_dim: 0,
            shared_latent_scale: 0.0,
            class_proportions: None,
            class_names: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.gene_dim == 0 || self.morph_dim == 0 {
            return bad("embedding widths must be positive".into());
        }
        for (name, v) in [
            ("gene_separation", self.gene_separation),
            ("morph_separation", self.morph_separation),
            ("noise_sigma", self.noise_sigma),
            ("niche_spread", self.niche_spread),
            ("shared_latent_scale", self.shared_latent_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.tissue_size > 0.0 && self.tissue_size.is_finite()) {
            return bad(format!("tissue_size must be positive, got {}", self.tissue_size));
        }
        if self.niche_count == 0 {
            return bad("niche_count must be at least 1".into());
        }
        for &(a, b) in self.confusable_pairs.iter().chain(&self.morph_confusable_pairs) {
            if a >= self.n_classes || b >= self.n_classes || a == b {
                return bad(format!("invalid class pair ({a}, {b})"));
            }
        }
        if let Some(n) = &self.class_niches {
            if n.len() != self.n_classes || n.iter().any(|&k| k >= self.niche_count) {
                return bad("class_niches needs one niche index < niche_count per class".into());
            }
        }
        if let Some(p) = &self.class_proportions {
            if p.len() != self.n_classes || p.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad("class_proportions needs one positive value per class".into());
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.n_classes {
                return bad("class_names needs one name per class".into());
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng)
}

/// `count` vectors of length `dim`, orthonormal when `count <= dim`.
fn unit_directions(count: usize, dim: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        if i < dim {
            for u in &dirs {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        dirs.push(v);
    }
    dirs
}

fn centroids(
    n_classes: usize,
    dim: usize,
    separation: f64,
    shared: &[(usize, usize)],
    rng: &mut StreamRng,
) -> Vec<Vec<f64>> {
    let mut c: Vec<Vec<f64>> = unit_directions(n_classes, dim, rng)
        .into_iter()
        .map(|v| v.into_iter().map(|a| a * separation).collect())
        .collect();
    for &(a, b) in shared {
        c[b] = c[a].clone();
    }
    c
}

/// Exact class counts: `floor(n·p_c)` each, remainder to the classes with the
/// largest fractional parts (lowest index on ties).
fn class_counts(n: usize, proportions: &[f64]) -> Vec<usize> {
    let total: f64 = proportions.iter().sum();
    let raw: Vec<f64> = proportions.iter().map(|p| n as f64 * p / total).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut remaining = n - counts.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[c] += 1;
        remaining -= 1;
    }
    counts
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<CellDataset> {
    cfg.validate()?;
    let (n, k) = (cfg.n_cells, cfg.n_classes);

    let gene_c = centroids(
        k,
        cfg.gene_dim,
        cfg.gene_separation,
        &cfg.confusable_pairs,
        &mut seed::stream(cfg.seed, "synth.gene_centroids"),
    );
    let morph_c = centroids(
        k,
        cfg.morph_dim,
        cfg.morph_separation,
        &cfg.morph_confusable_pairs,
        &mut seed::stream(cfg.seed, "synth.morph_centroids"),
    );

    let mut map_rng = seed::stream(cfg.seed, "synth.latent_maps");
    let r = cfg.shared_latent_dim;
    let map_scale = 1.0 / (r.max(1) as f64).sqrt();
    let gene_map: Vec<f64> = (0..r * cfg.gene_dim).map(|_| gaussian(&mut map_rng) * map_scale).collect();
    let morph_map: Vec<f64> = (0..r * cfg.morph_dim).map(|_| gaussian(&mut map_rng) * map_scale).collect();

    let mut niche_rng = seed::stream(cfg.seed, "synth.niches");
    let niches: Vec<(f64, f64)> = (0..cfg.niche_count)
        .map(|_| {
            let lo = 0.15 * cfg.tissue_size;
            let hi = 0.85 * cfg.tissue_size;
            (niche_rng.random_range(lo..=hi), niche_rng.random_range(lo..=hi))
        })
        .collect();
    let class_niche: Vec<usize> = cfg
        .class_niches
        .clone()
        .unwrap_or_else(|| (0..k).map(|c| c % cfg.niche_count).collect());

    let proportions = cfg.class_proportions.clone().unwrap_or_else(|| vec![1.0; k]);
    let mut labels: Vec<usize> = class_counts(n, &proportions)
        .into_iter()
        .enumerate()
        .flat_map(|(c, m)| std::iter::repeat_n(c, m))
        .collect();
    labels.shuffle(&mut seed::stream(cfg.seed, "synth.assign"));

    let mut rng = seed::stream(cfg.seed, "synth.cells");
    let mut gene = Vec::with_capacity(n * cfg.gene_dim);
    let mut morph = Vec::with_capacity(n * cfg.morph_dim);
    let mut coords = Vec::with_capacity(n * 2);
    let mut z = vec![0.0; r];
    for &c in &labels {
        z.iter_mut().for_each(|v| *v = gaussian(&mut rng));
        for (dim, centre, map, out) in [
            (cfg.gene_dim, &gene_c[c], &gene_map, &mut gene),
            (cfg.morph_dim, &morph_c[c], &morph_map, &mut morph),
        ] {
            for j in 0..dim {
                let mut v = centre[j];
                for (t, zt) in z.iter().enumerate() {
                    v += cfg.shared_latent_scale * zt * map[t * dim + j];
                }
                if cfg.noise_sigma > 0.0 {
                    v += cfg.noise_sigma * gaussian(&mut rng);
                }
                out.push(v as f32);
            }
        }
        let (cx, cy) = niches[class_niche[c]];
        coords.push((cx + cfg.niche_spread * gaussian(&mut rng)) as f32);
        coords.push((cy + cfg.niche_spread * gaussian(&mut rng)) as f32);
    }

    let class_names = cfg
        .class_names
        .clone()
        .unwrap_or_else(|| (0..k).map(|c| format!("class_{c}")).collect());
    CellDataset::new(DatasetParts {
        cell_ids: (0..n).map(|i| format!("cell_{i:06}")).collect(),
        gene: Tensor::new(vec![n, cfg.gene_dim], gene)?,
        morph: Some(Tensor::new(vec![n, cfg.morph_dim], morph)?),
        coords: Tensor::new(vec![n, 2], coords)?,
        labels: labels.into_iter().map(Some).collect(),
        label_sources: vec![Some("synthetic".to_string()); n],
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_keeps_widths() {
        let ds = generate_synthetic(&SynthConfig {
            n_cells: 0,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.gene_dim(), DEFAULT_GENE_DIM);
        assert_eq!(ds.morph_dim(), Some(DEFAULT_MORPH_DIM));
    }

    #[test]
    fn zero_noise_puts_cells_on_centroids() {
        let ds = generate_synthetic(&SynthConfig {
            n_cells: 50,
            n_classes: 2,
            gene_dim: 8,
            morph_dim: 8,
            noise_sigma: 0.0,
            gene_separation: 1.0,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        for c in 0..2 {
            let rows: Vec<&[f32]> = (0..ds.len())
                .filter(|&i| ds.labels()[i] == Some(c))
                .map(|i| ds.gene().row(i))
                .collect();
            assert!(rows.len() > 1);
            assert!(rows.iter().all(|r| r == &rows[0]));
            let norm: f64 = rows[0].iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_configs_give_identical_datasets() {
        let cfg = SynthConfig {
            n_cells: 120,
            gene_dim: 6,
            morph_dim: 9,
            shared_latent_dim: 3,
            shared_latent_scale: 0.5,
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 43, ..cfg };
        assert_ne!(generate_synthetic(&other).unwrap().gene(), generate_synthetic(&SynthConfig { seed: 42, ..other.clone() }).unwrap().gene());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { n_classes: 1, ..SynthConfig::default() },
            SynthConfig { gene_separation: -1.0, ..SynthConfig::default() },
            SynthConfig { confusable_pairs: vec![(0, 3)], ..SynthConfig::default() },
            SynthConfig { gene_dim: 0, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn class_counts_are_exact() {
        assert_eq!(class_counts(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(class_counts(100, &[9.0, 1.0]), vec![90, 10]);
        assert_eq!(class_counts(0, &[1.0, 1.0]), vec![0, 0]);
    }

    #[test]
    fn confusable_pair_shares_a_gene_centroid() {
        let cfg = SynthConfig {
            n_cells: 3000,
            n_classes: 3,
            gene_dim: 32,
            morph_dim: 8,
            confusable_pairs: vec![(0, 1)],
            noise_sigma: 0.5,
            seed: 7,
            ..SynthConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        crate::dataset::write_dataset(&generate_synthetic(&cfg).unwrap(), dir.path()).unwrap();
        let ds = crate::dataset::load_dataset(dir.path()).unwrap();
        let mut means = vec![vec![0.0f64; 32]; 3];
        let mut counts = [0usize; 3];
        for i in 0..ds.len() {
            let c = ds.labels()[i].unwrap();
            counts[c] += 1;
            means[c].iter_mut().zip(ds.gene().row(i)).for_each(|(m, &v)| *m += v as f64);
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(dist(&means[0], &means[1]) < cfg.noise_sigma);
        assert!(dist(&means[0], &means[2]) > cfg.gene_separation);
    }
}
