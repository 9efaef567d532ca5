//! Contrastive alignment of morphology and gene embeddings.
//!
//! Each modality gets its own projection head (linear, GELU, linear, L2
//! normalize). Heads are trained jointly on mini-batches with a symmetric
//! InfoNCE loss in which the other cells of the batch are the negatives.

mod latent;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::CellDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::LinearParams;
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::seed;
use crate::tensor::{Scalar, Tensor};

pub use latent::{LatentPack, LATENT_FORMAT_VERSION};

/// Guard used when normalizing projections; a zero pre-activation stays finite.
pub const NORMALIZE_EPS: f64 = 1e-12;
/// Tolerance on row norms accepted by [`infonce_bidirectional`].
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            hidden_dim: 512,
            temperature: 0.07,
            epochs: 20,
            batch_size: 64,
            lr: 3e-5,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("latent_dim and hidden_dim must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batches need at least 2 cells".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid lr {} / weight_decay {}", self.lr, self.weight_decay)));
        }
        Ok(())
    }
}

/// Two-layer perceptron with unit-norm output.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<T: Scalar = f32> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// `fc1.{weight,bias}` and `fc2.{weight,bias}`.
    pub params: ParamStore<T>,
}

impl<T: Scalar> ProjectionHead<T> {
    pub fn init(input_dim: usize, hidden_dim: usize, latent_dim: usize, seed: u64, stream: &str) -> Result<Self> {
        let mut rng = seed::stream(seed, stream);
        let mut params = ParamStore::new();
        LinearParams::register(&mut params, "fc1", input_dim, hidden_dim, &mut rng)?;
        LinearParams::register(&mut params, "fc2", hidden_dim, latent_dim, &mut rng)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            latent_dim,
            params,
        })
    }

    pub fn cast<U: Scalar>(&self) -> ProjectionHead<U> {
        ProjectionHead {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            latent_dim: self.latent_dim,
            params: self.params.cast(),
        }
    }
}

/// Graph form of a head whose parameters live in `store` under `prefix`
/// (`""` for a standalone head, `"morph."`/`"gene."` in a joint store).
pub fn head_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let fc1 = LinearParams::lookup(store, &format!("{prefix}fc1"))?;
    let fc2 = LinearParams::lookup(store, &format!("{prefix}fc2"))?;
    let h = fc1.forward(g, store, x)?;
    let h = g.gelu(h);
    let z = fc2.forward(g, store, h)?;
    Ok(g.l2_normalize(z, T::lit(NORMALIZE_EPS)))
}

/// Unit-norm latent rows for `emb` (`n × input_dim`).
pub fn project<T: Scalar>(head: &ProjectionHead<T>, emb: &Tensor<T>) -> Result<Tensor<T>> {
    if emb.rank() != 2 || emb.cols() != head.input_dim {
        return Err(Error::shape("projection input", &[emb.rows(), head.input_dim], emb.shape()));
    }
    if emb.rows() == 0 {
        return Ok(Tensor::zeros(vec![0, head.latent_dim]));
    }
    let mut g = Graph::new();
    let x = g.constant(emb.clone());
    let z = head_forward(&mut g, &head.params, "", x)?;
    Ok(g.value(z).clone())
}

fn check_pair<T: Scalar>(zm: &Tensor<T>, zg: &Tensor<T>) -> Result<usize> {
    if zm.rank() != 2 || zm.shape() != zg.shape() {
        return Err(Error::shape("paired latents", zm.shape(), zg.shape()));
    }
    Ok(zm.rows())
}

/// `½·[mean_i CE(S[i,:], i) + mean_j CE(S[:,j], j)]` with `S = Z_m·Z_gᵀ/τ`,
/// evaluated in 64-bit. Rows must have unit norm within [`UNIT_NORM_TOL`].
pub fn infonce_bidirectional<T: Scalar>(zm: &Tensor<T>, zg: &Tensor<T>, tau: f64) -> Result<f64> {
    let n = check_pair(zm, zg)?;
    if n < 2 {
        return Err(Error::shape("InfoNCE batch", &[2], &[n]));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    for (name, z) in [("morph latents", zm), ("gene latents", zg)] {
        for i in 0..n {
            let norm = z.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Numeric(format!("{name} row {i} has norm {norm}, expected 1")));
            }
        }
    }
    let zm: Tensor<f64> = zm.cast();
    let zg: Tensor<f64> = zg.cast();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = zm.row(i).iter().zip(zg.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
    }
    let ce = |get: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let max = (0..n).map(|j| get(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..n).map(|j| (get(i, j) - max).exp()).sum::<f64>().ln();
            total += lse - get(i, i);
        }
        total / n as f64
    };
    Ok(0.5 * (ce(&|i, j| s[i * n + j]) + ce(&|i, j| s[j * n + i])))
}

/// Graph form of [`infonce_bidirectional`] (no norm check).
pub fn infonce_graph<T: Scalar>(g: &mut Graph<T>, zm: Var, zg: Var, tau: f64) -> Result<Var> {
    let n = g.shape(zm)[0];
    let sim = g.matmul_nt(zm, zg)?;
    let sim = g.scale(sim, T::lit(1.0 / tau));
    let targets: Vec<usize> = (0..n).collect();
    let rows = g.softmax_cross_entropy(sim, &targets, None)?;
    let sim_t = g.transpose(sim)?;
    let cols = g.softmax_cross_entropy(sim_t, &targets, None)?;
    let both = g.add(rows, cols)?;
    Ok(g.scale(both, T::lit(0.5)))
}

/// Fraction of rows whose own partner is the unique best match; ties count as misses.
pub fn batch_retrieval_accuracy<T: Scalar>(zm: &Tensor<T>, zg: &Tensor<T>) -> Result<f64> {
    let n = check_pair(zm, zg)?;
    if n == 0 {
        return Ok(0.0);
    }
    let sim = |i: usize, j: usize| -> f64 { zm.row(i).iter().zip(zg.row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum() };
    let hits = (0..n)
        .filter(|&i| {
            let own = sim(i, i);
            (0..n).all(|j| j == i || sim(i, j) < own)
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean retrieval accuracy over consecutive batches of `batch` rows (a short tail is dropped).
pub fn batched_retrieval_accuracy<T: Scalar>(zm: &Tensor<T>, zg: &Tensor<T>, batch: usize) -> Result<f64> {
    let n = check_pair(zm, zg)?;
    let batches = n / batch.max(1);
    if batches == 0 {
        return Err(Error::shape("retrieval batches", &[batch], &[n]));
    }
    let mut total = 0.0;
    for b in 0..batches {
        let idx: Vec<usize> = (b * batch..(b + 1) * batch).collect();
        total += batch_retrieval_accuracy(&zm.select_rows(&idx), &zg.select_rows(&idx))?;
    }
    Ok(total / batches as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub morph: ProjectionHead,
    pub gene: ProjectionHead,
    pub config: AlignConfig,
    /// Mean InfoNCE per epoch.
    pub history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadsMeta {
    config: AlignConfig,
    morph_dim: usize,
    gene_dim: usize,
    history: Vec<f64>,
}

fn paired_inputs(ds: &CellDataset) -> Result<&Tensor<f32>> {
    ds.morph().ok_or(Error::MissingModality {
        variant: "alignment",
        modality: "morph",
    })
}

/// Joint parameter store (`morph.*` then `gene.*`) for freshly initialized heads.
pub fn init_joint<T: Scalar>(morph_dim: usize, gene_dim: usize, cfg: &AlignConfig) -> Result<ParamStore<T>> {
    let hm = ProjectionHead::<T>::init(morph_dim, cfg.hidden_dim, cfg.latent_dim, cfg.seed, "align.init.morph")?;
    let hg = ProjectionHead::<T>::init(gene_dim, cfg.hidden_dim, cfg.latent_dim, cfg.seed, "align.init.gene")?;
    let mut store = ParamStore::new();
    store.absorb_prefixed("morph.", &hm.params)?;
    store.absorb_prefixed("gene.", &hg.params)?;
    Ok(store)
}

/// Bidirectional InfoNCE of a batch under joint parameters.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    morph: &Tensor<T>,
    gene: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    let xm = g.constant(morph.clone());
    let xg = g.constant(gene.clone());
    let zm = head_forward(g, store, "morph.", xm)?;
    let zg = head_forward(g, store, "gene.", xg)?;
    infonce_graph(g, zm, zg, tau)
}

/// Trains both heads on paired embeddings; labels are ignored.
pub fn train_alignment(ds: &CellDataset, cfg: &AlignConfig) -> Result<ProjectionHeads> {
    cfg.validate()?;
    let morph = paired_inputs(ds)?;
    let n = ds.len();
    if n < 2 {
        return Err(Error::shape("alignment cells", &[2], &[n]));
    }
    let (dm, dg) = (morph.cols(), ds.gene_dim());
    let mut store = init_joint::<f32>(dm, dg, cfg)?;
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &store,
    );
    let mut rng = seed::stream(cfg.seed, "align.shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let loss = joint_loss(&mut g, &store, &morph.select_rows(chunk), &ds.gene().select_rows(chunk), cfg.temperature)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite InfoNCE at epoch {epoch}")));
            }
            let grads = g.backward(loss, &store)?;
            if !grads.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}")));
            }
            opt.step(&mut store, &grads)?;
            total += value * chunk.len() as f64;
            seen += chunk.len();
        }
        history.push(total / seen as f64);
    }
    let head = |prefix: &str, input_dim| ProjectionHead {
        input_dim,
        hidden_dim: cfg.hidden_dim,
        latent_dim: cfg.latent_dim,
        params: store.extract_prefixed(prefix),
    };
    Ok(ProjectionHeads {
        morph: head("morph.", dm),
        gene: head("gene.", dg),
        config: cfg.clone(),
        history,
    })
}

impl ProjectionHeads {
    /// Mean bidirectional InfoNCE over consecutive batches of `batch` cells (short tail dropped).
    pub fn mean_loss(&self, ds: &CellDataset, batch: usize) -> Result<f64> {
        let (zm, zg) = self.project_dataset(ds)?;
        let batches = ds.len() / batch.max(2);
        if batches == 0 {
            return Err(Error::shape("alignment batches", &[batch], &[ds.len()]));
        }
        let mut total = 0.0;
        for b in 0..batches {
            let idx: Vec<usize> = (b * batch..(b + 1) * batch).collect();
            total += infonce_bidirectional(&zm.select_rows(&idx), &zg.select_rows(&idx), self.config.temperature)?;
        }
        Ok(total / batches as f64)
    }

    /// Both latent matrices for a dataset.
    pub fn project_dataset(&self, ds: &CellDataset) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((project(&self.morph, paired_inputs(ds)?)?, project(&self.gene, ds.gene())?))
    }

    /// One checkpoint holding both heads under `morph.`/`gene.` prefixes.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let mut store = ParamStore::new();
        store.absorb_prefixed("morph.", &self.morph.params)?;
        store.absorb_prefixed("gene.", &self.gene.params)?;
        let meta = HeadsMeta {
            config: self.config.clone(),
            morph_dim: self.morph.input_dim,
            gene_dim: self.gene.input_dim,
            history: self.history.clone(),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::malformed("projection metadata", e))?;
        save_checkpoint(dir, stem, &store, meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let (store, meta) = load_checkpoint(dir, stem)?;
        let meta: HeadsMeta = serde_json::from_value(meta).map_err(|e| Error::malformed("projection metadata", e))?;
        meta.config.validate()?;
        init_joint::<f32>(meta.morph_dim, meta.gene_dim, &meta.config)?.check_same_layout(&store)?;
        let head = |prefix: &str, input_dim| ProjectionHead {
            input_dim,
            hidden_dim: meta.config.hidden_dim,
            latent_dim: meta.config.latent_dim,
            params: store.extract_prefixed(prefix),
        };
        Ok(Self {
            morph: head("morph.", meta.morph_dim),
            gene: head("gene.", meta.gene_dim),
            config: meta.config,
            history: meta.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use crate::graph::gelu_scalar;
    use crate::nn::normal_init;

    fn identity_rows(n: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![n, d], |k| if k / d == k % d { 1.0 } else { 0.0 })
    }

    #[test]
    fn constant_similarity_gives_log_n() {
        let mut z = Tensor::<f64>::zeros(vec![64, 8]);
        for i in 0..64 {
            z.row_mut(i)[0] = 1.0;
        }
        let loss = infonce_bidirectional(&z, &z, 0.07).unwrap();
        assert!((loss - 64f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn aligned_orthonormal_pairs_match_closed_form() {
        let z = identity_rows(4, 8);
        let loss = infonce_bidirectional(&z, &z, 0.07).unwrap();
        let expect = (1.0 + 3.0 * (-1.0f64 / 0.07).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn swap_symmetry_and_errors() {
        let mut rng = seed::stream(1, "t");
        let raw: Tensor<f64> = normal_init(&mut rng, vec![6, 5], 1.0);
        let other: Tensor<f64> = normal_init(&mut rng, vec![6, 5], 1.0);
        let unit = |t: &Tensor<f64>| {
            let mut t = t.clone();
            for i in 0..t.rows() {
                let n = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                t.row_mut(i).iter_mut().for_each(|v| *v /= n);
            }
            t
        };
        let (a, b) = (unit(&raw), unit(&other));
        let ab = infonce_bidirectional(&a, &b, 0.1).unwrap();
        let ba = infonce_bidirectional(&b, &a, 0.1).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(infonce_bidirectional(&raw, &b, 0.1).is_err());
        assert!(infonce_bidirectional(&a.select_rows(&[0]), &b.select_rows(&[0]), 0.1).is_err());
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let mut rng = seed::stream(2, "t");
        let store = init_joint::<f64>(5, 3, &AlignConfig { hidden_dim: 7, latent_dim: 4, ..AlignConfig::default() }).unwrap();
        let m: Tensor<f64> = normal_init(&mut rng, vec![6, 5], 1.0);
        let gn: Tensor<f64> = normal_init(&mut rng, vec![6, 3], 1.0);
        let mut g = Graph::new();
        let loss = joint_loss(&mut g, &store, &m, &gn, 0.07).unwrap();
        let hm = ProjectionHead { input_dim: 5, hidden_dim: 7, latent_dim: 4, params: store.extract_prefixed("morph.") };
        let hg = ProjectionHead { input_dim: 3, hidden_dim: 7, latent_dim: 4, params: store.extract_prefixed("gene.") };
        let direct = infonce_bidirectional(&project(&hm, &m).unwrap(), &project(&hg, &gn).unwrap(), 0.07).unwrap();
        assert!((g.value(loss).item() - direct).abs() < 1e-10);
    }

    #[test]
    fn projection_matches_loop_oracle_and_is_unit() {
        let head = ProjectionHead::<f64>::init(5, 6, 3, 4, "t").unwrap();
        let x: Tensor<f64> = normal_init(&mut seed::stream(5, "x"), vec![4, 5], 2.0);
        let z = project(&head, &x).unwrap();
        let p = |n: &str| head.params.by_name(n).unwrap();
        for r in 0..4 {
            let h: Vec<f64> = (0..6)
                .map(|j| gelu_scalar(p("fc1.bias").data()[j] + (0..5).map(|i| x.row(r)[i] * p("fc1.weight").data()[i * 6 + j]).sum::<f64>()))
                .collect();
            let o: Vec<f64> = (0..3)
                .map(|j| p("fc2.bias").data()[j] + (0..6).map(|i| h[i] * p("fc2.weight").data()[i * 3 + j]).sum::<f64>())
                .collect();
            let norm = o.iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..3 {
                assert!((z.row(r)[j] - o[j] / norm).abs() < 1e-12);
            }
            assert!((z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(project(&head, &Tensor::zeros(vec![2, 4])).is_err());
    }

    #[test]
    fn zero_input_projects_to_a_finite_unit_vector() {
        let head = ProjectionHead::<f64>::init(3, 4, 3, 0, "t").unwrap();
        let z = project(&head, &Tensor::zeros(vec![1, 3])).unwrap();
        assert!(z.all_finite());
    }

    #[test]
    fn bias_free_linear_fixture_is_scale_invariant() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::from_fn(vec![3, 3], |k| (k as f64 * 0.37).sin()));
        let x = Tensor::from_fn(vec![2, 3], |k| k as f64 - 2.5);
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| v * 10.0));
        let (ya, yb) = (g.matmul(a, w).unwrap(), g.matmul(b, w).unwrap());
        let (na, nb) = (g.l2_normalize(ya, 1e-12), g.l2_normalize(yb, 1e-12));
        assert!(g.value(na).max_abs_diff(g.value(nb)) < 1e-15);
    }

    #[test]
    fn retrieval_edge_cases() {
        let z = identity_rows(3, 3);
        assert_eq!(batch_retrieval_accuracy(&z, &z).unwrap(), 1.0);
        let z2 = identity_rows(2, 2);
        let rev = z2.select_rows(&[1, 0]);
        assert_eq!(batch_retrieval_accuracy(&z2, &rev).unwrap(), 0.0);
        let same = Tensor::<f64>::full(vec![3, 2], 0.5f64.sqrt());
        assert_eq!(batch_retrieval_accuracy(&same, &same).unwrap(), 0.0);
    }

    fn paired(n: usize) -> CellDataset {
        generate_synthetic(&SynthConfig {
            n_cells: n,
            gene_dim: 6,
            morph_dim: 8,
            shared_latent_dim: 4,
            shared_latent_scale: 1.0,
            noise_sigma: 0.1,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_keep_initial_heads() {
        let cfg = AlignConfig { epochs: 0, hidden_dim: 8, latent_dim: 4, ..AlignConfig::default() };
        let h = train_alignment(&paired(10), &cfg).unwrap();
        let fresh = init_joint::<f32>(8, 6, &cfg).unwrap();
        assert_eq!(h.morph.params, fresh.extract_prefixed("morph."));
        assert_eq!(h.gene.params, fresh.extract_prefixed("gene."));
        assert!(h.history.is_empty());
    }

    #[test]
    fn one_epoch_beats_uniform_baseline_and_round_trips() {
        let cfg = AlignConfig { epochs: 1, hidden_dim: 32, latent_dim: 16, batch_size: 16, lr: 1e-3, ..AlignConfig::default() };
        let ds = paired(320);
        let before = train_alignment(&ds, &AlignConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let h = train_alignment(&ds, &cfg).unwrap();
        let after = h.mean_loss(&ds, 16).unwrap();
        assert!(after < 16f64.ln());
        assert!(after < before.mean_loss(&ds, 16).unwrap());
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path(), "heads").unwrap();
        assert_eq!(ProjectionHeads::load(dir.path(), "heads").unwrap(), h);
    }

    #[test]
    fn alignment_needs_morphology() {
        let mut parts = paired(4).into_parts();
        parts.morph = None;
        let ds = CellDataset::new(parts).unwrap();
        assert!(matches!(train_alignment(&ds, &AlignConfig::default()), Err(Error::MissingModality { .. })));
    }
}
