//! Invariant checks shared by the property suite and the acceptance runner.
//! Each comes as a strategy plus a check over one generated case.

use cellsym_core::analysis::{adjusted_rand_index, kmeans_cluster, niche_enrichment};
use cellsym_core::dataset::{generate_synthetic, load_dataset, split_indices, write_dataset};
use cellsym_core::graph::Graph;
use cellsym_core::nn;
use cellsym_core::{CellDataset, SynthConfig, Tensor};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub type Check = std::result::Result<(), TestCaseError>;

pub fn matrix(rows: usize, cols: usize, lim: f64) -> impl Strategy<Value = Tensor<f64>> {
    vec(-lim..lim, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

pub fn softmax_strategy() -> impl Strategy<Value = Tensor<f64>> {
    matrix(4, 6, 1e4)
}

pub fn softmax_normalizes(x: Tensor<f64>) -> Check {
    let s = nn::softmax(&x, 1).unwrap();
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let sv = g.softmax(v).unwrap();
    for t in [&s, g.value(sv)] {
        for i in 0..x.rows() {
            let row = t.row(i);
            prop_assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    Ok(())
}

pub fn run_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    heads: usize,
    seq: usize,
    bias: Option<&Tensor<f64>>,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let b = bias.map(|b| g.constant(b.clone()));
    let y = g.attention(qv, kv, vv, heads, seq, b).unwrap();
    g.value(y).clone()
}

pub type AttentionCase = (Tensor<f64>, Tensor<f64>, Tensor<f64>, Vec<usize>);

/// Two cells of four tokens, two heads of width two.
pub fn attention_strategy() -> impl Strategy<Value = AttentionCase> {
    (
        matrix(8, 4, 2.0),
        matrix(8, 4, 2.0),
        matrix(8, 4, 2.0),
        Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
    )
}

pub fn attention_equivariant((q, k, v, perm): AttentionCase) -> Check {
    let seq = perm.len();
    let shuffle = |t: &Tensor<f64>| {
        let idx: Vec<usize> = (0..t.rows() / seq)
            .flat_map(|b| perm.iter().map(move |&p| b * seq + p))
            .collect();
        t.select_rows(&idx)
    };
    let y = run_attention(&q, &k, &v, 2, seq, None);
    let yp = run_attention(&shuffle(&q), &shuffle(&k), &shuffle(&v), 2, seq, None);
    prop_assert!(yp.max_abs_diff(&shuffle(&y)) < 1e-12);
    Ok(())
}

pub fn kmeans_strategy() -> impl Strategy<Value = (Tensor<f64>, usize, u64)> {
    (matrix(40, 3, 10.0), 1usize..7, any::<u64>())
}

pub fn kmeans_monotone((pts, k, seed): (Tensor<f64>, usize, u64)) -> Check {
    let r = kmeans_cluster(&pts, k, seed, 100, 0.0).unwrap();
    for w in r.inertia_history.windows(2) {
        prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{} -> {}", w[0], w[1]);
    }
    prop_assert_eq!(r.assignments.len(), pts.rows());
    prop_assert!(r.assignments.iter().all(|&a| a < k));
    Ok(())
}

pub fn enrichment_strategy() -> impl Strategy<Value = Vec<(usize, usize)>> {
    vec((0usize..5, 0usize..4), 1..200)
}

/// Class-frequency-weighted mean of each non-empty cluster's fold enrichment is 1.
pub fn enrichment_averages_to_one(pairs: Vec<(usize, usize)>) -> Check {
    let (assign, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let t = niche_enrichment(&assign, &labels, 5, 4).unwrap();
    let n = labels.len() as f64;
    for j in 0..5 {
        if t.cluster_sizes[j] == 0 {
            prop_assert!(t.empty_clusters[j]);
            continue;
        }
        let avg: f64 = (0..4).map(|c| t.class_totals[c] as f64 / n * t.fold[j][c]).sum();
        prop_assert!((avg - 1.0).abs() < 1e-12);
    }
    Ok(())
}

pub fn ari_strategy() -> impl Strategy<Value = (Vec<(usize, usize)>, Vec<usize>)> {
    (vec((0usize..4, 0usize..5), 2..150), Just(vec![0usize, 1, 2, 3]).prop_shuffle())
}

pub fn ari_symmetric((pairs, relabel): (Vec<(usize, usize)>, Vec<usize>)) -> Check {
    let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    let ab = adjusted_rand_index(&a, &b).unwrap();
    prop_assert!((ab - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
    prop_assert!(ab <= 1.0 + 1e-12);
    let renamed: Vec<usize> = a.iter().map(|&x| relabel[x]).collect();
    prop_assert!((adjusted_rand_index(&a, &renamed).unwrap() - 1.0).abs() < 1e-12);
    Ok(())
}

pub type RoundTripCase = (usize, usize, usize, usize, u64, bool);

pub fn round_trip_strategy() -> impl Strategy<Value = RoundTripCase> {
    (3usize..40, 2usize..5, 1usize..6, 1usize..6, any::<u64>(), any::<bool>())
}

pub fn dataset_round_trips((n, classes, gene, morph, seed, drop_label): RoundTripCase) -> Check {
    let ds = generate_synthetic(&SynthConfig {
        n_cells: n,
        n_classes: classes,
        gene_dim: gene,
        morph_dim: morph,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let ds = if drop_label {
        let mut p = ds.into_parts();
        p.labels[0] = None;
        p.label_sources[0] = None;
        CellDataset::new(p).unwrap()
    } else {
        ds
    };
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    prop_assert_eq!(bits(back.gene()), bits(ds.gene()));
    prop_assert_eq!(bits(back.morph().unwrap()), bits(ds.morph().unwrap()));
    prop_assert_eq!(bits(back.coords()), bits(ds.coords()));
    prop_assert_eq!(back, ds);
    Ok(())
}

pub fn split_strategy() -> impl Strategy<Value = (usize, f64, u64)> {
    (2usize..500, 0.01f64..0.99, any::<u64>())
}

pub fn split_partitions((n, frac, seed): (usize, f64, u64)) -> Check {
    let (tr, te) = split_indices(n, frac, seed).unwrap();
    prop_assert_eq!(tr.len(), (n as f64 * frac).floor() as usize);
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    prop_assert_eq!(split_indices(n, frac, seed).unwrap(), (tr, te));
    Ok(())
}
