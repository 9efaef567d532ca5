//! Finite-difference fixtures shared by the gradient suite and the acceptance runner.

use cellsym_core::contrastive::{init_joint, joint_loss, AlignConfig};
use cellsym_core::fusion::{FusionArch, FusionConfig, FusionInputs, ModelVariant};
use cellsym_core::gradcheck::{finite_difference_check, GradCheckReport};
use cellsym_core::graph::{Graph, Var};
use cellsym_core::nn::normal_init;
use cellsym_core::seed;
use cellsym_core::{ParamStore, Result, Tensor};

pub const EPS: f64 = 1e-5;

fn rand(seed_: u64, name: &str, shape: Vec<usize>) -> Tensor<f64> {
    normal_init(&mut seed::stream(seed_, name), shape, 1.0)
}

/// `Σ w ∘ y` for a fixed random `w`, so that every output element matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, s: u64) -> Result<Var> {
    let w = g.constant(rand(s, "readout", g.shape(y).to_vec()));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[derive(Clone, Copy, Debug)]
pub struct Dims {
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub heads: usize,
    pub seq: usize,
}

fn primitive_store(d: Dims, s: u64) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    p.insert("x", rand(s, "x", vec![d.n, d.k])).unwrap();
    p.insert("y", rand(s, "y", vec![d.n, d.k])).unwrap();
    p.insert("w", rand(s, "w", vec![d.k, d.m])).unwrap();
    p.insert("wt", rand(s, "wt", vec![d.m, d.k])).unwrap();
    p.insert("row", rand(s, "row", vec![d.k])).unwrap();
    p.insert("bm", rand(s, "bm", vec![d.m])).unwrap();
    p.insert("gamma", rand(s, "gamma", vec![d.k])).unwrap();
    let dh = d.heads * 2;
    let rows = d.seq * d.n;
    p.insert("q", rand(s, "q", vec![rows, dh])).unwrap();
    p.insert("kk", rand(s, "kk", vec![rows, dh])).unwrap();
    p.insert("v", rand(s, "v", vec![rows, dh])).unwrap();
    p.insert("bias", rand(s, "bias", vec![d.heads, d.seq, d.seq])).unwrap();
    p
}

type PrimFn = fn(&mut Graph<f64>, &ParamStore<f64>, Dims, u64) -> Result<Var>;

fn primitives() -> Vec<(&'static str, PrimFn)> {
    vec![
        ("add", |g, p, _, _| {
            let (a, b) = (g.param_named(p, "x"), g.param_named(p, "y"));
            g.add(a, b)
        }),
        ("mul", |g, p, _, _| {
            let (a, b) = (g.param_named(p, "x"), g.param_named(p, "y"));
            g.mul(a, b)
        }),
        ("add_row", |g, p, _, _| {
            let (a, r) = (g.param_named(p, "x"), g.param_named(p, "row"));
            g.add_row(a, r)
        }),
        ("scale", |g, p, _, _| {
            let a = g.param_named(p, "x");
            Ok(g.scale(a, -1.7))
        }),
        ("matmul", |g, p, _, _| {
            let (a, w) = (g.param_named(p, "x"), g.param_named(p, "w"));
            g.matmul(a, w)
        }),
        ("matmul_nt", |g, p, _, _| {
            let (a, w) = (g.param_named(p, "x"), g.param_named(p, "wt"));
            g.matmul_nt(a, w)
        }),
        ("transpose", |g, p, _, _| {
            let a = g.param_named(p, "x");
            g.transpose(a)
        }),
        ("linear", |g, p, _, _| {
            let (a, w, b) = (g.param_named(p, "x"), g.param_named(p, "w"), g.param_named(p, "bm"));
            g.linear(a, w, b)
        }),
        ("gelu", |g, p, _, _| {
            let a = g.param_named(p, "x");
            Ok(g.gelu(a))
        }),
        ("softmax", |g, p, _, _| {
            let a = g.param_named(p, "x");
            g.softmax(a)
        }),
        ("layer_norm", |g, p, _, _| {
            let (a, gm, b) = (g.param_named(p, "x"), g.param_named(p, "gamma"), g.param_named(p, "row"));
            g.layer_norm(a, gm, b, 1e-5)
        }),
        ("attention", |g, p, d, _| {
            let (q, k, v) = (g.param_named(p, "q"), g.param_named(p, "kk"), g.param_named(p, "v"));
            let b = g.param_named(p, "bias");
            g.attention(q, k, v, d.heads, d.seq, Some(b))
        }),
        ("mean_pool", |g, p, d, _| {
            let q = g.param_named(p, "q");
            g.mean_pool(q, d.seq)
        }),
        ("interleave", |g, p, _, _| {
            let (a, b) = (g.param_named(p, "x"), g.param_named(p, "y"));
            g.interleave(&[a, b, a])
        }),
        ("l2_normalize", |g, p, _, _| {
            let a = g.param_named(p, "x");
            Ok(g.l2_normalize(a, 1e-12))
        }),
        ("softmax_cross_entropy", |g, p, d, s| {
            let a = g.param_named(p, "x");
            let targets: Vec<usize> = (0..d.n).map(|i| (i + s as usize) % d.k).collect();
            let w: Vec<f64> = (0..d.n).map(|i| 0.5 + i as f64).collect();
            g.softmax_cross_entropy(a, &targets, Some(&w))
        }),
        ("sum", |g, p, _, _| {
            let a = g.param_named(p, "x");
            let sq = g.mul(a, a)?;
            Ok(g.sum(sq))
        }),
        ("mean", |g, p, _, _| {
            let a = g.param_named(p, "x");
            let sq = g.mul(a, a)?;
            Ok(g.mean(sq))
        }),
        ("dropout", |g, p, d, _| {
            let a = g.param_named(p, "x");
            let mask = (0..d.n * d.k).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
            g.dropout(a, mask)
        }),
    ]
}

fn tiny_arch(variant: ModelVariant) -> FusionArch {
    let cfg = FusionConfig {
        variant,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        seed: 3,
        ..FusionConfig::default()
    };
    FusionArch::new(cfg, 5, Some(7), 3).unwrap()
}

fn tiny_inputs(a: &FusionArch, b: usize) -> FusionInputs<f64> {
    FusionInputs {
        gene: rand(1, "gene", vec![b, 5]),
        morph: a.morph_dim.map(|dm| rand(1, "morph", vec![b, dm])),
        spatial: a.config.variant.uses(cellsym_core::fusion::TokenType::Spatial).then(|| rand(1, "pos", vec![b, 8])),
    }
}

/// Worst relative error for each primitive on one randomized shape.
pub fn check_primitives(d: Dims, s: u64) -> Vec<(&'static str, GradCheckReport)> {
    let store = primitive_store(d, s);
    primitives()
        .into_iter()
        .map(|(name, f)| {
            let report = finite_difference_check(&store, EPS, |g, p| {
                let y = f(g, p, d, s)?;
                if g.shape(y).iter().product::<usize>() == 1 {
                    Ok(y)
                } else {
                    weighted_sum(g, y, s)
                }
            })
            .unwrap();
            (name, report)
        })
        .collect()
}

/// Full forward pass plus class-weighted cross-entropy on four cells.
pub fn check_variant(v: ModelVariant) -> GradCheckReport {
    let labels = [0usize, 2, 1, 2];
    let weights = [0.5f64, 1.5, 1.0, 1.5];
    let a = tiny_arch(v);
    let mut store = a.init_params::<f64>().unwrap();
    if let Some(b) = store.by_name_mut("encoder.0.type_bias") {
        *b = rand(4, "tb", b.shape().to_vec());
    }
    let x = tiny_inputs(&a, 4);
    let report = finite_difference_check(&store, EPS, |g, p| {
        let logits = a.forward(g, p, &x)?;
        g.softmax_cross_entropy(logits, &labels, Some(&weights))
    })
    .unwrap();
    assert_eq!(report.elements_checked, store.num_elements());
    report
}

pub fn check_infonce() -> GradCheckReport {
    let cfg = AlignConfig {
        hidden_dim: 6,
        latent_dim: 4,
        ..AlignConfig::default()
    };
    let store = init_joint::<f64>(5, 3, &cfg).unwrap();
    let m = rand(7, "m", vec![6, 5]);
    let gn = rand(7, "g", vec![6, 3]);
    finite_difference_check(&store, EPS, |g, p| joint_loss(g, p, &m, &gn, cfg.temperature)).unwrap()
}
