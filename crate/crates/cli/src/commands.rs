use std::path::{Path, PathBuf};
use std::time::Instant;

use cellsym_core::analysis::{
    adjusted_rand_index, confusion_matrix, enrichment_csv, kmeans_restarts, metrics_csv, niche_enrichment,
    pca_project, precision_recall_f1, projection_csv, MetricsSummary,
};
use cellsym_core::contrastive::{batched_retrieval_accuracy, train_alignment, LatentPack};
use cellsym_core::dataset::{generate_synthetic, load_dataset, split_dataset, split_dataset_stratified, write_dataset};
use cellsym_core::fusion::train_classifier_with;
use cellsym_core::io_util::{atomic_write, ensure_dir};
use cellsym_core::{CellDataset, ModelVariant, Tensor, TrainedClassifier};
use serde::{Deserialize, Serialize};

use crate::config::{resolve, LatentSource, RunConfig};
use crate::error::CliError;
use crate::manifest::{artifacts, directory_checksum, RunManifest, MANIFEST_FILE};

pub const MODEL_STEM: &str = "model";
pub const HEADS_STEM: &str = "heads";
pub const SPLIT_FILE: &str = "split.json";
pub const LATENT_DIR: &str = "latent";
pub const REPORT_DIR: &str = "report";

/// `--config`, `--set` and `--seed`, shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fold {
    Test,
    All,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    seed: u64,
    train_fraction: f64,
    stratified: bool,
    train: Vec<String>,
    test: Vec<String>,
}

struct Run {
    command: &'static str,
    started: Instant,
    cfg: RunConfig,
    inputs: Vec<(String, String)>,
    dataset_checksum: Option<String>,
}

impl Run {
    fn start(command: &'static str, common: &Common, section: &str) -> Result<Self, CliError> {
        Ok(Self {
            command,
            started: Instant::now(),
            cfg: resolve(common.config.as_deref(), &common.overrides, section, common.seed)?,
            inputs: common
                .config
                .iter()
                .map(|p| ("config".to_string(), p.display().to_string()))
                .collect(),
            dataset_checksum: None,
        })
    }

    fn input(&mut self, flag: &str, path: &Path) {
        self.inputs.push((flag.into(), path.display().to_string()));
    }

    fn load_data(&mut self, dir: &Path) -> Result<CellDataset, CliError> {
        self.input("data", dir);
        let ds = load_dataset(dir)?;
        self.dataset_checksum = Some(directory_checksum(dir)?);
        Ok(ds)
    }

    fn finish(self, out: &Path, files: &[String]) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            command: self.command.into(),
            version: cellsym_core::VERSION.into(),
            seed: self.cfg.run.seed,
            config: self.cfg,
            inputs: self.inputs,
            dataset_checksum: self.dataset_checksum,
            artifacts: artifacts(out, files)?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        m.write(out)?;
        Ok(m)
    }
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<String, CliError> {
    atomic_write(&dir.join(name), bytes)?;
    Ok(name.to_string())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<String, CliError> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::data(name, e))?;
    write(dir, name, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::data(path.display(), e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::data(path.display(), e))
}

fn loss_csv(history: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{l:.9}\n", i + 1));
    }
    s
}

fn split(cfg: &RunConfig, ds: &CellDataset) -> Result<(CellDataset, CellDataset, SplitRecord), CliError> {
    let (seed, frac) = (cfg.split_seed(), cfg.run.train_fraction);
    let (train, test) = if cfg.run.stratified {
        split_dataset_stratified(ds, frac, seed)?
    } else {
        split_dataset(ds, frac, seed)?
    };
    let record = SplitRecord {
        seed,
        train_fraction: frac,
        stratified: cfg.run.stratified,
        train: train.cell_ids().to_vec(),
        test: test.cell_ids().to_vec(),
    };
    Ok((train, test, record))
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::data("csv", e)
}

pub fn synth(out: &Path, common: &Common) -> Result<RunManifest, CliError> {
    let run = Run::start("synth", common, "synth")?;
    let ds = generate_synthetic(&run.cfg.synth)?;
    write_dataset(&ds, out)?;
    let mut run = run;
    run.dataset_checksum = Some(directory_checksum(out)?);
    let mut files: Vec<String> = std::fs::read_dir(out)
        .map_err(|e| CliError::data(out.display(), e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST_FILE)
        .collect();
    files.sort();
    eprintln!("wrote {} cells ({} classes) to {}", ds.len(), ds.n_classes(), out.display());
    run.finish(out, &files)
}

pub fn train(data: &Path, variant: Option<ModelVariant>, out: &Path, common: &Common) -> Result<RunManifest, CliError> {
    let mut run = Run::start("train", common, "fusion")?;
    if let Some(v) = variant {
        run.cfg.fusion.variant = v;
    }
    let ds = run.load_data(data)?.labeled_only();
    let (train, _test, record) = split(&run.cfg, &ds)?;
    ensure_dir(out)?;
    let epochs = run.cfg.fusion.epochs;
    let mut log = |epoch: usize, loss: f64| eprintln!("epoch {}/{epochs} loss {loss:.6}", epoch + 1);
    let model = train_classifier_with(&train, &run.cfg.fusion, Some(&mut log))?;
    model.save(out, MODEL_STEM)?;
    let files = vec![
        format!("{MODEL_STEM}.json"),
        format!("{MODEL_STEM}.f32"),
        write_json(out, SPLIT_FILE, &record)?,
        write(out, "loss.csv", loss_csv(&model.history).as_bytes())?,
    ];
    run.finish(out, &files)
}

pub fn eval(model_dir: &Path, data: &Path, report: &Path, fold: Fold, common: &Common) -> Result<RunManifest, CliError> {
    let mut run = Run::start("eval", common, "fusion")?;
    run.input("model", model_dir);
    let model = TrainedClassifier::load(model_dir, MODEL_STEM)?;
    let ds = run.load_data(data)?;
    if model.class_names != ds.class_names() {
        return Err(CliError::Data(format!(
            "model classes {:?} differ from dataset classes {:?}",
            model.class_names,
            ds.class_names()
        )));
    }
    let ds = match fold {
        Fold::All => ds,
        Fold::Test => {
            let record: SplitRecord = read_json(&model_dir.join(SPLIT_FILE))?;
            let idx = record
                .test
                .iter()
                .map(|id| {
                    ds.index_of(id)
                        .ok_or_else(|| CliError::Data(format!("test cell `{id}` is not in {}", data.display())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            ds.subset(&idx)
        }
    }
    .labeled_only();
    if ds.is_empty() {
        return Err(CliError::Data("no labeled cells to evaluate".into()));
    }
    let pred = model.predict(&ds)?;
    let truth = ds.require_labels()?;
    let metrics = precision_recall_f1(&confusion_matrix(&pred.labels, &truth, ds.n_classes())?.with_class_names(ds.class_names())?);
    let variant = model.config().variant.name();
    let tissue = run.cfg.run.tissue.clone();

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell_id".to_string(), "label".into(), "predicted".into()];
    header.extend(ds.class_names().iter().map(|c| format!("p_{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut row = vec![
            ds.cell_ids()[i].clone(),
            ds.class_names()[truth[i]].clone(),
            ds.class_names()[pred.labels[i]].clone(),
        ];
        row.extend(pred.probs.row(i).iter().map(|p| format!("{p:.6}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    let predictions = w.into_inner().map_err(csv_err)?;

    ensure_dir(report)?;
    let files = vec![
        write(report, "metrics.csv", metrics_csv(&[(&tissue, variant, &metrics)])?.as_bytes())?,
        write_json(
            report,
            "summary.json",
            &MetricsSummary {
                tissue,
                variant: variant.into(),
                n_cells: ds.len(),
                metrics: metrics.clone(),
            },
        )?,
        write(report, "predictions.csv", &predictions)?,
    ];
    println!(
        "{variant}: {} cells, macro-F1 {:.4}, accuracy {:.4}",
        ds.len(),
        metrics.macro_f1,
        metrics.accuracy
    );
    run.finish(report, &files)
}

#[derive(Serialize, Deserialize)]
pub struct AlignMetrics {
    pub n_train: usize,
    pub n_test: usize,
    pub test_infonce: Option<f64>,
    pub retrieval_batch: Option<usize>,
    pub test_retrieval_accuracy: Option<f64>,
}

pub fn align(data: &Path, out: &Path, common: &Common) -> Result<RunManifest, CliError> {
    let mut run = Run::start("align", common, "align")?;
    let ds = run.load_data(data)?;
    let (train, test, record) = split(&run.cfg, &ds)?;
    let heads = train_alignment(&train, &run.cfg.align)?;
    for (i, l) in heads.history.iter().enumerate() {
        eprintln!("epoch {}/{} InfoNCE {l:.6}", i + 1, heads.history.len());
    }
    ensure_dir(out)?;
    heads.save(out, HEADS_STEM)?;

    let (morph, gene) = heads.project_dataset(&ds)?;
    let pack = LatentPack {
        cell_ids: ds.cell_ids().to_vec(),
        class_names: ds.class_names().to_vec(),
        labels: ds.labels().to_vec(),
        morph,
        gene,
    };
    pack.write(&out.join(LATENT_DIR))?;

    let batch = test.len().min(run.cfg.align.batch_size);
    let enough = batch >= 2;
    let metrics = AlignMetrics {
        n_train: train.len(),
        n_test: test.len(),
        test_infonce: if enough { Some(heads.mean_loss(&test, batch)?) } else { None },
        retrieval_batch: enough.then_some(batch),
        test_retrieval_accuracy: if enough {
            let (zm, zg) = heads.project_dataset(&test)?;
            Some(batched_retrieval_accuracy(&zm, &zg, batch)?)
        } else {
            None
        },
    };
    if let Some(acc) = metrics.test_retrieval_accuracy {
        println!("held-out retrieval accuracy at batch {batch}: {acc:.4}");
    }
    let mut files = vec![format!("{HEADS_STEM}.json"), format!("{HEADS_STEM}.f32")];
    files.extend(
        ["latent.json", "cells.txt", "morph_latent.f32", "gene_latent.f32"]
            .iter()
            .map(|f| format!("{LATENT_DIR}/{f}")),
    );
    files.push(write_json(out, SPLIT_FILE, &record)?);
    files.push(write(out, "loss.csv", loss_csv(&heads.history).as_bytes())?);
    files.push(write_json(out, "align_metrics.json", &metrics)?);
    run.finish(out, &files)
}

#[derive(Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub source: LatentSource,
    pub n_cells: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub cluster_sizes: Vec<usize>,
    /// Agreement with the carried-over labels, over labeled cells only.
    pub ari: Option<f64>,
}

fn latent_dir(path: &Path) -> PathBuf {
    if path.join("latent.json").is_file() {
        path.to_path_buf()
    } else {
        path.join(LATENT_DIR)
    }
}

pub fn cluster(latent: &Path, k: Option<usize>, out: &Path, common: &Common) -> Result<RunManifest, CliError> {
    let mut run = Run::start("cluster", common, "cluster")?;
    if let Some(k) = k {
        run.cfg.cluster.k = k;
    }
    run.input("latent", latent);
    let dir = latent_dir(latent);
    let pack = LatentPack::load(&dir)?;
    run.dataset_checksum = Some(directory_checksum(&dir)?);
    let c = run.cfg.cluster.clone();
    let points: Tensor<f32> = match c.source {
        LatentSource::Morph => pack.morph.clone(),
        LatentSource::Gene => pack.gene.clone(),
        LatentSource::Joint => {
            let d = pack.latent_dim();
            Tensor::from_fn(vec![pack.len(), 2 * d], |i| {
                let (r, j) = (i / (2 * d), i % (2 * d));
                if j < d {
                    pack.morph.row(r)[j]
                } else {
                    pack.gene.row(r)[j - d]
                }
            })
        }
    };
    let res = kmeans_restarts(&points, c.k, c.seed, c.max_iter, c.tol, c.n_init)?;
    let pca = pca_project(&points, c.pca_dims.min(points.cols()))?;

    let labeled: Vec<usize> = (0..pack.len()).filter(|&i| pack.labels[i].is_some()).collect();
    let assign_l: Vec<usize> = labeled.iter().map(|&i| res.assignments[i]).collect();
    let labels_l: Vec<usize> = labeled.iter().map(|&i| pack.labels[i].unwrap()).collect();
    let mut cluster_sizes = vec![0usize; c.k];
    res.assignments.iter().for_each(|&a| cluster_sizes[a] += 1);

    ensure_dir(out)?;
    let mut files = Vec::new();
    let mut ari = None;
    if !labeled.is_empty() && !pack.class_names.is_empty() {
        let table = niche_enrichment(&assign_l, &labels_l, c.k, pack.class_names.len())?;
        files.push(write(out, "enrichment.csv", enrichment_csv(&table, &pack.class_names, false)?.as_bytes())?);
        files.push(write(
            out,
            "enrichment_counts.csv",
            enrichment_csv(&table, &pack.class_names, true)?.as_bytes(),
        )?);
        ari = Some(adjusted_rand_index(&assign_l, &labels_l)?);
    }
    files.push(write(
        out,
        "projection.csv",
        projection_csv(&pack.cell_ids, &pca.coords, &res.assignments, Some(&pack.labels))?.as_bytes(),
    )?);
    let summary = ClusterSummary {
        k: c.k,
        source: c.source,
        n_cells: pack.len(),
        inertia: res.inertia,
        iterations: res.iterations,
        cluster_sizes,
        ari,
    };
    files.push(write_json(out, "clusters.json", &summary)?);
    match ari {
        Some(a) => println!("k={} inertia {:.4}, ARI vs labels {a:.4}", c.k, res.inertia),
        None => println!("k={} inertia {:.4}", c.k, res.inertia),
    }
    run.finish(out, &files)
}

#[derive(Serialize, Deserialize)]
pub struct ReportEntry {
    pub path: String,
    pub command: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Headline numbers pulled from the run's own outputs.
    pub headline: serde_json::Value,
}

fn find_manifests(root: &Path, dir: &Path, depth: usize, out: &mut Vec<PathBuf>) {
    if dir.join(MANIFEST_FILE).is_file() && dir != root.join(REPORT_DIR) {
        out.push(dir.to_path_buf());
    }
    if depth == 0 {
        return;
    }
    let Ok(entries) = std::fs::read_dir(dir) else { return };
    let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    for d in subdirs {
        if d != root.join(REPORT_DIR) {
            find_manifests(root, &d, depth - 1, out);
        }
    }
}

fn headline(dir: &Path, command: &str) -> serde_json::Value {
    let read = |f: &str| read_json::<serde_json::Value>(&dir.join(f)).ok();
    match command {
        "eval" => read("summary.json")
            .map(|s| {
                serde_json::json!({
                    "variant": s["variant"],
                    "n_cells": s["n_cells"],
                    "macro_f1": s["metrics"]["macro_f1"],
                    "accuracy": s["metrics"]["accuracy"],
                })
            })
            .unwrap_or_default(),
        "align" => read("align_metrics.json").unwrap_or_default(),
        "cluster" => read("clusters.json")
            .map(|s| serde_json::json!({ "k": s["k"], "inertia": s["inertia"], "ari": s["ari"] }))
            .unwrap_or_default(),
        _ => serde_json::Value::Null,
    }
}

pub fn report(run_dir: &Path, common: &Common) -> Result<RunManifest, CliError> {
    let mut run = Run::start("report", common, "run")?;
    run.input("run-dir", run_dir);
    if !run_dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", run_dir.display())));
    }
    let mut dirs = Vec::new();
    find_manifests(run_dir, run_dir, 3, &mut dirs);
    if dirs.is_empty() {
        return Err(CliError::Data(format!("no run manifests under {}", run_dir.display())));
    }
    let mut entries = Vec::new();
    let mut combined: Option<String> = None;
    for d in &dirs {
        let m = RunManifest::load(d)?;
        let rel = d.strip_prefix(run_dir).unwrap_or(d).display().to_string();
        let rel = if rel.is_empty() { ".".to_string() } else { rel };
        let h = headline(d, &m.command);
        println!("{:<8} {:<30} {}", m.command, rel, if h.is_null() { String::new() } else { h.to_string() });
        if m.command == "eval" {
            if let Ok(text) = std::fs::read_to_string(d.join("metrics.csv")) {
                let mut lines = text.lines();
                let header = lines.next().unwrap_or_default();
                let acc = combined.get_or_insert_with(|| format!("{header}\n"));
                for l in lines {
                    acc.push_str(l);
                    acc.push('\n');
                }
            }
        }
        entries.push(ReportEntry {
            path: rel,
            command: m.command,
            seed: m.seed,
            wall_clock_seconds: m.wall_clock_seconds,
            headline: h,
        });
    }
    let out = run_dir.join(REPORT_DIR);
    ensure_dir(&out)?;
    let mut files = vec![write_json(&out, "report.json", &entries)?];
    if let Some(csv) = combined {
        files.push(write(&out, "metrics.csv", csv.as_bytes())?);
    }
    run.finish(&out, &files)
}
