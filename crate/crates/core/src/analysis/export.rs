//! CSV renderings of evaluation outputs. Floats use six fixed decimals so that
//! equal inputs give byte-identical files.

use serde::{Deserialize, Serialize};

use super::cluster::EnrichmentTable;
use super::metrics::ClassMetrics;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METRICS_HEADER: [&str; 7] = ["tissue", "variant", "class", "precision", "recall", "f1", "support"];

/// Machine-readable companion to the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub tissue: String,
    pub variant: String,
    pub n_cells: usize,
    pub metrics: ClassMetrics,
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::malformed("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::malformed("csv", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::malformed("csv", e)
}

/// One row per class per `(tissue, variant, metrics)` block.
pub fn metrics_csv(blocks: &[(&str, &str, &ClassMetrics)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for (tissue, variant, m) in blocks {
        for c in &m.per_class {
            w.write_record([
                tissue.to_string(),
                variant.to_string(),
                c.class.clone(),
                fmt(c.precision),
                fmt(c.recall),
                fmt(c.f1),
                c.support.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

/// `cluster, <class...>` fold values, one row per cluster; `counts` selects raw counts instead.
pub fn enrichment_csv(t: &EnrichmentTable, class_names: &[String], counts: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cluster".to_string()];
    header.extend(class_names.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for j in 0..t.fold.len() {
        let mut row = vec![j.to_string()];
        if counts {
            row.extend(t.counts[j].iter().map(u64::to_string));
        } else {
            row.extend(t.fold[j].iter().map(|&v| fmt(v)));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// `cell_id, pc1, pc2, ..., cluster[, label]`.
pub fn projection_csv(
    cell_ids: &[String],
    coords: &Tensor<f64>,
    clusters: &[usize],
    labels: Option<&[Option<usize>]>,
) -> Result<String> {
    let n = cell_ids.len();
    if coords.rows() != n || clusters.len() != n || labels.is_some_and(|l| l.len() != n) {
        return Err(Error::shape("projection rows", &[n], &[coords.rows()]));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell_id".to_string()];
    header.extend((1..=coords.cols()).map(|i| format!("pc{i}")));
    header.push("cluster".into());
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..n {
        let mut row = vec![cell_ids[i].clone()];
        row.extend(coords.row(i).iter().map(|&v| fmt(v)));
        row.push(clusters[i].to_string());
        if let Some(l) = labels {
            row.push(l[i].map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}
