//! FLOPs, parameter and sparsity accounting, and run reports.
//!
//! One multiply-accumulate counts as one FLOP. Conv layers contribute
//! `C_in * C_out * K^2 * H_out * W_out` per sample and linear layers
//! `in * out`; biases, batch norm, activations, pooling and residual adds
//! are free.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kcp::MaskSet;
use crate::nn::{LayerKind, ModelGraph, ModelState};

/// Multiply-accumulate count of one forward pass over one sample.
pub fn flops_of_graph(graph: &ModelGraph) -> Result<u64> {
    flops_impl(graph, None)
}

/// Like [`flops_of_graph`], with every pruned kernel skipped.
pub fn flops_with_masks(graph: &ModelGraph, masks: &MaskSet) -> Result<u64> {
    masks.check_against(graph)?;
    flops_impl(graph, Some(masks))
}

/// Conv-layer share of [`flops_of_graph`].
pub fn conv_flops(graph: &ModelGraph) -> Result<u64> {
    let shapes = graph.output_shapes()?;
    Ok(graph
        .conv_layers()
        .into_iter()
        .map(|i| {
            let g = graph.conv_geometry_with(i, &shapes).expect("conv layer");
            (g.in_channels * g.out_channels * g.kernel_size * g.kernel_size * g.out_h * g.out_w) as u64
        })
        .sum())
}

fn flops_impl(graph: &ModelGraph, masks: Option<&MaskSet>) -> Result<u64> {
    let shapes = graph.output_shapes()?;
    let mut total = 0u64;
    for (i, layer) in graph.layers.iter().enumerate() {
        total += match layer.kind {
            LayerKind::Conv2d { .. } => {
                let g = graph.conv_geometry_with(i, &shapes).expect("conv layer");
                let kernels = match masks.and_then(|m| m.get(i)) {
                    Some(mask) => mask.kept_count(),
                    None => g.in_channels * g.out_channels,
                };
                (kernels * g.kernel_size * g.kernel_size * g.out_h * g.out_w) as u64
            }
            LayerKind::Linear {
                in_features,
                out_features,
                ..
            } => (in_features * out_features) as u64,
            LayerKind::Relu
            | LayerKind::Maxpool2d { .. }
            | LayerKind::GlobalAvgPool
            | LayerKind::Batchnorm2d { .. }
            | LayerKind::ResidualAdd { .. }
            | LayerKind::Flatten => 0,
        };
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sparsity {
    /// Pruned kernels over all kernels of the eligible layers.
    pub kernel_sparsity: f64,
    /// Zero weights over all conv and linear weights.
    pub param_sparsity: f64,
    /// Output channels with every kernel pruned.
    pub fully_pruned_filters: usize,
}

/// Kernel sparsity of each listed layer.
pub fn layer_kernel_sparsity(masks: &MaskSet, layers: &[usize]) -> Vec<(usize, f64)> {
    layers
        .iter()
        .filter_map(|&l| masks.get(l).map(|m| (l, m.pruned_count() as f64 / m.len() as f64)))
        .collect()
}

/// Fraction of zero weights across conv and linear layers.
pub fn param_sparsity(graph: &ModelGraph, state: &ModelState) -> f64 {
    let (mut zeros, mut total) = (0usize, 0usize);
    for (layer, spec) in state.layers.iter().zip(&graph.layers) {
        if matches!(spec.kind, LayerKind::Conv2d { .. } | LayerKind::Linear { .. }) {
            let w = &layer.params[0];
            zeros += w.data().iter().filter(|&&v| v == 0.0).count();
            total += w.len();
        }
    }
    if total == 0 {
        0.0
    } else {
        zeros as f64 / total as f64
    }
}

/// Kernel sparsity over `eligible`, parameter sparsity of `state` and the
/// fully pruned filter count over all masked layers.
pub fn sparsity(graph: &ModelGraph, state: &ModelState, masks: &MaskSet, eligible: &[usize]) -> Sparsity {
    let (mut pruned, mut total) = (0usize, 0usize);
    for &l in eligible {
        if let Some(m) = masks.get(l) {
            pruned += m.pruned_count();
            total += m.len();
        }
    }
    Sparsity {
        kernel_sparsity: if total == 0 { 0.0 } else { pruned as f64 / total as f64 },
        param_sparsity: param_sparsity(graph, state),
        fully_pruned_filters: masks.iter().map(|(_, m)| m.fully_pruned_filters()).sum(),
    }
}

pub const REPORT_VERSION: u32 = 1;

/// Hex SHA-256 prefix of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&json)[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub graph: String,
    pub seed: u64,
    pub config_hash: String,
    pub baseline_flops: u64,
    pub param_count: u64,
    #[serde(default)]
    pub baseline_accuracy: Option<f64>,
}

/// One row of a report. Column order here is the CSV header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub portion: Option<f64>,
    pub train_loss: f64,
    pub task_loss: f64,
    pub fd_loss: Option<f64>,
    pub eval_accuracy: f64,
    pub eval_loss: f64,
    pub kernel_sparsity: f64,
    pub param_sparsity: f64,
    pub flops: u64,
    pub fully_pruned_filters: usize,
}

pub const CSV_HEADER: &[&str] = &[
    "epoch",
    "portion",
    "train_loss",
    "task_loss",
    "fd_loss",
    "eval_accuracy",
    "eval_loss",
    "kernel_sparsity",
    "param_sparsity",
    "flops",
    "fully_pruned_filters",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub report_version: u32,
    pub metadata: RunMetadata,
    pub records: Vec<EpochRecord>,
}

impl EpochRecord {
    /// Field values in [`CSV_HEADER`] order; absent values are empty.
    pub fn csv_fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        vec![
            self.epoch.to_string(),
            opt(self.portion),
            self.train_loss.to_string(),
            self.task_loss.to_string(),
            opt(self.fd_loss),
            self.eval_accuracy.to_string(),
            self.eval_loss.to_string(),
            self.kernel_sparsity.to_string(),
            self.param_sparsity.to_string(),
            self.flops.to_string(),
            self.fully_pruned_filters.to_string(),
        ]
    }
}

impl MetricsReport {
    pub fn new(metadata: RunMetadata) -> Self {
        Self {
            report_version: REPORT_VERSION,
            metadata,
            records: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record(r.csv_fields()).expect("in-memory write");
        }
        w.into_inner().expect("in-memory write")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => write_atomic(path, report.to_json().as_bytes()),
        ReportFormat::Csv => write_atomic(path, &report.to_csv()),
    }
}

/// Concatenates the records of several reports into one CSV, prefixed with
/// `run`, `graph` and `seed` columns.
pub fn merge_reports(reports: &[(String, MetricsReport)]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = ["run", "graph", "seed"].iter().chain(CSV_HEADER).copied().collect();
    w.write_record(&header).expect("in-memory write");
    for (run, report) in reports {
        for r in &report.records {
            let mut row = vec![run.clone(), report.metadata.graph.clone(), report.metadata.seed.to_string()];
            row.extend(r.csv_fields());
            w.write_record(&row).expect("in-memory write");
        }
    }
    w.into_inner().expect("in-memory write")
}
