use std::io::Write;

use serde::{Deserialize, Serialize};

/// Leading CSV columns; per-layer `disc_<layer>` (anchored layers) and
/// `rho_<layer>` (all layers) columns follow in model order.
pub const METRICS_FIXED_COLUMNS: [&str; 7] = [
    "step",
    "epoch",
    "lr",
    "train_loss",
    "downstream_acc",
    "upstream_acc",
    "discrepancy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    /// Mean batch loss over the epoch (full-train-set loss for step 0).
    pub train_loss: f64,
    /// Valid accuracy on the task being trained.
    pub downstream_acc: f64,
    /// Valid accuracy on the upstream task using the stored upstream head.
    pub upstream_acc: f64,
    /// ‖θ − θ₀‖ over anchored layers.
    pub discrepancy: f64,
    pub layer_discrepancy: Vec<f64>,
    pub rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub layer_names: Vec<String>,
    pub anchored_layers: Vec<String>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn header(&self) -> Vec<String> {
        METRICS_FIXED_COLUMNS
            .iter()
            .map(|c| c.to_string())
            .chain(self.anchored_layers.iter().map(|n| format!("disc_{n}")))
            .chain(self.layer_names.iter().map(|n| format!("rho_{n}")))
            .collect()
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        for r in &self.records {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.epoch, r.lr, r.train_loss, r.downstream_acc, r.upstream_acc, r.discrepancy
            )?;
            for v in r.layer_discrepancy.iter().chain(&r.rho) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}
