//! Per-round metrics and their JSON-lines / CSV encodings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One line of the metrics stream. Line `t = 0` is the evaluation of the
/// initial model; round `r` (0-based) writes line `t = r + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub t: usize,
    /// Mean per-image PSNR on the evaluation set at the training SNR.
    pub psnr_db: f64,
    /// Mean local image loss over this round's participants.
    pub loss_mean: Option<f64>,
    /// Whether refinement lowered the evaluation image MSE.
    pub fr_improved: Option<bool>,
    pub eps_ratio_assumption1: Option<f64>,
    pub nu_hat: f64,
    pub eps_cumulative: Option<f64>,
    pub eps_model_upload: Option<f64>,
    pub eps_feature_upload: Option<f64>,
    pub eta_c: Option<f64>,
    pub eta_s: Option<f64>,
    pub fr_mse_before: Option<f64>,
    pub fr_mse_after: Option<f64>,
    /// Mean `||m_k||^2` over all clients after the round.
    pub mem_norm_sq_mean: f64,
    /// Largest mini-batch gradient norm seen so far.
    pub grad_norm_max: f64,
    /// Empirical error-memory bound from `nu_hat`, `eta_c0`, `E_c` and `grad_norm_max`.
    pub lemma3_bound: Option<f64>,
    /// `||grad F(w)||^2` on the fixed probe batch.
    pub probe_grad_norm_sq: f64,
    /// `(client id, mean local loss)` for this round's participants.
    pub client_losses: Vec<(usize, f64)>,
    pub a_m: Vec<usize>,
    pub a_o: Vec<usize>,
}

const CSV_COLUMNS: &[&str] = &[
    "t",
    "psnr_db",
    "loss_mean",
    "fr_improved",
    "eps_ratio_assumption1",
    "nu_hat",
    "eps_cumulative",
    "eps_model_upload",
    "eps_feature_upload",
    "eta_c",
    "eta_s",
    "fr_mse_before",
    "fr_mse_after",
    "mem_norm_sq_mean",
    "grad_norm_max",
    "lemma3_bound",
    "probe_grad_norm_sq",
    "client_losses",
    "a_m",
    "a_o",
];

pub fn write_jsonl(rows: &[RoundMetrics], w: &mut impl Write) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<RoundMetrics>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn cell(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Array(items) => items.iter().map(cell).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}

/// CSV mirror of the JSON lines. Lists are `;`-joined, pairs `id;loss`
/// flattened in order, and missing values are empty cells.
pub fn write_csv(rows: &[RoundMetrics], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in rows {
        let value = serde_json::to_value(r)?;
        out.write_record(CSV_COLUMNS.iter().map(|c| cell(&value[*c])))?;
    }
    out.flush()?;
    Ok(())
}
