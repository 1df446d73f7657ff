//! Run summaries, standalone diagnostics and the analytic self-test.

use serde::Serialize;

use crate::analysis::{fr_surrogate_diag, improvement_ratio, lemma3_bound, tail_mean, tail_std};
use crate::autodiff::Tensor;
use crate::compression::{estimate_contraction, qsgd_dequantize, qsgd_quantize, top_s_sparsify, uniform_scalar_quantize, update_error_memory, CompressorSpec};
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::federation::{aggregation_weights, step_decay, Experiment, Trace};
use crate::losses::psnr;
use crate::model::{FeatureBatch, LayerMap, ModelConfig, ModelParams};
use crate::privacy::{clip_l1, epsilon_budget, UploadOption};
use crate::rng::stream;

/// Rounds averaged for the final PSNR.
pub const FINAL_WINDOW: usize = 5;
/// Rounds over which PSNR spread is measured.
pub const SPREAD_WINDOW: usize = 15;

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub mode: String,
    pub scheme: String,
    pub rounds: usize,
    /// Mean PSNR over the last [`FINAL_WINDOW`] rounds.
    pub final_psnr_db: f64,
    /// Sample standard deviation of PSNR over the last [`SPREAD_WINDOW`] rounds.
    pub psnr_std_db: Option<f64>,
    pub improvement_ratio: Option<f64>,
    pub final_loss: Option<f64>,
    pub eps_cumulative: Option<f64>,
}

/// PSNR of rounds `1..=T`, without the initial evaluation.
pub fn round_psnr(trace: &Trace) -> Vec<f64> {
    trace.rounds.iter().skip(1).map(|r| r.psnr_db).collect()
}

pub fn summarize(name: &str, config: &ExperimentConfig, trace: &Trace) -> SummaryRow {
    let psnr = round_psnr(trace);
    let last = trace.rounds.last();
    SummaryRow {
        name: name.to_owned(),
        mode: label(&config.mode),
        scheme: label(&config.scheme),
        rounds: config.t,
        final_psnr_db: tail_mean(&psnr, FINAL_WINDOW).unwrap_or(trace.rounds[0].psnr_db),
        psnr_std_db: tail_std(&psnr, SPREAD_WINDOW),
        improvement_ratio: (!trace.final_state.fr_trace.is_empty()).then(|| improvement_ratio(&trace.final_state.fr_trace)),
        final_loss: last.and_then(|r| r.loss_mean),
        eps_cumulative: last.and_then(|r| r.eps_cumulative),
    }
}

fn label<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => String::new(),
    }
}

/// Diagnostics that do not need a full run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Contraction of the configured model-upload compressor.
    pub nu_hat: f64,
    /// Contraction of top-S alone at `S_m`.
    pub nu_hat_top_s: f64,
    pub s_m_fraction: f64,
    /// Gradient norm at the initial model on the probe batch.
    pub probe_grad_norm: f64,
    /// Error-memory bound using `probe_grad_norm` as `G`.
    pub lemma3_bound: Option<f64>,
    /// Feature-to-image error ratio of the initial model.
    pub surrogate_ratio: Option<f64>,
    pub surrogate_correlation: Option<f64>,
    /// Same ratio for a linear encoder with i.i.d. standard Gaussian weights.
    pub linear_gaussian_ratio: Option<f64>,
    /// `N * d`, the value the linear-Gaussian ratio should approach.
    pub feature_width: usize,
}

pub fn diagnostics(config: &ExperimentConfig, trials: usize) -> Result<Diagnostics> {
    let exp = Experiment::setup(config)?;
    let map = config.model.layer_map();
    let nu_top = estimate_contraction(CompressorSpec::TopS { fraction: config.s_m_fraction }, &map, trials, &mut stream(config.seed, "diag-nu", &[]))?;
    let state = exp.initial_state();
    let probe = exp.snapshot_metrics(&state)?.probe_grad_norm_sq.sqrt();
    let images: Vec<Tensor> = exp.eval.clone();
    let sur = fr_surrogate_diag(&state.global, &images, 0.01, trials, &mut stream(config.seed, "diag-surrogate", &[]))?;
    let linear = linear_gaussian_encoder(&config.model, config.seed)?;
    let lin = fr_surrogate_diag(&linear, &images, 0.01, trials, &mut stream(config.seed, "diag-linear", &[]))?;
    Ok(Diagnostics {
        nu_hat: exp.nu_hat,
        nu_hat_top_s: nu_top,
        s_m_fraction: config.s_m_fraction,
        probe_grad_norm: probe,
        lemma3_bound: lemma3_bound(exp.nu_hat, config.eta_c0, config.e_c, probe).ok(),
        surrogate_ratio: sur.ratio,
        surrogate_correlation: sur.correlation,
        linear_gaussian_ratio: lin.ratio,
        feature_width: config.model.feature_width(),
    })
}

/// Single-layer linear encoder with i.i.d. standard Gaussian weights and a
/// zero decoder, for the surrogate identity check.
pub fn linear_gaussian_encoder(model: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let cfg = ModelConfig { hidden_widths: Vec::new(), ..model.clone() };
    let mut p = ModelParams::zeros(&cfg)?;
    let mut rng = stream(seed, "linear-encoder", &[]);
    let (rows, cols) = (cfg.feature_width(), cfg.image_len());
    let w: Vec<f64> = (0..rows * cols).map(|_| rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)).collect();
    p.theta[0] = Tensor::matrix(rows, cols, w);
    Ok(p)
}

/// Outcome of one self-test check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check { name, passed, detail: detail.into() }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Fast analytic checks of the worked examples.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();
    let run = |out: &mut Vec<Check>, name: &'static str, f: &dyn Fn() -> Result<(bool, String)>| match f() {
        Ok((ok, d)) => out.push(check(name, ok, d)),
        Err(e) => out.push(check(name, false, e.to_string())),
    };

    run(&mut out, "psnr", &|| {
        let a = Tensor::vector(vec![0.0; 4]);
        let b = Tensor::vector(vec![0.1; 4]);
        let v = psnr(&a, &b, 1.0)?;
        Ok((close(v, 20.0, 1e-9) && psnr(&a, &a, 1.0)? == 99.0, format!("{v:.6} dB")))
    });
    run(&mut out, "top-s", &|| {
        let m = LayerMap::from_lengths(&[("w", 3)]);
        let keep = top_s_sparsify(&[3.0, -1.0, 2.0], &m, 1.0 / 3.0)?;
        let tie = top_s_sparsify(&[2.0, -2.0], &LayerMap::from_lengths(&[("w", 2)]), 0.5)?;
        Ok((keep == vec![vec![0]] && tie == vec![vec![0]], format!("{keep:?} {tie:?}")))
    });
    run(&mut out, "qsgd-on-grid", &|| {
        let (l, s) = qsgd_quantize(&[1.0, 0.0], 4, &mut stream(0, "selftest", &[]))?;
        let v = qsgd_dequantize(&l, s, 4);
        Ok((v == vec![1.0, 0.0], format!("{v:?}")))
    });
    run(&mut out, "error-memory", &|| {
        let m = update_error_memory(&[3.0, -1.0, 2.0], &[3.0, 0.0, 0.0])?;
        Ok((m.m == vec![0.0, -1.0, 2.0], format!("{:?}", m.m)))
    });
    run(&mut out, "scalar-quantizer", &|| {
        let q = uniform_scalar_quantize(&FeatureBatch::new(1, 3, vec![0.0, 0.5, 1.0])?, 4)?;
        let v = q.dequantize()?.data()[1];
        Ok((q.levels[1] == 8 && close(v, 8.0 / 15.0, 1e-15), format!("level {} -> {v:.4}", q.levels[1])))
    });
    run(&mut out, "clip-l1", &|| {
        let c = clip_l1(&[2.0, 2.0], 2.0);
        Ok((c == vec![1.0, 1.0], format!("{c:?}")))
    });
    run(&mut out, "epsilon", &|| {
        let e1 = epsilon_budget(UploadOption::ModelUpload, 2.0, 1.0, 10.0, 1.0, 1.0)?;
        let e2 = epsilon_budget(UploadOption::FeatureUpload, 2.0, 1.0, 10.0, 1.0, 1.0)?;
        Ok((close(e1, 1.2, 1e-12) && close(e2, 0.6, 1e-12) && e2 == e1 / 2.0, format!("({e1}, {e2})")))
    });
    run(&mut out, "lemma3", &|| {
        let b = lemma3_bound(0.5, 0.01, 3, 10.0)?;
        Ok((close(b, 0.72, 1e-12) && lemma3_bound(1.0, 0.01, 3, 10.0)? == 0.0, format!("{b}")))
    });
    run(&mut out, "weights", &|| {
        let avg = aggregation_weights(crate::config::Scheme::FedAvg, &[10, 30], &[])?;
        let dma = aggregation_weights(crate::config::Scheme::FedDma, &[1, 1, 1], &[1.0, 2.0, 3.0])?;
        let lol = aggregation_weights(crate::config::Scheme::FedLol, &[1, 1, 1], &[1.0, 2.0, 3.0])?;
        let ok = avg == vec![0.25, 0.75]
            && close(dma[0], 0.1863, 1e-4)
            && close(dma[1], 0.3072, 1e-4)
            && close(dma[2], 0.5065, 1e-4)
            && lol.iter().zip([5.0, 4.0, 3.0]).all(|(w, e)| close(*w, e / 12.0, 1e-12));
        Ok((ok, format!("{dma:.4?} {lol:.4?}")))
    });
    run(&mut out, "lr-schedule", &|| {
        let v = step_decay(0.01, 0.9, 10, 25);
        Ok((close(v, 0.0081, 1e-15), format!("{v}")))
    });
    run(&mut out, "contraction-identity", &|| {
        let m = LayerMap::from_lengths(&[("w", 16)]);
        let nu = estimate_contraction(CompressorSpec::Identity, &m, 4, &mut stream(0, "selftest", &[]))?;
        Ok((nu == 1.0, format!("{nu}")))
    });
    out
}
