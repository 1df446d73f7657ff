//! The FedSFR round and its baselines.
//!
//! One round: sample `A_m` and `A_o`, train every participant locally, let
//! `A_m` upload compressed model updates (with error feedback) and `A_o`
//! upload quantized feature sets, aggregate the model updates, refine the
//! aggregate on the feature sets at the server, and broadcast. Baseline mode
//! has every participant upload a model update and skips refinement.
//!
//! All randomness comes from named streams keyed by the config seed, client
//! id and round, so clients can be trained in parallel without changing any
//! result.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::analysis::{assumption1_ratio, improvement_ratio, lemma3_bound};
use crate::autodiff::Tensor;
use crate::channel::{Link, NoisyVq};
use crate::compression::{compress, estimate_contraction, kept_count, update_error_memory, uniform_scalar_quantize, CompressedUpdate, CompressorSpec, ErrorMemory};
use crate::config::{ExperimentConfig, Mode, Scheme};
use crate::data::{generate_synthetic, load_raw, mark_public, partition_indices, Dataset};
use crate::error::{invalid, Error, Result};
use crate::losses::{feature_loss, image_loss, image_loss_graph, psnr};
use crate::metrics::RoundMetrics;
use crate::model::{FeatureBatch, ModelParams};
use crate::privacy::{epsilon_budget, privatize_encoder, privatize_update, UploadOption};
use crate::rng::{stream, stream_key};

/// Trials used for the contraction estimate reported with every round.
pub const NU_TRIALS: usize = 200;
/// Largest probe batch for the gradient-norm trend.
pub const PROBE_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    /// Indices into `data` of the public subset `P_k`.
    pub public: Vec<usize>,
    pub memory: ErrorMemory,
    /// `|D_k| / |D|`.
    pub p_k: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    /// Model uploaders, sorted by id.
    pub a_m: Vec<usize>,
    /// Feature uploaders, sorted by id.
    pub a_o: Vec<usize>,
    /// `(client id, channel score)` for every participant in draw order.
    pub scores: Vec<(usize, f64)>,
}

impl RoundPlan {
    /// `A_m` then `A_o`.
    pub fn participants(&self) -> Vec<usize> {
        self.a_m.iter().chain(&self.a_o).copied().collect()
    }
}

/// `K_m + K_o` clients uniformly without replacement; the `K_m` best
/// channel scores (i.i.d. uniform) form `A_m`.
pub fn sample_clients(k: usize, k_m: usize, k_o: usize, rng: &mut impl Rng) -> Result<RoundPlan> {
    if k_m + k_o > k {
        return Err(invalid(format!("cannot sample {} of {k} clients", k_m + k_o)));
    }
    let drawn = sample(rng, k, k_m + k_o).into_vec();
    let scores: Vec<(usize, f64)> = drawn.into_iter().map(|id| (id, rng.random::<f64>())).collect();
    let mut ranked = scores.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut a_m: Vec<usize> = ranked[..k_m].iter().map(|p| p.0).collect();
    let mut a_o: Vec<usize> = ranked[k_m..].iter().map(|p| p.0).collect();
    a_m.sort_unstable();
    a_o.sort_unstable();
    Ok(RoundPlan { a_m, a_o, scores })
}

/// `eta0 * factor^floor(round / interval)`.
pub fn step_decay(eta0: f64, factor: f64, interval: usize, round: usize) -> f64 {
    eta0 * factor.powi((round / interval.max(1)) as i32)
}

/// `(alpha / sqrt(T), alpha / T^(3/4))`.
pub fn theorem1_rates(alpha: f64, t_total: usize) -> (f64, f64) {
    let t = t_total as f64;
    (alpha / t.sqrt(), alpha / t.powf(0.75))
}

/// Result of local training.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOutcome {
    pub w_local: ModelParams,
    /// `g_k = m_k + eta_c * sum of batch gradients`.
    pub g: Vec<f64>,
    /// Mean image loss over the local steps, or the loss at `w` when
    /// `E_c = 0`.
    pub loss_mean: f64,
    pub grad_norm_max: f64,
}

fn batch_indices(len: usize, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = sample(rng, len, batch).into_vec();
    idx.sort_unstable();
    idx
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `E_c` mini-batch SGD steps on the image loss, fresh channel noise per
/// batch.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    data: &Dataset,
    memory: &ErrorMemory,
    w: &ModelParams,
    e_c: usize,
    eta_c: f64,
    batch: usize,
    link: &Link,
    alpha_c: f64,
    rng: &mut impl Rng,
) -> Result<LocalOutcome> {
    if data.is_empty() {
        return Err(invalid("client dataset is empty"));
    }
    if batch > data.len() {
        return Err(invalid(format!("batch size {batch} exceeds client dataset of {}", data.len())));
    }
    let dim = w.config().param_count();
    if memory.m.len() != dim {
        return Err(invalid("error memory does not match the model"));
    }
    let mut current = w.clone();
    let mut sum = vec![0.0; dim];
    let mut losses = 0.0;
    let mut grad_norm_max: f64 = 0.0;
    for _ in 0..e_c {
        let idx = batch_indices(data.len(), batch, rng);
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
        let (loss, grad) = image_loss(&current, &imgs, link, alpha_c, rng)?;
        losses += loss.total;
        grad_norm_max = grad_norm_max.max(norm(&grad));
        sum.iter_mut().zip(&grad).for_each(|(s, g)| *s += g);
        current = current.apply_step(&grad, eta_c)?;
    }
    let loss_mean = if e_c == 0 {
        let idx = batch_indices(data.len(), batch, rng);
        let imgs: Vec<&Tensor> = idx.iter().map(|&i| &data.images[i]).collect();
        image_loss(w, &imgs, link, alpha_c, rng)?.0.total
    } else {
        losses / e_c as f64
    };
    let g = memory.m.iter().zip(&sum).map(|(m, s)| m + eta_c * s).collect();
    Ok(LocalOutcome { w_local: current, g, loss_mean, grad_norm_max })
}

/// `count` public images (all of them if fewer) encoded with `params` and
/// uniformly quantized to `bits`, returned dequantized.
pub fn extract_features(
    data: &Dataset,
    public: &[usize],
    params: &ModelParams,
    count: usize,
    bits: u32,
    rng: &mut impl Rng,
) -> Result<Vec<FeatureBatch>> {
    if public.iter().any(|&i| i >= data.len()) {
        return Err(Error::IndexOutOfRange { what: "public subset", index: *public.iter().max().unwrap_or(&0), len: data.len() });
    }
    let picks = batch_indices(public.len(), count.min(public.len()), rng);
    picks
        .into_iter()
        .map(|p| {
            let y = params.encode(&data.images[public[p]])?;
            uniform_scalar_quantize(&y, bits)?.dequantize()
        })
        .collect()
}

/// Aggregation weights over the given clients.
///
/// `fedavg`: proportional to dataset size. `feddma`: softmax of min-max
/// normalized losses (uniform when all losses are equal). `fedlol`:
/// `(sum l - l_k) / ((n - 1) sum l)`.
pub fn aggregation_weights(scheme: Scheme, sizes: &[usize], losses: &[f64]) -> Result<Vec<f64>> {
    let n = sizes.len();
    if n == 0 {
        return Err(invalid("no clients to weight"));
    }
    match scheme {
        Scheme::FedAvg => {
            let total: usize = sizes.iter().sum();
            if total == 0 {
                return Err(invalid("all client datasets are empty"));
            }
            Ok(sizes.iter().map(|&s| s as f64 / total as f64).collect())
        }
        Scheme::FedDma => {
            check_losses(losses, n)?;
            let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let norm: Vec<f64> = if hi > lo { losses.iter().map(|l| (l - lo) / (hi - lo)).collect() } else { vec![0.0; n] };
            let exp: Vec<f64> = norm.iter().map(|x| x.exp()).collect();
            let z: f64 = exp.iter().sum();
            Ok(exp.iter().map(|e| e / z).collect())
        }
        Scheme::FedLol => {
            check_losses(losses, n)?;
            if n == 1 {
                return Ok(vec![1.0]);
            }
            let total: f64 = losses.iter().sum();
            if total <= 0.0 {
                return Ok(vec![1.0 / n as f64; n]);
            }
            Ok(losses.iter().map(|l| (total - l) / ((n - 1) as f64 * total)).collect())
        }
    }
}

fn check_losses(losses: &[f64], n: usize) -> Result<()> {
    if losses.len() != n || losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(invalid("one finite non-negative loss per client required"));
    }
    Ok(())
}

/// `w - (K / K_m) * sum_k p_k g_bar_k`.
pub fn aggregate(w: &ModelParams, updates: &[(f64, &CompressedUpdate)], k: usize, k_m: usize) -> Result<ModelParams> {
    if updates.is_empty() || k_m == 0 {
        return Err(invalid("aggregation needs at least one model update"));
    }
    let dim = w.config().param_count();
    let mut direction = vec![0.0; dim];
    for (p, u) in updates {
        if u.dim != dim {
            return Err(invalid("compressed update does not match the model"));
        }
        direction.iter_mut().zip(u.to_dense()).for_each(|(d, g)| *d += p * g);
    }
    w.apply_step(&direction, k as f64 / k_m as f64)
}

/// `E_s` mini-batch SGD steps on the feature loss over the received feature
/// sets, two fresh channel realizations per batch.
#[allow(clippy::too_many_arguments)]
pub fn server_refine(
    w_half: &ModelParams,
    features: &[FeatureBatch],
    e_s: usize,
    eta_s: f64,
    batch: usize,
    link: &Link,
    alpha_s: f64,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    if e_s == 0 || eta_s == 0.0 || features.is_empty() {
        return Ok(w_half.clone());
    }
    if batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let mut w = w_half.clone();
    for _ in 0..e_s {
        let idx = batch_indices(features.len(), batch.min(features.len()), rng);
        let refs: Vec<&FeatureBatch> = idx.iter().map(|&i| &features[i]).collect();
        let (_, grad) = feature_loss(&w, &refs, link, alpha_s, rng)?;
        w = w.apply_step(&grad, eta_s)?;
    }
    Ok(w)
}

/// Mean per-image PSNR (reconstructions clipped to `[0, 1]`) and mean image
/// MSE through the channel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub psnr_db: f64,
    pub mse: f64,
}

pub fn evaluate(params: &ModelParams, images: &[Tensor], link: &Link, rng: &mut impl Rng) -> Result<EvalSummary> {
    if images.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let (mut p, mut m) = (0.0, 0.0);
    for img in images {
        let y = params.encode(img)?;
        let rx = link.transmit(&params.codebook, &y, rng)?;
        let mut x_hat = params.decode(&rx.y_hat)?;
        x_hat.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let x = img.reshaped(x_hat.shape().to_vec())?;
        p += psnr(&x, &x_hat, 1.0)?;
        m += crate::losses::mse(&x, &x_hat)?;
    }
    let n = images.len() as f64;
    Ok(EvalSummary { psnr_db: p / n, mse: m / n })
}

/// Mutable state carried across rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    /// Rounds completed so far.
    pub t: usize,
    pub global: ModelParams,
    pub clients: Vec<ClientState>,
    /// Rates used by the most recent round.
    pub eta_c: f64,
    pub eta_s: f64,
    pub grad_norm_max: f64,
    pub eps_cumulative: f64,
    /// `(eval MSE before, after)` refinement, one entry per refined round.
    pub fr_trace: Vec<(f64, f64)>,
}

impl RoundState {
    pub fn mem_norm_sq_mean(&self) -> f64 {
        self.clients.iter().map(|c| c.memory.norm_sq()).sum::<f64>() / self.clients.len() as f64
    }
}

/// Immutable context of one experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub link: Link,
    pub eval: Vec<Tensor>,
    pub probe: Vec<Tensor>,
    probe_channel: NoisyVq,
    pub nu_hat: f64,
    initial: RoundState,
}

enum Upload {
    Model(CompressedUpdate),
    Features(Vec<FeatureBatch>),
}

struct ClientRound {
    id: usize,
    loss: f64,
    grad_norm_max: f64,
    upload: Upload,
    /// New memory for model uploaders.
    memory: Option<ErrorMemory>,
}

impl Experiment {
    /// Builds datasets, clients, the initial model and the fixed probe and
    /// evaluation sets.
    pub fn setup(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let shape = cfg.model.image_shape;
        let (train, eval) = match &cfg.data.raw_path {
            Some(path) => {
                let all = load_raw(path)?;
                if all.shape().is_some_and(|s| s != shape) {
                    return Err(Error::InvalidConfig(format!("raw images {:?} do not match the model {shape:?}", all.shape())));
                }
                if all.len() <= cfg.eval_count {
                    return Err(Error::InvalidConfig("raw file holds no training images after the evaluation split".into()));
                }
                let eval = all.images[..cfg.eval_count].to_vec();
                (Dataset { name: all.name.clone(), images: all.images[cfg.eval_count..].to_vec() }, eval)
            }
            None => (
                generate_synthetic(cfg.data.train_count, shape, cfg.data.kind, cfg.seed)?,
                generate_synthetic(cfg.eval_count, shape, cfg.data.kind, stream_key(cfg.seed, "eval-data", &[]))?.images,
            ),
        };
        let parts = partition_indices(train.len(), cfg.k, cfg.data.partition, cfg.seed)?;
        let dim = cfg.model.param_count();
        let clients = parts
            .iter()
            .enumerate()
            .map(|(id, idx)| {
                let data = train.subset(format!("client{id}"), idx);
                if data.is_empty() {
                    return Err(Error::InvalidConfig(format!("client {id} received no training images")));
                }
                let public = mark_public(data.len(), cfg.data.public_fraction, cfg.seed, id as u64)?;
                Ok(ClientState { id, p_k: data.len() as f64 / train.len() as f64, data, public, memory: ErrorMemory::zeros(dim) })
            })
            .collect::<Result<Vec<_>>>()?;
        let link = Link::for_model(&cfg.model, cfg.snr_db)?;
        let probe: Vec<Tensor> = train.images.iter().take(PROBE_SIZE).cloned().collect();
        let probe_channel = link.realization(probe.len() * cfg.model.n, &mut stream(cfg.seed, "probe", &[]));
        let spec = if cfg.dp.enabled {
            CompressorSpec::TopS { fraction: cfg.s_m_fraction }
        } else {
            CompressorSpec::TopSQsgd { fraction: cfg.s_m_fraction, bits: cfg.qsgd_bits }
        };
        let nu_hat = estimate_contraction(spec, &cfg.model.layer_map(), NU_TRIALS, &mut stream(cfg.seed, "nu", &[]))?;
        let initial = RoundState {
            t: 0,
            global: ModelParams::init(&cfg.model, cfg.seed)?,
            clients,
            eta_c: cfg.eta_c0,
            eta_s: cfg.eta_s0,
            grad_norm_max: 0.0,
            eps_cumulative: 0.0,
            fr_trace: Vec::new(),
        };
        Ok(Self { config: cfg, link, eval, probe, probe_channel, nu_hat, initial })
    }

    pub fn initial_state(&self) -> RoundState {
        self.initial.clone()
    }

    fn probe_grad_norm_sq(&self, w: &ModelParams) -> Result<f64> {
        if self.probe.is_empty() {
            return Ok(0.0);
        }
        let refs: Vec<&Tensor> = self.probe.iter().collect();
        let (_, g) = image_loss_graph(w, &refs, self.probe_channel.clone(), self.config.alpha_c)?.evaluate()?;
        Ok(g.iter().map(|x| x * x).sum())
    }

    fn eval_at(&self, w: &ModelParams, t: usize) -> Result<EvalSummary> {
        evaluate(w, &self.eval, &self.link, &mut stream(self.config.seed, "eval", &[t as u64]))
    }

    fn lemma3(&self, g_max: f64) -> Option<f64> {
        lemma3_bound(self.nu_hat, self.config.eta_c0, self.config.e_c, g_max).ok()
    }

    /// Per-round `(model upload, feature upload)` budgets when DP is on.
    pub fn epsilon_per_upload(&self) -> Option<(f64, f64)> {
        let c = &self.config;
        if !c.dp.enabled {
            return None;
        }
        let map = c.model.layer_map();
        let s: usize = map.spans().iter().map(|sp| kept_count(c.s_m_fraction, sp.len)).sum();
        let d = map.total_len() as f64;
        let e1 = epsilon_budget(UploadOption::ModelUpload, s as f64, c.dp.clip_q, d, c.dp.sigma1, c.dp.sigma2).ok()?;
        let e2 = epsilon_budget(UploadOption::FeatureUpload, s as f64, c.dp.clip_q, d, c.dp.sigma1, c.dp.sigma2).ok()?;
        Some((e1, e2))
    }

    /// Metrics line `t = state.t` without running a round.
    pub fn snapshot_metrics(&self, state: &RoundState) -> Result<RoundMetrics> {
        Ok(RoundMetrics {
            t: state.t,
            psnr_db: self.eval_at(&state.global, state.t)?.psnr_db,
            loss_mean: None,
            fr_improved: None,
            eps_ratio_assumption1: None,
            nu_hat: self.nu_hat,
            eps_cumulative: self.config.dp.enabled.then_some(state.eps_cumulative),
            eps_model_upload: None,
            eps_feature_upload: None,
            eta_c: None,
            eta_s: None,
            fr_mse_before: None,
            fr_mse_after: None,
            mem_norm_sq_mean: state.mem_norm_sq_mean(),
            grad_norm_max: state.grad_norm_max,
            lemma3_bound: self.lemma3(state.grad_norm_max),
            probe_grad_norm_sq: self.probe_grad_norm_sq(&state.global)?,
            client_losses: Vec::new(),
            a_m: Vec::new(),
            a_o: Vec::new(),
        })
    }

    fn client_round(&self, state: &RoundState, id: usize, features: bool, fraction: f64) -> Result<ClientRound> {
        let c = &self.config;
        let (seed, t) = (c.seed, state.t as u64);
        let client = &state.clients[id];
        let local = local_train(
            &client.data,
            &client.memory,
            &state.global,
            c.e_c,
            state.eta_c,
            c.batch_size,
            &self.link,
            c.alpha_c,
            &mut stream(seed, "local", &[id as u64, t]),
        )?;
        let mut up = stream(seed, "uplink", &[id as u64, t]);
        let map = c.model.layer_map();
        if features {
            let encoder = if c.dp.enabled {
                let theta_len = map.theta_len();
                let noisy = privatize_encoder(&local.g[..theta_len], &map.encoder_map(), c.s_m_fraction, &c.dp, &mut up)?;
                let mut flat = state.global.to_flat();
                flat[..theta_len].iter_mut().zip(noisy.to_dense()).for_each(|(w, g)| *w -= g);
                ModelParams::from_flat(&c.model, &flat)?
            } else {
                local.w_local.clone()
            };
            let feats = extract_features(&client.data, &client.public, &encoder, c.feature_count, c.feature_bits, &mut up)?;
            return Ok(ClientRound { id, loss: local.loss_mean, grad_norm_max: local.grad_norm_max, upload: Upload::Features(feats), memory: None });
        }
        let update = if c.dp.enabled {
            privatize_update(&local.g, &map, fraction, &c.dp, &mut up)?
        } else {
            compress(&local.g, &map, fraction, c.qsgd_bits, &mut up)?
        };
        let memory = update_error_memory(&local.g, &update.to_dense())?;
        Ok(ClientRound { id, loss: local.loss_mean, grad_norm_max: local.grad_norm_max, upload: Upload::Model(update), memory: Some(memory) })
    }

    /// Runs round `state.t` and returns its metrics line.
    pub fn run_round(&self, state: &mut RoundState) -> Result<RoundMetrics> {
        let c = &self.config;
        let t = state.t;
        let plan = sample_clients(c.k, c.k_m, c.k_o, &mut stream(c.seed, "sample", &[t as u64]))?;
        state.eta_c = step_decay(c.eta_c0, c.decay_factor, c.decay_interval, t);
        state.eta_s = step_decay(c.eta_s0, c.decay_factor, c.decay_interval, t);
        let fedsfr = c.mode == Mode::FedSfr;

        let mut jobs: Vec<(usize, bool, f64)> = plan.a_m.iter().map(|&id| (id, false, c.s_m_fraction)).collect();
        jobs.extend(plan.a_o.iter().map(|&id| (id, fedsfr, c.s_o_fraction)));
        let snapshot = &*state;
        let results = jobs
            .par_iter()
            .map(|&(id, features, fraction)| self.client_round(snapshot, id, features, fraction))
            .collect::<Result<Vec<_>>>()?;

        let mut model_ids = Vec::new();
        let mut updates = Vec::new();
        let mut losses = Vec::new();
        let mut feature_set = Vec::new();
        let mut feature_ids = Vec::new();
        for r in results {
            state.grad_norm_max = state.grad_norm_max.max(r.grad_norm_max);
            losses.push((r.id, r.loss));
            match r.upload {
                Upload::Model(u) => {
                    model_ids.push(r.id);
                    updates.push(u);
                    state.clients[r.id].memory = r.memory.expect("model uploads carry a memory");
                }
                Upload::Features(f) => {
                    feature_ids.push(r.id);
                    feature_set.extend(f);
                }
            }
        }

        let sizes: Vec<usize> = model_ids.iter().map(|&id| state.clients[id].data.len()).collect();
        let weights = match c.scheme {
            Scheme::FedAvg => model_ids.iter().map(|&id| state.clients[id].p_k).collect(),
            scheme => {
                let l: Vec<f64> = losses.iter().filter(|(id, _)| model_ids.contains(id)).map(|p| p.1).collect();
                let scale = model_ids.len() as f64 / c.k as f64;
                aggregation_weights(scheme, &sizes, &l)?.into_iter().map(|q| q * scale).collect::<Vec<_>>()
            }
        };
        let pairs: Vec<(f64, &CompressedUpdate)> = weights.iter().copied().zip(&updates).collect();
        let w_half = aggregate(&state.global, &pairs, c.k, model_ids.len())?;

        let refine = fedsfr && !feature_set.is_empty();
        let (w_next, fr) = if refine {
            let w_next = server_refine(
                &w_half,
                &feature_set,
                c.e_s,
                state.eta_s,
                c.batch_size,
                &self.link,
                c.alpha_s,
                &mut stream(c.seed, "server", &[t as u64]),
            )?;
            let before = evaluate(&w_half, &self.eval, &self.link, &mut stream(c.seed, "fr-eval", &[t as u64]))?.mse;
            let after = evaluate(&w_next, &self.eval, &self.link, &mut stream(c.seed, "fr-eval", &[t as u64]))?.mse;
            for &id in &feature_ids {
                state.clients[id].memory.reset();
            }
            (w_next, Some((before, after)))
        } else {
            (w_half.clone(), None)
        };

        let dim = c.model.param_count();
        let mut a = vec![0.0; dim];
        for (&id, &p) in model_ids.iter().zip(&weights) {
            a.iter_mut().zip(&state.clients[id].memory.m).for_each(|(x, m)| *x += p * m);
        }
        let b: Vec<f64> = w_half.to_flat().iter().zip(w_next.to_flat()).map(|(h, n)| h - n).collect();
        let ratio = assumption1_ratio(&a, &b).ok();

        let eps = self.epsilon_per_upload();
        if let Some((e1, e2)) = eps {
            let mut round_eps = 0.0;
            if !model_ids.is_empty() {
                round_eps += e1;
            }
            if !feature_ids.is_empty() {
                round_eps += e2;
            }
            state.eps_cumulative += round_eps;
        }
        if let Some(pair) = fr {
            state.fr_trace.push(pair);
        }
        state.global = w_next;
        state.t += 1;

        let eval = self.eval_at(&state.global, state.t)?;
        Ok(RoundMetrics {
            t: state.t,
            psnr_db: eval.psnr_db,
            loss_mean: Some(losses.iter().map(|p| p.1).sum::<f64>() / losses.len() as f64),
            fr_improved: fr.map(|(before, after)| after < before),
            eps_ratio_assumption1: ratio,
            nu_hat: self.nu_hat,
            eps_cumulative: eps.map(|_| state.eps_cumulative),
            eps_model_upload: eps.map(|e| e.0),
            eps_feature_upload: eps.map(|e| e.1),
            eta_c: Some(state.eta_c),
            eta_s: Some(state.eta_s),
            fr_mse_before: fr.map(|p| p.0),
            fr_mse_after: fr.map(|p| p.1),
            mem_norm_sq_mean: state.mem_norm_sq_mean(),
            grad_norm_max: state.grad_norm_max,
            lemma3_bound: self.lemma3(state.grad_norm_max),
            probe_grad_norm_sq: self.probe_grad_norm_sq(&state.global)?,
            client_losses: losses,
            a_m: plan.a_m,
            a_o: plan.a_o,
        })
    }
}

/// Full run output.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// `T + 1` lines, the first for the initial model.
    pub rounds: Vec<RoundMetrics>,
    pub final_state: RoundState,
    pub improvement_ratio: f64,
}

/// Runs `T` rounds. `threads` fixes the size of the worker pool used for
/// client training; results do not depend on it.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<Trace> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let exp = Experiment::setup(config)?;
        let mut state = exp.initial_state();
        let mut rounds = Vec::with_capacity(config.t + 1);
        rounds.push(exp.snapshot_metrics(&state)?);
        for _ in 0..config.t {
            rounds.push(exp.run_round(&mut state)?);
        }
        let improvement_ratio = improvement_ratio(&state.fr_trace);
        Ok(Trace { rounds, final_state: state, improvement_ratio })
    })
}
