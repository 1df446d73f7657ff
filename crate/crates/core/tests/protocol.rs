//! Round protocol, server refinement and training-trend checks on the desk
//! configuration.

use fedsfr::analysis::tail_mean;
use fedsfr::channel::Link;
use fedsfr::compression::{compress, ErrorMemory};
use fedsfr::config::{ExperimentConfig, Mode, Scheme};
use fedsfr::data::{generate_synthetic, Dataset, SyntheticKind};
use fedsfr::federation::{aggregation_weights, extract_features, local_train, run_experiment, sample_clients, server_refine, step_decay, theorem1_rates, Experiment};
use fedsfr::losses::{feature_loss_graph, image_loss_graph};
use fedsfr::model::{FeatureBatch, ModelConfig, ModelParams};
use fedsfr::privacy::DpConfig;
use fedsfr::rng::stream;
use proptest::prelude::*;

fn desk(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.seed = seed;
    c
}

fn held_out_loss(params: &ModelParams, batch: &[FeatureBatch], link: &Link, seed: u64) -> f64 {
    let refs: Vec<&FeatureBatch> = batch.iter().collect();
    let rows = batch.len() * params.config().n;
    let mut rng = stream(seed, "held-out-noise", &[]);
    let first = link.realization(rows, &mut rng);
    let second = link.realization(rows, &mut rng);
    let g = feature_loss_graph(params, &refs, first, second, 1.0).unwrap();
    g.evaluate().unwrap().0.total
}

#[test]
fn server_refinement_lowers_held_out_feature_loss() {
    let mut wins = 0;
    for seed in 0..10 {
        let cfg = desk(seed);
        let exp = Experiment::setup(&cfg).unwrap();
        let state = exp.initial_state();
        let w = &state.global;
        let client = &state.clients[0];
        let train = extract_features(&client.data, &client.public, w, cfg.feature_count, cfg.feature_bits, &mut stream(seed, "fx", &[])).unwrap();
        let held: Vec<FeatureBatch> = exp.eval.iter().take(16).map(|img| w.encode(img).unwrap()).collect();
        let before = held_out_loss(w, &held, &exp.link, seed);
        let refined = server_refine(w, &train, cfg.e_s, 1e-4, cfg.batch_size, &exp.link, cfg.alpha_s, &mut stream(seed, "refine", &[])).unwrap();
        let after = held_out_loss(&refined, &held, &exp.link, seed);
        wins += usize::from(after < before);
    }
    assert!(wins >= 8, "refinement lowered the held-out loss in {wins}/10 seeds");
}

#[test]
fn probe_gradient_norm_trends_down() {
    let mut wins = 0;
    for seed in 0..10 {
        let trace = run_experiment(&desk(seed), None).unwrap();
        let g: Vec<f64> = trace.rounds.iter().map(|r| r.probe_grad_norm_sq).collect();
        let half = g.len() / 2;
        let early = g[..=half].iter().sum::<f64>() / (half + 1) as f64;
        let late = tail_mean(&g[half..], usize::MAX).unwrap();
        wins += usize::from(late <= early);
    }
    assert!(wins >= 8, "probe gradient trend held in {wins}/10 seeds");
}

#[test]
fn baseline_round_is_plain_aggregation_over_all_participants() {
    let mut cfg = desk(2);
    cfg.mode = Mode::Baseline;
    let exp = Experiment::setup(&cfg).unwrap();
    let mut state = exp.initial_state();
    let before = state.clone();
    exp.run_round(&mut state).unwrap();

    let plan = sample_clients(cfg.k, cfg.k_m, cfg.k_o, &mut stream(cfg.seed, "sample", &[0])).unwrap();
    let map = cfg.model.layer_map();
    let eta = step_decay(cfg.eta_c0, cfg.decay_factor, cfg.decay_interval, 0);
    let mut direction = vec![0.0; map.total_len()];
    let jobs = plan.a_m.iter().map(|&id| (id, cfg.s_m_fraction)).chain(plan.a_o.iter().map(|&id| (id, cfg.s_o_fraction)));
    let mut expected_memory = Vec::new();
    for (id, fraction) in jobs {
        let c = &before.clients[id];
        let local = local_train(&c.data, &c.memory, &before.global, cfg.e_c, eta, cfg.batch_size, &exp.link, cfg.alpha_c, &mut stream(cfg.seed, "local", &[id as u64, 0])).unwrap();
        let g_bar = compress(&local.g, &map, fraction, cfg.qsgd_bits, &mut stream(cfg.seed, "uplink", &[id as u64, 0])).unwrap().to_dense();
        direction.iter_mut().zip(&g_bar).for_each(|(d, g)| *d += c.p_k * g);
        expected_memory.push((id, local.g.iter().zip(&g_bar).map(|(a, b)| a - b).collect::<Vec<f64>>()));
    }
    // Every participant uploads a model, so the round scales by K / (K_m + K_o).
    let scale = cfg.k as f64 / (cfg.k_m + cfg.k_o) as f64;
    let expected: Vec<f64> = before.global.to_flat().iter().zip(&direction).map(|(w, d)| w - scale * d).collect();
    assert_eq!(state.global.to_flat(), expected);
    for (id, m) in expected_memory {
        assert_eq!(state.clients[id].memory.m, m, "client {id}");
    }
}

#[test]
fn fedsfr_round_memories_follow_protocol() {
    let cfg = desk(6);
    let exp = Experiment::setup(&cfg).unwrap();
    let mut state = exp.initial_state();
    for t in 0..4 {
        let prior = state.clone();
        let m = exp.run_round(&mut state).unwrap();
        let map = cfg.model.layer_map();
        for &id in &m.a_m {
            let c = &prior.clients[id];
            let local = local_train(&c.data, &c.memory, &prior.global, cfg.e_c, state.eta_c, cfg.batch_size, &exp.link, cfg.alpha_c, &mut stream(cfg.seed, "local", &[id as u64, t])).unwrap();
            let g_bar = compress(&local.g, &map, cfg.s_m_fraction, cfg.qsgd_bits, &mut stream(cfg.seed, "uplink", &[id as u64, t])).unwrap().to_dense();
            let expected: Vec<f64> = local.g.iter().zip(&g_bar).map(|(a, b)| a - b).collect();
            assert_eq!(state.clients[id].memory.m, expected);
        }
        for &id in &m.a_o {
            assert!(state.clients[id].memory.m.iter().all(|&x| x == 0.0));
        }
        let idle: Vec<usize> = (0..cfg.k).filter(|id| !m.a_m.contains(id) && !m.a_o.contains(id)).collect();
        for id in idle {
            assert_eq!(state.clients[id].memory, prior.clients[id].memory);
        }
    }
}

#[test]
fn single_local_step_is_plain_sgd() {
    let cfg = desk(1);
    let exp = Experiment::setup(&cfg).unwrap();
    let state = exp.initial_state();
    let c = &state.clients[3];
    let zero = ErrorMemory::zeros(cfg.model.param_count());
    let out = local_train(&c.data, &zero, &state.global, 1, 0.3, cfg.batch_size, &exp.link, cfg.alpha_c, &mut stream(0, "one-step", &[])).unwrap();
    // With zero memory, g = eta * grad, which is exactly the step taken.
    let expected: Vec<f64> = state.global.to_flat().iter().zip(&out.g).map(|(w, g)| w - g).collect();
    assert_eq!(out.w_local.to_flat(), expected);
}

#[test]
fn feature_extraction_near_lossless_and_complete() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::init(&cfg, 3).unwrap();
    let data = generate_synthetic(12, cfg.image_shape, SyntheticKind::Checker, 3).unwrap();
    let public = vec![1, 4, 5, 9];
    let feats = extract_features(&data, &public, &params, 100, 52, &mut stream(3, "fx", &[])).unwrap();
    assert_eq!(feats.len(), public.len());
    let raw: Vec<FeatureBatch> = public.iter().map(|&i| params.encode(&data.images[i]).unwrap()).collect();
    for f in &feats {
        let best = raw
            .iter()
            .map(|r| r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs() / a.abs().max(1e-12)).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-9, "{best}");
    }
    let again = extract_features(&data, &public, &params, 100, 52, &mut stream(3, "fx", &[])).unwrap();
    assert_eq!(feats, again);
}

#[test]
fn features_depend_only_on_encoder_and_public_images() {
    let cfg = ModelConfig::desk();
    let params = ModelParams::init(&cfg, 5).unwrap();
    let a = generate_synthetic(10, cfg.image_shape, SyntheticKind::Gaussians, 1).unwrap();
    let other = generate_synthetic(10, cfg.image_shape, SyntheticKind::Gradients, 2).unwrap();
    let public = [0, 2, 7];
    let mut images = other.images.clone();
    for &i in &public {
        images[i] = a.images[i].clone();
    }
    let b = Dataset { name: "adjacent".into(), images };
    let fa = extract_features(&a, &public, &params, 3, 4, &mut stream(0, "fx", &[])).unwrap();
    let fb = extract_features(&b, &public, &params, 3, 4, &mut stream(0, "fx", &[])).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn epsilon_composes_linearly_over_rounds() {
    let mut cfg = desk(9);
    cfg.t = 6;
    cfg.dp = DpConfig { enabled: true, sigma1: 0.01, sigma2: 1e-3, clip_q: 1.0 };
    let exp = Experiment::setup(&cfg).unwrap();
    let (e1, e2) = exp.epsilon_per_upload().unwrap();
    assert_eq!(e2, e1 / 2.0);
    let trace = run_experiment(&cfg, Some(2)).unwrap();
    let per_round = e1 + e2;
    for r in &trace.rounds[1..] {
        assert_eq!(r.eps_model_upload, Some(e1));
        assert_eq!(r.eps_feature_upload, Some(e2));
        let total = r.eps_cumulative.unwrap();
        assert!((total - r.t as f64 * per_round).abs() <= 1e-12 * total, "round {}: {total}", r.t);
    }
    assert_eq!(trace.rounds[0].eps_cumulative, Some(0.0));
}

#[test]
fn term3_never_reaches_the_codebook() {
    let cfg = ModelConfig::desk();
    let cb = cfg.layer_map().codebook_range();
    let link = Link::for_model(&cfg, 5.0).unwrap();
    for seed in 0..5 {
        let params = ModelParams::init(&cfg, seed).unwrap();
        let img = generate_synthetic(1, cfg.image_shape, SyntheticKind::Gaussians, seed).unwrap().images.remove(0);
        let y = params.encode(&img).unwrap();
        let mut rng = stream(seed, "t3", &[]);
        let image = image_loss_graph(&params, &[&img], link.realization(cfg.n, &mut rng), 1.0).unwrap();
        let feature = feature_loss_graph(&params, &[&y], link.realization(cfg.n, &mut rng), link.realization(cfg.n, &mut rng), 1.0).unwrap();
        for g in [image.term_gradient(2).unwrap(), feature.term_gradient(2).unwrap()] {
            assert!(g[cb.clone()].iter().all(|&v| v == 0.0));
            assert!(g.iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn weighted_schemes_run_end_to_end() {
    for scheme in [Scheme::FedDma, Scheme::FedLol] {
        let mut cfg = desk(0);
        cfg.t = 3;
        cfg.scheme = scheme;
        let trace = run_experiment(&cfg, None).unwrap();
        assert!(trace.rounds.iter().all(|r| r.psnr_db.is_finite()));
    }
}

proptest! {
    #[test]
    fn theorem1_rates_keep_server_below_client(alpha in 1e-6f64..10.0, t in 2usize..100_000) {
        let (eta_c, eta_s) = theorem1_rates(alpha, t);
        prop_assert!(eta_s < eta_c);
    }

    #[test]
    fn weights_are_a_distribution(
        sizes in prop::collection::vec(1usize..500, 1..12),
        losses in prop::collection::vec(1e-3f64..10.0, 12),
    ) {
        let l = &losses[..sizes.len()];
        for scheme in [Scheme::FedAvg, Scheme::FedDma, Scheme::FedLol] {
            let w = aggregation_weights(scheme, &sizes, l).unwrap();
            prop_assert_eq!(w.len(), sizes.len());
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
