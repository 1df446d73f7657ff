//! Monte-Carlo checks of the channel against closed forms.

use fedsfr::autodiff::Tensor;
use fedsfr::channel::{awgn, detect, modulate, transmit, ChannelConfig, Constellation};
use fedsfr::model::FeatureBatch;
use fedsfr::rng::stream;
use rand::Rng;
use statrs::function::erf::erfc;

const TRIALS: usize = 100_000;

fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Exact symbol error rate of square M-QAM with minimum-distance detection,
/// uniform symbols, unit average energy.
fn square_qam_ser(m: usize, snr_db: f64) -> f64 {
    let l = (m as f64).sqrt();
    let half_spacing = (3.0 / (2.0 * (m as f64 - 1.0))).sqrt();
    let sigma2 = 10f64.powf(-snr_db / 10.0);
    let q = q_function(half_spacing / (sigma2 / 2.0).sqrt());
    let edge = 1.0 - q;
    let inner = 1.0 - 2.0 * q;
    let per_dim = (2.0 * edge + (l - 2.0) * inner) / l;
    1.0 - per_dim * per_dim
}

fn monte_carlo_ser(m: usize, snr_db: f64, seed: u64) -> f64 {
    let c = Constellation::square_qam(m).unwrap();
    let cfg = ChannelConfig::new(snr_db);
    let mut rng = stream(seed, "ser", &[]);
    let z: Vec<usize> = (0..TRIALS).map(|_| rng.random_range(0..m)).collect();
    let s = modulate(&c, &z).unwrap();
    let z_hat = detect(&c, &awgn(&s, &c, &cfg, &mut rng));
    z.iter().zip(&z_hat).filter(|(a, b)| a != b).count() as f64 / TRIALS as f64
}

fn within_3se(observed: f64, p: f64) -> bool {
    (observed - p).abs() <= 3.0 * (p * (1.0 - p) / TRIALS as f64).sqrt()
}

#[test]
fn symbol_error_rate_matches_closed_form() {
    for (m, snr) in [(16, -30.0), (16, 10.0), (16, 15.0), (4, 5.0), (64, 20.0)] {
        let exact = square_qam_ser(m, snr);
        let observed = monte_carlo_ser(m, snr, m as u64);
        assert!(within_3se(observed, exact), "M={m} snr={snr}: {observed} vs {exact}");
    }
}

#[test]
fn very_low_snr_is_near_uniform() {
    let exact = square_qam_ser(16, -30.0);
    assert!((exact - 15.0 / 16.0).abs() < 0.01, "{exact}");
    let observed = monte_carlo_ser(16, -30.0, 3);
    assert!((observed - 15.0 / 16.0).abs() < 0.01, "{observed}");
}

#[test]
fn noise_component_variance() {
    let c = Constellation::square_qam(16).unwrap();
    let cfg = ChannelConfig::new(7.0);
    let sigma2 = cfg.noise_variance(1.0);
    let s = modulate(&c, &vec![0; TRIALS]).unwrap();
    let r = awgn(&s, &c, &cfg, &mut stream(1, "awgn", &[]));
    for dim in 0..2 {
        let e: Vec<f64> = r.iter().zip(&s).map(|(a, b)| a[dim] - b[dim]).collect();
        let mean = e.iter().sum::<f64>() / TRIALS as f64;
        let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (TRIALS - 1) as f64;
        // Var of the sample variance of a Gaussian is 2 v^2 / (n - 1).
        let target = sigma2 / 2.0;
        let se = target * (2.0 / (TRIALS - 1) as f64).sqrt();
        assert!((var - target).abs() <= 3.0 * se, "dim {dim}: {var} vs {target}");
        assert!(mean.abs() <= 3.0 * (target / TRIALS as f64).sqrt());
    }
}

#[test]
fn transmit_error_rate_matches_detection() {
    // One codeword per constellation point, features sitting on the
    // codewords, so z is uniform and every index change is a symbol error.
    let m = 16;
    let c = Constellation::square_qam(m).unwrap();
    let codebook = Tensor::matrix(m, 2, (0..m).flat_map(|k| [k as f64, 0.0]).collect());
    let rows = 20_000;
    let mut rng = stream(5, "transmit", &[]);
    let data: Vec<f64> = (0..rows).flat_map(|_| [rng.random_range(0..m) as f64, 0.0]).collect();
    let y = FeatureBatch::new(rows, 2, data).unwrap();
    let snr = 12.0;
    let tx = transmit(&codebook, &c, &y, &ChannelConfig::new(snr), &mut rng).unwrap();
    let rate = tx.z.iter().zip(&tx.z_hat).filter(|(a, b)| a != b).count() as f64 / rows as f64;
    let p = square_qam_ser(m, snr);
    assert!((rate - p).abs() <= 3.0 * (p * (1.0 - p) / rows as f64).sqrt(), "{rate} vs {p}");
    for (i, &k) in tx.z_hat.iter().enumerate() {
        assert_eq!(tx.y_hat.row(i), codebook.data()[2 * k..2 * k + 2].to_vec().as_slice());
    }
}
