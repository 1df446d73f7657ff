//! Laplace-mechanism privacy for the two uplink options.
//!
//! Option (i) privatizes the full model update: clip to `||g||_1 <= Q`,
//! select the top-S entries per layer with Laplace-perturbed ranking
//! (oneshot, scale `sigma1`), then add Laplace noise of scale `sigma2` to the
//! kept values. Option (ii) applies the same mechanism to the encoder part
//! only, clipped to `Q / 2`, before features are extracted.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{kept_count, top_k_indices, CompressedUpdate, LayerValues};
use crate::error::{invalid, Result};
use crate::model::LayerMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    pub enabled: bool,
    /// Laplace scale of the oneshot selection.
    pub sigma1: f64,
    /// Laplace scale added to the kept values.
    pub sigma2: f64,
    /// 1-norm clipping bound `Q`.
    pub clip_q: f64,
}

impl DpConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, sigma1: 0.0, sigma2: 0.0, clip_q: f64::MAX }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_q.is_nan() || self.clip_q <= 0.0 {
            return Err(invalid("clip_q must be positive"));
        }
        if self.enabled && !(self.sigma1 > 0.0 && self.sigma2 > 0.0 && self.sigma1.is_finite() && self.sigma2.is_finite()) {
            return Err(invalid("DP scales must be positive and finite when enabled"));
        }
        if self.sigma1 < 0.0 || self.sigma2 < 0.0 {
            return Err(invalid("DP scales must be non-negative"));
        }
        Ok(())
    }

    fn scales(&self) -> (f64, f64) {
        if self.enabled {
            (self.sigma1, self.sigma2)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Which uplink a privacy budget refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UploadOption {
    /// Option (i): the model update is privatized.
    ModelUpload,
    /// Option (ii): the encoder update is privatized before feature extraction.
    FeatureUpload,
}

/// One `Laplace(0, scale)` draw by inverse CDF.
pub fn laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.sample::<f64, _>(Open01) - 0.5;
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// `len` i.i.d. `Laplace(0, scale)` draws; all zeros, with no draws, when
/// `scale == 0`.
pub fn laplace_noise(scale: f64, len: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(invalid(format!("Laplace scale {scale} must be finite and non-negative")));
    }
    if scale == 0.0 {
        return Ok(vec![0.0; len]);
    }
    Ok((0..len).map(|_| laplace(scale, rng)).collect())
}

/// Scales `g` down to `||g||_1 <= q` when needed.
pub fn clip_l1(g: &[f64], q: f64) -> Vec<f64> {
    let norm: f64 = g.iter().map(|x| x.abs()).sum();
    if norm <= q {
        return g.to_vec();
    }
    let f = q / norm;
    let mut out: Vec<f64> = g.iter().map(|x| x * f).collect();
    // Rounding can leave the product a hair above q.
    while out.iter().map(|x| x.abs()).sum::<f64>() > q {
        out.iter_mut().for_each(|x| *x *= 1.0 - f64::EPSILON);
    }
    out
}

/// Oneshot top-`s`: indices of the `s` largest `|v_i + L_i|`, `L_i ~
/// Laplace(sigma1)`, in increasing order.
pub fn oneshot_select(v: &[f64], s: usize, sigma1: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if s >= v.len() {
        return Ok((0..v.len()).collect());
    }
    let noise = laplace_noise(sigma1, v.len(), rng)?;
    let noisy: Vec<f64> = v.iter().zip(noise).map(|(a, n)| a + n).collect();
    Ok(top_k_indices(&noisy, s))
}

fn privatize(g: &[f64], map: &LayerMap, fraction: f64, clip: f64, dp: &DpConfig, rng: &mut impl Rng) -> Result<CompressedUpdate> {
    dp.validate()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("sparsification fraction {fraction} outside (0, 1]")));
    }
    if g.len() != map.total_len() {
        return Err(invalid("update length does not match the layout"));
    }
    let (sigma1, sigma2) = dp.scales();
    let clipped = clip_l1(g, clip);
    let mut masks = Vec::with_capacity(map.spans().len());
    let mut values = Vec::with_capacity(map.spans().len());
    for span in map.spans() {
        let layer = &clipped[span.range()];
        let mask = oneshot_select(layer, kept_count(fraction, span.len), sigma1, rng)?;
        let noise = laplace_noise(sigma2, mask.len(), rng)?;
        values.push(LayerValues::Raw(mask.iter().zip(noise).map(|(&i, n)| layer[i] + n).collect()));
        masks.push(mask);
    }
    CompressedUpdate::from_parts(map, masks, values)
}

/// Option (i) on a full flat update.
pub fn privatize_update(g: &[f64], map: &LayerMap, fraction: f64, dp: &DpConfig, rng: &mut impl Rng) -> Result<CompressedUpdate> {
    privatize(g, map, fraction, dp.clip_q, dp, rng)
}

/// Option (ii) on the encoder prefix `g_theta`, laid out by `encoder_map`.
pub fn privatize_encoder(
    g_theta: &[f64],
    encoder_map: &LayerMap,
    fraction: f64,
    dp: &DpConfig,
    rng: &mut impl Rng,
) -> Result<CompressedUpdate> {
    privatize(g_theta, encoder_map, fraction, dp.clip_q / 2.0, dp, rng)
}

/// Per-round `epsilon` of one upload option for `s` kept entries out of `d`.
///
/// Model upload: `4SQ/(D sigma1) + 2SQ/(D sigma2)`. Feature upload: half of
/// that, from the halved sensitivities of the encoder-only mechanism.
pub fn epsilon_budget(option: UploadOption, s: f64, q: f64, d: f64, sigma1: f64, sigma2: f64) -> Result<f64> {
    if !(s > 0.0 && q > 0.0 && d > 0.0 && sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(invalid("epsilon budget needs positive S, Q, D, sigma1, sigma2"));
    }
    let c = match option {
        UploadOption::ModelUpload => 2.0,
        UploadOption::FeatureUpload => 1.0,
    };
    let select_sensitivity = c * q;
    let value_sensitivity = c * (s * q / d);
    Ok(2.0 * s * select_sensitivity / (d * sigma1) + value_sensitivity / sigma2)
}

/// Basic composition: the sum of the per-mechanism budgets.
pub fn compose(budgets: &[f64]) -> f64 {
    budgets.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn laplace_moments() {
        let mut r = stream(0, "lap", &[]);
        let scale = 0.7;
        let n = 100_000;
        let x = laplace_noise(scale, n, &mut r).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let true_var = 2.0 * scale * scale;
        assert!(mean.abs() <= 3.0 * (true_var / n as f64).sqrt());
        // Var of the sample variance for Laplace: (mu4 - sigma^4) / n, mu4 = 24 b^4.
        let se_var = ((24.0 * scale.powi(4) - true_var * true_var) / n as f64).sqrt();
        assert!((var - true_var).abs() <= 3.0 * se_var, "{var} vs {true_var}");
        assert_eq!(laplace_noise(0.0, 3, &mut r).unwrap(), vec![0.0; 3]);
        assert_eq!(laplace_noise(1.0, 5, &mut stream(1, "l", &[])).unwrap(), laplace_noise(1.0, 5, &mut stream(1, "l", &[])).unwrap());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_l1(&[1.0, 1.0], 3.0), vec![1.0, 1.0]);
        assert_eq!(clip_l1(&[2.0, 2.0], 2.0), vec![1.0, 1.0]);
        assert_eq!(clip_l1(&[2.0, -2.0], 2.0), vec![1.0, -1.0]);
    }

    #[test]
    fn oneshot_examples() {
        let v = [0.1, 5.0, -3.0, 0.2];
        let mut r = stream(2, "os", &[]);
        assert_eq!(oneshot_select(&v, 2, 0.0, &mut r).unwrap(), top_k_indices(&v, 2));
        assert_eq!(oneshot_select(&v, 4, 100.0, &mut r).unwrap(), vec![0, 1, 2, 3]);
        let dim = 20;
        let mut w = vec![0.0; dim];
        w[7] = 2.0;
        let trials = 5000;
        let hits = (0..trials).filter(|_| oneshot_select(&w, 1, 1.0, &mut r).unwrap() == vec![7]).count();
        assert!(hits as f64 / trials as f64 > 1.0 / dim as f64 + 0.05);
    }

    #[test]
    fn privatize_disabled_is_plain_top_s() {
        let map = LayerMap::from_lengths(&[("a", 5), ("b", 5)]);
        let g: Vec<f64> = (0..10).map(|i| (i as f64 - 4.5) * 0.3).collect();
        let dp = DpConfig { enabled: false, sigma1: 1.0, sigma2: 1.0, clip_q: 2.0 };
        let u = privatize_update(&g, &map, 0.4, &dp, &mut stream(3, "p", &[])).unwrap();
        let clipped = clip_l1(&g, 2.0);
        let spec = crate::compression::CompressorSpec::TopS { fraction: 0.4 };
        assert_eq!(u.to_dense(), spec.apply(&clipped, &map, &mut stream(0, "x", &[])).unwrap());
        assert_eq!(u.total_kept(), 4);
    }

    #[test]
    fn privatize_noise_variance() {
        let map = LayerMap::from_lengths(&[("a", 4)]);
        let g = [0.0, 0.0, 0.0, 0.0];
        let dp = DpConfig { enabled: true, sigma1: 1e-9, sigma2: 0.5, clip_q: 1.0 };
        let mut r = stream(4, "pn", &[]);
        let n = 40_000;
        let mut acc = Vec::with_capacity(n * 2);
        for _ in 0..n {
            acc.extend(privatize_update(&g, &map, 0.5, &dp, &mut r).unwrap().layers[0].dequantized());
        }
        let m = acc.len() as f64;
        let var = acc.iter().map(|x| x * x).sum::<f64>() / m;
        let se = ((24.0 * 0.5f64.powi(4) - 0.25) / m).sqrt();
        assert!((var - 0.5).abs() <= 3.0 * se, "{var}");
    }

    #[test]
    fn epsilon_examples() {
        let e1 = epsilon_budget(UploadOption::ModelUpload, 2.0, 1.0, 10.0, 1.0, 1.0).unwrap();
        let e2 = epsilon_budget(UploadOption::FeatureUpload, 2.0, 1.0, 10.0, 1.0, 1.0).unwrap();
        // 4*2*1/10 + 2*2*1/10 and half of it.
        assert!((e1 - 1.2).abs() < 1e-12);
        assert!((e2 - 0.6).abs() < 1e-12);
        assert!(epsilon_budget(UploadOption::ModelUpload, 0.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert_eq!(compose(&[e1; 5]), 5.0 * e1);
    }

    proptest! {
        #[test]
        fn clip_bounds_norm(g in prop::collection::vec(-1e3f64..1e3, 0..50), q in 1e-3f64..1e3) {
            let c = clip_l1(&g, q);
            prop_assert!(c.iter().map(|x| x.abs()).sum::<f64>() <= q);
        }

        #[test]
        fn feature_upload_is_half(s in 1e-3f64..1e4, q in 1e-3f64..1e3, d in 1.0f64..1e6, s1 in 1e-3f64..1e2, s2 in 1e-3f64..1e2) {
            let e1 = epsilon_budget(UploadOption::ModelUpload, s, q, d, s1, s2).unwrap();
            let e2 = epsilon_budget(UploadOption::FeatureUpload, s, q, d, s1, s2).unwrap();
            prop_assert_eq!(e2, e1 / 2.0);
        }
    }
}
