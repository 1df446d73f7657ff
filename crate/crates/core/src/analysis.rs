//! Numeric diagnostics for the convergence and surrogate arguments.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::{invalid, Result};
use crate::model::ModelParams;

/// `||a - b||^2 / (||a||^2 + ||b||^2)`, always in `[0, 2]`.
pub fn assumption1_ratio(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("vectors differ in length"));
    }
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let denom: f64 = a.iter().chain(b).map(|x| x * x).sum();
    if denom == 0.0 {
        return Err(invalid("memory-to-displacement ratio undefined when both vectors are zero"));
    }
    Ok((diff / denom).clamp(0.0, 2.0))
}

/// `4 (1 - nu) / nu^2 * eta0^2 * E_c^2 * G^2`.
pub fn lemma3_bound(nu: f64, eta0: f64, e_c: usize, g_hat: f64) -> Result<f64> {
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(invalid(format!("contraction constant {nu} outside (0, 1]")));
    }
    let e = e_c as f64;
    Ok(4.0 * (1.0 - nu) / (nu * nu) * eta0 * eta0 * e * e * g_hat * g_hat)
}

/// Result of [`fr_surrogate_diag`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateDiag {
    /// `sum ||dY||^2 / sum ||dX||^2`, `None` when every perturbation is zero.
    pub ratio: Option<f64>,
    /// Pearson correlation of the pairs, `None` when either side is constant.
    pub correlation: Option<f64>,
    pub mean_dx: f64,
    pub mean_dy: f64,
}

/// Pairs of image and feature errors under small image perturbations.
///
/// Each trial takes a reference image `X = f_phi^-1(f_theta(img))`, perturbs
/// it as `X_hat = X + s u delta` with `delta` standard Gaussian and `u`
/// uniform in `[0.5, 1.5]`, and records `(||X - X_hat||^2, ||f_theta(X) -
/// f_theta(X_hat)||^2)`.
pub fn fr_surrogate_diag(params: &ModelParams, images: &[Tensor], scale: f64, trials: usize, rng: &mut impl Rng) -> Result<SurrogateDiag> {
    if images.is_empty() || trials == 0 {
        return Err(invalid("surrogate diagnostic needs images and trials"));
    }
    let refs = images
        .iter()
        .map(|img| {
            let x = params.decode(&params.encode(img)?)?;
            let y = params.encode(&x)?;
            Ok((x, y))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairs = Vec::with_capacity(trials);
    for t in 0..trials {
        let (x, y) = &refs[t % refs.len()];
        let u: f64 = rng.random_range(0.5..1.5);
        let delta: Vec<f64> = x.data().iter().map(|_| scale * u * rng.sample::<f64, _>(StandardNormal)).collect();
        let x_hat = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&delta).map(|(a, d)| a + d).collect())?;
        let y_hat = params.encode(&x_hat)?;
        let dx: f64 = delta.iter().map(|d| d * d).sum();
        let dy: f64 = y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        pairs.push((dx, dy));
    }
    let n = pairs.len() as f64;
    let sx: f64 = pairs.iter().map(|p| p.0).sum();
    let sy: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(SurrogateDiag {
        ratio: (sx > 0.0).then(|| sy / sx),
        correlation: pearson(&pairs),
        mean_dx: sx / n,
        mean_dy: sy / n,
    })
}

/// Pearson correlation, `None` for fewer than two pairs or a constant side.
pub fn pearson(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.len() < 2 {
        return None;
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Fraction of rounds where the loss after refinement is strictly lower
/// than before. Zero for an empty trace.
pub fn improvement_ratio(trace: &[(f64, f64)]) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    trace.iter().filter(|(before, after)| after < before).count() as f64 / trace.len() as f64
}

/// Mean of the last `n` values (all of them if fewer).
pub fn tail_mean(xs: &[f64], n: usize) -> Option<f64> {
    let tail = &xs[xs.len().saturating_sub(n)..];
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Sample standard deviation of the last `n` values.
pub fn tail_std(xs: &[f64], n: usize) -> Option<f64> {
    let tail = &xs[xs.len().saturating_sub(n)..];
    if tail.len() < 2 {
        return None;
    }
    let m = tail.iter().sum::<f64>() / tail.len() as f64;
    Some((tail.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (tail.len() - 1) as f64).sqrt())
}
