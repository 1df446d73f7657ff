//! Digital transmission of feature vectors: VQ against the codebook,
//! square-QAM modulation, AWGN, minimum-distance detection and codeword
//! dequantization.
//!
//! Indices are zero-based throughout. Every minimum-distance decision breaks
//! exact ties toward the lower index.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{IndexSource, Lookup, Tensor};
use crate::error::{invalid, Error, Result};
use crate::model::FeatureBatch;

/// In-phase / quadrature pair.
pub type Symbol = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    points: Vec<Symbol>,
    power: f64,
}

fn gray_decode(mut g: usize) -> usize {
    let mut b = g;
    while g > 0 {
        g >>= 1;
        b ^= g;
    }
    b
}

impl Constellation {
    /// Square Gray-mapped QAM with unit average power. `m` must be an even
    /// power of two (4, 16, 64, ...). Index `i` splits into a row label
    /// (high bits) and a column label (low bits); each label is the Gray code
    /// of the grid position along its axis.
    pub fn square_qam(m: usize) -> Result<Self> {
        Self::square_qam_with_power(m, 1.0)
    }

    pub fn square_qam_with_power(m: usize, power: f64) -> Result<Self> {
        if !(power > 0.0 && power.is_finite()) {
            return Err(invalid("constellation power must be positive"));
        }
        let bits = m.trailing_zeros() as usize;
        if m < 4 || !m.is_power_of_two() || !bits.is_multiple_of(2) {
            return Err(invalid(format!("square QAM needs M = 4^k, got {m}")));
        }
        let k = bits / 2;
        let side = 1usize << k;
        let level = |pos: usize| (2 * pos) as f64 - (side - 1) as f64;
        let raw: Vec<Symbol> = (0..m)
            .map(|i| {
                let row = gray_decode(i >> k);
                let col = gray_decode(i & (side - 1));
                [level(col), level(row)]
            })
            .collect();
        let energy = raw.iter().map(|s| s[0] * s[0] + s[1] * s[1]).sum::<f64>() / m as f64;
        let norm = (power / energy).sqrt();
        let points = raw.into_iter().map(|s| [s[0] * norm, s[1] * norm]).collect();
        Ok(Self { points, power })
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Symbol] {
        &self.points
    }

    /// Nominal average power `P`.
    pub fn power(&self) -> f64 {
        self.power
    }

    /// Empirical mean of `|s|^2` over the points.
    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|s| s[0] * s[0] + s[1] * s[1]).sum::<f64>() / self.order() as f64
    }
}

/// AWGN channel parameters; `SNR = P / sigma^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub snr_db: f64,
}

impl ChannelConfig {
    pub fn new(snr_db: f64) -> Self {
        Self { snr_db }
    }

    /// Noise-free channel.
    pub fn noiseless() -> Self {
        Self { snr_db: f64::INFINITY }
    }

    /// Total complex noise variance per symbol for signal power `power`.
    pub fn noise_variance(&self, power: f64) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            power / 10f64.powf(self.snr_db / 10.0)
        }
    }
}

/// Index of the nearest row of `rows` (each of length `d`) and whether the
/// minimum was shared with an earlier row.
fn nearest(rows: &[f64], d: usize, y: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    let mut tie = false;
    for (j, c) in rows.chunks(d).enumerate() {
        let dist: f64 = y.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best = j;
            best_dist = dist;
            tie = false;
        } else if dist == best_dist {
            tie = true;
        }
    }
    (best, tie)
}

fn check_codebook(codebook: &Tensor, d: usize) -> Result<()> {
    if codebook.shape().len() != 2 || codebook.shape()[1] != d || codebook.shape()[0] == 0 {
        return Err(Error::Shape {
            node: "codebook".into(),
            detail: format!("codebook {:?} does not have {d} columns", codebook.shape()),
        });
    }
    Ok(())
}

fn quantize_rows(codebook: &Tensor, d: usize, data: &[f64]) -> (Vec<usize>, bool) {
    let mut any_tie = false;
    let z = data
        .chunks(d)
        .map(|y| {
            let (j, tie) = nearest(codebook.data(), d, y);
            any_tie |= tie;
            j
        })
        .collect();
    (z, any_tie)
}

/// `z_i = argmin_j |y_i - c_j|^2`.
pub fn vq_quantize(codebook: &Tensor, y: &FeatureBatch) -> Result<Vec<usize>> {
    check_codebook(codebook, y.dim())?;
    Ok(quantize_rows(codebook, y.dim(), y.data()).0)
}

/// `s_i = points[z_i]`.
pub fn modulate(constellation: &Constellation, z: &[usize]) -> Result<Vec<Symbol>> {
    z.iter()
        .map(|&i| {
            constellation.points.get(i).copied().ok_or(Error::IndexOutOfRange {
                what: "constellation",
                index: i,
                len: constellation.order(),
            })
        })
        .collect()
}

/// Circular complex Gaussian noise with total variance `sigma2` per symbol.
pub fn draw_noise(count: usize, sigma2: f64, rng: &mut impl Rng) -> Vec<Symbol> {
    let std = (sigma2 / 2.0).sqrt();
    (0..count)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            [std * re, std * im]
        })
        .collect()
}

/// Adds AWGN at the configured SNR relative to the constellation power.
pub fn awgn(symbols: &[Symbol], constellation: &Constellation, config: &ChannelConfig, rng: &mut impl Rng) -> Vec<Symbol> {
    let sigma2 = config.noise_variance(constellation.power());
    if sigma2 == 0.0 {
        return symbols.to_vec();
    }
    let noise = draw_noise(symbols.len(), sigma2, rng);
    symbols.iter().zip(noise).map(|(s, n)| [s[0] + n[0], s[1] + n[1]]).collect()
}

fn detect_with_ties(constellation: &Constellation, noisy: &[Symbol]) -> (Vec<usize>, bool) {
    let flat: Vec<f64> = constellation.points.iter().flat_map(|s| [s[0], s[1]]).collect();
    let mut any_tie = false;
    let z = noisy
        .iter()
        .map(|s| {
            let (j, tie) = nearest(&flat, 2, s);
            any_tie |= tie;
            j
        })
        .collect();
    (z, any_tie)
}

/// Minimum-distance detection.
pub fn detect(constellation: &Constellation, noisy: &[Symbol]) -> Vec<usize> {
    detect_with_ties(constellation, noisy).0
}

/// Output of one end-to-end transmission.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    /// Received features: codebook rows at the detected indices.
    pub y_hat: FeatureBatch,
    pub z_hat: Vec<usize>,
    pub z: Vec<usize>,
}

/// `Y -> z -> s -> s + n -> z_hat -> Y_hat`.
pub fn transmit(
    codebook: &Tensor,
    constellation: &Constellation,
    y: &FeatureBatch,
    config: &ChannelConfig,
    rng: &mut impl Rng,
) -> Result<Transmission> {
    check_modulation(codebook, constellation)?;
    let z = vq_quantize(codebook, y)?;
    let s = modulate(constellation, &z)?;
    let received = awgn(&s, constellation, config, rng);
    let z_hat = detect(constellation, &received);
    let d = y.dim();
    let data = z_hat.iter().flat_map(|&k| codebook.data()[k * d..(k + 1) * d].iter().copied()).collect();
    Ok(Transmission { y_hat: FeatureBatch::new(y.rows(), d, data)?, z_hat, z })
}

fn check_modulation(codebook: &Tensor, constellation: &Constellation) -> Result<()> {
    if codebook.shape().first() != Some(&constellation.order()) {
        return Err(invalid(format!(
            "codebook has {:?} rows but the constellation has {} points",
            codebook.shape().first(),
            constellation.order()
        )));
    }
    Ok(())
}

/// Constellation plus channel settings for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub constellation: Constellation,
    pub config: ChannelConfig,
}

impl Link {
    /// Square QAM of the model's codebook size at the given SNR.
    pub fn for_model(model: &crate::model::ModelConfig, snr_db: f64) -> Result<Self> {
        Ok(Self { constellation: Constellation::square_qam(model.codebook_size)?, config: ChannelConfig::new(snr_db) })
    }

    /// Fresh noise realization for `rows` symbols.
    pub fn realization(&self, rows: usize, rng: &mut impl Rng) -> NoisyVq {
        NoisyVq::draw(&self.constellation, &self.config, rows, rng)
    }

    pub fn transmit(&self, codebook: &Tensor, y: &FeatureBatch, rng: &mut impl Rng) -> Result<Transmission> {
        transmit(codebook, &self.constellation, y, &self.config, rng)
    }
}

/// A channel use with its noise drawn up front, so the same realization can
/// be replayed any number of times (common random numbers). Used as the
/// lookup source of the loss graphs.
#[derive(Clone, Debug)]
pub struct NoisyVq {
    constellation: Constellation,
    noise: Vec<Symbol>,
}

impl NoisyVq {
    pub fn draw(constellation: &Constellation, config: &ChannelConfig, rows: usize, rng: &mut impl Rng) -> Self {
        let sigma2 = config.noise_variance(constellation.power());
        let noise = if sigma2 == 0.0 { vec![[0.0, 0.0]; rows] } else { draw_noise(rows, sigma2, rng) };
        Self { constellation: constellation.clone(), noise }
    }

    pub fn noise(&self) -> &[Symbol] {
        &self.noise
    }

    /// Quantize, modulate, add the stored noise and detect.
    pub fn indices(&self, codebook: &Tensor, features: &[f64]) -> Result<(Vec<usize>, Vec<usize>, bool)> {
        check_modulation(codebook, &self.constellation)?;
        let d = codebook.shape()[1];
        check_codebook(codebook, d)?;
        if features.len() != self.noise.len() * d {
            return Err(Error::Shape {
                node: "noisy_vq".into(),
                detail: format!("{} feature values for {} stored noise samples", features.len(), self.noise.len()),
            });
        }
        let (z, tie_q) = quantize_rows(codebook, d, features);
        let s = modulate(&self.constellation, &z)?;
        let received: Vec<Symbol> = s.iter().zip(&self.noise).map(|(s, n)| [s[0] + n[0], s[1] + n[1]]).collect();
        let (z_hat, tie_d) = detect_with_ties(&self.constellation, &received);
        Ok((z, z_hat, tie_q || tie_d))
    }
}

impl IndexSource for NoisyVq {
    fn lookup(&self, codebook: &Tensor, features: &Tensor) -> Result<Lookup> {
        let (_, z_hat, tie) = self.indices(codebook, features.data())?;
        Ok(Lookup { indices: z_hat, tie })
    }
}
