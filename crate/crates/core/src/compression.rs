//! Uplink compression and error feedback.
//!
//! Per-layer top-S sparsification followed by per-layer QSGD on the kept
//! values, the error-memory recursion `m' = g - g_bar`, uniform scalar
//! quantization of feature vectors, and Monte-Carlo contraction estimates.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::model::{FeatureBatch, LayerMap};

/// Largest QSGD / scalar quantizer bit width. Levels stay exact in `f64`.
pub const MAX_BITS: u32 = 52;

/// Number of kept entries for a layer of `len` entries at `fraction`.
///
/// `ceil(fraction * len)`, where products within `1e-9` of an integer are
/// treated as that integer so that e.g. `0.1 * 30` keeps 3.
pub fn kept_count(fraction: f64, len: usize) -> usize {
    let x = fraction * len as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 { r } else { x.ceil() };
    (k as usize).min(len)
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("sparsification fraction {fraction} outside (0, 1]")))
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (1..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(invalid(format!("bit width {bits} outside 1..={MAX_BITS}")))
    }
}

/// Indices of the `k` largest `|v_i|`, ties to the lower index, returned in
/// increasing order.
pub fn top_k_indices(v: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(v.len());
    if k == v.len() {
        return (0..v.len()).collect();
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    let cmp = |&a: &usize, &b: &usize| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b));
    if k > 0 {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Per-layer top-S mask. Returns, for every layer of `map`, the kept
/// positions relative to the layer start.
pub fn top_s_sparsify(v: &[f64], map: &LayerMap, fraction: f64) -> Result<Vec<Vec<usize>>> {
    check_fraction(fraction)?;
    check_len(v, map)?;
    Ok(map.spans().iter().map(|s| top_k_indices(&v[s.range()], kept_count(fraction, s.len))).collect())
}

fn check_len(v: &[f64], map: &LayerMap) -> Result<()> {
    if v.len() != map.total_len() {
        return Err(invalid(format!("vector of length {} for a layout of length {}", v.len(), map.total_len())));
    }
    Ok(())
}

/// Stochastic QSGD quantization with `2^bits - 1` levels and 2-norm scale.
///
/// Returns signed levels and the scale `||v||_2`. One uniform draw is made
/// per coordinate.
pub fn qsgd_quantize(v: &[f64], bits: u32, rng: &mut impl Rng) -> Result<(Vec<i64>, f64)> {
    check_bits(bits)?;
    let scale = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((vec![0; v.len()], 0.0));
    }
    let s = qsgd_levels(bits);
    let levels = v
        .iter()
        .map(|&x| {
            let r = (x.abs() / scale * s).min(s);
            let floor = r.floor();
            let u: f64 = rng.random();
            let l = if u < r - floor { floor + 1.0 } else { floor } as i64;
            if x < 0.0 {
                -l
            } else {
                l
            }
        })
        .collect();
    Ok((levels, scale))
}

fn qsgd_levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

pub fn qsgd_dequantize(levels: &[i64], scale: f64, bits: u32) -> Vec<f64> {
    let s = qsgd_levels(bits);
    levels.iter().map(|&l| l as f64 / s * scale).collect()
}

/// Values carried for the kept entries of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerValues {
    /// QSGD levels; value `= level / (2^bits - 1) * scale`.
    Quantized { bits: u32, scale: f64, levels: Vec<i64> },
    /// Unquantized values, as sent in DP mode.
    Raw(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerUpdate {
    pub name: String,
    /// Offset of the layer in the flat layout.
    pub offset: usize,
    pub len: usize,
    /// Kept positions relative to `offset`, strictly increasing.
    pub indices: Vec<usize>,
    pub values: LayerValues,
}

impl LayerUpdate {
    pub fn dequantized(&self) -> Vec<f64> {
        match &self.values {
            LayerValues::Quantized { bits, scale, levels } => qsgd_dequantize(levels, *scale, *bits),
            LayerValues::Raw(v) => v.clone(),
        }
    }
}

/// A sparse, quantized model update `g_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedUpdate {
    pub layers: Vec<LayerUpdate>,
    pub dim: usize,
}

impl CompressedUpdate {
    /// Builds an update from per-layer masks and values.
    pub fn from_parts(map: &LayerMap, masks: Vec<Vec<usize>>, values: Vec<LayerValues>) -> Result<Self> {
        if masks.len() != map.spans().len() || values.len() != masks.len() {
            return Err(invalid("one mask and one value set per layer required"));
        }
        let layers = map
            .spans()
            .iter()
            .zip(masks)
            .zip(values)
            .map(|((s, indices), values)| LayerUpdate { name: s.name.clone(), offset: s.offset, len: s.len, indices, values })
            .collect();
        let update = Self { layers, dim: map.total_len() };
        update.validate()?;
        Ok(update)
    }

    fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let n = match &l.values {
                LayerValues::Quantized { levels, .. } => levels.len(),
                LayerValues::Raw(v) => v.len(),
            };
            if n != l.indices.len() {
                return Err(Error::Format(format!("layer {}: {} values for {} indices", l.name, n, l.indices.len())));
            }
            if l.indices.windows(2).any(|w| w[0] >= w[1]) || l.indices.last().is_some_and(|&i| i >= l.len) {
                return Err(Error::Format(format!("layer {}: indices not strictly increasing within the layer", l.name)));
            }
        }
        Ok(())
    }

    pub fn total_kept(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    /// Dense `g_bar`, zero off the mask.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for l in &self.layers {
            for (&i, v) in l.indices.iter().zip(l.dequantized()) {
                out[l.offset + i] = v;
            }
        }
        out
    }

    /// Wire form, per layer: `u16` name length, name bytes, `u32` count,
    /// `u32` indices, `f64` scale, `i8` levels, all little endian.
    ///
    /// Only quantized updates whose levels fit in `i8` are encodable.
    pub fn encode_wire(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for l in &self.layers {
            let LayerValues::Quantized { scale, levels, .. } = &l.values else {
                return Err(invalid(format!("layer {} carries raw values, which have no wire form", l.name)));
            };
            let name = l.name.as_bytes();
            let name_len = u16::try_from(name.len()).map_err(|_| invalid("layer name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            let count = u32::try_from(l.indices.len()).map_err(|_| invalid("too many kept entries"))?;
            out.extend_from_slice(&count.to_le_bytes());
            for &i in &l.indices {
                let i = u32::try_from(i).map_err(|_| invalid("index exceeds u32"))?;
                out.extend_from_slice(&i.to_le_bytes());
            }
            out.extend_from_slice(&scale.to_le_bytes());
            for &lv in levels {
                let b = i8::try_from(lv).map_err(|_| invalid(format!("level {lv} does not fit in i8")))?;
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Inverse of [`encode_wire`](Self::encode_wire) for the layout `map`.
    pub fn decode_wire(bytes: &[u8], map: &LayerMap, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let mut cur = crate::model::ByteCursor::new(bytes);
        let mut layers = Vec::with_capacity(map.spans().len());
        for span in map.spans() {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?).map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
            if name != span.name {
                return Err(Error::Format(format!("expected layer {}, found {name}", span.name)));
            }
            let count = cur.u32()? as usize;
            if count > span.len {
                return Err(Error::Format(format!("layer {name}: {count} entries exceed length {}", span.len)));
            }
            let indices = (0..count).map(|_| cur.u32().map(|i| i as usize)).collect::<Result<Vec<_>>>()?;
            let scale = f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            if !scale.is_finite() || scale < 0.0 {
                return Err(Error::Format(format!("layer {name}: bad scale {scale}")));
            }
            let levels = cur.take(count)?.iter().map(|&b| i64::from(b as i8)).collect();
            layers.push(LayerUpdate {
                name: name.to_owned(),
                offset: span.offset,
                len: span.len,
                indices,
                values: LayerValues::Quantized { bits, scale, levels },
            });
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after the last layer".into()));
        }
        let update = Self { layers, dim: map.total_len() };
        update.validate()?;
        Ok(update)
    }
}

/// `Compress(g)`: per-layer top-S, then per-layer QSGD on the kept values.
pub fn compress(g: &[f64], map: &LayerMap, fraction: f64, bits: u32, rng: &mut impl Rng) -> Result<CompressedUpdate> {
    check_bits(bits)?;
    let masks = top_s_sparsify(g, map, fraction)?;
    let mut values = Vec::with_capacity(masks.len());
    for (span, mask) in map.spans().iter().zip(&masks) {
        let kept: Vec<f64> = mask.iter().map(|&i| g[span.offset + i]).collect();
        let (levels, scale) = qsgd_quantize(&kept, bits, rng)?;
        values.push(LayerValues::Quantized { bits, scale, levels });
    }
    CompressedUpdate::from_parts(map, masks, values)
}

/// Per-client error memory `m_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMemory {
    pub m: Vec<f64>,
}

impl ErrorMemory {
    pub fn zeros(dim: usize) -> Self {
        Self { m: vec![0.0; dim] }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn norm_sq(&self) -> f64 {
        self.m.iter().map(|x| x * x).sum()
    }
}

/// `m' = g - g_bar`.
pub fn update_error_memory(g: &[f64], g_bar: &[f64]) -> Result<ErrorMemory> {
    if g.len() != g_bar.len() {
        return Err(invalid("update and compressed update differ in length"));
    }
    Ok(ErrorMemory { m: g.iter().zip(g_bar).map(|(a, b)| a - b).collect() })
}

/// Uniformly quantized feature batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarQuantized {
    pub levels: Vec<u64>,
    pub min: f64,
    pub max: f64,
    pub bits: u32,
    rows: usize,
    dim: usize,
    /// Kept for the degenerate range, where the input is returned as is.
    passthrough: Option<Vec<f64>>,
}

impl ScalarQuantized {
    pub fn step(&self) -> f64 {
        (self.max - self.min) / qsgd_levels(self.bits)
    }

    pub fn dequantize(&self) -> Result<FeatureBatch> {
        if let Some(raw) = &self.passthrough {
            return FeatureBatch::new(self.rows, self.dim, raw.clone());
        }
        let s = qsgd_levels(self.bits);
        let range = self.max - self.min;
        let data = self.levels.iter().map(|&q| self.min + q as f64 / s * range).collect();
        FeatureBatch::new(self.rows, self.dim, data)
    }
}

/// Uniform scalar quantizer over the batch range, rounding half up.
pub fn uniform_scalar_quantize(y: &FeatureBatch, bits: u32) -> Result<ScalarQuantized> {
    check_bits(bits)?;
    let data = y.data();
    let min = data.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (rows, dim) = (y.rows(), y.dim());
    if data.is_empty() || max == min {
        return Ok(ScalarQuantized { levels: vec![0; data.len()], min, max, bits, rows, dim, passthrough: Some(data.to_vec()) });
    }
    let s = qsgd_levels(bits);
    let levels = data.iter().map(|&v| ((v - min) / (max - min) * s + 0.5).floor().clamp(0.0, s) as u64).collect();
    Ok(ScalarQuantized { levels, min, max, bits, rows, dim, passthrough: None })
}

/// A compressor whose contraction constant can be estimated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CompressorSpec {
    Identity,
    TopS { fraction: f64 },
    Qsgd { bits: u32 },
    TopSQsgd { fraction: f64, bits: u32 },
}

impl CompressorSpec {
    /// Dense reconstruction `g_bar` of `x`.
    pub fn apply(&self, x: &[f64], map: &LayerMap, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match *self {
            Self::Identity => Ok(x.to_vec()),
            Self::TopS { fraction } => {
                let masks = top_s_sparsify(x, map, fraction)?;
                let mut out = vec![0.0; x.len()];
                for (span, mask) in map.spans().iter().zip(masks) {
                    for i in mask {
                        out[span.offset + i] = x[span.offset + i];
                    }
                }
                Ok(out)
            }
            Self::Qsgd { bits } => Ok(compress(x, map, 1.0, bits, rng)?.to_dense()),
            Self::TopSQsgd { fraction, bits } => Ok(compress(x, map, fraction, bits, rng)?.to_dense()),
        }
    }
}

/// `nu_hat = 1 - mean ||x - C(x)||^2 / ||x||^2` over standard Gaussian `x`.
///
/// QSGD alone is not a contraction at low bit widths on long layers, in
/// which case the estimate is negative.
pub fn estimate_contraction(spec: CompressorSpec, map: &LayerMap, trials: usize, rng: &mut impl Rng) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("contraction estimate needs at least one trial"));
    }
    let normal = rand_distr::StandardNormal;
    let mut acc = 0.0;
    for _ in 0..trials {
        let x: Vec<f64> = (0..map.total_len()).map(|_| rng.sample::<f64, _>(normal)).collect();
        let y = spec.apply(&x, map, rng)?;
        let err: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm: f64 = x.iter().map(|a| a * a).sum();
        acc += err / norm;
    }
    Ok(1.0 - acc / trials as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn one_layer(n: usize) -> LayerMap {
        LayerMap::from_lengths(&[("w", n)])
    }

    #[test]
    fn top_s_examples() {
        let m = one_layer(3);
        assert_eq!(top_s_sparsify(&[3.0, -1.0, 2.0], &m, 1.0 / 3.0).unwrap(), vec![vec![0]]);
        assert_eq!(top_s_sparsify(&[3.0, -1.0, 2.0], &m, 1.0).unwrap(), vec![vec![0, 1, 2]]);
        assert_eq!(top_s_sparsify(&[2.0, -2.0], &one_layer(2), 0.5).unwrap(), vec![vec![0]]);
        assert!(top_s_sparsify(&[1.0], &one_layer(1), 0.0).is_err());
        assert!(top_s_sparsify(&[1.0], &one_layer(1), 1.5).is_err());
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_count(0.1, 30), 3);
        assert_eq!(kept_count(0.2, 2048), 410);
        assert_eq!(kept_count(1e-6, 10), 1);
        assert_eq!(kept_count(1.0, 7), 7);
    }

    #[test]
    fn qsgd_on_grid_is_exact() {
        let (l, s) = qsgd_quantize(&[1.0, 0.0], 4, &mut stream(0, "q", &[])).unwrap();
        assert_eq!(l, vec![15, 0]);
        assert_eq!(qsgd_dequantize(&l, s, 4), vec![1.0, 0.0]);
        let (l, s) = qsgd_quantize(&[0.0, 0.0], 4, &mut stream(0, "q", &[])).unwrap();
        assert_eq!((l, s), (vec![0, 0], 0.0));
    }

    #[test]
    fn qsgd_unbiased_scalar_and_vector() {
        let mut r = stream(1, "q", &[]);
        let v = [0.5, -0.3, 0.1, 0.8];
        let trials = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..trials {
            let (l, s) = qsgd_quantize(&v, 4, &mut r).unwrap();
            for (i, x) in qsgd_dequantize(&l, s, 4).into_iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
        }
        for i in 0..4 {
            let mean = sum[i] / trials as f64;
            let var = sq[i] / trials as f64 - mean * mean;
            let se = (var / trials as f64).sqrt().max(1e-12);
            assert!((mean - v[i]).abs() <= 3.0 * se, "coord {i}: {mean} vs {}", v[i]);
        }
    }

    #[test]
    fn near_lossless_compress() {
        let m = LayerMap::from_lengths(&[("a", 5), ("b", 3)]);
        let g = [0.3, -1.2, 4.0, 1e-3, 0.0, 2.5, -0.7, 0.9];
        let c = compress(&g, &m, 1.0, 52, &mut stream(2, "c", &[])).unwrap();
        for (a, b) in g.iter().zip(c.to_dense()) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300) + 1e-15);
        }
        let z = compress(&[0.0; 8], &m, 0.5, 4, &mut stream(2, "c", &[])).unwrap();
        assert!(z.to_dense().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn error_memory_examples() {
        let m = update_error_memory(&[3.0, -1.0, 2.0], &[3.0, 0.0, 0.0]).unwrap();
        assert_eq!(m.m, vec![0.0, -1.0, 2.0]);
        assert_eq!(update_error_memory(&[1.5, 2.0], &[1.5, 2.0]).unwrap().m, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_quantizer_examples() {
        let y = FeatureBatch::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let q = uniform_scalar_quantize(&y, 4).unwrap();
        assert_eq!(q.levels, vec![0, 8, 15]);
        let back = q.dequantize().unwrap();
        assert!((back.data()[1] - 8.0 / 15.0).abs() < 1e-15);
        let c = FeatureBatch::new(2, 1, vec![0.7, 0.7]).unwrap();
        assert_eq!(uniform_scalar_quantize(&c, 4).unwrap().dequantize().unwrap(), c);
    }

    #[test]
    fn wire_roundtrip_and_errors() {
        let m = LayerMap::from_lengths(&[("enc.0.weight", 6), ("codebook", 4)]);
        let g = [0.1, -0.9, 0.3, 0.0, 0.5, -0.2, 1.0, 2.0, -3.0, 0.4];
        let c = compress(&g, &m, 0.5, 4, &mut stream(3, "w", &[])).unwrap();
        let bytes = c.encode_wire().unwrap();
        assert_eq!(CompressedUpdate::decode_wire(&bytes, &m, 4).unwrap(), c);
        assert!(CompressedUpdate::decode_wire(&bytes[..bytes.len() - 1], &m, 4).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CompressedUpdate::decode_wire(&extra, &m, 4).is_err());
        let wide = compress(&g, &m, 0.5, 8, &mut stream(3, "w", &[])).unwrap();
        assert!(wide.encode_wire().is_err());
    }

    #[test]
    fn contraction_estimates() {
        let m = LayerMap::from_lengths(&[("a", 40), ("b", 24)]);
        let mut r = stream(4, "nu", &[]);
        assert_eq!(estimate_contraction(CompressorSpec::Identity, &m, 10, &mut r).unwrap(), 1.0);
        let nu = estimate_contraction(CompressorSpec::TopS { fraction: 0.2 }, &m, 2000, &mut r).unwrap();
        assert!((0.2..=1.0).contains(&nu), "{nu}");
        let tiny = estimate_contraction(CompressorSpec::TopS { fraction: 1e-3 }, &m, 500, &mut r).unwrap();
        assert!(tiny > 0.0 && tiny < nu);
        let both = estimate_contraction(CompressorSpec::TopSQsgd { fraction: 0.2, bits: 4 }, &m, 2000, &mut r).unwrap();
        assert!(both > 0.0 && both < nu, "{both}");
    }

    proptest! {
        #[test]
        fn top_s_counts_and_order(v in prop::collection::vec(-10.0f64..10.0, 1..60), frac in 0.01f64..=1.0, split in 0usize..60) {
            let split = split.min(v.len());
            let m = LayerMap::from_lengths(&[("a", split), ("b", v.len() - split)]);
            let masks = top_s_sparsify(&v, &m, frac).unwrap();
            for (span, mask) in m.spans().iter().zip(&masks) {
                prop_assert_eq!(mask.len(), kept_count(frac, span.len));
                prop_assert!(mask.windows(2).all(|w| w[0] < w[1]));
                if let Some(&min_kept) = mask.iter().map(|&i| &v[span.offset + i]).map(|x| x.abs()).collect::<Vec<_>>().iter().min_by(|a, b| a.total_cmp(b)) {
                    for i in 0..span.len {
                        if !mask.contains(&i) {
                            prop_assert!(v[span.offset + i].abs() <= min_kept);
                        }
                    }
                }
            }
        }

        #[test]
        fn memory_recursion_is_exact(g in prop::collection::vec(-5.0f64..5.0, 1..40), seed in 0u64..1000) {
            let m = one_layer(g.len());
            let c = compress(&g, &m, 0.3, 4, &mut stream(seed, "m", &[])).unwrap();
            let gb = c.to_dense();
            let mem = update_error_memory(&g, &gb).unwrap();
            for i in 0..g.len() {
                prop_assert_eq!(mem.m[i].to_bits(), (g[i] - gb[i]).to_bits());
            }
        }

        #[test]
        fn scalar_quantizer_error_bound(v in prop::collection::vec(-3.0f64..3.0, 1..40), bits in 1u32..10) {
            let y = FeatureBatch::new(v.len(), 1, v.clone()).unwrap();
            let q = uniform_scalar_quantize(&y, bits).unwrap();
            let back = q.dequantize().unwrap();
            for (a, b) in v.iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= q.step() / 2.0 + 1e-12);
            }
        }
    }
}
