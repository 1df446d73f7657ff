//! Desk-scale JSCC autoencoder.
//!
//! The encoder is a fully-connected stack `CHW -> hidden... -> N*d`; the
//! decoder mirrors it layer by layer. Each decoder layer carries its bias on
//! the input side (`W (h + b)`), so every decoder layer has exactly as many
//! parameters as the encoder layer it mirrors and `count(theta) ==
//! count(phi)` holds for any configuration. Hidden layers use leaky-ReLU,
//! the last layer on each side is linear.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Gradients, Graph, NodeId, Tensor};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Negative-side slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSFR";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(C, H, W)`.
    pub image_shape: [usize; 3],
    /// Number of feature vectors per image.
    #[serde(rename = "N")]
    pub n: usize,
    /// Feature vector dimension.
    pub d: usize,
    pub hidden_widths: Vec<usize>,
    /// Codebook size, equal to the modulation order.
    #[serde(rename = "M")]
    pub codebook_size: usize,
}

impl ModelConfig {
    /// 1x8x8 images, 16 features of dimension 2, 16 codewords, one hidden
    /// layer of width 32.
    pub fn desk() -> Self {
        Self { image_shape: [1, 8, 8], n: 16, d: 2, hidden_widths: vec![32], codebook_size: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_shape.contains(&0) {
            return Err(invalid(format!("image shape {:?} has a zero dimension", self.image_shape)));
        }
        if self.n == 0 || self.d == 0 {
            return Err(invalid("N and d must be positive"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(invalid("zero-width hidden layer"));
        }
        if self.codebook_size < 2 {
            return Err(invalid("codebook needs at least 2 codewords"));
        }
        Ok(())
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Encoder output width `N * d`.
    pub fn feature_width(&self) -> usize {
        self.n * self.d
    }

    /// `[CHW, hidden..., N*d]`.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.image_len());
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.feature_width());
        w
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn layer_map(&self) -> LayerMap {
        LayerMap::for_config(self)
    }

    pub fn param_count(&self) -> usize {
        self.layer_map().total_len()
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Placement of every tensor in the flat vector: encoder tensors first, then
/// decoder tensors, then the codebook.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMap {
    spans: Vec<LayerSpan>,
    theta_len: usize,
    phi_len: usize,
}

impl LayerMap {
    fn for_config(config: &ModelConfig) -> Self {
        let widths = config.encoder_widths();
        let layers = config.num_layers();
        let mut spans = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize, spans: &mut Vec<LayerSpan>| {
            spans.push(LayerSpan { name, offset, len });
            offset += len;
        };
        for i in 0..layers {
            push(format!("enc.{i}.weight"), widths[i + 1] * widths[i], &mut spans);
            push(format!("enc.{i}.bias"), widths[i + 1], &mut spans);
        }
        let theta_len: usize = spans.iter().map(|s| s.len).sum();
        for j in 0..layers {
            let (inp, out) = (widths[layers - j], widths[layers - j - 1]);
            push(format!("dec.{j}.weight"), out * inp, &mut spans);
            push(format!("dec.{j}.bias"), inp, &mut spans);
        }
        let phi_len = spans.iter().map(|s| s.len).sum::<usize>() - theta_len;
        push("codebook".to_string(), config.codebook_size * config.d, &mut spans);
        Self { spans, theta_len, phi_len }
    }

    /// A map with one span per `(name, len)` pair; used for vectors that are
    /// not model parameters.
    pub fn from_lengths(layers: &[(&str, usize)]) -> Self {
        let mut spans = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (name, len) in layers {
            spans.push(LayerSpan { name: name.to_string(), offset, len: *len });
            offset += len;
        }
        Self { spans, theta_len: offset, phi_len: 0 }
    }

    pub fn spans(&self) -> &[LayerSpan] {
        &self.spans
    }

    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.offset + s.len)
    }

    /// Length of the encoder prefix.
    pub fn theta_len(&self) -> usize {
        self.theta_len
    }

    pub fn phi_len(&self) -> usize {
        self.phi_len
    }

    /// Offset range of the codebook (the final `M*d` entries).
    pub fn codebook_range(&self) -> std::ops::Range<usize> {
        self.theta_len + self.phi_len..self.total_len()
    }

    /// Spans restricted to the encoder prefix.
    pub fn encoder_map(&self) -> LayerMap {
        let spans = self.spans.iter().filter(|s| s.name.starts_with("enc.")).cloned().collect();
        Self { spans, theta_len: self.theta_len, phi_len: 0 }
    }
}

/// Encoder output for one image, `N x d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch(Tensor);

impl FeatureBatch {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::new(vec![n, d], data)?))
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Shape { node: "features".into(), detail: format!("expected N x d, got {:?}", t.shape()) });
        }
        Ok(Self(t))
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.0.data()[i * d..(i + 1) * d]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Learnable state `{theta, phi, codebook}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    /// Encoder tensors, `weight, bias` per layer.
    pub theta: Vec<Tensor>,
    /// Decoder tensors, `weight, bias` per layer.
    pub phi: Vec<Tensor>,
    /// `M x d`.
    pub codebook: Tensor,
}

impl ModelParams {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases,
    /// codebook uniform in `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "model-init", &[]);
        let widths = config.encoder_widths();
        let layers = config.num_layers();
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
            Tensor::matrix(rows, cols, data)
        };
        let mut theta = Vec::with_capacity(2 * layers);
        for i in 0..layers {
            theta.push(uniform(widths[i + 1], widths[i]));
            theta.push(Tensor::zeros(vec![widths[i + 1]]));
        }
        let mut phi = Vec::with_capacity(2 * layers);
        for j in 0..layers {
            let (inp, out) = (widths[layers - j], widths[layers - j - 1]);
            phi.push(uniform(out, inp));
            phi.push(Tensor::zeros(vec![inp]));
        }
        let bound = 1.0 / (config.d as f64).sqrt();
        let codebook = (0..config.codebook_size * config.d).map(|_| rng.random_range(-bound..=bound)).collect();
        Ok(Self {
            config: config.clone(),
            theta,
            phi,
            codebook: Tensor::matrix(config.codebook_size, config.d, codebook),
        })
    }

    /// All-zero parameters.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Self::from_flat(config, &vec![0.0; config.param_count()])
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.theta.iter().chain(&self.phi).chain(std::iter::once(&self.codebook))
    }

    /// Flat vector in the fixed `(theta, phi, codebook)` order.
    pub fn flatten(&self) -> (Vec<f64>, LayerMap) {
        let map = self.config.layer_map();
        let mut flat = Vec::with_capacity(map.total_len());
        for t in self.tensors() {
            flat.extend_from_slice(t.data());
        }
        (flat, map)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.flatten().0
    }

    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let map = config.layer_map();
        if flat.len() != map.total_len() {
            return Err(invalid(format!("flat vector has {} entries, model needs {}", flat.len(), map.total_len())));
        }
        let widths = config.encoder_widths();
        let layers = config.num_layers();
        let spans = map.spans();
        let take = |k: usize, shape: Vec<usize>| Tensor::new(shape, flat[spans[k].range()].to_vec());
        let mut theta = Vec::with_capacity(2 * layers);
        for i in 0..layers {
            theta.push(take(2 * i, vec![widths[i + 1], widths[i]])?);
            theta.push(take(2 * i + 1, vec![widths[i + 1]])?);
        }
        let mut phi = Vec::with_capacity(2 * layers);
        for j in 0..layers {
            let (inp, out) = (widths[layers - j], widths[layers - j - 1]);
            phi.push(take(2 * layers + 2 * j, vec![out, inp])?);
            phi.push(take(2 * layers + 2 * j + 1, vec![inp])?);
        }
        let codebook = take(4 * layers, vec![config.codebook_size, config.d])?;
        Ok(Self { config: config.clone(), theta, phi, codebook })
    }

    /// `w - step * direction` over the flat layout.
    pub fn apply_step(&self, direction: &[f64], step: f64) -> Result<Self> {
        let mut flat = self.to_flat();
        if direction.len() != flat.len() {
            return Err(invalid("update length does not match the model"));
        }
        flat.iter_mut().zip(direction).for_each(|(w, g)| *w -= step * g);
        Self::from_flat(&self.config, &flat)
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let [c, h, w] = self.config.image_shape;
        let ok = image.shape() == [c, h, w] || (image.shape().len() == 1 && image.numel() == c * h * w);
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                node: "encode".into(),
                detail: format!("image shape {:?} does not match {:?}", image.shape(), self.config.image_shape),
            })
        }
    }

    /// `Y = f_theta(X)`.
    pub fn encode(&self, image: &Tensor) -> Result<FeatureBatch> {
        self.check_image(image)?;
        let mut h = image.data().to_vec();
        let layers = self.config.num_layers();
        for i in 0..layers {
            h = dense(&self.theta[2 * i], &h);
            add_in_place(&mut h, self.theta[2 * i + 1].data());
            if i + 1 < layers {
                leaky_in_place(&mut h);
            }
        }
        FeatureBatch::new(self.config.n, self.config.d, h)
    }

    /// `X_hat = f_phi^{-1}(Y_hat)`.
    pub fn decode(&self, features: &FeatureBatch) -> Result<Tensor> {
        if features.rows() * features.dim() != self.config.feature_width() || features.dim() != self.config.d {
            return Err(Error::Shape {
                node: "decode".into(),
                detail: format!("features {}x{} do not match N={} d={}", features.rows(), features.dim(), self.config.n, self.config.d),
            });
        }
        let mut h = features.data().to_vec();
        let layers = self.config.num_layers();
        for j in 0..layers {
            add_in_place(&mut h, self.phi[2 * j + 1].data());
            h = dense(&self.phi[2 * j], &h);
            if j + 1 < layers {
                leaky_in_place(&mut h);
            }
        }
        Tensor::new(self.config.image_shape.to_vec(), h)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// `"FSFR"`, version, `C H W N d M`, hidden count and widths (all u32 LE),
    /// then the flat parameters as f64 LE.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        let mut header = vec![CHECKPOINT_VERSION];
        for v in [c.image_shape[0], c.image_shape[1], c.image_shape[2], c.n, c.d, c.codebook_size, c.hidden_widths.len()]
            .into_iter()
            .chain(c.hidden_widths.iter().copied())
        {
            header.push(u32::try_from(v).map_err(|_| invalid("config field exceeds u32"))?);
        }
        for v in header {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_checkpoint(&bytes)
    }

    pub fn read_checkpoint(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        if cur.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut f = [0usize; 7];
        for v in &mut f {
            *v = cur.u32()? as usize;
        }
        let hidden_widths = (0..f[6]).map(|_| cur.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let config = ModelConfig { image_shape: [f[0], f[1], f[2]], n: f[3], d: f[4], hidden_widths, codebook_size: f[5] };
        config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let count = config.param_count();
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            flat.push(f64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")));
        }
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint parameters".into()));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter in checkpoint".into()));
        }
        Self::from_flat(&config, &flat)
    }
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn dense(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn add_in_place(h: &mut [f64], b: &[f64]) {
    h.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
}

fn leaky_in_place(h: &mut [f64]) {
    h.iter_mut().for_each(|v| {
        if *v <= 0.0 {
            *v *= LEAKY_SLOPE;
        }
    });
}

/// Graph nodes holding the model parameters.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub theta: Vec<NodeId>,
    pub phi: Vec<NodeId>,
    pub codebook: NodeId,
}

impl ParamNodes {
    /// Registers one trainable input per tensor, named as in the layer map.
    pub fn register(graph: &mut Graph, config: &ModelConfig) -> Self {
        let map = config.layer_map();
        let ids: Vec<NodeId> = map.spans().iter().map(|s| graph.param(&s.name)).collect();
        let layers = config.num_layers();
        Self { theta: ids[..2 * layers].to_vec(), phi: ids[2 * layers..4 * layers].to_vec(), codebook: ids[4 * layers] }
    }

    /// Encoder on a batch `x [B, CHW]`, returning `[B, N*d]`.
    pub fn encoder(&self, graph: &mut Graph, x: NodeId) -> NodeId {
        let layers = self.theta.len() / 2;
        let mut h = x;
        for i in 0..layers {
            h = graph.linear(h, self.theta[2 * i]);
            h = graph.bias_add(h, self.theta[2 * i + 1]);
            if i + 1 < layers {
                h = graph.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    /// Decoder on a batch `y [B, N*d]`, returning `[B, CHW]`.
    pub fn decoder(&self, graph: &mut Graph, y: NodeId) -> NodeId {
        let layers = self.phi.len() / 2;
        let mut h = y;
        for j in 0..layers {
            h = graph.bias_add(h, self.phi[2 * j + 1]);
            h = graph.linear(h, self.phi[2 * j]);
            if j + 1 < layers {
                h = graph.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.theta.iter().chain(&self.phi).copied().chain(std::iter::once(self.codebook))
    }

    /// Flat gradient in layer-map order.
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        self.ids().flat_map(|id| grads.get(id).expect("parameter gradient").data().to_vec()).collect()
    }
}

impl ModelParams {
    /// Adds one binding per tensor, named as in the layer map.
    pub fn bind(&self, bindings: &mut Bindings) {
        let map = self.config.layer_map();
        for (span, t) in map.spans().iter().zip(self.tensors()) {
            bindings.insert(span.name.clone(), t.clone());
        }
    }
}
