//! Training objectives.
//!
//! Image reconstruction (client side), with `Y = f_theta(X)` and `Y_hat` the
//! received codewords:
//!
//! ```text
//! MSE(f_phi^-1(ST(Y, Y_hat)), X) + alpha MSE(Y_hat, sg(Y)) + beta MSE(Y, sg(Y_hat))
//! ```
//!
//! Feature reconstruction (server side), starting from received features
//! `Y1`, with `Y_hat1` and `Y_hat2` from two independent noise draws:
//!
//! ```text
//! Y2 = f_theta(f_phi^-1(ST(Y1, sg(Y_hat1))))
//! MSE(Y2, Y1) + alpha MSE(Y_hat2, sg(Y2)) + beta MSE(Y2, sg(Y_hat2))
//! ```
//!
//! In both, `beta = 0.25 * alpha`. The codebook is reached only through the
//! second term.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Bindings, Evaluation, Graph, NodeId, Tensor};
use crate::channel::{Link, NoisyVq};
use crate::error::{invalid, Error, Result};
use crate::model::{FeatureBatch, ModelParams, ParamNodes};

/// Commitment weight relative to the codebook weight.
pub const BETA_RATIO: f64 = 0.25;

/// PSNR reported for a perfect reconstruction.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub term1: f64,
    pub term2: f64,
    pub term3: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// A built loss graph together with its bindings.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub params: ParamNodes,
    pub total: NodeId,
    pub terms: [NodeId; 3],
    /// Codebook lookup nodes in data-flow order.
    pub lookups: Vec<NodeId>,
    pub alpha: f64,
    pub beta: f64,
}

impl LossGraph {
    pub fn breakdown(&self, eval: &Evaluation) -> LossBreakdown {
        LossBreakdown {
            total: eval.scalar(self.total),
            term1: eval.scalar(self.terms[0]),
            term2: eval.scalar(self.terms[1]),
            term3: eval.scalar(self.terms[2]),
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    /// Loss value and flat gradient over the model layout.
    pub fn evaluate(&self) -> Result<(LossBreakdown, Vec<f64>)> {
        let eval = self.graph.forward(&self.bindings)?;
        let grads = self.graph.backward(&eval, self.total)?;
        Ok((self.breakdown(&eval), self.params.flat_gradient(&grads)))
    }

    /// Gradient of one term alone (`index` in `0..3`), ignoring the weights.
    pub fn term_gradient(&self, index: usize) -> Result<Vec<f64>> {
        let eval = self.graph.forward(&self.bindings)?;
        let grads = self.graph.backward(&eval, self.terms[index])?;
        Ok(self.params.flat_gradient(&grads))
    }
}

fn weighted_total(graph: &mut Graph, terms: [NodeId; 3], alpha: f64, beta: f64) -> NodeId {
    let t2 = graph.scale(terms[1], alpha);
    let t3 = graph.scale(terms[2], beta);
    let partial = graph.add(terms[0], t2);
    graph.add(partial, t3)
}

fn stack_images(params: &ModelParams, images: &[&Tensor]) -> Result<Tensor> {
    let width = params.config().image_len();
    if images.is_empty() {
        return Err(invalid("empty image batch"));
    }
    let mut data = Vec::with_capacity(images.len() * width);
    for img in images {
        if img.shape() != params.config().image_shape {
            return Err(Error::Shape {
                node: "image_loss".into(),
                detail: format!("image {:?} does not match {:?}", img.shape(), params.config().image_shape),
            });
        }
        data.extend_from_slice(img.data());
    }
    Ok(Tensor::matrix(images.len(), width, data))
}

/// Builds the image-reconstruction loss for a batch, with `channel` replayed
/// for all `B * N` symbols.
pub fn image_loss_graph(params: &ModelParams, images: &[&Tensor], channel: NoisyVq, alpha_c: f64) -> Result<LossGraph> {
    let x_batch = stack_images(params, images)?;
    let rows = images.len() * params.config().n;
    if channel.noise().len() != rows {
        return Err(invalid(format!("channel realization covers {} symbols, batch needs {rows}", channel.noise().len())));
    }
    let beta_c = BETA_RATIO * alpha_c;
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, params.config());
    let x = g.constant("x");
    let y = nodes.encoder(&mut g, x);
    let y_hat = g.vq_lookup(nodes.codebook, y, Arc::new(channel));
    let bridged = g.straight_through(y, y_hat);
    let x_hat = nodes.decoder(&mut g, bridged);
    let t1 = g.mse(x_hat, x);
    let sg_y = g.stop_gradient(y);
    let t2 = g.mse(y_hat, sg_y);
    let sg_y_hat = g.stop_gradient(y_hat);
    let t3 = g.mse(y, sg_y_hat);
    let total = weighted_total(&mut g, [t1, t2, t3], alpha_c, beta_c);

    let mut bindings = Bindings::new();
    params.bind(&mut bindings);
    bindings.insert("x".into(), x_batch);
    Ok(LossGraph { graph: g, bindings, params: nodes, total, terms: [t1, t2, t3], lookups: vec![y_hat], alpha: alpha_c, beta: beta_c })
}

/// Image-reconstruction loss and gradient on a batch, drawing one noise
/// realization from `rng`.
pub fn image_loss(
    params: &ModelParams,
    images: &[&Tensor],
    link: &Link,
    alpha_c: f64,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let channel = link.realization(images.len() * params.config().n, rng);
    image_loss_graph(params, images, channel, alpha_c)?.evaluate()
}

/// Builds the feature-reconstruction loss for a batch of received feature
/// sets. `first` and `second` are the two channel realizations.
pub fn feature_loss_graph(
    params: &ModelParams,
    features: &[&FeatureBatch],
    first: NoisyVq,
    second: NoisyVq,
    alpha_s: f64,
) -> Result<LossGraph> {
    let cfg = params.config();
    if features.is_empty() {
        return Err(invalid("empty feature batch"));
    }
    let width = cfg.feature_width();
    let mut data = Vec::with_capacity(features.len() * width);
    for f in features {
        if f.rows() != cfg.n || f.dim() != cfg.d {
            return Err(Error::Shape {
                node: "feature_loss".into(),
                detail: format!("features {}x{} do not match N={} d={}", f.rows(), f.dim(), cfg.n, cfg.d),
            });
        }
        data.extend_from_slice(f.data());
    }
    let rows = features.len() * cfg.n;
    if first.noise().len() != rows || second.noise().len() != rows {
        return Err(invalid("channel realizations do not cover the feature batch"));
    }
    let beta_s = BETA_RATIO * alpha_s;
    let mut g = Graph::new();
    let nodes = ParamNodes::register(&mut g, cfg);
    let y1 = g.constant("y1");
    let y1_hat = g.vq_lookup(nodes.codebook, y1, Arc::new(first));
    let detached = g.stop_gradient(y1_hat);
    let bridged = g.straight_through(y1, detached);
    let decoded = nodes.decoder(&mut g, bridged);
    let y2 = nodes.encoder(&mut g, decoded);
    let y2_hat = g.vq_lookup(nodes.codebook, y2, Arc::new(second));
    let t1 = g.mse(y2, y1);
    let sg_y2 = g.stop_gradient(y2);
    let t2 = g.mse(y2_hat, sg_y2);
    let sg_y2_hat = g.stop_gradient(y2_hat);
    let t3 = g.mse(y2, sg_y2_hat);
    let total = weighted_total(&mut g, [t1, t2, t3], alpha_s, beta_s);

    let mut bindings = Bindings::new();
    params.bind(&mut bindings);
    bindings.insert("y1".into(), Tensor::matrix(features.len(), width, data));
    Ok(LossGraph {
        graph: g,
        bindings,
        params: nodes,
        total,
        terms: [t1, t2, t3],
        lookups: vec![y1_hat, y2_hat],
        alpha: alpha_s,
        beta: beta_s,
    })
}

/// Feature-reconstruction loss and gradient, with two independent noise
/// realizations at the same SNR drawn from `rng`.
pub fn feature_loss(
    params: &ModelParams,
    features: &[&FeatureBatch],
    link: &Link,
    alpha_s: f64,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let rows = features.len() * params.config().n;
    let first = link.realization(rows, rng);
    let second = link.realization(rows, rng);
    feature_loss_graph(params, features, first, second, alpha_s)?.evaluate()
}

/// Mean squared error between two equally shaped tensors.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { node: "mse".into(), detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / MSE)`, or [`PSNR_CAP_DB`] for identical images.
pub fn psnr(x: &Tensor, x_hat: &Tensor, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(invalid("PSNR peak must be positive"));
    }
    let err = mse(x, x_hat)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / err).log10())
}
