//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built symbolically, evaluated against a set of named input
//! bindings, and differentiated from a scalar seed node. Besides the usual
//! dense-layer ops the engine has the two gradient-routing nodes a VQ
//! autoencoder needs:
//!
//! * stop-gradient: identity forward, zero backward;
//! * straight-through: forward value of the quantized parent, backward copies
//!   the upstream gradient to the original parent unchanged.
//!
//! Codebook lookups go through an [`IndexSource`], which decides which
//! codeword each feature row receives (nearest neighbour, optionally through a
//! noisy channel whose realization is fixed when the source is built).

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Dense row-major tensor of finite reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.contains(&0) && !data.is_empty() {
            return Err(Error::Shape {
                node: "tensor".into(),
                detail: format!("zero-sized dimension in {shape:?} with {} values", data.len()),
            });
        }
        if expected != data.len() {
            return Err(Error::Shape {
                node: "tensor".into(),
                detail: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor".into()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// Row-major matrix. Panics when `data.len() != rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Self { shape: vec![rows, cols], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Same data under a new shape with the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }
}

/// Identifies a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Result of mapping feature rows onto codebook rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lookup {
    /// Zero-based codeword index per feature row.
    pub indices: Vec<usize>,
    /// Set when some decision was an exact tie between two candidates.
    pub tie: bool,
}

/// Chooses codebook rows for feature rows.
pub trait IndexSource: Send + Sync + fmt::Debug {
    /// `codebook` is `M x d`; `features` holds `rows * d` values.
    fn lookup(&self, codebook: &Tensor, features: &Tensor) -> Result<Lookup>;
}

/// Coarse classification of graph nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Input,
    Linear,
    BiasAdd,
    Activation,
    Mse,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    StopGradient,
    StraightThrough,
    VqLookup,
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, requires_grad: bool },
    /// `x [B, in]`, `w [out, in]` -> `[B, out]`.
    Linear { x: NodeId, w: NodeId },
    /// `x [B, n]` plus `b [n]` on every row.
    BiasAdd { x: NodeId, b: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Mse { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: f64 },
    Sum { a: NodeId },
    StopGradient { a: NodeId },
    StraightThrough { original: NodeId, quantized: NodeId },
    VqLookup { codebook: NodeId, features: NodeId, source: Arc<dyn IndexSource> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input { .. } => OpKind::Input,
            Op::Linear { .. } => OpKind::Linear,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::LeakyRelu { .. } => OpKind::Activation,
            Op::Mse { .. } => OpKind::Mse,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::StopGradient { .. } => OpKind::StopGradient,
            Op::StraightThrough { .. } => OpKind::StraightThrough,
            Op::VqLookup { .. } => OpKind::VqLookup,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } => vec![],
            Op::Linear { x, w } => vec![*x, *w],
            Op::BiasAdd { x, b } => vec![*x, *b],
            Op::LeakyRelu { x, .. } => vec![*x],
            Op::Mse { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. } | Op::Sum { a } | Op::StopGradient { a } => vec![*a],
            Op::StraightThrough { original, quantized } => vec![*original, *quantized],
            Op::VqLookup { codebook, features, .. } => vec![*codebook, *features],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: String,
}

/// Input bindings keyed by input name.
pub type Bindings = HashMap<String, Tensor>;

/// A directed acyclic computation graph. Nodes are stored in creation order,
/// which is a topological order because a node can only reference nodes that
/// already exist.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn label(&self, id: NodeId) -> &str {
        &self.nodes[id.0].label
    }

    /// Looks up an input node by name.
    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    fn push(&mut self, op: Op, label: String) -> NodeId {
        for p in op.parents() {
            assert!(p.0 < self.nodes.len(), "parent {p:?} does not belong to this graph");
        }
        self.nodes.push(Node { op, label });
        NodeId(self.nodes.len() - 1)
    }

    fn add_input(&mut self, name: &str, requires_grad: bool) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(
            Op::Input { name: name.to_string(), requires_grad },
            name.to_string(),
        );
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Trainable input; gradients are reported for it.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.add_input(name, true)
    }

    /// Constant input (data); no gradient is computed for it.
    pub fn constant(&mut self, name: &str) -> NodeId {
        self.add_input(name, false)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Linear { x, w }, format!("linear#{}", self.nodes.len()))
    }

    pub fn bias_add(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::BiasAdd { x, b }, format!("bias_add#{}", self.nodes.len()))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu { x, slope }, format!("leaky_relu#{}", self.nodes.len()))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mse { a, b }, format!("mse#{}", self.nodes.len()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add { a, b }, format!("add#{}", self.nodes.len()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub { a, b }, format!("sub#{}", self.nodes.len()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul { a, b }, format!("mul#{}", self.nodes.len()))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale { a, factor }, format!("scale#{}", self.nodes.len()))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum { a }, format!("sum#{}", self.nodes.len()))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.push(Op::StopGradient { a }, format!("sg#{}", self.nodes.len()))
    }

    /// Forward value of `quantized`; backward routes the upstream gradient to
    /// `original` only.
    pub fn straight_through(&mut self, original: NodeId, quantized: NodeId) -> NodeId {
        self.push(
            Op::StraightThrough { original, quantized },
            format!("straight_through#{}", self.nodes.len()),
        )
    }

    /// Replaces each `d`-chunk of `features` by the codebook row picked by
    /// `source`. Differentiable with respect to the codebook only.
    pub fn vq_lookup(
        &mut self,
        codebook: NodeId,
        features: NodeId,
        source: Arc<dyn IndexSource>,
    ) -> NodeId {
        self.push(
            Op::VqLookup { codebook, features, source },
            format!("vq_lookup#{}", self.nodes.len()),
        )
    }

    /// Evaluates every node.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation> {
        self.evaluate(bindings, None)
    }

    /// Evaluates the detached surrogate of the graph around `reference`:
    /// stop-gradient nodes return their reference values and straight-through
    /// nodes return `original + (quantized - original)` with the bracket taken
    /// from the reference. Codebook decisions and activation regions must
    /// match the reference, otherwise the point is reported as
    /// non-differentiable.
    pub fn forward_detached(&self, bindings: &Bindings, reference: &Evaluation) -> Result<Evaluation> {
        self.evaluate(bindings, Some(reference))
    }

    fn evaluate(&self, bindings: &Bindings, reference: Option<&Evaluation>) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut lookups: Vec<Option<Lookup>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let shape_err = |detail: String| Error::Shape { node: node.label.clone(), detail };
            let value = match &node.op {
                Op::Input { name, .. } => bindings
                    .get(name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?,
                Op::Linear { x, w } => {
                    let (x, w) = (&values[x.0], &values[w.0]);
                    if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[1] {
                        return Err(shape_err(format!(
                            "linear needs x [B, in] and w [out, in], got {:?} and {:?}",
                            x.shape, w.shape
                        )));
                    }
                    let (rows, inner, out) = (x.shape[0], x.shape[1], w.shape[0]);
                    let mut y = vec![0.0; rows * out];
                    for r in 0..rows {
                        let xr = &x.data[r * inner..(r + 1) * inner];
                        for o in 0..out {
                            let wo = &w.data[o * inner..(o + 1) * inner];
                            y[r * out + o] = dot(xr, wo);
                        }
                    }
                    Tensor { shape: vec![rows, out], data: y }
                }
                Op::BiasAdd { x, b } => {
                    let (x, b) = (&values[x.0], &values[b.0]);
                    if x.shape.len() != 2 || b.numel() != x.shape[1] {
                        return Err(shape_err(format!(
                            "bias of {} values cannot be added to {:?}",
                            b.numel(),
                            x.shape
                        )));
                    }
                    let cols = x.shape[1];
                    let data = x
                        .data
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v + b.data[k % cols])
                        .collect();
                    Tensor { shape: x.shape.clone(), data }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = &values[x.0];
                    if let Some(r) = reference {
                        let base = &r.values[x.0];
                        if xv
                            .data
                            .iter()
                            .zip(&base.data)
                            .any(|(a, b)| (*a > 0.0) != (*b > 0.0))
                        {
                            return Err(Error::NonDifferentiable(format!(
                                "activation region changed at {}",
                                node.label
                            )));
                        }
                    }
                    let data = xv.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
                    Tensor { shape: xv.shape.clone(), data }
                }
                Op::Mse { a, b } => {
                    let (a, b) = (&values[a.0], &values[b.0]);
                    same_shape(a, b).map_err(shape_err)?;
                    let n = a.numel().max(1) as f64;
                    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
                    Tensor::scalar(s / n)
                }
                Op::Add { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x + y).map_err(shape_err)?,
                Op::Sub { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x - y).map_err(shape_err)?,
                Op::Mul { a, b } => zip_with(&values[a.0], &values[b.0], |x, y| x * y).map_err(shape_err)?,
                Op::Scale { a, factor } => {
                    let a = &values[a.0];
                    Tensor { shape: a.shape.clone(), data: a.data.iter().map(|v| v * factor).collect() }
                }
                Op::Sum { a } => Tensor::scalar(values[a.0].data.iter().sum()),
                Op::StopGradient { a } => match reference {
                    Some(r) => r.values[i].clone(),
                    None => values[a.0].clone(),
                },
                Op::StraightThrough { original, quantized } => {
                    let (o, q) = (&values[original.0], &values[quantized.0]);
                    same_shape(o, q).map_err(shape_err)?;
                    match reference {
                        None => q.clone(),
                        Some(r) => {
                            let (ro, rq) = (&r.values[original.0], &r.values[quantized.0]);
                            let data = o
                                .data
                                .iter()
                                .zip(ro.data.iter().zip(&rq.data))
                                .map(|(v, (bo, bq))| v + (bq - bo))
                                .collect();
                            Tensor { shape: o.shape.clone(), data }
                        }
                    }
                }
                Op::VqLookup { codebook, features, source } => {
                    let (c, f) = (&values[codebook.0], &values[features.0]);
                    if c.shape.len() != 2 || c.shape[1] == 0 || f.numel() % c.shape[1] != 0 {
                        return Err(shape_err(format!(
                            "codebook {:?} incompatible with features {:?}",
                            c.shape, f.shape
                        )));
                    }
                    let d = c.shape[1];
                    let lookup = source.lookup(c, f)?;
                    if lookup.indices.len() * d != f.numel() {
                        return Err(shape_err(format!(
                            "index source returned {} indices for {} rows",
                            lookup.indices.len(),
                            f.numel() / d
                        )));
                    }
                    if let Some(r) = reference {
                        let base = r.lookups[i].as_ref().expect("reference lookup");
                        if lookup.tie || base.indices != lookup.indices {
                            return Err(Error::NonDifferentiable(format!(
                                "codeword assignment changed at {}",
                                node.label
                            )));
                        }
                    }
                    let mut data = Vec::with_capacity(f.numel());
                    for &k in &lookup.indices {
                        if k >= c.shape[0] {
                            return Err(Error::IndexOutOfRange { what: "codebook", index: k, len: c.shape[0] });
                        }
                        data.extend_from_slice(&c.data[k * d..(k + 1) * d]);
                    }
                    lookups[i] = Some(lookup);
                    Tensor { shape: f.shape.clone(), data }
                }
            };
            if value.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(node.label.clone()));
            }
            values.push(value);
        }
        Ok(Evaluation { values, lookups })
    }

    /// Reverse-mode pass from the scalar `seed`. Parents are visited in the
    /// fixed reverse creation order, so accumulation is bit-reproducible.
    pub fn backward(&self, eval: &Evaluation, seed: NodeId) -> Result<Gradients> {
        if eval.values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("evaluation belongs to a different graph".into()));
        }
        let seed_value = &eval.values[seed.0];
        if !seed_value.is_scalar() {
            return Err(Error::NonScalarSeed(seed_value.shape.clone()));
        }

        let needs = self.needs_grad();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(vec![1.0]);

        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w } => {
                    let (xv, wv) = (&eval.values[x.0], &eval.values[w.0]);
                    let (rows, inner, out) = (xv.shape[0], xv.shape[1], wv.shape[0]);
                    if needs[x.0] {
                        let mut dx = vec![0.0; rows * inner];
                        for r in 0..rows {
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go == 0.0 {
                                    continue;
                                }
                                let wo = &wv.data[o * inner..(o + 1) * inner];
                                for (d, wi) in dx[r * inner..(r + 1) * inner].iter_mut().zip(wo) {
                                    *d += go * wi;
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if needs[w.0] {
                        let mut dw = vec![0.0; out * inner];
                        for r in 0..rows {
                            let xr = &xv.data[r * inner..(r + 1) * inner];
                            for o in 0..out {
                                let go = g[r * out + o];
                                if go == 0.0 {
                                    continue;
                                }
                                for (d, xi) in dw[o * inner..(o + 1) * inner].iter_mut().zip(xr) {
                                    *d += go * xi;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::BiasAdd { x, b } => {
                    let cols = eval.values[x.0].shape[1];
                    if needs[b.0] {
                        let mut db = vec![0.0; cols];
                        for (k, v) in g.iter().enumerate() {
                            db[k % cols] += v;
                        }
                        accumulate(&mut grads, *b, db);
                    }
                    if needs[x.0] {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    if needs[x.0] {
                        let xv = &eval.values[x.0];
                        let dx = g
                            .iter()
                            .zip(&xv.data)
                            .map(|(gi, &v)| if v > 0.0 { *gi } else { slope * gi })
                            .collect();
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Mse { a, b } => {
                    let (av, bv) = (&eval.values[a.0], &eval.values[b.0]);
                    let n = av.numel().max(1) as f64;
                    let factor = 2.0 * g[0] / n;
                    let diff: Vec<f64> = av.data.iter().zip(&bv.data).map(|(x, y)| factor * (x - y)).collect();
                    if needs[b.0] {
                        accumulate(&mut grads, *b, diff.iter().map(|v| -v).collect());
                    }
                    if needs[a.0] {
                        accumulate(&mut grads, *a, diff);
                    }
                }
                Op::Add { a, b } => {
                    if needs[b.0] {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if needs[a.0] {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub { a, b } => {
                    if needs[b.0] {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    if needs[a.0] {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&eval.values[a.0], &eval.values[b.0]);
                    if needs[b.0] {
                        accumulate(&mut grads, *b, g.iter().zip(&av.data).map(|(gi, x)| gi * x).collect());
                    }
                    if needs[a.0] {
                        accumulate(&mut grads, *a, g.iter().zip(&bv.data).map(|(gi, y)| gi * y).collect());
                    }
                }
                Op::Scale { a, factor } => {
                    if needs[a.0] {
                        accumulate(&mut grads, *a, g.iter().map(|v| v * factor).collect());
                    }
                }
                Op::Sum { a } => {
                    if needs[a.0] {
                        accumulate(&mut grads, *a, vec![g[0]; eval.values[a.0].numel()]);
                    }
                }
                Op::StopGradient { .. } => {}
                Op::StraightThrough { original, .. } => {
                    if needs[original.0] {
                        accumulate(&mut grads, *original, g);
                    }
                }
                Op::VqLookup { codebook, .. } => {
                    if needs[codebook.0] {
                        let cv = &eval.values[codebook.0];
                        let d = cv.shape[1];
                        let lookup = eval.lookups[i].as_ref().expect("lookup recorded in forward");
                        let mut dc = vec![0.0; cv.numel()];
                        for (row, &k) in lookup.indices.iter().enumerate() {
                            for j in 0..d {
                                dc[k * d + j] += g[row * d + j];
                            }
                        }
                        accumulate(&mut grads, *codebook, dc);
                    }
                }
            }
        }

        let mut by_node: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Input { requires_grad: true, .. } = node.op {
                let shape = eval.values[i].shape.clone();
                let data = grads[i].take().unwrap_or_else(|| vec![0.0; eval.values[i].numel()]);
                by_node[i] = Some(Tensor { shape, data });
            }
        }
        Ok(Gradients { by_node })
    }

    /// Marks nodes from which a trainable input is reachable through
    /// differentiable edges.
    fn needs_grad(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match &node.op {
                Op::Input { requires_grad, .. } => *requires_grad,
                Op::StopGradient { .. } => false,
                Op::StraightThrough { original, .. } => needs[original.0],
                Op::VqLookup { codebook, .. } => needs[codebook.0],
                op => op.parents().iter().any(|p| needs[p.0]),
            };
        }
        needs
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_shape(a: &Tensor, b: &Tensor) -> std::result::Result<(), String> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(format!("operands have shapes {:?} and {:?}", a.shape, b.shape))
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> std::result::Result<Tensor, String> {
    same_shape(a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
    })
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
        slot @ None => *slot = Some(g),
    }
}

/// Node values from one forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    lookups: Vec<Option<Lookup>>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Scalar value of a node (first element).
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].data[0]
    }

    /// Codeword decisions taken by a lookup node.
    pub fn lookup(&self, id: NodeId) -> Option<&Lookup> {
        self.lookups[id.0].as_ref()
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }
}

/// Gradients of the seed with respect to every trainable input.
#[derive(Clone, Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable input node; `None` for any other node.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_node
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.as_ref().map(|t| (NodeId(i), t)))
    }
}

/// Additive floor in the relative-error denominator of [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Outcome of a finite-difference gradient check on one parameter.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `seed` with respect to the
/// trainable input `param` against central differences of the detached
/// surrogate (see [`Graph::forward_detached`]). Index sources are replayed
/// unchanged, so stochastic lookups use common random numbers.
pub fn grad_check(graph: &Graph, bindings: &Bindings, seed: NodeId, param: NodeId, h: f64) -> Result<GradCheck> {
    let name = match &graph.nodes[param.0].op {
        Op::Input { name, requires_grad: true } => name.clone(),
        _ => return Err(Error::InvalidArgument(format!("{} is not a trainable input", graph.label(param)))),
    };
    let base = graph.forward(bindings)?;
    if let Some((i, _)) = base.lookups.iter().enumerate().find(|(_, l)| l.as_ref().is_some_and(|l| l.tie)) {
        return Err(Error::NonDifferentiable(format!("tie in {}", graph.nodes[i].label)));
    }
    let analytic = graph
        .backward(&base, seed)?
        .get(param)
        .expect("trainable input has a gradient")
        .data
        .clone();

    let mut perturbed = bindings.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..analytic.len() {
        let orig = bindings[&name].data[k];
        perturbed.get_mut(&name).expect("bound").data[k] = orig + h;
        let plus = graph.forward_detached(&perturbed, &base)?.scalar(seed);
        perturbed.get_mut(&name).expect("bound").data[k] = orig - h;
        let minus = graph.forward_detached(&perturbed, &base)?.scalar(seed);
        perturbed.get_mut(&name).expect("bound").data[k] = orig;
        numeric.push((plus - minus) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + GRAD_CHECK_FLOOR))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheck { max_rel_error, worst_index, analytic, numeric })
}
