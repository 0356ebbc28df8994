//! Ordered layer sequences, shape inference and the forward/backward executor.
//!
//! Skip connections are expressed inside the flat sequence with a
//! [`LayerKind::Branch`] marker (saves the current activation) and a matching
//! [`LayerKind::Merge`] (adds or concatenates the saved activation, optionally
//! through a projection). Blocks carry such sequences as children, which is
//! what makes block decomposition function-preserving.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::layers::{AvgPool2d, BatchNorm2d, BnCache, Conv2d, ConvTranspose2d, Linear, MaxPool2d, Param};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Residual,
    Dense,
    Transition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOp {
    /// Element-wise sum of the (projected) saved activation and the current one.
    Add,
    /// Channel concatenation `[saved, current]`.
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub kind: BlockKind,
    pub layers: Vec<LayerSpec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Merge<T> {
    pub op: MergeOp,
    pub projection: Vec<LayerSpec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind<T> {
    Conv(Conv2d<T>),
    Deconv(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Relu,
    Pool(MaxPool2d),
    AvgPool(AvgPool2d),
    FullyConnected(Linear<T>),
    Block(Block<T>),
    Branch,
    Merge(Merge<T>),
}

impl<T> LayerKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Deconv(_) => "deconv",
            LayerKind::BatchNorm(_) => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Pool(_) => "pool",
            LayerKind::AvgPool(_) => "avg_pool",
            LayerKind::FullyConnected(_) => "fully_connected",
            LayerKind::Block(_) => "block",
            LayerKind::Branch => "shortcut_branch",
            LayerKind::Merge(_) => "shortcut_merge",
        }
    }

    pub fn is_block(&self) -> bool {
        matches!(self, LayerKind::Block(_))
    }
}

/// One entry of a layer sequence. `id` is 1-based and consecutive within its sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec<T> {
    pub id: usize,
    pub kind: LayerKind<T>,
}

impl<T: Scalar> LayerSpec<T> {
    pub fn new(id: usize, kind: LayerKind<T>) -> Self {
        Self { id, kind }
    }

    /// Key under which this layer's parameters are stored in a checkpoint.
    pub fn param_ref(&self) -> String {
        format!("layer_{:03}", self.id)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match &self.kind {
            LayerKind::Conv(c) => {
                f(&c.weight);
                if let Some(b) = &c.bias {
                    f(b);
                }
            }
            LayerKind::Deconv(c) => {
                f(&c.weight);
                if let Some(b) = &c.bias {
                    f(b);
                }
            }
            LayerKind::BatchNorm(bn) => {
                f(&bn.gamma);
                f(&bn.beta);
            }
            LayerKind::FullyConnected(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            LayerKind::Block(b) => b.layers.iter().for_each(|l| l.visit_params(f)),
            LayerKind::Merge(m) => m.projection.iter().for_each(|l| l.visit_params(f)),
            LayerKind::Relu | LayerKind::Pool(_) | LayerKind::AvgPool(_) | LayerKind::Branch => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.kind {
            LayerKind::Conv(c) => {
                f(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            LayerKind::Deconv(c) => {
                f(&mut c.weight);
                if let Some(b) = &mut c.bias {
                    f(b);
                }
            }
            LayerKind::BatchNorm(bn) => {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
            LayerKind::FullyConnected(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            LayerKind::Block(b) => b.layers.iter_mut().for_each(|l| l.visit_params_mut(f)),
            LayerKind::Merge(m) => m.projection.iter_mut().for_each(|l| l.visit_params_mut(f)),
            LayerKind::Relu | LayerKind::Pool(_) | LayerKind::AvgPool(_) | LayerKind::Branch => {}
        }
    }

    /// Every stored tensor (parameters and batch-norm running statistics) in a fixed order.
    pub fn state_tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.collect_state(&mut out);
        out
    }

    fn collect_state<'a>(&'a self, out: &mut Vec<&'a Tensor<T>>) {
        match &self.kind {
            LayerKind::Conv(c) => {
                out.push(&c.weight.value);
                if let Some(b) = &c.bias {
                    out.push(&b.value);
                }
            }
            LayerKind::Deconv(c) => {
                out.push(&c.weight.value);
                if let Some(b) = &c.bias {
                    out.push(&b.value);
                }
            }
            LayerKind::BatchNorm(bn) => {
                out.extend([&bn.gamma.value, &bn.beta.value, &bn.running_mean, &bn.running_var]);
            }
            LayerKind::FullyConnected(l) => out.extend([&l.weight.value, &l.bias.value]),
            LayerKind::Block(b) => b.layers.iter().for_each(|l| l.collect_state(out)),
            LayerKind::Merge(m) => m.projection.iter().for_each(|l| l.collect_state(out)),
            LayerKind::Relu | LayerKind::Pool(_) | LayerKind::AvgPool(_) | LayerKind::Branch => {}
        }
    }

    pub fn state_tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.collect_state_mut(&mut out);
        out
    }

    fn collect_state_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        match &mut self.kind {
            LayerKind::Conv(c) => {
                out.push(&mut c.weight.value);
                if let Some(b) = &mut c.bias {
                    out.push(&mut b.value);
                }
            }
            LayerKind::Deconv(c) => {
                out.push(&mut c.weight.value);
                if let Some(b) = &mut c.bias {
                    out.push(&mut b.value);
                }
            }
            LayerKind::BatchNorm(bn) => {
                out.push(&mut bn.gamma.value);
                out.push(&mut bn.beta.value);
                out.push(&mut bn.running_mean);
                out.push(&mut bn.running_var);
            }
            LayerKind::FullyConnected(l) => {
                out.push(&mut l.weight.value);
                out.push(&mut l.bias.value);
            }
            LayerKind::Block(b) => b.layers.iter_mut().for_each(|l| l.collect_state_mut(out)),
            LayerKind::Merge(m) => m.projection.iter_mut().for_each(|l| l.collect_state_mut(out)),
            LayerKind::Relu | LayerKind::Pool(_) | LayerKind::AvgPool(_) | LayerKind::Branch => {}
        }
    }

    pub fn cast<U: Scalar>(&self) -> LayerSpec<U> {
        let kind = match &self.kind {
            LayerKind::Conv(c) => LayerKind::Conv(c.cast()),
            LayerKind::Deconv(c) => LayerKind::Deconv(c.cast()),
            LayerKind::BatchNorm(bn) => LayerKind::BatchNorm(bn.cast()),
            LayerKind::Relu => LayerKind::Relu,
            LayerKind::Pool(p) => LayerKind::Pool(*p),
            LayerKind::AvgPool(p) => LayerKind::AvgPool(*p),
            LayerKind::FullyConnected(l) => LayerKind::FullyConnected(l.cast()),
            LayerKind::Block(b) => LayerKind::Block(Block { kind: b.kind, layers: b.layers.iter().map(|l| l.cast()).collect() }),
            LayerKind::Branch => LayerKind::Branch,
            LayerKind::Merge(m) => LayerKind::Merge(Merge { op: m.op, projection: m.projection.iter().map(|l| l.cast()).collect() }),
        };
        LayerSpec { id: self.id, kind }
    }
}

/// Assigns consecutive 1-based ids.
pub fn renumber<T>(layers: &mut [LayerSpec<T>]) {
    for (i, l) in layers.iter_mut().enumerate() {
        l.id = i + 1;
    }
}

fn concat_shapes(saved: &[usize], current: &[usize]) -> Result<Vec<usize>> {
    if saved.len() != 3 || current.len() != 3 || saved[1..] != current[1..] {
        return Err(Error::Shape(format!("cannot concatenate {saved:?} with {current:?}")));
    }
    Ok(vec![saved[0] + current[0], current[1], current[2]])
}

/// Per-layer output shapes of a balanced sequence.
pub fn infer_shapes<T: Scalar>(layers: &[LayerSpec<T>], input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut stack: Vec<Vec<usize>> = Vec::new();
    let mut current = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        current = match &layer.kind {
            LayerKind::Conv(c) => c.output_shape(&current)?,
            LayerKind::Deconv(c) => c.output_shape(&current)?,
            LayerKind::BatchNorm(bn) => bn.output_shape(&current)?,
            LayerKind::Relu => current.clone(),
            LayerKind::Pool(p) => p.output_shape(&current)?,
            LayerKind::AvgPool(p) => p.output_shape(&current)?,
            LayerKind::FullyConnected(l) => l.output_shape(&current)?,
            LayerKind::Block(b) => infer_shapes(&b.layers, &current)?.pop().unwrap_or_else(|| current.clone()),
            LayerKind::Branch => {
                stack.push(current.clone());
                current.clone()
            }
            LayerKind::Merge(m) => {
                let saved = stack.pop().ok_or_else(|| Error::Shape(format!("merge at layer {} without a branch", layer.id)))?;
                let projected = infer_shapes(&m.projection, &saved)?.pop().unwrap_or(saved);
                match m.op {
                    MergeOp::Add if projected == current => current.clone(),
                    MergeOp::Add => {
                        return Err(Error::Shape(format!(
                            "shortcut add at layer {}: {projected:?} vs {current:?}",
                            layer.id
                        )))
                    }
                    MergeOp::Concat => concat_shapes(&projected, &current)?,
                }
            }
        };
        out.push(current.clone());
    }
    if !stack.is_empty() {
        return Err(Error::Shape(format!("{} unmatched shortcut branch(es)", stack.len())));
    }
    Ok(out)
}

/// Output of layer `layer_id` (o_j).
#[derive(Debug, Clone, PartialEq)]
pub struct Activation<T> {
    pub layer_id: usize,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Input(Tensor<T>),
    Bn(BnCache<T>),
    Relu(Tensor<T>),
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    AvgPool { input_shape: Vec<usize> },
    Block(Tape<T>),
    Merge { projection: Tape<T>, saved_channels: usize },
}

/// Per-layer intermediate state recorded by a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    batch: usize,
}

fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = concat_shapes(a.sample_shape(), b.sample_shape())?;
    let n = a.batch();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data)
}

fn split_channels<T: Scalar>(g: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let n = g.batch();
    let (c, h, w) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let plane = h * w;
    let mut a = Vec::with_capacity(n * first * plane);
    let mut b = Vec::with_capacity(n * (c - first) * plane);
    for i in 0..n {
        let s = g.sample(i);
        a.extend_from_slice(&s[..first * plane]);
        b.extend_from_slice(&s[first * plane..]);
    }
    (
        Tensor::from_vec(&[n, first, h, w], a).expect("split"),
        Tensor::from_vec(&[n, c - first, h, w], b).expect("split"),
    )
}

fn run_layers<T: Scalar>(
    layers: &[LayerSpec<T>],
    mut x: Tensor<T>,
    mode: &dyn Fn(usize) -> Mode,
    record: bool,
    capture: Option<&BTreeSet<usize>>,
    captured: &mut Vec<Activation<T>>,
) -> Result<(Tensor<T>, Tape<T>)> {
    let mut stack: Vec<Tensor<T>> = Vec::new();
    let mut caches = Vec::with_capacity(if record { layers.len() } else { 0 });
    let batch = x.batch();
    for (idx, layer) in layers.iter().enumerate() {
        let m = mode(idx);
        let inner_mode = move |_: usize| m;
        let (y, cache) = match &layer.kind {
            LayerKind::Conv(c) => {
                let y = c.forward(&x)?;
                (y, if record { Cache::Input(x) } else { Cache::None })
            }
            LayerKind::Deconv(c) => {
                let y = c.forward(&x)?;
                (y, if record { Cache::Input(x) } else { Cache::None })
            }
            LayerKind::BatchNorm(bn) => {
                let (y, cache) = bn.forward(&x, m == Mode::Train)?;
                (y, if record { Cache::Bn(cache) } else { Cache::None })
            }
            LayerKind::Relu => {
                let y = super::layers::relu_forward(&x);
                let cache = if record { Cache::Relu(y.clone()) } else { Cache::None };
                (y, cache)
            }
            LayerKind::Pool(p) => {
                let (y, argmax) = p.forward(&x)?;
                (y, if record { Cache::MaxPool { input_shape: x.shape().to_vec(), argmax } } else { Cache::None })
            }
            LayerKind::AvgPool(p) => {
                let y = p.forward(&x)?;
                (y, if record { Cache::AvgPool { input_shape: x.shape().to_vec() } } else { Cache::None })
            }
            LayerKind::FullyConnected(l) => {
                let y = l.forward(&x)?;
                (y, if record { Cache::Input(x) } else { Cache::None })
            }
            LayerKind::Block(b) => {
                let (y, tape) = run_layers(&b.layers, x, &inner_mode, record, None, &mut Vec::new())?;
                (y, if record { Cache::Block(tape) } else { Cache::None })
            }
            LayerKind::Branch => {
                stack.push(x.clone());
                (x, Cache::None)
            }
            LayerKind::Merge(mg) => {
                let saved = stack
                    .pop()
                    .ok_or_else(|| Error::Shape(format!("merge at layer {} without a branch", layer.id)))?;
                let (projected, tape) = run_layers(&mg.projection, saved, &inner_mode, record, None, &mut Vec::new())?;
                let saved_channels = projected.shape().get(1).copied().unwrap_or(0);
                let y = match mg.op {
                    MergeOp::Add => {
                        if projected.shape() != x.shape() {
                            return Err(Error::Shape(format!(
                                "shortcut add at layer {}: {:?} vs {:?}",
                                layer.id,
                                projected.shape(),
                                x.shape()
                            )));
                        }
                        let mut y = x;
                        y.add_assign(&projected);
                        y
                    }
                    MergeOp::Concat => concat_channels(&projected, &x)?,
                };
                (y, if record { Cache::Merge { projection: tape, saved_channels } } else { Cache::None })
            }
        };
        if let Some(ids) = capture {
            if ids.contains(&layer.id) {
                captured.push(Activation { layer_id: layer.id, tensor: y.clone() });
            }
        }
        if record {
            caches.push(cache);
        }
        x = y;
    }
    if !stack.is_empty() {
        return Err(Error::Shape(format!("{} unmatched shortcut branch(es)", stack.len())));
    }
    Ok((x, Tape { caches, batch }))
}

fn update_running<T: Scalar>(layers: &mut [LayerSpec<T>], tape: &Tape<T>) {
    for (layer, cache) in layers.iter_mut().zip(&tape.caches) {
        match (&mut layer.kind, cache) {
            (LayerKind::BatchNorm(bn), Cache::Bn(c)) => {
                let plane = c.x_hat.sample_numel() / bn.channels;
                bn.update_running(c, tape.batch * plane);
            }
            (LayerKind::Block(b), Cache::Block(t)) => update_running(&mut b.layers, t),
            (LayerKind::Merge(m), Cache::Merge { projection, .. }) => update_running(&mut m.projection, projection),
            _ => {}
        }
    }
}

fn back_layers<T: Scalar>(
    layers: &mut [LayerSpec<T>],
    tape: &Tape<T>,
    mut g: Tensor<T>,
    param_grads: &dyn Fn(usize) -> bool,
    injections: &BTreeMap<usize, Tensor<T>>,
    stop: usize,
) -> Result<Tensor<T>> {
    if tape.caches.len() != layers.len() {
        return Err(Error::Shape("tape does not match the layer sequence".into()));
    }
    let mut gstack: Vec<Tensor<T>> = Vec::new();
    for idx in (stop.min(layers.len())..layers.len()).rev() {
        if let Some(extra) = injections.get(&idx) {
            if extra.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient injection at layer {} has shape {:?}", idx + 1, extra.shape())));
            }
            g.add_assign(extra);
        }
        let pg = param_grads(idx);
        let inner = move |_: usize| pg;
        let layer = &mut layers[idx];
        g = match (&mut layer.kind, &tape.caches[idx]) {
            (LayerKind::Conv(c), Cache::Input(x)) => c.backward(x, &g, pg)?,
            (LayerKind::Deconv(c), Cache::Input(x)) => c.backward(x, &g, pg)?,
            (LayerKind::BatchNorm(bn), Cache::Bn(cache)) => bn.backward(cache, &g, pg),
            (LayerKind::Relu, Cache::Relu(y)) => super::layers::relu_backward(y, &g),
            (LayerKind::Pool(_), Cache::MaxPool { input_shape, argmax }) => MaxPool2d::backward(input_shape, argmax, &g),
            (LayerKind::AvgPool(p), Cache::AvgPool { input_shape }) => p.backward(input_shape, &g),
            (LayerKind::FullyConnected(l), Cache::Input(x)) => l.backward(x, &g, pg),
            (LayerKind::Block(b), Cache::Block(t)) => back_layers(&mut b.layers, t, g, &inner, &BTreeMap::new(), 0)?,
            (LayerKind::Branch, Cache::None) => {
                let extra = gstack.pop().ok_or_else(|| Error::Shape("unbalanced shortcut in backward".into()))?;
                let mut g = g;
                g.add_assign(&extra);
                g
            }
            (LayerKind::Merge(m), Cache::Merge { projection, saved_channels }) => {
                let (g_saved, g_main) = match m.op {
                    MergeOp::Add => (g.clone(), g),
                    MergeOp::Concat => split_channels(&g, *saved_channels),
                };
                let g_branch = back_layers(&mut m.projection, projection, g_saved, &inner, &BTreeMap::new(), 0)?;
                gstack.push(g_branch);
                g_main
            }
            _ => return Err(Error::Shape(format!("tape entry for layer {} was not recorded", idx + 1))),
        };
    }
    Ok(g)
}

/// An executable ordered layer sequence with a known per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(input_shape: Vec<usize>, mut layers: Vec<LayerSpec<T>>) -> Result<Self> {
        renumber(&mut layers);
        let seq = Self { input_shape, layers };
        seq.shapes()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Output shape of every layer (shape inference).
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        infer_shapes(&self.layers, &self.input_shape)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::num_params).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.sample_shape() != self.input_shape.as_slice() {
            return Err(Error::Shape(format!(
                "input of shape {:?} does not match expected (batch, {:?})",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    fn check_capture(&self, capture: &BTreeSet<usize>) -> Result<()> {
        let max = self.layers.len();
        match capture.iter().find(|&&id| id == 0 || id > max) {
            Some(&id) => Err(Error::InvalidLayerId { id, max }),
            None => Ok(()),
        }
    }

    /// Inference-mode forward pass; returns the output and the requested intermediate activations.
    pub fn forward(&self, x: &Tensor<T>, capture: &BTreeSet<usize>) -> Result<(Tensor<T>, Vec<Activation<T>>)> {
        self.check_input(x)?;
        self.check_capture(capture)?;
        let mut captured = Vec::new();
        let (y, _) = run_layers(&self.layers, x.clone(), &|_| Mode::Eval, false, Some(capture), &mut captured)?;
        Ok((y, captured))
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(run_layers(&self.layers, x.clone(), &|_| Mode::Eval, false, None, &mut Vec::new())?.0)
    }

    /// Forward pass that records a tape. Layers for which `train(index)` holds
    /// (0-based) run in training mode with batch statistics; the rest run in eval mode.
    pub fn forward_tape(
        &self,
        x: &Tensor<T>,
        train: &dyn Fn(usize) -> bool,
        capture: &BTreeSet<usize>,
    ) -> Result<(Tensor<T>, Tape<T>, Vec<Activation<T>>)> {
        self.check_input(x)?;
        self.check_capture(capture)?;
        let mode = |idx: usize| if train(idx) { Mode::Train } else { Mode::Eval };
        let mut captured = Vec::new();
        let (y, tape) = run_layers(&self.layers, x.clone(), &mode, true, Some(capture), &mut captured)?;
        Ok((y, tape, captured))
    }

    /// Applies the batch statistics recorded in `tape` to the running estimates.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        update_running(&mut self.layers, tape);
    }

    /// Backpropagates `grad` (gradient w.r.t. the output) down to the input of
    /// the layer with 0-based index `stop`, which is returned. Extra gradients may
    /// be injected at intermediate outputs, keyed by 0-based layer index.
    /// Parameter gradients accumulate for layers where `params(index)` holds.
    pub fn backward(
        &mut self,
        tape: &Tape<T>,
        grad: Tensor<T>,
        injections: &BTreeMap<usize, Tensor<T>>,
        params: &dyn Fn(usize) -> bool,
        stop: usize,
    ) -> Result<Tensor<T>> {
        back_layers(&mut self.layers, tape, grad, params, injections, stop)
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.visit_params_mut(&mut |p| p.zero_grad());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sequential<U> {
        Sequential { input_shape: self.input_shape.clone(), layers: self.layers.iter().map(|l| l.cast()).collect() }
    }

    /// Concatenation of two sequences; ids are renumbered.
    pub fn then(&self, other: &Sequential<T>) -> Result<Sequential<T>> {
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Sequential::new(self.input_shape.clone(), layers)
    }

    /// Flattens blocks in the 1-based inclusive range into their low-level layers.
    pub fn decompose_blocks(&self, range: (usize, usize)) -> Result<Vec<LayerSpec<T>>> {
        let (start, end) = range;
        let max = self.layers.len();
        if start == 0 || start > max {
            return Err(Error::InvalidLayerId { id: start, max });
        }
        if end < start || end > max {
            return Err(Error::InvalidLayerId { id: end, max });
        }
        let mut flat = Vec::new();
        for layer in &self.layers[start - 1..end] {
            flatten_into(layer, &mut flat);
        }
        renumber(&mut flat);
        Ok(flat)
    }

    /// Input shape seen by the 1-based layer `id`.
    pub fn input_shape_of(&self, id: usize) -> Result<Vec<usize>> {
        let max = self.layers.len();
        if id == 0 || id > max {
            return Err(Error::InvalidLayerId { id, max });
        }
        if id == 1 {
            return Ok(self.input_shape.clone());
        }
        Ok(self.shapes()?[id - 2].clone())
    }
}

fn flatten_into<T: Scalar>(layer: &LayerSpec<T>, out: &mut Vec<LayerSpec<T>>) {
    match &layer.kind {
        LayerKind::Block(b) => b.layers.iter().for_each(|l| flatten_into(l, out)),
        _ => out.push(layer.clone()),
    }
}

/// A complete classifier: the composition of its layers maps an image to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph<T> {
    pub name: String,
    pub arch: String,
    pub num_classes: usize,
    pub net: Sequential<T>,
}

impl<T: Scalar> ModelGraph<T> {
    pub fn new(name: impl Into<String>, arch: impl Into<String>, input_shape: [usize; 3], num_classes: usize, layers: Vec<LayerSpec<T>>) -> Result<Self> {
        let net = Sequential::new(input_shape.to_vec(), layers)?;
        let graph = Self { name: name.into(), arch: arch.into(), num_classes, net };
        graph.validate()?;
        Ok(graph)
    }

    /// Checks consecutive ids, layer-to-layer shape agreement and the final output width.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.net.layers.iter().enumerate() {
            if l.id != i + 1 {
                return Err(Error::Shape(format!("layer ids must be consecutive from 1; found {} at position {}", l.id, i + 1)));
            }
        }
        let out = self.net.output_shape()?;
        if out.iter().product::<usize>() != self.num_classes {
            return Err(Error::Shape(format!("final output {out:?} does not match {} classes", self.num_classes)));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.net.input_shape[0], self.net.input_shape[1], self.net.input_shape[2]]
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.net.layers
    }

    pub fn len(&self) -> usize {
        self.net.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.net.layers.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }

    /// Runs the model and returns logits `(batch, num_classes)` plus requested activations.
    pub fn forward(&self, x: &Tensor<T>, capture: &BTreeSet<usize>) -> Result<(Tensor<T>, Vec<Activation<T>>)> {
        self.net.forward(x, capture)
    }

    pub fn decompose_blocks(&self, range: (usize, usize)) -> Result<Vec<LayerSpec<T>>> {
        self.net.decompose_blocks(range)
    }

    /// Output shape of the 1-based layer `id`.
    pub fn shape_at(&self, id: usize) -> Result<Vec<usize>> {
        let shapes = self.net.shapes()?;
        shapes.get(id.wrapping_sub(1)).cloned().ok_or(Error::InvalidLayerId { id, max: shapes.len() })
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph { name: self.name.clone(), arch: self.arch.clone(), num_classes: self.num_classes, net: self.net.cast() }
    }
}
