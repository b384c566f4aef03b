//! Feed-forward network engine: dense, 2-d convolution, ReLU, and softmax
//! layers with full activation capture and reverse-mode gradients.
//!
//! The engine is deliberately minimal and deterministic. A [`Network`] is a
//! straight pipeline of layers; [`Network::forward`] records every layer's
//! output so that losses defined on intermediate activations can inject
//! gradient contributions at any depth through a [`BackpropSeed`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of the pipeline. `in`/`out` dims are per-sample.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        has_bias: bool,
    },
    /// Input `[h, w, c]`, kernel `kernel x kernel`, `filters` output channels.
    Conv2d {
        in_shape: [usize; 3],
        filters: usize,
        kernel: usize,
        stride: usize,
        has_bias: bool,
    },
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            has_bias: true,
        }
    }

    pub fn conv2d(in_shape: [usize; 3], filters: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            in_shape,
            filters,
            kernel,
            stride,
            has_bias: true,
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Number of filters (grouping units) for a parameterized layer.
    pub fn filter_count(&self) -> Option<usize> {
        match self {
            LayerSpec::Dense { out_dim, .. } => Some(*out_dim),
            LayerSpec::Conv2d { filters, .. } => Some(*filters),
            _ => None,
        }
    }

    fn validate(&self, layer: usize) -> Result<()> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::BadLayerSpec(format!(
                        "layer {layer}: dense dims must be positive"
                    )));
                }
            }
            LayerSpec::Conv2d {
                in_shape,
                filters,
                kernel,
                stride,
                ..
            } => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::BadLayerSpec(format!(
                        "layer {layer}: conv2d needs filters >= 1, kernel >= 1, stride >= 1"
                    )));
                }
                if in_shape.iter().any(|&d| d == 0) {
                    return Err(Error::BadLayerSpec(format!(
                        "layer {layer}: conv2d input shape must be positive"
                    )));
                }
                if in_shape[0] < kernel || in_shape[1] < kernel {
                    return Err(Error::BadLayerSpec(format!(
                        "layer {layer}: kernel {kernel} larger than input {in_shape:?}"
                    )));
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Per-sample output shape given the per-sample input shape.
    fn output_shape(&self, layer: usize, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let flat: usize = input.iter().product();
                if flat != in_dim {
                    return Err(Error::ShapeMismatch {
                        layer,
                        detail: format!("dense expects {in_dim} inputs, got {input:?}"),
                    });
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Conv2d {
                in_shape,
                filters,
                kernel,
                stride,
                ..
            } => {
                if input != in_shape {
                    return Err(Error::ShapeMismatch {
                        layer,
                        detail: format!("conv2d expects {in_shape:?}, got {input:?}"),
                    });
                }
                let oh = (in_shape[0] - kernel) / stride + 1;
                let ow = (in_shape[1] - kernel) / stride + 1;
                Ok(vec![oh, ow, filters])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        layer,
                        detail: format!("softmax expects a vector per sample, got {input:?}"),
                    });
                }
                Ok(input.to_vec())
            }
        }
    }
}

/// Weight and optional bias for one layer; `None` slots for relu/softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

impl LayerParams {
    fn empty() -> Self {
        LayerParams {
            weight: None,
            bias: None,
        }
    }
}

/// Parameter slot address used by the gradient checker and the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Weight,
    Bias,
}

#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    params: Vec<LayerParams>,
}

/// Per-layer activations captured during a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationRecord {
    input: Tensor,
    outputs: Vec<Tensor>,
}

impl ActivationRecord {
    pub fn batch_size(&self) -> usize {
        self.input.shape()[0]
    }

    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn output(&self, layer: usize) -> &Tensor {
        &self.outputs[layer]
    }

    pub fn outputs(&self) -> &[Tensor] {
        &self.outputs
    }

    /// The tensor feeding layer `layer`.
    pub fn input_of(&self, layer: usize) -> &Tensor {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }
}

/// Per-parameter gradients, shape-congruent with `Network::params`.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub layers: Vec<LayerParams>,
}

impl GradientSet {
    pub fn zeros_like(net: &Network) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| LayerParams {
                weight: p.weight.as_ref().map(Tensor::zeros_like),
                bias: p.bias.as_ref().map(Tensor::zeros_like),
            })
            .collect();
        GradientSet { layers }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.as_ref().map_or(true, Tensor::all_finite)
                && l.bias.as_ref().map_or(true, Tensor::all_finite)
        })
    }
}

/// Gradient contributions injected at layer outputs, for losses that act on
/// intermediate activations as well as on the logits.
#[derive(Debug, Clone)]
pub struct BackpropSeed {
    per_layer: Vec<Option<Tensor>>,
}

impl BackpropSeed {
    pub fn new(num_layers: usize) -> Self {
        BackpropSeed {
            per_layer: vec![None; num_layers],
        }
    }

    /// Add `scale * grad` to the contribution at layer `layer`'s output.
    pub fn add(&mut self, layer: usize, grad: &Tensor, scale: f64) {
        match &mut self.per_layer[layer] {
            Some(t) => t.add_scaled(grad, scale),
            slot => {
                let mut t = Tensor::zeros_like(grad);
                t.add_scaled(grad, scale);
                *slot = Some(t);
            }
        }
    }

    pub fn at(&self, layer: usize) -> Option<&Tensor> {
        self.per_layer[layer].as_ref()
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// Merge another seed into this one with a weight.
    pub fn merge(&mut self, other: &BackpropSeed, scale: f64) {
        assert_eq!(self.per_layer.len(), other.per_layer.len());
        for (l, grad) in other.per_layer.iter().enumerate() {
            if let Some(g) = grad {
                self.add(l, g, scale);
            }
        }
    }
}

impl Network {
    /// Build a network with seeded scaled-Gaussian weights
    /// (std = 1/sqrt(fan_in)) and zero biases.
    pub fn new<R: Rng>(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::BadLayerSpec("network needs at least one layer".into()));
        }
        let mut shape = input_shape.clone();
        let mut params = Vec::with_capacity(specs.len());
        for (l, spec) in specs.iter().enumerate() {
            spec.validate(l)?;
            shape = spec.output_shape(l, &shape)?;
            params.push(init_params(spec, rng));
        }
        Ok(Network {
            input_shape,
            specs,
            params,
        })
    }

    /// Build a network from explicit parameters; used by tests and the
    /// checkpoint loader.
    pub fn with_params(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        params: Vec<LayerParams>,
    ) -> Result<Self> {
        if specs.len() != params.len() {
            return Err(Error::BadLayerSpec(format!(
                "{} specs but {} parameter entries",
                specs.len(),
                params.len()
            )));
        }
        let mut shape = input_shape.clone();
        for (l, spec) in specs.iter().enumerate() {
            spec.validate(l)?;
            shape = spec.output_shape(l, &shape)?;
            check_param_shapes(l, spec, &params[l])?;
        }
        Ok(Network {
            input_shape,
            specs,
            params,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn spec(&self, layer: usize) -> &LayerSpec {
        &self.specs[layer]
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn param(&self, layer: usize, slot: ParamSlot) -> Option<&Tensor> {
        let p = &self.params[layer];
        match slot {
            ParamSlot::Weight => p.weight.as_ref(),
            ParamSlot::Bias => p.bias.as_ref(),
        }
    }

    pub fn param_mut(&mut self, layer: usize, slot: ParamSlot) -> Option<&mut Tensor> {
        let p = &mut self.params[layer];
        match slot {
            ParamSlot::Weight => p.weight.as_mut(),
            ParamSlot::Bias => p.bias.as_mut(),
        }
    }

    /// All populated parameter slots in declaration order.
    pub fn param_slots(&self) -> Vec<(usize, ParamSlot)> {
        let mut slots = Vec::new();
        for (l, p) in self.params.iter().enumerate() {
            if p.weight.is_some() {
                slots.push((l, ParamSlot::Weight));
            }
            if p.bias.is_some() {
                slots.push((l, ParamSlot::Bias));
            }
        }
        slots
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .map(|p| {
                p.weight.as_ref().map_or(0, Tensor::len) + p.bias.as_ref().map_or(0, Tensor::len)
            })
            .sum()
    }

    /// Index of the replaceable classification head: the last parameterized
    /// layer.
    pub fn head_index(&self) -> usize {
        self.specs
            .iter()
            .rposition(LayerSpec::has_params)
            .expect("network has at least one parameterized layer")
    }

    /// Layers eligible for filter grouping: dense/conv layers except the head.
    pub fn clusterable_layers(&self) -> Vec<usize> {
        let head = self.head_index();
        (0..self.specs.len())
            .filter(|&l| l != head && self.specs[l].has_params())
            .collect()
    }

    /// Record index holding layer `layer`'s post-nonlinearity activations:
    /// the following ReLU's output when present, the layer's own otherwise.
    pub fn post_activation_index(&self, layer: usize) -> usize {
        if layer + 1 < self.specs.len() && matches!(self.specs[layer + 1], LayerSpec::Relu) {
            layer + 1
        } else {
            layer
        }
    }

    /// Re-initialize the head for a new task with `classes` outputs. The head
    /// must be a dense layer.
    pub fn replace_head<R: Rng>(&mut self, classes: usize, rng: &mut R) -> Result<()> {
        let head = self.head_index();
        match &mut self.specs[head] {
            LayerSpec::Dense {
                in_dim, out_dim, ..
            } => {
                *out_dim = classes;
                let spec = LayerSpec::dense(*in_dim, classes);
                self.params[head] = init_params(&spec, rng);
                Ok(())
            }
            other => Err(Error::BadLayerSpec(format!(
                "head must be a dense layer, found {other:?}"
            ))),
        }
    }

    /// Number of classes produced by the head.
    pub fn num_classes(&self) -> usize {
        self.specs[self.head_index()]
            .filter_count()
            .expect("head is parameterized")
    }

    /// Forward pass over a batch whose shape is `[B] + input_shape`.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, ActivationRecord)> {
        if batch.shape().len() < 2 || batch.shape()[1..] != *self.input_shape {
            return Err(Error::ShapeMismatch {
                layer: 0,
                detail: format!(
                    "batch shape {:?} does not end with input shape {:?}",
                    batch.shape(),
                    self.input_shape
                ),
            });
        }
        let mut outputs = Vec::with_capacity(self.specs.len());
        let mut current = batch.clone();
        for (l, spec) in self.specs.iter().enumerate() {
            current = self.layer_forward(l, spec, &current)?;
            if !current.all_finite() {
                return Err(Error::NonFinite(format!("forward output of layer {l}")));
            }
            outputs.push(current.clone());
        }
        let record = ActivationRecord {
            input: batch.clone(),
            outputs,
        };
        Ok((current, record))
    }

    fn layer_forward(&self, l: usize, spec: &LayerSpec, input: &Tensor) -> Result<Tensor> {
        let batch = input.shape()[0];
        let sample_shape = &input.shape()[1..];
        let out_sample = spec.output_shape(l, sample_shape)?;
        match spec {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let w = self.params[l].weight.as_ref().expect("dense weight");
                let b = self.params[l].bias.as_ref();
                let x = input.data();
                let mut out = Tensor::zeros(&[batch, *out_dim]);
                let od = out.data_mut();
                for bi in 0..batch {
                    let xr = &x[bi * in_dim..(bi + 1) * in_dim];
                    let yr = &mut od[bi * out_dim..(bi + 1) * out_dim];
                    for (o, y) in yr.iter_mut().enumerate() {
                        let wr = w.row(o);
                        let mut acc = b.map_or(0.0, |b| b.data()[o]);
                        for (xi, wi) in xr.iter().zip(wr.iter()) {
                            acc += xi * wi;
                        }
                        *y = acc;
                    }
                }
                Ok(out)
            }
            LayerSpec::Conv2d {
                in_shape,
                filters,
                kernel,
                stride,
                ..
            } => {
                let [h, w_in, c] = *in_shape;
                let (oh, ow) = (out_sample[0], out_sample[1]);
                let wt = self.params[l].weight.as_ref().expect("conv weight");
                let bias = self.params[l].bias.as_ref();
                let k = *kernel;
                let f = *filters;
                let s = *stride;
                let x = input.data();
                let wd = wt.data();
                let mut out = Tensor::zeros(&[batch, oh, ow, f]);
                let od = out.data_mut();
                for bi in 0..batch {
                    let xb = &x[bi * h * w_in * c..(bi + 1) * h * w_in * c];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let obase = ((bi * oh + oy) * ow + ox) * f;
                            for fi in 0..f {
                                let mut acc = bias.map_or(0.0, |b| b.data()[fi]);
                                let wbase = fi * k * k * c;
                                for ky in 0..k {
                                    let iy = oy * s + ky;
                                    for kx in 0..k {
                                        let ix = ox * s + kx;
                                        let xbase = (iy * w_in + ix) * c;
                                        let wrow = wbase + (ky * k + kx) * c;
                                        for ci in 0..c {
                                            acc += wd[wrow + ci] * xb[xbase + ci];
                                        }
                                    }
                                }
                                od[obase + fi] = acc;
                            }
                        }
                    }
                }
                Ok(out)
            }
            LayerSpec::Relu => {
                let mut out = input.clone();
                for v in out.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                Ok(out)
            }
            LayerSpec::Softmax => {
                let d = out_sample[0];
                let mut out = input.clone();
                for bi in 0..batch {
                    let row = &mut out.data_mut()[bi * d..(bi + 1) * d];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                Ok(out)
            }
        }
    }

    /// Check that `record` was produced by a forward pass of this network.
    pub fn validate_record(&self, record: &ActivationRecord) -> Result<()> {
        if record.outputs.len() != self.specs.len() {
            return Err(Error::StaleRecord(format!(
                "record has {} layer outputs, network has {} layers",
                record.outputs.len(),
                self.specs.len()
            )));
        }
        if record.input.shape().len() < 2 || record.input.shape()[1..] != *self.input_shape {
            return Err(Error::StaleRecord(format!(
                "record input shape {:?} does not match network input {:?}",
                record.input.shape(),
                self.input_shape
            )));
        }
        let b = record.batch_size();
        let mut shape = self.input_shape.clone();
        for (l, spec) in self.specs.iter().enumerate() {
            shape = spec.output_shape(l, &shape)?;
            let mut expect = vec![b];
            expect.extend_from_slice(&shape);
            if record.outputs[l].shape() != expect.as_slice() {
                return Err(Error::StaleRecord(format!(
                    "layer {l} output shape {:?} != expected {expect:?}",
                    record.outputs[l].shape()
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode gradients for a loss whose gradient w.r.t. the network
    /// output (logits) is `loss_grad`.
    pub fn backward(&self, record: &ActivationRecord, loss_grad: &Tensor) -> Result<GradientSet> {
        let mut seed = BackpropSeed::new(self.specs.len());
        seed.add(self.specs.len() - 1, loss_grad, 1.0);
        self.backward_multi(record, &seed)
    }

    /// Reverse-mode gradients with contributions injected at arbitrary layer
    /// outputs. This is what lets the hybrid loss mix logit-level and
    /// activation-level terms in one backward pass.
    pub fn backward_multi(
        &self,
        record: &ActivationRecord,
        seed: &BackpropSeed,
    ) -> Result<GradientSet> {
        self.validate_record(record)?;
        if seed.len() != self.specs.len() {
            return Err(Error::StaleRecord(format!(
                "seed has {} slots, network has {} layers",
                seed.len(),
                self.specs.len()
            )));
        }
        let mut grads = GradientSet::zeros_like(self);
        let last = self.specs.len() - 1;
        let mut upstream = Tensor::zeros_like(&record.outputs[last]);
        for l in (0..self.specs.len()).rev() {
            if let Some(s) = seed.at(l) {
                if s.shape() != record.outputs[l].shape() {
                    return Err(Error::StaleRecord(format!(
                        "seed at layer {l} has shape {:?}, expected {:?}",
                        s.shape(),
                        record.outputs[l].shape()
                    )));
                }
                upstream.add_scaled(s, 1.0);
            }
            upstream = self.layer_backward(l, record, &upstream, &mut grads)?;
        }
        Ok(grads)
    }

    /// Gradient of one layer: consumes grad w.r.t. the layer output, fills
    /// parameter gradients, returns grad w.r.t. the layer input.
    fn layer_backward(
        &self,
        l: usize,
        record: &ActivationRecord,
        gout: &Tensor,
        grads: &mut GradientSet,
    ) -> Result<Tensor> {
        let input = record.input_of(l);
        let batch = input.shape()[0];
        match &self.specs[l] {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let w = self.params[l].weight.as_ref().expect("dense weight");
                let gw = grads.layers[l].weight.as_mut().expect("dense weight grad");
                let x = input.data();
                let g = gout.data();
                for bi in 0..batch {
                    let xr = &x[bi * in_dim..(bi + 1) * in_dim];
                    let gr = &g[bi * out_dim..(bi + 1) * out_dim];
                    let gwd = gw.data_mut();
                    for (o, go) in gr.iter().enumerate() {
                        let wrow = &mut gwd[o * in_dim..(o + 1) * in_dim];
                        for (wi, xi) in wrow.iter_mut().zip(xr.iter()) {
                            *wi += go * xi;
                        }
                    }
                }
                if let Some(gb) = grads.layers[l].bias.as_mut() {
                    let gbd = gb.data_mut();
                    for bi in 0..batch {
                        let gr = &g[bi * out_dim..(bi + 1) * out_dim];
                        for (o, go) in gr.iter().enumerate() {
                            gbd[o] += go;
                        }
                    }
                }
                let mut gin = Tensor::zeros_like(input);
                let gi = gin.data_mut();
                let wd = w.data();
                for bi in 0..batch {
                    let gr = &g[bi * out_dim..(bi + 1) * out_dim];
                    let gir = &mut gi[bi * in_dim..(bi + 1) * in_dim];
                    for (o, go) in gr.iter().enumerate() {
                        let wrow = &wd[o * in_dim..(o + 1) * in_dim];
                        for (giv, wv) in gir.iter_mut().zip(wrow.iter()) {
                            *giv += go * wv;
                        }
                    }
                }
                Ok(gin)
            }
            LayerSpec::Conv2d {
                in_shape,
                filters,
                kernel,
                stride,
                ..
            } => {
                let [h, w_in, c] = *in_shape;
                let k = *kernel;
                let f = *filters;
                let s = *stride;
                let oh = (h - k) / s + 1;
                let ow = (w_in - k) / s + 1;
                let wt = self.params[l].weight.as_ref().expect("conv weight");
                let x = input.data();
                let g = gout.data();
                let wd = wt.data();
                let mut gin = Tensor::zeros_like(input);
                {
                    let gw = grads.layers[l].weight.as_mut().expect("conv weight grad");
                    let gwd = gw.data_mut();
                    let gi = gin.data_mut();
                    for bi in 0..batch {
                        let xb = &x[bi * h * w_in * c..(bi + 1) * h * w_in * c];
                        let gib = &mut gi[bi * h * w_in * c..(bi + 1) * h * w_in * c];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let obase = ((bi * oh + oy) * ow + ox) * f;
                                for fi in 0..f {
                                    let go = g[obase + fi];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let wbase = fi * k * k * c;
                                    for ky in 0..k {
                                        let iy = oy * s + ky;
                                        for kx in 0..k {
                                            let ix = ox * s + kx;
                                            let xbase = (iy * w_in + ix) * c;
                                            let wrow = wbase + (ky * k + kx) * c;
                                            for ci in 0..c {
                                                gwd[wrow + ci] += go * xb[xbase + ci];
                                                gib[xbase + ci] += go * wd[wrow + ci];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = grads.layers[l].bias.as_mut() {
                    let gbd = gb.data_mut();
                    for bi in 0..batch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let obase = ((bi * oh + oy) * ow + ox) * f;
                                for fi in 0..f {
                                    gbd[fi] += g[obase + fi];
                                }
                            }
                        }
                    }
                }
                Ok(gin)
            }
            LayerSpec::Relu => {
                let mut gin = gout.clone();
                for (gv, xv) in gin.data_mut().iter_mut().zip(input.data().iter()) {
                    if *xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(gin)
            }
            LayerSpec::Softmax => {
                let y = &record.outputs[l];
                let d = y.shape()[1];
                let mut gin = Tensor::zeros_like(y);
                for bi in 0..batch {
                    let yr = y.row(bi);
                    let gr = gout.row(bi);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    let gi = &mut gin.data_mut()[bi * d..(bi + 1) * d];
                    for ((giv, yv), gv) in gi.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *giv = yv * (gv - dot);
                    }
                }
                Ok(gin)
            }
        }
    }
}

fn init_params<R: Rng>(spec: &LayerSpec, rng: &mut R) -> LayerParams {
    match *spec {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            has_bias,
        } => {
            let std = 1.0 / (in_dim as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let data: Vec<f64> = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
            LayerParams {
                weight: Some(Tensor::new(vec![out_dim, in_dim], data).expect("init shape")),
                bias: has_bias.then(|| Tensor::zeros(&[out_dim])),
            }
        }
        LayerSpec::Conv2d {
            filters,
            kernel,
            in_shape,
            has_bias,
            ..
        } => {
            let c = in_shape[2];
            let fan_in = kernel * kernel * c;
            let std = 1.0 / (fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let data: Vec<f64> = (0..filters * fan_in).map(|_| normal.sample(rng)).collect();
            LayerParams {
                weight: Some(
                    Tensor::new(vec![filters, kernel, kernel, c], data).expect("init shape"),
                ),
                bias: has_bias.then(|| Tensor::zeros(&[filters])),
            }
        }
        LayerSpec::Relu | LayerSpec::Softmax => LayerParams::empty(),
    }
}

fn check_param_shapes(l: usize, spec: &LayerSpec, params: &LayerParams) -> Result<()> {
    let bad = |detail: String| Err(Error::BadLayerSpec(format!("layer {l}: {detail}")));
    match *spec {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            has_bias,
        } => {
            match &params.weight {
                Some(w) if w.shape() == [out_dim, in_dim] => {}
                other => return bad(format!("dense weight shape {other:?}")),
            }
            match (&params.bias, has_bias) {
                (Some(b), true) if b.shape() == [out_dim] => {}
                (None, false) => {}
                other => return bad(format!("dense bias mismatch {other:?}")),
            }
        }
        LayerSpec::Conv2d {
            in_shape,
            filters,
            kernel,
            has_bias,
            ..
        } => {
            let c = in_shape[2];
            match &params.weight {
                Some(w) if w.shape() == [filters, kernel, kernel, c] => {}
                other => return bad(format!("conv weight shape {other:?}")),
            }
            match (&params.bias, has_bias) {
                (Some(b), true) if b.shape() == [filters] => {}
                (None, false) => {}
                other => return bad(format!("conv bias mismatch {other:?}")),
            }
        }
        LayerSpec::Relu | LayerSpec::Softmax => {
            if params.weight.is_some() || params.bias.is_some() {
                return bad("activation layers carry no parameters".into());
            }
        }
    }
    Ok(())
}
