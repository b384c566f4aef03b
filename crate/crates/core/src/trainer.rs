//! Fine-tuning with group-averaged gradient updates.
//!
//! Filters that share a group receive one shared delta per iteration: the
//! mean of their individual gradients, written identically to every member.
//! To keep within-group parameter differences constant to the last bit over
//! hundreds of updates, grouped parameters and their shared deltas are
//! aligned to a fixed power-of-two grid; on-grid subtraction is exact in
//! 64-bit floats, so a shared delta cannot bend members apart. Singleton
//! groups and ungrouped layers take the plain update path untouched.

use crate::clustering::GroupAssignment;
use crate::error::{Error, Result};
use crate::losses::{
    self, EmbeddingSource, HybridLoss, LossWeights, MetricKind,
};
use crate::data::Dataset;
use crate::network::{GradientSet, Network, ParamSlot};
use crate::tensor::Tensor;

/// Grid pitch for multi-member group parameters: 2^-40. Fine enough that
/// snapping perturbs a weight by at most 5e-13, coarse enough that on-grid
/// values stay exactly representable through every shared update.
pub const GROUP_GRID: f64 = 9.094947017729282379150390625e-13;
const GROUP_GRID_INV: f64 = 1099511627776.0; // 2^40

/// Nearest grid point. Exact: scaling by a power of two and rounding to an
/// integer both introduce no error for the magnitudes involved.
#[inline]
pub fn snap_to_grid(x: f64) -> f64 {
    (x * GROUP_GRID_INV).round() * GROUP_GRID
}

/// Step schedule: one rate before the decay iteration, another from it on.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_at: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.01,
            decayed: 0.001,
            decay_at: 1000,
        }
    }
}

impl LrSchedule {
    pub fn rate(&self, iteration: usize) -> f64 {
        if iteration < self.decay_at {
            self.initial
        } else {
            self.decayed
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("initial", self.initial), ("decayed", self.decayed)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::BadConfig(format!(
                    "learning rate {name} must be finite and > 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Metric-term selection for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetricChoice {
    /// Triplet when some class has two or more samples, margin otherwise.
    #[default]
    Auto,
    Triplet,
    Margin,
    Off,
}

impl MetricChoice {
    fn resolve(&self, labels: &[usize]) -> Option<MetricKind> {
        match self {
            MetricChoice::Auto => Some(losses::auto_metric(labels)),
            MetricChoice::Triplet => Some(MetricKind::Triplet),
            MetricChoice::Margin => Some(MetricKind::Margin),
            MetricChoice::Off => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(MetricChoice::Auto),
            "triplet" => Ok(MetricChoice::Triplet),
            "margin" => Ok(MetricChoice::Margin),
            "off" => Ok(MetricChoice::Off),
            other => Err(Error::BadConfig(format!(
                "unknown metric choice `{other}` (expected auto, triplet, margin, off)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MetricChoice::Auto => "auto",
            MetricChoice::Triplet => "triplet",
            MetricChoice::Margin => "margin",
            MetricChoice::Off => "off",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneConfig {
    pub schedule: LrSchedule,
    pub iterations: usize,
    pub weights: LossWeights,
    pub metric: MetricChoice,
    pub embedding: EmbeddingSource,
    /// When set, only these layers keep their groups; all other layers train
    /// per-filter. Serves clustered-layer ablations.
    pub clustered_layers: Option<Vec<usize>>,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            schedule: LrSchedule::default(),
            iterations: 2000,
            weights: LossWeights::default(),
            metric: MetricChoice::Auto,
            embedding: EmbeddingSource::Penultimate,
            clustered_layers: None,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.iterations == 0 {
            return Err(Error::BadConfig("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// One loss-trace sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTraceRow {
    pub iteration: usize,
    pub class: f64,
    pub intra: f64,
    pub inter: f64,
    pub metric: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub network: Network,
    pub trace: Vec<LossTraceRow>,
    /// Argmax accuracy on the validation set, in [0, 1].
    pub accuracy: f64,
}

/// Replace every member gradient by its group mean, weights and bias jointly.
/// The mean is computed once per group and the identical value written to
/// every member; singleton groups and ungrouped layers pass through.
pub fn average_group_gradients(
    grads: &GradientSet,
    assignment: &GroupAssignment,
) -> Result<GradientSet> {
    let mut out = grads.clone();
    for lg in assignment.layers() {
        let layer = lg.layer;
        let entry = out
            .layers
            .get_mut(layer)
            .ok_or_else(|| Error::BadAssignment(format!("layer {layer} beyond gradient set")))?;
        let weight = entry.weight.as_mut().ok_or_else(|| {
            Error::BadAssignment(format!("layer {layer} carries no weight gradient"))
        })?;
        if weight.shape()[0] != lg.num_filters() {
            return Err(Error::BadAssignment(format!(
                "layer {layer}: {} filters in gradients, {} in assignment",
                weight.shape()[0],
                lg.num_filters()
            )));
        }
        let block = weight.len() / lg.num_filters();
        for members in &lg.groups {
            if members.len() < 2 {
                continue;
            }
            let inv = 1.0 / members.len() as f64;
            let data = weight.data_mut();
            for t in 0..block {
                let mean: f64 =
                    members.iter().map(|&m| data[m * block + t]).sum::<f64>() * inv;
                for &m in members {
                    data[m * block + t] = mean;
                }
            }
            if let Some(bias) = entry.bias.as_mut() {
                let data = bias.data_mut();
                let mean: f64 = members.iter().map(|&m| data[m]).sum::<f64>() * inv;
                for &m in members {
                    data[m] = mean;
                }
            }
        }
    }
    Ok(out)
}

/// Plain SGD: every parameter decremented by `lr` times its gradient.
pub fn sgd_step(net: &mut Network, grads: &GradientSet, lr: f64) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::BadConfig(format!(
            "learning rate must be finite and > 0, got {lr}"
        )));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients before update".into()));
    }
    for (layer, slot) in net.param_slots() {
        let g = match slot {
            ParamSlot::Weight => grads.layers[layer].weight.as_ref(),
            ParamSlot::Bias => grads.layers[layer].bias.as_ref(),
        }
        .ok_or_else(|| {
            Error::StaleRecord(format!("gradient missing for layer {layer} {slot:?}"))
        })?;
        let p = net.param_mut(layer, slot).expect("listed slot");
        for (w, gv) in p.data_mut().iter_mut().zip(g.data().iter()) {
            *w -= lr * gv;
        }
    }
    Ok(())
}

/// Per-filter flat views used by the grouped update and the grid alignment.
fn filter_block(t: &mut Tensor, filters: usize, f: usize) -> &mut [f64] {
    let block = t.len() / filters;
    &mut t.data_mut()[f * block..(f + 1) * block]
}

/// Align every multi-member group's parameters to the shared grid. Performed
/// once at the start of grouped fine-tuning; idempotent. Singleton groups
/// are left untouched.
pub fn align_groups_to_grid(net: &mut Network, assignment: &GroupAssignment) -> Result<()> {
    assignment.validate_against(net)?;
    for lg in assignment.layers() {
        let filters = lg.num_filters();
        for members in &lg.groups {
            if members.len() < 2 {
                continue;
            }
            for &m in members {
                if let Some(w) = net.param_mut(lg.layer, ParamSlot::Weight) {
                    for v in filter_block(w, filters, m) {
                        *v = snap_to_grid(*v);
                    }
                }
                if let Some(b) = net.param_mut(lg.layer, ParamSlot::Bias) {
                    b.data_mut()[m] = snap_to_grid(b.data_mut()[m]);
                }
            }
        }
    }
    Ok(())
}

/// Grouped SGD step. Multi-member groups move by their shared delta snapped
/// to the grid (identical bits for every member, exact on-grid arithmetic);
/// everything else takes the plain `w -= lr * g` update.
/// Pre: `grads` already group-averaged.
pub fn apply_grouped_step(
    net: &mut Network,
    grads: &GradientSet,
    assignment: &GroupAssignment,
    lr: f64,
) -> Result<()> {
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::BadConfig(format!(
            "learning rate must be finite and > 0, got {lr}"
        )));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradients before update".into()));
    }
    let grouped: Vec<usize> = assignment.layers().iter().map(|lg| lg.layer).collect();
    for (layer, slot) in net.param_slots() {
        let g = match slot {
            ParamSlot::Weight => grads.layers[layer].weight.as_ref(),
            ParamSlot::Bias => grads.layers[layer].bias.as_ref(),
        }
        .ok_or_else(|| {
            Error::StaleRecord(format!("gradient missing for layer {layer} {slot:?}"))
        })?;
        match grouped.iter().position(|&l| l == layer) {
            None => {
                let p = net.param_mut(layer, slot).expect("listed slot");
                for (w, gv) in p.data_mut().iter_mut().zip(g.data().iter()) {
                    *w -= lr * gv;
                }
            }
            Some(idx) => {
                let lg = &assignment.layers()[idx];
                let filters = lg.num_filters();
                let gdata = g.data();
                let block = gdata.len() / filters;
                let p = net.param_mut(layer, slot).expect("listed slot");
                let pdata = p.data_mut();
                for members in &lg.groups {
                    if members.len() < 2 {
                        for &m in members {
                            for t in 0..block {
                                pdata[m * block + t] -= lr * gdata[m * block + t];
                            }
                        }
                    } else {
                        for &m in members {
                            for t in 0..block {
                                // members carry bit-identical averaged
                                // gradients, so the snapped step is the same
                                // for all of them
                                pdata[m * block + t] -=
                                    snap_to_grid(lr * gdata[m * block + t]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// Argmax classification accuracy; prediction ties resolve to the lowest
/// class index.
pub fn evaluate(net: &Network, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::BadDataset("cannot evaluate on an empty dataset".into()));
    }
    let (logits, _) = net.forward(dataset.images())?;
    let classes = logits.shape()[1];
    let mut correct = 0usize;
    for (i, &label) in dataset.labels().iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

fn non_finite_to_divergence(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(_) => Error::Divergence { iteration },
        other => other,
    }
}

/// Fine-tune under a group assignment: per iteration, forward on the full
/// training batch, hybrid loss, backward, group-average, grouped update.
/// The trace holds one row per iteration; accuracy is measured on `val` at
/// the end. Non-finite losses or activations abort with the iteration index.
pub fn fine_tune(
    net: &Network,
    assignment: &GroupAssignment,
    train: &Dataset,
    val: &Dataset,
    cfg: &FineTuneConfig,
) -> Result<FineTuneResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::BadDataset("empty fine-tuning dataset".into()));
    }
    let assignment = match &cfg.clustered_layers {
        None => assignment.clone(),
        Some(layers) => restrict_assignment(assignment, layers)?,
    };
    let mut net = net.clone();
    assignment.validate_against(&net)?;
    align_groups_to_grid(&mut net, &assignment)?;
    let batch = train.images();
    let labels = train.labels();
    let metric = cfg.metric.resolve(labels);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let lr = cfg.schedule.rate(iteration);
        let (loss, grads) = (|| -> Result<(HybridLoss, GradientSet)> {
            let (_, record) = net.forward(batch)?;
            let loss = losses::hybrid_loss(
                &net,
                &record,
                labels,
                Some(&assignment),
                metric,
                cfg.embedding,
                &cfg.weights,
            )?;
            let grads = net.backward_multi(&record, &loss.seed)?;
            let grads = average_group_gradients(&grads, &assignment)?;
            Ok((loss, grads))
        })()
        .map_err(|e| non_finite_to_divergence(e, iteration))?;
        apply_grouped_step(&mut net, &grads, &assignment, lr)
            .map_err(|e| non_finite_to_divergence(e, iteration))?;
        trace.push(LossTraceRow {
            iteration,
            class: loss.parts.class,
            intra: loss.parts.intra,
            inter: loss.parts.inter,
            metric: loss.parts.metric,
            total: loss.total,
            lr,
        });
    }
    let accuracy = evaluate(&net, val)?;
    Ok(FineTuneResult {
        network: net,
        trace,
        accuracy,
    })
}

/// Plain cross-entropy fine-tuning: no grouping, no averaging, no grid. The
/// reference the grouped path must reduce to under an all-singleton
/// assignment with zeroed auxiliary weights.
pub fn fine_tune_plain(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    cfg: &FineTuneConfig,
) -> Result<FineTuneResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::BadDataset("empty fine-tuning dataset".into()));
    }
    let mut net = net.clone();
    let batch = train.images();
    let labels = train.labels();
    let head = net.head_index();
    let mut trace = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let lr = cfg.schedule.rate(iteration);
        let (loss, grads) = (|| -> Result<(f64, GradientSet)> {
            let (_, record) = net.forward(batch)?;
            let (loss, grad) = losses::cross_entropy(record.output(head), labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("classification loss".into()));
            }
            let mut seed = crate::network::BackpropSeed::new(net.num_layers());
            seed.add(head, &grad, 1.0);
            let grads = net.backward_multi(&record, &seed)?;
            Ok((loss, grads))
        })()
        .map_err(|e| non_finite_to_divergence(e, iteration))?;
        sgd_step(&mut net, &grads, lr).map_err(|e| non_finite_to_divergence(e, iteration))?;
        trace.push(LossTraceRow {
            iteration,
            class: loss,
            intra: 0.0,
            inter: 0.0,
            metric: 0.0,
            total: loss,
            lr,
        });
    }
    let accuracy = evaluate(&net, val)?;
    Ok(FineTuneResult {
        network: net,
        trace,
        accuracy,
    })
}

/// Keep only the listed layers' groups. Every listed layer must be present
/// in the assignment.
pub fn restrict_assignment(
    assignment: &GroupAssignment,
    layers: &[usize],
) -> Result<GroupAssignment> {
    let mut kept = Vec::new();
    for &layer in layers {
        match assignment.for_layer(layer) {
            Some(lg) => kept.push(lg.clone()),
            None => {
                return Err(Error::BadConfig(format!(
                    "layer {layer} is not part of the group assignment"
                )))
            }
        }
    }
    kept.sort_by_key(|lg| lg.layer);
    GroupAssignment::new(kept)
}
