//! Hybrid training objective: cross-entropy plus metric and group terms.
//!
//! The total loss is `L_class + alpha * L_intra + beta * L_inter +
//! gamma * L_metric`, where the metric term is a triplet hinge over all valid
//! triplets in the batch, degenerating to a cross-class margin hinge when
//! every class has a single sample. The group terms pull activation profiles
//! together within a group and decorrelate them across groups.
//!
//! Every component reports its gradient as a [`BackpropSeed`] contribution
//! (or a logits/embedding gradient), so one reverse pass computes the
//! gradient of the weighted sum.

use crate::clustering::GroupAssignment;
use crate::error::{Error, Result};
use crate::network::{ActivationRecord, BackpropSeed, Network};
use crate::tensor::Tensor;

/// Distance between embedding vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    SquaredEuclidean,
    /// Half the L1 distance.
    TotalVariation,
}

impl DistanceKind {
    pub fn value(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceKind::SquaredEuclidean => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum(),
            DistanceKind::TotalVariation => {
                0.5 * a
                    .iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
            }
        }
    }

    /// Accumulate `scale * d d(a,b)/d a` into `ga` and the `b` counterpart
    /// into `gb`. Subgradient 0 where coordinates tie.
    fn accumulate_grad(&self, a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
        match self {
            DistanceKind::SquaredEuclidean => {
                for i in 0..a.len() {
                    let g = 2.0 * (a[i] - b[i]) * scale;
                    ga[i] += g;
                    gb[i] -= g;
                }
            }
            DistanceKind::TotalVariation => {
                for i in 0..a.len() {
                    let diff = a[i] - b[i];
                    if diff != 0.0 {
                        let g = 0.5 * diff.signum() * scale;
                        ga[i] += g;
                        gb[i] -= g;
                    }
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "squared-euclidean" => Ok(DistanceKind::SquaredEuclidean),
            "total-variation" => Ok(DistanceKind::TotalVariation),
            other => Err(Error::BadConfig(format!(
                "unknown distance `{other}` (expected squared-euclidean or total-variation)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::SquaredEuclidean => "squared-euclidean",
            DistanceKind::TotalVariation => "total-variation",
        }
    }
}

/// Which activations feed the metric term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmbeddingSource {
    /// Input of the classification head.
    #[default]
    Penultimate,
    /// Output of the classification head.
    Logits,
}

impl EmbeddingSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "penultimate" => Ok(EmbeddingSource::Penultimate),
            "logits" => Ok(EmbeddingSource::Logits),
            other => Err(Error::BadConfig(format!(
                "unknown embedding source `{other}` (expected penultimate or logits)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingSource::Penultimate => "penultimate",
            EmbeddingSource::Logits => "logits",
        }
    }
}

/// Metric term variant; margin is the one-shot reduction of triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Triplet,
    Margin,
}

/// Coefficients of the hybrid objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub margin: f64,
    pub alpha_intra: f64,
    pub beta_inter: f64,
    pub gamma_metric: f64,
    pub distance: DistanceKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            margin: 1.0,
            alpha_intra: 0.1,
            beta_inter: 0.01,
            gamma_metric: 1.0,
            distance: DistanceKind::SquaredEuclidean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("alpha", self.alpha_intra),
            ("beta", self.beta_inter),
            ("gamma", self.gamma_metric),
        ];
        for (name, v) in coeffs {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::BadConfig(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::BadConfig(format!(
                "margin must be finite and > 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }

    /// Cross-entropy only; what plain fine-tuning optimizes.
    pub fn class_only() -> Self {
        LossWeights {
            alpha_intra: 0.0,
            beta_inter: 0.0,
            gamma_metric: 0.0,
            ..LossWeights::default()
        }
    }
}

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::BadDataset(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch; returns the loss and its
/// gradient w.r.t. the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape().len() != 2 {
        return Err(Error::BadDataset(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    check_labels(b, c, labels)?;
    let scale = 1.0 / b as f64;
    let mut grad = Tensor::zeros_like(logits);
    let mut loss = 0.0;
    for bi in 0..b {
        let row = logits.row(bi);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = sum.ln();
        loss += scale * (log_sum - (row[labels[bi]] - max));
        let grow = &mut grad.data_mut()[bi * c..(bi + 1) * c];
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (row[j] - max).exp() / sum;
            *g = scale * (p - if j == labels[bi] { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

/// Rows of a `[batch, ...]` tensor viewed as flat embedding vectors.
fn embedding_rows(embeddings: &Tensor) -> (usize, usize) {
    let b = embeddings.shape()[0];
    (b, embeddings.len() / b)
}

/// Triplet hinge summed over every (anchor, positive, negative) with anchor
/// and positive sharing a class (ordered, distinct) and the negative from a
/// different class. Returns the loss and its gradient w.r.t. the embeddings.
pub fn triplet_loss(
    embeddings: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(f64, Tensor)> {
    w.validate()?;
    let (b, d) = embedding_rows(embeddings);
    if labels.len() != b {
        return Err(Error::BadDataset(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let e = embeddings.data();
    let row = |i: usize| &e[i * d..(i + 1) * d];
    let mut grad = Tensor::zeros_like(embeddings);
    let mut loss = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j || labels[i] != labels[j] {
                continue;
            }
            let d_pos = w.distance.value(row(i), row(j));
            for k in 0..b {
                if labels[k] == labels[i] {
                    continue;
                }
                let d_neg = w.distance.value(row(i), row(k));
                let h = d_pos - d_neg + w.margin;
                if h > 0.0 {
                    loss += h;
                    let g = grad.data_mut();
                    // split borrows via index math on the flat buffer
                    let mut gi = vec![0.0; d];
                    let mut gj = vec![0.0; d];
                    let mut gk = vec![0.0; d];
                    w.distance.accumulate_grad(row(i), row(j), 1.0, &mut gi, &mut gj);
                    w.distance.accumulate_grad(row(i), row(k), -1.0, &mut gi, &mut gk);
                    for t in 0..d {
                        g[i * d + t] += gi[t];
                        g[j * d + t] += gj[t];
                        g[k * d + t] += gk[t];
                    }
                }
            }
        }
    }
    Ok((loss, grad))
}

/// One-shot metric term: hinge `[margin - d]_+` summed over unordered
/// cross-class pairs.
pub fn margin_loss(
    embeddings: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(f64, Tensor)> {
    w.validate()?;
    let (b, d) = embedding_rows(embeddings);
    if labels.len() != b {
        return Err(Error::BadDataset(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let e = embeddings.data();
    let row = |i: usize| &e[i * d..(i + 1) * d];
    let mut grad = Tensor::zeros_like(embeddings);
    let mut loss = 0.0;
    for i in 0..b {
        for k in i + 1..b {
            if labels[i] == labels[k] {
                continue;
            }
            let dist = w.distance.value(row(i), row(k));
            let h = w.margin - dist;
            if h > 0.0 {
                loss += h;
                let mut gi = vec![0.0; d];
                let mut gk = vec![0.0; d];
                w.distance.accumulate_grad(row(i), row(k), -1.0, &mut gi, &mut gk);
                let g = grad.data_mut();
                for t in 0..d {
                    g[i * d + t] += gi[t];
                    g[k * d + t] += gk[t];
                }
            }
        }
    }
    Ok((loss, grad))
}

/// Per-filter activation profiles of one grouped layer taken from a captured
/// record, plus the bookkeeping to push profile gradients back onto the
/// activation tensor.
struct LayerProfiles {
    /// Record index the profiles were read from.
    act_index: usize,
    /// `[filters][batch]`.
    values: Vec<Vec<f64>>,
    /// `[filters][batch]` gradient accumulator.
    grads: Vec<Vec<f64>>,
    /// Spatial positions averaged per profile entry (1 for dense).
    spatial: usize,
}

impl LayerProfiles {
    fn build(net: &Network, record: &ActivationRecord, layer: usize, filters: usize) -> Self {
        let act_index = net.post_activation_index(layer);
        let act = record.output(act_index);
        let shape = act.shape();
        let b = shape[0];
        let mut values = vec![vec![0.0; b]; filters];
        let spatial = if shape.len() == 2 {
            for bi in 0..b {
                let row = act.row(bi);
                for (f, v) in values.iter_mut().enumerate() {
                    v[bi] = row[f];
                }
            }
            1
        } else {
            let (oh, ow, f_dim) = (shape[1], shape[2], shape[3]);
            let data = act.data();
            for bi in 0..b {
                for pos in 0..oh * ow {
                    let base = (bi * oh * ow + pos) * f_dim;
                    for (f, v) in values.iter_mut().enumerate() {
                        v[bi] += data[base + f];
                    }
                }
                for v in values.iter_mut() {
                    v[bi] /= (oh * ow) as f64;
                }
            }
            oh * ow
        };
        LayerProfiles {
            act_index,
            values,
            grads: vec![vec![0.0; b]; filters],
            spatial,
        }
    }

    /// Scatter accumulated profile gradients into a seed contribution on the
    /// activation tensor.
    fn flush(self, record: &ActivationRecord, seed: &mut BackpropSeed) {
        let act = record.output(self.act_index);
        let mut contrib = Tensor::zeros_like(act);
        let shape = act.shape();
        let b = shape[0];
        let filters = self.values.len();
        if shape.len() == 2 {
            let data = contrib.data_mut();
            for bi in 0..b {
                for f in 0..filters {
                    data[bi * filters + f] = self.grads[f][bi];
                }
            }
        } else {
            let (oh, ow, f_dim) = (shape[1], shape[2], shape[3]);
            let inv = 1.0 / self.spatial as f64;
            let data = contrib.data_mut();
            for bi in 0..b {
                for pos in 0..oh * ow {
                    let base = (bi * oh * ow + pos) * f_dim;
                    for f in 0..filters {
                        data[base + f] = self.grads[f][bi] * inv;
                    }
                }
            }
        }
        seed.add(self.act_index, &contrib, 1.0);
    }
}

fn grouped_profiles(
    net: &Network,
    record: &ActivationRecord,
    assignment: &GroupAssignment,
) -> Result<Vec<(usize, LayerProfiles)>> {
    net.validate_record(record)?;
    assignment.validate_against(net)?;
    Ok(assignment
        .layers()
        .iter()
        .map(|lg| {
            (
                lg.layer,
                LayerProfiles::build(net, record, lg.layer, lg.num_filters()),
            )
        })
        .collect())
}

/// Within-group profile cohesion: the sum of `||A_i - A_j||_2` over unordered
/// member pairs of every group, every grouped layer. Singleton groups
/// contribute nothing; the subgradient at coincident profiles is 0.
pub fn intra_group_loss(
    net: &Network,
    record: &ActivationRecord,
    assignment: &GroupAssignment,
) -> Result<(f64, BackpropSeed)> {
    let mut seed = BackpropSeed::new(net.num_layers());
    let mut loss = 0.0;
    for (layer, mut profiles) in grouped_profiles(net, record, assignment)? {
        let lg = assignment.for_layer(layer).expect("grouped layer");
        for members in &lg.groups {
            for (mi, &i) in members.iter().enumerate() {
                for &j in &members[mi + 1..] {
                    let norm: f64 = profiles.values[i]
                        .iter()
                        .zip(profiles.values[j].iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    loss += norm;
                    if norm > 0.0 {
                        let inv = 1.0 / norm;
                        for t in 0..profiles.values[i].len() {
                            let g = (profiles.values[i][t] - profiles.values[j][t]) * inv;
                            profiles.grads[i][t] += g;
                            profiles.grads[j][t] -= g;
                        }
                    }
                }
            }
        }
        profiles.flush(record, &mut seed);
    }
    Ok((loss, seed))
}

/// Across-group decorrelation: for each layer the sum over distinct group
/// pairs of the squared Frobenius norm of the profile-matrix cross-product,
/// i.e. the sum of squared dot products between profiles from different
/// groups.
pub fn inter_group_loss(
    net: &Network,
    record: &ActivationRecord,
    assignment: &GroupAssignment,
) -> Result<(f64, BackpropSeed)> {
    let mut seed = BackpropSeed::new(net.num_layers());
    let mut loss = 0.0;
    for (layer, mut profiles) in grouped_profiles(net, record, assignment)? {
        let lg = assignment.for_layer(layer).expect("grouped layer");
        for (gi, a_members) in lg.groups.iter().enumerate() {
            for b_members in &lg.groups[gi + 1..] {
                for &i in a_members {
                    for &j in b_members {
                        let dot: f64 = profiles.values[i]
                            .iter()
                            .zip(profiles.values[j].iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        loss += dot * dot;
                        let s = 2.0 * dot;
                        for t in 0..profiles.values[i].len() {
                            profiles.grads[i][t] += s * profiles.values[j][t];
                            profiles.grads[j][t] += s * profiles.values[i][t];
                        }
                    }
                }
            }
        }
        profiles.flush(record, &mut seed);
    }
    Ok((loss, seed))
}

/// Component losses of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub class: f64,
    pub intra: f64,
    pub inter: f64,
    /// Triplet hinge, or its one-shot margin reduction.
    pub metric: f64,
}

/// Weighted combination of component losses.
pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.class
        + w.alpha_intra * parts.intra
        + w.beta_inter * parts.inter
        + w.gamma_metric * parts.metric
}

/// A fully evaluated hybrid objective: component values, weighted total, and
/// the merged gradient seed ready for `backward_multi`.
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub parts: LossParts,
    pub total: f64,
    pub seed: BackpropSeed,
}

/// Record index whose output feeds the metric term.
pub fn embedding_index(net: &Network, source: EmbeddingSource) -> Result<usize> {
    let head = net.head_index();
    match source {
        EmbeddingSource::Logits => Ok(head),
        EmbeddingSource::Penultimate => {
            if head == 0 {
                return Err(Error::BadConfig(
                    "network has no penultimate activations; use logits embeddings".into(),
                ));
            }
            Ok(head - 1)
        }
    }
}

/// Evaluate the full objective on a captured forward pass. Terms with a zero
/// weight are skipped entirely; `assignment` None drops the group terms and
/// `metric` None the metric term.
pub fn hybrid_loss(
    net: &Network,
    record: &ActivationRecord,
    labels: &[usize],
    assignment: Option<&GroupAssignment>,
    metric: Option<MetricKind>,
    embedding: EmbeddingSource,
    w: &LossWeights,
) -> Result<HybridLoss> {
    w.validate()?;
    net.validate_record(record)?;
    let mut parts = LossParts::default();
    let mut seed = BackpropSeed::new(net.num_layers());

    let head = net.head_index();
    let logits = record.output(head);
    let (class, class_grad) = cross_entropy(logits, labels)?;
    parts.class = class;
    seed.add(head, &class_grad, 1.0);

    if let (Some(kind), true) = (metric, w.gamma_metric > 0.0) {
        let emb_idx = embedding_index(net, embedding)?;
        let emb = record.output(emb_idx);
        let (value, grad) = match kind {
            MetricKind::Triplet => triplet_loss(emb, labels, w)?,
            MetricKind::Margin => margin_loss(emb, labels, w)?,
        };
        parts.metric = value;
        seed.add(emb_idx, &grad, w.gamma_metric);
    }

    if let Some(assignment) = assignment {
        if w.alpha_intra > 0.0 {
            let (value, contrib) = intra_group_loss(net, record, assignment)?;
            parts.intra = value;
            seed.merge(&contrib, w.alpha_intra);
        }
        if w.beta_inter > 0.0 {
            let (value, contrib) = inter_group_loss(net, record, assignment)?;
            parts.inter = value;
            seed.merge(&contrib, w.beta_inter);
        }
    }

    let total = total_loss(&parts, w);
    if !total.is_finite() {
        return Err(Error::NonFinite("hybrid loss".into()));
    }
    Ok(HybridLoss { parts, total, seed })
}

/// Pick the metric variant for a batch: triplet when some class has at least
/// two samples, margin otherwise.
pub fn auto_metric(labels: &[usize]) -> MetricKind {
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        MetricKind::Triplet
    } else {
        MetricKind::Margin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::LayerGroups;
    use crate::gradcheck::check_gradients;
    use crate::network::{LayerParams, LayerSpec};
    use crate::rng;

    #[test]
    fn uniform_logits_cost_is_log_classes() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_near_zero() {
        let logits = Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-10);
    }

    #[test]
    fn batch_cost_is_mean_of_per_sample_costs() {
        let r1 = vec![1.0, -0.5, 0.2];
        let r2 = vec![-2.0, 0.3, 0.9];
        let (l1, _) = cross_entropy(&Tensor::new(vec![1, 3], r1.clone()).unwrap(), &[1]).unwrap();
        let (l2, _) = cross_entropy(&Tensor::new(vec![1, 3], r2.clone()).unwrap(), &[2]).unwrap();
        let both = Tensor::new(vec![2, 3], [r1, r2].concat()).unwrap();
        let (l, _) = cross_entropy(&both, &[1, 2]).unwrap();
        assert!((l - (l1 + l2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(
            cross_entropy(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn triplet_hinge_inactive_when_negative_far() {
        let emb = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap();
        let w = LossWeights::default();
        let (loss, grad) = triplet_loss(&emb, &[0, 0, 1], &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn equidistant_triplet_pays_margin() {
        // equilateral: every pairwise squared distance is 1
        let h = 3.0f64.sqrt() / 2.0;
        let emb = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 0.0, 0.5, h]).unwrap();
        let w = LossWeights::default();
        let (loss, _) = triplet_loss(&emb, &[0, 0, 1], &w).unwrap();
        // two ordered (anchor, positive) pairs, one negative each
        assert!((loss - 2.0 * w.margin).abs() < 1e-12);
    }

    #[test]
    fn triplet_matches_exhaustive_enumeration() {
        let mut stream = rng::stream(31, "losses.test");
        use rand::Rng;
        let data: Vec<f64> = (0..8).map(|_| stream.random::<f64>() * 2.0 - 1.0).collect();
        let emb = Tensor::new(vec![4, 2], data.clone()).unwrap();
        let labels = [0usize, 0, 1, 1];
        let w = LossWeights::default();
        let (loss, _) = triplet_loss(&emb, &labels, &w).unwrap();

        // independent brute force over all ordered triplets
        let d = |i: usize, j: usize| -> f64 {
            (0..2)
                .map(|t| (data[i * 2 + t] - data[j * 2 + t]).powi(2))
                .sum()
        };
        let mut expect = 0.0;
        let mut count = 0;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    if i != j && labels[i] == labels[j] && labels[k] != labels[i] {
                        count += 1;
                        expect += (d(i, j) - d(i, k) + w.margin).max(0.0);
                    }
                }
            }
        }
        assert_eq!(count, 8);
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_zero_when_classes_spread() {
        let emb = Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, 0.0]).unwrap();
        let (loss, _) = margin_loss(&emb, &[0, 1], &LossWeights::default()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn coincident_cross_class_pays_margin_per_pair() {
        let emb = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (loss, _) = margin_loss(&emb, &[0, 1], &LossWeights::default()).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn three_one_shot_classes_at_half_distance() {
        // equilateral with squared side 0.5 -> three pairs, each margin hinge
        // pays 1 - 0.5
        let s = 0.5f64.sqrt();
        let emb = Tensor::new(
            vec![3, 2],
            vec![0.0, 0.0, s, 0.0, s / 2.0, s * 3.0f64.sqrt() / 2.0],
        )
        .unwrap();
        let (loss, _) = margin_loss(&emb, &[0, 1, 2], &LossWeights::default()).unwrap();
        assert!((loss - 1.5).abs() < 1e-12);
    }

    /// 2-filter dense layer plus head; input batch drives the profiles.
    fn profile_net() -> Network {
        Network::with_params(
            vec![2],
            vec![LayerSpec::dense(2, 2), LayerSpec::dense(2, 2)],
            vec![
                LayerParams {
                    weight: Some(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
                    bias: Some(Tensor::zeros(&[2])),
                },
                LayerParams {
                    weight: Some(Tensor::new(vec![2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap()),
                    bias: Some(Tensor::zeros(&[2])),
                },
            ],
        )
        .unwrap()
    }

    fn one_group_assignment() -> GroupAssignment {
        GroupAssignment::new(vec![LayerGroups::from_labels(0, &[0, 0]).unwrap()]).unwrap()
    }

    fn two_group_assignment() -> GroupAssignment {
        GroupAssignment::new(vec![LayerGroups::from_labels(0, &[0, 1]).unwrap()]).unwrap()
    }

    #[test]
    fn intra_zero_for_singletons_and_duplicates() {
        let net = profile_net();
        let batch = Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let (_, record) = net.forward(&batch).unwrap();
        // identical profiles in one group
        let (loss, _) = intra_group_loss(&net, &record, &one_group_assignment()).unwrap();
        assert_eq!(loss, 0.0);
        // singletons
        let (loss, _) = intra_group_loss(&net, &record, &two_group_assignment()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn intra_pair_norm_is_euclidean() {
        // profiles: filter0 = (0,0), filter1 = (3,4) -> pair norm 5
        let net = profile_net();
        let batch = Tensor::new(vec![2, 2], vec![0.0, 3.0, 0.0, 4.0]).unwrap();
        let (_, record) = net.forward(&batch).unwrap();
        let (loss, _) = intra_group_loss(&net, &record, &one_group_assignment()).unwrap();
        assert!((loss - 5.0).abs() < 1e-12);
    }

    #[test]
    fn inter_zero_for_orthogonal_profiles() {
        // profiles: filter0 = (1,0), filter1 = (0,1)
        let net = profile_net();
        let batch = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (_, record) = net.forward(&batch).unwrap();
        let (loss, _) = inter_group_loss(&net, &record, &two_group_assignment()).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn inter_counts_squared_cross_dot() {
        // profiles: filter0 = (1,0), filter1 = (1,0) -> dot 1, squared 1
        let net = profile_net();
        let batch = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (_, record) = net.forward(&batch).unwrap();
        let (loss, _) = inter_group_loss(&net, &record, &two_group_assignment()).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn inter_matches_naive_double_loop() {
        // 6 filters in 3 groups of 2; compare against a direct computation
        use rand::Rng;
        let mut stream = rng::stream(77, "losses.test");
        let w: Vec<f64> = (0..12).map(|_| stream.random::<f64>() * 2.0 - 1.0).collect();
        let net = Network::with_params(
            vec![2],
            vec![LayerSpec::dense(2, 6), LayerSpec::dense(6, 2)],
            vec![
                LayerParams {
                    weight: Some(Tensor::new(vec![6, 2], w).unwrap()),
                    bias: Some(Tensor::zeros(&[6])),
                },
                LayerParams {
                    weight: Some(Tensor::new(vec![2, 6], vec![0.1; 12]).unwrap()),
                    bias: Some(Tensor::zeros(&[2])),
                },
            ],
        )
        .unwrap();
        let batch_data: Vec<f64> = (0..8).map(|_| stream.random::<f64>() * 2.0 - 1.0).collect();
        let batch = Tensor::new(vec![4, 2], batch_data).unwrap();
        let (_, record) = net.forward(&batch).unwrap();
        let groups = GroupAssignment::new(vec![
            LayerGroups::from_labels(0, &[0, 0, 1, 1, 2, 2]).unwrap()
        ])
        .unwrap();
        let (loss, _) = inter_group_loss(&net, &record, &groups).unwrap();

        let act = record.output(0);
        let profile = |f: usize| -> Vec<f64> { (0..4).map(|b| act.at2(b, f)).collect() };
        let member_groups = [[0usize, 1], [2, 3], [4, 5]];
        let mut expect = 0.0;
        for gi in 0..3 {
            for gj in gi + 1..3 {
                for &i in &member_groups[gi] {
                    for &j in &member_groups[gj] {
                        let dot: f64 = profile(i)
                            .iter()
                            .zip(profile(j).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        expect += dot * dot;
                    }
                }
            }
        }
        assert!((loss - expect).abs() < 1e-10);
    }

    #[test]
    fn total_combines_weighted_parts() {
        let parts = LossParts {
            class: 1.0,
            intra: 2.0,
            inter: 3.0,
            metric: 4.0,
        };
        let unit = LossWeights {
            alpha_intra: 1.0,
            beta_inter: 1.0,
            gamma_metric: 1.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&parts, &unit), 10.0);
        let off = LossWeights {
            alpha_intra: 0.0,
            beta_inter: 0.0,
            gamma_metric: 0.0,
            ..LossWeights::default()
        };
        assert_eq!(total_loss(&parts, &off), 1.0);
    }

    #[test]
    fn auto_metric_picks_margin_for_one_shot() {
        assert_eq!(auto_metric(&[0, 1, 2]), MetricKind::Margin);
        assert_eq!(auto_metric(&[0, 0, 1]), MetricKind::Triplet);
    }

    #[test]
    fn losses_invariant_under_batch_reorder() {
        let emb = Tensor::new(
            vec![4, 2],
            vec![0.3, 0.1, -0.4, 0.9, 1.2, -0.7, 0.0, 0.5],
        )
        .unwrap();
        let labels = [0usize, 1, 0, 1];
        let perm = [2usize, 0, 3, 1];
        let mut pdata = Vec::new();
        let mut plabels = Vec::new();
        for &p in &perm {
            pdata.extend_from_slice(emb.row(p));
            plabels.push(labels[p]);
        }
        let pemb = Tensor::new(vec![4, 2], pdata).unwrap();
        let w = LossWeights::default();
        let (a, _) = triplet_loss(&emb, &labels, &w).unwrap();
        let (b, _) = triplet_loss(&pemb, &plabels, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
        let (a, _) = margin_loss(&emb, &labels, &w).unwrap();
        let (b, _) = margin_loss(&pemb, &plabels, &w).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn hybrid_gradient_passes_finite_differences() {
        let mut stream = rng::stream(14, "losses.gradcheck");
        let mut net = Network::new(
            vec![3],
            vec![
                LayerSpec::dense(3, 4),
                LayerSpec::Relu,
                LayerSpec::dense(4, 3),
                LayerSpec::Relu,
                LayerSpec::dense(3, 2),
            ],
            &mut stream,
        )
        .unwrap();
        let batch = Tensor::new(
            vec![4, 3],
            vec![
                0.9, -0.3, 0.7, //
                -0.5, 0.8, 0.2, //
                0.4, 0.6, -0.9, //
                -0.2, -0.7, 0.5,
            ],
        )
        .unwrap();
        let labels = [0usize, 0, 1, 1];
        let groups = GroupAssignment::new(vec![
            LayerGroups::from_labels(0, &[0, 0, 1, 1]).unwrap(),
            LayerGroups::from_labels(2, &[0, 1, 0]).unwrap(),
        ])
        .unwrap();
        let w = LossWeights {
            margin: 2.0,
            alpha_intra: 0.3,
            beta_inter: 0.2,
            gamma_metric: 0.5,
            distance: DistanceKind::SquaredEuclidean,
        };
        let eval = |n: &Network| -> crate::error::Result<HybridLoss> {
            let (_, record) = n.forward(&batch)?;
            hybrid_loss(
                n,
                &record,
                &labels,
                Some(&groups),
                Some(MetricKind::Triplet),
                EmbeddingSource::Penultimate,
                &w,
            )
        };
        let out = eval(&net).unwrap();
        let (_, record) = net.forward(&batch).unwrap();
        let grads = net.backward_multi(&record, &out.seed).unwrap();
        let report =
            check_gradients(&mut net, &grads, |n| eval(n).map(|h| h.total), 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}
