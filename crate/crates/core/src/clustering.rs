//! Filter grouping by activation profiles.
//!
//! Each filter of a dense or conv layer gets a profile: its post-nonlinearity
//! activation on every sample of a clustering batch (conv maps reduced by
//! spatial mean). Profiles are partitioned per layer with seeded k-means, and
//! the resulting [`GroupAssignment`] drives group-averaged fine-tuning.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::rng::{self, Stream};
use crate::tensor::Tensor;
use rand::Rng;

/// One filter's activation pattern over the clustering batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub layer: usize,
    pub filter: usize,
    /// One value per clustering sample.
    pub values: Vec<f64>,
}

/// Grouping of one layer's filters. `groups` are disjoint, non-empty, sorted
/// member lists covering every filter index; they are ordered by smallest
/// member so equal partitions compare equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerGroups {
    pub layer: usize,
    pub groups: Vec<Vec<usize>>,
    pub filter_to_group: Vec<usize>,
}

impl LayerGroups {
    /// Build from per-filter cluster labels; cluster ids need not be dense.
    pub fn from_labels(layer: usize, labels: &[usize]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::BadAssignment(format!("layer {layer}: no filters")));
        }
        let mut by_label: Vec<(usize, Vec<usize>)> = Vec::new();
        for (filter, &label) in labels.iter().enumerate() {
            match by_label.iter_mut().find(|(l, _)| *l == label) {
                Some((_, members)) => members.push(filter),
                None => by_label.push((label, vec![filter])),
            }
        }
        let mut groups: Vec<Vec<usize>> = by_label.into_iter().map(|(_, m)| m).collect();
        groups.sort_by_key(|m| m[0]);
        let mut filter_to_group = vec![0; labels.len()];
        for (g, members) in groups.iter().enumerate() {
            for &f in members {
                filter_to_group[f] = g;
            }
        }
        Ok(LayerGroups {
            layer,
            groups,
            filter_to_group,
        })
    }

    pub fn singletons(layer: usize, filters: usize) -> Self {
        let labels: Vec<usize> = (0..filters).collect();
        LayerGroups::from_labels(layer, &labels).expect("non-empty")
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_filters(&self) -> usize {
        self.filter_to_group.len()
    }

    fn check_partition(&self) -> Result<()> {
        let n = self.filter_to_group.len();
        let mut seen = vec![false; n];
        for (g, members) in self.groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::BadAssignment(format!(
                    "layer {}: group {g} is empty",
                    self.layer
                )));
            }
            for &f in members {
                if f >= n || seen[f] {
                    return Err(Error::BadAssignment(format!(
                        "layer {}: filter {f} out of range or repeated",
                        self.layer
                    )));
                }
                seen[f] = true;
                if self.filter_to_group[f] != g {
                    return Err(Error::BadAssignment(format!(
                        "layer {}: filter {f} maps to group {} but sits in group {g}",
                        self.layer, self.filter_to_group[f]
                    )));
                }
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::BadAssignment(format!(
                "layer {}: groups do not cover every filter",
                self.layer
            )));
        }
        Ok(())
    }
}

/// Per-layer grouping for every clustered layer of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupAssignment {
    layers: Vec<LayerGroups>,
}

impl GroupAssignment {
    pub fn new(mut layers: Vec<LayerGroups>) -> Result<Self> {
        layers.sort_by_key(|l| l.layer);
        for w in layers.windows(2) {
            if w[0].layer == w[1].layer {
                return Err(Error::BadAssignment(format!(
                    "layer {} grouped twice",
                    w[0].layer
                )));
            }
        }
        for l in &layers {
            l.check_partition()?;
        }
        Ok(GroupAssignment { layers })
    }

    /// All clusterable layers as singleton groups: fine-tuning under this
    /// assignment reduces to plain per-filter training.
    pub fn all_singletons(net: &Network) -> Self {
        let layers = net
            .clusterable_layers()
            .into_iter()
            .map(|l| {
                let filters = net.spec(l).filter_count().expect("clusterable layer");
                LayerGroups::singletons(l, filters)
            })
            .collect();
        GroupAssignment { layers }
    }

    pub fn layers(&self) -> &[LayerGroups] {
        &self.layers
    }

    pub fn for_layer(&self, layer: usize) -> Option<&LayerGroups> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Check that every grouped layer exists in `net` with a matching filter
    /// count.
    pub fn validate_against(&self, net: &Network) -> Result<()> {
        for lg in &self.layers {
            let filters = net
                .spec(lg.layer)
                .filter_count()
                .ok_or_else(|| {
                    Error::BadAssignment(format!("layer {} has no filters", lg.layer))
                })?;
            if filters != lg.num_filters() {
                return Err(Error::BadAssignment(format!(
                    "layer {} has {filters} filters but assignment covers {}",
                    lg.layer,
                    lg.num_filters()
                )));
            }
        }
        Ok(())
    }

    /// Structured text form, stable under round-trip.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("layers {}\n", self.layers.len()));
        for lg in &self.layers {
            out.push_str(&format!(
                "layer {} filters {} groups {}\n",
                lg.layer,
                lg.num_filters(),
                lg.num_groups()
            ));
            for (g, members) in lg.groups.iter().enumerate() {
                let list: Vec<String> = members.iter().map(|m| m.to_string()).collect();
                out.push_str(&format!("group {g}: {}\n", list.join(" ")));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: &str| Error::BadAssignment(format!("parse: {detail}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty input"))?;
        let layer_count: usize = header
            .strip_prefix("layers ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad("expected `layers <count>` header"))?;
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            let head = lines.next().ok_or_else(|| bad("missing layer header"))?;
            let fields: Vec<&str> = head.split_whitespace().collect();
            if fields.len() != 6 || fields[0] != "layer" || fields[2] != "filters"
                || fields[4] != "groups"
            {
                return Err(bad(&format!("bad layer header `{head}`")));
            }
            let layer: usize = fields[1].parse().map_err(|_| bad("bad layer index"))?;
            let filters: usize = fields[3].parse().map_err(|_| bad("bad filter count"))?;
            let groups: usize = fields[5].parse().map_err(|_| bad("bad group count"))?;
            let mut labels = vec![usize::MAX; filters];
            for g in 0..groups {
                let line = lines.next().ok_or_else(|| bad("missing group line"))?;
                let (tag, members) = line
                    .split_once(':')
                    .ok_or_else(|| bad(&format!("bad group line `{line}`")))?;
                if tag.trim() != format!("group {g}") {
                    return Err(bad(&format!("expected group {g}, found `{tag}`")));
                }
                for m in members.split_whitespace() {
                    let f: usize = m.parse().map_err(|_| bad("bad member index"))?;
                    if f >= filters || labels[f] != usize::MAX {
                        return Err(bad(&format!("member {f} out of range or repeated")));
                    }
                    labels[f] = g;
                }
            }
            if labels.iter().any(|&l| l == usize::MAX) {
                return Err(bad(&format!("layer {layer}: not all filters covered")));
            }
            layers.push(LayerGroups::from_labels(layer, &labels)?);
        }
        if lines.next().is_some() {
            return Err(bad("trailing content"));
        }
        GroupAssignment::new(layers)
    }
}

/// Activation profiles for every filter of `layer`, from a fresh forward
/// pass over `clustering_batch`.
pub fn extract_activation_profiles(
    net: &Network,
    clustering_batch: &Tensor,
    layer: usize,
) -> Result<Vec<ActivationProfile>> {
    let (_, record) = net.forward(clustering_batch)?;
    profiles_from_record(net, &record.outputs()[..], layer)
}

/// Profile extraction from already-captured activations; lets one forward
/// pass serve every layer.
fn profiles_from_record(
    net: &Network,
    outputs: &[Tensor],
    layer: usize,
) -> Result<Vec<ActivationProfile>> {
    let filters = net.spec(layer).filter_count().ok_or_else(|| {
        Error::BadLayerSpec(format!("layer {layer} has no filters to profile"))
    })?;
    let act = &outputs[net.post_activation_index(layer)];
    let shape = act.shape();
    let b = shape[0];
    let mut profiles: Vec<ActivationProfile> = (0..filters)
        .map(|filter| ActivationProfile {
            layer,
            filter,
            values: vec![0.0; b],
        })
        .collect();
    match shape.len() {
        2 => {
            // dense: [B, F]
            for bi in 0..b {
                let row = act.row(bi);
                for (f, p) in profiles.iter_mut().enumerate() {
                    p.values[bi] = row[f];
                }
            }
        }
        4 => {
            // conv: [B, OH, OW, F], spatial mean per sample
            let (oh, ow, f_dim) = (shape[1], shape[2], shape[3]);
            let spatial = (oh * ow) as f64;
            let data = act.data();
            for bi in 0..b {
                for pos in 0..oh * ow {
                    let base = (bi * oh * ow + pos) * f_dim;
                    for (f, p) in profiles.iter_mut().enumerate() {
                        p.values[bi] += data[base + f];
                    }
                }
                for p in profiles.iter_mut() {
                    p.values[bi] /= spatial;
                }
            }
        }
        other => {
            return Err(Error::BadLayerSpec(format!(
                "layer {layer}: unsupported activation rank {other}"
            )))
        }
    }
    Ok(profiles)
}

/// Lowest-SSE clustering over all restarts.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    /// Per-point cluster label in `0..k`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Seeded k-means: k-means++ initialization, Lloyd iterations to a fixed
/// point or 100 rounds, empty clusters re-seeded from the farthest point.
/// Restarts run on pre-split streams and merge by minimum SSE with ties to
/// the lowest restart index.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KmeansOutcome> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::BadClusterCount { k, n });
    }
    if restarts == 0 {
        return Err(Error::BadConfig("kmeans needs at least one restart".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::BadAssignment("profiles differ in length".into()));
    }
    let best = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut stream = rng::substream(seed, "kmeans.restart", r as u64);
            let init = plus_plus_init(points, k, &mut stream);
            (r, lloyd(points, init))
        })
        .min_by(|(ra, a), (rb, b)| a.sse().total_cmp(&b.sse()).then(ra.cmp(rb)))
        .expect("restarts >= 1");
    Ok(best.1.into_outcome())
}

fn plus_plus_init<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if r < w {
                        pick = Some(i);
                        break;
                    }
                    r -= w;
                }
            }
            // cumulative rounding can walk past the end; take the last
            // positive-weight point
            pick.unwrap_or_else(|| {
                d2.iter().rposition(|&w| w > 0.0).expect("total > 0")
            })
        } else {
            // every point coincides with a centroid; duplicate the lowest
            // index deterministically
            (0..n)
                .find(|&i| !centroids.iter().any(|c| c == &points[i]))
                .unwrap_or(0)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            let d = sq_dist(p, &points[next]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

struct LloydOutcome {
    assignment: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    sse_history: Vec<f64>,
}

impl LloydOutcome {
    fn into_outcome(self) -> KmeansOutcome {
        let sse = *self.sse_history.last().expect("at least one iteration");
        KmeansOutcome {
            assignment: self.assignment,
            centroids: self.centroids,
            sse,
        }
    }

    fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one iteration")
    }
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> LloydOutcome {
    let n = points.len();
    let k = centroids.len();
    let dim = points[0].len();
    let mut assignment = vec![0usize; n];
    let mut prev: Option<Vec<usize>> = None;
    let mut sse_history = Vec::new();
    for _ in 0..100 {
        // nearest centroid, ties to the lowest centroid index
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = sq_dist(p, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            assignment[i] = best;
        }
        // re-seed empty clusters from the farthest point with ties to the
        // lowest point index; donor clusters must keep at least one member
        let mut sizes = vec![0usize; k];
        for &a in &assignment {
            sizes[a] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut pick: Option<(usize, f64)> = None;
            for (i, p) in points.iter().enumerate() {
                if sizes[assignment[i]] < 2 {
                    continue;
                }
                let d = sq_dist(p, &centroids[assignment[i]]);
                let better = match pick {
                    None => true,
                    Some((_, bd)) => d > bd,
                };
                if better {
                    pick = Some((i, d));
                }
            }
            if let Some((i, _)) = pick {
                sizes[assignment[i]] -= 1;
                assignment[i] = c;
                sizes[c] = 1;
                centroids[c] = points[i].clone();
            }
        }
        let sse: f64 = points
            .iter()
            .zip(assignment.iter())
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        sse_history.push(sse);
        if prev.as_deref() == Some(assignment.as_slice()) {
            break;
        }
        prev = Some(assignment.clone());
        // centroid update: member means
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(assignment.iter()) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for s in sums[c].iter_mut() {
                    *s /= counts[c] as f64;
                }
                centroids[c] = std::mem::take(&mut sums[c]);
            }
        }
    }
    LloydOutcome {
        assignment,
        centroids,
        sse_history,
    }
}

/// Knobs for profile clustering.
#[derive(Debug, Clone)]
pub struct ClusteringConfig {
    pub restarts: usize,
    /// Standardize each profile to zero mean, unit variance before
    /// clustering. Off by default: raw activations carry the pattern.
    pub standardize: bool,
    pub seed: u64,
}

impl ClusteringConfig {
    pub fn new(seed: u64) -> Self {
        ClusteringConfig {
            restarts: 10,
            standardize: false,
            seed,
        }
    }
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 0.0 {
            *v /= std;
        }
    }
}

/// Cluster every clusterable layer of `net` to its requested group count.
/// `counts[i]` pairs with `net.clusterable_layers()[i]`. A count equal to the
/// layer's filter count yields all singletons; a count of 1 one full group;
/// both skip k-means.
pub fn build_group_assignment(
    net: &Network,
    clustering_batch: &Tensor,
    counts: &[usize],
    cfg: &ClusteringConfig,
) -> Result<GroupAssignment> {
    let clusterable = net.clusterable_layers();
    if counts.len() != clusterable.len() {
        return Err(Error::BadConfig(format!(
            "{} group counts for {} clusterable layers",
            counts.len(),
            clusterable.len()
        )));
    }
    for (&layer, &count) in clusterable.iter().zip(counts.iter()) {
        let filters = net.spec(layer).filter_count().expect("clusterable");
        if count == 0 || count > filters {
            return Err(Error::BadGroupCount {
                layer,
                count,
                filters,
            });
        }
    }
    let (_, record) = net.forward(clustering_batch)?;
    let mut layers = Vec::with_capacity(clusterable.len());
    for (&layer, &count) in clusterable.iter().zip(counts.iter()) {
        let filters = net.spec(layer).filter_count().expect("clusterable");
        let lg = if count == filters {
            LayerGroups::singletons(layer, filters)
        } else if count == 1 {
            LayerGroups::from_labels(layer, &vec![0; filters])?
        } else {
            let mut profiles = profiles_from_record(net, record.outputs(), layer)?;
            if cfg.standardize {
                for p in profiles.iter_mut() {
                    standardize(&mut p.values);
                }
            }
            let points: Vec<Vec<f64>> = profiles.into_iter().map(|p| p.values).collect();
            let outcome = kmeans(
                &points,
                count,
                cfg.restarts,
                rng::derive(cfg.seed, "kmeans.layer", layer as u64),
            )?;
            LayerGroups::from_labels(layer, &outcome.assignment)?
        };
        layers.push(lg);
    }
    GroupAssignment::new(layers)
}

/// Convenience for per-restart parallel streams in callers that drive
/// k-means directly.
pub fn restart_stream(seed: u64, restart: usize) -> Stream {
    rng::substream(seed, "kmeans.restart", restart as u64)
}
