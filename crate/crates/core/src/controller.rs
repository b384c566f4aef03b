//! Policy-gradient search over per-layer group counts.
//!
//! The controller samples one group count per clusterable layer from a
//! recurrent policy, scores the whole sequence by clustering and fine-tuning
//! the wrapped network, and ascends the score-weighted log-probability
//! gradient. Greedy layer-sweep and coordinate double/half baselines share
//! the same environment abstraction so search logic is testable against
//! scripted accuracy tables without any training.

use crate::clustering::{self, ClusteringConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::policy::{PolicyGrads, PolicyNetwork};
use crate::rng::{self, Stream};
use crate::trainer::{self, FineTuneConfig};
use rand::Rng;
use rayon::prelude::*;

/// Global candidate group counts shared by all layers: powers of two up to
/// the largest filter count, plus every layer's exact filter count so that
/// "leave the layer ungrouped" is always expressible. A candidate is valid
/// at a layer iff it does not exceed that layer's filter count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    candidates: Vec<usize>,
    filter_counts: Vec<usize>,
    max_filters: usize,
}

impl ActionSpace {
    pub fn new(filter_counts: &[usize]) -> Result<Self> {
        if filter_counts.is_empty() {
            return Err(Error::BadConfig("no clusterable layers".into()));
        }
        if filter_counts.iter().any(|&f| f == 0) {
            return Err(Error::BadConfig("layer with zero filters".into()));
        }
        let max = *filter_counts.iter().max().expect("non-empty");
        let mut candidates = Vec::new();
        let mut p = 1usize;
        while p <= max {
            candidates.push(p);
            match p.checked_mul(2) {
                Some(next) => p = next,
                None => break,
            }
        }
        for &f in filter_counts {
            if !candidates.contains(&f) {
                candidates.push(f);
            }
        }
        candidates.sort_unstable();
        Ok(ActionSpace {
            candidates,
            filter_counts: filter_counts.to_vec(),
            max_filters: max,
        })
    }

    pub fn for_network(net: &Network) -> Result<Self> {
        let counts: Vec<usize> = net
            .clusterable_layers()
            .into_iter()
            .map(|l| net.spec(l).filter_count().expect("clusterable layer"))
            .collect();
        ActionSpace::new(&counts)
    }

    pub fn candidates(&self) -> &[usize] {
        &self.candidates
    }

    pub fn num_actions(&self) -> usize {
        self.candidates.len()
    }

    /// Decision steps: one per clusterable layer.
    pub fn horizon(&self) -> usize {
        self.filter_counts.len()
    }

    pub fn filter_counts(&self) -> &[usize] {
        &self.filter_counts
    }

    pub fn max_filters(&self) -> usize {
        self.max_filters
    }

    pub fn count_of(&self, action: usize) -> usize {
        self.candidates[action]
    }

    pub fn index_of(&self, count: usize) -> Option<usize> {
        self.candidates.iter().position(|&c| c == count)
    }

    pub fn is_valid(&self, layer_step: usize, action: usize) -> bool {
        self.candidates[action] <= self.filter_counts[layer_step]
    }

    /// Sequence of group counts named by action indices.
    pub fn counts_for(&self, actions: &[usize]) -> Result<Vec<usize>> {
        if actions.len() != self.horizon() {
            return Err(Error::BadConfig(format!(
                "{} actions for a horizon of {}",
                actions.len(),
                self.horizon()
            )));
        }
        actions
            .iter()
            .map(|&a| {
                self.candidates.get(a).copied().ok_or_else(|| {
                    Error::BadConfig(format!(
                        "action index {a} outside the {} candidates",
                        self.candidates.len()
                    ))
                })
            })
            .collect()
    }
}

/// Anything that can score a full per-layer group-count sequence.
///
/// The production implementation clusters and fine-tunes a network; tests
/// substitute scripted accuracy tables.
pub trait Environment: Sync {
    /// Filter counts of the clusterable layers, in layer order.
    fn filter_counts(&self) -> &[usize];

    /// Accuracy in `[0, 1]` after grouping with these counts. `counts`
    /// are already validated against the filter counts.
    fn evaluate(&self, counts: &[usize]) -> Result<f64>;
}

/// Clusters the wrapped network with the proposed counts, fine-tunes, and
/// reports validation accuracy.
pub struct TrainingEnvironment<'a> {
    net: &'a Network,
    clustering_batch: &'a Dataset,
    train: &'a Dataset,
    val: &'a Dataset,
    fine_tune: FineTuneConfig,
    clustering: ClusteringConfig,
    filter_counts: Vec<usize>,
}

impl<'a> TrainingEnvironment<'a> {
    pub fn new(
        net: &'a Network,
        clustering_batch: &'a Dataset,
        train: &'a Dataset,
        val: &'a Dataset,
        fine_tune: FineTuneConfig,
        clustering: ClusteringConfig,
    ) -> Result<Self> {
        fine_tune.validate()?;
        let filter_counts: Vec<usize> = net
            .clusterable_layers()
            .into_iter()
            .map(|l| net.spec(l).filter_count().expect("clusterable layer"))
            .collect();
        if filter_counts.is_empty() {
            return Err(Error::BadConfig(
                "network has no clusterable layers to search over".into(),
            ));
        }
        Ok(TrainingEnvironment {
            net,
            clustering_batch,
            train,
            val,
            fine_tune,
            clustering,
            filter_counts,
        })
    }
}

impl Environment for TrainingEnvironment<'_> {
    fn filter_counts(&self) -> &[usize] {
        &self.filter_counts
    }

    fn evaluate(&self, counts: &[usize]) -> Result<f64> {
        let assignment = clustering::build_group_assignment(
            self.net,
            self.clustering_batch.images(),
            counts,
            &self.clustering,
        )?;
        let result = trainer::fine_tune(
            self.net,
            &assignment,
            self.train,
            self.val,
            &self.fine_tune,
        )?;
        Ok(result.accuracy)
    }
}

/// One sampled action sequence. `reward` stays unset until scored.
#[derive(Debug, Clone)]
pub struct Episode {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub reward: Option<f64>,
}

impl Episode {
    pub fn log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Policy input for one decision step: normalized filter count of the layer
/// followed by a one-hot of the previous action (all zeros at the first
/// step).
pub fn encode_policy_input(
    filter_count: usize,
    prev_action: Option<usize>,
    space: &ActionSpace,
) -> Vec<f64> {
    let mut x = vec![0.0; space.num_actions() + 1];
    x[0] = filter_count as f64 / space.max_filters() as f64;
    if let Some(a) = prev_action {
        x[1 + a] = 1.0;
    }
    x
}

/// Fresh policy sized for the action space: input `N_a + 1`, output `N_a`.
pub fn policy_for_space(
    space: &ActionSpace,
    hidden_dim: usize,
    stream: &mut Stream,
) -> Result<PolicyNetwork> {
    PolicyNetwork::new(space.num_actions() + 1, hidden_dim, space.num_actions(), stream)
}

fn check_policy_shape(policy: &PolicyNetwork, space: &ActionSpace) -> Result<()> {
    if policy.num_actions() != space.num_actions()
        || policy.input_dim() != space.num_actions() + 1
    {
        return Err(Error::BadConfig(format!(
            "policy sized for {} inputs / {} actions, space needs {} / {}",
            policy.input_dim(),
            policy.num_actions(),
            space.num_actions() + 1,
            space.num_actions()
        )));
    }
    Ok(())
}

fn sample_categorical(probs: &[f64], stream: &mut Stream) -> usize {
    let u: f64 = stream.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Roll the policy over the whole horizon, sampling one action per layer.
/// Recurrent state starts at zero; the reward is left unset.
pub fn sample_action_sequence(
    policy: &PolicyNetwork,
    space: &ActionSpace,
    stream: &mut Stream,
) -> Result<Episode> {
    check_policy_shape(policy, space)?;
    let mut state = policy.initial_state();
    let mut actions = Vec::with_capacity(space.horizon());
    let mut log_probs = Vec::with_capacity(space.horizon());
    let mut inputs = Vec::with_capacity(space.horizon());
    let mut prev = None;
    for &filters in space.filter_counts() {
        let x = encode_policy_input(filters, prev, space);
        let (probs, next) = policy.step(&x, &state)?;
        let a = sample_categorical(&probs, stream);
        actions.push(a);
        log_probs.push(probs[a].ln());
        inputs.push(x);
        state = next;
        prev = Some(a);
    }
    Ok(Episode {
        actions,
        log_probs,
        inputs,
        reward: None,
    })
}

/// Score an action sequence: any count too large for its layer short-circuits
/// to -1 with no training; a diverged fine-tune scores 0 (logged, so
/// numerical failures stay distinguishable from illegal actions); otherwise
/// the fine-tuned validation accuracy in `[0, 1]`.
pub fn compute_reward<E: Environment>(
    actions: &[usize],
    space: &ActionSpace,
    env: &E,
) -> Result<f64> {
    let counts = space.counts_for(actions)?;
    for (step, &a) in actions.iter().enumerate() {
        if !space.is_valid(step, a) {
            return Ok(-1.0);
        }
    }
    score_counts(env, &counts)
}

/// Evaluate a fully valid count sequence, mapping divergence to reward 0.
fn score_counts<E: Environment>(env: &E, counts: &[usize]) -> Result<f64> {
    match env.evaluate(counts) {
        Ok(acc) => {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::BadConfig(format!(
                    "environment returned accuracy {acc} outside [0, 1]"
                )));
            }
            Ok(acc)
        }
        Err(Error::Divergence { iteration }) => {
            log::warn!(
                "fine-tune diverged at iteration {iteration} for counts {counts:?}; reward 0"
            );
            Ok(0.0)
        }
        Err(e) => Err(e),
    }
}

/// Reward centering for the policy update.
#[derive(Debug, Clone, PartialEq)]
pub enum BaselineMode {
    /// Raw rewards; the literal update rule.
    Off,
    /// Exponential moving average of batch-mean rewards.
    Ema { decay: f64 },
}

impl Default for BaselineMode {
    fn default() -> Self {
        BaselineMode::Off
    }
}

#[derive(Debug, Clone)]
pub struct RewardBaseline {
    mode: BaselineMode,
    value: Option<f64>,
}

impl RewardBaseline {
    pub fn new(mode: BaselineMode) -> Result<Self> {
        if let BaselineMode::Ema { decay } = mode {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::BadConfig(format!(
                    "baseline decay must be in [0, 1), got {decay}"
                )));
            }
        }
        Ok(RewardBaseline { mode, value: None })
    }

    pub fn current(&self) -> f64 {
        match self.mode {
            BaselineMode::Off => 0.0,
            BaselineMode::Ema { .. } => self.value.unwrap_or(0.0),
        }
    }

    fn absorb(&mut self, batch_mean: f64) {
        if let BaselineMode::Ema { decay } = self.mode {
            let old = self.value.unwrap_or(batch_mean);
            self.value = Some(decay * old + (1.0 - decay) * batch_mean);
        }
    }
}

/// One policy-gradient ascent step: average over episodes of the episode's
/// log-probability gradient scaled by its (baseline-shifted) reward. Every
/// all-zero coefficient batch leaves the parameters bitwise untouched.
pub fn reinforce_update(
    policy: &mut PolicyNetwork,
    episodes: &[Episode],
    lr: f64,
    baseline: &mut RewardBaseline,
) -> Result<()> {
    if episodes.is_empty() {
        return Err(Error::BadConfig("policy update needs at least one episode".into()));
    }
    let mut rewards = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let r = ep.reward.ok_or_else(|| {
            Error::BadConfig("episode reward unset before policy update".into())
        })?;
        if !r.is_finite() {
            return Err(Error::NonFinite("episode reward".into()));
        }
        rewards.push(r);
    }
    let shift = baseline.current();
    let batch_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    baseline.absorb(batch_mean);
    let coeffs: Vec<f64> = rewards.iter().map(|r| r - shift).collect();
    if coeffs.iter().all(|&c| c == 0.0) {
        return Ok(());
    }
    let inv_m = 1.0 / episodes.len() as f64;
    let mut total = PolicyGrads::zeros_like(policy);
    for (ep, &c) in episodes.iter().zip(coeffs.iter()) {
        if c == 0.0 {
            continue;
        }
        let (_, grads) = policy.episode_grad(&ep.inputs, &ep.actions)?;
        total.add_scaled(&grads, c * inv_m);
    }
    policy.ascend(&total, lr)
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub budget: usize,
    pub episodes_per_update: usize,
    pub policy_lr: f64,
    pub hidden_dim: usize,
    pub baseline: BaselineMode,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            budget: 200,
            episodes_per_update: 5,
            policy_lr: 0.005,
            hidden_dim: 32,
            baseline: BaselineMode::Off,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes_per_update == 0 {
            return Err(Error::BadConfig("episodes per update must be >= 1".into()));
        }
        if self.budget < self.episodes_per_update {
            return Err(Error::BadConfig(format!(
                "budget {} below episodes per update {}",
                self.budget, self.episodes_per_update
            )));
        }
        if !self.policy_lr.is_finite() || self.policy_lr <= 0.0 {
            return Err(Error::BadConfig(format!(
                "policy learning rate must be finite and > 0, got {}",
                self.policy_lr
            )));
        }
        if self.hidden_dim == 0 {
            return Err(Error::BadConfig("policy hidden size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One scored episode in the search history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub episode: usize,
    pub reward: f64,
    /// Group counts named by the sampled actions (may be invalid for their
    /// layers; such episodes carry reward -1).
    pub counts: Vec<usize>,
    pub best_reward: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Best-scoring valid count sequence seen, if any episode was valid.
    pub best_counts: Option<Vec<usize>>,
    pub best_reward: f64,
    pub history: Vec<HistoryRow>,
    pub policy: PolicyNetwork,
}

/// Policy-gradient search: sample a batch of episodes, score each, update
/// the policy, repeat until the episode budget is spent. The best reward in
/// the history is non-decreasing; ties keep the earlier sequence.
pub fn search<E: Environment>(env: &E, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let space = ActionSpace::new(env.filter_counts())?;
    let mut init = rng::stream(cfg.seed, "policy.init");
    let mut policy = policy_for_space(&space, cfg.hidden_dim, &mut init)?;
    let mut sampler = rng::stream(cfg.seed, "policy.sample");
    let mut baseline = RewardBaseline::new(cfg.baseline.clone())?;
    let mut history = Vec::with_capacity(cfg.budget);
    let mut best_reward = f64::NEG_INFINITY;
    let mut best_counts = None;
    let mut spent = 0usize;
    while spent < cfg.budget {
        let batch = cfg.episodes_per_update.min(cfg.budget - spent);
        let mut episodes = Vec::with_capacity(batch);
        for _ in 0..batch {
            episodes.push(sample_action_sequence(&policy, &space, &mut sampler)?);
        }
        let rewards: Vec<f64> = episodes
            .par_iter()
            .map(|ep| compute_reward(&ep.actions, &space, env))
            .collect::<Result<Vec<f64>>>()?;
        for (ep, &r) in episodes.iter_mut().zip(rewards.iter()) {
            ep.reward = Some(r);
            let counts = space.counts_for(&ep.actions)?;
            if r > best_reward {
                best_reward = r;
                if r >= 0.0 {
                    best_counts = Some(counts.clone());
                }
            }
            history.push(HistoryRow {
                episode: spent,
                reward: r,
                counts,
                best_reward,
            });
            spent += 1;
        }
        reinforce_update(&mut policy, &episodes, cfg.policy_lr, &mut baseline)?;
    }
    Ok(SearchOutcome {
        best_counts,
        best_reward,
        history,
        policy,
    })
}

/// Probability the policy assigns to a specific count sequence.
pub fn sequence_probability(
    policy: &PolicyNetwork,
    space: &ActionSpace,
    counts: &[usize],
) -> Result<f64> {
    let actions: Vec<usize> = counts
        .iter()
        .map(|&c| {
            space.index_of(c).ok_or_else(|| {
                Error::BadConfig(format!("count {c} is not an action candidate"))
            })
        })
        .collect::<Result<Vec<usize>>>()?;
    if actions.len() != space.horizon() {
        return Err(Error::BadConfig(format!(
            "{} counts for a horizon of {}",
            actions.len(),
            space.horizon()
        )));
    }
    let mut inputs = Vec::with_capacity(actions.len());
    let mut prev = None;
    for (step, &a) in actions.iter().enumerate() {
        inputs.push(encode_policy_input(space.filter_counts()[step], prev, space));
        prev = Some(a);
    }
    Ok(policy.episode_log_prob(&inputs, &actions)?.exp())
}

/// Layer-by-layer doubling sweep. The ungrouped starting state is evaluated
/// once; each layer then probes counts 2, 4, 8, ... (its own filter count is
/// the incumbent and is not re-evaluated), keeps doubling while accuracy
/// strictly improves, and reverts to the last improving count otherwise.
pub fn greedy_search<E: Environment>(env: &E) -> Result<(Vec<usize>, f64)> {
    let filters = env.filter_counts().to_vec();
    if filters.is_empty() {
        return Err(Error::BadConfig("no clusterable layers".into()));
    }
    let mut state = filters.clone();
    let mut best_acc = score_counts(env, &state)?;
    for layer in 0..state.len() {
        let incumbent = state[layer];
        let mut kept = incumbent;
        let mut probe = 2usize;
        while probe < filters[layer] {
            state[layer] = probe;
            let acc = score_counts(env, &state)?;
            if acc > best_acc {
                best_acc = acc;
                kept = probe;
            } else {
                break;
            }
            probe *= 2;
        }
        state[layer] = kept;
    }
    Ok((state, best_acc))
}

/// Coordinate descent over counts: start every layer at two groups, sweep
/// layers trying to double and to halve, take the better move when it
/// strictly improves accuracy (ties keep the incumbent, doubling wins a tie
/// between moves), and stop after a full sweep without change.
pub fn manual_search<E: Environment>(env: &E) -> Result<(Vec<usize>, f64)> {
    let filters = env.filter_counts().to_vec();
    if filters.is_empty() {
        return Err(Error::BadConfig("no clusterable layers".into()));
    }
    let mut state: Vec<usize> = filters.iter().map(|&f| 2.min(f)).collect();
    let mut best_acc = score_counts(env, &state)?;
    loop {
        let mut changed = false;
        for layer in 0..state.len() {
            let here = state[layer];
            let mut moves = Vec::new();
            if here * 2 <= filters[layer] {
                moves.push(here * 2);
            }
            if here >= 2 {
                moves.push(here / 2);
            }
            let mut chosen = None;
            let mut chosen_acc = best_acc;
            for candidate in moves {
                state[layer] = candidate;
                let acc = score_counts(env, &state)?;
                if acc > chosen_acc {
                    chosen_acc = acc;
                    chosen = Some(candidate);
                }
            }
            match chosen {
                Some(candidate) => {
                    state[layer] = candidate;
                    best_acc = chosen_acc;
                    changed = true;
                }
                None => state[layer] = here,
            }
        }
        if !changed {
            break;
        }
    }
    Ok((state, best_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct TableEnv<F: Fn(&[usize]) -> f64 + Sync> {
        filters: Vec<usize>,
        score: F,
        calls: AtomicUsize,
    }

    impl<F: Fn(&[usize]) -> f64 + Sync> TableEnv<F> {
        fn new(filters: Vec<usize>, score: F) -> Self {
            TableEnv {
                filters,
                score,
                calls: AtomicUsize::new(0),
            }
        }

        fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl<F: Fn(&[usize]) -> f64 + Sync> Environment for TableEnv<F> {
        fn filter_counts(&self) -> &[usize] {
            &self.filters
        }

        fn evaluate(&self, counts: &[usize]) -> Result<f64> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok((self.score)(counts))
        }
    }

    struct DivergingEnv {
        filters: Vec<usize>,
    }

    impl Environment for DivergingEnv {
        fn filter_counts(&self) -> &[usize] {
            &self.filters
        }

        fn evaluate(&self, _counts: &[usize]) -> Result<f64> {
            Err(Error::Divergence { iteration: 7 })
        }
    }

    fn uniform_policy(space: &ActionSpace) -> PolicyNetwork {
        let na = space.num_actions();
        let h = 3;
        PolicyNetwork::from_parts(
            na + 1,
            h,
            na,
            Tensor::zeros(&[4 * h, na + 1]),
            Tensor::zeros(&[4 * h, h]),
            Tensor::zeros(&[4 * h]),
            Tensor::zeros(&[na, h]),
            Tensor::zeros(&[na]),
        )
        .unwrap()
    }

    fn biased_policy(space: &ActionSpace, favored: usize) -> PolicyNetwork {
        let mut policy = uniform_policy(space);
        policy.tensors_mut()[4].data_mut()[favored] = 30.0;
        policy
    }

    #[test]
    fn action_space_ladder_and_validity() {
        let space = ActionSpace::new(&[8, 16]).unwrap();
        assert_eq!(space.candidates(), &[1, 2, 4, 8, 16]);
        assert_eq!(space.num_actions(), 5);
        assert_eq!(space.horizon(), 2);
        // 16 groups on an 8-filter layer is impossible
        let idx16 = space.index_of(16).unwrap();
        assert!(!space.is_valid(0, idx16));
        assert!(space.is_valid(1, idx16));
        assert!(space.is_valid(0, space.index_of(8).unwrap()));
    }

    #[test]
    fn action_space_keeps_exact_filter_counts() {
        let space = ActionSpace::new(&[12, 16]).unwrap();
        assert_eq!(space.candidates(), &[1, 2, 4, 8, 12, 16]);
        assert!(space.is_valid(0, space.index_of(12).unwrap()));
        assert!(!space.is_valid(0, space.index_of(16).unwrap()));
    }

    #[test]
    fn encoding_layout_matches_contract() {
        let space = ActionSpace::new(&[8, 16]).unwrap();
        let first = encode_policy_input(8, None, &space);
        assert_eq!(first.len(), space.num_actions() + 1);
        assert_eq!(first[0], 0.5);
        assert!(first[1..].iter().all(|&v| v == 0.0));
        let later = encode_policy_input(16, Some(2), &space);
        assert_eq!(later[0], 1.0);
        assert_eq!(later[3], 1.0);
        assert_eq!(later[1..].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn uniform_policy_samples_all_actions_evenly() {
        let space = ActionSpace::new(&[8]).unwrap();
        let policy = uniform_policy(&space);
        let mut stream = rng::stream(3, "controller.test");
        let mut freq = vec![0usize; space.num_actions()];
        let n = 10_000;
        for _ in 0..n {
            let ep = sample_action_sequence(&policy, &space, &mut stream).unwrap();
            freq[ep.actions[0]] += 1;
        }
        let expected = 1.0 / space.num_actions() as f64;
        for &count in &freq {
            let p = count as f64 / n as f64;
            assert!(
                (p - expected).abs() < 0.02,
                "frequency {p} too far from {expected}"
            );
        }
    }

    #[test]
    fn saturated_policy_is_constant() {
        let space = ActionSpace::new(&[8, 8, 8]).unwrap();
        let policy = biased_policy(&space, 0);
        let mut stream = rng::stream(4, "controller.test");
        let ep = sample_action_sequence(&policy, &space, &mut stream).unwrap();
        assert_eq!(ep.actions, vec![0, 0, 0]);
    }

    #[test]
    fn sampled_log_probs_match_fresh_forward_pass() {
        let space = ActionSpace::new(&[8, 16]).unwrap();
        let mut init = rng::stream(5, "controller.test");
        let policy = policy_for_space(&space, 4, &mut init).unwrap();
        let mut stream = rng::stream(6, "controller.test");
        let ep = sample_action_sequence(&policy, &space, &mut stream).unwrap();
        let recomputed = policy.episode_log_prob(&ep.inputs, &ep.actions).unwrap();
        assert!((ep.log_prob() - recomputed).abs() < 1e-10);
    }

    #[test]
    fn invalid_action_scores_minus_one_without_evaluation() {
        let space = ActionSpace::new(&[4, 16]).unwrap();
        let env = TableEnv::new(vec![4, 16], |_| 0.9);
        let idx16 = space.index_of(16).unwrap();
        let idx2 = space.index_of(2).unwrap();
        let r = compute_reward(&[idx16, idx2], &space, &env).unwrap();
        assert_eq!(r, -1.0);
        assert_eq!(env.calls(), 0, "invalid sequences must skip training");
        let r = compute_reward(&[idx2, idx2], &space, &env).unwrap();
        assert_eq!(r, 0.9);
        assert_eq!(env.calls(), 1);
    }

    #[test]
    fn divergence_scores_zero_not_minus_one() {
        let space = ActionSpace::new(&[4]).unwrap();
        let env = DivergingEnv { filters: vec![4] };
        let idx2 = space.index_of(2).unwrap();
        assert_eq!(compute_reward(&[idx2], &space, &env).unwrap(), 0.0);
    }

    #[test]
    fn out_of_range_accuracy_is_rejected() {
        let space = ActionSpace::new(&[4]).unwrap();
        let env = TableEnv::new(vec![4], |_| 1.5);
        let idx2 = space.index_of(2).unwrap();
        assert!(compute_reward(&[idx2], &space, &env).is_err());
    }

    #[test]
    fn zero_rewards_leave_policy_untouched() {
        let space = ActionSpace::new(&[8, 8]).unwrap();
        let mut init = rng::stream(7, "controller.test");
        let mut policy = policy_for_space(&space, 4, &mut init).unwrap();
        let before: Vec<Vec<f64>> =
            policy.tensors().iter().map(|t| t.data().to_vec()).collect();
        let mut stream = rng::stream(8, "controller.test");
        let mut episodes = Vec::new();
        for _ in 0..5 {
            let mut ep = sample_action_sequence(&policy, &space, &mut stream).unwrap();
            ep.reward = Some(0.0);
            episodes.push(ep);
        }
        let mut baseline = RewardBaseline::new(BaselineMode::Off).unwrap();
        reinforce_update(&mut policy, &episodes, 0.01, &mut baseline).unwrap();
        for (t, b) in policy.tensors().iter().zip(before.iter()) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn rewarded_action_gains_probability() {
        let space = ActionSpace::new(&[2]).unwrap();
        let mut policy = uniform_policy(&space);
        let mut stream = rng::stream(9, "controller.test");
        let mut baseline = RewardBaseline::new(BaselineMode::Off).unwrap();
        let p_before = sequence_probability(&policy, &space, &[1]).unwrap();
        for _ in 0..200 {
            let mut ep = sample_action_sequence(&policy, &space, &mut stream).unwrap();
            let counts = space.counts_for(&ep.actions).unwrap();
            ep.reward = Some(if counts == [1] { 1.0 } else { 0.0 });
            reinforce_update(&mut policy, &[ep], 0.05, &mut baseline).unwrap();
        }
        let p_after = sequence_probability(&policy, &space, &[1]).unwrap();
        assert!(
            p_after > p_before + 0.2,
            "P(rewarded) {p_before} -> {p_after}"
        );
    }

    #[test]
    fn unset_reward_is_rejected() {
        let space = ActionSpace::new(&[4]).unwrap();
        let mut policy = uniform_policy(&space);
        let mut stream = rng::stream(10, "controller.test");
        let ep = sample_action_sequence(&policy, &space, &mut stream).unwrap();
        let mut baseline = RewardBaseline::new(BaselineMode::Off).unwrap();
        assert!(matches!(
            reinforce_update(&mut policy, &[ep], 0.01, &mut baseline),
            Err(Error::BadConfig(_))
        ));
    }

    fn match_fraction_env(filters: Vec<usize>, target: Vec<usize>) -> TableEnv<impl Fn(&[usize]) -> f64 + Sync> {
        TableEnv::new(filters, move |counts: &[usize]| {
            let hits = counts
                .iter()
                .zip(target.iter())
                .filter(|(a, b)| a == b)
                .count();
            hits as f64 / target.len() as f64
        })
    }

    #[test]
    fn search_history_is_complete_and_monotone() {
        let env = match_fraction_env(vec![8, 8], vec![4, 2]);
        let cfg = SearchConfig {
            budget: 40,
            episodes_per_update: 5,
            seed: 11,
            hidden_dim: 8,
            ..SearchConfig::default()
        };
        let outcome = search(&env, &cfg).unwrap();
        assert_eq!(outcome.history.len(), 40);
        for (i, row) in outcome.history.iter().enumerate() {
            assert_eq!(row.episode, i);
            assert_eq!(row.counts.len(), 2);
        }
        for pair in outcome.history.windows(2) {
            assert!(pair[1].best_reward >= pair[0].best_reward);
        }
        assert_eq!(
            outcome.best_reward,
            outcome.history.last().unwrap().best_reward
        );
        assert!(outcome.best_counts.is_some());
    }

    #[test]
    fn search_is_deterministic_per_seed() {
        let env = match_fraction_env(vec![8, 8], vec![4, 2]);
        let cfg = SearchConfig {
            budget: 25,
            episodes_per_update: 5,
            seed: 12,
            hidden_dim: 8,
            ..SearchConfig::default()
        };
        let a = search(&env, &cfg).unwrap();
        let b = search(&env, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_counts, b.best_counts);
    }

    #[test]
    fn single_episode_budget_runs_once() {
        let env = match_fraction_env(vec![8], vec![2]);
        let cfg = SearchConfig {
            budget: 1,
            episodes_per_update: 1,
            seed: 13,
            hidden_dim: 4,
            ..SearchConfig::default()
        };
        let outcome = search(&env, &cfg).unwrap();
        assert_eq!(outcome.history.len(), 1);
        assert_eq!(env.calls(), 1);
    }

    #[test]
    fn search_improves_on_match_task() {
        let env = match_fraction_env(vec![8, 8], vec![4, 2]);
        let cfg = SearchConfig {
            budget: 600,
            episodes_per_update: 5,
            policy_lr: 0.2,
            seed: 14,
            hidden_dim: 8,
            ..SearchConfig::default()
        };
        let outcome = search(&env, &cfg).unwrap();
        assert_eq!(outcome.best_reward, 1.0);
        assert_eq!(outcome.best_counts, Some(vec![4, 2]));
        // well above the uniform 1/16 and still climbing at this budget
        let space = ActionSpace::new(&[8, 8]).unwrap();
        let p = sequence_probability(&outcome.policy, &space, &[4, 2]).unwrap();
        assert!(p > 0.15, "P(target) only {p}");
    }

    #[test]
    fn greedy_picks_peak_count_on_first_layer() {
        // accuracy depends only on layer 0's count, peaking at 4
        let acc = |counts: &[usize]| match counts[0] {
            2 => 0.6,
            4 => 0.8,
            8 => 0.7,
            _ => 0.5,
        };
        let env = TableEnv::new(vec![16, 16], acc);
        let (state, best) = greedy_search(&env).unwrap();
        assert_eq!(state[0], 4);
        assert_eq!(best, 0.8);
        // layer 1 probes never beat 0.8, so it stays ungrouped
        assert_eq!(state[1], 16);
    }

    #[test]
    fn greedy_reverts_when_grouping_never_helps() {
        // fewer groups always hurt: accuracy grows with the count
        let env = TableEnv::new(vec![16, 8], |counts: &[usize]| {
            counts.iter().map(|&c| c as f64).sum::<f64>() / 100.0
        });
        let (state, _) = greedy_search(&env).unwrap();
        assert_eq!(state, vec![16, 8]);
    }

    #[test]
    fn greedy_eval_count_within_ladder_bound() {
        let env = TableEnv::new(vec![16], |counts: &[usize]| {
            1.0 - counts[0] as f64 / 100.0
        });
        let (state, _) = greedy_search(&env).unwrap();
        // log2(16) = 4: the ungrouped baseline plus probes 2, 4, 8
        assert!(env.calls() <= 4, "{} evaluations", env.calls());
        assert_eq!(state, vec![2]);
    }

    #[test]
    fn manual_converges_to_unimodal_peak() {
        // peak at count 8 on both layers
        let env = TableEnv::new(vec![32, 32], |counts: &[usize]| {
            counts
                .iter()
                .map(|&c| 1.0 - ((c as f64).log2() - 3.0).abs() / 10.0)
                .sum::<f64>()
                / 2.0
        });
        let (state, _) = manual_search(&env).unwrap();
        assert_eq!(state, vec![8, 8]);
    }

    #[test]
    fn manual_stops_after_one_flat_sweep() {
        let env = TableEnv::new(vec![8, 8], |_| 0.5);
        let (state, best) = manual_search(&env).unwrap();
        assert_eq!(state, vec![2, 2]);
        assert_eq!(best, 0.5);
        // baseline + one sweep of two moves per layer
        assert_eq!(env.calls(), 5);
    }

    #[test]
    fn manual_never_emits_invalid_counts() {
        let env = TableEnv::new(vec![1, 2, 16], |counts: &[usize]| {
            counts.iter().map(|&c| c as f64).sum::<f64>() / 100.0
        });
        let (state, _) = manual_search(&env).unwrap();
        for (&c, &f) in state.iter().zip(env.filter_counts().iter()) {
            assert!(c >= 1 && c <= f, "count {c} invalid for {f} filters");
        }
    }
}
