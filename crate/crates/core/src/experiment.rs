//! Experiment orchestration: pretraining, per-run pipelines, the k-sweep
//! and layer-subset ablations, and deterministic CSV emission.
//!
//! Every run's randomness derives from the root seed through named streams,
//! so identical configs rewrite identical bytes. Floats are printed with
//! the shortest round-trip formatting; aggregate rows recompute exactly
//! from the per-run rows they summarize.

use crate::checkpoint;
use crate::clustering::{self, ClusteringConfig, GroupAssignment};
use crate::config::{ExperimentConfig, SearchMethod, TaskKind};
use crate::controller::{self, SearchConfig, SearchOutcome, TrainingEnvironment};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::network::{LayerSpec, Network};
use crate::rng;
use crate::trainer::{self, FineTuneConfig, LossTraceRow};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Once;

/// Layer-subset ablation: clustered-layer prefix sizes; `None` keeps every
/// clusterable layer.
pub const ABLATION_PREFIXES: &[Option<usize>] =
    &[Some(1), Some(3), Some(5), Some(7), None];

static THREAD_CAP: Once = Once::new();

/// Honor `GNAK_THREADS` once per process; later changes are ignored.
fn init_thread_cap() {
    THREAD_CAP.call_once(|| {
        if let Ok(raw) = std::env::var("GNAK_THREADS") {
            if let Ok(n) = raw.parse::<usize>() {
                if n >= 1 {
                    let _ = rayon::ThreadPoolBuilder::new()
                        .num_threads(n)
                        .build_global();
                }
            }
        }
    });
}

/// Three clusterable layers (8, 8, and 16 filters) over 12x12 grayscale.
pub fn transfer_network_specs() -> (Vec<usize>, Vec<LayerSpec>) {
    (
        vec![12, 12, 1],
        vec![
            LayerSpec::conv2d([12, 12, 1], 8, 3, 1),
            LayerSpec::Relu,
            LayerSpec::conv2d([10, 10, 8], 8, 3, 2),
            LayerSpec::Relu,
            LayerSpec::dense(128, 16),
            LayerSpec::Relu,
            LayerSpec::dense(16, data::SYNTH_CLASSES),
        ],
    )
}

/// Eight clusterable layers for the layer-subset ablation.
pub fn ablation_network_specs() -> (Vec<usize>, Vec<LayerSpec>) {
    (
        vec![12, 12, 1],
        vec![
            LayerSpec::conv2d([12, 12, 1], 8, 3, 1),
            LayerSpec::Relu,
            LayerSpec::conv2d([10, 10, 8], 8, 3, 2),
            LayerSpec::Relu,
            LayerSpec::dense(128, 24),
            LayerSpec::Relu,
            LayerSpec::dense(24, 20),
            LayerSpec::Relu,
            LayerSpec::dense(20, 18),
            LayerSpec::Relu,
            LayerSpec::dense(18, 16),
            LayerSpec::Relu,
            LayerSpec::dense(16, 16),
            LayerSpec::Relu,
            LayerSpec::dense(16, 16),
            LayerSpec::Relu,
            LayerSpec::dense(16, data::SYNTH_CLASSES),
        ],
    )
}

/// Group counts used when the config names none: half of each layer's
/// filters, so grouping is engaged without being degenerate.
pub fn default_group_counts(net: &Network) -> Vec<usize> {
    net.clusterable_layers()
        .into_iter()
        .map(|l| (net.spec(l).filter_count().expect("clusterable") / 2).max(1))
        .collect()
}

/// Append-only run log; one line per event, flushed immediately.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunLog { path: path.into() }
    }

    pub fn append(&self, stage: &str, message: &str) {
        use std::io::Write;
        let line = format!("[{stage}] {message}\n");
        let result = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if result.is_err() {
            log::warn!("run log write failed for {}", self.path.display());
        }
    }
}

/// One metrics row: a per-run measurement or an aggregate over runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// "run", "mean", or "std".
    pub record: String,
    pub run: Option<usize>,
    pub seed: Option<u64>,
    pub method: String,
    pub k: usize,
    /// Clustered-layer label: "all" or the prefix size.
    pub layers: String,
    pub accuracy: f64,
}

/// Loss-trace rows of one run, tagged with the run's identity columns.
#[derive(Debug, Clone)]
pub struct TraceBlock {
    pub method: String,
    pub k: usize,
    pub layers: String,
    pub run: usize,
    pub rows: Vec<LossTraceRow>,
}

/// Search-history rows of one run, tagged like a trace block.
#[derive(Debug, Clone)]
pub struct HistoryBlock {
    pub method: String,
    pub k: usize,
    pub layers: String,
    pub run: usize,
    pub rows: Vec<controller::HistoryRow>,
}

#[derive(Debug)]
pub struct ExperimentSummary {
    pub records: Vec<MetricsRecord>,
    pub out_dir: PathBuf,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    (mean, var.sqrt())
}

fn stage<T>(log: &RunLog, out_dir: &Path, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    match f() {
        Ok(v) => Ok(v),
        Err(e) => {
            log.append(name, &format!("failed: {e}"));
            let marker = out_dir.join("INCOMPLETE");
            let _ = std::fs::write(&marker, format!("{name}: {e}\n"));
            Err(e)
        }
    }
}

/// Pretrain on the source dataset, or reuse the checkpoint a previous
/// invocation left in the output directory.
pub fn pretrain_or_load(
    cfg: &ExperimentConfig,
    input_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    source: &Dataset,
    log: &RunLog,
) -> Result<Network> {
    let path = cfg.out_dir.join("pretrained.gnak");
    if path.exists() {
        let net = checkpoint::load_network(&path)?;
        if net.specs() != specs.as_slice() {
            return Err(Error::BadConfig(format!(
                "checkpoint {} does not match the configured architecture",
                path.display()
            )));
        }
        log.append("pretrain", &format!("loaded {}", path.display()));
        return Ok(net);
    }
    let mut stream = rng::stream(rng::derive(cfg.seed, "experiment.pretrain", 0), "init");
    let net = Network::new(input_shape, specs, &mut stream)?;
    let (val, train) = data::split_stratified(
        source,
        0.2,
        rng::derive(cfg.seed, "experiment.pretrain-split", 0),
    )?;
    let pre_cfg = FineTuneConfig {
        iterations: cfg.pretrain_iterations,
        weights: crate::losses::LossWeights::class_only(),
        metric: trainer::MetricChoice::Off,
        clustered_layers: None,
        ..FineTuneConfig::default()
    };
    let result = trainer::fine_tune_plain(&net, &train, &val, &pre_cfg)?;
    log.append(
        "pretrain",
        &format!(
            "{} iterations, source validation accuracy {}",
            cfg.pretrain_iterations, result.accuracy
        ),
    );
    checkpoint::save_network(&result.network, &path)?;
    Ok(result.network)
}

/// Everything one fine-tuning run needs.
struct RunContext<'a> {
    base: &'a Network,
    cluster_batch: &'a Dataset,
    target: &'a Dataset,
    cfg: &'a ExperimentConfig,
}

struct RunOutput {
    network: Network,
    counts: Option<Vec<usize>>,
    test_accuracy: f64,
    trace: Vec<LossTraceRow>,
    search: Option<SearchOutcome>,
}

/// Per-run data splits: k-shot train, validation, test.
fn run_splits(target: &Dataset, k: usize, run_seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (shot, held) = data::sample_kshot(target, k, run_seed)?;
    let (val, test) = data::split_stratified(
        &held,
        0.2,
        rng::derive(run_seed, "experiment.val-split", 0),
    )?;
    Ok((shot, val, test))
}

fn head_for_run(ctx: &RunContext, run_seed: u64) -> Result<Network> {
    let mut net = ctx.base.clone();
    net.replace_head(
        ctx.target.classes(),
        &mut rng::stream(run_seed, "init"),
    )?;
    Ok(net)
}

fn clustering_config(cfg: &ExperimentConfig, run_seed: u64) -> ClusteringConfig {
    ClusteringConfig {
        restarts: cfg.kmeans_restarts,
        standardize: false,
        seed: rng::derive(run_seed, "experiment.cluster", 0),
    }
}

fn cluster_with_counts(
    net: &Network,
    ctx: &RunContext,
    counts: &[usize],
    run_seed: u64,
) -> Result<GroupAssignment> {
    clustering::build_group_assignment(
        net,
        ctx.cluster_batch.images(),
        counts,
        &clustering_config(ctx.cfg, run_seed),
    )
}

/// Plain fine-tuning baseline: no groups, classification loss only.
fn run_plain(ctx: &RunContext, k: usize, run_seed: u64) -> Result<RunOutput> {
    let net = head_for_run(ctx, run_seed)?;
    let (shot, val, test) = run_splits(ctx.target, k, run_seed)?;
    let cfg = FineTuneConfig {
        weights: crate::losses::LossWeights::class_only(),
        metric: trainer::MetricChoice::Off,
        clustered_layers: None,
        ..ctx.cfg.fine_tune.clone()
    };
    let result = trainer::fine_tune_plain(&net, &shot, &val, &cfg)?;
    Ok(RunOutput {
        test_accuracy: trainer::evaluate(&result.network, &test)?,
        network: result.network,
        counts: None,
        trace: result.trace,
        search: None,
    })
}

/// Grouped fine-tuning run, optionally preceded by a group-count search.
fn run_clustered(
    ctx: &RunContext,
    k: usize,
    run_seed: u64,
    method: SearchMethod,
    counts_override: Option<&[usize]>,
) -> Result<RunOutput> {
    let net = head_for_run(ctx, run_seed)?;
    let (shot, val, test) = run_splits(ctx.target, k, run_seed)?;
    let mut search_outcome = None;
    let counts: Option<Vec<usize>> = match method {
        SearchMethod::None => match counts_override {
            Some(c) => Some(c.to_vec()),
            None => ctx.cfg.groups.clone(),
        },
        SearchMethod::Greedy | SearchMethod::Manual | SearchMethod::Rl => {
            let env = TrainingEnvironment::new(
                &net,
                ctx.cluster_batch,
                &shot,
                &val,
                ctx.cfg.fine_tune.clone(),
                clustering_config(ctx.cfg, run_seed),
            )?;
            let best = match method {
                SearchMethod::Greedy => controller::greedy_search(&env)?.0,
                SearchMethod::Manual => controller::manual_search(&env)?.0,
                SearchMethod::Rl => {
                    let sc = SearchConfig {
                        budget: ctx.cfg.search.budget,
                        episodes_per_update: ctx.cfg.search.episodes_per_update,
                        policy_lr: ctx.cfg.search.policy_lr,
                        hidden_dim: ctx.cfg.search.hidden_dim,
                        baseline: ctx.cfg.search.baseline.clone(),
                        seed: rng::derive(run_seed, "experiment.search", 0),
                    };
                    let outcome = controller::search(&env, &sc)?;
                    let counts = outcome.best_counts.clone().ok_or_else(|| {
                        Error::BadConfig(
                            "search found no valid action sequence within budget".into(),
                        )
                    })?;
                    search_outcome = Some(outcome);
                    counts
                }
                SearchMethod::None => unreachable!(),
            };
            Some(best)
        }
    };
    let assignment = match &counts {
        Some(counts) => cluster_with_counts(&net, ctx, counts, run_seed)?,
        None => GroupAssignment::all_singletons(&net),
    };
    let result = trainer::fine_tune(&net, &assignment, &shot, &val, &ctx.cfg.fine_tune)?;
    Ok(RunOutput {
        test_accuracy: trainer::evaluate(&result.network, &test)?,
        network: result.network,
        counts,
        trace: result.trace,
        search: search_outcome,
    })
}

fn run_seed_for(cfg: &ExperimentConfig, run: usize) -> u64 {
    rng::derive(cfg.seed, "experiment.run", run as u64)
}

struct Collector {
    records: Vec<MetricsRecord>,
    traces: Vec<TraceBlock>,
    histories: Vec<HistoryBlock>,
}

impl Collector {
    fn new() -> Self {
        Collector {
            records: Vec::new(),
            traces: Vec::new(),
            histories: Vec::new(),
        }
    }

    fn push_run(
        &mut self,
        method: &str,
        k: usize,
        layers: &str,
        run: usize,
        seed: u64,
        output: RunOutput,
    ) {
        self.records.push(MetricsRecord {
            record: "run".into(),
            run: Some(run),
            seed: Some(seed),
            method: method.into(),
            k,
            layers: layers.into(),
            accuracy: output.test_accuracy,
        });
        self.traces.push(TraceBlock {
            method: method.into(),
            k,
            layers: layers.into(),
            run,
            rows: output.trace,
        });
        if let Some(outcome) = output.search {
            self.histories.push(HistoryBlock {
                method: method.into(),
                k,
                layers: layers.into(),
                run,
                rows: outcome.history,
            });
        }
    }

    /// One mean and one std row per (method, k, layers) group, in first-seen
    /// order, appended after all run rows.
    fn finish(mut self) -> (Vec<MetricsRecord>, Vec<TraceBlock>, Vec<HistoryBlock>) {
        let mut groups: Vec<(String, usize, String, Vec<f64>)> = Vec::new();
        for r in &self.records {
            let key = (&r.method, r.k, &r.layers);
            match groups
                .iter_mut()
                .find(|(m, k, l, _)| (m, *k, l) == key)
            {
                Some((_, _, _, accs)) => accs.push(r.accuracy),
                None => groups.push((
                    r.method.clone(),
                    r.k,
                    r.layers.clone(),
                    vec![r.accuracy],
                )),
            }
        }
        for (method, k, layers, accs) in groups {
            let (mean, std) = mean_std(&accs);
            for (record, value) in [("mean", mean), ("std", std)] {
                self.records.push(MetricsRecord {
                    record: record.into(),
                    run: None,
                    seed: None,
                    method: method.clone(),
                    k,
                    layers: layers.clone(),
                    accuracy: value,
                });
            }
        }
        (self.records, self.traces, self.histories)
    }
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from("record,run,seed,method,k,layers,accuracy\n");
    for r in records {
        let run = r.run.map(|v| v.to_string()).unwrap_or_default();
        let seed = r.seed.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.record, run, seed, r.method, r.k, r.layers, r.accuracy
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_loss_trace_csv(path: &Path, blocks: &[TraceBlock]) -> Result<()> {
    let mut out = String::from("method,k,layers,run,iteration,class,intra,inter,metric,total,lr\n");
    for b in blocks {
        for row in &b.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                b.method,
                b.k,
                b.layers,
                b.run,
                row.iteration,
                row.class,
                row.intra,
                row.inter,
                row.metric,
                row.total,
                row.lr
            )
            .expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_search_history_csv(path: &Path, blocks: &[HistoryBlock]) -> Result<()> {
    let horizon = blocks
        .iter()
        .flat_map(|b| b.rows.iter())
        .map(|r| r.counts.len())
        .max()
        .unwrap_or(0);
    let mut out = String::from("method,k,layers,run,episode,reward");
    for i in 1..=horizon {
        write!(out, ",action{i}").expect("string write");
    }
    out.push_str(",best_reward\n");
    for b in blocks {
        for row in &b.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                b.method, b.k, b.layers, b.run, row.episode, row.reward
            )
            .expect("string write");
            for i in 0..horizon {
                match row.counts.get(i) {
                    Some(c) => write!(out, ",{c}").expect("string write"),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{}", row.best_reward).expect("string write");
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Source and target datasets for the configured task; external IDX files
/// replace the target domain when both paths are set.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (source, target) = match cfg.task {
        TaskKind::DomainAdaptToy => data::make_domain_adapt_task(cfg.seed),
        _ => data::make_synthetic_transfer_task(cfg.seed),
    };
    match (&cfg.images, &cfg.labels) {
        (Some(images), Some(labels)) => {
            let external = data::load_idx_dataset(images, labels)?;
            Ok((source, external))
        }
        _ => Ok((source, target)),
    }
}

/// Execute a full experiment and write `metrics.csv`, `loss_trace.csv`,
/// and, for policy search, `search_history.csv` under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    init_thread_cap();
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let log = RunLog::new(cfg.out_dir.join("run.log"));
    let incomplete = cfg.out_dir.join("INCOMPLETE");
    let _ = std::fs::remove_file(&incomplete);

    let (source, target) = stage(&log, &cfg.out_dir, "data", || load_datasets(cfg))?;
    let (input_shape, specs) = match cfg.task {
        TaskKind::AblationLayers => ablation_network_specs(),
        _ => transfer_network_specs(),
    };
    let base = stage(&log, &cfg.out_dir, "pretrain", || {
        pretrain_or_load(cfg, input_shape, specs, &source, &log)
    })?;
    let cluster_batch = stage(&log, &cfg.out_dir, "cluster-batch", || {
        let (batch, _) = data::sample_kshot(
            &source,
            cfg.cluster_samples,
            rng::derive(cfg.seed, "experiment.cluster-batch", 0),
        )?;
        Ok(batch)
    })?;
    let ctx = RunContext {
        base: &base,
        cluster_batch: &cluster_batch,
        target: &target,
        cfg,
    };

    let mut collector = Collector::new();
    match cfg.task {
        TaskKind::Transfer | TaskKind::DomainAdaptToy => {
            let method = cfg.search.method;
            let label = method.name();
            for run in 0..cfg.runs {
                let seed = run_seed_for(cfg, run);
                let output = stage(&log, &cfg.out_dir, "fine-tune", || {
                    run_clustered(&ctx, cfg.k, seed, method, None)
                })?;
                log.append(
                    "fine-tune",
                    &format!("run {run} accuracy {}", output.test_accuracy),
                );
                collector.push_run(label, cfg.k, "all", run, seed, output);
            }
        }
        TaskKind::AblationK => {
            let counts = cfg
                .groups
                .clone()
                .unwrap_or_else(|| default_group_counts(&base));
            for &k in &cfg.ks {
                for run in 0..cfg.runs {
                    let seed = run_seed_for(cfg, run);
                    let plain = stage(&log, &cfg.out_dir, "fine-tune", || {
                        run_plain(&ctx, k, seed)
                    })?;
                    collector.push_run("plain", k, "all", run, seed, plain);
                    let clustered = stage(&log, &cfg.out_dir, "fine-tune", || {
                        run_clustered(&ctx, k, seed, SearchMethod::None, Some(&counts))
                    })?;
                    log.append(
                        "fine-tune",
                        &format!("k {k} run {run} clustered accuracy recorded"),
                    );
                    collector.push_run("clustered", k, "all", run, seed, clustered);
                }
            }
        }
        TaskKind::AblationLayers => {
            let clusterable = base.clusterable_layers();
            let counts = cfg
                .groups
                .clone()
                .unwrap_or_else(|| default_group_counts(&base));
            for prefix in ABLATION_PREFIXES {
                let (label, subset) = match prefix {
                    Some(p) => {
                        if *p > clusterable.len() {
                            continue;
                        }
                        (p.to_string(), Some(clusterable[..*p].to_vec()))
                    }
                    None => ("all".to_string(), None),
                };
                for run in 0..cfg.runs {
                    let seed = run_seed_for(cfg, run);
                    let subset = subset.clone();
                    let output = stage(&log, &cfg.out_dir, "fine-tune", || {
                        let mut run_cfg = ctx.cfg.clone();
                        run_cfg.fine_tune.clustered_layers = subset.clone();
                        let run_ctx = RunContext {
                            base: ctx.base,
                            cluster_batch: ctx.cluster_batch,
                            target: ctx.target,
                            cfg: &run_cfg,
                        };
                        run_clustered(&run_ctx, cfg.k, seed, SearchMethod::None, Some(&counts))
                    })?;
                    collector.push_run("clustered", cfg.k, &label, run, seed, output);
                }
            }
        }
    }

    let (records, traces, histories) = collector.finish();
    stage(&log, &cfg.out_dir, "write", || {
        write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &records)?;
        write_loss_trace_csv(&cfg.out_dir.join("loss_trace.csv"), &traces)?;
        if !histories.is_empty() {
            write_search_history_csv(&cfg.out_dir.join("search_history.csv"), &histories)?;
        }
        Ok(())
    })?;
    log.append("done", &format!("{} metric rows", records.len()));
    Ok(ExperimentSummary {
        records,
        out_dir: cfg.out_dir.clone(),
    })
}
