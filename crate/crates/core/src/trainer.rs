//! Episodic training: pretrain `F_agg`, cluster into pseudo-domains, then
//! train the domain-specific networks and `F_agg` together.
//!
//! Every episode stream draws from its own named substream of the run seed,
//! so turning one loss term off never shifts the episodes seen by another.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::clustering::{self, ClusterModel, KMeansOptions};
use crate::container::Tensor;
use crate::encoder::{self, EncoderConfig, EncoderParams};
use crate::episodes::{self, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, Distance, Head, LossOutput, NetTag, ANGULAR_MIN_SCALE};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    EuclideanProto,
    Angular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Pretrain, cluster into pseudo-domains, then joint training.
    Full,
    /// Aggregation loss only, for `pretrain_iters + main_iters` steps.
    ProtonetBaseline,
    /// Joint training with the true domain ids instead of clustering.
    OriginalLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub lambda_dg: f64,
    pub pretrain_iters: usize,
    pub main_iters: usize,
    pub specific_warm_start: bool,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Number of pseudo-domains.
    pub m: usize,
    pub loss: LossVariant,
    /// Logit distance for `euclidean-proto`.
    pub distance: Distance,
    /// Train each specific network to completion before `F_agg`.
    pub sequential: bool,
    /// Conv layers used for style features; empty means all of them.
    pub style_layers: Vec<usize>,
    pub kmeans_max_iter: usize,
    /// Progress log interval in iterations; 0 disables progress logging.
    pub log_every: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 5,
            queries: 5,
            lambda_dg: 0.8,
            pretrain_iters: 2000,
            main_iters: 5000,
            specific_warm_start: true,
            lr: 0.001,
            momentum: 0.9,
            seed: 1,
            m: 4,
            loss: LossVariant::EuclideanProto,
            distance: Distance::SqEuclidean,
            sequential: false,
            style_layers: Vec::new(),
            kmeans_max_iter: 100,
            log_every: 500,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_dg >= 0.0) || !self.lambda_dg.is_finite() {
            return Err(Error::config(format!("lambda_dg must be >= 0, got {}", self.lambda_dg)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.way < 2 || self.shot == 0 || self.queries == 0 {
            return Err(Error::config("episodes need way >= 2, shot >= 1, queries >= 1"));
        }
        if self.m == 0 {
            return Err(Error::config("m must be at least 1"));
        }
        self.encoder.validate()
    }

    pub fn head(&self) -> Head {
        match self.loss {
            LossVariant::EuclideanProto => Head::Distance(self.distance),
            LossVariant::Angular => Head::angular_default(),
        }
    }

    fn style_layers_for(&self, agg: &EncoderParams) -> Vec<usize> {
        if self.style_layers.is_empty() {
            clustering::all_layers(agg)
        } else {
            self.style_layers.clone()
        }
    }
}

/// Parameters, momentum buffers and head of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub params: EncoderParams,
    pub velocity: EncoderParams,
    pub head: Head,
    head_velocity: (f64, f64),
}

impl Net {
    pub fn new(params: EncoderParams, head: Head) -> Self {
        Self {
            velocity: params.zeros_like(),
            params,
            head,
            head_velocity: (0.0, 0.0),
        }
    }

    /// Angular head parameters as checkpoint extras.
    pub fn head_tensors(&self) -> Vec<Tensor> {
        match self.head {
            Head::Angular { scale, bias } => vec![
                Tensor::new("head.scale", vec![1], vec![scale]),
                Tensor::new("head.bias", vec![1], vec![bias]),
            ],
            Head::Distance(_) => Vec::new(),
        }
    }

    /// Restores a network from a checkpoint, with `head` as the fallback.
    pub fn from_checkpoint(params: EncoderParams, extras: &[Tensor], head: Head) -> Result<Self> {
        let find = |name: &str| extras.iter().find(|t| t.name == name).map(|t| t.data[0]);
        let head = match (head, find("head.scale"), find("head.bias")) {
            (Head::Angular { .. }, Some(scale), Some(bias)) => Head::Angular { scale, bias },
            (Head::Angular { .. }, _, _) => {
                return Err(Error::format("angular checkpoint lacks head.scale/head.bias"))
            }
            (h, _, _) => h,
        };
        Ok(Self::new(params, head))
    }

    fn apply(&mut self, grad: &losses::NetGrad, cfg: &TrainConfig, iteration: usize) -> Result<()> {
        sgd_step(
            &mut self.params,
            &grad.params,
            &mut self.velocity,
            cfg.lr,
            cfg.momentum,
            iteration,
        )?;
        if let (Head::Angular { scale, bias }, Some((ds, db))) = (&mut self.head, grad.head) {
            if !ds.is_finite() || !db.is_finite() {
                return Err(Error::Training {
                    iteration,
                    message: "non-finite angular head gradient".into(),
                });
            }
            let v = &mut self.head_velocity;
            v.0 = cfg.momentum * v.0 + ds;
            v.1 = cfg.momentum * v.1 + db;
            *scale = (*scale - cfg.lr * v.0).max(ANGULAR_MIN_SCALE);
            *bias -= cfg.lr * v.1;
        }
        Ok(())
    }
}

/// `v <- momentum * v + g; theta <- theta - lr * v`.
pub fn sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    velocity: &mut EncoderParams,
    lr: f64,
    momentum: f64,
    iteration: usize,
) -> Result<()> {
    if params.config() != grads.config() || params.config() != velocity.config() {
        return Err(Error::usage("sgd_step shape mismatch"));
    }
    if !grads.is_finite() {
        return Err(Error::Training {
            iteration,
            message: "non-finite gradient".into(),
        });
    }
    for ((p, &g), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(velocity.values_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Losses of one joint-training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MainRecord {
    pub agg: f64,
    pub dg: Option<f64>,
    pub specific: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub pretrain: Vec<f64>,
    pub main: Vec<MainRecord>,
}

impl LossLog {
    /// Tab-separated per-iteration losses.
    pub fn to_text(&self) -> String {
        let mut s = String::from("phase\titer\tagg\tdg\tspecific\n");
        for (i, v) in self.pretrain.iter().enumerate() {
            s.push_str(&format!("pretrain\t{i}\t{v:.9e}\t-\t-\n"));
        }
        for (i, r) in self.main.iter().enumerate() {
            let dg = r.dg.map_or("-".to_string(), |v| format!("{v:.9e}"));
            let sp = if r.specific.is_empty() {
                "-".to_string()
            } else {
                r.specific
                    .iter()
                    .map(|v| format!("{v:.9e}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            s.push_str(&format!("main\t{i}\t{:.9e}\t{dg}\t{sp}\n", r.agg));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub agg: Net,
    pub specifics: Vec<Net>,
    pub iteration: usize,
    pub log: LossLog,
}

fn check_loss(out: &LossOutput, iteration: usize, what: &str) -> Result<()> {
    if out.value.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            iteration,
            message: format!("non-finite {what} loss"),
        })
    }
}

/// Fresh `F_agg` drawn from the run seed.
pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).split("init-agg");
    Ok(TrainState {
        agg: Net::new(encoder::init_params(&cfg.encoder, &mut rng)?, cfg.head()),
        specifics: Vec::new(),
        iteration: 0,
        log: LossLog::default(),
    })
}

/// Step 1: `pretrain_iters` aggregation episodes, one update each.
pub fn pretrain_agg(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let mut rng = Rng::new(cfg.seed).split("pretrain");
    for it in 0..cfg.pretrain_iters {
        let ep = episodes::sample_aggregation(dataset, cfg.way, cfg.shot, cfg.queries, &mut rng)?;
        let out = losses::proto_loss(&state.agg.params, state.agg.head, NetTag::Agg, dataset, &ep)?;
        check_loss(&out, state.iteration, "aggregation")?;
        state.agg.apply(&out.grads[0], cfg, state.iteration)?;
        state.log.pretrain.push(out.value);
        state.iteration += 1;
        if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
            info!("pretrain {}/{} loss {:.4}", it + 1, cfg.pretrain_iters, out.value);
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    /// `None` when true domain ids were used.
    pub model: Option<ClusterModel>,
    pub labels: Vec<usize>,
    pub histogram: Vec<usize>,
}

/// Step 2: pseudo-domain labels from `F_agg` style features, or the true
/// domain ids when `use_true_domains` is set.
pub fn cluster_phase(
    agg: &EncoderParams,
    dataset: &mut Dataset,
    cfg: &TrainConfig,
    use_true_domains: bool,
) -> Result<ClusterOutcome> {
    if use_true_domains {
        dataset.use_true_domains();
        return Ok(ClusterOutcome {
            model: None,
            labels: dataset.pseudo_labels(),
            histogram: dataset.pseudo_histogram(),
        });
    }
    let mut rng = Rng::new(cfg.seed).split("cluster");
    let opts = KMeansOptions {
        max_iter: cfg.kmeans_max_iter,
        ..KMeansOptions::default()
    };
    let layers = cfg.style_layers_for(agg);
    let model = clustering::fit_pseudo_domains(agg, dataset, &layers, cfg.m, &mut rng, opts)?;
    let labels = clustering::assign_pseudo_labels(&model, agg, dataset)?;
    let histogram = dataset.pseudo_histogram();
    info!("pseudo-domain histogram {histogram:?}");
    Ok(ClusterOutcome {
        model: Some(model),
        labels,
        histogram,
    })
}

/// Creates one specific network per pseudo-domain.
pub fn init_specifics(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig) -> Result<()> {
    let root = Rng::new(cfg.seed);
    state.specifics = (0..dataset.n_pseudo_domains())
        .map(|j| {
            let params = if cfg.specific_warm_start {
                state.agg.params.clone()
            } else {
                encoder::init_params(&cfg.encoder, &mut root.split(&format!("init-specific-{j}")))?
            };
            let head = if cfg.specific_warm_start {
                state.agg.head
            } else {
                cfg.head()
            };
            Ok(Net::new(params, head))
        })
        .collect::<Result<_>>()?;
    Ok(())
}

fn specific_step(
    net: &mut Net,
    j: usize,
    dataset: &Dataset,
    cfg: &TrainConfig,
    rng: &mut Rng,
    iteration: usize,
) -> Result<f64> {
    let ep = episodes::sample_specific(dataset, j, cfg.way, cfg.shot, cfg.queries, rng)?;
    let out = losses::proto_loss(&net.params, net.head, NetTag::Specific(j), dataset, &ep)?;
    check_loss(&out, iteration, "domain-specific")?;
    net.apply(&out.grads[0], cfg, iteration)?;
    Ok(out.value)
}

/// Episode streams of the joint phase, one per episode kind and network.
#[derive(Debug, Clone)]
pub struct MainStreams {
    agg: Rng,
    mismatch: Rng,
    specific: Vec<Rng>,
}

impl MainStreams {
    pub fn new(seed: u64, n_specific: usize) -> Self {
        let root = Rng::new(seed);
        Self {
            agg: root.split("main-agg"),
            mismatch: root.split("main-mismatch"),
            specific: (0..n_specific)
                .map(|j| root.split(&format!("specific-{j}")))
                .collect(),
        }
    }
}

/// Sub-step (b): one aggregation and one mismatch episode, one update of
/// `F_agg` on `L_agg + lambda * L_dg`. Returns the two loss terms.
pub fn agg_substep(
    state: &mut TrainState,
    streams: &mut MainStreams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    lambda: f64,
) -> Result<(f64, Option<f64>)> {
    let ep = episodes::sample_aggregation(dataset, cfg.way, cfg.shot, cfg.queries, &mut streams.agg)?;
    let mismatch = if lambda > 0.0 {
        Some(episodes::sample_mismatch(
            dataset,
            state.specifics.len(),
            cfg.way,
            cfg.shot,
            cfg.queries,
            &mut streams.mismatch,
        )?)
    } else {
        None
    };
    let specifics: Vec<EncoderParams> = if lambda > 0.0 {
        state.specifics.iter().map(|n| n.params.clone()).collect()
    } else {
        Vec::new()
    };
    let out = losses::combined_loss(
        &state.agg.params,
        state.agg.head,
        &specifics,
        dataset,
        &ep,
        mismatch.as_ref(),
        lambda,
    )?;
    check_loss(&out, state.iteration, "combined")?;
    let grad = out
        .grad(NetTag::Agg)
        .ok_or_else(|| Error::numerical("combined loss produced no F_agg gradient"))?;
    state.agg.apply(grad, cfg, state.iteration)?;
    Ok((out.term("agg").unwrap_or(out.value), out.term("dg")))
}

/// `lambda_dg`, or 0 when fewer than two specific networks exist.
pub fn effective_lambda(state: &TrainState, cfg: &TrainConfig) -> f64 {
    if cfg.lambda_dg > 0.0 && state.specifics.len() < 2 {
        warn!(
            "{} pseudo-domain(s): mismatch episodes impossible, lambda_dg treated as 0",
            state.specifics.len()
        );
        0.0
    } else {
        cfg.lambda_dg
    }
}

/// Steps 3 and 4. Each iteration updates every `F_j` on its own domain and
/// then `F_agg` on the combined loss. `threads` caps how many specific
/// networks are updated concurrently; results do not depend on it.
pub fn main_phase(
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<()> {
    let lambda = effective_lambda(state, cfg);
    let mut streams = MainStreams::new(cfg.seed, state.specifics.len());

    if cfg.sequential {
        let base = state.iteration;
        let mut per_j = vec![Vec::with_capacity(cfg.main_iters); state.specifics.len()];
        for (j, (net, rng)) in state
            .specifics
            .iter_mut()
            .zip(&mut streams.specific)
            .enumerate()
        {
            for it in 0..cfg.main_iters {
                per_j[j].push(specific_step(net, j, dataset, cfg, rng, base + it)?);
            }
        }
        for it in 0..cfg.main_iters {
            let (agg, dg) = agg_substep(state, &mut streams, dataset, cfg, lambda)?;
            let specific = per_j.iter().map(|v| v[it]).collect();
            state.log.main.push(MainRecord { agg, dg, specific });
            state.iteration += 1;
            log_progress(cfg, it, agg, dg);
        }
        return Ok(());
    }

    for it in 0..cfg.main_iters {
        let specific = specific_substep(state, &mut streams, dataset, cfg, threads)?;
        let (agg, dg) = agg_substep(state, &mut streams, dataset, cfg, lambda)?;
        state.log.main.push(MainRecord { agg, dg, specific });
        state.iteration += 1;
        log_progress(cfg, it, agg, dg);
    }
    Ok(())
}

/// Sub-step (a): one episode and one update per specific network, each on
/// its own pseudo-domain. Returns the per-network losses.
pub fn specific_substep(
    state: &mut TrainState,
    streams: &mut MainStreams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<Vec<f64>> {
    let iteration = state.iteration;
    update_specifics(state, &mut streams.specific, dataset, cfg, iteration, threads)
}

fn update_specifics(
    state: &mut TrainState,
    rngs: &mut [Rng],
    dataset: &Dataset,
    cfg: &TrainConfig,
    iteration: usize,
    threads: usize,
) -> Result<Vec<f64>> {
    let jobs: Vec<(usize, (&mut Net, &mut Rng))> = state
        .specifics
        .iter_mut()
        .zip(rngs.iter_mut())
        .enumerate()
        .collect();
    if threads <= 1 || jobs.len() <= 1 {
        return jobs
            .into_iter()
            .map(|(j, (net, rng))| specific_step(net, j, dataset, cfg, rng, iteration))
            .collect();
    }
    let per = jobs.len().div_ceil(threads);
    let mut chunks: Vec<Vec<(usize, (&mut Net, &mut Rng))>> = Vec::new();
    let mut it = jobs.into_iter().peekable();
    while it.peek().is_some() {
        chunks.push(it.by_ref().take(per).collect());
    }
    let results: Vec<Result<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                s.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|(j, (net, rng))| specific_step(net, j, dataset, cfg, rng, iteration))
                        .collect()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("specific worker panicked"))
            .collect()
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn log_progress(cfg: &TrainConfig, it: usize, agg: f64, dg: Option<f64>) {
    if cfg.log_every > 0 && (it + 1) % cfg.log_every == 0 {
        match dg {
            Some(dg) => info!("main {}/{} agg {agg:.4} dg {dg:.4}", it + 1, cfg.main_iters),
            None => info!("main {}/{} agg {agg:.4}", it + 1, cfg.main_iters),
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub pretrained: Net,
    pub cluster: Option<ClusterOutcome>,
}

/// Runs the whole procedure for `mode` on a copy of `dataset`.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mode: TrainMode,
    threads: usize,
) -> Result<TrainOutcome> {
    train_with(dataset, cfg, mode, threads, |_| {})
}

/// Like [`train`]; `on_failure` sees the state reached when a training
/// step fails.
pub fn train_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mode: TrainMode,
    threads: usize,
    on_failure: impl FnOnce(&TrainState),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let channels = dataset.utterances().first().map(|u| u.features.cols());
    if channels != Some(cfg.encoder.input_channels) {
        return Err(Error::config(format!(
            "encoder expects {} input channels, data has {channels:?}",
            cfg.encoder.input_channels
        )));
    }
    let mut ds = dataset.clone();
    let mut state = init_state(cfg)?;
    let mut pretrained = None;
    match run_phases(&mut state, &mut pretrained, &mut ds, cfg, mode, threads) {
        Ok(cluster) => Ok(TrainOutcome {
            state,
            pretrained: pretrained.expect("set after pretraining"),
            cluster,
        }),
        Err(e) => {
            if matches!(e, Error::Training { .. } | Error::Numerical(_)) {
                on_failure(&state);
            }
            Err(e)
        }
    }
}

fn run_phases(
    state: &mut TrainState,
    pretrained: &mut Option<Net>,
    ds: &mut Dataset,
    cfg: &TrainConfig,
    mode: TrainMode,
    threads: usize,
) -> Result<Option<ClusterOutcome>> {
    pretrain_agg(state, ds, cfg)?;
    *pretrained = Some(state.agg.clone());
    match mode {
        TrainMode::ProtonetBaseline => {
            if cfg.lambda_dg > 0.0 {
                warn!("protonet-baseline ignores lambda_dg = {}", cfg.lambda_dg);
            }
            let base = TrainConfig {
                lambda_dg: 0.0,
                ..cfg.clone()
            };
            main_phase(state, ds, &base, threads)?;
            Ok(None)
        }
        TrainMode::Full | TrainMode::OriginalLabels => {
            let original = mode == TrainMode::OriginalLabels;
            if original && cfg.m != ds.n_domains() {
                warn!(
                    "original-labels uses the {} true domains, ignoring m = {}",
                    ds.n_domains(),
                    cfg.m
                );
            }
            let c = cluster_phase(&state.agg.params, ds, cfg, original)?;
            init_specifics(state, ds, cfg)?;
            main_phase(state, ds, cfg, threads)?;
            Ok(Some(c))
        }
    }
}
