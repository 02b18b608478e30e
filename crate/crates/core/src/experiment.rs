//! One experiment = one output directory. Training writes the loss log,
//! per-phase checkpoints, the cluster model and a JSON report; evaluation
//! writes per-domain metrics, group averages and ROC files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container;
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::evalkit::{self, DcfParams, MetricsReport, ScoreMetric};
use crate::synthdata::{DomainGroup, GenConfig, SynthDataset};
use crate::trainer::{self, LossVariant, Net, TrainConfig, TrainMode, TrainOutcome, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainSelection {
    In,
    Out,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Scoring function; when absent it follows the training loss.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<ScoreMetric>,
    pub far_points: Vec<f64>,
    pub dcf: DcfParams,
    pub domains: DomainSelection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: None,
            far_points: vec![0.1],
            dcf: DcfParams::default(),
            domains: DomainSelection::All,
        }
    }
}

impl EvalConfig {
    pub fn metric_for(&self, loss: LossVariant) -> ScoreMetric {
        self.metric.unwrap_or(match loss {
            LossVariant::EuclideanProto => ScoreMetric::NegSqEuclidean,
            LossVariant::Angular => ScoreMetric::Cosine,
        })
    }
}

/// Everything one experiment needs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.train.validate()?;
        if self.gen.channels != self.train.encoder.input_channels {
            return Err(Error::config(format!(
                "gen.channels = {} but train.encoder.input_channels = {}",
                self.gen.channels, self.train.encoder.input_channels
            )));
        }
        Ok(())
    }
}

pub const AGG_PRETRAIN: &str = "agg_pretrain.fdgw";
pub const AGG_FINAL: &str = "agg_final.fdgw";
pub const CLUSTER_MODEL: &str = "cluster.fdgc";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const EVAL_REPORT: &str = "metrics.json";

pub fn specific_checkpoint(j: usize) -> String {
    format!("specific_{j}.fdgw")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub pretrain_iters: usize,
    pub main_iters: usize,
    pub lambda_dg: f64,
    pub pseudo_domains: usize,
    pub pseudo_histogram: Option<Vec<usize>>,
    pub cluster_inertia: Option<Vec<f64>>,
    /// Mean losses over the last 10% of the respective phase.
    pub final_pretrain_loss: Option<f64>,
    pub final_agg_loss: Option<f64>,
    pub final_dg_loss: Option<f64>,
    pub checkpoints: Vec<String>,
}

fn tail_mean(values: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let n = values.clone().count();
    if n == 0 {
        return None;
    }
    let k = n.div_ceil(10);
    Some(values.skip(n - k).sum::<f64>() / k as f64)
}

fn save_net(net: &Net, path: &Path) -> Result<()> {
    encoder::save_checkpoint_with(&net.params, &net.head_tensors(), path)
}

/// Writes the state reached before a training failure, for post-mortem.
fn dump_state(state: &TrainState, dir: &Path) -> Result<()> {
    save_net(&state.agg, &dir.join("failed_agg.fdgw"))?;
    for (j, s) in state.specifics.iter().enumerate() {
        save_net(s, &dir.join(format!("failed_specific_{j}.fdgw")))?;
    }
    container::write_file(&dir.join(TRAIN_LOG), state.log.to_text().as_bytes())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains on the dataset's training split and, if `out_dir` is given,
/// writes the run's artifacts there.
pub fn run_training(
    data: &SynthDataset,
    cfg: &TrainConfig,
    mode: TrainMode,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<TrainOutcome> {
    let train = data.train_dataset()?;
    let outcome = trainer::train_with(&train, cfg, mode, threads, |state| {
        if let Some(dir) = out_dir {
            // best effort; the training error is what gets reported
            let _ = ensure_dir(dir).and_then(|_| dump_state(state, dir));
        }
    })?;
    if let Some(dir) = out_dir {
        write_training(&outcome, cfg, mode, dir)?;
    }
    Ok(outcome)
}

pub fn train_report(outcome: &TrainOutcome, cfg: &TrainConfig, mode: TrainMode) -> TrainReport {
    let log = &outcome.state.log;
    let mut checkpoints = vec![AGG_PRETRAIN.to_string()];
    checkpoints.extend((0..outcome.state.specifics.len()).map(specific_checkpoint));
    checkpoints.push(AGG_FINAL.to_string());
    let model = outcome.cluster.as_ref().and_then(|c| c.model.as_ref());
    if model.is_some() {
        checkpoints.push(CLUSTER_MODEL.to_string());
    }
    TrainReport {
        mode,
        seed: cfg.seed,
        pretrain_iters: cfg.pretrain_iters,
        main_iters: cfg.main_iters,
        lambda_dg: if mode == TrainMode::ProtonetBaseline {
            0.0
        } else {
            cfg.lambda_dg
        },
        pseudo_domains: outcome.state.specifics.len(),
        pseudo_histogram: outcome.cluster.as_ref().map(|c| c.histogram.clone()),
        cluster_inertia: model.map(|m| m.inertia_history.clone()),
        final_pretrain_loss: tail_mean(log.pretrain.iter().copied()),
        final_agg_loss: tail_mean(log.main.iter().map(|r| r.agg)),
        final_dg_loss: tail_mean(log.main.iter().filter_map(|r| r.dg)),
        checkpoints,
    }
}

pub fn write_training(
    outcome: &TrainOutcome,
    cfg: &TrainConfig,
    mode: TrainMode,
    dir: &Path,
) -> Result<()> {
    ensure_dir(dir)?;
    save_net(&outcome.pretrained, &dir.join(AGG_PRETRAIN))?;
    for (j, s) in outcome.state.specifics.iter().enumerate() {
        save_net(s, &dir.join(specific_checkpoint(j)))?;
    }
    save_net(&outcome.state.agg, &dir.join(AGG_FINAL))?;
    if let Some(model) = outcome.cluster.as_ref().and_then(|c| c.model.as_ref()) {
        model.save(&dir.join(CLUSTER_MODEL))?;
    }
    container::write_file(&dir.join(TRAIN_LOG), outcome.state.log.to_text().as_bytes())?;
    write_json(&dir.join(TRAIN_REPORT), &train_report(outcome, cfg, mode))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("json encoding: {e}")))?;
    text.push('\n');
    container::write_file(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub name: String,
    pub group: DomainGroup,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupAverage {
    pub group: String,
    pub n_domains: usize,
    pub eer: f64,
    pub eer_step: f64,
    /// `(target FAR, mean FRR)`.
    pub frr_at_far: Vec<(f64, f64)>,
    pub min_dcf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metric: ScoreMetric,
    pub domains: Vec<DomainMetrics>,
    pub averages: Vec<GroupAverage>,
}

impl EvalReport {
    pub fn average(&self, group: &str) -> Option<&GroupAverage> {
        self.averages.iter().find(|g| g.group == group)
    }
}

fn average(group: &str, items: &[&DomainMetrics], far_points: &[f64]) -> Option<GroupAverage> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| items.iter().map(|d| f(&d.metrics)).sum::<f64>() / n;
    Some(GroupAverage {
        group: group.to_string(),
        n_domains: items.len(),
        eer: mean(&|m| m.eer),
        eer_step: mean(&|m| m.eer_step),
        frr_at_far: far_points
            .iter()
            .map(|&far| (far, mean(&|m| m.frr_at(far).unwrap_or(f64::NAN))))
            .collect(),
        min_dcf: mean(&|m| m.min_dcf),
    })
}

/// Verification metrics per selected domain plus in/out/all averages.
pub fn evaluate(
    embedder: &EncoderParams,
    data: &SynthDataset,
    cfg: &EvalConfig,
    metric: ScoreMetric,
) -> Result<EvalReport> {
    let wanted = |g: DomainGroup| match cfg.domains {
        DomainSelection::All => true,
        DomainSelection::In => g == DomainGroup::Source,
        DomainSelection::Out => g == DomainGroup::Out,
    };
    let mut domains = Vec::new();
    for info in data.domains.iter().filter(|d| wanted(d.group)) {
        let trials = evalkit::build_trials(&data.test_split(info.id)?)?;
        let scores = evalkit::score_trials(embedder, &data.dataset, &trials, metric)?;
        domains.push(DomainMetrics {
            domain: info.id,
            name: info.name.clone(),
            group: info.group,
            metrics: evalkit::compute_metrics(&scores, &cfg.far_points, cfg.dcf)?,
        });
    }
    if domains.is_empty() {
        return Err(Error::config("no domains selected for evaluation"));
    }
    let pick = |g: Option<DomainGroup>| -> Vec<&DomainMetrics> {
        domains
            .iter()
            .filter(|d| g.is_none_or(|g| d.group == g))
            .collect()
    };
    let averages = [
        average("in", &pick(Some(DomainGroup::Source)), &cfg.far_points),
        average("out", &pick(Some(DomainGroup::Out)), &cfg.far_points),
        average("all", &pick(None), &cfg.far_points),
    ]
    .into_iter()
    .flatten()
    .collect();
    Ok(EvalReport {
        metric,
        domains,
        averages,
    })
}

pub fn roc_file(domain: usize) -> String {
    format!("roc_domain{domain}.csv")
}

/// Writes `metrics.json` and one ROC file per domain; returns the paths.
pub fn write_eval(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut paths = vec![dir.join(EVAL_REPORT)];
    write_json(&paths[0], report)?;
    for d in &report.domains {
        let p = dir.join(roc_file(d.domain));
        evalkit::export_roc(&d.metrics, &p)?;
        paths.push(p);
    }
    Ok(paths)
}

/// Loads a trained aggregation checkpoint for evaluation.
pub fn load_embedder(path: &Path, cfg: &TrainConfig) -> Result<EncoderParams> {
    let (params, extras) = encoder::load_checkpoint_with(path)?;
    if params.config() != &cfg.encoder {
        return Err(Error::format(format!(
            "{} holds a different encoder architecture than the configuration",
            path.display()
        )));
    }
    Ok(Net::from_checkpoint(params, &extras, cfg.head())?.params)
}
