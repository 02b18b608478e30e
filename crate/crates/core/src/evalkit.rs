//! Verification scoring: enrollment centroids, exhaustive trial lists, ROC,
//! EER, FRR at fixed FAR and minimum detection cost.
//!
//! A trial is accepted iff its score is `>= tau`. The ROC sweeps `tau` over
//! `-inf`, every distinct score in increasing order, and `+inf`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::encoder::{self, EncoderParams};
use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMetric {
    NegSqEuclidean,
    Cosine,
}

/// Enrollment and test utterance ids of one test speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSplit {
    pub speaker: usize,
    pub enroll: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    /// Index into `TrialSet::splits` of the claimed speaker.
    pub reference: usize,
    pub utt: usize,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub splits: Vec<SpeakerSplit>,
    pub trials: Vec<Trial>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DcfParams {
    pub c_fr: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            c_fr: 1.0,
            c_fa: 1.0,
            p_target: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrrAtFar {
    pub target_far: f64,
    pub tau: f64,
    pub far: f64,
    pub frr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
    /// Linear interpolation at the first sign change of `FAR - FRR`.
    pub eer: f64,
    /// `min over tau of max(FAR, FRR)`, no interpolation.
    pub eer_step: f64,
    pub frr_at_far: Vec<FrrAtFar>,
    /// Divided by `min(c_fr * p_target, c_fa * (1 - p_target))`.
    pub min_dcf: f64,
    pub min_dcf_raw: f64,
    pub dcf: DcfParams,
    pub n_target: usize,
    pub n_impostor: usize,
}

impl MetricsReport {
    pub fn frr_at(&self, far: f64) -> Option<f64> {
        self.frr_at_far
            .iter()
            .find(|p| p.target_far == far)
            .map(|p| p.frr)
    }
}

/// Mean of the given embedding rows.
pub fn enroll(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::usage("enrollment needs at least one utterance"))?;
    let mut mean = vec![0.0; first.len()];
    for e in embeddings {
        if e.len() != mean.len() {
            return Err(Error::usage("enrollment embeddings differ in dimension"));
        }
        mean.iter_mut().zip(e).for_each(|(m, v)| *m += v);
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Higher means more similar.
pub fn score(reference: &[f64], test: &[f64], metric: ScoreMetric) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::usage(format!(
            "score dimension mismatch: {} vs {}",
            reference.len(),
            test.len()
        )));
    }
    match metric {
        ScoreMetric::NegSqEuclidean => Ok(-sq_dist(reference, test)),
        ScoreMetric::Cosine => {
            let (nr, nt) = (dot(reference, reference).sqrt(), dot(test, test).sqrt());
            if nr == 0.0 || nt == 0.0 {
                return Err(Error::numerical("cosine score of a zero-norm embedding"));
            }
            Ok(dot(reference, test) / (nr * nt))
        }
    }
}

/// Every speaker against its own test utterances (targets) and every other
/// speaker's test utterances (impostors).
pub fn build_trials(splits: &[SpeakerSplit]) -> Result<TrialSet> {
    for s in splits {
        if s.enroll.is_empty() || s.test.is_empty() {
            return Err(Error::config(format!(
                "speaker {} has an empty enrollment or test split",
                s.speaker
            )));
        }
        if s.enroll.iter().any(|e| s.test.contains(e)) {
            return Err(Error::config(format!(
                "speaker {} shares utterances between enrollment and test",
                s.speaker
            )));
        }
    }
    let mut trials = Vec::new();
    for r in 0..splits.len() {
        for (s, split) in splits.iter().enumerate() {
            trials.extend(split.test.iter().map(|&utt| Trial {
                reference: r,
                utt,
                is_target: r == s,
            }));
        }
    }
    Ok(TrialSet {
        splits: splits.to_vec(),
        trials,
    })
}

/// `(score, is_target)` per trial.
pub fn score_trials(
    embedder: &EncoderParams,
    dataset: &Dataset,
    trials: &TrialSet,
    metric: ScoreMetric,
) -> Result<Vec<(f64, bool)>> {
    let embed = |id: usize| -> Result<Vec<f64>> {
        if id >= dataset.len() {
            return Err(Error::config(format!("trial references missing utterance {id}")));
        }
        Ok(encoder::forward(embedder, &dataset.utterance(id).features, false)?.0)
    };
    let references = trials
        .splits
        .iter()
        .map(|s| enroll(&s.enroll.iter().map(|&u| embed(u)).collect::<Result<Vec<_>>>()?))
        .collect::<Result<Vec<_>>>()?;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; dataset.len()];
    let mut out = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        if cache.get(t.utt).is_some_and(Option::is_none) {
            cache[t.utt] = Some(embed(t.utt)?);
        }
        let e = cache
            .get(t.utt)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::config(format!("trial references missing utterance {}", t.utt)))?;
        out.push((score(&references[t.reference], e, metric)?, t.is_target));
    }
    Ok(out)
}

fn check_scores(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| s.is_nan()) {
        return Err(Error::numerical(format!("score {s} is not a number")));
    }
    let n_t = scores.iter().filter(|(_, t)| *t).count();
    let n_i = scores.len() - n_t;
    if n_t == 0 || n_i == 0 {
        return Err(Error::usage(format!(
            "metrics need target and impostor trials, got {n_t} and {n_i}"
        )));
    }
    Ok((n_t, n_i))
}

/// ROC over `-inf`, the distinct scores ascending, and `+inf`.
pub fn roc(scores: &[(f64, bool)]) -> Result<Vec<RocPoint>> {
    let (n_t, n_i) = check_scores(scores)?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(sorted.len() + 2);
    // rejected counts below the current threshold
    let (mut rej_t, mut rej_i) = (0usize, 0usize);
    let point = |tau, rej_t: usize, rej_i: usize| RocPoint {
        tau,
        far: (n_i - rej_i) as f64 / n_i as f64,
        frr: rej_t as f64 / n_t as f64,
    };
    out.push(point(f64::NEG_INFINITY, 0, 0));
    let mut i = 0;
    while i < sorted.len() {
        let tau = sorted[i].0;
        out.push(point(tau, rej_t, rej_i));
        while i < sorted.len() && sorted[i].0 == tau {
            if sorted[i].1 {
                rej_t += 1;
            } else {
                rej_i += 1;
            }
            i += 1;
        }
    }
    out.push(point(f64::INFINITY, n_t, n_i));
    Ok(out)
}

/// Interpolated EER over an ROC in increasing-threshold order.
pub fn eer_interpolated(roc: &[RocPoint]) -> f64 {
    for w in roc.windows(2) {
        let d0 = w[0].far - w[0].frr;
        let d1 = w[1].far - w[1].frr;
        if d0 == 0.0 {
            return w[0].far;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            if d1 == 0.0 {
                return w[1].far;
            }
            let t = d0 / (d0 - d1);
            return w[0].far + t * (w[1].far - w[0].far);
        }
    }
    // the sweep ends at FAR=0, FRR=1 so a crossing always exists
    roc.last().map_or(0.0, |p| p.far)
}

pub fn eer_step(roc: &[RocPoint]) -> f64 {
    roc.iter()
        .map(|p| p.far.max(p.frr))
        .fold(f64::INFINITY, f64::min)
}

pub fn compute_metrics(
    scores: &[(f64, bool)],
    far_points: &[f64],
    dcf: DcfParams,
) -> Result<MetricsReport> {
    let (n_target, n_impostor) = check_scores(scores)?;
    if !(dcf.p_target > 0.0 && dcf.p_target < 1.0 && dcf.c_fr > 0.0 && dcf.c_fa > 0.0) {
        return Err(Error::config("DCF parameters need 0 < p_target < 1 and positive costs"));
    }
    let roc = roc(scores)?;
    let mut frr_at_far = Vec::with_capacity(far_points.len());
    for &target in far_points {
        if !(0.0..=1.0).contains(&target) {
            return Err(Error::usage(format!("FAR target {target} outside [0, 1]")));
        }
        let p = roc
            .iter()
            .find(|p| p.far <= target)
            .expect("the +inf point has FAR 0");
        frr_at_far.push(FrrAtFar {
            target_far: target,
            tau: p.tau,
            far: p.far,
            frr: p.frr,
        });
    }
    let raw = roc
        .iter()
        .map(|p| dcf.c_fr * p.frr * dcf.p_target + dcf.c_fa * p.far * (1.0 - dcf.p_target))
        .fold(f64::INFINITY, f64::min);
    let norm = (dcf.c_fr * dcf.p_target).min(dcf.c_fa * (1.0 - dcf.p_target));
    Ok(MetricsReport {
        eer: eer_interpolated(&roc),
        eer_step: eer_step(&roc),
        frr_at_far,
        min_dcf: raw / norm,
        min_dcf_raw: raw,
        dcf,
        n_target,
        n_impostor,
        roc,
    })
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn fmt_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed)
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn roc_csv(report: &MetricsReport) -> String {
    let mut s = String::from("tau,far,frr\n");
    for p in &report.roc {
        let _ = writeln!(s, "{},{},{}", fmt_sig9(p.tau), fmt_sig9(p.far), fmt_sig9(p.frr));
    }
    s
}

pub fn export_roc(report: &MetricsReport, path: &Path) -> Result<()> {
    container::write_file(path, roc_csv(report).as_bytes())
}

pub fn embeddings_csv(embedder: &EncoderParams, dataset: &Dataset) -> Result<String> {
    let d = embedder.config().embed_dim;
    let mut s = String::from("utt_id,speaker,domain");
    for k in 0..d {
        let _ = write!(s, ",e{k}");
    }
    s.push('\n');
    for u in dataset.utterances() {
        let (e, _) = encoder::forward(embedder, &u.features, false)?;
        let _ = write!(s, "{},{},{}", u.id, u.speaker, u.domain);
        for v in e {
            let _ = write!(s, ",{}", fmt_sig9(v));
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(embedder: &EncoderParams, dataset: &Dataset, path: &Path) -> Result<()> {
    container::write_file(path, embeddings_csv(embedder, dataset)?.as_bytes())
}

/// Embeds every listed utterance, one row each.
pub fn embed_rows(embedder: &EncoderParams, dataset: &Dataset, ids: &[usize]) -> Result<Matrix> {
    let d = embedder.config().embed_dim;
    let mut m = Matrix::zeros(ids.len(), d);
    for (r, &id) in ids.iter().enumerate() {
        let (e, _) = encoder::forward(embedder, &dataset.utterance(id).features, false)?;
        m.row_mut(r).copy_from_slice(&e);
    }
    Ok(m)
}
