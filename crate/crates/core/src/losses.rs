//! Prototype computation and the episodic losses.
//!
//! Every loss is the mean over query items of
//! `-log softmax_k(logit(query, prototype_k))[true class]`, where the logit is
//! either a negative distance or a scaled cosine similarity. Which network
//! embeds which set, and which networks receive gradients, differs per loss:
//!
//! | loss            | prototypes from | queries from | trainable |
//! |-----------------|-----------------|--------------|-----------|
//! | `proto_loss`    | embedder        | embedder     | embedder  |
//! | `dg_loss`       | specific `F_j`  | `F_agg`      | `F_agg`   |
//! | `combined_loss` | both of above   |              | `F_agg`   |

use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderParams, ForwardTrace};
use crate::episodes::{Dataset, Episode, EpisodeKind, Member};
use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax, sq_dist, Matrix};

pub const ANGULAR_INIT_SCALE: f64 = 10.0;
pub const ANGULAR_INIT_BIAS: f64 = -5.0;
pub const ANGULAR_MIN_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    SqEuclidean,
    Euclidean,
}

/// How query/prototype pairs become logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    /// `-d(q, c)`; no trainable parameters.
    Distance(Distance),
    /// `scale * cos(q, c) + bias` with trainable `scale` and `bias`.
    Angular { scale: f64, bias: f64 },
}

impl Head {
    pub fn angular_default() -> Self {
        Head::Angular {
            scale: ANGULAR_INIT_SCALE,
            bias: ANGULAR_INIT_BIAS,
        }
    }

    pub fn is_angular(&self) -> bool {
        matches!(self, Head::Angular { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NetTag {
    Agg,
    Specific(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    /// `way x d`, row `k` is the mean support embedding of class `k`.
    pub centroids: Matrix,
    pub source: NetTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrad {
    pub tag: NetTag,
    pub params: EncoderParams,
    /// `(d scale, d bias)` for an angular head.
    pub head: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    /// Named contributions to `value`, e.g. `("agg", ..)`, `("dg", ..)`.
    pub terms: Vec<(&'static str, f64)>,
    /// Gradient buffers, one per trainable network. Networks absent here
    /// receive no update from this loss.
    pub grads: Vec<NetGrad>,
}

impl LossOutput {
    pub fn grad(&self, tag: NetTag) -> Option<&NetGrad> {
        self.grads.iter().find(|g| g.tag == tag)
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|t| t.1)
    }
}

/// Result of the softmax-over-prototypes head for a batch of queries.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub loss: f64,
    /// `n_query x way` class probabilities.
    pub probs: Matrix,
    pub d_query: Matrix,
    pub d_protos: Matrix,
    pub d_head: Option<(f64, f64)>,
}

/// Per-class mean of `embeddings` rows.
pub fn class_means(embeddings: &Matrix, classes: &[usize], way: usize) -> Result<Matrix> {
    if classes.len() != embeddings.rows() {
        return Err(Error::usage("one class label per embedding row required"));
    }
    let d = embeddings.cols();
    let mut sums = Matrix::zeros(way, d);
    let mut counts = vec![0usize; way];
    for (row, &k) in embeddings.iter_rows().zip(classes) {
        if k >= way {
            return Err(Error::usage(format!("class {k} outside way {way}")));
        }
        counts[k] += 1;
        for (s, v) in sums.row_mut(k).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::usage(format!("class {k} has no support items")));
        }
        for s in sums.row_mut(k) {
            *s /= n as f64;
        }
    }
    Ok(sums)
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn logits_for(query: &[f64], protos: &Matrix, head: Head) -> Result<Vec<f64>> {
    protos
        .iter_rows()
        .map(|c| match head {
            Head::Distance(Distance::SqEuclidean) => Ok(-sq_dist(query, c)),
            Head::Distance(Distance::Euclidean) => Ok(-sq_dist(query, c).sqrt()),
            Head::Angular { scale, bias } => {
                let (nq, nc) = (norm(query), norm(c));
                if nq == 0.0 || nc == 0.0 {
                    return Err(Error::numerical("zero-norm vector under cosine logits"));
                }
                Ok(scale * dot(query, c) / (nq * nc) + bias)
            }
        })
        .collect()
}

/// Mean cross-entropy of queries against prototypes, with gradients with
/// respect to queries, prototypes and (angular) head parameters.
pub fn prototype_head(
    queries: &Matrix,
    labels: &[usize],
    protos: &Matrix,
    head: Head,
) -> Result<HeadOutput> {
    let n = queries.rows();
    let way = protos.rows();
    let d = protos.cols();
    if n == 0 || labels.len() != n {
        return Err(Error::usage("need one label per query and at least one query"));
    }
    if queries.cols() != d {
        return Err(Error::usage("query and prototype dimensions differ"));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut probs = Matrix::zeros(n, way);
    let mut d_query = Matrix::zeros(n, d);
    let mut d_protos = Matrix::zeros(way, d);
    let mut d_head = head.is_angular().then_some((0.0, 0.0));

    for (i, &y) in labels.iter().enumerate() {
        if y >= way {
            return Err(Error::usage(format!("label {y} outside way {way}")));
        }
        let q = queries.row(i);
        let logits = logits_for(q, protos, head)?;
        let logp = log_softmax(&logits)?;
        loss -= logp[y] * inv_n;
        for k in 0..way {
            let p = logp[k].exp();
            probs.set(i, k, p);
            // dL/dlogit_ik
            let g = (p - if k == y { 1.0 } else { 0.0 }) * inv_n;
            if g == 0.0 {
                continue;
            }
            let c = protos.row(k);
            match head {
                Head::Distance(dist) => {
                    // logit = -s or -sqrt(s), s = |q - c|^2
                    let coef = match dist {
                        Distance::SqEuclidean => 2.0,
                        Distance::Euclidean => {
                            let r = sq_dist(q, c).sqrt();
                            if r == 0.0 {
                                0.0
                            } else {
                                1.0 / r
                            }
                        }
                    };
                    let dq = d_query.row_mut(i);
                    for m in 0..d {
                        let diff = coef * (q[m] - c[m]) * g;
                        dq[m] -= diff;
                    }
                    let dc = d_protos.row_mut(k);
                    for m in 0..d {
                        dc[m] += coef * (q[m] - c[m]) * g;
                    }
                }
                Head::Angular { scale, .. } => {
                    let (nq, nc) = (norm(q), norm(c));
                    let cos = dot(q, c) / (nq * nc);
                    if let Some((dw, db)) = d_head.as_mut() {
                        *dw += g * cos;
                        *db += g;
                    }
                    let gs = g * scale;
                    let dq = d_query.row_mut(i);
                    for m in 0..d {
                        dq[m] += gs * (c[m] / (nq * nc) - cos * q[m] / (nq * nq));
                    }
                    let dc = d_protos.row_mut(k);
                    for m in 0..d {
                        dc[m] += gs * (q[m] / (nq * nc) - cos * c[m] / (nc * nc));
                    }
                }
            }
        }
    }
    Ok(HeadOutput {
        loss,
        probs,
        d_query,
        d_protos,
        d_head,
    })
}

struct Embedded {
    matrix: Matrix,
    traces: Vec<ForwardTrace>,
}

fn embed_members(
    params: &EncoderParams,
    dataset: &Dataset,
    members: &[Member],
    keep_trace: bool,
) -> Result<Embedded> {
    let d = params.config().embed_dim;
    let mut matrix = Matrix::zeros(members.len(), d);
    let mut traces = Vec::with_capacity(if keep_trace { members.len() } else { 0 });
    for (r, m) in members.iter().enumerate() {
        let (e, trace) = encoder::forward(params, &dataset.utterance(m.utt).features, keep_trace)?;
        matrix.row_mut(r).copy_from_slice(&e);
        if let Some(t) = trace {
            traces.push(t);
        }
    }
    Ok(Embedded { matrix, traces })
}

fn classes(members: &[Member]) -> Vec<usize> {
    members.iter().map(|m| m.class).collect()
}

pub fn compute_prototypes(
    embedder: &EncoderParams,
    tag: NetTag,
    dataset: &Dataset,
    episode: &Episode,
) -> Result<Prototypes> {
    let emb = embed_members(embedder, dataset, &episode.support, false)?;
    Ok(Prototypes {
        centroids: class_means(&emb.matrix, &classes(&episode.support), episode.way)?,
        source: tag,
    })
}

fn accumulate(
    params: &EncoderParams,
    traces: &[ForwardTrace],
    upstream: &Matrix,
    grads: &mut EncoderParams,
) -> Result<()> {
    for (r, t) in traces.iter().enumerate() {
        encoder::backward_into(params, t, upstream.row(r), grads)?;
    }
    Ok(())
}

fn class_counts(members: &[Member], way: usize) -> Vec<usize> {
    let mut c = vec![0; way];
    for m in members {
        c[m.class] += 1;
    }
    c
}

/// Prototypical loss with prototypes and queries from the same network.
/// Used for both the domain-specific and the aggregation episodes.
pub fn proto_loss(
    embedder: &EncoderParams,
    head: Head,
    tag: NetTag,
    dataset: &Dataset,
    episode: &Episode,
) -> Result<LossOutput> {
    let support = embed_members(embedder, dataset, &episode.support, true)?;
    let query = embed_members(embedder, dataset, &episode.query, true)?;
    let protos = class_means(&support.matrix, &classes(&episode.support), episode.way)?;
    let out = prototype_head(&query.matrix, &episode.query_labels(), &protos, head)?;

    let counts = class_counts(&episode.support, episode.way);
    let mut d_support = Matrix::zeros(episode.support.len(), protos.cols());
    for (r, m) in episode.support.iter().enumerate() {
        let inv = 1.0 / counts[m.class] as f64;
        for (dst, &g) in d_support.row_mut(r).iter_mut().zip(out.d_protos.row(m.class)) {
            *dst = g * inv;
        }
    }
    let mut grads = embedder.zeros_like();
    accumulate(embedder, &support.traces, &d_support, &mut grads)?;
    accumulate(embedder, &query.traces, &out.d_query, &mut grads)?;
    Ok(LossOutput {
        value: out.loss,
        terms: vec![("proto", out.loss)],
        grads: vec![NetGrad {
            tag,
            params: grads,
            head: out.d_head,
        }],
    })
}

/// Domain-generalization loss on a mismatch episode. Prototypes come from
/// `specific` and are constants; only `agg` receives a gradient.
pub fn dg_loss(
    agg: &EncoderParams,
    head: Head,
    specific: &EncoderParams,
    dataset: &Dataset,
    episode: &Episode,
) -> Result<LossOutput> {
    let EpisodeKind::Mismatch { j, .. } = episode.kind else {
        return Err(Error::usage(format!(
            "dg_loss needs a mismatch episode, got {:?}",
            episode.kind
        )));
    };
    let protos = compute_prototypes(specific, NetTag::Specific(j), dataset, episode)?;
    let query = embed_members(agg, dataset, &episode.query, true)?;
    let out = prototype_head(
        &query.matrix,
        &episode.query_labels(),
        &protos.centroids,
        head,
    )?;
    let mut grads = agg.zeros_like();
    accumulate(agg, &query.traces, &out.d_query, &mut grads)?;
    Ok(LossOutput {
        value: out.loss,
        terms: vec![("dg", out.loss)],
        grads: vec![NetGrad {
            tag: NetTag::Agg,
            params: grads,
            head: out.d_head,
        }],
    })
}

/// `L_agg + lambda * L_dg`, trainable network `F_agg` only.
///
/// With `lambda == 0` the mismatch term is not evaluated, so the value and
/// gradient are exactly those of `proto_loss` on the aggregation episode.
pub fn combined_loss(
    agg: &EncoderParams,
    head: Head,
    specifics: &[EncoderParams],
    dataset: &Dataset,
    agg_episode: &Episode,
    mismatch_episode: Option<&Episode>,
    lambda: f64,
) -> Result<LossOutput> {
    if !(lambda >= 0.0) {
        return Err(Error::usage(format!("lambda_dg must be >= 0, got {lambda}")));
    }
    let mut out = proto_loss(agg, head, NetTag::Agg, dataset, agg_episode)?;
    let agg_value = out.value;
    out.terms = vec![("agg", agg_value)];
    if lambda == 0.0 {
        return Ok(out);
    }
    let ep = mismatch_episode
        .ok_or_else(|| Error::usage("lambda_dg > 0 requires a mismatch episode"))?;
    let EpisodeKind::Mismatch { j, .. } = ep.kind else {
        return Err(Error::usage("second episode must be a mismatch episode"));
    };
    let specific = specifics
        .get(j)
        .ok_or_else(|| Error::usage(format!("no specific network for domain {j}")))?;
    let dg = dg_loss(agg, head, specific, dataset, ep)?;
    let dg_grad = dg.grads.into_iter().next().expect("dg grad");
    let g = &mut out.grads[0];
    g.params.axpy(lambda, &dg_grad.params);
    if let (Some((w, b)), Some((dw, db))) = (g.head.as_mut(), dg_grad.head) {
        *w += lambda * dw;
        *b += lambda * db;
    }
    out.value = agg_value + lambda * dg.value;
    out.terms.push(("dg", dg.value));
    Ok(out)
}
