//! Pseudo-domain discovery: per-layer style statistics of the aggregation
//! network, standardized and clustered with k-means++ / Lloyd.

use std::path::Path;

use crate::container::{self, Tensor};
use crate::encoder::{self, temporal_stats_eps, EncoderParams};
use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Matrix, Rng};

const CLUSTER_MAGIC: &[u8; 4] = b"FDGC";

/// Options for [`kmeans`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Lloyd stops once no centroid moves farther than this.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Conv layers whose statistics form the feature vector.
    pub layers: Vec<usize>,
    pub mean: Vec<f64>,
    /// Per-dimension divisor; 1 where the training std was zero.
    pub scale: Vec<f64>,
    /// `M x D` centroids in standardized space.
    pub centroids: Matrix,
    /// Inertia after each assignment step, in standardized space.
    pub inertia_history: Vec<f64>,
}

/// `[mean(layer), std(layer)]` blocks for each selected layer, in order.
/// The std here is the exact population std (no epsilon).
pub fn style_vector(trace: &encoder::ForwardTrace, layers: &[usize]) -> Vec<f64> {
    let mut v = Vec::new();
    for &l in layers {
        let (mean, std) = temporal_stats_eps(&trace.layers[l], 0.0);
        v.extend(mean);
        v.extend(std);
    }
    v
}

fn check_layers(agg: &EncoderParams, layers: &[usize]) -> Result<()> {
    let n = agg.config().conv.len();
    if layers.is_empty() {
        return Err(Error::config("style features need at least one layer"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= n) {
        return Err(Error::config(format!(
            "style layer {bad} out of range, encoder has {n} conv layers"
        )));
    }
    Ok(())
}

/// One style row per utterance, in dataset order.
pub fn style_features(agg: &EncoderParams, dataset: &Dataset, layers: &[usize]) -> Result<Matrix> {
    check_layers(agg, layers)?;
    let dim: usize = layers
        .iter()
        .map(|&l| 2 * agg.config().conv[l].out_channels)
        .sum();
    let mut out = Matrix::zeros(dataset.len(), dim);
    for (r, u) in dataset.utterances().iter().enumerate() {
        let (_, trace) = encoder::forward(agg, &u.features, true)?;
        out.row_mut(r)
            .copy_from_slice(&style_vector(trace.as_ref().expect("trace kept"), layers));
    }
    Ok(out)
}

pub fn all_layers(agg: &EncoderParams) -> Vec<usize> {
    (0..agg.config().conv.len()).collect()
}

fn standardize(features: &Matrix) -> (Vec<f64>, Vec<f64>, Matrix) {
    let n = features.rows() as f64;
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for row in features.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in features.iter_rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let z = apply_standardization(features, &mean, &scale);
    (mean, scale, z)
}

fn apply_standardization(features: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut z = features.clone();
    for r in 0..z.rows() {
        for ((v, m), s) in z.row_mut(r).iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    z
}

/// Index of the nearest centroid, ties broken by the lowest index.
fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>, f64) {
    let mut labels = Vec::with_capacity(points.rows());
    let mut dists = Vec::with_capacity(points.rows());
    let mut inertia = 0.0;
    for p in points.iter_rows() {
        let (k, d) = nearest(p, centroids);
        labels.push(k);
        dists.push(d);
        inertia += d;
    }
    (labels, dists, inertia)
}

/// Index drawn with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], total: f64, rng: &mut Rng) -> usize {
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target && w > 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
}

/// Greedy k-means++: each new centroid is the best of `2 + ln(m)` candidates
/// drawn proportionally to squared distance, judged by the resulting
/// potential.
fn kmeans_pp_seed(points: &Matrix, m: usize, rng: &mut Rng) -> Matrix {
    let n = points.rows();
    let trials = 2 + (m as f64).ln().floor() as usize;
    let mut centroids = Matrix::zeros(m, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(first)))
        .collect();
    for k in 1..m {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // every point coincides with a centroid
            let pick = rng.below(n);
            centroids.row_mut(k).copy_from_slice(points.row(pick));
            continue;
        }
        let mut best: Option<(f64, Vec<f64>, usize)> = None;
        for _ in 0..trials {
            let cand = weighted_pick(&d2, total, rng);
            let next: Vec<f64> = points
                .iter_rows()
                .zip(&d2)
                .map(|(p, &d)| d.min(sq_dist(p, points.row(cand))))
                .collect();
            let potential: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, next, cand));
            }
        }
        let (_, next, pick) = best.expect("at least one trial");
        centroids.row_mut(k).copy_from_slice(points.row(pick));
        d2 = next;
    }
    centroids
}

/// Standardizes `features`, seeds with k-means++ and runs Lloyd iterations.
pub fn kmeans(
    features: &Matrix,
    m: usize,
    rng: &mut Rng,
    options: KMeansOptions,
) -> Result<ClusterModel> {
    let n = features.rows();
    if m == 0 {
        return Err(Error::config("k-means needs at least one cluster"));
    }
    if n < m {
        return Err(Error::config(format!(
            "k-means with {m} clusters needs at least {m} points, got {n}"
        )));
    }
    if !features.is_finite() {
        return Err(Error::numerical("style features contain non-finite values"));
    }
    let (mean, scale, z) = standardize(features);
    let mut centroids = kmeans_pp_seed(&z, m, rng);
    let mut history = Vec::new();
    let dim = z.cols();

    for _ in 0..options.max_iter {
        let (labels, dists, inertia) = assign_all(&z, &centroids);
        history.push(inertia);

        let mut sums = Matrix::zeros(m, dim);
        let mut counts = vec![0usize; m];
        for (p, &k) in z.iter_rows().zip(&labels) {
            counts[k] += 1;
            for (s, v) in sums.row_mut(k).iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for k in 0..m {
            if counts[k] > 0 {
                let c = counts[k] as f64;
                sums.row_mut(k).iter_mut().for_each(|s| *s /= c);
            } else {
                // reseed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dists[b] >= dists[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("n >= m leaves a candidate");
                taken[far] = true;
                sums.row_mut(k).copy_from_slice(z.row(far));
            }
        }
        let shift = centroids
            .iter_rows()
            .zip(sums.iter_rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = sums;
        if shift < options.tol {
            break;
        }
    }
    let (_, _, inertia) = assign_all(&z, &centroids);
    history.push(inertia);
    Ok(ClusterModel {
        layers: Vec::new(),
        mean,
        scale,
        centroids,
        inertia_history: history,
    })
}

impl ClusterModel {
    pub fn m(&self) -> usize {
        self.centroids.rows()
    }

    /// Nearest-centroid labels for raw (unstandardized) feature rows.
    pub fn assign(&self, features: &Matrix) -> Result<Vec<usize>> {
        if features.cols() != self.mean.len() {
            return Err(Error::usage(format!(
                "features have {} dims, model expects {}",
                features.cols(),
                self.mean.len()
            )));
        }
        let z = apply_standardization(features, &self.mean, &self.scale);
        Ok(z.iter_rows().map(|p| nearest(p, &self.centroids).0).collect())
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    fn descriptor(&self) -> (String, Vec<Tensor>) {
        let layers: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        let tensors = vec![
            Tensor::new("mean", vec![self.mean.len()], self.mean.clone()),
            Tensor::new("scale", vec![self.scale.len()], self.scale.clone()),
            Tensor::new(
                "centroids",
                vec![self.centroids.rows(), self.centroids.cols()],
                self.centroids.data().to_vec(),
            ),
            Tensor::new(
                "inertia",
                vec![self.inertia_history.len()],
                self.inertia_history.clone(),
            ),
        ];
        let mut desc = format!("cluster v1\nlayers {}\n", layers.join(" "));
        for t in &tensors {
            desc.push_str(&container::tensor_line(t));
            desc.push('\n');
        }
        (desc, tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (desc, tensors) = self.descriptor();
        let payload: Vec<f64> = tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
        container::encode(CLUSTER_MAGIC, &desc, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (desc, payload) = container::decode(CLUSTER_MAGIC, bytes)?;
        let (header, tensors) = container::split_tensors(&desc, &payload)?;
        let mut lines = header.iter().filter(|l| !l.is_empty());
        if lines.next().map(String::as_str) != Some("cluster v1") {
            return Err(Error::format("descriptor is not `cluster v1`"));
        }
        let layers = lines
            .next()
            .and_then(|l| l.strip_prefix("layers"))
            .ok_or_else(|| Error::format("descriptor lacks layers line"))?
            .split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::format("bad layer index")))
            .collect::<Result<Vec<usize>>>()?;
        let names: Vec<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
        if names != ["mean", "scale", "centroids", "inertia"] {
            return Err(Error::format(format!("unexpected tensors {names:?}")));
        }
        let [mean, scale, centroids, inertia]: [Tensor; 4] =
            tensors.try_into().expect("four tensors");
        let dim = mean.data.len();
        if scale.data.len() != dim || centroids.shape.len() != 2 || centroids.shape[1] != dim {
            return Err(Error::format("cluster tensor shapes disagree"));
        }
        Ok(Self {
            layers,
            mean: mean.data,
            scale: scale.data,
            centroids: Matrix::from_vec(centroids.shape[0], dim, centroids.data)?,
            inertia_history: inertia.data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&container::read_file(path)?)
    }
}

/// Extracts style features from `agg` and clusters them into `m` groups.
pub fn fit_pseudo_domains(
    agg: &EncoderParams,
    dataset: &Dataset,
    layers: &[usize],
    m: usize,
    rng: &mut Rng,
    options: KMeansOptions,
) -> Result<ClusterModel> {
    let features = style_features(agg, dataset, layers)?;
    let mut model = kmeans(&features, m, rng, options)?;
    model.layers = layers.to_vec();
    Ok(model)
}

/// Relabels every utterance with its nearest pseudo-domain.
pub fn assign_pseudo_labels(
    model: &ClusterModel,
    agg: &EncoderParams,
    dataset: &mut Dataset,
) -> Result<Vec<usize>> {
    let features = style_features(agg, dataset, &model.layers)?;
    let labels = model.assign(&features)?;
    dataset.set_pseudo_labels(&labels, model.m())?;
    Ok(labels)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sum_a: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (sum_ij - expected) / (max - expected)
}
