//! Seeded multi-speaker, multi-domain sequence generator.
//!
//! Each speaker has a latent identity vector. Every utterance draws a latent
//! around it and renders `T` clean frames through a fixed mixing matrix. The
//! clean utterance is then passed through each domain transform
//! `x_t <- a * x_t + b + g * B eps_t`, where `a`, `b` and the noise basis `B`
//! are fixed per domain and `g` sets the per-utterance signal-to-noise ratio.
//! By default every domain draws its own low-rank noise basis, so each
//! out-domain corrupts directions no source domain used in the same way.
//! With `split_noise` the source bases live in one half of a shared
//! orthonormal frame and the out-domain bases in the other half.
//!
//! Training speakers are rendered in the source domains only; test speakers
//! in every domain, with a fixed enrollment/test partition of their clips.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::episodes::{Dataset, Utterance};
use crate::evalkit::SpeakerSplit;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

const DATASET_MAGIC: &[u8; 4] = b"FDGD";

/// Per-group ranges for domain transforms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRanges {
    /// `|a_c - 1|` drawn uniformly from this range, random sign per channel.
    pub scale_dev: [f64; 2],
    /// `|b_c|` drawn uniformly from this range, random sign per channel.
    pub offset: [f64; 2],
    /// Signal-to-noise ratio of the additive colored noise, in dB.
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub channels: usize,
    pub frames: usize,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub utterances_per_speaker: usize,
    pub enroll_per_speaker: usize,
    pub test_per_speaker: usize,
    pub within_speaker_std: f64,
    pub frame_noise_std: f64,
    pub source_domains: usize,
    pub out_domains: usize,
    /// Source domain 0 is the untransformed clean domain.
    pub clean_source_domain: bool,
    pub source: DomainRanges,
    pub out: DomainRanges,
    /// Multiplies every deviation from identity (scale, offset, noise gain).
    pub source_severity: f64,
    pub out_severity: f64,
    /// Directions in each domain's own noise basis; 0 means all channels.
    /// Ignored with `split_noise`, where a domain uses its whole half.
    pub noise_rank: usize,
    pub split_noise: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            latent_dim: 8,
            channels: 8,
            frames: 50,
            train_speakers: 50,
            test_speakers: 20,
            utterances_per_speaker: 45,
            enroll_per_speaker: 5,
            test_per_speaker: 35,
            within_speaker_std: 0.3,
            frame_noise_std: 0.1,
            source_domains: 4,
            out_domains: 3,
            clean_source_domain: true,
            source: DomainRanges {
                scale_dev: [0.0, 0.3],
                offset: [0.0, 0.5],
                snr_db: -5.0,
            },
            out: DomainRanges {
                scale_dev: [0.3, 0.6],
                offset: [0.5, 1.0],
                snr_db: -12.0,
            },
            source_severity: 1.0,
            out_severity: 1.0,
            noise_rank: 2,
            split_noise: false,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("channels", self.channels),
            ("frames", self.frames),
            ("train_speakers", self.train_speakers),
            ("test_speakers", self.test_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("enroll_per_speaker", self.enroll_per_speaker),
            ("test_per_speaker", self.test_per_speaker),
            ("source_domains", self.source_domains),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.enroll_per_speaker + self.test_per_speaker > self.utterances_per_speaker {
            return Err(Error::config(
                "enroll_per_speaker + test_per_speaker exceeds utterances_per_speaker",
            ));
        }
        if !(self.within_speaker_std > 0.0) || !(self.frame_noise_std > 0.0) {
            return Err(Error::config("standard deviations must be positive"));
        }
        if !(self.source_severity >= 0.0) || !(self.out_severity >= 0.0) {
            return Err(Error::config("severities must be non-negative"));
        }
        for (name, r) in [("source", &self.source), ("out", &self.out)] {
            for (field, [lo, hi]) in [("scale_dev", r.scale_dev), ("offset", r.offset)] {
                if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                    return Err(Error::config(format!(
                        "{name}.{field} must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
                    )));
                }
            }
            if !r.snr_db.is_finite() {
                return Err(Error::config(format!("{name}.snr_db must be finite")));
            }
        }
        if self.channels < 2 && self.out_domains > 0 {
            return Err(Error::config("out-domains need at least 2 channels"));
        }
        Ok(())
    }

    pub fn n_domains(&self) -> usize {
        self.source_domains + self.out_domains
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Enroll,
    Test,
    Unused,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainGroup {
    Source,
    Out,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainInfo {
    pub id: usize,
    pub group: DomainGroup,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceMeta {
    pub id: usize,
    pub speaker: usize,
    pub domain: usize,
    /// Index of the underlying clean clip within the speaker, `0..utterances_per_speaker`.
    pub clip: usize,
    pub role: Role,
    /// Byte offset of the frames inside the binary blob.
    pub offset: u64,
    pub frames: usize,
    pub channels: usize,
}

/// A generated dataset with its split metadata.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: GenConfig,
    pub dataset: Dataset,
    pub domains: Vec<DomainInfo>,
    pub train_speakers: Vec<usize>,
    pub test_speakers: Vec<usize>,
    /// Parallel to `dataset.utterances()`.
    pub meta: Vec<UtteranceMeta>,
}

struct DomainTransform {
    scale: Vec<f64>,
    offset: Vec<f64>,
    /// `F x F` noise basis with unit mean power per channel.
    basis: Matrix,
    /// Noise amplitude relative to signal RMS, times severity.
    noise_ratio: f64,
}

fn random_orthonormal(n: usize, rng: &mut Rng) -> Matrix {
    // Gram-Schmidt over Gaussian columns, stored as rows of the result.
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            rows.push(v);
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

fn signed_draw(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    let mag = rng.uniform_range(lo, hi);
    if rng.uniform() < 0.5 {
        -mag
    } else {
        mag
    }
}

fn make_transform(
    rng: &mut Rng,
    channels: usize,
    ranges: &DomainRanges,
    severity: f64,
    frame: &Matrix,
    directions: &[usize],
    identity: bool,
) -> DomainTransform {
    // every draw happens regardless of severity so paired configs share streams
    let dev: Vec<f64> = (0..channels).map(|_| signed_draw(rng, ranges.scale_dev)).collect();
    let off: Vec<f64> = (0..channels).map(|_| signed_draw(rng, ranges.offset)).collect();
    let mixing: Vec<f64> = (0..directions.len() * channels)
        .map(|_| rng.normal())
        .collect();
    // B = sum_k U_k^T g_k over the allowed directions
    let mut basis = Matrix::zeros(channels, channels);
    for (i, &dir) in directions.iter().enumerate() {
        let u = frame.row(dir);
        for r in 0..channels {
            for c in 0..channels {
                let v = basis.get(r, c) + u[r] * mixing[i * channels + c];
                basis.set(r, c, v);
            }
        }
    }
    let power: f64 = basis.data().iter().map(|v| v * v).sum::<f64>() / channels as f64;
    if power > 0.0 {
        let s = power.sqrt();
        basis.data_mut().iter_mut().for_each(|v| *v /= s);
    }
    if identity {
        return DomainTransform {
            scale: vec![1.0; channels],
            offset: vec![0.0; channels],
            basis,
            noise_ratio: 0.0,
        };
    }
    DomainTransform {
        scale: dev.iter().map(|d| 1.0 + severity * d).collect(),
        offset: off.iter().map(|b| severity * b).collect(),
        basis,
        noise_ratio: severity * 10f64.powf(-ranges.snr_db / 20.0),
    }
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

pub fn generate(config: &GenConfig) -> Result<SynthDataset> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let f = config.channels;
    let t_len = config.frames;
    let n_dom = config.n_domains();

    let mut mix_rng = root.split("mixing");
    let scale = 1.0 / (config.latent_dim as f64).sqrt();
    let mixing: Vec<f64> = (0..f * config.latent_dim)
        .map(|_| mix_rng.normal() * scale)
        .collect();

    let mut dom_rng = root.split("domains");
    let frame = random_orthonormal(f, &mut dom_rng);
    let half = f / 2;
    let (src_dirs, out_dirs): (Vec<usize>, Vec<usize>) = if config.out_domains > 0 {
        ((0..half).collect(), (half..f).collect())
    } else {
        ((0..f).collect(), Vec::new())
    };
    let mut transforms = Vec::with_capacity(n_dom);
    let mut domains = Vec::with_capacity(n_dom);
    let rank = if config.noise_rank == 0 { f } else { config.noise_rank.min(f) };
    let own_dirs: Vec<usize> = (0..rank).collect();
    for d in 0..n_dom {
        let is_source = d < config.source_domains;
        let own_frame = random_orthonormal(f, &mut dom_rng);
        let (ranges, severity, dirs) = if is_source {
            (&config.source, config.source_severity, &src_dirs)
        } else {
            (&config.out, config.out_severity, &out_dirs)
        };
        let (frame, dirs) = if config.split_noise {
            (&frame, dirs)
        } else {
            (&own_frame, &own_dirs)
        };
        let identity = is_source && d == 0 && config.clean_source_domain;
        transforms.push(make_transform(
            &mut dom_rng,
            f,
            ranges,
            severity,
            &frame,
            dirs,
            identity,
        ));
        domains.push(DomainInfo {
            id: d,
            group: if is_source {
                DomainGroup::Source
            } else {
                DomainGroup::Out
            },
            name: if identity {
                "clean".into()
            } else if is_source {
                format!("source{d}")
            } else {
                format!("out{}", d - config.source_domains)
            },
        });
    }

    let n_spk = config.train_speakers + config.test_speakers;
    let train_speakers: Vec<usize> = (0..config.train_speakers).collect();
    let test_speakers: Vec<usize> = (config.train_speakers..n_spk).collect();

    let mut utterances = Vec::new();
    let mut meta = Vec::new();
    let mut offset = 0u64;
    for spk in 0..n_spk {
        let mut rng = root.split(&format!("speaker{spk}"));
        let identity: Vec<f64> = (0..config.latent_dim).map(|_| rng.normal()).collect();
        let is_train = spk < config.train_speakers;
        let mut roles = vec![if is_train { Role::Train } else { Role::Unused }; config.utterances_per_speaker];
        let mut order: Vec<usize> = (0..config.utterances_per_speaker).collect();
        rng.shuffle(&mut order);
        if !is_train {
            for (rank, &clip) in order.iter().enumerate() {
                if rank < config.enroll_per_speaker {
                    roles[clip] = Role::Enroll;
                } else if rank < config.enroll_per_speaker + config.test_per_speaker {
                    roles[clip] = Role::Test;
                }
            }
        }
        let domain_ids: Vec<usize> = if is_train {
            (0..config.source_domains).collect()
        } else {
            (0..n_dom).collect()
        };
        for (clip, &role) in roles.iter().enumerate() {
            let latent: Vec<f64> = identity
                .iter()
                .map(|v| v + config.within_speaker_std * rng.normal())
                .collect();
            let mean: Vec<f64> = (0..f)
                .map(|c| {
                    (0..config.latent_dim)
                        .map(|k| mixing[c * config.latent_dim + k] * latent[k])
                        .sum()
                })
                .collect();
            let mut clean = Matrix::zeros(t_len, f);
            for t in 0..t_len {
                for c in 0..f {
                    clean.set(t, c, mean[c] + config.frame_noise_std * rng.normal());
                }
            }
            let rms = (clean.data().iter().map(|v| v * v).sum::<f64>()
                / clean.data().len() as f64)
                .sqrt();
            for &d in &domain_ids {
                let tr = &transforms[d];
                let gain = tr.noise_ratio * rms;
                let mut x = Matrix::zeros(t_len, f);
                let mut eps = vec![0.0; f];
                for t in 0..t_len {
                    eps.iter_mut().for_each(|e| *e = rng.normal());
                    for c in 0..f {
                        let noise: f64 = tr
                            .basis
                            .row(c)
                            .iter()
                            .zip(&eps)
                            .map(|(b, e)| b * e)
                            .sum();
                        let v = tr.scale[c] * clean.get(t, c) + tr.offset[c] + gain * noise;
                        x.set(t, c, f32_round(v));
                    }
                }
                let id = utterances.len();
                utterances.push(Utterance {
                    id,
                    features: x,
                    speaker: spk,
                    domain: d,
                    pseudo_domain: d,
                });
                meta.push(UtteranceMeta {
                    id,
                    speaker: spk,
                    domain: d,
                    clip,
                    role,
                    offset,
                    frames: t_len,
                    channels: f,
                });
                offset += (t_len * f * 4) as u64;
            }
        }
    }
    Ok(SynthDataset {
        config: config.clone(),
        dataset: Dataset::new(utterances)?,
        domains,
        train_speakers,
        test_speakers,
        meta,
    })
}

impl SynthDataset {
    pub fn source_domains(&self) -> Vec<usize> {
        self.domains
            .iter()
            .filter(|d| d.group == DomainGroup::Source)
            .map(|d| d.id)
            .collect()
    }

    pub fn out_domains(&self) -> Vec<usize> {
        self.domains
            .iter()
            .filter(|d| d.group == DomainGroup::Out)
            .map(|d| d.id)
            .collect()
    }

    /// Training speakers in source domains, re-indexed densely.
    pub fn train_dataset(&self) -> Result<Dataset> {
        let mut utts = Vec::new();
        for (u, m) in self.dataset.utterances().iter().zip(&self.meta) {
            if m.role == Role::Train {
                let mut u = u.clone();
                u.id = utts.len();
                utts.push(u);
            }
        }
        if utts.is_empty() {
            return Err(Error::config("dataset has no training utterances"));
        }
        Dataset::new(utts)
    }

    /// Enrollment/test utterances of every test speaker in `domain`.
    pub fn test_split(&self, domain: usize) -> Result<Vec<SpeakerSplit>> {
        if domain >= self.domains.len() {
            return Err(Error::config(format!("unknown domain {domain}")));
        }
        let mut splits: Vec<SpeakerSplit> = self
            .test_speakers
            .iter()
            .map(|&speaker| SpeakerSplit {
                speaker,
                enroll: Vec::new(),
                test: Vec::new(),
            })
            .collect();
        let first = self.test_speakers.first().copied().unwrap_or(0);
        for m in self.meta.iter().filter(|m| m.domain == domain) {
            let Some(s) = m.speaker.checked_sub(first).and_then(|i| splits.get_mut(i)) else {
                continue;
            };
            match m.role {
                Role::Enroll => s.enroll.push(m.id),
                Role::Test => s.test.push(m.id),
                _ => {}
            }
        }
        Ok(splits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: "fdg-dataset".into(),
            config: self.config.clone(),
            domains: self.domains.clone(),
            train_speakers: self.train_speakers.clone(),
            test_speakers: self.test_speakers.clone(),
            utterances: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(format!("manifest encoding: {e}")))?;
        let blob_len: usize = self.meta.iter().map(|m| m.frames * m.channels * 4).sum();
        let mut out = Vec::with_capacity(12 + text.len() + blob_len);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&container::VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for u in self.dataset.utterances() {
            for &v in u.features.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::format("not an FDGD dataset file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != container::VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let end = 12usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format("manifest length exceeds file size"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[12..end])
            .map_err(|e| Error::format(format!("manifest: {e}")))?;
        if manifest.format != "fdg-dataset" {
            return Err(Error::format("manifest format tag mismatch"));
        }
        let blob = &bytes[end..];
        let mut expected = 0u64;
        let mut utterances = Vec::with_capacity(manifest.utterances.len());
        for (i, m) in manifest.utterances.iter().enumerate() {
            if m.id != i || m.offset != expected {
                return Err(Error::format(format!("utterance {i} has inconsistent id/offset")));
            }
            let n = m.frames * m.channels;
            let start = m.offset as usize;
            let stop = start + n * 4;
            if stop > blob.len() {
                return Err(Error::format(format!("blob truncated inside utterance {i}")));
            }
            let data: Vec<f64> = blob[start..stop]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            utterances.push(Utterance {
                id: i,
                features: Matrix::from_vec(m.frames, m.channels, data)?,
                speaker: m.speaker,
                domain: m.domain,
                pseudo_domain: m.domain,
            });
            expected = stop as u64;
        }
        if expected as usize != blob.len() {
            return Err(Error::format(format!(
                "blob has {} bytes beyond the last record",
                blob.len() - expected as usize
            )));
        }
        Ok(Self {
            config: manifest.config,
            dataset: Dataset::new(utterances).map_err(|e| Error::format(e.to_string()))?,
            domains: manifest.domains,
            train_speakers: manifest.train_speakers,
            test_speakers: manifest.test_speakers,
            meta: manifest.utterances,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: GenConfig,
    domains: Vec<DomainInfo>,
    train_speakers: Vec<usize>,
    test_speakers: Vec<usize>,
    utterances: Vec<UtteranceMeta>,
}

pub fn save_dataset(ds: &SynthDataset, path: &Path) -> Result<()> {
    container::write_file(path, &ds.to_bytes()?)
}

pub fn load_dataset(path: &Path) -> Result<SynthDataset> {
    SynthDataset::from_bytes(&container::read_file(path)?)
}
