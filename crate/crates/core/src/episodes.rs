//! Multi-domain dataset container and the three episode samplers:
//! aggregation (all domains), domain-specific (one pseudo-domain) and
//! domain-mismatch (support/query from domain `u`, prototypes later produced
//! by the network of a different domain `j`).

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: usize,
    /// `T x F` frames.
    pub features: Matrix,
    pub speaker: usize,
    pub domain: usize,
    pub pseudo_domain: usize,
}

/// Utterances with dense speaker/domain ids and per-(pseudo-domain, speaker)
/// indices used by the samplers.
#[derive(Debug, Clone)]
pub struct Dataset {
    utterances: Vec<Utterance>,
    n_speakers: usize,
    n_domains: usize,
    n_pseudo: usize,
    by_speaker: Vec<Vec<usize>>,
    by_pseudo: Vec<Vec<Vec<usize>>>,
}

impl Dataset {
    /// Builds a dataset; speaker, domain and pseudo-domain ids must be dense
    /// from zero and `utterances[i].id == i`.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        for (i, u) in utterances.iter().enumerate() {
            if u.id != i {
                return Err(Error::config(format!("utterance {i} carries id {}", u.id)));
            }
        }
        let dense = |ids: Vec<usize>, what: &str| -> Result<usize> {
            let set: HashSet<usize> = ids.into_iter().collect();
            let n = set.len();
            if (0..n).any(|i| !set.contains(&i)) {
                return Err(Error::config(format!("{what} ids are not dense from 0")));
            }
            Ok(n)
        };
        let n_speakers = dense(utterances.iter().map(|u| u.speaker).collect(), "speaker")?;
        let n_domains = dense(utterances.iter().map(|u| u.domain).collect(), "domain")?;
        let n_pseudo = utterances
            .iter()
            .map(|u| u.pseudo_domain + 1)
            .max()
            .unwrap_or(0);
        let mut ds = Self {
            utterances,
            n_speakers,
            n_domains,
            n_pseudo,
            by_speaker: Vec::new(),
            by_pseudo: Vec::new(),
        };
        ds.rebuild_index();
        Ok(ds)
    }

    fn rebuild_index(&mut self) {
        self.by_speaker = vec![Vec::new(); self.n_speakers];
        self.by_pseudo = vec![vec![Vec::new(); self.n_speakers]; self.n_pseudo];
        for u in &self.utterances {
            self.by_speaker[u.speaker].push(u.id);
            self.by_pseudo[u.pseudo_domain][u.speaker].push(u.id);
        }
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn utterance(&self, id: usize) -> &Utterance {
        &self.utterances[id]
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    /// Number of pseudo-domains, i.e. `1 + max pseudo label`.
    pub fn n_pseudo_domains(&self) -> usize {
        self.n_pseudo
    }

    /// Replaces every pseudo-domain label; `labels[i]` must be `< m`.
    pub fn set_pseudo_labels(&mut self, labels: &[usize], m: usize) -> Result<()> {
        if labels.len() != self.utterances.len() {
            return Err(Error::usage(format!(
                "{} labels for {} utterances",
                labels.len(),
                self.utterances.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::usage(format!("pseudo label {bad} outside [0, {m})")));
        }
        for (u, &l) in self.utterances.iter_mut().zip(labels) {
            u.pseudo_domain = l;
        }
        self.n_pseudo = m;
        self.rebuild_index();
        Ok(())
    }

    /// Resets pseudo-domains to the ground-truth domain ids.
    pub fn use_true_domains(&mut self) {
        let labels: Vec<usize> = self.utterances.iter().map(|u| u.domain).collect();
        self.set_pseudo_labels(&labels, self.n_domains)
            .expect("domain ids are dense");
    }

    pub fn pseudo_labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.pseudo_domain).collect()
    }

    pub fn pseudo_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_pseudo];
        for u in &self.utterances {
            h[u.pseudo_domain] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EpisodeKind {
    Aggregation,
    Specific(usize),
    /// Data from pseudo-domain `u`, prototypes from the network of domain `j`.
    Mismatch {
        u: usize,
        j: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Member {
    pub utt: usize,
    pub class: usize,
}

/// A `way`-way `shot`-shot episode with `queries` query items per class.
/// Support and query are stored class-major: all members of class 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub kind: EpisodeKind,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub support: Vec<Member>,
    pub query: Vec<Member>,
    /// `speakers[class]` is the dataset speaker id behind that class index.
    pub speakers: Vec<usize>,
}

impl Episode {
    /// Verifies every structural invariant against `dataset`.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let fail = |m: String| Err(Error::usage(m));
        if self.support.len() != self.way * self.shot {
            return fail(format!("support size {}", self.support.len()));
        }
        if self.query.len() != self.way * self.queries {
            return fail(format!("query size {}", self.query.len()));
        }
        let distinct: HashSet<usize> = self.speakers.iter().copied().collect();
        if self.speakers.len() != self.way || distinct.len() != self.way {
            return fail("class->speaker map is not a bijection".into());
        }
        let mut seen = HashSet::new();
        let mut per_class_s = vec![0usize; self.way];
        let mut per_class_q = vec![0usize; self.way];
        for (set, counts) in [
            (&self.support, &mut per_class_s),
            (&self.query, &mut per_class_q),
        ] {
            for m in set {
                if !seen.insert(m.utt) {
                    return fail(format!("utterance {} used twice", m.utt));
                }
                if m.class >= self.way {
                    return fail(format!("class {} out of range", m.class));
                }
                counts[m.class] += 1;
                let u = dataset.utterance(m.utt);
                if u.speaker != self.speakers[m.class] {
                    return fail(format!("utterance {} has the wrong speaker", m.utt));
                }
                let required = match self.kind {
                    EpisodeKind::Aggregation => None,
                    EpisodeKind::Specific(j) => Some(j),
                    EpisodeKind::Mismatch { u, .. } => Some(u),
                };
                if let Some(d) = required {
                    if u.pseudo_domain != d {
                        return fail(format!("utterance {} outside pseudo-domain {d}", m.utt));
                    }
                }
            }
        }
        if per_class_s.iter().any(|&c| c != self.shot)
            || per_class_q.iter().any(|&c| c != self.queries)
        {
            return fail("per-class counts differ from shot/queries".into());
        }
        if let EpisodeKind::Mismatch { u, j } = self.kind {
            if u == j {
                return fail("mismatch episode with j == u".into());
            }
        }
        Ok(())
    }

    pub fn support_ids(&self) -> Vec<usize> {
        self.support.iter().map(|m| m.utt).collect()
    }

    pub fn query_ids(&self) -> Vec<usize> {
        self.query.iter().map(|m| m.utt).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|m| m.class).collect()
    }
}

fn check_counts(way: usize, shot: usize, queries: usize) -> Result<()> {
    if way < 2 {
        return Err(Error::config(format!("way must be at least 2, got {way}")));
    }
    if shot == 0 || queries == 0 {
        return Err(Error::config("shot and queries must be positive"));
    }
    Ok(())
}

/// Draws `way` speakers from `pools` (indexed by speaker, ascending utterance
/// ids) and `shot + queries` utterances for each.
fn sample_from_pools(
    pools: &[Vec<usize>],
    kind: EpisodeKind,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    check_counts(way, shot, queries)?;
    let need = shot + queries;
    let eligible: Vec<usize> = pools
        .iter()
        .enumerate()
        .filter(|(_, p)| p.len() >= need)
        .map(|(s, _)| s)
        .collect();
    if eligible.len() < way {
        return Err(Error::config(format!(
            "{kind:?}: only {} speakers have {need} utterances, need {way}",
            eligible.len()
        )));
    }
    let speakers: Vec<usize> = rng
        .sample_indices(eligible.len(), way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support = Vec::with_capacity(way * shot);
    let mut query = Vec::with_capacity(way * queries);
    for (class, &spk) in speakers.iter().enumerate() {
        let pool = &pools[spk];
        let picks = rng.sample_indices(pool.len(), need);
        support.extend(picks[..shot].iter().map(|&i| Member {
            utt: pool[i],
            class,
        }));
        query.extend(picks[shot..].iter().map(|&i| Member {
            utt: pool[i],
            class,
        }));
    }
    Ok(Episode {
        kind,
        way,
        shot,
        queries,
        support,
        query,
        speakers,
    })
}

pub fn sample_aggregation(
    dataset: &Dataset,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    sample_from_pools(
        &dataset.by_speaker,
        EpisodeKind::Aggregation,
        way,
        shot,
        queries,
        rng,
    )
}

pub fn sample_specific(
    dataset: &Dataset,
    j: usize,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let pools = dataset.by_pseudo.get(j).ok_or_else(|| {
        Error::config(format!(
            "pseudo-domain {j} out of range (have {})",
            dataset.n_pseudo
        ))
    })?;
    sample_from_pools(pools, EpisodeKind::Specific(j), way, shot, queries, rng)
}

/// Draws `u` uniformly from `0..m`, then `j` uniformly from the other `m - 1`
/// domains, then a specific-style episode from pseudo-domain `u`.
pub fn sample_mismatch(
    dataset: &Dataset,
    m: usize,
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if m < 2 {
        return Err(Error::config(format!(
            "mismatch episodes need at least 2 domains, got {m}"
        )));
    }
    if m > dataset.n_pseudo {
        return Err(Error::config(format!(
            "{m} domains requested but dataset has {} pseudo-domains",
            dataset.n_pseudo
        )));
    }
    let u = rng.below(m);
    let mut j = rng.below(m - 1);
    if j >= u {
        j += 1;
    }
    sample_from_pools(
        &dataset.by_pseudo[u],
        EpisodeKind::Mismatch { u, j },
        way,
        shot,
        queries,
        rng,
    )
}
