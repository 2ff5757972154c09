//! Compact cliques: complete-linkage growth around every sample followed by
//! farthest-neighbor agglomeration of redundant cliques.
//!
//! Ties are always broken toward the lowest index, so both stages are pure
//! functions of their input.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::{self, SimilarityMatrix};

/// Growth floor for complete linkage: either a fixed similarity, or the
/// per-sample upper reliability cut of the current similarity matrix
/// (averaged over the clique members and the candidate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MinSimilarity {
    Fixed(f64),
    Reliability { reliability_upper_q: f64 },
}

impl Default for MinSimilarity {
    fn default() -> Self {
        MinSimilarity::Reliability {
            reliability_upper_q: similarity::DEFAULT_UPPER_Q,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CliqueParams {
    pub min_similarity: MinSimilarity,
    pub max_clique_size: usize,
    pub target_k: usize,
    pub merge_ratio: f64,
}

impl Default for CliqueParams {
    fn default() -> Self {
        Self {
            min_similarity: MinSimilarity::default(),
            max_clique_size: 100,
            target_k: 100,
            merge_ratio: 0.5,
        }
    }
}

impl CliqueParams {
    pub fn with_floor(min_similarity: f64) -> Self {
        Self {
            min_similarity: MinSimilarity::Fixed(min_similarity),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.merge_ratio > 0.0 && self.merge_ratio <= 1.0) {
            return Err(Error::InvalidParams(format!(
                "merge_ratio {} not in (0, 1]",
                self.merge_ratio
            )));
        }
        if self.target_k == 0 || self.max_clique_size == 0 {
            return Err(Error::InvalidParams(
                "target_k and max_clique_size must be positive".into(),
            ));
        }
        match self.min_similarity {
            MinSimilarity::Fixed(v) if !v.is_finite() => {
                Err(Error::InvalidParams("min_similarity must be finite".into()))
            }
            MinSimilarity::Reliability { reliability_upper_q: q } if !(q > 0.0 && q < 1.0) => {
                Err(Error::InvalidParams(format!("reliability quantile {q} not in (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    /// Resolve the growth floor against a concrete similarity matrix.
    pub fn floor(&self, s: &SimilarityMatrix) -> Result<GrowthFloor> {
        self.validate()?;
        match self.min_similarity {
            MinSimilarity::Fixed(v) => Ok(GrowthFloor::Fixed(v)),
            MinSimilarity::Reliability { reliability_upper_q } => {
                let cuts = similarity::row_quantiles(s, &[reliability_upper_q]).remove(0);
                Ok(GrowthFloor::PerSample(cuts))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GrowthFloor {
    Fixed(f64),
    PerSample(Vec<f64>),
}

impl GrowthFloor {
    fn threshold(&self, members: &[usize], candidate: usize) -> f64 {
        match self {
            GrowthFloor::Fixed(v) => *v,
            GrowthFloor::PerSample(cuts) => {
                let sum: f64 = members.iter().map(|&i| cuts[i]).sum::<f64>() + cuts[candidate];
                sum / (members.len() + 1) as f64
            }
        }
    }
}

/// Greedy complete-linkage growth from `seed`. Returns sorted member indices.
pub fn grow_clique(s: &SimilarityMatrix, seed: usize, params: &CliqueParams) -> Result<Vec<usize>> {
    if seed >= s.n() {
        return Err(Error::InvalidParams(format!("seed {seed} out of range")));
    }
    let floor = params.floor(s)?;
    Ok(grow_with_floor(s, seed, &floor, params.max_clique_size))
}

pub fn grow_with_floor(
    s: &SimilarityMatrix,
    seed: usize,
    floor: &GrowthFloor,
    max_size: usize,
) -> Vec<usize> {
    let n = s.n();
    let mut members = vec![seed];
    let mut inside = vec![false; n];
    inside[seed] = true;
    // complete linkage of every outsider to the current clique
    let mut linkage: Vec<f64> = (0..n).map(|j| s.get(seed, j)).collect();
    while members.len() < max_size {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !inside[j] && best.is_none_or(|(_, v)| linkage[j] > v) {
                best = Some((j, linkage[j]));
            }
        }
        let Some((j, value)) = best else { break };
        if value < floor.threshold(&members, j) {
            break;
        }
        members.push(j);
        inside[j] = true;
        for (k, l) in linkage.iter_mut().enumerate() {
            *l = l.min(s.get(j, k));
        }
    }
    members.sort_unstable();
    members
}

/// Mean similarity over unordered member pairs; `+∞` for a singleton.
pub fn intra_clique_similarity(s: &SimilarityMatrix, members: &[usize]) -> f64 {
    if members.len() < 2 {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            sum += s.get(i, j);
        }
    }
    let pairs = members.len() * (members.len() - 1) / 2;
    sum / pairs as f64
}

/// A grown clique and the sample it was grown from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub seed: usize,
    pub members: Vec<usize>,
}

/// One accepted farthest-neighbor merge.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecord {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub link: f64,
    pub intra_left: f64,
    pub intra_right: f64,
    pub intra_union: f64,
}

/// `K × N` assignment of samples to cliques.
#[derive(Debug, Clone, PartialEq)]
pub struct CliqueAssignment {
    pub n: usize,
    pub cliques: Vec<Vec<usize>>,
    pub seeds: Vec<usize>,
    /// Intra-clique similarity under the matrix the cliques were built from;
    /// `+∞` for singletons.
    pub intra: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CliqueAssignmentJson {
    k: usize,
    n: usize,
    cliques: Vec<Vec<usize>>,
    seeds: Vec<usize>,
    // null encodes +inf (singletons)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    intra: Option<Vec<Option<f64>>>,
}

impl CliqueAssignment {
    pub fn k(&self) -> usize {
        self.cliques.len()
    }

    /// Binary membership matrix `C`.
    pub fn membership(&self) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.k(), self.n);
        for (k, members) in self.cliques.iter().enumerate() {
            for &i in members {
                c[(k, i)] = 1.0;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() != self.k() || (!self.intra.is_empty() && self.intra.len() != self.k()) {
            return Err(Error::Format("clique, seed and intra lists differ in length".into()));
        }
        for (k, members) in self.cliques.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::Format(format!("clique {k} is empty")));
            }
            if members.iter().any(|&i| i >= self.n) {
                return Err(Error::Format(format!("clique {k} has an out-of-range member")));
            }
            if members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!("clique {k} members not sorted and unique")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = CliqueAssignmentJson {
            k: self.k(),
            n: self.n,
            cliques: self.cliques.clone(),
            seeds: self.seeds.clone(),
            intra: (!self.intra.is_empty()).then(|| {
                self.intra
                    .iter()
                    .map(|v| v.is_finite().then_some(*v))
                    .collect()
            }),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: CliqueAssignmentJson = serde_json::from_str(text)?;
        if raw.k != raw.cliques.len() {
            return Err(Error::Format(format!(
                "k = {} but {} cliques listed",
                raw.k,
                raw.cliques.len()
            )));
        }
        let out = Self {
            n: raw.n,
            cliques: raw.cliques,
            seeds: raw.seeds,
            intra: raw
                .intra
                .map(|v| v.into_iter().map(|x| x.unwrap_or(f64::INFINITY)).collect())
                .unwrap_or_default(),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone)]
struct Cluster {
    members: Vec<usize>,
    seed: usize,
    intra: f64,
    version: u32,
}

/// Heap entry ordered by link (largest first), then lowest slot pair.
#[derive(Debug, PartialEq)]
struct PairKey {
    link: f64,
    a: usize,
    b: usize,
    va: u32,
    vb: u32,
}

impl Eq for PairKey {}

impl Ord for PairKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.link
            .total_cmp(&other.link)
            .then_with(|| other.a.cmp(&self.a))
            .then_with(|| other.b.cmp(&self.b))
    }
}

impl PartialOrd for PairKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Farthest-neighbor link: least similar cross pair with distinct samples.
fn link_value(s: &SimilarityMatrix, a: &[usize], b: &[usize]) -> f64 {
    let mut link = f64::INFINITY;
    for &i in a {
        for &j in b {
            if i != j {
                link = link.min(s.get(i, j));
            }
        }
    }
    link
}

fn sorted_union(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut u: Vec<usize> = a.iter().chain(b).copied().collect();
    u.sort_unstable();
    u.dedup();
    u
}

fn collapse_duplicates(items: impl IntoIterator<Item = (Vec<usize>, usize)>) -> Vec<(Vec<usize>, usize)> {
    let mut by_members: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for (members, seed) in items {
        by_members
            .entry(members)
            .and_modify(|s| *s = (*s).min(seed))
            .or_insert(seed);
    }
    let mut out: Vec<_> = by_members.into_iter().collect();
    out.sort_by(|x, y| x.1.cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
    out
}

pub fn merge_cliques(
    s: &SimilarityMatrix,
    candidates: &[Candidate],
    params: &CliqueParams,
) -> Result<CliqueAssignment> {
    merge_cliques_logged(s, candidates, params).map(|(c, _)| c)
}

/// Agglomerate candidate cliques by farthest-neighbor linkage. A merge of `A`
/// and `B` is accepted only if the union keeps at least `merge_ratio` of the
/// smaller intra-clique similarity of its constituents; merging stops at
/// `target_k` cliques or when no acceptable merge is left. If more than
/// `target_k` cliques survive, the largest are kept (ties: higher intra
/// similarity, then lower seed).
pub fn merge_cliques_logged(
    s: &SimilarityMatrix,
    candidates: &[Candidate],
    params: &CliqueParams,
) -> Result<(CliqueAssignment, Vec<MergeRecord>)> {
    params.validate()?;
    if candidates.is_empty() {
        return Err(Error::InvalidParams("no candidate cliques".into()));
    }
    let n = s.n();
    let normalized = candidates.iter().map(|c| {
        let mut m = c.members.clone();
        m.sort_unstable();
        m.dedup();
        (m, c.seed)
    });
    for (k, c) in candidates.iter().enumerate() {
        if c.members.is_empty() || c.members.iter().any(|&i| i >= n) {
            return Err(Error::InvalidParams(format!("candidate {k} is empty or out of range")));
        }
    }
    let mut clusters: Vec<Option<Cluster>> = collapse_duplicates(normalized)
        .into_iter()
        .map(|(members, seed)| {
            let intra = intra_clique_similarity(s, &members);
            Some(Cluster {
                members,
                seed,
                intra,
                version: 0,
            })
        })
        .collect();
    let slots = clusters.len();
    let mut alive = slots;

    let mut links = DMatrix::from_element(slots, slots, f64::INFINITY);
    let pair_links: Vec<(usize, usize, f64)> = (0..slots)
        .into_par_iter()
        .flat_map_iter(|a| {
            let clusters = &clusters;
            ((a + 1)..slots).map(move |b| {
                let (ca, cb) = (clusters[a].as_ref().unwrap(), clusters[b].as_ref().unwrap());
                (a, b, link_value(s, &ca.members, &cb.members))
            })
        })
        .collect();
    let mut heap = BinaryHeap::with_capacity(pair_links.len());
    for (a, b, link) in pair_links {
        links[(a, b)] = link;
        links[(b, a)] = link;
        heap.push(PairKey { link, a, b, va: 0, vb: 0 });
    }

    let mut log = Vec::new();
    while alive > params.target_k {
        let Some(key) = heap.pop() else { break };
        let (Some(ca), Some(cb)) = (&clusters[key.a], &clusters[key.b]) else {
            continue;
        };
        if ca.version != key.va || cb.version != key.vb {
            continue;
        }
        let union = sorted_union(&ca.members, &cb.members);
        let intra_union = intra_clique_similarity(s, &union);
        let floor = params.merge_ratio * ca.intra.min(cb.intra);
        if !(intra_union >= floor) {
            continue;
        }
        log.push(MergeRecord {
            left: ca.members.clone(),
            right: cb.members.clone(),
            link: key.link,
            intra_left: ca.intra,
            intra_right: cb.intra,
            intra_union,
        });
        let merged = Cluster {
            members: union,
            seed: ca.seed.min(cb.seed),
            intra: intra_union,
            version: ca.version + 1,
        };
        clusters[key.b] = None;
        alive -= 1;
        let (a, version) = (key.a, merged.version);
        clusters[a] = Some(merged);
        for c in 0..slots {
            if c == a || clusters[c].is_none() {
                continue;
            }
            // complete linkage of a union is the min of the constituent links
            let link = links[(a, c)].min(links[(key.b, c)]);
            links[(a, c)] = link;
            links[(c, a)] = link;
            let vc = clusters[c].as_ref().unwrap().version;
            let (lo, hi, vlo, vhi) = if a < c { (a, c, version, vc) } else { (c, a, vc, version) };
            heap.push(PairKey { link, a: lo, b: hi, va: vlo, vb: vhi });
        }
    }

    let survivors = collapse_duplicates(
        clusters
            .into_iter()
            .flatten()
            .map(|c| (c.members, c.seed)),
    );
    let mut finals: Vec<(Vec<usize>, usize, f64)> = survivors
        .into_iter()
        .map(|(m, seed)| {
            let intra = intra_clique_similarity(s, &m);
            (m, seed, intra)
        })
        .collect();
    if finals.len() > params.target_k {
        finals.sort_by(|x, y| {
            y.0.len()
                .cmp(&x.0.len())
                .then_with(|| y.2.total_cmp(&x.2))
                .then_with(|| x.1.cmp(&y.1))
        });
        finals.truncate(params.target_k);
        finals.sort_by_key(|f| f.1);
    }
    let assignment = CliqueAssignment {
        n,
        seeds: finals.iter().map(|f| f.1).collect(),
        intra: finals.iter().map(|f| f.2).collect(),
        cliques: finals.into_iter().map(|f| f.0).collect(),
    };
    Ok((assignment, log))
}

pub fn build_cliques(s: &SimilarityMatrix, params: &CliqueParams) -> Result<CliqueAssignment> {
    build_cliques_logged(s, params).map(|(c, _)| c)
}

/// Grow one candidate clique per sample, then merge.
pub fn build_cliques_logged(
    s: &SimilarityMatrix,
    params: &CliqueParams,
) -> Result<(CliqueAssignment, Vec<MergeRecord>)> {
    let floor = params.floor(s)?;
    let candidates: Vec<Candidate> = (0..s.n())
        .into_par_iter()
        .map(|seed| Candidate {
            seed,
            members: grow_with_floor(s, seed, &floor, params.max_clique_size),
        })
        .collect();
    merge_cliques_logged(s, &candidates, params)
}
