//! Iterative merging of attention maps into object proposals.
//!
//! The first iteration samples an `M x M` grid of anchor maps from the
//! aggregated tensor and lets each anchor absorb every map within symmetric
//! KL distance `τ`. Later iterations merge proposals that are within `τ` of
//! each other. A proposal is always the renormalized mean of the original
//! maps it has absorbed.

use rayon::prelude::*;

use crate::aggregate::AggregatedTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeConfig {
    /// Anchors per axis (`M`).
    pub grid_size: usize,
    /// Total merge iterations (`N`), the anchor pass included.
    pub iterations: usize,
    /// Inclusive distance threshold `τ` in nats. `+inf` merges everything.
    pub threshold: f64,
    /// Lower clamp applied to both distributions before taking logs.
    pub epsilon: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            grid_size: 16,
            iterations: 3,
            threshold: 1.0,
            epsilon: 1e-12,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self, resolution: usize) -> Result<()> {
        if self.grid_size == 0 || self.grid_size > resolution {
            return Err(Error::InvalidArgument(format!(
                "grid size {} outside 1..={resolution}",
                self.grid_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidArgument(
                "iterations must be at least 1".into(),
            ));
        }
        if self.threshold.is_nan() || self.threshold < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "threshold {} must be nonnegative",
                self.threshold
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidArgument(format!(
                "epsilon {} outside (0, 1e-3]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// `M^2` evenly spaced `(row, col)` anchors, row-major, at
/// `floor((m + 0.5) * resolution / M)` along each axis.
pub fn anchor_grid(grid_size: usize, resolution: usize) -> Result<Vec<(usize, usize)>> {
    if grid_size == 0 || grid_size > resolution {
        return Err(Error::InvalidArgument(format!(
            "grid size {grid_size} outside 1..={resolution}"
        )));
    }
    let axis: Vec<usize> = (0..grid_size)
        .map(|m| (2 * m + 1) * resolution / (2 * grid_size))
        .collect();
    Ok(axis
        .iter()
        .flat_map(|&i| axis.iter().map(move |&j| (i, j)))
        .collect())
}

/// Distributions prepared for distance evaluation: clamped to `epsilon`,
/// renormalized, with their natural logs cached.
pub(crate) struct PreparedMaps {
    len: usize,
    prob: Vec<f32>,
    log: Vec<f32>,
}

impl PreparedMaps {
    pub(crate) fn new(maps: &[f32], len: usize, epsilon: f64) -> Self {
        let mut prob = vec![0.0f32; maps.len()];
        let mut log = vec![0.0f32; maps.len()];
        prob.par_chunks_mut(len)
            .zip(log.par_chunks_mut(len))
            .zip(maps.par_chunks(len))
            .for_each(|((p, l), m)| prepare_one(m, epsilon, p, l));
        PreparedMaps { len, prob, log }
    }

    fn get(&self, k: usize) -> (&[f32], &[f32]) {
        let r = k * self.len..(k + 1) * self.len;
        (&self.prob[r.clone()], &self.log[r])
    }

    fn count(&self) -> usize {
        self.prob.len() / self.len
    }
}

fn prepare_one(map: &[f32], epsilon: f64, prob: &mut [f32], log: &mut [f32]) {
    let total: f64 = map.iter().map(|&v| (v as f64).max(epsilon)).sum();
    for ((p, l), &v) in prob.iter_mut().zip(log.iter_mut()).zip(map) {
        let x = (v as f64).max(epsilon) / total;
        // Rounding both from the same f64 keeps sign(p - q) and
        // sign(log p - log q) consistent, so every summand is >= 0.
        *p = x as f32;
        *l = x.ln() as f32;
    }
}

const LANES: usize = 8;
const BLOCK: usize = 256;

/// `½ Σ (p - q)(ln p - ln q)`, which equals `½ (KL(p‖q) + KL(q‖p))`.
///
/// Every summand is nonnegative, so partial sums only grow; the scan stops
/// early and returns `None` once the distance provably exceeds `limit`.
/// Swapping the two arguments negates both factors of every summand, which
/// leaves the result bit-identical.
#[inline(always)]
fn sym_kl_body(p: &[f32], lp: &[f32], q: &[f32], lq: &[f32], limit: f64) -> Option<f64> {
    let mut total = 0.0f64;
    let blocks = p
        .chunks(BLOCK)
        .zip(lp.chunks(BLOCK))
        .zip(q.chunks(BLOCK).zip(lq.chunks(BLOCK)));
    for ((pb, lpb), (qb, lqb)) in blocks {
        let mut acc = [0.0f32; LANES];
        let mut pc = pb.chunks_exact(LANES);
        let mut lpc = lpb.chunks_exact(LANES);
        let mut qc = qb.chunks_exact(LANES);
        let mut lqc = lqb.chunks_exact(LANES);
        for (((a, la), b), lb) in (&mut pc).zip(&mut lpc).zip(&mut qc).zip(&mut lqc) {
            for l in 0..LANES {
                acc[l] += (a[l] - b[l]) * (la[l] - lb[l]);
            }
        }
        let tail = pc
            .remainder()
            .iter()
            .zip(lpc.remainder())
            .zip(qc.remainder().iter().zip(lqc.remainder()));
        for (l, ((a, la), (b, lb))) in tail.enumerate() {
            acc[l] += (a - b) * (la - lb);
        }
        let block_sum =
            ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        total += block_sum as f64;
        if total * 0.5 > limit {
            return None;
        }
    }
    Some(total * 0.5)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn sym_kl_avx2(p: &[f32], lp: &[f32], q: &[f32], lq: &[f32], limit: f64) -> Option<f64> {
    sym_kl_body(p, lp, q, lq, limit)
}

/// Dispatches to a wider instruction set when available. Both paths execute
/// the same lane-wise operations in the same order (no fused multiply-add),
/// so they agree bit for bit.
fn sym_kl(p: (&[f32], &[f32]), q: (&[f32], &[f32]), limit: f64) -> Option<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { sym_kl_avx2(p.0, p.1, q.0, q.1, limit) };
        }
    }
    sym_kl_body(p.0, p.1, q.0, q.1, limit)
}

/// Symmetric KL distance `½ (KL(P‖Q) + KL(Q‖P))` in nats, after clamping both
/// arguments to at least `epsilon` and renormalizing.
pub fn kl_distance(p: &[f32], q: &[f32], epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Empty {
            what: "distribution",
        });
    }
    if let Some(v) = p.iter().chain(q).find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "distribution entry {v} is negative or non-finite"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} must be positive"
        )));
    }
    let n = p.len();
    let (mut pp, mut pl) = (vec![0.0; n], vec![0.0; n]);
    let (mut qp, mut ql) = (vec![0.0; n], vec![0.0; n]);
    prepare_one(p, epsilon, &mut pp, &mut pl);
    prepare_one(q, epsilon, &mut qp, &mut ql);
    Ok(sym_kl((&pp, &pl), (&qp, &ql), f64::INFINITY).expect("unbounded scan always completes"))
}

/// Fixed-size bit set over map indices.
#[derive(Debug, Clone, PartialEq, Eq)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(bits: usize) -> Self {
        BitSet {
            words: vec![0; bits.div_ceil(64)],
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    fn is_subset(&self, other: &BitSet) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    fn union_with(&mut self, other: &BitSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(w, &word)| {
            let mut bits = word;
            std::iter::from_fn(move || {
                if bits == 0 {
                    return None;
                }
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(w * 64 + b)
            })
        })
    }
}

/// Which anchors and original maps a proposal was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    /// Indices into the anchor list, ascending.
    pub anchors: Vec<usize>,
    /// Flat grid indices (`row * resolution + col`) of the absorbed maps,
    /// ascending.
    pub members: Vec<usize>,
}

/// Ordered object proposals, each a distribution over the target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalList {
    resolution: usize,
    maps: Vec<f32>,
    provenance: Vec<Provenance>,
    history: Vec<usize>,
}

impl ProposalList {
    /// Builds a list from explicit maps, e.g. for callers that produce
    /// proposals by other means. Each map is renormalized.
    pub fn from_maps(resolution: usize, maps: Vec<Vec<f32>>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::Empty {
                what: "proposal list",
            });
        }
        let n = resolution * resolution;
        let mut flat = Vec::with_capacity(n * maps.len());
        for (k, m) in maps.iter().enumerate() {
            if m.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "proposal {k} has {} values, expected {n}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "proposal {k} has negative or non-finite values"
                )));
            }
            let sum: f64 = m.iter().map(|&v| v as f64).sum();
            if sum <= 0.0 {
                return Err(Error::InvalidArgument(format!("proposal {k} is all zero")));
            }
            flat.extend(m.iter().map(|&v| (v as f64 / sum) as f32));
        }
        let provenance = (0..maps.len())
            .map(|_| Provenance {
                anchors: Vec::new(),
                members: Vec::new(),
            })
            .collect();
        Ok(ProposalList {
            resolution,
            maps: flat,
            provenance,
            history: vec![maps.len()],
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn map(&self, k: usize) -> &[f32] {
        let n = self.resolution * self.resolution;
        &self.maps[k * n..(k + 1) * n]
    }

    pub fn maps(&self) -> impl Iterator<Item = &[f32]> {
        self.maps.chunks_exact(self.resolution * self.resolution)
    }

    pub fn provenance(&self, k: usize) -> &Provenance {
        &self.provenance[k]
    }

    /// Proposal count after each completed iteration.
    pub fn history(&self) -> &[usize] {
        &self.history
    }
}

struct Group {
    anchors: Vec<usize>,
    members: BitSet,
}

/// Renormalized mean of the original maps in `members`.
fn mean_map(af: &AggregatedTensor, members: &BitSet, out: &mut [f32]) {
    let mut acc = vec![0.0f64; af.map_len()];
    for g in members.iter() {
        for (a, &v) in acc.iter_mut().zip(af.map(g)) {
            *a += v as f64;
        }
    }
    let sum: f64 = acc.iter().sum();
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = (a / sum) as f32;
    }
}

fn group_maps(af: &AggregatedTensor, groups: &[Group]) -> Vec<f32> {
    let n = af.map_len();
    let mut maps = vec![0.0f32; n * groups.len()];
    maps.par_chunks_mut(n)
        .zip(groups.par_iter())
        .for_each(|(out, g)| mean_map(af, &g.members, out));
    maps
}

const ANCHOR_TILE: usize = 8;

/// Absorbed set of every anchor: all maps within `τ` of the anchor map.
fn absorbed_sets(
    af: &AggregatedTensor,
    prepared: &PreparedMaps,
    anchors: &[usize],
    tau: f64,
) -> Vec<BitSet> {
    let n_maps = af.num_maps();
    if tau == f64::INFINITY {
        let mut all = BitSet::new(n_maps);
        (0..n_maps).for_each(|g| all.insert(g));
        return vec![all; anchors.len()];
    }

    // Anchors whose maps are bit-identical to an earlier anchor share its set.
    let mut source: Vec<usize> = (0..anchors.len()).collect();
    for b in 0..anchors.len() {
        if let Some(a) =
            (0..b).find(|&a| source[a] == a && af.map(anchors[a]) == af.map(anchors[b]))
        {
            source[b] = a;
        }
    }
    let unique: Vec<usize> = (0..anchors.len()).filter(|&b| source[b] == b).collect();

    let computed: Vec<Vec<BitSet>> = unique
        .par_chunks(ANCHOR_TILE)
        .map(|tile| {
            let mut sets = vec![BitSet::new(n_maps); tile.len()];
            for g in 0..n_maps {
                let candidate = prepared.get(g);
                for (set, &a) in sets.iter_mut().zip(tile) {
                    if sym_kl(prepared.get(anchors[a]), candidate, tau).is_some() {
                        set.insert(g);
                    }
                }
            }
            sets
        })
        .collect();

    let mut sets: Vec<Option<BitSet>> = vec![None; anchors.len()];
    for (&a, set) in unique.iter().zip(computed.into_iter().flatten()) {
        sets[a] = Some(set);
    }
    (0..anchors.len())
        .map(|b| {
            sets[source[b]]
                .clone()
                .expect("every source anchor is computed")
        })
        .collect()
}

/// One greedy pass over the current groups. Returns whether anything merged.
fn merge_pass(af: &AggregatedTensor, groups: &mut Vec<Group>, config: &MergeConfig) -> bool {
    let n = af.map_len();
    let maps = group_maps(af, groups);
    let prepared = PreparedMaps::new(&maps, n, config.epsilon);
    let count = prepared.count();
    let tau = config.threshold;

    // within[i] lists every j > i with D(i, j) <= τ, from distances taken at
    // the start of the pass.
    let within: Vec<Vec<usize>> = (0..count)
        .into_par_iter()
        .map(|i| {
            (i + 1..count)
                .filter(|&j| sym_kl(prepared.get(i), prepared.get(j), tau).is_some())
                .collect()
        })
        .collect();

    let mut alive = vec![true; count];
    let mut merged_any = false;
    for i in 0..count {
        if !alive[i] {
            continue;
        }
        for &j in &within[i] {
            if !alive[j] {
                continue;
            }
            alive[j] = false;
            merged_any = true;
            let (head, tail) = groups.split_at_mut(j);
            let target = &mut head[i];
            let absorbed = &tail[0];
            target.anchors.extend_from_slice(&absorbed.anchors);
            target.members.union_with(&absorbed.members);
        }
    }
    if merged_any {
        let mut k = 0;
        groups.retain(|_| {
            let keep = alive[k];
            k += 1;
            keep
        });
        for g in groups.iter_mut() {
            g.anchors.sort_unstable();
        }
    }
    merged_any
}

pub fn iterative_merge(af: &AggregatedTensor, config: &MergeConfig) -> Result<ProposalList> {
    let resolution = af.resolution();
    config.validate(resolution)?;
    let n_maps = af.num_maps();

    let anchors: Vec<usize> = anchor_grid(config.grid_size, resolution)?
        .into_iter()
        .map(|(i, j)| i * resolution + j)
        .collect();

    let prepared = PreparedMaps::new(af.data(), af.map_len(), config.epsilon);
    let sets = absorbed_sets(af, &prepared, &anchors, config.threshold);
    drop(prepared);

    let mut groups: Vec<Group> = Vec::new();
    let mut owner: Vec<usize> = Vec::with_capacity(anchors.len());
    for b in 0..anchors.len() {
        if !sets[b].contains(anchors[b]) {
            return Err(Error::Invariant(format!(
                "anchor {b} does not absorb its own map"
            )));
        }
        let earlier = (0..b).find(|&a| sets[b].is_subset(&sets[a]) && sets[a].contains(anchors[b]));
        match earlier {
            Some(a) => {
                let g = owner[a];
                groups[g].anchors.push(b);
                groups[g].members.union_with(&sets[b]);
                owner.push(g);
            }
            None => {
                owner.push(groups.len());
                groups.push(Group {
                    anchors: vec![b],
                    members: sets[b].clone(),
                });
            }
        }
    }
    drop(sets);

    let mut history = vec![groups.len()];
    // Once a pass merges nothing, every later pass would see the same maps.
    let mut settled = false;
    for _ in 1..config.iterations {
        if !settled && groups.len() > 1 {
            settled = !merge_pass(af, &mut groups, config);
        }
        history.push(groups.len());
    }

    let maps = group_maps(af, &groups);
    let provenance = groups
        .into_iter()
        .map(|g| Provenance {
            anchors: g.anchors,
            members: g.members.iter().collect(),
        })
        .collect::<Vec<_>>();
    debug_assert!(provenance
        .iter()
        .all(|p| p.members.iter().all(|&m| m < n_maps)));
    Ok(ProposalList {
        resolution,
        maps,
        provenance,
        history,
    })
}
