//! Retrieval evaluation: ranked queries with spatial non-maximum suppression,
//! one-to-one scoring against ground truth, precision curves, the
//! semi-automated labeling loop and K-means cluster purity.
//!
//! Spatial distances are Euclidean between patch centers. Ties in
//! representation distance are broken by coordinate order everywhere.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mih::MihIndex;
use crate::sigcore::{hamming, Signature, SignatureRecord, VoxelCoord};

/// A point in representation space: a signature or a real embedding.
#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Signature(Signature),
    Embedding(Vec<f64>),
}

impl Representation {
    fn kind(&self) -> &'static str {
        match self {
            Representation::Signature(_) => "signature",
            Representation::Embedding(_) => "embedding",
        }
    }

    /// Hamming distance for signatures, Euclidean for embeddings.
    pub fn distance(&self, other: &Representation) -> Result<f64> {
        match (self, other) {
            (Representation::Signature(a), Representation::Signature(b)) => Ok(hamming(*a, *b) as f64),
            (Representation::Embedding(a), Representation::Embedding(b)) => {
                if a.len() != b.len() {
                    return Err(Error::InvalidArgument(format!(
                        "embedding dimensions differ: {} and {}",
                        a.len(),
                        b.len()
                    )));
                }
                Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
            }
            _ => Err(Error::InvalidArgument(format!(
                "cannot compare a {} with a {}",
                self.kind(),
                other.kind()
            ))),
        }
    }
}

/// One query exemplar; `source` is where it was taken from, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMember {
    pub source: Option<VoxelCoord>,
    pub repr: Representation,
}

/// A non-empty set of exemplars of one representation kind.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    members: Vec<QueryMember>,
}

impl QuerySet {
    pub fn new(source: Option<VoxelCoord>, repr: Representation) -> Self {
        QuerySet {
            members: vec![QueryMember { source, repr }],
        }
    }

    pub fn from_members(members: Vec<QueryMember>) -> Result<Self> {
        let mut it = members.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("a query set needs at least one member".into()))?;
        let mut q = QuerySet::new(first.source, first.repr);
        for m in it {
            q.push(m.source, m.repr)?;
        }
        Ok(q)
    }

    pub fn push(&mut self, source: Option<VoxelCoord>, repr: Representation) -> Result<()> {
        let kind = self.members[0].repr.kind();
        if repr.kind() != kind {
            return Err(Error::InvalidArgument(format!(
                "query set holds {kind}s, got a {}",
                repr.kind()
            )));
        }
        if let Some(c) = source {
            if self.members.iter().any(|m| m.source == Some(c)) {
                return Err(Error::InvalidArgument(format!(
                    "query set already has a member from {c}"
                )));
            }
        }
        self.members.push(QueryMember { source, repr });
        Ok(())
    }

    pub fn members(&self) -> &[QueryMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains_source(&self, c: VoxelCoord) -> bool {
        self.members.iter().any(|m| m.source == Some(c))
    }
}

/// Minimum distance from `p` to any member of `q`.
pub fn queryset_distance(q: &QuerySet, p: &Representation) -> Result<f64> {
    let mut best = f64::INFINITY;
    for m in &q.members {
        best = best.min(m.repr.distance(p)?);
    }
    Ok(best)
}

/// A scored location before ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub coord: VoxelCoord,
    pub distance: f64,
}

fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.distance.total_cmp(&b.distance).then(a.coord.cmp(&b.coord))
}

/// Drops every candidate that has a better candidate closer than `t`.
///
/// "Better" means a smaller distance, or an equal distance at a lower
/// coordinate. A candidate is dropped even if the better one was itself
/// dropped. Output is sorted by distance, then coordinate.
pub fn nms_filter(candidates: &[Candidate], t: f64) -> Result<Vec<Candidate>> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "NMS threshold must be positive, got {t}"
        )));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(candidate_order);
    let cell = t.ceil().max(1.0) as i64;
    let key = |c: VoxelCoord| [c.x as i64 / cell, c.y as i64 / cell, c.z as i64 / cell];
    let mut grid: HashMap<[i64; 3], Vec<VoxelCoord>> = HashMap::new();
    let t2 = t * t;
    let mut kept = Vec::new();
    for cand in sorted {
        let k = key(cand.coord);
        let mut suppressed = false;
        'search: for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(cell) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        if cell.iter().any(|&c| (c.squared_distance(cand.coord) as f64) < t2) {
                            suppressed = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        grid.entry(k).or_default().push(cand.coord);
        if !suppressed {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// One entry of a final ranking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedPrediction {
    pub coord: VoxelCoord,
    pub distance: f64,
    /// 1-based.
    pub rank: usize,
}

/// Where a query looks for matches.
#[derive(Debug, Clone, Copy)]
pub enum SearchSpace<'a> {
    /// Multi-index hash look-ups; only colliding records are scored.
    Index(&'a MihIndex),
    /// Exhaustive scan over signatures.
    Signatures(&'a [SignatureRecord]),
    /// Exhaustive scan over real embeddings.
    Embeddings(&'a [(VoxelCoord, Vec<f64>)]),
}

impl SearchSpace<'_> {
    pub fn len(&self) -> usize {
        match self {
            SearchSpace::Index(i) => i.len(),
            SearchSpace::Signatures(r) => r.len(),
            SearchSpace::Embeddings(e) => e.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scores every reachable location by its query-set distance.
    pub fn candidates(&self, q: &QuerySet) -> Result<Vec<Candidate>> {
        match *self {
            SearchSpace::Signatures(records) => records
                .iter()
                .map(|r| {
                    Ok(Candidate {
                        coord: r.coord,
                        distance: queryset_distance(q, &Representation::Signature(r.sig))?,
                    })
                })
                .collect(),
            SearchSpace::Embeddings(table) => table
                .iter()
                .map(|(c, e)| {
                    Ok(Candidate {
                        coord: *c,
                        distance: queryset_distance(q, &Representation::Embedding(e.clone()))?,
                    })
                })
                .collect(),
            SearchSpace::Index(index) => {
                let mut ids = Vec::new();
                for m in q.members() {
                    match &m.repr {
                        Representation::Signature(s) => ids.extend(index.candidate_ids(*s)),
                        Representation::Embedding(_) => {
                            return Err(Error::InvalidArgument(
                                "a signature index cannot be searched with embeddings".into(),
                            ))
                        }
                    }
                }
                ids.sort_unstable();
                ids.dedup();
                let records = index.records();
                ids.into_iter()
                    .map(|i| {
                        Ok(Candidate {
                            coord: records[i].coord,
                            distance: queryset_distance(q, &Representation::Signature(records[i].sig))?,
                        })
                    })
                    .collect()
            }
        }
    }

    /// The representation stored at `c`, if the space has a site there.
    pub fn representation_at(&self, c: VoxelCoord) -> Option<Representation> {
        match *self {
            SearchSpace::Index(index) => index
                .records()
                .iter()
                .find(|r| r.coord == c)
                .map(|r| Representation::Signature(r.sig)),
            SearchSpace::Signatures(records) => records
                .iter()
                .find(|r| r.coord == c)
                .map(|r| Representation::Signature(r.sig)),
            SearchSpace::Embeddings(table) => table
                .iter()
                .find(|(p, _)| *p == c)
                .map(|(_, e)| Representation::Embedding(e.clone())),
        }
    }
}

/// Ranks candidates: NMS with threshold `t`, then the best `k`.
pub fn rank_candidates(candidates: &[Candidate], t: f64, k: usize) -> Result<Vec<RankedPrediction>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(nms_filter(candidates, t)?
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, c)| RankedPrediction {
            coord: c.coord,
            distance: c.distance,
            rank: i + 1,
        })
        .collect())
}

/// Scores the search space against `q`, suppresses non-maxima within `t`
/// and returns at most `k` ranked predictions. With an index, only records
/// colliding with some query member in a hash table are considered.
pub fn run_query(space: SearchSpace<'_>, q: &QuerySet, t: f64, k: usize) -> Result<Vec<RankedPrediction>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    rank_candidates(&space.candidates(q)?, t, k)
}

/// Maximum one-to-one matching of ranked predictions to truth sites within
/// `radius`. Predictions are added in rank order with augmenting paths, so
/// among maximum matchings the matched set favours higher ranks.
pub fn match_one_to_one(predictions: &[VoxelCoord], truth: &[VoxelCoord], radius: f64) -> Result<Vec<bool>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "match radius must be positive, got {radius}"
        )));
    }
    let r2 = radius * radius;
    let adjacency: Vec<Vec<usize>> = predictions
        .iter()
        .map(|p| {
            (0..truth.len())
                .filter(|&j| (p.squared_distance(truth[j]) as f64) <= r2)
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; truth.len()];
    fn augment(i: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(o, adj, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    let mut flags = vec![false; predictions.len()];
    for i in 0..predictions.len() {
        let mut seen = vec![false; truth.len()];
        flags[i] = augment(i, &adjacency, &mut owner, &mut seen);
    }
    Ok(flags)
}

/// `p(i) = max_{j >= i} precision@j`.
pub fn interpolated_precision(flags: &[bool]) -> Result<Vec<f64>> {
    if flags.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let mut tp = 0usize;
    let mut raw: Vec<f64> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect();
    for i in (0..raw.len() - 1).rev() {
        raw[i] = raw[i].max(raw[i + 1]);
    }
    Ok(raw)
}

/// `(precision, recall)` at every rank.
pub fn precision_recall(flags: &[bool], truth_count: usize) -> Result<Vec<(f64, f64)>> {
    if truth_count == 0 {
        return Err(Error::InvalidArgument("truth_count must be positive".into()));
    }
    let positives = flags.iter().filter(|&&f| f).count();
    if positives > truth_count {
        return Err(Error::InvalidArgument(format!(
            "{positives} true predictions exceed truth_count {truth_count}"
        )));
    }
    let mut tp = 0usize;
    Ok(flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            (tp as f64 / (i + 1) as f64, tp as f64 / truth_count as f64)
        })
        .collect())
}

/// Scoring of one ranking against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub flags: Vec<bool>,
    pub interpolated: Vec<f64>,
    pub precision_recall: Vec<(f64, f64)>,
    pub matched: usize,
}

pub fn evaluate_ranking(ranking: &[RankedPrediction], truth: &[VoxelCoord], radius: f64) -> Result<MatchReport> {
    let coords: Vec<VoxelCoord> = ranking.iter().map(|p| p.coord).collect();
    let flags = match_one_to_one(&coords, truth, radius)?;
    Ok(MatchReport {
        interpolated: interpolated_precision(&flags)?,
        precision_recall: precision_recall(&flags, truth.len())?,
        matched: flags.iter().filter(|&&f| f).count(),
        flags,
    })
}

/// Per-rank arithmetic mean. Rank `i` averages the curves that reach it.
pub fn mean_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let len = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(i).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

/// First prediction at rank `rank_n` or later whose location is not in `labeled`.
pub fn next_unlabeled<'a>(
    ranking: &'a [RankedPrediction],
    rank_n: usize,
    labeled: &HashSet<VoxelCoord>,
) -> Option<&'a RankedPrediction> {
    ranking
        .iter()
        .filter(|p| p.rank >= rank_n.max(1))
        .find(|p| !labeled.contains(&p.coord))
}

/// Outcome of the semi-automated labeling loop.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowOutcome {
    pub queries: QuerySet,
    pub labels_used: usize,
    pub true_found: usize,
    /// Every label in the order it was given.
    pub labels: Vec<(VoxelCoord, bool)>,
}

/// Simulates the labeling loop. Predictions are shown from rank `rank_n`
/// onward, skipping anything already labeled or in the query set; each true
/// match joins the query set and presentation restarts at `rank_n` under
/// the re-ranked list. Stops after `target_true` verified matches.
pub fn semi_automated_workflow(
    space: SearchSpace<'_>,
    initial: QuerySet,
    rank_n: usize,
    target_true: usize,
    mut oracle: impl FnMut(VoxelCoord) -> bool,
    t: f64,
    k: usize,
) -> Result<WorkflowOutcome> {
    if rank_n == 0 || rank_n > k {
        return Err(Error::InvalidArgument(format!(
            "rank N must be in 1..={k}, got {rank_n}"
        )));
    }
    let mut queries = initial;
    let mut labeled: HashSet<VoxelCoord> = queries.members().iter().filter_map(|m| m.source).collect();
    let mut labels = Vec::new();
    let mut true_found = 0;
    while true_found < target_true {
        let ranking = run_query(space, &queries, t, k)?;
        let mut advanced = false;
        while let Some(p) = next_unlabeled(&ranking, rank_n, &labeled) {
            let c = p.coord;
            labeled.insert(c);
            let verdict = oracle(c);
            labels.push((c, verdict));
            if verdict {
                let repr = space
                    .representation_at(c)
                    .ok_or_else(|| Error::NoRecord(format!("no representation stored at {c}")))?;
                queries.push(Some(c), repr)?;
                true_found += 1;
                advanced = true;
                break;
            }
        }
        if !advanced {
            return Err(Error::Exhausted {
                labels_used: labels.len(),
                found: true_found,
                target: target_true,
            });
        }
    }
    Ok(WorkflowOutcome {
        queries,
        labels_used: labels.len(),
        true_found,
        labels,
    })
}

/// K-means clustering and its agreement with known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Accuracy under the best one-to-one cluster/class pairing.
    pub purity: f64,
}

pub const KMEANS_MAX_ITERATIONS: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(v: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm from a seeded farthest-first start: a random first
/// centroid, then repeatedly the point farthest from all chosen centroids.
/// Assignment ties go to the lowest centroid index; an empty cluster keeps
/// its previous centroid.
pub fn kmeans_purity(vectors: &[Vec<f64>], classes: &[usize], k: usize, seed: u64) -> Result<ClusterReport> {
    if k < 2 || vectors.len() < k {
        return Err(Error::InvalidArgument(format!(
            "need K >= 2 and at least K vectors, got K={k} with {} vectors",
            vectors.len()
        )));
    }
    if k > 10 {
        return Err(Error::InvalidArgument("purity matching supports K <= 10".into()));
    }
    if classes.len() != vectors.len() {
        return Err(Error::InvalidArgument("one class label per vector required".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::InvalidArgument("vectors differ in dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![vectors[rng.random_range(0..vectors.len())].clone()];
    let mut min_d: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for i in 1..vectors.len() {
            if min_d[i] > min_d[far] {
                far = i;
            }
        }
        centroids.push(vectors[far].clone());
        for (d, v) in min_d.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &centroids[centroids.len() - 1]));
        }
    }
    let mut assignment: Vec<usize> = vectors.iter().map(|v| nearest_centroid(v, &centroids)).collect();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (v, &a) in vectors.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = vectors.iter().map(|v| nearest_centroid(v, &centroids)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
    }

    let class_ids: Vec<usize> = {
        let mut c = classes.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut table = vec![vec![0usize; class_ids.len()]; k];
    for (&a, cls) in assignment.iter().zip(classes) {
        let j = class_ids.binary_search(cls).expect("class listed");
        table[a][j] += 1;
    }
    fn best(cluster: usize, table: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if cluster == table.len() {
            return 0;
        }
        let mut top = best(cluster + 1, table, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                top = top.max(table[cluster][j] + best(cluster + 1, table, used));
                used[j] = false;
            }
        }
        top
    }
    let correct = best(0, &table, &mut vec![false; class_ids.len()]);
    Ok(ClusterReport {
        assignment,
        centroids,
        iterations,
        purity: correct as f64 / vectors.len() as f64,
    })
}

/// Writes `name value` lines.
pub fn write_metrics(path: &Path, metrics: &[(String, f64)]) -> Result<()> {
    let mut text = String::new();
    for (name, value) in metrics {
        text.push_str(&format!("{name} {value}\n"));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`write_metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (name, value) = l
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("metrics line {l:?} lacks a value")))?;
            let v = value
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("metrics line {l:?}: {e}")))?;
            Ok((name.to_string(), v))
        })
        .collect()
}

/// CSV with a `rank` column followed by one column per named curve.
pub fn write_curves_csv(path: &Path, curves: &[(&str, &[f64])]) -> Result<()> {
    let mut out = Vec::new();
    let len = curves.iter().map(|c| c.1.len()).max().unwrap_or(0);
    let header: Vec<&str> = std::iter::once("rank").chain(curves.iter().map(|c| c.0)).collect();
    writeln!(out, "{}", header.join(",")).expect("vec write");
    for i in 0..len {
        let mut row = vec![(i + 1).to_string()];
        for (_, c) in curves {
            row.push(c.get(i).map(|v| format!("{v:.6}")).unwrap_or_default());
        }
        writeln!(out, "{}", row.join(",")).expect("vec write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
