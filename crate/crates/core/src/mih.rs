//! Multi-index hashing over signature records.
//!
//! Every signature is split into `N` disjoint sub-signatures by a seeded
//! [`PartitionMask`]; one hash table per partition maps a sub-signature to
//! the records carrying it. Any record within Hamming distance `N - 1` of a
//! query agrees with it exactly on at least one partition, so `N` look-ups
//! followed by full-signature verification find all of them. Collisions at
//! larger distances are returned too, verified but without any completeness
//! guarantee: [`MihIndex::query_topk`] is exact only up to distance `N - 1`
//! and best-effort beyond.
//!
//! The expected number of candidates scanned per query on uniformly
//! distributed signatures is `N * |S| / 2^(64 / N)` (see
//! [`expected_scan_count`]). Note that this gives about 3.1% of the
//! collection for `N = 8`, the smallest `N` that covers every match within
//! seven bits; no integer `N` yields the 12.5% figure sometimes quoted for
//! that radius.

use std::collections::HashMap;
use std::hash::{BuildHasherDefault, Hasher};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sigcore::{
    hamming, read_record, template_assignment, write_record, PartitionMask, Signature, SignatureRecord, SIGNATURE_BITS,
};

pub const INDEX_MAGIC: &[u8; 4] = b"MIH1";

/// Stand-in for the number of storage partitions each table is split into.
pub const DEFAULT_BUCKET_COUNT: usize = 4000;

/// Multiplicative hasher for already well-mixed `u64` keys.
#[derive(Default, Clone, Copy)]
pub struct SubsigHasher(u64);

impl Hasher for SubsigHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0.rotate_left(8) ^ b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = splitmix64(v ^ self.0);
    }
}

type SubsigMap<V> = HashMap<u64, V, BuildHasherDefault<SubsigHasher>>;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One hash table: sub-signature -> contiguous run of record ids in `ids`,
/// spread over `bucket_count` buckets.
#[derive(Debug, Clone)]
struct Table {
    buckets: Vec<SubsigMap<Range<u32>>>,
    ids: Vec<u32>,
}

impl Table {
    fn bucket_of(key: u64, bucket_count: usize) -> usize {
        (splitmix64(key ^ 0xA076_1D64_78BD_642F) % bucket_count as u64) as usize
    }

    fn get(&self, key: u64) -> &[u32] {
        let bucket = &self.buckets[Self::bucket_of(key, self.buckets.len())];
        match bucket.get(&key) {
            Some(r) => &self.ids[r.start as usize..r.end as usize],
            None => &[],
        }
    }
}

/// A verified match.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryResult {
    pub record: SignatureRecord,
    /// Full-signature Hamming distance to the query.
    pub distance: u32,
}

#[derive(Debug, Clone)]
pub struct MihIndex {
    mask: PartitionMask,
    seed: u64,
    records: Vec<SignatureRecord>,
    tables: Vec<Table>,
}

impl MihIndex {
    pub fn build(records: Vec<SignatureRecord>, partition_count: usize, seed: u64) -> Result<Self> {
        Self::build_with_buckets(records, partition_count, seed, DEFAULT_BUCKET_COUNT)
    }

    pub fn build_with_buckets(
        records: Vec<SignatureRecord>,
        partition_count: usize,
        seed: u64,
        bucket_count: usize,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty record collection".into()));
        }
        if records.len() > u32::MAX as usize {
            return Err(Error::InvalidArgument("too many records for one index".into()));
        }
        if bucket_count == 0 {
            return Err(Error::InvalidArgument("bucket count must be positive".into()));
        }
        let mask = PartitionMask::seeded(SIGNATURE_BITS, partition_count, seed)?;

        let tables = (0..partition_count)
            .map(|p| {
                let mut keyed: Vec<(u64, u32)> = records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (mask.extract_unchecked(r.sig, p), i as u32))
                    .collect();
                keyed.sort_unstable();
                let mut buckets: Vec<SubsigMap<Range<u32>>> = vec![SubsigMap::default(); bucket_count];
                let mut start = 0;
                while start < keyed.len() {
                    let key = keyed[start].0;
                    let mut end = start + 1;
                    while end < keyed.len() && keyed[end].0 == key {
                        end += 1;
                    }
                    buckets[Table::bucket_of(key, bucket_count)].insert(key, start as u32..end as u32);
                    start = end;
                }
                Table {
                    buckets,
                    ids: keyed.into_iter().map(|(_, i)| i).collect(),
                }
            })
            .collect();

        Ok(MihIndex {
            mask,
            seed,
            records,
            tables,
        })
    }

    pub fn mask(&self) -> &PartitionMask {
        &self.mask
    }

    pub fn partition_count(&self) -> usize {
        self.mask.partition_count()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn records(&self) -> &[SignatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn bucket_count(&self) -> usize {
        self.tables[0].buckets.len()
    }

    /// Number of entries stored in each table.
    pub fn table_sizes(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.ids.len()).collect()
    }

    /// Record ids stored under `key` in table `partition`.
    pub fn table_entries(&self, partition: usize, key: u64) -> &[u32] {
        self.tables[partition].get(key)
    }

    /// Records per storage bucket of table `partition`.
    pub fn bucket_occupancy(&self, partition: usize) -> Vec<usize> {
        self.tables[partition]
            .buckets
            .iter()
            .map(|b| b.values().map(|r| (r.end - r.start) as usize).sum())
            .collect()
    }

    /// Calls `f` once per record colliding with `q` in at least one table.
    ///
    /// A record reached through table `p` is skipped when it already agreed
    /// with `q` on an earlier partition, so each record id is visited once.
    pub fn for_each_candidate(&self, q: Signature, mut f: impl FnMut(usize)) {
        for (p, table) in self.tables.iter().enumerate() {
            let key = self.mask.extract_unchecked(q, p);
            for &id in table.get(key) {
                let sig = self.records[id as usize].sig;
                let diff = sig.0 ^ q.0;
                let seen = (0..p).any(|earlier| diff & self.mask.bitmask(earlier) == 0);
                if !seen {
                    f(id as usize);
                }
            }
        }
    }

    /// Number of distinct records that would be verified for `q`.
    pub fn candidate_count(&self, q: Signature) -> usize {
        let mut n = 0;
        self.for_each_candidate(q, |_| n += 1);
        n
    }

    /// Ids of all distinct colliding records, ascending.
    pub fn candidate_ids(&self, q: Signature) -> Vec<usize> {
        let mut ids = Vec::new();
        self.for_each_candidate(q, |id| ids.push(id));
        ids.sort_unstable();
        ids
    }

    /// All colliding records with verified distances, sorted by distance then coordinate.
    pub fn query_candidates(&self, q: Signature) -> Vec<QueryResult> {
        let mut out = Vec::new();
        self.for_each_candidate(q, |id| {
            let record = self.records[id];
            out.push(QueryResult {
                record,
                distance: hamming(q, record.sig),
            });
        });
        sort_results(&mut out);
        out
    }

    /// Exactly the records within `radius` of `q`. Requires `radius < N`.
    pub fn query_within(&self, q: Signature, radius: u32) -> Result<Vec<QueryResult>> {
        if radius as usize >= self.partition_count() {
            return Err(Error::Contract(format!(
                "radius {radius} is not below the partition count {}; completeness is not guaranteed",
                self.partition_count()
            )));
        }
        let mut out = Vec::new();
        self.for_each_candidate(q, |id| {
            let record = self.records[id];
            let distance = hamming(q, record.sig);
            if distance <= radius {
                out.push(QueryResult { record, distance });
            }
        });
        sort_results(&mut out);
        Ok(out)
    }

    /// The `k` closest colliding records.
    pub fn query_topk(&self, q: Signature, k: usize) -> Result<Vec<QueryResult>> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut out = self.query_candidates(q);
        out.truncate(k);
        Ok(out)
    }

    /// Serializes the header and records; tables are rebuilt on load.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&[SIGNATURE_BITS as u8, self.partition_count() as u8])?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            write_record(&mut w, r)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(22 + self.records.len() * 20);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R, bucket_count: usize) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated index: {e}"));
        let mut header = [0u8; 22];
        r.read_exact(&mut header).map_err(fmt)?;
        if &header[0..4] != INDEX_MAGIC {
            return Err(Error::Format("index file does not start with MIH1".into()));
        }
        let width = header[4] as usize;
        if width != SIGNATURE_BITS {
            return Err(Error::Format(format!("unsupported signature width {width}")));
        }
        let n = header[5] as usize;
        let seed = u64::from_le_bytes(header[6..14].try_into().unwrap());
        let count = u64::from_le_bytes(header[14..22].try_into().unwrap());
        let mut records = Vec::with_capacity(count.min(1 << 24) as usize);
        for _ in 0..count {
            records.push(read_record(&mut r).map_err(fmt)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(fmt)? != 0 {
            return Err(Error::Format("trailing bytes after index records".into()));
        }
        Self::build_with_buckets(records, n, seed, bucket_count).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Format(m),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, bucket_count: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file), bucket_count)
    }
}

pub(crate) fn sort_results(results: &mut [QueryResult]) {
    results.sort_by(|a, b| {
        a.distance
            .cmp(&b.distance)
            .then(a.record.coord.cmp(&b.record.coord))
            .then(a.record.sig.cmp(&b.record.sig))
    });
}

/// Expected number of candidates scanned per query, `N * |S| / 2^(64 / N)`,
/// assuming uniformly distributed signatures.
///
/// Only defined for `N` dividing 64. For other `N` the partitions have
/// widths `floor(64/N)` and `floor(64/N) + 1` and the expectation becomes
/// `|S| * sum_p 2^(-width_p)`; see [`expected_scan_count_general`].
pub fn expected_scan_count(partition_count: usize, collection_size: u64) -> Result<f64> {
    if partition_count == 0 || partition_count > SIGNATURE_BITS || SIGNATURE_BITS % partition_count != 0 {
        return Err(Error::InvalidArgument(format!(
            "scan-cost estimate needs a partition count dividing {SIGNATURE_BITS}, got {partition_count}"
        )));
    }
    let width = (SIGNATURE_BITS / partition_count) as i32;
    Ok(partition_count as f64 * collection_size as f64 / 2f64.powi(width))
}

/// Fraction of the collection scanned per query, `N / 2^(64 / N)`.
pub fn expected_scan_fraction(partition_count: usize) -> Result<f64> {
    expected_scan_count(partition_count, 1)
}

/// Scan-cost expectation for any partition count (unequal widths allowed).
pub fn expected_scan_count_general(partition_count: usize, collection_size: u64) -> Result<f64> {
    let template = PartitionMask::template(SIGNATURE_BITS, partition_count)?;
    let per_record: f64 = (0..partition_count)
        .map(|p| 2f64.powi(-(template.partition_width(p) as i32)))
        .sum();
    Ok(per_record * collection_size as f64)
}

/// Largest Hamming distance still matchable when bits are flipped in the
/// order given by `assignment`: the index of the first position by which
/// every partition id has appeared.
pub fn flip_tolerance(assignment: &[u8], partition_count: usize) -> usize {
    let mut seen = vec![false; partition_count];
    let mut remaining = partition_count;
    for (i, &p) in assignment.iter().enumerate() {
        let slot = &mut seen[p as usize];
        if !*slot {
            *slot = true;
            remaining -= 1;
            if remaining == 0 {
                return i;
            }
        }
    }
    assignment.len()
}

/// Recall as a function of Hamming distance, by simulation.
///
/// Each trial permutes the equal-partition mask; the permutation is the
/// order in which bits get flipped, and a match at distance `d` stays
/// findable while at least one partition is still untouched after `d`
/// flips. Entry `d` of the result is the fraction of trials tolerating
/// distance `d`, for `d` in `0..=bit_width`.
pub fn recall_simulation(partition_count: usize, bit_width: usize, trials: usize, seed: u64) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    PartitionMask::template(bit_width, partition_count)?;
    let mut assignment = template_assignment(bit_width, partition_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tolerance_counts = vec![0u64; bit_width + 1];
    for _ in 0..trials {
        assignment.shuffle(&mut rng);
        tolerance_counts[flip_tolerance(&assignment, partition_count)] += 1;
    }
    // recall(d) = P(tolerance >= d): suffix sums.
    let mut curve = vec![0.0; bit_width + 1];
    let mut at_least = 0u64;
    for d in (0..=bit_width).rev() {
        at_least += tolerance_counts[d];
        curve[d] = at_least as f64 / trials as f64;
    }
    Ok(curve)
}
