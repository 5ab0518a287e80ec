//! Spatially sharded persistence of signature records.
//!
//! The volume is cut into cubic chunks of `shard_size` voxels per axis. Each
//! chunk's records live in one object named after the chunk coordinate
//! (`sig_<kx>_<ky>_<kz>.shard`), so a plain key-value object store can serve
//! the files unchanged. Records sit on a stride grid anchored at `origin`.
//!
//! Capacity arithmetic: at a stride of 100 voxels per axis a peta-voxel
//! volume needs 10^9 signatures, i.e. 8 GB of raw 64-bit codes (see
//! [`storage_estimate`]).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigcore::{read_record, write_record, SignatureRecord, VoxelCoord, RECORD_BYTES};

pub const SHARD_MAGIC: &[u8; 4] = b"SIGS";
pub const SHARD_VERSION: u8 = 0x01;
pub const MANIFEST_NAME: &str = "store.json";
pub const DEFAULT_MAX_DUPLICATES: usize = 16;

/// Layout parameters of a store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreConfig {
    /// Voxels per shard along each axis.
    pub shard_size: u32,
    /// Voxels between neighboring signature sites.
    pub stride: u32,
    /// First site along each axis; sites are `origin + k * stride`.
    pub origin: [u32; 3],
    /// Volume extent `[x, y, z]`.
    pub extent: [u32; 3],
    /// Cap on how many records may share one signature value.
    pub max_duplicates: usize,
}

impl StoreConfig {
    pub fn new(shard_size: u32, stride: u32, extent: [u32; 3]) -> Self {
        StoreConfig {
            shard_size,
            stride,
            origin: [0; 3],
            extent,
            max_duplicates: DEFAULT_MAX_DUPLICATES,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.shard_size < self.stride {
            return Err(Error::InvalidArgument(format!(
                "need shard_size >= stride >= 1, got shard_size {} and stride {}",
                self.shard_size, self.stride
            )));
        }
        if self.max_duplicates == 0 {
            return Err(Error::InvalidArgument("max_duplicates must be at least 1".into()));
        }
        Ok(())
    }

    pub fn shard_key(&self, c: VoxelCoord) -> [u32; 3] {
        [c.x / self.shard_size, c.y / self.shard_size, c.z / self.shard_size]
    }

    fn is_aligned(&self, c: VoxelCoord) -> bool {
        c.as_array()
            .iter()
            .zip(self.origin)
            .all(|(&v, o)| v >= o && (v - o) % self.stride == 0)
    }
}

/// Result of a coordinate look-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteLookup {
    pub record: SignatureRecord,
    /// Euclidean distance from the probe to the returned site.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardedStore {
    config: StoreConfig,
    shards: BTreeMap<[u32; 3], Vec<SignatureRecord>>,
    len: usize,
}

impl ShardedStore {
    /// Builds a store from a record stream.
    ///
    /// Records must lie on the stride grid inside the extent. Repeated
    /// identical records collapse to one; two different signatures at one
    /// coordinate are rejected. When more than `max_duplicates` records share
    /// a signature, the ones with the lowest coordinates are kept.
    pub fn ingest(records: impl IntoIterator<Item = SignatureRecord>, config: StoreConfig) -> Result<Self> {
        config.validate()?;
        let mut all: Vec<SignatureRecord> = Vec::new();
        for r in records {
            if !config.is_aligned(r.coord) {
                return Err(Error::Format(format!(
                    "record at {} with signature {} is not aligned to stride {} from origin {:?}",
                    r.coord, r.sig, config.stride, config.origin
                )));
            }
            if !r.coord.within(config.extent) {
                return Err(Error::Format(format!(
                    "record at {} lies outside extent {:?}",
                    r.coord, config.extent
                )));
            }
            all.push(r);
        }
        all.sort_by_key(|r| (r.coord, r.sig));
        all.dedup();
        if let Some(w) = all.windows(2).find(|w| w[0].coord == w[1].coord) {
            return Err(Error::Format(format!(
                "conflicting signatures {} and {} at {}",
                w[0].sig, w[1].sig, w[0].coord
            )));
        }

        let mut seen: HashMap<u64, usize> = HashMap::new();
        let mut shards: BTreeMap<[u32; 3], Vec<SignatureRecord>> = BTreeMap::new();
        let mut len = 0;
        for r in all {
            let count = seen.entry(r.sig.0).or_insert(0);
            if *count >= config.max_duplicates {
                continue;
            }
            *count += 1;
            shards.entry(config.shard_key(r.coord)).or_default().push(r);
            len += 1;
        }
        Ok(ShardedStore { config, shards, len })
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn extent(&self) -> [u32; 3] {
        self.config.extent
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, key: [u32; 3]) -> Option<&[SignatureRecord]> {
        self.shards.get(&key).map(Vec::as_slice)
    }

    pub fn shard_keys(&self) -> impl Iterator<Item = [u32; 3]> + '_ {
        self.shards.keys().copied()
    }

    /// All records, shard by shard in key order.
    pub fn records(&self) -> impl Iterator<Item = &SignatureRecord> + '_ {
        self.shards.values().flatten()
    }

    /// The record stored exactly at `c`, if any.
    pub fn get_exact(&self, c: VoxelCoord) -> Option<SignatureRecord> {
        let shard = self.shards.get(&self.config.shard_key(c))?;
        shard.binary_search_by_key(&c, |r| r.coord).ok().map(|i| shard[i])
    }

    /// The site nearest to `p` (Euclidean, ties to the lowest coordinate).
    ///
    /// Starts from `p`'s own shard and widens to surrounding shells of shards
    /// only while an unexamined shard could still hold a closer site. Probes
    /// far from any site still get the nearest one, with its distance.
    pub fn lookup_signature(&self, p: VoxelCoord) -> Result<SiteLookup> {
        if !p.within(self.config.extent) {
            return Err(Error::OutOfBounds {
                x: p.x,
                y: p.y,
                z: p.z,
                extent: self.config.extent,
            });
        }
        if self.shards.is_empty() {
            return Err(Error::NoRecord("the store holds no records".into()));
        }
        let size = self.config.shard_size as i64;
        let home = self.config.shard_key(p).map(i64::from);
        let pos = p.as_array().map(i64::from);
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for key in self.shards.keys() {
            for a in 0..3 {
                lo[a] = lo[a].min(key[a] as i64);
                hi[a] = hi[a].max(key[a] as i64);
            }
        }

        let mut best: Option<(u64, SignatureRecord)> = None;
        let mut radius = 0i64;
        loop {
            let from: [i64; 3] = std::array::from_fn(|a| (home[a] - radius).max(lo[a]));
            let to: [i64; 3] = std::array::from_fn(|a| (home[a] + radius).min(hi[a]));
            for kx in from[0]..=to[0] {
                for ky in from[1]..=to[1] {
                    for kz in from[2]..=to[2] {
                        let key = [kx, ky, kz];
                        let ring = (0..3).map(|a| (key[a] - home[a]).abs()).max().unwrap();
                        if ring != radius {
                            continue;
                        }
                        let Some(shard) = self.shards.get(&key.map(|k| k as u32)) else {
                            continue;
                        };
                        for r in shard {
                            let d = p.squared_distance(r.coord);
                            let better = match best {
                                None => true,
                                Some((bd, br)) => d < bd || (d == bd && r.coord < br.coord),
                            };
                            if better {
                                best = Some((d, *r));
                            }
                        }
                    }
                }
            }

            // Smallest possible distance to a site in a shard outside the examined cube.
            let mut gap = i64::MAX;
            for a in 0..3 {
                if home[a] + radius < hi[a] {
                    gap = gap.min((home[a] + radius + 1) * size - pos[a]);
                }
                if home[a] - radius > lo[a] {
                    gap = gap.min(pos[a] - (home[a] - radius) * size + 1);
                }
            }
            if gap == i64::MAX {
                break;
            }
            if let Some((d, _)) = best {
                if (d as i128) < (gap as i128) * (gap as i128) {
                    break;
                }
            }
            radius += 1;
        }

        let (d, record) = best.expect("a non-empty store yields a nearest site");
        Ok(SiteLookup {
            record,
            distance: (d as f64).sqrt(),
        })
    }

    /// Writes the manifest and one file per shard into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&manifest, json + "\n").map_err(|e| Error::io(&manifest, e))?;
        for (key, records) in &self.shards {
            let path = dir.join(shard_file_name(*key));
            let mut buf = Vec::with_capacity(17 + records.len() * RECORD_BYTES);
            write_shard(&mut buf, self.config.shard_size, records).expect("Vec write");
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let config: StoreConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad store manifest {}: {e}", manifest.display())))?;
        config.validate().map_err(|e| Error::Format(e.to_string()))?;

        let mut shards = BTreeMap::new();
        let mut len = 0;
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name();
            let Some(key) = name.to_str().and_then(parse_shard_file_name) else {
                continue;
            };
            let path = entry.path();
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let (shard_size, records) =
                read_shard(&mut bytes.as_slice()).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            if shard_size != config.shard_size {
                return Err(Error::Format(format!(
                    "{}: shard size {shard_size} disagrees with manifest {}",
                    path.display(),
                    config.shard_size
                )));
            }
            if let Some(r) = records.iter().find(|r| config.shard_key(r.coord) != key) {
                return Err(Error::Format(format!(
                    "{}: record at {} does not belong to shard {key:?}",
                    path.display(),
                    r.coord
                )));
            }
            len += records.len();
            shards.insert(key, records);
        }
        Ok(ShardedStore { config, shards, len })
    }
}

pub fn shard_file_name(key: [u32; 3]) -> String {
    format!("sig_{}_{}_{}.shard", key[0], key[1], key[2])
}

pub fn parse_shard_file_name(name: &str) -> Option<[u32; 3]> {
    let inner = name.strip_prefix("sig_")?.strip_suffix(".shard")?;
    let mut parts = inner.split('_').map(|s| s.parse::<u32>().ok());
    let key = [parts.next()??, parts.next()??, parts.next()??];
    parts.next().is_none().then_some(key)
}

/// Shard layout: magic, version, shard size, record count, then records sorted by coordinate.
pub fn write_shard<W: Write>(w: &mut W, shard_size: u32, records: &[SignatureRecord]) -> std::io::Result<()> {
    w.write_all(SHARD_MAGIC)?;
    w.write_all(&[SHARD_VERSION])?;
    w.write_all(&shard_size.to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        write_record(w, r)?;
    }
    Ok(())
}

pub fn read_shard<R: Read>(r: &mut R) -> Result<(u32, Vec<SignatureRecord>)> {
    let trunc = |e: std::io::Error| Error::Format(format!("truncated shard: {e}"));
    let mut header = [0u8; 17];
    r.read_exact(&mut header).map_err(trunc)?;
    if &header[0..4] != SHARD_MAGIC {
        return Err(Error::Format("shard does not start with SIGS".into()));
    }
    if header[4] != SHARD_VERSION {
        return Err(Error::Format(format!("unsupported shard version {}", header[4])));
    }
    let shard_size = u32::from_le_bytes(header[5..9].try_into().unwrap());
    let count = u64::from_le_bytes(header[9..17].try_into().unwrap());
    let mut records = Vec::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        records.push(read_record(r).map_err(trunc)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(trunc)? != 0 {
        return Err(Error::Format("trailing bytes after shard records".into()));
    }
    if records.windows(2).any(|w| w[0].coord >= w[1].coord) {
        return Err(Error::Format("shard records are not sorted by coordinate".into()));
    }
    Ok((shard_size, records))
}

/// Writes an unsharded record collection (shard size field 0) in shard layout.
pub fn write_record_file(path: &Path, records: &[SignatureRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| r.coord);
    let mut buf = Vec::with_capacity(17 + sorted.len() * RECORD_BYTES);
    write_shard(&mut buf, 0, &sorted).expect("Vec write");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_record_file(path: &Path) -> Result<Vec<SignatureRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_shard(&mut bytes.as_slice())
        .map(|(_, r)| r)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Storage cost of a record collection under the two layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StorageEstimate {
    /// Raw 64-bit signatures only.
    pub signature_bytes: u64,
    /// Coordinate look-up layout: three 4-byte coordinates plus the signature.
    pub lookup_bytes: u64,
    /// Hash-table layout: 4 tables x 5 fields x 8 bytes per record.
    pub hash_table_bytes: u64,
}

pub fn storage_estimate(record_count: u64) -> StorageEstimate {
    StorageEstimate {
        signature_bytes: 8 * record_count,
        lookup_bytes: 20 * record_count,
        hash_table_bytes: 4 * 5 * 8 * record_count,
    }
}

/// Directory helper: path of the shard file for `key` under `dir`.
pub fn shard_path(dir: &Path, key: [u32; 3]) -> PathBuf {
    dir.join(shard_file_name(key))
}
