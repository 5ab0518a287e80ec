//! Fixed-width binary signatures, Hamming arithmetic and bit-partition masks.
//!
//! Bit position `i` of a [`Signature`] is `(bits >> i) & 1`. A
//! [`PartitionMask`] assigns every bit position to one of `N` disjoint
//! partitions; sub-signatures are formed by gathering a partition's bits in
//! ascending position order, the lowest position landing in bit 0 of the
//! extract.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Width of every signature, in bits.
pub const SIGNATURE_BITS: usize = 64;

/// A 64-bit binary code summarizing one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Signature(pub u64);

impl Signature {
    #[inline]
    pub fn bits(self) -> u64 {
        self.0
    }

    #[inline]
    pub fn bit(self, position: usize) -> bool {
        (self.0 >> position) & 1 == 1
    }

    /// Packs a ±1 code (e.g. a binarized embedding) into a signature.
    ///
    /// Component 0 becomes the most significant bit; non-negative values map
    /// to 1 and negative values to 0.
    pub fn from_signs(values: &[f64]) -> Result<Self> {
        if values.len() != SIGNATURE_BITS {
            return Err(Error::InvalidArgument(format!(
                "signature packing needs {SIGNATURE_BITS} components, got {}",
                values.len()
            )));
        }
        let mut bits = 0u64;
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                bits |= 1u64 << (SIGNATURE_BITS - 1 - i);
            }
        }
        Ok(Signature(bits))
    }

    /// Inverse of [`Signature::from_signs`]: a ±1 vector, most significant bit first.
    pub fn to_signs(self) -> Vec<f64> {
        (0..SIGNATURE_BITS)
            .map(|i| if self.bit(SIGNATURE_BITS - 1 - i) { 1.0 } else { -1.0 })
            .collect()
    }
}

/// Number of differing bit positions.
#[inline]
pub fn hamming(a: Signature, b: Signature) -> u32 {
    (a.0 ^ b.0).count_ones()
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for Signature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Format(format!("signature must be 16 hex characters, got {s:?}")));
        }
        u64::from_str_radix(s, 16)
            .map(Signature)
            .map_err(|e| Error::Format(format!("bad signature {s:?}: {e}")))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Voxel position. Ordering is lexicographic on `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VoxelCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        VoxelCoord { x, y, z }
    }

    pub fn as_array(self) -> [u32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn squared_distance(self, other: VoxelCoord) -> u64 {
        let d = |a: u32, b: u32| {
            let v = a.abs_diff(b) as u64;
            v * v
        };
        d(self.x, other.x) + d(self.y, other.y) + d(self.z, other.z)
    }

    pub fn distance(self, other: VoxelCoord) -> f64 {
        (self.squared_distance(other) as f64).sqrt()
    }

    pub fn within(self, extent: [u32; 3]) -> bool {
        self.x < extent[0] && self.y < extent[1] && self.z < extent[2]
    }
}

impl fmt::Display for VoxelCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// One row of the mined volume representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignatureRecord {
    pub coord: VoxelCoord,
    pub sig: Signature,
}

impl SignatureRecord {
    pub const fn new(coord: VoxelCoord, sig: Signature) -> Self {
        SignatureRecord { coord, sig }
    }
}

/// Encoded size of one record: three `u32` coordinates and a `u64` signature.
pub const RECORD_BYTES: usize = 20;

pub(crate) fn write_record<W: Write>(w: &mut W, r: &SignatureRecord) -> std::io::Result<()> {
    let mut buf = [0u8; RECORD_BYTES];
    buf[0..4].copy_from_slice(&r.coord.x.to_le_bytes());
    buf[4..8].copy_from_slice(&r.coord.y.to_le_bytes());
    buf[8..12].copy_from_slice(&r.coord.z.to_le_bytes());
    buf[12..20].copy_from_slice(&r.sig.0.to_le_bytes());
    w.write_all(&buf)
}

pub(crate) fn read_record<R: Read>(r: &mut R) -> std::io::Result<SignatureRecord> {
    let mut buf = [0u8; RECORD_BYTES];
    r.read_exact(&mut buf)?;
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    Ok(SignatureRecord {
        coord: VoxelCoord::new(u32_at(0), u32_at(4), u32_at(8)),
        sig: Signature(u64::from_le_bytes(buf[12..20].try_into().unwrap())),
    })
}

/// Assignment of each bit position to one of `N` disjoint partitions.
///
/// Partitions are equal-sized up to one bit; when `N` does not divide the
/// width, the lower-numbered partitions hold the extra bit. Seeded masks
/// shuffle this template with a [`ChaCha8Rng`] seeded through
/// `SeedableRng::seed_from_u64`, using a Fisher-Yates shuffle, so a seed
/// identifies the same mask on every platform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMask {
    assignment: Vec<u8>,
    partition_count: usize,
    positions: Vec<Vec<u8>>,
    bitmasks: Vec<u64>,
}

impl PartitionMask {
    /// The unshuffled equal-partition template, e.g. `11223344` for 8 bits
    /// and 4 partitions (shown 1-based).
    pub fn template(bit_width: usize, partition_count: usize) -> Result<Self> {
        check_shape(bit_width, partition_count)?;
        Ok(Self::from_assignment_unchecked(
            template_assignment(bit_width, partition_count),
            partition_count,
        ))
    }

    /// Equal-partition template permuted by the seeded generator.
    pub fn seeded(bit_width: usize, partition_count: usize, seed: u64) -> Result<Self> {
        check_shape(bit_width, partition_count)?;
        let mut assignment = template_assignment(bit_width, partition_count);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assignment.shuffle(&mut rng);
        Ok(Self::from_assignment_unchecked(assignment, partition_count))
    }

    /// Builds a mask from an explicit zero-based assignment.
    ///
    /// The assignment must cover every partition id in `[0, partition_count)`
    /// with sizes differing by at most one.
    pub fn from_assignment(assignment: Vec<u8>, partition_count: usize) -> Result<Self> {
        check_shape(assignment.len(), partition_count)?;
        let mut sizes = vec![0usize; partition_count];
        for &p in &assignment {
            let p = p as usize;
            if p >= partition_count {
                return Err(Error::InvalidArgument(format!(
                    "partition id {p} out of range for {partition_count} partitions"
                )));
            }
            sizes[p] += 1;
        }
        let min = *sizes.iter().min().unwrap();
        let max = *sizes.iter().max().unwrap();
        if min == 0 || max - min > 1 {
            return Err(Error::InvalidArgument(format!(
                "partition sizes {sizes:?} are not an equal partitioning"
            )));
        }
        Ok(Self::from_assignment_unchecked(assignment, partition_count))
    }

    /// Parses the 1-based digit notation used in worked examples, e.g. `"11234234"`.
    pub fn from_digits(digits: &str) -> Result<Self> {
        let assignment = digits
            .chars()
            .map(|c| match c.to_digit(10) {
                Some(d) if d >= 1 => Ok((d - 1) as u8),
                _ => Err(Error::InvalidArgument(format!("bad partition digit {c:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let n = assignment.iter().copied().max().map_or(0, |m| m as usize + 1);
        Self::from_assignment(assignment, n)
    }

    fn from_assignment_unchecked(assignment: Vec<u8>, partition_count: usize) -> Self {
        let mut positions = vec![Vec::new(); partition_count];
        let mut bitmasks = vec![0u64; partition_count];
        for (bit, &p) in assignment.iter().enumerate() {
            positions[p as usize].push(bit as u8);
            bitmasks[p as usize] |= 1u64 << bit;
        }
        PartitionMask {
            assignment,
            partition_count,
            positions,
            bitmasks,
        }
    }

    pub fn bit_width(&self) -> usize {
        self.assignment.len()
    }

    pub fn partition_count(&self) -> usize {
        self.partition_count
    }

    pub fn assignment(&self) -> &[u8] {
        &self.assignment
    }

    /// Bit positions owned by `partition`, ascending.
    pub fn positions(&self, partition: usize) -> &[u8] {
        &self.positions[partition]
    }

    /// Bit positions owned by `partition`, as a 64-bit mask.
    pub fn bitmask(&self, partition: usize) -> u64 {
        self.bitmasks[partition]
    }

    pub fn partition_width(&self, partition: usize) -> usize {
        self.positions[partition].len()
    }

    /// The partition's bits of `sig`, gathered in ascending position order.
    pub fn extract(&self, sig: Signature, partition: usize) -> Result<u64> {
        if partition >= self.partition_count {
            return Err(Error::InvalidArgument(format!(
                "partition {partition} out of range for {} partitions",
                self.partition_count
            )));
        }
        Ok(self.extract_unchecked(sig, partition))
    }

    #[inline]
    pub(crate) fn extract_unchecked(&self, sig: Signature, partition: usize) -> u64 {
        let mut src = sig.0 & self.bitmasks[partition];
        if src == 0 {
            return 0;
        }
        let mut out = 0u64;
        let mut j = 0;
        for &pos in &self.positions[partition] {
            out |= ((src >> pos) & 1) << j;
            src &= !(1u64 << pos);
            if src == 0 {
                break;
            }
            j += 1;
        }
        out
    }

    /// 1-based digit rendering (`11223344`), only meaningful for fewer than 10 partitions.
    pub fn to_digits(&self) -> String {
        self.assignment
            .iter()
            .map(|&p| char::from_digit(p as u32 + 1, 36).unwrap_or('?'))
            .collect()
    }
}

fn check_shape(bit_width: usize, partition_count: usize) -> Result<()> {
    if bit_width == 0 || bit_width > SIGNATURE_BITS {
        return Err(Error::InvalidArgument(format!(
            "bit width must be in 1..={SIGNATURE_BITS}, got {bit_width}"
        )));
    }
    if partition_count == 0 || partition_count > bit_width {
        return Err(Error::InvalidArgument(format!(
            "partition count must be in 1..={bit_width}, got {partition_count}"
        )));
    }
    Ok(())
}

pub(crate) fn template_assignment(bit_width: usize, partition_count: usize) -> Vec<u8> {
    let base = bit_width / partition_count;
    let extra = bit_width % partition_count;
    let mut assignment = Vec::with_capacity(bit_width);
    for p in 0..partition_count {
        let size = base + usize::from(p < extra);
        assignment.extend(std::iter::repeat_n(p as u8, size));
    }
    assignment
}

/// Convenience wrapper mirroring [`PartitionMask::seeded`].
pub fn make_partition_mask(bit_width: usize, partition_count: usize, seed: u64) -> Result<PartitionMask> {
    PartitionMask::seeded(bit_width, partition_count, seed)
}

/// Convenience wrapper mirroring [`PartitionMask::extract`].
pub fn extract_subsignature(sig: Signature, mask: &PartitionMask, partition: usize) -> Result<u64> {
    mask.extract(sig, partition)
}
