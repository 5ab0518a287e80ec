//! Synthetic volumes with planted motifs, patch extraction and encoding.
//!
//! Volumes are stored x-fastest. Patches are cut `[z][y][x]` and identified
//! by their center voxel: a patch of extent `s` along an axis starts at
//! `center - floor(s / 2)`. Extraction visits the grid of starts
//! `0, stride, 2 * stride, ...` that keep the whole patch inside the volume.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigcore::{Signature, SignatureRecord, VoxelCoord};
use crate::store::StoreConfig;
use crate::trainer::{EncoderModel, Patch, PatchSource};

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";

/// Parametric motif shapes. Sizes are in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum MotifShape {
    /// Slab lying along x or y, tilted by up to `max_tilt` degrees in the x/y
    /// plane. `radius` is the in-plane profile width and `depth` the one along z.
    Bar {
        length: f64,
        radius: f64,
        depth: f64,
        max_tilt: f64,
    },
    /// Spherical shell; a ring in every slice through its center.
    Ring { radius: f64, thickness: f64 },
    /// Gaussian ball.
    Blob { radius: f64 },
}

impl MotifShape {
    /// Largest distance from the center at which the motif is visible.
    fn reach(&self) -> f64 {
        match *self {
            MotifShape::Bar {
                length, radius, depth, ..
            } => length / 2.0 + 3.0 * radius.max(depth),
            MotifShape::Ring { radius, thickness } => radius + 3.0 * thickness,
            MotifShape::Blob { radius } => 3.0 * radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifClass {
    pub id: u32,
    pub shape: MotifShape,
    /// Peak intensity above background.
    pub intensity: f64,
    /// Relative size jitter; each instance is scaled by `1 ± size_jitter`.
    pub size_jitter: f64,
    /// Relative intensity jitter.
    pub intensity_jitter: f64,
}

impl MotifClass {
    pub fn bar(id: u32) -> Self {
        MotifClass {
            id,
            shape: MotifShape::Bar {
                length: 10.0,
                radius: 1.2,
                depth: 3.0,
                max_tilt: 15.0,
            },
            intensity: 0.6,
            size_jitter: 0.1,
            intensity_jitter: 0.1,
        }
    }

    pub fn ring(id: u32) -> Self {
        MotifClass {
            id,
            shape: MotifShape::Ring {
                radius: 4.5,
                thickness: 0.9,
            },
            intensity: 0.6,
            size_jitter: 0.1,
            intensity_jitter: 0.1,
        }
    }

    pub fn blob(id: u32) -> Self {
        MotifClass {
            id,
            shape: MotifShape::Blob { radius: 2.5 },
            intensity: 0.6,
            size_jitter: 0.1,
            intensity_jitter: 0.1,
        }
    }
}

/// A motif class and how many instances to plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class: MotifClass,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    /// `[x, y, z]` voxels.
    pub extent: [u32; 3],
    pub classes: Vec<ClassSpec>,
    /// Minimum Euclidean distance between any two sites.
    pub min_spacing: f64,
    /// Sites keep at least this many voxels from each face, per axis `[x, y, z]`.
    pub margin: [u32; 3],
    /// Sites are placed on multiples of this step (1 for anywhere).
    pub site_step: u32,
    pub background: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl VolumeSpec {
    pub fn new(extent: [u32; 3], classes: Vec<ClassSpec>, seed: u64) -> Self {
        VolumeSpec {
            extent,
            classes,
            min_spacing: 20.0,
            margin: [8; 3],
            site_step: 1,
            background: 0.2,
            noise_sigma: 0.05,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MotifSite {
    pub coord: VoxelCoord,
    pub class: u32,
}

impl fmt::Display for MotifSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.coord.x, self.coord.y, self.coord.z, self.class)
    }
}

impl FromStr for MotifSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("bad site line {s:?}: {e}")))?;
        match parts[..] {
            [x, y, z, class] => Ok(MotifSite {
                coord: VoxelCoord::new(x, y, z),
                class,
            }),
            _ => Err(Error::Format(format!("site line {s:?} needs four fields"))),
        }
    }
}

/// Intensity volume with its ground-truth motif sites.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVolume {
    dims: [u32; 3],
    data: Vec<f32>,
    pub sites: Vec<MotifSite>,
}

impl SyntheticVolume {
    pub fn new(dims: [u32; 3], data: Vec<f32>, sites: Vec<MotifSite>) -> Result<Self> {
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        if dims.contains(&0) || data.len() != n {
            return Err(Error::InvalidArgument(format!(
                "volume {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(SyntheticVolume { dims, data, sites })
    }

    pub fn filled(dims: [u32; 3], value: f32) -> Self {
        let n = dims.iter().map(|&d| d as usize).product();
        SyntheticVolume {
            dims,
            data: vec![value; n],
            sites: Vec::new(),
        }
    }

    /// `[x, y, z]` extent.
    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] as usize + y) * self.dims[0] as usize + x
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32, z: u32) -> f32 {
        self.data[self.offset(x as usize, y as usize, z as usize)]
    }

    /// Value at a signed position, or `None` outside the volume.
    pub fn get_signed(&self, x: i64, y: i64, z: i64) -> Option<f32> {
        let [dx, dy, dz] = self.dims.map(i64::from);
        if x < 0 || y < 0 || z < 0 || x >= dx || y >= dy || z >= dz {
            return None;
        }
        Some(self.data[self.offset(x as usize, y as usize, z as usize)])
    }

    /// The patch centered at `center` with `[z, y, x]` extent `shape`, if it
    /// lies fully inside the volume.
    pub fn patch_at(&self, center: VoxelCoord, shape: [usize; 3]) -> Option<Patch> {
        let c = [center.z as i64, center.y as i64, center.x as i64];
        let start: Vec<i64> = (0..3).map(|a| c[a] - (shape[a] / 2) as i64).collect();
        let dims = [self.dims[2] as i64, self.dims[1] as i64, self.dims[0] as i64];
        if (0..3).any(|a| start[a] < 0 || start[a] + shape[a] as i64 > dims[a]) {
            return None;
        }
        let (z0, y0, x0) = (start[0] as usize, start[1] as usize, start[2] as usize);
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                let row = self.offset(x0, y0 + y, z0 + z);
                data.extend(self.data[row..row + shape[2]].iter().map(|&v| v as f64));
            }
        }
        Some(Patch::new(shape, data).expect("finite volume data"))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(VOLUME_MAGIC)?;
        for d in self.dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated volume file: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != VOLUME_MAGIC {
            return Err(Error::Format("not a volume file (bad magic)".into()));
        }
        let mut dims = [0u32; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(fmt)?;
            *d = u32::from_le_bytes(b);
        }
        let n = dims.iter().map(|&d| d as usize).product::<usize>();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes).map_err(fmt)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("volume contains non-finite values".into()));
        }
        if r.read(&mut [0u8; 1]).map_err(fmt)? != 0 {
            return Err(Error::Format("trailing bytes after volume data".into()));
        }
        SyntheticVolume::new(dims, data, Vec::new()).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the volume to `path` and its sites to `<path>.sites`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))?;
        let sites = sites_path(path);
        let mut text = String::new();
        for s in &self.sites {
            text.push_str(&s.to_string());
            text.push('\n');
        }
        std::fs::write(&sites, text).map_err(|e| Error::io(&sites, e))
    }

    /// Reads a volume and, when present, its sites sidecar.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vol = Self::read_from(&mut BufReader::new(file))?;
        let sites = sites_path(path);
        if sites.exists() {
            vol.sites = read_sites(&sites)?;
        }
        Ok(vol)
    }

    /// FNV-1a over the little-endian volume bytes.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

pub fn sites_path(volume: &Path) -> PathBuf {
    let mut s = volume.as_os_str().to_owned();
    s.push(".sites");
    PathBuf::from(s)
}

pub fn read_sites(path: &Path) -> Result<Vec<MotifSite>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse()?);
    }
    Ok(out)
}

/// Plants one motif into `data` by max-blending over the background.
fn render_motif(vol: &mut SyntheticVolume, center: VoxelCoord, class: &MotifClass, rng: &mut ChaCha8Rng) {
    let scale = 1.0 + class.size_jitter * rng.random_range(-1.0..=1.0);
    let peak = class.intensity * (1.0 + class.intensity_jitter * rng.random_range(-1.0..=1.0));
    let shape = class.shape;
    let angle = match shape {
        MotifShape::Bar { max_tilt, .. } => {
            let base = if rng.random_bool(0.5) { 0.0 } else { 90.0 };
            (base + max_tilt * rng.random_range(-1.0..=1.0)).to_radians()
        }
        _ => 0.0,
    };
    let (ux, uy) = (angle.cos(), angle.sin());
    let reach = (shape.reach() * scale).ceil() as i64;
    let c = [center.x as i64, center.y as i64, center.z as i64];
    let profile = |dx: f64, dy: f64, dz: f64| -> f64 {
        match shape {
            MotifShape::Bar {
                length, radius, depth, ..
            } => {
                let (half, r, h) = (length * scale / 2.0, radius * scale, depth * scale);
                let t = (dx * ux + dy * uy).clamp(-half, half);
                let d2 = (dx - t * ux).powi(2) + (dy - t * uy).powi(2);
                (-d2 / (2.0 * r * r) - dz * dz / (2.0 * h * h)).exp()
            }
            MotifShape::Ring { radius, thickness } => {
                let (r, w) = (radius * scale, thickness * scale);
                let d = (dx * dx + dy * dy + dz * dz).sqrt() - r;
                (-d * d / (2.0 * w * w)).exp()
            }
            MotifShape::Blob { radius } => {
                let r = radius * scale;
                (-(dx * dx + dy * dy + dz * dz) / (2.0 * r * r)).exp()
            }
        }
    };
    for z in (c[2] - reach).max(0)..=(c[2] + reach).min(vol.dims[2] as i64 - 1) {
        for y in (c[1] - reach).max(0)..=(c[1] + reach).min(vol.dims[1] as i64 - 1) {
            for x in (c[0] - reach).max(0)..=(c[0] + reach).min(vol.dims[0] as i64 - 1) {
                let v = peak * profile((x - c[0]) as f64, (y - c[1]) as f64, (z - c[2]) as f64);
                let i = vol.offset(x as usize, y as usize, z as usize);
                let base = vol.data[i] as f64;
                vol.data[i] = (base + v).clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Generates a volume: constant background plus Gaussian noise, with motif
/// instances planted at rejection-sampled sites.
pub fn generate_volume(spec: &VolumeSpec) -> Result<SyntheticVolume> {
    if spec.extent.contains(&0) {
        return Err(Error::InvalidArgument("volume extent must be positive".into()));
    }
    if spec.site_step == 0 || !(spec.noise_sigma >= 0.0) || !(spec.min_spacing >= 0.0) {
        return Err(Error::InvalidArgument(
            "site_step must be >= 1, noise_sigma and min_spacing >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.extent.iter().map(|&d| d as usize).product::<usize>();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = (0..n)
        .map(|_| (spec.background + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    let mut vol = SyntheticVolume {
        dims: spec.extent,
        data,
        sites: Vec::new(),
    };

    // Candidate positions per axis: multiples of site_step inside the margins.
    let axis_range = |a: usize| -> Vec<u32> {
        let lo = spec.margin[a];
        let hi = spec.extent[a].saturating_sub(spec.margin[a]);
        (lo..hi).filter(|v| v % spec.site_step == 0).collect()
    };
    let ranges: Vec<Vec<u32>> = (0..3).map(axis_range).collect();
    let total: usize = spec.classes.iter().map(|c| c.count).sum();
    if total > 0 && ranges.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("margins leave no room for motif sites".into()));
    }
    let spacing2 = spec.min_spacing * spec.min_spacing;
    let attempts_per_site = 2000;
    for class in &spec.classes {
        for _ in 0..class.count {
            let mut placed = false;
            for _ in 0..attempts_per_site {
                let c = VoxelCoord::new(
                    ranges[0][rng.random_range(0..ranges[0].len())],
                    ranges[1][rng.random_range(0..ranges[1].len())],
                    ranges[2][rng.random_range(0..ranges[2].len())],
                );
                if vol
                    .sites
                    .iter()
                    .all(|s| (s.coord.squared_distance(c) as f64) >= spacing2)
                {
                    vol.sites.push(MotifSite {
                        coord: c,
                        class: class.class.id,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::InvalidArgument(format!(
                    "cannot pack {total} sites at spacing {} in extent {:?} (placed {})",
                    spec.min_spacing,
                    spec.extent,
                    vol.sites.len()
                )));
            }
        }
    }
    let classes: Vec<&MotifClass> = spec.classes.iter().map(|c| &c.class).collect();
    for site in vol.sites.clone() {
        let class = classes.iter().find(|c| c.id == site.class).expect("site class exists");
        render_motif(&mut vol, site.coord, class, &mut rng);
    }
    Ok(vol)
}

/// Grid geometry shared by extraction, encoding and ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    /// Volume extent `[x, y, z]`.
    pub extent: [u32; 3],
    /// Patch extent `[z, y, x]`.
    pub patch_shape: [usize; 3],
    pub stride: u32,
}

impl PatchGrid {
    pub fn new(extent: [u32; 3], patch_shape: [usize; 3], stride: u32) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if patch_shape.contains(&0) {
            return Err(Error::InvalidArgument("patch shape must be positive".into()));
        }
        let g = PatchGrid {
            extent,
            patch_shape,
            stride,
        };
        for a in 0..3 {
            if g.patch_extent_xyz()[a] > extent[a] as usize {
                return Err(Error::InvalidArgument(format!(
                    "patch {patch_shape:?} (z, y, x) does not fit volume {extent:?} (x, y, z)"
                )));
            }
        }
        Ok(g)
    }

    fn patch_extent_xyz(&self) -> [usize; 3] {
        [self.patch_shape[2], self.patch_shape[1], self.patch_shape[0]]
    }

    /// Center of the first patch along `[x, y, z]`.
    pub fn origin(&self) -> [u32; 3] {
        self.patch_extent_xyz().map(|s| (s / 2) as u32)
    }

    /// Patches per axis `[x, y, z]`.
    pub fn counts(&self) -> [usize; 3] {
        let p = self.patch_extent_xyz();
        [0, 1, 2].map(|a| (self.extent[a] as usize - p[a]) / self.stride as usize + 1)
    }

    pub fn len(&self) -> usize {
        self.counts().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch centers in `(z, y, x)` order.
    pub fn centers(&self) -> impl Iterator<Item = VoxelCoord> + '_ {
        let [nx, ny, nz] = self.counts();
        let o = self.origin();
        let s = self.stride;
        (0..nz).flat_map(move |k| {
            (0..ny).flat_map(move |j| {
                (0..nx).map(move |i| VoxelCoord::new(o[0] + i as u32 * s, o[1] + j as u32 * s, o[2] + k as u32 * s))
            })
        })
    }

    /// Store layout matching this grid.
    pub fn store_config(&self, shard_size: u32) -> StoreConfig {
        StoreConfig {
            origin: self.origin(),
            ..StoreConfig::new(shard_size, self.stride, self.extent)
        }
    }

    /// Grid center nearest to `c` (per-axis rounding, ties down).
    pub fn nearest_center(&self, c: VoxelCoord) -> VoxelCoord {
        let o = self.origin();
        let n = self.counts();
        let s = self.stride as i64;
        let arr = c.as_array();
        let snapped: Vec<u32> = (0..3)
            .map(|a| {
                let rel = arr[a] as i64 - o[a] as i64;
                let k = (rel + (s - 1) / 2).div_euclid(s).clamp(0, n[a] as i64 - 1);
                (o[a] as i64 + k * s) as u32
            })
            .collect();
        VoxelCoord::new(snapped[0], snapped[1], snapped[2])
    }
}

/// Every full-support patch on the stride grid with its center.
pub fn extract_patches(
    vol: &SyntheticVolume,
    patch_shape: [usize; 3],
    stride: u32,
) -> Result<Vec<(VoxelCoord, Patch)>> {
    let grid = PatchGrid::new(vol.dims, patch_shape, stride)?;
    Ok(grid
        .centers()
        .map(|c| (c, vol.patch_at(c, patch_shape).expect("grid patches have full support")))
        .collect())
}

/// Signs of the 64 embedding components packed into signatures. Real-valued
/// models are thresholded at zero, which gives the same bits.
pub fn encode_volume(
    vol: &SyntheticVolume,
    model: &EncoderModel,
    patch_shape: [usize; 3],
    stride: u32,
) -> Result<Vec<SignatureRecord>> {
    if model.embedding_dim() != 64 {
        return Err(Error::InvalidArgument(format!(
            "signature packing needs a 64-dimensional encoder, got {}",
            model.embedding_dim()
        )));
    }
    extract_patches(vol, patch_shape, stride)?
        .into_iter()
        .map(|(c, p)| Ok(SignatureRecord::new(c, Signature::from_signs(&model.encode(&p)?)?)))
        .collect()
}

/// Real-valued (pre-sign) embeddings for every grid patch.
pub fn embed_volume(
    vol: &SyntheticVolume,
    model: &EncoderModel,
    patch_shape: [usize; 3],
    stride: u32,
) -> Result<Vec<(VoxelCoord, Vec<f64>)>> {
    extract_patches(vol, patch_shape, stride)?
        .into_iter()
        .map(|(c, p)| Ok((c, model.encode_real(&p)?)))
        .collect()
}

/// Training patches drawn uniformly from a volume, keeping only patches with
/// enough structure (mean absolute gradient at least `min_gradient`).
#[derive(Debug, Clone)]
pub struct VolumeSampler<'a> {
    pub volume: &'a SyntheticVolume,
    pub patch_shape: [usize; 3],
    pub min_gradient: f64,
    pub max_attempts: usize,
}

impl<'a> VolumeSampler<'a> {
    pub fn new(volume: &'a SyntheticVolume, patch_shape: [usize; 3], min_gradient: f64) -> Self {
        VolumeSampler {
            volume,
            patch_shape,
            min_gradient,
            max_attempts: 1000,
        }
    }
}

impl PatchSource for VolumeSampler<'_> {
    fn patch_shape(&self) -> [usize; 3] {
        self.patch_shape
    }

    /// Falls back to the last draw when no patch passes the filter.
    fn sample(&self, rng: &mut ChaCha8Rng) -> Patch {
        let d = self.volume.dims();
        let s = self.patch_shape;
        let half = [s[2] / 2, s[1] / 2, s[0] / 2];
        let ext = [s[2], s[1], s[0]];
        let mut last = None;
        for _ in 0..self.max_attempts.max(1) {
            let c: Vec<u32> = (0..3)
                .map(|a| rng.random_range(half[a] as u32..=(d[a] as usize - ext[a] + half[a]) as u32))
                .collect();
            let p = self
                .volume
                .patch_at(VoxelCoord::new(c[0], c[1], c[2]), s)
                .expect("sampled inside bounds");
            if p.mean_gradient() >= self.min_gradient {
                return p;
            }
            last = Some(p);
        }
        last.expect("at least one attempt")
    }
}

/// Describes how an encoded record file was produced, so it can be ingested
/// without repeating the grid parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodeManifest {
    pub extent: [u32; 3],
    pub origin: [u32; 3],
    pub stride: u32,
    pub patch_shape: [usize; 3],
    pub records: usize,
}

impl EncodeManifest {
    pub fn path_for(records: &Path) -> PathBuf {
        let mut s = records.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Layout;

    fn two_class_spec(seed: u64) -> VolumeSpec {
        VolumeSpec::new(
            [64, 64, 64],
            vec![
                ClassSpec {
                    class: MotifClass::bar(0),
                    count: 6,
                },
                ClassSpec {
                    class: MotifClass::ring(1),
                    count: 6,
                },
            ],
            seed,
        )
    }

    #[test]
    fn zero_sites_gives_noise_only() {
        let spec = VolumeSpec::new([16, 16, 16], vec![], 1);
        let vol = generate_volume(&spec).unwrap();
        assert!(vol.sites.is_empty());
        let mean = vol.data().iter().map(|&v| v as f64).sum::<f64>() / vol.data().len() as f64;
        assert!((mean - 0.2).abs() < 0.01);
    }

    #[test]
    fn spacing_and_support_hold() {
        let mut spec = VolumeSpec::new(
            [128, 128, 128],
            vec![ClassSpec {
                class: MotifClass::blob(0),
                count: 50,
            }],
            2,
        );
        spec.min_spacing = 20.0;
        let vol = generate_volume(&spec).unwrap();
        assert_eq!(vol.sites.len(), 50);
        for (i, a) in vol.sites.iter().enumerate() {
            for b in &vol.sites[i + 1..] {
                assert!(a.coord.distance(b.coord) >= 20.0);
            }
            assert!(vol.patch_at(a.coord, [16, 16, 16]).is_some());
        }
    }

    #[test]
    fn infeasible_packing_is_rejected() {
        let mut spec = VolumeSpec::new(
            [32, 32, 32],
            vec![ClassSpec {
                class: MotifClass::blob(0),
                count: 20,
            }],
            3,
        );
        spec.min_spacing = 20.0;
        assert!(matches!(generate_volume(&spec), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_volume(&two_class_spec(4)).unwrap();
        let b = generate_volume(&two_class_spec(4)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        assert_ne!(generate_volume(&two_class_spec(5)).unwrap().checksum(), a.checksum());
    }

    #[test]
    fn grid_arithmetic() {
        let vol = SyntheticVolume::filled([64, 64, 64], 0.5);
        let patches = extract_patches(&vol, [16, 16, 16], 16).unwrap();
        assert_eq!(patches.len(), 64);
        let mut coords: Vec<_> = patches.iter().map(|p| p.0).collect();
        coords.sort();
        coords.dedup();
        assert_eq!(coords.len(), 64);
        assert_eq!(coords[0], VoxelCoord::new(8, 8, 8));

        let one = extract_patches(&vol, [16, 16, 16], 64).unwrap();
        assert_eq!(one.len(), 1);
        let grid = PatchGrid::new([64, 64, 64], [3, 16, 16], 4).unwrap();
        assert_eq!(grid.counts(), [13, 13, 16]);
        assert_eq!(grid.origin(), [8, 8, 1]);
        assert!(extract_patches(&vol, [65, 1, 1], 1).is_err());
        assert!(extract_patches(&vol, [1, 1, 1], 0).is_err());
    }

    #[test]
    fn every_site_has_a_nearby_patch_center() {
        let vol = generate_volume(&two_class_spec(6)).unwrap();
        let grid = PatchGrid::new(vol.dims(), [3, 16, 16], 4).unwrap();
        let centers: Vec<_> = grid.centers().collect();
        for s in &vol.sites {
            let ok = centers.iter().any(|c| {
                c.as_array()
                    .iter()
                    .zip(s.coord.as_array())
                    .all(|(&a, b)| a.abs_diff(b) <= grid.stride / 2)
            });
            assert!(ok, "site {:?}", s.coord);
            let snapped = grid.nearest_center(s.coord);
            assert!(centers.contains(&snapped));
        }
    }

    #[test]
    fn patch_axes_follow_center_convention() {
        let dims = [8u32, 6, 5];
        let data: Vec<f32> = (0..8 * 6 * 5).map(|i| i as f32 / 240.0).collect();
        let vol = SyntheticVolume::new(dims, data, vec![]).unwrap();
        let p = vol.patch_at(VoxelCoord::new(4, 3, 2), [3, 2, 4]).unwrap();
        // start = center - floor(size / 2): x from 2, y from 2, z from 1.
        assert_eq!(p.get(0, 0, 0), vol.get(2, 2, 1) as f64);
        assert_eq!(p.get(2, 1, 3), vol.get(5, 3, 3) as f64);
        assert!(vol.patch_at(VoxelCoord::new(1, 3, 2), [3, 2, 4]).is_none());
    }

    #[test]
    fn volume_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let vol = generate_volume(&two_class_spec(7)).unwrap();
        vol.save(&path).unwrap();
        let back = SyntheticVolume::load(&path).unwrap();
        assert_eq!(back, vol);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], VOLUME_MAGIC);
        assert_eq!(bytes.len(), 16 + 64 * 64 * 64 * 4);
        assert!(SyntheticVolume::read_from(&mut &bytes[..bytes.len() - 2]).is_err());
    }

    #[test]
    fn site_line_parsing() {
        let s: MotifSite = "1 2 3 0".parse().unwrap();
        assert_eq!(s.to_string(), "1 2 3 0");
        assert!("1 2 3".parse::<MotifSite>().is_err());
        assert!("1 2 x 0".parse::<MotifSite>().is_err());
    }

    #[test]
    fn encoding_conserves_counts_and_packs_signs() {
        let vol = generate_volume(&two_class_spec(8)).unwrap();
        let model = EncoderModel::new(Layout::Planar, [3, 16, 16], 64, 1).unwrap();
        let recs = encode_volume(&vol, &model, [3, 16, 16], 8).unwrap();
        assert_eq!(recs.len(), extract_patches(&vol, [3, 16, 16], 8).unwrap().len());
        let small = EncoderModel::new(Layout::Planar, [3, 16, 16], 32, 1).unwrap();
        assert!(encode_volume(&vol, &small, [3, 16, 16], 8).is_err());

        // A model whose projection ignores its input gives one signature.
        let mut constant = model.clone();
        constant.dense.weight.iter_mut().for_each(|w| *w = 0.0);
        for (k, b) in constant.dense.bias.iter_mut().enumerate() {
            *b = if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        let recs = encode_volume(&vol, &constant, [3, 16, 16], 8).unwrap();
        assert!(recs.iter().all(|r| r.sig == Signature(0xAAAA_AAAA_AAAA_AAAA)));
    }

    #[test]
    fn sampler_prefers_structured_patches() {
        let vol = generate_volume(&two_class_spec(9)).unwrap();
        let sampler = VolumeSampler::new(&vol, [3, 16, 16], 0.06);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean: f64 = (0..20).map(|_| sampler.sample(&mut rng).mean_gradient()).sum::<f64>() / 20.0;
        assert!(mean >= 0.06);
    }
}
