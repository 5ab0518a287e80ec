//! Semantics-preserving patch augmentations.
//!
//! A random [`AugmentDraw`] is sampled from an [`AugmentationConfig`] and then
//! applied deterministically. Geometric changes only touch axes with at least
//! four voxels, so the few slices of a planar patch are never mixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Normal};

use super::patch::Patch;
use crate::error::{Error, Result};

const MIN_GEOMETRIC_EXTENT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Largest shift per axis, in voxels.
    pub max_translation: usize,
    pub allow_reflections: bool,
    /// Allowed rotations in the height/width plane, in quarter turns.
    pub rotation_set: Vec<u8>,
    /// Per-axis scale factor range.
    pub scale_range: (f64, f64),
    pub intensity_shift_range: (f64, f64),
    pub intensity_scale_range: (f64, f64),
    pub noise_sigma: f64,
    /// Probability that a voxel is zeroed.
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            max_translation: 2,
            allow_reflections: true,
            rotation_set: vec![0, 1, 2, 3],
            scale_range: (0.9, 1.1),
            intensity_shift_range: (-0.1, 0.1),
            intensity_scale_range: (0.9, 1.1),
            noise_sigma: 0.05,
            mask_fraction: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Leaves every patch untouched.
    pub fn identity() -> Self {
        AugmentationConfig {
            max_translation: 0,
            allow_reflections: false,
            rotation_set: vec![0],
            scale_range: (1.0, 1.0),
            intensity_shift_range: (0.0, 0.0),
            intensity_scale_range: (1.0, 1.0),
            noise_sigma: 0.0,
            mask_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: (f64, f64)| {
            if r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} range ({}, {}) is not ordered",
                    r.0, r.1
                )))
            }
        };
        ordered("scale", self.scale_range)?;
        ordered("intensity shift", self.intensity_shift_range)?;
        ordered("intensity scale", self.intensity_scale_range)?;
        if self.scale_range.0 <= 0.0 {
            return Err(Error::InvalidArgument("scale range must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidArgument(format!(
                "mask_fraction {} not in [0, 1)",
                self.mask_fraction
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if self.rotation_set.iter().any(|&r| r > 3) {
            return Err(Error::InvalidArgument(
                "rotations are given in quarter turns 0..=3".into(),
            ));
        }
        Ok(())
    }

    pub fn sample(&self, shape: [usize; 3], rng: &mut impl Rng) -> AugmentDraw {
        let geometric = |axis: usize| shape[axis] >= MIN_GEOMETRIC_EXTENT;
        let uniform =
            |rng: &mut dyn rand::RngCore, r: (f64, f64)| if r.0 == r.1 { r.0 } else { rng.random_range(r.0..=r.1) };
        let mut draw = AugmentDraw::identity();
        for axis in 0..3 {
            if !geometric(axis) {
                continue;
            }
            draw.scale[axis] = uniform(rng, self.scale_range);
            let t = self.max_translation as i64;
            draw.shift[axis] = if t == 0 { 0 } else { rng.random_range(-t..=t) };
            draw.flip[axis] = self.allow_reflections && rng.random_bool(0.5);
        }
        if shape[1] == shape[2] && geometric(1) && !self.rotation_set.is_empty() {
            draw.quarter_turns = self.rotation_set[rng.random_range(0..self.rotation_set.len())];
        }
        draw.intensity_scale = uniform(rng, self.intensity_scale_range);
        draw.intensity_shift = uniform(rng, self.intensity_shift_range);
        draw.noise_sigma = self.noise_sigma;
        draw.mask_fraction = self.mask_fraction;
        draw.noise_seed = rng.random();
        draw
    }
}

/// One concrete augmentation, fixed before application.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub scale: [f64; 3],
    pub shift: [i64; 3],
    pub flip: [bool; 3],
    pub quarter_turns: u8,
    pub intensity_scale: f64,
    pub intensity_shift: f64,
    pub noise_sigma: f64,
    pub mask_fraction: f64,
    pub noise_seed: u64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            scale: [1.0; 3],
            shift: [0; 3],
            flip: [false; 3],
            quarter_turns: 0,
            intensity_scale: 1.0,
            intensity_shift: 0.0,
            noise_sigma: 0.0,
            mask_fraction: 0.0,
            noise_seed: 0,
        }
    }
}

/// Symmetric reflection of an integer index into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn resample_axis(p: &Patch, axis: usize, s: f64) -> Patch {
    let shape = p.shape();
    let n = shape[axis];
    let c = (n as f64 - 1.0) / 2.0;
    Patch::from_fn(shape, |z, y, x| {
        let mut at = [z, y, x];
        let src = c + (at[axis] as f64 - c) / s;
        let lo = src.floor();
        let frac = src - lo;
        at[axis] = reflect(lo as i64, n);
        let a = p.get(at[0], at[1], at[2]);
        at[axis] = reflect(lo as i64 + 1, n);
        let b = p.get(at[0], at[1], at[2]);
        a * (1.0 - frac) + b * frac
    })
}

fn rotate_quarter(p: &Patch) -> Patch {
    let [_, h, _] = p.shape();
    Patch::from_fn(p.shape(), |z, y, x| p.get(z, h - 1 - x, y))
}

/// Applies `draw` to `p`. Output has the input shape and values in `[0, 1]`.
pub fn augment(p: &Patch, draw: &AugmentDraw) -> Patch {
    let mut out = p.clone();
    for axis in 0..3 {
        if draw.scale[axis] != 1.0 {
            out = resample_axis(&out, axis, draw.scale[axis]);
        }
    }
    for _ in 0..draw.quarter_turns % 4 {
        out = rotate_quarter(&out);
    }
    if draw.flip.iter().any(|&f| f) {
        let [d, h, w] = out.shape();
        let src = out.clone();
        out = Patch::from_fn(out.shape(), |z, y, x| {
            let z = if draw.flip[0] { d - 1 - z } else { z };
            let y = if draw.flip[1] { h - 1 - y } else { y };
            let x = if draw.flip[2] { w - 1 - x } else { x };
            src.get(z, y, x)
        });
    }
    if draw.shift.iter().any(|&s| s != 0) {
        let shape = out.shape();
        let src = out.clone();
        out = Patch::from_fn(shape, |z, y, x| {
            src.get(
                reflect(z as i64 - draw.shift[0], shape[0]),
                reflect(y as i64 - draw.shift[1], shape[1]),
                reflect(x as i64 - draw.shift[2], shape[2]),
            )
        });
    }
    if draw.intensity_scale != 1.0 || draw.intensity_shift != 0.0 {
        for v in out.data_mut() {
            *v = *v * draw.intensity_scale + draw.intensity_shift;
        }
    }
    if draw.noise_sigma > 0.0 || draw.mask_fraction > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
        if draw.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, draw.noise_sigma).expect("sigma is finite");
            for v in out.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        if draw.mask_fraction > 0.0 {
            let keep = Bernoulli::new(draw.mask_fraction).expect("fraction in [0, 1)");
            for v in out.data_mut() {
                if keep.sample(&mut rng) {
                    *v = 0.0;
                }
            }
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_patch(shape: [usize; 3], seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::from_fn(shape, |_, _, _| rng.random_range(0.0..=1.0))
    }

    #[test]
    fn reflection_twice_is_identity() {
        let p = random_patch([3, 8, 8], 1);
        let mut draw = AugmentDraw::identity();
        draw.flip = [false, false, true];
        assert_eq!(augment(&augment(&p, &draw), &draw), p);
        draw.flip = [false, true, false];
        assert_ne!(augment(&p, &draw), p);
        assert_eq!(augment(&augment(&p, &draw), &draw), p);
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let p = random_patch([1, 6, 6], 2);
        let mut draw = AugmentDraw::identity();
        draw.quarter_turns = 1;
        let mut q = p.clone();
        for _ in 0..4 {
            q = augment(&q, &draw);
        }
        assert_eq!(q, p);
    }

    #[test]
    fn mask_count_matches_bernoulli_rate() {
        let p = Patch::filled([1, 16, 16], 0.5);
        let mut draw = AugmentDraw::identity();
        draw.mask_fraction = 0.1;
        let mut total = 0usize;
        let trials = 200;
        for seed in 0..trials {
            draw.noise_seed = seed;
            let zeros = augment(&p, &draw).data().iter().filter(|&&v| v == 0.0).count();
            // Binomial(256, 0.1): mean 25.6, sd 4.8; six sd either side.
            assert!(zeros <= 55, "seed {seed}: {zeros}");
            total += zeros;
        }
        let mean = total as f64 / trials as f64;
        assert!((mean - 25.6).abs() < 1.5, "mean masked {mean}");
    }

    #[test]
    fn shift_uses_reflective_padding() {
        let p = Patch::from_fn([1, 1, 4], |_, _, x| x as f64 / 4.0);
        let mut draw = AugmentDraw::identity();
        draw.shift = [0, 0, 1];
        let q = augment(&p, &draw);
        assert_eq!(q.data(), &[0.0, 0.0, 0.25, 0.5]);
    }

    #[test]
    fn thin_axes_are_left_alone() {
        let cfg = AugmentationConfig {
            max_translation: 3,
            ..AugmentationConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = cfg.sample([3, 16, 16], &mut rng);
            assert_eq!(d.shift[0], 0);
            assert!(!d.flip[0]);
            assert_eq!(d.scale[0], 1.0);
        }
    }

    #[test]
    fn validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        let bad = AugmentationConfig {
            mask_fraction: 1.0,
            ..AugmentationConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = AugmentationConfig {
            scale_range: (1.1, 0.9),
            ..AugmentationConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn identity_config_is_exact_identity(seed in 0u64..500, d in 1usize..5, h in 1usize..10, w in 1usize..10) {
            let p = random_patch([d, h, w], seed);
            let cfg = AugmentationConfig::identity();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw = cfg.sample(p.shape(), &mut rng);
            prop_assert_eq!(augment(&p, &draw), p);
        }

        #[test]
        fn output_shape_and_range(seed in 0u64..500) {
            let p = random_patch([3, 12, 12], seed);
            let cfg = AugmentationConfig::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let draw = cfg.sample(p.shape(), &mut rng);
            let q = augment(&p, &draw);
            prop_assert_eq!(q.shape(), p.shape());
            prop_assert!(q.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(augment(&p, &draw), q);
        }
    }
}
