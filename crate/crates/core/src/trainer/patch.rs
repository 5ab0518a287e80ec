use crate::error::{Error, Result};

/// An image patch, stored `[depth][height][width]` with width fastest.
///
/// Planar patches carry a few adjacent slices in `depth`, which the planar
/// encoder reads as input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Patch {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "patch shape {shape:?} has an empty axis"
            )));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "patch shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("patch contains non-finite values".into()));
        }
        Ok(Patch { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Patch {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Patch { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// Mean absolute forward difference over all axes with more than one voxel.
    pub fn mean_gradient(&self) -> f64 {
        let [d, h, w] = self.shape;
        let mut sum = 0.0;
        let mut n = 0usize;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = self.get(z, y, x);
                    if x + 1 < w {
                        sum += (self.get(z, y, x + 1) - v).abs();
                        n += 1;
                    }
                    if y + 1 < h {
                        sum += (self.get(z, y + 1, x) - v).abs();
                        n += 1;
                    }
                    if z + 1 < d {
                        sum += (self.get(z + 1, y, x) - v).abs();
                        n += 1;
                    }
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}
