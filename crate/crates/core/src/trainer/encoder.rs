//! The patch encoder and its checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, Conv, Dense, Tensor};
use super::patch::Patch;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ENC1";
const CHANNELS: [usize; 2] = [8, 16];

/// How patch axes map onto the convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Depth slices become input channels; 3×3 kernels in the height/width plane.
    Planar,
    /// One input channel, 3×3×3 kernels.
    Volumetric,
}

impl Layout {
    fn code(self) -> u8 {
        match self {
            Layout::Planar => 0,
            Layout::Volumetric => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Layout::Planar),
            1 => Ok(Layout::Volumetric),
            _ => Err(Error::Format(format!("unknown encoder layout code {c}"))),
        }
    }

    fn kernel(self) -> [usize; 3] {
        match self {
            Layout::Planar => [1, 3, 3],
            Layout::Volumetric => [3, 3, 3],
        }
    }

    fn pool(self) -> [usize; 3] {
        match self {
            Layout::Planar => [1, 2, 2],
            Layout::Volumetric => [2, 2, 2],
        }
    }
}

/// Two conv/ReLU/max-pool blocks, global average pooling, a projection to
/// `M` dimensions and ℓ2 normalization, optionally followed by a sign layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub layout: Layout,
    pub input_shape: [usize; 3],
    pub binarize: bool,
    pub conv1: Conv,
    pub conv2: Conv,
    pub dense: Dense,
    /// Training steps taken without and with the sign layer.
    pub real_steps: u64,
    pub binary_steps: u64,
}

/// Per-parameter gradients, laid out like [`EncoderModel::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Intermediate activations needed for the backward pass.
pub struct ForwardCache {
    input: Tensor,
    pre1: Tensor,
    act1: Tensor,
    arg1: Vec<usize>,
    pool1: Tensor,
    pre2: Tensor,
    act2: Tensor,
    arg2: Vec<usize>,
    pool2: Tensor,
    gap: Vec<f64>,
    normalized: Vec<f64>,
    norm: f64,
}

fn quantize(v: &mut [f64]) {
    for x in v {
        *x = *x as f32 as f64;
    }
}

impl EncoderModel {
    pub fn new(layout: Layout, input_shape: [usize; 3], embedding_dim: usize, seed: u64) -> Result<Self> {
        let min_extent = |axis: usize| match (layout, axis) {
            (Layout::Planar, 0) => 1,
            _ => 4,
        };
        if (0..3).any(|a| input_shape[a] < min_extent(a)) {
            return Err(Error::InvalidArgument(format!(
                "patch shape {input_shape:?} too small for two pooling stages"
            )));
        }
        if embedding_dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        let in_channels = match layout {
            Layout::Planar => input_shape[0],
            Layout::Volumetric => 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = EncoderModel {
            layout,
            input_shape,
            binarize: false,
            conv1: Conv::new(in_channels, CHANNELS[0], layout.kernel(), &mut rng),
            conv2: Conv::new(CHANNELS[0], CHANNELS[1], layout.kernel(), &mut rng),
            dense: Dense::new(CHANNELS[1], embedding_dim, &mut rng),
            real_steps: 0,
            binary_steps: 0,
        };
        model.quantize();
        Ok(model)
    }

    pub fn embedding_dim(&self) -> usize {
        self.dense.outputs
    }

    /// Rounds every parameter to the nearest 32-bit float, the checkpoint precision.
    pub fn quantize(&mut self) {
        for p in self.parameters_mut() {
            quantize(p);
        }
    }

    pub fn parameters(&self) -> [&Vec<f64>; 6] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.dense.weight,
            &self.dense.bias,
        ]
    }

    pub fn parameters_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.dense.weight,
            &mut self.dense.bias,
        ]
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.parameters().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    fn to_tensor(&self, p: &Patch) -> Result<Tensor> {
        if p.shape() != self.input_shape {
            return Err(Error::InvalidArgument(format!(
                "patch shape {:?} does not match encoder input {:?}",
                p.shape(),
                self.input_shape
            )));
        }
        let [d, h, w] = self.input_shape;
        Ok(match self.layout {
            Layout::Planar => Tensor {
                channels: d,
                dims: [1, h, w],
                data: p.data().to_vec(),
            },
            Layout::Volumetric => Tensor {
                channels: 1,
                dims: [d, h, w],
                data: p.data().to_vec(),
            },
        })
    }

    /// Embedding of `p`: unit norm, or ±1 components when binarized.
    pub fn encode(&self, p: &Patch) -> Result<Vec<f64>> {
        Ok(self.forward(p)?.0)
    }

    /// The unit-norm embedding before any sign layer.
    pub fn encode_real(&self, p: &Patch) -> Result<Vec<f64>> {
        Ok(self.forward(p)?.1.normalized)
    }

    pub fn forward(&self, p: &Patch) -> Result<(Vec<f64>, ForwardCache)> {
        let input = self.to_tensor(p)?;
        let pool = self.layout.pool();
        let pre1 = self.conv1.forward(&input);
        let act1 = layers::relu_forward(&pre1);
        let (pool1, arg1) = layers::maxpool_forward(&act1, pool);
        let pre2 = self.conv2.forward(&pool1);
        let act2 = layers::relu_forward(&pre2);
        let (pool2, arg2) = layers::maxpool_forward(&act2, pool);
        let gap = layers::global_avg_pool(&pool2);
        let projected = self.dense.forward(&gap);
        let (normalized, norm) = layers::l2_normalize(&projected);
        let out = if self.binarize {
            layers::sign_layer_forward(&normalized)
        } else {
            normalized.clone()
        };
        let cache = ForwardCache {
            input,
            pre1,
            act1,
            arg1,
            pool1,
            pre2,
            act2,
            arg2,
            pool2,
            gap,
            normalized,
            norm,
        };
        Ok((out, cache))
    }

    /// Accumulates parameter gradients of a loss whose gradient with respect
    /// to the encoder output is `grad_out`. The sign layer, when present,
    /// passes the gradient straight through.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut Gradients) {
        let g = if self.binarize {
            layers::sign_layer_backward(grad_out)
        } else {
            grad_out.to_vec()
        };
        let g = layers::l2_normalize_backward(&cache.normalized, cache.norm, &g);
        let [g1w, g1b, g2w, g2b, gdw, gdb] = &mut grads.0[..] else {
            unreachable!("six parameter groups")
        };
        let g = self.dense.backward(&cache.gap, &g, gdw, gdb);
        let g = layers::global_avg_pool_backward(cache.pool2.channels, cache.pool2.dims, &g);
        let g = layers::maxpool_backward(&cache.act2, &cache.arg2, &g);
        let g = layers::relu_backward(&cache.pre2, &g);
        let g = self.conv2.backward(&cache.pool1, &g, g2w, g2b);
        let g = layers::maxpool_backward(&cache.act1, &cache.arg1, &g);
        let g = layers::relu_backward(&cache.pre1, &g);
        self.conv1.backward(&cache.input, &g, g1w, g1b);
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[self.layout.code(), self.binarize as u8])?;
        for s in self.input_shape {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        w.write_all(&(self.embedding_dim() as u32).to_le_bytes())?;
        w.write_all(&self.real_steps.to_le_bytes())?;
        w.write_all(&self.binary_steps.to_le_bytes())?;
        let shapes = self.tensor_shapes();
        w.write_all(&(shapes.len() as u32).to_le_bytes())?;
        for (shape, values) in shapes.iter().zip(self.parameters()) {
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in values {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.layout.kernel();
        let c1 = &self.conv1;
        let c2 = &self.conv2;
        vec![
            vec![c1.out_channels, c1.in_channels, k[0], k[1], k[2]],
            vec![c1.out_channels],
            vec![c2.out_channels, c2.in_channels, k[0], k[1], k[2]],
            vec![c2.out_channels],
            vec![self.dense.outputs, self.dense.inputs],
            vec![self.dense.outputs],
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated encoder checkpoint: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not an encoder checkpoint (bad magic)".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(fmt)?;
        let layout = Layout::from_code(b2[0])?;
        let binarize = match b2[1] {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad binarize flag {v}"))),
        };
        let mut u32s = |n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|_| {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b).map_err(fmt)?;
                    Ok(u32::from_le_bytes(b) as usize)
                })
                .collect()
        };
        let shape = u32s(3)?;
        let input_shape = [shape[0], shape[1], shape[2]];
        let m = u32s(1)?[0];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(fmt)?;
        let real_steps = u64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(fmt)?;
        let binary_steps = u64::from_le_bytes(b8);

        let mut model = EncoderModel::new(layout, input_shape, m, 0).map_err(|e| Error::Format(e.to_string()))?;
        model.binarize = binarize;
        model.real_steps = real_steps;
        model.binary_steps = binary_steps;
        let expected = model.tensor_shapes();
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(fmt)?;
        if u32::from_le_bytes(b4) as usize != expected.len() {
            return Err(Error::Format("unexpected tensor count in checkpoint".into()));
        }
        for (i, want) in expected.iter().enumerate() {
            r.read_exact(&mut b4).map_err(fmt)?;
            let rank = u32::from_le_bytes(b4) as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut b4).map_err(fmt)?;
                dims.push(u32::from_le_bytes(b4) as usize);
            }
            if &dims != want {
                return Err(Error::Format(format!(
                    "tensor {i} has shape {dims:?}, expected {want:?}"
                )));
            }
            for v in model.parameters_mut()[i].iter_mut() {
                r.read_exact(&mut b4).map_err(fmt)?;
                *v = f32::from_le_bytes(b4) as f64;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut std::io::BufReader::new(file))
    }
}
