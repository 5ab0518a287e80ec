//! Contrastive training of the patch encoder.
//!
//! Each step draws `batch_pairs` patches, augments each twice and descends
//! the chosen loss averaged over pairs. A binarized encoder is trained by
//! first fitting a real-valued one and then switching its sign layer on.

pub mod augment;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod patch;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::{augment, AugmentDraw, AugmentationConfig};
pub use encoder::{EncoderModel, Gradients, Layout};
pub use loss::{nt_xent_loss, semi_hard_negatives, triplet_margin_loss, LossConfig};
pub use patch::Patch;

use crate::error::{Error, Result};

/// Supplies training patches.
pub trait PatchSource {
    fn patch_shape(&self) -> [usize; 3];
    fn sample(&self, rng: &mut ChaCha8Rng) -> Patch;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    NtXent,
    /// Triplet margin loss with semi-hard negatives.
    Triplet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Classical momentum coefficient; zero is plain SGD.
    pub momentum: f64,
    pub loss: LossKind,
    /// Permits training a binarized model that was never trained real-valued.
    pub allow_binary_from_scratch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            learning_rate: 0.05,
            seed: 0,
            momentum: 0.0,
            loss: LossKind::NtXent,
            allow_binary_from_scratch: false,
        }
    }
}

/// Trains `model` and returns it with the per-step mean loss.
pub fn train(
    source: &impl PatchSource,
    mut model: EncoderModel,
    loss: &LossConfig,
    aug: &AugmentationConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderModel, Vec<f64>)> {
    loss.validate()?;
    aug.validate()?;
    if !(cfg.learning_rate > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} must be > 0 and momentum {} in [0, 1)",
            cfg.learning_rate, cfg.momentum
        )));
    }
    if source.patch_shape() != model.input_shape {
        return Err(Error::InvalidArgument(format!(
            "patch source shape {:?} does not match encoder input {:?}",
            source.patch_shape(),
            model.input_shape
        )));
    }
    if model.binarize && model.real_steps == 0 && !cfg.allow_binary_from_scratch {
        return Err(Error::Contract(
            "a binarized encoder must start from a trained real-valued model".into(),
        ));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok((model, trace));
    }
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(aug.seed);
    aug_rng.set_stream(cfg.seed);
    let mut velocity = model.zero_gradients();
    let pairs = loss.batch_pairs;
    let shape = model.input_shape;

    for _ in 0..cfg.steps {
        let mut outputs = Vec::with_capacity(2 * pairs);
        let mut caches = Vec::with_capacity(2 * pairs);
        for _ in 0..pairs {
            let p = source.sample(&mut sample_rng);
            for _ in 0..2 {
                let draw = aug.sample(shape, &mut aug_rng);
                let (out, cache) = model.forward(&augment(&p, &draw))?;
                outputs.push(out);
                caches.push(cache);
            }
        }
        let (value, out_grads) = match cfg.loss {
            LossKind::NtXent => nt_xent_loss(&outputs, loss.temperature)?,
            LossKind::Triplet => {
                let (v, g, _) = loss::batch_triplet_loss(&outputs, loss.margin)?;
                (v, g)
            }
        };
        trace.push(value / pairs as f64);
        let mut grads = model.zero_gradients();
        for (cache, g) in caches.iter().zip(&out_grads) {
            model.backward(cache, g, &mut grads);
        }
        let scale = cfg.learning_rate / pairs as f64;
        for ((param, grad), vel) in model
            .parameters_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(velocity.0.iter_mut())
        {
            for ((w, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = cfg.momentum * *v + scale * g;
                *w -= *v;
            }
        }
        if model.binarize {
            model.binary_steps += 1;
        } else {
            model.real_steps += 1;
        }
    }
    model.quantize();
    Ok((model, trace))
}
