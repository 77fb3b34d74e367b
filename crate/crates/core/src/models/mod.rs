//! The VAE manifold learner, the UNet-style segmenter, their losses, Adam and
//! the seeded training loops.

mod adam;
pub mod checkpoint;
mod loss;
mod unet;
mod vae;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub use adam::AdamState;
pub use loss::{dice_loss, dice_loss_on_tape, kl_standard_normal, LatentCode, DICE_EPS};
pub use unet::{SegArch, SegModel};
pub use vae::{VaeArch, VaeModel, VaeOutput};

/// Default latent dimensionality of the VAE.
pub const DEFAULT_LATENT_DIM: usize = 5;
pub const VAE_DEFAULT_EPOCHS: usize = 50;
pub const VAE_DEFAULT_LR: f64 = 1e-4;
pub const SEG_DEFAULT_EPOCHS: usize = 30;
pub const SEG_DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub(crate) fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks that `other` has the same names and shapes, in order.
    pub(crate) fn same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::dim(format!(
                    "parameter mismatch: {na} {:?} vs {nb} {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Places every tensor on `tape`, differentiable when `trainable`.
    pub(crate) fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape variables of a bound [`ParamSet`], in declaration order.
pub(crate) struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Sequential reader matching the order parameters were declared in.
    pub fn reader(&self) -> BoundReader<'_> {
        BoundReader {
            vars: &self.vars,
            next: 0,
        }
    }

    pub fn grads(&self, tape: &Tape, loss: Var) -> Result<Vec<Tensor>> {
        let g = tape.backward(loss)?;
        self.vars.iter().map(|&v| g.wrt(tape, v)).collect()
    }
}

pub(crate) struct BoundReader<'a> {
    vars: &'a [Var],
    next: usize,
}

impl BoundReader<'_> {
    pub fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// He-uniform initialised weight tensor.
pub(crate) fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Hyper-parameters of one training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl TrainOptions {
    pub fn vae(seed: u64) -> Self {
        TrainOptions {
            epochs: VAE_DEFAULT_EPOCHS,
            lr: VAE_DEFAULT_LR,
            seed,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    pub fn segmenter(seed: u64) -> Self {
        TrainOptions {
            epochs: SEG_DEFAULT_EPOCHS,
            lr: SEG_DEFAULT_LR,
            seed,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::contract("batch size and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Stacks equally sized single-channel images into `[N, 1, H, W]`.
pub fn image_batch(images: &[&[f64]], height: usize, width: usize) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no images in batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * height * width);
    for img in images {
        if img.len() != height * width {
            return Err(Error::dim(format!(
                "image has {} pixels, expected {height}x{width}",
                img.len()
            )));
        }
        data.extend_from_slice(img);
    }
    Tensor::new(vec![images.len(), 1, height, width], data)
}
