use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::dice_loss_on_tape;
use super::{he_uniform, image_batch, AdamState, Bound, ParamSet, TrainOptions};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// UNet-style segmenter layout.
///
/// `depth` encoder levels of conv3x3+ReLU then 2x2 max-pooling, with channel
/// count doubling from `base_channels`; a bottleneck conv; and `depth`
/// decoder levels. Each decoder level halves the channels with a 1x1 conv,
/// upsamples (nearest), concatenates the skip and applies conv3x3+ReLU.
/// The 1x1 conv runs before the upsampling, where it is cheaper and gives
/// the same result. A 1x1 convolution and a sigmoid produce the probability
/// map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegArch {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub base_channels: usize,
}

impl SegArch {
    pub fn desk(height: usize, width: usize) -> Self {
        SegArch {
            height,
            width,
            depth: 2,
            base_channels: 8,
        }
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    fn validate(&self) -> Result<()> {
        let f = 1usize << self.depth;
        if self.base_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::contract("segmenter needs positive extents and channels"));
        }
        if self.height % f != 0 || self.width % f != 0 {
            return Err(Error::dim(format!(
                "segmenter input {}x{} must be divisible by 2^{}",
                self.height, self.width, self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub arch: SegArch,
    pub params: ParamSet,
}

impl SegModel {
    pub fn new(arch: SegArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut conv = |params: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize| {
            params.push(
                format!("{name}.w"),
                he_uniform(&mut rng, &[cout, cin, k, k], cin * k * k),
            );
            params.push(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        let mut prev = 1;
        for level in 0..arch.depth {
            conv(&mut params, &format!("down{level}"), prev, arch.width_at(level), 3);
            prev = arch.width_at(level);
        }
        conv(&mut params, "bottom", prev, arch.width_at(arch.depth), 3);
        prev = arch.width_at(arch.depth);
        for level in (0..arch.depth).rev() {
            let skip = arch.width_at(level);
            conv(&mut params, &format!("reduce{level}"), prev, skip, 1);
            conv(&mut params, &format!("up{level}"), 2 * skip, skip, 3);
            prev = skip;
        }
        conv(&mut params, "head", prev, 1, 1);
        Ok(SegModel { arch, params })
    }

    pub fn from_params(arch: SegArch, params: ParamSet) -> Result<Self> {
        let template = SegModel::new(arch, 0)?;
        template.params.same_layout(&params)?;
        Ok(SegModel {
            arch: template.arch,
            params,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        match x.shape() {
            &[_, 1, h, w] if h == self.arch.height && w == self.arch.width => Ok(()),
            &[_, 1, h, w] if h % (1 << self.arch.depth) != 0 || w % (1 << self.arch.depth) != 0 => {
                Err(Error::dim(format!(
                    "input {h}x{w} is not divisible by 2^{}",
                    self.arch.depth
                )))
            }
            s => Err(Error::dim(format!(
                "segmenter expects [N, 1, {}, {}], got {s:?}",
                self.arch.height, self.arch.width
            ))),
        }
    }

    pub(crate) fn graph(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut r = bound.reader();
        let conv = |tape: &mut Tape, h: Var, (w, b): (Var, Var), pad: usize| -> Result<Var> {
            let c = tape.conv2d(h, w, 1, pad)?;
            tape.bias_add(c, b)
        };
        let mut skips = Vec::with_capacity(self.arch.depth);
        let mut h = x;
        for _ in 0..self.arch.depth {
            let s = conv(tape, h, (r.take(), r.take()), 1)?;
            let s = tape.relu(s)?;
            skips.push(s);
            h = tape.max_pool2d(s, 2)?;
        }
        h = conv(tape, h, (r.take(), r.take()), 1)?;
        h = tape.relu(h)?;
        while let Some(skip) = skips.pop() {
            let reduced = conv(tape, h, (r.take(), r.take()), 0)?;
            let u = tape.upsample2d(reduced, 2)?;
            let cat = tape.concat_channels(&[u, skip])?;
            h = conv(tape, cat, (r.take(), r.take()), 1)?;
            h = tape.relu(h)?;
        }
        let logits = conv(tape, h, (r.take(), r.take()), 0)?;
        tape.sigmoid(logits)
    }

    /// Probability map `[N, 1, H, W]` for an image batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.graph(&mut tape, &bound, xv)?;
        Ok(tape.value(y)?.clone())
    }

    /// Predicts many images in fixed-size chunks; one probability map per image.
    pub fn predict(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let plane = self.arch.height * self.arch.width;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let x = image_batch(chunk, self.arch.height, self.arch.width)?;
            let y = self.forward(&x)?;
            out.extend(y.data().chunks(plane).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Dice loss of the model on `(x, y)` as a differentiable function of `x`.
    /// Parameters enter the tape as constants.
    pub fn loss_wrt_input(&self, tape: &mut Tape, x: Var, y: &Tensor) -> Result<Var> {
        self.check_input(tape.value(x)?)?;
        let bound = self.params.bind(tape, false);
        let pred = self.graph(tape, &bound, x)?;
        let yv = tape.constant(y.clone());
        dice_loss_on_tape(tape, pred, yv)
    }

    /// `∂ L_Dice(y, f(x)) / ∂x` with parameters frozen.
    pub fn input_gradient(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = self.loss_wrt_input(&mut tape, xv, y)?;
        tape.backward(loss)?.wrt(&tape, xv)
    }

    /// Mini-batch Adam on the Dice loss, with the Dice sums taken over each
    /// whole batch. Returns the mean training loss of every epoch.
    pub fn train(&mut self, pairs: &[(&[f64], &[f64])], opts: &TrainOptions) -> Result<Vec<f64>> {
        opts.validate()?;
        if pairs.is_empty() {
            return Err(Error::EmptyInput("no annotated pairs to train on".into()));
        }
        let (h, w) = (self.arch.height, self.arch.width);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = AdamState::new(&self.params, opts.lr);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut history = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(opts.batch_size) {
                let imgs: Vec<&[f64]> = batch.iter().map(|&i| pairs[i].0).collect();
                let masks: Vec<&[f64]> = batch.iter().map(|&i| pairs[i].1).collect();
                let x = image_batch(&imgs, h, w)?;
                let y = image_batch(&masks, h, w)?;
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, true);
                let xv = tape.constant(x);
                let yv = tape.constant(y);
                let pred = self.graph(&mut tape, &bound, xv)?;
                let loss = dice_loss_on_tape(&mut tape, pred, yv)?;
                total += tape.value(loss)?.item()? * batch.len() as f64;
                let grads = bound.grads(&tape, loss)?;
                adam.step(&mut self.params, &grads)?;
            }
            history.push(total / pairs.len() as f64);
        }
        Ok(history)
    }
}
