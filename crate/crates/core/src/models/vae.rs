use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::loss::{kl_on_tape, mse_on_tape};
use super::{he_uniform, image_batch, AdamState, Bound, LatentCode, ParamSet, TrainOptions};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Shape of the convolutional VAE.
///
/// The encoder is one stride-2 3x3 convolution per entry of `channels`,
/// followed by two dense heads (`mu`, `logvar`). The decoder mirrors it with
/// a dense layer and stride-2 4x4 transposed convolutions back to one channel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaeArch {
    pub height: usize,
    pub width: usize,
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl VaeArch {
    pub fn desk(height: usize, width: usize) -> Self {
        VaeArch {
            height,
            width,
            channels: vec![8, 16, 32],
            latent_dim: super::DEFAULT_LATENT_DIM,
        }
    }

    fn validate(&self) -> Result<()> {
        let f = 1usize << self.channels.len();
        if self.channels.is_empty() || self.latent_dim == 0 || self.channels.contains(&0) {
            return Err(Error::contract("VAE needs at least one level and a latent dimension"));
        }
        if self.height % f != 0 || self.width % f != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::dim(format!(
                "VAE input {}x{} must be divisible by {f}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize, usize) {
        let f = 1usize << self.channels.len();
        (*self.channels.last().unwrap(), self.height / f, self.width / f)
    }

    fn flat(&self) -> usize {
        let (c, h, w) = self.bottleneck();
        c * h * w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel {
    pub arch: VaeArch,
    pub params: ParamSet,
}

/// Reconstruction and posterior codes for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeOutput {
    pub x_hat: Tensor,
    pub codes: Vec<LatentCode>,
}

struct Graph {
    x_hat: Var,
    mu: Var,
    logvar: Var,
}

impl VaeModel {
    pub fn new(arch: VaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut prev = 1;
        for (i, &c) in arch.channels.iter().enumerate() {
            params.push(format!("enc{i}.w"), he_uniform(&mut rng, &[c, prev, 3, 3], prev * 9));
            params.push(format!("enc{i}.b"), Tensor::zeros(&[c]));
            prev = c;
        }
        let flat = arch.flat();
        let d = arch.latent_dim;
        params.push("mu.w", he_uniform(&mut rng, &[flat, d], flat));
        params.push("mu.b", Tensor::zeros(&[d]));
        params.push("logvar.w", scaled(he_uniform(&mut rng, &[flat, d], flat), 0.1));
        params.push("logvar.b", Tensor::zeros(&[d]));
        params.push("dec.w", he_uniform(&mut rng, &[d, flat], d));
        params.push("dec.b", Tensor::zeros(&[flat]));
        let levels = arch.channels.len();
        for i in (0..levels).rev() {
            let cin = arch.channels[i];
            let cout = if i == 0 { 1 } else { arch.channels[i - 1] };
            params.push(format!("up{i}.w"), he_uniform(&mut rng, &[cin, cout, 4, 4], cin * 4));
            params.push(format!("up{i}.b"), Tensor::zeros(&[cout]));
        }
        Ok(VaeModel { arch, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(arch: VaeArch, params: ParamSet) -> Result<Self> {
        let template = VaeModel::new(arch, 0)?;
        template.params.same_layout(&params)?;
        Ok(VaeModel {
            arch: template.arch,
            params,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        match x.shape() {
            &[n, 1, h, w] if h == self.arch.height && w == self.arch.width => Ok(n),
            s => Err(Error::dim(format!(
                "VAE expects [N, 1, {}, {}], got {s:?}",
                self.arch.height, self.arch.width
            ))),
        }
    }

    fn encoder(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let mut r = bound.reader();
        let n = tape.value(x)?.shape()[0];
        let mut h = x;
        for _ in &self.arch.channels {
            let (w, b) = (r.take(), r.take());
            let c = tape.conv2d(h, w, 2, 1)?;
            let c = tape.bias_add(c, b)?;
            h = tape.relu(c)?;
        }
        let flat = tape.reshape(h, &[n, self.arch.flat()])?;
        let (mw, mb, lw, lb) = (r.take(), r.take(), r.take(), r.take());
        let mu = tape.matmul(flat, mw)?;
        let mu = tape.bias_add(mu, mb)?;
        let lv = tape.matmul(flat, lw)?;
        let lv = tape.bias_add(lv, lb)?;
        Ok((mu, lv))
    }

    fn decoder(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let vars = bound.vars();
        let base = 2 * self.arch.channels.len() + 4;
        let n = tape.value(z)?.shape()[0];
        let h = tape.matmul(z, vars[base])?;
        let h = tape.bias_add(h, vars[base + 1])?;
        let h = tape.relu(h)?;
        let (c, bh, bw) = self.arch.bottleneck();
        let mut h = tape.reshape(h, &[n, c, bh, bw])?;
        let levels = self.arch.channels.len();
        for (k, i) in (0..levels).rev().enumerate() {
            let (w, b) = (vars[base + 2 + 2 * k], vars[base + 3 + 2 * k]);
            let u = tape.conv_transpose2d(h, w, 2, 1)?;
            let u = tape.bias_add(u, b)?;
            h = if i == 0 { u } else { tape.relu(u)? };
        }
        Ok(h)
    }

    fn graph(&self, tape: &mut Tape, bound: &Bound, x: Var, noise: Var) -> Result<Graph> {
        let (mu, logvar) = self.encoder(tape, bound, x)?;
        let half = tape.scale(logvar, 0.5)?;
        let sigma = tape.exp(half)?;
        let eps = tape.mul(sigma, noise)?;
        let z = tape.add(mu, eps)?;
        let x_hat = self.decoder(tape, bound, z)?;
        Ok(Graph { x_hat, mu, logvar })
    }

    fn check_noise(&self, n: usize, noise: &Tensor) -> Result<()> {
        if noise.shape() != [n, self.arch.latent_dim] {
            return Err(Error::dim(format!(
                "noise must be [{n}, {}], got {:?}",
                self.arch.latent_dim,
                noise.shape()
            )));
        }
        Ok(())
    }

    /// Reparameterised forward pass: decodes `mu + exp(logvar / 2) * noise`.
    pub fn forward(&self, x: &Tensor, noise: &Tensor) -> Result<VaeOutput> {
        let n = self.check_input(x)?;
        self.check_noise(n, noise)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let nv = tape.constant(noise.clone());
        let g = self.graph(&mut tape, &bound, xv, nv)?;
        let d = self.arch.latent_dim;
        let mu = tape.value(g.mu)?.data();
        let lv = tape.value(g.logvar)?.data();
        let codes = (0..n)
            .map(|i| LatentCode {
                mu: mu[i * d..(i + 1) * d].to_vec(),
                logvar: lv[i * d..(i + 1) * d].to_vec(),
            })
            .collect();
        Ok(VaeOutput {
            x_hat: tape.value(g.x_hat)?.clone(),
            codes,
        })
    }

    /// Training objective: mean squared reconstruction error plus the batch-mean KL.
    pub fn loss(&self, x: &Tensor, noise: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let l = self.loss_graph(&mut tape, &bound, x, noise)?;
        tape.value(l)?.item()
    }

    pub(crate) fn loss_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &Tensor,
        noise: &Tensor,
    ) -> Result<Var> {
        let n = self.check_input(x)?;
        self.check_noise(n, noise)?;
        let xv = tape.constant(x.clone());
        let nv = tape.constant(noise.clone());
        self.loss_on_tape(tape, bound, xv, nv)
    }

    fn loss_on_tape(&self, tape: &mut Tape, bound: &Bound, x: Var, noise: Var) -> Result<Var> {
        let g = self.graph(tape, bound, x, noise)?;
        let mse = mse_on_tape(tape, g.x_hat, x)?;
        let kl = kl_on_tape(tape, g.mu, g.logvar)?;
        tape.add(mse, kl)
    }

    /// VAE loss as a differentiable function of the input batch, for gradient checks.
    pub fn loss_wrt_input(&self, tape: &mut Tape, x: Var, noise: &Tensor) -> Result<Var> {
        let n = self.check_input(tape.value(x)?)?;
        self.check_noise(n, noise)?;
        let bound = self.params.bind(tape, false);
        let nv = tape.constant(noise.clone());
        self.loss_on_tape(tape, &bound, x, nv)
    }

    /// VAE loss as a function of one named parameter tensor, for gradient checks.
    pub fn loss_wrt_param(
        &self,
        tape: &mut Tape,
        name: &str,
        value: Var,
        x: &Tensor,
        noise: &Tensor,
    ) -> Result<Var> {
        let bound = self.bind_replacing(tape, name, value)?;
        self.loss_graph(tape, &bound, x, noise)
    }

    fn bind_replacing(&self, tape: &mut Tape, name: &str, value: Var) -> Result<Bound> {
        let pos = self
            .params
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::contract(format!("no parameter named {name}")))?;
        let mut bound = self.params.bind(tape, false);
        bound.vars[pos] = value;
        Ok(bound)
    }

    /// Encoder means for a batch of images; the deterministic embedding.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Vec<Vec<f64>>> {
        let n = self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (mu, _) = self.encoder(&mut tape, &bound, xv)?;
        let d = self.arch.latent_dim;
        Ok(tape
            .value(mu)?
            .data()
            .chunks(d)
            .take(n)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Encoder mean of a single image.
    pub fn encode_latent(&self, image: &[f64]) -> Result<Vec<f64>> {
        let x = image_batch(&[image], self.arch.height, self.arch.width)?;
        Ok(self.encode_batch(&x)?.remove(0))
    }

    /// Encodes many images in fixed-size chunks.
    pub fn encode_images(&self, images: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = image_batch(chunk, self.arch.height, self.arch.width)?;
            out.extend(self.encode_batch(&x)?);
        }
        Ok(out)
    }

    /// Mini-batch Adam on the VAE objective. Returns the mean loss of every epoch.
    pub fn train(&mut self, images: &[&[f64]], opts: &TrainOptions) -> Result<Vec<f64>> {
        opts.validate()?;
        if images.is_empty() {
            return Err(Error::EmptyInput("no images to train the VAE on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut adam = AdamState::new(&self.params, opts.lr);
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut history = Vec::with_capacity(opts.epochs);
        let d = self.arch.latent_dim;
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(opts.batch_size) {
                let imgs: Vec<&[f64]> = batch.iter().map(|&i| images[i]).collect();
                let x = image_batch(&imgs, self.arch.height, self.arch.width)?;
                let noise: Vec<f64> = (0..batch.len() * d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let noise = Tensor::new(vec![batch.len(), d], noise)?;
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape, true);
                let loss = self.loss_graph(&mut tape, &bound, &x, &noise)?;
                total += tape.value(loss)?.item()? * batch.len() as f64;
                let grads = bound.grads(&tape, loss)?;
                adam.step(&mut self.params, &grads)?;
            }
            history.push(total / images.len() as f64);
        }
        Ok(history)
    }
}

fn scaled(mut t: Tensor, c: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= c);
    t
}
