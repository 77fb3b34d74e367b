//! Random instances and straight-line reference implementations shared by
//! the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gradsuggest::autodiff::{Tape, Tensor, Var};
use gradsuggest::data::{generate_phantom_dataset, Dataset, PhantomSpec, Sample, Site};
use gradsuggest::models::{dice_loss_on_tape, SegArch, SegModel, VaeArch, VaeModel};
use gradsuggest::sampling::{hard_dice, LatentIndex, SuggestionQuery, Unit};
use gradsuggest::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Magnitudes in `[lo, hi]` with random signs, so nothing sits near zero.
pub fn signed(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

type Scalar = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One scalar function of one tensor, ready for `grad_check`.
pub struct Case {
    pub name: &'static str,
    /// Smooth cases must meet the tighter tolerance.
    pub smooth: bool,
    pub h: f64,
    pub x: Tensor,
    pub f: Scalar,
}

pub const SMOOTH_TOL: f64 = 1e-7;
pub const KINK_TOL: f64 = 1e-5;

impl Case {
    pub fn tolerance(&self) -> f64 {
        if self.smooth {
            SMOOTH_TOL
        } else {
            KINK_TOL
        }
    }
}

/// Reduces a tensor output to a scalar with fixed weights bounded away from
/// zero, so every output element reaches the gradient.
fn weighted(rng: &mut ChaCha8Rng, shape: &[usize], op: Scalar) -> Scalar {
    let r = signed(rng, shape, 0.5, 1.5);
    Box::new(move |t: &mut Tape, x: Var| {
        let y = op(t, x)?;
        let rv = t.constant(r.clone());
        let p = t.mul(y, rv)?;
        t.sum(p)
    })
}

fn case(name: &'static str, smooth: bool, h: f64, x: Tensor, f: Scalar) -> Case {
    Case { name, smooth, h, x, f }
}

/// Distinct values at least 0.01 apart, shuffled, so pooling windows never tie.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0 + rng.random_range(0.0..0.01)).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

/// One instance of every primitive; binary primitives appear once per operand.
///
/// Primitives that are linear in the checked operand use a large step, where
/// central differences are exact up to rounding.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut g = rng(seed);
    let rng = &mut g;
    let lin = 0.1;
    let mut out = Vec::new();

    let v = |rng: &mut ChaCha8Rng| signed(rng, &[2, 3, 4], 0.5, 2.0);
    macro_rules! binary {
        ($name:literal, $smooth_a:expr, $smooth_b:expr, $ha:expr, $hb:expr, $op:ident) => {{
            let (a, b) = (v(rng), v(rng));
            let bc = b.clone();
            let fa: Scalar = Box::new(move |t, x| {
                let bv = t.constant(bc.clone());
                t.$op(x, bv)
            });
            out.push(case($name, $smooth_a, $ha, a.clone(), weighted(rng, &[2, 3, 4], fa)));
            let fb: Scalar = Box::new(move |t, x| {
                let av = t.constant(a.clone());
                t.$op(av, x)
            });
            out.push(case($name, $smooth_b, $hb, b, weighted(rng, &[2, 3, 4], fb)));
        }};
    }
    binary!("add", true, true, lin, lin, add);
    binary!("sub", true, true, lin, lin, sub);
    binary!("mul", true, true, lin, lin, mul);
    binary!("div", true, true, lin, 1e-5, div);

    let c: f64 = rng.random_range(-2.0..2.0);
    let f: Scalar = Box::new(move |t, x| t.scale(x, c));
    out.push(case("scale", true, lin, v(rng), weighted(rng, &[2, 3, 4], f)));
    let f: Scalar = Box::new(move |t, x| t.add_scalar(x, c));
    out.push(case("add_scalar", true, lin, v(rng), weighted(rng, &[2, 3, 4], f)));

    let (a, b) = (uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0));
    let bc = b.clone();
    let f: Scalar = Box::new(move |t, x| {
        let bv = t.constant(bc.clone());
        t.matmul(x, bv)
    });
    out.push(case("matmul", true, lin, a.clone(), weighted(rng, &[3, 5], f)));
    let f: Scalar = Box::new(move |t, x| {
        let av = t.constant(a.clone());
        t.matmul(av, x)
    });
    out.push(case("matmul", true, lin, b, weighted(rng, &[3, 5], f)));

    for (stride, padding, out_hw) in [(1, 1, 6), (2, 1, 3)] {
        let (x, w) = (uniform(rng, &[2, 2, 6, 6], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0));
        let wc = w.clone();
        let f: Scalar = Box::new(move |t, v| {
            let wv = t.constant(wc.clone());
            t.conv2d(v, wv, stride, padding)
        });
        out.push(case("conv2d", true, lin, x.clone(), weighted(rng, &[2, 3, out_hw, out_hw], f)));
        let f: Scalar = Box::new(move |t, v| {
            let xv = t.constant(x.clone());
            t.conv2d(xv, v, stride, padding)
        });
        out.push(case("conv2d", true, lin, w, weighted(rng, &[2, 3, out_hw, out_hw], f)));
    }

    let (x, w) = (uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(rng, &[3, 2, 4, 4], -1.0, 1.0));
    let wc = w.clone();
    let f: Scalar = Box::new(move |t, v| {
        let wv = t.constant(wc.clone());
        t.conv_transpose2d(v, wv, 2, 1)
    });
    out.push(case("conv_transpose2d", true, lin, x.clone(), weighted(rng, &[2, 2, 6, 6], f)));
    let f: Scalar = Box::new(move |t, v| {
        let xv = t.constant(x.clone());
        t.conv_transpose2d(xv, v, 2, 1)
    });
    out.push(case("conv_transpose2d", true, lin, w, weighted(rng, &[2, 2, 6, 6], f)));

    let (x, b) = (uniform(rng, &[2, 3, 2, 2], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0));
    let bc = b.clone();
    let f: Scalar = Box::new(move |t, v| {
        let bv = t.constant(bc.clone());
        t.bias_add(v, bv)
    });
    out.push(case("bias_add", true, lin, x.clone(), weighted(rng, &[2, 3, 2, 2], f)));
    let f: Scalar = Box::new(move |t, v| {
        let xv = t.constant(x.clone());
        t.bias_add(xv, v)
    });
    out.push(case("bias_add", true, lin, b, weighted(rng, &[2, 3, 2, 2], f)));

    // piecewise linear: inputs stay at least 0.01 from the kink, steps stay below that
    let f: Scalar = Box::new(|t, x| t.relu(x));
    out.push(case("relu", false, 1e-3, signed(rng, &[2, 3, 4], 0.01, 2.0), weighted(rng, &[2, 3, 4], f)));
    let f: Scalar = Box::new(|t, x| t.sigmoid(x));
    out.push(case("sigmoid", true, 1e-5, uniform(rng, &[2, 3, 4], -2.0, 2.0), weighted(rng, &[2, 3, 4], f)));
    let f: Scalar = Box::new(|t, x| t.exp(x));
    out.push(case("exp", true, 1e-5, uniform(rng, &[2, 3, 4], -2.0, 1.0), weighted(rng, &[2, 3, 4], f)));
    let f: Scalar = Box::new(|t, x| t.log(x));
    out.push(case("log", true, 1e-5, uniform(rng, &[2, 3, 4], 0.5, 2.0), weighted(rng, &[2, 3, 4], f)));
    let f: Scalar = Box::new(|t, x| t.square(x));
    out.push(case("square", true, 1e-4, v(rng), weighted(rng, &[2, 3, 4], f)));

    out.push(case("sum", true, lin, uniform(rng, &[2, 3, 4], -2.0, 2.0), Box::new(|t, x| t.sum(x))));
    out.push(case("mean", true, lin, uniform(rng, &[2, 3, 4], -2.0, 2.0), Box::new(|t, x| t.mean(x))));
    let f: Scalar = Box::new(|t, x| t.sum_last_axis(x));
    out.push(case("sum_last_axis", true, lin, uniform(rng, &[2, 3, 4], -2.0, 2.0), weighted(rng, &[2, 3], f)));
    let f: Scalar = Box::new(|t, x| t.reshape(x, &[4, 6]));
    out.push(case("reshape", true, lin, uniform(rng, &[2, 3, 4], -2.0, 2.0), weighted(rng, &[4, 6], f)));

    let other = uniform(rng, &[2, 1, 3, 3], -1.0, 1.0);
    let f: Scalar = Box::new(move |t, x| {
        let o = t.constant(other.clone());
        t.concat_channels(&[o, x, o])
    });
    out.push(case("concat_channels", true, lin, uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), weighted(rng, &[2, 4, 3, 3], f)));

    let f: Scalar = Box::new(|t, x| t.max_pool2d(x, 2));
    out.push(case("max_pool2d", false, 1e-3, separated(rng, &[2, 2, 4, 4]), weighted(rng, &[2, 2, 2, 2], f)));
    let f: Scalar = Box::new(|t, x| t.upsample2d(x, 2));
    out.push(case("upsample2d", true, lin, uniform(rng, &[2, 2, 3, 3], -1.0, 1.0), weighted(rng, &[2, 2, 6, 6], f)));
    out
}

pub fn tiny_vae(seed: u64) -> VaeModel {
    let arch = VaeArch {
        height: 8,
        width: 8,
        channels: vec![2, 4],
        latent_dim: 3,
    };
    VaeModel::new(arch, seed).unwrap()
}

pub fn tiny_seg(seed: u64) -> SegModel {
    let arch = SegArch {
        height: 8,
        width: 8,
        depth: 2,
        base_channels: 2,
    };
    SegModel::new(arch, seed).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect();
    let i = rng.random_range(0..n);
    data[i] = 1.0;
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// VAE loss against the input and against one parameter tensor, the Dice
/// loss against the prediction, and the segmenter's Dice loss against its input.
pub fn composed_cases(seed: u64) -> Vec<Case> {
    let mut g = rng(seed);
    let rng = &mut g;
    let h = 1e-5;
    let mut out = Vec::new();

    let vae = tiny_vae(rng.random());
    let x = uniform(rng, &[2, 1, 8, 8], -2.0, 2.0);
    let noise = uniform(rng, &[2, 3], -1.0, 1.0);
    let (vae_c, noise_c) = (vae.clone(), noise.clone());
    out.push(case(
        "vae_loss/input",
        false,
        h,
        x.clone(),
        Box::new(move |t, v| vae_c.loss_wrt_input(t, v, &noise_c)),
    ));
    let names = ["enc0.w", "mu.w", "logvar.w", "dec.w", "up0.w"];
    let name = names[rng.random_range(0..names.len())];
    let p = vae.params.get(name).unwrap().clone();
    out.push(case(
        "vae_loss/param",
        false,
        h,
        p,
        Box::new(move |t, v| vae.loss_wrt_param(t, name, v, &x, &noise)),
    ));

    let y = random_mask(rng, &[2, 1, 4, 4], 0.4);
    let yc = y.clone();
    out.push(case(
        "dice_loss",
        true,
        1e-6,
        uniform(rng, &[2, 1, 4, 4], 0.05, 0.95),
        Box::new(move |t, v| {
            let yv = t.constant(yc.clone());
            dice_loss_on_tape(t, v, yv)
        }),
    ));

    let seg = tiny_seg(rng.random());
    let y = random_mask(rng, &[1, 1, 8, 8], 0.3);
    out.push(case(
        "seg_dice_loss/input",
        false,
        h,
        uniform(rng, &[1, 1, 8, 8], -2.0, 2.0),
        Box::new(move |t, v| seg.loss_wrt_input(t, v, &y)),
    ));
    out
}

/// Constrained nearest neighbour computed from angles in degrees.
pub fn brute_constrained_nn(
    entries: &[(String, Vec<f64>)],
    source: &[f64],
    target: &[f64],
    theta_max: f64,
    excluded: &BTreeSet<String>,
) -> Option<(String, bool)> {
    let axis: Vec<f64> = target.iter().zip(source).map(|(t, s)| t - s).collect();
    let axis_len = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    let dist = |z: &[f64]| z.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let inside = |z: &[f64]| {
        let d: Vec<f64> = z.iter().zip(source).map(|(a, b)| a - b).collect();
        let len = d.iter().map(|a| a * a).sum::<f64>().sqrt();
        if len == 0.0 {
            return true;
        }
        let cos = d.iter().zip(&axis).map(|(a, b)| a * b).sum::<f64>() / (len * axis_len);
        cos.clamp(-1.0, 1.0).acos().to_degrees() <= theta_max
    };
    let mut candidates: Vec<&(String, Vec<f64>)> = entries.iter().filter(|(id, _)| !excluded.contains(id)).collect();
    candidates.sort_by(|a, b| a.0.cmp(&b.0));
    let nearest = |pool: Vec<&&(String, Vec<f64>)>| -> Option<String> {
        let mut best: Option<(f64, &str)> = None;
        for (id, z) in pool.into_iter().map(|e| (&e.0, &e.1)) {
            let d = dist(z);
            match best {
                Some((bd, bid)) if d > bd || (d == bd && bid < id.as_str()) => {}
                _ => best = Some((d, id)),
            }
        }
        best.map(|(_, id)| id.to_string())
    };
    if axis_len > 0.0 {
        if let Some(id) = nearest(candidates.iter().filter(|e| inside(&e.1)).collect()) {
            return Some((id, false));
        }
    }
    nearest(candidates.iter().collect()).map(|id| (id, true))
}

/// Random index and query on a coarse integer grid in five dimensions, so
/// that distance ties, duplicated points and zero axes all occur.
pub fn random_nn_config(seed: u64) -> (LatentIndex, SuggestionQuery, f64, BTreeSet<String>) {
    let mut r = rng(seed);
    let point = |r: &mut ChaCha8Rng| (0..5).map(|_| r.random_range(-2..=2) as f64).collect::<Vec<f64>>();
    let n = r.random_range(1..=25);
    let mut ids: Vec<usize> = (0..100).collect();
    ids.shuffle(&mut r);
    let entries: Vec<(String, Vec<f64>)> = ids[..n].iter().map(|i| (format!("u{i:03}"), point(&mut r))).collect();
    let z_source = point(&mut r);
    let z_target = if r.random_bool(0.1) {
        z_source.clone()
    } else {
        point(&mut r)
    };
    let theta = match r.random_range(0..10) {
        0 => 180.0,
        1 => 90.0,
        _ => r.random_range(1.0..180.0),
    };
    let excluded: BTreeSet<String> = entries
        .iter()
        .skip(1)
        .filter(|_| r.random_bool(0.2))
        .map(|(id, _)| id.clone())
        .collect();
    let q = SuggestionQuery {
        source_id: "src".into(),
        z_source,
        z_target,
    };
    (LatentIndex::new(entries).unwrap(), q, theta, excluded)
}

/// Unit Dice scores computed slice by slice with single-image forwards.
pub fn exhaustive_unit_scores(seg: &SegModel, pool: &[Unit]) -> Vec<f64> {
    pool.iter()
        .map(|u| {
            let total: f64 = u
                .slices
                .iter()
                .map(|s| {
                    let x = Tensor::new(vec![1, 1, seg.arch.height, seg.arch.width], s.image_f64()).unwrap();
                    let p = seg.forward(&x).unwrap();
                    hard_dice(p.data(), &s.mask_f64().unwrap(), 0.5)
                })
                .sum();
            total / u.slices.len() as f64
        })
        .collect()
}

/// Latent of a unit as the mean of single-image encoder means.
pub fn unit_latent(vae: &VaeModel, slices: &[&Sample]) -> Vec<f64> {
    let d = vae.latent_dim();
    let mut z = vec![0.0; d];
    for s in slices {
        for (a, b) in z.iter_mut().zip(vae.encode_latent(&s.image_f64()).unwrap()) {
            *a += b;
        }
    }
    z.iter().map(|v| v / slices.len() as f64).collect()
}

pub fn small_dataset(seed: u64, patients: usize, slices: usize) -> Dataset {
    generate_phantom_dataset(&PhantomSpec::single(seed, patients, slices, Site::A, 16, 16)).unwrap()
}

fn eval(f: &Scalar, x: &Tensor) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let out = f(&mut t, v).unwrap();
    t.value(out).unwrap().item().unwrap()
}

/// Whether some ReLU or pooling kink lies inside the difference stencil.
/// Central differences at `h` and `h / 4` agree to second order on smooth
/// pieces and disagree at first order across a kink. Uses no gradients.
pub fn straddles_kink(c: &Case) -> bool {
    let slope = |i: usize, h: f64| {
        let (mut p, mut m) = (c.x.clone(), c.x.clone());
        p.data_mut()[i] += h;
        m.data_mut()[i] -= h;
        (eval(&c.f, &p) - eval(&c.f, &m)) / (2.0 * h)
    };
    (0..c.x.len()).any(|i| {
        let (a, b) = (slope(i, c.h), slope(i, c.h / 4.0));
        (a - b).abs() > 1e-3 * a.abs().max(b.abs()).max(1e-6)
    })
}

/// `count` kink-free instances of every composed case, with the number of
/// draws that were set aside.
pub fn composed_instances(count: usize) -> (Vec<Case>, usize) {
    let mut kept: Vec<Case> = Vec::new();
    let mut rejected = 0;
    let mut seed = 0;
    while kept.len() < 4 * count {
        for c in composed_cases(seed) {
            if kept.iter().filter(|k| k.name == c.name).count() == count {
                continue;
            }
            if !c.smooth && straddles_kink(&c) {
                rejected += 1;
            } else {
                kept.push(c);
            }
        }
        seed += 1;
    }
    (kept, rejected)
}
