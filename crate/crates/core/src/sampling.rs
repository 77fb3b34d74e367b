//! Suggestion of unannotated samples: the gradient-guided chain and the
//! random and oracle baselines.
//!
//! The gradient chain perturbs each annotated image along the input gradient
//! of its Dice loss, embeds both images with the VAE encoder mean, and picks
//! the real pool sample nearest to the perturbed embedding inside a cone that
//! opens from the original embedding towards the perturbed one.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::data::{Dataset, Sample, Strategy};
use crate::error::{Error, Result};
use crate::models::{image_batch, SegModel, VaeModel, DICE_EPS};

pub const DEFAULT_ALPHA: f64 = 1e-4;
pub const DEFAULT_THETA_MAX: f64 = 45.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Random,
    Gradient,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Random, Method::Gradient, Method::Oracle];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Random => "random",
            Method::Gradient => "gradient",
            Method::Oracle => "oracle",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Method::Random),
            "gradient" => Ok(Method::Gradient),
            "oracle" => Ok(Method::Oracle),
            _ => Err(Error::Config(format!(
                "unknown method `{s}` (expected random, gradient or oracle)"
            ))),
        }
    }
}

/// A selectable unit: one slice, or all slices of one patient.
#[derive(Clone, Debug)]
pub struct Unit<'a> {
    pub id: String,
    pub slices: Vec<&'a Sample>,
}

/// Groups sample ids into units. Patient units keep the first-seen patient
/// order and the given slice order.
pub fn units<'a>(dataset: &'a Dataset, sample_ids: &[String], strategy: Strategy) -> Result<Vec<Unit<'a>>> {
    let mut out: Vec<Unit<'a>> = Vec::new();
    for id in sample_ids {
        let s = dataset.sample(id)?;
        match strategy {
            Strategy::Image => out.push(Unit {
                id: id.clone(),
                slices: vec![s],
            }),
            Strategy::Patient => match out.iter_mut().find(|u| u.id == s.patient_id) {
                Some(u) => u.slices.push(s),
                None => out.push(Unit {
                    id: s.patient_id.clone(),
                    slices: vec![s],
                }),
            },
        }
    }
    Ok(out)
}

/// Id-addressed latent vectors of the unannotated pool, sorted by id.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentIndex {
    entries: Vec<(String, Vec<f64>)>,
}

impl LatentIndex {
    pub fn new(mut entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::contract(format!("duplicate index id {}", w[0].0)));
        }
        if let Some(first) = entries.first() {
            let d = first.1.len();
            if d == 0 || entries.iter().any(|(_, z)| z.len() != d) {
                return Err(Error::dim("latent vectors must share one positive length"));
            }
        }
        Ok(LatentIndex { entries })
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.1.len())
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries
            .binary_search_by(|e| e.0.as_str().cmp(id))
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }
}

fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    for v in vectors {
        out.iter_mut().zip(v).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= vectors.len() as f64);
    out
}

/// Encoder means of the slices of each unit, averaged per unit.
fn unit_latents(vae: &VaeModel, slice_images: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<&[f64]> = slice_images.iter().flatten().map(Vec::as_slice).collect();
    let codes = vae.encode_images(&flat)?;
    let mut out = Vec::with_capacity(slice_images.len());
    let mut at = 0;
    for unit in slice_images {
        out.push(mean_vector(&codes[at..at + unit.len()]));
        at += unit.len();
    }
    Ok(out)
}

/// One entry per unit: the slice latent, or the mean slice latent of a patient.
pub fn build_latent_index(vae: &VaeModel, pool: &[Unit]) -> Result<LatentIndex> {
    if pool.is_empty() || pool.iter().any(|u| u.slices.is_empty()) {
        return Err(Error::EmptyInput("cannot index an empty pool".into()));
    }
    let images: Vec<Vec<Vec<f64>>> = pool
        .iter()
        .map(|u| u.slices.iter().map(|s| s.image_f64()).collect())
        .collect();
    let z = unit_latents(vae, &images)?;
    LatentIndex::new(pool.iter().map(|u| u.id.clone()).zip(z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuggestionQuery {
    pub source_id: String,
    pub z_source: Vec<f64>,
    pub z_target: Vec<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Whether `z` lies in the cone with vertex `source`, axis `axis` and half
/// angle `theta` (radians). The vertex itself counts as inside.
fn in_cone(z: &[f64], source: &[f64], axis: &[f64], axis_norm: f64, cos_theta: f64, theta: f64) -> bool {
    let mut dot = 0.0;
    let mut norm2 = 0.0;
    for ((zi, si), ai) in z.iter().zip(source).zip(axis) {
        let d = zi - si;
        dot += d * ai;
        norm2 += d * d;
    }
    if norm2 == 0.0 || theta >= std::f64::consts::PI {
        return true;
    }
    dot >= cos_theta * axis_norm * norm2.sqrt()
}

/// Nearest non-excluded entry to `z_target` inside the cone at `z_source`
/// pointing towards `z_target`, with half angle `theta_max` degrees.
///
/// Falls back to the plain nearest neighbour when the cone holds no
/// candidate or the axis has zero length; the flag reports the fallback.
/// Distance ties go to the smallest id.
pub fn query_constrained_nn(
    index: &LatentIndex,
    q: &SuggestionQuery,
    theta_max: f64,
    excluded: &BTreeSet<String>,
) -> Result<(String, bool)> {
    if !(theta_max > 0.0 && theta_max <= 180.0) {
        return Err(Error::contract(format!(
            "theta_max must lie in (0, 180] degrees, got {theta_max}"
        )));
    }
    let d = index.dim();
    if q.z_source.len() != q.z_target.len() || (d > 0 && q.z_source.len() != d) {
        return Err(Error::dim(format!(
            "query latents of length {} and {} against an index of dimension {d}",
            q.z_source.len(),
            q.z_target.len()
        )));
    }
    let axis: Vec<f64> = q.z_target.iter().zip(&q.z_source).map(|(t, s)| t - s).collect();
    let axis_norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    let theta = theta_max.to_radians();
    let cos_theta = theta.cos();

    let mut best_in: Option<(f64, &str)> = None;
    let mut best_any: Option<(f64, &str)> = None;
    // entries are id-sorted, so a strict `<` keeps the smallest id on ties
    for (id, z) in index.entries() {
        if excluded.contains(id) {
            continue;
        }
        let dd = dist2(z, &q.z_target);
        if best_any.is_none_or(|(b, _)| dd < b) {
            best_any = Some((dd, id));
        }
        if axis_norm > 0.0
            && in_cone(z, &q.z_source, &axis, axis_norm, cos_theta, theta)
            && best_in.is_none_or(|(b, _)| dd < b)
        {
            best_in = Some((dd, id));
        }
    }
    match (best_in, best_any) {
        (Some((_, id)), _) => Ok((id.to_string(), false)),
        (None, Some((_, id))) => Ok((id.to_string(), true)),
        (None, None) => Err(Error::PoolExhausted {
            requested: 1,
            available: 0,
        }),
    }
}

/// Anything that can report `∂ L_Dice(y, f(x)) / ∂x` for a batch of one.
pub trait InputGradient {
    fn input_gradient(&self, x: &Tensor, y: &Tensor) -> Result<Tensor>;
}

impl InputGradient for SegModel {
    fn input_gradient(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        SegModel::input_gradient(self, x, y)
    }
}

/// `x + alpha * ∂L_Dice(y, f(x))/∂x` with the model frozen.
pub fn gradient_ascend_input<M: InputGradient + ?Sized>(model: &M, x: &Tensor, y: &Tensor, alpha: f64) -> Result<Tensor> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("step size must be finite and >= 0, got {alpha}")));
    }
    if x.shape() != y.shape() {
        return Err(Error::dim(format!(
            "image {:?} and mask {:?} differ in shape",
            x.shape(),
            y.shape()
        )));
    }
    let g = model.input_gradient(x, y)?;
    if g.shape() != x.shape() {
        return Err(Error::dim("input gradient does not match the image shape"));
    }
    let mut out = x.clone();
    out.data_mut().iter_mut().zip(g.data()).for_each(|(v, gi)| *v += alpha * gi);
    Ok(out)
}

/// The encoder mean of a perturbed image.
pub fn project_to_latent(vae: &VaeModel, x_prime: &[f64]) -> Result<Vec<f64>> {
    vae.encode_latent(x_prime)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuggestionResult {
    pub selected_ids: Vec<String>,
    pub fallback_count: usize,
    pub method: Method,
    pub strategy: Strategy,
}

fn check_selection(selected: &[String], forbidden: &BTreeSet<&str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in selected {
        if !seen.insert(id.as_str()) {
            return Err(Error::contract(format!("suggestion repeats {id}")));
        }
        if forbidden.contains(id.as_str()) {
            return Err(Error::contract(format!("suggestion {id} is already annotated")));
        }
    }
    Ok(())
}

fn strategy_of(units: &[Unit]) -> Strategy {
    match units.first() {
        Some(u) if u.slices.len() == 1 && u.id == u.slices[0].sample_id => Strategy::Image,
        Some(_) => Strategy::Patient,
        None => Strategy::Image,
    }
}

fn labeled(s: &Sample, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let mask = s
        .mask_f64()
        .ok_or_else(|| Error::contract(format!("annotated sample {} has no mask", s.sample_id)))?;
    Ok((image_batch(&[&s.image_f64()], h, w)?, image_batch(&[&mask], h, w)?))
}

/// The query of one annotated unit: mean latents of its original and of its
/// gradient-perturbed slices.
pub fn build_query<M: InputGradient + ?Sized>(
    seg: &M,
    vae: &VaeModel,
    source: &Unit,
    alpha: f64,
) -> Result<SuggestionQuery> {
    let (h, w) = (vae.arch.height, vae.arch.width);
    let mut originals = Vec::with_capacity(source.slices.len());
    let mut perturbed = Vec::with_capacity(source.slices.len());
    for s in &source.slices {
        let (x, y) = labeled(s, h, w)?;
        perturbed.push(gradient_ascend_input(seg, &x, &y, alpha)?.into_data());
        originals.push(x.into_data());
    }
    let z = unit_latents(vae, &[originals, perturbed])?;
    let mut z = z.into_iter();
    Ok(SuggestionQuery {
        source_id: source.id.clone(),
        z_source: z.next().unwrap(),
        z_target: z.next().unwrap(),
    })
}

/// One suggestion per annotated unit, taking the first `m` sources in id
/// order and excluding earlier picks from later queries.
pub fn suggest_gradient_guided<M: InputGradient + ?Sized>(
    seg: &M,
    vae: &VaeModel,
    annotated: &[Unit],
    index: &LatentIndex,
    m: usize,
    alpha: f64,
    theta_max: f64,
) -> Result<SuggestionResult> {
    if m > annotated.len() {
        return Err(Error::contract(format!(
            "{m} suggestions need as many annotated sources, have {}",
            annotated.len()
        )));
    }
    if m > index.len() {
        return Err(Error::PoolExhausted {
            requested: m,
            available: index.len(),
        });
    }
    let forbidden: BTreeSet<&str> = annotated
        .iter()
        .flat_map(|u| std::iter::once(u.id.as_str()).chain(u.slices.iter().map(|s| s.sample_id.as_str())))
        .collect();
    if let Some((id, _)) = index.entries().iter().find(|(id, _)| forbidden.contains(id.as_str())) {
        return Err(Error::contract(format!("annotated unit {id} is in the latent index")));
    }
    let mut sources: Vec<&Unit> = annotated.iter().collect();
    sources.sort_by(|a, b| a.id.cmp(&b.id));
    let mut excluded = BTreeSet::new();
    let mut selected = Vec::with_capacity(m);
    let mut fallbacks = 0;
    for source in sources.into_iter().take(m) {
        let q = build_query(seg, vae, source, alpha)?;
        let (id, fell_back) = query_constrained_nn(index, &q, theta_max, &excluded)?;
        fallbacks += usize::from(fell_back);
        excluded.insert(id.clone());
        selected.push(id);
    }
    check_selection(&selected, &forbidden)?;
    Ok(SuggestionResult {
        selected_ids: selected,
        fallback_count: fallbacks,
        method: Method::Gradient,
        strategy: strategy_of(annotated),
    })
}

/// `m` ids drawn uniformly without replacement; a pure function of the id
/// set and the seed.
pub fn suggest_random(pool_ids: &[String], m: usize, seed: u64, strategy: Strategy) -> Result<SuggestionResult> {
    if m > pool_ids.len() {
        return Err(Error::PoolExhausted {
            requested: m,
            available: pool_ids.len(),
        });
    }
    let mut ids = pool_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != pool_ids.len() {
        return Err(Error::contract("pool ids are not unique"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (picked, _) = ids.partial_shuffle(&mut rng, m);
    Ok(SuggestionResult {
        selected_ids: picked.to_vec(),
        fallback_count: 0,
        method: Method::Random,
        strategy,
    })
}

/// Dice score `(2|P∩G| + ε) / (|P| + |G| + ε)` of a thresholded prediction.
pub fn hard_dice(prob: &[f64], mask: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut p, mut g) = (0.0, 0.0, 0.0);
    for (&pr, &m) in prob.iter().zip(mask) {
        let on = if pr > threshold { 1.0 } else { 0.0 };
        inter += on * m;
        p += on;
        g += m;
    }
    (2.0 * inter + DICE_EPS) / (p + g + DICE_EPS)
}

/// Per-unit Dice score of `seg`, averaged over the slices of each unit.
pub fn unit_scores(seg: &SegModel, pool: &[Unit]) -> Result<Vec<f64>> {
    let images: Vec<Vec<f64>> = pool.iter().flat_map(|u| u.slices.iter().map(|s| s.image_f64())).collect();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let probs = seg.predict(&refs)?;
    let mut probs = probs.iter();
    pool.iter()
        .map(|u| {
            let mut total = 0.0;
            for s in &u.slices {
                let mask = s.mask_f64().ok_or_else(|| {
                    Error::contract(format!("oracle needs ground truth for {}", s.sample_id))
                })?;
                total += hard_dice(probs.next().unwrap(), &mask, 0.5);
            }
            Ok(total / u.slices.len() as f64)
        })
        .collect()
}

/// The `m` units on which the current model scores worst; ties by id.
pub fn suggest_oracle(seg: &SegModel, pool: &[Unit], m: usize) -> Result<SuggestionResult> {
    if m > pool.len() {
        return Err(Error::PoolExhausted {
            requested: m,
            available: pool.len(),
        });
    }
    let scores = unit_scores(seg, pool)?;
    let mut order: Vec<(f64, &str)> = scores.into_iter().zip(pool.iter().map(|u| u.id.as_str())).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let selected: Vec<String> = order.into_iter().take(m).map(|(_, id)| id.to_string()).collect();
    check_selection(&selected, &BTreeSet::new())?;
    Ok(SuggestionResult {
        selected_ids: selected,
        fallback_count: 0,
        method: Method::Oracle,
        strategy: strategy_of(pool),
    })
}

/// The suggestion list: a comment header, then one id per line.
pub fn render_suggestions(result: &SuggestionResult) -> String {
    let mut text = format!(
        "# method={} strategy={} fallbacks={}\n",
        result.method, result.strategy, result.fallback_count
    );
    for id in &result.selected_ids {
        text.push_str(id);
        text.push('\n');
    }
    text
}

pub fn write_suggestions(path: &Path, result: &SuggestionResult) -> Result<()> {
    std::fs::write(path, render_suggestions(result)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_suggestions(path: &Path) -> Result<SuggestionResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        msg: msg.to_string(),
    };
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .ok_or_else(|| bad("missing `# method=.. strategy=.. fallbacks=..` header"))?;
    let (mut method, mut strategy, mut fallbacks) = (None, None, None);
    for field in header.split_whitespace() {
        match field.split_once('=') {
            Some(("method", v)) => method = Some(v.parse::<Method>()?),
            Some(("strategy", v)) => strategy = Some(v.parse::<Strategy>()?),
            Some(("fallbacks", v)) => fallbacks = Some(v.parse::<usize>().map_err(|_| bad("bad fallback count"))?),
            _ => return Err(bad("unknown header field")),
        }
    }
    let (Some(method), Some(strategy), Some(fallback_count)) = (method, strategy, fallbacks) else {
        return Err(bad("incomplete header"));
    };
    Ok(SuggestionResult {
        selected_ids: lines.filter(|l| !l.trim().is_empty()).map(str::to_string).collect(),
        fallback_count,
        method,
        strategy,
    })
}
