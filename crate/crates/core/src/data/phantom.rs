//! Tumour phantom generator.
//!
//! Each patient is an elliptical "brain" with a gentle linear shading and a
//! tumour made of one to three rotated ellipses. The tumour grows and shrinks
//! smoothly across slices around a common centre slice. The main ellipse
//! carries a core (label 1), an enhancing rim (label 4) and edema (label 2);
//! satellites are edema only. Sites differ in brain intensity, tumour contrast
//! and noise level.
//!
//! Patient `k` of a dataset draws everything from its own ChaCha stream `k`,
//! so two datasets generated with the same seed share their geometry and noise
//! draws regardless of site.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{sample_id, whole_tumour_label, zscore_normalize, Dataset, PatientInfo, Sample, Site, Split};
use crate::error::{Error, Result};

/// Intensity statistics of one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    /// Mean intensity of healthy brain tissue; air is 0.
    pub brain_mean: f64,
    /// Tumour intensity above the brain, before per-patient and per-label factors.
    pub tumour_contrast: f64,
    pub noise_sigma: f64,
}

impl SiteParams {
    pub fn default_for(site: Site) -> Self {
        match site {
            Site::A => SiteParams {
                brain_mean: 1.0,
                tumour_contrast: 0.8,
                noise_sigma: 0.1,
            },
            Site::B => SiteParams {
                brain_mean: 1.3,
                tumour_contrast: 0.5,
                noise_sigma: 0.2,
            },
        }
    }
}

/// A block of consecutive patients from one site.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub site: Site,
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub slices_per_patient: usize,
    pub cohorts: Vec<Cohort>,
    pub site_params: BTreeMap<Site, SiteParams>,
}

impl PhantomSpec {
    fn default_params() -> BTreeMap<Site, SiteParams> {
        [Site::A, Site::B]
            .into_iter()
            .map(|s| (s, SiteParams::default_for(s)))
            .collect()
    }

    /// `n_patients` training patients from a single site.
    pub fn single(seed: u64, n_patients: usize, slices: usize, site: Site, height: usize, width: usize) -> Self {
        PhantomSpec {
            seed,
            height,
            width,
            slices_per_patient: slices,
            cohorts: vec![Cohort {
                site,
                train: n_patients,
                test: 0,
            }],
            site_params: Self::default_params(),
        }
    }

    /// Several cohorts at the default 32x32, 8-slice geometry.
    pub fn desk(seed: u64, cohorts: Vec<Cohort>) -> Self {
        PhantomSpec {
            seed,
            height: 32,
            width: 32,
            slices_per_patient: 8,
            cohorts,
            site_params: Self::default_params(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::dim(format!(
                "phantom size {}x{} must be positive and divisible by 4",
                self.height, self.width
            )));
        }
        if self.slices_per_patient == 0 {
            return Err(Error::contract("need at least one slice per patient"));
        }
        let total: usize = self.cohorts.iter().map(|c| c.train + c.test).sum();
        if total == 0 {
            return Err(Error::contract("need at least one patient"));
        }
        if total > 1000 {
            return Err(Error::contract("patient ids are limited to three digits"));
        }
        for c in &self.cohorts {
            let p = self
                .site_params
                .get(&c.site)
                .ok_or_else(|| Error::contract(format!("no parameters for site {}", c.site)))?;
            if !(p.brain_mean.is_finite() && p.tumour_contrast.is_finite())
                || !(p.noise_sigma >= 0.0 && p.noise_sigma.is_finite())
            {
                return Err(Error::contract(format!("invalid parameters for site {}", c.site)));
            }
        }
        Ok(())
    }
}

/// One rendered slice before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice {
    pub image: Vec<f64>,
    /// Sub-region codes in {0, 1, 2, 4}.
    pub labels: Vec<u8>,
    /// Brain support (tumour included).
    pub brain: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawPatient {
    pub patient_id: String,
    pub site: Site,
    pub split: Split,
    pub slices: Vec<RawSlice>,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    /// Squared normalized radius of `(x, y)`; inside when <= 1.
    fn rho2(&self, x: f64, y: f64, scale: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / (self.rx * scale);
        let v = (-dx * s + dy * c) / (self.ry * scale);
        u * u + v * v
    }
}

struct Anatomy {
    brain: Ellipse,
    shade: (f64, f64),
    tumour: Vec<Ellipse>,
    centre_slice: f64,
    half_extent: f64,
    contrast_factor: f64,
}

fn draw_anatomy(rng: &mut ChaCha8Rng, h: usize, w: usize, slices: usize) -> Anatomy {
    let (hf, wf) = (h as f64, w as f64);
    let brain = Ellipse {
        cx: wf / 2.0 - 0.5 + rng.random_range(-1.0..1.0),
        cy: hf / 2.0 - 0.5 + rng.random_range(-1.0..1.0),
        rx: wf * rng.random_range(0.36..0.42),
        ry: hf * rng.random_range(0.40..0.46),
        angle: rng.random_range(-0.2..0.2),
    };
    let shade = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let n_parts = rng.random_range(1..=3);
    let scale = wf.min(hf) / 32.0;
    let main = Ellipse {
        cx: brain.cx + brain.rx * rng.random_range(-0.45..0.45),
        cy: brain.cy + brain.ry * rng.random_range(-0.45..0.45),
        rx: scale * rng.random_range(2.5..6.5),
        ry: scale * rng.random_range(2.5..6.5),
        angle: rng.random_range(0.0..std::f64::consts::PI),
    };
    let mut tumour = vec![main];
    for _ in 1..n_parts {
        let (dir, reach) = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.6..1.2));
        tumour.push(Ellipse {
            cx: main.cx + dir.cos() * main.rx * reach,
            cy: main.cy + dir.sin() * main.ry * reach,
            rx: main.rx * rng.random_range(0.4..0.8),
            ry: main.ry * rng.random_range(0.4..0.8),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    let s = slices as f64;
    Anatomy {
        brain,
        shade,
        tumour,
        centre_slice: (s - 1.0) * rng.random_range(0.3..0.7),
        half_extent: s * rng.random_range(0.45..0.8),
        contrast_factor: rng.random_range(0.6..1.4),
    }
}

fn render_slice(
    rng: &mut ChaCha8Rng,
    a: &Anatomy,
    params: &SiteParams,
    k: usize,
    h: usize,
    w: usize,
    slices: usize,
) -> RawSlice {
    let mid = (slices as f64 - 1.0) / 2.0;
    let brain_scale = (1.0 - 0.3 * ((k as f64 - mid) / slices as f64).powi(2)).sqrt();
    let t = (k as f64 - a.centre_slice) / a.half_extent;
    let tumour_scale = (1.0 - t * t).max(0.0).sqrt();
    let mut image = vec![0.0; h * w];
    let mut labels = vec![0u8; h * w];
    let mut brain = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let i = y * w + x;
            if a.brain.rho2(xf, yf, brain_scale) > 1.0 {
                continue;
            }
            brain[i] = true;
            let shading = a.shade.0 * (xf - a.brain.cx) / w as f64 + a.shade.1 * (yf - a.brain.cy) / h as f64;
            image[i] = params.brain_mean + shading;
            if tumour_scale <= 0.0 {
                continue;
            }
            let main = a.tumour[0].rho2(xf, yf, tumour_scale);
            let label = if main <= 0.16 {
                1
            } else if main <= 0.49 {
                4
            } else if main <= 1.0 || a.tumour[1..].iter().any(|e| e.rho2(xf, yf, tumour_scale) <= 1.0) {
                2
            } else {
                0
            };
            let factor = match label {
                1 => 0.9,
                4 => 1.2,
                2 => 0.7,
                _ => 0.0,
            };
            labels[i] = label;
            image[i] += params.tumour_contrast * a.contrast_factor * factor;
        }
    }
    for v in image.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v += params.noise_sigma * e;
    }
    RawSlice { image, labels, brain }
}

/// Renders every patient of `spec` without normalization.
pub fn generate_raw(spec: &PhantomSpec) -> Result<Vec<RawPatient>> {
    spec.validate()?;
    let mut out = Vec::new();
    let mut index = 0u64;
    for cohort in &spec.cohorts {
        let params = spec.site_params[&cohort.site];
        for j in 0..cohort.train + cohort.test {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index);
            let anatomy = draw_anatomy(&mut rng, spec.height, spec.width, spec.slices_per_patient);
            let slices = (0..spec.slices_per_patient)
                .map(|k| {
                    render_slice(
                        &mut rng,
                        &anatomy,
                        &params,
                        k,
                        spec.height,
                        spec.width,
                        spec.slices_per_patient,
                    )
                })
                .collect();
            out.push(RawPatient {
                patient_id: format!("{}{index:03}", cohort.site),
                site: cohort.site,
                split: if j < cohort.train { Split::Train } else { Split::Test },
                slices,
            });
            index += 1;
        }
    }
    Ok(out)
}

/// Renders, z-scores and labels every patient of `spec`.
pub fn generate_phantom_dataset(spec: &PhantomSpec) -> Result<Dataset> {
    let raw = generate_raw(spec)?;
    let mut patients = BTreeMap::new();
    let mut samples = Vec::new();
    for p in raw {
        patients.insert(
            p.patient_id.clone(),
            PatientInfo {
                site: p.site,
                split: p.split,
            },
        );
        for (k, s) in p.slices.into_iter().enumerate() {
            let image = zscore_normalize(&s.image)?;
            samples.push(Sample {
                sample_id: sample_id(&p.patient_id, k),
                patient_id: p.patient_id.clone(),
                site: p.site,
                slice_index: k,
                image: image.into_iter().map(|v| v as f32).collect(),
                mask: Some(whole_tumour_label(&s.labels)?),
            });
        }
    }
    samples.sort_by(|a, b| (&a.patient_id, a.slice_index).cmp(&(&b.patient_id, b.slice_index)));
    let used: BTreeMap<Site, SiteParams> = spec
        .site_params
        .iter()
        .filter(|(s, _)| spec.cohorts.iter().any(|c| c.site == **s))
        .map(|(s, p)| (*s, *p))
        .collect();
    Dataset::from_parts(
        spec.height,
        spec.width,
        spec.slices_per_patient,
        spec.seed,
        used,
        patients,
        samples,
    )
}
