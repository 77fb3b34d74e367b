//! Synthetic two-site tumour phantoms, label utilities, the simulated
//! annotation oracle and the on-disk dataset format.

mod io;
pub mod phantom;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_dataset, write_dataset, GGAS_MAGIC, GGAS_VERSION, MANIFEST_VERSION};
pub use phantom::{generate_phantom_dataset, Cohort, PhantomSpec, SiteParams};

/// Acquisition site. Sites differ in intensity statistics only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    A,
    B,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::A => "A",
            Site::B => "B",
        })
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Site::A),
            "B" | "b" => Ok(Site::B),
            _ => Err(Error::Config(format!("unknown site `{s}` (expected A or B)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image slice. `mask` is the ground truth known to the oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    pub site: Site,
    pub slice_index: usize,
    pub image: Vec<f32>,
    pub mask: Option<Vec<u8>>,
}

impl Sample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }

    pub fn mask_f64(&self) -> Option<Vec<f64>> {
        self.mask
            .as_ref()
            .map(|m| m.iter().map(|&v| v as f64).collect())
    }
}

pub fn sample_id(patient_id: &str, slice_index: usize) -> String {
    format!("{patient_id}_{slice_index}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientInfo {
    pub site: Site,
    pub split: Split,
}

/// Patients with contiguous slices, plus the generator metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub slices_per_patient: usize,
    pub generator_seed: u64,
    pub site_params: BTreeMap<Site, SiteParams>,
    pub patients: BTreeMap<String, PatientInfo>,
    samples: Vec<Sample>,
    by_id: BTreeMap<String, usize>,
}

impl Dataset {
    /// Samples must be grouped by patient with ascending slice indices.
    pub(crate) fn from_parts(
        height: usize,
        width: usize,
        slices_per_patient: usize,
        generator_seed: u64,
        site_params: BTreeMap<Site, SiteParams>,
        patients: BTreeMap<String, PatientInfo>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let info = patients.get(&s.patient_id).ok_or_else(|| {
                Error::contract(format!("sample {} has no patient entry", s.sample_id))
            })?;
            if info.site != s.site {
                return Err(Error::contract(format!("site mismatch for {}", s.sample_id)));
            }
            if s.slice_index >= slices_per_patient {
                return Err(Error::contract(format!(
                    "slice index {} out of range for {}",
                    s.slice_index, s.sample_id
                )));
            }
            if s.image.len() != height * width
                || s.mask.as_ref().is_some_and(|m| m.len() != height * width)
            {
                return Err(Error::dim(format!("{} is not {height}x{width}", s.sample_id)));
            }
            if s.image.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("{} has non-finite pixels", s.sample_id)));
            }
            if s.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v > 1)) {
                return Err(Error::contract(format!("{} mask is not binary", s.sample_id)));
            }
            if by_id.insert(s.sample_id.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate sample id {}", s.sample_id)));
            }
        }
        for (pid, _) in patients.iter() {
            let n = samples.iter().filter(|s| &s.patient_id == pid).count();
            if n != slices_per_patient {
                return Err(Error::contract(format!(
                    "patient {pid} has {n} slices, expected {slices_per_patient}"
                )));
            }
        }
        Ok(Dataset {
            height,
            width,
            slices_per_patient,
            generator_seed,
            site_params,
            patients,
            samples,
            by_id,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: &str) -> Result<&Sample> {
        self.by_id
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::MissingSample(id.to_string()))
    }

    /// The slices of one patient, in slice order.
    pub fn patient_slices(&self, patient_id: &str) -> Result<&[Sample]> {
        let first = self
            .samples
            .iter()
            .position(|s| s.patient_id == patient_id)
            .ok_or_else(|| Error::MissingSample(patient_id.to_string()))?;
        Ok(&self.samples[first..first + self.slices_per_patient])
    }

    /// Patient ids matching the filters, in id order.
    pub fn patient_ids(&self, split: Option<Split>, site: Option<Site>) -> Vec<String> {
        self.patients
            .iter()
            .filter(|(_, p)| split.is_none_or(|s| p.split == s) && site.is_none_or(|s| p.site == s))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Sample ids of the matching patients, grouped by patient.
    pub fn sample_ids(&self, split: Option<Split>, site: Option<Site>) -> Vec<String> {
        let keep: BTreeSet<String> = self.patient_ids(split, site).into_iter().collect();
        self.samples
            .iter()
            .filter(|s| keep.contains(&s.patient_id))
            .map(|s| s.sample_id.clone())
            .collect()
    }
}

/// Merges tumour sub-region codes {1, 2, 4} into one binary label.
pub fn whole_tumour_label(labels: &[u8]) -> Result<Vec<u8>> {
    labels
        .iter()
        .map(|&l| match l {
            0 => Ok(0),
            1 | 2 | 4 => Ok(1),
            other => Err(Error::contract(format!("unexpected label value {other}"))),
        })
        .collect()
}

/// Shifts and scales an image to zero mean and unit (population) variance.
pub fn zscore_normalize(image: &[f64]) -> Result<Vec<f64>> {
    if image.is_empty() {
        return Err(Error::EmptyInput("cannot normalize an empty image".into()));
    }
    let n = image.len() as f64;
    let mean = image.iter().sum::<f64>() / n;
    let var = image.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !sd.is_finite() || sd <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::Degenerate("image has zero variance".into()));
    }
    Ok(image.iter().map(|v| (v - mean) / sd).collect())
}

/// How annotated units are shown to the expert.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    /// Single slices, each shown with its two neighbours for reference.
    Image,
    /// Whole patient volumes.
    Patient,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Image => "image",
            Strategy::Patient => "patient",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Strategy::Image),
            "patient" => Ok(Strategy::Patient),
            _ => Err(Error::Config(format!(
                "unknown strategy `{s}` (expected image or patient)"
            ))),
        }
    }
}

/// An annotated slice ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub sample_id: String,
    pub image: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Simulated expert: hands out ground truth and keeps the annotation bill.
#[derive(Clone, Debug)]
pub struct Annotator {
    strategy: Strategy,
    annotated: BTreeSet<String>,
    labeled: usize,
    context: usize,
}

impl Annotator {
    pub fn new(strategy: Strategy) -> Self {
        Annotator {
            strategy,
            annotated: BTreeSet::new(),
            labeled: 0,
            context: 0,
        }
    }

    pub fn is_annotated(&self, id: &str) -> bool {
        self.annotated.contains(id)
    }

    pub fn annotated(&self) -> &BTreeSet<String> {
        &self.annotated
    }

    pub fn labeled_slices(&self) -> usize {
        self.labeled
    }

    /// Neighbouring slices shown for reference only; two per slice in the
    /// image strategy, never trained on.
    pub fn context_slices(&self) -> usize {
        self.context
    }

    /// Returns the ground truth for `ids`. Already annotated ids are returned
    /// again but cost nothing. Nothing is charged if any id is unknown.
    pub fn annotate(&mut self, dataset: &Dataset, ids: &[String]) -> Result<Vec<Labeled>> {
        let mut out = Vec::with_capacity(ids.len());
        for id in ids {
            let s = dataset.sample(id)?;
            let mask = s.mask_f64().ok_or_else(|| {
                Error::contract(format!("sample {id} has no ground truth to hand out"))
            })?;
            out.push(Labeled {
                sample_id: id.clone(),
                image: s.image_f64(),
                mask,
            });
        }
        for id in ids {
            if self.annotated.insert(id.clone()) {
                self.labeled += 1;
                if self.strategy == Strategy::Image {
                    self.context += 2;
                }
            }
        }
        Ok(out)
    }
}
