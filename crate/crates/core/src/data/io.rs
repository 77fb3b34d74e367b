//! Dataset directories: `manifest.json` plus one `GGAS` file per slice.
//!
//! ```text
//! "GGAS" | u32 version | u32 H | u32 W | H*W f32 image
//! u8 mask flag | H*W mask bytes when the flag is 1
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{sample_id, Dataset, PatientInfo, Sample, Site, SiteParams};
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const GGAS_MAGIC: &[u8; 4] = b"GGAS";
pub const GGAS_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    slices_per_patient: usize,
    sites: Vec<Site>,
    generator_seed: u64,
    site_parameters: BTreeMap<Site, SiteParams>,
    patients: BTreeMap<String, PatientInfo>,
}

fn encode_slice(s: &Sample, h: usize, w: usize) -> Vec<u8> {
    let mut out = Writer::default();
    out.bytes(GGAS_MAGIC);
    out.u32(GGAS_VERSION);
    out.u32(h as u32);
    out.u32(w as u32);
    for &v in &s.image {
        out.f32(v);
    }
    match &s.mask {
        Some(m) => {
            out.u8(1);
            out.bytes(m);
        }
        None => out.u8(0),
    }
    out.finish_with_crc()
}

/// Image and optional mask of one `GGAS` file.
fn decode_slice(path: &Path, bytes: &[u8], h: usize, w: usize) -> Result<(Vec<f32>, Option<Vec<u8>>)> {
    let mut r = Reader::open(path, bytes, GGAS_MAGIC, 21)?;
    let at = r.pos();
    let version = r.u32()?;
    if version != GGAS_VERSION {
        return Err(r.format_error(at, format!("unsupported slice version {version}")));
    }
    let at = r.pos();
    let (fh, fw) = (r.u32()? as usize, r.u32()? as usize);
    if (fh, fw) != (h, w) {
        return Err(r.format_error(at, format!("slice is {fh}x{fw}, manifest says {h}x{w}")));
    }
    let mut image = Vec::with_capacity(h * w);
    for _ in 0..h * w {
        image.push(r.f32()?);
    }
    let at = r.pos();
    let mask = match r.u8()? {
        0 => None,
        1 => {
            let at = r.pos();
            let m = r.take(h * w)?.to_vec();
            if let Some(i) = m.iter().position(|&v| v > 1) {
                return Err(r.format_error(at + i, "mask byte is not 0 or 1"));
            }
            Some(m)
        }
        f => return Err(r.format_error(at, format!("bad mask flag {f}"))),
    };
    r.expect_end()?;
    Ok((image, mask))
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut sites: Vec<Site> = dataset.patients.values().map(|p| p.site).collect();
    sites.sort();
    sites.dedup();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        height: dataset.height,
        width: dataset.width,
        slices_per_patient: dataset.slices_per_patient,
        sites,
        generator_seed: dataset.generator_seed,
        site_parameters: dataset.site_params.clone(),
        patients: dataset.patients.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    for s in dataset.samples() {
        let name = format!("{}.ggs", s.sample_id);
        write_file(&dir.join(name), &encode_slice(s, dataset.height, dataset.width))?;
    }
    // the manifest goes last so a half-written directory does not look complete
    write_file(&dir.join(MANIFEST), text.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Format {
            path: mpath,
            offset: 0,
            msg: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let (h, w) = (manifest.height, manifest.width);
    let mut samples = Vec::with_capacity(manifest.patients.len() * manifest.slices_per_patient);
    for (pid, info) in &manifest.patients {
        for k in 0..manifest.slices_per_patient {
            let id = sample_id(pid, k);
            let path = dir.join(format!("{id}.ggs"));
            let (image, mask) = decode_slice(&path, &read_file(&path)?, h, w)?;
            samples.push(Sample {
                sample_id: id,
                patient_id: pid.clone(),
                site: info.site,
                slice_index: k,
                image,
                mask,
            });
        }
    }
    Dataset::from_parts(
        h,
        w,
        manifest.slices_per_patient,
        manifest.generator_seed,
        manifest.site_parameters,
        manifest.patients,
        samples,
    )
}
