//! `GGMD` model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GGMD" | u32 version
//! u32 descriptor entries, each: str key | u8 tag | value
//!     tag 0 = u64, tag 1 = f64, tag 2 = str (u32 length + UTF-8 bytes)
//! u32 tensor count, each: str name | u32 rank | rank x u64 extents | f64 values
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use super::{ParamSet, SegArch, SegModel, VaeArch, VaeModel};
use crate::autodiff::Tensor;
use crate::codec::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GGMD";
pub const VERSION: u32 = 1;

/// Typed value of the architecture descriptor.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchValue {
    U64(u64),
    F64(f64),
    Str(String),
}

/// Either kind of trained model.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Vae(VaeModel),
    Segmenter(SegModel),
}

impl Model {
    fn descriptor(&self) -> Vec<(&'static str, ArchValue)> {
        match self {
            Model::Vae(m) => vec![
                ("kind", ArchValue::Str("vae".into())),
                ("height", ArchValue::U64(m.arch.height as u64)),
                ("width", ArchValue::U64(m.arch.width as u64)),
                (
                    "channels",
                    ArchValue::Str(
                        m.arch
                            .channels
                            .iter()
                            .map(usize::to_string)
                            .collect::<Vec<_>>()
                            .join(","),
                    ),
                ),
                ("latent_dim", ArchValue::U64(m.arch.latent_dim as u64)),
            ],
            Model::Segmenter(m) => vec![
                ("kind", ArchValue::Str("segmenter".into())),
                ("height", ArchValue::U64(m.arch.height as u64)),
                ("width", ArchValue::U64(m.arch.width as u64)),
                ("depth", ArchValue::U64(m.arch.depth as u64)),
                ("base_channels", ArchValue::U64(m.arch.base_channels as u64)),
            ],
        }
    }

    fn params(&self) -> &ParamSet {
        match self {
            Model::Vae(m) => &m.params,
            Model::Segmenter(m) => &m.params,
        }
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    let desc = model.descriptor();
    w.u32(desc.len() as u32);
    for (key, value) in desc {
        w.str(key);
        match value {
            ArchValue::U64(v) => {
                w.u8(0);
                w.u64(v);
            }
            ArchValue::F64(v) => {
                w.u8(1);
                w.f64(v);
            }
            ArchValue::Str(s) => {
                w.u8(2);
                w.str(&s);
            }
        }
    }
    let params = model.params();
    w.u32(params.len() as u32);
    for (name, t) in params.iter() {
        w.str(name);
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.finish_with_crc()
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Model> {
    let mut r = Reader::open(path, bytes, MAGIC, 16)?;
    let at = r.pos();
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.format_error(at, format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let mut desc = Vec::with_capacity(n);
    for _ in 0..n {
        let key = r.str()?;
        let at = r.pos();
        let value = match r.u8()? {
            0 => ArchValue::U64(r.u64()?),
            1 => ArchValue::F64(r.f64()?),
            2 => ArchValue::Str(r.str()?),
            t => return Err(r.format_error(at, format!("unknown descriptor tag {t}"))),
        };
        desc.push((key, value));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.str()?;
        let at = r.pos();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.format_error(at, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = match len {
            Some(l) if l > 0 && l * 8 <= r.remaining() => l,
            _ => return Err(r.format_error(at, format!("bad extents {shape:?}"))),
        };
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    r.expect_end()?;
    let params = ParamSet::from_entries(entries);

    let get_u = |key: &str| -> Result<usize> {
        match desc.iter().find(|(k, _)| k == key) {
            Some((_, ArchValue::U64(v))) => Ok(*v as usize),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("descriptor lacks integer `{key}`"),
            }),
        }
    };
    let get_s = |key: &str| -> Result<String> {
        match desc.iter().find(|(k, _)| k == key) {
            Some((_, ArchValue::Str(v))) => Ok(v.clone()),
            _ => Err(Error::Format {
                path: path.to_path_buf(),
                offset: 0,
                msg: format!("descriptor lacks string `{key}`"),
            }),
        }
    };
    match get_s("kind")?.as_str() {
        "vae" => {
            let channels = get_s("channels")?
                .split(',')
                .map(|c| c.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    msg: "bad channel list".into(),
                })?;
            let arch = VaeArch {
                height: get_u("height")?,
                width: get_u("width")?,
                channels,
                latent_dim: get_u("latent_dim")?,
            };
            Ok(Model::Vae(VaeModel::from_params(arch, params)?))
        }
        "segmenter" => {
            let arch = SegArch {
                height: get_u("height")?,
                width: get_u("width")?,
                depth: get_u("depth")?,
                base_channels: get_u("base_channels")?,
            };
            Ok(Model::Segmenter(SegModel::from_params(arch, params)?))
        }
        other => Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            msg: format!("unknown model kind `{other}`"),
        }),
    }
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    write_file(path, &encode(model))
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    decode(path, &read_file(path)?)
}
