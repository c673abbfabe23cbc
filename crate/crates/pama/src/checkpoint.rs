//! Checkpoint persistence.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic "PAMC" | u32 version = 1 | u32 json_len | JSON header | raw blob
//! ```
//!
//! The JSON header carries the geometry and model hyperparameters, the
//! global step, the optional optimizer step counter, and a section index:
//! `{name, dtype, offset, length}` per tensor, with offsets/lengths in
//! bytes relative to the blob. Sections are written as f64 so that a
//! save/load round trip reproduces eval outputs bit for bit; the reader
//! also accepts f32 sections (widened on load) for compactness-oriented
//! producers.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytesio::{Cursor, OutOfData};
use crate::geometry::GeometryConfig;
use crate::model::{ModelHyper, ModelParams};
use crate::training::AdamState;

pub const CKPT_MAGIC: &[u8; 4] = b"PAMC";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset {offset}: {found:02x?}")]
    BadMagic { offset: u64, found: [u8; 4] },
    #[error("unsupported checkpoint version {found} at offset {offset}")]
    UnsupportedVersion { offset: u64, found: u32 },
    #[error("file truncated at offset {offset}: {needed} more bytes needed")]
    Truncated { offset: u64, needed: u64 },
    #[error("header JSON at offset {offset} is invalid: {message}")]
    HeaderJson { offset: u64, message: String },
    #[error("section `{name}` [{offset}, +{length}) exceeds blob of {blob_len} bytes")]
    SectionBounds { name: String, offset: u64, length: u64, blob_len: u64 },
    #[error("section `{name}` holds {got} elements, expected {expected}")]
    SectionShape { name: String, expected: usize, got: usize },
    #[error("section `{name}` missing from the checkpoint")]
    MissingSection { name: String },
    #[error("checkpoint contains unknown section `{name}`")]
    UnknownSection { name: String },
    #[error("section `{name}` has unsupported dtype `{dtype}`")]
    BadDtype { name: String, dtype: String },
    #[error("checkpoint hyperparameters are invalid: {0}")]
    Hyper(String),
    #[error("hyperparameter mismatch on {field}: checkpoint has {checkpoint}, expected {expected}")]
    HyperMismatch { field: &'static str, checkpoint: String, expected: String },
}

impl From<OutOfData> for CheckpointError {
    fn from(e: OutOfData) -> Self {
        CheckpointError::Truncated { offset: e.offset as u64, needed: e.needed as u64 }
    }
}

#[derive(Serialize, Deserialize)]
struct SectionMeta {
    name: String,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    geometry: GeometryConfig,
    hyper: ModelHyper,
    global_step: u64,
    opt_step: Option<u64>,
    sections: Vec<SectionMeta>,
}

/// A trained (or freshly initialized) model plus everything needed to
/// resume or evaluate it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub geometry: GeometryConfig,
    pub hyper: ModelHyper,
    pub params: ModelParams,
    pub opt: Option<AdamState>,
    pub global_step: u64,
}

impl Checkpoint {
    /// Rejects checkpoints whose position-table sizes disagree with the
    /// given geometry (e.g. loading an N=8 model against an N=16 config).
    pub fn ensure_geometry_matches(&self, g: &GeometryConfig) -> Result<(), CheckpointError> {
        if self.hyper.polar_bins != g.polar_bins {
            return Err(CheckpointError::HyperMismatch {
                field: "polar_bins",
                checkpoint: self.hyper.polar_bins.to_string(),
                expected: g.polar_bins.to_string(),
            });
        }
        if self.hyper.d_max != g.d_max {
            return Err(CheckpointError::HyperMismatch {
                field: "d_max",
                checkpoint: self.hyper.d_max.to_string(),
                expected: g.d_max.to_string(),
            });
        }
        Ok(())
    }
}

fn push_section(
    sections: &mut Vec<SectionMeta>,
    blob: &mut Vec<u8>,
    name: String,
    data: &[f64],
) {
    let offset = blob.len() as u64;
    for v in data {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    sections.push(SectionMeta {
        name,
        dtype: "f64".into(),
        offset,
        length: (data.len() * 8) as u64,
    });
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut sections = Vec::new();
    let mut blob = Vec::new();
    ckpt.params
        .for_each_named(&mut |name, t| push_section(&mut sections, &mut blob, name, &t.data));
    if let Some(opt) = &ckpt.opt {
        for (name, m) in &opt.m {
            push_section(&mut sections, &mut blob, format!("opt.m.{name}"), m);
        }
        for (name, v) in &opt.v {
            push_section(&mut sections, &mut blob, format!("opt.v.{name}"), v);
        }
    }
    let header = Header {
        geometry: ckpt.geometry.clone(),
        hyper: ckpt.hyper.clone(),
        global_step: ckpt.global_step,
        opt_step: ckpt.opt.as_ref().map(|o| o.step),
        sections,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    Ok(std::fs::write(path, checkpoint_to_bytes(ckpt))?)
}

fn read_section(
    blob: &[u8],
    meta: &SectionMeta,
    expected_elems: usize,
) -> Result<Vec<f64>, CheckpointError> {
    let elem_size: usize = match meta.dtype.as_str() {
        "f64" => 8,
        "f32" => 4,
        other => {
            return Err(CheckpointError::BadDtype {
                name: meta.name.clone(),
                dtype: other.into(),
            })
        }
    };
    let (offset, length) = (meta.offset as usize, meta.length as usize);
    if offset.checked_add(length).is_none_or(|end| end > blob.len()) {
        return Err(CheckpointError::SectionBounds {
            name: meta.name.clone(),
            offset: meta.offset,
            length: meta.length,
            blob_len: blob.len() as u64,
        });
    }
    let got = length / elem_size;
    if length % elem_size != 0 || got != expected_elems {
        return Err(CheckpointError::SectionShape {
            name: meta.name.clone(),
            expected: expected_elems,
            got,
        });
    }
    let bytes = &blob[offset..offset + length];
    Ok(match elem_size {
        8 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        _ => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    })
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor::new(bytes);
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if &magic != CKPT_MAGIC {
        return Err(CheckpointError::BadMagic { offset: 0, found: magic });
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { offset: 4, found: version });
    }
    let json_len = cur.u32()? as usize;
    let json_offset = cur.offset() as u64;
    let json = cur.take(json_len)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| {
        CheckpointError::HeaderJson { offset: json_offset, message: e.to_string() }
    })?;
    header
        .hyper
        .validate()
        .map_err(|e| CheckpointError::Hyper(e.to_string()))?;
    header
        .geometry
        .validate()
        .map_err(|e| CheckpointError::Hyper(e.to_string()))?;
    let blob = cur.take(cur.remaining())?;

    let by_name: BTreeMap<&str, &SectionMeta> =
        header.sections.iter().map(|s| (s.name.as_str(), s)).collect();

    // parameters are rebuilt shape-first from the hyperparameters, then
    // filled section by section
    let mut params = ModelParams::init(&header.hyper, 0)
        .map_err(|e| CheckpointError::Hyper(e.to_string()))?;
    let mut expected: BTreeMap<String, usize> = BTreeMap::new();
    params.for_each_named(&mut |name, t| {
        expected.insert(name, t.numel());
    });
    let mut err: Option<CheckpointError> = None;
    params.for_each_named_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match by_name.get(name.as_str()) {
            None => err = Some(CheckpointError::MissingSection { name }),
            Some(meta) => match read_section(blob, meta, t.numel()) {
                Ok(data) => t.data = data,
                Err(e) => err = Some(e),
            },
        }
    });
    if let Some(e) = err {
        return Err(e);
    }

    // optimizer moments: optional, but sections and the step counter must
    // agree, and every moment must shadow a real parameter
    let mut opt = header.opt_step.map(|step| AdamState {
        step,
        m: BTreeMap::new(),
        v: BTreeMap::new(),
    });
    for meta in &header.sections {
        if expected.contains_key(&meta.name) {
            continue;
        }
        let (kind, param) = match meta.name.split_once("opt.m.") {
            Some(("", p)) => ("m", p),
            _ => match meta.name.split_once("opt.v.") {
                Some(("", p)) => ("v", p),
                _ => return Err(CheckpointError::UnknownSection { name: meta.name.clone() }),
            },
        };
        let Some(state) = opt.as_mut() else {
            return Err(CheckpointError::UnknownSection { name: meta.name.clone() });
        };
        let Some(&numel) = expected.get(param) else {
            return Err(CheckpointError::UnknownSection { name: meta.name.clone() });
        };
        let data = read_section(blob, meta, numel)?;
        if kind == "m" {
            state.m.insert(param.to_string(), data);
        } else {
            state.v.insert(param.to_string(), data);
        }
    }

    Ok(Checkpoint {
        geometry: header.geometry,
        hyper: header.hyper,
        params,
        opt,
        global_step: header.global_step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
