//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..4    magic  b"OBCK"
//! bytes 4..8    u32    format version (currently 1)
//! bytes 8..16   u64    JSON header length in bytes
//! ...           UTF-8  JSON header
//! ...           f64    payload: the header's sections, concatenated,
//!                      each value little-endian
//! ```
//!
//! The header carries a caller-defined `meta` object (config echo, seed
//! provenance) plus a `sections` array of `{name, len}` describing the
//! payload. Section order is the payload order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Predictor, PredictorConfig, SpectralState};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"OBCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SectionDesc {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    meta: serde_json::Value,
    sections: Vec<SectionDesc>,
}

/// A named bundle of `f64` arrays plus a JSON metadata object.
pub struct Container {
    pub meta: serde_json::Value,
    pub sections: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container {
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push_section(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.sections.push((name.into(), values));
    }

    pub fn section(&self, name: &str) -> Result<&[f64]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::format(format!("checkpoint section {name:?} missing")))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let header = Header {
            schema_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .map(|(name, values)| SectionDesc {
                    name: name.clone(),
                    len: values.len(),
                })
                .collect(),
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::format(format!("checkpoint header encode: {e}")))?;
        let mut file = fs::File::create(path)?;
        file.write_all(&MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&header_bytes)?;
        for (_, values) in &self.sections {
            for v in values {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path)?;
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::format(format!(
                "{} is not a checkpoint file (bad magic)",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        file.read_exact(&mut buf8)?;
        let header_len = u64::from_le_bytes(buf8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::format(format!("checkpoint header decode: {e}")))?;
        let mut sections = Vec::with_capacity(header.sections.len());
        for desc in header.sections {
            let mut values = vec![0.0f64; desc.len];
            for v in values.iter_mut() {
                file.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
            sections.push((desc.name, values));
        }
        Ok(Container {
            meta: header.meta,
            sections,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    kind: String,
    config: PredictorConfig,
    init_seed: u64,
}

/// Serializes a predictor (parameters plus spectral state) into a container.
pub fn predictor_to_container(predictor: &Predictor) -> Container {
    let meta = PredictorMeta {
        kind: "predictor".to_string(),
        config: predictor.config().clone(),
        init_seed: predictor.init_seed(),
    };
    let mut container = Container::new(serde_json::to_value(meta).expect("meta serializes"));
    container.push_section("params", predictor.flatten_params());
    for (idx, state) in predictor.spectral_states().iter().enumerate() {
        container.push_section(format!("spectral_u_{idx}"), state.u.clone());
        container.push_section(format!("spectral_v_{idx}"), state.v.clone());
    }
    container
}

/// Rebuilds a predictor from a container produced by
/// [`predictor_to_container`].
pub fn predictor_from_container(container: &Container) -> Result<Predictor> {
    let meta: PredictorMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| Error::format(format!("predictor checkpoint meta: {e}")))?;
    let mut predictor = Predictor::init(meta.config.clone(), meta.init_seed)?;
    predictor.set_params(container.section("params")?)?;
    if meta.config.spectral_norm {
        let mut states = Vec::new();
        for idx in 0.. {
            let u_name = format!("spectral_u_{idx}");
            if container.sections.iter().all(|(n, _)| n != &u_name) {
                break;
            }
            states.push(SpectralState {
                u: container.section(&u_name)?.to_vec(),
                v: container.section(&format!("spectral_v_{idx}"))?.to_vec(),
            });
        }
        if states.len() != predictor.featurizer_layers().len() {
            return Err(Error::format(format!(
                "checkpoint has {} spectral states for {} layers",
                states.len(),
                predictor.featurizer_layers().len()
            )));
        }
        predictor.restore_spectral_states(states);
    }
    Ok(predictor)
}

/// Writes a predictor checkpoint file.
pub fn save_predictor(predictor: &Predictor, path: &Path) -> Result<()> {
    predictor_to_container(predictor).write_to(path)
}

/// Reads a predictor checkpoint file.
pub fn load_predictor(path: &Path) -> Result<Predictor> {
    predictor_from_container(&Container::read_from(path)?)
}
