//! The `UAM1` model file: magic, format version, a JSON header, then every
//! parameter as little-endian f32 in declaration order followed by the
//! running input mean and variance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ops::Tensor;
use super::uamat::{LayerKind, ModelMeta, Param, UamatConfig, UamatModel};
use crate::binfmt;
use crate::domain::TaxonomySubset;
use crate::error::{Error, Result};

const UAM_MAGIC: &[u8; 4] = b"UAM1";
const UAM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct UamHeader {
    config: UamatConfig,
    n_classes: usize,
    input_shape: [usize; 2],
    params: Vec<ParamHeader>,
    meta: ModelMeta,
}

impl UamatModel {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(UAM_MAGIC)?;
        binfmt::write_u32(w, UAM_VERSION)?;
        let header = UamHeader {
            config: self.config,
            n_classes: self.n_classes(),
            input_shape: [self.config.mel_bands, self.config.mel_frames],
            params: self
                .params
                .iter()
                .map(|p| ParamHeader {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        binfmt::write_json_header(w, &header)?;
        for p in &self.params {
            for &v in p.tensor.data() {
                binfmt::write_f32(w, v as f32)?;
            }
        }
        binfmt::write_f32(w, self.running_mean as f32)?;
        binfmt::write_f32(w, self.running_var as f32)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binfmt::expect_magic(r, UAM_MAGIC)?;
        binfmt::expect_version(r, UAM_VERSION)?;
        let header: UamHeader = binfmt::read_json_header(r)?;
        header.config.validate()?;
        if header.n_classes != header.config.taxonomy.size() {
            return Err(Error::Format(format!(
                "header declares {} classes for a C={} model",
                header.n_classes,
                header.config.taxonomy.size()
            )));
        }
        // the layout must be exactly what this build would construct
        let template = UamatModel::new(header.config, 0)?;
        if template.params.len() != header.params.len()
            || template
                .params
                .iter()
                .zip(&header.params)
                .any(|(t, h)| t.name != h.name || t.kind != h.kind || t.tensor.shape() != h.shape.as_slice())
        {
            return Err(Error::Format("parameter layout does not match the model configuration".into()));
        }
        let mut params = Vec::with_capacity(header.params.len());
        for h in header.params {
            let n: usize = h.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from(binfmt::read_f32(r, &h.name)?));
            }
            params.push(Param {
                tensor: Tensor::new(h.shape, data).map_err(|_| Error::Format(format!("non-finite values in {}", h.name)))?,
                name: h.name,
                kind: h.kind,
            });
        }
        let running_mean = f64::from(binfmt::read_f32(r, "running mean")?);
        let running_var = f64::from(binfmt::read_f32(r, "running variance")?);
        if !running_mean.is_finite() || !(running_var >= 0.0) {
            return Err(Error::Format("invalid running statistics".into()));
        }
        Ok(UamatModel {
            config: header.config,
            params,
            running_mean,
            running_var,
            meta: header.meta,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory cannot fail");
        out
    }

    /// Hex SHA-256 of the serialized model.
    pub fn hash(&self) -> String {
        binfmt::content_hash(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        UamatModel::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Like [`UamatModel::load`], but fails unless the model was trained for
    /// `expected`.
    pub fn load_for(path: &Path, expected: TaxonomySubset) -> Result<Self> {
        let m = UamatModel::load(path)?;
        if m.config.taxonomy != expected {
            return Err(Error::TaxonomyMismatch {
                found: m.config.taxonomy.size(),
                expected: expected.size(),
            });
        }
        Ok(m)
    }
}
