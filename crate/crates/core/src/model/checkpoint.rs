//! Binary checkpoint format.
//!
//! ```text
//! "SAATCKPT"            8 bytes
//! version               u32 little-endian
//! manifest length       u32 little-endian
//! manifest              UTF-8 JSON: architecture, class count, input shape,
//!                       training metadata, [{name, shape}] in storage order
//! payload               f32 little-endian, tensors concatenated in manifest order
//! ```
//!
//! Parameters come first, then each batchnorm layer's running mean and
//! running variance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Model};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SAATCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    arch: Architecture,
    num_classes: usize,
    input_shape: [usize; 3],
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    manifest: Manifest,
    data: Vec<Vec<f32>>,
}

impl Checkpoint {
    /// Snapshot of `model`; values are stored as `f32`.
    pub fn from_model(model: &Model, meta: TrainingMeta) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (name, p) in model.param_names().iter().zip(model.params()) {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: p.shape().to_vec(),
            });
            data.push(p.data().iter().map(|&v| v as f32).collect());
        }
        for (name, st) in model.bn_names().iter().zip(model.bn_state()) {
            for (suffix, values) in [("running_mean", &st.mean), ("running_var", &st.var)] {
                tensors.push(TensorEntry {
                    name: format!("{name}.{suffix}"),
                    shape: vec![values.len()],
                });
                data.push(values.iter().map(|&v| v as f32).collect());
            }
        }
        Self {
            manifest: Manifest {
                arch: model.arch().clone(),
                num_classes: model.num_classes(),
                input_shape: model.input_shape(),
                meta,
                tensors,
            },
            data,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.manifest.arch
    }

    pub fn meta(&self) -> &TrainingMeta {
        &self.manifest.meta
    }

    pub fn to_model(&self) -> Result<Model> {
        let m = &self.manifest;
        let mut model = Model::build(&m.arch, m.num_classes, m.input_shape, 0)?;
        let np = model.params().len();
        let nb = model.bn_state().len();
        if m.tensors.len() != np + 2 * nb {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, architecture needs {}",
                m.tensors.len(),
                np + 2 * nb
            )));
        }
        let names: Vec<String> = model.param_names().to_vec();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            let entry = &m.tensors[i];
            if entry.name != names[i] || entry.shape != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: stored {} {:?}, expected {} {:?}",
                    entry.name,
                    entry.shape,
                    names[i],
                    p.shape()
                )));
            }
            p.data_mut()
                .iter_mut()
                .zip(&self.data[i])
                .for_each(|(d, &s)| *d = s as f64);
        }
        for (j, st) in model.bn_state_mut().iter_mut().enumerate() {
            let (mi, vi) = (np + 2 * j, np + 2 * j + 1);
            if self.data[mi].len() != st.mean.len() || self.data[vi].len() != st.var.len() {
                return Err(Error::Checkpoint(format!(
                    "batchnorm layer {j}: wrong statistic length"
                )));
            }
            st.mean = self.data[mi].iter().map(|&v| v as f64).collect();
            st.var = self.data[vi].iter().map(|&v| v as f64).collect();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * self.data.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.data {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("missing SAATCKPT magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + len)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let mut offset = 16 + len;
        let mut data = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated payload in {}", entry.name)))?;
            data.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            );
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { manifest, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing {
                what: "checkpoint",
                path: path.to_path_buf(),
                hint: "run `saat train` first or point --checkpoint-dir at a trained model directory",
            },
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let model = Model::build(&Architecture::resnet(), 10, [1, 32, 32], 1).unwrap();
        let ckpt = Checkpoint::from_model(&model, TrainingMeta::default());
        let saved = ckpt.to_model().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let loaded = loaded.to_model().unwrap();
        let mut rng = crate::seed::rng(2);
        for _ in 0..10 {
            let img = Tensor::from_fn(&[1, 1, 32, 32], |_| rng.gen_range(0.0..1.0));
            let a = saved.predict(&img).unwrap();
            let b = loaded.predict(&img).unwrap();
            assert_eq!(a.max_abs_diff(&b), 0.0);
        }
    }

    #[test]
    fn header_checks() {
        let model = Model::build(&Architecture::vgg(), 10, [1, 32, 32], 1).unwrap();
        let bytes = Checkpoint::from_model(&model, TrainingMeta::default())
            .to_bytes()
            .unwrap();
        assert_eq!(&bytes[..8], b"SAATCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/x.ckpt")),
            Err(Error::Missing { .. })
        ));
    }
}
