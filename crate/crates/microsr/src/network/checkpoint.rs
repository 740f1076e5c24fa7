//! Versioned binary checkpoint container.
//!
//! Layout: an 8-byte magic, a u32 format version, a length-prefixed JSON
//! metadata block (the architecture configs plus optional training state),
//! then a count of named tensors, each serialized as
//! `(u32 name length, name bytes, u8 ndim, u64 dims, f32 little-endian data)`.
//! Values are stored exactly as the in-memory `f32` bits, so a save/load
//! round trip is bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::discriminator::{Discriminator, DiscriminatorConfig};
use super::features::{FeatureConfig, FeatureNet};
use super::generator::{Generator, GeneratorConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MSRCKPT\0";
const VERSION: u32 = 1;

/// Shape plus flat data of one stored tensor.
pub type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Training progress carried inside training checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub global_step: u64,
    /// Adam bias-correction step counts.
    pub adam_step_g: u64,
    pub adam_step_d: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub features: FeatureConfig,
    #[serde(default)]
    pub training: Option<TrainMeta>,
}

/// The full set of weights the pipeline trains or keeps fixed.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub features: FeatureNet<f32>,
}

impl NetworkParams {
    /// Fresh deterministic initialization from the three configs.
    pub fn init(
        generator: GeneratorConfig,
        discriminator: DiscriminatorConfig,
        features: FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(NetworkParams {
            generator: Generator::new(generator, seed)?,
            discriminator: Discriminator::new(discriminator, seedderive(seed, 1))?,
            features: FeatureNet::new(features)?,
        })
    }

    fn meta(&self, training: Option<TrainMeta>) -> CheckpointMeta {
        CheckpointMeta {
            generator: self.generator.config,
            discriminator: self.discriminator.config,
            features: self.features.config.clone(),
            training,
        }
    }

    fn tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new();
        let mut collect = |name: &str, shape: &[usize], data: &[f32], _trainable: bool| {
            map.insert(name.to_string(), (shape.to_vec(), data.to_vec()));
        };
        self.generator.visit_tensors(&mut collect);
        self.discriminator.visit_tensors(&mut collect);
        self.features.visit_tensors(&mut collect);
        map
    }

    /// Writes this parameter set, plus optional optimizer tensors (their
    /// names must start with `opt.`).
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        training: Option<TrainMeta>,
        extra: &TensorMap,
    ) -> Result<()> {
        let mut tensors = self.tensor_map();
        for (name, value) in extra {
            if !name.starts_with("opt.") {
                return Err(Error::Checkpoint(format!(
                    "extra tensor {name} must be namespaced under opt."
                )));
            }
            tensors.insert(name.clone(), value.clone());
        }
        let meta = serde_json::to_string(&self.meta(training))?;
        write_tensor_file(path, &meta, &tensors)
    }

    /// Reads a checkpoint back, validating every tensor against the shape
    /// its config implies. Returns the nets, the training state (if the
    /// checkpoint was mid-run), and any `opt.` tensors.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<TrainMeta>, TensorMap)> {
        let (meta_json, mut tensors) = read_container(path.as_ref())?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_json)?;
        let mut params = NetworkParams::init(
            meta.generator,
            meta.discriminator,
            meta.features.clone(),
            0,
        )?;
        let mut problems = Vec::new();
        {
            let mut apply = |name: &str, data: &mut [f32], _trainable: bool| {
                match tensors.remove(name) {
                    Some((_, values)) if values.len() == data.len() => {
                        data.copy_from_slice(&values)
                    }
                    Some((shape, _)) => {
                        problems.push(format!("{name}: stored shape {shape:?} mismatches config"))
                    }
                    None => problems.push(format!("{name}: missing")),
                }
            };
            params.generator.visit_tensors_mut(&mut apply);
            params.discriminator.visit_tensors_mut(&mut apply);
            params.features.visit_tensors_mut(&mut apply);
        }
        let extra: TensorMap = tensors
            .iter()
            .filter(|(name, _)| name.starts_with("opt."))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        for name in tensors.keys() {
            if !name.starts_with("opt.") {
                problems.push(format!("{name}: not part of the configured networks"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        Ok((params, meta.training, extra))
    }
}

fn seedderive(seed: u64, stream: u64) -> u64 {
    crate::rng::splitmix64(seed ^ crate::rng::splitmix64(stream))
}

/// Writes a raw container with arbitrary named tensors.
pub fn write_tensor_file(path: impl AsRef<Path>, meta_json: &str, tensors: &TensorMap) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    let meta = meta_json.as_bytes();
    w.write_all(&(meta.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(meta).map_err(io_err)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes()).map_err(io_err)?;
    for (name, (shape, data)) in tensors {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name_bytes).map_err(io_err)?;
        w.write_all(&[shape.len() as u8]).map_err(io_err)?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for &v in data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Reads the tensors of a container, ignoring the metadata.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorMap> {
    Ok(read_container(path.as_ref())?.1)
}

fn read_container(path: &Path) -> Result<(String, TensorMap)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let meta_len = read_u32(&mut r, path)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(|e| Error::io(path, e))?;
    let meta = String::from_utf8(meta).map_err(|_| bad("metadata is not UTF-8"))?;

    let n_tensors = read_u64(&mut r, path)?;
    let mut tensors = TensorMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(|e| Error::io(path, e))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u64(&mut r, path)? as usize);
        }
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name, (shape, data));
    }
    Ok((meta, tensors))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}
