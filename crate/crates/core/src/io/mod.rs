//! Binary dataset and checkpoint files, run configuration, run-directory locks.
//!
//! Both file kinds share one container layout:
//!
//! ```text
//! "divfree-<kind> <version>\n"
//! u64 LE    header length in bytes
//! JSON      {"meta": {...}, "arrays": [{"name", "dtype", "shape"}, ...]}
//! payload   arrays in header order, little-endian, row-major
//! ```

pub mod config;

pub use config::{EvalSection, RunConfig, SceneSection};

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scenegen::{Bbox, SceneConfig, TrajectoryDataset};
use crate::training::{Normalization, TrainConfig, TrainedModel};
use crate::{Networks, Vec3};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_KIND: &str = "dataset";
pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            Self::F64(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            Self::F64(_) => "f64",
            Self::U32(_) => "u32",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f64(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::F64(data),
        }
    }

    pub fn u32(name: &str, shape: Vec<usize>, data: Vec<u32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::U32(data),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Value,
    arrays: Vec<ArrayHeader>,
}

/// Typed arrays plus a JSON metadata object.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<Array>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut headers = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::shape("array payload", expected, a.data.len()));
            }
            headers.push(ArrayHeader {
                name: a.name.clone(),
                dtype: a.data.dtype().into(),
                shape: a.shape.clone(),
            });
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays: headers,
        })
        .map_err(|e| Error::InvalidInput(format!("cannot encode header: {e}")))?;
        let mut out = format!("divfree-{} {FORMAT_VERSION}\n", self.kind).into_bytes();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    /// Parses and checks every declared shape against the payload length.
    /// `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .filter(|&i| i < 64)
            .ok_or_else(|| format_err(path, "missing version line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| format_err(path, "version line is not text"))?;
        let (kind, version) = line
            .strip_prefix("divfree-")
            .and_then(|r| r.split_once(' '))
            .ok_or_else(|| format_err(path, format!("not a divfree file (version line {line:?})")))?;
        let version: u32 = version
            .parse()
            .map_err(|_| format_err(path, format!("bad version {version:?}")))?;
        if version != FORMAT_VERSION {
            return Err(format_err(
                path,
                format!("unsupported format version {version}, this build reads {FORMAT_VERSION}"),
            ));
        }
        let mut pos = nl + 1;
        let len_bytes = bytes
            .get(pos..pos + 8)
            .ok_or_else(|| format_err(path, "truncated header length"))?;
        let header_len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        pos += 8;
        let header_bytes = bytes
            .get(pos..pos.saturating_add(header_len))
            .ok_or_else(|| format_err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| format_err(path, format!("bad header: {e}")))?;
        pos += header_len;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for h in header.arrays {
            let count = h
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| format_err(path, format!("array {} is too large", h.name)))?;
            let width = match h.dtype.as_str() {
                "f64" => 8,
                "u32" => 4,
                other => return Err(format_err(path, format!("unknown dtype {other:?}"))),
            };
            let end = count
                .checked_mul(width)
                .and_then(|n| n.checked_add(pos))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| format_err(path, format!("payload of array {} is truncated", h.name)))?;
            let raw = &bytes[pos..end];
            let data = if width == 8 {
                ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            } else {
                ArrayData::U32(
                    raw.chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            };
            arrays.push(Array {
                name: h.name,
                shape: h.shape,
                data,
            });
            pos = end;
        }
        if pos != bytes.len() {
            return Err(format_err(
                path,
                format!("{} trailing bytes after the declared arrays", bytes.len() - pos),
            ));
        }
        Ok(Self {
            kind: kind.to_string(),
            meta: header.meta,
            arrays,
        })
    }

    fn find(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// The named `f64` array, checked against `shape`.
    pub fn f64_array(&self, name: &str, shape: &[usize], path: &Path) -> Result<&[f64]> {
        match self.find(name) {
            Some(Array {
                shape: s,
                data: ArrayData::F64(v),
                ..
            }) if s == shape => Ok(v),
            Some(a) => Err(format_err(
                path,
                format!("array {name} has shape {:?} ({}), expected {shape:?} (f64)", a.shape, a.data.dtype()),
            )),
            None => Err(format_err(path, format!("missing array {name}"))),
        }
    }

    pub fn u32_array(&self, name: &str, shape: &[usize], path: &Path) -> Result<&[u32]> {
        match self.find(name) {
            Some(Array {
                shape: s,
                data: ArrayData::U32(v),
                ..
            }) if s == shape => Ok(v),
            Some(a) => Err(format_err(
                path,
                format!("array {name} has shape {:?} ({}), expected {shape:?} (u32)", a.shape, a.data.dtype()),
            )),
            None => Err(format_err(path, format!("missing array {name}"))),
        }
    }

    fn shape_of(&self, name: &str) -> Option<&[usize]> {
        self.find(name).map(|a| a.shape.as_slice())
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{path:?} is not a file path")))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Text (JSON, tables) written atomically.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn read_container(path: &Path, kind: &str) -> Result<Container> {
    let c = Container::from_bytes(&read_bytes(path)?, path)?;
    if c.kind != kind {
        return Err(format_err(path, format!("expected a {kind} file, found a {} file", c.kind)));
    }
    Ok(c)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    scene: SceneConfig,
    bbox: Bbox,
    first_frame: usize,
}

pub fn dataset_container(d: &TrajectoryDataset) -> Result<Container> {
    d.validate()?;
    let (f, n) = (d.frames(), d.particles());
    let mut arrays = vec![
        Array::f64("timestamps", vec![f], d.timestamps.clone()),
        Array::f64("positions", vec![f, n, 3], d.positions.clone()),
    ];
    if let Some(o) = &d.orientations {
        arrays.push(Array::f64("orientations", vec![f, n, 4], o.clone()));
    }
    arrays.push(Array::u32("labels", vec![n], d.labels.clone()));
    let meta = serde_json::to_value(DatasetMeta {
        scene: d.scene.clone(),
        bbox: d.bbox,
        first_frame: d.first_frame,
    })
    .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(Container {
        kind: DATASET_KIND.into(),
        meta,
        arrays,
    })
}

pub fn save_dataset(path: &Path, d: &TrajectoryDataset) -> Result<()> {
    write_atomic(path, &dataset_container(d)?.to_bytes()?)
}

pub fn load_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let c = read_container(path, DATASET_KIND)?;
    let meta: DatasetMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| format_err(path, format!("bad dataset metadata: {e}")))?;
    let n = match c.shape_of("labels") {
        Some([n]) => *n,
        _ => return Err(format_err(path, "labels must be a vector")),
    };
    let f = match c.shape_of("timestamps") {
        Some([f]) => *f,
        _ => return Err(format_err(path, "timestamps must be a vector")),
    };
    let orientations = match c.shape_of("orientations") {
        Some(_) => Some(c.f64_array("orientations", &[f, n, 4], path)?.to_vec()),
        None => None,
    };
    let d = TrajectoryDataset {
        scene: meta.scene,
        timestamps: c.f64_array("timestamps", &[f], path)?.to_vec(),
        positions: c.f64_array("positions", &[f, n, 3], path)?.to_vec(),
        orientations,
        labels: c.u32_array("labels", &[n], path)?.to_vec(),
        bbox: meta.bbox,
        first_frame: meta.first_frame,
    };
    d.validate()?;
    Ok(d)
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    normalization: Normalization,
    dt: f64,
    train_end: f64,
}

pub fn model_container(m: &TrainedModel) -> Result<Container> {
    let n = m.canonical.len();
    let mut arrays = vec![Array::f64(
        "canonical",
        vec![n, 3],
        m.canonical.iter().flat_map(|p| p.to_array()).collect(),
    )];
    for (i, b) in m.nets.param_blocks().iter().enumerate() {
        arrays.push(Array::f64(&format!("params.{i}"), vec![b.len()], b.to_vec()));
    }
    let meta = serde_json::to_value(CheckpointMeta {
        config: m.config.clone(),
        normalization: m.normalization,
        dt: m.dt,
        train_end: m.train_end,
    })
    .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(Container {
        kind: CHECKPOINT_KIND.into(),
        meta,
        arrays,
    })
}

pub fn save_model(path: &Path, m: &TrainedModel) -> Result<()> {
    write_atomic(path, &model_container(m)?.to_bytes()?)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let c = read_container(path, CHECKPOINT_KIND)?;
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| format_err(path, format!("bad checkpoint metadata: {e}")))?;
    let n = match c.shape_of("canonical") {
        Some([n, 3]) => *n,
        _ => return Err(format_err(path, "canonical positions must be n × 3")),
    };
    let canonical: Vec<Vec3> = c
        .f64_array("canonical", &[n, 3], path)?
        .chunks_exact(3)
        .map(Vec3::from_slice)
        .collect();
    // the architecture comes from the config; the values are overwritten below
    let mut nets = Networks::init(
        meta.config.network.clone(),
        meta.config.ablation,
        n,
        &canonical,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let mut blocks = nets.param_blocks_mut();
    let stored = c.arrays.iter().filter(|a| a.name.starts_with("params.")).count();
    if stored != blocks.len() {
        return Err(format_err(
            path,
            format!("checkpoint has {stored} parameter blocks, the configured model has {}", blocks.len()),
        ));
    }
    for (i, b) in blocks.iter_mut().enumerate() {
        b.copy_from_slice(c.f64_array(&format!("params.{i}"), &[b.len()], path)?);
    }
    Ok(TrainedModel {
        nets,
        normalization: meta.normalization,
        canonical,
        dt: meta.dt,
        train_end: meta.train_end,
        config: meta.config,
    })
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE_NAME: &'static str = ".divfree.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(Self::FILE_NAME);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
