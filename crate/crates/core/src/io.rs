//! On-disk formats: the `EEDT` tensor dump, IDX image files, dataset,
//! model and activation manifests, and report output.
//!
//! `EEDT` layout, all integers little-endian:
//!
//! | bytes        | field                          |
//! |--------------|--------------------------------|
//! | 4            | magic `EEDT`                   |
//! | 2            | version, `u16` = 1             |
//! | 1            | dtype: 0 = `f32`, 1 = `u8`     |
//! | 1            | ndim                           |
//! | 4 * ndim     | dims, `u32` each               |
//! | rest         | row-major payload              |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actions::{circular_mask, rotate2, ROTATION_CONVENTION};
use crate::error::{Error, Result};
use crate::groups::{FiniteGroup, GroupKind};
use crate::metrics::{EedReport, OrbitSource};
use crate::runtime::{Layer, ModelSpec};
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"EEDT";
pub const DUMP_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U8: u8 = 1;

/// A decoded tensor dump. Byte payloads are kept as bytes.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorDump {
    F32(Tensor),
    U8 { dims: Vec<usize>, data: Vec<u8> },
}

impl TensorDump {
    pub fn dims(&self) -> &[usize] {
        match self {
            TensorDump::F32(t) => t.dims(),
            TensorDump::U8 { dims, .. } => dims,
        }
    }

    /// The payload as a real tensor; bytes convert to their integer value.
    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            TensorDump::F32(t) => Ok(t),
            TensorDump::U8 { dims, data } => {
                Tensor::new(dims, data.into_iter().map(f32::from).collect())
            }
        }
    }
}

fn header(dtype: u8, dims: &[usize]) -> Result<Vec<u8>> {
    let ndim = u8::try_from(dims.len())
        .map_err(|_| Error::invalid("tensor has more than 255 dimensions"))?;
    let mut out = Vec::with_capacity(8 + 4 * dims.len());
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(ndim);
    for &d in dims {
        let d =
            u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_tensor_dump(dump: &TensorDump) -> Result<Vec<u8>> {
    match dump {
        TensorDump::F32(t) => {
            let mut out = header(DTYPE_F32, t.dims())?;
            out.reserve(4 * t.len());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            Ok(out)
        }
        TensorDump::U8 { dims, data } => {
            let mut out = header(DTYPE_U8, dims)?;
            out.extend_from_slice(data);
            Ok(out)
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    self.bytes.len() as u64,
                    format!("truncated {what}: need {n} bytes at offset {}", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_tensor_dump(bytes: &[u8]) -> Result<TensorDump> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4, "magic")?;
    if magic != DUMP_MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:02x?}, expected \"EEDT\""),
        ));
    }
    let at = cur.offset();
    let version = cur.u16_le("version")?;
    if version != DUMP_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let at = cur.offset();
    let dtype = cur.u8("dtype")?;
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(Error::format(at, format!("unknown dtype {other}"))),
    };
    let at = cur.offset();
    let ndim = cur.u8("ndim")? as usize;
    if ndim == 0 {
        return Err(Error::format(
            at,
            "zero-dimensional tensors are not supported",
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = cur.offset();
        let d = cur.u32_le("dims")? as usize;
        if d == 0 {
            return Err(Error::format(at, "zero-length dimension"));
        }
        dims.push(d);
    }
    let payload_at = cur.offset();
    let expected = dims
        .iter()
        .try_fold(elem, |acc: usize, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(payload_at, format!("dims {dims:?} overflow")))?;
    let remaining = bytes.len() - cur.pos;
    if remaining != expected {
        return Err(Error::format(
            payload_at,
            format!("payload is {remaining} bytes but dims {dims:?} need {expected}"),
        ));
    }
    let payload = cur.take(expected, "payload")?;
    match dtype {
        DTYPE_F32 => {
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::format(payload_at + 4 * i as u64, "non-finite value"));
            }
            Ok(TensorDump::F32(Tensor::new(dims, data)?))
        }
        _ => Ok(TensorDump::U8 {
            dims,
            data: payload.to_vec(),
        }),
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format { offset, message } => Error::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    }
}

pub fn write_tensor_dump(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(
        path.as_ref(),
        &encode_tensor_dump(&TensorDump::F32(t.clone()))?,
    )
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<TensorDump> {
    let path = path.as_ref();
    decode_tensor_dump(&read_bytes(path)?).map_err(|e| in_file(path, e))
}

pub fn read_tensor_dump(path: impl AsRef<Path>) -> Result<Tensor> {
    read_dump(path)?.into_tensor()
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_header(cur: &mut Cursor<'_>, magic: u32, what: &str) -> Result<Vec<usize>> {
    let found = cur.u32_be("magic")?;
    if found != magic {
        return Err(Error::format(
            0,
            format!("magic {found:#010x} is not an IDX {what} file (expected {magic:#010x})"),
        ));
    }
    let ndim = (magic & 0xff) as usize;
    (0..ndim)
        .map(|_| Ok(cur.u32_be("dimension")? as usize))
        .collect()
}

fn idx_payload<'a>(cur: &mut Cursor<'a>, len: usize, total: usize) -> Result<&'a [u8]> {
    let at = cur.offset();
    let rest = total - cur.pos;
    if rest != len {
        return Err(Error::format(
            at,
            format!("payload is {rest} bytes, header declares {len}"),
        ));
    }
    cur.take(len, "payload")
}

pub fn decode_idx_images(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut cur = Cursor::new(bytes);
    let dims = idx_header(&mut cur, IDX_IMAGES, "image")?;
    let (count, h, w) = (dims[0], dims[1], dims[2]);
    if count > 0 && (h == 0 || w == 0) {
        return Err(Error::format(4, "zero image size"));
    }
    let payload = idx_payload(&mut cur, count * h * w, bytes.len())?;
    if count == 0 {
        return Ok(Vec::new());
    }
    payload
        .chunks_exact(h * w)
        .map(|img| Tensor::new(vec![h, w], img.iter().map(|&b| b as f32 / 255.0).collect()))
        .collect()
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut cur = Cursor::new(bytes);
    let dims = idx_header(&mut cur, IDX_LABELS, "label")?;
    Ok(idx_payload(&mut cur, dims[0], bytes.len())?.to_vec())
}

/// Images from an IDX file, scaled to `[0, 1]`.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let path = path.as_ref();
    decode_idx_images(&read_bytes(path)?).map_err(|e| in_file(path, e))
}

pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    decode_idx_labels(&read_bytes(path)?).map_err(|e| in_file(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetItem {
    /// Tensor file, relative to the manifest.
    pub tensor: String,
    pub label: usize,
    /// Group element applied to this item, when the dataset was rotated.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub element: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Preprocessing {
    pub mask: bool,
    /// Group whose elements were applied, e.g. `c8`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rotation_group: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rotation_convention: Option<String>,
    /// Original labels dropped before relabelling.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub excluded_classes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub split: String,
    pub classes: usize,
    pub preprocessing: Preprocessing,
    pub items: Vec<DatasetItem>,
}

/// A manifest together with its images, in item order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor>,
}

fn item_path(i: usize) -> String {
    format!("items/{i:06}.eedt")
}

impl Dataset {
    fn from_parts(
        name: String,
        split: String,
        classes: usize,
        preprocessing: Preprocessing,
        labelled: Vec<(Tensor, usize, Option<usize>)>,
    ) -> Self {
        let mut items = Vec::with_capacity(labelled.len());
        let mut images = Vec::with_capacity(labelled.len());
        for (i, (img, label, element)) in labelled.into_iter().enumerate() {
            items.push(DatasetItem {
                tensor: item_path(i),
                label,
                element,
            });
            images.push(img);
        }
        Dataset {
            manifest: DatasetManifest {
                name,
                split,
                classes,
                preprocessing,
                items,
            },
            images,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.manifest.items.iter().map(|i| i.label)
    }

    fn validate(&self) -> Result<()> {
        if self.images.len() != self.manifest.items.len() {
            return Err(Error::invalid("dataset images and items differ in count"));
        }
        if let Some(item) = self
            .manifest
            .items
            .iter()
            .find(|i| i.label >= self.manifest.classes)
        {
            return Err(Error::invalid(format!(
                "{}: label {} outside [0, {})",
                item.tensor, item.label, self.manifest.classes
            )));
        }
        Ok(())
    }

    /// Writes `manifest.json` plus one tensor dump per item under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        self.validate()?;
        let dir = dir.as_ref();
        for (item, img) in self.manifest.items.iter().zip(&self.images) {
            write_tensor_dump(img, dir.join(&item.tensor))?;
        }
        let path = dir.join("manifest.json");
        write_json(&self.manifest, &path)?;
        Ok(path)
    }

    /// Reads a manifest and every tensor it references.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let manifest: DatasetManifest = read_json(path)?;
        let base = base_dir(path);
        let images = manifest
            .items
            .iter()
            .map(|item| read_tensor_dump(base.join(&item.tensor)))
            .collect::<Result<Vec<_>>>()?;
        let ds = Dataset { manifest, images };
        ds.validate()?;
        Ok(ds)
    }
}

/// Builds a dataset from IDX image and label files.
pub fn import_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    name: &str,
    split: &str,
) -> Result<Dataset> {
    let imgs = read_idx_images(&images)?;
    let labels = read_idx_labels(&labels)?;
    if imgs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} images but {} labels",
            imgs.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(Dataset::from_parts(
        name.to_string(),
        split.to_string(),
        classes,
        Preprocessing {
            source: Some(images.as_ref().display().to_string()),
            ..Preprocessing::default()
        },
        imgs.into_iter()
            .zip(labels)
            .map(|(i, l)| (i, l as usize, None))
            .collect(),
    ))
}

/// Rotates each kept image by a seeded uniform element of the cyclic
/// `group`, optionally masks it, and relabels the remaining classes to
/// `0..k` in their original order.
pub fn build_rotated_dataset(
    src: &Dataset,
    group: &FiniteGroup,
    mask: bool,
    exclude_classes: &BTreeSet<usize>,
    seed: u64,
) -> Result<Dataset> {
    let n = match group.kind() {
        GroupKind::Cyclic(n) => n,
        _ => {
            return Err(Error::invalid(format!(
                "rotated datasets need a cyclic group, got {group}"
            )))
        }
    };
    src.validate()?;
    let kept: Vec<usize> = (0..src.manifest.classes)
        .filter(|c| !exclude_classes.contains(c))
        .collect();
    let relabel: BTreeMap<usize, usize> = kept
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (item, img) in src.manifest.items.iter().zip(&src.images) {
        let Some(&label) = relabel.get(&item.label) else {
            continue;
        };
        if img.rank() != 2 || img.dims()[0] != img.dims()[1] {
            return Err(Error::invalid(format!(
                "{}: image {:?} is not square",
                item.tensor,
                img.dims()
            )));
        }
        let k = rng.gen_range(0..n);
        let mut t = rotate2(img, k, n)?;
        if mask {
            t = circular_mask(&t)?;
        }
        out.push((t, label, Some(k)));
    }
    Ok(Dataset::from_parts(
        format!("{}-rot-{}", src.manifest.name, group.name()),
        src.manifest.split.clone(),
        kept.len(),
        Preprocessing {
            mask,
            rotation_group: Some(group.name()),
            rotation_convention: Some(ROTATION_CONVENTION.to_string()),
            excluded_classes: exclude_classes
                .iter()
                .copied()
                .filter(|&c| c < src.manifest.classes)
                .collect(),
            source: Some(src.manifest.name.clone()),
        },
        out,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    GaussianBlobs,
    BandLimitedNoise,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-blobs" => Ok(SynthKind::GaussianBlobs),
            "band-limited-noise" => Ok(SynthKind::BandLimitedNoise),
            _ => Err(Error::invalid(format!(
                "unknown dataset kind {s:?} (expected gaussian-blobs or band-limited-noise)"
            ))),
        }
    }
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::GaussianBlobs => "gaussian-blobs",
            SynthKind::BandLimitedNoise => "band-limited-noise",
        }
    }
}

fn blob_image(rng: &mut ChaCha8Rng, size: usize, class: usize, classes: usize) -> Result<Tensor> {
    let c = (size as f64 - 1.0) / 2.0;
    let blobs = class % 3 + 1;
    let radius = c * (0.25 + 0.35 * class as f64 / classes.max(1) as f64);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let sigma = size as f64 * rng.gen_range(0.06..0.1);
    let centres: Vec<(f64, f64)> = (0..blobs)
        .map(|b| {
            let a = phase + std::f64::consts::TAU * b as f64 / blobs as f64;
            (c + radius * a.cos(), c + radius * a.sin())
        })
        .collect();
    Tensor::from_fn(vec![size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let v: f64 = centres
            .iter()
            .map(|(cx, cy)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp())
            .sum();
        v.min(1.0) as f32
    })
}

fn noise_image(rng: &mut ChaCha8Rng, size: usize, class: usize) -> Result<Tensor> {
    let base_freq = 1.0 + class as f64;
    let waves: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = base_freq * rng.gen_range(0.8..1.2) * std::f64::consts::TAU / size as f64;
            (
                freq * angle.cos(),
                freq * angle.sin(),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    Tensor::from_fn(vec![size, size], |i| {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        let v: f64 = waves
            .iter()
            .map(|(kx, ky, ph)| (kx * x + ky * y + ph).sin())
            .sum::<f64>()
            / 4.0;
        (0.5 + 0.5 * v) as f32
    })
}

/// Seeded, masked, square synthetic images. Labels cycle through the classes.
pub fn synthesize_dataset(
    kind: SynthKind,
    count: usize,
    size: usize,
    classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if size < 8 {
        return Err(Error::invalid(format!("image size {size} is below 8")));
    }
    if classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..count)
        .map(|i| {
            let label = i % classes;
            let img = match kind {
                SynthKind::GaussianBlobs => blob_image(&mut rng, size, label, classes)?,
                SynthKind::BandLimitedNoise => noise_image(&mut rng, size, label)?,
            };
            Ok((circular_mask(&img)?, label, None))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_parts(
        kind.as_str().to_string(),
        "synthetic".to_string(),
        classes,
        Preprocessing {
            mask: true,
            source: Some(format!("seed {seed}")),
            ..Preprocessing::default()
        },
        items,
    ))
}

/// JSON form of a layer; tensors are referenced by relative path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerRecord {
    Conv2d {
        weight: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias: Option<String>,
        stride: usize,
        padding: usize,
    },
    Batchnorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        group_size: usize,
        eps: f64,
    },
    Relu,
    Maxpool {
        window: usize,
    },
    Avgpool {
        window: usize,
    },
    GroupconvLift {
        base: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias: Option<String>,
        padding: usize,
    },
    Groupconv {
        base: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias: Option<String>,
        padding: usize,
    },
    GroupPool {
        group_size: usize,
    },
    Flatten,
    Linear {
        weight: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        bias: Option<String>,
    },
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub split_index: usize,
    pub block_ends: Vec<usize>,
    pub layers: Vec<LayerRecord>,
}

/// Writes `<dir>/<stem>.json` and the parameter dumps under `<dir>/<stem>/`.
pub fn save_model(model: &ModelSpec, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let param = |i: usize, name: &str, t: &Tensor| -> Result<String> {
        let rel = format!("{stem}/layer{i:02}-{name}.eedt");
        write_tensor_dump(t, dir.join(&rel))?;
        Ok(rel)
    };
    let opt = |i: usize, t: &Option<Tensor>| t.as_ref().map(|b| param(i, "bias", b)).transpose();
    let layers: Vec<LayerRecord> = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            Ok(match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => LayerRecord::Conv2d {
                    weight: param(i, "weight", weight)?,
                    bias: opt(i, bias)?,
                    stride: *stride,
                    padding: *padding,
                },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    group_size,
                    eps,
                } => LayerRecord::Batchnorm {
                    gamma: param(i, "gamma", gamma)?,
                    beta: param(i, "beta", beta)?,
                    mean: param(i, "mean", mean)?,
                    var: param(i, "var", var)?,
                    group_size: *group_size,
                    eps: *eps,
                },
                Layer::Relu => LayerRecord::Relu,
                Layer::MaxPool { window } => LayerRecord::Maxpool { window: *window },
                Layer::AvgPool { window } => LayerRecord::Avgpool { window: *window },
                Layer::GroupConvLift {
                    base,
                    bias,
                    padding,
                } => LayerRecord::GroupconvLift {
                    base: param(i, "base", base)?,
                    bias: opt(i, bias)?,
                    padding: *padding,
                },
                Layer::GroupConv {
                    base,
                    bias,
                    padding,
                } => LayerRecord::Groupconv {
                    base: param(i, "base", base)?,
                    bias: opt(i, bias)?,
                    padding: *padding,
                },
                Layer::GroupPool { group_size } => LayerRecord::GroupPool {
                    group_size: *group_size,
                },
                Layer::Flatten => LayerRecord::Flatten,
                Layer::Linear { weight, bias } => LayerRecord::Linear {
                    weight: param(i, "weight", weight)?,
                    bias: opt(i, bias)?,
                },
                Layer::Softmax => LayerRecord::Softmax,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = ModelManifest {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        split_index: model.split_index,
        block_ends: model.block_ends.clone(),
        layers,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&manifest, &path)?;
    Ok(path)
}

/// Loads and validates a model manifest.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSpec> {
    let path = path.as_ref();
    let manifest: ModelManifest = read_json(path)?;
    let base = base_dir(path);
    let load = |rel: &str| read_tensor_dump(base.join(rel));
    let opt = |rel: &Option<String>| rel.as_deref().map(load).transpose();
    let layers = manifest
        .layers
        .iter()
        .map(|rec| {
            Ok(match rec {
                LayerRecord::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => Layer::Conv2d {
                    weight: load(weight)?,
                    bias: opt(bias)?,
                    stride: *stride,
                    padding: *padding,
                },
                LayerRecord::Batchnorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    group_size,
                    eps,
                } => Layer::BatchNorm {
                    gamma: load(gamma)?,
                    beta: load(beta)?,
                    mean: load(mean)?,
                    var: load(var)?,
                    group_size: *group_size,
                    eps: *eps,
                },
                LayerRecord::Relu => Layer::Relu,
                LayerRecord::Maxpool { window } => Layer::MaxPool { window: *window },
                LayerRecord::Avgpool { window } => Layer::AvgPool { window: *window },
                LayerRecord::GroupconvLift {
                    base,
                    bias,
                    padding,
                } => Layer::GroupConvLift {
                    base: load(base)?,
                    bias: opt(bias)?,
                    padding: *padding,
                },
                LayerRecord::Groupconv {
                    base,
                    bias,
                    padding,
                } => Layer::GroupConv {
                    base: load(base)?,
                    bias: opt(bias)?,
                    padding: *padding,
                },
                LayerRecord::GroupPool { group_size } => Layer::GroupPool {
                    group_size: *group_size,
                },
                LayerRecord::Flatten => Layer::Flatten,
                LayerRecord::Linear { weight, bias } => Layer::Linear {
                    weight: load(weight)?,
                    bias: opt(bias)?,
                },
                LayerRecord::Softmax => Layer::Softmax,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelSpec::new(
        manifest.name,
        manifest.input_shape,
        layers,
        manifest.split_index,
        manifest.block_ends,
    )
    .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrbitEntry {
    pub element: usize,
    /// Tap name to tensor file, relative to the manifest.
    pub tensors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationSample {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<usize>,
    pub orbit: Vec<OrbitEntry>,
}

/// Pre-computed activations `f_l(g x)` for every sample, element and tap.
/// The input-side transform has already been applied by whoever wrote it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationManifest {
    pub version: u32,
    pub model: String,
    pub group: String,
    pub rotation_convention: String,
    pub taps: Vec<TapInfo>,
    pub samples: Vec<ActivationSample>,
}

impl ActivationManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }
}

/// One tap of an activation manifest, read lazily as an orbit source.
#[derive(Debug, Clone)]
pub struct ActivationGrid {
    group: FiniteGroup,
    shape: Vec<usize>,
    /// Per sample, one path per group element in canonical order.
    paths: Vec<Vec<PathBuf>>,
    indices: Vec<usize>,
}

impl ActivationGrid {
    pub fn load(path: impl AsRef<Path>, tap: &str) -> Result<Self> {
        let path = path.as_ref();
        let manifest = ActivationManifest::load(path)?;
        Self::from_manifest(&manifest, &base_dir(path), tap)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }

    pub fn from_manifest(m: &ActivationManifest, base: &Path, tap: &str) -> Result<Self> {
        if m.version != 1 {
            return Err(Error::invalid(format!(
                "unsupported activation manifest version {}",
                m.version
            )));
        }
        let group: FiniteGroup = m.group.parse()?;
        let info = m.taps.iter().find(|t| t.name == tap).ok_or_else(|| {
            let names: Vec<&str> = m.taps.iter().map(|t| t.name.as_str()).collect();
            Error::invalid(format!("no tap {tap:?}; available: {}", names.join(", ")))
        })?;
        let mut paths = Vec::with_capacity(m.samples.len());
        for s in &m.samples {
            let mut by_element: BTreeMap<usize, PathBuf> = BTreeMap::new();
            for e in &s.orbit {
                let rel = e.tensors.get(tap).ok_or_else(|| {
                    Error::invalid(format!(
                        "sample {} element {} lacks tap {tap:?}",
                        s.index, e.element
                    ))
                })?;
                if by_element.insert(e.element, base.join(rel)).is_some() {
                    return Err(Error::invalid(format!(
                        "sample {} repeats element {}",
                        s.index, e.element
                    )));
                }
            }
            if by_element.keys().copied().ne(0..group.order()) {
                return Err(Error::invalid(format!(
                    "sample {} must list elements 0..{} exactly once",
                    s.index,
                    group.order()
                )));
            }
            paths.push(by_element.into_values().collect());
        }
        Ok(ActivationGrid {
            group,
            shape: info.shape.clone(),
            paths,
            indices: m.samples.iter().map(|s| s.index).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Dataset indices of the samples, in grid order.
    pub fn sample_indices(&self) -> &[usize] {
        &self.indices
    }

    /// Keeps only the grid rows at the given positions.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.paths.len()) {
            return Err(Error::invalid(format!(
                "row {bad} outside the grid of {}",
                self.paths.len()
            )));
        }
        Ok(ActivationGrid {
            group: self.group.clone(),
            shape: self.shape.clone(),
            paths: rows.iter().map(|&r| self.paths[r].clone()).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        })
    }
}

impl OrbitSource for ActivationGrid {
    fn group(&self) -> &FiniteGroup {
        &self.group
    }

    fn sample_count(&self) -> usize {
        self.paths.len()
    }

    fn orbit(&self, sample: usize) -> Result<Vec<Tensor>> {
        self.paths[sample]
            .iter()
            .enumerate()
            .map(|(g, p)| {
                let t = read_tensor_dump(p).map_err(|e| e.at_pair(sample, g))?;
                if t.dims() != self.shape.as_slice() {
                    return Err(Error::invalid(format!(
                        "{}: shape {:?} differs from declared {:?}",
                        p.display(),
                        t.dims(),
                        self.shape
                    ))
                    .at_pair(sample, g));
                }
                Ok(t)
            })
            .collect()
    }
}

pub fn write_report_json(report: &EedReport, path: impl AsRef<Path>) -> Result<()> {
    write_json(report, path.as_ref())
}

pub fn read_report_json(path: impl AsRef<Path>) -> Result<EedReport> {
    read_json(path.as_ref())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    metric: &'a str,
    group: &'a str,
    sample_idx: usize,
    element_idx: usize,
    value: f64,
}

/// Long-format CSV: one row per (sample, element) pair.
pub fn write_report_csv(report: &EedReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &report.per_pair {
        w.serialize(CsvRow {
            metric: report.metric_kind.as_str(),
            group: &report.group_name,
            sample_idx: p.sample_idx,
            element_idx: p.element_idx,
            value: p.value,
        })?;
    }
    if report.per_pair.is_empty() {
        w.write_record(["metric", "group", "sample_idx", "element_idx", "value"])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}
