//! Weight tensors, the CWMT binary container, and watermark manifests.
//!
//! CWMT layout (all integers little-endian):
//!
//! ```text
//! magic      b"CWMT"
//! version    u32             (currently 1)
//! count      u32             number of tensors
//! per tensor:
//!   name_len u32, name       UTF-8 bytes
//!   dtype    u8              0 = f32, 1 = f64
//!   rank     u32
//!   extents  u64 * rank      all > 0
//!   payload  row-major values of the given dtype
//! ```
//!
//! Nothing may follow the last tensor.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chaos::ChaoticParams;

pub const MAGIC: &[u8; 4] = b"CWMT";
pub const FORMAT_VERSION: u32 = 1;
pub const ROW_MAJOR: &str = "row-major";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"CWMT\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("tensor {name:?}: shape {shape:?} does not match {count} values")]
    ShapeMismatch { name: String, shape: Vec<usize>, count: usize },
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("tensor {0:?} has a zero or missing extent")]
    InvalidShape(String),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("model has no tensors")]
    Empty,
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self, StoreError> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(StoreError::UnknownDtype(t)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A named tensor. Values are held as `f64`; for `F32` tensors every value
/// is exactly representable in `f32`, so the file round-trip is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
    dtype: DType,
}

impl WeightTensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<f64>,
        dtype: DType,
    ) -> Result<Self, StoreError> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(StoreError::InvalidShape(name));
        }
        let count = element_count(&shape).ok_or_else(|| StoreError::InvalidShape(name.clone()))?;
        if count != values.len() {
            return Err(StoreError::ShapeMismatch { name, shape, count: values.len() });
        }
        let values = match dtype {
            DType::F64 => values,
            DType::F32 => values.into_iter().map(|v| v as f32 as f64).collect(),
        };
        Ok(Self { name, shape, values, dtype })
    }

    pub fn f64(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self, StoreError> {
        Self::new(name, shape, values, DType::F64)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major flattening; storage is already row-major.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Replaces the payload, keeping name and shape. `F32` tensors are
    /// promoted to `F64` so that small additive perturbations survive.
    pub(crate) fn with_values_f64(&self, values: Vec<f64>) -> Result<Self, StoreError> {
        Self::new(self.name.clone(), self.shape.clone(), values, DType::F64)
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Restores a tensor from a flat row-major vector.
pub fn unflatten_layer(
    name: impl Into<String>,
    shape: &[usize],
    flat: Vec<f64>,
    dtype: DType,
) -> Result<WeightTensor, StoreError> {
    WeightTensor::new(name, shape.to_vec(), flat, dtype)
}

/// An ordered tensor collection. Order is the model's layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    tensors: Vec<WeightTensor>,
}

impl ModelWeights {
    pub fn new(tensors: Vec<WeightTensor>) -> Result<Self, StoreError> {
        for (i, t) in tensors.iter().enumerate() {
            if tensors[..i].iter().any(|o| o.name == t.name) {
                return Err(StoreError::DuplicateName(t.name.clone()));
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[WeightTensor] {
        &self.tensors
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name())
    }

    pub fn get(&self, name: &str) -> Result<&WeightTensor, StoreError> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| StoreError::UnknownLayer(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|t| t.name == name)
    }

    /// Returns a copy with `name` replaced.
    pub fn replace(&self, tensor: WeightTensor) -> Result<Self, StoreError> {
        let idx = self
            .tensors
            .iter()
            .position(|t| t.name == tensor.name)
            .ok_or_else(|| StoreError::UnknownLayer(tensor.name.clone()))?;
        let mut tensors = self.tensors.clone();
        tensors[idx] = tensor;
        Ok(Self { tensors })
    }

    pub fn flatten_layer(&self, layer: &str) -> Result<Vec<f64>, StoreError> {
        Ok(self.get(layer)?.flatten())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, StoreError> {
        let mut buf = Vec::new();
        write_cwmt(self, &mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut cursor = bytes;
        let weights = read_cwmt(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(StoreError::TrailingBytes(cursor.len()));
        }
        Ok(weights)
    }

    /// SHA-256 of the canonical CWMT encoding, as lowercase hex.
    pub fn digest(&self) -> Result<String, StoreError> {
        Ok(hex_digest(&self.to_bytes()?))
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn flatten_layer(weights: &ModelWeights, layer: &str) -> Result<Vec<f64>, StoreError> {
    weights.flatten_layer(layer)
}

fn write_cwmt<W: Write>(weights: &ModelWeights, w: &mut W) -> Result<(), StoreError> {
    if weights.tensors.is_empty() {
        return Err(StoreError::Empty);
    }
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(weights.tensors.len() as u32)?;
    for t in &weights.tensors {
        if t.shape.contains(&0) {
            return Err(StoreError::InvalidShape(t.name.clone()));
        }
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u8(t.dtype.tag())?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &d in &t.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        match t.dtype {
            DType::F32 => {
                for &v in &t.values {
                    w.write_f32::<LittleEndian>(v as f32)?;
                }
            }
            DType::F64 => {
                for &v in &t.values {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
    }
    Ok(())
}

fn eof_as(what: &'static str) -> impl Fn(io::Error) -> StoreError {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            StoreError::Truncated(what)
        } else {
            StoreError::Io(e)
        }
    }
}

fn read_cwmt<R: Read>(r: &mut R) -> Result<ModelWeights, StoreError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as("magic"))?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic(magic));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof_as("version"))?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let count = r.read_u32::<LittleEndian>().map_err(eof_as("tensor count"))?;
    if count == 0 {
        return Err(StoreError::Empty);
    }
    let mut tensors = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(eof_as("name length"))? as usize;
        let mut name = Vec::new();
        r.by_ref()
            .take(name_len as u64)
            .read_to_end(&mut name)?;
        if name.len() != name_len {
            return Err(StoreError::Truncated("tensor name"));
        }
        let name = String::from_utf8(name).map_err(|_| StoreError::BadName)?;
        let dtype = DType::from_tag(r.read_u8().map_err(eof_as("dtype"))?)?;
        let rank = r.read_u32::<LittleEndian>().map_err(eof_as("rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            let d = r.read_u64::<LittleEndian>().map_err(eof_as("extents"))?;
            shape.push(usize::try_from(d).map_err(|_| StoreError::InvalidShape(name.clone()))?);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(StoreError::InvalidShape(name));
        }
        let n = element_count(&shape).ok_or_else(|| StoreError::InvalidShape(name.clone()))?;
        let byte_len = n
            .checked_mul(dtype.width())
            .ok_or_else(|| StoreError::InvalidShape(name.clone()))?;
        let mut payload = Vec::new();
        r.by_ref().take(byte_len as u64).read_to_end(&mut payload)?;
        if payload.len() != byte_len {
            return Err(StoreError::Truncated("payload"));
        }
        let values: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        };
        tensors.push(WeightTensor::new(name, shape, values, dtype)?);
    }
    ModelWeights::new(tensors)
}

/// Writes `bytes` to `path` through a temporary sibling file, so a failure
/// never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn save_weights(weights: &ModelWeights, destination: &Path) -> Result<(), StoreError> {
    let bytes = weights.to_bytes()?;
    write_atomic(destination, &bytes)?;
    Ok(())
}

pub fn load_weights(source: &Path) -> Result<ModelWeights, StoreError> {
    let mut reader = BufReader::new(File::open(source)?);
    let weights = read_cwmt(&mut reader)?;
    let mut rest = Vec::new();
    reader.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(StoreError::TrailingBytes(rest.len()));
    }
    Ok(weights)
}

/// Persisted binding of a model, a layer, and the secret key.
///
/// Treat this as secret material: it is the verifier's ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkManifest {
    pub model_id: String,
    pub layer: String,
    pub params: ChaoticParams,
    pub flatten_order: String,
    /// Digest of the weights *before* embedding.
    pub reference_digest: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

impl WatermarkManifest {
    /// Checks the manifest against a candidate reference model. Returns
    /// warnings that do not invalidate the manifest (digest mismatch).
    pub fn check_against(&self, reference: &ModelWeights) -> Result<Vec<String>, StoreError> {
        let tensor = reference.get(&self.layer).map_err(|_| {
            StoreError::Manifest(format!("layer {:?} is not present in the reference weights", self.layer))
        })?;
        if tensor.len() != self.params.length {
            return Err(StoreError::Manifest(format!(
                "key length {} does not match the {} elements of layer {:?}",
                self.params.length,
                tensor.len(),
                self.layer
            )));
        }
        if self.flatten_order != ROW_MAJOR {
            return Err(StoreError::Manifest(format!(
                "unsupported flatten order {:?}",
                self.flatten_order
            )));
        }
        let mut warnings = Vec::new();
        let digest = reference.digest()?;
        if digest != self.reference_digest {
            warnings.push(format!(
                "reference digest {digest} differs from manifest digest {}",
                self.reference_digest
            ));
        }
        Ok(warnings)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        serde_json::from_str(text).map_err(|e| StoreError::Manifest(e.to_string()))
    }
}

pub fn save_manifest(manifest: &WatermarkManifest, path: &Path) -> Result<(), StoreError> {
    write_atomic(path, manifest.to_json().as_bytes())?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<WatermarkManifest, StoreError> {
    WatermarkManifest::from_json(&fs::read_to_string(path)?)
}

/// Writes text through [`write_atomic`] with a buffered writer closure.
pub(crate) fn write_text_atomic(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<&mut Vec<u8>>) -> io::Result<()>,
) -> io::Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = BufWriter::new(&mut buf);
        f(&mut w)?;
        w.flush()?;
    }
    write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_tensors() -> ModelWeights {
        ModelWeights::new(vec![
            WeightTensor::f64("a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            WeightTensor::new("b", vec![3], vec![0.1, -0.2, 0.3], DType::F32).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn single_tensor_layout() {
        let w = ModelWeights::new(vec![WeightTensor::f64("k", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()])
            .unwrap();
        let bytes = w.to_bytes().unwrap();
        // header 12 + name_len 4 + name 1 + dtype 1 + rank 4 + extents 16 + payload 32
        assert_eq!(bytes.len(), 12 + 4 + 1 + 1 + 4 + 16 + 32);
        assert_eq!(&bytes[..4], b"CWMT");
        assert_eq!(ModelWeights::from_bytes(&bytes).unwrap(), w);

        let w32 = ModelWeights::new(vec![
            WeightTensor::new("k", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], DType::F32).unwrap(),
        ])
        .unwrap();
        assert_eq!(w32.to_bytes().unwrap().len(), 12 + 4 + 1 + 1 + 4 + 16 + 16);
    }

    #[test]
    fn empty_collection_rejected() {
        let w = ModelWeights::new(vec![]).unwrap();
        assert!(matches!(w.to_bytes(), Err(StoreError::Empty)));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(matches!(
            WeightTensor::f64("z", vec![2, 0], vec![]),
            Err(StoreError::InvalidShape(_))
        ));
    }

    #[test]
    fn order_preserved() {
        let w = two_tensors();
        let back = ModelWeights::from_bytes(&w.to_bytes().unwrap()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = two_tensors().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(StoreError::BadMagic(_))));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = two_tensors().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(
            ModelWeights::from_bytes(&bytes),
            Err(StoreError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = two_tensors().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            ModelWeights::from_bytes(cut),
            Err(StoreError::Truncated("payload"))
        ));
    }

    #[test]
    fn trailing_bytes() {
        let mut bytes = two_tensors().to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(ModelWeights::from_bytes(&bytes), Err(StoreError::TrailingBytes(2))));
    }

    #[test]
    fn shape_count_mismatch() {
        assert!(matches!(
            WeightTensor::f64("m", vec![2, 2], vec![1.0]),
            Err(StoreError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn duplicate_names_rejected() {
        let t = WeightTensor::f64("a", vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            ModelWeights::new(vec![t.clone(), t]),
            Err(StoreError::DuplicateName(_))
        ));
    }

    #[test]
    fn flatten_unflatten() {
        let w = two_tensors();
        assert_eq!(w.flatten_layer("a").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        let t = unflatten_layer("a", &[2, 2], w.flatten_layer("a").unwrap(), DType::F64).unwrap();
        assert_eq!(&t, w.get("a").unwrap());
        assert!(matches!(w.flatten_layer("foo"), Err(StoreError::UnknownLayer(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cwmt");
        let w = two_tensors();
        save_weights(&w, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), w);
    }

    fn manifest() -> WatermarkManifest {
        WatermarkManifest {
            model_id: "m".into(),
            layer: "a".into(),
            params: ChaoticParams::new(3.9, 0.5, 0.01, 4),
            flatten_order: ROW_MAJOR.into(),
            reference_digest: two_tensors().digest().unwrap(),
            created_at: 1,
        }
    }

    #[test]
    fn manifest_roundtrip_full_precision() {
        let mut m = manifest();
        m.params.r = 3.9000000000000004;
        m.params.epsilon = 0.1 + 0.2;
        let back = WatermarkManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.params.r.to_bits(), m.params.r.to_bits());
    }

    #[test]
    fn manifest_unknown_field_ignored() {
        let mut v: serde_json::Value = serde_json::from_str(&manifest().to_json()).unwrap();
        v["future_field"] = serde_json::json!(42);
        let back = WatermarkManifest::from_json(&v.to_string()).unwrap();
        assert_eq!(back, manifest());
    }

    #[test]
    fn manifest_missing_field_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&manifest().to_json()).unwrap();
        v.as_object_mut().unwrap().remove("layer");
        assert!(matches!(
            WatermarkManifest::from_json(&v.to_string()),
            Err(StoreError::Manifest(_))
        ));
    }

    #[test]
    fn manifest_checks() {
        let w = two_tensors();
        assert!(manifest().check_against(&w).unwrap().is_empty());
        let mut m = manifest();
        m.layer = "missing".into();
        assert!(matches!(m.check_against(&w), Err(StoreError::Manifest(_))));
        let mut m = manifest();
        m.reference_digest = "00".into();
        assert_eq!(m.check_against(&w).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn roundtrip_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
            f32_tag in any::<bool>(),
        ) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 2))
                .collect();
            let dtype = if f32_tag { DType::F32 } else { DType::F64 };
            let t = WeightTensor::new("t", shape.clone(), values, dtype).unwrap();
            let w = ModelWeights::new(vec![t.clone()]).unwrap();
            let back = ModelWeights::from_bytes(&w.to_bytes().unwrap()).unwrap();
            let bt = back.get("t").unwrap();
            prop_assert_eq!(bt.shape(), t.shape());
            let a: Vec<u64> = bt.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            let flat = t.flatten();
            let un = unflatten_layer("t", &shape, flat, dtype).unwrap();
            prop_assert_eq!(un.shape(), t.shape());
            prop_assert_eq!(w.digest().unwrap(), w.clone().digest().unwrap());
        }
    }
}
