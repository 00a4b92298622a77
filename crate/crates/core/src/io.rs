//! Binary persistence: field files, checkpoints, and dataset directories.
//!
//! Field file layout (little-endian throughout):
//!
//! ```text
//! magic "PFLD" | version u16 | dtype u8 | ndim u8 | dims u64 × ndim | payload
//! ```
//!
//! dtype 0 = f32, 1 = f64, 2 = u8 mask bits. Checkpoints use magic "LCKP"
//! followed by a u32 JSON-header length, the header (architecture, schedule,
//! dtype, named tensor shapes), and the tensor payloads in header order.
//! Round-trips are bit-exact: scalars are stored via their IEEE-754 bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{CoreError, Result};
use crate::masks::{Mask, MaskSpec};
use crate::real::Real;
use crate::schedule::NoiseSchedule;
use crate::tensor::Field;
use crate::training::IncompleteSample;

const FIELD_MAGIC: &[u8; 4] = b"PFLD";
const CHECKPOINT_MAGIC: &[u8; 4] = b"LCKP";
const FORMAT_VERSION: u16 = 1;
const MASK_DTYPE: u8 = 2;

// ---------------------------------------------------------------------------
// low-level encoding

fn encode_header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(CoreError::Format(format!("{} dimensions exceed u8", shape.len())));
    }
    let mut out = Vec::with_capacity(12 + 8 * shape.len());
    out.extend_from_slice(FIELD_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(out)
}

struct DecodedHeader {
    dtype: u8,
    shape: Vec<usize>,
    payload_at: usize,
}

fn decode_header(bytes: &[u8]) -> Result<DecodedHeader> {
    if bytes.len() < 8 {
        return Err(CoreError::Format("field file truncated before header".into()));
    }
    if &bytes[0..4] != FIELD_MAGIC {
        return Err(CoreError::Format("bad magic: not a field file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(CoreError::Format(format!("unsupported field file version {version}")));
    }
    let dtype = bytes[6];
    let ndim = bytes[7] as usize;
    let payload_at = 8 + 8 * ndim;
    if bytes.len() < payload_at {
        return Err(CoreError::Format("field file truncated inside dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 8 + 8 * i;
        let dim = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        shape.push(dim as usize);
    }
    Ok(DecodedHeader { dtype, shape, payload_at })
}

/// Field to bytes; dtype follows the scalar type.
pub fn encode_field<T: Real>(field: &Field<T>) -> Result<Vec<u8>> {
    let mut out = encode_header(T::DTYPE_CODE, field.shape())?;
    let width = if T::DTYPE_CODE == 0 { 4 } else { 8 };
    out.reserve(field.numel() * width);
    for &v in field.data() {
        if T::DTYPE_CODE == 0 {
            out.extend_from_slice(&(v.wide() as f32).to_le_bytes());
        } else {
            out.extend_from_slice(&v.wide().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_field<T: Real>(bytes: &[u8]) -> Result<Field<T>> {
    let header = decode_header(bytes)?;
    if header.dtype != T::DTYPE_CODE {
        return Err(CoreError::Format(format!(
            "field file has dtype {} but dtype {} was requested",
            header.dtype,
            T::DTYPE_CODE
        )));
    }
    let numel: usize = header.shape.iter().product();
    let width = if T::DTYPE_CODE == 0 { 4 } else { 8 };
    let payload = &bytes[header.payload_at..];
    if payload.len() != numel * width {
        return Err(CoreError::Format(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            numel * width
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(width) {
        let v = if width == 4 {
            f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64
        } else {
            f64::from_le_bytes(chunk.try_into().expect("8 bytes"))
        };
        data.push(T::of(v));
    }
    Field::new(header.shape, data)
}

pub fn encode_mask(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = encode_header(MASK_DTYPE, mask.shape())?;
    out.extend_from_slice(mask.bits());
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    let header = decode_header(bytes)?;
    if header.dtype != MASK_DTYPE {
        return Err(CoreError::Format(format!(
            "mask file has dtype {}, expected {MASK_DTYPE}",
            header.dtype
        )));
    }
    let numel: usize = header.shape.iter().product();
    let payload = &bytes[header.payload_at..];
    if payload.len() != numel {
        return Err(CoreError::Format(format!(
            "mask payload is {} bytes, expected {numel}",
            payload.len()
        )));
    }
    if payload.iter().any(|&b| b > 1) {
        return Err(CoreError::Format("mask bits must be 0 or 1".into()));
    }
    Mask::new(header.shape, payload.to_vec())
}

pub fn write_field<T: Real>(path: &Path, field: &Field<T>) -> Result<()> {
    Ok(fs::write(path, encode_field(field)?)?)
}

pub fn read_field<T: Real>(path: &Path) -> Result<Field<T>> {
    decode_field(&fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Ok(fs::write(path, encode_mask(mask)?)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// checkpoints

/// Everything needed to resume or deploy a trained denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: DenoiserParams<T>,
    pub schedule: NoiseSchedule,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u16,
    dtype: u8,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint<T: Real>(
    params: &DenoiserParams<T>,
    schedule: &NoiseSchedule,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        dtype: T::DTYPE_CODE,
        config: *params.config(),
        schedule: *schedule,
        tensors: params
            .tensors()
            .iter()
            .map(|(name, f)| TensorEntry { name: name.clone(), shape: f.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in params.tensors() {
        for &v in tensor.data() {
            if T::DTYPE_CODE == 0 {
                out.extend_from_slice(&(v.wide() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.wide().to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(CoreError::Format("not a checkpoint file".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body_at = 8 + header_len;
    if bytes.len() < body_at {
        return Err(CoreError::Format("checkpoint truncated inside header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body_at])?;
    if header.version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.dtype != T::DTYPE_CODE {
        return Err(CoreError::Format(format!(
            "checkpoint has dtype {} but dtype {} was requested",
            header.dtype,
            T::DTYPE_CODE
        )));
    }
    let width = if T::DTYPE_CODE == 0 { 4 } else { 8 };
    let mut at = body_at;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = at + numel * width;
        if bytes.len() < end {
            return Err(CoreError::Format(format!(
                "checkpoint truncated inside tensor '{}'",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in bytes[at..end].chunks_exact(width) {
            let v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().expect("8 bytes"))
            };
            data.push(T::of(v));
        }
        tensors.push((entry.name.clone(), Field::new(entry.shape.clone(), data)?));
        at = end;
    }
    if at != bytes.len() {
        return Err(CoreError::Format("trailing bytes after checkpoint payload".into()));
    }
    let params = DenoiserParams::from_tensors(header.config, tensors)?;
    Ok(Checkpoint { params, schedule: header.schedule })
}

pub fn write_checkpoint<T: Real>(
    path: &Path,
    params: &DenoiserParams<T>,
    schedule: &NoiseSchedule,
) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(params, schedule)?)?)
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------------------
// dataset directories

/// Per-channel standardization statistics, computed over observed entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub field: String,
    pub mask: String,
}

/// Everything about a dataset except the sample payloads themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub system: String,
    /// Per-sample field shape, `[channels, H, W]`.
    pub shape: Vec<usize>,
    pub grid: Vec<usize>,
    pub frames: usize,
    pub dt: f64,
    pub mask_spec: MaskSpec,
    pub seed: u64,
    pub normalization: Vec<ChannelStats>,
    /// Physical parameters drawn per sample, recorded for metric evaluation.
    pub params: Vec<serde_json::Value>,
    /// Relative file names, filled in when the dataset is written.
    #[serde(default)]
    pub files: Vec<DatasetEntry>,
}

/// Writes `samples` and the manifest under `dir`, returning the manifest with
/// its file list populated.
pub fn write_dataset<T: Real>(
    dir: &Path,
    samples: &[IncompleteSample<T>],
    manifest: &DatasetManifest,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut written = manifest.clone();
    written.files.clear();
    for (i, sample) in samples.iter().enumerate() {
        let field_name = format!("sample_{i:04}.field");
        let mask_name = format!("sample_{i:04}.mask");
        write_field(&dir.join(&field_name), &sample.x_obs)?;
        write_mask(&dir.join(&mask_name), &sample.mask)?;
        written.files.push(DatasetEntry { field: field_name, mask: mask_name });
    }
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&written)?)?;
    Ok(written)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset<T: Real>(dir: &Path) -> Result<(Vec<IncompleteSample<T>>, DatasetManifest)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.files.len());
    for entry in &manifest.files {
        let x_obs = read_field(&dir.join(&entry.field))?;
        let mask = read_mask(&dir.join(&entry.mask))?;
        if x_obs.shape() != manifest.shape.as_slice() || mask.shape() != manifest.shape.as_slice()
        {
            return Err(CoreError::Format(format!(
                "sample '{}' shape disagrees with the manifest",
                entry.field
            )));
        }
        samples.push(IncompleteSample { x_obs, mask });
    }
    Ok((samples, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser;
    use rand::RngExt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn field_bytes_round_trip_bitwise_in_both_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(120);
        let f64_field =
            Field::from_fn(vec![2, 3, 4], |_| rng.random::<f64>() * 1e3 - 500.0);
        let back: Field<f64> = decode_field(&encode_field(&f64_field).unwrap()).unwrap();
        assert_eq!(back.shape(), f64_field.shape());
        assert_eq!(back.data(), f64_field.data());

        let f32_field: Field<f32> = f64_field.cast();
        let back32: Field<f32> = decode_field(&encode_field(&f32_field).unwrap()).unwrap();
        assert_eq!(back32.data(), f32_field.data());
    }

    #[test]
    fn mask_bytes_round_trip() {
        let mut mask = Mask::zeros(vec![3, 5]);
        for i in [0, 2, 7, 14] {
            mask.set(i, true);
        }
        let back = decode_mask(&encode_mask(&mask).unwrap()).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn wrong_dtype_and_corrupt_headers_are_refused() {
        let field = Field::from_fn(vec![2, 2], |i| i as f64);
        let bytes = encode_field(&field).unwrap();
        assert!(matches!(
            decode_field::<f32>(&bytes),
            Err(CoreError::Format(_))
        ));
        assert!(matches!(decode_mask(&bytes), Err(CoreError::Format(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_field::<f64>(&bad), Err(CoreError::Format(_))));

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_field::<f64>(truncated), Err(CoreError::Format(_))));
    }

    #[test]
    fn checkpoint_round_trips_params_and_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(121);
        let config = DenoiserConfig {
            field_channels: 2,
            hidden_channels: 6,
            n_blocks: 2,
            kernel: 3,
            time_embed_dim: 4,
            padding: Default::default(),
        };
        let params = denoiser::init::<f64, _>(&config, &mut rng);
        let schedule = NoiseSchedule::cosine_vp();
        let bytes = encode_checkpoint(&params, &schedule).unwrap();
        let back: Checkpoint<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params, params);
        assert_eq!(back.schedule, schedule);
    }

    #[test]
    fn tampered_checkpoints_are_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(122);
        let config = DenoiserConfig {
            field_channels: 1,
            hidden_channels: 4,
            n_blocks: 1,
            kernel: 1,
            time_embed_dim: 4,
            padding: Default::default(),
        };
        let params = denoiser::init::<f64, _>(&config, &mut rng);
        let schedule = NoiseSchedule::cosine_vp();
        let bytes = encode_checkpoint(&params, &schedule).unwrap();

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            decode_checkpoint::<f64>(truncated),
            Err(CoreError::Format(_))
        ));
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(
            decode_checkpoint::<f64>(&extended),
            Err(CoreError::Format(_))
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes),
            Err(CoreError::Format(_))
        ));
    }

    #[test]
    fn dataset_directory_round_trips_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let dir = tempfile::tempdir().unwrap();
        let shape = vec![2, 4, 4];
        let samples: Vec<IncompleteSample<f64>> = (0..3)
            .map(|_| {
                let mask = crate::masks::sample_mask(
                    &MaskSpec::PixelIid { rate: 0.7 },
                    &shape,
                    &mut rng,
                )
                .unwrap();
                let x = Field::from_fn(shape.clone(), |_| rng.random::<f64>());
                IncompleteSample { x_obs: mask.apply(&x).unwrap(), mask }
            })
            .collect();
        let manifest = DatasetManifest {
            system: "advection".into(),
            shape: shape.clone(),
            grid: vec![4, 4],
            frames: 2,
            dt: 0.05,
            mask_spec: MaskSpec::PixelIid { rate: 0.7 },
            seed: 9,
            normalization: vec![
                ChannelStats { mean: 0.5, std: 0.2 },
                ChannelStats { mean: -0.1, std: 1.3 },
            ],
            params: vec![serde_json::json!({"beta": 0.25}); 3],
            files: Vec::new(),
        };
        let written = write_dataset(dir.path(), &samples, &manifest).unwrap();
        assert_eq!(written.files.len(), 3);
        let (back, read_manifest) = read_dataset::<f64>(dir.path()).unwrap();
        assert_eq!(read_manifest, written);
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.x_obs.data(), b.x_obs.data());
            assert_eq!(a.mask, b.mask);
        }
    }
}
