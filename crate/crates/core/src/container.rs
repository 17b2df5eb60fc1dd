//! `SPJ1` array files: a 4-byte magic, a little-endian `u32` header length,
//! a UTF-8 JSON header and a raw little-endian row-major payload.
//!
//! Volumes, masks, projection stacks and network checkpoints all use this
//! one format; typed helpers below fill in the header conventions for each.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::field::{Encoding, FieldModel};
use crate::geometry::ScanGeometry;
use crate::phantom::{ImageVolume, VoiMask, VoiRole};
use crate::simulate::{ProjectionKind, ProjectionStack, WINDOW_LABELS};

pub const MAGIC: [u8; 4] = *b"SPJ1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    #[serde(default)]
    pub geometry: Option<ScanGeometry>,
    /// Type-specific metadata.
    #[serde(default)]
    pub meta: Map<String, Value>,
}

impl Header {
    pub fn new(dtype: DType, shape: Vec<usize>, axes: &[&str]) -> Self {
        Header {
            version: VERSION,
            dtype,
            shape,
            axes: axes.iter().map(|a| a.to_string()).collect(),
            geometry: None,
            meta: Map::new(),
        }
    }

    pub fn n_elements(&self) -> usize {
        self.shape.iter().product()
    }

    fn meta_field<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.meta.get(key).ok_or_else(|| Error::format(format!("header lacks meta.{key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::format(format!("meta.{key}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I32(Vec<i32>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self {
            Payload::F32(v) => Ok(v),
            Payload::I32(_) => Err(Error::format("expected f32 payload, found i32")),
        }
    }

    pub fn into_i32(self) -> Result<Vec<i32>> {
        match self {
            Payload::I32(v) => Ok(v),
            Payload::F32(_) => Err(Error::format("expected i32 payload, found f32")),
        }
    }
}

fn check(header: &Header, payload_len: usize, dtype: DType) -> Result<()> {
    if header.version != VERSION {
        return Err(Error::format(format!("unsupported container version {}", header.version)));
    }
    if header.dtype != dtype {
        return Err(Error::format(format!("header dtype {:?} does not match payload {dtype:?}", header.dtype)));
    }
    if header.axes.len() != header.shape.len() {
        return Err(Error::format(format!(
            "{} axis names for a rank-{} array",
            header.axes.len(),
            header.shape.len()
        )));
    }
    if header.n_elements() != payload_len {
        return Err(Error::format(format!(
            "shape {:?} needs {} elements, payload has {payload_len}",
            header.shape,
            header.n_elements()
        )));
    }
    Ok(())
}

pub fn to_bytes(header: &Header, payload: &Payload) -> Result<Vec<u8>> {
    check(header, payload.len(), payload.dtype())?;
    let json = serde_json::to_vec(header)?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::format("header too large"))?;
    let mut out = Vec::with_capacity(8 + json.len() + 4 * payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Header, Payload)> {
    if bytes.len() < 8 {
        return Err(Error::format("file shorter than the fixed preamble"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(format!("bad magic {:?}", &bytes[..4])));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::format("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format(format!("unreadable header: {e}")))?;
    let raw = &body[header_len..];
    if raw.len() % 4 != 0 {
        return Err(Error::format("payload is not a whole number of 4-byte elements"));
    }
    let words = raw.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
    let payload = match header.dtype {
        DType::F32 => Payload::F32(words.map(f32::from_le_bytes).collect()),
        DType::I32 => Payload::I32(words.map(i32::from_le_bytes).collect()),
    };
    check(&header, payload.len(), payload.dtype())?;
    Ok((header, payload))
}

pub fn container_write(path: impl AsRef<Path>, header: &Header, payload: &Payload) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(header, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn container_read(path: impl AsRef<Path>) -> Result<(Header, Payload)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

fn expect_content(header: &Header, content: &str) -> Result<()> {
    let found: String = header.meta_field("content")?;
    if found != content {
        return Err(Error::format(format!("expected a {content} container, found {found}")));
    }
    Ok(())
}

pub fn volume_to_container(vol: &ImageVolume, quantity: &str) -> (Header, Payload) {
    let mut h = Header::new(DType::F32, vol.dims.to_vec(), &["x", "y", "z"]);
    h.meta.insert("content".into(), json!("volume"));
    h.meta.insert("quantity".into(), json!(quantity));
    h.meta.insert("voxel_mm".into(), json!(vol.voxel_mm));
    (h, Payload::F32(vol.values.clone()))
}

pub fn volume_from_container(header: &Header, payload: Payload) -> Result<ImageVolume> {
    expect_content(header, "volume")?;
    let dims: [usize; 3] =
        header.shape.clone().try_into().map_err(|_| Error::format("volume must have rank 3"))?;
    let voxel_mm: [f64; 3] = header.meta_field("voxel_mm")?;
    ImageVolume::new(dims, voxel_mm, payload.into_f32()?).map_err(|e| Error::format(e.to_string()))
}

pub fn write_volume(path: impl AsRef<Path>, vol: &ImageVolume, quantity: &str) -> Result<()> {
    let (h, p) = volume_to_container(vol, quantity);
    container_write(path, &h, &p)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<ImageVolume> {
    let (h, p) = container_read(path)?;
    volume_from_container(&h, p)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &VoiMask) -> Result<()> {
    let mut h = Header::new(DType::I32, mask.dims.to_vec(), &["x", "y", "z"]);
    h.meta.insert("content".into(), json!("mask"));
    h.meta.insert("name".into(), json!(mask.name));
    h.meta.insert("role".into(), serde_json::to_value(mask.role)?);
    let p = Payload::I32(mask.mask.iter().map(|&b| b as i32).collect());
    container_write(path, &h, &p)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<VoiMask> {
    let (h, p) = container_read(path)?;
    expect_content(&h, "mask")?;
    let dims: [usize; 3] = h.shape.clone().try_into().map_err(|_| Error::format("mask must have rank 3"))?;
    let role: VoiRole = h.meta_field("role")?;
    let values = p.into_i32()?;
    if values.iter().any(|&v| v != 0 && v != 1) {
        return Err(Error::format("mask values must be 0 or 1"));
    }
    Ok(VoiMask { name: h.meta_field("name")?, role, dims, mask: values.into_iter().map(|v| v == 1).collect() })
}

pub fn stack_to_container(stack: &ProjectionStack) -> (Header, Payload) {
    let g = &stack.geometry;
    let mut h = Header::new(
        DType::F32,
        vec![stack.n_windows, stack.views.len(), g.det_nu, g.det_nv],
        &["window", "view", "u", "v"],
    );
    h.geometry = Some(g.clone());
    h.meta.insert("content".into(), json!("projections"));
    h.meta.insert("views".into(), json!(stack.views));
    h.meta.insert("kind".into(), serde_json::to_value(stack.kind).expect("plain enum"));
    if stack.n_windows == WINDOW_LABELS.len() {
        h.meta.insert("windows".into(), json!(WINDOW_LABELS));
    }
    (h, Payload::F32(stack.data.clone()))
}

pub fn stack_from_container(header: &Header, payload: Payload) -> Result<ProjectionStack> {
    expect_content(header, "projections")?;
    let geometry = header.geometry.clone().ok_or_else(|| Error::format("projection container lacks geometry"))?;
    let kind: ProjectionKind = header.meta_field("kind")?;
    let views: Vec<usize> = header.meta_field("views")?;
    let [n_windows, n_views, nu, nv]: [usize; 4] =
        header.shape.clone().try_into().map_err(|_| Error::format("projections must have rank 4"))?;
    if n_views != views.len() || nu != geometry.det_nu || nv != geometry.det_nv {
        return Err(Error::format("projection shape disagrees with its geometry or view list"));
    }
    ProjectionStack::new(geometry, views, n_windows, kind, payload.into_f32()?)
        .map_err(|e| Error::format(e.to_string()))
}

pub fn write_stack(path: impl AsRef<Path>, stack: &ProjectionStack) -> Result<()> {
    let (h, p) = stack_to_container(stack);
    container_write(path, &h, &p)
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<ProjectionStack> {
    let (h, p) = container_read(path)?;
    stack_from_container(&h, p)
}

/// Checkpoint: flat parameters `W0, b0, W1, b1, ...` with the layer widths,
/// encoding and training seed in the header.
pub fn model_to_container(model: &FieldModel, seed: u64, upsample: usize) -> (Header, Payload) {
    let params = model.flat_params();
    let mut h = Header::new(DType::F32, vec![params.len()], &["parameter"]);
    h.meta.insert("content".into(), json!("field_model"));
    h.meta.insert("widths".into(), json!(model.widths()));
    h.meta.insert("encoding".into(), serde_json::to_value(model.encoding).expect("plain enum"));
    h.meta.insert("seed".into(), json!(seed));
    h.meta.insert("upsample".into(), json!(upsample));
    (h, Payload::F32(params))
}

/// Model plus the refinement factor it was trained with.
pub fn model_from_container(header: &Header, payload: Payload) -> Result<(FieldModel, usize)> {
    expect_content(header, "field_model")?;
    let widths: Vec<usize> = header.meta_field("widths")?;
    let encoding: Encoding = header.meta_field("encoding")?;
    let upsample: usize = header.meta_field("upsample")?;
    let model = FieldModel::from_flat(encoding, &widths, &payload.into_f32()?)
        .map_err(|e| Error::format(e.to_string()))?;
    Ok((model, upsample))
}

pub fn write_model(path: impl AsRef<Path>, model: &FieldModel, seed: u64, upsample: usize) -> Result<()> {
    let (h, p) = model_to_container(model, seed, upsample);
    container_write(path, &h, &p)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(FieldModel, usize)> {
    let (h, p) = container_read(path)?;
    model_from_container(&h, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_geometry, Orbit};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_round_trip() {
        let h = Header::new(DType::F32, vec![0], &["i"]);
        let bytes = to_bytes(&h, &Payload::F32(vec![])).unwrap();
        assert_eq!(from_bytes(&bytes).unwrap(), (h, Payload::F32(vec![])));
    }

    #[test]
    fn random_volume_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f32> = (0..60).map(|_| f32::from_bits(rng.random::<u32>())).collect();
        let h = Header::new(DType::F32, vec![3, 4, 5], &["x", "y", "z"]);
        let (h2, p2) = from_bytes(&to_bytes(&h, &Payload::F32(values.clone())).unwrap()).unwrap();
        assert_eq!(h2, h);
        let back = p2.into_f32().unwrap();
        assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn byte_layout() {
        let h = Header::new(DType::I32, vec![2], &["i"]);
        let bytes = to_bytes(&h, &Payload::I32(vec![1, -2])).unwrap();
        assert_eq!(&bytes[..4], b"SPJ1");
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        assert_eq!(header["dtype"], "i32");
        assert_eq!(&bytes[8 + n..], &[1, 0, 0, 0, 0xfe, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn format_errors() {
        let h = Header::new(DType::F32, vec![3], &["i"]);
        assert!(matches!(to_bytes(&h, &Payload::F32(vec![1.0])), Err(Error::Format(_))));
        let good = to_bytes(&h, &Payload::F32(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(from_bytes(&good[..good.len() - 4]), Err(Error::Format(_))));
        assert!(matches!(from_bytes(&good[..good.len() - 1]), Err(Error::Format(_))));
        let mut bad_magic = good.clone();
        bad_magic[3] = b'2';
        assert!(matches!(from_bytes(&bad_magic), Err(Error::Format(_))));
        let mut v2 = h.clone();
        v2.version = 2;
        let json = serde_json::to_vec(&v2).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend((json.len() as u32).to_le_bytes());
        bytes.extend(json);
        bytes.extend([0u8; 12]);
        assert!(matches!(from_bytes(&bytes), Err(Error::Format(_))));
        assert!(matches!(from_bytes(b"SPJ1"), Err(Error::Format(_))));
    }

    #[test]
    fn typed_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let vol = ImageVolume::new([8, 8, 9], [4.8; 3], (0..576).map(|i| i as f32 * 0.5).collect()).unwrap();
        write_volume(dir.path().join("v.spj"), &vol, "activity").unwrap();
        assert_eq!(read_volume(dir.path().join("v.spj")).unwrap(), vol);

        let g = make_geometry(3, Orbit::Circular { radius_mm: 200.0 }, 8, 9, 4.8, 3).unwrap();
        let mut s = ProjectionStack::zeros(g, vec![0, 2], 3, ProjectionKind::Sampled);
        s.data.iter_mut().enumerate().for_each(|(i, x)| *x = i as f32);
        write_stack(dir.path().join("p.spj"), &s).unwrap();
        assert_eq!(read_stack(dir.path().join("p.spj")).unwrap(), s);
        assert!(read_volume(dir.path().join("p.spj")).is_err());

        let m = FieldModel::<f32>::new(Encoding::Fourier { n_frequencies: 3 }, &[5, 6], 3, 2).unwrap();
        write_model(dir.path().join("m.spj"), &m, 11, 2).unwrap();
        assert_eq!(read_model(dir.path().join("m.spj")).unwrap(), (m, 2));

        let mask = VoiMask {
            name: "bkg".into(),
            role: VoiRole::Background,
            dims: [8, 8, 9],
            mask: (0..576).map(|i| i % 3 == 0).collect(),
        };
        write_mask(dir.path().join("k.spj"), &mask).unwrap();
        assert_eq!(read_mask(dir.path().join("k.spj")).unwrap(), mask);
    }
}
