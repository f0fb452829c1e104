//! The VGR volume container: `b"VGR1"`, a little-endian `u32` header length,
//! a JSON header, then the raw little-endian payload in `[c][z][y][x]` order.

use std::fs;
use std::path::Path;

use fusenet_core::volgrid::{voxel_count, Dims, MaskVolume, MultiChannelVolume, ScalarVolume, Spacing};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VGR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub channels: usize,
    pub dtype: String,
}

impl Header {
    pub fn dtype(&self) -> Result<Dtype> {
        match self.dtype.as_str() {
            "f32" => Ok(Dtype::F32),
            "u8" => Ok(Dtype::U8),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }

    pub fn payload_len(&self) -> Result<usize> {
        Ok(voxel_count(self.dims) * self.channels * self.dtype()?.size())
    }
}

/// A decoded container before it is turned into a typed volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub payload: Vec<u8>,
}

pub fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::HeaderMismatch(format!("{} bytes is shorter than the fixed prefix", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("four bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < h {
        return Err(Error::HeaderMismatch(format!("header length {h} exceeds file")));
    }
    let header: Header = serde_json::from_slice(&body[..h])?;
    let expected = header.payload_len()?;
    let payload = &body[h..];
    if payload.len() != expected {
        return Err(Error::HeaderMismatch(format!("payload holds {} bytes, header implies {expected}", payload.len())));
    }
    Ok(Container { header, payload: payload.to_vec() })
}

fn f32_payload(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn f32_values(payload: &[u8]) -> Vec<f32> {
    payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect()
}

pub fn encode_volume(vol: &MultiChannelVolume) -> Result<Vec<u8>> {
    let header = Header { dims: vol.dims(), spacing_mm: vol.spacing(), channels: vol.channels(), dtype: "f32".into() };
    encode(&header, &f32_payload(vol.data()))
}

pub fn decode_volume(bytes: &[u8]) -> Result<MultiChannelVolume> {
    let c = decode(bytes)?;
    if c.header.dtype()? != Dtype::F32 {
        return Err(Error::UnsupportedDtype(format!("{} where f32 was expected", c.header.dtype)));
    }
    Ok(MultiChannelVolume::new(c.header.dims, c.header.spacing_mm, c.header.channels, f32_values(&c.payload))?)
}

pub fn encode_mask(mask: &MaskVolume) -> Result<Vec<u8>> {
    let header = Header { dims: mask.dims(), spacing_mm: mask.spacing(), channels: 1, dtype: "u8".into() };
    encode(&header, mask.labels())
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskVolume> {
    let c = decode(bytes)?;
    if c.header.dtype()? != Dtype::U8 || c.header.channels != 1 {
        return Err(Error::UnsupportedDtype(format!("{} x{} where single-channel u8 was expected", c.header.dtype, c.header.channels)));
    }
    Ok(MaskVolume::new(c.header.dims, c.header.spacing_mm, c.payload)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<MultiChannelVolume> {
    decode_volume(&read(path.as_ref())?)
}

pub fn write_volume(vol: &MultiChannelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(vol)?)
}

/// Reads a single-channel volume.
pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let v = read_volume(path)?;
    if v.channels() != 1 {
        return Err(Error::HeaderMismatch(format!("expected one channel, found {}", v.channels())));
    }
    Ok(v.channel_volume(0))
}

pub fn write_scalar(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    write_volume(&MultiChannelVolume::from(vol.clone()), path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    decode_mask(&read(path.as_ref())?)
}

pub fn write_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_mask(mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_size_and_channel_order() {
        let a = ScalarVolume::filled([4, 3, 2], [1.0, 2.0, 3.0], 1.0).unwrap();
        let b = ScalarVolume::filled([4, 3, 2], [1.0, 2.0, 3.0], 2.0).unwrap();
        let v = MultiChannelVolume::from_channels(&[a, b]).unwrap();
        let bytes = encode_volume(&v).unwrap();
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let payload = &bytes[8 + h..];
        assert_eq!(payload.len(), 24 * 2 * 4);
        assert_eq!(&payload[..4], &1.0f32.to_le_bytes());
        assert_eq!(&payload[24 * 4..24 * 4 + 4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn big_single_channel_payload() {
        let v = ScalarVolume::filled([112; 3], [2.0; 3], 0.0).unwrap();
        let bytes = encode_volume(&MultiChannelVolume::from(v)).unwrap();
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 8 - h, 112 * 112 * 112 * 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let v = MultiChannelVolume::from(ScalarVolume::filled([3; 3], [1.0; 3], 0.5).unwrap());
        let mut bytes = encode_volume(&v).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_volume(&bad), Err(Error::BadMagic(m)) if &m == b"XXXX"));
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_volume(&bytes), Err(Error::HeaderMismatch(_))));
        let header = Header { dims: [2; 3], spacing_mm: [1.0; 3], channels: 1, dtype: "f64".into() };
        assert!(matches!(decode(&encode(&header, &[0; 64]).unwrap()), Err(Error::UnsupportedDtype(_))));
        let mask = MaskVolume::zeros([2; 3], [1.0; 3]).unwrap();
        assert!(matches!(decode_volume(&encode_mask(&mask).unwrap()), Err(Error::UnsupportedDtype(_))));
    }

    #[test]
    fn mask_roundtrip() {
        let m = MaskVolume::new([3, 2, 1], [1.0; 3], vec![0, 1, 2, 3, 2, 1]).unwrap();
        assert_eq!(decode_mask(&encode_mask(&m).unwrap()).unwrap(), m);
    }
}
