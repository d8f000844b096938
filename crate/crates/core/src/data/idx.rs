//! IDX container parsing (the format used by the MNIST distribution).
//!
//! Layout: two zero bytes, a dtype byte, a rank byte, `rank` big-endian
//! `u32` extents, then the row-major payload. Gzipped files are detected by
//! their magic bytes and decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdxType {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxType {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxType::U8,
            0x09 => IdxType::I8,
            0x0B => IdxType::I16,
            0x0C => IdxType::I32,
            0x0D => IdxType::F32,
            0x0E => IdxType::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        match self {
            IdxType::U8 => 0x08,
            IdxType::I8 => 0x09,
            IdxType::I16 => 0x0B,
            IdxType::I32 => 0x0C,
            IdxType::F32 => 0x0D,
            IdxType::F64 => 0x0E,
        }
    }

    fn width(self) -> usize {
        match self {
            IdxType::U8 | IdxType::I8 => 1,
            IdxType::I16 => 2,
            IdxType::I32 | IdxType::F32 => 4,
            IdxType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dtype: IdxType,
    pub dims: Vec<usize>,
    /// Raw values widened to `f64` (no rescaling).
    pub values: Vec<f64>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!(
            "idx header truncated at byte offset {}: need 4 magic bytes",
            bytes.len()
        )));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!(
            "bad idx magic at byte offset 0: expected [0x00, 0x00], found [{:#04x}, {:#04x}]",
            bytes[0], bytes[1]
        )));
    }
    let dtype = IdxType::from_code(bytes[2]).ok_or_else(|| {
        Error::Format(format!(
            "bad idx dtype at byte offset 2: expected one of 0x08,0x09,0x0b,0x0c,0x0d,0x0e, found {:#04x}",
            bytes[2]
        ))
    })?;
    let rank = bytes[3] as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(Error::Format(format!(
            "idx extents truncated at byte offset {}: header needs {header_len} bytes",
            bytes.len()
        )));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let count: usize = dims.iter().product();
    let need = header_len + count * dtype.width();
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "idx payload truncated at byte offset {}: expected {need} bytes for dims {dims:?}",
            bytes.len()
        )));
    }
    let payload = &bytes[header_len..need];
    let values = match dtype {
        IdxType::U8 => payload.iter().map(|&b| b as f64).collect(),
        IdxType::I8 => payload.iter().map(|&b| b as i8 as f64).collect(),
        IdxType::I16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        IdxType::I32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        IdxType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        IdxType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Ok(IdxArray { dtype, dims, values })
}

/// Reads a file, gunzipping it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_maybe_gz(path)?)
}

/// Serializes `u8` data as an uncompressed IDX file.
pub fn encode_idx_u8(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IdxType::U8.code(), dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

/// Builds a dataset from an image array (`N×H×W`, `u8`) and a label array (`N`).
pub fn dataset_from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Dataset> {
    if images.dtype != IdxType::U8 {
        return Err(Error::Format(format!(
            "image payload must be unsigned bytes, found {:?}",
            images.dtype
        )));
    }
    if images.dims.len() != 3 {
        return Err(Error::Format(format!(
            "image array must be N×H×W, found dims {:?}",
            images.dims
        )));
    }
    if labels.dims.len() != 1 || labels.dims[0] != images.dims[0] {
        return Err(Error::Format(format!(
            "label dims {:?} do not match {} images",
            labels.dims, images.dims[0]
        )));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let shape = vec![1, h, w];
    let mut out = Vec::with_capacity(n);
    if h * w > 0 {
        for chunk in images.values.chunks(h * w).take(n) {
            out.push(Tensor::new(shape.clone(), chunk.iter().map(|v| v / 255.0).collect())?);
        }
    }
    let labels: Vec<usize> = labels.values.iter().map(|&v| v as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(shape, out, labels, num_classes)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    dataset_from_idx(&read_idx(images_path)?, &read_idx(labels_path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> (Vec<u8>, Vec<u8>) {
        let pixels: Vec<u8> = (0..n * 28 * 28).map(|i| (i * 37 % 256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        (
            encode_idx_u8(&[n, 28, 28], &pixels),
            encode_idx_u8(&[n], &labels),
        )
    }

    #[test]
    fn four_image_fixture() {
        let (img, lab) = fixture(4);
        let ds = dataset_from_idx(&parse_idx(&img).unwrap(), &parse_idx(&lab).unwrap()).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.image_shape(), &[1, 28, 28]);
        assert_eq!(ds.labels(), &[0, 1, 2, 3]);
        for x in ds.images() {
            assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // pixel 5 of image 0 is byte 5*37 % 256 = 185
        assert_eq!(ds.image(0).data()[5], 185.0 / 255.0);
    }

    #[test]
    fn empty_extent_is_a_valid_empty_dataset() {
        let (img, lab) = fixture(0);
        let ds = dataset_from_idx(&parse_idx(&img).unwrap(), &parse_idx(&lab).unwrap()).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn corrupted_magic_names_expected_and_found() {
        let (mut img, _) = fixture(1);
        img[1] = 0x07;
        let msg = parse_idx(&img).unwrap_err().to_string();
        assert!(msg.contains("expected [0x00, 0x00]"), "{msg}");
        assert!(msg.contains("0x07"), "{msg}");
        assert!(msg.contains("offset 0"), "{msg}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let (img, _) = fixture(2);
        let cut = &img[..img.len() - 10];
        let msg = parse_idx(cut).unwrap_err().to_string();
        assert!(msg.contains(&format!("offset {}", cut.len())), "{msg}");
    }

    #[test]
    fn wider_dtypes_are_big_endian() {
        let mut bytes = vec![0, 0, 0x0B, 1, 0, 0, 0, 2];
        bytes.extend_from_slice(&(-3i16).to_be_bytes());
        bytes.extend_from_slice(&(300i16).to_be_bytes());
        let arr = parse_idx(&bytes).unwrap();
        assert_eq!(arr.values, vec![-3.0, 300.0]);
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let (img, _) = fixture(3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.idx.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&img).unwrap();
        std::fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx(&path).unwrap(), parse_idx(&img).unwrap());
    }
}
