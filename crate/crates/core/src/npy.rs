//! Minimal reader/writer for `.npy` arrays inside `.npz` containers.
//!
//! Only 2-D arrays are supported; that covers the per-slice
//! `image`/`label` layout used by both dataset paths.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use zip::write::SimpleFileOptions;

use crate::error::{EvilError, Result};

const MAGIC: &[u8] = b"\x93NUMPY";

/// Element types understood by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    U8,
    I8,
    U16,
    I16,
    I32,
    I64,
    F32,
    F64,
}

impl Dtype {
    fn parse(descr: &str) -> Option<Self> {
        Some(match descr {
            "|u1" | "<u1" => Dtype::U8,
            "|i1" | "<i1" => Dtype::I8,
            "<u2" => Dtype::U16,
            "<i2" => Dtype::I16,
            "<i4" => Dtype::I32,
            "<i8" => Dtype::I64,
            "<f4" => Dtype::F32,
            "<f8" => Dtype::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Dtype::U8 | Dtype::I8 => 1,
            Dtype::U16 | Dtype::I16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::I64 | Dtype::F64 => 8,
        }
    }

    fn decode(self, b: &[u8]) -> f64 {
        match self {
            Dtype::U8 => b[0] as f64,
            Dtype::I8 => b[0] as i8 as f64,
            Dtype::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Dtype::I32 => i32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Dtype::I64 => i64::from_le_bytes(b.try_into().expect("8 bytes")) as f64,
            Dtype::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
            Dtype::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
        }
    }
}

fn encode_header(descr: &str, shape: (usize, usize)) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {}), }}",
        shape.0, shape.1
    );
    // preamble (10 bytes) + dict + padding + '\n' must be a multiple of 64
    let unpadded = 10 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header_len = dict.len() + pad + 1;
    let mut out = Vec::with_capacity(10 + header_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header_len as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    out
}

pub fn encode_f32(a: &Array2<f32>) -> Vec<u8> {
    let mut out = encode_header("<f4", a.dim());
    for v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_u8(a: &Array2<u8>) -> Vec<u8> {
    let mut out = encode_header("|u1", a.dim());
    out.extend(a.iter().copied());
    out
}

fn header_field<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}'"))? + key.len() + 2;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    Some(rest)
}

/// Decodes a 2-D `.npy` payload into `f64` values regardless of its dtype.
pub fn decode_2d(bytes: &[u8]) -> std::result::Result<Array2<f64>, String> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err("not an .npy payload".into());
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err("truncated .npy header".into());
            }
            (
                u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize,
                12,
            )
        }
        v => return Err(format!("unsupported .npy version {v}")),
    };
    let header = std::str::from_utf8(bytes.get(offset..offset + header_len).ok_or("truncated header")?)
        .map_err(|_| "header is not UTF-8")?;
    let descr = header_field(header, "descr")
        .and_then(|r| r.strip_prefix('\''))
        .and_then(|r| r.split('\'').next())
        .ok_or("missing descr")?;
    let dtype = Dtype::parse(descr).ok_or_else(|| format!("unsupported dtype {descr}"))?;
    let fortran = header_field(header, "fortran_order")
        .map(|r| r.starts_with("True"))
        .ok_or("missing fortran_order")?;
    let shape_str = header_field(header, "shape")
        .and_then(|r| r.strip_prefix('('))
        .and_then(|r| r.split(')').next())
        .ok_or("missing shape")?;
    let dims: Vec<usize> = shape_str
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| format!("bad shape entry {s}")))
        .collect::<std::result::Result<_, _>>()?;
    let (h, w) = match dims.as_slice() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => return Err(format!("expected a 2-D array, got shape {other:?}")),
    };
    let data = &bytes[offset + header_len..];
    let size = dtype.size();
    if data.len() < h * w * size {
        return Err(format!("payload holds {} bytes, need {}", data.len(), h * w * size));
    }
    let values: Vec<f64> = data[..h * w * size].chunks_exact(size).map(|c| dtype.decode(c)).collect();
    let arr = if fortran {
        Array2::from_shape_vec((w, h), values).map(|a| a.reversed_axes().as_standard_layout().into_owned())
    } else {
        Array2::from_shape_vec((h, w), values)
    };
    arr.map_err(|e| e.to_string())
}

/// Writes a `.npz` archive holding the given named `.npy` payloads. Entries
/// carry a fixed timestamp so identical content yields identical bytes.
pub fn write_npz(path: &Path, entries: &[(&str, Vec<u8>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| EvilError::io(path, e))?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, payload) in entries {
        zip.start_file(format!("{name}.npy"), opts)
            .map_err(|e| EvilError::io(path, std::io::Error::other(e)))?;
        zip.write_all(payload).map_err(|e| EvilError::io(path, e))?;
    }
    zip.finish()
        .map_err(|e| EvilError::io(path, std::io::Error::other(e)))?;
    Ok(())
}

/// Reads one named 2-D array from a `.npz` archive.
pub fn read_npz_array(path: &Path, name: &str) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| EvilError::io(path, e))?;
    let mut zip = zip::ZipArchive::new(file)
        .map_err(|e| EvilError::ingestion(path, format!("not a valid .npz archive: {e}")))?;
    let mut entry = zip
        .by_name(&format!("{name}.npy"))
        .map_err(|_| EvilError::ingestion(path, format!("missing array '{name}'")))?;
    let mut bytes = Vec::new();
    entry.read_to_end(&mut bytes).map_err(|e| EvilError::io(path, e))?;
    decode_2d(&bytes).map_err(|reason| EvilError::ingestion(path, format!("array '{name}': {reason}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_aligned() {
        let h = encode_header("<f4", (256, 256));
        assert_eq!(h.len() % 64, 0);
        assert_eq!(*h.last().unwrap(), b'\n');
    }

    #[test]
    fn roundtrip_through_npz() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.npz");
        let img = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f32 * 0.5);
        let lab = Array2::from_shape_fn((3, 5), |(i, j)| ((i + j) % 4) as u8);
        write_npz(&path, &[("image", encode_f32(&img)), ("label", encode_u8(&lab))]).unwrap();
        let back = read_npz_array(&path, "image").unwrap();
        assert_eq!(back, img.mapv(|v| v as f64));
        let back = read_npz_array(&path, "label").unwrap();
        assert_eq!(back, lab.mapv(|v| v as f64));
        assert!(read_npz_array(&path, "missing").is_err());
    }

    #[test]
    fn decodes_fortran_order_and_int64() {
        let mut bytes = encode_header("<i8", (2, 3));
        let at = bytes.windows(5).position(|w| w == b"False").unwrap();
        bytes[at..at + 5].copy_from_slice(b"True ");
        // column-major payload for [[0, 1, 2], [3, 4, 5]]
        for v in [0i64, 3, 1, 4, 2, 5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let a = decode_2d(&bytes).unwrap();
        assert_eq!(a, Array2::from_shape_vec((2, 3), vec![0., 1., 2., 3., 4., 5.]).unwrap());
    }
}
