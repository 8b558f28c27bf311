//! Minimal NPY (version 1.0) reader and writer for little-endian float
//! arrays in C order — the interchange format for dataset bundles.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::real::Real;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

/// An n-dimensional array in C (row-major) order. Only 1-D and 2-D shapes
/// are used by this crate.
#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> NpyArray<T> {
    pub fn from_matrix(m: &DMatrix<T>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn from_vector(v: &DVector<T>) -> Self {
        Self {
            shape: vec![v.len()],
            data: v.iter().cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reinterprets as a matrix; a 1-D array becomes a single column.
    pub fn to_matrix(&self) -> Option<DMatrix<T>> {
        match self.shape.len() {
            1 => Some(DMatrix::from_row_slice(self.shape[0], 1, &self.data)),
            2 => Some(DMatrix::from_row_slice(self.shape[0], self.shape[1], &self.data)),
            _ => None,
        }
    }

    pub fn to_vector(&self) -> Option<DVector<T>> {
        if self.shape.len() == 1 {
            Some(DVector::from_row_slice(&self.data))
        } else {
            None
        }
    }
}

fn shape_literal(shape: &[usize]) -> String {
    match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    }
}

/// Writes a version 1.0 file: magic, padded dict header, raw little-endian
/// data. The layout is byte-stable so identical arrays produce identical
/// files.
pub fn write_npy<T: Real>(path: &Path, arr: &NpyArray<T>) -> Result<()> {
    let header_body = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        T::NPY_DESCR,
        shape_literal(&arr.shape)
    );
    // Pad with spaces so magic + version + length + header is a multiple of
    // 64 bytes, with a terminating newline.
    let unpadded = MAGIC.len() + 2 + 2 + header_body.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    let header = format!("{header_body}{}\n", " ".repeat(pad));

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + arr.data.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in &arr.data {
        v.write_le(&mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

fn header_field<'a>(header: &'a str, key: &str, file: &str) -> Result<&'a str> {
    let pos = header
        .find(key)
        .ok_or_else(|| Error::format(file, format!("header is missing {key}")))?;
    let rest = &header[pos + key.len()..];
    let colon = rest
        .find(':')
        .ok_or_else(|| Error::format(file, format!("malformed header near {key}")))?;
    Ok(rest[colon + 1..].trim_start())
}

fn parse_header(header: &str, file: &str) -> Result<(String, bool, Vec<usize>)> {
    let descr_raw = header_field(header, "'descr'", file)?;
    if !descr_raw.starts_with('\'') {
        return Err(Error::format(file, "descr is not a quoted string"));
    }
    let end = descr_raw[1..]
        .find('\'')
        .ok_or_else(|| Error::format(file, "unterminated descr string"))?;
    let descr = descr_raw[1..1 + end].to_string();

    let order_raw = header_field(header, "'fortran_order'", file)?;
    let fortran = if order_raw.starts_with("False") {
        false
    } else if order_raw.starts_with("True") {
        true
    } else {
        return Err(Error::format(file, "fortran_order is not a boolean"));
    };

    let shape_raw = header_field(header, "'shape'", file)?;
    if !shape_raw.starts_with('(') {
        return Err(Error::format(file, "shape is not a tuple"));
    }
    let close = shape_raw
        .find(')')
        .ok_or_else(|| Error::format(file, "unterminated shape tuple"))?;
    let mut shape = Vec::new();
    for part in shape_raw[1..close].split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: usize = part
            .parse()
            .map_err(|_| Error::format(file, format!("bad shape entry {part:?}")))?;
        shape.push(v);
    }
    if shape.is_empty() {
        return Err(Error::format(file, "zero-dimensional arrays are not supported"));
    }
    Ok((descr, fortran, shape))
}

/// Reads a version 1.0 float array. Both `<f4` and `<f8` payloads are
/// accepted and converted to `T`; the byte count must match the declared
/// shape exactly.
pub fn read_npy<T: Real>(path: &Path) -> Result<NpyArray<T>> {
    let file = path.display().to_string();
    let bytes = fs::read(path)?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format(&file, "not an NPY file (bad magic)"));
    }
    if bytes[6] != 1 || bytes[7] != 0 {
        return Err(Error::format(
            &file,
            format!("unsupported NPY version {}.{}", bytes[6], bytes[7]),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    if bytes.len() < 10 + header_len {
        return Err(Error::format(&file, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..10 + header_len])
        .map_err(|_| Error::format(&file, "header is not valid UTF-8"))?;
    let (descr, fortran, shape) = parse_header(header, &file)?;
    if fortran {
        return Err(Error::format(&file, "fortran_order arrays are not supported"));
    }
    let itemsize = match descr.as_str() {
        "<f4" => 4,
        "<f8" => 8,
        other => {
            return Err(Error::format(
                &file,
                format!("unsupported descr {other:?}, expected '<f4' or '<f8'"),
            ))
        }
    };
    let count: usize = shape.iter().product();
    let payload = &bytes[10 + header_len..];
    if payload.len() != count * itemsize {
        return Err(Error::format(
            &file,
            format!(
                "payload has {} bytes, shape {:?} requires {}",
                payload.len(),
                shape,
                count * itemsize
            ),
        ));
    }
    let mut data = Vec::with_capacity(count);
    match itemsize {
        4 => {
            for chunk in payload.chunks_exact(4) {
                data.push(T::of_f64(f64::from(f32::read_le(chunk))));
            }
        }
        _ => {
            for chunk in payload.chunks_exact(8) {
                data.push(T::of_f64(f64::read_le(chunk)));
            }
        }
    }
    Ok(NpyArray { shape, data })
}
