//! Packed raw container: magic `TSSL`, little-endian `u32` count, H, W, C,
//! then `f64` values row-major over `[count, H, W, C]`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PACKED_MAGIC: &[u8; 4] = b"TSSL";

#[derive(Clone, Debug, PartialEq)]
pub struct PackedArray {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl PackedArray {
    /// A `[rows, cols]` matrix stored as `count = rows, H = 1, W = cols, C = 1`.
    pub fn from_matrix(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        PackedArray {
            count: rows,
            height: 1,
            width: cols,
            channels: 1,
            values,
        }
    }

    pub fn item_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

fn u32_field(name: &str, v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Container(format!("{name} {v} exceeds u32")))
}

pub fn write_packed(path: impl AsRef<Path>, arr: &PackedArray) -> Result<()> {
    let path = path.as_ref();
    if arr.values.len() != arr.count * arr.item_len() {
        return Err(Error::Container(format!(
            "{} values for {}x{}x{}x{}",
            arr.values.len(),
            arr.count,
            arr.height,
            arr.width,
            arr.channels
        )));
    }
    let mut buf = Vec::with_capacity(20 + 8 * arr.values.len());
    buf.extend_from_slice(PACKED_MAGIC);
    for (name, v) in [
        ("count", arr.count),
        ("height", arr.height),
        ("width", arr.width),
        ("channels", arr.channels),
    ] {
        buf.extend_from_slice(&u32_field(name, v)?);
    }
    for v in &arr.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<PackedArray> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != PACKED_MAGIC {
        return Err(Error::Container(format!("{}: bad magic", path.display())));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, height, width, channels) = (field(0), field(1), field(2), field(3));
    let n = count * height * width * channels;
    let payload = &bytes[20..];
    if payload.len() != 8 * n {
        return Err(Error::Container(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            8 * n,
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(PackedArray {
        count,
        height,
        width,
        channels,
        values,
    })
}
