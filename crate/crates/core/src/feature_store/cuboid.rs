//! Dense feature cuboids and the `.fcub` container.
//!
//! Layout (little-endian):
//! - magic `FCUB` (4 bytes)
//! - version: u32 (= 1)
//! - dims C, T, H, W: 4 x u32
//! - payload: C*T*H*W x f32, W fastest, C slowest

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};

pub const FCUB_MAGIC: [u8; 4] = *b"FCUB";
pub const FCUB_VERSION: u32 = 1;
pub const FCUB_HEADER_LEN: usize = 4 + 4 + 16;

/// Shape of a feature cuboid: channels, time, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub channels: usize,
    pub time: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub const fn new(channels: usize, time: usize, height: usize, width: usize) -> Self {
        Dims {
            channels,
            time,
            height,
            width,
        }
    }

    pub fn as_tuple(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.time, self.height, self.width)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.time * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.time == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidDims(format!(
                "all dims must be positive, got {:?}",
                self.as_tuple()
            )));
        }
        Ok(())
    }
}

impl Default for Dims {
    /// Layer-4e I3D output for a 64-frame, 224x224 clip.
    fn default() -> Self {
        Dims::new(528, 4, 14, 14)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.channels, self.time, self.height, self.width
        )
    }
}

/// One segment's feature tensor, shaped (C, T, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCuboid {
    pub video_id: String,
    pub segment_index: u32,
    pub data: Array4<f32>,
}

impl FeatureCuboid {
    pub fn new(video_id: impl Into<String>, segment_index: u32, data: Array4<f32>) -> Result<Self> {
        let cuboid = FeatureCuboid {
            video_id: video_id.into(),
            segment_index,
            data,
        };
        cuboid.dims().validate()?;
        check_finite(cuboid.data.iter().copied())?;
        Ok(cuboid)
    }

    pub fn dims(&self) -> Dims {
        let (c, t, h, w) = self.data.dim();
        Dims::new(c, t, h, w)
    }
}

pub(crate) fn check_finite(values: impl Iterator<Item = f32>) -> Result<()> {
    for (index, v) in values.enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index,
                value: v as f64,
            });
        }
    }
    Ok(())
}

/// Serializes a tensor into `.fcub` bytes. Fails on any non-finite value.
pub fn encode_cuboid(data: &Array4<f32>) -> Result<Vec<u8>> {
    let (c, t, h, w) = data.dim();
    Dims::new(c, t, h, w).validate()?;
    let mut out = Vec::with_capacity(FCUB_HEADER_LEN + data.len() * 4);
    out.extend_from_slice(&FCUB_MAGIC);
    out.extend_from_slice(&FCUB_VERSION.to_le_bytes());
    for d in [c, t, h, w] {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidDims(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    // iter() walks in logical (standard) order regardless of memory layout
    for (index, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index,
                value: v as f64,
            });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_cuboid(bytes: &[u8], path: &Path) -> Result<Array4<f32>> {
    let truncated = |what, expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        what,
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated("magic", 4));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != FCUB_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FCUB_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < FCUB_HEADER_LEN {
        return Err(truncated("header", FCUB_HEADER_LEN));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != FCUB_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let raw = [word(2), word(3), word(4), word(5)];
    let numel = raw
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::DimOverflow {
            dims: raw.iter().map(|&d| d as u64).collect(),
        })?
        / 4;
    let dims = Dims::new(raw[0] as usize, raw[1] as usize, raw[2] as usize, raw[3] as usize);
    dims.validate()?;
    let expected = FCUB_HEADER_LEN + numel * 4;
    if bytes.len() < expected {
        return Err(truncated("payload", expected));
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            path: path.to_path_buf(),
            found: (bytes.len() - expected) as u64,
        });
    }
    let values: Vec<f32> = bytes[FCUB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    check_finite(values.iter().copied())?;
    Ok(Array4::from_shape_vec(dims.as_tuple(), values).expect("length checked above"))
}

/// Writes a cuboid. Nothing is written if the tensor holds a non-finite value.
pub fn write_cuboid(cuboid: &FeatureCuboid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cuboid(&cuboid.data)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a cuboid. Identity fields come from the manifest, so they are left
/// for the caller to fill in.
pub fn read_cuboid(path: impl AsRef<Path>) -> Result<FeatureCuboid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let data = decode_cuboid(&bytes, path)?;
    Ok(FeatureCuboid {
        video_id: String::new(),
        segment_index: 0,
        data,
    })
}
