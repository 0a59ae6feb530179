//! On-disk container for volumes and masks.
//!
//! A container is two files: the raw payload at `path` and a JSON header at
//! `path` + `.json`. The payload is little-endian and frame-major (`t`
//! slowest, `x` fastest). Complex payloads interleave `(re, im)`.
//!
//! ```json
//! {"nx":64,"ny":64,"nt":8,"dtype":"c128","byte_order":"little"}
//! ```
//!
//! Volumes use the `.cvol` extension, masks `.cmask` with `dtype` `"u8"`.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{DynamicImage, KSpaceData, Shape};
use crate::error::{LanternError, Result};
use crate::sampling::{PatternKind, SamplingMask};

pub const VOLUME_EXT: &str = "cvol";
pub const MASK_EXT: &str = "cmask";

/// Element type of a container payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    /// Complex with 32-bit components.
    C64,
    /// Complex with 64-bit components.
    C128,
    U8,
}

impl Dtype {
    fn width(self) -> u64 {
        match self {
            Dtype::C64 => 8,
            Dtype::C128 => 16,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    nx: usize,
    ny: usize,
    nt: usize,
    dtype: Dtype,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pattern_kind: Option<PatternKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_accel: Option<f64>,
}

impl Header {
    fn shape(&self) -> Shape {
        Shape::new(self.nx, self.ny, self.nt)
    }
}

/// Path of the JSON header that accompanies `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_container(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_string(header).expect("header serializes");
    fs::write(sidecar_path(path), json).map_err(|e| LanternError::io(sidecar_path(path), e))?;
    fs::write(path, payload).map_err(|e| LanternError::io(path, e))
}

fn read_container(path: &Path) -> Result<(Header, Vec<u8>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| LanternError::io(&side, e))?;
    let header: Header =
        serde_json::from_str(&text).map_err(|e| LanternError::MalformedHeader {
            path: side.clone(),
            reason: e.to_string(),
        })?;
    if header.byte_order != "little" {
        return Err(LanternError::MalformedHeader {
            path: side,
            reason: format!("unsupported byte order {:?}", header.byte_order),
        });
    }
    header
        .shape()
        .validate()
        .map_err(|e| LanternError::MalformedHeader {
            path: side.clone(),
            reason: e.to_string(),
        })?;
    let payload = fs::read(path).map_err(|e| LanternError::io(path, e))?;
    let expected = header.shape().len() as u64 * header.dtype.width();
    if payload.len() as u64 != expected {
        return Err(LanternError::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() as u64,
        });
    }
    Ok((header, payload))
}

fn encode_complex(data: &[Complex64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.width() as usize);
    for z in data {
        match dtype {
            Dtype::C128 => {
                out.extend_from_slice(&z.re.to_le_bytes());
                out.extend_from_slice(&z.im.to_le_bytes());
            }
            Dtype::C64 => {
                out.extend_from_slice(&(z.re as f32).to_le_bytes());
                out.extend_from_slice(&(z.im as f32).to_le_bytes());
            }
            Dtype::U8 => unreachable!("complex payload"),
        }
    }
    out
}

fn decode_complex(path: &Path, payload: &[u8], dtype: Dtype) -> Result<Vec<Complex64>> {
    match dtype {
        Dtype::C128 => Ok(payload
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..].try_into().unwrap()),
                )
            })
            .collect()),
        Dtype::C64 => Ok(payload
            .chunks_exact(8)
            .map(|c| {
                Complex64::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect()),
        Dtype::U8 => Err(LanternError::MalformedHeader {
            path: sidecar_path(path),
            reason: "expected a complex dtype, found u8".into(),
        }),
    }
}

fn complex_header(shape: Shape, dtype: Dtype) -> Header {
    Header {
        nx: shape.nx,
        ny: shape.ny,
        nt: shape.nt,
        dtype,
        byte_order: "little".into(),
        pattern_kind: None,
        target_accel: None,
    }
}

/// Writes a volume in 64-bit-component precision (bit-exact round trip).
pub fn save_volume(path: impl AsRef<Path>, image: &DynamicImage) -> Result<()> {
    save_volume_as(path, image, Dtype::C128)
}

/// Writes a volume with the requested complex dtype. `C64` halves the file
/// size at the cost of rounding every component to `f32`.
pub fn save_volume_as(path: impl AsRef<Path>, image: &DynamicImage, dtype: Dtype) -> Result<()> {
    if dtype == Dtype::U8 {
        return Err(LanternError::InvalidParameter(
            "volumes need a complex dtype".into(),
        ));
    }
    let path = path.as_ref();
    write_container(
        path,
        &complex_header(image.shape(), dtype),
        &encode_complex(image.as_slice(), dtype),
    )
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<DynamicImage> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    let data = decode_complex(path, &payload, header.dtype)?;
    DynamicImage::new(header.shape(), data)
}

pub fn save_kspace(path: impl AsRef<Path>, y: &KSpaceData) -> Result<()> {
    let path = path.as_ref();
    write_container(
        path,
        &complex_header(y.shape(), Dtype::C128),
        &encode_complex(y.as_slice(), Dtype::C128),
    )
}

pub fn load_kspace(path: impl AsRef<Path>) -> Result<KSpaceData> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    let data = decode_complex(path, &payload, header.dtype)?;
    KSpaceData::new(header.shape(), data)
}

pub fn save_mask(path: impl AsRef<Path>, mask: &SamplingMask) -> Result<()> {
    let shape = mask.shape();
    let header = Header {
        nx: shape.nx,
        ny: shape.ny,
        nt: shape.nt,
        dtype: Dtype::U8,
        byte_order: "little".into(),
        pattern_kind: Some(mask.kind()),
        target_accel: Some(mask.target_accel()),
    };
    write_container(path.as_ref(), &header, mask.as_slice())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<SamplingMask> {
    let path = path.as_ref();
    let (header, payload) = read_container(path)?;
    if header.dtype != Dtype::U8 {
        return Err(LanternError::MalformedHeader {
            path: sidecar_path(path),
            reason: format!("mask dtype must be u8, found {:?}", header.dtype),
        });
    }
    let kind = header.pattern_kind.unwrap_or(PatternKind::Full);
    let accel = header.target_accel.unwrap_or(1.0);
    SamplingMask::from_parts(header.shape(), payload, kind, accel).map_err(|e| {
        LanternError::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}
