//! Image files: 16-bit PGM with a window sidecar, or raw floats behind a
//! JSON header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, write_atomic, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormat {
    /// Binary PGM (P5), maxval 65535, values windowed to the image range.
    Pgm,
    /// Little-endian float32 payload with a JSON header.
    Rawf32,
    /// Little-endian float64 payload with a JSON header (lossless).
    Rawf64,
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(ImageFormat::Pgm),
            "rawf32" => Ok(ImageFormat::Rawf32),
            "rawf64" => Ok(ImageFormat::Rawf64),
            _ => Err(Error::invalid(format!(
                "unknown image format {s:?} (pgm, rawf32, rawf64)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum PixelType {
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImageHeader {
    /// `[height, width]`.
    shape: [usize; 2],
    dtype: PixelType,
    order: String,
    data: String,
}

const RAW_IMAGE_ORDER: &str = "row-major";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WindowSidecar {
    window: [f64; 2],
}

/// `scan.pgm` → `scan.pgm.json`.
pub fn window_sidecar_path(pgm: &Path) -> PathBuf {
    let mut s = pgm.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn sibling(path: &Path, ext: &str) -> Result<(PathBuf, String)> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad output path {}", path.display())))?;
    let name = format!("{stem}.{ext}");
    Ok((path.parent().unwrap_or(Path::new(".")).join(&name), name))
}

pub fn save_image(img: &Image, path: &Path, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Pgm => {
            let (lo, hi) = img.min_max();
            write_atomic(path, &encode_pgm(img, lo, hi))?;
            write_json(
                &window_sidecar_path(path),
                &WindowSidecar { window: [lo, hi] },
            )
        }
        ImageFormat::Rawf32 | ImageFormat::Rawf64 => {
            let (bin, name) = sibling(path, "bin")?;
            let (dtype, payload) = if format == ImageFormat::Rawf32 {
                (
                    PixelType::F32,
                    img.pixels
                        .iter()
                        .flat_map(|&p| (p as f32).to_le_bytes())
                        .collect::<Vec<u8>>(),
                )
            } else {
                (
                    PixelType::F64,
                    img.pixels.iter().flat_map(|&p| p.to_le_bytes()).collect(),
                )
            };
            write_atomic(&bin, &payload)?;
            write_json(
                path,
                &RawImageHeader {
                    shape: [img.height, img.width],
                    dtype,
                    order: RAW_IMAGE_ORDER.into(),
                    data: name,
                },
            )
        }
    }
}

/// Reads `.pgm` (applying the window sidecar if present) or a raw header
/// `.json`.
pub fn load_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => {
            let sidecar = window_sidecar_path(path);
            let window = if sidecar.exists() {
                Some(read_json::<WindowSidecar>(&sidecar)?.window)
            } else {
                None
            };
            decode_pgm(&read_bytes(path)?, window)
        }
        Some("json") => {
            let h: RawImageHeader = read_json(path)?;
            if h.order != RAW_IMAGE_ORDER {
                return Err(Error::format(
                    "order",
                    format!("expected {RAW_IMAGE_ORDER:?}, got {:?}", h.order),
                ));
            }
            let bytes = read_bytes(&path.parent().unwrap_or(Path::new(".")).join(&h.data))?;
            let [height, width] = h.shape;
            let size = if h.dtype == PixelType::F32 { 4 } else { 8 };
            if bytes.len() != height * width * size {
                return Err(Error::format(
                    "data",
                    format!(
                        "payload has {} bytes, shape {:?} needs {}",
                        bytes.len(),
                        h.shape,
                        height * width * size
                    ),
                ));
            }
            let pixels = match h.dtype {
                PixelType::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                PixelType::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            Image::new(height, width, pixels)
        }
        _ => Err(Error::invalid(format!(
            "cannot infer image format of {}; use .pgm or .json",
            path.display()
        ))),
    }
}

/// PGM P5 bytes with `[lo, hi]` mapped linearly onto `[0, 65535]`.
pub fn encode_pgm(img: &Image, lo: f64, hi: f64) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    let scale = if hi > lo { 65535.0 / (hi - lo) } else { 0.0 };
    for &p in &img.pixels {
        let q = ((p - lo) * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

fn decode_pgm(bytes: &[u8], window: Option<[f64; 2]>) -> Result<Image> {
    // Header: magic, width, height, maxval separated by whitespace, with
    // optional comments, then exactly one whitespace byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("header", "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(Error::format(
            "magic",
            format!("expected P5, got {:?}", fields[0]),
        ));
    }
    let num = |i: usize, name: &str| -> Result<usize> {
        fields[i]
            .parse()
            .map_err(|_| Error::format(name, format!("not a number: {:?}", fields[i])))
    };
    let (width, height, maxval) = (num(1, "width")?, num(2, "height")?, num(3, "maxval")?);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(
            "maxval",
            format!("unsupported maxval {maxval}"),
        ));
    }
    let bps = if maxval < 256 { 1 } else { 2 };
    let need = width * height * bps;
    if bytes.len() < pos + need {
        return Err(Error::format(
            "data",
            format!(
                "need {need} pixel bytes, have {}",
                bytes.len().saturating_sub(pos)
            ),
        ));
    }
    let raw = &bytes[pos..pos + need];
    let [lo, hi] = window.unwrap_or([0.0, 1.0]);
    let scale = (hi - lo) / maxval as f64;
    let pixels = (0..width * height)
        .map(|i| {
            let q = if bps == 1 {
                raw[i] as f64
            } else {
                u16::from_be_bytes([raw[2 * i], raw[2 * i + 1]]) as f64
            };
            lo + q * scale
        })
        .collect();
    Image::new(height, width, pixels)
}
