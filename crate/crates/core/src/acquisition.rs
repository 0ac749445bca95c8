//! Clinical acquisitions: resampling to canonical intrinsics and partial
//! poses read from positioner metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EulerPose, Intrinsics, Orientation, PoseJson};
use crate::io::read_bytes;
use crate::render::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Canonicalized {
    pub image: Image,
    /// Output pixels whose sample location fell on the source detector.
    pub covered_pixels: usize,
}

impl Canonicalized {
    /// The two detectors do not overlap; the image is all zeros.
    pub fn empty_overlap(&self) -> bool {
        self.covered_pixels == 0
    }
}

fn same_layout(a: &Intrinsics, b: &Intrinsics) -> bool {
    a.height == b.height
        && a.width == b.width
        && a.pixel_spacing_mm == b.pixel_spacing_mm
        && a.optical_center_mm == b.optical_center_mm
}

/// Source pixel index sampled by output pixel `(u, v)`.
pub fn source_location(k_src: &Intrinsics, k_canon: &Intrinsics, u: f64, v: f64) -> (f64, f64) {
    let (x, y) = k_canon.image_plane(u, v);
    k_src.pixel_index(x, y)
}

/// Resamples `img`, acquired with `k_src`, onto the detector `k_canon` with a
/// single bilinear pass. Samples within half a pixel of the source border
/// take the edge value; samples beyond it are zero.
pub fn canonicalize(
    img: &Image,
    k_src: &Intrinsics,
    k_canon: &Intrinsics,
) -> Result<Canonicalized> {
    let (fs, fc) = (k_src.focal_length_mm, k_canon.focal_length_mm);
    if (fs - fc).abs() > 1e-9 * fs.max(fc) {
        return Err(Error::invalid(format!(
            "focal lengths differ: source {fs} mm, canonical {fc} mm"
        )));
    }
    if k_src.orientation != k_canon.orientation {
        return Err(Error::invalid(format!(
            "detector orientations differ: {:?} vs {:?}",
            k_src.orientation, k_canon.orientation
        )));
    }
    if img.height != k_src.height || img.width != k_src.width {
        return Err(Error::invalid(format!(
            "image is {}x{} but source intrinsics describe {}x{}",
            img.height, img.width, k_src.height, k_src.width
        )));
    }
    if same_layout(k_src, k_canon) {
        let mut out = img.clone();
        out.intrinsics = Some(*k_canon);
        return Ok(Canonicalized {
            covered_pixels: out.pixels.len(),
            image: out,
        });
    }

    let (w, h) = (img.width as f64, img.height as f64);
    let mut pixels = vec![0.0; k_canon.height * k_canon.width];
    let mut covered = 0;
    for v in 0..k_canon.height {
        for u in 0..k_canon.width {
            let (us, vs) = source_location(k_src, k_canon, u as f64, v as f64);
            if !(-0.5..=w - 0.5).contains(&us) || !(-0.5..=h - 0.5).contains(&vs) {
                continue;
            }
            covered += 1;
            pixels[v * k_canon.width + u] = bilinear(img, us, vs);
        }
    }
    if covered == 0 {
        log::warn!("source and canonical detectors do not overlap; output is zero");
    }
    let image = Image::new(k_canon.height, k_canon.width, pixels)?.with_intrinsics(*k_canon);
    let image = match img.pose {
        Some(p) => image.with_pose(p),
        None => image,
    };
    Ok(Canonicalized {
        image,
        covered_pixels: covered,
    })
}

fn bilinear(img: &Image, us: f64, vs: f64) -> f64 {
    let axis = |x: f64, n: usize| -> (usize, usize, f64) {
        let x = x.clamp(0.0, (n - 1) as f64);
        let i0 = (x.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, x - i0 as f64)
    };
    let (u0, u1, fu) = axis(us, img.width);
    let (v0, v1, fv) = axis(vs, img.height);
    let top = img.get(u0, v0) * (1.0 - fu) + img.get(u1, v0) * fu;
    let bottom = img.get(u0, v1) * (1.0 - fu) + img.get(u1, v1) * fu;
    top * (1.0 - fv) + bottom * fv
}

/// Geometry read from an acquisition header. Every field is optional on
/// input; consumers report which one they miss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionMeta {
    /// LAO (+) / RAO (−).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_angle_deg: Option<f64>,
    /// CRA (+) / CAU (−).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_patient_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_to_detector_mm: Option<f64>,
    /// `[s_x, s_y]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_point_mm: Option<[f64; 2]>,
}

fn require<T: Copy>(v: Option<T>, what: &str, tag: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("{what} absent (DICOM {tag})")))
}

impl AcquisitionMeta {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("source_to_patient_mm", self.source_to_patient_mm),
            ("source_to_detector_mm", self.source_to_detector_mm),
        ] {
            if let Some(d) = v {
                if !(d.is_finite() && d > 0.0) {
                    return Err(Error::invalid(format!("{name} must be positive, got {d}")));
                }
            }
        }
        for (name, v) in [
            ("primary_angle_deg", self.primary_angle_deg),
            ("secondary_angle_deg", self.secondary_angle_deg),
        ] {
            if let Some(a) = v {
                if !a.is_finite() {
                    return Err(Error::invalid(format!("{name} must be finite")));
                }
            }
        }
        if let Some(s) = self.pixel_spacing_mm {
            if s.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::invalid(format!(
                    "pixel spacing must be positive, got {s:?}"
                )));
            }
        }
        Ok(())
    }

    /// Detector calibration described by the header.
    pub fn intrinsics(&self, orientation: Orientation) -> Result<Intrinsics> {
        let f = require(
            self.source_to_detector_mm,
            "source-to-detector distance",
            "(0018,1110)",
        )?;
        let rows = require(self.rows, "rows", "(0028,0010)")?;
        let cols = require(self.cols, "columns", "(0028,0011)")?;
        let spacing = require(self.pixel_spacing_mm, "imager pixel spacing", "(0018,1164)")?;
        Ok(Intrinsics::new(
            f,
            rows,
            cols,
            spacing,
            self.principal_point_mm.unwrap_or([0.0, 0.0]),
        )?
        .with_orientation(orientation))
    }
}

/// Side of the patient the source sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSign {
    #[default]
    NegativeY,
    PositiveY,
}

/// How the source-to-patient distance becomes the `y` translation:
/// `y = ±(SPD + offset_mm)`. Use the offset when the recorded distance is
/// not measured to the volume origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConvention {
    pub sign: DepthSign,
    pub offset_mm: f64,
}

/// A pose of which only some parameters are known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialPose {
    pub euler: EulerPose,
    /// Known flags in `(α, β, γ, x, y, z)` order.
    pub known: [bool; 6],
}

impl PartialPose {
    pub fn is_partial(&self) -> bool {
        self.known.iter().any(|k| !k)
    }

    pub fn to_json(&self) -> PoseJson {
        let e = &self.euler;
        PoseJson::EulerZxyDeg {
            rotation: [e.alpha_deg, e.beta_deg, e.gamma_deg],
            translation: [e.x_mm, e.y_mm, e.z_mm],
            partial: self.is_partial(),
        }
    }
}

/// α, β and y from the positioner; γ, x and z are left at zero and marked
/// unknown.
pub fn pose_from_meta(m: &AcquisitionMeta, convention: DepthConvention) -> Result<PartialPose> {
    m.validate()?;
    let alpha = require(
        m.primary_angle_deg,
        "primary positioner angle",
        "(0018,1510)",
    )?;
    let beta = require(
        m.secondary_angle_deg,
        "secondary positioner angle",
        "(0018,1511)",
    )?;
    let spd = require(
        m.source_to_patient_mm,
        "source-to-patient distance",
        "(0018,1111)",
    )?;
    let depth = spd + convention.offset_mm;
    let y = match convention.sign {
        DepthSign::NegativeY => -depth,
        DepthSign::PositiveY => depth,
    };
    Ok(PartialPose {
        euler: EulerPose::new(alpha, beta, 0.0, 0.0, y, 0.0),
        known: [true, true, false, false, true, false],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaFormat {
    JsonSidecar,
    DicomMin,
}

impl std::str::FromStr for MetaFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json_sidecar" | "json" => Ok(MetaFormat::JsonSidecar),
            "dicom_min" | "dicom" => Ok(MetaFormat::DicomMin),
            _ => Err(Error::invalid(format!(
                "unknown metadata format {s:?} (json_sidecar, dicom_min)"
            ))),
        }
    }
}

pub fn parse_meta(path: &Path, format: MetaFormat) -> Result<AcquisitionMeta> {
    let bytes = read_bytes(path)?;
    let meta = match format {
        MetaFormat::JsonSidecar => serde_json::from_slice::<AcquisitionMeta>(&bytes)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?,
        MetaFormat::DicomMin => decode_dicom_min(&bytes)?,
    };
    meta.validate()?;
    Ok(meta)
}

const TAG_PRIMARY: (u16, u16) = (0x0018, 0x1510);
const TAG_SECONDARY: (u16, u16) = (0x0018, 0x1511);
const TAG_SPD: (u16, u16) = (0x0018, 0x1111);
const TAG_SID: (u16, u16) = (0x0018, 0x1110);
const TAG_SPACING: (u16, u16) = (0x0018, 0x1164);
const TAG_ROWS: (u16, u16) = (0x0028, 0x0010);
const TAG_COLS: (u16, u16) = (0x0028, 0x0011);
const TAG_TRANSFER_SYNTAX: (u16, u16) = (0x0002, 0x0010);

const EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

/// VRs whose explicit encoding carries two reserved bytes and a 32-bit length.
fn long_vr(vr: &[u8]) -> bool {
    matches!(
        vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"SV"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"UV"
    )
}

fn tag_name(t: (u16, u16)) -> String {
    format!("({:04X},{:04X})", t.0, t.1)
}

fn decimal_strings(value: &[u8], tag: (u16, u16)) -> Result<Vec<f64>> {
    let s = std::str::from_utf8(value)
        .map_err(|_| Error::format(tag_name(tag), "value is not ASCII"))?;
    s.trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .split('\\')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::format(tag_name(tag), format!("not a decimal string: {p:?}")))
        })
        .collect()
}

fn single_decimal(value: &[u8], tag: (u16, u16)) -> Result<f64> {
    let v = decimal_strings(value, tag)?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::format(
            tag_name(tag),
            format!("expected one value, got {}", v.len()),
        )),
    }
}

fn unsigned_short(value: &[u8], tag: (u16, u16)) -> Result<usize> {
    match value {
        [a, b] => Ok(u16::from_le_bytes([*a, *b]) as usize),
        _ => Err(Error::format(
            tag_name(tag),
            format!("US value must be 2 bytes, got {}", value.len()),
        )),
    }
}

/// Reads the six geometry attributes from an explicit-VR little-endian
/// DICOM stream. Every other element is skipped by its length.
pub fn decode_dicom_min(bytes: &[u8]) -> Result<AcquisitionMeta> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(Error::format(
            "preamble",
            "missing \"DICM\" marker at offset 128",
        ));
    }
    let mut meta = AcquisitionMeta::default();
    let mut pos = 132;
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > bytes.len() {
            Err(Error::format(what, format!("truncated at byte {pos}")))
        } else {
            Ok(())
        }
    };
    while pos < bytes.len() {
        need(pos, 8, "element header")?;
        let group = u16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
        let element = u16::from_le_bytes([bytes[pos + 2], bytes[pos + 3]]);
        let tag = (group, element);
        let vr = &bytes[pos + 4..pos + 6];
        if !vr.iter().all(|c| c.is_ascii_uppercase()) {
            return Err(Error::Unsupported(format!(
                "element {} has no explicit VR; implicit-VR streams are not supported",
                tag_name(tag)
            )));
        }
        let len = if long_vr(vr) {
            need(pos, 12, "element header")?;
            let l = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap());
            pos += 12;
            l
        } else {
            let l = u16::from_le_bytes([bytes[pos + 6], bytes[pos + 7]]) as u32;
            pos += 8;
            l
        };
        if len == u32::MAX {
            return Err(Error::Unsupported(format!(
                "element {} has undefined length",
                tag_name(tag)
            )));
        }
        let len = len as usize;
        need(pos, len, &tag_name(tag))?;
        let value = &bytes[pos..pos + len];
        pos += len;
        match tag {
            TAG_TRANSFER_SYNTAX => {
                let uid = String::from_utf8_lossy(value);
                let uid = uid.trim_end_matches(['\0', ' ']);
                if uid != EXPLICIT_LE {
                    return Err(Error::Unsupported(format!(
                        "transfer syntax {uid}; only explicit VR little endian ({EXPLICIT_LE}) is read"
                    )));
                }
            }
            TAG_PRIMARY => meta.primary_angle_deg = Some(single_decimal(value, tag)?),
            TAG_SECONDARY => meta.secondary_angle_deg = Some(single_decimal(value, tag)?),
            TAG_SPD => meta.source_to_patient_mm = Some(single_decimal(value, tag)?),
            TAG_SID => meta.source_to_detector_mm = Some(single_decimal(value, tag)?),
            TAG_SPACING => {
                // Row spacing (between rows, i.e. s_y) comes first.
                match decimal_strings(value, tag)?.as_slice() {
                    [row, col] => meta.pixel_spacing_mm = Some([*col, *row]),
                    other => {
                        return Err(Error::format(
                            tag_name(tag),
                            format!("expected two values, got {}", other.len()),
                        ))
                    }
                }
            }
            TAG_ROWS => meta.rows = Some(unsigned_short(value, tag)?),
            TAG_COLS => meta.cols = Some(unsigned_short(value, tag)?),
            _ => {}
        }
    }
    Ok(meta)
}

fn push_element(out: &mut Vec<u8>, tag: (u16, u16), vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if long_vr(vr) {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

/// DS values are padded to even length with a space.
fn ds(values: &[f64]) -> Vec<u8> {
    let mut s = values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join("\\")
        .into_bytes();
    if s.len() % 2 == 1 {
        s.push(b' ');
    }
    s
}

/// A minimal explicit-VR little-endian stream holding the fields that are
/// set, plus a file meta group and one unrelated element to skip.
pub fn encode_dicom_min(m: &AcquisitionMeta) -> Vec<u8> {
    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    let mut uid = EXPLICIT_LE.as_bytes().to_vec();
    uid.push(0);
    push_element(&mut out, (0x0002, 0x0001), b"OB", &[0, 1]);
    push_element(&mut out, TAG_TRANSFER_SYNTAX, b"UI", &uid);
    push_element(&mut out, (0x0008, 0x0060), b"CS", b"XA");
    if let Some(v) = m.source_to_detector_mm {
        push_element(&mut out, TAG_SID, b"DS", &ds(&[v]));
    }
    if let Some(v) = m.source_to_patient_mm {
        push_element(&mut out, TAG_SPD, b"DS", &ds(&[v]));
    }
    if let Some([sx, sy]) = m.pixel_spacing_mm {
        push_element(&mut out, TAG_SPACING, b"DS", &ds(&[sy, sx]));
    }
    if let Some(v) = m.primary_angle_deg {
        push_element(&mut out, TAG_PRIMARY, b"DS", &ds(&[v]));
    }
    if let Some(v) = m.secondary_angle_deg {
        push_element(&mut out, TAG_SECONDARY, b"DS", &ds(&[v]));
    }
    if let Some(v) = m.rows {
        push_element(&mut out, TAG_ROWS, b"US", &(v as u16).to_le_bytes());
    }
    if let Some(v) = m.cols {
        push_element(&mut out, TAG_COLS, b"US", &(v as u16).to_le_bytes());
    }
    out
}
