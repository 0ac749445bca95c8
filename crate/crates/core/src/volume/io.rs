//! Volume file formats: a JSON header plus raw payload ("rawjson"), and
//! single-file NIfTI-1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, LabelMap, ScalarVolume, Volume};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_json, write_atomic, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Nifti1,
    Rawjson,
}

impl VolumeFormat {
    /// `.nii` selects NIfTI-1, `.json` selects rawjson.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("nii") => Ok(VolumeFormat::Nifti1),
            Some("json") => Ok(VolumeFormat::Rawjson),
            Some("gz") => Err(Error::Unsupported("compressed NIfTI (.nii.gz)".into())),
            _ => Err(Error::invalid(format!(
                "cannot infer volume format of {}; use .nii or .json",
                path.display()
            ))),
        }
    }
}

impl std::str::FromStr for VolumeFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nifti1" => Ok(VolumeFormat::Nifti1),
            "rawjson" => Ok(VolumeFormat::Rawjson),
            _ => Err(Error::invalid(format!("unknown volume format {s:?}"))),
        }
    }
}

/// On-disk sample type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I16,
    U16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::I16 | Dtype::U16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn nifti_code(self) -> i16 {
        match self {
            Dtype::I16 => 4,
            Dtype::F32 => 16,
            Dtype::F64 => 64,
            Dtype::U16 => 512,
        }
    }

    fn from_nifti_code(code: i16) -> Result<Self> {
        match code {
            4 => Ok(Dtype::I16),
            16 => Ok(Dtype::F32),
            64 => Ok(Dtype::F64),
            512 => Ok(Dtype::U16),
            _ => Err(Error::format(
                "datatype",
                format!("unsupported NIfTI datatype {code} (supported: 4, 16, 64, 512)"),
            )),
        }
    }

    fn decode(self, bytes: &[u8], big_endian: bool) -> Vec<f64> {
        macro_rules! conv {
            ($t:ty) => {
                bytes
                    .chunks_exact(std::mem::size_of::<$t>())
                    .map(|c| {
                        let a = c.try_into().unwrap();
                        (if big_endian {
                            <$t>::from_be_bytes(a)
                        } else {
                            <$t>::from_le_bytes(a)
                        }) as f64
                    })
                    .collect()
            };
        }
        match self {
            Dtype::I16 => conv!(i16),
            Dtype::U16 => conv!(u16),
            Dtype::F32 => conv!(f32),
            Dtype::F64 => conv!(f64),
        }
    }

    /// Little-endian encoding; fails if a value is not representable.
    fn encode(self, data: &[f64]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(data.len() * self.size());
        for (i, &v) in data.iter().enumerate() {
            let exact = match self {
                Dtype::I16 => {
                    let x = v as i16;
                    out.extend_from_slice(&x.to_le_bytes());
                    x as f64 == v
                }
                Dtype::U16 => {
                    let x = v as u16;
                    out.extend_from_slice(&x.to_le_bytes());
                    x as f64 == v
                }
                Dtype::F32 => {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                    v.is_finite()
                }
                Dtype::F64 => {
                    out.extend_from_slice(&v.to_le_bytes());
                    true
                }
            };
            if !exact {
                return Err(Error::invalid(format!(
                    "voxel {i} value {v} is not representable as {self:?}"
                )));
            }
        }
        Ok(out)
    }
}

pub const RAWJSON_ORDER: &str = "xyz-fastest-first";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    shape: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: Dtype,
    order: String,
    data: String,
    /// Label id → structure name, for label maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<BTreeMap<u16, String>>,
}

fn payload_path(header: &Path, data: &str) -> PathBuf {
    header.parent().unwrap_or(Path::new(".")).join(data)
}

fn read_rawjson(path: &Path) -> Result<(ScalarVolume, Option<BTreeMap<u16, String>>)> {
    let h: RawHeader = read_json(path)?;
    if h.order != RAWJSON_ORDER {
        return Err(Error::format(
            "order",
            format!("expected {RAWJSON_ORDER:?}, got {:?}", h.order),
        ));
    }
    let grid = Grid::new(h.shape, h.spacing, h.origin)
        .map_err(|e| Error::format("shape/spacing/origin", e.to_string()))?;
    let bytes = read_bytes(&payload_path(path, &h.data))?;
    let expected = grid.len() * h.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            "data",
            format!(
                "payload has {} bytes, shape {:?} of {:?} needs {expected}",
                bytes.len(),
                h.shape,
                h.dtype
            ),
        ));
    }
    let data = h.dtype.decode(&bytes, false);
    Ok((ScalarVolume { grid, data }, h.labels))
}

fn write_rawjson(
    path: &Path,
    grid: &Grid,
    data: &[f64],
    dtype: Dtype,
    labels: Option<BTreeMap<u16, String>>,
) -> Result<()> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad output path {}", path.display())))?;
    let data_name = format!("{stem}.bin");
    let payload = dtype.encode(data)?;
    write_atomic(&payload_path(path, &data_name), &payload)?;
    let header = RawHeader {
        shape: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        dtype,
        order: RAWJSON_ORDER.into(),
        data: data_name,
        labels,
    };
    write_json(path, &header)
}

/// Reads raw voxel values without interpreting them.
pub fn load_scalar_volume(path: &Path, format: VolumeFormat) -> Result<ScalarVolume> {
    match format {
        VolumeFormat::Rawjson => read_rawjson(path).map(|(v, _)| v),
        VolumeFormat::Nifti1 => read_nifti(&read_bytes(path)?),
    }
}

/// Reads a volume whose values already are attenuation coefficients.
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    load_scalar_volume(path, format)?.into_attenuation()
}

pub fn save_volume(
    v: &ScalarVolume,
    path: &Path,
    format: VolumeFormat,
    dtype: Dtype,
) -> Result<()> {
    match format {
        VolumeFormat::Rawjson => write_rawjson(path, &v.grid, &v.data, dtype, None),
        VolumeFormat::Nifti1 => write_atomic(path, &encode_nifti(&v.grid, &v.data, dtype)?),
    }
}

pub fn load_label_map(path: &Path, format: VolumeFormat) -> Result<LabelMap> {
    let (v, names) = match format {
        VolumeFormat::Rawjson => read_rawjson(path)?,
        VolumeFormat::Nifti1 => (read_nifti(&read_bytes(path)?)?, None),
    };
    let labels = v
        .data
        .iter()
        .map(|&x| {
            if x >= 0.0 && x <= u16::MAX as f64 && x.fract() == 0.0 {
                Ok(x as u16)
            } else {
                Err(Error::format(
                    "data",
                    format!("label value {x} is not a non-negative integer"),
                ))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(v.grid, labels, names.unwrap_or_default())
}

pub fn save_label_map(m: &LabelMap, path: &Path, format: VolumeFormat) -> Result<()> {
    let data: Vec<f64> = m.labels().iter().map(|&l| l as f64).collect();
    match format {
        VolumeFormat::Rawjson => {
            write_rawjson(path, m.grid(), &data, Dtype::U16, Some(m.names.clone()))
        }
        VolumeFormat::Nifti1 => write_atomic(path, &encode_nifti(m.grid(), &data, Dtype::U16)?),
    }
}

const NIFTI_HEADER: usize = 348;
const NIFTI_DATA_OFFSET: usize = 352;
/// Relative size of an off-diagonal affine entry still treated as zero.
const AFFINE_DIAGONAL_TOLERANCE: f64 = 1e-6;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f64 {
        let b: [u8; 4] = self.bytes[at..at + 4].try_into().unwrap();
        (if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }) as f64
    }
}

/// Voxel-to-world scale and offset from the header, NIfTI convention (the
/// offset locates the *center* of voxel 0).
fn nifti_affine(r: &Reader, pixdim: [f64; 3]) -> Result<([f64; 3], [f64; 3])> {
    let qform = r.i16(252);
    let sform = r.i16(254);
    if sform > 0 {
        let rows: Vec<[f64; 4]> = [280, 296, 312]
            .iter()
            .map(|&o| [r.f32(o), r.f32(o + 4), r.f32(o + 8), r.f32(o + 12)])
            .collect();
        let scale = (0..3).map(|a| rows[a][a].abs()).fold(0.0, f64::max);
        for (a, row) in rows.iter().enumerate() {
            for (b, v) in row.iter().take(3).enumerate() {
                if a != b && v.abs() > AFFINE_DIAGONAL_TOLERANCE * scale {
                    return Err(Error::format(
                        "srow",
                        "sform affine has rotation or shear; only diagonal affines are supported",
                    ));
                }
            }
        }
        return Ok((
            [rows[0][0], rows[1][1], rows[2][2]],
            [rows[0][3], rows[1][3], rows[2][3]],
        ));
    }
    if qform > 0 {
        let (b, c, d) = (r.f32(256), r.f32(260), r.f32(264));
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let rot = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        let qfac = if r.f32(76) < 0.0 { -1.0 } else { 1.0 };
        let scale = [pixdim[0], pixdim[1], pixdim[2] * qfac];
        let mut spacing = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                if i != j && rot[i][j].abs() > AFFINE_DIAGONAL_TOLERANCE {
                    return Err(Error::format(
                        "quatern_b/c/d",
                        "qform rotation is not axis-aligned; only diagonal affines are supported",
                    ));
                }
            }
            spacing[i] = rot[i][i].round() * scale[i];
        }
        return Ok((spacing, [r.f32(268), r.f32(272), r.f32(276)]));
    }
    Ok((pixdim, [0.0; 3]))
}

fn read_nifti(bytes: &[u8]) -> Result<ScalarVolume> {
    if bytes.len() < NIFTI_HEADER {
        return Err(Error::format(
            "sizeof_hdr",
            format!("file has only {} bytes", bytes.len()),
        ));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => {
            return Err(Error::format(
                "sizeof_hdr",
                format!("expected 348, got {le}"),
            ))
        }
    };
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(
            "magic",
            format!(
                "expected \"n+1\\0\", got {:?}",
                String::from_utf8_lossy(&bytes[344..348])
            ),
        ));
    }
    let r = Reader { bytes, big_endian };
    let ndim = r.i16(40);
    let dim: Vec<i16> = (0..7).map(|i| r.i16(42 + 2 * i)).collect();
    if !(1..=7).contains(&ndim) || (3..ndim as usize).any(|i| dim[i] != 1) || ndim < 3 {
        return Err(Error::format(
            "dim",
            format!("expected a 3-D volume, got dim = {ndim} {dim:?}"),
        ));
    }
    if dim[..3].iter().any(|&n| n <= 0) {
        return Err(Error::format(
            "dim",
            format!("non-positive size {:?}", &dim[..3]),
        ));
    }
    let dims = [dim[0] as usize, dim[1] as usize, dim[2] as usize];
    let dtype = Dtype::from_nifti_code(r.i16(70))?;
    let pixdim = [r.f32(80), r.f32(84), r.f32(88)];
    let vox_offset = r.f32(108);
    if !(vox_offset >= NIFTI_HEADER as f64) || vox_offset.fract() != 0.0 {
        return Err(Error::format(
            "vox_offset",
            format!("invalid offset {vox_offset}"),
        ));
    }
    let (spacing, center0) = nifti_affine(&r, pixdim)?;
    let origin = [
        center0[0] - 0.5 * spacing[0],
        center0[1] - 0.5 * spacing[1],
        center0[2] - 0.5 * spacing[2],
    ];
    let grid =
        Grid::new(dims, spacing, origin).map_err(|e| Error::format("pixdim", e.to_string()))?;
    let start = vox_offset as usize;
    let len = grid.len() * dtype.size();
    if bytes.len() < start + len {
        return Err(Error::format(
            "vox_offset",
            format!(
                "payload truncated: need {len} bytes after offset {start}, file has {}",
                bytes.len()
            ),
        ));
    }
    let mut data = dtype.decode(&bytes[start..start + len], big_endian);
    let mut slope = r.f32(112);
    let inter = r.f32(116);
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let inter = if inter.is_finite() { inter } else { 0.0 };
    if slope != 1.0 || inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(ScalarVolume { grid, data })
}

fn encode_nifti(grid: &Grid, data: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let mut h = vec![0u8; NIFTI_DATA_OFFSET];
    let put_i16 = |h: &mut [u8], at: usize, v: i16| h[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 =
        |h: &mut [u8], at: usize, v: f64| h[at..at + 4].copy_from_slice(&(v as f32).to_le_bytes());
    for (a, d) in grid.dims.iter().enumerate() {
        if *d > i16::MAX as usize {
            return Err(Error::invalid(format!(
                "dimension {d} too large for NIfTI-1"
            )));
        }
        put_i16(&mut h, 42 + 2 * a, *d as i16);
    }
    h[0..4].copy_from_slice(&(NIFTI_HEADER as i32).to_le_bytes());
    put_i16(&mut h, 40, 3);
    for i in 3..7 {
        put_i16(&mut h, 42 + 2 * i, 1);
    }
    put_i16(&mut h, 70, dtype.nifti_code());
    put_i16(&mut h, 72, 8 * dtype.size() as i16);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, grid.spacing[a].abs());
    }
    put_f32(&mut h, 108, NIFTI_DATA_OFFSET as f64);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // xyzt_units: mm
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        let row = 280 + 16 * a;
        put_f32(&mut h, row + 4 * a, grid.spacing[a]);
        put_f32(&mut h, row + 12, grid.origin[a] + 0.5 * grid.spacing[a]);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    // Geometry stored as f32 must survive the round trip unchanged.
    for a in 0..3 {
        let s = grid.spacing[a];
        let c = grid.origin[a] + 0.5 * s;
        if s as f32 as f64 != s || ((c as f32 as f64) - 0.5 * s) != grid.origin[a] {
            log::warn!("NIfTI header stores geometry as float32; axis {a} loses precision");
        }
    }
    h.extend_from_slice(&dtype.encode(data)?);
    Ok(h)
}
