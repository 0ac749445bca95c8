//! Attenuation volumes, label maps and fiducials.
//!
//! Voxel `i = (i, j, k)` covers the world box between `O + i ⊙ Δ` and
//! `O + (i + 1) ⊙ Δ`; its value is taken to live at the center
//! `O + (i + 0.5) ⊙ Δ`. Spacings may be negative to encode axis flips.
//! Storage is x-fastest: index `i + N_x (j + N_y k)`.

pub mod io;
pub mod phantom;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Water attenuation at diagnostic energies, mm⁻¹.
pub const MU_WATER_PER_MM: f64 = 0.02;

/// Voxel grid geometry shared by volumes and label maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!(
                "volume dimensions must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s == 0.0) {
            return Err(Error::invalid(format!(
                "voxel spacing must be finite and non-zero, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("volume origin must be finite"));
        }
        Ok(Grid {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Voxel-index-to-world matrix `[diag(Δ) | O]`.
    pub fn affine(&self) -> Matrix4<f64> {
        let [dx, dy, dz] = self.spacing;
        let [ox, oy, oz] = self.origin;
        Matrix4::new(
            dx, 0.0, 0.0, ox, //
            0.0, dy, 0.0, oy, //
            0.0, 0.0, dz, oz, //
            0.0, 0.0, 0.0, 1.0,
        )
    }

    /// `(N ⊙ Δ) / 2 + O`.
    pub fn isocenter(&self) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.dims[a] as f64 * self.spacing[a] / 2.0 + self.origin[a])
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        let idx = [i, j, k];
        Vector3::from_fn(|a, _| self.origin[a] + (idx[a] as f64 + 0.5) * self.spacing[a])
    }

    /// Continuous voxel coordinates: voxel `i` spans `[i, i + 1]`.
    #[inline]
    pub fn to_voxel(&self, w: &Vector3<f64>) -> Vector3<f64> {
        Vector3::from_fn(|a, _| (w[a] - self.origin[a]) / self.spacing[a])
    }
}

/// A non-negative attenuation volume (mm⁻¹).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "volume data has {} values, dimensions {:?} need {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!(
                "attenuation must be finite and non-negative; voxel {i} is {}",
                data[i]
            )));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Volume {
            data: vec![0.0; grid.len()],
            grid,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn affine(&self) -> Matrix4<f64> {
        self.grid.affine()
    }

    pub fn isocenter(&self) -> Vector3<f64> {
        self.grid.isocenter()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn max_dim(&self) -> usize {
        *self.grid.dims.iter().max().unwrap()
    }

    /// Same data on a grid moved by `offset` mm.
    pub fn translated(&self, offset: &Vector3<f64>) -> Volume {
        let mut grid = self.grid;
        for a in 0..3 {
            grid.origin[a] += offset[a];
        }
        Volume {
            grid,
            data: self.data.clone(),
        }
    }

    /// `a·self + b·other` for non-negative `a`, `b` on the same grid.
    pub fn linear_combination(&self, a: f64, other: &Volume, b: f64) -> Result<Volume> {
        if self.grid != other.grid {
            return Err(Error::invalid("volumes must share a grid"));
        }
        if !(a >= 0.0 && b >= 0.0) {
            return Err(Error::invalid("coefficients must be non-negative"));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Volume::new(self.grid, data)
    }
}

/// Voxel values as stored on disk, before any intensity conversion. May be
/// negative (e.g. Hounsfield units).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(format!(
                "volume data has {} values, dimensions {:?} need {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        Ok(ScalarVolume { grid, data })
    }

    /// Interprets the values directly as attenuation coefficients.
    pub fn into_attenuation(self) -> Result<Volume> {
        Volume::new(self.grid, self.data).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!(
                "{m} (convert Hounsfield units with hu_to_attenuation)"
            )),
            other => other,
        })
    }
}

impl From<Volume> for ScalarVolume {
    fn from(v: Volume) -> Self {
        ScalarVolume {
            grid: v.grid,
            data: v.data,
        }
    }
}

/// `μ = μ_water (1 + HU / 1000)`, clamped below at zero.
pub fn hu_to_attenuation(hu: &ScalarVolume, mu_water_per_mm: f64) -> Result<Volume> {
    if !(mu_water_per_mm.is_finite() && mu_water_per_mm > 0.0) {
        return Err(Error::invalid(format!(
            "mu_water must be positive, got {mu_water_per_mm}"
        )));
    }
    let data = hu
        .data
        .iter()
        .map(|&h| (mu_water_per_mm * (1.0 + h / 1000.0)).max(0.0))
        .collect();
    Volume::new(hu.grid, data)
}

/// Integer structure labels on a volume's grid. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    grid: Grid,
    labels: Vec<u16>,
    pub names: BTreeMap<u16, String>,
}

impl LabelMap {
    pub fn new(grid: Grid, labels: Vec<u16>, names: BTreeMap<u16, String>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::invalid(format!(
                "label map has {} values, dimensions {:?} need {}",
                labels.len(),
                grid.dims,
                grid.len()
            )));
        }
        Ok(LabelMap {
            grid,
            labels,
            names,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Non-background labels present in the map.
    pub fn label_ids(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn check_matches(&self, v: &Volume) -> Result<()> {
        if self.grid.dims != v.grid.dims {
            return Err(Error::invalid(format!(
                "label map dimensions {:?} do not match volume {:?}",
                self.grid.dims, v.grid.dims
            )));
        }
        Ok(())
    }
}

/// Zeroes every voxel whose label is not in `keep`.
pub fn mask_structures(v: &Volume, m: &LabelMap, keep: &BTreeSet<u16>) -> Result<Volume> {
    m.check_matches(v)?;
    let data = v
        .data
        .iter()
        .zip(&m.labels)
        .map(|(&x, l)| if keep.contains(l) { x } else { 0.0 })
        .collect();
    Ok(Volume { grid: v.grid, data })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fiducial {
    pub name: String,
    pub xyz_mm: [f64; 3],
}

/// Named world-space markers, used only to score registrations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "FiducialDoc", into = "FiducialDoc")]
pub struct FiducialSet {
    fiducials: Vec<Fiducial>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiducialDoc {
    fiducials: Vec<Fiducial>,
}

impl TryFrom<FiducialDoc> for FiducialSet {
    type Error = Error;
    fn try_from(d: FiducialDoc) -> Result<Self> {
        FiducialSet::new(d.fiducials)
    }
}

impl From<FiducialSet> for FiducialDoc {
    fn from(f: FiducialSet) -> Self {
        FiducialDoc {
            fiducials: f.fiducials,
        }
    }
}

impl FiducialSet {
    pub fn new(fiducials: Vec<Fiducial>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &fiducials {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate fiducial name {:?}",
                    f.name
                )));
            }
            if f.xyz_mm.iter().any(|c| !c.is_finite()) {
                return Err(Error::invalid(format!(
                    "fiducial {:?} is not finite",
                    f.name
                )));
            }
        }
        Ok(FiducialSet { fiducials })
    }

    pub fn from_points<S: Into<String>>(
        points: impl IntoIterator<Item = (S, Vector3<f64>)>,
    ) -> Result<Self> {
        FiducialSet::new(
            points
                .into_iter()
                .map(|(n, p)| Fiducial {
                    name: n.into(),
                    xyz_mm: [p.x, p.y, p.z],
                })
                .collect(),
        )
    }

    pub fn fiducials(&self) -> &[Fiducial] {
        &self.fiducials
    }

    pub fn points(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.fiducials.iter().map(|f| Vector3::from(f.xyz_mm))
    }

    pub fn len(&self) -> usize {
        self.fiducials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fiducials.is_empty()
    }
}
