//! Registration error between a ground-truth pose `T` and an estimate `T̂`.

use nalgebra::{Vector2, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{pose_distance, Intrinsics, Pose, Projected, ProjectionMatrix};
use crate::volume::FiducialSet;

fn project_all(
    k: &Intrinsics,
    pose: &Pose,
    x: &FiducialSet,
    which: &str,
) -> Result<Vec<Vector2<f64>>> {
    let pi = ProjectionMatrix::new(k, pose);
    x.fiducials()
        .iter()
        .map(|f| match pi.project(&Vector3::from(f.xyz_mm)) {
            Projected::Pixel(p) => Ok(p),
            Projected::Degenerate => Err(Error::Numerical(format!(
                "fiducial {:?} lies behind the camera under the {which} pose",
                f.name
            ))),
        })
        .collect()
}

fn non_empty(x: &FiducialSet) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("fiducial set is empty"));
    }
    Ok(())
}

/// Per-fiducial reprojection displacement `π(X) − π̂(X)` in pixels.
fn displacements(
    t: &Pose,
    t_hat: &Pose,
    k: &Intrinsics,
    x: &FiducialSet,
) -> Result<Vec<Vector2<f64>>> {
    non_empty(x)?;
    let a = project_all(k, t, x, "ground-truth")?;
    let b = project_all(k, t_hat, x, "estimated")?;
    Ok(a.iter().zip(&b).map(|(p, q)| p - q).collect())
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// Mean projection error in pixels.
pub fn mpe_px(t: &Pose, t_hat: &Pose, k: &Intrinsics, x: &FiducialSet) -> Result<f64> {
    Ok(mean(
        displacements(t, t_hat, k, x)?.iter().map(|d| d.norm()),
    ))
}

/// Mean projection error converted to millimetres with `√(s_x s_y)`.
pub fn mpe(t: &Pose, t_hat: &Pose, k: &Intrinsics, x: &FiducialSet) -> Result<f64> {
    let [sx, sy] = k.pixel_spacing_mm;
    Ok(mpe_px(t, t_hat, k, x)? * (sx * sy).sqrt())
}

/// `f ‖K⁻¹ (Δ, 0)ᵀ‖` for a pixel displacement `Δ`: the displacement lifted
/// to the detector plane.
fn lift(k: &Intrinsics, d: &Vector2<f64>) -> f64 {
    let kinv = k.k().try_inverse().expect("intrinsic matrix is invertible");
    let lifted = kinv * Vector3::new(d.x, d.y, 0.0);
    k.focal_length_mm * lifted.norm()
}

/// Mean reprojection error on the detector plane, mm.
pub fn mrpe(t: &Pose, t_hat: &Pose, k: &Intrinsics, x: &FiducialSet) -> Result<f64> {
    Ok(mean(
        displacements(t, t_hat, k, x)?.iter().map(|d| lift(k, d)),
    ))
}

fn tre(t: &Pose, t_hat: &Pose, x: &Vector3<f64>) -> f64 {
    let diff = t.camera_to_world() - t_hat.camera_to_world();
    (diff * x.push(1.0)).norm()
}

/// Mean target registration error `(1/M) Σ ‖(T − T̂) X̃‖`, mm.
pub fn mtre(t: &Pose, t_hat: &Pose, x: &FiducialSet) -> Result<f64> {
    non_empty(x)?;
    Ok(mean(
        x.points()
            .map(|p| tre(t, t_hat, &p))
            .collect::<Vec<_>>()
            .into_iter(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiducialError {
    pub name: String,
    pub pe_px: f64,
    pub rpe_mm: f64,
    pub tre_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpe_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mpe_mm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrpe_mm: Option<f64>,
    pub rot_deg: f64,
    pub arc_mm: f64,
    pub xyz_mm: f64,
    pub dgeo_mm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mtre_mm: Option<f64>,
    /// `mtre_mm < 1`; absent without fiducials.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub submillimeter: Option<bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub per_fiducial: Vec<FiducialError>,
}

/// Every metric; the fiducial-based ones only when `x` is given.
pub fn full_report(
    t: &Pose,
    t_hat: &Pose,
    k: &Intrinsics,
    x: Option<&FiducialSet>,
) -> Result<ErrorReport> {
    let d = pose_distance(t, t_hat, k.focal_length_mm);
    let mut report = ErrorReport {
        mpe_px: None,
        mpe_mm: None,
        mrpe_mm: None,
        rot_deg: d.rot_rad.to_degrees(),
        arc_mm: d.arc_mm,
        xyz_mm: d.xyz_mm,
        dgeo_mm: d.dgeo_mm,
        mtre_mm: None,
        submillimeter: None,
        per_fiducial: Vec::new(),
    };
    if let Some(x) = x {
        report.mpe_px = Some(mpe_px(t, t_hat, k, x)?);
        report.mpe_mm = Some(mpe(t, t_hat, k, x)?);
        report.mrpe_mm = Some(mrpe(t, t_hat, k, x)?);
        let m = mtre(t, t_hat, x)?;
        report.mtre_mm = Some(m);
        report.submillimeter = Some(m < 1.0);
        let disp = displacements(t, t_hat, k, x)?;
        report.per_fiducial = x
            .fiducials()
            .iter()
            .zip(&disp)
            .map(|(f, dd)| FiducialError {
                name: f.name.clone(),
                pe_px: dd.norm(),
                rpe_mm: lift(k, dd),
                tre_mm: tre(t, t_hat, &Vector3::from(f.xyz_mm)),
            })
            .collect();
    }
    Ok(report)
}
