//! Projective and rigid-body geometry of a C-arm.
//!
//! The C-arm is a pinhole camera. A [`Pose`] places the C-arm frame in world
//! coordinates: a point `c` expressed in the C-arm frame lands at
//! `R (c + t)` in the world, so the homogeneous camera-to-world matrix is
//! `[R | R t]` and its inverse is `[Rᵀ | -t]`.
//!
//! Inside the C-arm frame the X-ray source sits at the origin and the
//! detector plane is at depth `f` along the axis chosen by the detector
//! [`Orientation`]. For the default anterior-posterior layout the depth axis
//! is `+y`, so the `y` pose parameter is the (negated) source-to-isocenter
//! distance.

mod chart;
mod pose_json;
pub mod se3;

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Rotation3, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use chart::{perturb_se3, Chart, ChartJacobian};
pub use pose_json::PoseJson;

pub(crate) const DEG: f64 = PI / 180.0;

/// Tolerance on `‖RᵀR − I‖∞` and `|det R − 1|` accepted for a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// How the detector's camera frame is laid out inside the C-arm frame.
///
/// The camera frame has the detector at depth `+z`, image columns along
/// `+x` and image rows along `+y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Depth along `+y`, rows running toward `-z`. Source on the `-y` side.
    #[default]
    Ap,
    /// Depth along `-y`, rows running toward `-z`, columns toward `-x`.
    Pa,
    /// The camera frame is the C-arm frame.
    Identity,
}

impl Orientation {
    /// Rotation taking camera-frame coordinates to C-arm-frame coordinates.
    pub fn frame(self) -> Matrix3<f64> {
        match self {
            Orientation::Ap => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0),
            Orientation::Pa => Matrix3::new(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, -1.0, 0.0),
            Orientation::Identity => Matrix3::identity(),
        }
    }

    /// Index (0..3) of the translation parameter that moves the source along
    /// the viewing direction.
    pub fn depth_axis(self) -> usize {
        match self {
            Orientation::Ap | Orientation::Pa => 1,
            Orientation::Identity => 2,
        }
    }
}

/// Internal calibration of a C-arm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsDef", into = "IntrinsicsDef")]
pub struct Intrinsics {
    /// Source-to-detector distance.
    pub focal_length_mm: f64,
    pub height: usize,
    pub width: usize,
    /// `(s_x, s_y)`, millimetres per pixel.
    pub pixel_spacing_mm: [f64; 2],
    /// `(o_x, o_y)`.
    pub optical_center_mm: [f64; 2],
    pub orientation: Orientation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsDef {
    focal_length_mm: f64,
    height: usize,
    width: usize,
    pixel_spacing_mm: [f64; 2],
    #[serde(default)]
    optical_center_mm: [f64; 2],
    #[serde(default)]
    orientation: Orientation,
}

impl TryFrom<IntrinsicsDef> for Intrinsics {
    type Error = Error;

    fn try_from(d: IntrinsicsDef) -> Result<Self> {
        Intrinsics::new(
            d.focal_length_mm,
            d.height,
            d.width,
            d.pixel_spacing_mm,
            d.optical_center_mm,
        )
        .map(|k| k.with_orientation(d.orientation))
    }
}

impl From<Intrinsics> for IntrinsicsDef {
    fn from(k: Intrinsics) -> Self {
        IntrinsicsDef {
            focal_length_mm: k.focal_length_mm,
            height: k.height,
            width: k.width,
            pixel_spacing_mm: k.pixel_spacing_mm,
            optical_center_mm: k.optical_center_mm,
            orientation: k.orientation,
        }
    }
}

impl Intrinsics {
    pub fn new(
        focal_length_mm: f64,
        height: usize,
        width: usize,
        pixel_spacing_mm: [f64; 2],
        optical_center_mm: [f64; 2],
    ) -> Result<Self> {
        if !(focal_length_mm.is_finite() && focal_length_mm > 0.0) {
            return Err(Error::invalid(format!(
                "focal length must be positive, got {focal_length_mm}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "detector must have at least one pixel, got {height}x{width}"
            )));
        }
        if pixel_spacing_mm
            .iter()
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::invalid(format!(
                "pixel spacing must be positive, got {pixel_spacing_mm:?}"
            )));
        }
        if optical_center_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("optical center must be finite"));
        }
        Ok(Intrinsics {
            focal_length_mm,
            height,
            width,
            pixel_spacing_mm,
            optical_center_mm,
            orientation: Orientation::Ap,
        })
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    /// `pKi`: image-plane millimetres to pixel coordinates.
    pub fn pixel_matrix(&self) -> Matrix3<f64> {
        let [sx, sy] = self.pixel_spacing_mm;
        Matrix3::new(
            1.0 / sx,
            0.0,
            self.width as f64 / 2.0,
            0.0,
            1.0 / sy,
            self.height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `iKc`: camera coordinates to image-plane millimetres.
    pub fn camera_matrix(&self) -> Matrix3<f64> {
        let f = self.focal_length_mm;
        let [ox, oy] = self.optical_center_mm;
        Matrix3::new(f, 0.0, ox, 0.0, f, oy, 0.0, 0.0, 1.0)
    }

    /// The intrinsic matrix `K = pKi · iKc`.
    pub fn k(&self) -> Matrix3<f64> {
        self.pixel_matrix() * self.camera_matrix()
    }

    /// Image-plane position (mm) of a continuous pixel index. Pixel `(u, v)`
    /// has its center at integer `(u, v)`; `u` runs along columns.
    pub fn image_plane(&self, u: f64, v: f64) -> (f64, f64) {
        let [sx, sy] = self.pixel_spacing_mm;
        let [ox, oy] = self.optical_center_mm;
        (
            (u + 0.5 - self.width as f64 / 2.0) * sx - ox,
            (v + 0.5 - self.height as f64 / 2.0) * sy - oy,
        )
    }

    /// Inverse of [`Intrinsics::image_plane`].
    pub fn pixel_index(&self, x_mm: f64, y_mm: f64) -> (f64, f64) {
        let [sx, sy] = self.pixel_spacing_mm;
        let [ox, oy] = self.optical_center_mm;
        (
            (x_mm + ox) / sx + self.width as f64 / 2.0 - 0.5,
            (y_mm + oy) / sy + self.height as f64 / 2.0 - 0.5,
        )
    }

    /// Detector point of pixel `(u, v)` in the camera frame.
    pub fn camera_point(&self, u: f64, v: f64) -> Vector3<f64> {
        let (x, y) = self.image_plane(u, v);
        Vector3::new(x, y, self.focal_length_mm)
    }

    /// Detector point of pixel `(u, v)` in the C-arm frame.
    pub fn carm_point(&self, u: f64, v: f64) -> Vector3<f64> {
        self.orientation.frame() * self.camera_point(u, v)
    }

    /// Intrinsics of a detector binned by `factor` in both directions.
    ///
    /// Rows and columns that do not fill a whole bin are dropped from the
    /// bottom and right edges; the optical center is shifted so that every
    /// binned pixel keeps the physical position of the block it averages.
    pub fn downsample(&self, factor: usize) -> Result<Intrinsics> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be >= 1"));
        }
        let h = self.height / factor;
        let w = self.width / factor;
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "factor {factor} exceeds detector size {}x{}",
                self.height, self.width
            )));
        }
        let [sx, sy] = self.pixel_spacing_mm;
        let [ox, oy] = self.optical_center_mm;
        let fx = factor as f64;
        let dropped_w = (self.width - w * factor) as f64;
        let dropped_h = (self.height - h * factor) as f64;
        Ok(Intrinsics {
            focal_length_mm: self.focal_length_mm,
            height: h,
            width: w,
            pixel_spacing_mm: [sx * fx, sy * fx],
            optical_center_mm: [ox + dropped_w * sx / 2.0, oy + dropped_h * sy / 2.0],
            orientation: self.orientation,
        })
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose translation must be finite"));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pure translation in the C-arm frame (which equals the world frame
    /// for an identity rotation).
    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Builds a pose from a raw homogeneous camera-to-world matrix whose
    /// last column is the world position of the source.
    pub fn from_camera_to_world(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)] - 1.0];
        if bottom.iter().any(|v| v.abs() > 1e-12) {
            return Err(Error::invalid("homogeneous matrix must end in [0 0 0 1]"));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        check_rotation(&r)?;
        let tw: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose::new(r, r.transpose() * tw)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// The C-arm-frame offset `t`; the source sits at `R t` in the world.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn source_position(&self) -> Vector3<f64> {
        self.rotation * self.translation
    }

    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(self.rotation * self.translation));
        m
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation.transpose());
        m.fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&(-self.translation));
        m
    }

    /// C-arm-frame point to world.
    pub fn transform_point(&self, c: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (c + self.translation)
    }

    /// World point to the C-arm frame.
    pub fn inverse_transform_point(&self, w: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * w - self.translation
    }

    /// `self ∘ other`, i.e. the pose whose camera-to-world matrix is
    /// `self.camera_to_world() * other.camera_to_world()`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = self.rotation * other.rotation;
        let translation = other.translation + other.rotation.transpose() * self.translation;
        Pose {
            rotation,
            translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        // [Rᵀ | -t] = [Rᵀ | Rᵀ t'] with t' = -R t.
        Pose {
            rotation: self.rotation.transpose(),
            translation: -(self.rotation * self.translation),
        }
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("rotation must be finite"));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).amax();
    let det = r.determinant();
    if ortho >= ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::invalid(format!(
            "matrix is not a rotation (‖RᵀR−I‖∞ = {ortho:.3e}, det = {det})"
        )));
    }
    Ok(())
}

pub fn rot_x(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation from a rotation vector (axis times angle in radians).
pub fn rotation_from_axis_angle(rotvec: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*rotvec).into_inner()
}

/// Rotation vector of a rotation matrix, angle in `[0, π]`.
pub fn axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// C-arm pose in the commercial Euler convention `R = Rz(α) Rx(β) Ry(γ)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EulerPose {
    /// LAO/RAO.
    pub alpha_deg: f64,
    /// CRA/CAU.
    pub beta_deg: f64,
    /// In-plane.
    pub gamma_deg: f64,
    pub x_mm: f64,
    pub y_mm: f64,
    pub z_mm: f64,
}

impl EulerPose {
    pub fn new(alpha: f64, beta: f64, gamma: f64, x: f64, y: f64, z: f64) -> Self {
        EulerPose {
            alpha_deg: alpha,
            beta_deg: beta,
            gamma_deg: gamma,
            x_mm: x,
            y_mm: y,
            z_mm: z,
        }
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        EulerPose::new(p[0], p[1], p[2], p[3], p[4], p[5])
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.alpha_deg,
            self.beta_deg,
            self.gamma_deg,
            self.x_mm,
            self.y_mm,
            self.z_mm,
        ]
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rot_z(self.alpha_deg * DEG) * rot_x(self.beta_deg * DEG) * rot_y(self.gamma_deg * DEG)
    }

    pub fn to_pose(&self) -> Result<Pose> {
        euler_to_pose(self)
    }
}

/// Rotation `Rz(α) Rx(β) Ry(γ)` with the offsets `(x, y, z)` applied before
/// the rotation, so the source lands at `R (x, y, z)`.
pub fn euler_to_pose(e: &EulerPose) -> Result<Pose> {
    if e.to_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite Euler pose {e:?}")));
    }
    Ok(Pose {
        rotation: e.rotation(),
        translation: Vector3::new(e.x_mm, e.y_mm, e.z_mm),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub euler: EulerPose,
    /// Set when `|β| = 90°`; `γ` is then fixed to zero.
    pub gimbal_lock: bool,
}

/// Below this `cos β` the decomposition takes the locked branch.
const GIMBAL_COS_TOLERANCE: f64 = 1e-7;

/// Inverse of [`euler_to_pose`], with `β ∈ [-90°, 90°]`.
pub fn pose_to_euler(p: &Pose) -> EulerDecomposition {
    let r = &p.rotation;
    // Column 2 of row 2 carries sin β; the (2,0)/(2,2) and (0,1)/(1,1)
    // pairs each carry cos β times a sine/cosine of γ and α.
    let cb = r[(2, 0)].hypot(r[(2, 2)]);
    let beta = r[(2, 1)].atan2(cb);
    let (alpha, gamma, locked) = if cb < GIMBAL_COS_TOLERANCE {
        // R = Rz(α) Rx(±90°) with γ := 0: first column is (cos α, sin α, 0).
        (r[(1, 0)].atan2(r[(0, 0)]), 0.0, true)
    } else {
        (
            (-r[(0, 1)]).atan2(r[(1, 1)]),
            (-r[(2, 0)]).atan2(r[(2, 2)]),
            false,
        )
    };
    let t = p.translation;
    EulerDecomposition {
        euler: EulerPose::new(alpha / DEG, beta / DEG, gamma / DEG, t.x, t.y, t.z),
        gimbal_lock: locked,
    }
}

/// The 3×4 perspective projection `Π` for a pose and detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix {
    pub matrix: Matrix3x4<f64>,
}

/// Result of projecting one world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projected {
    /// Continuous pixel coordinates in the `K` convention: the center of
    /// pixel index `(u, v)` is at `(u + 0.5, v + 0.5)`.
    Pixel(Vector2<f64>),
    /// The point lies on or behind the camera plane.
    Degenerate,
}

impl Projected {
    pub fn pixel(&self) -> Option<Vector2<f64>> {
        match self {
            Projected::Pixel(p) => Some(*p),
            Projected::Degenerate => None,
        }
    }
}

/// Homogeneous depth below which a projection is flagged degenerate.
pub const CAMERA_PLANE_TOLERANCE: f64 = 1e-9;

impl ProjectionMatrix {
    /// `Π = K · [Rᵀ | −t]`, with the detector orientation folded in between
    /// (`K · Fᵀ · [Rᵀ | −t]`; `F` is the identity for [`Orientation::Identity`]).
    pub fn new(k: &Intrinsics, pose: &Pose) -> Self {
        let w2c = pose.world_to_camera();
        let extrinsic: Matrix3x4<f64> = w2c.fixed_view::<3, 4>(0, 0).into_owned();
        ProjectionMatrix {
            matrix: k.k() * k.orientation.frame().transpose() * extrinsic,
        }
    }

    pub fn project_homogeneous(&self, x: &Vector4<f64>) -> Projected {
        let h = self.matrix * x;
        // Flip the test for negative homogeneous weights so a scaled point
        // projects identically.
        let depth = h.z * x.w.signum();
        if !(depth > CAMERA_PLANE_TOLERANCE * x.w.abs()) {
            return Projected::Degenerate;
        }
        Projected::Pixel(Vector2::new(h.x / h.z, h.y / h.z))
    }

    pub fn project(&self, x: &Vector3<f64>) -> Projected {
        self.project_homogeneous(&x.push(1.0))
    }
}

pub fn project_points(pi: &ProjectionMatrix, points: &[Vector3<f64>]) -> Vec<Projected> {
    points.iter().map(|x| pi.project(x)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoseDistance {
    pub rot_rad: f64,
    pub arc_mm: f64,
    pub xyz_mm: f64,
    pub dgeo_mm: f64,
}

/// Geodesic rotation angle, its arc length at radius `f/2`, the translation
/// distance, and their quadrature sum.
pub fn pose_distance(a: &Pose, b: &Pose, focal_length_mm: f64) -> PoseDistance {
    let rot_rad = rotation_angle(&(a.rotation.transpose() * b.rotation));
    let arc_mm = focal_length_mm / 2.0 * rot_rad;
    let xyz_mm = (a.translation - b.translation).norm();
    PoseDistance {
        rot_rad,
        arc_mm,
        xyz_mm,
        dgeo_mm: (arc_mm * arc_mm + xyz_mm * xyz_mm).sqrt(),
    }
}

/// `arccos((tr R − 1) / 2)`, evaluated as an `atan2` of the sine and cosine
/// parts so that tiny angles keep full precision.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    )
    .norm()
        / 2.0;
    s.atan2(c)
}
