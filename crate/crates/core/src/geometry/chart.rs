//! Local six-parameter charts used for pose derivatives and optimizer steps.
//!
//! Both charts order their coordinates as three rotations (degrees) followed
//! by three C-arm-frame translations (mm). Under either chart a C-arm-frame
//! point `c` maps to the world as `w(θ) = R(θ) (c + t(θ))`, and
//! `∂w/∂θ_k = M_k (c + t)` for the rotations and `R e_k` for the
//! translations, so derivatives only need the three matrices `M_k`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{pose_to_euler, rot_x, rot_y, rot_z, se3, EulerPose, Pose, DEG};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    /// `(α, β, γ, x, y, z)` of [`EulerPose`].
    EulerZxy,
    /// Exponential coordinates of a perturbation whose rotation is about
    /// the world origin and whose axes follow the C-arm frame; see
    /// [`perturb_se3`].
    #[default]
    Se3,
}

/// Below this `|cos β|` the Euler chart is treated as singular.
pub const EULER_SINGULAR_COS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChartJacobian {
    pub rotation: [Matrix3<f64>; 3],
    pub translation: Matrix3<f64>,
}

impl ChartJacobian {
    pub fn euler(e: &EulerPose) -> Result<Self> {
        let (a, b, g) = (e.alpha_deg * DEG, e.beta_deg * DEG, e.gamma_deg * DEG);
        if b.cos().abs() < EULER_SINGULAR_COS {
            return Err(Error::invalid(format!(
                "Euler chart is singular at beta = {} deg (gimbal lock); use the se3 chart",
                e.beta_deg
            )));
        }
        let (rz, rx, ry) = (rot_z(a), rot_x(b), rot_y(g));
        let (sa, ca) = a.sin_cos();
        let (sb, cb) = b.sin_cos();
        let (sg, cg) = g.sin_cos();
        let drz = Matrix3::new(-sa, -ca, 0.0, ca, -sa, 0.0, 0.0, 0.0, 0.0);
        let drx = Matrix3::new(0.0, 0.0, 0.0, 0.0, -sb, -cb, 0.0, cb, -sb);
        let dry = Matrix3::new(-sg, 0.0, cg, 0.0, 0.0, 0.0, -cg, 0.0, -sg);
        Ok(ChartJacobian {
            rotation: [
                drz * rx * ry * DEG,
                rz * drx * ry * DEG,
                rz * rx * dry * DEG,
            ],
            translation: rz * rx * ry,
        })
    }

    pub fn se3(pose: &Pose) -> Self {
        let r = pose.rotation();
        ChartJacobian {
            rotation: [
                r * se3::hat(&Vector3::x()) * DEG,
                r * se3::hat(&Vector3::y()) * DEG,
                r * se3::hat(&Vector3::z()) * DEG,
            ],
            translation: *r,
        }
    }

    /// `∂w/∂θ` for the C-arm-frame point `c`, given `c + t`.
    #[inline]
    pub fn point_derivatives(&self, c_plus_t: &Vector3<f64>) -> [Vector3<f64>; 6] {
        [
            self.rotation[0] * c_plus_t,
            self.rotation[1] * c_plus_t,
            self.rotation[2] * c_plus_t,
            self.translation.column(0).into_owned(),
            self.translation.column(1).into_owned(),
            self.translation.column(2).into_owned(),
        ]
    }
}

impl Chart {
    pub fn jacobian(self, pose: &Pose) -> Result<ChartJacobian> {
        match self {
            Chart::EulerZxy => {
                let d = pose_to_euler(pose);
                if d.gimbal_lock {
                    return Err(Error::invalid(
                        "Euler chart is singular at gimbal lock; use the se3 chart",
                    ));
                }
                ChartJacobian::euler(&d.euler)
            }
            Chart::Se3 => Ok(ChartJacobian::se3(pose)),
        }
    }

    /// The pose at chart coordinates `delta` around `pose`.
    pub fn perturb(self, pose: &Pose, delta: &[f64; 6]) -> Result<Pose> {
        match self {
            Chart::EulerZxy => {
                let d = pose_to_euler(pose);
                if d.gimbal_lock {
                    return Err(Error::invalid(
                        "Euler chart is singular at gimbal lock; use the se3 chart",
                    ));
                }
                let mut p = d.euler.to_array();
                for (x, dx) in p.iter_mut().zip(delta) {
                    *x += dx;
                }
                EulerPose::from_array(p).to_pose()
            }
            Chart::Se3 => Ok(perturb_se3(pose, delta)),
        }
    }
}

/// Applies the se(3) chart increment `δ = (ω°, v)` to `pose`.
///
/// The perturbation is `Exp(δ)` expressed in a frame at the world origin
/// with axes parallel to the C-arm frame, giving `R' = R R_δ` and
/// `t' = t + R_δᵀ V(ω) v`.
pub fn perturb_se3(pose: &Pose, delta: &[f64; 6]) -> Pose {
    let omega = Vector3::new(delta[0], delta[1], delta[2]) * DEG;
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    let (rd, vv) = se3::exp(&omega, &v);
    let rotation = pose.rotation() * rd;
    let translation = pose.translation() + rd.transpose() * vv;
    // Re-orthonormalize to keep rounding from accumulating over many steps.
    let rotation = nalgebra::Rotation3::from_matrix(&rotation).into_inner();
    Pose {
        rotation,
        translation,
    }
}
