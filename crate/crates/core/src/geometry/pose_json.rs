use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use super::{euler_to_pose, pose_to_euler, EulerPose, Pose};
use crate::error::Result;

fn is_false(b: &bool) -> bool {
    !*b
}

/// On-disk pose document. The `parameterization` tag selects the variant;
/// unknown tags and unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "parameterization", deny_unknown_fields)]
pub enum PoseJson {
    #[serde(rename = "euler_zxy_deg")]
    EulerZxyDeg {
        rotation: [f64; 3],
        translation: [f64; 3],
        /// Only some of the six parameters are known (e.g. from acquisition
        /// metadata).
        #[serde(default, skip_serializing_if = "is_false")]
        partial: bool,
    },
    /// Row-major homogeneous camera-to-world matrix.
    #[serde(rename = "matrix")]
    Matrix { matrix: [[f64; 4]; 4] },
}

impl PoseJson {
    pub fn from_euler(e: &EulerPose) -> Self {
        PoseJson::EulerZxyDeg {
            rotation: [e.alpha_deg, e.beta_deg, e.gamma_deg],
            translation: [e.x_mm, e.y_mm, e.z_mm],
            partial: false,
        }
    }

    pub fn from_pose_euler(p: &Pose) -> Self {
        PoseJson::from_euler(&pose_to_euler(p).euler)
    }

    pub fn from_pose_matrix(p: &Pose) -> Self {
        let m = p.camera_to_world();
        let mut matrix = [[0.0; 4]; 4];
        for (i, row) in matrix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        PoseJson::Matrix { matrix }
    }

    pub fn is_partial(&self) -> bool {
        matches!(self, PoseJson::EulerZxyDeg { partial: true, .. })
    }

    pub fn euler(&self) -> Option<EulerPose> {
        match self {
            PoseJson::EulerZxyDeg {
                rotation,
                translation,
                ..
            } => Some(EulerPose::new(
                rotation[0],
                rotation[1],
                rotation[2],
                translation[0],
                translation[1],
                translation[2],
            )),
            PoseJson::Matrix { .. } => None,
        }
    }

    pub fn to_pose(&self) -> Result<Pose> {
        match self {
            PoseJson::EulerZxyDeg { .. } => euler_to_pose(&self.euler().unwrap()),
            PoseJson::Matrix { matrix } => {
                let m = Matrix4::from_fn(|i, j| matrix[i][j]);
                Pose::from_camera_to_world(&m)
            }
        }
    }
}
