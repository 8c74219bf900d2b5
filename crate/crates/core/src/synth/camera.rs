//! Pinhole camera model, rigid poses, and point projection.

use crate::error::{Error, Result};
use crate::matching::PixelLoc;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraModel {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        if self.cx < 0.0 || self.cx > (width - 1) as f64 || self.cy < 0.0 || self.cy > (height - 1) as f64 {
            return Err(Error::InvalidConfig(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidPose {
    pub fn identity() -> RigidPose {
        RigidPose {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Rodrigues rotation about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: [f64; 3], angle_rad: f64, translation: [f64; 3]) -> RigidPose {
        let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if norm == 0.0 || angle_rad == 0.0 {
            return RigidPose {
                rotation: RigidPose::identity().rotation,
                translation,
            };
        }
        let (x, y, z) = (axis[0] / norm, axis[1] / norm, axis[2] / norm);
        let (s, c) = angle_rad.sin_cos();
        let t = 1.0 - c;
        RigidPose {
            rotation: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + self.translation[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + self.translation[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + self.translation[2],
        ]
    }

    /// self ∘ other: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        let t = self.apply(other.translation);
        RigidPose {
            rotation,
            translation: t,
        }
    }

    /// Max deviation of RᵀR from identity plus |det - 1|.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - expected).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        err.max((det - 1.0).abs())
    }
}

pub const Z_NEAR: f64 = 1e-6;

/// Pinhole projection of world points into a posed camera. Points behind
/// the camera or outside the frame are omitted; the original index rides
/// along so correspondences can be formed across views.
pub fn project_points(
    points: &[[f64; 3]],
    pose: &RigidPose,
    camera: &CameraModel,
    height: usize,
    width: usize,
) -> Vec<(usize, PixelLoc)> {
    let mut out = Vec::new();
    for (idx, &p) in points.iter().enumerate() {
        let c = pose.apply(p);
        if c[2] <= Z_NEAR {
            continue;
        }
        let u = camera.fx * c[0] / c[2] + camera.cx;
        let v = camera.fy * c[1] / c[2] + camera.cy;
        let col = u.round();
        let row = v.round();
        if row >= 0.0 && col >= 0.0 && (row as usize) < height && (col as usize) < width {
            out.push((idx, PixelLoc::new(row as usize, col as usize)));
        }
    }
    out
}
