//! Camera poses and pinhole ray generation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHONORMAL_TOL: f64 = 1e-6;

/// Rigid camera pose. Rotation columns are `[right, up, forward]` in world
/// coordinates; the camera looks along `forward`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub fov_y: f64,
}

/// Wire format: `{position:[3], rotation:[9 row-major], fov_y}`.
#[derive(Serialize, Deserialize)]
struct PoseJson {
    position: [f64; 3],
    rotation: [f64; 9],
    fov_y: f64,
}

impl CameraPose {
    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>, fov_y: f64) -> Result<Self> {
        let pose = Self {
            position,
            rotation,
            fov_y,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera at `position` looking at `target`, world up = +y.
    pub fn look_at(position: Vector3<f64>, target: Vector3<f64>, fov_y: f64) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidPose("camera position equals target".into()))?;
        let world_up = Vector3::new(0.0, 1.0, 0.0);
        let right = world_up
            .cross(&forward)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::InvalidPose("view direction parallel to world up".into()))?;
        let up = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, up, forward]);
        Self::new(position, rotation, fov_y)
    }

    /// Camera on a sphere of radius `distance` around the origin. Yaw 0,
    /// pitch 0 puts the camera on the -z axis looking at the origin.
    pub fn from_orbit(distance: f64, yaw: f64, pitch: f64, fov_y: f64) -> Result<Self> {
        let position = Vector3::new(
            distance * yaw.sin() * pitch.cos(),
            distance * pitch.sin(),
            -distance * yaw.cos() * pitch.cos(),
        );
        Self::look_at(position, Vector3::zeros(), fov_y)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(Error::InvalidPose(format!(
                "fov_y {} not in (0, pi)",
                self.fov_y
            )));
        }
        if !self.position.iter().all(|v| v.is_finite())
            || !self.rotation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidPose("non-finite pose".into()));
        }
        let gram = self.rotation * self.rotation.transpose();
        let dev = (gram - Matrix3::identity()).abs().max();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (max deviation {dev:.3e})"
            )));
        }
        Ok(())
    }

    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut rotation = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                rotation[r * 3 + c] = self.rotation[(r, c)];
            }
        }
        serde_json::to_value(PoseJson {
            position: [self.position.x, self.position.y, self.position.z],
            rotation,
            fov_y: self.fov_y,
        })
        .expect("pose json")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let p: PoseJson = serde_json::from_value(value.clone())?;
        let rotation = Matrix3::from_row_slice(&p.rotation);
        Self::new(
            Vector3::new(p.position[0], p.position[1], p.position[2]),
            rotation,
            p.fov_y,
        )
    }
}

/// A camera ray with its integration bounds.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vector3<f64> {
        self.origin + self.direction * t
    }
}

/// One ray per feature-grid pixel, through the pixel center, row-major.
/// Pixel (0,0) is the top-left; directions are unit length.
pub fn generate_rays(
    pose: &CameraPose,
    resolution: (usize, usize),
    t_near: f64,
    t_far: f64,
) -> Result<Vec<Ray>> {
    pose.validate()?;
    let (h, w) = resolution;
    if h == 0 || w == 0 {
        return Err(Error::config("resolution must be at least 1x1"));
    }
    if !(0.0 <= t_near && t_near < t_far) {
        return Err(Error::config(format!(
            "invalid ray bounds [{t_near}, {t_far}]"
        )));
    }
    let tan_half = (pose.fov_y / 2.0).tan();
    let aspect = w as f64 / h as f64;
    let mut rays = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let x = ((j as f64 + 0.5) / w as f64 * 2.0 - 1.0) * tan_half * aspect;
            let y = (1.0 - (i as f64 + 0.5) / h as f64 * 2.0) * tan_half;
            let dir_cam = Vector3::new(x, y, 1.0);
            let direction = (pose.rotation * dir_cam).normalize();
            rays.push(Ray {
                origin: pose.position,
                direction,
                t_near,
                t_far,
            });
        }
    }
    Ok(rays)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_pose(fov: f64) -> CameraPose {
        CameraPose::new(Vector3::zeros(), Matrix3::identity(), fov).unwrap()
    }

    #[test]
    fn center_pixel_matches_forward_axis() {
        let pose = identity_pose(0.8);
        let rays = generate_rays(&pose, (3, 3), 1.0, 2.0).unwrap();
        let center = rays[4].direction;
        let forward = pose.forward();
        assert!((center - forward).norm() < 1e-12);
    }

    #[test]
    fn halving_fov_pulls_rays_toward_forward() {
        let wide = identity_pose(1.0);
        let narrow = identity_pose(0.5);
        let rays_w = generate_rays(&wide, (4, 4), 1.0, 2.0).unwrap();
        let rays_n = generate_rays(&narrow, (4, 4), 1.0, 2.0).unwrap();
        let f = wide.forward();
        for (rw, rn) in rays_w.iter().zip(&rays_n) {
            let dot_w = rw.direction.dot(&f);
            let dot_n = rn.direction.dot(&f);
            assert!(dot_n > dot_w, "narrow fov should concentrate rays");
        }
    }

    #[test]
    fn rays_are_unit_length() {
        let pose = CameraPose::from_orbit(3.0, 0.4, -0.2, 0.7).unwrap();
        let rays = generate_rays(&pose, (4, 4), 2.0, 6.0).unwrap();
        assert_eq!(rays.len(), 16);
        for r in rays {
            assert!((r.direction.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn non_orthonormal_rotation_rejected() {
        let mut rot = Matrix3::identity();
        rot[(0, 0)] = 1.5;
        let pose = CameraPose {
            position: Vector3::zeros(),
            rotation: rot,
            fov_y: 0.8,
        };
        assert!(matches!(pose.validate(), Err(Error::InvalidPose(_))));
        assert!(generate_rays(&pose, (2, 2), 1.0, 2.0).is_err());
    }

    #[test]
    fn orbit_looks_at_origin() {
        let pose = CameraPose::from_orbit(3.0, 0.7, 0.2, 0.8).unwrap();
        let to_origin = (-pose.position).normalize();
        assert!((pose.forward() - to_origin).norm() < 1e-9);
        assert!((pose.position.norm() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn pose_json_roundtrip() {
        let pose = CameraPose::from_orbit(3.0, -0.3, 0.1, 0.75).unwrap();
        let j = pose.to_json();
        let back = CameraPose::from_json(&j).unwrap();
        assert!((back.position - pose.position).norm() < 1e-12);
        assert!((back.rotation - pose.rotation).abs().max() < 1e-12);
    }
}
