//! Pinhole camera placed on a sphere around the origin.
//!
//! Azimuth is measured counter-clockwise from `+x` in the `xy`-plane,
//! elevation above that plane. The camera always looks at the origin with
//! `+z` as the up hint, falling back to `+x` at the poles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{intersect_aabb, sin_cos_deg, Mat4, Ray, Vec3, SCENE_MAX, SCENE_MIN};

/// Serialized form of a camera: the six spherical parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraParams {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub radius: f64,
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraParams", into = "CameraParams")]
pub struct CameraPose {
    params: CameraParams,
    position: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
    /// `tan(fov / 2)`.
    tan_half_fov: f64,
}

impl TryFrom<CameraParams> for CameraPose {
    type Error = Error;
    fn try_from(p: CameraParams) -> Result<Self> {
        CameraPose::from_spherical(
            p.azimuth_deg,
            p.elevation_deg,
            p.radius,
            p.fov_deg,
            p.width,
            p.height,
        )
    }
}

impl From<CameraPose> for CameraParams {
    fn from(c: CameraPose) -> Self {
        c.params
    }
}

impl CameraPose {
    pub fn from_spherical(
        azimuth_deg: f64,
        elevation_deg: f64,
        radius: f64,
        fov_deg: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        for (name, v) in [
            ("azimuth", azimuth_deg),
            ("elevation", elevation_deg),
            ("radius", radius),
            ("fov", fov_deg),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidCamera(format!("{name} is not finite")));
            }
        }
        if radius <= 0.0 {
            return Err(Error::InvalidCamera(format!("radius must be > 0, got {radius}")));
        }
        if !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(Error::InvalidCamera(format!(
                "elevation must lie in [-90, 90], got {elevation_deg}"
            )));
        }
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidCamera(format!("fov must lie in (0, 180), got {fov_deg}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera("image size must be non-zero".into()));
        }

        let (sa, ca) = sin_cos_deg(azimuth_deg);
        let (se, ce) = sin_cos_deg(elevation_deg);
        let position = Vec3::new(radius * ce * ca, radius * ce * sa, radius * se);
        let forward = (-position).normalize();
        let mut right = forward.cross(Vec3::Z);
        if right.norm() < 1e-9 {
            right = forward.cross(Vec3::X);
        }
        let right = right.normalize();
        let up = right.cross(forward);

        Ok(Self {
            params: CameraParams {
                azimuth_deg,
                elevation_deg,
                radius,
                fov_deg,
                width,
                height,
            },
            position,
            right,
            up,
            forward,
            tan_half_fov: (fov_deg.to_radians() * 0.5).tan(),
        })
    }

    pub fn params(&self) -> CameraParams {
        self.params
    }
    pub fn azimuth_deg(&self) -> f64 {
        self.params.azimuth_deg
    }
    pub fn elevation_deg(&self) -> f64 {
        self.params.elevation_deg
    }
    pub fn radius(&self) -> f64 {
        self.params.radius
    }
    pub fn fov_deg(&self) -> f64 {
        self.params.fov_deg
    }
    pub fn width(&self) -> usize {
        self.params.width as usize
    }
    pub fn height(&self) -> usize {
        self.params.height as usize
    }
    pub fn position(&self) -> Vec3 {
        self.position
    }
    pub fn forward(&self) -> Vec3 {
        self.forward
    }
    pub fn right(&self) -> Vec3 {
        self.right
    }
    pub fn up(&self) -> Vec3 {
        self.up
    }

    /// Same pose with a different image size.
    pub fn with_size(&self, width: u32, height: u32) -> Result<Self> {
        let p = self.params;
        Self::from_spherical(p.azimuth_deg, p.elevation_deg, p.radius, p.fov_deg, width, height)
    }

    /// World-to-camera transform. Camera axes are (right, up, -forward), so
    /// the camera looks down its local `-z`.
    pub fn world_to_camera(&self) -> Mat4 {
        let rows = [self.right, self.up, -self.forward];
        let t = Vec3::new(
            -rows[0].dot(self.position),
            -rows[1].dot(self.position),
            -rows[2].dot(self.position),
        );
        Mat4::from_rows_translation(rows, t)
    }

    pub fn camera_to_world(&self) -> Mat4 {
        self.world_to_camera().rigid_inverse()
    }

    /// Focal length in pixels (vertical field of view).
    pub fn focal_px(&self) -> f64 {
        0.5 * self.height() as f64 / self.tan_half_fov
    }

    /// Unnormalized direction through the continuous image point `(u, v)`
    /// measured in pixels from the top-left corner.
    pub fn direction_at(&self, u: f64, v: f64) -> Vec3 {
        let w = self.width() as f64;
        let h = self.height() as f64;
        let aspect = w / h;
        let sx = (2.0 * u / w - 1.0) * self.tan_half_fov * aspect;
        let sy = (1.0 - 2.0 * v / h) * self.tan_half_fov;
        self.forward + self.right * sx + self.up * sy
    }

    /// Ray through the center of pixel `(px, py)`, clipped to the scene box.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Ray {
        let dir = self.direction_at(px as f64 + 0.5, py as f64 + 0.5).normalize();
        let (t_near, t_far) =
            intersect_aabb(self.position, dir, SCENE_MIN, SCENE_MAX).unwrap_or((0.0, 0.0));
        Ray {
            origin: self.position,
            direction: dir,
            t_near,
            t_far,
        }
    }

    /// Distance of `p` along the forward axis (z-depth).
    pub fn z_depth(&self, p: Vec3) -> f64 {
        (p - self.position).dot(self.forward)
    }

    /// Continuous pixel coordinates and z-depth of a world point.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let d = p - self.position;
        let z = d.dot(self.forward);
        let w = self.width() as f64;
        let h = self.height() as f64;
        let aspect = w / h;
        let sx = d.dot(self.right) / z / (self.tan_half_fov * aspect);
        let sy = d.dot(self.up) / z / self.tan_half_fov;
        ((sx + 1.0) * 0.5 * w, (1.0 - sy) * 0.5 * h, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn camera_on_x_axis() {
        let c = CameraPose::from_spherical(0.0, 0.0, 2.0, 50.0, 64, 64).unwrap();
        assert_eq!(c.position(), Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(c.forward(), Vec3::new(-1.0, 0.0, 0.0));
        assert_eq!(c.up(), Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn camera_at_ninety_azimuth() {
        let c = CameraPose::from_spherical(90.0, 0.0, 2.0, 50.0, 64, 64).unwrap();
        assert!(close(c.position(), Vec3::new(0.0, 2.0, 0.0), 1e-12));
    }

    #[test]
    fn camera_at_pole_uses_x_up() {
        let c = CameraPose::from_spherical(0.0, 90.0, 2.0, 50.0, 64, 64).unwrap();
        assert!(close(c.position(), Vec3::new(0.0, 0.0, 2.0), 1e-12));
        assert!(close(c.up(), Vec3::X, 1e-12));
        let c = CameraPose::from_spherical(30.0, -90.0, 2.0, 50.0, 64, 64).unwrap();
        assert!(close(c.forward(), Vec3::Z, 1e-12));
        assert!((c.up().norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(CameraPose::from_spherical(0.0, 0.0, 0.0, 50.0, 8, 8).is_err());
        assert!(CameraPose::from_spherical(0.0, 0.0, -1.0, 50.0, 8, 8).is_err());
        assert!(CameraPose::from_spherical(f64::NAN, 0.0, 1.0, 50.0, 8, 8).is_err());
        assert!(CameraPose::from_spherical(0.0, 91.0, 1.0, 50.0, 8, 8).is_err());
        assert!(CameraPose::from_spherical(0.0, 0.0, 1.0, 180.0, 8, 8).is_err());
        assert!(CameraPose::from_spherical(0.0, 0.0, f64::INFINITY, 50.0, 8, 8).is_err());
    }

    #[test]
    fn center_pixel_is_principal_ray() {
        let c = CameraPose::from_spherical(37.0, 12.0, 2.5, 50.0, 65, 65).unwrap();
        let r = c.pixel_ray(32, 32);
        assert!(close(r.direction, c.forward(), 1e-12));
    }

    #[test]
    fn axis_camera_hits_box_at_one_and_three() {
        let c = CameraPose::from_spherical(0.0, 0.0, 2.0, 50.0, 65, 65).unwrap();
        let r = c.pixel_ray(32, 32);
        assert!((r.t_near - 1.0).abs() < 1e-12);
        assert!((r.t_far - 3.0).abs() < 1e-12);
    }

    #[test]
    fn corner_miss_is_encoded_as_zero_segment() {
        // Wide field of view from far away: corner rays pass beside the box.
        let c = CameraPose::from_spherical(0.0, 0.0, 6.0, 120.0, 32, 32).unwrap();
        let r = c.pixel_ray(0, 0);
        assert_eq!((r.t_near, r.t_far), (0.0, 0.0));
        assert!(r.is_miss());
    }

    #[test]
    fn extrinsics_roundtrip_position() {
        let c = CameraPose::from_spherical(123.0, -33.0, 1.7, 40.0, 16, 16).unwrap();
        let w2c = c.world_to_camera();
        assert!(w2c.orthonormality_error() < 1e-9);
        let origin_cam = c.camera_to_world().transform_point(Vec3::ZERO);
        assert!(close(origin_cam, c.position(), 1e-9));
        // The world origin sits straight ahead, at depth = radius.
        let o = w2c.transform_point(Vec3::ZERO);
        assert!(close(o, Vec3::new(0.0, 0.0, -1.7), 1e-9));
    }

    #[test]
    fn project_inverts_direction() {
        let c = CameraPose::from_spherical(10.0, 20.0, 2.5, 50.0, 40, 30).unwrap();
        let d = c.direction_at(7.25, 19.5);
        let (u, v, z) = c.project(c.position() + d * 1.3);
        assert!((u - 7.25).abs() < 1e-9 && (v - 19.5).abs() < 1e-9);
        assert!((z - 1.3).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip() {
        let c = CameraPose::from_spherical(30.0, 20.0, 2.5, 50.0, 64, 48).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"azimuth_deg\":30.0"));
        let back: CameraPose = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        let bad = r#"{"azimuth_deg":0,"elevation_deg":0,"radius":-1,"fov_deg":50,"width":8,"height":8}"#;
        assert!(serde_json::from_str::<CameraPose>(bad).is_err());
    }
}
