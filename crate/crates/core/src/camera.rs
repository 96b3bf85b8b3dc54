//! Pinhole cameras, ray generation, and uniform sampling along rays.
//!
//! Camera space follows the OpenGL/Blender convention used by the synthetic
//! dataset format: +x right, +y up, the camera looks down -z. `c2w` is the
//! 3x4 camera-to-world transform with an orthonormal rotation part.

use serde::{Deserialize, Serialize};

use crate::vec3::{self, Vec3};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels.
    pub focal: f64,
    /// Rows of the 3x4 camera-to-world matrix.
    pub c2w: [[f64; 4]; 3],
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn new(
        width: usize,
        height: usize,
        focal: f64,
        c2w: [[f64; 4]; 3],
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Camera { width, height, focal, c2w, near, far };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal <= 0.0 {
            return Err(Error::InvalidConfig(format!("focal must be positive, got {}", self.focal)));
        }
        if self.near >= self.far {
            return Err(Error::InvalidConfig(format!(
                "near {} must be < far {}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("zero image dims".into()));
        }
        let cols = self.rotation_cols();
        for i in 0..3 {
            if (vec3::norm(cols[i]) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("rotation column {i} not unit length")));
            }
            for j in (i + 1)..3 {
                if vec3::dot(cols[i], cols[j]).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "rotation columns {i},{j} not orthogonal"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn rotation_cols(&self) -> [Vec3; 3] {
        let m = &self.c2w;
        [
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ]
    }

    pub fn origin(&self) -> Vec3 {
        [self.c2w[0][3], self.c2w[1][3], self.c2w[2][3]]
    }

    /// Ray through continuous pixel coordinates (`fu`, `fv`) measured from
    /// the top-left image corner; pixel centers sit at `u + 0.5`.
    pub fn ray_at(&self, fu: f64, fv: f64) -> Ray {
        let dir_cam = [
            (fu - self.width as f64 / 2.0) / self.focal,
            -(fv - self.height as f64 / 2.0) / self.focal,
            -1.0,
        ];
        let m = &self.c2w;
        let dir_world = [
            m[0][0] * dir_cam[0] + m[0][1] * dir_cam[1] + m[0][2] * dir_cam[2],
            m[1][0] * dir_cam[0] + m[1][1] * dir_cam[1] + m[1][2] * dir_cam[2],
            m[2][0] * dir_cam[0] + m[2][1] * dir_cam[1] + m[2][2] * dir_cam[2],
        ];
        Ray { origin: self.origin(), dir: vec3::normalize(dir_world), pixel: (fu, fv) }
    }

    /// Ray through the center of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Ray {
        self.ray_at(u as f64 + 0.5, v as f64 + 0.5)
    }

    /// Camera with image dims and focal scaled by `s` (fractional scales
    /// round the pixel counts).
    pub fn scaled(&self, s: f64) -> Result<Camera> {
        Camera::new(
            ((self.width as f64 * s).round() as usize).max(1),
            ((self.height as f64 * s).round() as usize).max(1),
            self.focal * s,
            self.c2w,
            self.near,
            self.far,
        )
    }
}

/// Camera-to-world matrix at `eye` looking at `target` with the given world
/// up vector.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> [[f64; 4]; 3] {
    let back = vec3::normalize(vec3::sub(eye, target)); // camera +z
    let right = vec3::normalize(vec3::cross(up, back));
    let cam_up = vec3::cross(back, right);
    [
        [right[0], cam_up[0], back[0], eye[0]],
        [right[1], cam_up[1], back[1], eye[1]],
        [right[2], cam_up[2], back[2], eye[2]],
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    /// Continuous pixel coordinates this ray was generated from.
    pub pixel: (f64, f64),
}

impl Ray {
    pub fn point_at(&self, t: f64) -> Vec3 {
        vec3::add(self.origin, vec3::scale(self.dir, t))
    }

    /// Parameter interval where the ray overlaps an axis-aligned box, if any.
    pub fn clip_box(&self, bbox_min: Vec3, bbox_max: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if self.dir[a].abs() < 1e-12 {
                if self.origin[a] < bbox_min[a] || self.origin[a] > bbox_max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / self.dir[a];
            let mut ta = (bbox_min[a] - self.origin[a]) * inv;
            let mut tb = (bbox_max[a] - self.origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        if t0 <= t1 && t1 > 0.0 {
            Some((t0.max(0.0), t1))
        } else {
            None
        }
    }
}

/// One ray per pixel, row-major over (v, u). Deterministic for a fixed
/// camera.
pub fn generate_rays(camera: &Camera) -> Vec<Ray> {
    let mut rays = Vec::with_capacity(camera.width * camera.height);
    for v in 0..camera.height {
        for u in 0..camera.width {
            rays.push(camera.pixel_ray(u, v));
        }
    }
    rays
}

/// Uniformly spaced sample points along a ray segment.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub ts: Vec<f64>,
    pub positions: Vec<Vec3>,
    /// Per-sample segment length; the final sample keeps the full step.
    pub deltas: Vec<f64>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Samples at `near + i * step`, K = floor((far-near)/step) + 1.
pub fn sample_along_ray(ray: &Ray, near: f64, far: f64, step: f64) -> Result<RaySamples> {
    if far <= near {
        return Err(Error::InvalidArgument(format!("far {far} <= near {near}")));
    }
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let k = ((far - near) / step).floor() as usize + 1;
    let mut ts = Vec::with_capacity(k);
    let mut positions = Vec::with_capacity(k);
    for i in 0..k {
        let t = near + i as f64 * step;
        ts.push(t);
        positions.push(ray.point_at(t));
    }
    let deltas = vec![step; k];
    Ok(RaySamples { ts, positions, deltas })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(w: usize, h: usize) -> Camera {
        Camera::new(
            w,
            h,
            50.0,
            [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
            0.1,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn center_pixel_of_odd_image_points_down_neg_z() {
        let cam = identity_cam(5, 5);
        let r = cam.pixel_ray(2, 2);
        assert!((r.dir[0]).abs() < 1e-12);
        assert!((r.dir[1]).abs() < 1e-12);
        assert!((r.dir[2] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn origin_is_translation_column() {
        let c2w = [
            [1.0, 0.0, 0.0, 3.0],
            [0.0, 1.0, 0.0, -2.0],
            [0.0, 0.0, 1.0, 5.0],
        ];
        let cam = Camera::new(4, 4, 10.0, c2w, 0.1, 10.0).unwrap();
        for r in generate_rays(&cam) {
            assert_eq!(r.origin, [3.0, -2.0, 5.0]);
        }
    }

    #[test]
    fn all_rays_unit_norm_and_deterministic() {
        let eye = [2.0, -1.5, 3.0];
        let c2w = look_at(eye, [0.0; 3], [0.0, 0.0, 1.0]);
        let cam = Camera::new(7, 5, 12.0, c2w, 0.1, 10.0).unwrap();
        let a = generate_rays(&cam);
        let b = generate_rays(&cam);
        for (ra, rb) in a.iter().zip(&b) {
            assert!((crate::vec3::norm(ra.dir) - 1.0).abs() < 1e-9);
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn look_at_is_orthonormal_and_faces_target() {
        let eye = [3.0, 2.0, 1.5];
        let c2w = look_at(eye, [0.0; 3], [0.0, 0.0, 1.0]);
        let cam = Camera::new(9, 9, 20.0, c2w, 0.1, 10.0).unwrap();
        cam.validate().unwrap();
        let r = cam.ray_at(4.5, 4.5);
        let to_target = crate::vec3::normalize(crate::vec3::sub([0.0; 3], eye));
        for a in 0..3 {
            assert!((r.dir[a] - to_target[a]).abs() < 1e-9);
        }
    }

    #[test]
    fn validate_rejects_bad_cameras() {
        let c2w = [
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        assert!(Camera::new(4, 4, 10.0, c2w, 0.1, 10.0).is_err());
        let eye_ok = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        assert!(Camera::new(4, 4, -1.0, eye_ok, 0.1, 10.0).is_err());
        assert!(Camera::new(4, 4, 10.0, eye_ok, 5.0, 1.0).is_err());
    }

    #[test]
    fn sampling_counts_and_spacing() {
        let cam = identity_cam(3, 3);
        let ray = cam.pixel_ray(1, 1);
        let s = sample_along_ray(&ray, 0.0, 1.0, 0.5).unwrap();
        assert_eq!(s.ts, vec![0.0, 0.5, 1.0]);
        assert_eq!(s.deltas, vec![0.5; 3]);

        let s = sample_along_ray(&ray, 0.0, 0.3, 0.5).unwrap();
        assert_eq!(s.len(), 1);

        let fine = sample_along_ray(&ray, 0.0, 2.0, 0.1).unwrap().len() as i64;
        let coarse = sample_along_ray(&ray, 0.0, 2.0, 0.2).unwrap().len() as i64;
        assert!((fine - 2 * coarse).abs() <= 2);

        assert!(sample_along_ray(&ray, 1.0, 0.5, 0.1).is_err());
    }

    #[test]
    fn clip_box_hits_and_misses() {
        let cam = identity_cam(3, 3);
        let mut ray = cam.pixel_ray(1, 1);
        ray.origin = [0.0, 0.0, 3.0];
        let (t0, t1) = ray.clip_box([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12);
        assert!((t1 - 4.0).abs() < 1e-12);
        ray.origin = [5.0, 0.0, 3.0];
        assert!(ray.clip_box([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).is_none());
    }

    #[test]
    fn scaled_camera_scales_dims_and_focal() {
        let cam = identity_cam(64, 64);
        let s = cam.scaled(2.5).unwrap();
        assert_eq!(s.width, 160);
        assert_eq!(s.height, 160);
        assert!((s.focal - 125.0).abs() < 1e-12);
    }
}
