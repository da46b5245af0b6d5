//! Rays, cameras, lidar samples, and the sinusoidal input encodings for the
//! field networks.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::math::{self, Real, Vec3, PI};
use crate::Result;

/// Number of frequencies used to encode 3D positions.
pub const POS_FREQS_DEFAULT: usize = 10;
/// Number of frequencies used to encode view directions.
pub const DIR_FREQS: usize = 4;

/// A parametric ray `p(t) = origin + t · direction` with integration bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    pub t_near: Real,
    pub t_far: Real,
}

impl Ray {
    /// Builds a ray, normalizing `direction` and checking the bound ordering.
    pub fn new(origin: Vec3, direction: Vec3, t_near: Real, t_far: Real) -> Result<Self> {
        let n = math::norm(direction);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::input("ray direction must be a nonzero finite vector"));
        }
        if !(t_near > 0.0) || !(t_far > t_near) {
            return Err(Error::input(format!(
                "ray bounds must satisfy 0 < t_near < t_far, got [{t_near}, {t_far}]"
            )));
        }
        Ok(Ray { origin, direction: math::scale(direction, 1.0 / n), t_near, t_far })
    }

    pub fn point_at(&self, t: Real) -> Vec3 {
        math::add(self.origin, math::scale(self.direction, t))
    }
}

/// A lidar return: a ray plus the measured termination distance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LidarSample {
    pub ray: Ray,
    /// Termination distance along the ray, in meters.
    pub z: Real,
}

impl LidarSample {
    pub fn new(ray: Ray, z: Real) -> Result<Self> {
        if !(ray.t_near <= z && z <= ray.t_far) {
            return Err(Error::input(format!(
                "lidar termination {z} outside ray bounds [{}, {}]",
                ray.t_near, ray.t_far
            )));
        }
        Ok(LidarSample { ray, z })
    }
}

/// The measured 3D point of a lidar return, `origin + z · direction`.
pub fn lidar_point(s: &LidarSample) -> Vec3 {
    s.ray.point_at(s.z)
}

/// Pinhole camera with a rigid world-from-camera pose.
///
/// Camera frame: +x right, +y down, +z forward; the principal point sits at
/// the image center.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    /// Rotation, world-from-camera, row major.
    pub rotation: [[Real; 3]; 3],
    /// Camera center in world coordinates.
    pub position: Vec3,
    /// Focal length in pixels.
    pub focal: Real,
    pub width: u32,
    pub height: u32,
    /// Index of this camera's image in the scene.
    pub image_id: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::input("camera focal length must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::input("camera resolution must be at least 1x1"));
        }
        Ok(())
    }

    fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }

    /// World-space forward axis (+z of the camera frame).
    pub fn forward(&self) -> Vec3 {
        self.rotate([0.0, 0.0, 1.0])
    }
}

/// Builds the ray through the center of pixel `(px, py)`.
pub fn pixel_ray(camera: &Camera, px: u32, py: u32, bounds: (Real, Real)) -> Result<Ray> {
    if px >= camera.width || py >= camera.height {
        return Err(Error::input(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let cx = camera.width as Real * 0.5;
    let cy = camera.height as Real * 0.5;
    let dir_cam = [
        (px as Real + 0.5 - cx) / camera.focal,
        (py as Real + 0.5 - cy) / camera.focal,
        1.0,
    ];
    let dir_world = camera.rotate(math::normalize(dir_cam));
    Ray::new(camera.position, dir_world, bounds.0, bounds.1)
}

/// Sinusoidally encoded point or direction.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPoint {
    /// `[sin(2^k π v_j), cos(2^k π v_j)]` for each axis `j` (major) and
    /// frequency `k` (minor). Length `3 · 2 · freqs`.
    pub features: Vec<Real>,
}

/// Length of an encoding with `freqs` frequencies.
pub fn encoded_len(freqs: usize) -> usize {
    6 * freqs
}

/// Writes the encoding of `v` into `out`, which must have length
/// `encoded_len(freqs)`. Axis-major, frequency-minor, sin before cos.
///
/// Frequencies above the base use the double-angle identities instead of
/// fresh trig calls; the accumulated rounding stays within ~1e-13 of direct
/// evaluation for the frequency counts used here.
pub fn encode_into(v: Vec3, freqs: usize, out: &mut [Real]) {
    debug_assert_eq!(out.len(), encoded_len(freqs));
    let mut i = 0;
    for &x in &v {
        let (mut s, mut c) = (PI * x).sin_cos();
        for _ in 0..freqs {
            out[i] = s;
            out[i + 1] = c;
            i += 2;
            let s2 = 2.0 * s * c;
            let c2 = c * c - s * s;
            s = s2;
            c = c2;
        }
    }
}

/// Encodes a 3D position with `freqs` frequencies.
pub fn encode_position(p: Vec3, freqs: usize) -> Result<EncodedPoint> {
    if !p.iter().all(|x| x.is_finite()) {
        return Err(Error::input("cannot encode a non-finite position"));
    }
    let mut features = vec![0.0; encoded_len(freqs)];
    encode_into(p, freqs, &mut features);
    Ok(EncodedPoint { features })
}

/// Encodes a unit direction with the standard 4 frequencies.
pub fn encode_direction(d: Vec3) -> Result<EncodedPoint> {
    encode_position(d, DIR_FREQS)
}
