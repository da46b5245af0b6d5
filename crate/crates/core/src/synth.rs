//! Procedural scene generation: posed multi-exposure images with exact sky
//! masks, simulated lidar sweeps, train/test splitting, and the on-disk
//! scene bundle format.
//!
//! Scenes are boxes over a ground plane under an analytic sky gradient.
//! Everything is exact: sky masks are true wherever the ray misses all
//! geometry, lidar ranges are closed-form first-hit distances, and
//! ground-truth depth is available for every camera pixel.

use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::field::SceneNorm;
use crate::geometry::{lidar_point, pixel_ray, Camera, LidarSample, Ray};
use crate::io::{self, ImageRgb, MaskImage};
use crate::math::{self, Real, Vec3};
use crate::render::DensityField;
use crate::Result;

pub const SCENE_SCHEMA: &str = "radfield.scene/1";
pub const SPLIT_SCHEMA: &str = "radfield.split/1";

/// Axis-aligned box with a base color.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: Vec3,
    pub max: Vec3,
    pub rgb: [Real; 3],
}

impl BoxSpec {
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Distance from `p` to the box surface (0 when exactly on it).
    pub fn surface_distance(&self, p: Vec3) -> Real {
        let mut outside = 0.0;
        let mut min_face: Real = Real::INFINITY;
        for i in 0..3 {
            let below = self.min[i] - p[i];
            let above = p[i] - self.max[i];
            let out = below.max(above);
            if out > 0.0 {
                outside += out * out;
            } else {
                min_face = min_face.min(-out);
            }
        }
        if outside > 0.0 {
            outside.sqrt()
        } else {
            min_face
        }
    }
}

/// Horizon-to-zenith sky gradient.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SkyModel {
    pub horizon: [Real; 3],
    pub zenith: [Real; 3],
}

impl SkyModel {
    pub fn color(&self, d: Vec3) -> [Real; 3] {
        let t = ((d[2] + 1.0) * 0.5).clamp(0.0, 1.0);
        [
            self.horizon[0] + (self.zenith[0] - self.horizon[0]) * t,
            self.horizon[1] + (self.zenith[1] - self.horizon[1]) * t,
            self.horizon[2] + (self.zenith[2] - self.horizon[2]) * t,
        ]
    }
}

/// Lidar scan pattern: spinning rings swept from a set of origins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LidarPattern {
    pub origins: Vec<Vec3>,
    /// Ring elevations in degrees.
    pub elevations_deg: Vec<Real>,
    pub azimuth_count: usize,
    pub max_range: Real,
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub schema: String,
    pub seed: u64,
    /// Ray integration bounds, meters.
    pub t_near: Real,
    pub t_far: Real,
    /// Scene bounding box used for coordinate normalization.
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub ground_height: Real,
    pub ground_rgb: [Real; 3],
    pub boxes: Vec<BoxSpec>,
    pub sky: SkyModel,
    pub cameras: Vec<Camera>,
    /// Ground-truth per-image exposure gain matrices.
    pub exposure_gains: Vec<[[Real; 3]; 3]>,
    pub lidar: LidarPattern,
    /// Optional per-channel gamma applied after the gain (harder,
    /// out-of-model exposure for robustness tests).
    #[serde(default)]
    pub nonlinear_gamma: Option<Real>,
}

/// A generated scene: rendered images, exact sky masks, lidar sweep.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub images: Vec<ImageRgb>,
    pub sky_masks: Vec<MaskImage>,
    pub lidar: Vec<LidarSample>,
}

fn shading(normal: Vec3) -> Real {
    // fixed directional light; purely position-dependent so a radiance
    // field can represent it
    let light = math::normalize([0.35, 0.25, 0.9]);
    0.55 + 0.45 * math::dot(normal, light).abs()
}

/// Exact nearest positive ray/scene intersection: distance, surface color
/// (shaded, gain-free), and outward normal.
///
/// The ground plane covers the horizontal extent of the scene bounds; rays
/// that would only strike ground beyond the bounds count as sky, so every
/// supervised surface stays inside the integration range.
pub fn ray_hit_full(spec: &SceneSpec, ray: &Ray) -> Option<(Real, [Real; 3], Vec3)> {
    let mut best: Option<(Real, [Real; 3], Vec3)> = None;
    let o = ray.origin;
    let d = ray.direction;

    // ground patch at z = ground_height
    if d[2].abs() > 1e-12 {
        let t = (spec.ground_height - o[2]) / d[2];
        if t > 1e-9 {
            let hit = ray.point_at(t);
            let inside = hit[0] >= spec.bounds_min[0]
                && hit[0] <= spec.bounds_max[0]
                && hit[1] >= spec.bounds_min[1]
                && hit[1] <= spec.bounds_max[1];
            if inside {
                let n = if o[2] >= spec.ground_height { [0.0, 0.0, 1.0] } else { [0.0, 0.0, -1.0] };
                let c = math::scale(spec.ground_rgb, shading(n));
                best = Some((t, c, n));
            }
        }
    }

    for b in &spec.boxes {
        // slab test
        let mut t_enter = -Real::INFINITY;
        let mut t_exit = Real::INFINITY;
        let mut axis = 0usize;
        let mut hit = true;
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i] < b.min[i] || o[i] > b.max[i] {
                    hit = false;
                    break;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut t0, mut t1) = ((b.min[i] - o[i]) * inv, (b.max[i] - o[i]) * inv);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            if t0 > t_enter {
                t_enter = t0;
                axis = i;
            }
            t_exit = t_exit.min(t1);
            if t_enter > t_exit {
                hit = false;
                break;
            }
        }
        if !hit || t_enter <= 1e-9 {
            continue;
        }
        if best.map_or(true, |(bt, _, _)| t_enter < bt) {
            let mut n = [0.0; 3];
            n[axis] = if d[axis] > 0.0 { -1.0 } else { 1.0 };
            let c = math::scale(b.rgb, shading(n));
            best = Some((t_enter, c, n));
        }
    }
    best
}

/// Nearest positive hit: `(distance, shaded surface color)`.
pub fn ray_hit(spec: &SceneSpec, ray: &Ray) -> Option<(Real, [Real; 3])> {
    ray_hit_full(spec, ray).map(|(t, c, _)| (t, c))
}

fn apply_gain(gain: &[[Real; 3]; 3], c: [Real; 3]) -> [Real; 3] {
    [
        gain[0][0] * c[0] + gain[0][1] * c[1] + gain[0][2] * c[2],
        gain[1][0] * c[0] + gain[1][1] * c[1] + gain[1][2] * c[2],
        gain[2][0] * c[0] + gain[2][1] * c[1] + gain[2][2] * c[2],
    ]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCENE_SCHEMA {
            return Err(Error::config(format!("unexpected scene schema {}", self.schema)));
        }
        if !(self.t_near > 0.0 && self.t_far > self.t_near) {
            return Err(Error::config("scene requires 0 < t_near < t_far"));
        }
        if self.cameras.len() != self.exposure_gains.len() {
            return Err(Error::config("one exposure gain per camera required"));
        }
        let inside = |p: Vec3| (0..3).all(|i| p[i] >= self.bounds_min[i] && p[i] <= self.bounds_max[i]);
        for b in &self.boxes {
            if !(inside(b.min) && inside(b.max)) {
                return Err(Error::config("box outside scene bounds"));
            }
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            cam.validate()?;
            if !inside(cam.position) {
                return Err(Error::config(format!("camera {i} outside scene bounds")));
            }
            if self.boxes.iter().any(|b| b.contains(cam.position))
                || cam.position[2] <= self.ground_height
            {
                return Err(Error::config(format!("camera {i} inside geometry")));
            }
            if cam.image_id != i {
                return Err(Error::config(format!("camera {i} has image_id {}", cam.image_id)));
            }
        }
        Ok(())
    }

    /// Normalization mapping the scene bounds into [-1, 1]^3.
    pub fn norm(&self) -> SceneNorm {
        let center = [
            0.5 * (self.bounds_min[0] + self.bounds_max[0]),
            0.5 * (self.bounds_min[1] + self.bounds_max[1]),
            0.5 * (self.bounds_min[2] + self.bounds_max[2]),
        ];
        let half = (0..3)
            .map(|i| 0.5 * (self.bounds_max[i] - self.bounds_min[i]))
            .fold(0.0 as Real, Real::max);
        SceneNorm { center, half_extent: half.max(1e-6) }
    }

    pub fn scene_diagonal(&self) -> Real {
        math::norm(math::sub(self.bounds_max, self.bounds_min))
    }

    /// Ground-truth depth for every pixel of a camera (None = sky).
    pub fn gt_depth(&self, camera: &Camera) -> Result<Vec<Option<Real>>> {
        let mut out = Vec::with_capacity((camera.width * camera.height) as usize);
        for py in 0..camera.height {
            for px in 0..camera.width {
                let ray = pixel_ray(camera, px, py, (self.t_near, self.t_far))?;
                out.push(ray_hit(self, &ray).map(|(t, _)| t));
            }
        }
        Ok(out)
    }
}

/// Renders the exact image and sky mask for one camera, applying that
/// image's exposure gain (and optional gamma) to both surface and sky
/// colors. Pixels are clamped to [0, 1].
pub fn render_ground_truth(spec: &SceneSpec, camera: &Camera) -> Result<(ImageRgb, MaskImage)> {
    let gain = &spec.exposure_gains[camera.image_id];
    let mut img = ImageRgb::new(camera.width, camera.height);
    let mut mask = MaskImage::new(camera.width, camera.height);
    let rows: Vec<(Vec<[Real; 3]>, Vec<bool>)> = (0..camera.height)
        .into_par_iter()
        .map(|py| {
            let mut colors = Vec::with_capacity(camera.width as usize);
            let mut sky = Vec::with_capacity(camera.width as usize);
            for px in 0..camera.width {
                let ray = pixel_ray(camera, px, py, (spec.t_near, spec.t_far))
                    .expect("pixel in range");
                let (base, is_sky) = match ray_hit(spec, &ray) {
                    Some((_, c)) => (c, false),
                    None => (spec.sky.color(ray.direction), true),
                };
                let mut c = apply_gain(gain, base);
                if let Some(g) = spec.nonlinear_gamma {
                    for ch in &mut c {
                        *ch = ch.max(0.0).powf(g);
                    }
                }
                for ch in &mut c {
                    *ch = ch.clamp(0.0, 1.0);
                }
                colors.push(c);
                sky.push(is_sky);
            }
            (colors, sky)
        })
        .collect();
    for (py, (colors, sky)) in rows.into_iter().enumerate() {
        for (px, (c, s)) in colors.into_iter().zip(sky).enumerate() {
            img.set(px as u32, py as u32, c);
            mask.set(px as u32, py as u32, s);
        }
    }
    Ok((img, mask))
}

/// Sweeps the lidar pattern; only rays that hit something within range emit
/// a sample, and the recorded range is the exact first-hit distance.
pub fn simulate_lidar(spec: &SceneSpec) -> Vec<LidarSample> {
    let mut out = Vec::new();
    for &origin in &spec.lidar.origins {
        for &elev_deg in &spec.lidar.elevations_deg {
            let elev = elev_deg.to_radians();
            for a in 0..spec.lidar.azimuth_count {
                let az = 2.0 * math::PI * (a as Real + 0.5) / spec.lidar.azimuth_count as Real;
                let dir = [elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()];
                let ray = Ray {
                    origin,
                    direction: dir,
                    t_near: spec.t_near,
                    t_far: spec.lidar.max_range.min(spec.t_far),
                };
                if let Some((t, _)) = ray_hit(spec, &ray) {
                    if t >= ray.t_near && t <= ray.t_far {
                        out.push(LidarSample { ray, z: t });
                    }
                }
            }
        }
    }
    out
}

/// Renders every camera and sweeps the lidar.
pub fn generate(spec: SceneSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.cameras.len());
    let mut masks = Vec::with_capacity(spec.cameras.len());
    for cam in &spec.cameras {
        let (img, mask) = render_ground_truth(&spec, cam)?;
        images.push(img);
        masks.push(mask);
    }
    let lidar = simulate_lidar(&spec);
    Ok(SceneBundle { spec, images, sky_masks: masks, lidar })
}

// ---------------------------------------------------------------------------
// Train/test splitting
// ---------------------------------------------------------------------------

/// Which evaluation protocol to split for.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitSetting {
    /// Hold out a fraction of cameras; lidar rays with origins within
    /// `radius` meters of a test camera go to the test set.
    HeldOutViewpoints { fraction: Real, radius: Real },
    /// Hold out every lidar ray terminating on one box; all images train.
    HeldOutBuilding { box_id: usize },
}

/// Training view of a scene. Camera `image_id`s are remapped to be
/// contiguous so they can index exposure codes directly.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageRgb>,
    pub sky_masks: Vec<MaskImage>,
    /// Optional per-image pixels to exclude from supervision (moving
    /// objects); generated scenes mark none.
    pub exclusion_masks: Option<Vec<MaskImage>>,
    pub lidar: Vec<LidarSample>,
    pub t_near: Real,
    pub t_far: Real,
    pub norm: SceneNorm,
    /// Original bundle image index per training camera.
    pub source_image: Vec<usize>,
}

/// Held-out data plus the ground truth needed to appraise it.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub cameras: Vec<Camera>,
    pub images: Vec<ImageRgb>,
    pub sky_masks: Vec<MaskImage>,
    pub lidar: Vec<LidarSample>,
    /// Ground-truth exposure gains of the test images.
    pub gains: Vec<[[Real; 3]; 3]>,
    pub source_image: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SplitScene {
    pub train: TrainSet,
    pub test: TestSet,
}

/// Serializable record of a split (who went where), for reproducible
/// evaluation runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub schema: String,
    pub setting: SplitSetting,
    pub seed: u64,
    pub test_cameras: Vec<usize>,
    pub test_lidar: Vec<usize>,
}

fn collect_train(
    bundle: &SceneBundle,
    test_cams: &[usize],
    test_lidar_idx: &[usize],
) -> SplitScene {
    let is_test_cam = |i: usize| test_cams.contains(&i);
    let mut train_cams = Vec::new();
    let mut train_imgs = Vec::new();
    let mut train_masks = Vec::new();
    let mut source_image = Vec::new();
    for (i, cam) in bundle.spec.cameras.iter().enumerate() {
        if is_test_cam(i) {
            continue;
        }
        let mut c = cam.clone();
        c.image_id = train_cams.len();
        train_cams.push(c);
        train_imgs.push(bundle.images[i].clone());
        train_masks.push(bundle.sky_masks[i].clone());
        source_image.push(i);
    }
    let mut test_idx_sorted = test_lidar_idx.to_vec();
    test_idx_sorted.sort_unstable();
    let mut train_lidar = Vec::new();
    let mut test_lidar = Vec::new();
    let mut cursor = 0;
    for (i, s) in bundle.lidar.iter().enumerate() {
        if cursor < test_idx_sorted.len() && test_idx_sorted[cursor] == i {
            test_lidar.push(*s);
            cursor += 1;
        } else {
            train_lidar.push(*s);
        }
    }
    let mut test_cameras = Vec::new();
    let mut test_images = Vec::new();
    let mut test_masks = Vec::new();
    let mut gains = Vec::new();
    let mut test_source = Vec::new();
    for &i in test_cams {
        test_cameras.push(bundle.spec.cameras[i].clone());
        test_images.push(bundle.images[i].clone());
        test_masks.push(bundle.sky_masks[i].clone());
        gains.push(bundle.spec.exposure_gains[i]);
        test_source.push(i);
    }
    SplitScene {
        train: TrainSet {
            cameras: train_cams,
            images: train_imgs,
            sky_masks: train_masks,
            exclusion_masks: None,
            lidar: train_lidar,
            t_near: bundle.spec.t_near,
            t_far: bundle.spec.t_far,
            norm: bundle.spec.norm(),
            source_image,
        },
        test: TestSet {
            cameras: test_cameras,
            images: test_images,
            sky_masks: test_masks,
            lidar: test_lidar,
            gains,
            source_image: test_source,
        },
    }
}

/// Splits a scene for one of the two evaluation protocols.
pub fn split_scene(
    bundle: &SceneBundle,
    setting: SplitSetting,
    seed: u64,
) -> Result<(SplitScene, SplitRecord)> {
    let (test_cams, test_lidar) = match setting {
        SplitSetting::HeldOutViewpoints { fraction, radius } => {
            if !(0.0..=0.9).contains(&fraction) {
                return Err(Error::config("held-out fraction must be in [0, 0.9]"));
            }
            let n = bundle.spec.cameras.len();
            let k = (fraction * n as Real).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            let mut rng = StdRng::seed_from_u64(seed);
            idx.shuffle(&mut rng);
            let mut test_cams: Vec<usize> = idx.into_iter().take(k).collect();
            test_cams.sort_unstable();
            let test_positions: Vec<Vec3> =
                test_cams.iter().map(|&i| bundle.spec.cameras[i].position).collect();
            let test_lidar: Vec<usize> = bundle
                .lidar
                .iter()
                .enumerate()
                .filter(|(_, s)| {
                    test_positions
                        .iter()
                        .any(|&p| math::norm(math::sub(s.ray.origin, p)) <= radius)
                })
                .map(|(i, _)| i)
                .collect();
            (test_cams, test_lidar)
        }
        SplitSetting::HeldOutBuilding { box_id } => {
            let b = bundle
                .spec
                .boxes
                .get(box_id)
                .ok_or_else(|| Error::input(format!("no box with id {box_id}")))?;
            let test_lidar: Vec<usize> = bundle
                .lidar
                .iter()
                .enumerate()
                .filter(|(_, s)| b.surface_distance(lidar_point(s)) < 1e-6)
                .map(|(i, _)| i)
                .collect();
            (Vec::new(), test_lidar)
        }
    };
    let split = collect_train(bundle, &test_cams, &test_lidar);
    let record = SplitRecord {
        schema: SPLIT_SCHEMA.to_string(),
        setting,
        seed,
        test_cameras: test_cams,
        test_lidar,
    };
    Ok((split, record))
}

// ---------------------------------------------------------------------------
// Analytic oracle field
// ---------------------------------------------------------------------------

/// A density field that is an exact step at scene surfaces: constant
/// density inside geometry, zero outside. The reference "perfect" field for
/// metric oracles.
pub struct AnalyticSceneField<'a> {
    pub spec: &'a SceneSpec,
    pub density: Real,
}

impl<'a> AnalyticSceneField<'a> {
    pub fn new(spec: &'a SceneSpec) -> Self {
        AnalyticSceneField { spec, density: 500.0 }
    }

    fn occupied(&self, p: Vec3) -> Option<[Real; 3]> {
        if p[2] <= self.spec.ground_height
            && p[0] >= self.spec.bounds_min[0]
            && p[0] <= self.spec.bounds_max[0]
            && p[1] >= self.spec.bounds_min[1]
            && p[1] <= self.spec.bounds_max[1]
        {
            return Some(self.spec.ground_rgb);
        }
        self.spec.boxes.iter().find(|b| b.contains(p)).map(|b| b.rgb)
    }
}

impl DensityField for AnalyticSceneField<'_> {
    fn density_radiance(&self, points: &[Vec3], _dir: Vec3) -> (Vec<Real>, Vec<[Real; 3]>) {
        let mut sigma = Vec::with_capacity(points.len());
        let mut rgb = Vec::with_capacity(points.len());
        for &p in points {
            match self.occupied(p) {
                Some(c) => {
                    sigma.push(self.density);
                    rgb.push(c);
                }
                None => {
                    sigma.push(0.0);
                    rgb.push([0.5; 3]);
                }
            }
        }
        (sigma, rgb)
    }

    fn sky(&self, dir: Vec3) -> [Real; 3] {
        self.spec.sky.color(dir)
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

fn look_at(position: Vec3, target: Vec3) -> [[Real; 3]; 3] {
    let f = math::normalize(math::sub(target, position));
    let up = if f[2].abs() > 0.99 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let r = math::normalize(cross(f, up));
    let d = cross(f, r);
    // columns are the camera axes (right, down, forward) in world frame
    [
        [r[0], d[0], f[0]],
        [r[1], d[1], f[1]],
        [r[2], d[2], f[2]],
    ]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Log-symmetric per-channel gains in [0.8, 1.25]: antithetic pairs keep the
/// per-channel geometric mean at exactly one, and camera 0 is the identity
/// anchor.
fn exposure_gain_set(rng: &mut StdRng, count: usize) -> Vec<[[Real; 3]; 3]> {
    let mut gains = vec![[[0.0; 3]; 3]; count];
    let ident = |m: &mut [[Real; 3]; 3]| {
        for i in 0..3 {
            m[i][i] = 1.0;
        }
    };
    ident(&mut gains[0]);
    let mut i = 1;
    while i < count {
        if i + 1 < count {
            for c in 0..3 {
                let g: Real = rng.gen_range(0.8..1.25);
                gains[i][c][c] = g;
                gains[i + 1][c][c] = 1.0 / g;
            }
            i += 2;
        } else {
            ident(&mut gains[i]);
            i += 1;
        }
    }
    gains
}

/// Options for the procedural builders.
#[derive(Debug, Clone)]
pub struct SceneBuild {
    pub seed: u64,
    pub camera_count: usize,
    pub resolution: u32,
    pub lidar_azimuths: usize,
}

impl Default for SceneBuild {
    fn default() -> Self {
        SceneBuild { seed: 1, camera_count: 10, resolution: 64, lidar_azimuths: 220 }
    }
}

fn walking_cameras(build: &SceneBuild, track_y: Real, height: Real, focal_frac: Real) -> Vec<Camera> {
    let n = build.camera_count;
    (0..n)
        .map(|i| {
            let f = if n > 1 { i as Real / (n - 1) as Real } else { 0.5 };
            let x = -4.5 + 9.0 * f;
            let position = [x, track_y, height];
            // look across the street, slightly upward so the sky is in frame
            let target = [x * 0.35, 3.0, height + 2.2];
            Camera {
                rotation: look_at(position, target),
                position,
                focal: focal_frac * build.resolution as Real,
                width: build.resolution,
                height: build.resolution,
                image_id: i,
            }
        })
        .collect()
}

/// The default synthetic scene: a ground plane, a compact street of boxes
/// closed off by a back wall, walking-path cameras with varied exposure,
/// and a lidar sweep from the camera positions. Roughly a third of the
/// camera pixels see sky.
///
/// The layout keeps every surface at least one meter from all emitters
/// (so `t_near = 1` is safe) and under ~15 m away, which keeps the
/// log-spaced quadrature bins comfortably below the lidar accuracy
/// threshold at the default sample counts.
pub fn default_scene(build: &SceneBuild) -> SceneSpec {
    let mut rng = StdRng::seed_from_u64(build.seed);
    let cameras = walking_cameras(build, -5.0, 1.6, 0.5);
    let origins: Vec<Vec3> = cameras.iter().map(|c| c.position).collect();
    let boxes = vec![
        // street front
        BoxSpec { min: [-5.5, 1.5, 0.0], max: [-2.5, 4.5, 3.6], rgb: [0.55, 0.18, 0.12] },
        BoxSpec { min: [-1.0, 2.0, 0.0], max: [2.0, 5.0, 2.6], rgb: [0.15, 0.35, 0.55] },
        BoxSpec { min: [3.0, 1.5, 0.0], max: [5.5, 4.0, 4.2], rgb: [0.45, 0.42, 0.14] },
        // back wall: closes the horizon so every sub-horizon camera ray
        // terminates within the integration bounds
        BoxSpec { min: [-8.0, 6.5, 0.0], max: [8.0, 8.0, 5.0], rgb: [0.42, 0.3, 0.25] },
    ];
    let gains = exposure_gain_set(&mut rng, cameras.len());
    SceneSpec {
        schema: SCENE_SCHEMA.to_string(),
        seed: build.seed,
        t_near: 1.0,
        t_far: 20.0,
        bounds_min: [-8.25, -8.25, -0.5],
        bounds_max: [8.25, 8.25, 7.0],
        ground_height: 0.0,
        ground_rgb: [0.30, 0.30, 0.32],
        boxes,
        sky: SkyModel { horizon: [0.62, 0.64, 0.70], zenith: [0.22, 0.38, 0.66] },
        cameras,
        exposure_gains: gains,
        lidar: LidarPattern {
            origins,
            elevations_deg: (0..16).map(|i| -15.0 + 2.0 * i as Real).collect(),
            azimuth_count: build.lidar_azimuths,
            max_range: 10.0,
        },
        nonlinear_gamma: None,
    }
}

/// Minimal scene: one box on a finite ground patch.
pub fn one_box_scene(build: &SceneBuild) -> SceneSpec {
    let mut rng = StdRng::seed_from_u64(build.seed);
    let mut spec = default_scene(build);
    spec.boxes = vec![BoxSpec { min: [-1.8, 2.0, 0.0], max: [1.8, 5.2, 2.8], rgb: [0.5, 0.25, 0.15] }];
    spec.exposure_gains = exposure_gain_set(&mut rng, spec.cameras.len());
    spec
}

// ---------------------------------------------------------------------------
// Disk format
// ---------------------------------------------------------------------------

fn image_name(i: usize) -> String {
    format!("image_{i:03}.ppm")
}

fn mask_name(i: usize) -> String {
    format!("mask_{i:03}.pgm")
}

/// Writes a bundle directory: spec.json, PPM images, PGM sky masks,
/// lidar.ply, and a manifest.json with content hashes.
pub fn write_bundle(dir: &Path, bundle: &SceneBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(&bundle.spec)?)?;
    files.push("spec.json".to_string());
    for (i, img) in bundle.images.iter().enumerate() {
        let name = image_name(i);
        io::write_ppm(&dir.join(&name), img)?;
        files.push(name);
    }
    for (i, mask) in bundle.sky_masks.iter().enumerate() {
        let name = mask_name(i);
        io::write_mask_pgm(&dir.join(&name), mask)?;
        files.push(name);
    }
    io::write_lidar_ply(&dir.join("lidar.ply"), &bundle.lidar)?;
    files.push("lidar.ply".to_string());

    let mut manifest = serde_json::Map::new();
    manifest.insert("schema".into(), "radfield.manifest/1".into());
    let mut hashes = serde_json::Map::new();
    for f in &files {
        hashes.insert(f.clone(), io::hash_file(&dir.join(f))?.into());
    }
    manifest.insert("files".into(), serde_json::Value::Object(hashes));
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(manifest))?,
    )?;
    Ok(())
}

/// Reads a bundle directory back. Image pixel values are the 8-bit
/// quantized ones, matching what any consumer of the directory sees.
pub fn read_bundle(dir: &Path) -> Result<SceneBundle> {
    let spec: SceneSpec = serde_json::from_str(&std::fs::read_to_string(dir.join("spec.json"))?)?;
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.cameras.len());
    let mut masks = Vec::with_capacity(spec.cameras.len());
    for i in 0..spec.cameras.len() {
        images.push(io::read_ppm(&dir.join(image_name(i)))?);
        masks.push(io::read_mask_pgm(&dir.join(mask_name(i)))?);
    }
    let lidar = io::read_lidar_ply(&dir.join("lidar.ply"))?;
    Ok(SceneBundle { spec, images, sky_masks: masks, lidar })
}

impl SceneBundle {
    /// Training view over the whole bundle (no held-out data).
    pub fn full_train_set(&self) -> TrainSet {
        collect_train(self, &[], &[]).train
    }
}
