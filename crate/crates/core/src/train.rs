//! The optimization loop: Adam with a warmup-then-decay learning rate, mixed
//! camera/lidar ray batches, divergence detection, resumable checkpoints,
//! and test-time exposure-code fitting against frozen scene parameters.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::field::{ExposureMode, FieldConfig, FieldParams, ParamSet};
use crate::geometry::pixel_ray;
use crate::io::{ImageRgb, MaskImage};
use crate::losses::{
    epsilon_at, total_loss_and_grads, BatchRay, EpsilonSchedule, LossOptions,
    LossWeights, PreparedBatch, RaySupervision,
};
use crate::math::{mix_seed, Real, Tensor};
use crate::render::sample_stratified;
use crate::synth::TrainSet;
use crate::Result;

/// Everything the training loop needs to know.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning-rate warmup length, epochs.
    pub warmup_epochs: usize,
    /// Main stage length, epochs. Total training = warmup + main.
    pub main_epochs: usize,
    pub lr_warm_start: Real,
    pub lr_peak: Real,
    /// Per-epoch exponential decay after warmup.
    pub lr_decay: Real,
    pub batch_rays: usize,
    /// Fraction of each batch drawn from the lidar sweep.
    pub lidar_fraction: Real,
    pub seed: u64,
    pub samples_per_ray: usize,
    pub schedule: EpsilonSchedule,
    pub exposure_mode: ExposureMode,
    pub loss_weights: LossWeights,
    /// Sky composited through residual transmittance.
    pub residual_sky: bool,
    pub field: FieldConfig,
    /// Checkpoint cadence in epochs (0 = final checkpoint only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 50,
            main_epochs: 500,
            lr_warm_start: 5e-4,
            lr_peak: 5e-3,
            lr_decay: 0.98,
            batch_rays: 2048,
            lidar_fraction: 0.5,
            seed: 1,
            samples_per_ray: 256,
            schedule: EpsilonSchedule::default(),
            exposure_mode: ExposureMode::Affine,
            loss_weights: LossWeights::default(),
            residual_sky: true,
            field: FieldConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.main_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_warm_start > 0.0 && self.lr_peak > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::config("learning rates and decay must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lidar_fraction) {
            return Err(Error::config("lidar_fraction must be in [0, 1]"));
        }
        if self.batch_rays == 0 || self.samples_per_ray < 2 {
            return Err(Error::config("batch_rays and samples_per_ray must be positive"));
        }
        self.schedule.validate()?;
        self.field.validate()?;
        Ok(())
    }
}

/// Two-stage learning rate: linear warmup from `lr_warm_start` to `lr_peak`
/// over the warmup epochs, then exponential decay. Continuous at the
/// boundary.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Real {
    if epoch <= config.warmup_epochs {
        if config.warmup_epochs == 0 {
            return config.lr_peak;
        }
        let f = epoch as Real / config.warmup_epochs as Real;
        config.lr_warm_start + (config.lr_peak - config.lr_warm_start) * f
    } else {
        config.lr_peak * config.lr_decay.powi((epoch - config.warmup_epochs) as i32)
    }
}

/// Adam first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

pub const ADAM_BETA1: Real = 0.9;
pub const ADAM_BETA2: Real = 0.999;
pub const ADAM_EPS: Real = 1e-8;

impl AdamState {
    pub fn new(params: &FieldParams) -> Self {
        AdamState { m: params.set.zeros_like(), v: params.set.zeros_like(), step: 0 }
    }

    /// Tensor sections stored in checkpoints, prefixed `adam.m.` / `adam.v.`.
    pub fn to_extras(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, t) in self.m.iter() {
            out.push((format!("adam.m.{name}"), t.clone()));
        }
        for (name, t) in self.v.iter() {
            out.push((format!("adam.v.{name}"), t.clone()));
        }
        out
    }

    /// Rebuilds optimizer state from checkpoint extras.
    pub fn from_extras(
        params: &FieldParams,
        extras: &[(String, Tensor)],
        step: u64,
    ) -> Result<Self> {
        let mut state = AdamState::new(params);
        state.step = step;
        for (name, t) in extras {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                *state.m.get_mut(rest) = t.clone();
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                *state.v.get_mut(rest) = t.clone();
            }
        }
        Ok(state)
    }
}

/// One Adam update. Missing gradients are treated as zero, so moments decay
/// for untouched parameters; the update order is the slot order.
pub fn adam_step(
    params: &mut FieldParams,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    rate: Real,
) -> Result<()> {
    if grads.len() != params.set.len() {
        return Err(Error::state("gradient slot count does not match parameters"));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for slot in 0..grads.len() {
        let g_tensor = grads[slot].as_ref();
        if let Some(g) = g_tensor {
            if !g.same_shape(params.set.by_slot(slot)) {
                return Err(Error::state(format!(
                    "gradient shape mismatch for {}",
                    params.set.name_of(slot)
                )));
            }
        }
        let p = params.set.by_slot_mut(slot);
        let m = state.m.by_slot_mut(slot);
        let v = state.v.by_slot_mut(slot);
        for i in 0..p.data.len() {
            let g = g_tensor.map(|t| t.data[i]).unwrap_or(0.0);
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * g;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m.data[i] / bc1;
            let v_hat = v.data[i] / bc2;
            p.data[i] -= rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Draws a mixed ray batch: `floor(lidar_fraction * batch)` lidar samples,
/// the rest camera rays with target color, sky flag, and image id. Pixels
/// under an exclusion mask are skipped.
pub fn make_batch(
    scene: &TrainSet,
    config: &TrainConfig,
    rng: &mut StdRng,
) -> Result<PreparedBatch> {
    if scene.cameras.is_empty() && scene.lidar.is_empty() {
        return Err(Error::input("cannot sample a batch from an empty scene"));
    }
    let mut lidar_n = (config.lidar_fraction * config.batch_rays as Real).floor() as usize;
    let mut cam_n = config.batch_rays - lidar_n;
    if scene.lidar.is_empty() {
        cam_n += lidar_n;
        lidar_n = 0;
    }
    if scene.cameras.is_empty() {
        lidar_n += cam_n;
        cam_n = 0;
    }
    let mut rays = Vec::with_capacity(config.batch_rays);
    for _ in 0..cam_n {
        // rejection-sample around excluded pixels
        let (image_id, px, py) = loop {
            let image_id = rng.gen_range(0..scene.cameras.len());
            let cam = &scene.cameras[image_id];
            let px = rng.gen_range(0..cam.width);
            let py = rng.gen_range(0..cam.height);
            let excluded = scene
                .exclusion_masks
                .as_ref()
                .map(|m| m[image_id].at(px, py))
                .unwrap_or(false);
            if !excluded {
                break (image_id, px, py);
            }
        };
        let cam = &scene.cameras[image_id];
        let ray = pixel_ray(cam, px, py, (scene.t_near, scene.t_far))?;
        let t = sample_stratified(&ray, config.samples_per_ray, rng)?;
        rays.push(BatchRay {
            ray,
            t,
            supervision: RaySupervision::Camera {
                image_id,
                target: scene.images[image_id].at(px, py),
                is_sky: scene.sky_masks[image_id].at(px, py),
            },
        });
    }
    for _ in 0..lidar_n {
        let s = scene.lidar[rng.gen_range(0..scene.lidar.len())];
        let t = sample_stratified(&s.ray, config.samples_per_ray, rng)?;
        rays.push(BatchRay { ray: s.ray, t, supervision: RaySupervision::Lidar { z: s.z } });
    }
    Ok(PreparedBatch { rays })
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: Real,
    pub epsilon: Real,
    pub rgb: Real,
    pub seg: Real,
    pub depth: Real,
    pub near: Real,
    pub empty: Real,
    pub total: Real,
}

/// Result of a training run.
pub struct TrainOutput {
    pub params: FieldParams,
    pub adam: AdamState,
    pub log: Vec<EpochRecord>,
}

/// Called at the end of every epoch; gets the completed-epoch count, the
/// current state, and the epoch's mean losses.
pub type EpochObserver<'a> =
    dyn FnMut(usize, &FieldParams, &AdamState, &EpochRecord) -> Result<()> + 'a;

/// Trains from scratch.
pub fn train(scene: &TrainSet, config: &TrainConfig) -> Result<TrainOutput> {
    train_with(scene, config, None, &mut |_, _, _, _| Ok(()))
}

/// Trains with an optional resume state and an epoch observer (used by the
/// command-line pipeline to write checkpoints and log lines).
///
/// Determinism: batches derive their RNG stream from
/// `(seed, epoch, step)`, so a resumed run replays exactly the stream an
/// uninterrupted run would see.
pub fn train_with(
    scene: &TrainSet,
    config: &TrainConfig,
    resume: Option<(FieldParams, AdamState, usize)>,
    observer: &mut EpochObserver,
) -> Result<TrainOutput> {
    config.validate()?;
    if scene.cameras.is_empty() {
        return Err(Error::input("training requires at least one camera image"));
    }
    let (mut params, mut adam, start_epoch) = match resume {
        Some((p, a, e)) => (p, a, e),
        None => {
            let params = FieldParams::init(
                FieldConfig { exposure_mode: config.exposure_mode, ..config.field.clone() },
                scene.norm,
                scene.cameras.len(),
                mix_seed(&[config.seed, 0xF1E1D]),
            )?;
            let adam = AdamState::new(&params);
            (params, adam, 0)
        }
    };

    let image_rays: usize = scene
        .images
        .iter()
        .map(|img| (img.width * img.height) as usize)
        .sum();
    let steps_per_epoch = (image_rays / config.batch_rays).max(1);
    let mut log = Vec::new();

    for epoch in start_epoch..config.total_epochs() {
        let lr = lr_at(config, epoch);
        let opts = LossOptions {
            weights: config.loss_weights,
            epsilon: epsilon_at(&config.schedule, epoch),
            residual_sky: config.residual_sky,
        };
        let mut sums = [0.0 as Real; 6];
        for step in 0..steps_per_epoch {
            let mut rng =
                StdRng::seed_from_u64(mix_seed(&[config.seed, epoch as u64 + 1, step as u64 + 1]));
            let batch = make_batch(scene, config, &mut rng)?;
            let out = total_loss_and_grads(&params, &batch, &opts, true)?;
            if let Some(term) = out.report.non_finite_term() {
                return Err(Error::Diverged { term, epoch });
            }
            adam_step(&mut params, &out.grads, &mut adam, lr)?;
            for (acc, v) in sums.iter_mut().zip([
                out.report.rgb,
                out.report.seg,
                out.report.depth,
                out.report.near,
                out.report.empty,
                out.report.total,
            ]) {
                *acc += v;
            }
        }
        let n = steps_per_epoch as Real;
        let record = EpochRecord {
            epoch,
            lr,
            epsilon: opts.epsilon,
            rgb: sums[0] / n,
            seg: sums[1] / n,
            depth: sums[2] / n,
            near: sums[3] / n,
            empty: sums[4] / n,
            total: sums[5] / n,
        };
        observer(epoch + 1, &params, &adam, &record)?;
        log.push(record);
    }
    Ok(TrainOutput { params, adam, log })
}

const FIT_STEPS: usize = 100;
const FIT_LR: Real = 1e-2;

fn fit_adam(dim: usize, mut grad_of: impl FnMut(&[Real]) -> Result<Vec<Real>>) -> Result<Vec<Real>> {
    let mut code = vec![0.0; dim];
    let mut m = vec![0.0; dim];
    let mut v = vec![0.0; dim];
    for step in 1..=FIT_STEPS {
        let grad = grad_of(&code)?;
        let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
        for i in 0..dim {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            code[i] -= FIT_LR * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(code)
}

/// Fits a fresh exposure code for one test image on its masked pixels
/// (typically the left half), holding every scene parameter fixed. Returns
/// the fitted code; the caller renders with it afterwards.
///
/// The scene is rendered once up front: in affine mode the pixel color is
/// exactly linear in the decoded matrix, and in direct mode only the color
/// branch depends on the code, so each of the 100 Adam steps is cheap.
///
/// Errors when the model was trained with exposure off.
pub fn fit_test_exposure(
    params: &FieldParams,
    camera: &crate::geometry::Camera,
    image: &ImageRgb,
    mask: &MaskImage,
    t_bounds: (Real, Real),
    samples_per_ray: usize,
    seed: u64,
) -> Result<Vec<Real>> {
    use crate::render::{compute_weights, composite_decomposed, RaySamples};
    use rayon::prelude::*;

    if params.config.exposure_mode == ExposureMode::Off {
        return Err(Error::state("test-time exposure fitting requires an exposure mode"));
    }
    let mut pixels = Vec::new();
    for py in 0..camera.height {
        for px in 0..camera.width {
            if mask.at(px, py) {
                pixels.push((px, py));
            }
        }
    }
    if pixels.is_empty() {
        return Err(Error::input("exposure fit mask selects no pixels"));
    }
    let dim = params.config.exposure_dim;

    match params.config.exposure_mode {
        ExposureMode::Affine => {
            // cache (q, sky term, target) per pixel; color(beta) = Γ(β)·q + s
            let cached: Vec<([Real; 3], [Real; 3], [Real; 3])> = pixels
                .par_iter()
                .map(|&(px, py)| {
                    let ray = pixel_ray(camera, px, py, t_bounds).expect("pixel in range");
                    let mut rng = crate::render::pixel_stream(seed, camera.image_id, px, py);
                    let samples = RaySamples::from_field(params, &ray, samples_per_ray, &mut rng)
                        .expect("ray sampling");
                    let sky = params.eval_sky(ray.direction);
                    let (q, s) = composite_decomposed(&samples, sky, true);
                    (q, s, image.at(px, py))
                })
                .collect();
            let wd = params.set.get("exposure.decoder.w").clone();
            let bd = params.set.get("exposure.decoder.b").clone();
            let n = cached.len() as Real;
            fit_adam(dim, |code| {
                let mut gamma = [[0.0 as Real; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        let o = i * 3 + j;
                        let mut acc = bd.data[o] + if i == j { 1.0 } else { 0.0 };
                        for (k, &c) in code.iter().enumerate() {
                            acc += wd.at(o, k) * c;
                        }
                        gamma[i][j] = acc;
                    }
                }
                let mut d_gamma = [[0.0 as Real; 3]; 3];
                for (q, s, y) in &cached {
                    let mut resid = [0.0; 3];
                    for i in 0..3 {
                        resid[i] =
                            gamma[i][0] * q[0] + gamma[i][1] * q[1] + gamma[i][2] * q[2] + s[i]
                                - y[i];
                    }
                    for i in 0..3 {
                        for j in 0..3 {
                            d_gamma[i][j] += 2.0 * resid[i] * q[j] / n;
                        }
                    }
                }
                let mut grad = vec![0.0; dim];
                for (k, g) in grad.iter_mut().enumerate() {
                    for i in 0..3 {
                        for j in 0..3 {
                            *g += d_gamma[i][j] * wd.at(i * 3 + j, k);
                        }
                    }
                }
                Ok(grad)
            })
        }
        ExposureMode::Direct => {
            // cache pruned trunk features and weights; only the color branch
            // re-runs per step
            let enc_dir = crate::geometry::encoded_len(crate::geometry::DIR_FREQS);
            let cached: Vec<crate::losses::ColorFitRay> = pixels
                .par_iter()
                .map(|&(px, py)| {
                    let ray = pixel_ray(camera, px, py, t_bounds).expect("pixel in range");
                    let mut rng = crate::render::pixel_stream(seed, camera.image_id, px, py);
                    let t = sample_stratified(&ray, samples_per_ray, &mut rng)
                        .expect("ray sampling");
                    let points: Vec<_> = t.iter().map(|&ti| ray.point_at(ti)).collect();
                    let (z, sigma) = params.features_density_ray(&points);
                    let (weights, _) =
                        compute_weights(&t, &sigma, ray.t_far, None).expect("weights");
                    let opacity: Real = weights.iter().sum();
                    // samples below this weight cannot move the pixel color
                    // noticeably; dropping them keeps the fit graph small
                    let kept: Vec<usize> =
                        (0..t.len()).filter(|&k| weights[k] > 1e-6).collect();
                    let mut features = Tensor::zeros(kept.len(), z.cols);
                    let mut dir_rows = Tensor::zeros(kept.len(), enc_dir);
                    let mut enc = vec![0.0; enc_dir];
                    crate::geometry::encode_into(ray.direction, crate::geometry::DIR_FREQS, &mut enc);
                    for (row, &k) in kept.iter().enumerate() {
                        features.row_mut(row).copy_from_slice(z.row(k));
                        dir_rows.row_mut(row).copy_from_slice(&enc);
                    }
                    let sky = params.eval_sky(ray.direction);
                    let sky_term = crate::math::scale(sky, 1.0 - opacity);
                    crate::losses::ColorFitRay {
                        features,
                        dir_enc: dir_rows,
                        weights: kept.iter().map(|&k| weights[k]).collect(),
                        sky_term,
                        target: image.at(px, py),
                    }
                })
                .collect();
            fit_adam(dim, |code| {
                Ok(crate::losses::direct_fit_grad(params, &cached, code)?.1)
            })
        }
        ExposureMode::Off => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_scene, generate, SceneBuild};

    fn small_scene() -> TrainSet {
        let build = SceneBuild { seed: 5, camera_count: 4, resolution: 16, lidar_azimuths: 24 };
        generate(default_scene(&build)).unwrap().full_train_set()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            warmup_epochs: 1,
            main_epochs: 2,
            batch_rays: 24,
            samples_per_ray: 16,
            field: FieldConfig::tiny(8),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_continuity() {
        let c = TrainConfig::default();
        assert!((lr_at(&c, 0) - 5e-4).abs() < 1e-12);
        assert!((lr_at(&c, 50) - 5e-3).abs() < 1e-12);
        assert!((lr_at(&c, 51) - 5e-3 * 0.98).abs() < 1e-12);
        let e150 = lr_at(&c, 150);
        let expect = 5e-3 * (0.98 as Real).powi(100);
        assert!((e150 - expect).abs() < 1e-12);
        assert!((e150 - 6.62e-4).abs() < 5e-6);
    }

    #[test]
    fn adam_zero_gradient_leaves_fresh_params_unchanged() {
        let mut p =
            FieldParams::init(FieldConfig::tiny(4), crate::field::SceneNorm::identity(), 1, 7)
                .unwrap();
        let before = p.set.get("trunk.0.w").data.clone();
        let mut adam = AdamState::new(&p);
        let grads = vec![None; p.set.len()];
        adam_step(&mut p, &grads, &mut adam, 1e-2).unwrap();
        assert_eq!(p.set.get("trunk.0.w").data, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p =
            FieldParams::init(FieldConfig::tiny(4), crate::field::SceneNorm::identity(), 1, 7)
                .unwrap();
        let before = p.set.get("density.b").data[0];
        let mut adam = AdamState::new(&p);
        let mut grads: Vec<Option<Tensor>> = vec![None; p.set.len()];
        let slot = p.set.slot("density.b");
        grads[slot] = Some(Tensor::from_vec(1, 1, vec![1.0]));
        adam_step(&mut p, &grads, &mut adam, 1e-2).unwrap();
        let delta = before - p.set.get("density.b").data[0];
        // bias correction makes m_hat/sqrt(v_hat) = 1 on the first step
        assert!((delta - 1e-2).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn adam_matches_scalar_reference_bitwise() {
        // independent scalar Adam over 10 steps with a synthetic gradient
        let mut p =
            FieldParams::init(FieldConfig::tiny(4), crate::field::SceneNorm::identity(), 1, 7)
                .unwrap();
        let slot = p.set.slot("density.b");
        let mut adam = AdamState::new(&p);
        let mut reference = p.set.get("density.b").data[0];
        let (mut m, mut v) = (0.0 as Real, 0.0 as Real);
        for step in 1..=10u64 {
            let g = 0.3 + 0.1 * step as Real;
            let mut grads: Vec<Option<Tensor>> = vec![None; p.set.len()];
            grads[slot] = Some(Tensor::from_vec(1, 1, vec![g]));
            adam_step(&mut p, &grads, &mut adam, 2e-3).unwrap();

            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(step as i32));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(step as i32));
            reference -= 2e-3 * m_hat / (v_hat.sqrt() + ADAM_EPS);
            assert_eq!(p.set.get("density.b").data[0], reference, "step {step}");
        }
    }

    #[test]
    fn batch_composition_follows_lidar_fraction() {
        let scene = small_scene();
        let mut config = tiny_config();
        config.batch_rays = 40;

        config.lidar_fraction = 0.0;
        let mut rng = StdRng::seed_from_u64(1);
        let b = make_batch(&scene, &config, &mut rng).unwrap();
        assert_eq!(b.camera_count(), 40);
        assert_eq!(b.lidar_count(), 0);

        config.lidar_fraction = 1.0;
        let mut rng = StdRng::seed_from_u64(1);
        let b = make_batch(&scene, &config, &mut rng).unwrap();
        assert_eq!(b.camera_count(), 0);
        assert_eq!(b.lidar_count(), 40);

        config.lidar_fraction = 0.3;
        let mut rng = StdRng::seed_from_u64(1);
        let b = make_batch(&scene, &config, &mut rng).unwrap();
        assert_eq!(b.lidar_count(), 12);
        assert_eq!(b.camera_count(), 28);
    }

    #[test]
    fn batches_are_deterministic_under_seed() {
        let scene = small_scene();
        let config = tiny_config();
        let mut r1 = StdRng::seed_from_u64(123);
        let mut r2 = StdRng::seed_from_u64(123);
        let b1 = make_batch(&scene, &config, &mut r1).unwrap();
        let b2 = make_batch(&scene, &config, &mut r2).unwrap();
        assert_eq!(b1.rays.len(), b2.rays.len());
        for (a, b) in b1.rays.iter().zip(&b2.rays) {
            assert_eq!(a.ray.origin, b.ray.origin);
            assert_eq!(a.ray.direction, b.ray.direction);
            assert_eq!(a.t, b.t);
        }
    }

    #[test]
    fn exclusion_masks_are_respected() {
        let mut scene = small_scene();
        // exclude everything except pixel (0, 0) in every image
        let masks: Vec<MaskImage> = scene
            .cameras
            .iter()
            .map(|c| {
                let mut m = MaskImage::new(c.width, c.height);
                for v in m.data.iter_mut() {
                    *v = true;
                }
                m.set(0, 0, false);
                m
            })
            .collect();
        scene.exclusion_masks = Some(masks);
        let config = tiny_config();
        let mut rng = StdRng::seed_from_u64(3);
        let b = make_batch(&scene, &config, &mut rng).unwrap();
        for ray in &b.rays {
            if let RaySupervision::Camera { image_id, .. } = ray.supervision {
                let cam = &scene.cameras[image_id];
                let expect = pixel_ray(cam, 0, 0, (scene.t_near, scene.t_far)).unwrap();
                assert_eq!(ray.ray.direction, expect.direction);
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_params() {
        let scene = small_scene();
        let mut config = tiny_config();
        config.warmup_epochs = 0;
        config.main_epochs = 0;
        let out = train(&scene, &config).unwrap();
        assert!(out.log.is_empty());
        let fresh = FieldParams::init(
            FieldConfig { exposure_mode: config.exposure_mode, ..config.field.clone() },
            scene.norm,
            scene.cameras.len(),
            mix_seed(&[config.seed, 0xF1E1D]),
        )
        .unwrap();
        for ((_, a), (_, b)) in out.params.set.iter().zip(fresh.set.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn same_seed_gives_identical_loss_curves_and_params() {
        let scene = small_scene();
        let config = tiny_config();
        let o1 = train(&scene, &config).unwrap();
        let o2 = train(&scene, &config).unwrap();
        assert_eq!(o1.log.len(), o2.log.len());
        for (a, b) in o1.log.iter().zip(&o2.log) {
            assert_eq!(a.total, b.total);
        }
        for ((_, a), (_, b)) in o1.params.set.iter().zip(o2.params.set.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run_bitwise() {
        let scene = small_scene();
        let config = tiny_config(); // 3 epochs total
        let full = train(&scene, &config).unwrap();

        // stop after epoch 2, then resume
        let mut snapshot: Option<(FieldParams, AdamState)> = None;
        let partial = train_with(&scene, &config, None, &mut |done, p, a, _| {
            if done == 2 {
                snapshot = Some((p.clone(), a.clone()));
            }
            Ok(())
        })
        .unwrap();
        drop(partial);
        let (p, a) = snapshot.unwrap();
        let resumed = train_with(&scene, &config, Some((p, a, 2)), &mut |_, _, _, _| Ok(()))
            .unwrap();
        for ((_, x), (_, y)) in full.params.set.iter().zip(resumed.params.set.iter()) {
            assert_eq!(x.data, y.data);
        }
        assert_eq!(full.adam.step, resumed.adam.step);
    }

    #[test]
    fn training_reduces_loss_on_tiny_scene() {
        let scene = small_scene();
        let mut config = tiny_config();
        config.warmup_epochs = 2;
        config.main_epochs = 6;
        config.batch_rays = 64;
        config.schedule = EpsilonSchedule::exponential(1.5, 0.9);
        let out = train(&scene, &config).unwrap();
        let first = out.log.first().unwrap().total;
        let last = out.log.last().unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    /// The affine fit uses a closed-form gradient and the direct fit a
    /// cached color-branch graph; both must agree with the full-graph route
    /// that re-evaluates everything.
    #[test]
    fn exposure_fit_gradients_match_full_graph_route() {
        use crate::losses::{exposure_fit_grad, PreparedBatch};
        use crate::render::sample_stratified;

        for mode in [ExposureMode::Affine, ExposureMode::Direct] {
            let scene = small_scene();
            let mut config = tiny_config();
            config.exposure_mode = mode;
            config.warmup_epochs = 0;
            config.main_epochs = 0;
            let mut out = train(&scene, &config).unwrap();
            {
                use rand::Rng;
                let mut rng = StdRng::seed_from_u64(55);
                for v in &mut out.params.set.get_mut("exposure.decoder.w").data {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
            let params = &out.params;
            let cam = &scene.cameras[0];
            let mut mask = MaskImage::new(cam.width, cam.height);
            for py in 0..cam.height {
                for px in 0..4 {
                    mask.set(px, py, true);
                }
            }
            let seed = 99;
            // the full-graph route over the same pixels and sample draws
            let mut rays = Vec::new();
            for py in 0..cam.height {
                for px in 0..4u32 {
                    let ray = pixel_ray(cam, px, py, (scene.t_near, scene.t_far)).unwrap();
                    let mut rng = crate::render::pixel_stream(seed, cam.image_id, px, py);
                    let t = sample_stratified(&ray, 24, &mut rng).unwrap();
                    rays.push(BatchRay {
                        ray,
                        t,
                        supervision: RaySupervision::Camera {
                            image_id: 0,
                            target: scene.images[0].at(px, py),
                            is_sky: false,
                        },
                    });
                }
            }
            let batch = PreparedBatch { rays };
            let code = vec![0.07, -0.04, 0.02, 0.11];
            let (_, grad_full) = exposure_fit_grad(params, &batch, &code, true).unwrap();

            let grad_fast: Vec<Real> = match mode {
                ExposureMode::Affine => {
                    // reproduce the closed-form path's gradient at `code`
                    use crate::render::{composite_decomposed, RaySamples};
                    let mut cached = Vec::new();
                    for py in 0..cam.height {
                        for px in 0..4u32 {
                            let ray =
                                pixel_ray(cam, px, py, (scene.t_near, scene.t_far)).unwrap();
                            let mut rng =
                                crate::render::pixel_stream(seed, cam.image_id, px, py);
                            let samples =
                                RaySamples::from_field(params, &ray, 24, &mut rng).unwrap();
                            let sky = params.eval_sky(ray.direction);
                            let (q, s) = composite_decomposed(&samples, sky, true);
                            cached.push((q, s, scene.images[0].at(px, py)));
                        }
                    }
                    let wd = params.set.get("exposure.decoder.w");
                    let gamma = params.decode_exposure_from_code(&code).matrix;
                    let n = cached.len() as Real;
                    let mut d_gamma = [[0.0 as Real; 3]; 3];
                    for (q, s, y) in &cached {
                        let mut resid = [0.0; 3];
                        for i in 0..3 {
                            resid[i] = gamma[i][0] * q[0]
                                + gamma[i][1] * q[1]
                                + gamma[i][2] * q[2]
                                + s[i]
                                - y[i];
                        }
                        for i in 0..3 {
                            for j in 0..3 {
                                d_gamma[i][j] += 2.0 * resid[i] * q[j] / n;
                            }
                        }
                    }
                    (0..4)
                        .map(|k| {
                            let mut g = 0.0;
                            for i in 0..3 {
                                for j in 0..3 {
                                    g += d_gamma[i][j] * wd.at(i * 3 + j, k);
                                }
                            }
                            g
                        })
                        .collect()
                }
                ExposureMode::Direct => {
                    use crate::losses::{direct_fit_grad, ColorFitRay};
                    use crate::render::compute_weights;
                    let enc_dir = crate::geometry::encoded_len(crate::geometry::DIR_FREQS);
                    let mut cached = Vec::new();
                    for py in 0..cam.height {
                        for px in 0..4u32 {
                            let ray =
                                pixel_ray(cam, px, py, (scene.t_near, scene.t_far)).unwrap();
                            let mut rng =
                                crate::render::pixel_stream(seed, cam.image_id, px, py);
                            let t = sample_stratified(&ray, 24, &mut rng).unwrap();
                            let points: Vec<_> =
                                t.iter().map(|&ti| ray.point_at(ti)).collect();
                            let (z, sigma) = params.features_density_ray(&points);
                            let (weights, _) =
                                compute_weights(&t, &sigma, ray.t_far, None).unwrap();
                            let opacity: Real = weights.iter().sum();
                            let mut enc = vec![0.0; enc_dir];
                            crate::geometry::encode_into(
                                ray.direction,
                                crate::geometry::DIR_FREQS,
                                &mut enc,
                            );
                            // keep every sample so the routes agree exactly
                            let mut dir_rows = Tensor::zeros(t.len(), enc_dir);
                            for row in 0..t.len() {
                                dir_rows.row_mut(row).copy_from_slice(&enc);
                            }
                            let sky = params.eval_sky(ray.direction);
                            cached.push(ColorFitRay {
                                features: z,
                                dir_enc: dir_rows,
                                weights,
                                sky_term: crate::math::scale(sky, 1.0 - opacity),
                                target: scene.images[0].at(px, py),
                            });
                        }
                    }
                    direct_fit_grad(params, &cached, &code).unwrap().1
                }
                ExposureMode::Off => unreachable!(),
            };
            for (a, b) in grad_full.iter().zip(&grad_fast) {
                assert!(
                    (a - b).abs() < 1e-9 * a.abs().max(1.0),
                    "{mode:?}: {a} vs {b}"
                );
            }
        }
    }

    /// Self-consistency: a test image rendered from the trained parameters
    /// with the identity exposure is already optimal, so the fitted code
    /// stays near zero and rendering with it changes nothing measurable.
    #[test]
    fn exposure_fit_on_self_rendered_image_stays_at_zero() {
        use crate::eval::{psnr, render_view, EvalConfig};
        use crate::field::ExposureTransform;

        let scene = small_scene();
        let mut config = tiny_config();
        config.warmup_epochs = 2;
        config.main_epochs = 6;
        config.batch_rays = 128;
        config.samples_per_ray = 32;
        let out = train(&scene, &config).unwrap();
        let cam = &scene.cameras[1];
        let cfg = EvalConfig { samples_per_ray: 96, seed: 5, ..EvalConfig::default() };
        let gt = render_view(&out.params, cam, &ExposureTransform::identity(), (scene.t_near, scene.t_far), &cfg)
            .unwrap();
        let mask = MaskImage {
            width: cam.width,
            height: cam.height,
            data: vec![true; (cam.width * cam.height) as usize],
        };
        // decoder must be non-zero for the code to matter at all
        let mut params = out.params.clone();
        {
            use rand::Rng;
            let mut rng = StdRng::seed_from_u64(77);
            for v in &mut params.set.get_mut("exposure.decoder.w").data {
                *v = rng.gen_range(-1.0..1.0);
            }
            // training drifts the decoder bias; zero it so the code-zero
            // transform is the exact identity this test assumes
            params.set.get_mut("exposure.decoder.b").data.fill(0.0);
        }
        let code =
            fit_test_exposure(&params, cam, &gt, &mask, (scene.t_near, scene.t_far), 96, 5)
                .unwrap();
        let gamma = params.decode_exposure_from_code(&code);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gamma.matrix[i][j] - expect).abs() < 0.05,
                    "fitted transform strayed from identity: {:?}",
                    gamma.matrix
                );
            }
        }
        let rendered =
            render_view(&params, cam, &gamma, (scene.t_near, scene.t_far), &cfg).unwrap();
        assert!(psnr(&rendered, &gt).unwrap() > 40.0);
    }

    /// A synthetic per-channel gain applied to a self-rendered image is
    /// recovered by the fit within 0.05 per channel.
    #[test]
    fn exposure_fit_recovers_known_diagonal_gain() {
        use crate::eval::{render_view, EvalConfig};
        use crate::field::ExposureTransform;

        let scene = small_scene();
        let mut config = tiny_config();
        config.warmup_epochs = 2;
        config.main_epochs = 6;
        config.batch_rays = 128;
        config.samples_per_ray = 32;
        let out = train(&scene, &config).unwrap();
        let mut params = out.params.clone();
        {
            // a decoder whose span contains diagonal gains (training learns
            // such a span on multi-exposure data; here it is set directly)
            let w = params.set.get_mut("exposure.decoder.w");
            w.data.fill(0.0);
            w.set(0, 0, 2.0); // code[0] -> gamma[0][0]
            w.set(4, 1, 2.0); // code[1] -> gamma[1][1]
            w.set(8, 2, 2.0); // code[2] -> gamma[2][2]
            w.set(1, 3, 0.5); // spare direction, off-diagonal
            params.set.get_mut("exposure.decoder.b").data.fill(0.0);
        }
        let cam = &scene.cameras[0];
        let cfg = EvalConfig { samples_per_ray: 96, seed: 9, ..EvalConfig::default() };
        let base = render_view(
            &params,
            cam,
            &ExposureTransform::identity(),
            (scene.t_near, scene.t_far),
            &cfg,
        )
        .unwrap();
        let gain = [1.2, 1.0, 0.9];
        let mut target = base.clone();
        for px in &mut target.data {
            for c in 0..3 {
                px[c] = (px[c] * gain[c]).clamp(0.0, 1.0);
            }
        }
        let mask = MaskImage {
            width: cam.width,
            height: cam.height,
            data: vec![true; (cam.width * cam.height) as usize],
        };
        let before = checkpoint_bytes(&params);
        let code =
            fit_test_exposure(&params, cam, &target, &mask, (scene.t_near, scene.t_far), 96, 9)
                .unwrap();
        // scene parameters are untouched, bitwise
        assert_eq!(before, checkpoint_bytes(&params));
        let gamma = params.decode_exposure_from_code(&code);
        for c in 0..3 {
            assert!(
                (gamma.matrix[c][c] - gain[c]).abs() < 0.05,
                "channel {c}: fitted {} vs gain {}",
                gamma.matrix[c][c],
                gain[c]
            );
        }
    }

    fn checkpoint_bytes(params: &FieldParams) -> Vec<u8> {
        let dir = std::env::temp_dir().join("radfield_fit_freeze");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("p{}.ckpt", std::process::id()));
        let meta = crate::field::CheckpointMeta::new(params);
        crate::field::write_checkpoint(&path, params, &[], &meta).unwrap();
        std::fs::read(&path).unwrap()
    }

    #[test]
    fn divergent_loss_names_term_and_epoch() {
        let scene = small_scene();
        let mut config = tiny_config();
        config.warmup_epochs = 0;
        config.main_epochs = 2;
        // poison one trunk weight so the first forward pass is non-finite
        let mut params = FieldParams::init(
            FieldConfig { exposure_mode: config.exposure_mode, ..config.field.clone() },
            scene.norm,
            scene.cameras.len(),
            1,
        )
        .unwrap();
        params.set.get_mut("trunk.0.w").data[0] = Real::NAN;
        let adam = AdamState::new(&params);
        let err = match train_with(&scene, &config, Some((params, adam, 0)), &mut |_, _, _, _| Ok(())) {
            Err(e) => e,
            Ok(_) => panic!("training should diverge"),
        };
        match err {
            crate::Error::Diverged { term, epoch } => {
                assert_eq!(epoch, 0);
                assert!(!term.is_empty());
            }
            other => panic!("expected divergence error, got {other}"),
        }
    }

    #[test]
    fn exposure_fit_requires_exposure_mode() {
        let scene = small_scene();
        let mut config = tiny_config();
        config.exposure_mode = ExposureMode::Off;
        config.warmup_epochs = 0;
        config.main_epochs = 0;
        let out = train(&scene, &config).unwrap();
        let cam = &scene.cameras[0];
        let mask = MaskImage {
            width: cam.width,
            height: cam.height,
            data: vec![true; (cam.width * cam.height) as usize],
        };
        let err = fit_test_exposure(
            &out.params,
            cam,
            &scene.images[0],
            &mask,
            (scene.t_near, scene.t_far),
            8,
            1,
        );
        assert!(err.is_err());
    }
}
