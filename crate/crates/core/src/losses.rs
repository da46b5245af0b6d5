//! Training objectives: exposure-compensated photometric loss, sky
//! segmentation loss, expected-depth loss, and the line-of-sight pair
//! (near-surface kernel matching plus empty-space suppression) with its
//! annealed margin.
//!
//! Each term exists twice: as a plain function over [`RaySamples`] (the
//! testable contract) and inside the batched tape graph used for training.
//! A unit test pins the two routes to each other.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::field::{ExposureMode, FieldParams, GraphBuilder};
use crate::geometry::Ray;
use crate::math::{Real, Tensor, Vec3, PI};
use crate::render::{deltas_from, expected_depth, RaySamples, RenderedPixel};
use crate::tape::{NodeId, Tape};
use crate::Result;

/// Fixed number of rays per gradient chunk. Chunks are reduced in index
/// order, so results do not depend on the worker count.
const CHUNK_RAYS: usize = 16;

/// Fraction of a Gaussian's mass inside +-3 sigma; the truncated kernel is
/// renormalized by this so it integrates to exactly one.
const THREE_SIGMA_MASS: Real = 0.997_300_203_936_739_8;

/// Truncated-Gaussian line-of-sight kernel: a zero-mean normal with
/// sigma = epsilon/3, truncated to [-epsilon, epsilon] and renormalized to
/// unit mass.
#[derive(Debug, Clone, Copy)]
pub struct LosKernel {
    pub epsilon: Real,
}

impl LosKernel {
    pub fn new(epsilon: Real) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::input("kernel margin epsilon must be positive"));
        }
        Ok(LosKernel { epsilon })
    }

    /// Kernel density at offset `x` from the lidar return.
    pub fn density(&self, x: Real) -> Real {
        if x.abs() > self.epsilon {
            return 0.0;
        }
        let sigma = self.epsilon / 3.0;
        let norm = 1.0 / (sigma * (2.0 * PI).sqrt() * THREE_SIGMA_MASS);
        norm * (-0.5 * (x / sigma) * (x / sigma)).exp()
    }
}

/// Margin decay strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Fixed,
    Stepwise,
    Linear,
    Exponential,
}

/// The margin epsilon as a function of the epoch. Non-increasing, floored
/// at `eps_min`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub kind: ScheduleKind,
    pub eps_start: Real,
    pub eps_min: Real,
    /// Stepwise only: epoch at which the margin drops to `eps_min`.
    pub step_epoch: usize,
    /// Exponential only: per-epoch decay factor.
    pub decay: Real,
    /// Linear only: epoch at which the margin reaches `eps_min`.
    pub end_epoch: usize,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            kind: ScheduleKind::Exponential,
            eps_start: 2.0,
            eps_min: 0.20,
            step_epoch: 50,
            decay: 0.98,
            end_epoch: 550,
        }
    }
}

impl EpsilonSchedule {
    pub fn fixed(eps: Real) -> Self {
        EpsilonSchedule { kind: ScheduleKind::Fixed, eps_start: eps, ..Default::default() }
    }

    pub fn exponential(eps_start: Real, decay: Real) -> Self {
        EpsilonSchedule { kind: ScheduleKind::Exponential, eps_start, decay, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps_start > 0.0) || !(self.eps_min > 0.0) {
            return Err(Error::config("epsilon bounds must be positive"));
        }
        if self.eps_start < self.eps_min {
            return Err(Error::config("eps_start must be >= eps_min"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("epsilon decay must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Margin value at an epoch.
pub fn epsilon_at(schedule: &EpsilonSchedule, epoch: usize) -> Real {
    let s = schedule;
    let eps = match s.kind {
        ScheduleKind::Fixed => s.eps_start,
        ScheduleKind::Stepwise => {
            if epoch < s.step_epoch {
                s.eps_start
            } else {
                s.eps_min
            }
        }
        ScheduleKind::Linear => {
            if epoch >= s.end_epoch {
                s.eps_min
            } else {
                let f = epoch as Real / s.end_epoch as Real;
                s.eps_start + (s.eps_min - s.eps_start) * f
            }
        }
        ScheduleKind::Exponential => s.eps_start * s.decay.powi(epoch as i32),
    };
    eps.max(s.eps_min)
}

/// Per-term multipliers for the total objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: Real,
    pub seg: Real,
    pub depth: Real,
    pub near: Real,
    pub empty: Real,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 1.0, seg: 1e-2, depth: 1e-2, near: 1e-1, empty: 1e-1 }
    }
}

impl LossWeights {
    /// Image-only configuration: lidar terms disabled.
    pub fn without_lidar(mut self) -> Self {
        self.depth = 0.0;
        self.near = 0.0;
        self.empty = 0.0;
        self
    }
}

/// Per-term batch means plus the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub rgb: Real,
    pub seg: Real,
    pub depth: Real,
    pub near: Real,
    pub empty: Real,
    pub total: Real,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn from_terms(rgb: Real, seg: Real, depth: Real, near: Real, empty: Real, weights: LossWeights) -> Self {
        let total = weights.rgb * rgb
            + weights.seg * seg
            + weights.depth * depth
            + weights.near * near
            + weights.empty * empty;
        LossReport { rgb, seg, depth, near, empty, total, weights }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("rgb", self.rgb),
            ("seg", self.seg),
            ("depth", self.depth),
            ("near", self.near),
            ("empty", self.empty),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

// ---------------------------------------------------------------------------
// Plain per-ray loss terms (the testable contracts)
// ---------------------------------------------------------------------------

/// Squared L2 photometric error over the three channels of one pixel.
pub fn loss_rgb(rendered: &RenderedPixel, target: [Real; 3]) -> Real {
    let mut acc = 0.0;
    for c in 0..3 {
        let d = rendered.color[c] - target[c];
        acc += d * d;
    }
    acc
}

/// Sky segmentation penalty: `Σ w_k² δ_k` on sky rays, zero elsewhere.
pub fn loss_seg(samples: &RaySamples, is_sky: bool) -> Real {
    if !is_sky {
        return 0.0;
    }
    samples
        .weights
        .iter()
        .zip(&samples.deltas)
        .map(|(w, d)| w * w * d)
        .sum()
}

/// Expected-depth penalty `(ẑ - z)²`.
pub fn loss_depth(samples: &RaySamples, z: Real) -> Real {
    let zhat = expected_depth(samples);
    (zhat - z) * (zhat - z)
}

/// Near-surface penalty: within `[z - ε, z + ε]` the per-meter weight
/// density `w_k / δ_k` is matched to the truncated-Gaussian kernel,
/// `Σ (w_k/δ_k - K(t_k - z))² δ_k`.
pub fn loss_near(samples: &RaySamples, z: Real, kernel: &LosKernel) -> Real {
    let eps = kernel.epsilon;
    let mut acc = 0.0;
    for (k, &t) in samples.t.iter().enumerate() {
        if (t - z).abs() > eps {
            continue;
        }
        let d = samples.deltas[k];
        if d <= 0.0 {
            continue; // zero-width segments carry no quadrature mass
        }
        let r = samples.weights[k] / d - kernel.density(t - z);
        acc += r * r * d;
    }
    acc
}

/// Empty-space penalty before the return: `Σ w_k² δ_k` over `t_k < z - ε`.
pub fn loss_empty(samples: &RaySamples, z: Real, kernel: &LosKernel) -> Real {
    let cut = z - kernel.epsilon;
    let mut acc = 0.0;
    for (k, &t) in samples.t.iter().enumerate() {
        if t < cut {
            let w = samples.weights[k];
            acc += w * w * samples.deltas[k];
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Batched training graph
// ---------------------------------------------------------------------------

/// What a batched ray supervises.
#[derive(Debug, Clone)]
pub enum RaySupervision {
    Camera { image_id: usize, target: [Real; 3], is_sky: bool },
    Lidar { z: Real },
}

/// A ray with its (already drawn) sample distances. Freezing the distances
/// here keeps the loss a deterministic function of the parameters, which the
/// finite-difference checks rely on.
#[derive(Debug, Clone)]
pub struct BatchRay {
    pub ray: Ray,
    pub t: Vec<Real>,
    pub supervision: RaySupervision,
}

/// A batch of mixed camera/lidar rays.
#[derive(Debug, Clone, Default)]
pub struct PreparedBatch {
    pub rays: Vec<BatchRay>,
}

impl PreparedBatch {
    pub fn camera_count(&self) -> usize {
        self.rays
            .iter()
            .filter(|r| matches!(r.supervision, RaySupervision::Camera { .. }))
            .count()
    }

    pub fn lidar_count(&self) -> usize {
        self.rays.len() - self.camera_count()
    }
}

/// Options for the loss graph.
#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub epsilon: Real,
    /// Sky is composited through residual transmittance when set.
    pub residual_sky: bool,
}

/// Scalar nodes for one chunk's unnormalized term sums.
struct ChunkNodes {
    rgb: Option<NodeId>,
    seg: Option<NodeId>,
    depth: Option<NodeId>,
    near: Option<NodeId>,
    empty: Option<NodeId>,
}

/// Per-term sums plus gradients for a chunk or a whole batch.
pub struct LossGrads {
    pub report: LossReport,
    /// Gradient of the weighted total per parameter slot.
    pub grads: Vec<Option<Tensor>>,
}

fn build_chunk(
    tape: &mut Tape,
    gb: &mut GraphBuilder,
    rays: &[BatchRay],
    opts: &LossOptions,
    fitted_beta: Option<NodeId>,
) -> Result<ChunkNodes> {
    let kernel = LosKernel::new(opts.epsilon)?;
    let direct = gb.params.config.exposure_mode == ExposureMode::Direct;

    // One trunk evaluation over every sample point in the chunk.
    let mut points: Vec<Vec3> = Vec::new();
    let mut offsets = Vec::with_capacity(rays.len());
    for ray in rays {
        offsets.push(points.len());
        for &t in &ray.t {
            points.push(ray.ray.point_at(t));
        }
    }
    let enc = gb.encoded_positions(tape, &points);
    let (z_feat, sigma_all) = gb.features_and_density(tape, enc);

    let mut rgb_terms: Vec<(Real, NodeId)> = Vec::new();
    let mut seg_terms: Vec<(Real, NodeId)> = Vec::new();
    let mut depth_terms: Vec<(Real, NodeId)> = Vec::new();
    let mut near_terms: Vec<(Real, NodeId)> = Vec::new();
    let mut empty_terms: Vec<(Real, NodeId)> = Vec::new();

    for (i, bray) in rays.iter().enumerate() {
        let n = bray.t.len();
        let deltas = deltas_from(&bray.t, bray.ray.t_far, None);
        let sigma = tape.slice_rows(sigma_all, offsets[i], n);
        let w = tape.render_weights(sigma, deltas.clone());

        match &bray.supervision {
            RaySupervision::Camera { image_id, target, is_sky } => {
                let zs = tape.slice_rows(z_feat, offsets[i], n);
                let encd = gb.encoded_dir_rows(tape, bray.ray.direction, n);
                let beta = if direct {
                    Some(match fitted_beta {
                        Some(b) => b,
                        None => gb.code_row(tape, *image_id),
                    })
                } else {
                    None
                };
                let colors = gb.colors(tape, zs, encd, beta);
                let exposed = match gb.params.config.exposure_mode {
                    ExposureMode::Affine => {
                        let code = match fitted_beta {
                            Some(b) => b,
                            None => gb.code_row(tape, *image_id),
                        };
                        let gamma = gb.exposure_matrix(tape, code);
                        tape.apply_matrix_rows(gamma, colors)
                    }
                    _ => colors,
                };
                let weighted = tape.row_scale(exposed, w);
                let surface = tape.col_sum(weighted);
                let sky_rgb = gb.sky(tape, bray.ray.direction);
                let pixel = if opts.residual_sky {
                    let opac = tape.sum_all(w);
                    let neg = tape.lin_comb(vec![(-1.0, opac)]);
                    let resid_t = tape.add_const(neg, vec![1.0]);
                    let sky_term = tape.scale_by_scalar(sky_rgb, resid_t);
                    tape.lin_comb(vec![(1.0, surface), (1.0, sky_term)])
                } else {
                    tape.lin_comb(vec![(1.0, surface), (1.0, sky_rgb)])
                };
                let resid = tape.add_const(pixel, vec![-target[0], -target[1], -target[2]]);
                let term = tape.weighted_sum_squares(resid, vec![1.0, 1.0, 1.0]);
                rgb_terms.push((1.0, term));
                if *is_sky {
                    let term = tape.weighted_sum_squares(w, deltas.clone());
                    seg_terms.push((1.0, term));
                }
            }
            RaySupervision::Lidar { z } => {
                let zhat = tape.dot_const(w, bray.t.clone());
                let resid = tape.add_const(zhat, vec![-z]);
                let term = tape.weighted_sum_squares(resid, vec![1.0]);
                depth_terms.push((1.0, term));

                // near: compare per-meter weight density against the kernel
                // inside the margin window
                let inv_delta: Vec<Real> =
                    deltas.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
                let mut near_coeff = vec![0.0; n];
                let mut kernel_target = vec![0.0; n];
                let mut any_near = false;
                for (k, &t) in bray.t.iter().enumerate() {
                    if (t - z).abs() <= kernel.epsilon && deltas[k] > 0.0 {
                        near_coeff[k] = deltas[k];
                        kernel_target[k] = -kernel.density(t - z);
                        any_near = true;
                    }
                }
                if any_near {
                    let density = tape.mul_const(w, inv_delta);
                    let resid = tape.add_const(density, kernel_target);
                    let term = tape.weighted_sum_squares(resid, near_coeff);
                    near_terms.push((1.0, term));
                }

                let cut = z - kernel.epsilon;
                let empty_coeff: Vec<Real> = bray
                    .t
                    .iter()
                    .zip(&deltas)
                    .map(|(&t, &d)| if t < cut { d } else { 0.0 })
                    .collect();
                if empty_coeff.iter().any(|&c| c > 0.0) {
                    let term = tape.weighted_sum_squares(w, empty_coeff);
                    empty_terms.push((1.0, term));
                }
            }
        }
    }

    let sum = |tape: &mut Tape, terms: Vec<(Real, NodeId)>| -> Option<NodeId> {
        if terms.is_empty() {
            None
        } else {
            Some(tape.lin_comb(terms))
        }
    };
    Ok(ChunkNodes {
        rgb: sum(tape, rgb_terms),
        seg: sum(tape, seg_terms),
        depth: sum(tape, depth_terms),
        near: sum(tape, near_terms),
        empty: sum(tape, empty_terms),
    })
}

struct ChunkResult {
    sums: [Real; 5],
    grads: Option<Vec<Option<Tensor>>>,
}

fn run_chunk(
    params: &FieldParams,
    rays: &[BatchRay],
    opts: &LossOptions,
    cam_total: usize,
    lidar_total: usize,
    want_grads: bool,
) -> Result<ChunkResult> {
    let mut tape = Tape::new(params.set.len());
    let mut gb = GraphBuilder::new(params);
    let nodes = build_chunk(&mut tape, &mut gb, rays, opts, None)?;
    let val = |n: &Option<NodeId>| n.map(|id| tape.scalar(id)).unwrap_or(0.0);
    let sums = [val(&nodes.rgb), val(&nodes.seg), val(&nodes.depth), val(&nodes.near), val(&nodes.empty)];
    let grads = if want_grads {
        // Gradient of the weighted total, with per-term batch means folded
        // into the combination coefficients.
        let w = &opts.weights;
        let cam_n = cam_total.max(1) as Real;
        let lidar_n = lidar_total.max(1) as Real;
        let mut terms = Vec::new();
        if let Some(id) = nodes.rgb {
            terms.push((w.rgb / cam_n, id));
        }
        if let Some(id) = nodes.seg {
            terms.push((w.seg / cam_n, id));
        }
        if let Some(id) = nodes.depth {
            terms.push((w.depth / lidar_n, id));
        }
        if let Some(id) = nodes.near {
            terms.push((w.near / lidar_n, id));
        }
        if let Some(id) = nodes.empty {
            terms.push((w.empty / lidar_n, id));
        }
        if terms.is_empty() {
            Some(vec![None; params.set.len()])
        } else {
            let total = tape.lin_comb(terms);
            Some(tape.backward(total))
        }
    } else {
        None
    };
    Ok(ChunkResult { sums, grads })
}

fn accumulate_grads(into: &mut Vec<Option<Tensor>>, from: Vec<Option<Tensor>>) {
    for (dst, src) in into.iter_mut().zip(from) {
        if let Some(s) = src {
            match dst {
                Some(d) => {
                    for (a, b) in d.data.iter_mut().zip(&s.data) {
                        *a += b;
                    }
                }
                None => *dst = Some(s),
            }
        }
    }
}

/// Evaluates the full objective over a batch: per-term means (camera terms
/// over camera rays, lidar terms over lidar rays) and, when requested, the
/// gradient of the weighted total. Chunks run in parallel; the reduction
/// order is fixed.
pub fn total_loss_and_grads(
    params: &FieldParams,
    batch: &PreparedBatch,
    opts: &LossOptions,
    want_grads: bool,
) -> Result<LossGrads> {
    if batch.rays.is_empty() {
        return Err(Error::input("loss requires a non-empty batch"));
    }
    let cam_total = batch.camera_count();
    let lidar_total = batch.lidar_count();
    let chunks: Vec<&[BatchRay]> = batch.rays.chunks(CHUNK_RAYS).collect();
    let results: Vec<Result<ChunkResult>> = chunks
        .par_iter()
        .map(|rays| run_chunk(params, rays, opts, cam_total, lidar_total, want_grads))
        .collect();

    let mut sums = [0.0; 5];
    let mut grads: Vec<Option<Tensor>> = vec![None; params.set.len()];
    for r in results {
        let r = r?;
        for (a, b) in sums.iter_mut().zip(r.sums) {
            *a += b;
        }
        if let Some(g) = r.grads {
            accumulate_grads(&mut grads, g);
        }
    }
    let cam_n = cam_total.max(1) as Real;
    let lidar_n = lidar_total.max(1) as Real;
    let report = LossReport::from_terms(
        sums[0] / cam_n,
        sums[1] / cam_n,
        sums[2] / lidar_n,
        sums[3] / lidar_n,
        sums[4] / lidar_n,
        opts.weights,
    );
    Ok(LossGrads { report, grads })
}

/// Loss values only (no gradient work). Used by finite-difference checks.
pub fn total_loss(
    params: &FieldParams,
    batch: &PreparedBatch,
    opts: &LossOptions,
) -> Result<LossReport> {
    Ok(total_loss_and_grads(params, batch, opts, false)?.report)
}

/// Spec-level convenience: evaluate the objective at an epoch of a schedule.
pub fn total_loss_at_epoch(
    params: &FieldParams,
    batch: &PreparedBatch,
    weights: LossWeights,
    schedule: &EpsilonSchedule,
    epoch: usize,
    residual_sky: bool,
) -> Result<LossReport> {
    let opts = LossOptions { weights, epsilon: epsilon_at(schedule, epoch), residual_sky };
    total_loss(params, batch, &opts)
}

/// Gradient of one term's batch mean, for every term separately. Slow path
/// used by the gradient-exactness checks.
pub fn per_term_grads(
    params: &FieldParams,
    batch: &PreparedBatch,
    opts: &LossOptions,
) -> Result<[Vec<Option<Tensor>>; 5]> {
    if batch.rays.is_empty() {
        return Err(Error::input("loss requires a non-empty batch"));
    }
    let cam_n = batch.camera_count().max(1) as Real;
    let lidar_n = batch.lidar_count().max(1) as Real;
    let mut out: [Vec<Option<Tensor>>; 5] = std::array::from_fn(|_| vec![None; params.set.len()]);
    for rays in batch.rays.chunks(CHUNK_RAYS) {
        let mut tape = Tape::new(params.set.len());
        let mut gb = GraphBuilder::new(params);
        let nodes = build_chunk(&mut tape, &mut gb, rays, opts, None)?;
        let scaled = [
            (nodes.rgb, 1.0 / cam_n),
            (nodes.seg, 1.0 / cam_n),
            (nodes.depth, 1.0 / lidar_n),
            (nodes.near, 1.0 / lidar_n),
            (nodes.empty, 1.0 / lidar_n),
        ];
        for (i, (node, scale)) in scaled.into_iter().enumerate() {
            if let Some(id) = node {
                let mean = tape.lin_comb(vec![(scale, id)]);
                accumulate_grads(&mut out[i], tape.backward(mean));
            }
        }
    }
    Ok(out)
}

/// Precomputed per-ray state for direct-conditioning exposure fitting: the
/// frozen trunk features and rendering weights of the samples that carry
/// non-negligible weight, plus the constant sky term.
pub struct ColorFitRay {
    /// Pruned trunk features, `(kept, hidden)`.
    pub features: Tensor,
    /// Direction encoding rows matching `features`.
    pub dir_enc: Tensor,
    /// Rendering weights of the kept samples.
    pub weights: Vec<Real>,
    pub sky_term: [Real; 3],
    pub target: [Real; 3],
}

/// Photometric loss and gradient w.r.t. a direct-conditioning code, with the
/// trunk cached. Only the color branch is re-evaluated per step.
pub fn direct_fit_grad(
    params: &FieldParams,
    rays: &[ColorFitRay],
    code: &[Real],
) -> Result<(Real, Vec<Real>)> {
    if rays.is_empty() {
        return Err(Error::input("exposure fit requires a non-empty pixel set"));
    }
    let n = rays.len() as Real;
    let results: Vec<(Real, Vec<Real>)> = rays
        .par_chunks(CHUNK_RAYS * 8)
        .map(|chunk| {
            let mut tape = Tape::new(1);
            let mut gb = GraphBuilder::frozen(params);
            let beta = tape.param(0, Tensor::from_vec(1, code.len(), code.to_vec()));
            let mut terms = Vec::with_capacity(chunk.len());
            for ray in chunk {
                let z = tape.constant(ray.features.clone());
                let encd = tape.constant(ray.dir_enc.clone());
                let colors = gb.colors(&mut tape, z, encd, Some(beta));
                let w = tape.constant(Tensor::from_vec(ray.weights.len(), 1, ray.weights.clone()));
                let weighted = tape.row_scale(colors, w);
                let surface = tape.col_sum(weighted);
                let resid = tape.add_const(
                    surface,
                    vec![
                        ray.sky_term[0] - ray.target[0],
                        ray.sky_term[1] - ray.target[1],
                        ray.sky_term[2] - ray.target[2],
                    ],
                );
                terms.push((1.0, tape.weighted_sum_squares(resid, vec![1.0, 1.0, 1.0])));
            }
            let total = tape.lin_comb(terms);
            let loss = tape.scalar(total);
            let grads = tape.backward(total);
            let g = grads[0]
                .as_ref()
                .map(|t| t.data.clone())
                .unwrap_or_else(|| vec![0.0; code.len()]);
            (loss, g)
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; code.len()];
    for (l, g) in results {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    loss /= n;
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss, grad))
}

/// Gradient of a photometric-only objective with the scene frozen and a
/// standalone exposure code as the only parameter. Returns
/// `(mean rgb loss, d loss / d code)`.
pub fn exposure_fit_grad(
    params: &FieldParams,
    batch: &PreparedBatch,
    code: &[Real],
    residual_sky: bool,
) -> Result<(Real, Vec<Real>)> {
    if batch.rays.is_empty() {
        return Err(Error::input("exposure fit requires a non-empty batch"));
    }
    let cam_n = batch.camera_count().max(1) as Real;
    let chunks: Vec<&[BatchRay]> = batch.rays.chunks(CHUNK_RAYS).collect();
    let opts = LossOptions {
        weights: LossWeights { rgb: 1.0, seg: 0.0, depth: 0.0, near: 0.0, empty: 0.0 },
        epsilon: 1.0,
        residual_sky,
    };
    let results: Vec<Result<(Real, Vec<Real>)>> = chunks
        .par_iter()
        .map(|rays| {
            let mut tape = Tape::new(1);
            let mut gb = GraphBuilder::frozen(params);
            let beta =
                tape.param(0, Tensor::from_vec(1, code.len(), code.to_vec()));
            let nodes = build_chunk(&mut tape, &mut gb, rays, &opts, Some(beta))?;
            let Some(rgb) = nodes.rgb else {
                return Ok((0.0, vec![0.0; code.len()]));
            };
            let loss = tape.scalar(rgb);
            let grads = tape.backward(rgb);
            let g = grads[0]
                .as_ref()
                .map(|t| t.data.clone())
                .unwrap_or_else(|| vec![0.0; code.len()]);
            Ok((loss, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; code.len()];
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    loss /= cam_n;
    for g in &mut grad {
        *g /= cam_n;
    }
    Ok((loss, grad))
}
