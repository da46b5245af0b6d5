//! The three trainable networks: a positional radiance field (density plus
//! view-dependent color), a direction-only sky color network, and a per-image
//! exposure decoder producing 3x3 color transforms from latent codes.
//!
//! Parameters live in a flat, ordered [`ParamSet`] so gradient reduction,
//! optimizer state, and checkpoints all share one deterministic layout.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geometry::{self, encoded_len, DIR_FREQS};
use crate::math::{self, sigmoid, softplus, Real, Tensor, Vec3};
use crate::tape::{NodeId, Tape};
use crate::Result;

/// How per-image exposure enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureMode {
    /// A 3x3 color matrix decoded from the latent code scales the radiance.
    Affine,
    /// The latent code is concatenated to the color branch input.
    Direct,
    /// No exposure handling; identity transform everywhere.
    Off,
}

/// Network sizes and conditioning choices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct FieldConfig {
    /// Frequencies for the positional encoding.
    pub pos_freqs: usize,
    /// Width of the trunk layers.
    pub hidden_width: usize,
    /// Number of trunk layers.
    pub hidden_depth: usize,
    /// Width of the color branch hidden layer.
    pub color_width: usize,
    /// Width of the sky network hidden layers.
    pub sky_width: usize,
    /// Number of sky hidden layers.
    pub sky_depth: usize,
    /// Dimension of the per-image exposure code.
    pub exposure_dim: usize,
    pub exposure_mode: ExposureMode,
    /// Initial bias on the density head; controls how opaque the field
    /// starts out.
    pub density_bias: Real,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            pos_freqs: 10,
            hidden_width: 256,
            hidden_depth: 4,
            color_width: 128,
            sky_width: 64,
            sky_depth: 2,
            exposure_dim: 4,
            exposure_mode: ExposureMode::Affine,
            density_bias: -2.0,
        }
    }
}

impl FieldConfig {
    /// A small configuration for tests and quick experiments.
    pub fn tiny(width: usize) -> Self {
        FieldConfig {
            pos_freqs: 6,
            hidden_width: width,
            hidden_depth: 2,
            color_width: width.max(4) / 2 * 2,
            sky_width: 8,
            sky_depth: 2,
            exposure_dim: 4,
            ..FieldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pos_freqs == 0
            || self.hidden_width == 0
            || self.hidden_depth == 0
            || self.color_width == 0
            || self.sky_width == 0
            || self.sky_depth == 0
            || self.exposure_dim == 0
        {
            return Err(Error::config("field dimensions must all be positive"));
        }
        Ok(())
    }
}

/// Maps world coordinates into the [-1, 1]^3 box the encodings expect.
/// Distances along rays stay in meters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SceneNorm {
    pub center: Vec3,
    /// Half-extent of the scene bounding cube.
    pub half_extent: Real,
}

impl SceneNorm {
    pub fn identity() -> Self {
        SceneNorm { center: [0.0; 3], half_extent: 1.0 }
    }

    pub fn normalize_clamped(&self, p: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = ((p[i] - self.center[i]) / self.half_extent).clamp(-1.0, 1.0);
        }
        out
    }
}

/// Ordered, named collection of parameter tensors. Slot order is the
/// canonical order for gradients, optimizer state, and checkpoint bytes.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let slot = self.tensors.len();
        self.index.insert(name.clone(), slot);
        self.names.push(name);
        self.tensors.push(tensor);
        slot
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn slot(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[self.slot(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let slot = self.slot(name);
        &mut self.tensors[slot]
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.tensors[slot]
    }

    pub fn by_slot_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.tensors[slot]
    }

    pub fn name_of(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Same layout, all zeros. Used for optimizer moments.
    pub fn zeros_like(&self) -> Self {
        let mut out = ParamSet::new();
        for (name, t) in self.iter() {
            out.push(name, Tensor::zeros(t.rows, t.cols));
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of one field evaluation.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    /// Volumetric density, 1/meter; non-negative by construction.
    pub density: Real,
    /// View-dependent color in [0, 1]^3.
    pub radiance: [Real; 3],
    /// Trunk feature vector the heads read from.
    pub feature: Vec<Real>,
}

/// A decoded per-image 3x3 color transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExposureTransform {
    pub matrix: [[Real; 3]; 3],
}

impl ExposureTransform {
    pub fn identity() -> Self {
        ExposureTransform { matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] }
    }

    pub fn diagonal(d: [Real; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            m[i][i] = d[i];
        }
        ExposureTransform { matrix: m }
    }

    pub fn apply(&self, c: [Real; 3]) -> [Real; 3] {
        let m = &self.matrix;
        [
            m[0][0] * c[0] + m[0][1] * c[1] + m[0][2] * c[2],
            m[1][0] * c[0] + m[1][1] * c[1] + m[1][2] * c[2],
            m[2][0] * c[0] + m[2][1] * c[1] + m[2][2] * c[2],
        ]
    }
}

/// All trainable state: radiance trunk and heads, sky network, exposure
/// codes and decoder, plus the scene normalization they were trained with.
#[derive(Debug, Clone)]
pub struct FieldParams {
    pub config: FieldConfig,
    pub norm: SceneNorm,
    pub num_images: usize,
    pub set: ParamSet,
}

fn uniform_tensor(rng: &mut StdRng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let a = (3.0 / fan_in as Real).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data)
}

impl FieldParams {
    /// Fresh parameters: weights from a centered uniform law scaled by
    /// fan-in, biases zero, exposure codes and decoder zero (so every image
    /// starts at the identity exposure transform).
    pub fn init(
        config: FieldConfig,
        norm: SceneNorm,
        num_images: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let enc_pos = encoded_len(config.pos_freqs);
        let enc_dir = encoded_len(DIR_FREQS);

        let mut fan = enc_pos;
        for layer in 0..config.hidden_depth {
            set.push(format!("trunk.{layer}.w"), uniform_tensor(&mut rng, config.hidden_width, fan, fan));
            set.push(format!("trunk.{layer}.b"), Tensor::zeros(config.hidden_width, 1));
            fan = config.hidden_width;
        }
        set.push("density.w", uniform_tensor(&mut rng, 1, fan, fan));
        let mut density_b = Tensor::zeros(1, 1);
        density_b.data[0] = config.density_bias;
        set.push("density.b", density_b);

        let color_in = fan
            + enc_dir
            + if config.exposure_mode == ExposureMode::Direct { config.exposure_dim } else { 0 };
        set.push("color.0.w", uniform_tensor(&mut rng, config.color_width, color_in, color_in));
        set.push("color.0.b", Tensor::zeros(config.color_width, 1));
        set.push("color.1.w", uniform_tensor(&mut rng, 3, config.color_width, config.color_width));
        set.push("color.1.b", Tensor::zeros(3, 1));

        let mut fan = enc_dir;
        for layer in 0..config.sky_depth {
            set.push(format!("sky.{layer}.w"), uniform_tensor(&mut rng, config.sky_width, fan, fan));
            set.push(format!("sky.{layer}.b"), Tensor::zeros(config.sky_width, 1));
            fan = config.sky_width;
        }
        set.push("sky.out.w", uniform_tensor(&mut rng, 3, fan, fan));
        set.push("sky.out.b", Tensor::zeros(3, 1));

        set.push("exposure.codes", Tensor::zeros(num_images.max(1), config.exposure_dim));
        set.push("exposure.decoder.w", Tensor::zeros(9, config.exposure_dim));
        set.push("exposure.decoder.b", Tensor::zeros(9, 1));

        Ok(FieldParams { config, norm, num_images, set })
    }

    fn trunk_features(&self, points: &[Vec3]) -> Tensor {
        let enc_pos = encoded_len(self.config.pos_freqs);
        let mut x = Tensor::zeros(points.len(), enc_pos);
        for (r, &p) in points.iter().enumerate() {
            let pn = self.norm.normalize_clamped(p);
            geometry::encode_into(pn, self.config.pos_freqs, x.row_mut(r));
        }
        let mut h = x;
        for layer in 0..self.config.hidden_depth {
            let w = self.set.get(&format!("trunk.{layer}.w"));
            let b = self.set.get(&format!("trunk.{layer}.b"));
            h = math::dense_forward(w, b, &h);
            for v in &mut h.data {
                *v = softplus(*v);
            }
        }
        h
    }

    fn densities_from_features(&self, z: &Tensor) -> Vec<Real> {
        let raw = math::dense_forward(self.set.get("density.w"), self.set.get("density.b"), z);
        raw.data.iter().map(|&v| softplus(v)).collect()
    }

    fn colors_from_features(&self, z: &Tensor, dir: Vec3, beta: Option<&[Real]>) -> Vec<[Real; 3]> {
        let enc_dir = encoded_len(DIR_FREQS);
        let direct = self.config.exposure_mode == ExposureMode::Direct;
        let b_dim = if direct { self.config.exposure_dim } else { 0 };
        let mut x = Tensor::zeros(z.rows, z.cols + enc_dir + b_dim);
        let mut dir_enc = vec![0.0; enc_dir];
        geometry::encode_into(dir, DIR_FREQS, &mut dir_enc);
        let zeros;
        let beta = if direct {
            Some(match beta {
                Some(b) => b,
                None => {
                    zeros = vec![0.0; b_dim];
                    &zeros[..]
                }
            })
        } else {
            None
        };
        for r in 0..z.rows {
            let row = x.row_mut(r);
            row[..z.cols].copy_from_slice(z.row(r));
            row[z.cols..z.cols + enc_dir].copy_from_slice(&dir_enc);
            if let Some(b) = beta {
                row[z.cols + enc_dir..].copy_from_slice(b);
            }
        }
        let mut h = math::dense_forward(self.set.get("color.0.w"), self.set.get("color.0.b"), &x);
        for v in &mut h.data {
            *v = softplus(*v);
        }
        let out = math::dense_forward(self.set.get("color.1.w"), self.set.get("color.1.b"), &h);
        (0..out.rows)
            .map(|r| {
                let row = out.row(r);
                [sigmoid(row[0]), sigmoid(row[1]), sigmoid(row[2])]
            })
            .collect()
    }

    /// Density and radiance at one point. Density depends only on position;
    /// the view direction enters after the density branch.
    pub fn eval_field(&self, p: Vec3, d: Vec3) -> Result<FieldOutput> {
        if !self.set.all_finite() {
            return Err(Error::numeric("field parameters are not finite"));
        }
        let z = self.trunk_features(&[p]);
        let density = self.densities_from_features(&z)[0];
        let radiance = self.colors_from_features(&z, d, None)[0];
        Ok(FieldOutput { density, radiance, feature: z.data })
    }

    /// Direction-only sky color in [0, 1]^3.
    pub fn eval_sky(&self, d: Vec3) -> [Real; 3] {
        let enc_dir = encoded_len(DIR_FREQS);
        let mut x = Tensor::zeros(1, enc_dir);
        geometry::encode_into(d, DIR_FREQS, x.row_mut(0));
        let mut h = x;
        for layer in 0..self.config.sky_depth {
            let w = self.set.get(&format!("sky.{layer}.w"));
            let b = self.set.get(&format!("sky.{layer}.b"));
            h = math::dense_forward(w, b, &h);
            for v in &mut h.data {
                *v = softplus(*v);
            }
        }
        let out = math::dense_forward(self.set.get("sky.out.w"), self.set.get("sky.out.b"), &h);
        [sigmoid(out.data[0]), sigmoid(out.data[1]), sigmoid(out.data[2])]
    }

    /// Batched density+radiance along one ray (all samples share the
    /// direction). This is the hot path for rendering.
    pub fn density_radiance_ray(
        &self,
        points: &[Vec3],
        dir: Vec3,
        beta: Option<&[Real]>,
    ) -> (Vec<Real>, Vec<[Real; 3]>) {
        let z = self.trunk_features(points);
        let sigma = self.densities_from_features(&z);
        let rgb = self.colors_from_features(&z, dir, beta);
        (sigma, rgb)
    }

    /// Density only; skips the color branch.
    pub fn density_ray(&self, points: &[Vec3]) -> Vec<Real> {
        let z = self.trunk_features(points);
        self.densities_from_features(&z)
    }

    /// Trunk features plus densities; the cached inputs for repeated
    /// color-branch evaluation (test-time exposure fitting).
    pub fn features_density_ray(&self, points: &[Vec3]) -> (Tensor, Vec<Real>) {
        let z = self.trunk_features(points);
        let sigma = self.densities_from_features(&z);
        (z, sigma)
    }

    /// The decoded exposure matrix for a registered image:
    /// identity + reshape(decoder(code), 3x3), row major. Zero codes and a
    /// zero decoder therefore give the identity exactly.
    pub fn decode_exposure(&self, image_id: usize) -> Result<ExposureTransform> {
        if image_id >= self.num_images {
            return Err(Error::input(format!(
                "image id {image_id} not registered (have {})",
                self.num_images
            )));
        }
        let codes = self.set.get("exposure.codes");
        Ok(self.decode_exposure_from_code(codes.row(image_id)))
    }

    /// Decodes an exposure transform from an explicit code vector (used for
    /// test-time fitted codes).
    pub fn decode_exposure_from_code(&self, code: &[Real]) -> ExposureTransform {
        let w = self.set.get("exposure.decoder.w");
        let b = self.set.get("exposure.decoder.b");
        let mut flat = [0.0; 9];
        for o in 0..9 {
            let mut acc = b.data[o];
            for (i, &c) in code.iter().enumerate() {
                acc += w.at(o, i) * c;
            }
            flat[o] = acc;
        }
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = flat[i * 3 + j] + if i == j { 1.0 } else { 0.0 };
            }
        }
        ExposureTransform { matrix: m }
    }

    /// Exposure transform used when rendering image `image_id`, honoring the
    /// exposure mode.
    pub fn exposure_for(&self, image_id: usize) -> Result<ExposureTransform> {
        match self.config.exposure_mode {
            ExposureMode::Affine => self.decode_exposure(image_id),
            _ => Ok(ExposureTransform::identity()),
        }
    }

    /// Per-image code row (direct conditioning input).
    pub fn code_row(&self, image_id: usize) -> Result<Vec<Real>> {
        if image_id >= self.num_images {
            return Err(Error::input(format!("image id {image_id} not registered")));
        }
        Ok(self.set.get("exposure.codes").row(image_id).to_vec())
    }
}

/// Builds tape subgraphs over a parameter set, caching one node per slot so
/// gradients accumulate correctly across shared uses.
///
/// With `trainable = false` the parameters enter the graph as constants;
/// this is how test-time exposure fitting freezes the scene.
pub struct GraphBuilder<'p> {
    pub params: &'p FieldParams,
    trainable: bool,
    cache: Vec<Option<NodeId>>,
}

impl<'p> GraphBuilder<'p> {
    pub fn new(params: &'p FieldParams) -> Self {
        GraphBuilder { params, trainable: true, cache: vec![None; params.set.len()] }
    }

    pub fn frozen(params: &'p FieldParams) -> Self {
        GraphBuilder { params, trainable: false, cache: vec![None; params.set.len()] }
    }

    pub fn slot_count(&self) -> usize {
        self.params.set.len()
    }

    fn node(&mut self, tape: &mut Tape, name: &str) -> NodeId {
        let slot = self.params.set.slot(name);
        if let Some(id) = self.cache[slot] {
            return id;
        }
        let value = self.params.set.by_slot(slot).clone();
        let id = if self.trainable { tape.param(slot, value) } else { tape.constant(value) };
        self.cache[slot] = Some(id);
        id
    }

    /// Encodes (normalized, clamped) world points into a constant node.
    pub fn encoded_positions(&self, tape: &mut Tape, points: &[Vec3]) -> NodeId {
        let cfg = &self.params.config;
        let enc = encoded_len(cfg.pos_freqs);
        let mut x = Tensor::zeros(points.len(), enc);
        for (r, &p) in points.iter().enumerate() {
            let pn = self.params.norm.normalize_clamped(p);
            geometry::encode_into(pn, cfg.pos_freqs, x.row_mut(r));
        }
        tape.constant(x)
    }

    /// Trunk features and per-sample densities for a block of points.
    /// Returns `(z, sigma)`; `sigma` is `(n, 1)` and non-negative.
    pub fn features_and_density(&mut self, tape: &mut Tape, enc_pos: NodeId) -> (NodeId, NodeId) {
        let cfg = &self.params.config;
        let mut h = enc_pos;
        for layer in 0..cfg.hidden_depth {
            let w = self.node(tape, &format!("trunk.{layer}.w"));
            let b = self.node(tape, &format!("trunk.{layer}.b"));
            h = tape.dense(w, b, h);
            h = tape.softplus(h);
        }
        let dw = self.node(tape, "density.w");
        let db = self.node(tape, "density.b");
        let raw = tape.dense(dw, db, h);
        let sigma = tape.softplus(raw);
        (h, sigma)
    }

    /// Color branch over trunk features. `enc_dir` is `(n, enc)` constant
    /// rows; `beta` is an optional `(1, B)` node for direct conditioning.
    pub fn colors(
        &mut self,
        tape: &mut Tape,
        z: NodeId,
        enc_dir: NodeId,
        beta: Option<NodeId>,
    ) -> NodeId {
        let rows = tape.value(z).rows;
        let mut parts = vec![z, enc_dir];
        if let Some(b) = beta {
            let bb = tape.broadcast_row(b, rows);
            parts.push(bb);
        }
        let x = tape.concat_cols(parts);
        let w0 = self.node(tape, "color.0.w");
        let b0 = self.node(tape, "color.0.b");
        let h = tape.dense(w0, b0, x);
        let h = tape.softplus(h);
        let w1 = self.node(tape, "color.1.w");
        let b1 = self.node(tape, "color.1.b");
        let out = tape.dense(w1, b1, h);
        tape.sigmoid(out)
    }

    /// Sky color for one direction: a `(1, 3)` node.
    pub fn sky(&mut self, tape: &mut Tape, dir: Vec3) -> NodeId {
        let cfg = &self.params.config;
        let enc = encoded_len(DIR_FREQS);
        let mut x = Tensor::zeros(1, enc);
        geometry::encode_into(dir, DIR_FREQS, x.row_mut(0));
        let mut h = tape.constant(x);
        for layer in 0..cfg.sky_depth {
            let w = self.node(tape, &format!("sky.{layer}.w"));
            let b = self.node(tape, &format!("sky.{layer}.b"));
            h = tape.dense(w, b, h);
            h = tape.softplus(h);
        }
        let w = self.node(tape, "sky.out.w");
        let b = self.node(tape, "sky.out.b");
        let out = tape.dense(w, b, h);
        tape.sigmoid(out)
    }

    /// The code row for an image as a `(1, B)` node.
    pub fn code_row(&mut self, tape: &mut Tape, image_id: usize) -> NodeId {
        let codes = self.node(tape, "exposure.codes");
        tape.slice_rows(codes, image_id, 1)
    }

    /// Exposure matrix node `(3, 3)` = identity + reshaped decoder output.
    pub fn exposure_matrix(&mut self, tape: &mut Tape, code: NodeId) -> NodeId {
        let w = self.node(tape, "exposure.decoder.w");
        let b = self.node(tape, "exposure.decoder.b");
        let raw = tape.dense(w, b, code);
        let m = tape.reshape(raw, 3, 3);
        let ident = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        tape.add_const(m, ident)
    }

    /// Encodes one shared direction for `n` sample rows.
    pub fn encoded_dir_rows(&self, tape: &mut Tape, dir: Vec3, rows: usize) -> NodeId {
        let enc = encoded_len(DIR_FREQS);
        let mut row = vec![0.0; enc];
        geometry::encode_into(dir, DIR_FREQS, &mut row);
        let mut x = Tensor::zeros(rows, enc);
        for r in 0..rows {
            x.row_mut(r).copy_from_slice(&row);
        }
        tape.constant(x)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"RFLD";
const CHECKPOINT_VERSION: u32 = 1;

/// Header metadata stored inside a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub schema: String,
    pub config: FieldConfig,
    pub norm: SceneNorm,
    pub num_images: usize,
    /// Epochs completed when the checkpoint was taken.
    pub epoch: Option<usize>,
    /// Adam step counter, present when optimizer state is stored.
    pub adam_step: Option<u64>,
}

impl CheckpointMeta {
    pub fn new(params: &FieldParams) -> Self {
        CheckpointMeta {
            schema: "radfield.checkpoint/1".to_string(),
            config: params.config.clone(),
            norm: params.norm,
            num_images: params.num_images,
            epoch: None,
            adam_step: None,
        }
    }
}

/// Serializes parameters (plus optional extra tensor sections, e.g.
/// optimizer moments) into a flat, versioned, byte-deterministic record.
pub fn write_checkpoint(
    path: &Path,
    params: &FieldParams,
    extras: &[(String, Tensor)],
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    let count = params.set.len() + extras.len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    let all = params
        .set
        .iter()
        .map(|(n, t)| (n.to_string(), t))
        .chain(extras.iter().map(|(n, t)| (n.clone(), t)));
    for (name, t) in all {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for &v in &t.data {
            buf.extend_from_slice(&(v as f64).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a checkpoint back. Returns the parameters, any extra tensor
/// sections in file order, and the header metadata.
pub fn read_checkpoint(path: &Path) -> Result<(FieldParams, Vec<(String, Tensor)>, CheckpointMeta)> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(Error::Parse("checkpoint truncated".into()));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut off, hlen)?)?;
    if meta.schema != "radfield.checkpoint/1" {
        return Err(Error::Parse(format!("unexpected checkpoint schema {}", meta.schema)));
    }
    let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
            .map_err(|_| Error::Parse("bad tensor name".into()))?;
        let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let v = f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
            data.push(v as Real);
        }
        tensors.push((name, Tensor::from_vec(rows, cols, data)));
    }

    // Rebuild the canonical layout; anything beyond it (optimizer state)
    // stays in file order so round trips are byte-stable.
    let reference = FieldParams::init(meta.config.clone(), meta.norm, meta.num_images, 0)?;
    let expected: HashMap<&str, (usize, usize)> =
        reference.set.iter().map(|(n, t)| (n, (t.rows, t.cols))).collect();
    let mut supplied: HashMap<String, Tensor> = HashMap::new();
    let mut extras = Vec::new();
    for (name, t) in tensors {
        if expected.contains_key(name.as_str()) {
            supplied.insert(name, t);
        } else {
            extras.push((name, t));
        }
    }
    let mut set = ParamSet::new();
    for (name, t) in reference.set.iter() {
        let got = supplied
            .remove(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint missing tensor {name}")))?;
        if got.rows != t.rows || got.cols != t.cols {
            return Err(Error::Parse(format!("checkpoint tensor {name} has wrong shape")));
        }
        set.push(name, got);
    }
    let params = FieldParams {
        config: meta.config.clone(),
        norm: meta.norm,
        num_images: meta.num_images,
        set,
    };
    Ok((params, extras, meta))
}
