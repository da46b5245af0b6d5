//! Stratified ray sampling and the discrete volume-rendering quadrature:
//! weights, transmittance, exposure- and sky-aware color compositing, and
//! expected depth.

use rand::Rng;

use crate::error::Error;
use crate::field::{ExposureTransform, FieldParams};
use crate::geometry::Ray;
use crate::math::{Real, Vec3};
use crate::Result;

/// Anything that can answer density/radiance queries along a ray. Lets the
/// renderer and the metrics run against analytic oracle fields as well as
/// trained parameters.
pub trait DensityField: Sync {
    /// Density and radiance for points that share one view direction.
    fn density_radiance(&self, points: &[Vec3], dir: Vec3) -> (Vec<Real>, Vec<[Real; 3]>);

    /// Density only. Override when the color branch is worth skipping.
    fn density(&self, points: &[Vec3]) -> Vec<Real> {
        self.density_radiance(points, [0.0, 0.0, 1.0]).0
    }

    /// Background color for a ray direction.
    fn sky(&self, dir: Vec3) -> [Real; 3];
}

impl DensityField for FieldParams {
    fn density_radiance(&self, points: &[Vec3], dir: Vec3) -> (Vec<Real>, Vec<[Real; 3]>) {
        self.density_radiance_ray(points, dir, None)
    }

    fn density(&self, points: &[Vec3]) -> Vec<Real> {
        self.density_ray(points)
    }

    fn sky(&self, dir: Vec3) -> [Real; 3] {
        self.eval_sky(dir)
    }
}

/// A trained field rendered with an explicit exposure code (direct
/// conditioning mode feeds the code to the color branch).
pub struct ConditionedField<'a> {
    pub params: &'a FieldParams,
    pub beta: Option<Vec<Real>>,
}

impl DensityField for ConditionedField<'_> {
    fn density_radiance(&self, points: &[Vec3], dir: Vec3) -> (Vec<Real>, Vec<[Real; 3]>) {
        self.params.density_radiance_ray(points, dir, self.beta.as_deref())
    }

    fn density(&self, points: &[Vec3]) -> Vec<Real> {
        self.params.density_ray(points)
    }

    fn sky(&self, dir: Vec3) -> [Real; 3] {
        self.params.eval_sky(dir)
    }
}

/// Samples, densities, radiances, and derived quadrature state along a ray.
#[derive(Debug, Clone)]
pub struct RaySamples {
    /// Ascending sample distances, meters.
    pub t: Vec<Real>,
    /// Segment lengths; the final segment runs to `t_far` unless capped.
    pub deltas: Vec<Real>,
    pub densities: Vec<Real>,
    pub radiances: Vec<[Real; 3]>,
    pub weights: Vec<Real>,
    pub transmittances: Vec<Real>,
}

/// A composited pixel.
#[derive(Debug, Clone, Copy)]
pub struct RenderedPixel {
    pub color: [Real; 3],
    pub expected_depth: Real,
    /// Sum of quadrature weights; in [0, 1].
    pub opacity: Real,
}

/// The deterministic RNG stream for one pixel/ray of one view. Rendering,
/// depth queries, and test-time exposure fitting all derive their sample
/// draws from this, so a fit sees exactly the quadrature the final render
/// will use.
pub fn pixel_stream(seed: u64, view: usize, x: u32, y: u32) -> rand::rngs::StdRng {
    use rand::SeedableRng;
    rand::rngs::StdRng::seed_from_u64(crate::math::mix_seed(&[
        seed,
        view as u64,
        x as u64,
        y as u64,
    ]))
}

/// One uniform draw inside each of `n` log-spaced bins of
/// `[t_near, t_far]`; strictly ascending. `u` supplies the unit draws.
pub(crate) fn stratified_log_samples(
    t_near: Real,
    t_far: Real,
    n: usize,
    mut u: impl FnMut() -> Real,
) -> Result<Vec<Real>> {
    if t_near <= 0.0 {
        return Err(Error::input("log-spaced sampling requires t_near > 0"));
    }
    if n < 2 {
        return Err(Error::input("need at least 2 samples per ray"));
    }
    let ln_near = t_near.ln();
    let step = (t_far.ln() - ln_near) / n as Real;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = ln_near + step * i as Real;
        out.push((lo + step * u()).exp());
    }
    // The log-bin construction is already ascending; numerical ties at bin
    // boundaries are broken by a tiny nudge so downstream deltas stay > 0.
    for i in 1..n {
        if out[i] <= out[i - 1] {
            out[i] = out[i - 1] * (1.0 + 1e-12);
        }
    }
    Ok(out)
}

/// Stratified sample distances for a ray (log-spaced bins, one uniform draw
/// per bin).
pub fn sample_stratified(ray: &Ray, n: usize, rng: &mut impl Rng) -> Result<Vec<Real>> {
    stratified_log_samples(ray.t_near, ray.t_far, n, || rng.gen::<Real>())
}

/// Segment lengths for ascending samples. The last segment extends to
/// `t_far`, optionally capped at `final_delta_cap`.
pub fn deltas_from(t: &[Real], t_far: Real, final_delta_cap: Option<Real>) -> Vec<Real> {
    let n = t.len();
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n - 1 {
        deltas.push(t[i + 1] - t[i]);
    }
    let mut last = (t_far - t[n - 1]).max(0.0);
    if let Some(cap) = final_delta_cap {
        last = last.min(cap);
    }
    deltas.push(last);
    deltas
}

/// Discrete rendering weights `w_k = T_k (1 - exp(-σ_k δ_k))` with
/// `T_k = exp(-Σ_{j<k} σ_j δ_j)`. Returns `(weights, transmittances)`.
pub fn compute_weights(
    t: &[Real],
    densities: &[Real],
    t_far: Real,
    final_delta_cap: Option<Real>,
) -> Result<(Vec<Real>, Vec<Real>)> {
    if t.len() != densities.len() || t.is_empty() {
        return Err(Error::input("t/density length mismatch"));
    }
    for win in t.windows(2) {
        if win[1] <= win[0] {
            return Err(Error::input("sample distances must be strictly ascending"));
        }
    }
    if densities.iter().any(|&s| s < 0.0) {
        return Err(Error::input("densities must be non-negative"));
    }
    let deltas = deltas_from(t, t_far, final_delta_cap);
    let mut weights = Vec::with_capacity(t.len());
    let mut trans = Vec::with_capacity(t.len());
    let mut optical_depth = 0.0;
    for (k, &sigma) in densities.iter().enumerate() {
        let t_k = (-optical_depth as Real).exp();
        trans.push(t_k);
        let a = sigma * deltas[k];
        weights.push(t_k * (1.0 - (-a).exp()));
        optical_depth += a;
    }
    Ok((weights, trans))
}

impl RaySamples {
    /// Builds samples from raw values; computes deltas, weights, and
    /// transmittances.
    pub fn from_values(
        t: Vec<Real>,
        densities: Vec<Real>,
        radiances: Vec<[Real; 3]>,
        t_far: Real,
        final_delta_cap: Option<Real>,
    ) -> Result<Self> {
        if radiances.len() != t.len() {
            return Err(Error::input("radiance/sample length mismatch"));
        }
        let (weights, transmittances) = compute_weights(&t, &densities, t_far, final_delta_cap)?;
        let deltas = deltas_from(&t, t_far, final_delta_cap);
        Ok(RaySamples { t, deltas, densities, radiances, weights, transmittances })
    }

    /// Samples a field along a ray with stratified log-spaced distances.
    pub fn from_field(
        field: &impl DensityField,
        ray: &Ray,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let t = sample_stratified(ray, n, rng)?;
        let points: Vec<Vec3> = t.iter().map(|&ti| ray.point_at(ti)).collect();
        let (densities, radiances) = field.density_radiance(&points, ray.direction);
        Self::from_values(t, densities, radiances, ray.t_far, None)
    }

    /// Density-only variant for depth queries.
    pub fn from_field_density(
        field: &impl DensityField,
        ray: &Ray,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let t = sample_stratified(ray, n, rng)?;
        let points: Vec<Vec3> = t.iter().map(|&ti| ray.point_at(ti)).collect();
        let densities = field.density(&points);
        let radiances = vec![[0.0; 3]; t.len()];
        Self::from_values(t, densities, radiances, ray.t_far, None)
    }

    pub fn opacity(&self) -> Real {
        self.weights.iter().sum()
    }
}

/// Weight-averaged sample distance, `Σ w_k t_k`. Not normalized by opacity.
pub fn expected_depth(samples: &RaySamples) -> Real {
    samples.weights.iter().zip(&samples.t).map(|(w, t)| w * t).sum()
}

/// Exposure-independent decomposition of a pixel: the weighted surface
/// color `q = Σ w_k c_k` and the sky term. For an affine exposure the final
/// color is exactly `Γ·q + sky_term`.
pub fn composite_decomposed(
    samples: &RaySamples,
    sky: [Real; 3],
    residual_sky: bool,
) -> ([Real; 3], [Real; 3]) {
    let mut q = [0.0; 3];
    let mut opacity = 0.0;
    for (k, &w) in samples.weights.iter().enumerate() {
        for c in 0..3 {
            q[c] += w * samples.radiances[k][c];
        }
        opacity += w;
    }
    let scale = if residual_sky { 1.0 - opacity } else { 1.0 };
    (q, [scale * sky[0], scale * sky[1], scale * sky[2]])
}

/// Composites a pixel: `color = Σ w_k (Γ c_k) + sky term`.
///
/// With `residual_sky` the sky contributes through the leftover
/// transmittance `(1 - Σ w)`; otherwise it is added unconditionally.
pub fn composite_color(
    samples: &RaySamples,
    exposure: &ExposureTransform,
    sky: [Real; 3],
    residual_sky: bool,
) -> RenderedPixel {
    let mut color = [0.0; 3];
    let mut opacity = 0.0;
    for (k, &w) in samples.weights.iter().enumerate() {
        let gc = exposure.apply(samples.radiances[k]);
        for c in 0..3 {
            color[c] += w * gc[c];
        }
        opacity += w;
    }
    let sky_scale = if residual_sky { 1.0 - opacity } else { 1.0 };
    for c in 0..3 {
        color[c] += sky_scale * sky[c];
    }
    RenderedPixel { color, expected_depth: expected_depth(samples), opacity }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn uniform_t(t0: Real, t1: Real, n: usize) -> Vec<Real> {
        // midpoints of n uniform bins
        let step = (t1 - t0) / n as Real;
        (0..n).map(|i| t0 + step * (i as Real + 0.5)).collect()
    }

    #[test]
    fn log_bin_midpoints_match_closed_form() {
        // n = 2 over [1, 100]: centers at 10^0.5 and 10^1.5.
        let t = stratified_log_samples(1.0, 100.0, 2, || 0.5).unwrap();
        assert!((t[0] - (10.0 as Real).sqrt()).abs() < 1e-9);
        assert!((t[1] - (1000.0 as Real).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn stratified_samples_ascend_and_stay_in_bounds() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.7, 42.0).unwrap();
        for seed in 0..20 {
            let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
            let t = sample_stratified(&ray, 64, &mut rng).unwrap();
            for w in t.windows(2) {
                assert!(w[1] > w[0]);
            }
            assert!(t[0] >= ray.t_near && *t.last().unwrap() <= ray.t_far);
        }
    }

    #[test]
    fn stratified_sampling_is_deterministic_under_seed() {
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.5, 30.0).unwrap();
        let mut r1 = rand::rngs::StdRng::seed_from_u64(99);
        let mut r2 = rand::rngs::StdRng::seed_from_u64(99);
        assert_eq!(
            sample_stratified(&ray, 128, &mut r1).unwrap(),
            sample_stratified(&ray, 128, &mut r2).unwrap()
        );
    }

    #[test]
    fn log_sampling_rejects_zero_near() {
        assert!(stratified_log_samples(0.0, 10.0, 8, || 0.5).is_err());
    }

    #[test]
    fn zero_density_gives_zero_weights_full_transmittance() {
        let t = uniform_t(0.0, 4.0, 16);
        let (w, tr) = compute_weights(&t, &vec![0.0; 16], 4.0, None).unwrap();
        assert!(w.iter().all(|&x| x == 0.0));
        assert!(tr.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn opaque_first_sample_takes_all_weight() {
        let t = uniform_t(0.0, 4.0, 8);
        let mut sigma = vec![0.0; 8];
        sigma[0] = 1e4;
        let (w, _) = compute_weights(&t, &sigma, 4.0, None).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-9);
        assert!(w[1..].iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn constant_medium_matches_analytic_transmittance() {
        // σ = 0.5 over [0, 4]: the quadrature telescopes, so accumulated
        // opacity equals 1 - exp(-0.5 · covered length).
        let n = 1024;
        let t = uniform_t(0.0, 4.0, n);
        let (w, _) = compute_weights(&t, &vec![0.5; n], 4.0, None).unwrap();
        let total: Real = w.iter().sum();
        let covered = 4.0 - t[0];
        let expect = 1.0 - (-0.5 * covered as Real).exp();
        assert!((total - expect).abs() < 1e-12);
        assert!((total - (1.0 - (-2.0 as Real).exp())).abs() < 1e-3);
    }

    #[test]
    fn weights_sum_below_one() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.gen_range(2..64);
            let mut t: Vec<Real> = (0..n).map(|_| rng.gen_range(0.01..20.0)).collect();
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            t.dedup_by(|a, b| {
                let close = (*a - *b).abs() < 1e-9;
                close
            });
            if t.len() < 2 {
                continue;
            }
            let sigma: Vec<Real> = (0..t.len()).map(|_| rng.gen_range(0.0..50.0)).collect();
            let (w, _) = compute_weights(&t, &sigma, 25.0, None).unwrap();
            let total: Real = w.iter().sum();
            assert!(total <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn negative_density_is_rejected() {
        let t = uniform_t(0.0, 1.0, 4);
        assert!(compute_weights(&t, &[0.1, -0.2, 0.1, 0.0], 1.0, None).is_err());
    }

    #[test]
    fn empty_ray_composites_sky_exactly() {
        let t = uniform_t(0.1, 5.0, 8);
        let s = RaySamples::from_values(t, vec![0.0; 8], vec![[0.3; 3]; 8], 5.0, None).unwrap();
        let sky = [0.11, 0.55, 0.99];
        let px = composite_color(&s, &ExposureTransform::identity(), sky, true);
        assert_eq!(px.color, sky);
        assert_eq!(px.expected_depth, 0.0);
        assert_eq!(px.opacity, 0.0);
    }

    #[test]
    fn single_opaque_sample_returns_its_radiance() {
        let t = vec![1.0, 7.0];
        let mut sigma = vec![0.0; 2];
        sigma[1] = 1e5;
        let radiances = vec![[0.0; 3], [0.25, 0.5, 0.75]];
        let s = RaySamples::from_values(t, sigma, radiances, 8.0, None).unwrap();
        let px = composite_color(&s, &ExposureTransform::identity(), [0.0; 3], true);
        for c in 0..3 {
            assert!((px.color[c] - [0.25, 0.5, 0.75][c]).abs() < 1e-9);
        }
        assert!((px.expected_depth - 7.0).abs() < 1e-6);
    }

    #[test]
    fn exposure_scales_composited_color_linearly() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(8);
        let n = 32;
        let t = uniform_t(0.2, 9.0, n);
        let sigma: Vec<Real> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let rgb: Vec<[Real; 3]> = (0..n)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        let s = RaySamples::from_values(t, sigma, rgb, 9.0, None).unwrap();
        let ident = composite_color(&s, &ExposureTransform::identity(), [0.0; 3], true);
        let gamma = ExposureTransform::diagonal([2.0, 1.0, 1.0]);
        let scaled = composite_color(&s, &gamma, [0.0; 3], true);
        // sky is zero, so compositing commutes with the exposure matrix
        assert!((scaled.color[0] - 2.0 * ident.color[0]).abs() < 1e-12);
        assert!((scaled.color[1] - ident.color[1]).abs() < 1e-12);
        assert!((scaled.color[2] - ident.color[2]).abs() < 1e-12);
    }

    #[test]
    fn expected_depth_of_step_density_matches_plane_distance() {
        // Opaque wall at t = 6: density steps from 0 to a large value.
        let n = 512;
        let t = uniform_t(0.5, 12.0, n);
        let sigma: Vec<Real> = t.iter().map(|&ti| if ti >= 6.0 { 50.0 } else { 0.0 }).collect();
        let rgb = vec![[0.5; 3]; n];
        let s = RaySamples::from_values(t, sigma, rgb, 12.0, None).unwrap();
        let bin = 11.5 / n as Real;
        let zhat = expected_depth(&s);
        assert!((zhat - 6.0).abs() < 3.0 * bin + 0.02, "zhat = {zhat}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// The weight bound holds for arbitrary sample layouts and
            /// non-negative densities, including saturating ones.
            #[test]
            fn weights_never_sum_above_one(
                raw_t in proptest::collection::vec(0.01f64..50.0, 2..48),
                sigma_scale in 0.0f64..2000.0,
                seed in 0u64..1000,
            ) {
                let mut t: Vec<Real> = raw_t.into_iter().map(|v| v as Real).collect();
                t.sort_by(|a, b| a.partial_cmp(b).unwrap());
                t.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
                prop_assume!(t.len() >= 2);
                let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
                let sigma: Vec<Real> =
                    (0..t.len()).map(|_| rng.gen::<Real>() * sigma_scale as Real).collect();
                let t_far = t.last().unwrap() + 1.0;
                let (w, trans) = compute_weights(&t, &sigma, t_far, None).unwrap();
                let total: Real = w.iter().sum();
                prop_assert!(total <= 1.0 + 1e-9);
                for (tk, wk) in trans.iter().zip(&w) {
                    prop_assert!(*tk >= 0.0 && *tk <= 1.0);
                    prop_assert!(*wk >= 0.0 && *wk <= 1.0 + 1e-12);
                }
            }

            /// Stratified samples stay inside the bounds and ascend for any
            /// valid ray geometry.
            #[test]
            fn stratified_samples_well_formed(
                t_near in 0.01f64..5.0,
                span in 0.1f64..100.0,
                n in 2usize..256,
                seed in 0u64..1000,
            ) {
                let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
                let t = stratified_log_samples(
                    t_near as Real,
                    (t_near + span) as Real,
                    n,
                    || rng.gen::<Real>(),
                )
                .unwrap();
                prop_assert_eq!(t.len(), n);
                prop_assert!(t[0] >= t_near as Real);
                prop_assert!(*t.last().unwrap() <= (t_near + span) as Real + 1e-12);
                for w in t.windows(2) {
                    prop_assert!(w[1] > w[0]);
                }
            }
        }
    }

    #[test]
    fn quadrature_error_halves_with_sample_count() {
        // Stratified sampling of a constant medium: opacity error vs the
        // closed form shrinks as n doubles.
        let ray = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.5, 4.5).unwrap();
        let analytic = 1.0 - (-0.5 * 4.0 as Real).exp();
        let mut errs = Vec::new();
        for &n in &[256usize, 512, 1024] {
            let mut rng = rand::rngs::StdRng::seed_from_u64(77);
            let t = sample_stratified(&ray, n, &mut rng).unwrap();
            let (w, _) = compute_weights(&t, &vec![0.5; n], ray.t_far, None).unwrap();
            let total: Real = w.iter().sum();
            errs.push((total - analytic).abs());
        }
        assert!(errs[1] <= errs[0]);
        assert!(errs[2] <= errs[1]);
        assert!(errs[2] < 1e-3);
    }
}
