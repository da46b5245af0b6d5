use radfield::math::{dense_forward, dense_backward, Tensor};
use radfield::field::{FieldParams, FieldConfig, SceneNorm, GraphBuilder};
use radfield::tape::Tape;
use std::time::Instant;

fn main() {
    // raw dense throughput
    let w = Tensor::from_vec(32, 48, (0..32*48).map(|i| (i as f64).sin()*0.1).collect());
    let b = Tensor::zeros(32, 1);
    let x = Tensor::from_vec(2048, 48, (0..2048*48).map(|i| (i as f64).cos()).collect());
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 {
        let y = dense_forward(&w, &b, &x);
        acc += y.data[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 100.0 * 2048.0 * 32.0 * 48.0 * 2.0;
    println!("dense fwd: {:.2} GFLOP/s ({acc})", flops / dt / 1e9);

    let dy = Tensor::from_vec(2048, 32, vec![0.3; 2048*32]);
    let t0 = Instant::now();
    for _ in 0..100 {
        let mut dw = Tensor::zeros(32, 48);
        let mut db = Tensor::zeros(32, 1);
        let dx = dense_backward(&w, &x, &dy, &mut dw, &mut db);
        acc += dx.data[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("dense bwd: {:.2} GFLOP/s ({acc})", 2.0 * flops / dt / 1e9);

    // full chunk graph build + backward
    let params = FieldParams::init(FieldConfig {
        pos_freqs: 8, hidden_width: 32, hidden_depth: 2, color_width: 16,
        sky_width: 16, sky_depth: 2, exposure_dim: 4, density_bias: -2.5,
        ..FieldConfig::default()
    }, SceneNorm::identity(), 8, 1).unwrap();
    use radfield::losses::*;
    use radfield::geometry::Ray;
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    let mut rays = Vec::new();
    for i in 0..1024 {
        let ray = Ray::new([0.0,0.0,1.0],[rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.0], 0.3, 45.0).unwrap();
        let t = radfield::render::sample_stratified(&ray, 128, &mut rng).unwrap();
        let s = if i % 2 == 0 {
            RaySupervision::Camera { image_id: i % 8, target: [0.5;3], is_sky: i % 4 == 0 }
        } else {
            RaySupervision::Lidar { z: rng.gen_range(2.0..30.0) }
        };
        rays.push(BatchRay { ray, t, supervision: s });
    }
    let batch = PreparedBatch { rays };
    let opts = LossOptions { weights: LossWeights::default(), epsilon: 1.0, residual_sky: true };
    let t0 = Instant::now();
    let out = total_loss_and_grads(&params, &batch, &opts, true).unwrap();
    println!("1 step fwd+bwd (1024 rays x 128): {:.3} s  total={}", t0.elapsed().as_secs_f64(), out.report.total);
    let t0 = Instant::now();
    let out2 = total_loss_and_grads(&params, &batch, &opts, false).unwrap();
    println!("1 step fwd only: {:.3} s total={}", t0.elapsed().as_secs_f64(), out2.report.total);

    // encoding cost
    let pts: Vec<[f64;3]> = (0..131072).map(|i| [(i as f64*0.001).sin(), 0.3, -0.2]).collect();
    let mut tape = Tape::new(params.set.len());
    let gb = GraphBuilder::new(&params);
    let t0 = Instant::now();
    let node = gb.encoded_positions(&mut tape, &pts);
    println!("encode 131k pts: {:.3} s (len {})", t0.elapsed().as_secs_f64(), tape.value(node).len());
}
