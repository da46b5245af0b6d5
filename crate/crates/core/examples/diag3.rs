use radfield::field::read_checkpoint;
use radfield::losses::*;
use radfield::render::sample_stratified;
use radfield::synth::{read_bundle, split_scene, SplitSetting};
use radfield::train::{adam_step, AdamState};
use rand::SeedableRng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bundle = read_bundle(std::path::Path::new(&args[1])).unwrap();
    let (split, _) = split_scene(&bundle, SplitSetting::HeldOutViewpoints { fraction: 0.2, radius: 1.0 }, 7).unwrap();
    let (mut params, _, _) = read_checkpoint(std::path::Path::new(&args[2])).unwrap();

    // furniture train rays (short range)
    let furn: Vec<_> = split.train.lidar.iter().filter(|s| s.z < 5.0).collect();
    println!("train lidar: {} total, {} short-range (<5m)", split.train.lidar.len(), furn.len());

    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let mut rays = Vec::new();
    for s in furn.iter().take(64) {
        let t = sample_stratified(&s.ray, 192, &mut rng).unwrap();
        rays.push(BatchRay { ray: s.ray, t, supervision: RaySupervision::Lidar { z: s.z } });
    }
    let batch = PreparedBatch { rays };
    let opts = LossOptions { weights: LossWeights::default(), epsilon: 0.2, residual_sky: true };
    let out = total_loss_and_grads(&params, &batch, &opts, true).unwrap();
    println!("furniture-only batch losses: depth={:.4} near={:.4} empty={:.6}", out.report.depth, out.report.near, out.report.empty);
    let gnorm: f64 = out.grads.iter().flatten().flat_map(|t| &t.data).map(|g| g*g).sum::<f64>().sqrt();
    println!("grad norm {gnorm:.4}");

    // keep training ONLY on this batch: does density form?
    let mut adam = AdamState::new(&params);
    for step in 0..300 {
        let out = total_loss_and_grads(&params, &batch, &opts, true).unwrap();
        adam_step(&mut params, &out.grads, &mut adam, 2e-3).unwrap();
        if step % 100 == 99 {
            println!("step {step}: near={:.5} depth={:.5}", out.report.near, out.report.depth);
        }
    }
    // re-measure zhat on one ray
    let s = furn[0];
    let mut rng = rand::rngs::StdRng::seed_from_u64(9);
    let samples = radfield::render::RaySamples::from_field_density(&params, &s.ray, 192, &mut rng).unwrap();
    let zhat: f64 = samples.weights.iter().zip(&samples.t).map(|(w,t)| w*t).sum();
    println!("after focused training: z={:.3} zhat={:.3} opacity={:.3}", s.z, zhat, samples.opacity());
}
