use radfield::eval::EvalConfig;
use radfield::field::read_checkpoint;
use radfield::render::{DensityField, RaySamples};
use radfield::synth::{read_bundle, split_scene, SplitSetting};
use rand::SeedableRng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bundle = read_bundle(std::path::Path::new(&args[1])).unwrap();
    let (split, _) = split_scene(&bundle, SplitSetting::HeldOutViewpoints { fraction: 0.2, radius: 1.0 }, 7).unwrap();
    let (params, _, _) = read_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let cfg = EvalConfig { samples_per_ray: 256, ..EvalConfig::default() };
    let mut shown = 0;
    for s in &split.test.lidar {
        if s.z < 8.5 || s.z > 10.0 || shown >= 3 { if shown >= 3 { break; } continue; }
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let samples = RaySamples::from_field_density(&params, &s.ray, 256, &mut rng).unwrap();
        let zhat: f64 = samples.weights.iter().zip(&samples.t).map(|(w,t)| w*t).sum();
        println!("ray origin {:?} dir {:?} z={:.3} zhat={:.3} opacity={:.3}", s.ray.origin, s.ray.direction, s.z, zhat, samples.opacity());
        // density profile coarse
        print!("  sigma(t): ");
        for k in (0..samples.t.len()).step_by(16) {
            print!("{:.1}@{:.1} ", samples.densities[k], samples.t[k]);
        }
        println!();
        // weight concentration
        let mut idx: Vec<usize> = (0..samples.t.len()).collect();
        idx.sort_by(|&a,&b| samples.weights[b].partial_cmp(&samples.weights[a]).unwrap());
        print!("  top w: ");
        for &k in idx.iter().take(5) { print!("{:.2}@t={:.2} ", samples.weights[k], samples.t[k]); }
        println!();
        // count train lidar near this point
        let p = radfield::geometry::lidar_point(s);
        let near_train = split.train.lidar.iter().filter(|q| {
            let pq = radfield::geometry::lidar_point(q);
            radfield::math::norm(radfield::math::sub(p, pq)) < 0.5
        }).count();
        println!("  train lidar points within 0.5m of gt point: {near_train}");
        shown += 1;
    }
}
