use radfield::eval::EvalConfig;
use radfield::field::read_checkpoint;
use radfield::render::RaySamples;
use radfield::synth::{read_bundle, split_scene, SplitSetting};
use rand::SeedableRng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bundle = read_bundle(std::path::Path::new(&args[1])).unwrap();
    let (split, _) = split_scene(&bundle, SplitSetting::HeldOutViewpoints { fraction: 0.2, radius: 1.0 }, 7).unwrap();
    let (params, _, _) = read_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let cfg = EvalConfig { samples_per_ray: 288, ..EvalConfig::default() };
    // buckets: z range -> (n, signed err sum, |err| sum, opacity sum, hits)
    let mut buckets = vec![(0usize, 0.0f64, 0.0f64, 0.0f64, 0usize); 7];
    for (i, s) in split.test.lidar.iter().enumerate() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(i as u64);
        let samples = RaySamples::from_field_density(&params, &s.ray, cfg.samples_per_ray, &mut rng).unwrap();
        let zhat: f64 = samples.weights.iter().zip(&samples.t).map(|(w,t)| w*t).sum();
        let op = samples.opacity();
        let b = ((s.z / 2.0) as usize).min(6);
        buckets[b].0 += 1;
        buckets[b].1 += zhat - s.z;
        buckets[b].2 += (zhat - s.z).abs();
        buckets[b].3 += op;
        if (zhat - s.z).abs() < 0.1 { buckets[b].4 += 1; }
    }
    for (i, (n, serr, aerr, op, hits)) in buckets.iter().enumerate() {
        if *n > 0 {
            println!("z [{:2},{:2}): n={:5} acc={:.3} signed={:+.3} abs={:.3} opacity={:.4}",
                i*2, i*2+2, n, *hits as f64 / *n as f64, serr / *n as f64, aerr / *n as f64, op / *n as f64);
        }
    }
}
