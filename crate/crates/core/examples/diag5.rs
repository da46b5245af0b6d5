use radfield::eval::EvalConfig;
use radfield::field::read_checkpoint;
use radfield::geometry::lidar_point;
use radfield::render::RaySamples;
use radfield::synth::{read_bundle, split_scene, SplitSetting};
use rand::SeedableRng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bundle = read_bundle(std::path::Path::new(&args[1])).unwrap();
    let (split, _) = split_scene(&bundle, SplitSetting::HeldOutViewpoints { fraction: 0.2, radius: 1.0 }, 7).unwrap();
    let (params, _, _) = read_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let cfg = EvalConfig { samples_per_ray: 256, ..EvalConfig::default() };
    // classes: 0 ground, 1 vertical surface, split by |elevation|
    let mut cls = vec![(0usize, 0usize, 0.0f64); 6];
    for (i, s) in split.test.lidar.iter().enumerate() {
        let p = lidar_point(s);
        let ground = p[2] < 0.01;
        let elev_deg = s.ray.direction[2].asin().to_degrees();
        let band = if elev_deg < -10.0 { 0 } else if elev_deg < -4.0 { 1 } else { 2 };
        let idx = if ground { band } else { 3 + band };
        let mut rng = rand::rngs::StdRng::seed_from_u64(i as u64);
        let samples = RaySamples::from_field_density(&params, &s.ray, cfg.samples_per_ray, &mut rng).unwrap();
        let zhat: f64 = samples.weights.iter().zip(&samples.t).map(|(w,t)| w*t).sum();
        cls[idx].1 += 1;
        cls[idx].2 += (zhat - s.z).abs();
        if (zhat - s.z).abs() < 0.1 { cls[idx].0 += 1; }
    }
    let names = ["ground elev<-10", "ground -10..-4", "ground -4..", "vert elev<-10", "vert -10..-4", "vert -4.."];
    for (name, (hit, n, err)) in names.iter().zip(&cls) {
        if *n > 0 {
            println!("{name:16} n={:5} acc={:.3} abs_err={:.3}", n, *hit as f64 / *n as f64, err / *n as f64);
        }
    }
}
