use radfield::eval::{expected_depths, EvalConfig};
use radfield::field::read_checkpoint;
use radfield::synth::{read_bundle, split_scene, SplitSetting};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let bundle = read_bundle(std::path::Path::new(&args[1])).unwrap();
    let (split, _) = split_scene(&bundle, SplitSetting::HeldOutViewpoints { fraction: 0.2, radius: 1.0 }, 7).unwrap();
    let (params, _, _) = read_checkpoint(std::path::Path::new(&args[2])).unwrap();
    let cfg = EvalConfig { samples_per_ray: 160, ..EvalConfig::default() };
    let zhat = expected_depths(&params, &split.test.lidar, &cfg);
    let mut buckets = vec![(0usize, 0usize, 0.0f64); 7];
    for (s, zh) in split.test.lidar.iter().zip(&zhat) {
        let b = ((s.z / 2.0) as usize).min(6);
        let err = (zh - s.z).abs();
        buckets[b].1 += 1;
        buckets[b].2 += err;
        if err < 0.1 { buckets[b].0 += 1; }
    }
    for (i, (hit, n, errsum)) in buckets.iter().enumerate() {
        if *n > 0 {
            println!("z in [{:2}, {:2}): n={:5} acc={:.3} mean_err={:.3}", i*2, i*2+2, n, *hit as f64 / *n as f64, errsum / *n as f64);
        }
    }
    // overall
    let total: usize = buckets.iter().map(|b| b.1).sum();
    let hits: usize = buckets.iter().map(|b| b.0).sum();
    println!("overall acc {:.3} over {} rays", hits as f64 / total as f64, total);
}
