use radfield::eval::{render_view, EvalConfig};
use radfield::field::{ExposureTransform, FieldConfig};
use radfield::synth::{default_scene, generate, SceneBuild};
use radfield::train::{train, fit_test_exposure, TrainConfig};
use radfield::io::MaskImage;
use rand::{Rng, SeedableRng};

fn main() {
    let build = SceneBuild { seed: 5, camera_count: 4, resolution: 16, lidar_azimuths: 24 };
    let scene = generate(default_scene(&build)).unwrap().full_train_set();
    let config = TrainConfig {
        warmup_epochs: 2, main_epochs: 6, batch_rays: 128, samples_per_ray: 32,
        field: FieldConfig::tiny(8), ..TrainConfig::default()
    };
    let out = train(&scene, &config).unwrap();
    let mut params = out.params.clone();
    let mut rng = rand::rngs::StdRng::seed_from_u64(41);
    for v in &mut params.set.get_mut("exposure.decoder.w").data {
        *v = rng.gen_range(-1.0..1.0);
    }
    params.set.get_mut("exposure.decoder.b").data.fill(0.0);
    let cam = &scene.cameras[0];
    let cfg = EvalConfig { samples_per_ray: 96, seed: 9, ..EvalConfig::default() };
    let base = render_view(&params, cam, &ExposureTransform::identity(), (scene.t_near, scene.t_far), &cfg).unwrap();
    let gain = [1.2, 1.0, 0.9];
    let mut target = base.clone();
    for px in &mut target.data {
        for c in 0..3 { px[c] = (px[c] * gain[c]).clamp(0.0, 1.0); }
    }
    // how much clipping?
    let clipped = base.data.iter().filter(|p| p[0] * 1.2 > 1.0).count();
    println!("clipped red pixels: {} / {}", clipped, base.data.len());
    let mask = MaskImage { width: cam.width, height: cam.height, data: vec![true; (cam.width*cam.height) as usize] };
    let code = fit_test_exposure(&params, cam, &target, &mask, (scene.t_near, scene.t_far), 96, 9).unwrap();
    println!("code {code:?}");
    let gamma = params.decode_exposure_from_code(&code);
    println!("gamma diag: {:.4} {:.4} {:.4}", gamma.matrix[0][0], gamma.matrix[1][1], gamma.matrix[2][2]);
    // what does the decoder span look like for the red-gain direction?
    let wd = params.set.get("exposure.decoder.w");
    println!("wd row for [0][0]: {:?}", wd.row(0));
}
