//! Fixtures shared by the benchmarks.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synctalk_core::face_sync::ConditioningPipeline;
use synctalk_core::synth_scene::{generate_scene, SceneSpec};
use synctalk_core::{ConditioningFeatures, FieldConfig, RadianceField, Ray, TrainingSample};

/// Default-sized field with randomized tables.
pub fn field(seed: u64) -> RadianceField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = RadianceField::new(FieldConfig::default(), &mut rng).expect("default config is valid");
    f.encoder.init_uniform(&mut rng, 1e-2);
    f
}

pub fn points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect()
}

/// Rays from a ring of origins through the unit box.
pub fn rays(n: usize, seed: u64) -> Vec<Ray> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let o = Vector3::new(1.5 * a.cos(), rng.random_range(-0.2..0.2), 1.5 * a.sin());
            let t = Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3));
            Ray::new(o, (t - o).normalize(), 0.0, 4.0).expect("unit direction")
        })
        .collect()
}

pub fn cond() -> ConditioningFeatures {
    let d = FieldConfig::default();
    ConditioningFeatures::zeros(d.lip_width, d.expr_width)
}

/// Ten frames of the default synthetic scene.
pub fn samples() -> Vec<TrainingSample> {
    let spec = SceneSpec {
        frames: 10,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec, 0).expect("default scene");
    let lip = FieldConfig::default().lip_width;
    scene
        .training_samples(spec.width, spec.height, &ConditioningPipeline::new(lip))
        .expect("default scene renders")
}
