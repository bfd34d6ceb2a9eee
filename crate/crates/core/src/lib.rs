//! Numerical core of an audio-driven talking-head renderer: tri-plane hash
//! encoding, a conditioned radiance field, volume rendering, pose
//! stabilization, audio-visual and expression conditioning, portrait
//! compositing, training and evaluation.

#[cfg(test)]
macro_rules! assert_close {
    ($a:expr, $b:expr, $tol:expr) => {{
        let (a, b, tol): (f64, f64, f64) = ($a, $b, $tol);
        assert!(
            (a - b).abs() <= tol,
            "{} = {a} vs {} = {b} (|diff| = {:e} > {tol:e})",
            stringify!($a),
            stringify!($b),
            (a - b).abs()
        );
    }};
}

pub mod camera;
pub mod error;
pub mod face_sync;
pub mod frame;
pub mod hash_encoding;
pub mod head_sync;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod occupancy;
pub mod optim;
pub mod portrait_sync;
pub mod radiance_field;
pub mod synth_scene;
pub mod trainer;
pub mod volume_renderer;

pub use camera::{Aabb, CameraIntrinsics, HeadPose};
pub use error::{Error, Result};
pub use frame::{FrameBuffer, RegionMask};
pub use hash_encoding::{GridConfig, HashGrid2D, TriPlaneEncoder};
pub use nn::Mlp;
pub use radiance_field::{ConditioningFeatures, FieldConfig, FieldGradients, RadianceField};
pub use trainer::{Stage, TrainConfig, Trainer, TrainingSample};
pub use volume_renderer::{Ray, RayOutput, RenderOptions, Sampling};
