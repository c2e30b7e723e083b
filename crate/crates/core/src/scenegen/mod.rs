//! Procedural paired-domain RGB-D corpus: primitive indoor scenes, a
//! photometric domain shift, and on-disk dataset splits.

mod dataset;
mod render;
mod shift;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DepthMap, Image};

pub use dataset::{
    build_dataset, build_dataset_with_labeled, decode_depth, encode_depth, load_sample, DatasetManifest, DatasetSplits,
    Domain, Entry, ImageSource, LabeledSource, Sample, SplitData, MANIFEST_VERSION,
};
pub use render::{render, Camera, Light, Material, Object, Scene, Shape, Vec3};
pub use shift::{apply_domain_shift, ShiftConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Base seed from which dataset sample seeds are derived.
    pub seed: u64,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range of object counts per scene.
    pub n_objects: (usize, usize),
    /// (near, far) depth clamp in meters.
    pub depth_range: (f64, f64),
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            image_size: (128, 160),
            n_objects: (2, 8),
            depth_range: (0.5, 10.0),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 {
            return Err(Error::config(format!("image_size must be positive, got {h}x{w}")));
        }
        let (lo, hi) = self.n_objects;
        if lo > hi {
            return Err(Error::config(format!("n_objects range is empty: [{lo}, {hi}]")));
        }
        let (near, far) = self.depth_range;
        if !(near.is_finite() && far.is_finite() && near > 0.0 && near < far) {
            return Err(Error::config(format!("depth_range needs 0 < near < far, got ({near}, {far})")));
        }
        Ok(())
    }
}

/// Mixes a seed with a stream index into an independent 64-bit seed.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn albedo(rng: &mut ChaCha8Rng) -> Vec3 {
    [rng.random_range(0.15..0.95), rng.random_range(0.15..0.95), rng.random_range(0.15..0.95)]
}

/// Samples a room (floor, back wall, two side walls) with a handful of boxes,
/// spheres and cylinders resting on the floor.
pub fn sample_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5CE7E));
    let (near, far) = spec.depth_range;
    let cam_height = rng.random_range(1.1..1.8);
    let pitch = rng.random_range(0.0f64..14.0).to_radians();
    let wall_z = rng.random_range((near + far) * 0.45..far * 0.95).max(near * 4.0);
    let half_width = rng.random_range(2.0..4.0);
    let checker = |rng: &mut ChaCha8Rng| Material {
        albedo: albedo(rng),
        checker: Some((albedo(rng), rng.random_range(0.4..1.2))),
    };
    let mut objects = vec![
        Object {
            shape: Shape::Plane {
                point: [0.0, 0.0, 0.0],
                normal: [0.0, 1.0, 0.0],
            },
            material: checker(&mut rng),
        },
        Object {
            shape: Shape::Plane {
                point: [0.0, 0.0, wall_z],
                normal: [0.0, 0.0, -1.0],
            },
            material: Material::plain(albedo(&mut rng)),
        },
        Object {
            shape: Shape::Plane {
                point: [-half_width, 0.0, 0.0],
                normal: [1.0, 0.0, 0.0],
            },
            material: Material::plain(albedo(&mut rng)),
        },
        Object {
            shape: Shape::Plane {
                point: [half_width, 0.0, 0.0],
                normal: [-1.0, 0.0, 0.0],
            },
            material: Material::plain(albedo(&mut rng)),
        },
    ];
    let n = rng.random_range(spec.n_objects.0..=spec.n_objects.1);
    for _ in 0..n {
        let size = rng.random_range(0.2..0.8);
        let x = rng.random_range(-half_width + size..half_width - size);
        let z = rng.random_range(1.5f64.min(wall_z - 1.0)..wall_z - size);
        let material = if rng.random_bool(0.3) {
            checker(&mut rng)
        } else {
            Material::plain(albedo(&mut rng))
        };
        let shape = match rng.random_range(0..3) {
            0 => {
                let h = size * rng.random_range(0.5..2.0);
                Shape::Cuboid {
                    center: [x, h, z],
                    half: [size, h, size * rng.random_range(0.5..1.5)],
                    yaw: rng.random_range(0.0..std::f64::consts::PI),
                }
            }
            1 => Shape::Sphere {
                center: [x, size, z],
                radius: size,
            },
            _ => Shape::Cylinder {
                base: [x, 0.0, z],
                radius: size * 0.7,
                height: size * rng.random_range(1.0..3.5),
            },
        };
        objects.push(Object { shape, material });
    }
    Ok(Scene {
        camera: Camera {
            position: [rng.random_range(-0.5..0.5), cam_height, 0.0],
            pitch,
            fov_x: 60f64.to_radians(),
        },
        light: Light {
            direction: render::normalize([
                rng.random_range(-0.6..0.6),
                -1.0,
                rng.random_range(0.2..1.0),
            ]),
            intensity: rng.random_range(0.6..0.9),
            ambient: rng.random_range(0.15..0.3),
        },
        objects,
    })
}

/// Renders the scene sampled from `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<(Image<f32>, DepthMap<f32>)> {
    let scene = sample_scene(seed, spec)?;
    let (h, w) = spec.image_size;
    Ok(render(&scene, h, w, spec.depth_range))
}
