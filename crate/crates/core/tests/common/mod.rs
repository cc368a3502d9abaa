#![allow(dead_code)]

use rand::Rng;
use staterank::pooling::FeatureMap;
use staterank::probedata::{Frame, ProbeDataset};
use staterank::statevec::{EnvState, ObjectState, StateSchema};

pub fn r32(x: f64) -> f64 {
    x as f32 as f64
}

/// Any finite f32, drawn from raw bits (covers subnormals and signed zeros).
pub fn any_finite_f32<R: Rng>(rng: &mut R) -> f32 {
    loop {
        let v = f32::from_bits(rng.gen());
        if v.is_finite() {
            return v;
        }
    }
}

pub fn random_schema<R: Rng>(rng: &mut R) -> StateSchema {
    StateSchema::uniform(
        rng.gen_range(1..=3),
        rng.gen_range(2..=4),
        rng.gen_range(2..=3),
        rng.gen_range(2..=5),
        rng.gen_range(1..=4),
        rng.gen_range(1..=3),
        0.0,
        1.0,
    )
    .unwrap()
}

/// A valid dataset with f32-representable states and arbitrary finite
/// feature bits.
pub fn random_dataset<R: Rng>(rng: &mut R, name: &str) -> ProbeDataset {
    let schema = random_schema(rng);
    let (c, h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=9), rng.gen_range(1..=9));
    let frames = (0..rng.gen_range(1..=4))
        .map(|_| {
            let image_size = (rng.gen_range(8..=300), rng.gen_range(8..=300));
            let mut bboxes = Vec::new();
            let objects = (0..schema.num_objects)
                .map(|_| {
                    let visible = rng.gen_bool(0.7);
                    if visible {
                        let x1 = rng.gen_range(0..image_size.0 - 1) as f64;
                        let y1 = rng.gen_range(0..image_size.1 - 1) as f64;
                        let x2 = r32(rng.gen_range(x1 + 0.5..=image_size.0 as f64));
                        let y2 = r32(rng.gen_range(y1 + 0.5..=image_size.1 as f64));
                        bboxes.push([x1, y1, x2, y2]);
                    } else {
                        bboxes.push([0.0; 4]);
                    }
                    ObjectState {
                        position: [(); 3].map(|_| r32(rng.gen_range(-5.0..5.0))),
                        orientation: [(); 4].map(|_| r32(rng.gen_range(-1.0..1.0))),
                        extent: [(); 3].map(|_| r32(rng.gen_range(0.01..1.0))),
                        material: rng.gen_range(0..schema.num_materials),
                        visible,
                    }
                })
                .collect();
            let env = EnvState {
                lighting: rng.gen_range(0..schema.num_lighting),
                joints: (0..schema.joint_dim).map(|_| r32(rng.gen_range(-3.0..3.0))).collect(),
                ee_pose: (0..schema.ee_dim).map(|_| r32(rng.gen_range(-1.0..1.0))).collect(),
            };
            let data = (0..c * h * w).map(|_| any_finite_f32(rng)).collect();
            Frame { features: FeatureMap::new(c, h, w, data).unwrap(), bboxes, image_size, objects, env }
        })
        .collect();
    ProbeDataset { name: name.to_string(), backbone: format!("random-{name}"), schema, split_seed: rng.gen(), frames }
}

/// Bitwise dataset equality (distinguishes `-0.0` from `0.0`).
pub fn bit_equal(a: &ProbeDataset, b: &ProbeDataset) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a == b && a.frames.iter().zip(&b.frames).all(|(x, y)| bits(&x.features.data) == bits(&y.features.data))
}
