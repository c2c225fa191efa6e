//! Seeded synthetic motion corpus: four classes over a 25-joint humanoid.
//! Classes 2 and 3 are exact temporal reversals of each other, so a model
//! that ignores frame order cannot tell them apart.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::preprocess::derive_seed;
use crate::skeleton::SkeletonSequence;

pub const SYNTH_CLASSES: usize = 4;
pub const SYNTH_JOINTS: usize = 25;

/// Right wrist / right hand (zero-based).
const RIGHT_HAND: [usize; 2] = [10, 11];
/// Left ankle / left foot.
const LEFT_FOOT: [usize; 2] = [14, 15];

/// Rough standing pose for the 25-joint layout (x, y, z).
fn base_pose() -> [[f64; 3]; SYNTH_JOINTS] {
    [
        [0.0, 0.0, 0.0],    // 0 base of spine
        [0.0, 0.3, 0.0],    // 1 middle of spine
        [0.0, 0.6, 0.0],    // 2 neck
        [0.0, 0.75, 0.0],   // 3 head
        [-0.2, 0.55, 0.0],  // 4 left shoulder
        [-0.35, 0.35, 0.0], // 5 left elbow
        [-0.45, 0.15, 0.0], // 6 left wrist
        [-0.5, 0.05, 0.0],  // 7 left hand
        [0.2, 0.55, 0.0],   // 8 right shoulder
        [0.35, 0.35, 0.0],  // 9 right elbow
        [0.45, 0.15, 0.0],  // 10 right wrist
        [0.5, 0.05, 0.0],   // 11 right hand
        [-0.1, -0.05, 0.0], // 12 left hip
        [-0.12, -0.45, 0.0],// 13 left knee
        [-0.13, -0.85, 0.0],// 14 left ankle
        [-0.14, -0.95, 0.1],// 15 left foot
        [0.1, -0.05, 0.0],  // 16 right hip
        [0.12, -0.45, 0.0], // 17 right knee
        [0.13, -0.85, 0.0], // 18 right ankle
        [0.14, -0.95, 0.1], // 19 right foot
        [0.0, 0.45, 0.0],   // 20 spine shoulder
        [-0.52, 0.0, 0.02], // 21 left hand tip
        [-0.48, 0.1, 0.05], // 22 left thumb
        [0.52, 0.0, 0.02],  // 23 right hand tip
        [0.48, 0.1, 0.05],  // 24 right thumb
    ]
}

/// Frames for one sample of `class`, with per-sample pose jitter.
fn trajectory(class: usize, frames: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let mut pose = base_pose();
    for p in pose.iter_mut() {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.03..0.03);
        }
    }
    let build = |phase: &dyn Fn(usize, &mut [[f64; 3]; SYNTH_JOINTS])| -> Vec<f64> {
        let mut out = Vec::with_capacity(frames * SYNTH_JOINTS * 3);
        for t in 0..frames {
            let mut frame = pose;
            phase(t, &mut frame);
            for p in &frame {
                out.extend_from_slice(p);
            }
        }
        out
    };
    let progress = |t: usize| t as f64 / (frames - 1).max(1) as f64;
    match class {
        // right-hand raise: hand sweeps upward over the clip
        0 => build(&|t, f| {
            for &j in &RIGHT_HAND {
                f[j][1] += 0.8 * progress(t);
            }
        }),
        // left-foot swing: one full forward/backward cycle
        1 => build(&|t, f| {
            let s = (progress(t) * std::f64::consts::TAU).sin();
            for &j in &LEFT_FOOT {
                f[j][2] += 0.4 * s;
            }
        }),
        // forward punch: hand moves linearly along z
        2 => build(&|t, f| {
            for &j in &RIGHT_HAND {
                f[j][2] += 0.8 * progress(t);
            }
        }),
        // the same punch played backwards: identical frame multiset
        3 => {
            let fwd = build(&|t, f| {
                for &j in &RIGHT_HAND {
                    f[j][2] += 0.8 * progress(t);
                }
            });
            let stride = SYNTH_JOINTS * 3;
            let mut rev = Vec::with_capacity(fwd.len());
            for t in (0..frames).rev() {
                rev.extend_from_slice(&fwd[t * stride..(t + 1) * stride]);
            }
            rev
        }
        _ => panic!("class out of range"),
    }
}

/// `per_class` samples of each of the four classes, `frames` frames each.
/// Fully determined by `seed`; subjects cycle so protocol splits by subject
/// stay balanced.
pub fn generate(per_class: usize, frames: usize, seed: u64) -> Vec<SkeletonSequence> {
    let mut out = Vec::with_capacity(per_class * SYNTH_CLASSES);
    for class in 0..SYNTH_CLASSES {
        for i in 0..per_class {
            let id = (class * per_class + i) as u64;
            let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, id, 0));
            let coords = trajectory(class, frames, &mut rng);
            out.push(SkeletonSequence {
                frames,
                joints: SYNTH_JOINTS,
                coords: coords.into_iter().map(|v| v as f32).collect(),
                label: class,
                subject_id: (id % 8 + 1) as u32,
                camera_id: 1,
                setup_id: 1,
                body_id: 0,
                source: format!("synth-c{class}-{i}"),
            });
        }
    }
    out
}
