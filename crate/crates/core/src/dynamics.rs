//! Joint dynamics representation: velocity, part-relative fine-grained
//! movement, and the four-branch embedding that fuses them.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_weight, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Maps each joint to the reference joint of its body part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BodyPartition {
    pub ref_of: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionPreset {
    /// Torso, left/right arm, left/right leg for the NTU 25-joint layout.
    Fine5,
    /// One part: every joint relative to the spine joint.
    Coarse1,
    /// Fine-grained branches disabled.
    None,
}

impl BodyPartition {
    /// NTU 25-joint five-part layout. One-based groups:
    /// torso {1,2,3,4,21} ref 2; left arm {5,6,7,8,22,23} ref 8;
    /// right arm {9,10,11,12,24,25} ref 12; left leg {13,14,15,16} ref 14;
    /// right leg {17,18,19,20} ref 18.
    pub fn fine5() -> Self {
        let groups: [(&[usize], usize); 5] = [
            (&[1, 2, 3, 4, 21], 2),
            (&[5, 6, 7, 8, 22, 23], 8),
            (&[9, 10, 11, 12, 24, 25], 12),
            (&[13, 14, 15, 16], 14),
            (&[17, 18, 19, 20], 18),
        ];
        let mut ref_of = vec![usize::MAX; 25];
        for (joints, r) in groups {
            for &j in joints {
                ref_of[j - 1] = r - 1;
            }
        }
        assert!(ref_of.iter().all(|&r| r < 25));
        BodyPartition { ref_of }
    }

    pub fn coarse1(joints: usize, reference: usize) -> Self {
        BodyPartition {
            ref_of: vec![reference; joints],
        }
    }

    pub fn from_preset(preset: PartitionPreset, joints: usize, reference: usize) -> Result<Option<Self>> {
        match preset {
            PartitionPreset::Fine5 => {
                if joints != 25 {
                    return Err(Error::Config(format!(
                        "fine5 partition requires 25 joints, got {joints}"
                    )));
                }
                Ok(Some(Self::fine5()))
            }
            PartitionPreset::Coarse1 => Ok(Some(Self::coarse1(joints, reference))),
            PartitionPreset::None => Ok(None),
        }
    }
}

/// v_t = p_t - p_(t-1), with v for the first frame defined as zero.
/// Input/output are [N, T, J, 3] flattened.
pub fn compute_velocity(data: &[f64], n: usize, t: usize, j: usize) -> Vec<f64> {
    let frame = j * 3;
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for ti in 1..t {
            let cur = (b * t + ti) * frame;
            let prev = (b * t + ti - 1) * frame;
            for k in 0..frame {
                out[cur + k] = data[cur + k] - data[prev + k];
            }
        }
    }
    out
}

/// Each joint relative to its body part's reference joint within the same
/// frame; the reference joint itself maps to zero.
pub fn compute_fine_grained(
    data: &[f64],
    n: usize,
    t: usize,
    j: usize,
    part: &BodyPartition,
) -> Result<Vec<f64>> {
    if part.ref_of.len() != j {
        return Err(Error::Config(format!(
            "partition covers {} joints but data has {j}",
            part.ref_of.len()
        )));
    }
    let mut out = vec![0.0; data.len()];
    for b in 0..n {
        for ti in 0..t {
            let base = (b * t + ti) * j * 3;
            for ji in 0..j {
                let r = part.ref_of[ji];
                for k in 0..3 {
                    out[base + ji * 3 + k] = data[base + ji * 3 + k] - data[base + r * 3 + k];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchKind {
    Position,
    Velocity,
    FinePosition,
    FineVelocity,
}

impl BranchKind {
    pub fn name(self) -> &'static str {
        match self {
            BranchKind::Position => "pos",
            BranchKind::Velocity => "vel",
            BranchKind::FinePosition => "fine_pos",
            BranchKind::FineVelocity => "fine_vel",
        }
    }
}

#[derive(Debug)]
struct Branch {
    kind: BranchKind,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Four-branch dynamics embedder. Each enabled branch is a two-layer FC
/// (3 -> c1 -> c1, relu after both layers); branch outputs are summed.
#[derive(Debug)]
pub struct DynamicsEmbedder {
    pub c1: usize,
    branches: Vec<Branch>,
}

impl DynamicsEmbedder {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        c1: usize,
        kinds: &[BranchKind],
        partition: Option<&BodyPartition>,
    ) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("at least one dynamics branch required".into()));
        }
        let fine = kinds
            .iter()
            .any(|k| matches!(k, BranchKind::FinePosition | BranchKind::FineVelocity));
        if fine && partition.is_none() {
            return Err(Error::Config(
                "fine-grained branches enabled but body partition is none".into(),
            ));
        }
        let mut branches = Vec::new();
        for &kind in kinds {
            let p = format!("{prefix}.{}", kind.name());
            branches.push(Branch {
                kind,
                w1: params.add(&format!("{p}.w1"), init_weight(rng, &[c1, 3])),
                b1: params.add(&format!("{p}.b1"), Tensor::zeros(&[c1])),
                w2: params.add(&format!("{p}.w2"), init_weight(rng, &[c1, c1])),
                b2: params.add(&format!("{p}.b2"), Tensor::zeros(&[c1])),
            });
        }
        Ok(DynamicsEmbedder { c1, branches })
    }

    pub fn kinds(&self) -> Vec<BranchKind> {
        self.branches.iter().map(|b| b.kind).collect()
    }

    /// clip is [N, T, J, 3] flattened. Returns a [N, T, J, c1] node.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        clip: &[f64],
        n: usize,
        t: usize,
        j: usize,
        partition: Option<&BodyPartition>,
    ) -> Result<Var> {
        if clip.len() != n * t * j * 3 {
            return Err(Error::Config(format!(
                "clip has {} values, expected {}",
                clip.len(),
                n * t * j * 3
            )));
        }
        let vel = compute_velocity(clip, n, t, j);
        let mut sum: Option<Var> = None;
        for br in &self.branches {
            let data = match br.kind {
                BranchKind::Position => clip.to_vec(),
                BranchKind::Velocity => vel.clone(),
                BranchKind::FinePosition => {
                    let p = partition.ok_or_else(|| {
                        Error::Config("fine-grained branch requires a body partition".into())
                    })?;
                    compute_fine_grained(clip, n, t, j, p)?
                }
                BranchKind::FineVelocity => {
                    let p = partition.ok_or_else(|| {
                        Error::Config("fine-grained branch requires a body partition".into())
                    })?;
                    compute_fine_grained(&vel, n, t, j, p)?
                }
            };
            let x = g.constant(Tensor::new(vec![n, t, j, 3], data)?);
            let w1 = g.param(params, br.w1);
            let b1 = g.param(params, br.b1);
            let h = g.affine(x, w1, Some(b1))?;
            let h = g.relu(h);
            let w2 = g.param(params, br.w2);
            let b2 = g.param(params, br.b2);
            let z = g.affine(h, w2, Some(b2))?;
            let z = g.relu(z);
            sum = Some(match sum {
                None => z,
                Some(s) => g.add(s, z)?,
            });
        }
        Ok(sum.unwrap())
    }
}
