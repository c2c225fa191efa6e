//! The full multi-clip-length network: shared (or per-length) dynamics and
//! joint-graph trunk, one frame-level head per clip length, fused scoring.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{softmax_vec, BatchNormState, Graph, Var};
use crate::dynamics::{BodyPartition, BranchKind, DynamicsEmbedder, PartitionPreset};
use crate::error::{Error, Result};
use crate::frame_temporal::{FrameHeadConfig, FrameLevelHead};
use crate::joint_graph::{JointGraphConfig, JointGraphModule};
use crate::params::ParamSet;
use crate::preprocess::NTU_REFERENCE_JOINT;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub classes: usize,
    pub joints: usize,
    /// Clip lengths; one classification head per entry.
    pub scales: Vec<usize>,
    /// When false, every clip length gets its own trunk as well.
    pub share_trunk: bool,
    pub c1: usize,
    pub c2: usize,
    pub gcn_dims: Vec<usize>,
    pub c4: usize,
    pub kernel: usize,
    pub fi_hidden: usize,
    pub branches: Vec<BranchKind>,
    pub partition: PartitionPreset,
    pub reference_joint: usize,
    pub graph_uses_joint_type: bool,
    pub passing_uses_joint_type: bool,
    pub use_frame_index: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 120,
            joints: 25,
            scales: vec![15, 20, 25],
            share_trunk: true,
            c1: 64,
            c2: 256,
            gcn_dims: vec![128, 256, 256],
            c4: 512,
            kernel: 3,
            fi_hidden: 64,
            branches: vec![
                BranchKind::Position,
                BranchKind::Velocity,
                BranchKind::FinePosition,
                BranchKind::FineVelocity,
            ],
            partition: PartitionPreset::Fine5,
            reference_joint: NTU_REFERENCE_JOINT,
            graph_uses_joint_type: true,
            passing_uses_joint_type: true,
            use_frame_index: true,
        }
    }
}

impl ModelConfig {
    /// Single-clip-length variant.
    pub fn single_scale() -> Self {
        ModelConfig {
            scales: vec![20],
            ..Default::default()
        }
    }

    pub fn c3(&self) -> usize {
        *self.gcn_dims.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.joints == 0 {
            return Err(Error::Config("classes and joints must be positive".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("at least one clip length required".into()));
        }
        let mut s = self.scales.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.scales.len() || s.contains(&0) {
            return Err(Error::Config("clip lengths must be positive and distinct".into()));
        }
        if self.gcn_dims.is_empty() {
            return Err(Error::Config("at least one graph conv layer required".into()));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("at least one dynamics branch required".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("temporal kernel width must be odd".into()));
        }
        if self.reference_joint >= self.joints {
            return Err(Error::Config("reference joint out of range".into()));
        }
        Ok(())
    }
}

struct Trunk {
    dr: DynamicsEmbedder,
    jl: JointGraphModule,
}

/// Weights plus the module stack built over them.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub partition: Option<BodyPartition>,
    trunks: Vec<Trunk>,
    heads: Vec<FrameLevelHead>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let partition =
            BodyPartition::from_preset(cfg.partition, cfg.joints, cfg.reference_joint)?;
        let jl_cfg = JointGraphConfig {
            c1: cfg.c1,
            c2: cfg.c2,
            gcn_dims: cfg.gcn_dims.clone(),
            graph_uses_joint_type: cfg.graph_uses_joint_type,
            passing_uses_joint_type: cfg.passing_uses_joint_type,
        };
        let n_trunks = if cfg.share_trunk { 1 } else { cfg.scales.len() };
        let mut trunks = Vec::new();
        for i in 0..n_trunks {
            let (dp, jp) = if cfg.share_trunk {
                ("dr".to_string(), "jl".to_string())
            } else {
                let t = cfg.scales[i];
                (format!("t{t}.dr"), format!("t{t}.jl"))
            };
            trunks.push(Trunk {
                dr: DynamicsEmbedder::init(
                    &mut params,
                    &mut rng,
                    &dp,
                    cfg.c1,
                    &cfg.branches,
                    partition.as_ref(),
                )?,
                jl: JointGraphModule::init(&mut params, &mut rng, &jp, cfg.joints, &jl_cfg)?,
            });
        }
        let mut heads = Vec::new();
        for &t in &cfg.scales {
            let hc = FrameHeadConfig {
                frames: t,
                c3: cfg.c3(),
                c4: cfg.c4,
                classes: cfg.classes,
                kernel: cfg.kernel,
                fi_hidden: cfg.fi_hidden,
                use_frame_index: cfg.use_frame_index,
            };
            heads.push(FrameLevelHead::init(
                &mut params,
                &mut rng,
                &format!("fl.t{t}"),
                &hc,
            )?);
        }
        Ok(Model {
            cfg,
            params,
            partition,
            trunks,
            heads,
        })
    }

    /// (scale count, clip lengths)
    pub fn scales(&self) -> &[usize] {
        &self.cfg.scales
    }

    /// Run one clip-length branch. clip is [N, scales[si], J, 3] flattened.
    /// Returns (graph, logits, smp node).
    pub fn forward_scale(
        &mut self,
        si: usize,
        clip: &[f64],
        n: usize,
        train: bool,
    ) -> Result<(Graph, Var, Var)> {
        let t = self.cfg.scales[si];
        let j = self.cfg.joints;
        let mut g = Graph::new();
        let ti = if self.cfg.share_trunk { 0 } else { si };
        let trunk = &mut self.trunks[ti];
        let dr = trunk
            .dr
            .forward(&mut g, &self.params, clip, n, t, j, self.partition.as_ref())?;
        let z = trunk.jl.forward(&mut g, &self.params, dr, train)?;
        let (logits, smp) = self.heads[si].forward(&mut g, &self.params, z, train)?;
        Ok((g, logits, smp))
    }

    /// Dynamics features from the first trunk, for inspection tools.
    /// clip is [N, T, J, 3] flattened.
    pub fn trunk_features(&self, g: &mut Graph, clip: &[f64], n: usize, t: usize) -> Result<Var> {
        self.trunks[0].dr.forward(
            g,
            &self.params,
            clip,
            n,
            t,
            self.cfg.joints,
            self.partition.as_ref(),
        )
    }

    /// The per-frame adjacency of the first trunk, for inspection tools.
    pub fn trunk_adjacency(&self, g: &mut Graph, dr: Var) -> Result<Var> {
        self.trunks[0].jl.adjacency(g, &self.params, dr)
    }

    /// Training loss over all clip-length branches: the per-branch smoothed
    /// cross entropies are summed and gradients accumulate into the params.
    /// clips[si] is the batch resampled at scales[si].
    pub fn loss_and_backward(
        &mut self,
        clips: &[Vec<f64>],
        n: usize,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<f64> {
        if clips.len() != self.cfg.scales.len() {
            return Err(Error::Config(format!(
                "expected {} clip sets, got {}",
                self.cfg.scales.len(),
                clips.len()
            )));
        }
        let mut total = 0.0;
        for si in 0..clips.len() {
            let (mut g, logits, _) = self.forward_scale(si, &clips[si], n, true)?;
            let loss = g.cross_entropy_label_smoothed(logits, labels, smoothing)?;
            total += g.scalar_value(loss);
            g.backward(loss);
            g.scatter_grads(&mut self.params);
        }
        Ok(total)
    }

    /// The same total loss as [`Model::loss_and_backward`] without touching
    /// gradients (used by the finite-difference oracle).
    pub fn loss_forward(
        &mut self,
        clips: &[Vec<f64>],
        n: usize,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<f64> {
        let mut total = 0.0;
        for si in 0..clips.len() {
            let (mut g, logits, _) = self.forward_scale(si, &clips[si], n, true)?;
            let loss = g.cross_entropy_label_smoothed(logits, labels, smoothing)?;
            total += g.scalar_value(loss);
        }
        Ok(total)
    }

    /// Per-sample class scores for one already-sampled batch: softmax per
    /// branch, averaged over branches. Rows sum to one.
    pub fn predict_scores(&mut self, clips: &[Vec<f64>], n: usize) -> Result<Vec<Vec<f64>>> {
        let k = self.cfg.classes;
        let mut scores = vec![vec![0.0; k]; n];
        for si in 0..self.cfg.scales.len() {
            let (g, logits, _) = self.forward_scale(si, &clips[si], n, false)?;
            let v = g.values(logits);
            for b in 0..n {
                let p = softmax_vec(&v[b * k..(b + 1) * k]);
                for (acc, pi) in scores[b].iter_mut().zip(&p) {
                    *acc += pi / self.cfg.scales.len() as f64;
                }
            }
        }
        Ok(scores)
    }

    /// Parameter totals: (including norm-layer scale/shift, excluding them).
    pub fn param_counts(&self) -> (usize, usize) {
        let mut with_bn = 0usize;
        let mut bn_affine = 0usize;
        for p in self.params.iter() {
            if !p.requires_grad {
                continue;
            }
            with_bn += p.value.len();
            let bn = p.name.contains(".bn")
                && (p.name.ends_with(".gamma") || p.name.ends_with(".beta"));
            if bn {
                bn_affine += p.value.len();
            }
        }
        (with_bn, with_bn - bn_affine)
    }

    pub fn bn_states(&self) -> Vec<(String, BatchNormState)> {
        let mut out = Vec::new();
        for t in &self.trunks {
            out.extend(t.jl.bn_states());
        }
        for h in &self.heads {
            out.extend(h.bn_states());
        }
        out
    }

    pub fn set_bn_states(&mut self, states: &[(String, BatchNormState)]) -> Result<()> {
        for t in &mut self.trunks {
            t.jl.set_bn_states(states)?;
        }
        for h in &mut self.heads {
            h.set_bn_states(states)?;
        }
        Ok(())
    }
}

/// Mean of per-source score rows (used to fuse clip views and the bodies of
/// a multi-person sample).
pub fn fuse_scores(rows: &[Vec<f64>]) -> Vec<f64> {
    assert!(!rows.is_empty());
    let k = rows[0].len();
    let mut out = vec![0.0; k];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v / rows.len() as f64;
        }
    }
    out
}

/// Highest score wins; ties go to the lowest class index.
pub fn predict_class(scores: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}
