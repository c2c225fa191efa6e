//! Frame-level modelling: frame-index semantics, spatial max pooling over
//! joints, the temporal convolution stack, and the classifier.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{BatchNormState, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_weight, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FrameHeadConfig {
    /// Clip length this head is built for; inputs must match exactly.
    pub frames: usize,
    /// Channels entering the head (graph conv output width).
    pub c3: usize,
    /// Channels after the pointwise expansion.
    pub c4: usize,
    pub classes: usize,
    /// Temporal kernel width; must be odd (1 disables temporal mixing).
    pub kernel: usize,
    /// Hidden width of the frame-index embedding.
    pub fi_hidden: usize,
    /// Add frame-index semantics before pooling.
    pub use_frame_index: bool,
}

impl FrameHeadConfig {
    pub fn standard(frames: usize, classes: usize) -> Self {
        FrameHeadConfig {
            frames,
            c3: 256,
            c4: 512,
            classes,
            kernel: 3,
            fi_hidden: 64,
            use_frame_index: true,
        }
    }
}

/// Per-clip-length classification head.
#[derive(Debug)]
pub struct FrameLevelHead {
    pub cfg: FrameHeadConfig,
    prefix: String,
    fi: Option<[ParamId; 4]>,
    tconv_w: ParamId,
    tconv_b: ParamId,
    bn1_gamma: ParamId,
    bn1_beta: ParamId,
    bn1: BatchNormState,
    pconv_w: ParamId,
    pconv_b: ParamId,
    bn2_gamma: ParamId,
    bn2_beta: ParamId,
    bn2: BatchNormState,
    cls_w: ParamId,
    cls_b: ParamId,
}

impl FrameLevelHead {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        cfg: &FrameHeadConfig,
    ) -> Result<Self> {
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel width must be odd, got {}",
                cfg.kernel
            )));
        }
        if cfg.classes == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        let p = prefix;
        let fi = if cfg.use_frame_index {
            Some([
                params.add(&format!("{p}.fi.w1"), init_weight(rng, &[cfg.fi_hidden, cfg.frames])),
                params.add(&format!("{p}.fi.b1"), Tensor::zeros(&[cfg.fi_hidden])),
                params.add(&format!("{p}.fi.w2"), init_weight(rng, &[cfg.c3, cfg.fi_hidden])),
                params.add(&format!("{p}.fi.b2"), Tensor::zeros(&[cfg.c3])),
            ])
        } else {
            None
        };
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).unwrap();
        Ok(FrameLevelHead {
            cfg: cfg.clone(),
            prefix: p.to_string(),
            fi,
            tconv_w: params.add(
                &format!("{p}.tconv.w"),
                init_weight(rng, &[cfg.c3, cfg.c3, cfg.kernel]),
            ),
            tconv_b: params.add(&format!("{p}.tconv.b"), Tensor::zeros(&[cfg.c3])),
            bn1_gamma: params.add(&format!("{p}.bn1.gamma"), ones(cfg.c3)),
            bn1_beta: params.add(&format!("{p}.bn1.beta"), Tensor::zeros(&[cfg.c3])),
            bn1: BatchNormState::new(cfg.c3),
            pconv_w: params.add(&format!("{p}.pconv.w"), init_weight(rng, &[cfg.c4, cfg.c3])),
            pconv_b: params.add(&format!("{p}.pconv.b"), Tensor::zeros(&[cfg.c4])),
            bn2_gamma: params.add(&format!("{p}.bn2.gamma"), ones(cfg.c4)),
            bn2_beta: params.add(&format!("{p}.bn2.beta"), Tensor::zeros(&[cfg.c4])),
            bn2: BatchNormState::new(cfg.c4),
            cls_w: params.add(&format!("{p}.cls.w"), init_weight(rng, &[cfg.classes, cfg.c4])),
            cls_b: params.add(&format!("{p}.cls.b"), Tensor::zeros(&[cfg.classes])),
        })
    }

    /// Frame-index semantics [T, c3]: two-layer embedding of the one-hot
    /// frame position with relu after both layers.
    pub fn frame_index_embedding(&self, g: &mut Graph, params: &ParamSet) -> Result<Var> {
        let [w1, b1, w2, b2] = self.fi.ok_or_else(|| {
            Error::Config("frame-index embedding requested but disabled by config".into())
        })?;
        let t = self.cfg.frames;
        let mut onehot = vec![0.0; t * t];
        for i in 0..t {
            onehot[i * t + i] = 1.0;
        }
        let x = g.constant(Tensor::new(vec![t, t], onehot)?);
        let w1 = g.param(params, w1);
        let b1 = g.param(params, b1);
        let h = g.affine(x, w1, Some(b1))?;
        let h = g.relu(h);
        let w2 = g.param(params, w2);
        let b2 = g.param(params, b2);
        let e = g.affine(h, w2, Some(b2))?;
        Ok(g.relu(e))
    }

    /// x is [N, T, J, c3]. Returns (logits [N, classes], smp node) where the
    /// smp node carries the winning joint index for every (frame, channel).
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        train: bool,
    ) -> Result<(Var, Var)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.frames || shape[3] != self.cfg.c3 {
            return Err(Error::Config(format!(
                "head {} expects [N, {}, J, {}] inputs, got {:?}",
                self.prefix, self.cfg.frames, self.cfg.c3, shape
            )));
        }
        let x = if self.cfg.use_frame_index {
            let e = self.frame_index_embedding(g, params)?;
            g.add_broadcast_frames(x, e)?
        } else {
            x
        };
        // spatial max pooling over the joint axis
        let smp = g.max_axis(x, 2)?;
        let w = g.param(params, self.tconv_w);
        let b = g.param(params, self.tconv_b);
        let h = g.temporal_conv(smp, w, Some(b))?;
        let gam = g.param(params, self.bn1_gamma);
        let bet = g.param(params, self.bn1_beta);
        let h = g.batch_norm(h, gam, bet, &mut self.bn1, train)?;
        let h = g.relu(h);
        let w = g.param(params, self.pconv_w);
        let b = g.param(params, self.pconv_b);
        let h = g.affine(h, w, Some(b))?;
        let gam = g.param(params, self.bn2_gamma);
        let bet = g.param(params, self.bn2_beta);
        let h = g.batch_norm(h, gam, bet, &mut self.bn2, train)?;
        let h = g.relu(h);
        // temporal max pooling over frames
        let pooled = g.max_axis(h, 1)?;
        let w = g.param(params, self.cls_w);
        let b = g.param(params, self.cls_b);
        let logits = g.affine(pooled, w, Some(b))?;
        Ok((logits, smp))
    }

    pub fn bn_states(&self) -> Vec<(String, BatchNormState)> {
        vec![
            (format!("{}.bn1", self.prefix), self.bn1.clone()),
            (format!("{}.bn2", self.prefix), self.bn2.clone()),
        ]
    }

    pub fn set_bn_states(&mut self, states: &[(String, BatchNormState)]) -> Result<()> {
        for (slot, key) in [
            (&mut self.bn1, format!("{}.bn1", self.prefix)),
            (&mut self.bn2, format!("{}.bn2", self.prefix)),
        ] {
            let s = states
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing norm state {key}")))?;
            if s.1.running_mean.len() != slot.running_mean.len() {
                return Err(Error::Checkpoint(format!("norm state {key} has wrong width")));
            }
            *slot = s.1.clone();
        }
        Ok(())
    }
}

/// How often each joint won the spatial max pool, per sample. Counts sum to
/// T * c3; the report lists joints by descending count, ties to the lower
/// joint index.
pub fn smp_counts(g: &Graph, smp: Var, joints: usize) -> Result<Vec<Vec<usize>>> {
    let shape = g.shape(smp).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("smp_counts", &shape, &[3]));
    }
    let arg = g
        .argmax_indices(smp)
        .ok_or_else(|| Error::Config("node is not a max pool".into()))?;
    let (n, t, c) = (shape[0], shape[1], shape[2]);
    let mut out = vec![vec![0usize; joints]; n];
    for b in 0..n {
        for &j in &arg[b * t * c..(b + 1) * t * c] {
            out[b][j] += 1;
        }
    }
    Ok(out)
}

/// Top-k joints by SMP win count for one sample.
pub fn top_joints(counts: &[usize], k: usize) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..counts.len()).collect();
    idx.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|j| (j, counts[j])).collect()
}
