//! Joint-level spatial modelling: joint-type semantics, the learned
//! per-frame joint adjacency, and residual graph convolution layers.

use rand_chacha::ChaCha12Rng;

use crate::autodiff::{BatchNormState, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{init_weight, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct JointGraphConfig {
    /// Channels of the incoming dynamics features.
    pub c1: usize,
    /// Projection width of the adjacency head.
    pub c2: usize,
    /// Output channels of each graph conv layer.
    pub gcn_dims: Vec<usize>,
    /// Concatenate joint-type semantics before computing the adjacency.
    pub graph_uses_joint_type: bool,
    /// Concatenate joint-type semantics into the features being passed.
    pub passing_uses_joint_type: bool,
}

impl Default for JointGraphConfig {
    fn default() -> Self {
        JointGraphConfig {
            c1: 64,
            c2: 256,
            gcn_dims: vec![128, 256, 256],
            graph_uses_joint_type: true,
            passing_uses_joint_type: true,
        }
    }
}

#[derive(Debug)]
struct GcnLayer {
    wy: ParamId,
    wz: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: BatchNormState,
}

/// Joint-type one-hot embedding, adjacency head, and the graph conv stack.
#[derive(Debug)]
pub struct JointGraphModule {
    pub cfg: JointGraphConfig,
    pub joints: usize,
    prefix: String,
    // two-layer joint-type embedding J -> c1 -> c1 (present only when used)
    jt: Option<[ParamId; 4]>,
    theta_w: ParamId,
    theta_b: ParamId,
    phi_w: ParamId,
    phi_b: ParamId,
    layers: Vec<GcnLayer>,
}

impl JointGraphModule {
    pub fn init(
        params: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        prefix: &str,
        joints: usize,
        cfg: &JointGraphConfig,
    ) -> Result<Self> {
        if cfg.gcn_dims.is_empty() {
            return Err(Error::Config("at least one graph conv layer required".into()));
        }
        let c1 = cfg.c1;
        let uses_jt = cfg.graph_uses_joint_type || cfg.passing_uses_joint_type;
        let jt = if uses_jt {
            Some([
                params.add(&format!("{prefix}.jt.w1"), init_weight(rng, &[c1, joints])),
                params.add(&format!("{prefix}.jt.b1"), Tensor::zeros(&[c1])),
                params.add(&format!("{prefix}.jt.w2"), init_weight(rng, &[c1, c1])),
                params.add(&format!("{prefix}.jt.b2"), Tensor::zeros(&[c1])),
            ])
        } else {
            None
        };
        let graph_in = if cfg.graph_uses_joint_type { 2 * c1 } else { c1 };
        let theta_w = params.add(&format!("{prefix}.adj.theta.w"), init_weight(rng, &[cfg.c2, graph_in]));
        let theta_b = params.add(&format!("{prefix}.adj.theta.b"), Tensor::zeros(&[cfg.c2]));
        let phi_w = params.add(&format!("{prefix}.adj.phi.w"), init_weight(rng, &[cfg.c2, graph_in]));
        let phi_b = params.add(&format!("{prefix}.adj.phi.b"), Tensor::zeros(&[cfg.c2]));
        let mut layers = Vec::new();
        let mut d_in = if cfg.passing_uses_joint_type { 2 * c1 } else { c1 };
        for (i, &d_out) in cfg.gcn_dims.iter().enumerate() {
            layers.push(GcnLayer {
                wy: params.add(&format!("{prefix}.gcn{i}.wy"), init_weight(rng, &[d_out, d_in])),
                wz: params.add(&format!("{prefix}.gcn{i}.wz"), init_weight(rng, &[d_out, d_in])),
                gamma: params.add(
                    &format!("{prefix}.gcn{i}.bn.gamma"),
                    Tensor::new(vec![d_out], vec![1.0; d_out])?,
                ),
                beta: params.add(&format!("{prefix}.gcn{i}.bn.beta"), Tensor::zeros(&[d_out])),
                bn: BatchNormState::new(d_out),
            });
            d_in = d_out;
        }
        Ok(JointGraphModule {
            cfg: cfg.clone(),
            joints,
            prefix: prefix.to_string(),
            jt,
            theta_w,
            theta_b,
            phi_w,
            phi_b,
            layers,
        })
    }

    pub fn out_channels(&self) -> usize {
        *self.cfg.gcn_dims.last().unwrap()
    }

    /// Joint-type semantics [J, c1]: two-layer embedding of the one-hot
    /// joint index with relu after both layers.
    pub fn joint_type_embedding(&self, g: &mut Graph, params: &ParamSet) -> Result<Var> {
        let [w1, b1, w2, b2] = self.jt.ok_or_else(|| {
            Error::Config("joint-type embedding requested but disabled by config".into())
        })?;
        let j = self.joints;
        let mut onehot = vec![0.0; j * j];
        for i in 0..j {
            onehot[i * j + i] = 1.0;
        }
        let x = g.constant(Tensor::new(vec![j, j], onehot)?);
        let w1 = g.param(params, w1);
        let b1 = g.param(params, b1);
        let h = g.affine(x, w1, Some(b1))?;
        let h = g.relu(h);
        let w2 = g.param(params, w2);
        let b2 = g.param(params, b2);
        let e = g.affine(h, w2, Some(b2))?;
        Ok(g.relu(e))
    }

    /// Per-frame adjacency G[.., J, J]: row-softmax of theta(z) . phi(z)^T.
    /// Rows always sum to one; with zero projections every entry is 1/J.
    pub fn build_adjacency(&self, g: &mut Graph, params: &ParamSet, z: Var) -> Result<Var> {
        let tw = g.param(params, self.theta_w);
        let tb = g.param(params, self.theta_b);
        let theta = g.affine(z, tw, Some(tb))?;
        let pw = g.param(params, self.phi_w);
        let pb = g.param(params, self.phi_b);
        let phi = g.affine(z, pw, Some(pb))?;
        let s = g.pairwise_dot(theta, phi)?;
        Ok(g.softmax_rows(s))
    }

    /// The adjacency exactly as `forward` computes it, for inspection.
    pub fn adjacency(&self, g: &mut Graph, params: &ParamSet, dr: Var) -> Result<Var> {
        let graph_in = if self.cfg.graph_uses_joint_type {
            let e = self.joint_type_embedding(g, params)?;
            g.concat_broadcast(dr, e)?
        } else {
            dr
        };
        self.build_adjacency(g, params, graph_in)
    }

    /// One residual graph conv: relu(BN(G z Wy + z Wz)), no biases.
    fn gcn_layer(
        &mut self,
        li: usize,
        g: &mut Graph,
        params: &ParamSet,
        adjacency: Var,
        z: Var,
        train: bool,
    ) -> Result<Var> {
        let layer = &mut self.layers[li];
        let wy = g.param(params, layer.wy);
        let wz = g.param(params, layer.wz);
        let neigh = g.batched_matmul(adjacency, z)?;
        let a = g.affine(neigh, wy, None)?;
        let b = g.affine(z, wz, None)?;
        let sum = g.add(a, b)?;
        let gamma = g.param(params, layer.gamma);
        let beta = g.param(params, layer.beta);
        let y = g.batch_norm(sum, gamma, beta, &mut layer.bn, train)?;
        Ok(g.relu(y))
    }

    /// dr is [N, T, J, c1]. Builds the adjacency once per frame and shares
    /// it across all conv layers; returns [N, T, J, out_channels].
    pub fn forward(
        &mut self,
        g: &mut Graph,
        params: &ParamSet,
        dr: Var,
        train: bool,
    ) -> Result<Var> {
        let shape = g.shape(dr).to_vec();
        if shape.len() != 4 || shape[2] != self.joints || shape[3] != self.cfg.c1 {
            return Err(Error::shape(
                "joint_graph",
                &shape,
                &[self.joints, self.cfg.c1],
            ));
        }
        let with_jt = if self.cfg.graph_uses_joint_type || self.cfg.passing_uses_joint_type {
            let e = self.joint_type_embedding(g, params)?;
            Some(g.concat_broadcast(dr, e)?)
        } else {
            None
        };
        let graph_in = if self.cfg.graph_uses_joint_type {
            with_jt.unwrap()
        } else {
            dr
        };
        let adjacency = self.build_adjacency(g, params, graph_in)?;
        let mut z = if self.cfg.passing_uses_joint_type {
            with_jt.unwrap()
        } else {
            dr
        };
        for li in 0..self.layers.len() {
            z = self.gcn_layer(li, g, params, adjacency, z, train)?;
        }
        Ok(z)
    }

    pub fn bn_states(&self) -> Vec<(String, BatchNormState)> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("{}.gcn{i}.bn", self.prefix), l.bn.clone()))
            .collect()
    }

    pub fn set_bn_states(&mut self, states: &[(String, BatchNormState)]) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let key = format!("{}.gcn{i}.bn", self.prefix);
            let s = states
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Checkpoint(format!("missing norm state {key}")))?;
            if s.1.running_mean.len() != l.bn.running_mean.len() {
                return Err(Error::Checkpoint(format!("norm state {key} has wrong width")));
            }
            l.bn = s.1.clone();
        }
        Ok(())
    }
}
