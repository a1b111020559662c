//! Graph wiring for the encoder stack and dynamics MLP.

use crate::error::Result;
use crate::model::{LatentModel, ModelConfig};
use crate::tensor::{Graph, NodeId, Tensor};

/// Latent dynamics as seen by the objectives: a velocity mean, its exact
/// Jacobian-vector product, and the density's log-variance.
pub trait LatentDynamics {
    fn latent_dim(&self) -> usize;
    fn dt(&self) -> f64;

    /// Mean next velocity for a batch: h, v [K,d], u [K,d] -> [K,d].
    fn velocity_mean(&self, g: &mut Graph, h: NodeId, v: NodeId, u: NodeId) -> Result<NodeId>;

    /// Exact forward-mode directional derivative of `velocity_mean` at
    /// (h, v, u) along (dh, dv, du). Built from primitive ops so reverse
    /// mode differentiates through it.
    fn velocity_jvp(
        &self,
        g: &mut Graph,
        h: NodeId,
        v: NodeId,
        u: NodeId,
        dh: NodeId,
        dv: NodeId,
        du: NodeId,
    ) -> Result<NodeId>;

    /// Log-variance of the transition density, shape [1, 2d].
    fn log_variance(&self, g: &mut Graph) -> Result<NodeId>;
}

/// Full-state mean: v' = g(h, v, u), h' = h + dt * v'.
pub fn predict_nodes(
    g: &mut Graph,
    dynamics: &impl LatentDynamics,
    h: NodeId,
    v: NodeId,
    u: NodeId,
) -> Result<(NodeId, NodeId)> {
    let v_next = dynamics.velocity_mean(g, h, v, u)?;
    let step = g.scale(v_next, dynamics.dt())?;
    let h_next = g.add(h, step)?;
    Ok((h_next, v_next))
}

/// Node ids of the declared encoder parameters.
pub struct EncoderNodes {
    conv: Vec<(NodeId, NodeId, usize)>, // weight, bias, stride
    dense_w: NodeId,
    dense_b: NodeId,
    feature_size: usize,
}

impl EncoderNodes {
    /// Frames [N,1,H,W] -> latent configurations [N,d].
    pub fn encode_frames(&self, g: &mut Graph, frames: NodeId) -> Result<NodeId> {
        let mut x = frames;
        for &(w, b, stride) in &self.conv {
            let y = g.conv2d(x, w, b, stride)?;
            x = g.relu(y)?;
        }
        let n = g.shape(x)[0];
        let flat = g.reshape(x, vec![n, self.feature_size])?;
        let dense = g.matmul(flat, self.dense_w)?;
        g.add(dense, self.dense_b)
    }
}

/// Node ids of the declared dynamics parameters.
pub struct DynamicsNodes {
    layers: Vec<(NodeId, NodeId)>, // weight, bias; all but the last tanh
    logvar: NodeId,
    latent_dim: usize,
    dt: f64,
}

impl LatentDynamics for DynamicsNodes {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn velocity_mean(&self, g: &mut Graph, h: NodeId, v: NodeId, u: NodeId) -> Result<NodeId> {
        let hv = g.concat_cols(h, v)?;
        let mut x = g.concat_cols(hv, u)?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = g.matmul(x, w)?;
            let pre = g.add(lin, b)?;
            x = if i + 1 < self.layers.len() {
                g.tanh(pre)?
            } else {
                pre
            };
        }
        Ok(x)
    }

    fn velocity_jvp(
        &self,
        g: &mut Graph,
        h: NodeId,
        v: NodeId,
        u: NodeId,
        dh: NodeId,
        dv: NodeId,
        du: NodeId,
    ) -> Result<NodeId> {
        let hv = g.concat_cols(h, v)?;
        let mut x = g.concat_cols(hv, u)?;
        let dhv = g.concat_cols(dh, dv)?;
        let mut dx = g.concat_cols(dhv, du)?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = g.matmul(x, w)?;
            let pre = g.add(lin, b)?;
            let dpre = g.matmul(dx, w)?;
            if i + 1 < self.layers.len() {
                let t = g.tanh(pre)?;
                // tanh'(s) = 1 - tanh(s)^2
                let t2 = g.square(t)?;
                let nt2 = g.neg(t2)?;
                let gain = g.add_scalar(nt2, 1.0)?;
                x = t;
                dx = g.mul(gain, dpre)?;
            } else {
                x = pre;
                dx = dpre;
            }
        }
        Ok(dx)
    }

    fn log_variance(&self, _g: &mut Graph) -> Result<NodeId> {
        Ok(self.logvar)
    }
}

pub struct ModelNodes {
    pub encoder: EncoderNodes,
    pub dynamics: DynamicsNodes,
}

pub(super) fn declare(
    model: &LatentModel,
    g: &mut Graph,
    leaf: &mut impl FnMut(&mut Graph, &str, &Tensor) -> Result<NodeId>,
) -> Result<ModelNodes> {
    let config: &ModelConfig = &model.config;
    let mut conv = Vec::with_capacity(config.conv.len());
    for (i, spec) in config.conv.iter().enumerate() {
        let w = model.params.get(&format!("enc.conv{i}.w"))?;
        let b = model.params.get(&format!("enc.conv{i}.b"))?;
        let w = leaf(g, &format!("enc.conv{i}.w"), w)?;
        let b = leaf(g, &format!("enc.conv{i}.b"), b)?;
        conv.push((w, b, spec.stride));
    }
    let dense_w = leaf(g, "enc.dense.w", model.params.get("enc.dense.w")?)?;
    let dense_b = leaf(g, "enc.dense.b", model.params.get("enc.dense.b")?)?;
    let encoder = EncoderNodes {
        conv,
        dense_w,
        dense_b,
        feature_size: config.feature_size()?,
    };

    let n_layers = config.dyn_hidden.len() + 1;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let w = leaf(g, &format!("dyn.fc{i}.w"), model.params.get(&format!("dyn.fc{i}.w"))?)?;
        let b = leaf(g, &format!("dyn.fc{i}.b"), model.params.get(&format!("dyn.fc{i}.b"))?)?;
        layers.push((w, b));
    }
    let logvar = leaf(g, "dyn.logvar", model.params.get("dyn.logvar")?)?;
    let dynamics = DynamicsNodes {
        layers,
        logvar,
        latent_dim: config.latent_dim,
        dt: config.dt,
    };
    Ok(ModelNodes { encoder, dynamics })
}

/// Test-oriented dynamics with a fixed constant velocity output.
pub struct ConstVelocityDynamics {
    pub velocity: Vec<f64>,
    pub dt: f64,
    pub logvar: Vec<f64>,
}

impl LatentDynamics for ConstVelocityDynamics {
    fn latent_dim(&self) -> usize {
        self.velocity.len()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn velocity_mean(&self, g: &mut Graph, h: NodeId, _v: NodeId, _u: NodeId) -> Result<NodeId> {
        let k = g.shape(h)[0];
        let mut data = Vec::with_capacity(k * self.velocity.len());
        for _ in 0..k {
            data.extend_from_slice(&self.velocity);
        }
        g.constant(Tensor::new(vec![k, self.velocity.len()], data)?)
    }

    fn velocity_jvp(
        &self,
        g: &mut Graph,
        h: NodeId,
        _v: NodeId,
        _u: NodeId,
        _dh: NodeId,
        _dv: NodeId,
        _du: NodeId,
    ) -> Result<NodeId> {
        let k = g.shape(h)[0];
        g.constant(Tensor::zeros(&[k, self.velocity.len()]))
    }

    fn log_variance(&self, g: &mut Graph) -> Result<NodeId> {
        g.constant(Tensor::new(vec![1, self.logvar.len()], self.logvar.clone())?)
    }
}

/// Test-oriented dynamics mirroring the point mass: v' = v + dt * u.
pub struct LinearStubDynamics {
    pub latent_dim: usize,
    pub dt: f64,
}

impl LatentDynamics for LinearStubDynamics {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn velocity_mean(&self, g: &mut Graph, _h: NodeId, v: NodeId, u: NodeId) -> Result<NodeId> {
        let du = g.scale(u, self.dt)?;
        g.add(v, du)
    }

    fn velocity_jvp(
        &self,
        g: &mut Graph,
        _h: NodeId,
        _v: NodeId,
        _u: NodeId,
        _dh: NodeId,
        dv: NodeId,
        du: NodeId,
    ) -> Result<NodeId> {
        let sdu = g.scale(du, self.dt)?;
        g.add(dv, sdu)
    }

    fn log_variance(&self, g: &mut Graph) -> Result<NodeId> {
        g.constant(Tensor::zeros(&[1, 2 * self.latent_dim]))
    }
}
