//! The latent model: a per-frame encoder `e` and residual dynamics `g`.
//!
//! The latent state is a (configuration, velocity) pair. The encoder maps a
//! single frame to the configuration h; velocity is the finite difference
//! of consecutive frame encodings, v_t = (e(i_t) - e(i_{t-1})) / dt. The
//! forward model predicts the next velocity with `g` and integrates the
//! configuration, h' = h + dt * v', so h' - h = dt * v' holds identically.
//!
//! The transition density is a diagonal Gaussian over the concatenated
//! (h', v') vector with the predicted mean and a learned constant
//! log-variance.

mod graph_builders;

pub use graph_builders::{
    predict_nodes, ConstVelocityDynamics, DynamicsNodes, EncoderNodes, LatentDynamics,
    LinearStubDynamics, ModelNodes,
};

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::tensor::{load_tensors, save_tensors, Graph, ParamStore, Tensor};

/// Latent configuration and velocity. Both live in R^d where d equals the
/// control dimension; that equality is what makes the gain matrices square
/// and the proportional gain invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub h: Vec<f64>,
    pub v: Vec<f64>,
}

impl LatentState {
    pub fn new(h: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if h.len() != v.len() {
            return Err(Error::Dimension(format!(
                "latent configuration ({}) and velocity ({}) dims differ",
                h.len(),
                v.len()
            )));
        }
        if !h.iter().chain(&v).all(|x| x.is_finite()) {
            return Err(Error::non_finite("LatentState"));
        }
        Ok(LatentState { h, v })
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn zeros(dim: usize) -> Self {
        LatentState {
            h: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

/// One convolution layer: out channels, square kernel, stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture and timing for encoder and dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Dimension of h, v, and u alike.
    pub latent_dim: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub conv: Vec<ConvSpec>,
    pub dyn_hidden: Vec<usize>,
    pub dt: f64,
}

impl ModelConfig {
    /// Default stack for a frame size: three stride-2 ReLU convolutions for
    /// 32x32 inputs, fewer for smaller frames, then a dense head.
    pub fn for_frames(frame_w: usize, frame_h: usize, latent_dim: usize, dt: f64) -> Result<Self> {
        let mut conv = Vec::new();
        let mut size = frame_w.min(frame_h);
        let mut channels = if size >= 16 { 16 } else { 8 };
        while conv.len() < 3 && size >= 3 {
            let kernel = if conv.is_empty() && size >= 16 { 4 } else { 3 };
            if size < kernel {
                break;
            }
            conv.push(ConvSpec {
                out_channels: channels,
                kernel,
                stride: 2,
            });
            size = (size - kernel) / 2 + 1;
            channels = (channels * 2).min(32);
        }
        let config = ModelConfig {
            latent_dim,
            frame_w,
            frame_h,
            conv,
            dyn_hidden: vec![64, 64],
            dt,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Dimension("latent_dim must be >= 1".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidArgument("dt must be > 0".into()));
        }
        self.feature_size()?;
        Ok(())
    }

    /// Flattened feature count after the convolution stack.
    pub fn feature_size(&self) -> Result<usize> {
        let mut h = self.frame_h;
        let mut w = self.frame_w;
        let mut c = 1;
        for (i, spec) in self.conv.iter().enumerate() {
            if spec.kernel > h || spec.kernel > w || spec.stride == 0 {
                return Err(Error::Dimension(format!(
                    "conv layer {i}: kernel {} does not fit {h}x{w}",
                    spec.kernel
                )));
            }
            h = (h - spec.kernel) / spec.stride + 1;
            w = (w - spec.kernel) / spec.stride + 1;
            c = spec.out_channels;
        }
        Ok(c * h * w)
    }

    /// Input width of the dynamics MLP: (h, v, u) concatenated.
    pub fn dynamics_input(&self) -> usize {
        3 * self.latent_dim
    }
}

/// Encoder and dynamics parameters with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl LatentModel {
    /// Random initialization: He for the ReLU convolutions, Xavier for the
    /// dense layers, zero log-variance.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
        let mut params = ParamStore::new();
        let mut normal = |std: f64, n: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("std is finite");
            (0..n).map(|_| dist.sample(rng)).collect()
        };

        let mut in_ch = 1;
        for (i, spec) in config.conv.iter().enumerate() {
            let fan_in = in_ch * spec.kernel * spec.kernel;
            let w_shape = vec![spec.out_channels, in_ch, spec.kernel, spec.kernel];
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = w_shape.iter().product();
            params.insert(
                format!("enc.conv{i}.w"),
                Tensor::new(w_shape, normal(std, n, &mut rng))?,
            );
            params.insert(format!("enc.conv{i}.b"), Tensor::zeros(&[spec.out_channels]));
            in_ch = spec.out_channels;
        }
        let feat = config.feature_size()?;
        let d = config.latent_dim;
        let std = (2.0 / (feat + d) as f64).sqrt();
        params.insert(
            "enc.dense.w",
            Tensor::new(vec![feat, d], normal(std, feat * d, &mut rng))?,
        );
        params.insert("enc.dense.b", Tensor::zeros(&[1, d]));

        let mut widths = vec![config.dynamics_input()];
        widths.extend(&config.dyn_hidden);
        widths.push(d);
        for i in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[i], widths[i + 1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            params.insert(
                format!("dyn.fc{i}.w"),
                Tensor::new(vec![fan_in, fan_out], normal(std, fan_in * fan_out, &mut rng))?,
            );
            params.insert(format!("dyn.fc{i}.b"), Tensor::zeros(&[1, fan_out]));
        }
        params.insert("dyn.logvar", Tensor::zeros(&[1, 2 * d]));
        Ok(LatentModel { config, params })
    }

    /// Encodes a two-frame observation: h from the current frame, v by
    /// finite difference over `dt`. Deterministic.
    pub fn encode(&self, obs: &Observation, dt: f64) -> Result<LatentState> {
        if obs.current.width != self.config.frame_w || obs.current.height != self.config.frame_h {
            return Err(Error::Dimension(format!(
                "frame {}x{} does not match model {}x{}",
                obs.current.width, obs.current.height, self.config.frame_w, self.config.frame_h
            )));
        }
        let mut g = Graph::new();
        let nodes = self.declare_params(&mut g)?;
        let frames = g.constant(frames_to_tensor(&[&obs.current, &obs.previous])?)?;
        let enc = nodes.encoder.encode_frames(&mut g, frames)?;
        let value = g.value(enc);
        let d = self.config.latent_dim;
        let h: Vec<f64> = value.row(0).to_vec();
        let v: Vec<f64> = (0..d)
            .map(|i| (value.at2(0, i) - value.at2(1, i)) / dt)
            .collect();
        LatentState::new(h, v)
    }

    /// Mean of the transition density: v' = g(h, v, u), h' = h + dt * v'.
    pub fn predict(&self, z: &LatentState, u: &[f64]) -> Result<LatentState> {
        let d = self.config.latent_dim;
        if z.dim() != d || u.len() != d {
            return Err(Error::Dimension(format!(
                "predict: latent dim {} control dim {} model dim {d}",
                z.dim(),
                u.len()
            )));
        }
        let mut g = Graph::new();
        let nodes = self.declare_params(&mut g)?;
        let h = g.constant(Tensor::new(vec![1, d], z.h.clone())?)?;
        let v = g.constant(Tensor::new(vec![1, d], z.v.clone())?)?;
        let u = g.constant(Tensor::new(vec![1, d], u.to_vec())?)?;
        let (h_next, v_next) = predict_nodes(&mut g, &nodes.dynamics, h, v, u)?;
        LatentState::new(g.value(h_next).data().to_vec(), g.value(v_next).data().to_vec())
    }

    /// Log of the diagonal-Gaussian transition density evaluated at
    /// `z_next`, over the concatenated (h', v') vector of dimension 2d.
    pub fn log_density(&self, z_next: &LatentState, z: &LatentState, u: &[f64]) -> Result<f64> {
        let mean = self.predict(z, u)?;
        let logvar = self.params.get("dyn.logvar")?.data().to_vec();
        let resid: Vec<f64> = z_next
            .h
            .iter()
            .chain(&z_next.v)
            .zip(mean.h.iter().chain(&mean.v))
            .map(|(a, b)| a - b)
            .collect();
        gaussian_log_density(&resid, &logvar)
    }

    /// Declares every parameter on the graph and returns the wired nodes.
    pub fn declare_params(&self, g: &mut Graph) -> Result<ModelNodes> {
        self.declare_with(g, |g, name, t| g.param(name, t.clone()))
    }

    /// Same wiring with caller-controlled leaf creation (used by gradient
    /// checking, where parameters enter as perturbable inputs).
    pub fn declare_with(
        &self,
        g: &mut Graph,
        mut leaf: impl FnMut(&mut Graph, &str, &Tensor) -> Result<crate::tensor::NodeId>,
    ) -> Result<ModelNodes> {
        graph_builders::declare(self, g, &mut leaf)
    }
}

/// ln N(resid; 0, diag(exp(logvar))).
pub fn gaussian_log_density(resid: &[f64], logvar: &[f64]) -> Result<f64> {
    if resid.len() != logvar.len() {
        return Err(Error::Dimension(format!(
            "residual dim {} != logvar dim {}",
            resid.len(),
            logvar.len()
        )));
    }
    let d = resid.len() as f64;
    let mut quad = 0.0;
    let mut logdet = 0.0;
    for (&r, &lv) in resid.iter().zip(logvar) {
        let var = lv.exp();
        if !(var > 0.0) {
            return Err(Error::non_finite("gaussian variance"));
        }
        quad += r * r / var;
        logdet += lv;
    }
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet - 0.5 * quad)
}

/// Stacks frames into an [N, 1, H, W] tensor of f64 intensities.
pub fn frames_to_tensor(frames: &[&crate::env::Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("frames_to_tensor: empty".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(frames.len() * w * h);
    for f in frames {
        if f.width != w || f.height != h {
            return Err(Error::Dimension("frames differ in size".into()));
        }
        data.extend(f.intensities.iter().map(|&x| x as f64));
    }
    Tensor::new(vec![frames.len(), 1, h, w], data)
}

/// Anything that turns observations into latent states at control time.
pub trait ObservationEncoder {
    fn latent_dim(&self) -> usize;
    fn encode(&self, obs: &Observation, dt: f64) -> Result<LatentState>;
}

impl ObservationEncoder for LatentModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode(&self, obs: &Observation, dt: f64) -> Result<LatentState> {
        LatentModel::encode(self, obs, dt)
    }
}

// ---- checkpoint layout -------------------------------------------------

const META_PREFIX: &str = "meta.";

/// Serializes a model plus caller-supplied extra tensors (optimizer state,
/// step counters) into one checkpoint file. Architecture and environment
/// name travel as `meta.*` tensors.
pub fn save_checkpoint(
    path: &Path,
    model: &LatentModel,
    env_name: &str,
    extra: &BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut map = model.params.as_map().clone();
    let c = &model.config;
    map.insert("meta.latent_dim".into(), Tensor::scalar(c.latent_dim as f64));
    map.insert("meta.frame_w".into(), Tensor::scalar(c.frame_w as f64));
    map.insert("meta.frame_h".into(), Tensor::scalar(c.frame_h as f64));
    map.insert("meta.dt".into(), Tensor::scalar(c.dt));
    let conv: Vec<f64> = c
        .conv
        .iter()
        .flat_map(|s| [s.out_channels as f64, s.kernel as f64, s.stride as f64])
        .collect();
    map.insert(
        "meta.conv".into(),
        Tensor::new(vec![c.conv.len(), 3], conv)?,
    );
    map.insert(
        "meta.dyn_hidden".into(),
        Tensor::from_vec(c.dyn_hidden.iter().map(|&x| x as f64).collect()),
    );
    map.insert(
        "meta.env_name".into(),
        Tensor::from_vec(env_name.bytes().map(|b| b as f64).collect()),
    );
    for (k, v) in extra {
        map.insert(k.clone(), v.clone());
    }
    save_tensors(path, &map)
}

pub struct LoadedCheckpoint {
    pub model: LatentModel,
    pub env_name: String,
    pub extra: BTreeMap<String, Tensor>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let map = load_tensors(path)?;
    let meta_scalar = |name: &str| -> Result<f64> {
        map.get(name)
            .ok_or_else(|| Error::Truncated {
                path: path.to_path_buf(),
                detail: format!("missing {name}"),
            })?
            .item()
    };
    let conv_t = map.get("meta.conv").ok_or_else(|| Error::Truncated {
        path: path.to_path_buf(),
        detail: "missing meta.conv".into(),
    })?;
    let conv = (0..conv_t.shape()[0])
        .map(|i| ConvSpec {
            out_channels: conv_t.at2(i, 0) as usize,
            kernel: conv_t.at2(i, 1) as usize,
            stride: conv_t.at2(i, 2) as usize,
        })
        .collect();
    let dyn_hidden = map
        .get("meta.dyn_hidden")
        .map(|t| t.data().iter().map(|&x| x as usize).collect())
        .unwrap_or_default();
    let env_name = map
        .get("meta.env_name")
        .map(|t| t.data().iter().map(|&b| b as u8 as char).collect())
        .unwrap_or_default();
    let config = ModelConfig {
        latent_dim: meta_scalar("meta.latent_dim")? as usize,
        frame_w: meta_scalar("meta.frame_w")? as usize,
        frame_h: meta_scalar("meta.frame_h")? as usize,
        conv,
        dyn_hidden,
        dt: meta_scalar("meta.dt")?,
    };
    config.validate()?;
    let mut params = ParamStore::new();
    let mut extra = BTreeMap::new();
    for (name, tensor) in map {
        if name.starts_with(META_PREFIX) {
            continue;
        }
        if name.starts_with("adam.") || name.starts_with("train.") {
            extra.insert(name, tensor);
        } else {
            params.insert(name, tensor);
        }
    }
    Ok(LoadedCheckpoint {
        model: LatentModel { config, params },
        env_name,
        extra,
    })
}

#[cfg(test)]
mod tests;
