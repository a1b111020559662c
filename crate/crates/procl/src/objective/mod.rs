//! Training objectives.
//!
//! The PC3 part scores predicted transition densities contrastively
//! (in-batch negatives), keeps predictions consistent with next-frame
//! encodings, and penalizes curvature of the transition mean. On top of
//! that, the PD-control Lyapunov risk pushes the encoder toward a latent
//! space in which the stored controls look like PD feedback toward
//! hindsight-labeled pseudo-targets: each target is the algebraic inverse
//! of the PD law at the stored (state, control) pair.

mod graph;

pub use graph::{
    consistency_from_log_density_matrix, cpc_from_log_density_matrix, cpc_loss_nodes,
    consistency_loss_nodes, curvature_loss_nodes, hindsight_target_nodes, log_density_matrix,
    lyapunov_risk_nodes, lyapunov_value_nodes, procl_loss_nodes, BatchNodes, LossNodes,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{LatentDynamics, LatentState};
use crate::tensor::{Gradients, Graph, Tensor};

/// Diagonal PD gain matrices plus the control timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct PDGains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub dt: f64,
}

impl PDGains {
    pub fn new(kp: Vec<f64>, kd: Vec<f64>, dt: f64) -> Result<Self> {
        if kp.len() != kd.len() {
            return Err(Error::Dimension("Kp and Kd dims differ".into()));
        }
        if kp.iter().chain(&kd).any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument(
                "PD gains must be strictly positive diagonals".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument("PD dt must be > 0".into()));
        }
        Ok(PDGains { kp, kd, dt })
    }

    /// kp * I, kd * I in the given dimension.
    pub fn uniform(kp: f64, kd: f64, dim: usize, dt: f64) -> Result<Self> {
        PDGains::new(vec![kp; dim], vec![kd; dim], dt)
    }

    pub fn dim(&self) -> usize {
        self.kp.len()
    }
}

/// Diagonal quadratic Lyapunov function V(z) = h^T Q_h h + v^T Q_v v.
/// Positive diagonals make V(0) = 0 and V(z) > 0 for z != 0 by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovQ {
    pub qh: Vec<f64>,
    pub qv: Vec<f64>,
}

impl LyapunovQ {
    pub fn new(qh: Vec<f64>, qv: Vec<f64>) -> Result<Self> {
        if qh.len() != qv.len() {
            return Err(Error::Dimension("Qh and Qv dims differ".into()));
        }
        if qh.iter().chain(&qv).any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument(
                "Lyapunov diagonals must be strictly positive".into(),
            ));
        }
        Ok(LyapunovQ { qh, qv })
    }

    pub fn uniform(qh: f64, qv: f64, dim: usize) -> Result<Self> {
        LyapunovQ::new(vec![qh; dim], vec![qv; dim])
    }
}

/// Loss weights and noise scales for the full objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_pc3: f64,
    pub lambda_r: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
    /// Std of the Gaussian noise added to next-state encodings in training.
    pub eps_latent: f64,
    /// Std of the curvature perturbation.
    pub sigma_curv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pc3: 1.0,
            lambda_r: 10.0,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 10.0,
            eps_latent: 0.01,
            sigma_curv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_pc3,
            self.lambda_r,
            self.lambda_1,
            self.lambda_2,
            self.lambda_3,
            self.eps_latent,
            self.sigma_curv,
        ];
        if all.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "loss weights and noise scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// K latent transitions (z_t, u_t, z_{t+1}) as [K, d] tensors. During
/// training the next-state side carries the anti-collapse Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub h: Tensor,
    pub v: Tensor,
    pub u: Tensor,
    pub h_next: Tensor,
    pub v_next: Tensor,
}

impl LatentBatch {
    pub fn new(h: Tensor, v: Tensor, u: Tensor, h_next: Tensor, v_next: Tensor) -> Result<Self> {
        let shape = h.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("LatentBatch", "tensors must be [K, d]"));
        }
        for (name, t) in [
            ("v", &v),
            ("u", &u),
            ("h_next", &h_next),
            ("v_next", &v_next),
        ] {
            if t.shape() != shape {
                return Err(Error::shape(
                    "LatentBatch",
                    format!("{name} shape {:?} != h shape {:?}", t.shape(), shape),
                ));
            }
        }
        Ok(LatentBatch {
            h,
            v,
            u,
            h_next,
            v_next,
        })
    }

    /// Builds a batch from per-sample latent states and controls.
    pub fn from_states(
        current: &[LatentState],
        controls: &[Vec<f64>],
        next: &[LatentState],
    ) -> Result<Self> {
        let k = current.len();
        if k == 0 || controls.len() != k || next.len() != k {
            return Err(Error::Dimension("from_states: ragged batch".into()));
        }
        let d = current[0].dim();
        let flat = |f: &dyn Fn(usize) -> Vec<f64>| -> Result<Tensor> {
            let mut data = Vec::with_capacity(k * d);
            for i in 0..k {
                let row = f(i);
                if row.len() != d {
                    return Err(Error::Dimension("from_states: dim mismatch".into()));
                }
                data.extend(row);
            }
            Tensor::new(vec![k, d], data)
        };
        LatentBatch::new(
            flat(&|i| current[i].h.clone())?,
            flat(&|i| current[i].v.clone())?,
            flat(&|i| controls[i].clone())?,
            flat(&|i| next[i].h.clone())?,
            flat(&|i| next[i].v.clone())?,
        )
    }

    pub fn k(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.h.shape()[1]
    }

    /// Declares the batch as named graph inputs so gradients with respect
    /// to the latents are available.
    pub fn declare(&self, g: &mut Graph) -> Result<BatchNodes> {
        Ok(BatchNodes {
            h: g.input("batch.h", self.h.clone())?,
            v: g.input("batch.v", self.v.clone())?,
            u: g.input("batch.u", self.u.clone())?,
            h_next: g.input("batch.h_next", self.h_next.clone())?,
            v_next: g.input("batch.v_next", self.v_next.clone())?,
            k: self.k(),
            latent_dim: self.latent_dim(),
        })
    }
}

/// A batch with pseudo-targets attached.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub batch: LatentBatch,
    pub h_target: Tensor,
    pub v_target: Tensor,
}

/// Labels a batch with hindsight pseudo-targets: v_target rows are drawn
/// from the batch's own velocities (the in-batch prior), h_target inverts
/// the PD law at each stored (z, u).
pub fn label_targets(
    batch: &LatentBatch,
    v_target_rows: &[usize],
    gains: &PDGains,
) -> Result<LabeledBatch> {
    let k = batch.k();
    let d = batch.latent_dim();
    if gains.dim() != d {
        return Err(Error::Dimension(format!(
            "gain dim {} != latent dim {d}",
            gains.dim()
        )));
    }
    if v_target_rows.len() != k {
        return Err(Error::Dimension("one v_target row per sample required".into()));
    }
    let mut h_target = Vec::with_capacity(k * d);
    let mut v_target = Vec::with_capacity(k * d);
    for (i, &row) in v_target_rows.iter().enumerate() {
        if row >= k {
            return Err(Error::InvalidArgument(format!(
                "v_target row {row} out of batch of {k}"
            )));
        }
        let z = LatentState::new(batch.h.row(i).to_vec(), batch.v.row(i).to_vec())?;
        let vt = batch.v.row(row).to_vec();
        let ht = hindsight_target(&z, batch.u.row(i), &vt, gains)?;
        h_target.extend(ht);
        v_target.extend(vt);
    }
    Ok(LabeledBatch {
        batch: batch.clone(),
        h_target: Tensor::new(vec![k, d], h_target)?,
        v_target: Tensor::new(vec![k, d], v_target)?,
    })
}

/// The pseudo-target configuration that makes the stored control a PD
/// command: h_target = Kp^-1 (u + Kp h - Kd (v_target - v)). Feeding the
/// result back into the PD law reproduces u to machine precision.
pub fn hindsight_target(
    z: &LatentState,
    u: &[f64],
    v_target: &[f64],
    gains: &PDGains,
) -> Result<Vec<f64>> {
    let d = z.dim();
    if u.len() != d || v_target.len() != d || gains.dim() != d {
        return Err(Error::Dimension("hindsight_target: dims disagree".into()));
    }
    Ok((0..d)
        .map(|i| (u[i] + gains.kp[i] * z.h[i] - gains.kd[i] * (v_target[i] - z.v[i])) / gains.kp[i])
        .collect())
}

/// V(z_err) = h_err^T Q_h h_err + v_err^T Q_v v_err.
pub fn lyapunov_value(h_err: &[f64], v_err: &[f64], q: &LyapunovQ) -> f64 {
    let h: f64 = h_err
        .iter()
        .zip(&q.qh)
        .map(|(&e, &qi)| qi * e * e)
        .sum();
    let v: f64 = v_err
        .iter()
        .zip(&q.qv)
        .map(|(&e, &qi)| qi * e * e)
        .sum();
    h + v
}

/// Empirical Lyapunov risk of a labeled batch: mean positive part of the
/// finite-difference Lie derivative of V toward each pseudo-target.
pub fn lyapunov_risk(labeled: &LabeledBatch, q: &LyapunovQ, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("lyapunov_risk: dt must be > 0".into()));
    }
    let b = &labeled.batch;
    let k = b.k();
    let mut total = 0.0;
    for i in 0..k {
        let he: Vec<f64> = sub_rows(b.h.row(i), labeled.h_target.row(i));
        let ve: Vec<f64> = sub_rows(b.v.row(i), labeled.v_target.row(i));
        let hen: Vec<f64> = sub_rows(b.h_next.row(i), labeled.h_target.row(i));
        let ven: Vec<f64> = sub_rows(b.v_next.row(i), labeled.v_target.row(i));
        let lie = (lyapunov_value(&hen, &ven, q) - lyapunov_value(&he, &ve, q)) / dt;
        total += lie.max(0.0);
    }
    Ok(total / k as f64)
}

fn sub_rows(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Samples the curvature perturbations (eta_z [K, 2d], eta_u [K, d]).
pub fn sample_curvature_noise(
    k: usize,
    latent_dim: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument("sigma_curv must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok((
            Tensor::zeros(&[k, 2 * latent_dim]),
            Tensor::zeros(&[k, latent_dim]),
        ));
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite");
    let eta_z = (0..k * 2 * latent_dim)
        .map(|_| normal.sample(rng))
        .collect();
    let eta_u = (0..k * latent_dim).map(|_| normal.sample(rng)).collect();
    Ok((
        Tensor::new(vec![k, 2 * latent_dim], eta_z)?,
        Tensor::new(vec![k, latent_dim], eta_u)?,
    ))
}

/// Contrastive predictive-coding loss of a batch. K = 1 degenerates to 0.
pub fn cpc_loss(batch: &LatentBatch, dynamics: &impl LatentDynamics) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = batch.declare(&mut g)?;
    let loss = cpc_loss_nodes(&mut g, dynamics, &nodes)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::non_finite("cpc_loss"));
    }
    Ok(value)
}

/// Mean negative transition log-density of a batch.
pub fn consistency_loss(batch: &LatentBatch, dynamics: &impl LatentDynamics) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = batch.declare(&mut g)?;
    let loss = consistency_loss_nodes(&mut g, dynamics, &nodes)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::non_finite("consistency_loss"));
    }
    Ok(value)
}

/// Curvature loss with freshly sampled perturbations.
pub fn curvature_loss(
    batch: &LatentBatch,
    dynamics: &impl LatentDynamics,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let (eta_z, eta_u) = sample_curvature_noise(batch.k(), batch.latent_dim(), sigma, rng)?;
    let mut g = Graph::new();
    let nodes = batch.declare(&mut g)?;
    let loss = curvature_loss_nodes(&mut g, dynamics, &nodes, &eta_z, &eta_u)?;
    g.value(loss).item()
}

/// Weighted sum of the three PC3 terms.
pub fn pc3_loss(
    batch: &LatentBatch,
    dynamics: &impl LatentDynamics,
    weights: &LossWeights,
    rng: &mut impl Rng,
) -> Result<f64> {
    let cpc = cpc_loss(batch, dynamics)?;
    let cons = consistency_loss(batch, dynamics)?;
    let curv = curvature_loss(batch, dynamics, weights.sigma_curv, rng)?;
    Ok(weights.lambda_1 * cpc + weights.lambda_2 * cons + weights.lambda_3 * curv)
}

/// Per-component values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cpc: f64,
    pub consistency: f64,
    pub curvature: f64,
    pub pc3: f64,
    pub risk: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(g: &Graph, nodes: &LossNodes) -> Result<Self> {
        Ok(LossBreakdown {
            cpc: g.value(nodes.cpc).item()?,
            consistency: g.value(nodes.consistency).item()?,
            curvature: g.value(nodes.curvature).item()?,
            pc3: g.value(nodes.pc3).item()?,
            risk: g.value(nodes.risk).item()?,
            total: g.value(nodes.total).item()?,
        })
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cpc", self.cpc),
            ("consistency", self.consistency),
            ("curvature", self.curvature),
            ("risk", self.risk),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Full objective over a latent batch: value of every component plus the
/// gradient map over batch latents and any dynamics parameters declared by
/// the dynamics implementation. v_target rows index into the batch prior;
/// gradients flow through the pseudo-targets.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    batch: &LatentBatch,
    v_target_rows: &[usize],
    dynamics: &impl LatentDynamics,
    weights: &LossWeights,
    gains: &PDGains,
    q: &LyapunovQ,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, Gradients)> {
    weights.validate()?;
    let (eta_z, eta_u) = sample_curvature_noise(batch.k(), batch.latent_dim(), weights.sigma_curv, rng)?;
    let mut g = Graph::new();
    let nodes = batch.declare(&mut g)?;
    let loss = procl_loss_nodes(
        &mut g, dynamics, &nodes, weights, gains, q, v_target_rows, &eta_z, &eta_u, false,
    )?;
    let breakdown = LossBreakdown::read(&g, &loss)?;
    if let Some(name) = breakdown.first_non_finite() {
        return Err(Error::non_finite(format!("total_loss component {name}")));
    }
    let grads = g.backward(loss.total)?;
    Ok((breakdown, grads))
}
