//! Graph builders for every training objective.

use crate::error::{Error, Result};
use crate::model::{predict_nodes, LatentDynamics};
use crate::objective::{LossWeights, LyapunovQ, PDGains};
use crate::tensor::{Graph, NodeId, Tensor};

/// Node handles for one minibatch of latent transitions. `h_next`/`v_next`
/// carry the training-time Gaussian noise when the caller added it.
#[derive(Debug, Clone, Copy)]
pub struct BatchNodes {
    pub h: NodeId,
    pub v: NodeId,
    pub u: NodeId,
    pub h_next: NodeId,
    pub v_next: NodeId,
    pub k: usize,
    pub latent_dim: usize,
}

/// Pairwise transition log-densities: entry (i, j) is the log-density of
/// sample i's next latent under sample j's predicted Gaussian.
///
/// Expanded through the quadratic form so the whole K x K matrix is one
/// outer sum plus a matmul.
pub fn log_density_matrix(
    g: &mut Graph,
    dynamics: &impl LatentDynamics,
    batch: &BatchNodes,
) -> Result<NodeId> {
    let (mh, mv) = predict_nodes(g, dynamics, batch.h, batch.v, batch.u)?;
    let means = g.concat_cols(mh, mv)?; // [K, 2d]
    let next = g.concat_cols(batch.h_next, batch.v_next)?; // [K, 2d]
    let logvar = dynamics.log_variance(g)?; // [1, 2d]
    let neg_lv = g.neg(logvar)?;
    let precision = g.exp(neg_lv)?; // [1, 2d]

    let next_sq = g.square(next)?;
    let next_sq_w = g.mul(next_sq, precision)?;
    let a = g.sum_axis(next_sq_w, 1)?; // [K]
    let a_col = g.reshape(a, vec![batch.k, 1])?;

    let means_sq = g.square(means)?;
    let means_sq_w = g.mul(means_sq, precision)?;
    let b = g.sum_axis(means_sq_w, 1)?; // [K]
    let b_row = g.reshape(b, vec![1, batch.k])?;

    let next_w = g.mul(next, precision)?;
    let means_t = g.transpose(means)?;
    let cross = g.matmul(next_w, means_t)?; // [K, K]

    let ab = g.add(a_col, b_row)?; // [K, K] outer sum
    let neg_half_ab = g.scale(ab, -0.5)?;
    let quad = g.add(cross, neg_half_ab)?;

    let lv_sum = g.sum_all(logvar)?;
    let d = 2 * batch.latent_dim;
    let norm = g.scale(lv_sum, -0.5)?;
    let norm = g.add_scalar(norm, -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())?;
    g.add(quad, norm)
}

/// Contrastive loss from a log-density matrix: each positive (diagonal)
/// entry is scored against the in-batch mean over its row, the positive
/// included, so the loss is bounded below by -ln K.
pub fn cpc_from_log_density_matrix(g: &mut Graph, l: NodeId, k: usize) -> Result<NodeId> {
    let pos = g.diag_part(l)?;
    let lse = g.logsumexp_rows(l)?;
    let centered = g.sub(pos, lse)?;
    let mean = g.mean_all(centered)?;
    let neg = g.neg(mean)?;
    g.add_scalar(neg, -(k as f64).ln())
}

/// Consistency loss from the same matrix: mean negative log-density of each
/// sample's own transition.
pub fn consistency_from_log_density_matrix(g: &mut Graph, l: NodeId) -> Result<NodeId> {
    let pos = g.diag_part(l)?;
    let mean = g.mean_all(pos)?;
    g.neg(mean)
}

pub fn cpc_loss_nodes(
    g: &mut Graph,
    dynamics: &impl LatentDynamics,
    batch: &BatchNodes,
) -> Result<NodeId> {
    let l = log_density_matrix(g, dynamics, batch)?;
    cpc_from_log_density_matrix(g, l, batch.k)
}

pub fn consistency_loss_nodes(
    g: &mut Graph,
    dynamics: &impl LatentDynamics,
    batch: &BatchNodes,
) -> Result<NodeId> {
    let l = log_density_matrix(g, dynamics, batch)?;
    consistency_from_log_density_matrix(g, l)
}

/// First-order Taylor residual of the deterministic transition mean under
/// the given perturbations: mean over the batch of
/// ||f(z+eta_z, u+eta_u) - J_z eta_z - J_u eta_u - f(z, u)||.
/// The Jacobian-vector products are exact, not finite differences.
pub fn curvature_loss_nodes(
    g: &mut Graph,
    dynamics: &impl LatentDynamics,
    batch: &BatchNodes,
    eta_z: &Tensor,
    eta_u: &Tensor,
) -> Result<NodeId> {
    let d = batch.latent_dim;
    if eta_z.shape() != [batch.k, 2 * d] || eta_u.shape() != [batch.k, d] {
        return Err(Error::shape(
            "curvature_loss",
            format!(
                "eta shapes {:?} / {:?} do not match batch {}x{}",
                eta_z.shape(),
                eta_u.shape(),
                batch.k,
                d
            ),
        ));
    }
    let eta_z = g.constant(eta_z.clone())?;
    let eta_u = g.constant(eta_u.clone())?;
    let eta_h = g.slice_cols(eta_z, 0, d)?;
    let eta_v = g.slice_cols(eta_z, d, 2 * d)?;

    let h_p = g.add(batch.h, eta_h)?;
    let v_p = g.add(batch.v, eta_v)?;
    let u_p = g.add(batch.u, eta_u)?;

    let vel_perturbed = dynamics.velocity_mean(g, h_p, v_p, u_p)?;
    let jvp = dynamics.velocity_jvp(g, h_p, v_p, u_p, eta_h, eta_v, eta_u)?;
    let vel = dynamics.velocity_mean(g, batch.h, batch.v, batch.u)?;

    // Taylor error of the velocity head; the configuration head is
    // h + dt * g so its error is dt times the same residual.
    let r0 = g.sub(vel_perturbed, jvp)?;
    let r = g.sub(r0, vel)?;
    let r_h = g.scale(r, dynamics.dt())?;
    let err = g.concat_cols(r_h, r)?;
    let norms = g.rows_l2norm(err)?;
    g.mean_all(norms)
}

/// Pseudo-targets that explain each stored control under the PD law:
/// h_target = Kp^-1 (u + Kp h - Kd (v_target - v)), with v_target gathered
/// from the batch's own velocities so encoder gradients flow through both
/// target components unless `stop_target_grad` is set.
pub fn hindsight_target_nodes(
    g: &mut Graph,
    batch: &BatchNodes,
    v_target_rows: &[usize],
    gains: &PDGains,
    stop_target_grad: bool,
) -> Result<(NodeId, NodeId)> {
    if v_target_rows.len() != batch.k {
        return Err(Error::Dimension(format!(
            "need one v_target row per sample: {} vs {}",
            v_target_rows.len(),
            batch.k
        )));
    }
    let d = batch.latent_dim;
    let kp = g.constant(Tensor::new(vec![1, d], gains.kp.clone())?)?;
    let kd = g.constant(Tensor::new(vec![1, d], gains.kd.clone())?)?;
    let kp_inv = g.constant(Tensor::new(
        vec![1, d],
        gains.kp.iter().map(|x| 1.0 / x).collect(),
    )?)?;

    let v_target = g.gather_rows(batch.v, v_target_rows.to_vec())?;
    let dv = g.sub(v_target, batch.v)?;
    let kd_dv = g.mul(kd, dv)?;
    let kp_h = g.mul(kp, batch.h)?;
    let s0 = g.add(batch.u, kp_h)?;
    let s1 = g.sub(s0, kd_dv)?;
    let h_target = g.mul(kp_inv, s1)?;
    if stop_target_grad {
        let h_t = g.stop_grad(h_target)?;
        let v_t = g.stop_grad(v_target)?;
        Ok((h_t, v_t))
    } else {
        Ok((h_target, v_target))
    }
}

/// Quadratic Lyapunov values of a batch of latent errors: rows of
/// h_err^T Q_h h_err + v_err^T Q_v v_err.
pub fn lyapunov_value_nodes(
    g: &mut Graph,
    h_err: NodeId,
    v_err: NodeId,
    q: &LyapunovQ,
) -> Result<NodeId> {
    let d = q.qh.len();
    let qh = g.constant(Tensor::new(vec![1, d], q.qh.clone())?)?;
    let qv = g.constant(Tensor::new(vec![1, d], q.qv.clone())?)?;
    let h_sq = g.square(h_err)?;
    let h_q = g.mul(h_sq, qh)?;
    let v_sq = g.square(v_err)?;
    let v_q = g.mul(v_sq, qv)?;
    let h_sum = g.sum_axis(h_q, 1)?;
    let v_sum = g.sum_axis(v_q, 1)?;
    g.add(h_sum, v_sum)
}

/// Empirical Lyapunov risk: positive part of the finite-difference Lie
/// derivative of V toward each pseudo-target, averaged over the batch.
pub fn lyapunov_risk_nodes(
    g: &mut Graph,
    batch: &BatchNodes,
    h_target: NodeId,
    v_target: NodeId,
    q: &LyapunovQ,
    dt: f64,
) -> Result<NodeId> {
    if dt <= 0.0 {
        return Err(Error::InvalidArgument("lyapunov_risk: dt must be > 0".into()));
    }
    let h_err_next = g.sub(batch.h_next, h_target)?;
    let v_err_next = g.sub(batch.v_next, v_target)?;
    let v_next_val = lyapunov_value_nodes(g, h_err_next, v_err_next, q)?;

    let h_err = g.sub(batch.h, h_target)?;
    let v_err = g.sub(batch.v, v_target)?;
    let v_val = lyapunov_value_nodes(g, h_err, v_err, q)?;

    let dv = g.sub(v_next_val, v_val)?;
    let lie = g.scale(dv, 1.0 / dt)?;
    let hinge = g.relu(lie)?;
    g.mean_all(hinge)
}

/// Every component of the training objective, already weighted into
/// `total`.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub cpc: NodeId,
    pub consistency: NodeId,
    pub curvature: NodeId,
    pub pc3: NodeId,
    pub risk: NodeId,
    pub total: NodeId,
    pub h_target: NodeId,
    pub v_target: NodeId,
}

/// The full objective: weighted PC3 terms plus the latent PD-control
/// Lyapunov risk against hindsight pseudo-targets.
#[allow(clippy::too_many_arguments)]
pub fn procl_loss_nodes(
    g: &mut Graph,
    dynamics: &impl LatentDynamics,
    batch: &BatchNodes,
    weights: &LossWeights,
    gains: &PDGains,
    q: &LyapunovQ,
    v_target_rows: &[usize],
    eta_z: &Tensor,
    eta_u: &Tensor,
    stop_target_grad: bool,
) -> Result<LossNodes> {
    let l = log_density_matrix(g, dynamics, batch)?;
    let cpc = cpc_from_log_density_matrix(g, l, batch.k)?;
    let consistency = consistency_from_log_density_matrix(g, l)?;
    let curvature = curvature_loss_nodes(g, dynamics, batch, eta_z, eta_u)?;

    let cpc_w = g.scale(cpc, weights.lambda_1)?;
    let cons_w = g.scale(consistency, weights.lambda_2)?;
    let curv_w = g.scale(curvature, weights.lambda_3)?;
    let pc3_partial = g.add(cpc_w, cons_w)?;
    let pc3 = g.add(pc3_partial, curv_w)?;

    let (h_target, v_target) =
        hindsight_target_nodes(g, batch, v_target_rows, gains, stop_target_grad)?;
    let risk = lyapunov_risk_nodes(g, batch, h_target, v_target, q, gains.dt)?;

    let pc3_w = g.scale(pc3, weights.lambda_pc3)?;
    let risk_w = g.scale(risk, weights.lambda_r)?;
    let total = g.add(pc3_w, risk_w)?;
    Ok(LossNodes {
        cpc,
        consistency,
        curvature,
        pc3,
        risk,
        total,
        h_target,
        v_target,
    })
}
