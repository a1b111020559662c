//! Ground-truth simulators, pixel renderers, and random-policy collection.
//!
//! Both environments are deterministic double integrators with hard
//! configuration bounds: a planar point mass pushed by 2-D force and a
//! two-link reacher torqued at each joint. Renders are grayscale, one frame
//! per state, so observations carry velocity only through frame pairs.
//!
//! Ground-truth states ride along in [`TransitionRecord`]s for evaluation
//! only; the model-facing types ([`Frame`], [`Observation`]) never expose
//! them.

mod dataset;

pub use dataset::{collect_random, load_dataset, save_dataset, Dataset, DatasetMeta, TransitionRecord};

use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};

/// Simulator state: configuration plus its time derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthState {
    pub config: Vec<f64>,
    pub velocity: Vec<f64>,
}

impl GroundTruthState {
    pub fn new(config: Vec<f64>, velocity: Vec<f64>) -> Self {
        GroundTruthState { config, velocity }
    }

    pub fn at_rest(config: Vec<f64>) -> Self {
        let velocity = vec![0.0; config.len()];
        GroundTruthState { config, velocity }
    }
}

/// One grayscale frame, intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub intensities: Vec<f32>,
}

impl Frame {
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.intensities[row * self.width + col]
    }

    /// Position of the brightest pixel as (row, col).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0.0f32);
        for (i, &v) in self.intensities.iter().enumerate() {
            if v > best.1 {
                best = (i, v);
            }
        }
        (best.0 / self.width, best.0 % self.width)
    }

    pub fn l2_distance(&self, other: &Frame) -> f64 {
        self.intensities
            .iter()
            .zip(&other.intensities)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Two consecutive frames; `previous` is exactly one step older.
#[derive(Debug, Clone)]
pub struct Observation {
    pub current: Frame,
    pub previous: Frame,
}

impl Observation {
    pub fn new(current: Frame, previous: Frame) -> Result<Self> {
        if current.width != previous.width || current.height != previous.height {
            return Err(Error::Dimension(
                "observation frames must share dimensions".into(),
            ));
        }
        Ok(Observation { current, previous })
    }

    /// An observation whose finite-difference velocity is exactly zero.
    pub fn still(frame: Frame) -> Self {
        Observation {
            previous: frame.clone(),
            current: frame,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    Reacher,
}

/// Environment descriptor: kind, timestep, control bound, frame geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub dt: f64,
    pub u_max: f64,
    pub frame_w: usize,
    pub frame_h: usize,
}

/// Point-mass workspace half-width; positions live in [-0.3, 0.3]^2.
pub const POINTMASS_HALF_WIDTH: f64 = 0.3;
/// Gaussian blob radius in pixels.
pub const BLOB_SIGMA_PX: f64 = 1.5;
/// Reacher link lengths; full reach stays inside the rendered workspace.
pub const REACHER_LINK: f64 = 0.14;
/// Root joint limit: +/-160 degrees.
pub const REACHER_ROOT_LIMIT: f64 = 160.0 * std::f64::consts::PI / 180.0;
/// Elbow bends one way only: [0, 160] degrees.
pub const REACHER_ELBOW_LIMIT: f64 = 160.0 * std::f64::consts::PI / 180.0;

impl EnvSpec {
    pub fn point_mass() -> Self {
        EnvSpec {
            kind: EnvKind::PointMass,
            dt: 0.05,
            u_max: 1.0,
            frame_w: 32,
            frame_h: 32,
        }
    }

    pub fn reacher() -> Self {
        EnvSpec {
            kind: EnvKind::Reacher,
            dt: 0.02,
            u_max: 1.0,
            frame_w: 32,
            frame_h: 32,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "pointmass" => Ok(Self::point_mass()),
            "reacher" => Ok(Self::reacher()),
            other => Err(Error::InvalidArgument(format!(
                "unknown environment {other} (expected pointmass or reacher)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            EnvKind::PointMass => "pointmass",
            EnvKind::Reacher => "reacher",
        }
    }

    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn control_dim(&self) -> usize {
        2
    }

    /// Per-axis configuration bounds as (low, high) pairs.
    pub fn config_bounds(&self) -> [(f64, f64); 2] {
        match self.kind {
            EnvKind::PointMass => [
                (-POINTMASS_HALF_WIDTH, POINTMASS_HALF_WIDTH),
                (-POINTMASS_HALF_WIDTH, POINTMASS_HALF_WIDTH),
            ],
            EnvKind::Reacher => [
                (-REACHER_ROOT_LIMIT, REACHER_ROOT_LIMIT),
                (0.0, REACHER_ELBOW_LIMIT),
            ],
        }
    }

    pub fn step(&self, state: &GroundTruthState, u: &[f64]) -> Result<GroundTruthState> {
        match self.kind {
            EnvKind::PointMass => step_point_mass(state, u, self.dt, self.u_max),
            EnvKind::Reacher => step_reacher(state, u, self.dt, self.u_max),
        }
    }

    pub fn render(&self, state: &GroundTruthState) -> Frame {
        match self.kind {
            EnvKind::PointMass => render_point_mass(state, self.frame_w, self.frame_h),
            EnvKind::Reacher => render_reacher(state, self.frame_w, self.frame_h),
        }
    }

    /// Uniform random in-bounds configuration at rest.
    pub fn random_state(&self, rng: &mut impl Rng) -> GroundTruthState {
        let config = self
            .config_bounds()
            .iter()
            .map(|&(lo, hi)| Uniform::new_inclusive(lo, hi).sample(rng))
            .collect();
        GroundTruthState::at_rest(config)
    }
}

fn check_step_inputs(state: &GroundTruthState, u: &[f64], u_max: f64) -> Result<()> {
    if state.config.len() != 2 || state.velocity.len() != 2 || u.len() != 2 {
        return Err(Error::Dimension(format!(
            "expected 2-d state and control, got config {}, velocity {}, u {}",
            state.config.len(),
            state.velocity.len(),
            u.len()
        )));
    }
    let finite = state.config.iter().chain(&state.velocity).chain(u);
    if !finite.clone().all(|x| x.is_finite()) {
        return Err(Error::non_finite("environment step input"));
    }
    if u.iter().any(|&x| x.abs() > u_max + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "control magnitude exceeds u_max={u_max}: {u:?}"
        )));
    }
    Ok(())
}

/// Semi-implicit Euler with hard walls: vel' = vel + dt*u,
/// pos' = pos + dt*vel'; contact clamps position and zeros that velocity
/// component.
fn double_integrator_step(
    state: &GroundTruthState,
    u: &[f64],
    dt: f64,
    bounds: &[(f64, f64); 2],
) -> GroundTruthState {
    let mut config = vec![0.0; 2];
    let mut velocity = vec![0.0; 2];
    for i in 0..2 {
        let v = state.velocity[i] + dt * u[i];
        let p = state.config[i] + dt * v;
        let (lo, hi) = bounds[i];
        if p < lo {
            config[i] = lo;
            velocity[i] = 0.0;
        } else if p > hi {
            config[i] = hi;
            velocity[i] = 0.0;
        } else {
            config[i] = p;
            velocity[i] = v;
        }
    }
    GroundTruthState { config, velocity }
}

pub fn step_point_mass(
    state: &GroundTruthState,
    u: &[f64],
    dt: f64,
    u_max: f64,
) -> Result<GroundTruthState> {
    check_step_inputs(state, u, u_max)?;
    let bounds = EnvSpec::point_mass().config_bounds();
    Ok(double_integrator_step(state, u, dt, &bounds))
}

pub fn step_reacher(
    state: &GroundTruthState,
    u: &[f64],
    dt: f64,
    u_max: f64,
) -> Result<GroundTruthState> {
    check_step_inputs(state, u, u_max)?;
    let bounds = EnvSpec::reacher().config_bounds();
    Ok(double_integrator_step(state, u, dt, &bounds))
}

/// Workspace coordinate -> pixel coordinate. The frame center is an exact
/// pixel sample point so a centered blob renders with peak value 1.
fn to_pixel(workspace: f64, size: usize) -> f64 {
    let c = size as f64 / 2.0;
    c + workspace / POINTMASS_HALF_WIDTH * (c - 0.5)
}

fn render_point_mass(state: &GroundTruthState, w: usize, h: usize) -> Frame {
    let px = to_pixel(state.config[0], w);
    let py = to_pixel(state.config[1], h);
    let inv = 1.0 / (2.0 * BLOB_SIGMA_PX * BLOB_SIGMA_PX);
    let mut intensities = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let dx = col as f64 - px;
            let dy = row as f64 - py;
            intensities.push((-(dx * dx + dy * dy) * inv).exp() as f32);
        }
    }
    Frame {
        width: w,
        height: h,
        intensities,
    }
}

/// Forward kinematics: root at workspace origin, elbow relative to root.
pub fn reacher_joint_positions(config: &[f64]) -> ([f64; 2], [f64; 2]) {
    let a = config[0];
    let b = config[0] + config[1];
    let elbow = [REACHER_LINK * a.cos(), REACHER_LINK * a.sin()];
    let tip = [
        elbow[0] + REACHER_LINK * b.cos(),
        elbow[1] + REACHER_LINK * b.sin(),
    ];
    (elbow, tip)
}

fn dist_to_segment(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

fn render_reacher(state: &GroundTruthState, w: usize, h: usize) -> Frame {
    let (elbow, tip) = reacher_joint_positions(&state.config);
    let root_px = [to_pixel(0.0, w), to_pixel(0.0, h)];
    let elbow_px = [to_pixel(elbow[0], w), to_pixel(elbow[1], h)];
    let tip_px = [to_pixel(tip[0], w), to_pixel(tip[1], h)];
    // 1.5 px wide segments with a 1 px linear anti-aliasing skirt
    let half_width = 0.75;
    let mut intensities = Vec::with_capacity(w * h);
    for row in 0..h {
        for col in 0..w {
            let p = [col as f64, row as f64];
            let d1 = dist_to_segment(p, root_px, elbow_px);
            let d2 = dist_to_segment(p, elbow_px, tip_px);
            let d = d1.min(d2);
            let cov = (half_width + 1.0 - d).clamp(0.0, 1.0);
            intensities.push(cov as f32);
        }
    }
    Frame {
        width: w,
        height: h,
        intensities,
    }
}
