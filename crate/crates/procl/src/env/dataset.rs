//! Transition datasets: random-policy collection and the on-disk format.
//!
//! File layout, all little-endian: magic `PROCLDS1`, version u32, metadata
//! (env name length u32 + UTF-8, dt f64, state dim u32, control dim u32,
//! frame width u32, frame height u32, u_max f64, seed u64), frame count
//! u32, frames as f32, record count u32, then fixed-width records (three
//! u32 frame indices, control dim f64 controls, u32 episode id, then the
//! ground-truth configurations at t and t+1 as state dim f64 each).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{EnvSpec, Frame, GroundTruthState};
use crate::error::{Error, Result};

const DATASET_MAGIC: &[u8; 8] = b"PROCLDS1";
const DATASET_VERSION: u32 = 1;

/// One usable step: frame indices around time t, the control at t, and the
/// evaluation-only ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub frame_prev: u32,
    pub frame_curr: u32,
    pub frame_next: u32,
    pub control: Vec<f64>,
    pub episode: u32,
    /// Ground-truth configuration at t; read only by evaluation code.
    pub gt_config_curr: Vec<f64>,
    /// Ground-truth configuration at t+1; read only by evaluation code.
    pub gt_config_next: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub env_name: String,
    pub dt: f64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub u_max: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub frames: Vec<Frame>,
    pub records: Vec<TransitionRecord>,
}

impl Dataset {
    pub fn frame(&self, idx: u32) -> &Frame {
        &self.frames[idx as usize]
    }

    fn validate(&self) -> Result<()> {
        let n = self.frames.len() as u32;
        for (i, r) in self.records.iter().enumerate() {
            if r.frame_prev >= n || r.frame_curr >= n || r.frame_next >= n {
                return Err(Error::InvalidArgument(format!(
                    "record {i} references frame beyond table of {n}"
                )));
            }
            if r.control.len() != self.meta.control_dim
                || r.gt_config_curr.len() != self.meta.state_dim
                || r.gt_config_next.len() != self.meta.state_dim
            {
                return Err(Error::Dimension(format!("record {i} width mismatch")));
            }
        }
        Ok(())
    }
}

/// Runs a uniform random policy in fixed-length episodes and keeps every
/// step with frames at t-1, t, t+1. An episode of `episode_len` timesteps
/// yields `episode_len - 2` records, so `n_steps` timesteps yield
/// `(n_steps / episode_len) * (episode_len - 2)` records.
pub fn collect_random(
    env: &EnvSpec,
    n_steps: usize,
    episode_len: usize,
    seed: u64,
) -> Result<Dataset> {
    if episode_len < 3 || n_steps < episode_len {
        return Err(Error::InvalidArgument(format!(
            "need n_steps >= episode_len >= 3, got {n_steps} and {episode_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let control_dist = Uniform::new_inclusive(-env.u_max, env.u_max);
    let episodes = n_steps / episode_len;
    let mut frames = Vec::with_capacity(episodes * episode_len);
    let mut records = Vec::with_capacity(episodes * (episode_len - 2));
    for episode in 0..episodes {
        let mut states = Vec::with_capacity(episode_len);
        let mut controls = Vec::with_capacity(episode_len - 1);
        let mut state = env.random_state(&mut rng);
        states.push(state.clone());
        for _ in 0..episode_len - 1 {
            let u: Vec<f64> = (0..env.control_dim())
                .map(|_| control_dist.sample(&mut rng))
                .collect();
            state = env.step(&state, &u)?;
            controls.push(u);
            states.push(state.clone());
        }
        let base = frames.len() as u32;
        frames.extend(states.iter().map(|s| env.render(s)));
        for t in 1..episode_len - 1 {
            records.push(TransitionRecord {
                frame_prev: base + (t - 1) as u32,
                frame_curr: base + t as u32,
                frame_next: base + (t + 1) as u32,
                control: controls[t].clone(),
                episode: episode as u32,
                gt_config_curr: states[t].config.clone(),
                gt_config_next: states[t + 1].config.clone(),
            });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            env_name: env.name().to_string(),
            dt: env.dt,
            state_dim: env.state_dim(),
            control_dim: env.control_dim(),
            frame_w: env.frame_w,
            frame_h: env.frame_h,
            u_max: env.u_max,
            seed,
        },
        frames,
        records,
    })
}

/// Reconstructs the ground-truth state at t for a record, with velocity by
/// finite difference of the stored configurations. Evaluation-only helper.
pub fn record_state(dataset: &Dataset, record: &TransitionRecord) -> GroundTruthState {
    let dt = dataset.meta.dt;
    let velocity = record
        .gt_config_next
        .iter()
        .zip(&record.gt_config_curr)
        .map(|(n, c)| (n - c) / dt)
        .collect();
    GroundTruthState::new(record.gt_config_curr.clone(), velocity)
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(DATASET_MAGIC).map_err(io_err)?;
    w.write_all(&DATASET_VERSION.to_le_bytes()).map_err(io_err)?;
    let m = &dataset.meta;
    let name = m.env_name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(name).map_err(io_err)?;
    w.write_all(&m.dt.to_le_bytes()).map_err(io_err)?;
    for dim in [m.state_dim, m.control_dim, m.frame_w, m.frame_h] {
        w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
    }
    w.write_all(&m.u_max.to_le_bytes()).map_err(io_err)?;
    w.write_all(&m.seed.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(dataset.frames.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for frame in &dataset.frames {
        for &v in &frame.intensities {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.write_all(&(dataset.records.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for r in &dataset.records {
        for idx in [r.frame_prev, r.frame_curr, r.frame_next] {
            w.write_all(&idx.to_le_bytes()).map_err(io_err)?;
        }
        for &u in &r.control {
            w.write_all(&u.to_le_bytes()).map_err(io_err)?;
        }
        w.write_all(&r.episode.to_le_bytes()).map_err(io_err)?;
        for &x in r.gt_config_curr.iter().chain(&r.gt_config_next) {
            w.write_all(&x.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PROCLDS1",
        });
    }
    let version = read_u32(&mut r, path, "version")?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let name_len = read_u32(&mut r, path, "env name length")? as usize;
    if name_len > 1 << 16 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("implausible env name length {name_len}"),
        });
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(&mut r, &mut name_bytes, path, "env name")?;
    let env_name = String::from_utf8(name_bytes).map_err(|_| Error::Truncated {
        path: path.to_path_buf(),
        detail: "env name is not UTF-8".into(),
    })?;
    let dt = read_f64(&mut r, path, "dt")?;
    let state_dim = read_u32(&mut r, path, "state dim")? as usize;
    let control_dim = read_u32(&mut r, path, "control dim")? as usize;
    let frame_w = read_u32(&mut r, path, "frame width")? as usize;
    let frame_h = read_u32(&mut r, path, "frame height")? as usize;
    let u_max = read_f64(&mut r, path, "u_max")?;
    let seed = read_u64(&mut r, path, "seed")?;

    let frame_count = read_u32(&mut r, path, "frame count")? as usize;
    let mut frames = Vec::with_capacity(frame_count);
    let mut buf4 = [0u8; 4];
    for _ in 0..frame_count {
        let mut intensities = Vec::with_capacity(frame_w * frame_h);
        for _ in 0..frame_w * frame_h {
            read_exact(&mut r, &mut buf4, path, "frame data")?;
            intensities.push(f32::from_le_bytes(buf4));
        }
        frames.push(Frame {
            width: frame_w,
            height: frame_h,
            intensities,
        });
    }
    let record_count = read_u32(&mut r, path, "record count")? as usize;
    let mut records = Vec::with_capacity(record_count);
    for _ in 0..record_count {
        let frame_prev = read_u32(&mut r, path, "record frame index")?;
        let frame_curr = read_u32(&mut r, path, "record frame index")?;
        let frame_next = read_u32(&mut r, path, "record frame index")?;
        let mut control = Vec::with_capacity(control_dim);
        for _ in 0..control_dim {
            control.push(read_f64(&mut r, path, "record control")?);
        }
        let episode = read_u32(&mut r, path, "record episode")?;
        let mut gt = Vec::with_capacity(2 * state_dim);
        for _ in 0..2 * state_dim {
            gt.push(read_f64(&mut r, path, "record ground truth")?);
        }
        records.push(TransitionRecord {
            frame_prev,
            frame_curr,
            frame_next,
            control,
            episode,
            gt_config_curr: gt[..state_dim].to_vec(),
            gt_config_next: gt[state_dim..].to_vec(),
        });
    }
    // header count must match what the stream actually held
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: "trailing bytes after declared records".into(),
        });
    }
    let dataset = Dataset {
        meta: DatasetMeta {
            env_name,
            dt,
            state_dim,
            control_dim,
            frame_w,
            frame_h,
            u_max,
            seed,
        },
        frames,
        records,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        path: path.to_path_buf(),
        detail: format!("short read at {what}"),
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, path: &Path, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read, path: &Path, what: &str) -> Result<f64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, path, what)?;
    Ok(f64::from_le_bytes(buf))
}
