use super::{ConstVelocityDynamics, LinearStubDynamics};
use super::*;
use crate::env::{EnvSpec, Frame, GroundTruthState, Observation};
use crate::tensor::grad_check;

fn uniform_frame(w: usize, h: usize, value: f32) -> Frame {
    Frame {
        width: w,
        height: h,
        intensities: vec![value; w * h],
    }
}

/// A model whose encoder is exactly the mean pixel intensity: no conv
/// layers, dense weights 1/(H*W), zero bias.
fn mean_pixel_model(w: usize, h: usize, dt: f64) -> LatentModel {
    let config = ModelConfig {
        latent_dim: 1,
        frame_w: w,
        frame_h: h,
        conv: vec![],
        dyn_hidden: vec![4],
        dt,
    };
    let mut model = LatentModel::init(config, 0).unwrap();
    let n = w * h;
    *model.params.get_mut("enc.dense.w").unwrap() =
        Tensor::new(vec![n, 1], vec![1.0 / n as f64; n]).unwrap();
    *model.params.get_mut("enc.dense.b").unwrap() = Tensor::zeros(&[1, 1]);
    model
}

#[test]
fn encode_is_finite_difference_of_frame_encodings() {
    let model = mean_pixel_model(4, 4, 0.1);
    let obs = Observation::new(uniform_frame(4, 4, 0.6), uniform_frame(4, 4, 0.4)).unwrap();
    let z = model.encode(&obs, 0.1).unwrap();
    assert!((z.h[0] - 0.6).abs() < 1e-6, "h = {}", z.h[0]);
    assert!((z.v[0] - 2.0).abs() < 1e-5, "v = {}", z.v[0]);
}

#[test]
fn identical_frames_give_exactly_zero_velocity() {
    let config = ModelConfig::for_frames(8, 8, 2, 0.05).unwrap();
    let model = LatentModel::init(config, 3).unwrap();
    let obs = Observation::still(uniform_frame(8, 8, 0.37));
    let z = model.encode(&obs, 0.05).unwrap();
    assert_eq!(z.v, vec![0.0, 0.0]);
}

#[test]
fn encode_is_deterministic() {
    let env = EnvSpec::point_mass();
    let config = ModelConfig::for_frames(32, 32, 2, env.dt).unwrap();
    let model = LatentModel::init(config, 11).unwrap();
    let s = GroundTruthState::at_rest(vec![0.1, -0.05]);
    let obs = Observation::still(env.render(&s));
    let a = model.encode(&obs, env.dt).unwrap();
    let b = model.encode(&obs, env.dt).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encode_rejects_wrong_frame_size() {
    let config = ModelConfig::for_frames(8, 8, 2, 0.05).unwrap();
    let model = LatentModel::init(config, 3).unwrap();
    let obs = Observation::still(uniform_frame(16, 16, 0.5));
    assert!(model.encode(&obs, 0.05).is_err());
}

#[test]
fn predict_euler_step_with_constant_velocity_stub() {
    let mut g = Graph::new();
    let dynamics = ConstVelocityDynamics {
        velocity: vec![1.0, 0.0],
        dt: 0.05,
        logvar: vec![0.0; 4],
    };
    let h = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
    let v = g.constant(Tensor::new(vec![1, 2], vec![0.3, 0.3]).unwrap()).unwrap();
    let u = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
    let (h_next, v_next) = predict_nodes(&mut g, &dynamics, h, v, u).unwrap();
    assert_eq!(g.value(v_next).data(), &[1.0, 0.0]);
    assert_eq!(g.value(h_next).data(), &[0.05, 0.0]);
}

#[test]
fn predict_zero_velocity_stub_is_latent_rest() {
    let mut g = Graph::new();
    let dynamics = ConstVelocityDynamics {
        velocity: vec![0.0, 0.0],
        dt: 0.05,
        logvar: vec![0.0; 4],
    };
    let h = g.constant(Tensor::new(vec![1, 2], vec![0.2, -0.1]).unwrap()).unwrap();
    let v = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
    let u = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
    let (h_next, _) = predict_nodes(&mut g, &dynamics, h, v, u).unwrap();
    assert_eq!(g.value(h_next).data(), g.value(h).data());
}

#[test]
fn predict_linear_stub_mirrors_point_mass() {
    let mut g = Graph::new();
    let dynamics = LinearStubDynamics {
        latent_dim: 2,
        dt: 0.05,
    };
    let zero = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let h = g.constant(zero.clone()).unwrap();
    let v = g.constant(zero).unwrap();
    let u = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let (h_next, v_next) = predict_nodes(&mut g, &dynamics, h, v, u).unwrap();
    assert_eq!(g.value(v_next).data(), &[0.05, 0.0]);
    let h_val = g.value(h_next).data();
    assert!((h_val[0] - 0.0025).abs() < 1e-15 && h_val[1] == 0.0);
}

#[test]
fn structural_identity_h_step_equals_dt_times_v() {
    // h' is literally h + dt*v', so the identity holds bit-for-bit.
    let config = ModelConfig::for_frames(8, 8, 2, 0.05).unwrap();
    let model = LatentModel::init(config, 9).unwrap();
    let z = LatentState::new(vec![0.3, -0.7], vec![1.1, 0.4]).unwrap();
    let next = model.predict(&z, &[0.5, -0.2]).unwrap();
    for i in 0..2 {
        assert_eq!(next.h[i], z.h[i] + 0.05 * next.v[i]);
    }
}

#[test]
fn log_density_at_mean_is_the_gaussian_normalizer() {
    // unit variance, 2*d = 4: ln N(mean; mean, I) = -2 ln(2 pi)
    let config = ModelConfig::for_frames(8, 8, 2, 0.05).unwrap();
    let model = LatentModel::init(config, 5).unwrap();
    let z = LatentState::new(vec![0.1, 0.2], vec![-0.3, 0.05]).unwrap();
    let u = [0.4, -0.9];
    let mean = model.predict(&z, &u).unwrap();
    let ld = model.log_density(&mean, &z, &u).unwrap();
    let expected = -2.0 * (2.0 * std::f64::consts::PI).ln();
    assert!((ld - expected).abs() < 1e-12, "{ld} vs {expected}");
    assert!((expected - (-3.6758)).abs() < 1e-4);
}

#[test]
fn log_density_residual_form_and_monotonicity() {
    let base = gaussian_log_density(&[0.0; 4], &[0.0; 4]).unwrap();
    let r = [0.3, -0.1, 0.2, 0.6];
    let r2: f64 = r.iter().map(|x| x * x).sum();
    let ld = gaussian_log_density(&r, &[0.0; 4]).unwrap();
    assert!((ld - (base - r2 / 2.0)).abs() < 1e-12);

    let doubled: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
    assert!(gaussian_log_density(&doubled, &[0.0; 4]).unwrap() < ld);
}

#[test]
fn gaussian_density_rejects_degenerate_variance() {
    assert!(gaussian_log_density(&[0.1], &[-1000.0]).is_err());
    assert!(gaussian_log_density(&[0.1, 0.2], &[0.0]).is_err());
}

#[test]
fn encode_predict_gradients_match_finite_differences() {
    let config = ModelConfig {
        latent_dim: 2,
        frame_w: 8,
        frame_h: 8,
        conv: vec![
            ConvSpec { out_channels: 4, kernel: 3, stride: 2 },
            ConvSpec { out_channels: 8, kernel: 3, stride: 2 },
        ],
        dyn_hidden: vec![8],
        dt: 0.05,
    };
    let model = LatentModel::init(config, 21).unwrap();
    let mut point: Vec<(String, Tensor)> = model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let frame_data: Vec<f64> = (0..2 * 64).map(|i| (i as f64 * 0.37).sin().abs()).collect();
    point.push((
        "frames".to_string(),
        Tensor::new(vec![2, 1, 8, 8], frame_data).unwrap(),
    ));
    point.push((
        "u".to_string(),
        Tensor::new(vec![1, 2], vec![0.3, -0.8]).unwrap(),
    ));

    let err = grad_check(
        |g, ids| {
            let nodes = model.declare_with(g, |_, name, _| Ok(ids[name]))?;
            let enc = nodes.encoder.encode_frames(g, ids["frames"])?;
            let h = g.slice_cols(enc, 0, 2)?;
            let h_cur = g.gather_rows(h, vec![0])?;
            let h_prev = g.gather_rows(h, vec![1])?;
            let dh = g.sub(h_cur, h_prev)?;
            let v = g.scale(dh, 1.0 / 0.05)?;
            let (h_next, v_next) = predict_nodes(g, &nodes.dynamics, h_cur, v, ids["u"])?;
            let z = g.concat_cols(h_next, v_next)?;
            let sq = g.square(z)?;
            g.sum_all(sq)
        },
        &point,
        // larger step than the op-level checks: the 1/dt velocity scaling
        // makes f large relative to the weakest conv-weight gradients, and
        // central-difference cancellation noise scales with |f|/step
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "encode/predict gradient error {err}");
}

#[test]
fn checkpoint_round_trips_model_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let config = ModelConfig::for_frames(32, 32, 2, 0.05).unwrap();
    let model = LatentModel::init(config, 77).unwrap();
    let mut extra = BTreeMap::new();
    extra.insert("train.step".to_string(), Tensor::scalar(42.0));
    save_checkpoint(&path, &model, "pointmass", &extra).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.model, model);
    assert_eq!(loaded.env_name, "pointmass");
    assert_eq!(loaded.extra["train.step"].item().unwrap(), 42.0);
}

#[test]
fn config_rejects_zero_latent_dim_and_oversized_kernels() {
    assert!(ModelConfig::for_frames(8, 8, 0, 0.05).is_err());
    let bad = ModelConfig {
        latent_dim: 2,
        frame_w: 4,
        frame_h: 4,
        conv: vec![ConvSpec { out_channels: 8, kernel: 6, stride: 2 }],
        dyn_hidden: vec![8],
        dt: 0.05,
    };
    assert!(bad.validate().is_err());
}
