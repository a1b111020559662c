//! Finite-difference validation of every graph operation kind.
//!
//! For each op, random inputs over 100+ seeds must match central differences
//! to relative error below 1e-4.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use procl::tensor::{grad_check, Tensor};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Uniform::new(-2.0, 2.0);
    let data = (0..shape.iter().product())
        .map(|_| dist.sample(rng))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Same, but keep every entry away from zero so kinked ops (relu) stay on
/// one side of the kink under the finite-difference step.
fn random_tensor_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Uniform::new(0.05, 2.0);
    let sign = Uniform::new(0u8, 2);
    let data = (0..shape.iter().product())
        .map(|_| {
            let s = if sign.sample(rng) == 0 { -1.0 } else { 1.0 };
            s * dist.sample(rng)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random_positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let dist = Uniform::new(0.2, 3.0);
    let data = (0..shape.iter().product())
        .map(|_| dist.sample(rng))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const SEEDS: u64 = 120;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[test]
fn elementwise_and_broadcast_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[3, 4]);
        let row = random_tensor(&mut rng, &[1, 4]);
        let col = random_tensor(&mut rng, &[3, 1]);
        let s = random_tensor(&mut rng, &[]);
        let point = [
            ("a".to_string(), a),
            ("b".to_string(), b),
            ("row".to_string(), row),
            ("col".to_string(), col),
            ("s".to_string(), s),
        ];
        let err = grad_check(
            |g, ids| {
                // mixes add/sub/mul/neg/scale/add_scalar with all broadcast forms
                let t1 = g.add(ids["a"], ids["row"])?;
                let t2 = g.sub(t1, ids["col"])?;
                let t3 = g.mul(t2, ids["b"])?;
                let t4 = g.mul(t3, ids["s"])?;
                let t5 = g.neg(t4)?;
                let t6 = g.scale(t5, 0.7)?;
                let t7 = g.add_scalar(t6, 1.3)?;
                let t8 = g.square(t7)?;
                g.mean_all(t8)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: broadcast chain rel err {err}");
    }
}

#[test]
fn matmul_transpose_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let point = [("a".to_string(), a), ("b".to_string(), b)];
        let err = grad_check(
            |g, ids| {
                let at = g.transpose(ids["a"])?; // [4,3]
                let ata = g.matmul(ids["a"], at)?; // [3,3]
                let c = g.matmul(ids["a"], ids["b"])?; // [3,2]
                let sq = g.square(c)?;
                let s1 = g.sum_all(sq)?;
                let s2 = g.sum_all(ata)?;
                g.add(s1, s2)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: matmul rel err {err}");
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x = random_tensor(&mut rng, &[2, 2, 5, 5]);
        let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = random_tensor(&mut rng, &[3]);
        let point = [
            ("x".to_string(), x),
            ("w".to_string(), w),
            ("b".to_string(), b),
        ];
        let err = grad_check(
            |g, ids| {
                let y = g.conv2d(ids["x"], ids["w"], ids["b"], 2)?;
                let sq = g.square(y)?;
                g.sum_all(sq)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: conv2d rel err {err}");
    }
}

#[test]
fn nonlinearities_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let a = random_tensor_off_kink(&mut rng, &[4, 3]);
        let p = random_positive(&mut rng, &[4, 3]);
        let point = [("a".to_string(), a), ("p".to_string(), p)];
        let err = grad_check(
            |g, ids| {
                let r = g.relu(ids["a"])?;
                let t = g.tanh(ids["a"])?;
                let e = g.exp(ids["a"])?;
                let l = g.ln(ids["p"])?;
                let s1 = g.add(r, t)?;
                let s2 = g.add(e, l)?;
                let s = g.mul(s1, s2)?;
                g.mean_all(s)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: nonlinearity rel err {err}");
    }
}

#[test]
fn reductions_and_structure_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let a = random_tensor(&mut rng, &[4, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let point = [("a".to_string(), a), ("b".to_string(), b)];
        let err = grad_check(
            |g, ids| {
                let lse = g.logsumexp_rows(ids["a"])?; // [4]
                let diag = g.diag_part(ids["a"])?; // [4]
                let gathered = g.gather_rows(ids["b"], vec![0, 0, 3, 2])?; // [4,2]
                let sliced = g.slice_cols(ids["a"], 1, 3)?; // [4,2]
                let cat = g.concat_cols(gathered, sliced)?; // [4,4]
                let norms = g.rows_l2norm(cat)?; // [4]
                let sums0 = g.sum_axis(ids["a"], 0)?; // [4]
                let sums1 = g.sum_axis(ids["a"], 1)?; // [4]
                let lse_col = g.reshape(lse, vec![4, 1])?;
                let mix0 = g.add(diag, norms)?;
                let mix1 = g.add(sums0, sums1)?;
                let mix = g.mul(mix0, mix1)?;
                let mix_col = g.reshape(mix, vec![4, 1])?;
                let total = g.mul(mix_col, lse_col)?;
                g.mean_all(total)
            },
            &point,
            STEP,
        )
        .unwrap();
        assert!(err < TOL, "seed {seed}: structure op rel err {err}");
    }
}

#[test]
fn gradient_shard_combination_is_order_independent() {
    use procl::tensor::{Gradients, Graph};
    // Gradients of the same graph under different bindings act as shards;
    // summing them in any order must agree to 1e-12.
    let shard_for = |seed: u64| -> Gradients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x", random_tensor(&mut rng, &[3, 3])).unwrap();
        let w = g.param("w", random_tensor(&mut rng, &[3, 3])).unwrap();
        let y = g.matmul(x, w).unwrap();
        let sq = g.square(y).unwrap();
        let out = g.sum_all(sq).unwrap();
        g.backward(out).unwrap()
    };
    let shards: Vec<Gradients> = (0..6).map(shard_for).collect();
    let forward = Gradients::combine(&shards).unwrap();
    let reversed: Vec<Gradients> = shards.iter().rev().cloned().collect();
    let backward = Gradients::combine(&reversed).unwrap();
    let interleaved: Vec<Gradients> =
        [0, 3, 1, 4, 2, 5].iter().map(|&i: &usize| shards[i].clone()).collect();
    let mixed = Gradients::combine(&interleaved).unwrap();
    for (name, t) in forward.iter() {
        for (i, &v) in t.data().iter().enumerate() {
            let r = backward.get(name).unwrap().data()[i];
            let m = mixed.get(name).unwrap().data()[i];
            assert!((v - r).abs() < 1e-12, "{name}[{i}] reorder drift {v} vs {r}");
            assert!((v - m).abs() < 1e-12, "{name}[{i}] reorder drift {v} vs {m}");
        }
    }
}
