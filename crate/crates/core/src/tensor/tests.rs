use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn named(ts: Vec<Tensor>) -> Vec<(String, Tensor)> {
    ts.into_iter()
        .enumerate()
        .map(|(i, t)| (format!("leaf{i}"), t))
        .collect()
}

/// Reduces any tensor to a scalar through a fixed random projection so the
/// upstream gradient is non-uniform.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var, crate::Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let w = rand_tensor(&mut rng, g.value(x).shape());
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum_all(p))
}

fn check(leaves: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var, crate::Error>) -> f64 {
    grad_check(&named(leaves), GradCheckOptions::default(), build)
        .unwrap()
        .max_relative_error
}

#[test]
fn identity_graph_returns_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert_eq!(g.value(x).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, None).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn unit_kernel_conv_is_identity() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 1], vec![4.0, 5.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv1d(x, w, None, 1).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 5.0]);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    let err = g.add(a, b).unwrap_err();
    assert!(err.to_string().contains("add"), "{err}");
    let w = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.linear(a, w, None).unwrap_err();
    assert!(err.to_string().contains("linear"), "{err}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.3, -1.0, 2.0]));
    let l = g.sum_all(x);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let l = g.sum_all(sq);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.param(Tensor::vector(vec![3.0, -4.0]));
    let sx = g.stop_gradient(x);
    let p = g.mul(sx, y).unwrap();
    let l = g.sum_all(p);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 0.0]);
    assert_eq!(grads.get(y).data(), &[1.0, 2.0]);
}

#[test]
fn backward_errors() {
    let g = Graph::new();
    let mut other = Graph::new();
    let v = other.constant(Tensor::scalar(1.0));
    assert!(matches!(g.backward(v), Err(crate::Error::BackwardBeforeForward(_))));
    let x = other.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(other.backward(x), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn quadratic_gradcheck_is_tight() {
    let err = grad_check(
        &named(vec![Tensor::vector(vec![0.5, -1.5, 2.0])]),
        GradCheckOptions {
            eps: 1e-5,
            max_components_per_leaf: None,
        },
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let s = g.scale(sq, 3.0);
            Ok(g.sum_all(s))
        },
    )
    .unwrap();
    assert!(err.max_relative_error < 1e-6, "{}", err.max_relative_error);
}

#[test]
fn gradcheck_with_no_leaves_is_vacuous() {
    let rep = grad_check(&[], GradCheckOptions::default(), |g, _| {
        Ok(g.constant(Tensor::scalar(2.0)))
    })
    .unwrap();
    assert!(rep.leaves.is_empty());
    assert_eq!(rep.max_relative_error, 0.0);
}

#[test]
fn gradcheck_rejects_eps_out_of_range() {
    assert!(grad_check(
        &[],
        GradCheckOptions {
            eps: 1e-2,
            max_components_per_leaf: None
        },
        |g, _| { Ok(g.constant(Tensor::scalar(0.0))) }
    )
    .is_err());
}

#[test]
fn gradcheck_catches_faulty_gradient() {
    let err = check(vec![Tensor::vector(vec![0.5, 1.0])], |g, v| {
        let f = g.faulty_identity(v[0]);
        let sq = g.mul(f, f)?;
        Ok(g.sum_all(sq))
    });
    assert!(err > 0.1, "{err}");
}

#[test]
fn topk_gradient_is_one_over_k_on_selected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(1, 5, vec![0.1, 0.9, 0.5, 0.7, 0.2]).unwrap());
    let m = g.topk_mean_rows(x, &[2], &[5]).unwrap();
    assert!((g.value(m).data()[0] - 0.8).abs() < 1e-15);
    let l = g.sum_all(m);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(x).data(), &[0.0, 0.5, 0.0, 0.5, 0.0]);
}

#[test]
fn topk_ignores_columns_past_valid_length() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(1, 4, vec![0.2, 0.1, 0.9, 0.95]).unwrap());
    let m = g.topk_mean_rows(x, &[1], &[2]).unwrap();
    assert_eq!(g.value(m).data(), &[0.2]);
    assert!(g.topk_mean_rows(x, &[3], &[2]).is_err());
}

#[test]
fn masked_softmax_zeroes_disallowed_entries() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = g.softmax(x, Some(&[true, false, true])).unwrap();
    assert_eq!(g.value(y).data()[1], 0.0);
    let s: f64 = g.value(y).data().iter().sum();
    assert!((s - 1.0).abs() < 1e-15);
    assert!(g.softmax(x, Some(&[false, false, false])).is_err());
}

#[test]
fn f32_mode_rounds_forward_values() {
    let mut g = Graph::with_precision(Precision::F32);
    let x = g.constant(Tensor::vector(vec![0.1]));
    let y = g.scale(x, 1.0);
    assert_eq!(g.value(y).data()[0], 0.1f32 as f64);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 7, 6]));
        let w = g.param(rand_tensor(&mut rng, &[3, 6, 4]));
        let c = g.conv1d(x, w, None, 2).unwrap();
        let h = g.split_heads(c, 2).unwrap();
        let s = g.bmm(h, h, true).unwrap();
        let p = g.softmax(s, None).unwrap();
        let o = g.bmm(p, h, false).unwrap();
        g.value(o).clone()
    };
    assert_eq!(run(), run());
}

const SEEDS: u64 = 20;

#[test]
fn elementwise_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let err = check(vec![a, b, bias], |g, v| {
            let s = g.add(v[0], v[1])?;
            let d = g.sub(s, v[1])?;
            let m = g.mul(d, v[1])?;
            let ab = g.add_bias(m, v[2])?;
            let af = g.affine(ab, -1.7, 0.3);
            let ge = g.gelu(af);
            let sg = g.sigmoid(ge);
            let re = g.relu(m);
            let c = g.clamp(sg, 0.45, 0.55);
            let lg = g.ln(sg)?;
            let t1 = g.add(c, lg)?;
            let t2 = g.add(t1, re)?;
            let mc = g.mul_const(t2, &Tensor::full(&[3, 4], 0.5))?;
            project(g, mc, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn linear_and_conv_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, &[2, 5, 3]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4]);
        let cw = rand_tensor(&mut rng, &[3, 4, 2]);
        let cb = rand_tensor(&mut rng, &[2]);
        let dil = 1 + (seed as usize % 3);
        let err = check(vec![x, w, b, cw, cb], |g, v| {
            let l = g.linear(v[0], v[1], Some(v[2]))?;
            let c = g.conv1d(l, v[3], Some(v[4]), dil)?;
            project(g, c, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn attention_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_tensor(&mut rng, &[2, 4, 6]);
        let gain = rand_tensor(&mut rng, &[6]);
        let bias = rand_tensor(&mut rng, &[6]);
        let mask: Vec<bool> = (0..2 * 2 * 4 * 4).map(|i| i % 4 != 3 || i % 16 < 4).collect();
        let err = check(vec![x, gain, bias], |g, v| {
            let h = g.split_heads(v[0], 2)?;
            let s = g.bmm(h, h, true)?;
            let p = g.softmax(s, Some(&mask))?;
            let o = g.bmm(p, h, false)?;
            let m = g.merge_heads(o, 2)?;
            let n = g.layer_norm(m, v[1], v[2], 1e-5)?;
            project(g, n, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let a = rand_tensor(&mut rng, &[2, 3, 2]);
        let b = rand_tensor(&mut rng, &[2, 3, 4]);
        let err = check(vec![a, b], |g, v| {
            let c = g.concat_last(&[v[0], v[1]])?;
            let s = g.slice_last(c, 1, 5)?;
            let sc = g.scatter_last(s, &[6, 0, 3, 1], 7)?;
            let ga = g.gather_last(sc, &[0, 6, 6, 2, 3])?;
            let n = g.l2_normalize_last(ga);
            let r = g.reshape(n, &[6, 5])?;
            let wr = g.weighted_row_sum(r, &[0, 2, 5, 2], &[0.5, -1.0, 0.25, 2.0])?;
            let nl = g.norm_last(c)?;
            let sl = g.sum_last(c)?;
            let t1 = project(g, wr, seed)?;
            let t2 = project(g, nl, seed + 1)?;
            let t3 = g.mean_all(sl);
            let u = g.add(t1, t2)?;
            g.add(u, t3)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn topk_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_tensor(&mut rng, &[3, 8]);
        let err = check(vec![x], |g, v| {
            let s = g.sigmoid(v[0]);
            let m = g.topk_mean_rows(s, &[1, 3, 2], &[8, 6, 8])?;
            project(g, m, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn zero_rows_have_zero_gradient_under_normalization() {
    let mut g = Graph::new();
    let x = g.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap());
    let n = g.l2_normalize_last(x);
    assert_eq!(g.value(n).data(), &[0.0, 0.0, 0.6, 0.8]);
    let nl = g.norm_last(x).unwrap();
    let a = g.sum_all(n);
    let b = g.sum_all(nl);
    let l = g.add(a, b).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(&grads.get(x).data()[..2], &[0.0, 0.0]);
}
