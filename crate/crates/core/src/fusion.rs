//! Fusion of the aligned modality features, the temporal convolution
//! encoder, the final regressor and the batch triplet loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{row_mask, topk_count, Regressor};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, Mlp, ParamStore};
use crate::tensor::{bottom_k_indices, top_k_indices, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub hidden: usize,
    pub dim: usize,
    pub tcn_kernel: usize,
    pub tcn_dilations: Vec<usize>,
    pub margin: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            dim: 64,
            tcn_kernel: 3,
            tcn_dilations: vec![1, 2, 4],
            margin: 1.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.hidden == 0 || self.dim < 4 {
            bad.push(format!("hidden {} / dim {} too small", self.hidden, self.dim));
        }
        if self.tcn_kernel.is_multiple_of(2) {
            bad.push(format!("tcn_kernel {} must be odd", self.tcn_kernel));
        }
        if self.tcn_dilations.contains(&0) {
            bad.push("tcn dilations must be positive".into());
        }
        if self.margin.is_nan() || self.margin < 0.0 {
            bad.push(format!("margin {} must be nonnegative", self.margin));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Timesteps that can influence one output step: `1 + (k-1)·Σ d`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.tcn_kernel - 1) * self.tcn_dilations.iter().sum::<usize>()
    }
}

/// `[ẑ_A ‖ z_R ‖ ẑ_F]` along the feature axis.
pub fn fuse(g: &mut Graph, zh_a: Var, z_r: Var, zh_f: Var) -> Result<Var> {
    let lead = |g: &Graph, v: Var| {
        let s = g.value(v).shape();
        s[..s.len() - 1].to_vec()
    };
    let (a, r, f) = (lead(g, zh_a), lead(g, z_r), lead(g, zh_f));
    if a != r || f != r {
        let got = if a != r { a } else { f };
        return Err(Error::ShapeMismatch {
            op: "fuse",
            expected: r,
            got,
        });
    }
    g.concat_last(&[zh_a, z_r, zh_f])
}

/// Non-causal residual block `y = x + GELU(conv_d(x))`.
#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub conv: Conv1d,
}

impl TcnBlock {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let c = self.conv.forward(g, p, x)?;
        let a = g.gelu(c);
        g.add(x, a)
    }
}

#[derive(Debug, Clone)]
pub struct FusionDetector {
    pub linear: Mlp,
    pub tcn: Vec<TcnBlock>,
    pub regressor: Regressor,
    pub in_dim: usize,
    pub dim: usize,
}

impl FusionDetector {
    pub fn new<R: Rng>(store: &mut ParamStore, in_dim: usize, cfg: &FusionConfig, rng: &mut R) -> Self {
        let linear = Mlp::new(store, "fusion.linear", &[in_dim, cfg.hidden, cfg.dim], rng);
        let tcn = cfg
            .tcn_dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| TcnBlock {
                conv: Conv1d::new(
                    store,
                    &format!("fusion.tcn{i}"),
                    cfg.dim,
                    cfg.dim,
                    cfg.tcn_kernel,
                    d,
                    true,
                    rng,
                ),
            })
            .collect();
        let regressor = Regressor::new(store, "fusion.reg", cfg.dim, rng);
        Self {
            linear,
            tcn,
            regressor,
            in_dim,
            dim: cfg.dim,
        }
    }

    /// `TCN(Linear(z_RAF))`; padded timesteps are zeroed before every
    /// convolution so they never bleed into real ones.
    pub fn encode(&self, g: &mut Graph, p: &Bound, z_raf: Var, lengths: &[usize]) -> Result<Var> {
        let s = g.value(z_raf).shape().to_vec();
        if s.len() != 3 || s[2] != self.in_dim {
            return Err(Error::ShapeMismatch {
                op: "multimodal_encode",
                expected: vec![self.in_dim],
                got: s,
            });
        }
        let mask = row_mask(lengths, s[1], self.dim);
        let h = self.linear.forward(g, p, z_raf)?;
        let mut h = g.mul_const(h, &mask)?;
        for block in &self.tcn {
            let y = block.forward(g, p, h)?;
            h = g.mul_const(y, &mask)?;
        }
        Ok(h)
    }

    pub fn scores(&self, g: &mut Graph, p: &Bound, zh: Var, lengths: &[usize]) -> Result<Var> {
        self.regressor.forward(g, p, zh, lengths)
    }
}

/// Triplet loss over a batch with `k` from each bag's real length.
pub fn triplet_loss(
    g: &mut Graph,
    feats: Var,
    scores: &Tensor,
    labels: &[u8],
    lengths: &[usize],
    margin: f64,
) -> Result<Var> {
    let ks: Vec<usize> = lengths.iter().map(|&l| topk_count(l)).collect();
    triplet_loss_with_k(g, feats, scores, labels, lengths, &ks, margin)
}

/// Anchor: mean over normal bags of the mean feature at their top-k
/// scores. Positive / negative: the same over anomalous bags at their
/// bottom-k / top-k scores. All three are L2-normalized and the loss is
/// `max(0, ‖a-p‖ - ‖a-n‖ + margin)`. Scores only select timesteps.
pub fn triplet_loss_with_k(
    g: &mut Graph,
    feats: Var,
    scores: &Tensor,
    labels: &[u8],
    lengths: &[usize],
    ks: &[usize],
    margin: f64,
) -> Result<Var> {
    let fs = g.value(feats).shape().to_vec();
    let b = labels.len();
    if fs.len() != 3 || fs[0] != b || scores.shape() != [b, fs[1]] || lengths.len() != b || ks.len() != b {
        return Err(Error::ShapeMismatch {
            op: "triplet_loss",
            expected: fs,
            got: scores.shape().to_vec(),
        });
    }
    let t = fs[1];
    for (i, (&k, &len)) in ks.iter().zip(lengths).enumerate() {
        if k == 0 || k > len || len > t {
            return Err(Error::invalid(
                "triplet_loss",
                format!("bag {i}: k={k} with {len} of {t} timesteps"),
            ));
        }
    }
    let normal: Vec<usize> = (0..b).filter(|&i| labels[i] == 0).collect();
    let anomalous: Vec<usize> = (0..b).filter(|&i| labels[i] == 1).collect();
    if normal.is_empty() || anomalous.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let row_scores = |i: usize| &scores.data()[i * t..i * t + lengths[i]];
    let pooled = |g: &mut Graph, bags: &[usize], pick: fn(&[f64], usize) -> Vec<usize>| -> Result<Var> {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for &i in bags {
            let w = 1.0 / (bags.len() * ks[i]) as f64;
            for j in pick(row_scores(i), ks[i]) {
                rows.push(i * t + j);
                weights.push(w);
            }
        }
        let v = g.weighted_row_sum(feats, &rows, &weights)?;
        Ok(g.l2_normalize_last(v))
    };
    let anchor = pooled(g, &normal, top_k_indices)?;
    let positive = pooled(g, &anomalous, bottom_k_indices)?;
    let negative = pooled(g, &anomalous, top_k_indices)?;
    let dp = g.sub(anchor, positive)?;
    let dp = g.norm_last(dp)?;
    let dn = g.sub(anchor, negative)?;
    let dn = g.norm_last(dn)?;
    let diff = g.sub(dp, dn)?;
    let hinge = g.affine(diff, 1.0, margin);
    Ok(g.relu(hinge))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::{bag_scores, mil_loss, mil_loss_value, topk_mean};

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn fuse_concatenates_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 32]));
        let r = g.constant(rand_tensor(&mut rng, &[2, 3, 128]));
        let f = g.constant(Tensor::zeros(&[2, 3, 64]));
        let z = fuse(&mut g, a, r, f).unwrap();
        assert_eq!(g.value(z).shape(), &[2, 3, 224]);
        let back = g.slice_last(z, 32, 160).unwrap();
        assert_eq!(g.value(back), g.value(r));
        let head = g.slice_last(z, 0, 32).unwrap();
        assert!(g.value(head).data().iter().all(|&v| v == 0.0));
        let short = g.constant(Tensor::zeros(&[2, 4, 64]));
        assert!(fuse(&mut g, a, r, short).is_err());
    }

    #[test]
    fn encoder_output_shape_and_receptive_field() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.receptive_field(), 15);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = FusionDetector::new(&mut store, 224, &cfg, &mut rng);
        let t = 40;
        let x = rand_tensor(&mut rng, &[1, t, 224]);
        let run = |x: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let xv = g.constant(x.clone());
            let y = det.encode(&mut g, &p, xv, &[t]).unwrap();
            g.value(y).clone()
        };
        let base = run(&x);
        assert_eq!(base.shape(), &[1, t, 64]);
        let probe = 20;
        let mut moved = x.clone();
        for c in 0..224 {
            moved.data_mut()[probe * 224 + c] += 5.0;
        }
        let out = run(&moved);
        for step in 0..t {
            let changed = (0..64).any(|c| out.data()[step * 64 + c] != base.data()[step * 64 + c]);
            assert_eq!(changed, step.abs_diff(probe) <= 7, "step {step}");
        }
    }

    #[test]
    fn zero_conv_blocks_pass_the_linear_stage_through() {
        let cfg = FusionConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let det = FusionDetector::new(&mut store, 20, &cfg, &mut rng);
        for b in &det.tcn {
            store.get_mut(b.conv.w).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(rand_tensor(&mut rng, &[2, 9, 20]));
        let y = det.encode(&mut g, &p, x, &[9, 9]).unwrap();
        let lin = det.linear.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y), g.value(lin));
    }

    #[test]
    fn zero_regressor_gives_half_and_ln2() {
        let cfg = FusionConfig::default();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let det = FusionDetector::new(&mut store, 16, &cfg, &mut rng);
        for l in &det.regressor.mlp.layers {
            store.get_mut(l.w).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let z = g.constant(rand_tensor(&mut rng, &[2, 17, 64]));
        let s = det.scores(&mut g, &p, z, &[17, 17]).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
        for y in [0u8, 1] {
            let sb = bag_scores(&mut g, s, &[17, 17]).unwrap();
            let l = mil_loss(&mut g, sb, &[y, y], 1e-6).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
        let tiny = g.constant(Tensor::full(&[1, 17], 1e-9));
        let sb = bag_scores(&mut g, tiny, &[17]).unwrap();
        let l = mil_loss(&mut g, sb, &[0], 1e-6).unwrap();
        assert!(g.value(l).item() < 2e-6);
    }

    #[test]
    fn fused_mil_matches_unimodal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..2 * 20).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut g = Graph::new();
        let sv = g.constant(Tensor::new(vec![2, 20], s.clone()).unwrap());
        let sb = bag_scores(&mut g, sv, &[20, 18]).unwrap();
        let l = mil_loss(&mut g, sb, &[1, 0], 1e-6).unwrap();
        let a = mil_loss_value(topk_mean(&s[..20], 2).unwrap(), 1, 1e-6);
        let b = mil_loss_value(topk_mean(&s[20..38], 2).unwrap(), 0, 1e-6);
        assert!((g.value(l).item() - (a + b) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_class_batch_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let f = g.param(rand_tensor(&mut rng, &[3, 16, 4]));
        let s = rand_tensor(&mut rng, &[3, 16]);
        for y in [0u8, 1] {
            let l = triplet_loss(&mut g, f, &s, &[y, y, y], &[16, 16, 16], 1.0).unwrap();
            assert_eq!(g.value(l).item(), 0.0);
        }
    }

    #[test]
    fn satisfied_margin_is_zero() {
        // Normal bag top-1 feature e0, anomalous bottom-1 e0, top-1 -e0:
        // ‖a-p‖ = 0, ‖a-n‖ = 2 > margin.
        let mut g = Graph::new();
        let feats = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0];
        let f = g.param(Tensor::new(vec![2, 2, 2], feats).unwrap());
        let s = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let l = triplet_loss_with_k(&mut g, f, &s, &[0, 1], &[2, 2], &[1, 1], 1.0).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn hand_computed_two_bag_triplet() {
        // Normal bag 0: top-2 scores at t=1,2 -> mean of (0,2) and (2,0) = (1,1).
        // Anomalous bag 1: bottom-2 at t=0,3 -> mean((3,0),(1,0)) = (2,0);
        // top-2 at t=1,2 -> mean((0,1),(0,3)) = (0,2).
        let feats = vec![
            9.0, 9.0, 0.0, 2.0, 2.0, 0.0, -9.0, 4.0, //
            3.0, 0.0, 0.0, 1.0, 0.0, 3.0, 1.0, 0.0,
        ];
        let s = Tensor::new(vec![2, 4], vec![0.1, 0.8, 0.7, 0.2, 0.1, 0.9, 0.6, 0.3]).unwrap();
        let mut g = Graph::new();
        let f = g.param(Tensor::new(vec![2, 4, 2], feats).unwrap());
        let l = triplet_loss_with_k(&mut g, f, &s, &[0, 1], &[4, 4], &[2, 2], 1.0).unwrap();
        let r = 0.5f64.sqrt();
        let a = [r, r];
        let p = [1.0, 0.0];
        let n = [0.0, 1.0];
        let d = |u: [f64; 2], v: [f64; 2]| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)).sqrt();
        let expect = (d(a, p) - d(a, n) + 1.0f64).max(0.0);
        assert!((g.value(l).item() - expect).abs() < 1e-14);
        assert!((expect - 1.0).abs() < 1e-14);
    }

    #[test]
    fn oversized_k_is_rejected() {
        let mut g = Graph::new();
        let f = g.param(Tensor::zeros(&[2, 3, 2]));
        let s = Tensor::zeros(&[2, 3]);
        assert!(triplet_loss_with_k(&mut g, f, &s, &[0, 1], &[3, 3], &[4, 1], 1.0).is_err());
    }
}
