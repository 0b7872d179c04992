//! Per-modality encoders: a temporal convolution that reduces the raw
//! feature width, post-norm transformer layers with global and banded-local
//! attention heads, and a per-timestep score regressor trained with top-K
//! multiple-instance pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv1d, LayerNorm, Linear, Mlp, ParamStore};
use crate::tensor::{top_k_indices, Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_rgb: usize,
    pub d_flow: usize,
    pub d_audio: usize,
    pub heads: usize,
    pub layers: usize,
    pub local_window: usize,
    pub ffn_multiplier: usize,
    pub conv_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_rgb: 128,
            d_flow: 64,
            d_audio: 32,
            heads: 4,
            layers: 2,
            local_window: 9,
            ffn_multiplier: 4,
            conv_kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.d_rgb,
            Modality::Audio => self.d_audio,
            Modality::Flow => self.d_flow,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.d_rgb > self.d_flow && self.d_flow > self.d_audio) {
            bad.push(format!(
                "dims must satisfy d_rgb > d_flow > d_audio (got {} / {} / {})",
                self.d_rgb, self.d_flow, self.d_audio
            ));
        }
        if self.d_audio < 4 {
            bad.push(format!("d_audio {} too small for the D/4 regressor", self.d_audio));
        }
        if self.heads == 0 {
            bad.push("heads must be positive".into());
        } else {
            for m in Modality::ALL {
                if !self.dim(m).is_multiple_of(self.heads) {
                    bad.push(format!("{} heads do not divide {m} dim {}", self.heads, self.dim(m)));
                }
            }
        }
        if self.local_window.is_multiple_of(2) {
            bad.push(format!("local_window {} must be odd", self.local_window));
        }
        if self.conv_kernel.is_multiple_of(2) {
            bad.push(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.ffn_multiplier == 0 {
            bad.push("ffn_multiplier must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// `[B, T, D]` constant that is 1 on real timesteps and 0 on padding.
pub fn row_mask(lengths: &[usize], t: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(lengths.len() * t * d);
    for &n in lengths {
        for i in 0..t {
            let v = if i < n { 1.0 } else { 0.0 };
            data.extend(std::iter::repeat_n(v, d));
        }
    }
    Tensor::new(vec![lengths.len(), t, d], data).expect("sizes agree")
}

/// `[B, T]` variant of [`row_mask`].
pub fn time_mask(lengths: &[usize], t: usize) -> Tensor {
    row_mask(lengths, t, 1)
        .reshaped(vec![lengths.len(), t])
        .expect("same size")
}

/// Allowed (query, key) pairs for every `(bag, head)`, laid out
/// `[B*heads, T, T]`. The first `heads/2` heads are global, the rest only
/// see keys with `|i - j| <= window/2`. Padded keys are never visible;
/// padded queries see only themselves.
pub fn attention_mask(lengths: &[usize], t: usize, heads: usize, window: usize) -> Vec<bool> {
    let half = window / 2;
    let n_global = heads / 2;
    let mut mask = Vec::with_capacity(lengths.len() * heads * t * t);
    for &len in lengths {
        for h in 0..heads {
            for i in 0..t {
                for j in 0..t {
                    let ok = if i >= len {
                        i == j
                    } else {
                        j < len && (h < n_global || i.abs_diff(j) <= half)
                    };
                    mask.push(ok);
                }
            }
        }
    }
    mask
}

/// Multi-head self-attention with half the heads restricted to a band.
#[derive(Debug, Clone)]
pub struct GlMhsa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub local_window: usize,
}

impl GlMhsa {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        local_window: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
            local_window,
        }
    }

    /// Returns the attention output `[B, T, D]` and the weights `[B*heads, T, T]`.
    pub fn forward_with_weights(&self, g: &mut Graph, p: &Bound, x: Var, lengths: &[usize]) -> Result<(Var, Var)> {
        if self.local_window.is_multiple_of(2) {
            return Err(Error::Config(format!("local_window {} must be odd", self.local_window)));
        }
        let s = g.value(x).shape().to_vec();
        let (t, d) = (s[1], s[2]);
        let dh = d / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = g.split_heads(q, self.heads)?;
        let k = g.split_heads(k, self.heads)?;
        let v = g.split_heads(v, self.heads)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let mask = attention_mask(lengths, t, self.heads, self.local_window);
        let w = g.softmax(scores, Some(&mask))?;
        let ctx = g.bmm(w, v, false)?;
        let ctx = g.merge_heads(ctx, self.heads)?;
        Ok((self.o.forward(g, p, ctx)?, w))
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, lengths: &[usize]) -> Result<Var> {
        self.forward_with_weights(g, p, x, lengths).map(|(y, _)| y)
    }
}

/// `ẑ = LN(GL-MHSA(z)) + z`, then `z' = LN(FFN(ẑ)) + ẑ`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub attn: GlMhsa,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            attn: GlMhsa::new(store, &format!("{name}.attn"), d, cfg.heads, cfg.local_window, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[d, d * cfg.ffn_multiplier, d], rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, lengths: &[usize]) -> Result<Var> {
        let a = self.attn.forward(g, p, z, lengths)?;
        let a = self.ln1.forward(g, p, a)?;
        let h = g.add(a, z)?;
        let f = self.ffn.forward(g, p, h)?;
        let f = self.ln2.forward(g, p, f)?;
        g.add(f, h)
    }
}

/// Three-layer regressor `D → D/2 → D/4 → 1` followed by a sigmoid.
#[derive(Debug, Clone)]
pub struct Regressor {
    pub mlp: Mlp,
}

impl Regressor {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[d, d / 2, d / 4, 1], rng),
        }
    }

    /// Scores `[B, T]` for features `[B, T, D]`; padded timesteps are forced to 0.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, lengths: &[usize]) -> Result<Var> {
        let s = g.value(z).shape().to_vec();
        let h = self.mlp.forward(g, p, z)?;
        let h = g.sigmoid(h);
        let h = g.reshape(h, &s[..2])?;
        g.mul_const(h, &time_mask(lengths, s[1]))
    }
}

#[derive(Debug, Clone)]
pub struct UnimodalEncoder {
    pub modality: Modality,
    pub conv: Conv1d,
    pub layers: Vec<TransformerLayer>,
    pub regressor: Regressor,
    pub raw_dim: usize,
    pub dim: usize,
}

impl UnimodalEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        modality: Modality,
        raw_dim: usize,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim(modality);
        let name = format!("enc.{modality}");
        let conv = Conv1d::new(
            store,
            &format!("{name}.conv"),
            raw_dim,
            d,
            cfg.conv_kernel,
            1,
            true,
            rng,
        );
        let layers = (0..cfg.layers)
            .map(|l| TransformerLayer::new(store, &format!("{name}.layer{l}"), d, cfg, rng))
            .collect();
        let regressor = Regressor::new(store, &format!("{name}.reg"), d, rng);
        Self {
            modality,
            conv,
            layers,
            regressor,
            raw_dim,
            dim: d,
        }
    }

    /// Same-padded temporal convolution `[B, T, raw] -> [B, T, D_m]`.
    pub fn conv_reduce(&self, g: &mut Graph, p: &Bound, f: Var) -> Result<Var> {
        let s = g.value(f).shape();
        if s.len() != 3 || s[2] != self.raw_dim {
            return Err(Error::ShapeMismatch {
                op: "conv_reduce",
                expected: vec![self.raw_dim],
                got: s.to_vec(),
            });
        }
        self.conv.forward(g, p, f)
    }

    pub fn encode(&self, g: &mut Graph, p: &Bound, f: Var, lengths: &[usize]) -> Result<Var> {
        let mut z = self.conv_reduce(g, p, f)?;
        for layer in &self.layers {
            z = layer.forward(g, p, z, lengths)?;
        }
        Ok(z)
    }
}

/// `floor(L/16) + 1`.
pub fn topk_count(len: usize) -> usize {
    len / 16 + 1
}

/// Mean of the `k` largest scores.
pub fn topk_mean(s: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > s.len() {
        return Err(Error::invalid("topk_mean", format!("K={k} for {} scores", s.len())));
    }
    Ok(top_k_indices(s, k).iter().map(|&i| s[i]).sum::<f64>() / k as f64)
}

/// Per-bag top-K mean `[B]` of scores `[B, T]`, with K from each bag's
/// real length.
pub fn bag_scores(g: &mut Graph, s: Var, lengths: &[usize]) -> Result<Var> {
    let ks: Vec<usize> = lengths.iter().map(|&l| topk_count(l)).collect();
    g.topk_mean_rows(s, &ks, lengths)
}

/// Binary cross-entropy of one bag score, clamped to `[eps, 1-eps]`.
pub fn mil_loss_value(s_bar: f64, y: u8, eps: f64) -> f64 {
    let s = s_bar.clamp(eps, 1.0 - eps);
    if y == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Mean binary cross-entropy of bag scores `[B]` against video labels.
pub fn mil_loss(g: &mut Graph, s_bar: Var, labels: &[u8], eps: f64) -> Result<Var> {
    let n = labels.len();
    if g.value(s_bar).shape() != [n] {
        return Err(Error::ShapeMismatch {
            op: "mil_loss",
            expected: vec![n],
            got: g.value(s_bar).shape().to_vec(),
        });
    }
    let s = g.clamp(s_bar, eps, 1.0 - eps);
    let one_minus = g.affine(s, -1.0, 1.0);
    let ls = g.ln(s)?;
    let lns = g.ln(one_minus)?;
    let y = Tensor::vector(labels.iter().map(|&v| v as f64).collect());
    let ny = Tensor::vector(labels.iter().map(|&v| 1.0 - v as f64).collect());
    let a = g.mul_const(ls, &y)?;
    let b = g.mul_const(lns, &ny)?;
    let sum = g.add(a, b)?;
    let m = g.mean_all(sum);
    Ok(g.scale(m, -1.0))
}
