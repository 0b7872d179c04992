//! Secondary-modality projection, matching-subspace search and
//! sparsification, the pairwise alignment losses and the subspace
//! convergence indicator.

use std::cell::Cell;
use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Modality;
use crate::encoder::{bag_scores, mil_loss, time_mask, Regressor};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mlp, ParamStore};
use crate::tensor::{top_k_indices, Graph, Tensor, Var};

thread_local! {
    static SEARCH_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of subspace searches run on the current thread so far.
pub fn search_calls() -> u64 {
    SEARCH_CALLS.with(Cell::get)
}

/// Residual three-layer projection `ẑ = z + MLP(z)` with `D → D → D → D`.
/// Zeroing the last layer makes it the identity.
#[derive(Debug, Clone)]
pub struct Projection {
    pub modality: Modality,
    pub mlp: Mlp,
}

impl Projection {
    pub fn new<R: Rng>(store: &mut ParamStore, modality: Modality, d: usize, rng: &mut R) -> Result<Self> {
        if modality == Modality::Rgb {
            return Err(Error::invalid("projection", "rgb features are never projected"));
        }
        Ok(Self {
            modality,
            mlp: Mlp::new(store, &format!("proj.{modality}"), &[d, d, d, d], rng),
        })
    }

    pub fn set_identity(&self, store: &mut ParamStore) {
        let last = self.mlp.layers.last().expect("three layers");
        store.get_mut(last.w).data_mut().fill(0.0);
        if let Some(b) = last.b {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let h = self.mlp.forward(g, p, z)?;
        g.add(z, h)
    }
}

/// Checked entry point: projecting an RGB sequence is an error.
pub fn project_secondary(proj: &Projection, modality: Modality, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
    if modality == Modality::Rgb || modality != proj.modality {
        return Err(Error::invalid(
            "project_secondary",
            format!("{modality} input for the {} projection", proj.modality),
        ));
    }
    proj.forward(g, p, z)
}

/// Injective map from secondary dims into primary dims.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MfmsAssignment {
    pub theta: Vec<usize>,
    pub theta_hat: Vec<usize>,
    pub theta_pad: Vec<usize>,
}

impl MfmsAssignment {
    pub fn from_theta(theta: Vec<usize>, d_p: usize) -> Result<Self> {
        let mut used = vec![false; d_p];
        for &c in &theta {
            if c >= d_p || used[c] {
                return Err(Error::invalid(
                    "mfms_assignment",
                    format!("index {c} repeated or out of range {d_p}"),
                ));
            }
            used[c] = true;
        }
        let theta_hat: Vec<usize> = (0..d_p).filter(|&c| !used[c]).collect();
        let theta_pad = theta.iter().chain(&theta_hat).copied().collect();
        Ok(Self {
            theta,
            theta_hat,
            theta_pad,
        })
    }

    pub fn d_s(&self) -> usize {
        self.theta.len()
    }

    pub fn d_p(&self) -> usize {
        self.theta_pad.len()
    }
}

/// `S = ẑ_sᵀ ẑ_p` after L2-normalizing every column of the flattened
/// `[rows, d]` inputs. Returned row-major `[d_s, d_p]`; zero columns give
/// zero similarities.
pub fn similarity_matrix(zs: &[f64], zp: &[f64], rows: usize, d_s: usize, d_p: usize) -> Vec<f64> {
    let col_norms = |z: &[f64], d: usize| -> Vec<f64> {
        let mut n = vec![0.0; d];
        for row in z.chunks_exact(d).take(rows) {
            for (a, v) in n.iter_mut().zip(row) {
                *a += v * v;
            }
        }
        n.iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 0.0 }).collect()
    };
    let ns = col_norms(zs, d_s);
    let np = col_norms(zp, d_p);
    let mut s = vec![0.0; d_s * d_p];
    for (rs, rp) in zs.chunks_exact(d_s).zip(zp.chunks_exact(d_p)).take(rows) {
        for i in 0..d_s {
            let a = rs[i] * ns[i];
            if a == 0.0 {
                continue;
            }
            for (o, (v, n)) in s[i * d_p..(i + 1) * d_p].iter_mut().zip(rp.iter().zip(&np)) {
                *o += a * v * n;
            }
        }
    }
    s
}

/// Greedy assignment: each secondary dim in order takes the most similar
/// primary dim among its top `k` that is still free.
pub fn assign_from_similarity(s: &[f64], d_s: usize, d_p: usize, k: usize) -> Result<MfmsAssignment> {
    if d_s >= d_p {
        return Err(Error::invalid(
            "search_mfms",
            format!("need d_s < d_p, got {d_s} and {d_p}"),
        ));
    }
    if k < d_s || k > d_p {
        return Err(Error::invalid("search_mfms", format!("k={k} outside [{d_s}, {d_p}]")));
    }
    if s.len() != d_s * d_p {
        return Err(Error::ShapeMismatch {
            op: "search_mfms",
            expected: vec![d_s, d_p],
            got: vec![s.len()],
        });
    }
    let mut used = vec![false; d_p];
    let mut theta = Vec::with_capacity(d_s);
    for row in s.chunks_exact(d_p) {
        let c = top_k_indices(row, k)
            .into_iter()
            .find(|&c| !used[c])
            .expect("k >= d_s leaves a free candidate");
        used[c] = true;
        theta.push(c);
    }
    MfmsAssignment::from_theta(theta, d_p)
}

/// Flattens `[B, T, d]` features over real timesteps only (all rows when
/// `lengths` is `None`).
fn valid_rows(z: &Tensor, lengths: Option<&[usize]>) -> Result<(Vec<f64>, usize)> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::invalid("search_mfms", format!("expected [b, t, d], got {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    match lengths {
        None => Ok((z.data().to_vec(), b * t)),
        Some(ls) => {
            if ls.len() != b {
                return Err(Error::ShapeMismatch {
                    op: "search_mfms",
                    expected: vec![b],
                    got: vec![ls.len()],
                });
            }
            let mut out = Vec::new();
            for (bi, &n) in ls.iter().enumerate() {
                let n = n.min(t);
                out.extend_from_slice(&z.data()[bi * t * d..(bi * t + n) * d]);
            }
            let rows = out.len() / d;
            Ok((out, rows))
        }
    }
}

/// Finds the matching subspace of `z_p` for `z_s`. Pure index computation
/// outside any graph.
pub fn search_mfms(z_s: &Tensor, z_p: &Tensor, lengths: Option<&[usize]>, k: usize) -> Result<MfmsAssignment> {
    SEARCH_CALLS.with(|c| c.set(c.get() + 1));
    if z_s.shape()[..z_s.rank().saturating_sub(1)] != z_p.shape()[..z_p.rank().saturating_sub(1)] {
        return Err(Error::ShapeMismatch {
            op: "search_mfms",
            expected: z_p.shape().to_vec(),
            got: z_s.shape().to_vec(),
        });
    }
    let (d_s, d_p) = (z_s.last_dim(), z_p.last_dim());
    let (zs, rows) = valid_rows(z_s, lengths)?;
    let (zp, _) = valid_rows(z_p, lengths)?;
    let s = similarity_matrix(&zs, &zp, rows, d_s, d_p);
    assign_from_similarity(&s, d_s, d_p, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsifyMode {
    /// Output column `theta[i]` receives input column `i`.
    #[default]
    Scatter,
    /// Literal index form `[z_s, 0][..., theta_pad]`.
    Gather,
}

/// `[..., d_s] -> [..., d_p]`, nonzero only where the assignment places
/// secondary features.
pub fn sparsify(g: &mut Graph, z_s: Var, a: &MfmsAssignment, mode: SparsifyMode) -> Result<Var> {
    let d_s = g.value(z_s).last_dim();
    if d_s != a.d_s() {
        return Err(Error::ShapeMismatch {
            op: "sparsify",
            expected: vec![a.d_s()],
            got: vec![d_s],
        });
    }
    match mode {
        SparsifyMode::Scatter => g.scatter_last(z_s, &a.theta, a.d_p()),
        SparsifyMode::Gather => {
            let mut shape = g.value(z_s).shape().to_vec();
            *shape.last_mut().expect("rank >= 1") = a.d_p() - d_s;
            let zeros = g.constant(Tensor::zeros(&shape));
            let padded = g.concat_last(&[z_s, zeros])?;
            g.gather_last(padded, &a.theta_pad)
        }
    }
}

fn masked_mean(g: &mut Graph, per_step: Var, lengths: &[usize]) -> Result<Var> {
    let t = g.value(per_step).shape()[1];
    let n: usize = lengths.iter().map(|&l| l.min(t)).sum();
    let m = g.mul_const(per_step, &time_mask(lengths, t))?;
    let s = g.sum_all(m);
    Ok(g.scale(s, 1.0 / n as f64))
}

/// `1 - mean cos(x_bt, y_bt)` over real timesteps of `[B, T, D]` inputs. A
/// zero row contributes cosine 0 with zero gradient.
pub fn cosine_align_loss(g: &mut Graph, x: Var, y: Var, lengths: &[usize]) -> Result<Var> {
    let (sx, sy) = (g.value(x).shape().to_vec(), g.value(y).shape().to_vec());
    if sx != sy || sx.len() != 3 || lengths.len() != sx[0] {
        return Err(Error::ShapeMismatch {
            op: "cosine_align_loss",
            expected: sx,
            got: sy,
        });
    }
    let nx = g.l2_normalize_last(x);
    let ny = g.l2_normalize_last(y);
    let prod = g.mul(nx, ny)?;
    let cos = g.sum_last(prod)?;
    let mean = masked_mean(g, cos, lengths)?;
    Ok(g.affine(mean, -1.0, 1.0))
}

/// Clamped cross-entropy between score sequences `[B, T]`, averaged over
/// real timesteps. Both operands are clamped to `[eps, 1-eps]`.
pub fn score_cross_entropy(g: &mut Graph, p: Var, q: Var, lengths: &[usize], eps: f64) -> Result<Var> {
    let (sp, sq) = (g.value(p).shape().to_vec(), g.value(q).shape().to_vec());
    if sp != sq || sp.len() != 2 || lengths.len() != sp[0] {
        return Err(Error::ShapeMismatch {
            op: "score_cross_entropy",
            expected: sp,
            got: sq,
        });
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::invalid(
            "score_cross_entropy",
            format!("eps {eps} outside (0, 0.5)"),
        ));
    }
    let cp = g.clamp(p, eps, 1.0 - eps);
    let cq = g.clamp(q, eps, 1.0 - eps);
    let lq = g.ln(cq)?;
    let one_q = g.affine(cq, -1.0, 1.0);
    let lnq = g.ln(one_q)?;
    let one_p = g.affine(cp, -1.0, 1.0);
    let a = g.mul(cp, lq)?;
    let b = g.mul(one_p, lnq)?;
    let sum = g.add(a, b)?;
    let mean = masked_mean(g, sum, lengths)?;
    Ok(g.scale(mean, -1.0))
}

/// Scores projected features with the modality's stage-one regressor and
/// returns `(ŝ [B, T], MIL loss)`.
pub fn aux_mil(
    g: &mut Graph,
    p: &Bound,
    z_hat: Var,
    regressor: &Regressor,
    lengths: &[usize],
    labels: &[u8],
    eps: f64,
) -> Result<(Var, Var)> {
    let s = regressor.forward(g, p, z_hat, lengths)?;
    let sb = bag_scores(g, s, lengths)?;
    let loss = mil_loss(g, sb, labels, eps)?;
    Ok((s, loss))
}

#[derive(Debug, Clone, Copy)]
pub struct AlignmentInputs<'a> {
    pub z_r: Var,
    pub zt_a: Var,
    pub zt_f: Var,
    pub s_r: Var,
    pub sh_a: Var,
    pub sh_f: Var,
    pub aux_a: Var,
    pub aux_f: Var,
    pub lambda_aux: f64,
    pub eps: f64,
    pub lengths: &'a [usize],
}

/// Every named term of the alignment loss plus their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentTerms {
    pub cos_ra: Var,
    pub cos_rf: Var,
    pub cos_af: Var,
    pub sce_ra: Var,
    pub sce_rf: Var,
    pub sce_af: Var,
    pub aux_a: Var,
    pub aux_f: Var,
    pub total: Var,
}

/// `(Cos_RA + SCE_RA) + (Cos_RF + SCE_RF) + (Cos_AF + SCE_AF + λ(aux_A + aux_F))`.
/// RGB features and RGB scores enter as constants.
pub fn alignment_loss(g: &mut Graph, x: AlignmentInputs<'_>) -> Result<AlignmentTerms> {
    let z_r = g.stop_gradient(x.z_r);
    let s_r = g.stop_gradient(x.s_r);
    let cos_ra = cosine_align_loss(g, z_r, x.zt_a, x.lengths)?;
    let cos_rf = cosine_align_loss(g, z_r, x.zt_f, x.lengths)?;
    let cos_af = cosine_align_loss(g, x.zt_a, x.zt_f, x.lengths)?;
    let sce_ra = score_cross_entropy(g, s_r, x.sh_a, x.lengths, x.eps)?;
    let sce_rf = score_cross_entropy(g, s_r, x.sh_f, x.lengths, x.eps)?;
    let sce_af = score_cross_entropy(g, x.sh_a, x.sh_f, x.lengths, x.eps)?;
    let ra = g.add(cos_ra, sce_ra)?;
    let rf = g.add(cos_rf, sce_rf)?;
    let aux = g.add(x.aux_a, x.aux_f)?;
    let aux = g.scale(aux, x.lambda_aux);
    let af = g.add(cos_af, sce_af)?;
    let af = g.add(af, aux)?;
    let total = g.add(ra, rf)?;
    let total = g.add(total, af)?;
    Ok(AlignmentTerms {
        cos_ra,
        cos_rf,
        cos_af,
        sce_ra,
        sce_rf,
        sce_af,
        aux_a: x.aux_a,
        aux_f: x.aux_f,
        total,
    })
}

/// `m = w'·d_s / (f_max·n)` over a set of assignments, where `f_k` counts
/// how often primary dim `k` was selected, `f_max = max f_k`, `n` is how
/// many dims reach `f_max`, and `w'` is the number of assignments.
pub fn convergence_indicator(thetas: &[&[usize]], d_s: usize, d_p: usize) -> f64 {
    let mut f = vec![0usize; d_p];
    for th in thetas {
        for &k in *th {
            f[k] += 1;
        }
    }
    let f_max = *f.iter().max().unwrap_or(&0);
    let n = f.iter().filter(|&&v| v == f_max).count();
    (thetas.len() * d_s) as f64 / (f_max * n) as f64
}

/// Sliding window of recent assignments.
#[derive(Debug, Clone)]
pub struct ConvergenceWindow {
    pub w: usize,
    pub d_s: usize,
    pub d_p: usize,
    buf: VecDeque<Vec<usize>>,
}

impl ConvergenceWindow {
    pub fn new(w: usize, d_s: usize, d_p: usize) -> Result<Self> {
        if w == 0 || d_s == 0 || d_s > d_p {
            return Err(Error::invalid(
                "convergence_window",
                format!("w={w}, d_s={d_s}, d_p={d_p}"),
            ));
        }
        Ok(Self {
            w,
            d_s,
            d_p,
            buf: VecDeque::with_capacity(w + 1),
        })
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.buf.len() == self.w
    }

    /// Pushes `a` (evicting the oldest beyond `w`) and returns the indicator.
    pub fn update(&mut self, a: &MfmsAssignment) -> Result<f64> {
        if a.d_s() != self.d_s || a.d_p() != self.d_p {
            return Err(Error::ShapeMismatch {
                op: "convergence_update",
                expected: vec![self.d_s, self.d_p],
                got: vec![a.d_s(), a.d_p()],
            });
        }
        self.buf.push_back(a.theta.clone());
        if self.buf.len() > self.w {
            self.buf.pop_front();
        }
        Ok(self.indicator())
    }

    pub fn indicator(&self) -> f64 {
        let sets: Vec<&[usize]> = self.buf.iter().map(Vec::as_slice).collect();
        convergence_indicator(&sets, self.d_s, self.d_p)
    }
}

/// One line of the convergence trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub iteration: usize,
    pub m_ra: f64,
    pub m_rf: f64,
    pub theta_ra: Vec<usize>,
    pub theta_rf: Vec<usize>,
}
