//! The full three-stage network and its composite training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{
    alignment_loss, aux_mil, search_mfms, sparsify, AlignmentInputs, AlignmentTerms, MfmsAssignment, Projection,
    SparsifyMode,
};
use crate::data::{Batch, Dims, Modality};
use crate::encoder::{bag_scores, mil_loss, EncoderConfig, UnimodalEncoder};
use crate::error::{Error, Result};
use crate::fusion::{fuse, triplet_loss, FusionConfig, FusionDetector};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// The four top-level loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Umil,
    Ma,
    Mmil,
    Triplet,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Umil, Term::Ma, Term::Mmil, Term::Triplet];

    pub fn as_str(self) -> &'static str {
        match self {
            Term::Umil => "u_mil",
            Term::Ma => "ma",
            Term::Mmil => "m_mil",
            Term::Triplet => "triplet",
        }
    }
}

/// Everything the loss needs besides parameters and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the alignment loss.
    pub lambda_align: f64,
    /// Weight of the fused MIL loss.
    pub lambda_mmil: f64,
    pub lambda_triplet: f64,
    /// Weight of the auxiliary MIL terms inside the alignment loss.
    pub lambda_aux: f64,
    pub eps: f64,
    /// Candidates per secondary dim in the subspace search; `None` means `d_p`.
    pub k_search: Option<usize>,
    pub sparsify: SparsifyMode,
    /// When false the alignment loss stops at the projection input and
    /// never reaches the secondary encoders.
    pub align_reaches_encoders: bool,
    pub ablate: Vec<Term>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_align: 10.0,
            lambda_mmil: 10.0,
            lambda_triplet: 0.001,
            lambda_aux: 0.01,
            eps: 1e-6,
            k_search: None,
            sparsify: SparsifyMode::Scatter,
            align_reaches_encoders: true,
            ablate: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn enabled(&self, t: Term) -> bool {
        !self.ablate.contains(&t)
    }

    pub fn weight(&self, t: Term) -> f64 {
        match t {
            Term::Umil => 1.0,
            Term::Ma => self.lambda_align,
            Term::Mmil => self.lambda_mmil,
            Term::Triplet => self.lambda_triplet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (name, v) in [
            ("lambda_align", self.lambda_align),
            ("lambda_mmil", self.lambda_mmil),
            ("lambda_triplet", self.lambda_triplet),
            ("lambda_aux", self.lambda_aux),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bad.push(format!("{name} {v} must be finite and nonnegative"));
            }
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            bad.push(format!("eps {} outside (0, 0.5)", self.eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Graph handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub z_r: Var,
    pub z_a: Var,
    pub z_f: Var,
    pub s_r: Var,
    pub s_a: Var,
    pub s_f: Var,
    pub zh_a: Var,
    pub zh_f: Var,
    pub zh_raf: Var,
    pub s_raf: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub encoder_cfg: EncoderConfig,
    pub fusion_cfg: FusionConfig,
    pub raw: Dims,
    pub store: ParamStore,
    pub rgb: UnimodalEncoder,
    pub audio: UnimodalEncoder,
    pub flow: UnimodalEncoder,
    pub proj_a: Projection,
    pub proj_f: Projection,
    pub fusion: FusionDetector,
}

impl Model {
    /// Fan-in uniform weights and zero biases, drawn from `seed`.
    pub fn new(encoder_cfg: &EncoderConfig, fusion_cfg: &FusionConfig, raw: Dims, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        fusion_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let rgb = UnimodalEncoder::new(&mut store, Modality::Rgb, raw.rgb, encoder_cfg, &mut rng);
        let audio = UnimodalEncoder::new(&mut store, Modality::Audio, raw.audio, encoder_cfg, &mut rng);
        let flow = UnimodalEncoder::new(&mut store, Modality::Flow, raw.flow, encoder_cfg, &mut rng);
        let proj_a = Projection::new(&mut store, Modality::Audio, encoder_cfg.d_audio, &mut rng)?;
        let proj_f = Projection::new(&mut store, Modality::Flow, encoder_cfg.d_flow, &mut rng)?;
        let in_dim = encoder_cfg.d_audio + encoder_cfg.d_rgb + encoder_cfg.d_flow;
        let fusion = FusionDetector::new(&mut store, in_dim, fusion_cfg, &mut rng);
        Ok(Self {
            encoder_cfg: encoder_cfg.clone(),
            fusion_cfg: fusion_cfg.clone(),
            raw,
            store,
            rgb,
            audio,
            flow,
            proj_a,
            proj_f,
            fusion,
        })
    }

    pub fn encoder(&self, m: Modality) -> &UnimodalEncoder {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Audio => &self.audio,
            Modality::Flow => &self.flow,
        }
    }

    /// Replaces all parameters, checking names and shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        self.store.load_from(other)
    }

    /// Encoders, regressors, projections and the fusion detector. No
    /// subspace search happens here.
    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: [Var; 3], lengths: &[usize]) -> Result<Forward> {
        let [rgb, audio, flow] = inputs;
        let z_r = self.rgb.encode(g, p, rgb, lengths)?;
        let z_a = self.audio.encode(g, p, audio, lengths)?;
        let z_f = self.flow.encode(g, p, flow, lengths)?;
        let s_r = self.rgb.regressor.forward(g, p, z_r, lengths)?;
        let s_a = self.audio.regressor.forward(g, p, z_a, lengths)?;
        let s_f = self.flow.regressor.forward(g, p, z_f, lengths)?;
        let zh_a = self.proj_a.forward(g, p, z_a)?;
        let zh_f = self.proj_f.forward(g, p, z_f)?;
        let z_raf = fuse(g, zh_a, z_r, zh_f)?;
        let zh_raf = self.fusion.encode(g, p, z_raf, lengths)?;
        let s_raf = self.fusion.scores(g, p, zh_raf, lengths)?;
        Ok(Forward {
            z_r,
            z_a,
            z_f,
            s_r,
            s_a,
            s_f,
            zh_a,
            zh_f,
            zh_raf,
            s_raf,
        })
    }

    /// Uploads the three modality tensors of `batch` as constants.
    pub fn inputs(g: &mut Graph, batch: &Batch) -> [Var; 3] {
        [
            g.constant(batch.rgb.clone()),
            g.constant(batch.audio.clone()),
            g.constant(batch.flow.clone()),
        ]
    }
}

/// Values of every stop-gradient input of the loss.
#[derive(Debug, Clone)]
pub struct FrozenTargets {
    pub z_r: Tensor,
    pub s_r: Tensor,
    pub z_a: Tensor,
    pub z_f: Tensor,
}

/// Per-call switches used by gradient checking.
#[derive(Debug, Clone, Default)]
pub struct LossOptions {
    /// Reuse these (audio, flow) assignments instead of searching.
    pub fixed: Option<(MfmsAssignment, MfmsAssignment)>,
    /// Feed these as constants wherever the loss stops gradients, so that
    /// finite differences see the same function the backward pass does.
    pub frozen: Option<FrozenTargets>,
    /// Route the fused features through an op with a wrong gradient.
    pub inject_fault: bool,
}

/// Scalar values of the four terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub u_mil: f64,
    pub ma: f64,
    pub m_mil: f64,
    pub triplet: f64,
    pub total: f64,
}

impl Components {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Umil => self.u_mil,
            Term::Ma => self.ma,
            Term::Mmil => self.m_mil,
            Term::Triplet => self.triplet,
        }
    }

    /// The first term (in loss order) that is not finite.
    pub fn first_non_finite(&self) -> Option<Term> {
        Term::ALL.into_iter().find(|&t| !self.get(t).is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub terms: [Option<Var>; 4],
    pub components: Components,
    pub forward: Forward,
    pub align: Option<AlignmentTerms>,
    pub assign_ra: MfmsAssignment,
    pub assign_rf: MfmsAssignment,
}

/// `U-MIL + λ_align·MA + λ_mmil·M-MIL + λ_triplet·Triplet`. Ablated terms
/// are never built, so they contribute neither value nor gradient.
pub fn total_loss(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    batch: &Batch,
    cfg: &LossConfig,
    opts: &LossOptions,
) -> Result<LossOutput> {
    let lengths = &batch.lengths;
    let labels = &batch.labels;
    let inputs = Model::inputs(g, batch);
    let mut fwd = model.forward(g, p, inputs, lengths)?;
    if opts.inject_fault {
        fwd.zh_raf = g.faulty_identity(fwd.zh_raf);
        fwd.s_raf = model.fusion.scores(g, p, fwd.zh_raf, lengths)?;
    }

    let (assign_ra, assign_rf) = match &opts.fixed {
        Some((a, f)) => (a.clone(), f.clone()),
        None => {
            let d_p = model.encoder_cfg.d_rgb;
            let k = cfg.k_search.unwrap_or(d_p);
            let z_r = g.value(fwd.z_r).clone();
            (
                search_mfms(g.value(fwd.zh_a), &z_r, Some(lengths), k)?,
                search_mfms(g.value(fwd.zh_f), &z_r, Some(lengths), k)?,
            )
        }
    };

    let mut terms: [Option<Var>; 4] = [None; 4];
    let mut align = None;
    if cfg.enabled(Term::Umil) {
        let mut parts = Vec::with_capacity(3);
        for s in [fwd.s_r, fwd.s_a, fwd.s_f] {
            let sb = bag_scores(g, s, lengths)?;
            parts.push(mil_loss(g, sb, labels, cfg.eps)?);
        }
        let u = g.add(parts[0], parts[1])?;
        terms[0] = Some(g.add(u, parts[2])?);
    }
    if cfg.enabled(Term::Ma) {
        let frozen = opts.frozen.as_ref();
        let (zh_a, zh_f) = if cfg.align_reaches_encoders {
            (fwd.zh_a, fwd.zh_f)
        } else {
            let (za, zf) = match frozen {
                Some(f) => (g.constant(f.z_a.clone()), g.constant(f.z_f.clone())),
                None => (g.stop_gradient(fwd.z_a), g.stop_gradient(fwd.z_f)),
            };
            (model.proj_a.forward(g, p, za)?, model.proj_f.forward(g, p, zf)?)
        };
        let zt_a = sparsify(g, zh_a, &assign_ra, cfg.sparsify)?;
        let zt_f = sparsify(g, zh_f, &assign_rf, cfg.sparsify)?;
        let (sh_a, aux_a) = aux_mil(g, p, zh_a, &model.audio.regressor, lengths, labels, cfg.eps)?;
        let (sh_f, aux_f) = aux_mil(g, p, zh_f, &model.flow.regressor, lengths, labels, cfg.eps)?;
        let (z_r, s_r) = match frozen {
            Some(f) => (g.constant(f.z_r.clone()), g.constant(f.s_r.clone())),
            None => (fwd.z_r, fwd.s_r),
        };
        let t = alignment_loss(
            g,
            AlignmentInputs {
                z_r,
                zt_a,
                zt_f,
                s_r,
                sh_a,
                sh_f,
                aux_a,
                aux_f,
                lambda_aux: cfg.lambda_aux,
                eps: cfg.eps,
                lengths,
            },
        )?;
        terms[1] = Some(t.total);
        align = Some(t);
    }
    if cfg.enabled(Term::Mmil) {
        let sb = bag_scores(g, fwd.s_raf, lengths)?;
        terms[2] = Some(mil_loss(g, sb, labels, cfg.eps)?);
    }
    if cfg.enabled(Term::Triplet) {
        let scores = g.value(fwd.s_raf).clone();
        terms[3] = Some(triplet_loss(
            g,
            fwd.zh_raf,
            &scores,
            labels,
            lengths,
            model.fusion_cfg.margin,
        )?);
    }

    let mut total: Option<Var> = None;
    let mut values = [0.0; 4];
    for (i, t) in Term::ALL.into_iter().enumerate() {
        let Some(v) = terms[i] else { continue };
        values[i] = g.value(v).item();
        let w = g.scale(v, cfg.weight(t));
        total = Some(match total {
            Some(acc) => g.add(acc, w)?,
            None => w,
        });
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::Config("every loss term is ablated".into())),
    };
    let components = Components {
        u_mil: values[0],
        ma: values[1],
        m_mil: values[2],
        triplet: values[3],
        total: g.value(total).item(),
    };
    Ok(LossOutput {
        total,
        terms,
        components,
        forward: fwd,
        align,
        assign_ra,
        assign_rf,
    })
}

/// Per-timestep scores of one inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub fused: Vec<f64>,
    pub rgb: Vec<f64>,
    pub audio: Vec<f64>,
    pub flow: Vec<f64>,
}

/// Inference on a batch: encode and project, then fuse and score. No
/// subspace search, no sparsification and no losses.
pub fn infer_batch(model: &Model, batch: &Batch) -> Result<Vec<ScoreSet>> {
    for m in Modality::ALL {
        let d = batch.modality(m).last_dim();
        if d != model.raw.get(m) {
            return Err(Error::ShapeMismatch {
                op: "infer",
                expected: vec![model.raw.get(m)],
                got: vec![d],
            });
        }
    }
    let mut g = Graph::new();
    let p = model.store.bind_frozen(&mut g);
    let inputs = Model::inputs(&mut g, batch);
    let f = model.forward(&mut g, &p, inputs, &batch.lengths)?;
    let t = batch.t;
    let rows = |v: &Tensor, b: usize, n: usize| v.data()[b * t..b * t + n].to_vec();
    Ok(batch
        .lengths
        .iter()
        .enumerate()
        .map(|(b, &n)| ScoreSet {
            fused: rows(g.value(f.s_raf), b, n),
            rgb: rows(g.value(f.s_r), b, n),
            audio: rows(g.value(f.s_a), b, n),
            flow: rows(g.value(f.s_f), b, n),
        })
        .collect())
}
