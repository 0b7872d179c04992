//! Synthetic multimodal bags.
//!
//! Every modality is a linear read-out of a low-dimensional latent process
//! plus white noise. RGB and flow share most of their latent (flow is a
//! partial copy of the visual latent), audio has its own. Anomalous bags get
//! one or more planted segments where a shared event vector is added to the
//! latent: for the whole segment in RGB, shifted by a small lag in flow, and
//! as sparse lagged bursts in audio. Distractors resemble the event but come
//! with a random orthogonal component and appear in only one stream family
//! (visual: RGB and flow; audio: audio alone).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{Bag, FeatureSequence, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_bags: usize,
    pub anomaly_fraction: f64,
    pub t_min: usize,
    pub t_max: usize,
    pub rgb_dim: usize,
    pub audio_dim: usize,
    pub flow_dim: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub max_segments: usize,
    /// Probability that a given event timestep produces an audio burst.
    pub audio_transient_prob: f64,
    pub audio_lag_min: i64,
    pub audio_lag_max: i64,
    pub flow_lag_min: i64,
    pub flow_lag_max: i64,
    pub latent_dim: usize,
    /// AR(1) coefficient of every latent process.
    pub latent_ar: f64,
    /// Share of the flow latent copied from the visual latent.
    pub flow_rgb_coupling: f64,
    pub noise: f64,
    pub event_amplitude: f64,
    pub distractor_prob: f64,
    /// Cosine between a distractor's latent direction and the event vector.
    pub distractor_similarity: f64,
    pub audio_signal_dims: usize,
    pub flow_signal_dims: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_bags: 240,
            anomaly_fraction: 0.5,
            t_min: 40,
            t_max: 64,
            rgb_dim: 1024,
            audio_dim: 128,
            flow_dim: 1024,
            segment_min: 8,
            segment_max: 20,
            max_segments: 2,
            audio_transient_prob: 0.5,
            audio_lag_min: -2,
            audio_lag_max: 4,
            flow_lag_min: 0,
            flow_lag_max: 1,
            latent_dim: 16,
            latent_ar: 0.8,
            flow_rgb_coupling: 0.8,
            noise: 1.0,
            event_amplitude: 4.5,
            distractor_prob: 0.5,
            distractor_similarity: 0.5,
            audio_signal_dims: 32,
            flow_signal_dims: 512,
            seed: 7,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.n_bags == 0 {
            bad.push("n_bags must be positive".to_string());
        }
        if !(self.anomaly_fraction > 0.0 && self.anomaly_fraction < 1.0) {
            bad.push(format!("anomaly_fraction {} not in (0,1)", self.anomaly_fraction));
        }
        for (name, d) in [
            ("rgb_dim", self.rgb_dim),
            ("audio_dim", self.audio_dim),
            ("flow_dim", self.flow_dim),
            ("latent_dim", self.latent_dim),
            ("segment_min", self.segment_min),
            ("max_segments", self.max_segments),
        ] {
            if d == 0 {
                bad.push(format!("{name} must be positive"));
            }
        }
        if self.t_min == 0 || self.t_min > self.t_max {
            bad.push(format!("bad length range {}..={}", self.t_min, self.t_max));
        }
        if self.segment_min > self.segment_max {
            bad.push(format!("bad segment range {}..={}", self.segment_min, self.segment_max));
        }
        if self.segment_max > self.t_min {
            bad.push(format!(
                "segment_max {} longer than shortest bag t_min {}",
                self.segment_max, self.t_min
            ));
        }
        for (name, lo, hi) in [
            ("audio_lag", self.audio_lag_min, self.audio_lag_max),
            ("flow_lag", self.flow_lag_min, self.flow_lag_max),
        ] {
            if lo > hi {
                bad.push(format!("{name} range {lo}..={hi} is empty"));
            }
            if lo.unsigned_abs() as usize >= self.segment_min || hi.unsigned_abs() as usize >= self.segment_min {
                bad.push(format!(
                    "{name} range {lo}..={hi} not smaller than segment_min {}",
                    self.segment_min
                ));
            }
        }
        for (name, p) in [
            ("audio_transient_prob", self.audio_transient_prob),
            ("distractor_prob", self.distractor_prob),
            ("distractor_similarity", self.distractor_similarity),
            ("flow_rgb_coupling", self.flow_rgb_coupling),
        ] {
            if !(0.0..=1.0).contains(&p) {
                bad.push(format!("{name} {p} not in [0,1]"));
            }
        }
        if !(0.0..1.0).contains(&self.latent_ar) {
            bad.push(format!("latent_ar {} not in [0,1)", self.latent_ar));
        }
        if self.noise < 0.0 || !self.noise.is_finite() || !self.event_amplitude.is_finite() {
            bad.push("noise and event_amplitude must be finite, noise nonnegative".to_string());
        }
        if self.audio_signal_dims == 0 || self.audio_signal_dims > self.audio_dim {
            bad.push(format!(
                "audio_signal_dims {} not in 1..={}",
                self.audio_signal_dims, self.audio_dim
            ));
        }
        if self.flow_signal_dims == 0 || self.flow_signal_dims > self.flow_dim {
            bad.push(format!(
                "flow_signal_dims {} not in 1..={}",
                self.flow_signal_dims, self.flow_dim
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    pub fn dim(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb_dim,
            Modality::Audio => self.audio_dim,
            Modality::Flow => self.flow_dim,
        }
    }

    /// Raw dimensions that carry latent (and therefore event) signal.
    pub fn signal_dims(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb_dim,
            Modality::Audio => self.audio_signal_dims,
            Modality::Flow => self.flow_signal_dims,
        }
    }

    pub fn anomalous_count(&self) -> usize {
        (self.n_bags as f64 * self.anomaly_fraction).round() as usize
    }
}

/// Where the generator put event evidence in one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTrace {
    /// `(start, len)` of each planted segment on the visual time axis.
    pub segments: Vec<(usize, usize)>,
    pub audio_lag: i64,
    pub flow_lag: i64,
    /// Event amplitude of the audio bursts per timestep (0 when silent).
    pub audio_energy: Vec<f64>,
    pub rgb_mask: Vec<bool>,
    pub flow_mask: Vec<bool>,
    pub audio_mask: Vec<bool>,
}

impl PlantedTrace {
    pub fn mask(&self, m: Modality) -> &[bool] {
        match m {
            Modality::Rgb => &self.rgb_mask,
            Modality::Audio => &self.audio_mask,
            Modality::Flow => &self.flow_mask,
        }
    }
}

struct Mixing {
    rgb: Vec<f64>,
    audio: Vec<f64>,
    flow: Vec<f64>,
    event: Vec<f64>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl Mixing {
    fn new(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Self {
        let l = cfg.latent_dim;
        let scale = 1.0 / (l as f64).sqrt();
        let sparse = |rng: &mut ChaCha8Rng, rows: usize, signal: usize| {
            let mut m = gaussian_vec(rng, signal * l, scale);
            m.resize(rows * l, 0.0);
            m
        };
        let rgb = gaussian_vec(rng, cfg.rgb_dim * l, scale);
        let audio = sparse(rng, cfg.audio_dim, cfg.audio_signal_dims);
        let flow = sparse(rng, cfg.flow_dim, cfg.flow_signal_dims);
        let mut event = gaussian_vec(rng, l, 1.0);
        normalize(&mut event);
        Self {
            rgb,
            audio,
            flow,
            event,
        }
    }

    /// Unit latent direction with cosine `c` to the event vector.
    fn lookalike<R: Rng>(&self, rng: &mut R, c: f64) -> Vec<f64> {
        let mut r = gaussian_vec(rng, self.event.len(), 1.0);
        let dot: f64 = r.iter().zip(&self.event).map(|(a, b)| a * b).sum();
        r.iter_mut().zip(&self.event).for_each(|(a, b)| *a -= dot * b);
        normalize(&mut r);
        let s = (1.0 - c * c).max(0.0).sqrt();
        self.event.iter().zip(&r).map(|(e, o)| c * e + s * o).collect()
    }
}

fn ar_process<R: Rng>(rng: &mut R, t: usize, l: usize, phi: f64) -> Vec<f64> {
    let innov = (1.0 - phi * phi).sqrt();
    let mut out = gaussian_vec(rng, l, 1.0);
    out.reserve((t - 1) * l);
    for i in 1..t {
        for j in 0..l {
            let prev = out[(i - 1) * l + j];
            out.push(phi * prev + innov * rng.sample::<f64, _>(StandardNormal));
        }
    }
    out
}

/// `W·z + noise` for every timestep, with `W` stored row-major `[d, l]`.
fn read_out<R: Rng>(rng: &mut R, w: &[f64], latent: &[f64], t: usize, d: usize, l: usize, noise: f64) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * d);
    for i in 0..t {
        let z = &latent[i * l..(i + 1) * l];
        for row in w.chunks_exact(l).take(d) {
            let s: f64 = row.iter().zip(z).map(|(a, b)| a * b).sum();
            out.push((s + noise * rng.sample::<f64, _>(StandardNormal)) as f32);
        }
    }
    out
}

fn shifted(t: usize, lag: i64, len: usize) -> Option<usize> {
    let s = t as i64 + lag;
    (s >= 0 && (s as usize) < len).then_some(s as usize)
}

fn add_dir(ev: &mut [f64], l: usize, t: usize, dir: &[f64], amp: f64) {
    for (a, d) in ev[t * l..(t + 1) * l].iter_mut().zip(dir) {
        *a += amp * d;
    }
}

fn place_segment<R: Rng>(rng: &mut R, t: usize, lo: usize, hi: usize, taken: &[bool]) -> Option<(usize, usize)> {
    for _ in 0..64 {
        let len = rng.random_range(lo..=hi);
        let start = rng.random_range(0..=t - len);
        let from = start.saturating_sub(1);
        let to = (start + len + 1).min(t);
        if !taken[from..to].iter().any(|&b| b) {
            return Some((start, len));
        }
    }
    None
}

fn generate_bag(cfg: &GenConfig, mix: &Mixing, index: usize, label: u8) -> Result<(Bag, PlantedTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let l = cfg.latent_dim;
    let t = rng.random_range(cfg.t_min..=cfg.t_max);
    let amp = cfg.event_amplitude;

    let audio_lag = rng.random_range(cfg.audio_lag_min..=cfg.audio_lag_max);
    let flow_lag = rng.random_range(cfg.flow_lag_min..=cfg.flow_lag_max);
    let mut ev_rgb = vec![0.0; t * l];
    let mut ev_flow = vec![0.0; t * l];
    let mut ev_audio = vec![0.0; t * l];
    let mut labels = vec![0u8; t];
    let mut taken = vec![false; t];
    let mut trace = PlantedTrace {
        segments: Vec::new(),
        audio_lag,
        flow_lag,
        audio_energy: vec![0.0; t],
        rgb_mask: vec![false; t],
        flow_mask: vec![false; t],
        audio_mask: vec![false; t],
    };

    if label == 1 {
        let n_seg = rng.random_range(1..=cfg.max_segments);
        for _ in 0..n_seg {
            let Some((start, len)) = place_segment(&mut rng, t, cfg.segment_min, cfg.segment_max, &taken) else {
                break;
            };
            trace.segments.push((start, len));
            let mut bursts = Vec::new();
            for i in start..start + len {
                labels[i] = 1;
                taken[i] = true;
                trace.rgb_mask[i] = true;
                add_dir(&mut ev_rgb, l, i, &mix.event, amp);
                if let Some(j) = shifted(i, flow_lag, t) {
                    trace.flow_mask[j] = true;
                    add_dir(&mut ev_flow, l, j, &mix.event, amp);
                }
                if rng.random_bool(cfg.audio_transient_prob) {
                    bursts.push(i);
                }
            }
            if bursts.is_empty() {
                bursts.push(rng.random_range(start..start + len));
            }
            for i in bursts {
                if let Some(j) = shifted(i, audio_lag, t) {
                    trace.audio_mask[j] = true;
                    trace.audio_energy[j] = amp;
                    add_dir(&mut ev_audio, l, j, &mix.event, amp);
                }
            }
        }
        if trace.segments.is_empty() {
            return Err(Error::Config(format!(
                "could not place a segment in a bag of length {t}"
            )));
        }
    }

    if rng.random_bool(cfg.distractor_prob) {
        if let Some((start, len)) = place_segment(&mut rng, t, cfg.segment_min, cfg.segment_max, &taken) {
            let dir = mix.lookalike(&mut rng, cfg.distractor_similarity);
            taken[start..start + len].fill(true);
            for i in start..start + len {
                add_dir(&mut ev_rgb, l, i, &dir, amp);
                add_dir(&mut ev_flow, l, i, &dir, amp);
            }
        }
    }
    if rng.random_bool(cfg.distractor_prob) {
        if let Some((start, len)) = place_segment(&mut rng, t, cfg.segment_min, cfg.segment_max, &taken) {
            let dir = mix.lookalike(&mut rng, cfg.distractor_similarity);
            let mut any = false;
            for i in start..start + len {
                if rng.random_bool(cfg.audio_transient_prob) {
                    any = true;
                    add_dir(&mut ev_audio, l, i, &dir, amp);
                }
            }
            if !any {
                add_dir(&mut ev_audio, l, start, &dir, amp);
            }
        }
    }

    let visual = ar_process(&mut rng, t, l, cfg.latent_ar);
    let private = ar_process(&mut rng, t, l, cfg.latent_ar);
    let sound = ar_process(&mut rng, t, l, cfg.latent_ar);
    let rho = cfg.flow_rgb_coupling;
    let rho_c = (1.0 - rho * rho).sqrt();

    let z_rgb: Vec<f64> = visual.iter().zip(&ev_rgb).map(|(a, b)| a + b).collect();
    let z_flow: Vec<f64> = visual
        .iter()
        .zip(&private)
        .zip(&ev_flow)
        .map(|((v, p), e)| rho * v + rho_c * p + e)
        .collect();
    let z_audio: Vec<f64> = sound.iter().zip(&ev_audio).map(|(a, b)| a + b).collect();

    let rgb = read_out(&mut rng, &mix.rgb, &z_rgb, t, cfg.rgb_dim, l, cfg.noise);
    let audio = read_out(&mut rng, &mix.audio, &z_audio, t, cfg.audio_dim, l, cfg.noise);
    let flow = read_out(&mut rng, &mix.flow, &z_flow, t, cfg.flow_dim, l, cfg.noise);

    let bag = Bag::new(
        format!("bag{index:04}"),
        FeatureSequence::new(Modality::Rgb, t, cfg.rgb_dim, rgb)?,
        FeatureSequence::new(Modality::Audio, t, cfg.audio_dim, audio)?,
        FeatureSequence::new(Modality::Flow, t, cfg.flow_dim, flow)?,
        label,
        Some(labels),
    )?;
    Ok((bag, trace))
}

/// Bags together with the generator's record of where evidence was planted.
pub fn generate_with_traces(cfg: &GenConfig) -> Result<(Vec<Bag>, Vec<PlantedTrace>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mix = Mixing::new(cfg, &mut rng);
    let n_anom = cfg.anomalous_count();
    let mut labels: Vec<u8> = (0..cfg.n_bags).map(|i| u8::from(i < n_anom)).collect();
    labels.shuffle(&mut rng);
    let mut bags = Vec::with_capacity(cfg.n_bags);
    let mut traces = Vec::with_capacity(cfg.n_bags);
    for (i, &y) in labels.iter().enumerate() {
        let (b, tr) = generate_bag(cfg, &mix, i, y)?;
        bags.push(b);
        traces.push(tr);
    }
    Ok((bags, traces))
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Bag>> {
    generate_with_traces(cfg).map(|(b, _)| b)
}
