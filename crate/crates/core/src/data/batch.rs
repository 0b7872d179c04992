//! Fixed-length training batches.

use rand::seq::index::sample;
use rand::Rng;

use super::features::{Bag, FeatureSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_T_TRAIN: usize = 16;

/// `b` bags cropped or zero-padded to a common length `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rgb: Tensor,
    pub audio: Tensor,
    pub flow: Tensor,
    pub labels: Vec<u8>,
    /// Number of real (unpadded) timesteps per bag.
    pub lengths: Vec<usize>,
    pub frame_labels: Vec<Option<Vec<u8>>>,
    pub ids: Vec<String>,
    pub crop_starts: Vec<usize>,
    pub t: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Audio => &self.audio,
            Modality::Flow => &self.flow,
        }
    }

    /// A one-bag batch covering the whole sequence, no cropping.
    pub fn single(bag: &Bag) -> Self {
        let t = bag.t();
        assemble(&[bag], &[0], t)
    }

    /// Row-major `[b, t]` validity mask.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&n| (0..self.t).map(move |i| i < n))
            .collect()
    }
}

fn modality_tensor(seqs: &[&FeatureSequence], starts: &[usize], t: usize) -> Tensor {
    let d = seqs[0].d();
    let mut data = vec![0.0; seqs.len() * t * d];
    for (b, (seq, &s)) in seqs.iter().zip(starts).enumerate() {
        let n = (seq.t() - s).min(t);
        let src = &seq.values()[s * d..(s + n) * d];
        let dst = &mut data[b * t * d..b * t * d + n * d];
        dst.iter_mut().zip(src).for_each(|(o, &v)| *o = v as f64);
    }
    Tensor::new(vec![seqs.len(), t, d], data).expect("sizes agree")
}

fn assemble(bags: &[&Bag], starts: &[usize], t: usize) -> Batch {
    let seqs = |m| bags.iter().map(|b| b.modality(m)).collect::<Vec<_>>();
    Batch {
        rgb: modality_tensor(&seqs(Modality::Rgb), starts, t),
        audio: modality_tensor(&seqs(Modality::Audio), starts, t),
        flow: modality_tensor(&seqs(Modality::Flow), starts, t),
        labels: bags.iter().map(|b| b.label).collect(),
        lengths: bags.iter().zip(starts).map(|(b, &s)| (b.t() - s).min(t)).collect(),
        frame_labels: bags
            .iter()
            .zip(starts)
            .map(|(b, &s)| b.frame_labels.as_ref().map(|fl| fl[s..(s + t).min(fl.len())].to_vec()))
            .collect(),
        ids: bags.iter().map(|b| b.id.clone()).collect(),
        crop_starts: starts.to_vec(),
        t,
    }
}

/// Crops each bag at a uniformly random start when longer than `t_train`,
/// zero-pads at the end when shorter.
pub fn make_batch<R: Rng>(bags: &[&Bag], t_train: usize, rng: &mut R) -> Result<Batch> {
    if bags.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if t_train < MIN_T_TRAIN {
        return Err(Error::invalid(
            "make_batch",
            format!("T_train {t_train} < {MIN_T_TRAIN}"),
        ));
    }
    let dims: Vec<_> = Modality::ALL.iter().map(|&m| bags[0].modality(m).d()).collect();
    for b in bags {
        let got: Vec<_> = Modality::ALL.iter().map(|&m| b.modality(m).d()).collect();
        if got != dims {
            return Err(Error::ShapeMismatch {
                op: "make_batch",
                expected: dims,
                got,
            });
        }
    }
    let starts: Vec<usize> = bags
        .iter()
        .map(|b| {
            if b.t() > t_train {
                rng.random_range(0..=b.t() - t_train)
            } else {
                0
            }
        })
        .collect();
    Ok(assemble(bags, &starts, t_train))
}

/// Draws `batch_size` distinct bags; when the pool holds both classes the
/// batch is guaranteed to as well.
pub fn sample_batch<R: Rng>(pool: &[Bag], batch_size: usize, t_train: usize, rng: &mut R) -> Result<Batch> {
    if pool.is_empty() || batch_size == 0 {
        return Err(Error::Empty("batch"));
    }
    let n = batch_size.min(pool.len());
    let mut idx = sample(rng, pool.len(), n).into_vec();
    let has = |idx: &[usize], y| idx.iter().any(|&i| pool[i].label == y);
    for y in [0u8, 1] {
        let other: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == y).collect();
        if !has(&idx, y) && !other.is_empty() && n >= 2 {
            // Replace a member of the over-represented class.
            let slot = idx
                .iter()
                .rposition(|&i| pool[i].label != y)
                .expect("batch is single-class");
            idx[slot] = other[rng.random_range(0..other.len())];
        }
    }
    let bags: Vec<&Bag> = idx.iter().map(|&i| &pool[i]).collect();
    make_batch(&bags, t_train, rng)
}
