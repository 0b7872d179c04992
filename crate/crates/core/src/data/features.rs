//! Per-modality feature sequences and their binary container.
//!
//! Layout: the magic bytes `MVD1`, little-endian `u32` T, little-endian
//! `u32` D, then T·D little-endian `f32` values in time-major order.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"MVD1";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Audio,
    Flow,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Audio, Modality::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Audio => "audio",
            Modality::Flow => "flow",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One modality's `T×D` backbone features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    t: usize,
    d: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, t: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        if t == 0 || d == 0 {
            return Err(Error::invalid("feature_sequence", format!("empty sequence {t}x{d}")));
        }
        if values.len() != t * d {
            return Err(Error::ShapeMismatch {
                op: "feature_sequence",
                expected: vec![t, d],
                got: vec![values.len()],
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{modality} feature at index {i}")));
        }
        Ok(Self { modality, t, d, values })
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.d..(t + 1) * self.d]
    }
}

pub fn encode_feature_bytes(seq: &FeatureSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + seq.values.len() * 4);
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&(seq.t as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.d as u32).to_le_bytes());
    for v in &seq.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Parses the `(T, D)` header, validating magic and payload size.
fn parse_header(bytes: &[u8], total_len: u64, path: &Path) -> Result<(usize, usize)> {
    if bytes.len() < 4 || bytes[..4] != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN as u64,
            found: total_len,
        });
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = (t as usize)
        .checked_mul(d as usize)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::SizeOverflow {
            path: path.to_path_buf(),
            t,
            d,
        })?;
    let payload = payload as u64;
    if total_len < payload {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: payload,
            found: total_len,
        });
    }
    if total_len > payload {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", total_len - payload),
        });
    }
    Ok((t as usize, d as usize))
}

pub fn decode_feature_bytes(bytes: &[u8], modality: Modality, path: &Path) -> Result<FeatureSequence> {
    let (t, d) = parse_header(bytes, bytes.len() as u64, path)?;
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FeatureSequence::new(modality, t, d, values)
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode_feature_bytes(seq);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path, modality: Modality) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_bytes(&bytes, modality, path)
}

/// Reads only the header, checks it against the file size and returns `(T, D)`.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let total = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut head = Vec::with_capacity(HEADER_LEN);
    f.take(HEADER_LEN as u64)
        .read_to_end(&mut head)
        .map_err(|e| Error::io(path, e))?;
    parse_header(&head, total, path)
}

/// A video sample: three synchronized sequences plus its video-level label.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: String,
    pub rgb: FeatureSequence,
    pub audio: FeatureSequence,
    pub flow: FeatureSequence,
    pub label: u8,
    /// Per-timestep ground truth; evaluation only, never seen by training.
    pub frame_labels: Option<Vec<u8>>,
}

impl Bag {
    pub fn new(
        id: impl Into<String>,
        rgb: FeatureSequence,
        audio: FeatureSequence,
        flow: FeatureSequence,
        label: u8,
        frame_labels: Option<Vec<u8>>,
    ) -> Result<Self> {
        let id = id.into();
        let t = rgb.t();
        if audio.t() != t || flow.t() != t {
            return Err(Error::invalid(
                "bag",
                format!("{id}: lengths differ (rgb {t}, audio {}, flow {})", audio.t(), flow.t()),
            ));
        }
        if label > 1 {
            return Err(Error::invalid("bag", format!("{id}: label {label} not in {{0,1}}")));
        }
        if let Some(fl) = &frame_labels {
            if fl.len() != t {
                return Err(Error::invalid(
                    "bag",
                    format!("{id}: {} frame labels for T={t}", fl.len()),
                ));
            }
            if fl.iter().any(|&v| v > 1) {
                return Err(Error::invalid("bag", format!("{id}: frame label outside {{0,1}}")));
            }
            let any = fl.contains(&1);
            if any != (label == 1) {
                return Err(Error::invalid(
                    "bag",
                    format!("{id}: label {label} inconsistent with frame labels"),
                ));
            }
        }
        Ok(Self {
            id,
            rgb,
            audio,
            flow,
            label,
            frame_labels,
        })
    }

    pub fn t(&self) -> usize {
        self.rgb.t()
    }

    pub fn modality(&self, m: Modality) -> &FeatureSequence {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Audio => &self.audio,
            Modality::Flow => &self.flow,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn one_by_two_file_is_twenty_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mvd");
        let seq = FeatureSequence::new(Modality::Rgb, 1, 2, vec![1.0, -2.5]).unwrap();
        write_feature_file(&p, &seq).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 20);
        assert_eq!(read_feature_file(&p, Modality::Rgb).unwrap(), seq);
    }

    #[test]
    fn empty_file_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.mvd");
        fs::write(&p, b"").unwrap();
        assert!(matches!(
            read_feature_file(&p, Modality::Audio),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_reported() {
        let seq = FeatureSequence::new(Modality::Flow, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_feature_bytes(&seq);
        let err = decode_feature_bytes(&bytes[..bytes.len() - 1], Modality::Flow, Path::new("t")).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Truncated {
                    expected: 28,
                    found: 27,
                    ..
                }
            ),
            "{err}"
        );
        let err = decode_feature_bytes(&bytes[..10], Modality::Flow, Path::new("t")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        let err = decode_feature_bytes(&bytes, Modality::Rgb, Path::new("h")).unwrap_err();
        assert!(
            matches!(err, Error::SizeOverflow { .. } | Error::Truncated { .. }),
            "{err}"
        );
    }

    #[test]
    fn random_64x32_round_trips_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f32> = (0..64 * 32).map(|_| rng.random_range(-1e3f32..1e3)).collect();
        let seq = FeatureSequence::new(Modality::Audio, 64, 32, vals).unwrap();
        let back = decode_feature_bytes(&encode_feature_bytes(&seq), Modality::Audio, Path::new("r")).unwrap();
        let a: Vec<u32> = seq.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn bag_rejects_inconsistent_labels() {
        let s = |m| FeatureSequence::new(m, 3, 1, vec![0.0; 3]).unwrap();
        assert!(Bag::new(
            "a",
            s(Modality::Rgb),
            s(Modality::Audio),
            s(Modality::Flow),
            1,
            Some(vec![0, 0, 0])
        )
        .is_err());
        assert!(Bag::new(
            "a",
            s(Modality::Rgb),
            s(Modality::Audio),
            s(Modality::Flow),
            0,
            Some(vec![0, 1, 0])
        )
        .is_err());
        assert!(Bag::new(
            "a",
            s(Modality::Rgb),
            s(Modality::Audio),
            s(Modality::Flow),
            1,
            Some(vec![0, 1, 0])
        )
        .is_ok());
        let short = FeatureSequence::new(Modality::Audio, 2, 1, vec![0.0; 2]).unwrap();
        assert!(Bag::new("a", s(Modality::Rgb), short, s(Modality::Flow), 0, None).is_err());
    }

    proptest! {
        #[test]
        fn read_after_write_is_identity(t in 1usize..6, d in 1usize..6, bits in proptest::collection::vec(any::<u32>(), 36)) {
            let vals: Vec<f32> = bits.iter().take(t * d).map(|b| {
                let v = f32::from_bits(*b);
                if v.is_finite() { v } else { 0.0 }
            }).collect();
            let seq = FeatureSequence::new(Modality::Rgb, t, d, vals).unwrap();
            let back = decode_feature_bytes(&encode_feature_bytes(&seq), Modality::Rgb, Path::new("p")).unwrap();
            let a: Vec<u32> = seq.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
