//! Line-delimited JSON manifest. The first line is a header declaring the
//! feature dims; every following line describes one bag with paths relative
//! to the manifest's directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_feature_file, read_feature_header, write_feature_file, Bag, Modality};
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "mvd-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub rgb: usize,
    pub audio: usize,
    pub flow: usize,
}

impl Dims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Audio => self.audio,
            Modality::Flow => self.flow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    dims: Dims,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub rgb: PathBuf,
    pub audio: PathBuf,
    pub flow: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels: Option<PathBuf>,
}

impl ManifestEntry {
    pub fn path(&self, m: Modality) -> &Path {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Audio => &self.audio,
            Modality::Flow => &self.flow,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub dims: Dims,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_bag(&self, i: usize) -> Result<Bag> {
        let e = &self.entries[i];
        let read = |m| read_feature_file(&self.root.join(e.path(m)), m);
        let frame_labels = match &e.frame_labels {
            Some(p) => Some(read_frame_labels(&self.root.join(p))?),
            None => None,
        };
        Bag::new(
            e.id.clone(),
            read(Modality::Rgb)?,
            read(Modality::Audio)?,
            read(Modality::Flow)?,
            e.label,
            frame_labels,
        )
    }

    pub fn load_bags(&self) -> Result<Vec<Bag>> {
        (0..self.len()).map(|i| self.load_bag(i)).collect()
    }
}

fn write_frame_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut s: String = labels.iter().map(|&v| if v == 1 { '1' } else { '0' }).collect();
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_frame_labels(path: &Path) -> Result<Vec<u8>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.trim_end()
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(Error::Parse {
                path: path.to_path_buf(),
                reason: format!("unexpected frame label character {other:?}"),
            }),
        })
        .collect()
}

pub fn write_manifest(path: &Path, index: &DatasetIndex) -> Result<()> {
    let mut out = Vec::new();
    let header = Header {
        format: MANIFEST_FORMAT.to_string(),
        dims: index.dims,
    };
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    for e in &index.entries {
        serde_json::to_writer(&mut out, e).expect("entry serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Writes every bag's feature files and frame labels under `dir`, then the
/// manifest at `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, bags: &[Bag]) -> Result<DatasetIndex> {
    let first = bags.first().ok_or(Error::Empty("dataset"))?;
    let dims = Dims {
        rgb: first.rgb.d(),
        audio: first.audio.d(),
        flow: first.flow.d(),
    };
    let feat_dir = dir.join("features");
    let label_dir = dir.join("labels");
    for d in [&feat_dir, &label_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut entries = Vec::with_capacity(bags.len());
    for bag in bags {
        let rel = |m: Modality| PathBuf::from("features").join(format!("{}.{m}.mvd", bag.id));
        for m in Modality::ALL {
            write_feature_file(&dir.join(rel(m)), bag.modality(m))?;
        }
        let frame_labels = match &bag.frame_labels {
            Some(fl) => {
                let p = PathBuf::from("labels").join(format!("{}.txt", bag.id));
                write_frame_labels(&dir.join(&p), fl)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: bag.id.clone(),
            label: bag.label,
            rgb: rel(Modality::Rgb),
            audio: rel(Modality::Audio),
            flow: rel(Modality::Flow),
            frame_labels,
        });
    }
    let index = DatasetIndex {
        root: dir.to_path_buf(),
        dims,
        entries,
    };
    write_manifest(&dir.join(MANIFEST_FILE), &index)?;
    Ok(index)
}

/// Parses the manifest and checks that every referenced file exists, has a
/// well-formed header, agrees on T across modalities and matches the
/// declared dims. All offenders are reported together.
pub fn read_manifest(path: &Path) -> Result<DatasetIndex> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason: format!("line {line}: {reason}"),
    };
    let mut lines = BufReader::new(f).lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| parse_err(1, e.to_string()))?
        }
        None => return Err(Error::Empty("manifest")),
    };
    if header.format != MANIFEST_FORMAT {
        return Err(parse_err(1, format!("unknown format {:?}", header.format)));
    }
    let mut entries = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        entries.push(e);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let index = DatasetIndex {
        root,
        dims: header.dims,
        entries,
    };
    validate(&index)?;
    Ok(index)
}

fn validate(index: &DatasetIndex) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for e in &index.entries {
        if !seen.insert(e.id.as_str()) {
            problems.push(format!("{}: duplicate id", e.id));
        }
        if e.label > 1 {
            problems.push(format!("{}: label {} not in {{0,1}}", e.id, e.label));
        }
        let mut lengths = Vec::new();
        for m in Modality::ALL {
            let p = index.root.join(e.path(m));
            match read_feature_header(&p) {
                Ok((t, d)) => {
                    if d != index.dims.get(m) {
                        problems.push(format!(
                            "{}: {m} dim {d} != manifest dim {} ({})",
                            e.id,
                            index.dims.get(m),
                            p.display()
                        ));
                    }
                    lengths.push(t);
                }
                Err(err) => problems.push(format!("{}: {err}", e.id)),
            }
        }
        if lengths.len() == 3 && lengths.iter().any(|&t| t != lengths[0]) {
            problems.push(format!("{}: modality lengths differ {lengths:?}", e.id));
        }
        if let Some(fl) = &e.frame_labels {
            let p = index.root.join(fl);
            match read_frame_labels(&p) {
                Ok(v) if lengths.len() == 3 && v.len() != lengths[0] => {
                    problems.push(format!(
                        "{}: {} frame labels for T={} ({})",
                        e.id,
                        v.len(),
                        lengths[0],
                        p.display()
                    ));
                }
                Ok(_) => {}
                Err(err) => problems.push(format!("{}: {err}", e.id)),
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Manifest(problems))
    }
}
