//! Frame-level average precision, inference over a test split and trace export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Bag, Batch};
use crate::error::{Error, Result};
use crate::model::{infer_batch, Model, ScoreSet};

pub const SUMMARY_FILE: &str = "summary.jsonl";
pub const TRACE_HEADER: &str = "time,s_A,s_F,s_R,s_RAF,label";

/// Non-interpolated AP: the mean over positives of the precision at each
/// positive's rank. Ranking is by descending score; equal scores keep
/// their input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "average_precision",
            expected: vec![scores.len()],
            got: vec![labels.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::invalid("average_precision", "labels must be 0 or 1"));
    }
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return Err(Error::invalid("average_precision", "no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Full-length inference on one bag.
pub fn infer(model: &Model, bag: &Bag) -> Result<ScoreSet> {
    Ok(infer_batch(model, &Batch::single(bag))?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagTrace {
    pub id: String,
    pub label: u8,
    pub frame_labels: Vec<u8>,
    pub scores: ScoreSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap_fused: f64,
    pub ap_rgb: f64,
    pub ap_audio: f64,
    pub ap_flow: f64,
    pub bags: usize,
    pub frames: usize,
}

impl EvalSummary {
    pub fn best_single(&self) -> f64 {
        self.ap_rgb.max(self.ap_audio).max(self.ap_flow)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub traces: Vec<BagTrace>,
}

/// Runs inference on every bag and computes AP over the concatenation of
/// all their frames.
pub fn evaluate(model: &Model, bags: &[Bag]) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut traces = Vec::with_capacity(bags.len());
    for bag in bags {
        let frame_labels = bag
            .frame_labels
            .clone()
            .ok_or_else(|| Error::invalid("evaluate", format!("bag {} has no frame labels", bag.id)))?;
        traces.push(BagTrace {
            id: bag.id.clone(),
            label: bag.label,
            frame_labels,
            scores: infer(model, bag)?,
        });
    }
    let labels: Vec<u8> = traces.iter().flat_map(|t| t.frame_labels.iter().copied()).collect();
    let ap = |pick: fn(&ScoreSet) -> &Vec<f64>| -> Result<f64> {
        let s: Vec<f64> = traces.iter().flat_map(|t| pick(&t.scores).iter().copied()).collect();
        average_precision(&s, &labels)
    };
    let summary = EvalSummary {
        ap_fused: ap(|s| &s.fused)?,
        ap_rgb: ap(|s| &s.rgb)?,
        ap_audio: ap(|s| &s.audio)?,
        ap_flow: ap(|s| &s.flow)?,
        bags: traces.len(),
        frames: labels.len(),
    };
    Ok(EvalReport { summary, traces })
}

fn trace_csv(t: &BagTrace) -> String {
    let s = &t.scores;
    let mut out = String::with_capacity(64 * s.fused.len() + 32);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for i in 0..s.fused.len() {
        out.push_str(&format!(
            "{i},{:.12},{:.12},{:.12},{:.12},{}\n",
            s.audio[i], s.flow[i], s.rgb[i], s.fused[i], t.frame_labels[i]
        ));
    }
    out
}

/// Writes `<id>.csv` per bag and a one-line `summary.jsonl` into `dir`.
/// Returns the written paths, summary last.
pub fn export_traces(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    if report.traces.is_empty() {
        return Err(Error::Empty("trace report"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(report.traces.len() + 1);
    for t in &report.traces {
        let path = dir.join(format!("{}.csv", t.id));
        fs::write(&path, trace_csv(t)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    let path = dir.join(SUMMARY_FILE);
    let mut line = serde_json::to_string(&report.summary).expect("summary serializes");
    line.push('\n');
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

/// Parses a trace file back into `(s_A, s_F, s_R, s_RAF, label)` columns.
pub fn read_trace(path: &Path) -> Result<(ScoreSet, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(bad("missing header".into()));
    }
    let mut s = ScoreSet {
        fused: Vec::new(),
        rgb: Vec::new(),
        audio: Vec::new(),
        flow: Vec::new(),
    };
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad(format!("line {}: expected 6 columns", n + 2)));
        }
        let f = |c: &str| c.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", n + 2)));
        s.audio.push(f(cols[1])?);
        s.flow.push(f(cols[2])?);
        s.rgb.push(f(cols[3])?);
        s.fused.push(f(cols[4])?);
        labels.push(cols[5].parse().map_err(|e| bad(format!("line {}: {e}", n + 2)))?);
    }
    Ok((s, labels))
}
