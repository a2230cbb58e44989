//! RTTM segments, 3-class frame labels, sliding-window inference and the
//! VAD / OSD metrics.
//!
//! Class of a frame = number of active speakers capped at 2. A frame is
//! represented by its centre instant `(t + 0.5) / rate`, and a segment
//! covers the half-open interval `[onset, onset + duration)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::signal::MultichannelSignal;

pub const LABEL_RATE: f64 = 100.0;
pub const N_CLASSES: usize = 3;
const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub file_id: String,
    pub onset: f64,
    pub duration: f64,
    pub speaker: String,
}

impl Segment {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn new(segments: Vec<Segment>) -> Self {
        SegmentSet { segments }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Latest segment end, or 0 for an empty set.
    pub fn end_time(&self) -> f64 {
        self.segments.iter().map(Segment::end).fold(0.0, f64::max)
    }

    /// File ids in order of first appearance.
    pub fn file_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for s in &self.segments {
            if !ids.contains(&s.file_id) {
                ids.push(s.file_id.clone());
            }
        }
        ids
    }

    pub fn for_file(&self, file_id: &str) -> SegmentSet {
        SegmentSet::new(self.segments.iter().filter(|s| s.file_id == file_id).cloned().collect())
    }
}

/// Parses SPEAKER lines; other record types and blank lines are skipped.
pub fn parse_rttm_str(text: &str) -> Result<SegmentSet> {
    let mut segments = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&"SPEAKER") {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        if fields.len() < 9 {
            return Err(perr(format!("expected 10 fields, got {}", fields.len())));
        }
        let num = |idx: usize, what: &str| -> Result<f64> {
            fields[idx]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| perr(format!("invalid {what} {:?}", fields[idx])))
        };
        let onset = num(3, "onset")?;
        let duration = num(4, "duration")?;
        if duration <= 0.0 {
            return Err(perr(format!("non-positive duration {duration}")));
        }
        segments.push(Segment {
            file_id: fields[1].to_string(),
            onset,
            duration,
            speaker: fields[7].to_string(),
        });
    }
    Ok(SegmentSet { segments })
}

pub fn parse_rttm(path: impl AsRef<Path>) -> Result<SegmentSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_rttm_str(&text)
}

/// One SPEAKER line per segment, times with three decimals.
pub fn rttm_string(set: &SegmentSet) -> String {
    let mut out = String::new();
    for s in &set.segments {
        let _ = writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            s.file_id, s.onset, s.duration, s.speaker
        );
    }
    out
}

pub fn write_rttm(set: &SegmentSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, rttm_string(set)).map_err(|e| Error::io(path, e))
}

/// Per-frame classes `{0, 1, 2}` with optional posteriors `T × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLabels {
    pub labels: Vec<u8>,
    pub rate: f64,
    pub posteriors: Option<Array2<f64>>,
}

impl FrameLabels {
    pub fn new(labels: Vec<u8>, rate: f64) -> Self {
        FrameLabels {
            labels,
            rate,
            posteriors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Class counts `[n0, n1, n2]`.
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// Number of label frames covering `duration_s`.
pub fn num_label_frames(duration_s: f64, rate: f64) -> usize {
    (duration_s * rate).round().max(0.0) as usize
}

/// Frame classes from speaker segments; segments past `duration_s` are clipped.
pub fn labels_from_segments(segs: &SegmentSet, duration_s: f64, rate: f64) -> FrameLabels {
    let n = num_label_frames(duration_s, rate);
    let mut counts = vec![0u32; n];
    // Speakers are counted once per instant even if their segments overlap.
    let mut by_speaker: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
    for s in &segs.segments {
        let active = by_speaker.entry(s.speaker.as_str()).or_insert_with(|| vec![false; n]);
        let first = ((s.onset * rate - 1.5).ceil().max(0.0)) as usize;
        // The tolerance keeps boundaries that land on a frame centre stable
        // under rounding of onset + duration.
        let (on, end) = (s.onset - TIME_EPS, s.end() - TIME_EPS);
        for (t, a) in active.iter_mut().enumerate().skip(first) {
            let centre = (t as f64 + 0.5) / rate;
            if centre >= end {
                break;
            }
            if centre >= on {
                *a = true;
            }
        }
    }
    for active in by_speaker.values() {
        for (c, &a) in counts.iter_mut().zip(active) {
            *c += a as u32;
        }
    }
    FrameLabels::new(counts.into_iter().map(|c| c.min(2) as u8).collect(), rate)
}

/// Segments that reproduce `labels` under [`labels_from_segments`]: speaker
/// `speech` on every frame of class ≥ 1 and `overlap` on every class-2 frame.
pub fn segments_from_labels(labels: &FrameLabels, file_id: &str) -> SegmentSet {
    let mut segments = Vec::new();
    let runs = |pred: &dyn Fn(u8) -> bool| -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (t, &l) in labels.labels.iter().enumerate() {
            match (pred(l), start) {
                (true, None) => start = Some(t),
                (false, Some(a)) => {
                    out.push((a, t));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(a) = start {
            out.push((a, labels.labels.len()));
        }
        out
    };
    for (speaker, pred) in [
        ("speech", &(|l: u8| l >= 1) as &dyn Fn(u8) -> bool),
        ("overlap", &(|l: u8| l == 2) as &dyn Fn(u8) -> bool),
    ] {
        for (a, b) in runs(pred) {
            segments.push(Segment {
                file_id: file_id.to_string(),
                onset: a as f64 / labels.rate,
                duration: (b - a) as f64 / labels.rate,
                speaker: speaker.to_string(),
            });
        }
    }
    segments.sort_by(|x, y| x.onset.total_cmp(&y.onset).then(x.speaker.cmp(&y.speaker)));
    SegmentSet { segments }
}

/// Argmax per row, ties going to the lower class.
pub fn argmax_rows(p: &Array2<f64>) -> Vec<u8> {
    p.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for k in 1..r.len() {
                if r[k] > r[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

/// Frame timing of a model's output rows: row `i` is centred at
/// `i·hop_s + win_s/2` seconds from the start of its window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameTiming {
    pub hop_s: f64,
    pub win_s: f64,
}

impl FrameTiming {
    /// Label frame (relative to the window start) for model row `i`.
    pub fn label_index(&self, i: usize, rate: f64) -> usize {
        ((i as f64 * self.hop_s + self.win_s / 2.0) * rate + 1e-9).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingConfig {
    pub win_s: f64,
    pub hop_s: f64,
    pub label_rate: f64,
}

impl Default for SlidingConfig {
    fn default() -> Self {
        SlidingConfig {
            win_s: 2.0,
            hop_s: 0.5,
            label_rate: LABEL_RATE,
        }
    }
}

/// Runs `posteriors_of` on windows of `signal` and averages the posteriors of
/// overlapping windows per label frame. Windows start every `hop_s`, with an
/// extra window aligned to the end when the grid does not reach it; a signal
/// shorter than one window is processed whole. Frames no window covers take
/// the posteriors of the nearest covered frame.
pub fn sliding_infer<F>(
    signal: &MultichannelSignal,
    cfg: &SlidingConfig,
    timing: FrameTiming,
    mut posteriors_of: F,
) -> Result<FrameLabels>
where
    F: FnMut(&MultichannelSignal) -> Result<Array2<f64>>,
{
    ensure!(cfg.win_s > 0.0 && cfg.hop_s > 0.0 && cfg.label_rate > 0.0, Argument, "invalid sliding window settings");
    let rate = signal.sample_rate() as f64;
    let n = signal.num_samples();
    let win = ((cfg.win_s * rate).round() as usize).min(n);
    let hop = ((cfg.hop_s * rate).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|s| s + win <= n).collect();
    if starts.last().map_or(true, |&s| s + win < n) {
        starts.push(n - win);
    }
    let n_labels = num_label_frames(signal.duration_s(), cfg.label_rate);
    let mut acc = Array2::<f64>::zeros((n_labels, N_CLASSES));
    let mut count = vec![0usize; n_labels];
    for &start in &starts {
        let samples = signal.samples().slice(s![.., start..start + win]).to_owned();
        let window = MultichannelSignal::with_channel_ids(samples, signal.sample_rate(), signal.channel_ids().to_vec())?;
        let p = posteriors_of(&window)?;
        ensure!(p.ncols() == N_CLASSES, Argument, "posteriors must have {N_CLASSES} columns");
        let offset = (start as f64 / rate * cfg.label_rate).round() as usize;
        for (i, row) in p.rows().into_iter().enumerate() {
            let j = offset + timing.label_index(i, cfg.label_rate);
            if j < n_labels {
                acc.row_mut(j).scaled_add(1.0, &row);
                count[j] += 1;
            }
        }
    }
    let covered: Vec<usize> = (0..n_labels).filter(|&j| count[j] > 0).collect();
    ensure!(!covered.is_empty() || n_labels == 0, Range, "signal too short to produce any frame");
    let mut post = Array2::zeros((n_labels, N_CLASSES));
    for j in 0..n_labels {
        let src = if count[j] > 0 {
            j
        } else {
            // Nearest covered frame, the earlier one on ties.
            let pos = covered.partition_point(|&c| c < j);
            match (pos.checked_sub(1).map(|p| covered[p]), covered.get(pos)) {
                (Some(a), Some(&b)) => {
                    if j - a <= b - j {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(&b)) => b,
                (None, None) => unreachable!(),
            }
        };
        let row = acc.row(src).mapv(|v| v / count[src] as f64);
        post.row_mut(j).assign(&row);
    }
    Ok(FrameLabels {
        labels: argmax_rows(&post),
        rate: cfg.label_rate,
        posteriors: Some(post),
    })
}

/// False alarm, miss and segmentation error rates in percent of reference
/// speech frames.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VadMetrics {
    pub fa: f64,
    pub miss: f64,
    pub ser: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OsdMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn same_length(r: &FrameLabels, h: &FrameLabels) -> Result<()> {
    ensure!(r.len() == h.len(), Argument, "reference has {} frames, hypothesis {}", r.len(), h.len());
    ensure!((r.rate - h.rate).abs() < 1e-9, Argument, "label rates differ: {} vs {}", r.rate, h.rate);
    Ok(())
}

pub fn vad_metrics(reference: &FrameLabels, hyp: &FrameLabels) -> Result<VadMetrics> {
    same_length(reference, hyp)?;
    let (mut speech, mut fa, mut miss) = (0usize, 0usize, 0usize);
    for (&r, &h) in reference.labels.iter().zip(&hyp.labels) {
        match (r >= 1, h >= 1) {
            (true, false) => {
                speech += 1;
                miss += 1
            }
            (true, true) => speech += 1,
            (false, true) => fa += 1,
            (false, false) => {}
        }
    }
    if speech == 0 {
        return Err(Error::UndefinedMetric("reference contains no speech".into()));
    }
    let fa = 100.0 * fa as f64 / speech as f64;
    let miss = 100.0 * miss as f64 / speech as f64;
    Ok(VadMetrics { fa, miss, ser: fa + miss })
}

pub fn osd_metrics(reference: &FrameLabels, hyp: &FrameLabels) -> Result<OsdMetrics> {
    same_length(reference, hyp)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&r, &h) in reference.labels.iter().zip(&hyp.labels) {
        match (r == 2, h == 2) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Ok(OsdMetrics {
        precision,
        recall,
        f1,
        degenerate,
    })
}

/// Scores of a hypothesis against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub frames: usize,
    /// Absent when the reference has no speech.
    pub vad: Option<VadMetrics>,
    pub osd: OsdMetrics,
}

pub fn score_labels(reference: &FrameLabels, hyp: &FrameLabels) -> Result<ScoreReport> {
    let vad = match vad_metrics(reference, hyp) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(ScoreReport {
        frames: reference.len(),
        vad,
        osd: osd_metrics(reference, hyp)?,
    })
}

/// Scores every file appearing in either set; each file spans the latest
/// segment end of both sets, or `duration_s` when given, and frames of all
/// files are pooled.
pub fn score_segments(reference: &SegmentSet, hyp: &SegmentSet, duration_s: Option<f64>, rate: f64) -> Result<ScoreReport> {
    let mut ids = reference.file_ids();
    for id in hyp.file_ids() {
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    let (mut r_all, mut h_all) = (Vec::new(), Vec::new());
    for id in &ids {
        let (r, h) = (reference.for_file(id), hyp.for_file(id));
        let dur = duration_s.unwrap_or_else(|| r.end_time().max(h.end_time()));
        r_all.extend(labels_from_segments(&r, dur, rate).labels);
        h_all.extend(labels_from_segments(&h, dur, rate).labels);
    }
    score_labels(&FrameLabels::new(r_all, rate), &FrameLabels::new(h_all, rate))
}

/// Plain-text table with one row per labelled report.
pub fn metrics_table(rows: &[(String, ScoreReport)]) -> String {
    let mut s = format!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "setting", "FA", "Miss", "SER", "P", "R", "F1"
    );
    for (name, r) in rows {
        let v = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8} {:>8.2} {:>8.2} {:>8.2}",
            name,
            v(r.vad.map(|m| m.fa)),
            v(r.vad.map(|m| m.miss)),
            v(r.vad.map(|m| m.ser)),
            r.osd.precision,
            r.osd.recall,
            r.osd.f1
        );
    }
    s
}
