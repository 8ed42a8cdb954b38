//! On-disk data model and deterministic synthetic corpora.
//!
//! A corpus is a JSON Lines file: one header object carrying the label space
//! and format version, then one object per video. Frames are nested arrays of
//! numbers in full precision (shortest round-trip decimal), so manifests are
//! diffable and parseable from any language.
//!
//! Synthetic generation is a pure function of `(spec, seed)`: every video
//! derives its own stream as `mix(seed, stable_hash(id))`, so parallel
//! generation is byte-identical to serial.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::rng::{mix, stable_hash, SplitMix64};
use crate::sampling;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed JSON: {message}")]
    Malformed { line: usize, message: String },
    #[error("record '{id}' (line {line}): label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        id: String,
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error(
        "record '{id}' (line {line}): frame {frame}: expected {expected} values, found {found}"
    )]
    ShapeMismatch {
        id: String,
        line: usize,
        frame: usize,
        expected: usize,
        found: usize,
    },
    #[error("record '{id}' (line {line}): duplicate id")]
    DuplicateId { id: String, line: usize },
    #[error("record '{id}' (line {line}): {message}")]
    InvalidRecord {
        id: String,
        line: usize,
        message: String,
    },
    #[error("invalid label space: {0}")]
    InvalidLabelSpace(String),
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// The class vocabulary: at least two distinct names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self, CorpusError> {
        let space = Self { names };
        space.validate()?;
        Ok(space)
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.names.len() < 2 {
            return Err(CorpusError::InvalidLabelSpace(format!(
                "need at least 2 classes, got {}",
                self.names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &self.names {
            if !seen.insert(name) {
                return Err(CorpusError::InvalidLabelSpace(format!(
                    "duplicate class name '{name}'"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Frame payload of a video: a pixel grid per frame, or a per-frame feature
/// vector. Grid frames are stored flattened channel-major: index
/// `c*(h*w) + y*w + x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FrameData {
    Grid {
        channels: usize,
        height: usize,
        width: usize,
        frames: Vec<Vec<f64>>,
    },
    Features {
        dim: usize,
        frames: Vec<Vec<f64>>,
    },
}

impl FrameData {
    pub fn num_frames(&self) -> usize {
        match self {
            FrameData::Grid { frames, .. } | FrameData::Features { frames, .. } => frames.len(),
        }
    }

    /// Flattened length every frame must have.
    pub fn frame_dim(&self) -> usize {
        match self {
            FrameData::Grid {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
            FrameData::Features { dim, .. } => *dim,
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        match self {
            FrameData::Grid { frames, .. } | FrameData::Features { frames, .. } => &frames[t],
        }
    }

    pub fn grid_shape(&self) -> Option<(usize, usize, usize)> {
        match self {
            FrameData::Grid {
                channels,
                height,
                width,
                ..
            } => Some((*channels, *height, *width)),
            FrameData::Features { .. } => None,
        }
    }
}

/// One labeled (or unlabeled test) video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(flatten)]
    pub data: FrameData,
    /// Frames per second; gives frame indices a time axis for untrimmed eval.
    pub fps: f64,
    pub trimmed: bool,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.data.num_frames()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.data.frame(t)
    }
}

enum RecordIssue {
    LabelOutOfRange { label: usize, num_classes: usize },
    ShapeMismatch { frame: usize, expected: usize, found: usize },
    Invalid(String),
}

fn validate_record(record: &VideoRecord, labels: &LabelSpace) -> Result<(), RecordIssue> {
    if let Some(label) = record.label {
        if label >= labels.num_classes() {
            return Err(RecordIssue::LabelOutOfRange {
                label,
                num_classes: labels.num_classes(),
            });
        }
    }
    if record.num_frames() == 0 {
        return Err(RecordIssue::Invalid("video has no frames".into()));
    }
    if !(record.fps > 0.0) {
        return Err(RecordIssue::Invalid(format!("fps must be positive, got {}", record.fps)));
    }
    let expected = record.data.frame_dim();
    if expected == 0 {
        return Err(RecordIssue::Invalid("frame dimension is zero".into()));
    }
    let is_grid = record.data.grid_shape().is_some();
    for t in 0..record.num_frames() {
        let frame = record.frame(t);
        if frame.len() != expected {
            return Err(RecordIssue::ShapeMismatch {
                frame: t,
                expected,
                found: frame.len(),
            });
        }
        for &v in frame {
            if !v.is_finite() {
                return Err(RecordIssue::Invalid(format!("frame {t} has non-finite value")));
            }
            if is_grid && !(0.0..=255.0).contains(&v) {
                return Err(RecordIssue::Invalid(format!(
                    "frame {t} has pixel value {v} outside [0, 255]"
                )));
            }
        }
    }
    Ok(())
}

fn issue_to_error(issue: RecordIssue, id: &str, line: usize) -> CorpusError {
    match issue {
        RecordIssue::LabelOutOfRange { label, num_classes } => CorpusError::LabelOutOfRange {
            id: id.to_string(),
            line,
            label,
            num_classes,
        },
        RecordIssue::ShapeMismatch {
            frame,
            expected,
            found,
        } => CorpusError::ShapeMismatch {
            id: id.to_string(),
            line,
            frame,
            expected,
            found,
        },
        RecordIssue::Invalid(message) => CorpusError::InvalidRecord {
            id: id.to_string(),
            line,
            message,
        },
    }
}

/// A validated collection of records sharing one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    label_space: LabelSpace,
    records: Vec<VideoRecord>,
    split: Split,
    format_version: u32,
}

impl CorpusManifest {
    pub fn new(
        label_space: LabelSpace,
        records: Vec<VideoRecord>,
        split: Split,
    ) -> Result<Self, CorpusError> {
        let mut ids = HashSet::new();
        for (i, record) in records.iter().enumerate() {
            // Line the record would occupy on disk (header is line 1).
            let line = i + 2;
            if !ids.insert(record.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    id: record.id.clone(),
                    line,
                });
            }
            validate_record(record, &label_space)
                .map_err(|issue| issue_to_error(issue, &record.id, line))?;
        }
        Ok(Self {
            label_space,
            records,
            split,
            format_version: FORMAT_VERSION,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn records(&self) -> &[VideoRecord] {
        &self.records
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn format_version(&self) -> u32 {
        self.format_version
    }

    pub fn record_by_id(&self, id: &str) -> Option<&VideoRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderLine {
    format_version: u32,
    split: Split,
    label_space: LabelSpace,
}

pub fn save_manifest(manifest: &CorpusManifest, path: &Path) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        format_version: manifest.format_version,
        split: manifest.split,
        label_space: manifest.label_space.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(io_from_json)?;
    out.write_all(b"\n")?;
    for record in &manifest.records {
        serde_json::to_writer(&mut out, record).map_err(io_from_json)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();

    let header_text = lines.next().ok_or(CorpusError::Malformed {
        line: 1,
        message: "empty file, expected header object".into(),
    })??;
    let header: HeaderLine =
        serde_json::from_str(&header_text).map_err(|e| CorpusError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
    header.label_space.validate()?;

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record: VideoRecord =
            serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if !ids.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: record.id,
                line: line_no,
            });
        }
        validate_record(&record, &header.label_space)
            .map_err(|issue| issue_to_error(issue, &record.id, line_no))?;
        records.push(record);
    }

    Ok(CorpusManifest {
        label_space: header.label_space,
        records,
        split: header.split,
        format_version: header.format_version,
    })
}

fn io_from_json(e: serde_json::Error) -> CorpusError {
    CorpusError::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

/// Ground-truth action interval of an untrimmed video, `[start, end)` in
/// frame indices. Diagnostics only: inference never reads these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionInterval {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

/// Sidecar path for a manifest: `<manifest>.intervals.jsonl`.
pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
    let mut name = manifest_path.as_os_str().to_os_string();
    name.push(".intervals.jsonl");
    PathBuf::from(name)
}

pub fn save_intervals(intervals: &[ActionInterval], path: &Path) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    for interval in intervals {
        serde_json::to_writer(&mut out, interval).map_err(io_from_json)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_intervals(path: &Path) -> Result<Vec<ActionInterval>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut intervals = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        intervals.push(
            serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(intervals)
}

/// Frame layout of generated videos.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Grid {
        channels: usize,
        height: usize,
        width: usize,
    },
    Features {
        dim: usize,
    },
}

impl SynthKind {
    /// Default pixel layout for grid-path tests.
    pub const DEFAULT_GRID: SynthKind = SynthKind::Grid {
        channels: 3,
        height: 16,
        width: 16,
    };

    pub fn frame_dim(&self) -> usize {
        match self {
            SynthKind::Grid {
                channels,
                height,
                width,
            } => channels * height * width,
            SynthKind::Features { dim } => *dim,
        }
    }
}

/// Recipe for a trimmed synthetic corpus: each video's timeline is divided
/// into `phases` equal parts and frames in phase `p` of a class-`c` video are
/// `signals[c][p]` plus gaussian noise.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub label_names: Vec<String>,
    pub phases: usize,
    /// Per-(class, phase) signal vectors, `num_classes x phases x frame_dim`.
    pub signals: Vec<Vec<Vec<f64>>>,
    pub sigma: f64,
    /// Inclusive range of video lengths in frames.
    pub length_range: (usize, usize),
    pub kind: SynthKind,
    pub videos_per_class: usize,
    pub split: Split,
    pub id_prefix: String,
    pub fps: f64,
}

impl SynthSpec {
    fn validate(&self) -> Result<LabelSpace, CorpusError> {
        let labels = LabelSpace::new(self.label_names.clone())
            .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
        if self.phases < 1 {
            return Err(CorpusError::InvalidSpec("phases must be >= 1".into()));
        }
        if self.sigma < 0.0 {
            return Err(CorpusError::InvalidSpec(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        let (lo, hi) = self.length_range;
        if lo < 1 || lo > hi {
            return Err(CorpusError::InvalidSpec(format!(
                "empty length range [{lo}, {hi}]"
            )));
        }
        if self.videos_per_class < 1 {
            return Err(CorpusError::InvalidSpec("videos_per_class must be >= 1".into()));
        }
        if !(self.fps > 0.0) {
            return Err(CorpusError::InvalidSpec("fps must be positive".into()));
        }
        let dim = self.kind.frame_dim();
        if self.signals.len() != labels.num_classes() {
            return Err(CorpusError::InvalidSpec(format!(
                "signals: expected {} classes, got {}",
                labels.num_classes(),
                self.signals.len()
            )));
        }
        for (c, per_class) in self.signals.iter().enumerate() {
            if per_class.len() != self.phases {
                return Err(CorpusError::InvalidSpec(format!(
                    "signals[{c}]: expected {} phases, got {}",
                    self.phases,
                    per_class.len()
                )));
            }
            for (p, signal) in per_class.iter().enumerate() {
                if signal.len() != dim {
                    return Err(CorpusError::InvalidSpec(format!(
                        "signals[{c}][{p}]: expected dim {dim}, got {}",
                        signal.len()
                    )));
                }
            }
        }
        Ok(labels)
    }
}

/// Recipe for an untrimmed-style corpus: one action interval per video
/// carrying the trimmed-style phase signals, background everywhere else.
#[derive(Debug, Clone)]
pub struct UntrimmedSpec {
    pub base: SynthSpec,
    /// Pool of background frame vectors, drawn uniformly per background frame.
    pub background: Vec<Vec<f64>>,
    /// Action interval length as a fraction of the video, in `(0, 1]`.
    pub fraction_range: (f64, f64),
}

impl UntrimmedSpec {
    fn validate(&self) -> Result<LabelSpace, CorpusError> {
        let labels = self.base.validate()?;
        let (lo, hi) = self.fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CorpusError::InvalidSpec(format!(
                "fraction range ({lo}, {hi}) outside (0, 1]"
            )));
        }
        if self.background.is_empty() {
            return Err(CorpusError::InvalidSpec("background pool is empty".into()));
        }
        let dim = self.base.kind.frame_dim();
        for (i, frame) in self.background.iter().enumerate() {
            if frame.len() != dim {
                return Err(CorpusError::InvalidSpec(format!(
                    "background[{i}]: expected dim {dim}, got {}",
                    frame.len()
                )));
            }
        }
        Ok(labels)
    }
}

fn synth_frame(signal: &[f64], sigma: f64, clamp_pixels: bool, rng: &mut SplitMix64) -> Vec<f64> {
    signal
        .iter()
        .map(|&s| {
            let v = s + sigma * rng.next_gaussian();
            if clamp_pixels {
                v.clamp(0.0, 255.0)
            } else {
                v
            }
        })
        .collect()
}

fn wrap_frames(kind: SynthKind, frames: Vec<Vec<f64>>) -> FrameData {
    match kind {
        SynthKind::Grid {
            channels,
            height,
            width,
        } => FrameData::Grid {
            channels,
            height,
            width,
            frames,
        },
        SynthKind::Features { dim } => FrameData::Features { dim, frames },
    }
}

/// Phase index for frame `t` under the equal division used everywhere.
fn phase_of(boundaries: &[(usize, usize)], t: usize) -> usize {
    boundaries
        .iter()
        .position(|&(start, end)| t >= start && t < end)
        .expect("frame index inside [0, N)")
}

pub fn generate_trimmed_corpus(
    spec: &SynthSpec,
    seed: u64,
) -> Result<CorpusManifest, CorpusError> {
    let labels = spec.validate()?;
    let num_classes = labels.num_classes();
    let clamp = matches!(spec.kind, SynthKind::Grid { .. });
    let total = spec.videos_per_class * num_classes;

    let mut records = Vec::with_capacity(total);
    for idx in 0..total {
        let label = idx % num_classes;
        let id = format!("{}-{:04}", spec.id_prefix, idx);
        let mut rng = SplitMix64::new(mix(seed, stable_hash(&id)));
        let num_frames = rng.uniform_usize(spec.length_range.0, spec.length_range.1);
        let plan = sampling::plan_segments(num_frames, spec.phases)
            .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;
        let frames: Vec<Vec<f64>> = (0..num_frames)
            .map(|t| {
                let p = phase_of(plan.boundaries(), t);
                synth_frame(&spec.signals[label][p], spec.sigma, clamp, &mut rng)
            })
            .collect();
        records.push(VideoRecord {
            id,
            label: Some(label),
            data: wrap_frames(spec.kind, frames),
            fps: spec.fps,
            trimmed: true,
        });
    }
    CorpusManifest::new(labels, records, spec.split)
}

pub fn generate_untrimmed_corpus(
    spec: &UntrimmedSpec,
    seed: u64,
) -> Result<(CorpusManifest, Vec<ActionInterval>), CorpusError> {
    let labels = spec.validate()?;
    let num_classes = labels.num_classes();
    let base = &spec.base;
    let clamp = matches!(base.kind, SynthKind::Grid { .. });
    let total = base.videos_per_class * num_classes;

    let mut records = Vec::with_capacity(total);
    let mut intervals = Vec::with_capacity(total);
    for idx in 0..total {
        let label = idx % num_classes;
        let id = format!("{}-{:04}", base.id_prefix, idx);
        let mut rng = SplitMix64::new(mix(seed, stable_hash(&id)));
        let num_frames = rng.uniform_usize(base.length_range.0, base.length_range.1);
        let (f_lo, f_hi) = spec.fraction_range;
        let fraction = f_lo + rng.next_f64() * (f_hi - f_lo);
        let len = ((fraction * num_frames as f64).round() as usize).clamp(1, num_frames);
        let start = rng.uniform_usize(0, num_frames - len);
        let plan = sampling::plan_segments(len, base.phases)
            .map_err(|e| CorpusError::InvalidSpec(e.to_string()))?;

        let frames: Vec<Vec<f64>> = (0..num_frames)
            .map(|t| {
                if t >= start && t < start + len {
                    let p = phase_of(plan.boundaries(), t - start);
                    synth_frame(&base.signals[label][p], base.sigma, clamp, &mut rng)
                } else {
                    let b = rng.uniform_usize(0, spec.background.len() - 1);
                    synth_frame(&spec.background[b], base.sigma, clamp, &mut rng)
                }
            })
            .collect();
        records.push(VideoRecord {
            id: id.clone(),
            label: Some(label),
            data: wrap_frames(base.kind, frames),
            fps: base.fps,
            trimmed: false,
        });
        intervals.push(ActionInterval {
            id,
            start,
            end: start + len,
        });
    }
    let manifest = CorpusManifest::new(labels, records, base.split)?;
    Ok((manifest, intervals))
}

/// Signal vectors where classes share phase atoms in a cyclic pattern:
/// `signal[c][p] = atom[(c + p) % num_classes]`. A single frame therefore
/// identifies only a set of candidate classes; the full phase sequence is
/// needed to pin the class down.
pub fn phase_cycle_signals(
    num_classes: usize,
    phases: usize,
    dim: usize,
    offset: f64,
    scale: f64,
    rng: &mut SplitMix64,
) -> Vec<Vec<Vec<f64>>> {
    let atoms: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| offset + scale * rng.next_gaussian()).collect())
        .collect();
    (0..num_classes)
        .map(|c| (0..phases).map(|p| atoms[(c + p) % num_classes].clone()).collect())
        .collect()
}

/// Pool of gaussian background frames for untrimmed corpora.
pub fn gaussian_pool(
    count: usize,
    dim: usize,
    offset: f64,
    scale: f64,
    rng: &mut SplitMix64,
) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..dim).map(|_| offset + scale * rng.next_gaussian()).collect())
        .collect()
}
