//! Test-time protocols for trained models: equidistant-snippet prediction on
//! trimmed videos, sliding-window integration over multiple temporal scales
//! for untrimmed videos, score fusion across modalities, and the metrics
//! (top-1 accuracy, mean average precision) that score them.
//!
//! Everything here is deterministic: snippet positions come from the
//! equidistant grid, crops are the fixed center/corner set, and ranking ties
//! break by ascending video id. Window counts and starts use exact integer
//! arithmetic (`floor(M / (0.8 l))` as `10M / (8l)`, `floor(0.8 l j)` as
//! `8lj / 10`), because the float forms round the wrong way on exact
//! boundaries (`8.0 / 0.8` is 9.99.. in binary).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{self, AggregatorConfig, ConsensusError, SnippetScores};
use crate::corpus::{CorpusManifest, VideoRecord};
use crate::math::softmax;
use crate::sampling::{
    assemble_snippet_fixed, sample_test, ten_crop_params, AugmentParams, CropAnchor,
    SamplingError,
};
use crate::scorer::{forward_eval, ScorerError};
use crate::training::VideoModel;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid fusion weights: {0}")]
    BadFusion(String),
    #[error("model set mismatch: {0}")]
    ModelMismatch(String),
    #[error("video '{id}' spans less than one sampling tick")]
    ZeroSnippets { id: String },
    #[error("invalid scale set: {0}")]
    BadScales(String),
    #[error("video '{id}' produced a non-finite score")]
    NonFiniteScore { id: String },
    #[error("manifest has no labeled videos")]
    NoLabeledVideos,
    #[error("report is missing {0}")]
    BadReport(&'static str),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Softmax probabilities for reporting; predictions and rankings always use
/// the raw fused scores.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-modality fusion weights, parallel to the model list. Fused scores are
/// the weighted sum of modality logits (no normalization); only argmax and
/// ranking semantics are load-bearing downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub weights: Vec<f64>,
}

impl FusionSpec {
    pub fn uniform(num_modalities: usize) -> Self {
        FusionSpec {
            weights: vec![1.0; num_modalities],
        }
    }

    pub fn validate(&self, num_models: usize) -> Result<(), InferenceError> {
        if self.weights.len() != num_models {
            return Err(InferenceError::BadFusion(format!(
                "{} weights for {} models",
                self.weights.len(),
                num_models
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(InferenceError::BadFusion(
                "weights must be finite and non-negative".into(),
            ));
        }
        if self.weights.iter().all(|&w| w == 0.0) {
            return Err(InferenceError::BadFusion(
                "at least one weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// How the per-snippet score rows of one video fuse at test time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestConsensus {
    /// Plain mean over all snippet (and crop) logits; the standard protocol.
    Average,
    /// The model's own aggregator applied over the snippet rows. Linear
    /// weights are tied to the training segment count, so they require
    /// `num_snippets` equal to that count.
    Model,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Equidistant snippets per video.
    pub num_snippets: usize,
    /// Score 4 corner crops, the center crop, and their mirrors instead of
    /// the center crop alone. Applies to the pixel path only.
    pub ten_crop: bool,
    pub consensus: TestConsensus,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            num_snippets: 25,
            ten_crop: false,
            consensus: TestConsensus::Average,
        }
    }
}

/// Deterministic test transforms for one model on one video: the center crop
/// at the trained output size, the ten-crop set, or nothing for models that
/// consume frames (or features) as-is.
fn eval_transforms(
    model: &VideoModel,
    video: &VideoRecord,
    ten_crop: bool,
) -> Vec<Option<AugmentParams>> {
    match (&model.augment, video.data.grid_shape()) {
        (Some(augment), Some(_)) => {
            let (out_h, out_w) = augment.output;
            if ten_crop {
                ten_crop_params(out_h, out_w, (out_h, out_w))
                    .into_iter()
                    .map(Some)
                    .collect()
            } else {
                vec![Some(AugmentParams {
                    crop_h: out_h,
                    crop_w: out_w,
                    anchor: CropAnchor::Center,
                    flip: false,
                    output: (out_h, out_w),
                })]
            }
        }
        _ => vec![None],
    }
}

/// Eval-mode logits (and features) of one model at the given snippet starts,
/// with crop logits averaged per snippet.
fn snippet_rows(
    model: &VideoModel,
    video: &VideoRecord,
    starts: &[usize],
    ten_crop: bool,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), InferenceError> {
    let transforms = eval_transforms(model, video, ten_crop);
    let scale = 1.0 / transforms.len() as f64;
    let mut rows = Vec::with_capacity(starts.len());
    let mut feats = Vec::with_capacity(starts.len());
    for (index, &start) in starts.iter().enumerate() {
        let mut row = vec![0.0; model.num_classes()];
        let mut feat = vec![0.0; model.scorer.last_hidden_dim()];
        for transform in &transforms {
            let snippet =
                assemble_snippet_fixed(video, index, start, &model.modality, transform.as_ref())?;
            let out = forward_eval(&model.scorer, &snippet.data)?;
            for (r, l) in row.iter_mut().zip(&out.logits) {
                *r += l;
            }
            for (f, h) in feat.iter_mut().zip(&out.last_hidden) {
                *f += h;
            }
        }
        row.iter_mut().for_each(|r| *r *= scale);
        feat.iter_mut().for_each(|f| *f *= scale);
        rows.push(row);
        feats.push(feat);
    }
    Ok((rows, feats))
}

fn check_models(models: &[VideoModel], fusion: &FusionSpec) -> Result<usize, InferenceError> {
    fusion.validate(models.len())?;
    let first = models
        .first()
        .ok_or_else(|| InferenceError::ModelMismatch("no models given".into()))?;
    let classes = first.num_classes();
    if models.iter().any(|m| m.num_classes() != classes) {
        return Err(InferenceError::ModelMismatch(
            "models disagree on the number of classes".into(),
        ));
    }
    Ok(classes)
}

fn pool_rows(
    model: &VideoModel,
    rows: Vec<Vec<f64>>,
    feats: Vec<Vec<f64>>,
    consensus_mode: TestConsensus,
) -> Result<Vec<f64>, InferenceError> {
    match consensus_mode {
        TestConsensus::Average => {
            let scale = 1.0 / rows.len() as f64;
            let mut pooled = vec![0.0; rows[0].len()];
            for row in &rows {
                for (p, r) in pooled.iter_mut().zip(row) {
                    *p += r;
                }
            }
            pooled.iter_mut().for_each(|p| *p *= scale);
            Ok(pooled)
        }
        TestConsensus::Model => {
            let scores = SnippetScores::new(rows)?;
            let needs_features = matches!(model.aggregator, AggregatorConfig::Attention { .. });
            let out = consensus::forward(
                &scores,
                &model.aggregator,
                needs_features.then_some(feats.as_slice()),
            )?;
            Ok(out.g)
        }
    }
}

/// Video-level class scores for a trimmed video: equidistant snippets per
/// modality, eval-mode scoring (optionally over ten crops), per-modality
/// pooling, then weighted-sum fusion of the modality score vectors. Softmax
/// is never applied here; use [`probabilities`] for reporting.
pub fn predict_trimmed(
    models: &[VideoModel],
    fusion: &FusionSpec,
    video: &VideoRecord,
    opts: &PredictOptions,
) -> Result<Vec<f64>, InferenceError> {
    let classes = check_models(models, fusion)?;
    let mut fused = vec![0.0; classes];
    for (model, &weight) in models.iter().zip(&fusion.weights) {
        let starts = sample_test(video.num_frames(), opts.num_snippets)?;
        let (rows, feats) = snippet_rows(model, video, &starts, opts.ten_crop)?;
        let pooled = pool_rows(model, rows, feats, opts.consensus)?;
        for (f, p) in fused.iter_mut().zip(&pooled) {
            *f += weight * p;
        }
    }
    Ok(fused)
}

pub const DEFAULT_SCALES: [usize; 5] = [1, 2, 4, 8, 16];

/// One sliding window's pooled scores: elementwise max over the snippets it
/// covers. `start` and `len` are in sampling ticks (seconds at rate 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub start: usize,
    pub len: usize,
    pub scores: Vec<f64>,
}

/// Per-scale consensus: top-k average over that scale's window scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConsensus {
    pub scale: usize,
    pub num_windows: usize,
    pub topk: usize,
    pub scores: Vec<f64>,
    pub windows: Vec<WindowScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtwiOutput {
    /// Mean of the per-scale consensus vectors.
    pub fused: Vec<f64>,
    pub scales: Vec<ScaleConsensus>,
}

/// Number of windows at scale `l` over `m` snippets:
/// `floor(m / (0.8 l))`, clamped to at least one window.
pub fn window_count(m: usize, l: usize) -> usize {
    ((10 * m) / (8 * l)).max(1)
}

/// Start tick of window `j` at scale `l`: `floor(0.8 l j)`.
pub fn window_start(j: usize, l: usize) -> usize {
    (8 * l * j) / 10
}

/// Top-k size at scale `l`: `max(15, ceil(n/4))`, clamped to the window
/// count so the pool is always well-defined.
pub fn window_topk(num_windows: usize) -> usize {
    num_windows.min(15.max(num_windows.div_ceil(4)))
}

fn validate_scales(scales: &[usize]) -> Result<(), InferenceError> {
    if scales.is_empty() {
        return Err(InferenceError::BadScales("empty scale set".into()));
    }
    if scales.contains(&0) {
        return Err(InferenceError::BadScales("scales must be positive".into()));
    }
    for (i, l) in scales.iter().enumerate() {
        if scales[..i].contains(l) {
            return Err(InferenceError::BadScales(format!("duplicate scale {l}")));
        }
    }
    Ok(())
}

/// Frame index of each sampling tick: `sample_rate` snippets per second of
/// video time, so tick `m` reads the frame at `m * fps / rate`.
fn tick_starts(video: &VideoRecord, sample_rate: f64) -> Result<Vec<usize>, InferenceError> {
    let frames = video.num_frames() as f64;
    let per_tick = video.fps / sample_rate;
    let count = (frames / per_tick).floor() as usize;
    if count == 0 {
        return Err(InferenceError::ZeroSnippets {
            id: video.id.clone(),
        });
    }
    Ok((0..count)
        .map(|m| ((m as f64 * per_tick) as usize).min(video.num_frames() - 1))
        .collect())
}

/// Snippet scores on the fixed sampling grid, fused across modalities.
fn fused_tick_rows(
    models: &[VideoModel],
    fusion: &FusionSpec,
    video: &VideoRecord,
    sample_rate: f64,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    let classes = check_models(models, fusion)?;
    let starts = tick_starts(video, sample_rate)?;
    let mut fused = vec![vec![0.0; classes]; starts.len()];
    for (model, &weight) in models.iter().zip(&fusion.weights) {
        let (rows, _) = snippet_rows(model, video, &starts, false)?;
        for (acc, row) in fused.iter_mut().zip(&rows) {
            for (a, r) in acc.iter_mut().zip(row) {
                *a += weight * r;
            }
        }
    }
    Ok(fused)
}

/// Multi-scale temporal window integration over an untrimmed video. Snippets
/// are scored on a fixed-rate grid and fused across modalities; each scale
/// slides windows of `l` ticks with stride `0.8 l`, pools each window by
/// elementwise max, pools windows per class by top-k average, and the final
/// vector averages the per-scale results.
pub fn mtwi(
    models: &[VideoModel],
    fusion: &FusionSpec,
    video: &VideoRecord,
    scales: &[usize],
    sample_rate: f64,
) -> Result<MtwiOutput, InferenceError> {
    validate_scales(scales)?;
    let rows = fused_tick_rows(models, fusion, video, sample_rate)?;
    let m = rows.len();
    let classes = rows[0].len();

    let mut per_scale = Vec::with_capacity(scales.len());
    for &l in scales {
        let num_windows = window_count(m, l);
        let topk = window_topk(num_windows);
        let mut windows = Vec::with_capacity(num_windows);
        for j in 0..num_windows {
            let start = window_start(j, l).min(m - 1);
            let end = (start + l).min(m);
            let mut scores = rows[start].clone();
            for row in &rows[start + 1..end] {
                for (s, r) in scores.iter_mut().zip(row) {
                    if *r > *s {
                        *s = *r;
                    }
                }
            }
            windows.push(WindowScore {
                start,
                len: l,
                scores,
            });
        }
        let pooled = consensus::forward(
            &SnippetScores::new(windows.iter().map(|w| w.scores.clone()).collect())?,
            &AggregatorConfig::TopK { k: topk },
            None,
        )?;
        per_scale.push(ScaleConsensus {
            scale: l,
            num_windows,
            topk,
            scores: pooled.g,
            windows,
        });
    }

    let scale_weight = 1.0 / per_scale.len() as f64;
    let mut fused = vec![0.0; classes];
    for sc in &per_scale {
        for (f, s) in fused.iter_mut().zip(&sc.scores) {
            *f += scale_weight * s;
        }
    }
    Ok(MtwiOutput {
        fused,
        scales: per_scale,
    })
}

/// Baseline for untrimmed videos: plain mean of the fused snippet scores over
/// the whole timeline, no windowing.
pub fn predict_untrimmed_average(
    models: &[VideoModel],
    fusion: &FusionSpec,
    video: &VideoRecord,
    sample_rate: f64,
) -> Result<Vec<f64>, InferenceError> {
    let rows = fused_tick_rows(models, fusion, video, sample_rate)?;
    let scale = 1.0 / rows.len() as f64;
    let mut mean = vec![0.0; rows[0].len()];
    for row in &rows {
        for (m, r) in mean.iter_mut().zip(row) {
            *m += r;
        }
    }
    mean.iter_mut().for_each(|m| *m *= scale);
    Ok(mean)
}

/// Non-interpolated average precision of one class ranking. Videos are
/// ranked by descending score, ties broken by ascending id; AP sums
/// precision at each positive's rank over the number of positives. `None`
/// when the class has no positives.
pub fn average_precision(
    scores: &[f64],
    positives: &[bool],
    ids: &[String],
) -> Option<f64> {
    assert_eq!(scores.len(), positives.len());
    assert_eq!(scores.len(), ids.len());
    let total: usize = positives.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank0, &index) in order.iter().enumerate() {
        if positives[index] {
            hits += 1;
            ap += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(ap / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Top-1 accuracy over trimmed clips.
    Trimmed,
    /// Per-class AP and mAP over untrimmed videos.
    Untrimmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub predictions: Vec<Prediction>,
    /// Top-1 accuracy; present for the trimmed protocol.
    pub accuracy: Option<f64>,
    /// AP per class index; `None` entries mark classes with no positives.
    pub per_class_ap: Option<Vec<Option<f64>>>,
    /// Mean AP over classes with at least one positive.
    pub map: Option<f64>,
    /// Resolved run configuration, echoed by the caller.
    pub config: String,
}

/// Scores every labeled video with `predictor` and computes the protocol's
/// metric. Predictions run in slot order regardless of `threads`, so reports
/// are identical for any thread count. Unlabeled videos are skipped.
pub fn evaluate<P>(
    manifest: &CorpusManifest,
    predictor: P,
    protocol: Protocol,
    threads: usize,
) -> Result<EvalReport, InferenceError>
where
    P: Fn(&VideoRecord) -> Result<Vec<f64>, InferenceError> + Sync,
{
    let labeled: Vec<&VideoRecord> = manifest
        .records()
        .iter()
        .filter(|r| r.label.is_some())
        .collect();
    if labeled.is_empty() {
        return Err(InferenceError::NoLabeledVideos);
    }

    let mut slots: Vec<Option<Result<Vec<f64>, InferenceError>>> =
        (0..labeled.len()).map(|_| None).collect();
    if threads <= 1 || labeled.len() <= 1 {
        for (slot, video) in slots.iter_mut().zip(&labeled) {
            *slot = Some(predictor(video));
        }
    } else {
        let chunk = labeled.len().div_ceil(threads);
        let predictor = &predictor;
        std::thread::scope(|scope| {
            for (slot_chunk, video_chunk) in slots.chunks_mut(chunk).zip(labeled.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, video) in slot_chunk.iter_mut().zip(video_chunk) {
                        *slot = Some(predictor(video));
                    }
                });
            }
        });
    }

    let mut predictions = Vec::with_capacity(labeled.len());
    for (slot, video) in slots.into_iter().zip(&labeled) {
        let scores = slot.expect("prediction ran")?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(InferenceError::NonFiniteScore {
                id: video.id.clone(),
            });
        }
        predictions.push(Prediction {
            id: video.id.clone(),
            label: video.label.expect("labeled"),
            predicted: argmax(&scores),
            scores,
        });
    }

    let num_classes = manifest.label_space().num_classes();
    let mut report = EvalReport {
        protocol,
        predictions,
        accuracy: None,
        per_class_ap: None,
        map: None,
        config: String::new(),
    };
    match protocol {
        Protocol::Trimmed => {
            let correct = report
                .predictions
                .iter()
                .filter(|p| p.predicted == p.label)
                .count();
            report.accuracy = Some(correct as f64 / report.predictions.len() as f64);
        }
        Protocol::Untrimmed => {
            let ids: Vec<String> = report.predictions.iter().map(|p| p.id.clone()).collect();
            let mut per_class = Vec::with_capacity(num_classes);
            for class in 0..num_classes {
                let scores: Vec<f64> = report
                    .predictions
                    .iter()
                    .map(|p| *p.scores.get(class).unwrap_or(&f64::NEG_INFINITY))
                    .collect();
                let positives: Vec<bool> =
                    report.predictions.iter().map(|p| p.label == class).collect();
                per_class.push(average_precision(&scores, &positives, &ids));
            }
            let present: Vec<f64> = per_class.iter().flatten().copied().collect();
            if present.is_empty() {
                return Err(InferenceError::NoLabeledVideos);
            }
            report.map = Some(present.iter().sum::<f64>() / present.len() as f64);
            report.per_class_ap = Some(per_class);
        }
    }
    Ok(report)
}

/// Writes the report as one JSON document.
pub fn save_report(report: &EvalReport, path: &Path) -> Result<(), InferenceError> {
    let mut text = serde_json::to_string(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes per-class AP as CSV (`class,ap`; classes with no positives emit an
/// empty ap field).
pub fn save_per_class_ap_csv(report: &EvalReport, path: &Path) -> Result<(), InferenceError> {
    let per_class = report
        .per_class_ap
        .as_ref()
        .ok_or(InferenceError::BadReport("per-class AP"))?;
    let mut out = String::from("class,ap\n");
    for (class, ap) in per_class.iter().enumerate() {
        match ap {
            Some(v) => out.push_str(&format!("{class},{v}\n")),
            None => out.push_str(&format!("{class},\n")),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes per-scale consensus traces as CSV for plotting:
/// one row per (video, scale) with the scale's pooled class scores.
pub fn save_scale_traces_csv(
    traces: &[(String, Vec<ScaleConsensus>)],
    path: &Path,
) -> Result<(), InferenceError> {
    let classes = traces
        .first()
        .and_then(|(_, scales)| scales.first())
        .map(|sc| sc.scores.len())
        .ok_or(InferenceError::BadReport("scale traces"))?;
    let mut out = String::from("video_id,scale,num_windows,topk");
    for class in 0..classes {
        out.push_str(&format!(",score_{class}"));
    }
    out.push('\n');
    for (id, scales) in traces {
        for sc in scales {
            out.push_str(&format!("{id},{},{},{}", sc.scale, sc.num_windows, sc.topk));
            for score in &sc.scores {
                out.push_str(&format!(",{score}"));
            }
            out.push('\n');
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
