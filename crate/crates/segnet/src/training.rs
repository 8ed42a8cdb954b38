//! End-to-end training: segment-sampled snippets through a shared scorer,
//! consensus over snippet scores, softmax cross-entropy, and SGD with
//! momentum on every learnable tensor.
//!
//! The unit of work is one video. `forward_backward` samples one snippet per
//! segment, scores each with the shared scorer, aggregates, and backpropagates
//! the video loss into a [`GradBundle`] whose flat layout mirrors
//! [`VideoModel::learnable_layout`]. Batches average those bundles; the
//! reduction order is the batch order regardless of thread count, so training
//! with 1 or N worker threads produces bit-identical parameters.
//!
//! Randomness is seeded per video and epoch from the run seed, the video id
//! hash, and the epoch index, so results do not depend on iteration order or
//! on how videos are distributed across threads.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{
    self, AggregatorConfig, AggregatorKind, ConsensusError, SnippetScores,
};
use crate::corpus::{CorpusManifest, VideoRecord};
use crate::math::{log_sum_exp, max_rel_err, softmax};
use crate::rng::{mix, stable_hash, stream, SplitMix64};
use crate::sampling::{
    assemble_snippet, plan_segments, sample_train, AugmentConfig, ModalityKind, ModalitySpec,
    SamplingError, Snippet,
};
use crate::scorer::{
    self, compute_batch_stats, forward_train, set_partial_bn, BatchStats, LayerParams,
    ScorerCache, ScorerError, ScorerParams,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("video '{0}' has no label and cannot be trained on")]
    Unlabeled(String),
    #[error("label {label} out of range for {num_classes} classes")]
    BadLabel { label: usize, num_classes: usize },
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Softmax cross-entropy of one logit vector against a class index,
/// computed as `logsumexp(logits) - logits[label]` for stability.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, TrainingError> {
    if label >= logits.len() {
        return Err(TrainingError::BadLabel {
            label,
            num_classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Loss plus its gradient `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(
    logits: &[f64],
    label: usize,
) -> Result<(f64, Vec<f64>), TrainingError> {
    let loss = cross_entropy(logits, label)?;
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// A video classifier: a segment count, a snippet modality, an optional
/// train-time augmentation, one scorer shared by all snippets, and the
/// consensus that fuses per-snippet scores into video scores.
#[derive(Debug, Clone)]
pub struct VideoModel {
    pub scorer: ScorerParams,
    pub aggregator: AggregatorConfig,
    pub num_segments: usize,
    pub modality: ModalitySpec,
    /// Train-time crop/flip policy; `None` feeds frames (or features) as-is.
    pub augment: Option<AugmentConfig>,
}

impl VideoModel {
    pub fn new(
        scorer: ScorerParams,
        aggregator: AggregatorConfig,
        num_segments: usize,
        modality: ModalitySpec,
        augment: Option<AugmentConfig>,
    ) -> Result<Self, TrainingError> {
        let model = VideoModel {
            scorer,
            aggregator,
            num_segments,
            modality,
            augment,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        self.scorer.validate()?;
        if self.num_segments == 0 {
            return Err(TrainingError::BadConfig(
                "segment count must be positive".into(),
            ));
        }
        match &self.aggregator {
            AggregatorConfig::TopK { k } if *k == 0 => {
                return Err(TrainingError::BadConfig(
                    "top-k pool size must be positive".into(),
                ));
            }
            AggregatorConfig::LinearWeight { omega } if omega.len() != self.num_segments => {
                return Err(TrainingError::BadConfig(format!(
                    "omega has {} weights but the model uses {} segments",
                    omega.len(),
                    self.num_segments
                )));
            }
            AggregatorConfig::Attention { omega_att }
                if omega_att.len() != self.scorer.last_hidden_dim() =>
            {
                return Err(TrainingError::BadConfig(format!(
                    "omega_att has dim {} but the scorer feature dim is {}",
                    omega_att.len(),
                    self.scorer.last_hidden_dim()
                )));
            }
            _ => {}
        }
        if let Some(augment) = &self.augment {
            augment.validate()?;
            if self.modality.kind == ModalityKind::FeaturePassthrough {
                return Err(TrainingError::BadConfig(
                    "augmentation requires frame grids, not feature streams".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.scorer.num_classes()
    }

    /// Named learnable tensors: every scorer tensor, then the consensus
    /// weights when the aggregator has any.
    pub fn learnable_layout(&self) -> Vec<(String, usize)> {
        let mut layout = self.scorer.learnable_layout();
        match &self.aggregator {
            AggregatorConfig::LinearWeight { omega } => {
                layout.push(("omega".into(), omega.len()));
            }
            AggregatorConfig::Attention { omega_att } => {
                layout.push(("omega_att".into(), omega_att.len()));
            }
            _ => {}
        }
        layout
    }

    pub fn flatten_learnables(&self) -> Vec<f64> {
        let mut flat = self.scorer.flatten_learnables();
        match &self.aggregator {
            AggregatorConfig::LinearWeight { omega } => flat.extend_from_slice(omega),
            AggregatorConfig::Attention { omega_att } => flat.extend_from_slice(omega_att),
            _ => {}
        }
        flat
    }

    pub fn set_learnables(&mut self, flat: &[f64]) {
        let scorer_len: usize = self
            .scorer
            .learnable_layout()
            .iter()
            .map(|(_, len)| len)
            .sum();
        self.scorer.set_learnables(&flat[..scorer_len]);
        let rest = &flat[scorer_len..];
        match &mut self.aggregator {
            AggregatorConfig::LinearWeight { omega } => omega.copy_from_slice(rest),
            AggregatorConfig::Attention { omega_att } => omega_att.copy_from_slice(rest),
            _ => assert!(rest.is_empty(), "flat parameter vector length mismatch"),
        }
    }

    pub fn has_aggregator_learnables(&self) -> bool {
        matches!(
            self.aggregator,
            AggregatorConfig::LinearWeight { .. } | AggregatorConfig::Attention { .. }
        )
    }
}

/// Gradient of one video's loss for every learnable, in
/// [`VideoModel::learnable_layout`] order.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub flat: Vec<f64>,
    /// Number of snippet backward passes folded in; always the segment count.
    pub snippet_contributions: usize,
}

struct Prepared {
    label: usize,
    snippets: Vec<Snippet>,
}

/// Plans segments, samples one snippet index per segment, and assembles the
/// snippets. Consumes `rng` for the segment draws and any augmentation draws.
fn prepare_video(
    model: &VideoModel,
    video: &VideoRecord,
    rng: &mut SplitMix64,
) -> Result<Prepared, TrainingError> {
    let label = video
        .label
        .ok_or_else(|| TrainingError::Unlabeled(video.id.clone()))?;
    if label >= model.num_classes() {
        return Err(TrainingError::BadLabel {
            label,
            num_classes: model.num_classes(),
        });
    }
    let plan = plan_segments(video.num_frames(), model.num_segments)?;
    let starts = sample_train(&plan, rng);
    let snippets = starts
        .iter()
        .enumerate()
        .map(|(segment, &start)| {
            assemble_snippet(
                video,
                segment,
                start,
                &model.modality,
                model.augment.as_ref(),
                rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Prepared { label, snippets })
}

struct VideoForward {
    scores: SnippetScores,
    features: Vec<Vec<f64>>,
    caches: Vec<ScorerCache>,
}

fn forward_snippets(
    model: &VideoModel,
    snippets: &[Snippet],
    stats: Option<&BatchStats>,
    rng: &mut SplitMix64,
) -> Result<VideoForward, TrainingError> {
    let mut rows = Vec::with_capacity(snippets.len());
    let mut features = Vec::with_capacity(snippets.len());
    let mut caches = Vec::with_capacity(snippets.len());
    for snippet in snippets {
        let (out, cache) = forward_train(&model.scorer, &snippet.data, stats, rng)?;
        rows.push(out.logits);
        features.push(out.last_hidden);
        caches.push(cache);
    }
    Ok(VideoForward {
        scores: SnippetScores::new(rows)?,
        features,
        caches,
    })
}

/// Attention is the only consensus that reads snippet features.
fn attention_features<'a>(
    model: &VideoModel,
    features: &'a [Vec<f64>],
) -> Option<&'a [Vec<f64>]> {
    matches!(model.aggregator.kind(), AggregatorKind::Attention).then_some(features)
}

fn finish_video(
    model: &VideoModel,
    prepared: &Prepared,
    stats: Option<&BatchStats>,
    rng: &mut SplitMix64,
) -> Result<(f64, GradBundle), TrainingError> {
    let fwd = forward_snippets(model, &prepared.snippets, stats, rng)?;
    let out = consensus::forward(
        &fwd.scores,
        &model.aggregator,
        attention_features(model, &fwd.features),
    )?;
    let (loss, d_g) = cross_entropy_grad(&out.g, prepared.label)?;
    let grads = consensus::backward(&fwd.scores, &model.aggregator, &out.cache, &d_g)?;

    let zero_hidden = vec![0.0; model.scorer.last_hidden_dim()];
    let mut scorer_flat: Option<Vec<f64>> = None;
    let mut contributions = 0;
    for (segment, cache) in fwd.caches.iter().enumerate() {
        let d_hidden: &[f64] = grads
            .d_features
            .as_ref()
            .map_or(zero_hidden.as_slice(), |f| f[segment].as_slice());
        let part = scorer::backward(&model.scorer, cache, &grads.d_scores[segment], d_hidden)?
            .flatten();
        match &mut scorer_flat {
            None => scorer_flat = Some(part),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&part) {
                    *a += b;
                }
            }
        }
        contributions += 1;
    }
    let mut flat = scorer_flat.expect("at least one segment");
    if let Some(d_omega) = &grads.d_omega {
        flat.extend_from_slice(d_omega);
    }
    if let Some(d_omega_att) = &grads.d_omega_att {
        flat.extend_from_slice(d_omega_att);
    }
    Ok((
        loss,
        GradBundle {
            flat,
            snippet_contributions: contributions,
        },
    ))
}

/// One video's loss and gradients. Samples snippets, scores them with the
/// shared scorer in train mode (no pooled batch statistics; BN layers fall
/// back to running stats), aggregates, and backpropagates. The snippet score
/// gradients from the consensus and, under attention, the feature gradients
/// both flow into the scorer; per-parameter contributions from the K snippets
/// are summed.
pub fn forward_backward(
    model: &VideoModel,
    video: &VideoRecord,
    rng: &mut SplitMix64,
) -> Result<(f64, GradBundle), TrainingError> {
    let prepared = prepare_video(model, video, rng)?;
    finish_video(model, &prepared, None, rng)
}

/// Loss only, with rng reseeded from `seed`; used for finite differences.
fn pipeline_loss(model: &VideoModel, video: &VideoRecord, seed: u64) -> Result<f64, TrainingError> {
    let mut rng = SplitMix64::new(seed);
    let prepared = prepare_video(model, video, &mut rng)?;
    let fwd = forward_snippets(model, &prepared.snippets, None, &mut rng)?;
    let out = consensus::forward(
        &fwd.scores,
        &model.aggregator,
        attention_features(model, &fwd.features),
    )?;
    cross_entropy(&out.g, prepared.label)
}

/// SGD with momentum: `v = momentum * v - lr * grad; p += v`. The learning
/// rate starts at `lr0` and multiplies by `decay` at each decay point.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    /// Iteration indices at which the rate decays. `None` means "scale to the
    /// run": `train` fills in floor(2T/3) and floor(8T/9) for T total steps.
    pub decay_points: Option<Vec<usize>>,
    pub iteration: usize,
    velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(lr0: f64, momentum: f64) -> Self {
        OptimizerState {
            lr0,
            momentum,
            decay: 0.1,
            decay_points: None,
            iteration: 0,
            velocity: Vec::new(),
        }
    }

    pub fn with_schedule(lr0: f64, momentum: f64, decay: f64, points: Vec<usize>) -> Self {
        OptimizerState {
            lr0,
            momentum,
            decay,
            decay_points: Some(points),
            iteration: 0,
            velocity: Vec::new(),
        }
    }

    /// Learning rate at the current iteration.
    pub fn current_lr(&self) -> f64 {
        let passed = self
            .decay_points
            .as_deref()
            .map_or(0, |points| points.iter().filter(|&&p| p <= self.iteration).count());
        self.lr0 * self.decay.powi(passed as i32)
    }

    fn resolve_schedule(&mut self, total_iterations: usize) {
        if self.decay_points.is_none() {
            self.decay_points = Some(vec![
                total_iterations * 2 / 3,
                total_iterations * 8 / 9,
            ]);
        }
    }

    fn ensure_velocity(&mut self, len: usize) -> Result<(), TrainingError> {
        if self.velocity.is_empty() {
            self.velocity = vec![0.0; len];
        } else if self.velocity.len() != len {
            return Err(TrainingError::BadConfig(format!(
                "optimizer velocity has {} entries but the model has {} learnables",
                self.velocity.len(),
                len
            )));
        }
        Ok(())
    }

    /// Applies one update. Indices outside `active` are left entirely alone:
    /// neither their velocity nor their parameter moves.
    fn step(&mut self, params: &mut [f64], grads: &[f64], active: Option<Range<usize>>) {
        let lr = self.current_lr();
        let range = active.unwrap_or(0..params.len());
        for i in range {
            self.velocity[i] = self.momentum * self.velocity[i] - lr * grads[i];
            params[i] += self.velocity[i];
        }
        self.iteration += 1;
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Freeze BN running statistics on every BN layer except the first.
    pub partial_bn: bool,
    /// Alternate updates between the scorer (even iterations) and the
    /// consensus weights (odd iterations); a no-op when the aggregator has
    /// no learnables.
    pub alternating_omega: bool,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 30,
            seed: 7,
            partial_bn: false,
            alternating_omega: false,
            threads: 1,
        }
    }
}

/// One optimizer step as recorded in the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes history as JSON lines. The file content is a pure function of the
/// training run, so equal seeds produce byte-identical files.
pub fn save_history(entries: &[HistoryEntry], path: &Path) -> Result<(), TrainingError> {
    let mut out = String::new();
    for entry in entries {
        out.push_str(
            &serde_json::to_string(entry)
                .map_err(|e| TrainingError::BadConfig(e.to_string()))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Job {
    prepared: Prepared,
    rng: SplitMix64,
    result: Option<Result<(f64, GradBundle), TrainingError>>,
}

/// Runs the per-video forward/backward passes of one batch. Jobs keep their
/// slot in the batch, so the caller's reduction order never depends on how
/// many threads ran or which finished first.
fn run_batch(model: &VideoModel, stats: &BatchStats, jobs: &mut [Job], threads: usize) {
    let run = |job: &mut Job| {
        job.result = Some(finish_video(model, &job.prepared, Some(stats), &mut job.rng));
    };
    if threads <= 1 || jobs.len() <= 1 {
        jobs.iter_mut().for_each(run);
        return;
    }
    let chunk = jobs.len().div_ceil(threads);
    std::thread::scope(|scope| {
        for slice in jobs.chunks_mut(chunk) {
            scope.spawn(move || slice.iter_mut().for_each(run));
        }
    });
}

/// Trains the model in place over the manifest and returns the per-iteration
/// history. Each epoch reshuffles the videos and resamples their snippets;
/// each batch pools BN statistics across all snippets of all its videos,
/// updates running stats once, averages the per-video gradient bundles, and
/// takes one SGD step.
pub fn train(
    model: &mut VideoModel,
    manifest: &CorpusManifest,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<Vec<HistoryEntry>, TrainingError> {
    model.validate()?;
    if cfg.batch_size == 0 {
        return Err(TrainingError::BadConfig("batch_size must be positive".into()));
    }
    if cfg.threads == 0 {
        return Err(TrainingError::BadConfig("threads must be positive".into()));
    }
    let records = manifest.records();
    if records.is_empty() {
        return Err(TrainingError::EmptyManifest);
    }

    if cfg.partial_bn {
        let _ = set_partial_bn(&mut model.scorer);
    }

    let layout_len: usize = model.learnable_layout().iter().map(|(_, len)| len).sum();
    let scorer_len: usize = model
        .scorer
        .learnable_layout()
        .iter()
        .map(|(_, len)| len)
        .sum();
    opt.ensure_velocity(layout_len)?;
    let batches_per_epoch = records.len().div_ceil(cfg.batch_size);
    opt.resolve_schedule(cfg.epochs * batches_per_epoch);

    let mut history = Vec::with_capacity(cfg.epochs * batches_per_epoch);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..records.len()).collect();
        let mut shuffle_rng = SplitMix64::new(mix(mix(cfg.seed, stream::SHUFFLE), epoch as u64));
        shuffle_rng.shuffle(&mut order);

        for batch in order.chunks(cfg.batch_size) {
            let mut jobs = Vec::with_capacity(batch.len());
            for &index in batch {
                let video = &records[index];
                let video_seed = mix(
                    mix(mix(cfg.seed, stream::SAMPLE), stable_hash(&video.id)),
                    epoch as u64,
                );
                let mut rng = SplitMix64::new(video_seed);
                let prepared = prepare_video(model, video, &mut rng)?;
                jobs.push(Job {
                    prepared,
                    rng,
                    result: None,
                });
            }

            let inputs: Vec<&[f64]> = jobs
                .iter()
                .flat_map(|job| job.prepared.snippets.iter().map(|s| s.data.as_slice()))
                .collect();
            let stats = compute_batch_stats(&mut model.scorer, &inputs)?;
            drop(inputs);

            run_batch(model, &stats, &mut jobs, cfg.threads);

            let scale = 1.0 / jobs.len() as f64;
            let mut mean_loss = 0.0;
            let mut grad = vec![0.0; layout_len];
            for job in &mut jobs {
                let (loss, bundle) = job.result.take().expect("batch job ran")?;
                debug_assert_eq!(bundle.snippet_contributions, model.num_segments);
                mean_loss += loss;
                for (g, b) in grad.iter_mut().zip(&bundle.flat) {
                    *g += b;
                }
            }
            mean_loss *= scale;
            for g in &mut grad {
                *g *= scale;
            }

            let active = if cfg.alternating_omega && model.has_aggregator_learnables() {
                if opt.iteration % 2 == 0 {
                    Some(0..scorer_len)
                } else {
                    Some(scorer_len..layout_len)
                }
            } else {
                None
            };

            let iteration = opt.iteration;
            let lr = opt.current_lr();
            let mut flat = model.flatten_learnables();
            opt.step(&mut flat, &grad, active);
            model.set_learnables(&flat);
            history.push(HistoryEntry {
                iteration,
                loss: mean_loss,
                lr,
            });
        }
    }
    Ok(history)
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct KindReport {
    pub kind: AggregatorKind,
    pub tensors: Vec<TensorCheck>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub threshold: f64,
    pub kinds: Vec<KindReport>,
    pub pass: bool,
}

fn tensor_check(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorCheck {
    let rel_err = max_rel_err(analytic, numeric);
    TensorCheck {
        tensor: name.into(),
        rel_err,
        pass: rel_err < GRADCHECK_THRESHOLD,
    }
}

/// Loss of the consensus-plus-cross-entropy stage alone, at given snippet
/// score rows and (for attention) features.
fn consensus_loss_at(
    cfg: &AggregatorConfig,
    rows: Vec<Vec<f64>>,
    features: Option<&[Vec<f64>]>,
    label: usize,
) -> Result<f64, TrainingError> {
    let scores = SnippetScores::new(rows)?;
    let out = consensus::forward(&scores, cfg, features)?;
    cross_entropy(&out.g, label)
}

/// Checks the consensus-stage gradients (snippet scores and, for attention,
/// snippet features) against central differences through the consensus and
/// loss only.
fn check_consensus_stage(
    model: &VideoModel,
    video: &VideoRecord,
    seed: u64,
    out: &mut Vec<TensorCheck>,
) -> Result<(), TrainingError> {
    let mut rng = SplitMix64::new(seed);
    let prepared = prepare_video(model, video, &mut rng)?;
    let fwd = forward_snippets(model, &prepared.snippets, None, &mut rng)?;
    let rows = fwd.scores.rows().to_vec();
    let features = fwd.features;
    let feat_arg = attention_features(model, &features);

    let cons = consensus::forward(&fwd.scores, &model.aggregator, feat_arg)?;
    let (_, d_g) = cross_entropy_grad(&cons.g, prepared.label)?;
    let grads = consensus::backward(&fwd.scores, &model.aggregator, &cons.cache, &d_g)?;

    let analytic: Vec<f64> = grads.d_scores.iter().flatten().copied().collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..rows.len() {
        for i in 0..rows[k].len() {
            let at = |v: f64| -> Result<f64, TrainingError> {
                let mut probe = rows.clone();
                probe[k][i] = v;
                consensus_loss_at(&model.aggregator, probe, feat_arg, prepared.label)
            };
            numeric.push((at(rows[k][i] + FD_STEP)? - at(rows[k][i] - FD_STEP)?) / (2.0 * FD_STEP));
        }
    }
    out.push(tensor_check("scores", &analytic, &numeric));

    if let Some(d_features) = &grads.d_features {
        let analytic: Vec<f64> = d_features.iter().flatten().copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..features.len() {
            for j in 0..features[k].len() {
                let at = |v: f64| -> Result<f64, TrainingError> {
                    let mut probe = features.clone();
                    probe[k][j] = v;
                    consensus_loss_at(&model.aggregator, rows.clone(), Some(&probe), prepared.label)
                };
                numeric.push(
                    (at(features[k][j] + FD_STEP)? - at(features[k][j] - FD_STEP)?)
                        / (2.0 * FD_STEP),
                );
            }
        }
        out.push(tensor_check("features", &analytic, &numeric));
    }
    Ok(())
}

/// Checks every learnable tensor end-to-end: analytic bundle from
/// `forward_backward` against central differences of the full pipeline loss.
/// Reseeding pins snippet sampling, augmentation, and dropout masks across
/// probe evaluations.
fn check_end_to_end(
    model: &VideoModel,
    video: &VideoRecord,
    seed: u64,
    out: &mut Vec<TensorCheck>,
) -> Result<(), TrainingError> {
    let layout = model.learnable_layout();
    let (_, bundle) = forward_backward(model, video, &mut SplitMix64::new(seed))?;

    let mut flat = model.flatten_learnables();
    let mut probe = model.clone();
    let mut numeric = vec![0.0; flat.len()];
    for j in 0..flat.len() {
        let orig = flat[j];
        flat[j] = orig + FD_STEP;
        probe.set_learnables(&flat);
        let plus = pipeline_loss(&probe, video, seed)?;
        flat[j] = orig - FD_STEP;
        probe.set_learnables(&flat);
        let minus = pipeline_loss(&probe, video, seed)?;
        flat[j] = orig;
        numeric[j] = (plus - minus) / (2.0 * FD_STEP);
    }

    let mut offset = 0;
    for (name, len) in &layout {
        out.push(tensor_check(
            name,
            &bundle.flat[offset..offset + len],
            &numeric[offset..offset + len],
        ));
        offset += len;
    }
    Ok(())
}

/// Substitutes the requested consensus kind, keeping the model's own
/// aggregator when the kind already matches. Attention gets small random
/// weights so that the feature gradient path is exercised.
fn variant_for_kind(base: &VideoModel, kind: AggregatorKind, seed: u64) -> VideoModel {
    let mut model = base.clone();
    if model.aggregator.kind() != kind {
        model.aggregator = match kind {
            AggregatorKind::Max => AggregatorConfig::Max,
            AggregatorKind::Average => AggregatorConfig::Average,
            AggregatorKind::TopK => AggregatorConfig::TopK {
                k: base.num_segments.min(2).max(1),
            },
            AggregatorKind::LinearWeight => AggregatorConfig::linear_uniform(base.num_segments),
            AggregatorKind::Attention => {
                let mut rng = SplitMix64::new(mix(seed, stream::INIT));
                AggregatorConfig::Attention {
                    omega_att: (0..base.scorer.last_hidden_dim())
                        .map(|_| 0.5 * rng.next_gaussian())
                        .collect(),
                }
            }
        };
    }
    model
}

/// Verifies analytic gradients against central differences (step 1e-5) for
/// each requested consensus kind, on one video. BN statistics are frozen and
/// the rng is reseeded per evaluation, so the objective is deterministic and
/// the only moving parts are the perturbed values. Reports one relative error
/// per tensor: the largest absolute deviation within the tensor over the
/// largest numeric magnitude in it.
pub fn gradcheck(
    model: &VideoModel,
    video: &VideoRecord,
    kinds: &[AggregatorKind],
    seed: u64,
) -> Result<GradCheckReport, TrainingError> {
    let mut frozen = model.clone();
    for bn in frozen.scorer.bn.iter_mut().flatten() {
        bn.frozen_stats = true;
    }
    frozen.validate()?;

    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let variant = variant_for_kind(&frozen, kind, seed);
        variant.validate()?;
        let mut tensors = Vec::new();
        check_consensus_stage(&variant, video, seed, &mut tensors)?;
        check_end_to_end(&variant, video, seed, &mut tensors)?;
        let pass = tensors.iter().all(|t| t.pass);
        reports.push(KindReport {
            kind,
            tensors,
            pass,
        });
    }
    let pass = reports.iter().all(|r| r.pass);
    Ok(GradCheckReport {
        threshold: GRADCHECK_THRESHOLD,
        kinds: reports,
        pass,
    })
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerDump {
    output_dim: usize,
    input_dim: usize,
    /// Row-major `output_dim x input_dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    num_segments: usize,
    modality: ModalitySpec,
    augment: Option<AugmentConfig>,
    dropout_p: f64,
    input_layout: (usize, usize),
    layers: Vec<LayerDump>,
    bn: Vec<Option<crate::scorer::BnState>>,
    aggregator: AggregatorConfig,
}

/// Serializes the full model (parameters, BN state, aggregator, modality,
/// augmentation) as one JSON document. Floats round-trip bit-exactly.
pub fn save_checkpoint(model: &VideoModel, path: &Path) -> Result<(), TrainingError> {
    model.validate()?;
    let file = CheckpointFile {
        format_version: CHECKPOINT_FORMAT_VERSION,
        num_segments: model.num_segments,
        modality: model.modality,
        augment: model.augment.clone(),
        dropout_p: model.scorer.dropout_p,
        input_layout: model.scorer.input_layout,
        layers: model
            .scorer
            .layers
            .iter()
            .map(|layer| LayerDump {
                output_dim: layer.out_dim(),
                input_dim: layer.in_dim(),
                weight: layer.weight.iter().flatten().copied().collect(),
                bias: layer.bias.clone(),
            })
            .collect(),
        bn: model.scorer.bn.clone(),
        aggregator: model.aggregator.clone(),
    };
    let mut text =
        serde_json::to_string(&file).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<VideoModel, TrainingError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| TrainingError::Checkpoint(e.to_string()))?;
    if file.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TrainingError::Checkpoint(format!(
            "format_version {} is not supported (expected {})",
            file.format_version, CHECKPOINT_FORMAT_VERSION
        )));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for (index, dump) in file.layers.into_iter().enumerate() {
        if dump.input_dim == 0
            || dump.weight.len() != dump.output_dim * dump.input_dim
            || dump.bias.len() != dump.output_dim
        {
            return Err(TrainingError::Checkpoint(format!(
                "layer {index} has inconsistent dimensions"
            )));
        }
        layers.push(LayerParams {
            weight: dump
                .weight
                .chunks(dump.input_dim)
                .map(<[f64]>::to_vec)
                .collect(),
            bias: dump.bias,
        });
    }
    let scorer = ScorerParams {
        layers,
        bn: file.bn,
        dropout_p: file.dropout_p,
        input_layout: file.input_layout,
    };
    VideoModel::new(
        scorer,
        file.aggregator,
        file.num_segments,
        file.modality,
        file.augment,
    )
}
