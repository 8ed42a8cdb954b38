//! Shared fixtures for the integration suites: deterministic synthetic
//! feature corpora, small feature-space models, and a compact train and
//! evaluate recipe used by several scenarios.

use segnet::consensus::AggregatorConfig;
use segnet::corpus::{phase_cycle_signals, CorpusManifest, Split, SynthKind, SynthSpec};
use segnet::inference::{evaluate, predict_trimmed, FusionSpec, PredictOptions, Protocol};
use segnet::rng::{mix, stream, SplitMix64};
use segnet::sampling::ModalitySpec;
use segnet::scorer::new_scorer;
use segnet::training::{train, OptimizerState, TrainConfig, VideoModel};

/// Signal atoms shared cyclically across classes: a single frame narrows the
/// label down to a candidate set, only the phase sequence identifies it.
pub fn cyclic_signals(classes: usize, phases: usize, dim: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let mut rng = SplitMix64::new(mix(seed, stream::SIGNALS));
    phase_cycle_signals(classes, phases, dim, 0.0, 1.0, &mut rng)
}

/// Independent gaussian signal per (class, phase): every frame is
/// informative on its own.
pub fn independent_signals(
    classes: usize,
    phases: usize,
    dim: usize,
    seed: u64,
) -> Vec<Vec<Vec<f64>>> {
    let mut rng = SplitMix64::new(mix(seed, stream::SIGNALS));
    (0..classes)
        .map(|_| {
            (0..phases)
                .map(|_| (0..dim).map(|_| rng.next_gaussian()).collect())
                .collect()
        })
        .collect()
}

pub fn feature_spec(
    signals: Vec<Vec<Vec<f64>>>,
    sigma: f64,
    length_range: (usize, usize),
    videos_per_class: usize,
    split: Split,
    id_prefix: &str,
) -> SynthSpec {
    let classes = signals.len();
    let dim = signals[0][0].len();
    SynthSpec {
        label_names: (0..classes).map(|c| format!("class-{c}")).collect(),
        phases: signals[0].len(),
        signals,
        sigma,
        length_range,
        kind: SynthKind::Features { dim },
        videos_per_class,
        split,
        id_prefix: id_prefix.into(),
        fps: 1.0,
    }
}

/// Feature-input model: plain MLP scorer, no spatial augmentation.
pub fn feature_model(
    dims: &[usize],
    num_segments: usize,
    aggregator: AggregatorConfig,
    bn: bool,
    dropout_p: f64,
    seed: u64,
) -> VideoModel {
    let mut rng = SplitMix64::new(mix(seed, stream::INIT));
    let scorer = new_scorer(dims, bn, dropout_p, (1, dims[0]), &mut rng).unwrap();
    VideoModel::new(
        scorer,
        aggregator,
        num_segments,
        ModalitySpec::feature_passthrough(),
        None,
    )
    .unwrap()
}

pub fn quick_train(
    model: &mut VideoModel,
    manifest: &CorpusManifest,
    lr: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) {
    let mut opt = OptimizerState::new(lr, 0.9);
    let cfg = TrainConfig {
        batch_size,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    train(model, manifest, &mut opt, &cfg).unwrap();
}

/// Top-1 accuracy of a single model under the trimmed protocol.
pub fn accuracy_on(model: &VideoModel, manifest: &CorpusManifest, opts: &PredictOptions) -> f64 {
    let fusion = FusionSpec::uniform(1);
    let report = evaluate(
        manifest,
        |video| predict_trimmed(std::slice::from_ref(model), &fusion, video, opts),
        Protocol::Trimmed,
        1,
    )
    .unwrap();
    report.accuracy.unwrap()
}
