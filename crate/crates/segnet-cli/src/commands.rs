//! The four commands behind the `segnet` binary: corpus generation,
//! training, evaluation, and gradient checking. Each command resolves its
//! inputs from the merged config, runs the corresponding library pipeline,
//! and echoes the resolved config next to its artifacts.

use crate::config::RunConfig;
use crate::CliError;
use segnet::consensus::{AggregatorConfig, AggregatorKind, ALL_KINDS};
use segnet::corpus::{
    self, gaussian_pool, generate_trimmed_corpus, generate_untrimmed_corpus, load_manifest,
    phase_cycle_signals, save_manifest, ActionInterval, CorpusManifest, Split, SynthKind,
    SynthSpec, UntrimmedSpec, VideoRecord,
};
use segnet::inference::{
    evaluate, mtwi, predict_trimmed, save_per_class_ap_csv, save_report, save_scale_traces_csv,
    FusionSpec, PredictOptions, Protocol, TestConsensus,
};
use segnet::rng::{mix, stream, SplitMix64};
use segnet::sampling::{AugmentConfig, ModalitySpec};
use segnet::scorer::new_scorer;
use segnet::training::{
    gradcheck, load_checkpoint, save_checkpoint, save_history, train, OptimizerState,
    TrainConfig, TrainingError, VideoModel,
};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Training failures caused by the configuration or the data it names are
/// usage errors; everything past validation is a runtime failure.
fn train_err(e: TrainingError) -> CliError {
    match e {
        TrainingError::BadConfig(_)
        | TrainingError::EmptyManifest
        | TrainingError::Unlabeled(_)
        | TrainingError::BadLabel { .. }
        | TrainingError::Checkpoint(_) => CliError::Config(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.get("paths.out");
    if out.is_empty() {
        return Err(CliError::Config("paths.out is required (use --out)".into()));
    }
    let dir = PathBuf::from(out);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::write(dir.join("config.resolved"), cfg.resolved()).map_err(runtime_err)
}

/// Wall-clock facts live here, apart from history and reports, which must
/// stay byte-identical across reruns of the same seed.
fn write_meta(dir: &Path, value: serde_json::Value) -> Result<(), CliError> {
    std::fs::write(dir.join("meta.json"), format!("{value:#}\n")).map_err(runtime_err)
}

fn data_manifest(cfg: &RunConfig) -> Result<CorpusManifest, CliError> {
    let raw = cfg.get("paths.data");
    if raw.is_empty() {
        return Err(CliError::Config("paths.data is required (use --data)".into()));
    }
    let path = Path::new(raw);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "data manifest {} does not exist",
            path.display()
        )));
    }
    load_manifest(path).map_err(config_err)
}

fn parse_split(raw: &str) -> Result<Split, CliError> {
    match raw {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!(
            "corpus.split: unknown value `{other}`"
        ))),
    }
}

/// Signal offset/scale, with `auto` resolving to raw features around zero or
/// pixel values centered in the valid range.
fn signal_params(cfg: &RunConfig, kind: &SynthKind) -> Result<(f64, f64), CliError> {
    let auto = match kind {
        SynthKind::Grid { .. } => (128.0, 30.0),
        SynthKind::Features { .. } => (0.0, 1.0),
    };
    let offset = match cfg.get("corpus.signal_offset") {
        "auto" => auto.0,
        _ => cfg.parse("corpus.signal_offset")?,
    };
    let scale = match cfg.get("corpus.signal_scale") {
        "auto" => auto.1,
        _ => cfg.parse("corpus.signal_scale")?,
    };
    Ok((offset, scale))
}

fn build_synth_spec(cfg: &RunConfig, rng: &mut SplitMix64) -> Result<SynthSpec, CliError> {
    let classes: usize = cfg.parse("corpus.classes")?;
    if classes < 2 {
        return Err(CliError::Config(format!(
            "corpus.classes must be >= 2, got {classes}"
        )));
    }
    let phases: usize = cfg.parse("corpus.phases")?;
    if phases < 1 {
        return Err(CliError::Config("corpus.phases must be >= 1".into()));
    }
    let kind = match cfg.get("corpus.kind") {
        "features" => SynthKind::Features {
            dim: cfg.parse("corpus.dim")?,
        },
        "grid" => SynthKind::Grid {
            channels: cfg.parse("corpus.channels")?,
            height: cfg.parse("corpus.height")?,
            width: cfg.parse("corpus.width")?,
        },
        other => {
            return Err(CliError::Config(format!(
                "corpus.kind: unknown value `{other}`"
            )))
        }
    };
    let sigma: f64 = cfg.parse("corpus.sigma")?;
    if sigma < 0.0 {
        return Err(CliError::Config(format!(
            "corpus.sigma must be >= 0, got {sigma}"
        )));
    }
    let min_frames: usize = cfg.parse("corpus.min_frames")?;
    let max_frames: usize = cfg.parse("corpus.max_frames")?;
    if min_frames < 1 || min_frames > max_frames {
        return Err(CliError::Config(format!(
            "corpus.min_frames..corpus.max_frames is empty: [{min_frames}, {max_frames}]"
        )));
    }

    let dim = kind.frame_dim();
    let (offset, scale) = signal_params(cfg, &kind)?;
    let signals = match cfg.get("corpus.signals") {
        "cyclic" => phase_cycle_signals(classes, phases, dim, offset, scale, rng),
        "independent" => (0..classes)
            .map(|_| {
                (0..phases)
                    .map(|_| (0..dim).map(|_| offset + scale * rng.next_gaussian()).collect())
                    .collect()
            })
            .collect(),
        other => {
            return Err(CliError::Config(format!(
                "corpus.signals: unknown value `{other}`"
            )))
        }
    };

    Ok(SynthSpec {
        label_names: (0..classes).map(|c| format!("class-{c}")).collect(),
        phases,
        signals,
        sigma,
        length_range: (min_frames, max_frames),
        kind,
        videos_per_class: cfg.parse("corpus.videos_per_class")?,
        split: parse_split(cfg.get("corpus.split"))?,
        id_prefix: cfg.get("corpus.prefix").to_string(),
        fps: cfg.parse("corpus.fps")?,
    })
}

fn build_corpus(
    cfg: &RunConfig,
    seed: u64,
) -> Result<(CorpusManifest, Option<Vec<ActionInterval>>), CliError> {
    let mut rng = SplitMix64::new(mix(seed, stream::SIGNALS));
    let spec = build_synth_spec(cfg, &mut rng)?;
    match cfg.get("corpus.style") {
        "trimmed" => Ok((generate_trimmed_corpus(&spec, seed).map_err(config_err)?, None)),
        "untrimmed" => {
            let lo: f64 = cfg.parse("corpus.fraction_min")?;
            let hi: f64 = cfg.parse("corpus.fraction_max")?;
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(CliError::Config(format!(
                    "corpus.fraction_min..corpus.fraction_max must lie in (0, 1], got [{lo}, {hi}]"
                )));
            }
            let pool: usize = cfg.parse("corpus.background_pool")?;
            let dim = spec.kind.frame_dim();
            let (offset, scale) = signal_params(cfg, &spec.kind)?;
            let background = gaussian_pool(pool, dim, offset, scale, &mut rng);
            let untrimmed = UntrimmedSpec {
                base: spec,
                background,
                fraction_range: (lo, hi),
            };
            let (manifest, intervals) =
                generate_untrimmed_corpus(&untrimmed, seed).map_err(config_err)?;
            Ok((manifest, Some(intervals)))
        }
        other => Err(CliError::Config(format!(
            "corpus.style: unknown value `{other}`"
        ))),
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let out = ensure_out_dir(cfg)?;
    let seed: u64 = cfg.parse("train.seed")?;
    let (manifest, intervals) = build_corpus(cfg, seed)?;

    let manifest_path = out.join("corpus.jsonl");
    save_manifest(&manifest, &manifest_path).map_err(runtime_err)?;
    if let Some(intervals) = &intervals {
        corpus::save_intervals(intervals, &corpus::sidecar_path(&manifest_path))
            .map_err(runtime_err)?;
    }
    write_resolved(cfg, &out)?;
    println!(
        "wrote {} videos to {}{}",
        manifest.records().len(),
        manifest_path.display(),
        if intervals.is_some() {
            " (+ interval sidecar)"
        } else {
            ""
        }
    );
    Ok(())
}

fn build_modality(cfg: &RunConfig) -> Result<ModalitySpec, CliError> {
    let stack_len: usize = cfg.parse("model.stack_len")?;
    Ok(match cfg.get("model.modality") {
        "features" => ModalitySpec::feature_passthrough(),
        "rgb" => ModalitySpec::rgb(),
        "rgb_diff" => ModalitySpec::rgb_diff(stack_len),
        "flow" => ModalitySpec::flow_stack(stack_len),
        other => {
            return Err(CliError::Config(format!(
                "model.modality: unknown value `{other}`"
            )))
        }
    })
}

fn build_augment(
    cfg: &RunConfig,
    sample: &VideoRecord,
) -> Result<Option<AugmentConfig>, CliError> {
    let crop_sizes: Vec<usize> = cfg.list("model.crop_sizes")?;
    if crop_sizes.is_empty() {
        return Ok(None);
    }
    let Some((_, height, width)) = sample.data.grid_shape() else {
        return Err(CliError::Config(
            "model.crop_sizes: spatial augmentation needs a grid corpus".into(),
        ));
    };
    let output: usize = cfg.parse("model.crop_output")?;
    let augment = AugmentConfig {
        base: (height, width),
        crop_sizes,
        output: (output, output),
        flip_prob: cfg.parse("model.flip_prob")?,
    };
    augment.validate().map_err(config_err)?;
    Ok(Some(augment))
}

/// Fresh model shaped by the config and the manifest: input width from the
/// modality applied to the first record, output width from the label space.
fn build_model(
    cfg: &RunConfig,
    manifest: &CorpusManifest,
    seed: u64,
) -> Result<VideoModel, CliError> {
    let sample = manifest
        .records()
        .first()
        .ok_or_else(|| CliError::Config("manifest has no videos".into()))?;
    let modality = build_modality(cfg)?;
    let augment = build_augment(cfg, sample)?;
    let input_dim = modality
        .snippet_dim(sample, augment.as_ref().map(|a| a.output))
        .map_err(config_err)?;

    let mut dims = vec![input_dim];
    dims.extend(cfg.list::<usize>("model.hidden")?);
    dims.push(manifest.label_space().num_classes());

    let frame_channels = sample.data.grid_shape().map_or(1, |(c, _, _)| c);
    let channels = modality.channels(frame_channels);
    let mut rng = SplitMix64::new(mix(seed, stream::INIT));
    let scorer = new_scorer(
        &dims,
        cfg.bool("model.bn")?,
        cfg.parse("model.dropout")?,
        (channels, input_dim / channels),
        &mut rng,
    )
    .map_err(config_err)?;

    let segments: usize = cfg.parse("model.segments")?;
    let aggregator = match cfg.get("model.aggregator") {
        "max" => AggregatorConfig::Max,
        "average" => AggregatorConfig::Average,
        "top_k" => AggregatorConfig::TopK {
            k: cfg.parse("model.top_k")?,
        },
        "linear_weight" => AggregatorConfig::linear_uniform(segments),
        "attention" => AggregatorConfig::attention_zeros(scorer.last_hidden_dim()),
        other => {
            return Err(CliError::Config(format!(
                "model.aggregator: unknown value `{other}`"
            )))
        }
    };
    VideoModel::new(scorer, aggregator, segments, modality, augment).map_err(config_err)
}

pub fn train_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let out = ensure_out_dir(cfg)?;
    let manifest = data_manifest(cfg)?;
    let seed: u64 = cfg.parse("train.seed")?;

    let resume = cfg.get("paths.checkpoint");
    let mut model = if resume.is_empty() {
        build_model(cfg, &manifest, seed)?
    } else {
        let path = Path::new(resume);
        if !path.exists() {
            return Err(CliError::Config(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
        load_checkpoint(path).map_err(config_err)?
    };
    if model.num_classes() != manifest.label_space().num_classes() {
        return Err(CliError::Config(format!(
            "model predicts {} classes but the manifest has {}",
            model.num_classes(),
            manifest.label_space().num_classes()
        )));
    }

    let lr: f64 = cfg.parse("train.lr")?;
    let momentum: f64 = cfg.parse("train.momentum")?;
    let decay: f64 = cfg.parse("train.decay")?;
    let mut opt = if cfg.get("train.decay_points").trim().is_empty() {
        let mut opt = OptimizerState::new(lr, momentum);
        opt.decay = decay;
        opt
    } else {
        OptimizerState::with_schedule(lr, momentum, decay, cfg.list("train.decay_points")?)
    };
    let train_cfg = TrainConfig {
        batch_size: cfg.parse("train.batch")?,
        epochs: cfg.parse("train.epochs")?,
        seed,
        partial_bn: cfg.bool("train.partial_bn")?,
        alternating_omega: cfg.bool("train.alternating_omega")?,
        threads: cfg.parse("threads")?,
    };

    let history = train(&mut model, &manifest, &mut opt, &train_cfg).map_err(train_err)?;

    save_checkpoint(&model, &out.join("checkpoint.json")).map_err(runtime_err)?;
    save_history(&history, &out.join("history.jsonl")).map_err(runtime_err)?;
    write_resolved(cfg, &out)?;
    write_meta(
        &out,
        serde_json::json!({
            "command": "train",
            "wall_ms": started.elapsed().as_millis() as u64,
            "iterations": history.len(),
        }),
    )?;
    println!(
        "trained {} iterations; final loss {:.6}",
        history.len(),
        history.last().map_or(f64::NAN, |h| h.loss)
    );
    Ok(())
}

fn checkpoint_paths(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let raw = cfg.get("paths.checkpoint");
    let paths: Vec<PathBuf> = raw
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| PathBuf::from(p.trim()))
        .collect();
    if paths.is_empty() {
        return Err(CliError::Config(
            "paths.checkpoint is required (use --checkpoint)".into(),
        ));
    }
    for path in &paths {
        if !path.exists() {
            return Err(CliError::Config(format!(
                "checkpoint {} does not exist",
                path.display()
            )));
        }
    }
    Ok(paths)
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let started = Instant::now();
    let out = ensure_out_dir(cfg)?;
    let manifest = data_manifest(cfg)?;
    let threads: usize = cfg.parse("threads")?;

    let models: Vec<VideoModel> = checkpoint_paths(cfg)?
        .iter()
        .map(|p| load_checkpoint(p).map_err(config_err))
        .collect::<Result<_, _>>()?;
    let fusion_weights: Vec<f64> = cfg.list("eval.fusion")?;
    let fusion = if fusion_weights.is_empty() {
        FusionSpec::uniform(models.len())
    } else {
        FusionSpec {
            weights: fusion_weights,
        }
    };
    fusion.validate(models.len()).map_err(config_err)?;

    let mut report = match cfg.get("eval.protocol") {
        "trimmed" => {
            let consensus = match cfg.get("eval.consensus") {
                "average" => TestConsensus::Average,
                "model" => TestConsensus::Model,
                other => {
                    return Err(CliError::Config(format!(
                        "eval.consensus: unknown value `{other}`"
                    )))
                }
            };
            let ten_crop = match cfg.parse::<usize>("eval.crops")? {
                1 => false,
                10 => true,
                other => {
                    return Err(CliError::Config(format!(
                        "eval.crops must be 1 or 10, got {other}"
                    )))
                }
            };
            let opts = PredictOptions {
                num_snippets: cfg.parse("eval.snippets")?,
                ten_crop,
                consensus,
            };
            evaluate(
                &manifest,
                |video| predict_trimmed(&models, &fusion, video, &opts),
                Protocol::Trimmed,
                threads,
            )
            .map_err(runtime_err)?
        }
        "untrimmed" => {
            let scales: Vec<usize> = cfg.list("eval.scales")?;
            if scales.is_empty() {
                return Err(CliError::Config("eval.scales must not be empty".into()));
            }
            let fps: f64 = cfg.parse("eval.fps")?;
            let mut traces = Vec::new();
            let mut fused = HashMap::new();
            for video in manifest.records().iter().filter(|r| r.label.is_some()) {
                let output = mtwi(&models, &fusion, video, &scales, fps).map_err(runtime_err)?;
                traces.push((video.id.clone(), output.scales));
                fused.insert(video.id.clone(), output.fused);
            }
            let report = evaluate(
                &manifest,
                |video| Ok(fused[&video.id].clone()),
                Protocol::Untrimmed,
                threads,
            )
            .map_err(runtime_err)?;
            save_scale_traces_csv(&traces, &out.join("scale_traces.csv")).map_err(runtime_err)?;
            report
        }
        other => {
            return Err(CliError::Config(format!(
                "eval.protocol: unknown value `{other}`"
            )))
        }
    };

    report.config = cfg.resolved();
    save_report(&report, &out.join("report.json")).map_err(runtime_err)?;
    if report.per_class_ap.is_some() {
        save_per_class_ap_csv(&report, &out.join("per_class_ap.csv")).map_err(runtime_err)?;
    }
    write_resolved(cfg, &out)?;
    write_meta(
        &out,
        serde_json::json!({
            "command": "eval",
            "wall_ms": started.elapsed().as_millis() as u64,
            "videos": report.predictions.len(),
        }),
    )?;
    match (report.accuracy, report.map) {
        (Some(accuracy), _) => println!(
            "accuracy {accuracy:.4} over {} videos",
            report.predictions.len()
        ),
        (None, Some(map)) => println!("mAP {map:.4} over {} videos", report.predictions.len()),
        _ => {}
    }
    Ok(())
}

fn parse_kinds(raw: Option<&str>) -> Result<Vec<AggregatorKind>, CliError> {
    let Some(raw) = raw else {
        return Ok(ALL_KINDS.to_vec());
    };
    raw.split(',')
        .map(|name| match name.trim() {
            "max" => Ok(AggregatorKind::Max),
            "average" => Ok(AggregatorKind::Average),
            "top_k" => Ok(AggregatorKind::TopK),
            "linear_weight" => Ok(AggregatorKind::LinearWeight),
            "attention" => Ok(AggregatorKind::Attention),
            other => Err(CliError::Config(format!(
                "--kinds: unknown aggregator `{other}`"
            ))),
        })
        .collect()
}

/// Builds a one-video-per-class probe corpus from the corpus section, checks
/// the requested aggregators on its first video, and prints the JSON report.
/// Exit is zero only when every tensor passes.
pub fn gradcheck_cmd(cfg: &RunConfig, kinds: Option<&str>) -> Result<(), CliError> {
    let kinds = parse_kinds(kinds)?;
    let seed: u64 = cfg.parse("train.seed")?;

    let mut rng = SplitMix64::new(mix(seed, stream::SIGNALS));
    let mut spec = build_synth_spec(cfg, &mut rng)?;
    spec.videos_per_class = 1;
    let manifest = generate_trimmed_corpus(&spec, seed).map_err(config_err)?;
    let model = build_model(cfg, &manifest, seed)?;

    let report = gradcheck(&model, &manifest.records()[0], &kinds, seed).map_err(train_err)?;
    let text = serde_json::to_string_pretty(&report).map_err(runtime_err)?;
    println!("{text}");

    if !cfg.get("paths.out").is_empty() {
        let out = ensure_out_dir(cfg)?;
        std::fs::write(out.join("gradcheck.json"), format!("{text}\n")).map_err(runtime_err)?;
        write_resolved(cfg, &out)?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime(
            "gradient check failed; see the report above".into(),
        ))
    }
}
