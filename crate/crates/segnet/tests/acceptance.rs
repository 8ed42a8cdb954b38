//! Release gate: ten numbered checks over gradients, pooling identities,
//! training trends, window arithmetic, determinism, and metrics. Every check
//! prints exactly one verdict line; run
//! `cargo test --test acceptance -- --nocapture --test-threads=1`
//! to see them in order.

mod common;

use common::*;
use segnet::consensus::{
    self, softmax_jacobian, AggregatorConfig, AggregatorKind, ConsensusCache, SnippetScores,
    ALL_KINDS,
};
use segnet::corpus::{
    gaussian_pool, generate_trimmed_corpus, generate_untrimmed_corpus, save_manifest,
    CorpusManifest, FrameData, LabelSpace, Split, UntrimmedSpec, VideoRecord,
};
use segnet::inference::{
    average_precision, evaluate, mtwi, predict_untrimmed_average, save_report, window_count,
    window_start, window_topk, FusionSpec, PredictOptions, Protocol, TestConsensus,
    DEFAULT_SCALES,
};
use segnet::rng::{mix, stable_hash, SplitMix64};
use segnet::sampling::ModalitySpec;
use segnet::scorer::{cross_modality_init, new_scorer, LayerParams, ScorerParams};
use segnet::training::{
    gradcheck, save_checkpoint, train, OptimizerState, TrainConfig, VideoModel,
    GRADCHECK_THRESHOLD,
};
use std::time::Instant;

fn verdict(number: usize, name: &str, pass: bool, details: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("gate {number:>2} [{tag}] {name}: {details}");
    assert!(pass, "gate {number} ({name}) failed: {details}");
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn gaussian_video(dim: usize, frames: usize, label: usize, seed: u64) -> VideoRecord {
    let mut rng = SplitMix64::new(mix(seed, 0xF00D));
    let frames: Vec<Vec<f64>> = (0..frames)
        .map(|_| (0..dim).map(|_| rng.next_gaussian()).collect())
        .collect();
    VideoRecord {
        id: format!("video-{seed}"),
        label: Some(label),
        data: FrameData::Features { dim, frames },
        fps: 1.0,
        trimmed: true,
    }
}

/// Every analytic gradient (snippet scores, omega, omega_att, attention
/// features, all scorer parameters end-to-end) agrees with central finite
/// differences for all five aggregators, on five seeds, within the budget.
#[test]
fn gate_01_gradient_fidelity_against_finite_differences() {
    let started = Instant::now();
    let seeds = [101u64, 202, 303, 404, 505];
    let (classes, dim) = (4usize, 10usize);
    let mut worst: f64 = 0.0;
    let mut all_pass = true;

    for &seed in &seeds {
        let model = feature_model(
            &[dim, 16, 12, classes],
            4,
            AggregatorConfig::Average,
            true,
            0.25,
            seed,
        );
        let video = gaussian_video(dim, 40, (seed as usize) % classes, seed);
        let report = gradcheck(&model, &video, &ALL_KINDS, seed).unwrap();
        all_pass &= report.pass;

        for kind in &report.kinds {
            let names: Vec<&str> = kind.tensors.iter().map(|t| t.tensor.as_str()).collect();
            let mut required = vec![
                "scores",
                "layer0.weight",
                "layer0.bias",
                "layer1.weight",
                "layer1.bias",
                "layer2.weight",
                "layer2.bias",
                "bn0.gamma",
                "bn0.beta",
                "bn1.gamma",
                "bn1.beta",
            ];
            match kind.kind {
                AggregatorKind::LinearWeight => required.push("omega"),
                AggregatorKind::Attention => {
                    required.push("omega_att");
                    required.push("features");
                }
                _ => {}
            }
            for want in required {
                assert!(
                    names.contains(&want),
                    "{} report is missing tensor {want}",
                    kind.kind
                );
            }
            for t in &kind.tensors {
                worst = worst.max(t.rel_err);
            }
        }
    }

    let elapsed = started.elapsed();
    let pass = all_pass && worst < GRADCHECK_THRESHOLD && elapsed.as_secs() < 60;
    verdict(
        1,
        "gradient fidelity",
        pass,
        &format!(
            "worst rel err {worst:.2e} (threshold {GRADCHECK_THRESHOLD:.0e}) over {} seeds x 5 aggregators in {elapsed:.2?}",
            seeds.len()
        ),
    );
}

/// TopK(1) == Max and TopK(K) == Average bit for bit; uniform linear
/// weighting and attention over identical features match Average to 1e-12.
#[test]
fn gate_02_pooling_identities() {
    let mut rng = SplitMix64::new(mix(2, 0xACCE55));
    let cases = 100;
    let mut bitwise_ok = true;
    let mut worst_abs: f64 = 0.0;

    for _ in 0..cases {
        let k = 1 + (rng.next_u64() % 8) as usize;
        let c = 1 + (rng.next_u64() % 6) as usize;
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..c).map(|_| 2.0 * rng.next_gaussian()).collect())
            .collect();
        let scores = SnippetScores::new(rows).unwrap();
        let pool = |cfg: &AggregatorConfig, feats: Option<&[Vec<f64>]>| {
            consensus::forward(&scores, cfg, feats).unwrap().g
        };

        let max_g = pool(&AggregatorConfig::Max, None);
        let avg_g = pool(&AggregatorConfig::Average, None);
        bitwise_ok &= bits_equal(&pool(&AggregatorConfig::TopK { k: 1 }, None), &max_g);
        bitwise_ok &= bits_equal(&pool(&AggregatorConfig::TopK { k }, None), &avg_g);

        let lin = pool(&AggregatorConfig::linear_uniform(k), None);
        for (l, a) in lin.iter().zip(&avg_g) {
            worst_abs = worst_abs.max((l - a).abs());
        }

        let feature: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
        let omega_att: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
        let shared = vec![feature; k];
        let att = pool(
            &AggregatorConfig::Attention { omega_att },
            Some(&shared),
        );
        for (t, a) in att.iter().zip(&avg_g) {
            worst_abs = worst_abs.max((t - a).abs());
        }
    }

    let pass = bitwise_ok && worst_abs < 1e-12;
    verdict(
        2,
        "pooling identities",
        pass,
        &format!(
            "{cases} random score matrices; bitwise identities {}; worst |diff| {worst_abs:.2e}",
            if bitwise_ok { "hold" } else { "BROKEN" }
        ),
    );
}

/// Attention weights through the public forward path, with one-dimensional
/// features acting as raw energies.
fn attention_weights(logits: &[f64]) -> Vec<f64> {
    let k = logits.len();
    let scores = SnippetScores::new(vec![vec![0.0]; k]).unwrap();
    let features: Vec<Vec<f64>> = logits.iter().map(|&e| vec![e]).collect();
    let out = consensus::forward(
        &scores,
        &AggregatorConfig::Attention {
            omega_att: vec![1.0],
        },
        Some(&features),
    )
    .unwrap();
    match out.cache {
        ConsensusCache::Attention(state) => state.weights,
        _ => unreachable!("attention cache"),
    }
}

/// Attention weights sum to one and the softmax Jacobian matches central
/// finite differences, over a thousand random energy vectors.
#[test]
fn gate_03_attention_normalization_and_jacobian() {
    let mut rng = SplitMix64::new(mix(3, 0xACCE55));
    let mut worst_sum: f64 = 0.0;
    let mut worst_jac: f64 = 0.0;
    let step = 1e-5;

    for _ in 0..1000 {
        let k = 2 + (rng.next_u64() % 7) as usize;
        let logits: Vec<f64> = (0..k).map(|_| 8.0 * rng.next_f64() - 4.0).collect();

        let weights = attention_weights(&logits);
        worst_sum = worst_sum.max((weights.iter().sum::<f64>() - 1.0).abs());

        let jac = softmax_jacobian(&weights);
        for l in 0..k {
            let mut plus = logits.clone();
            plus[l] += step;
            let mut minus = logits.clone();
            minus[l] -= step;
            let (wp, wm) = (attention_weights(&plus), attention_weights(&minus));
            for i in 0..k {
                let fd = (wp[i] - wm[i]) / (2.0 * step);
                worst_jac = worst_jac.max((jac[i][l] - fd).abs());
            }
        }
    }

    let pass = worst_sum < 1e-12 && worst_jac < 1e-6;
    verdict(
        3,
        "attention normalization",
        pass,
        &format!("1000 energy vectors; worst |sum-1| {worst_sum:.2e}, worst Jacobian diff {worst_jac:.2e}"),
    );
}

/// Training with three segments beats training with one by at least five
/// accuracy points (median over five seeds) on videos whose single frames
/// are ambiguous between classes.
#[test]
fn gate_04_segment_count_trend() {
    let started = Instant::now();
    let (classes, phases, dim) = (4, 3, 6);
    let mut accs = Vec::new();

    for seed in 1..=5u64 {
        let signals = cyclic_signals(classes, phases, dim, seed);
        let train_set = generate_trimmed_corpus(
            &feature_spec(
                signals.clone(),
                0.5,
                (30, 60),
                30,
                Split::Train,
                &format!("seg{seed}-train"),
            ),
            seed,
        )
        .unwrap();
        let held_out = generate_trimmed_corpus(
            &feature_spec(signals, 0.5, (30, 60), 25, Split::Val, &format!("seg{seed}-val")),
            seed,
        )
        .unwrap();

        let accuracy_for = |segments: usize| {
            let mut model = feature_model(
                &[dim, 32, classes],
                segments,
                AggregatorConfig::Average,
                false,
                0.0,
                mix(seed, 0x5E6),
            );
            quick_train(&mut model, &train_set, 0.2, 10, 8, seed);
            accuracy_on(&model, &held_out, &PredictOptions::default())
        };
        accs.push((accuracy_for(3), accuracy_for(1)));
    }

    let gaps: Vec<f64> = accs.iter().map(|(three, one)| three - one).collect();
    let med = median(gaps.clone());
    let elapsed = started.elapsed();
    let pass = med >= 0.05 && elapsed.as_secs() < 300;
    verdict(
        4,
        "segment-count trend",
        pass,
        &format!(
            "median gap {:.1} points (per-seed {:?}) in {elapsed:.2?}",
            100.0 * med,
            gaps.iter().map(|g| (100.0 * g).round()).collect::<Vec<_>>()
        ),
    );
}

/// On videos where the action occupies only part of the timeline, median
/// accuracy over five seeds orders the consensus functions: top-K at least
/// average, attention at least max.
#[test]
fn gate_05_consensus_trend_on_untrimmed_videos() {
    let (classes, phases, dim, segments) = (4, 3, 8, 7);
    let hidden = 32;
    let mut per_kind: Vec<Vec<f64>> = vec![Vec::new(); 4];

    for seed in 1..=5u64 {
        let signals = independent_signals(classes, phases, dim, seed);
        let mut pool_rng = SplitMix64::new(mix(seed, 0xB6));
        let background = gaussian_pool(6, dim, 0.0, 1.0, &mut pool_rng);
        let make = |videos, split, prefix: String| UntrimmedSpec {
            base: feature_spec(signals.clone(), 0.8, (50, 90), videos, split, &prefix),
            background: background.clone(),
            fraction_range: (0.05, 0.2),
        };
        let (train_set, _) =
            generate_untrimmed_corpus(&make(24, Split::Train, format!("con{seed}-train")), seed)
                .unwrap();
        let (held_out, _) =
            generate_untrimmed_corpus(&make(20, Split::Val, format!("con{seed}-val")), seed)
                .unwrap();

        let aggregators = [
            AggregatorConfig::TopK { k: 2 },
            AggregatorConfig::Average,
            AggregatorConfig::Attention {
                omega_att: vec![0.0; hidden],
            },
            AggregatorConfig::Max,
        ];
        for (slot, aggregator) in aggregators.into_iter().enumerate() {
            let mut model = feature_model(
                &[dim, hidden, classes],
                segments,
                aggregator,
                false,
                0.0,
                mix(seed, 0xC5),
            );
            quick_train(&mut model, &train_set, 0.1, 8, 8, seed);
            let acc = accuracy_on(
                &model,
                &held_out,
                &PredictOptions {
                    consensus: TestConsensus::Model,
                    ..PredictOptions::default()
                },
            );
            per_kind[slot].push(acc);
        }
    }

    let top_k = median(per_kind[0].clone());
    let average = median(per_kind[1].clone());
    let attention = median(per_kind[2].clone());
    let max = median(per_kind[3].clone());
    let pass = top_k >= average && attention >= max;
    verdict(
        5,
        "consensus trend",
        pass,
        &format!(
            "median accuracy: top-k {top_k:.3} vs average {average:.3}; attention {attention:.3} vs max {max:.3}"
        ),
    );
}

/// Window counts, strides, and top-K pool sizes match the closed forms on a
/// table of (timeline length, scale) pairs, with exact integer arithmetic.
#[test]
fn gate_06_window_arithmetic_table() {
    // (m, l) -> (window count, top-k size)
    let table = [
        (100, 1, 125, 32),
        (20, 4, 6, 6),
        (8, 1, 10, 10),
        (100, 16, 7, 7),
        (40, 2, 25, 15),
        (16, 16, 1, 1),
        (200, 8, 31, 15),
        (5, 16, 1, 1),
        (60, 1, 75, 19),
        (120, 4, 37, 15),
    ];
    let mut ok = true;
    for &(m, l, n, k) in &table {
        ok &= window_count(m, l) == n;
        ok &= window_topk(n) == k;
    }

    // Stride floor(0.8 * l * j) spot checks, exact in integers.
    let starts = [
        (0, 1, 0),
        (1, 1, 0),
        (2, 1, 1),
        (10, 1, 8),
        (1, 4, 3),
        (2, 4, 6),
        (3, 16, 38),
        (124, 1, 99),
    ];
    for &(j, l, s) in &starts {
        ok &= window_start(j, l) == s;
    }

    verdict(
        6,
        "window arithmetic",
        ok,
        &format!("{} (m, l) pairs and {} stride cases, exact", table.len(), starts.len()),
    );
}

/// One feature channel per class, scores read off directly.
fn identity_model(classes: usize) -> VideoModel {
    let weight = (0..classes)
        .map(|i| (0..classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let scorer = ScorerParams {
        layers: vec![LayerParams {
            weight,
            bias: vec![0.0; classes],
        }],
        bn: vec![],
        dropout_p: 0.0,
        input_layout: (1, classes),
    };
    VideoModel::new(
        scorer,
        AggregatorConfig::Average,
        1,
        ModalitySpec::feature_passthrough(),
        None,
    )
    .unwrap()
}

/// Videos where the true class fires briefly at full strength while some
/// other class hums in the background the whole time: averaging ranks the
/// hum above the spike, window integration does not.
fn spike_corpus(seed: u64) -> CorpusManifest {
    let (classes, per_class) = (4usize, 25usize);
    let labels =
        LabelSpace::new((0..classes).map(|c| format!("class-{c}")).collect()).unwrap();
    let mut records = Vec::with_capacity(classes * per_class);
    for idx in 0..classes * per_class {
        let label = idx % classes;
        let id = format!("spike{seed}-{idx:04}");
        let mut rng = SplitMix64::new(mix(seed, stable_hash(&id)));
        let m = rng.uniform_usize(80, 140);
        let spike_len = (m / 20).max(3);
        let start = rng.uniform_usize(0, m - spike_len);
        let confuser = (label + 1 + rng.uniform_usize(0, classes - 2)) % classes;
        let frames: Vec<Vec<f64>> = (0..m)
            .map(|t| {
                let in_spike = t >= start && t < start + spike_len;
                (0..classes)
                    .map(|ch| {
                        let mut v = 0.1 * rng.next_gaussian();
                        if in_spike && ch == label {
                            v += 2.0;
                        }
                        if !in_spike && ch == confuser {
                            v += 0.2;
                        }
                        v
                    })
                    .collect()
            })
            .collect();
        records.push(VideoRecord {
            id,
            label: Some(label),
            data: FrameData::Features {
                dim: classes,
                frames,
            },
            fps: 1.0,
            trimmed: false,
        });
    }
    CorpusManifest::new(labels, records, Split::Test).unwrap()
}

/// Multi-scale window integration beats whole-video averaging by at least
/// ten mAP points (median over five seeds) on spike-in-background videos.
#[test]
fn gate_07_window_integration_map_margin() {
    let model = identity_model(4);
    let models = std::slice::from_ref(&model);
    let fusion = FusionSpec::uniform(1);
    let mut gaps = Vec::new();

    for seed in 1..=5u64 {
        let corpus = spike_corpus(seed);
        let windowed = evaluate(
            &corpus,
            |video| mtwi(models, &fusion, video, &DEFAULT_SCALES, 1.0).map(|out| out.fused),
            Protocol::Untrimmed,
            1,
        )
        .unwrap()
        .map
        .unwrap();
        let averaged = evaluate(
            &corpus,
            |video| predict_untrimmed_average(models, &fusion, video, 1.0),
            Protocol::Untrimmed,
            1,
        )
        .unwrap()
        .map
        .unwrap();
        gaps.push(windowed - averaged);
    }

    let med = median(gaps.clone());
    let pass = med >= 0.10;
    verdict(
        7,
        "window integration margin",
        pass,
        &format!(
            "median mAP gap {:.1} points (per-seed {:?})",
            100.0 * med,
            gaps.iter().map(|g| (100.0 * g).round()).collect::<Vec<_>>()
        ),
    );
}

/// Partial BN freezes every non-first running statistic bit for bit across
/// a 100-iteration run while the first layer's stay live; cross-modality
/// init preserves per-row channel-block means exactly and is the identity
/// for a single channel.
#[test]
fn gate_08_partial_bn_and_cross_modality_init() {
    let (classes, phases, dim) = (3, 2, 6);
    let signals = independent_signals(classes, phases, dim, 8);
    let train_set = generate_trimmed_corpus(
        &feature_spec(signals, 0.4, (12, 20), 8, Split::Train, "bn-train"),
        8,
    )
    .unwrap();

    let mut model = feature_model(
        &[dim, 16, 16, classes],
        3,
        AggregatorConfig::Average,
        true,
        0.0,
        42,
    );
    let before: Vec<(Vec<f64>, Vec<f64>)> = model
        .scorer
        .bn
        .iter()
        .map(|bn| {
            let bn = bn.as_ref().unwrap();
            (bn.running_mean.clone(), bn.running_var.clone())
        })
        .collect();

    let mut opt = OptimizerState::new(0.05, 0.9);
    let cfg = TrainConfig {
        batch_size: 2,
        epochs: 9,
        seed: 8,
        partial_bn: true,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &train_set, &mut opt, &cfg).unwrap();

    let after: Vec<(&Vec<f64>, &Vec<f64>)> = model
        .scorer
        .bn
        .iter()
        .map(|bn| {
            let bn = bn.as_ref().unwrap();
            (&bn.running_mean, &bn.running_var)
        })
        .collect();
    let iterations = history.len();
    let first_moved =
        !bits_equal(&before[0].0, after[0].0) || !bits_equal(&before[0].1, after[0].1);
    let rest_frozen =
        bits_equal(&before[1].0, after[1].0) && bits_equal(&before[1].1, after[1].1);

    let mut init_rng = SplitMix64::new(mix(88, 0xC0));
    let source = new_scorer(&[12, 8, classes], false, 0.0, (3, 4), &mut init_rng).unwrap();
    let widened = cross_modality_init(&source, 5).unwrap();
    let mut blocks_ok = true;
    for (src_row, dst_row) in source.layers[0].weight.iter().zip(&widened.layers[0].weight) {
        let mut mean = vec![0.0; 4];
        for c in 0..3 {
            for j in 0..4 {
                mean[j] += src_row[c * 4 + j];
            }
        }
        mean.iter_mut().for_each(|v| *v /= 3.0);
        for block in dst_row.chunks(4) {
            blocks_ok &= bits_equal(block, &mean);
        }
    }
    let single = new_scorer(&[4, 3, classes], false, 0.0, (1, 4), &mut init_rng).unwrap();
    let same = cross_modality_init(&single, 1).unwrap();
    let identity_ok = single.layers[0]
        .weight
        .iter()
        .zip(&same.layers[0].weight)
        .all(|(a, b)| bits_equal(a, b));

    let pass =
        iterations >= 100 && first_moved && rest_frozen && blocks_ok && identity_ok;
    verdict(
        8,
        "training-practice mechanics",
        pass,
        &format!(
            "{iterations} iterations: first BN moved {first_moved}, rest frozen {rest_frozen}; channel-block means exact {blocks_ok}, single-channel identity {identity_ok}"
        ),
    );
}

/// Same seed and config give byte-identical corpora, checkpoints, and
/// reports single-threaded, and per-iteration losses within 1e-10 relative
/// with four threads.
#[test]
fn gate_09_bitwise_determinism_and_thread_tolerance() {
    let dir = std::env::temp_dir().join(format!("segnet-gate9-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    let (classes, phases, dim) = (3, 2, 6);
    let spec = || feature_spec(independent_signals(classes, phases, dim, 9), 0.4, (15, 30), 8, Split::Train, "det");
    let corpus_a = generate_trimmed_corpus(&spec(), 9).unwrap();
    let corpus_b = generate_trimmed_corpus(&spec(), 9).unwrap();
    let (path_a, path_b) = (dir.join("a.jsonl"), dir.join("b.jsonl"));
    save_manifest(&corpus_a, &path_a).unwrap();
    save_manifest(&corpus_b, &path_b).unwrap();
    let corpora_ok = std::fs::read(&path_a).unwrap() == std::fs::read(&path_b).unwrap();

    let init = feature_model(
        &[dim, 16, classes],
        3,
        AggregatorConfig::TopK { k: 2 },
        true,
        0.1,
        33,
    );
    let run = |threads: usize| {
        let mut model = init.clone();
        let mut opt = OptimizerState::new(0.05, 0.9);
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 3,
            seed: 33,
            threads,
            ..TrainConfig::default()
        };
        let history = train(&mut model, &corpus_a, &mut opt, &cfg).unwrap();
        (model, history)
    };
    let (model_1a, history_1a) = run(1);
    let (model_1b, history_1b) = run(1);
    let (_, history_4) = run(4);

    let (ckpt_a, ckpt_b) = (dir.join("a.ckpt"), dir.join("b.ckpt"));
    save_checkpoint(&model_1a, &ckpt_a).unwrap();
    save_checkpoint(&model_1b, &ckpt_b).unwrap();
    let checkpoints_ok = std::fs::read(&ckpt_a).unwrap() == std::fs::read(&ckpt_b).unwrap();

    let fusion = FusionSpec::uniform(1);
    let opts = PredictOptions::default();
    let report_bytes = |model: &VideoModel, tag: &str| {
        let report = evaluate(
            &corpus_a,
            |video| {
                segnet::inference::predict_trimmed(
                    std::slice::from_ref(model),
                    &fusion,
                    video,
                    &opts,
                )
            },
            Protocol::Trimmed,
            1,
        )
        .unwrap();
        let path = dir.join(format!("{tag}.json"));
        save_report(&report, &path).unwrap();
        std::fs::read(&path).unwrap()
    };
    let reports_ok = report_bytes(&model_1a, "ra") == report_bytes(&model_1b, "rb");

    let same_len = history_1a.len() == history_4.len();
    let mut worst_rel: f64 = 0.0;
    for (a, b) in history_1a.iter().zip(&history_4) {
        let rel = (a.loss - b.loss).abs() / a.loss.abs().max(1e-300);
        worst_rel = worst_rel.max(rel);
    }
    let identical_single = history_1a
        .iter()
        .zip(&history_1b)
        .all(|(a, b)| a.loss.to_bits() == b.loss.to_bits());

    std::fs::remove_dir_all(&dir).unwrap();

    let pass = corpora_ok
        && checkpoints_ok
        && reports_ok
        && identical_single
        && same_len
        && worst_rel <= 1e-10;
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "bytes equal (corpus {corpora_ok}, checkpoint {checkpoints_ok}, report {reports_ok}); 4-thread loss rel diff {worst_rel:.2e}"
        ),
    );
}

/// The hand-computed three-video ranking gives AP 5/6 to 1e-12, and
/// accuracy and mAP stay inside [0, 1] on random inputs.
#[test]
fn gate_10_metric_correctness() {
    let scores = [0.9, 0.7, 0.4];
    let positives = [true, false, true];
    let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let ap = average_precision(&scores, &positives, &ids).unwrap();
    let hand_ok = (ap - 5.0 / 6.0).abs() < 1e-12;

    let mut rng = SplitMix64::new(mix(10, 0xACCE55));
    let mut bounded_ok = true;
    for _ in 0..200 {
        let classes = 2 + (rng.next_u64() % 4) as usize;
        let videos = 1 + (rng.next_u64() % 12) as usize;
        let labels =
            LabelSpace::new((0..classes).map(|c| format!("class-{c}")).collect()).unwrap();
        let records: Vec<VideoRecord> = (0..videos)
            .map(|i| VideoRecord {
                id: format!("rand-{i:03}"),
                label: Some((rng.next_u64() % classes as u64) as usize),
                data: FrameData::Features {
                    dim: 1,
                    frames: vec![vec![0.0]],
                },
                fps: 1.0,
                trimmed: true,
            })
            .collect();
        let manifest = CorpusManifest::new(labels, records, Split::Test).unwrap();

        // Quantized scores force ties; the metrics must stay in range.
        let score_of = |video: &VideoRecord| {
            let mut vrng = SplitMix64::new(stable_hash(&video.id));
            Ok((0..classes)
                .map(|_| (vrng.next_f64() * 4.0).round() / 4.0)
                .collect())
        };
        let trimmed = evaluate(&manifest, score_of, Protocol::Trimmed, 1).unwrap();
        let acc = trimmed.accuracy.unwrap();
        bounded_ok &= (0.0..=1.0).contains(&acc);
        let untrimmed = evaluate(&manifest, score_of, Protocol::Untrimmed, 1).unwrap();
        let map = untrimmed.map.unwrap();
        bounded_ok &= (0.0..=1.0).contains(&map);
        for class_ap in untrimmed.per_class_ap.unwrap().into_iter().flatten() {
            bounded_ok &= (0.0..=1.0).contains(&class_ap);
        }
    }

    let pass = hand_ok && bounded_ok;
    verdict(
        10,
        "metric correctness",
        pass,
        &format!("hand-ranked AP {ap:.12} vs 5/6; 200 random manifests stayed in [0, 1]: {bounded_ok}"),
    );
}
