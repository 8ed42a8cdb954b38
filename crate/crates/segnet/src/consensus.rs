//! Segmental consensus: five aggregation functions reducing a K x C snippet
//! score matrix to one video-level score vector, each with an analytic
//! backward pass.
//!
//! Max and per-class top-K route gradient only to the selected snippets;
//! average and linear weighting spread it; attention computes data-dependent
//! softmax weights from snippet features, and its backward also returns the
//! gradient flowing into those features (the path that makes the attention
//! parameters trainable end to end).

use serde::{Deserialize, Serialize};

use crate::math::{dot, softmax};

#[derive(Debug, thiserror::Error)]
pub enum ConsensusError {
    #[error("scores matrix must have at least one row")]
    Empty,
    #[error("score row {row} has width {found}, expected {expected}")]
    Ragged {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("attention requires snippet features")]
    MissingFeatures,
    #[error("features: expected {expected} rows of dim {dim}, got row {row} of dim {found}")]
    BadFeatures {
        expected: usize,
        dim: usize,
        row: usize,
        found: usize,
    },
    #[error("omega has length {found}, expected {expected} (one weight per snippet)")]
    BadOmega { found: usize, expected: usize },
    #[error("top-k size must be >= 1")]
    ZeroTopK,
    #[error("upstream gradient has length {found}, expected {expected}")]
    BadUpstream { found: usize, expected: usize },
    #[error("cache does not match aggregator config")]
    CacheMismatch,
}

/// Pre-softmax class scores of the K snippets, row k = snippet k.
#[derive(Debug, Clone, PartialEq)]
pub struct SnippetScores {
    scores: Vec<Vec<f64>>,
}

impl SnippetScores {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self, ConsensusError> {
        if scores.is_empty() {
            return Err(ConsensusError::Empty);
        }
        let width = scores[0].len();
        if width == 0 {
            return Err(ConsensusError::Ragged {
                row: 0,
                found: 0,
                expected: 1,
            });
        }
        for (row, r) in scores.iter().enumerate() {
            if r.len() != width {
                return Err(ConsensusError::Ragged {
                    row,
                    found: r.len(),
                    expected: width,
                });
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(ConsensusError::NonFinite {
                    what: format!("score row {row}"),
                });
            }
        }
        Ok(Self { scores })
    }

    pub fn num_snippets(&self) -> usize {
        self.scores.len()
    }

    pub fn num_classes(&self) -> usize {
        self.scores[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.scores
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Max,
    Average,
    TopK,
    LinearWeight,
    Attention,
}

pub const ALL_KINDS: [AggregatorKind; 5] = [
    AggregatorKind::Max,
    AggregatorKind::Average,
    AggregatorKind::TopK,
    AggregatorKind::LinearWeight,
    AggregatorKind::Attention,
];

impl std::fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AggregatorKind::Max => "max",
            AggregatorKind::Average => "average",
            AggregatorKind::TopK => "top_k",
            AggregatorKind::LinearWeight => "linear_weight",
            AggregatorKind::Attention => "attention",
        };
        f.write_str(name)
    }
}

/// Which consensus function to apply, with its parameters. `omega` and
/// `omega_att` are learnable; `k` is fixed and clamped to the snippet count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AggregatorConfig {
    Max,
    Average,
    TopK { k: usize },
    LinearWeight { omega: Vec<f64> },
    Attention { omega_att: Vec<f64> },
}

impl AggregatorConfig {
    pub fn kind(&self) -> AggregatorKind {
        match self {
            AggregatorConfig::Max => AggregatorKind::Max,
            AggregatorConfig::Average => AggregatorKind::Average,
            AggregatorConfig::TopK { .. } => AggregatorKind::TopK,
            AggregatorConfig::LinearWeight { .. } => AggregatorKind::LinearWeight,
            AggregatorConfig::Attention { .. } => AggregatorKind::Attention,
        }
    }

    /// Linear weighting at its initialization point: every snippet weighted
    /// 1/K, coinciding with Average at step 0.
    pub fn linear_uniform(num_snippets: usize) -> Self {
        AggregatorConfig::LinearWeight {
            omega: vec![1.0 / num_snippets as f64; num_snippets],
        }
    }

    /// Attention at its initialization point: zero weights give uniform
    /// softmax attention regardless of features.
    pub fn attention_zeros(feature_dim: usize) -> Self {
        AggregatorConfig::Attention {
            omega_att: vec![0.0; feature_dim],
        }
    }

    fn validate(&self, num_snippets: usize) -> Result<(), ConsensusError> {
        match self {
            AggregatorConfig::Max | AggregatorConfig::Average => Ok(()),
            AggregatorConfig::TopK { k } => {
                if *k == 0 {
                    Err(ConsensusError::ZeroTopK)
                } else {
                    Ok(())
                }
            }
            AggregatorConfig::LinearWeight { omega } => {
                if omega.len() != num_snippets {
                    return Err(ConsensusError::BadOmega {
                        found: omega.len(),
                        expected: num_snippets,
                    });
                }
                if omega.iter().any(|v| !v.is_finite()) {
                    return Err(ConsensusError::NonFinite {
                        what: "omega".into(),
                    });
                }
                Ok(())
            }
            AggregatorConfig::Attention { omega_att } => {
                if omega_att.is_empty() || omega_att.iter().any(|v| !v.is_finite()) {
                    return Err(ConsensusError::NonFinite {
                        what: "omega_att".into(),
                    });
                }
                Ok(())
            }
        }
    }
}

/// Attention internals kept for backward: features R(T_k), logits e, and the
/// softmax weights A.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionState {
    pub features: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConsensusCache {
    Max { argmax: Vec<usize> },
    Average,
    TopK { selected: Vec<Vec<usize>>, k_used: usize },
    LinearWeight,
    Attention(AttentionState),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusOutput {
    pub g: Vec<f64>,
    pub cache: ConsensusCache,
}

/// Gradients of the consensus inputs and parameters given `dL/dg`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusGrads {
    pub d_scores: Vec<Vec<f64>>,
    pub d_omega: Option<Vec<f64>>,
    pub d_omega_att: Option<Vec<f64>>,
    pub d_features: Option<Vec<Vec<f64>>>,
}

fn check_features(
    features: Option<&[Vec<f64>]>,
    num_snippets: usize,
) -> Result<Vec<Vec<f64>>, ConsensusError> {
    let features = features.ok_or(ConsensusError::MissingFeatures)?;
    if features.len() != num_snippets || features.is_empty() {
        return Err(ConsensusError::BadFeatures {
            expected: num_snippets,
            dim: features.first().map_or(0, |f| f.len()),
            row: features.len(),
            found: 0,
        });
    }
    let dim = features[0].len();
    for (row, f) in features.iter().enumerate() {
        if f.len() != dim {
            return Err(ConsensusError::BadFeatures {
                expected: num_snippets,
                dim,
                row,
                found: f.len(),
            });
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(ConsensusError::NonFinite {
                what: format!("feature row {row}"),
            });
        }
    }
    Ok(features.to_vec())
}

/// Indices of the `k` largest entries, ties broken toward lower index,
/// returned in ascending index order.
fn top_k_indices(column: impl Iterator<Item = f64> + Clone, k: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = column.enumerate().collect();
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut picked: Vec<usize> = order.iter().take(k).map(|&(i, _)| i).collect();
    picked.sort_unstable();
    picked
}

pub fn forward(
    scores: &SnippetScores,
    cfg: &AggregatorConfig,
    features: Option<&[Vec<f64>]>,
) -> Result<ConsensusOutput, ConsensusError> {
    let k_snippets = scores.num_snippets();
    let c = scores.num_classes();
    cfg.validate(k_snippets)?;

    match cfg {
        AggregatorConfig::Max => {
            let mut g = Vec::with_capacity(c);
            let mut argmax = Vec::with_capacity(c);
            for i in 0..c {
                let mut best = 0;
                for k in 1..k_snippets {
                    if scores.rows()[k][i] > scores.rows()[best][i] {
                        best = k;
                    }
                }
                argmax.push(best);
                g.push(scores.rows()[best][i]);
            }
            Ok(ConsensusOutput {
                g,
                cache: ConsensusCache::Max { argmax },
            })
        }
        AggregatorConfig::Average => {
            let g = (0..c)
                .map(|i| {
                    let sum: f64 = scores.rows().iter().map(|row| row[i]).sum();
                    sum / k_snippets as f64
                })
                .collect();
            Ok(ConsensusOutput {
                g,
                cache: ConsensusCache::Average,
            })
        }
        AggregatorConfig::TopK { k } => {
            let k_used = (*k).min(k_snippets);
            let mut g = Vec::with_capacity(c);
            let mut selected = Vec::with_capacity(c);
            for i in 0..c {
                let picked =
                    top_k_indices(scores.rows().iter().map(move |row| row[i]), k_used);
                let sum: f64 = picked.iter().map(|&k| scores.rows()[k][i]).sum();
                g.push(sum / k_used as f64);
                selected.push(picked);
            }
            Ok(ConsensusOutput {
                g,
                cache: ConsensusCache::TopK { selected, k_used },
            })
        }
        AggregatorConfig::LinearWeight { omega } => {
            let g = (0..c)
                .map(|i| {
                    scores
                        .rows()
                        .iter()
                        .zip(omega)
                        .map(|(row, &w)| w * row[i])
                        .sum()
                })
                .collect();
            Ok(ConsensusOutput {
                g,
                cache: ConsensusCache::LinearWeight,
            })
        }
        AggregatorConfig::Attention { omega_att } => {
            let features = check_features(features, k_snippets)?;
            if features[0].len() != omega_att.len() {
                return Err(ConsensusError::BadFeatures {
                    expected: k_snippets,
                    dim: omega_att.len(),
                    row: 0,
                    found: features[0].len(),
                });
            }
            let logits: Vec<f64> = features.iter().map(|r| dot(omega_att, r)).collect();
            let weights = softmax(&logits);
            let g = (0..c)
                .map(|i| {
                    scores
                        .rows()
                        .iter()
                        .zip(&weights)
                        .map(|(row, &a)| a * row[i])
                        .sum()
                })
                .collect();
            Ok(ConsensusOutput {
                g,
                cache: ConsensusCache::Attention(AttentionState {
                    features,
                    logits,
                    weights,
                }),
            })
        }
    }
}

/// Softmax Jacobian at weights A: `J[k][l] = A_k (1 - A_k)` on the diagonal,
/// `-A_k A_l` off it.
pub fn softmax_jacobian(weights: &[f64]) -> Vec<Vec<f64>> {
    let n = weights.len();
    let mut jac = vec![vec![0.0; n]; n];
    for k in 0..n {
        for l in 0..n {
            jac[k][l] = if k == l {
                weights[k] * (1.0 - weights[l])
            } else {
                -weights[k] * weights[l]
            };
        }
    }
    jac
}

pub fn backward(
    scores: &SnippetScores,
    cfg: &AggregatorConfig,
    cache: &ConsensusCache,
    upstream: &[f64],
) -> Result<ConsensusGrads, ConsensusError> {
    let k_snippets = scores.num_snippets();
    let c = scores.num_classes();
    cfg.validate(k_snippets)?;
    if upstream.len() != c {
        return Err(ConsensusError::BadUpstream {
            found: upstream.len(),
            expected: c,
        });
    }
    let mut d_scores = vec![vec![0.0; c]; k_snippets];

    match (cfg, cache) {
        (AggregatorConfig::Max, ConsensusCache::Max { argmax }) => {
            if argmax.len() != c {
                return Err(ConsensusError::CacheMismatch);
            }
            for i in 0..c {
                d_scores[argmax[i]][i] = upstream[i];
            }
            Ok(ConsensusGrads {
                d_scores,
                d_omega: None,
                d_omega_att: None,
                d_features: None,
            })
        }
        (AggregatorConfig::Average, ConsensusCache::Average) => {
            for row in &mut d_scores {
                for i in 0..c {
                    row[i] = upstream[i] / k_snippets as f64;
                }
            }
            Ok(ConsensusGrads {
                d_scores,
                d_omega: None,
                d_omega_att: None,
                d_features: None,
            })
        }
        (AggregatorConfig::TopK { .. }, ConsensusCache::TopK { selected, k_used }) => {
            if selected.len() != c {
                return Err(ConsensusError::CacheMismatch);
            }
            for i in 0..c {
                for &k in &selected[i] {
                    d_scores[k][i] = upstream[i] / *k_used as f64;
                }
            }
            Ok(ConsensusGrads {
                d_scores,
                d_omega: None,
                d_omega_att: None,
                d_features: None,
            })
        }
        (AggregatorConfig::LinearWeight { omega }, ConsensusCache::LinearWeight) => {
            for (k, row) in d_scores.iter_mut().enumerate() {
                for i in 0..c {
                    row[i] = upstream[i] * omega[k];
                }
            }
            let d_omega = (0..k_snippets)
                .map(|k| (0..c).map(|i| upstream[i] * scores.rows()[k][i]).sum())
                .collect();
            Ok(ConsensusGrads {
                d_scores,
                d_omega: Some(d_omega),
                d_omega_att: None,
                d_features: None,
            })
        }
        (AggregatorConfig::Attention { omega_att }, ConsensusCache::Attention(state)) => {
            if state.weights.len() != k_snippets || state.features.len() != k_snippets {
                return Err(ConsensusError::CacheMismatch);
            }
            let weights = &state.weights;
            for (k, row) in d_scores.iter_mut().enumerate() {
                for i in 0..c {
                    row[i] = upstream[i] * weights[k];
                }
            }
            // dL/dA_k, then back through the softmax Jacobian to the logits.
            let d_weights: Vec<f64> = (0..k_snippets)
                .map(|k| (0..c).map(|i| upstream[i] * scores.rows()[k][i]).sum())
                .collect();
            let jac = softmax_jacobian(weights);
            let d_logits: Vec<f64> = (0..k_snippets)
                .map(|l| (0..k_snippets).map(|k| d_weights[k] * jac[k][l]).sum())
                .collect();
            let dim = omega_att.len();
            let mut d_omega_att = vec![0.0; dim];
            for k in 0..k_snippets {
                for j in 0..dim {
                    d_omega_att[j] += d_logits[k] * state.features[k][j];
                }
            }
            let d_features = (0..k_snippets)
                .map(|k| omega_att.iter().map(|&w| d_logits[k] * w).collect())
                .collect();
            Ok(ConsensusGrads {
                d_scores,
                d_omega: None,
                d_omega_att: Some(d_omega_att),
                d_features: Some(d_features),
            })
        }
        _ => Err(ConsensusError::CacheMismatch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::max_rel_err;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    const FD_STEP: f64 = 1e-5;

    fn matrix(rows: &[&[f64]]) -> SnippetScores {
        SnippetScores::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn example_scores() -> SnippetScores {
        matrix(&[&[0.2, 0.5], &[0.7, 0.1], &[0.4, 0.3]])
    }

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| (0..cols).map(|_| rng.next_gaussian()).collect())
            .collect()
    }

    /// Independent top-k oracle: enumerate all index subsets of size k, take
    /// the one with the largest sum (lexicographically smallest on ties) and
    /// average it.
    fn brute_force_top_k(column: &[f64], k: usize) -> f64 {
        let n = column.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != k {
                continue;
            }
            let subset: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            let sum: f64 = subset.iter().map(|&i| column[i]).sum();
            let better = match &best {
                None => true,
                Some((s, ids)) => sum > *s || (sum == *s && subset < *ids),
            };
            if better {
                best = Some((sum, subset));
            }
        }
        let (sum, _) = best.unwrap();
        sum / k as f64
    }

    /// Central finite differences of `sum_i upstream_i * g_i` with respect to
    /// every score entry.
    fn fd_scores(
        scores: &SnippetScores,
        cfg: &AggregatorConfig,
        features: Option<&[Vec<f64>]>,
        upstream: &[f64],
    ) -> Vec<Vec<f64>> {
        let eval = |rows: &[Vec<f64>]| -> f64 {
            let s = SnippetScores::new(rows.to_vec()).unwrap();
            let out = forward(&s, cfg, features).unwrap();
            out.g.iter().zip(upstream).map(|(g, u)| g * u).sum()
        };
        let mut rows = scores.rows().to_vec();
        let mut grads = vec![vec![0.0; scores.num_classes()]; scores.num_snippets()];
        for k in 0..scores.num_snippets() {
            for i in 0..scores.num_classes() {
                let orig = rows[k][i];
                rows[k][i] = orig + FD_STEP;
                let plus = eval(&rows);
                rows[k][i] = orig - FD_STEP;
                let minus = eval(&rows);
                rows[k][i] = orig;
                grads[k][i] = (plus - minus) / (2.0 * FD_STEP);
            }
        }
        grads
    }

    fn fd_vector(
        mut eval: impl FnMut(&[f64]) -> f64,
        at: &[f64],
    ) -> Vec<f64> {
        let mut point = at.to_vec();
        let mut grad = vec![0.0; at.len()];
        for j in 0..at.len() {
            let orig = point[j];
            point[j] = orig + FD_STEP;
            let plus = eval(&point);
            point[j] = orig - FD_STEP;
            let minus = eval(&point);
            point[j] = orig;
            grad[j] = (plus - minus) / (2.0 * FD_STEP);
        }
        grad
    }

    fn flatten(rows: &[Vec<f64>]) -> Vec<f64> {
        rows.iter().flatten().copied().collect()
    }

    #[test]
    fn max_picks_per_class_maxima() {
        let out = forward(&example_scores(), &AggregatorConfig::Max, None).unwrap();
        assert_eq!(out.g, vec![0.7, 0.5]);
    }

    #[test]
    fn average_matches_hand_value() {
        let out = forward(&example_scores(), &AggregatorConfig::Average, None).unwrap();
        assert!((out.g[0] - 13.0 / 30.0).abs() < 1e-15);
        assert!((out.g[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn top2_averages_the_two_best_per_class() {
        let out = forward(&example_scores(), &AggregatorConfig::TopK { k: 2 }, None).unwrap();
        assert!((out.g[0] - 0.55).abs() < 1e-15);
        assert!((out.g[1] - 0.4).abs() < 1e-15);
        match out.cache {
            ConsensusCache::TopK { selected, .. } => {
                assert_eq!(selected, vec![vec![1, 2], vec![0, 2]]);
            }
            _ => panic!("wrong cache"),
        }
    }

    #[test]
    fn top_k_matches_brute_force_enumeration() {
        let mut rng = SplitMix64::new(31);
        for _ in 0..50 {
            let rows = random_matrix(&mut rng, 6, 4);
            let scores = SnippetScores::new(rows.clone()).unwrap();
            for k in 1..=6 {
                let out = forward(&scores, &AggregatorConfig::TopK { k }, None).unwrap();
                for i in 0..4 {
                    let column: Vec<f64> = rows.iter().map(|r| r[i]).collect();
                    let oracle = brute_force_top_k(&column, k);
                    assert!((out.g[i] - oracle).abs() < 1e-12, "k={k} i={i}");
                }
            }
        }
    }

    #[test]
    fn single_snippet_consensus_is_identity() {
        let scores = matrix(&[&[0.3, -1.2, 0.8]]);
        let features = vec![vec![0.5, -0.5]];
        let configs = [
            AggregatorConfig::Max,
            AggregatorConfig::Average,
            AggregatorConfig::TopK { k: 1 },
            AggregatorConfig::LinearWeight { omega: vec![1.0] },
            AggregatorConfig::Attention {
                omega_att: vec![0.2, 0.1],
            },
        ];
        for cfg in configs {
            let out = forward(&scores, &cfg, Some(&features)).unwrap();
            assert_eq!(out.g, vec![0.3, -1.2, 0.8], "{cfg:?}");
        }
    }

    #[test]
    fn top1_is_bitwise_max_and_topk_is_bitwise_average() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..20 {
            let rows = random_matrix(&mut rng, 5, 3);
            let scores = SnippetScores::new(rows).unwrap();
            let max = forward(&scores, &AggregatorConfig::Max, None).unwrap();
            let top1 = forward(&scores, &AggregatorConfig::TopK { k: 1 }, None).unwrap();
            assert_eq!(max.g, top1.g);

            let avg = forward(&scores, &AggregatorConfig::Average, None).unwrap();
            let top5 = forward(&scores, &AggregatorConfig::TopK { k: 5 }, None).unwrap();
            assert_eq!(avg.g, top5.g);
        }
    }

    #[test]
    fn uniform_linear_weight_matches_average() {
        let mut rng = SplitMix64::new(9);
        let rows = random_matrix(&mut rng, 7, 4);
        let scores = SnippetScores::new(rows).unwrap();
        let avg = forward(&scores, &AggregatorConfig::Average, None).unwrap();
        let lin = forward(&scores, &AggregatorConfig::linear_uniform(7), None).unwrap();
        for (a, l) in avg.g.iter().zip(&lin.g) {
            assert!((a - l).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_identical_features_matches_average() {
        let mut rng = SplitMix64::new(10);
        let rows = random_matrix(&mut rng, 4, 3);
        let scores = SnippetScores::new(rows).unwrap();
        let features = vec![vec![0.7, -0.2, 1.1]; 4];
        let cfg = AggregatorConfig::Attention {
            omega_att: vec![0.4, 0.9, -0.3],
        };
        let out = forward(&scores, &cfg, Some(&features)).unwrap();
        let avg = forward(&scores, &AggregatorConfig::Average, None).unwrap();
        for (a, b) in out.g.iter().zip(&avg.g) {
            assert!((a - b).abs() < 1e-12);
        }
        match out.cache {
            ConsensusCache::Attention(state) => {
                assert!(state.weights.iter().all(|&w| (w - 0.25).abs() < 1e-15));
            }
            _ => panic!("wrong cache"),
        }
    }

    #[test]
    fn attention_weights_normalize() {
        let mut rng = SplitMix64::new(12);
        for _ in 0..100 {
            let rows = random_matrix(&mut rng, 5, 2);
            let scores = SnippetScores::new(rows).unwrap();
            let features = random_matrix(&mut rng, 5, 3);
            let cfg = AggregatorConfig::Attention {
                omega_att: (0..3).map(|_| rng.next_gaussian()).collect(),
            };
            let out = forward(&scores, &cfg, Some(&features)).unwrap();
            match out.cache {
                ConsensusCache::Attention(state) => {
                    let sum: f64 = state.weights.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                    assert!(state.weights.iter().all(|&w| w > 0.0 && w < 1.0));
                }
                _ => panic!("wrong cache"),
            }
        }
    }

    #[test]
    fn attention_without_features_is_an_error() {
        let scores = example_scores();
        let cfg = AggregatorConfig::attention_zeros(3);
        assert!(matches!(
            forward(&scores, &cfg, None),
            Err(ConsensusError::MissingFeatures)
        ));
    }

    #[test]
    fn nan_scores_are_rejected() {
        assert!(matches!(
            SnippetScores::new(vec![vec![0.0, f64::NAN]]),
            Err(ConsensusError::NonFinite { .. })
        ));
    }

    #[test]
    fn max_backward_routes_to_winners_only() {
        let scores = example_scores();
        let out = forward(&scores, &AggregatorConfig::Max, None).unwrap();
        let grads = backward(&scores, &AggregatorConfig::Max, &out.cache, &[1.0, 1.0]).unwrap();
        assert_eq!(
            grads.d_scores,
            vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]]
        );
    }

    #[test]
    fn average_backward_is_constant_over_snippets() {
        let scores = example_scores();
        let out = forward(&scores, &AggregatorConfig::Average, None).unwrap();
        let grads =
            backward(&scores, &AggregatorConfig::Average, &out.cache, &[3.0, 3.0]).unwrap();
        assert_eq!(grads.d_scores, vec![vec![1.0, 1.0]; 3]);
    }

    #[test]
    fn jacobian_at_uniform_two_point_softmax() {
        let jac = softmax_jacobian(&[0.5, 0.5]);
        assert_eq!(jac[0][0], 0.25);
        assert_eq!(jac[0][1], -0.25);
        assert_eq!(jac[1][0], -0.25);
        assert_eq!(jac[1][1], 0.25);
    }

    #[test]
    fn jacobian_matches_finite_differences_over_many_logit_vectors() {
        let mut rng = SplitMix64::new(77);
        for case in 0..1000 {
            let n = 2 + (case % 5);
            let logits: Vec<f64> = (0..n).map(|_| 1.5 * rng.next_gaussian()).collect();
            let weights = crate::math::softmax(&logits);
            let jac = softmax_jacobian(&weights);
            let numeric: Vec<f64> = (0..n)
                .flat_map(|k| fd_vector(|e| crate::math::softmax(e)[k], &logits))
                .collect();
            let err = max_rel_err(&flatten(&jac), &numeric);
            assert!(err < 1e-6, "case {case}: err {err}");
        }
    }

    #[test]
    fn every_kind_matches_finite_differences_on_scores() {
        for seed in 0..5u64 {
            let mut rng = SplitMix64::new(seed);
            let (k, c, d) = (4, 3, 6);
            let rows = random_matrix(&mut rng, k, c);
            let scores = SnippetScores::new(rows).unwrap();
            let features = random_matrix(&mut rng, k, d);
            let upstream: Vec<f64> = (0..c).map(|_| rng.next_gaussian()).collect();
            let configs = [
                AggregatorConfig::Max,
                AggregatorConfig::Average,
                AggregatorConfig::TopK { k: 2 },
                AggregatorConfig::LinearWeight {
                    omega: (0..k).map(|_| rng.next_gaussian()).collect(),
                },
                AggregatorConfig::Attention {
                    omega_att: (0..d).map(|_| rng.next_gaussian()).collect(),
                },
            ];
            for cfg in &configs {
                let out = forward(&scores, cfg, Some(&features)).unwrap();
                let grads = backward(&scores, cfg, &out.cache, &upstream).unwrap();
                let numeric = fd_scores(&scores, cfg, Some(&features), &upstream);
                let err = max_rel_err(&flatten(&grads.d_scores), &flatten(&numeric));
                assert!(err < 1e-6, "seed {seed} {cfg:?}: dScores err {err}");
            }
        }
    }

    #[test]
    fn omega_gradient_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = SplitMix64::new(100 + seed);
            let (k, c) = (5, 3);
            let rows = random_matrix(&mut rng, k, c);
            let scores = SnippetScores::new(rows).unwrap();
            let omega: Vec<f64> = (0..k).map(|_| rng.next_gaussian()).collect();
            let upstream: Vec<f64> = (0..c).map(|_| rng.next_gaussian()).collect();

            let cfg = AggregatorConfig::LinearWeight {
                omega: omega.clone(),
            };
            let out = forward(&scores, &cfg, None).unwrap();
            let grads = backward(&scores, &cfg, &out.cache, &upstream).unwrap();

            let numeric = fd_vector(
                |w| {
                    let cfg = AggregatorConfig::LinearWeight { omega: w.to_vec() };
                    let out = forward(&scores, &cfg, None).unwrap();
                    out.g.iter().zip(&upstream).map(|(g, u)| g * u).sum()
                },
                &omega,
            );
            let err = max_rel_err(grads.d_omega.as_ref().unwrap(), &numeric);
            assert!(err < 1e-6, "seed {seed}: dOmega err {err}");
        }
    }

    #[test]
    fn attention_parameter_and_feature_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = SplitMix64::new(200 + seed);
            let (k, c, d) = (4, 3, 5);
            let rows = random_matrix(&mut rng, k, c);
            let scores = SnippetScores::new(rows).unwrap();
            let features = random_matrix(&mut rng, k, d);
            let omega_att: Vec<f64> = (0..d).map(|_| rng.next_gaussian()).collect();
            let upstream: Vec<f64> = (0..c).map(|_| rng.next_gaussian()).collect();

            let cfg = AggregatorConfig::Attention {
                omega_att: omega_att.clone(),
            };
            let out = forward(&scores, &cfg, Some(&features)).unwrap();
            let grads = backward(&scores, &cfg, &out.cache, &upstream).unwrap();

            let numeric_omega = fd_vector(
                |w| {
                    let cfg = AggregatorConfig::Attention {
                        omega_att: w.to_vec(),
                    };
                    let out = forward(&scores, &cfg, Some(&features)).unwrap();
                    out.g.iter().zip(&upstream).map(|(g, u)| g * u).sum()
                },
                &omega_att,
            );
            let err = max_rel_err(grads.d_omega_att.as_ref().unwrap(), &numeric_omega);
            assert!(err < 1e-6, "seed {seed}: dOmegaAtt err {err}");

            let flat_features = flatten(&features);
            let numeric_features = fd_vector(
                |f| {
                    let rebuilt: Vec<Vec<f64>> =
                        f.chunks(d).map(|chunk| chunk.to_vec()).collect();
                    let out = forward(&scores, &cfg, Some(&rebuilt)).unwrap();
                    out.g.iter().zip(&upstream).map(|(g, u)| g * u).sum()
                },
                &flat_features,
            );
            let err = max_rel_err(
                &flatten(grads.d_features.as_ref().unwrap()),
                &numeric_features,
            );
            assert!(err < 1e-6, "seed {seed}: dFeatures err {err}");
        }
    }

    #[test]
    fn cache_config_mismatch_is_an_error() {
        let scores = example_scores();
        let out = forward(&scores, &AggregatorConfig::Max, None).unwrap();
        let err = backward(&scores, &AggregatorConfig::Average, &out.cache, &[1.0, 1.0]);
        assert!(matches!(err, Err(ConsensusError::CacheMismatch)));
    }

    #[test]
    fn topk_clamps_to_snippet_count() {
        let scores = matrix(&[&[1.0, 2.0], &[3.0, 0.0]]);
        let out = forward(&scores, &AggregatorConfig::TopK { k: 10 }, None).unwrap();
        let avg = forward(&scores, &AggregatorConfig::Average, None).unwrap();
        assert_eq!(out.g, avg.g);
    }

    #[test]
    fn config_round_trips_through_json() {
        let configs = [
            AggregatorConfig::Max,
            AggregatorConfig::TopK { k: 3 },
            AggregatorConfig::LinearWeight {
                omega: vec![0.25, 0.75],
            },
            AggregatorConfig::Attention {
                omega_att: vec![0.1, -0.2, 0.3],
            },
        ];
        for cfg in &configs {
            let text = serde_json::to_string(cfg).unwrap();
            let back: AggregatorConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(&back, cfg);
        }
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_linear_weight_positionality(
            seed in 0u64..500,
            k in 2usize..6,
            c in 1usize..4,
        ) {
            let mut rng = SplitMix64::new(seed);
            let rows = random_matrix(&mut rng, k, c);
            let features = random_matrix(&mut rng, k, 3);
            let mut perm: Vec<usize> = (0..k).collect();
            rng.shuffle(&mut perm);
            let permuted_rows: Vec<Vec<f64>> = perm.iter().map(|&p| rows[p].clone()).collect();
            let permuted_features: Vec<Vec<f64>> =
                perm.iter().map(|&p| features[p].clone()).collect();

            let scores = SnippetScores::new(rows.clone()).unwrap();
            let permuted = SnippetScores::new(permuted_rows).unwrap();
            let upstream: Vec<f64> = (0..c).map(|_| rng.next_gaussian()).collect();

            let omega_att: Vec<f64> = (0..3).map(|_| rng.next_gaussian()).collect();
            let invariant_cfgs = [
                AggregatorConfig::Max,
                AggregatorConfig::Average,
                AggregatorConfig::TopK { k: 2 },
                AggregatorConfig::Attention { omega_att },
            ];
            for cfg in &invariant_cfgs {
                let a = forward(&scores, cfg, Some(&features)).unwrap();
                let b = forward(&permuted, cfg, Some(&permuted_features)).unwrap();
                for (x, y) in a.g.iter().zip(&b.g) {
                    prop_assert!((x - y).abs() < 1e-12, "{cfg:?}");
                }
                // Per-snippet gradients follow the permutation.
                let ga = backward(&scores, cfg, &a.cache, &upstream).unwrap();
                let gb = backward(&permuted, cfg, &b.cache, &upstream).unwrap();
                for (j, &p) in perm.iter().enumerate() {
                    for i in 0..c {
                        prop_assert!(
                            (ga.d_scores[p][i] - gb.d_scores[j][i]).abs() < 1e-12,
                            "{cfg:?}"
                        );
                    }
                }
            }

            // LinearWeight is positional: permuting rows under a non-uniform
            // omega changes the output.
            let omega: Vec<f64> = (0..k).map(|i| (i + 1) as f64).collect();
            let cfg = AggregatorConfig::LinearWeight { omega };
            let a = forward(&scores, &cfg, None).unwrap();
            let b = forward(&permuted, &cfg, None).unwrap();
            if perm.iter().enumerate().any(|(i, &p)| i != p) {
                let moved = (0..c).any(|i| {
                    (0..k).any(|j| (rows[j][i] - rows[perm[j]][i]).abs() > 1e-9)
                });
                if moved {
                    prop_assert!(a.g.iter().zip(&b.g).any(|(x, y)| (x - y).abs() > 1e-12));
                }
            }
        }

        #[test]
        fn max_average_topk_are_positively_homogeneous(
            seed in 0u64..500,
            scale in 0.1f64..10.0,
        ) {
            let mut rng = SplitMix64::new(seed);
            let rows = random_matrix(&mut rng, 4, 3);
            let scaled: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|v| v * scale).collect())
                .collect();
            let scores = SnippetScores::new(rows).unwrap();
            let scaled = SnippetScores::new(scaled).unwrap();
            for cfg in [
                AggregatorConfig::Max,
                AggregatorConfig::Average,
                AggregatorConfig::TopK { k: 2 },
            ] {
                let a = forward(&scores, &cfg, None).unwrap();
                let b = forward(&scaled, &cfg, None).unwrap();
                for (x, y) in a.g.iter().zip(&b.g) {
                    prop_assert!((x * scale - y).abs() < 1e-9 * scale.max(1.0), "{cfg:?}");
                }
            }
        }
    }
}
