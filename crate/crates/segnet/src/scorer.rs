//! The snippet scorer F(T; W): a fully-connected network with explicit
//! forward and backward passes.
//!
//! Hidden layers run affine -> batch norm (optional) -> ReLU; inverted
//! dropout follows the last hidden layer; a final affine produces the C
//! logits. The last hidden activation (pre-dropout) doubles as the snippet
//! feature R(T) for attention consensus, and backward accepts an extra
//! upstream gradient for it.
//!
//! Batch normalization statistics are supplied per mini-batch via
//! [`compute_batch_stats`] and treated as constants in backward, which keeps
//! per-sample backward passes independent; frozen layers always normalize
//! with their running statistics.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum ScorerError {
    #[error("{what}: expected {expected}, found {found}")]
    DimMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid scorer shape: {0}")]
    BadShape(String),
    #[error("dropout_p must be in [0, 1), got {0}")]
    BadDropout(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("first layer width {width} is not divisible by {channels} channels")]
    BadChannelBlocks { width: usize, channels: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Row-major `out x in` weight matrix.
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LayerParams {
    pub fn out_dim(&self) -> usize {
        self.weight.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.first().map_or(0, |r| r.len())
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weight
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// When set, train-mode forwards normalize with the running statistics
    /// and batch-stat pooling leaves them untouched.
    pub frozen_stats: bool,
}

impl BnState {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.1,
            eps: 1e-5,
            frozen_stats: false,
        }
    }
}

/// All scorer parameters. `bn[l]` attaches to hidden layer `l`; the final
/// (logit) layer never carries BN.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerParams {
    pub layers: Vec<LayerParams>,
    pub bn: Vec<Option<BnState>>,
    /// Drop probability; kept units scale by 1/(1-p) at train time.
    pub dropout_p: f64,
    /// (channels, per-channel width) of the input vector; channel blocks are
    /// the unit cross-modality initialization averages over.
    pub input_layout: (usize, usize),
}

impl ScorerParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim())
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim())
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Width of the last hidden layer; the input width for a single-layer
    /// scorer, whose "feature" is the raw input.
    pub fn last_hidden_dim(&self) -> usize {
        if self.layers.len() == 1 {
            self.input_dim()
        } else {
            self.layers[self.layers.len() - 2].out_dim()
        }
    }

    pub fn validate(&self) -> Result<(), ScorerError> {
        if self.layers.is_empty() {
            return Err(ScorerError::BadShape("no layers".into()));
        }
        for window in self.layers.windows(2) {
            if window[1].in_dim() != window[0].out_dim() {
                return Err(ScorerError::BadShape(format!(
                    "layer widths do not chain: {} -> {}",
                    window[0].out_dim(),
                    window[1].in_dim()
                )));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.iter().any(|r| r.len() != layer.in_dim()) {
                return Err(ScorerError::BadShape(format!("layer {i} weight rows ragged")));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(ScorerError::DimMismatch {
                    what: format!("layer {i} bias"),
                    expected: layer.out_dim(),
                    found: layer.bias.len(),
                });
            }
        }
        if self.bn.len() != self.num_hidden() {
            return Err(ScorerError::DimMismatch {
                what: "bn slots".into(),
                expected: self.num_hidden(),
                found: self.bn.len(),
            });
        }
        for (l, bn) in self.bn.iter().enumerate() {
            if let Some(bn) = bn {
                let dim = self.layers[l].out_dim();
                for (name, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    if v.len() != dim {
                        return Err(ScorerError::DimMismatch {
                            what: format!("bn {l} {name}"),
                            expected: dim,
                            found: v.len(),
                        });
                    }
                }
                if !(bn.eps > 0.0) {
                    return Err(ScorerError::BadShape(format!("bn {l} eps must be > 0")));
                }
                if bn.running_var.iter().any(|&v| v < 0.0) {
                    return Err(ScorerError::BadShape(format!("bn {l} negative running_var")));
                }
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ScorerError::BadDropout(self.dropout_p));
        }
        let (c, d) = self.input_layout;
        if c * d != self.input_dim() {
            return Err(ScorerError::DimMismatch {
                what: "input_layout product".into(),
                expected: self.input_dim(),
                found: c * d,
            });
        }
        Ok(())
    }

    /// Learnable tensors in a fixed order: per layer its weight (row-major)
    /// and bias, then gamma and beta when the hidden layer carries BN.
    /// Running statistics are state, not parameters, and are excluded.
    pub fn learnable_layout(&self) -> Vec<(String, usize)> {
        let mut layout = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layout.push((format!("layer{l}.weight"), layer.out_dim() * layer.in_dim()));
            layout.push((format!("layer{l}.bias"), layer.out_dim()));
            if l < self.num_hidden() {
                if let Some(bn) = &self.bn[l] {
                    layout.push((format!("bn{l}.gamma"), bn.gamma.len()));
                    layout.push((format!("bn{l}.beta"), bn.beta.len()));
                }
            }
        }
        layout
    }

    pub fn flatten_learnables(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            flat.extend(layer.weight.iter().flatten());
            flat.extend(&layer.bias);
            if l < self.num_hidden() {
                if let Some(bn) = &self.bn[l] {
                    flat.extend(&bn.gamma);
                    flat.extend(&bn.beta);
                }
            }
        }
        flat
    }

    pub fn set_learnables(&mut self, flat: &[f64]) {
        let mut cursor = 0;
        let mut take = |n: usize| {
            let slice = &flat[cursor..cursor + n];
            cursor += n;
            slice
        };
        let hidden = self.num_hidden();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let in_dim = layer.in_dim();
            for row in &mut layer.weight {
                row.copy_from_slice(take(in_dim));
            }
            let out = layer.bias.len();
            layer.bias.copy_from_slice(take(out));
            if l < hidden {
                if let Some(bn) = &mut self.bn[l] {
                    let dim = bn.gamma.len();
                    bn.gamma.copy_from_slice(take(dim));
                    bn.beta.copy_from_slice(take(dim));
                }
            }
        }
        assert_eq!(cursor, flat.len(), "flat parameter vector length mismatch");
    }
}

/// Builds a scorer over `dims = [input, hidden.., classes]` with uniform
/// fan-in init U(-sqrt(6/(in+out)), sqrt(6/(in+out))), zero biases, and
/// fresh BN on every hidden layer when `bn_hidden` is set.
pub fn new_scorer(
    dims: &[usize],
    bn_hidden: bool,
    dropout_p: f64,
    input_layout: (usize, usize),
    rng: &mut SplitMix64,
) -> Result<ScorerParams, ScorerError> {
    if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
        return Err(ScorerError::BadShape(format!("bad layer dims {dims:?}")));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (in_dim, out_dim) = (w[0], w[1]);
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..out_dim)
            .map(|_| (0..in_dim).map(|_| (rng.next_f64() * 2.0 - 1.0) * bound).collect())
            .collect();
        layers.push(LayerParams {
            weight,
            bias: vec![0.0; out_dim],
        });
    }
    let bn = (0..dims.len() - 2)
        .map(|l| bn_hidden.then(|| BnState::new(dims[l + 1])))
        .collect();
    let params = ScorerParams {
        layers,
        bn,
        dropout_p,
        input_layout,
    };
    params.validate()?;
    Ok(params)
}

/// The default shape: input -> 64 -> 64 -> classes.
pub fn default_dims(input_dim: usize, num_classes: usize) -> Vec<usize> {
    vec![input_dim, 64, 64, num_classes]
}

/// Per-hidden-layer batch statistics (mean, biased variance), present only
/// for unfrozen BN layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    per_layer: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

/// Pools pre-BN activations across a mini-batch, records (mean, variance)
/// for every unfrozen BN layer, and folds them into the running statistics
/// once: r <- (1-momentum) r + momentum * batch. Frozen layers keep their
/// stats bit-identical. The returned stats feed each sample's
/// [`forward_train`] in the same batch.
pub fn compute_batch_stats(
    params: &mut ScorerParams,
    inputs: &[&[f64]],
) -> Result<BatchStats, ScorerError> {
    params.validate()?;
    if inputs.is_empty() {
        return Err(ScorerError::EmptyBatch);
    }
    for input in inputs {
        check_input(params, input)?;
    }
    let n = inputs.len() as f64;
    let mut activations: Vec<Vec<f64>> = inputs.iter().map(|i| i.to_vec()).collect();
    let mut per_layer = Vec::with_capacity(params.num_hidden());
    for l in 0..params.num_hidden() {
        let pre: Vec<Vec<f64>> = activations
            .iter()
            .map(|a| params.layers[l].apply(a))
            .collect();
        let dim = params.layers[l].out_dim();
        let stats = match &mut params.bn[l] {
            Some(bn) if !bn.frozen_stats => {
                let mut mean = vec![0.0; dim];
                for z in &pre {
                    for (m, v) in mean.iter_mut().zip(z) {
                        *m += v;
                    }
                }
                for m in &mut mean {
                    *m /= n;
                }
                let mut var = vec![0.0; dim];
                for z in &pre {
                    for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(z) {
                        *v += (x - m) * (x - m);
                    }
                }
                for v in &mut var {
                    *v /= n;
                }
                for (r, &b) in bn.running_mean.iter_mut().zip(&mean) {
                    *r = (1.0 - bn.momentum) * *r + bn.momentum * b;
                }
                for (r, &b) in bn.running_var.iter_mut().zip(&var) {
                    *r = (1.0 - bn.momentum) * *r + bn.momentum * b;
                }
                Some((mean, var))
            }
            _ => None,
        };
        activations = pre
            .into_iter()
            .map(|z| {
                let h = match (&params.bn[l], &stats) {
                    (Some(bn), Some((mean, var))) => bn_apply(bn, &z, mean, var).0,
                    (Some(bn), None) => bn_apply(bn, &z, &bn.running_mean, &bn.running_var).0,
                    (None, _) => z,
                };
                h.into_iter().map(|v| v.max(0.0)).collect()
            })
            .collect();
        per_layer.push(stats);
    }
    Ok(BatchStats { per_layer })
}

fn bn_apply(bn: &BnState, z: &[f64], mean: &[f64], var: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
    let x_hat: Vec<f64> = z
        .iter()
        .zip(mean)
        .zip(&inv_std)
        .map(|((&z, &m), &s)| (z - m) * s)
        .collect();
    let out = x_hat
        .iter()
        .zip(&bn.gamma)
        .zip(&bn.beta)
        .map(|((&x, &g), &b)| g * x + b)
        .collect();
    (out, x_hat, inv_std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerOutput {
    pub logits: Vec<f64>,
    /// Last hidden activation before dropout: the snippet feature R(T).
    pub last_hidden: Vec<f64>,
}

struct BnApplied {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Everything backward needs from one train-mode forward.
pub struct ScorerCache {
    layer_inputs: Vec<Vec<f64>>,
    bn_applied: Vec<Option<BnApplied>>,
    post_act: Vec<Vec<f64>>,
    /// Per-unit multiplier: 0 (dropped) or 1/(1-p); all-ones when p = 0.
    dropout_mask: Vec<f64>,
}

fn check_input(params: &ScorerParams, input: &[f64]) -> Result<(), ScorerError> {
    if input.len() != params.input_dim() {
        return Err(ScorerError::DimMismatch {
            what: "input".into(),
            expected: params.input_dim(),
            found: input.len(),
        });
    }
    Ok(())
}

fn select_bn_stats<'a>(
    bn: &'a BnState,
    layer: usize,
    batch_stats: Option<&'a BatchStats>,
) -> (&'a [f64], &'a [f64]) {
    if !bn.frozen_stats {
        if let Some(stats) = batch_stats {
            if let Some(Some((mean, var))) = stats.per_layer.get(layer) {
                return (mean, var);
            }
        }
    }
    // Frozen layers, and solo forwards with no pooled batch, normalize with
    // the running statistics.
    (&bn.running_mean, &bn.running_var)
}

/// Train-mode forward. BN layers normalize with `batch_stats` when unfrozen
/// (falling back to running stats), dropout draws one multiplier per last-
/// hidden unit from `rng` (when dropout_p > 0), and the cache captures every
/// intermediate backward needs. Running statistics are not touched here;
/// [`compute_batch_stats`] owns their update.
pub fn forward_train(
    params: &ScorerParams,
    input: &[f64],
    batch_stats: Option<&BatchStats>,
    rng: &mut SplitMix64,
) -> Result<(ScorerOutput, ScorerCache), ScorerError> {
    check_input(params, input)?;
    let hidden = params.num_hidden();
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut bn_applied = Vec::with_capacity(hidden);
    let mut post_act = Vec::with_capacity(hidden);
    let mut current = input.to_vec();

    for l in 0..hidden {
        layer_inputs.push(current.clone());
        let z = params.layers[l].apply(&current);
        let h = match &params.bn[l] {
            Some(bn) => {
                let (mean, var) = select_bn_stats(bn, l, batch_stats);
                let (out, x_hat, inv_std) = bn_apply(bn, &z, mean, var);
                bn_applied.push(Some(BnApplied { x_hat, inv_std }));
                out
            }
            None => {
                bn_applied.push(None);
                z
            }
        };
        current = h.into_iter().map(|v| v.max(0.0)).collect();
        post_act.push(current.clone());
    }

    let last_hidden = current.clone();
    let dropout_mask = if hidden > 0 && params.dropout_p > 0.0 {
        let keep_scale = 1.0 / (1.0 - params.dropout_p);
        let mask: Vec<f64> = (0..current.len())
            .map(|_| {
                if rng.next_f64() >= params.dropout_p {
                    keep_scale
                } else {
                    0.0
                }
            })
            .collect();
        current = current.iter().zip(&mask).map(|(v, m)| v * m).collect();
        mask
    } else {
        vec![1.0; current.len()]
    };

    layer_inputs.push(current.clone());
    let logits = params.layers[hidden].apply(&current);

    Ok((
        ScorerOutput {
            logits,
            last_hidden,
        },
        ScorerCache {
            layer_inputs,
            bn_applied,
            post_act,
            dropout_mask,
        },
    ))
}

/// Eval-mode forward: running statistics everywhere, no dropout; a pure
/// function of (params, input).
pub fn forward_eval(params: &ScorerParams, input: &[f64]) -> Result<ScorerOutput, ScorerError> {
    check_input(params, input)?;
    let hidden = params.num_hidden();
    let mut current = input.to_vec();
    for l in 0..hidden {
        let z = params.layers[l].apply(&current);
        let h = match &params.bn[l] {
            Some(bn) => bn_apply(bn, &z, &bn.running_mean, &bn.running_var).0,
            None => z,
        };
        current = h.into_iter().map(|v| v.max(0.0)).collect();
    }
    let last_hidden = current.clone();
    let logits = params.layers[hidden].apply(&current);
    Ok(ScorerOutput {
        logits,
        last_hidden,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScorerGrads {
    pub layers: Vec<LayerGrads>,
    pub bn: Vec<Option<BnGrads>>,
}

impl ScorerGrads {
    pub fn zeros(params: &ScorerParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![vec![0.0; l.in_dim()]; l.out_dim()],
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            bn: params
                .bn
                .iter()
                .map(|bn| {
                    bn.as_ref().map(|b| BnGrads {
                        gamma: vec![0.0; b.gamma.len()],
                        beta: vec![0.0; b.beta.len()],
                    })
                })
                .collect(),
        }
    }

    /// Same order as [`ScorerParams::flatten_learnables`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            flat.extend(layer.weight.iter().flatten());
            flat.extend(&layer.bias);
            if l < self.bn.len() {
                if let Some(bn) = &self.bn[l] {
                    flat.extend(&bn.gamma);
                    flat.extend(&bn.beta);
                }
            }
        }
        flat
    }
}

/// Backprop through the cached forward. `d_last_hidden` is the gradient
/// arriving at the pre-dropout feature R(T) (zero when consensus has no
/// feature path). Normalization statistics are constants here, so the result
/// is the exact gradient of the forward that produced the cache. For a
/// single-layer scorer the feature is the raw input and `d_last_hidden` has
/// no parameters upstream to reach.
pub fn backward(
    params: &ScorerParams,
    cache: &ScorerCache,
    d_logits: &[f64],
    d_last_hidden: &[f64],
) -> Result<ScorerGrads, ScorerError> {
    if d_logits.len() != params.num_classes() {
        return Err(ScorerError::DimMismatch {
            what: "d_logits".into(),
            expected: params.num_classes(),
            found: d_logits.len(),
        });
    }
    if d_last_hidden.len() != params.last_hidden_dim() {
        return Err(ScorerError::DimMismatch {
            what: "d_last_hidden".into(),
            expected: params.last_hidden_dim(),
            found: d_last_hidden.len(),
        });
    }
    if cache.layer_inputs.len() != params.layers.len() {
        return Err(ScorerError::BadShape("cache does not match params".into()));
    }
    let hidden = params.num_hidden();
    let mut grads = ScorerGrads::zeros(params);

    // Final affine.
    let final_input = &cache.layer_inputs[hidden];
    for (i, &d) in d_logits.iter().enumerate() {
        grads.layers[hidden].bias[i] = d;
        for (j, &x) in final_input.iter().enumerate() {
            grads.layers[hidden].weight[i][j] = d * x;
        }
    }
    if hidden == 0 {
        return Ok(grads);
    }
    let final_layer = &params.layers[hidden];
    let mut upstream: Vec<f64> = (0..final_layer.in_dim())
        .map(|j| {
            d_logits
                .iter()
                .enumerate()
                .map(|(i, &d)| d * final_layer.weight[i][j])
                .sum()
        })
        .collect();

    // Through dropout, joining the feature-path gradient at the pre-dropout
    // node.
    for ((u, &m), &f) in upstream
        .iter_mut()
        .zip(&cache.dropout_mask)
        .zip(d_last_hidden)
    {
        *u = *u * m + f;
    }

    for l in (0..hidden).rev() {
        // ReLU.
        let mut d_h: Vec<f64> = upstream
            .iter()
            .zip(&cache.post_act[l])
            .map(|(&u, &a)| if a > 0.0 { u } else { 0.0 })
            .collect();
        // Batch norm (stats constant).
        if let Some(bn) = &params.bn[l] {
            let applied = cache.bn_applied[l]
                .as_ref()
                .ok_or_else(|| ScorerError::BadShape("cache does not match params".into()))?;
            let bn_grads = grads.bn[l].as_mut().unwrap();
            for (i, &d) in d_h.iter().enumerate() {
                bn_grads.gamma[i] = d * applied.x_hat[i];
                bn_grads.beta[i] = d;
            }
            d_h = d_h
                .iter()
                .zip(&bn.gamma)
                .zip(&applied.inv_std)
                .map(|((&d, &g), &s)| d * g * s)
                .collect();
        }
        // Affine.
        let x = &cache.layer_inputs[l];
        for (i, &d) in d_h.iter().enumerate() {
            grads.layers[l].bias[i] = d;
            for (j, &xj) in x.iter().enumerate() {
                grads.layers[l].weight[i][j] = d * xj;
            }
        }
        let layer = &params.layers[l];
        upstream = (0..layer.in_dim())
            .map(|j| d_h.iter().enumerate().map(|(i, &d)| d * layer.weight[i][j]).sum())
            .collect();
    }
    Ok(grads)
}

/// Builds a first layer for a `target_channels`-channel input by averaging
/// the source's per-channel weight blocks and replicating the mean; every
/// other tensor is copied verbatim.
pub fn cross_modality_init(
    source: &ScorerParams,
    target_channels: usize,
) -> Result<ScorerParams, ScorerError> {
    source.validate()?;
    if target_channels == 0 {
        return Err(ScorerError::BadShape("target_channels must be >= 1".into()));
    }
    let (c_s, d) = source.input_layout;
    let width = source.input_dim();
    if c_s == 0 || width % c_s != 0 || c_s * d != width {
        return Err(ScorerError::BadChannelBlocks {
            width,
            channels: c_s,
        });
    }
    let mut target = source.clone();
    let first = &mut target.layers[0];
    for (row, src_row) in first.weight.iter_mut().zip(&source.layers[0].weight) {
        let mut mean_block = vec![0.0; d];
        for c in 0..c_s {
            for j in 0..d {
                mean_block[j] += src_row[c * d + j];
            }
        }
        for v in &mut mean_block {
            *v /= c_s as f64;
        }
        *row = Vec::with_capacity(target_channels * d);
        for _ in 0..target_channels {
            row.extend_from_slice(&mean_block);
        }
    }
    target.input_layout = (target_channels, d);
    target.validate()?;
    Ok(target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartialBn {
    /// Stats frozen on all BN layers except the first; `total` layers seen.
    Applied { total: usize },
    /// Nothing to freeze; callers should surface this as a warning.
    NoBnLayers,
}

/// Freezes running statistics on every BN layer except the first. Gamma and
/// beta stay trainable everywhere.
pub fn set_partial_bn(params: &mut ScorerParams) -> PartialBn {
    let mut seen = 0;
    for bn in params.bn.iter_mut().flatten() {
        bn.frozen_stats = seen > 0;
        seen += 1;
    }
    if seen == 0 {
        PartialBn::NoBnLayers
    } else {
        PartialBn::Applied { total: seen }
    }
}
