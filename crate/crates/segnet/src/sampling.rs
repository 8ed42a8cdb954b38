//! Segment planning, snippet sampling, modality assembly, and the spatial
//! augmentation used on the pixel path (corner cropping + scale jittering).
//!
//! Training divides a video into `K` equal segments and draws one snippet per
//! segment; testing takes `Q` equidistant snippets. A snippet is the
//! flattened input vector the scorer consumes, built from one of four
//! modality transforms.

use serde::{Deserialize, Serialize};

use crate::corpus::VideoRecord;
use crate::rng::SplitMix64;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("num_frames must be >= 1")]
    EmptyVideo,
    #[error("num_segments must be >= 1")]
    ZeroSegments,
    #[error("num_snippets must be >= 1")]
    ZeroSnippets,
    #[error("modality {modality} requires a {expected} record, got {found}")]
    ModalityMismatch {
        modality: String,
        expected: String,
        found: String,
    },
    #[error("stack_len must be >= {min} for {modality}")]
    BadStackLen { modality: String, min: usize },
    #[error("crop {crop_h}x{crop_w} exceeds frame {frame_h}x{frame_w}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        frame_h: usize,
        frame_w: usize,
    },
    #[error("invalid augment config: {0}")]
    BadAugmentConfig(String),
}

/// Equal division of `[0, N)` into `K` half-open ranges. Remainder frames go
/// to the earliest segments, so sizes differ by at most 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    num_frames: usize,
    boundaries: Vec<(usize, usize)>,
}

impl SegmentPlan {
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_segments(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[(usize, usize)] {
        &self.boundaries
    }
}

pub fn plan_segments(num_frames: usize, num_segments: usize) -> Result<SegmentPlan, SamplingError> {
    if num_frames == 0 {
        return Err(SamplingError::EmptyVideo);
    }
    if num_segments == 0 {
        return Err(SamplingError::ZeroSegments);
    }
    let base = num_frames / num_segments;
    let remainder = num_frames % num_segments;
    let mut boundaries = Vec::with_capacity(num_segments);
    let mut start = 0;
    for k in 0..num_segments {
        let len = base + usize::from(k < remainder);
        boundaries.push((start, start + len));
        start += len;
    }
    Ok(SegmentPlan {
        num_frames,
        boundaries,
    })
}

/// One uniformly drawn frame index per segment. Empty segments (N < K) fall
/// back to the nearest valid frame, so short videos still yield K snippets.
pub fn sample_train(plan: &SegmentPlan, rng: &mut SplitMix64) -> Vec<usize> {
    plan.boundaries
        .iter()
        .map(|&(start, end)| {
            if end > start {
                rng.uniform_usize(start, end - 1)
            } else {
                start.min(plan.num_frames - 1)
            }
        })
        .collect()
}

/// `Q` equidistant snippet starts: `t_j = floor(j * (N-1) / (Q-1))`.
/// Duplicates appear when N < Q; Q = 1 takes the first frame.
pub fn sample_test(num_frames: usize, num_snippets: usize) -> Result<Vec<usize>, SamplingError> {
    if num_frames == 0 {
        return Err(SamplingError::EmptyVideo);
    }
    if num_snippets == 0 {
        return Err(SamplingError::ZeroSnippets);
    }
    if num_snippets == 1 {
        return Ok(vec![0]);
    }
    Ok((0..num_snippets)
        .map(|j| j * (num_frames - 1) / (num_snippets - 1))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    Rgb,
    RgbDiff,
    FlowStack,
    FeaturePassthrough,
}

impl std::fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ModalityKind::Rgb => "rgb",
            ModalityKind::RgbDiff => "rgb_diff",
            ModalityKind::FlowStack => "flow_stack",
            ModalityKind::FeaturePassthrough => "feature_passthrough",
        };
        f.write_str(name)
    }
}

/// How a snippet is built from raw frames. Channel counts for c-channel
/// grids: Rgb keeps c, RgbDiff stacks c*(L-1) difference channels, FlowStack
/// stacks c*L flow channels (flow fields arrive as precomputed 2-channel
/// grids), FeaturePassthrough is one feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    /// Frames consumed per snippet; diffs produce `stack_len - 1` outputs.
    pub stack_len: usize,
    /// Min-max rescale of FlowStack snippets to [0, 255]; a constant snippet
    /// maps to all zeros.
    pub normalize_flow: bool,
}

pub const DEFAULT_STACK_LEN: usize = 5;

impl ModalitySpec {
    pub fn rgb() -> Self {
        Self {
            kind: ModalityKind::Rgb,
            stack_len: 1,
            normalize_flow: false,
        }
    }

    pub fn rgb_diff(stack_len: usize) -> Self {
        Self {
            kind: ModalityKind::RgbDiff,
            stack_len,
            normalize_flow: false,
        }
    }

    pub fn flow_stack(stack_len: usize) -> Self {
        Self {
            kind: ModalityKind::FlowStack,
            stack_len,
            normalize_flow: false,
        }
    }

    pub fn feature_passthrough() -> Self {
        Self {
            kind: ModalityKind::FeaturePassthrough,
            stack_len: 1,
            normalize_flow: false,
        }
    }

    /// Raw frames a snippet reads from the video.
    pub fn frames_needed(&self) -> usize {
        match self.kind {
            ModalityKind::Rgb | ModalityKind::FeaturePassthrough => 1,
            ModalityKind::RgbDiff | ModalityKind::FlowStack => self.stack_len,
        }
    }

    fn validate(&self, video: &VideoRecord) -> Result<(), SamplingError> {
        let mismatch = |expected: &str, found: &str| SamplingError::ModalityMismatch {
            modality: self.kind.to_string(),
            expected: expected.into(),
            found: found.into(),
        };
        let is_grid = video.data.grid_shape().is_some();
        match self.kind {
            ModalityKind::FeaturePassthrough => {
                if is_grid {
                    return Err(mismatch("feature stream", "frame grid"));
                }
            }
            _ => {
                if !is_grid {
                    return Err(mismatch("frame grid", "feature stream"));
                }
            }
        }
        let min_len = match self.kind {
            ModalityKind::RgbDiff => 2,
            _ => 1,
        };
        if self.stack_len < min_len {
            return Err(SamplingError::BadStackLen {
                modality: self.kind.to_string(),
                min: min_len,
            });
        }
        Ok(())
    }

    /// Stacked channel count for a video with `frame_channels` channels.
    pub fn channels(&self, frame_channels: usize) -> usize {
        match self.kind {
            ModalityKind::Rgb => frame_channels,
            ModalityKind::RgbDiff => frame_channels * (self.stack_len - 1),
            ModalityKind::FlowStack => frame_channels * self.stack_len,
            ModalityKind::FeaturePassthrough => 1,
        }
    }

    /// Flattened snippet length for `video`, given the spatial size each
    /// frame ends up with (the augment output, or the raw plane when no
    /// augmentation runs).
    pub fn snippet_dim(
        &self,
        video: &VideoRecord,
        output: Option<(usize, usize)>,
    ) -> Result<usize, SamplingError> {
        self.validate(video)?;
        match video.data.grid_shape() {
            Some((c, h, w)) => {
                let (oh, ow) = output.unwrap_or((h, w));
                Ok(self.channels(c) * oh * ow)
            }
            None => Ok(video.data.frame_dim()),
        }
    }
}

/// Flattened scorer input drawn from one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Snippet {
    pub video_id: String,
    pub segment_index: usize,
    pub frame_index: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropAnchor {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

const ANCHORS: [CropAnchor; 5] = [
    CropAnchor::TopLeft,
    CropAnchor::TopRight,
    CropAnchor::BottomLeft,
    CropAnchor::BottomRight,
    CropAnchor::Center,
];

/// Spatial augmentation policy: crop height and width drawn independently
/// from `crop_sizes` (aspect-ratio jitter), anchored at a corner or the
/// center, resized to `output`, flipped with `flip_prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Frame size the crop set was designed for; documentation and default
    /// scaling reference, not enforced per frame.
    pub base: (usize, usize),
    pub crop_sizes: Vec<usize>,
    pub output: (usize, usize),
    pub flip_prob: f64,
}

impl AugmentConfig {
    /// Full-scale policy: 256x340 frames, crops {256, 224, 192, 168},
    /// 224x224 output, flip half the time.
    pub fn full_scale() -> Self {
        Self {
            base: (256, 340),
            crop_sizes: vec![256, 224, 192, 168],
            output: (224, 224),
            flip_prob: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.crop_sizes.is_empty() {
            return Err(SamplingError::BadAugmentConfig("empty crop-size set".into()));
        }
        if self.crop_sizes.iter().any(|&s| s == 0) {
            return Err(SamplingError::BadAugmentConfig("crop size 0".into()));
        }
        if self.output.0 == 0 || self.output.1 == 0 {
            return Err(SamplingError::BadAugmentConfig("output size 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(SamplingError::BadAugmentConfig(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// One concrete crop/flip choice, applied identically to every frame of a
/// snippet stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop_h: usize,
    pub crop_w: usize,
    pub anchor: CropAnchor,
    pub flip: bool,
    pub output: (usize, usize),
}

/// Draws crop height, crop width, anchor, flip, in that order (always four
/// draws, so streams stay aligned regardless of outcomes).
pub fn draw_augment_params(
    config: &AugmentConfig,
    frame_h: usize,
    frame_w: usize,
    rng: &mut SplitMix64,
) -> Result<AugmentParams, SamplingError> {
    config.validate()?;
    let max = *config.crop_sizes.iter().max().unwrap();
    if max > frame_h || max > frame_w {
        return Err(SamplingError::CropTooLarge {
            crop_h: max,
            crop_w: max,
            frame_h,
            frame_w,
        });
    }
    let crop_h = config.crop_sizes[rng.uniform_usize(0, config.crop_sizes.len() - 1)];
    let crop_w = config.crop_sizes[rng.uniform_usize(0, config.crop_sizes.len() - 1)];
    let anchor = ANCHORS[rng.uniform_usize(0, 4)];
    let flip = rng.next_f64() < config.flip_prob;
    Ok(AugmentParams {
        crop_h,
        crop_w,
        anchor,
        flip,
        output: config.output,
    })
}

/// The 10-crop test-time set: each anchor unflipped then flipped, at a fixed
/// crop size.
pub fn ten_crop_params(crop_h: usize, crop_w: usize, output: (usize, usize)) -> Vec<AugmentParams> {
    let mut params = Vec::with_capacity(10);
    for &anchor in &ANCHORS {
        for flip in [false, true] {
            params.push(AugmentParams {
                crop_h,
                crop_w,
                anchor,
                flip,
                output,
            });
        }
    }
    params
}

fn anchor_origin(
    anchor: CropAnchor,
    frame_h: usize,
    frame_w: usize,
    crop_h: usize,
    crop_w: usize,
) -> (usize, usize) {
    let max_y = frame_h - crop_h;
    let max_x = frame_w - crop_w;
    match anchor {
        CropAnchor::TopLeft => (0, 0),
        CropAnchor::TopRight => (0, max_x),
        CropAnchor::BottomLeft => (max_y, 0),
        CropAnchor::BottomRight => (max_y, max_x),
        CropAnchor::Center => (max_y / 2, max_x / 2),
    }
}

/// Bilinear resample with half-pixel centers; equal sizes reproduce the
/// input exactly.
fn bilinear_resize(src: &[f64], h_in: usize, w_in: usize, h_out: usize, w_out: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h_out * w_out);
    let sy = h_in as f64 / h_out as f64;
    let sx = w_in as f64 / w_out as f64;
    for y in 0..h_out {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h_in - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h_in - 1);
        let ty = fy - y0 as f64;
        for x in 0..w_out {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w_in - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w_in - 1);
            let tx = fx - x0 as f64;
            let v = if ty == 0.0 && tx == 0.0 {
                src[y0 * w_in + x0]
            } else {
                let top = src[y0 * w_in + x0] * (1.0 - tx) + src[y0 * w_in + x1] * tx;
                let bot = src[y1 * w_in + x0] * (1.0 - tx) + src[y1 * w_in + x1] * tx;
                top * (1.0 - ty) + bot * ty
            };
            out.push(v);
        }
    }
    out
}

/// Crop, resize, and optionally flip one multi-channel frame (flattened
/// channel-major). The flip runs last, on the output grid.
pub fn augment_frame(
    frame: &[f64],
    channels: usize,
    frame_h: usize,
    frame_w: usize,
    params: &AugmentParams,
) -> Result<Vec<f64>, SamplingError> {
    if params.crop_h > frame_h || params.crop_w > frame_w {
        return Err(SamplingError::CropTooLarge {
            crop_h: params.crop_h,
            crop_w: params.crop_w,
            frame_h,
            frame_w,
        });
    }
    let (y0, x0) = anchor_origin(params.anchor, frame_h, frame_w, params.crop_h, params.crop_w);
    let (out_h, out_w) = params.output;
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    let plane = frame_h * frame_w;
    let mut crop = vec![0.0; params.crop_h * params.crop_w];
    for c in 0..channels {
        let src = &frame[c * plane..(c + 1) * plane];
        for y in 0..params.crop_h {
            let row = (y0 + y) * frame_w + x0;
            crop[y * params.crop_w..(y + 1) * params.crop_w]
                .copy_from_slice(&src[row..row + params.crop_w]);
        }
        let mut resized = bilinear_resize(&crop, params.crop_h, params.crop_w, out_h, out_w);
        if params.flip {
            for row in resized.chunks_mut(out_w) {
                row.reverse();
            }
        }
        out.extend_from_slice(&resized);
    }
    Ok(out)
}

fn minmax_to_pixel_range(values: &mut [f64]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span * 255.0 } else { 0.0 };
    }
}

/// Builds the snippet at `start` with a fixed spatial transform (or none).
/// The start is clamped so the whole stack fits; videos shorter than the
/// stack reuse their last frame.
pub fn assemble_snippet_fixed(
    video: &VideoRecord,
    segment_index: usize,
    start: usize,
    modality: &ModalitySpec,
    transform: Option<&AugmentParams>,
) -> Result<Snippet, SamplingError> {
    modality.validate(video)?;
    let n = video.num_frames();
    let needed = modality.frames_needed();
    let start = start.min(n.saturating_sub(needed));
    let frame = |t: usize| video.frame(t.min(n - 1));

    let prepared: Vec<Vec<f64>> = match video.data.grid_shape() {
        Some((c, h, w)) => (0..needed)
            .map(|i| match transform {
                Some(params) => augment_frame(frame(start + i), c, h, w, params),
                None => Ok(frame(start + i).to_vec()),
            })
            .collect::<Result<_, _>>()?,
        None => vec![frame(start).to_vec()],
    };

    let mut data = match modality.kind {
        ModalityKind::Rgb | ModalityKind::FeaturePassthrough => prepared[0].clone(),
        ModalityKind::RgbDiff => {
            let mut out = Vec::with_capacity(prepared[0].len() * (needed - 1));
            for i in 1..needed {
                out.extend(prepared[i].iter().zip(&prepared[i - 1]).map(|(a, b)| a - b));
            }
            out
        }
        ModalityKind::FlowStack => prepared.concat(),
    };
    if modality.kind == ModalityKind::FlowStack && modality.normalize_flow {
        minmax_to_pixel_range(&mut data);
    }

    Ok(Snippet {
        video_id: video.id.clone(),
        segment_index,
        frame_index: start,
        data,
    })
}

/// Training-path assembly: draws one crop/flip per snippet (when augmenting)
/// and applies it to every frame of the stack.
pub fn assemble_snippet(
    video: &VideoRecord,
    segment_index: usize,
    start: usize,
    modality: &ModalitySpec,
    augment: Option<&AugmentConfig>,
    rng: &mut SplitMix64,
) -> Result<Snippet, SamplingError> {
    let params = match (augment, video.data.grid_shape()) {
        (Some(config), Some((_, h, w))) => Some(draw_augment_params(config, h, w, rng)?),
        (Some(_), None) => {
            return Err(SamplingError::ModalityMismatch {
                modality: modality.kind.to_string(),
                expected: "frame grid for augmentation".into(),
                found: "feature stream".into(),
            })
        }
        (None, _) => None,
    };
    assemble_snippet_fixed(video, segment_index, start, modality, params.as_ref())
}
