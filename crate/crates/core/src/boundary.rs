//! Unsupervised word-boundary discovery.
//!
//! Two segmenters share one peak-detection backend:
//! * [`gradseg_fit`] — temporal-gradient supervision: frames whose central
//!   difference has large magnitude are labeled boundary-like, and a centered
//!   ridge regression learns to score arbitrary frames.
//! * [`wav2bnd_lite_train`] — a small convolutional frame classifier trained
//!   on (possibly noisy) boundary labels, backpropagating binary
//!   cross-entropy only through the highest-loss fraction of frames.
//!
//! [`peak_detect`] turns per-frame scores into boundary frames by greedy
//! non-maximum suppression. Boundaries here are 0-based *closing* frames (the
//! last frame of each word); the utterance-final frame is always appended.
//! Convert with [`crate::data::closing_frames_to_ends`] when end-exclusive
//! boundaries are needed.

use rand::seq::SliceRandom;

use crate::autodiff::{backward, Tape, Tensor};
use crate::data::FrameSequence;
use crate::error::{Error, Result};
use crate::linalg::{dot, solve_spd};
use crate::nn::{Adam, BoundParams, Conv1d, GradAccum, LrSchedule, ParamSet};
use crate::rng::stream;

/// Per-frame boundary scores for one utterance (probabilities from the conv
/// classifier, unnormalized regression scores from the ridge model).
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryProbs {
    pub utt_id: String,
    pub scores: Vec<f64>,
}

/// Ridge-regression boundary scorer: score(x) = (x − mean(x))·w + mean(y).
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSegmenter {
    pub weights: Vec<f64>,
    pub feat_mean: Vec<f64>,
    pub target_mean: f64,
}

/// Convolutional boundary classifier (three same-padded conv layers with
/// ReLU between, one logit per frame).
#[derive(Debug, Clone)]
pub struct ConvSegmenter {
    pub params: ParamSet,
    pub layers: Vec<Conv1d>,
    pub dim: usize,
    pub opts: Wav2BndOpts,
}

/// A trained segmenter of either family; both score frames per utterance.
#[derive(Debug, Clone)]
pub enum SegmenterModel {
    Ridge(RidgeSegmenter),
    Conv(ConvSegmenter),
}

impl SegmenterModel {
    pub fn input_dim(&self) -> usize {
        match self {
            SegmenterModel::Ridge(r) => r.feat_mean.len(),
            SegmenterModel::Conv(c) => c.dim,
        }
    }

    /// Per-frame boundary scores for one utterance.
    pub fn score(&self, frames: &FrameSequence) -> Result<Vec<f64>> {
        if frames.dim != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "segmenter_score",
                left: vec![frames.dim],
                right: vec![self.input_dim()],
            });
        }
        match self {
            SegmenterModel::Ridge(r) => {
                let bias = r.target_mean - dot(&r.feat_mean, &r.weights);
                Ok((0..frames.len())
                    .map(|t| dot(frames.row(t), &r.weights) + bias)
                    .collect())
            }
            SegmenterModel::Conv(c) => {
                let tape = Tape::new();
                let bound = c.params.bind(&tape);
                let x = tape
                    .matrix(frames.data().to_vec(), frames.len(), frames.dim)?;
                let z = conv_logits(&c.layers, &bound, &x)?;
                Ok(z.sigmoid().values().to_vec())
            }
        }
    }
}

/// Squared magnitude of the central temporal difference,
/// m_t = ‖(f_{t+1} − f_{t−1})/2‖², for interior frames t = 1..T−2.
pub fn gradient_magnitudes(frames: &FrameSequence) -> Vec<f64> {
    if frames.len() < 3 {
        return Vec::new();
    }
    (1..frames.len() - 1)
        .map(|t| {
            frames
                .row(t + 1)
                .iter()
                .zip(frames.row(t - 1))
                .map(|(a, b)| {
                    let d = (a - b) / 2.0;
                    d * d
                })
                .sum()
        })
        .collect()
}

/// p-th percentile with linear interpolation between order statistics
/// (p = 50 on {1,2,3,4} gives 2.5).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("percentile input must not contain NaN"));
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fit the temporal-gradient ridge segmenter. Frames whose gradient magnitude
/// exceeds the p-th percentile become positive targets; a centered ridge
/// regression (strength `ridge_lambda`) maps frame features to those targets.
/// Utterances shorter than 3 frames contribute nothing; if all are that
/// short, this is an error.
pub fn gradseg_fit(
    utterances: &[&FrameSequence],
    p: f64,
    ridge_lambda: f64,
) -> Result<SegmenterModel> {
    if utterances.is_empty() {
        return Err(Error::NotEnough {
            what: "utterances for boundary fitting",
            requested: 1,
            available: 0,
        });
    }
    if !(0.0..100.0).contains(&p) || p == 0.0 {
        return Err(Error::InvalidArg(format!(
            "percentile must lie strictly between 0 and 100, got {p}"
        )));
    }
    if !(ridge_lambda >= 0.0) {
        return Err(Error::InvalidArg(format!(
            "ridge strength must be non-negative, got {ridge_lambda}"
        )));
    }
    let dim = utterances[0].dim;
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut mags: Vec<f64> = Vec::new();
    for u in utterances {
        if u.dim != dim {
            return Err(Error::ShapeMismatch {
                op: "gradseg_fit",
                left: vec![dim],
                right: vec![u.dim],
            });
        }
        if u.len() < 3 {
            continue;
        }
        mags.extend(gradient_magnitudes(u));
        rows.extend((1..u.len() - 1).map(|t| u.row(t)));
    }
    if rows.is_empty() {
        return Err(Error::NotEnough {
            what: "utterances with at least 3 frames",
            requested: 1,
            available: 0,
        });
    }
    let theta = percentile(&mags, p);
    let targets: Vec<f64> = mags.iter().map(|&m| f64::from(m > theta)).collect();

    let n = rows.len() as f64;
    let mut feat_mean = vec![0.0; dim];
    for r in &rows {
        crate::linalg::axpy(1.0, r, &mut feat_mean);
    }
    for v in &mut feat_mean {
        *v /= n;
    }
    let target_mean = targets.iter().sum::<f64>() / n;

    // Normal equations on centered data: (XᵀX + λI) w = Xᵀ(y − ȳ).
    let mut a = vec![0.0; dim * dim];
    let mut b = vec![0.0; dim];
    let mut xc = vec![0.0; dim];
    for (r, &y) in rows.iter().zip(&targets) {
        for (d, (v, m)) in r.iter().zip(&feat_mean).enumerate() {
            xc[d] = v - m;
        }
        let yc = y - target_mean;
        for i in 0..dim {
            b[i] += xc[i] * yc;
            for j in i..dim {
                a[i * dim + j] += xc[i] * xc[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            a[i * dim + j] = a[j * dim + i];
        }
    }
    let weights = solve_spd(&a, ridge_lambda, &b, dim).ok_or_else(|| {
        Error::InvalidArg(
            "ridge system is not positive definite; increase the ridge strength".into(),
        )
    })?;
    Ok(SegmenterModel::Ridge(RidgeSegmenter {
        weights,
        feat_mean,
        target_mean,
    }))
}

/// Greedy non-maximum suppression over per-frame scores. Repeatedly picks the
/// highest remaining score (ties to the earliest frame), suppresses frames
/// closer than `min_separation`, and stops at round(`target_rate` × T) picks
/// or when no candidates remain. The utterance-final frame is always part of
/// the result. Returns sorted 0-based closing frames; empty input gives an
/// empty result.
pub fn peak_detect(scores: &[f64], min_separation: usize, target_rate: f64) -> Vec<usize> {
    let t_len = scores.len();
    if t_len == 0 {
        return Vec::new();
    }
    let min_sep = min_separation.max(1);
    let budget = (target_rate.max(0.0) * t_len as f64).round() as usize;
    let mut alive = vec![true; t_len];
    let mut picks: Vec<usize> = Vec::new();
    while picks.len() < budget {
        let mut best: Option<usize> = None;
        for (i, &a) in alive.iter().enumerate() {
            if a && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(i) = best else { break };
        picks.push(i);
        for j in i.saturating_sub(min_sep - 1)..=(i + min_sep - 1).min(t_len - 1) {
            alive[j] = false;
        }
    }
    picks.sort_unstable();
    if picks.last() != Some(&(t_len - 1)) {
        picks.push(t_len - 1);
    }
    picks
}

/// 0/1 frame labels from closing-frame boundaries, widened by `widen` frames
/// to each side (clamped to the utterance).
pub fn boundary_labels(len: usize, closing_frames: &[usize], widen: usize) -> Vec<f64> {
    let mut labels = vec![0.0; len];
    for &c in closing_frames {
        for slot in labels
            .iter_mut()
            .take((c + widen + 1).min(len))
            .skip(c.saturating_sub(widen))
        {
            *slot = 1.0;
        }
    }
    labels
}

#[derive(Debug, Clone)]
pub struct Wav2BndOpts {
    /// Hidden channels of the two interior conv layers.
    pub hidden: usize,
    /// Kernel sizes of the three conv layers (must be odd).
    pub kernels: [usize; 3],
    /// Frames added to each side of a boundary label.
    pub widen: usize,
    /// Fraction ρ of frames (by descending loss) that receive gradient.
    pub top_loss_fraction: f64,
    /// Training steps; each step consumes one utterance.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Wav2BndOpts {
    fn default() -> Self {
        Self {
            hidden: 64,
            kernels: [9, 7, 5],
            widen: 1,
            top_loss_fraction: 1.0,
            steps: 300,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn conv_logits(layers: &[Conv1d], bound: &BoundParams, x: &Tensor) -> Result<Tensor> {
    let mut h = layers[0].forward(bound, x)?.relu();
    for layer in &layers[1..layers.len() - 1] {
        h = layer.forward(bound, &h)?.relu();
    }
    layers[layers.len() - 1].forward(bound, &h)
}

/// Stable per-frame binary cross-entropy from logits:
/// max(z,0) − z·y + ln(1 + e^{−|z|}).
pub(crate) fn bce_per_frame(z: &Tensor, labels: &[f64]) -> Result<Tensor> {
    let y = z.tape().leaf(labels.to_vec(), z.shape())?;
    z.relu()
        .sub(&z.mul(&y)?)?
        .add(&z.abs().neg().exp().add_scalar(1.0).ln())
}

/// Train the convolutional boundary classifier on noisy closing-frame
/// boundaries. Labels are widened around each boundary; each step
/// backpropagates BCE through only the ⌈ρ·T⌉ highest-loss frames of the
/// utterance it visits.
pub fn wav2bnd_lite_train(
    examples: &[(&FrameSequence, &[usize])],
    opts: &Wav2BndOpts,
) -> Result<SegmenterModel> {
    if examples.is_empty() {
        return Err(Error::NotEnough {
            what: "labeled utterances",
            requested: 1,
            available: 0,
        });
    }
    if !(opts.top_loss_fraction > 0.0 && opts.top_loss_fraction <= 1.0) {
        return Err(Error::InvalidArg(format!(
            "top-loss fraction must lie in (0, 1], got {}",
            opts.top_loss_fraction
        )));
    }
    let dim = examples[0].0.dim;
    let mut labeled: Vec<(&FrameSequence, Vec<f64>)> = Vec::with_capacity(examples.len());
    let mut any_positive = false;
    for (frames, closing) in examples {
        if frames.dim != dim {
            return Err(Error::ShapeMismatch {
                op: "wav2bnd_lite_train",
                left: vec![dim],
                right: vec![frames.dim],
            });
        }
        if frames.len() == 0 {
            continue;
        }
        if let Some(&c) = closing.iter().find(|&&c| c >= frames.len()) {
            return Err(Error::InvalidArg(format!(
                "closing frame {c} outside utterance of {} frames",
                frames.len()
            )));
        }
        let labels = boundary_labels(frames.len(), closing, opts.widen);
        any_positive |= labels.iter().any(|&l| l > 0.0);
        labeled.push((frames, labels));
    }
    if labeled.is_empty() || !any_positive {
        return Err(Error::InvalidArg(
            "boundary training needs at least one labeled boundary frame".into(),
        ));
    }

    let mut params = ParamSet::new();
    let mut init_rng = stream(opts.seed, "wav2bnd-init", 0);
    let widths = [dim, opts.hidden, opts.hidden, 1];
    let layers: Vec<Conv1d> = (0..3)
        .map(|i| {
            Conv1d::new(
                &mut params,
                &format!("conv{i}"),
                widths[i],
                widths[i + 1],
                opts.kernels[i],
                &mut init_rng,
            )
        })
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(LrSchedule::Constant(opts.lr));
    let mut order_rng = stream(opts.seed, "wav2bnd-order", 0);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    for step in 0..opts.steps {
        let slot = step % labeled.len();
        if slot == 0 {
            order.shuffle(&mut order_rng);
        }
        let (frames, labels) = &labeled[order[slot]];
        let t_len = frames.len();
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.matrix(frames.data().to_vec(), t_len, dim)?;
        let z = conv_logits(&layers, &bound, &x)?;
        let losses = bce_per_frame(&z, labels)?;
        let keep = (opts.top_loss_fraction * t_len as f64).ceil() as usize;
        let loss = top_loss_mean(&losses, keep.clamp(1, t_len))?;
        let mut grads = backward(&loss)?;
        let mut accum = GradAccum::new();
        accum.absorb(&mut grads, &bound);
        adam.step(&mut params, accum);
    }
    Ok(SegmenterModel::Conv(ConvSegmenter {
        params,
        layers,
        dim,
        opts: opts.clone(),
    }))
}

/// Mean of the `keep` largest entries (by forward value) of a loss tensor.
fn top_loss_mean(losses: &Tensor, keep: usize) -> Result<Tensor> {
    let n = losses.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let vals = losses.values();
    idx.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).expect("loss must not be NaN"));
    let mut weights = vec![0.0; n];
    for &i in idx.iter().take(keep) {
        weights[i] = 1.0 / keep as f64;
    }
    losses.weighted_sum(&weights)
}
