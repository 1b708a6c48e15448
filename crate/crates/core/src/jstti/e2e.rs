//! End-to-end boundary refinement: a convolutional boundary segmenter is
//! first trained to clone an existing segmenter's outputs (plus frame-level
//! acoustic cluster labels, to keep its features general), then coupled to
//! the infilling encoder through the differentiable soft-pooler and frozen
//! word-codebook quantizer so the infilling loss can reshape the boundaries.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, concat_cols, concat_rows, Tape, Tensor};
use crate::boundary::{bce_per_frame, peak_detect};
use crate::data::{closing_frames_to_ends, FrameSequence, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{Adam, BoundParams, Conv1d, GradAccum, Linear, LrSchedule, ParamId, ParamSet};
use crate::pooling::{
    quantize_soft, soft_pool, st_quantize, straight_through_boundaries, SoftPoolConfig,
};
use crate::quantize::Codebook;
use crate::rng::stream;

use super::{
    mask_spans, sinusoidal_pe, weighted_nll, JsttiModel, MaskAction, Modality, MixMode,
};

/// Frame-level boundary/cluster classifier: five same-padded convolutions
/// with ReLU, then one boundary logit and one cluster distribution per frame.
pub struct SegmenterNet {
    pub params: ParamSet,
    convs: Vec<Conv1d>,
    bnd_head: Linear,
    cls_head: Linear,
    pub dim: usize,
    pub hidden: usize,
    pub n_clusters: usize,
}

const SEGMENTER_KERNELS: [usize; 5] = [11, 9, 7, 5, 3];

impl SegmenterNet {
    pub fn new(dim: usize, hidden: usize, n_clusters: usize, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = stream(seed, "segmenter-init", 0);
        let mut convs = Vec::with_capacity(SEGMENTER_KERNELS.len());
        let mut c_in = dim;
        for (i, &k) in SEGMENTER_KERNELS.iter().enumerate() {
            convs.push(Conv1d::new(&mut params, &format!("conv{i}"), c_in, hidden, k, &mut rng)?);
            c_in = hidden;
        }
        let bnd_head = Linear::new(&mut params, "bnd", hidden, 1, &mut rng)?;
        let cls_head = Linear::new(&mut params, "cls", hidden, n_clusters, &mut rng)?;
        Ok(Self {
            params,
            convs,
            bnd_head,
            cls_head,
            dim,
            hidden,
            n_clusters,
        })
    }

    /// Per-frame boundary logits (T×1) and cluster logits (T×C).
    pub fn forward(&self, bound: &BoundParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(bound, &h)?.relu();
        }
        Ok((self.bnd_head.forward(bound, &h)?, self.cls_head.forward(bound, &h)?))
    }

    /// Boundary logits for one utterance, outside any training graph.
    pub fn boundary_logits(&self, frames: &FrameSequence) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.matrix(frames.data().to_vec(), frames.len(), frames.dim)?;
        let (z, _) = self.forward(&bound, &x)?;
        Ok(z.values().to_vec())
    }

    /// Segment the utterance: sigmoid boundary scores, peak detection, then
    /// conversion of closing frames to end-exclusive segment ends.
    pub fn predict_ends(
        &self,
        frames: &FrameSequence,
        min_separation: usize,
        target_rate: f64,
    ) -> Result<Vec<usize>> {
        let scores: Vec<f64> = self
            .boundary_logits(frames)?
            .iter()
            .map(|z| 1.0 / (1.0 + (-z).exp()))
            .collect();
        Ok(closing_frames_to_ends(&peak_detect(
            &scores,
            min_separation,
            target_rate,
        )))
    }
}

/// One behavior-cloning example: frames, teacher closing frames, and
/// frame-level acoustic cluster labels (one per frame).
pub struct CloneExample<'a> {
    pub frames: &'a FrameSequence,
    pub closing: &'a [usize],
    pub clusters: &'a [u32],
}

/// Options for [`clone_segmenter`].
#[derive(Debug, Clone)]
pub struct CloneOpts {
    pub hidden: usize,
    /// Acoustic cluster classes the auxiliary head predicts.
    pub n_clusters: usize,
    /// Weight on the boundary BCE term.
    pub bce_weight: f64,
    /// Weight on the cluster CE term.
    pub ce_weight: f64,
    /// Label smoothing for the *positive* boundary targets: closings train
    /// toward `1 − smooth` (other frames still toward zero), so even a fully
    /// converged clone keeps its boundary bumps on the live slope of the
    /// sigmoid — which the straight-through refinement needs to move or
    /// retract them later. Zero disables it. Must lie in `[0, 0.5)`.
    pub smooth: f64,
    /// Optimizer steps; each consumes one utterance.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CloneOpts {
    fn default() -> Self {
        Self {
            hidden: 64,
            n_clusters: 100,
            bce_weight: 1.0,
            ce_weight: 1.0,
            smooth: 0.0,
            steps: 400,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train a [`SegmenterNet`] to reproduce teacher boundaries while jointly
/// predicting frame-level acoustic clusters (equal-weighted BCE + CE by
/// default). Labels must cover every frame.
pub fn clone_segmenter(examples: &[CloneExample<'_>], opts: &CloneOpts) -> Result<SegmenterNet> {
    if examples.is_empty() {
        return Err(Error::NotEnough {
            what: "cloning examples",
            requested: 1,
            available: 0,
        });
    }
    if !(0.0..0.5).contains(&opts.smooth) {
        return Err(Error::InvalidArg(format!(
            "label smoothing {} outside [0, 0.5)",
            opts.smooth
        )));
    }
    for ex in examples {
        if ex.clusters.len() != ex.frames.len() {
            return Err(Error::ShapeMismatch {
                op: "clone_segmenter",
                left: vec![ex.clusters.len()],
                right: vec![ex.frames.len()],
            });
        }
        for &c in ex.clusters {
            if c as usize >= opts.n_clusters {
                return Err(Error::TokenOutOfRange {
                    token: c,
                    vocab: opts.n_clusters,
                });
            }
        }
        for &f in ex.closing {
            if f >= ex.frames.len() {
                return Err(Error::InvalidArg(format!(
                    "closing frame {f} outside utterance of length {}",
                    ex.frames.len()
                )));
            }
        }
    }
    let dim = examples[0].frames.dim;
    let mut net = SegmenterNet::new(dim, opts.hidden, opts.n_clusters, opts.seed)?;
    let mut adam = Adam::new(LrSchedule::Constant(opts.lr));
    let mut order_rng = stream(opts.seed, "clone-order", 0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for step in 0..opts.steps {
        let slot = step % order.len();
        if slot == 0 {
            order.shuffle(&mut order_rng);
        }
        let ex = &examples[order[slot]];
        let t_len = ex.frames.len();
        let tape = Tape::new();
        let bound = net.params.bind(&tape);
        let x = tape.matrix(ex.frames.data().to_vec(), t_len, dim)?;
        let (bnd, cls) = net.forward(&bound, &x)?;
        let labels: Vec<f64> = {
            let mut l = vec![0.0; t_len];
            for &f in ex.closing {
                l[f] = 1.0 - opts.smooth;
            }
            l
        };
        let bce = bce_per_frame(&bnd.reshape(&[t_len])?, &labels)?.mean();
        let cols: Vec<usize> = ex.clusters.iter().map(|&c| c as usize).collect();
        let ce = cls.log_softmax_rows()?.pick(&cols)?.mean().neg();
        let loss = bce.scale(opts.bce_weight).add(&ce.scale(opts.ce_weight))?;
        let mut grads = backward(&loss)?;
        let mut accum = GradAccum::new();
        accum.absorb(&mut grads, &bound);
        adam.step(&mut net.params, accum);
    }
    Ok(net)
}

/// Weights and shape of the end-to-end refinement objective.
#[derive(Debug, Clone)]
pub struct E2EConfig {
    /// Weight on kept positions inside each infilling loss.
    pub lambda: f64,
    /// Weight on the text infilling loss.
    pub tau: f64,
    /// Weight on the boundary-count penalty.
    pub gamma1: f64,
    /// Weight on the per-window boundary-frequency penalty.
    pub gamma2: f64,
    /// Window length: one boundary expected per `r` consecutive frames.
    pub r: usize,
    pub mixup_p: f64,
    pub pool: SoftPoolConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for E2EConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            tau: 10.0,
            gamma1: 500.0,
            gamma2: 500_000.0,
            r: 5,
            mixup_p: 0.3,
            pool: SoftPoolConfig::default(),
            lr: 2e-4,
            epochs: 15,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl E2EConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.tau < 0.0 || self.gamma1 < 0.0 || self.gamma2 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.r == 0 {
            return Err(Error::Config("window length r must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mixup_p) {
            return Err(Error::Config(format!(
                "mixup probability {} outside [0,1]",
                self.mixup_p
            )));
        }
        Ok(())
    }
}

/// Couple a cloned segmenter and a frozen word codebook to the model so
/// refinement can run end-to-end. The codebook must quantize into the
/// model's speech vocabulary and match the segmenter's input dimension.
pub fn attach_segmenter(
    model: &mut JsttiModel,
    segmenter: SegmenterNet,
    codebook: Codebook,
) -> Result<()> {
    if codebook.k() != model.n_speech {
        return Err(Error::Config(format!(
            "codebook has {} centroids but the model's speech vocabulary is {}",
            codebook.k(),
            model.n_speech
        )));
    }
    if codebook.dim != segmenter.dim {
        return Err(Error::Config(format!(
            "codebook dimension {} does not match segmenter input dimension {}",
            codebook.dim, segmenter.dim
        )));
    }
    model.segmenter = Some(segmenter);
    model.frozen_codebook = Some(codebook);
    Ok(())
}

/// Whether the speech branch uses the straight-through (training) path or
/// its soft surrogate (used by gradient checks).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefinePath {
    StraightThrough,
    SoftSurrogate,
}

/// Build the per-utterance speech branch of the refinement loss on `tape`:
/// segmenter → soft-pooler → frozen-codebook quantizer → masked infilling of
/// the detached quantized targets, plus the boundary-count and
/// boundary-frequency penalties on the straight-through boundary indicators.
#[allow(clippy::too_many_arguments)]
pub fn speech_refine_loss(
    model: &JsttiModel,
    tape: &Tape,
    bound_model: &BoundParams,
    bound_seg: &BoundParams,
    frames: &FrameSequence,
    teacher_count: usize,
    cfg: &E2EConfig,
    rng: &mut ChaCha8Rng,
    mix: MixMode,
    path: RefinePath,
) -> Result<Tensor> {
    let seg = model.segmenter.as_ref().ok_or_else(|| {
        Error::Config("end-to-end refinement requires an attached segmenter".into())
    })?;
    let codebook = model.frozen_codebook.as_ref().ok_or_else(|| {
        Error::Config("end-to-end refinement requires a frozen word codebook".into())
    })?;
    let t_len = frames.len();
    let x = tape.matrix(frames.data().to_vec(), t_len, frames.dim)?;
    let (bnd_logits, _) = seg.forward(bound_seg, &x)?;
    // The segmenter scores closing frames, but the pooler's cumulative-sum
    // segmentation reads a boundary as *starting* a segment: frame 0 always
    // opens one, the start following closing t sits at t + 1, and the final
    // frame's closing (the utterance end) opens none. Shift the logits one
    // frame right behind a pinned-high head so both stay consistent.
    let alpha = closing_to_start_logits(tape, &bnd_logits.reshape(&[t_len])?, t_len)?;

    let mut pool_cfg = cfg.pool.clone();
    if path == RefinePath::SoftSurrogate {
        pool_cfg.hard_scale = 1.0;
    }
    let pooled = soft_pool(&x, &alpha, &pool_cfg)?;
    let i_tokens = match path {
        RefinePath::StraightThrough => st_quantize(&pooled.g, codebook)?,
        RefinePath::SoftSurrogate => quantize_soft(&pooled.g, codebook)?,
    };
    let m_len = i_tokens.shape()[0];
    let v = model.n_speech;

    // Detached targets: the quantizer's current hard assignments.
    let targets: Vec<u32> = i_tokens
        .values()
        .chunks(v)
        .map(|row| {
            let mut best = 0usize;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect();

    // Mask the differentiable token stream: kept rows pass through the
    // quantizer output; masked/random rows become constant one-hots.
    let (corrupted, plan) = mask_spans(&targets, v, rng);
    let zeros = tape.matrix(vec![0.0; m_len], m_len, 1)?;
    let ext = concat_cols(&[&i_tokens, &zeros])?;
    let keep: Vec<f64> = plan
        .actions
        .iter()
        .map(|a| if *a == MaskAction::Keep { 1.0 } else { 0.0 })
        .collect();
    let mut overrides = vec![0.0; m_len * (v + 1)];
    for (t, action) in plan.actions.iter().enumerate() {
        let id = match action {
            MaskAction::Keep => continue,
            MaskAction::Mask => v,
            MaskAction::Random => corrupted[t] as usize,
        };
        overrides[t * (v + 1) + id] = 1.0;
    }
    let stream_onehot = ext
        .scale_rows(&tape.vector(keep))?
        .add(&tape.matrix(overrides, m_len, v + 1)?)?;

    let emb_table = bound_model.get(model.emb_x);
    let pe = tape.matrix(sinusoidal_pe(m_len, model.cfg.dim), m_len, model.cfg.dim)?;
    let emb = stream_onehot.matmul(emb_table)?.add(&pe)?;
    let outs = model.encode(bound_model, tape, &emb, mix, rng)?;
    let logits = model
        .head(Modality::Speech)
        .forward(bound_model, outs.last().expect("n_layers >= 2"))?;
    let wnll = weighted_nll(&logits, &targets, &plan.loss_weights(cfg.lambda))?;

    let hard_scale = if path == RefinePath::SoftSurrogate {
        1.0
    } else {
        cfg.pool.hard_scale
    };
    let b = straight_through_boundaries(&alpha, hard_scale)?;
    let (wc, wf) = boundary_penalties(&b, t_len, cfg.r, teacher_count)?;
    let mut loss = wnll.add(&wc.scale(cfg.gamma1).reshape(&[1])?)?;
    if let Some(wf) = wf {
        loss = loss.add(&wf.scale(cfg.gamma2).reshape(&[1])?)?;
    }
    Ok(loss)
}

/// Convert per-frame closing-frame logits into the segment-start logits the
/// soft pooler consumes: frame 0 is pinned decisively open, frame `t + 1`
/// inherits the closing score of frame `t`, and the final frame's closing
/// score is dropped because the segment it would open lies past the end.
/// Gradients flow back to every closing logit except the last.
pub(crate) fn closing_to_start_logits(
    tape: &Tape,
    closing: &Tensor,
    t_len: usize,
) -> Result<Tensor> {
    const OPEN: f64 = 25.0;
    let head = tape.vector(vec![OPEN]).reshape(&[1, 1])?;
    if t_len == 1 {
        return head.reshape(&[1]);
    }
    let tail = closing.reshape(&[t_len, 1])?.slice_rows(0, t_len - 1)?;
    concat_rows(&[&head, &tail])?.reshape(&[t_len])
}

/// Boundary-count penalty `|Σ b − n*|` and the summed per-window frequency
/// penalty `Σ_j |Σ_{(j−1)·r .. j·r} b − 1|` over the `⌊t_len/r⌋` full windows
/// of a length-`t_len` boundary-indicator vector. The window term is `None`
/// when the sequence is shorter than one window.
pub(crate) fn boundary_penalties(
    b: &Tensor,
    t_len: usize,
    r: usize,
    teacher_count: usize,
) -> Result<(Tensor, Option<Tensor>)> {
    let wc = b.sum().add_scalar(-(teacher_count as f64)).abs();
    let b2d = b.reshape(&[t_len, 1])?;
    let mut wf: Option<Tensor> = None;
    for j in 0..t_len / r {
        let win = b2d
            .slice_rows(j * r, (j + 1) * r)?
            .sum()
            .add_scalar(-1.0)
            .abs();
        wf = Some(match wf {
            Some(acc) => acc.add(&win)?,
            None => win,
        });
    }
    Ok((wc, wf))
}

/// One refinement step over a speech batch of (frames, teacher boundary
/// count) and a text batch. Gradients flow to both the encoder parameters
/// and the segmenter; each optimizer takes one step. Returns the mean
/// combined loss.
#[allow(clippy::too_many_arguments)]
pub fn e2e_refine_step(
    model: &mut JsttiModel,
    speech: &[(&FrameSequence, usize)],
    text: &[TokenSeq],
    cfg: &E2EConfig,
    opt_model: &mut Adam,
    opt_seg: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    cfg.validate()?;
    if model.segmenter.is_none() || model.frozen_codebook.is_none() {
        return Err(Error::Config(
            "end-to-end refinement requires an attached segmenter and frozen codebook".into(),
        ));
    }
    if speech.is_empty() {
        return Err(Error::NotEnough {
            what: "speech utterances",
            requested: 1,
            available: 0,
        });
    }
    let mut accum_model = GradAccum::new();
    let mut accum_seg = GradAccum::new();
    let mut total = 0.0;

    for &(frames, teacher_count) in speech {
        let tape = Tape::new();
        let bound_model = model.params.bind(&tape);
        let bound_seg = model
            .segmenter
            .as_ref()
            .expect("checked above")
            .params
            .bind(&tape);
        let loss = speech_refine_loss(
            model,
            &tape,
            &bound_model,
            &bound_seg,
            frames,
            teacher_count,
            cfg,
            rng,
            MixMode::Hard(cfg.mixup_p),
            RefinePath::StraightThrough,
        )?;
        total += loss.values()[0] / speech.len() as f64;
        let mut grads = backward(&loss.scale(1.0 / speech.len() as f64))?;
        accum_model.absorb(&mut grads, &bound_model);
        accum_seg.absorb(&mut grads, &bound_seg);
    }
    for seq in text {
        let vocab = model.n_words;
        let (masked, plan) = mask_spans(seq, vocab, rng);
        let tape = Tape::new();
        let (bound, loss) = model.infill_graph(
            &tape,
            &masked,
            &plan,
            seq,
            Modality::Text,
            cfg.lambda,
            MixMode::Hard(cfg.mixup_p),
            rng,
        )?;
        let weighted = loss.scale(cfg.tau / text.len().max(1) as f64);
        total += weighted.values()[0];
        let mut grads = backward(&weighted)?;
        accum_model.absorb(&mut grads, &bound);
    }
    opt_model.step(&mut model.params, accum_model);
    let seg = model.segmenter.as_mut().expect("checked above");
    opt_seg.step(&mut seg.params, accum_seg);
    Ok(total)
}

/// Combined refinement loss of the current parameters over all utterances,
/// with masking and mixup drawn from a stream that is identical on every
/// call, so values from different epochs are comparable.
fn refine_eval_loss(
    model: &JsttiModel,
    speech: &[(&FrameSequence, usize)],
    text: &[TokenSeq],
    cfg: &E2EConfig,
) -> Result<f64> {
    let mut rng = stream(cfg.seed, "e2e-eval", 0);
    let mut total = 0.0;
    for &(frames, teacher_count) in speech {
        let tape = Tape::new();
        let bound_model = model.params.bind(&tape);
        let bound_seg = model
            .segmenter
            .as_ref()
            .expect("segmenter checked by caller")
            .params
            .bind(&tape);
        let loss = speech_refine_loss(
            model,
            &tape,
            &bound_model,
            &bound_seg,
            frames,
            teacher_count,
            cfg,
            &mut rng,
            MixMode::Hard(cfg.mixup_p),
            RefinePath::StraightThrough,
        )?;
        total += loss.values()[0] / speech.len() as f64;
    }
    for seq in text {
        let (masked, plan) = mask_spans(seq, model.n_words, &mut rng);
        let tape = Tape::new();
        let (_, loss) = model.infill_graph(
            &tape,
            &masked,
            &plan,
            seq,
            Modality::Text,
            cfg.lambda,
            MixMode::Hard(cfg.mixup_p),
            &mut rng,
        )?;
        total += loss.values()[0] * cfg.tau / text.len().max(1) as f64;
    }
    Ok(total)
}

/// Run the full refinement loop: epochs of shuffled speech/text batches with
/// warmup + linear-decay optimizers for the encoder and the segmenter.
/// Returns the mean combined loss per epoch. The model and segmenter are left
/// at the parameters of the epoch whose end state scores best on a fixed
/// evaluation pass rather than at the last one: the hard boundary indicators
/// make the penalty terms jump whenever a logit crosses the threshold, so
/// late epochs can bounce out of a good state.
pub fn e2e_refine(
    model: &mut JsttiModel,
    speech: &[(&FrameSequence, usize)],
    text: &[TokenSeq],
    cfg: &E2EConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if speech.is_empty() || text.is_empty() {
        return Err(Error::NotEnough {
            what: "refinement utterances",
            requested: 1,
            available: 0,
        });
    }
    let bs = if cfg.batch_size == 0 {
        speech.len()
    } else {
        cfg.batch_size
    };
    let n_steps = speech.len().div_ceil(bs);
    let total = cfg.epochs * n_steps;
    let mut opt_model = Adam::new(LrSchedule::warmup_linear(cfg.lr, total));
    let mut opt_seg = Adam::new(LrSchedule::warmup_linear(cfg.lr, total));
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "e2e-epoch", epoch as u64);
        let mut s_order: Vec<usize> = (0..speech.len()).collect();
        let mut t_order: Vec<usize> = (0..text.len()).collect();
        s_order.shuffle(&mut rng);
        t_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for step in 0..n_steps {
            let s_batch: Vec<(&FrameSequence, usize)> = s_order
                [step * bs..((step + 1) * bs).min(speech.len())]
                .iter()
                .map(|&i| speech[i])
                .collect();
            let t_lo = (step * bs) % text.len();
            let t_hi = (t_lo + bs).min(text.len());
            let t_batch: Vec<TokenSeq> = t_order[t_lo..t_hi]
                .iter()
                .map(|&i| text[i].clone())
                .collect();
            epoch_loss +=
                e2e_refine_step(model, &s_batch, &t_batch, cfg, &mut opt_model, &mut opt_seg, &mut rng)?;
        }
        let mean = epoch_loss / n_steps as f64;
        losses.push(mean);
        let eval = refine_eval_loss(model, speech, text, cfg)?;
        if best.as_ref().map(|(b, _, _)| eval < *b).unwrap_or(true) {
            let mp = model.params.iter().map(|(_, p)| p.data.clone()).collect();
            let sp = model
                .segmenter
                .as_ref()
                .expect("checked above")
                .params
                .iter()
                .map(|(_, p)| p.data.clone())
                .collect();
            best = Some((eval, mp, sp));
        }
    }
    if let Some((_, mp, sp)) = best {
        let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
        for (id, data) in ids.into_iter().zip(mp) {
            model.params.get_mut(id).data = data;
        }
        let seg = model.segmenter.as_mut().expect("checked above");
        let ids: Vec<ParamId> = seg.params.iter().map(|(id, _)| id).collect();
        for (id, data) in ids.into_iter().zip(sp) {
            seg.params.get_mut(id).data = data;
        }
    }
    Ok(losses)
}
