//! Joint masked token-infilling over speech-cluster and word streams.
//!
//! One transformer encoder is shared between the two modalities; each
//! modality owns only its token-embedding table and output head. Training
//! alternates speech and text batches of span-masked sequences under a
//! weighted negative log-likelihood ([`infill_loss`]), with encoder states
//! randomly snapped to a shared straight-through Gumbel-softmax codebook
//! ([`JsttiModel::mixup`]) so the two modalities are forced into one
//! representation space. Transcription reads the text head off the
//! second-to-last encoder layer ([`infer_transcript`]).
//!
//! Submodules: [`e2e`] couples the encoder to a trainable boundary segmenter
//! for end-to-end refinement; [`xmodal`] builds an embedding-alignment
//! fallback decoder.

pub mod e2e;
pub mod xmodal;

pub use e2e::{
    attach_segmenter, clone_segmenter, e2e_refine, e2e_refine_step, CloneExample, CloneOpts,
    E2EConfig, SegmenterNet,
};
pub use xmodal::{xmodal_align, xmodal_infer, XModalMode, XModalTable};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, concat_cols, Tape, Tensor};
use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::{Adam, BoundParams, GradAccum, Linear, LrSchedule, ParamId, ParamSet};
use crate::rng::{poisson_clipped, stream};

/// Which modality a token sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Speech,
    Text,
}

/// What happened to one input position during span masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Replaced by the MASK token.
    Mask,
    /// Replaced by a random in-vocabulary token.
    Random,
    /// Left as-is.
    Keep,
}

/// Per-position record of a masking draw. Positions with action `Mask` or
/// `Random` form the masked set; `Keep` positions form the unmasked set.
#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub actions: Vec<MaskAction>,
    /// Placed spans as (start, length, action) in placement order.
    pub spans: Vec<(usize, usize, MaskAction)>,
}

impl MaskPlan {
    /// Positions whose input was corrupted (masked or randomized).
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.actions.len())
            .filter(|&i| self.actions[i] != MaskAction::Keep)
            .collect()
    }

    /// Positions left untouched.
    pub fn unmasked_positions(&self) -> Vec<usize> {
        (0..self.actions.len())
            .filter(|&i| self.actions[i] == MaskAction::Keep)
            .collect()
    }

    /// A plan that corrupts nothing (used for unmasked passes).
    pub fn keep_all(len: usize) -> Self {
        Self {
            actions: vec![MaskAction::Keep; len],
            spans: Vec::new(),
        }
    }

    /// Loss weight per position: 1 for corrupted, `lambda` for kept.
    pub fn loss_weights(&self, lambda: f64) -> Vec<f64> {
        self.actions
            .iter()
            .map(|a| if *a == MaskAction::Keep { lambda } else { 1.0 })
            .collect()
    }
}

/// Mean span length for masking draws.
const SPAN_MEAN: f64 = 3.5;
/// Fraction of the sequence that spans may cover.
const SPAN_BUDGET_FRACTION: f64 = 0.3;
/// Probability that a placed span is masked rather than randomized.
const SPAN_MASK_PROB: f64 = 0.9;

/// Corrupt a token sequence with non-overlapping random spans.
///
/// Span lengths are Poisson(3.5) clipped to at least 1; spans are placed at
/// uniformly random non-overlapping starts until the next draw would push
/// total coverage past 30% of the sequence length (or no gap fits it). Each
/// span is wholly replaced by the MASK token (id = `vocab`) with probability
/// 0.9, or by per-position uniform random tokens below `vocab` otherwise.
/// The sequence length never changes.
pub fn mask_spans(seq: &[u32], vocab: usize, rng: &mut ChaCha8Rng) -> (Vec<u32>, MaskPlan) {
    let n = seq.len();
    let budget = (SPAN_BUDGET_FRACTION * n as f64).floor() as usize;
    let mut occupied = vec![false; n];
    let mut covered = 0usize;
    let mut spans = Vec::new();
    loop {
        let len = poisson_clipped(rng, SPAN_MEAN, 1) as usize;
        if covered + len > budget {
            break;
        }
        let valid: Vec<usize> = (0..n + 1 - len)
            .filter(|&p| !occupied[p..p + len].iter().any(|&o| o))
            .collect();
        let Some(&start) = valid.as_slice().choose(rng) else {
            break;
        };
        occupied[start..start + len].iter_mut().for_each(|o| *o = true);
        covered += len;
        let action = if rng.random::<f64>() < SPAN_MASK_PROB {
            MaskAction::Mask
        } else {
            MaskAction::Random
        };
        spans.push((start, len, action));
    }
    let mut actions = vec![MaskAction::Keep; n];
    let mut out = seq.to_vec();
    for &(start, len, action) in &spans {
        for i in start..start + len {
            actions[i] = action;
            out[i] = match action {
                MaskAction::Mask => vocab as u32,
                MaskAction::Random => rng.random_range(0..vocab as u32),
                MaskAction::Keep => unreachable!(),
            };
        }
    }
    (out, MaskPlan { actions, spans })
}

/// Hyperparameters for the shared-encoder infilling model.
#[derive(Debug, Clone)]
pub struct JsttiConfig {
    /// Model (embedding) dimension.
    pub dim: usize,
    /// Feed-forward inner dimension.
    pub ff: usize,
    /// Attention heads; must divide `dim`.
    pub heads: usize,
    /// Encoder layers; at least 2 so a second-to-last readout exists.
    pub n_layers: usize,
    /// Weight on kept (uncorrupted) positions in the infilling loss.
    pub lambda: f64,
    /// Per-position probability of snapping an encoder state to the codebook.
    pub mixup_p: f64,
    /// Mix-up codebook entries.
    pub codebook: usize,
    /// Gumbel-softmax temperature.
    pub gumbel_temp: f64,
    /// Weight of the codebook-usage diversity penalty; 0 disables it.
    pub diversity_weight: f64,
    /// 1-based encoder layer whose output feeds the mix-up quantizer.
    pub quant_layer: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for JsttiConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            ff: 512,
            heads: 4,
            n_layers: 2,
            lambda: 0.5,
            mixup_p: 0.3,
            codebook: 256,
            gumbel_temp: 1.0,
            diversity_weight: 0.0,
            quant_layer: 2,
            lr: 2e-4,
            epochs: 60,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl JsttiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention heads ({}) must divide model dim ({})",
                self.heads, self.dim
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config(
                "need at least 2 encoder layers for a second-to-last readout".into(),
            ));
        }
        if self.quant_layer == 0 || self.quant_layer > self.n_layers {
            return Err(Error::Config(format!(
                "quant_layer {} outside 1..={}",
                self.quant_layer, self.n_layers
            )));
        }
        if !(0.0..=1.0).contains(&self.mixup_p) {
            return Err(Error::Config(format!(
                "mixup probability {} outside [0,1]",
                self.mixup_p
            )));
        }
        if self.lambda < 0.0 || self.gumbel_temp <= 0.0 || self.codebook == 0 {
            return Err(Error::Config(
                "lambda must be >= 0, temperature > 0, codebook non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
    dim: usize,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    fn new(params: &mut ParamSet, name: &str, dim: usize) -> Result<Self> {
        let gain = params.add(&format!("{name}.gain"), &[dim], vec![1.0; dim])?;
        let bias = params.add_zeros(&format!("{name}.bias"), &[dim])?;
        Ok(Self { gain, bias, dim })
    }

    fn forward(&self, bound: &BoundParams, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let (m, n) = (x.shape()[0], x.shape()[1]);
        debug_assert_eq!(n, self.dim);
        let ones_row = tape.matrix(vec![1.0; n], 1, n)?;
        let mean = x.row_sums()?.scale(1.0 / n as f64).reshape(&[m, 1])?;
        let centered = x.sub(&mean.matmul(&ones_row)?)?;
        let var = centered.square().row_sums()?.scale(1.0 / n as f64);
        let inv_std = var.add_scalar(LN_EPS).sqrt().recip();
        centered
            .scale_rows(&inv_std)?
            .mul_row(bound.get(self.gain))?
            .add_row(bound.get(self.bias))
    }
}

/// One post-norm encoder layer: self-attention and feed-forward sublayers,
/// each followed by a residual connection and layer norm.
#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff2: Linear,
    ln_attn: LayerNorm,
    ln_ff: LayerNorm,
    heads: usize,
    dim: usize,
}

impl EncoderLayer {
    fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        ff: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(params, &format!("{name}.wq"), dim, dim, rng)?,
            wk: Linear::new(params, &format!("{name}.wk"), dim, dim, rng)?,
            wv: Linear::new(params, &format!("{name}.wv"), dim, dim, rng)?,
            wo: Linear::new(params, &format!("{name}.wo"), dim, dim, rng)?,
            ff1: Linear::new(params, &format!("{name}.ff1"), dim, ff, rng)?,
            ff2: Linear::new(params, &format!("{name}.ff2"), ff, dim, rng)?,
            ln_attn: LayerNorm::new(params, &format!("{name}.ln_attn"), dim)?,
            ln_ff: LayerNorm::new(params, &format!("{name}.ln_ff"), dim)?,
            heads,
            dim,
        })
    }

    fn attention(&self, bound: &BoundParams, x: &Tensor) -> Result<Tensor> {
        let q = self.wq.forward(bound, x)?;
        let k = self.wk.forward(bound, x)?;
        let v = self.wv.forward(bound, x)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi)?;
            let kh = k.slice_cols(lo, hi)?;
            let vh = v.slice_cols(lo, hi)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            ctx.push(scores.softmax_rows()?.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = ctx.iter().collect();
        self.wo.forward(bound, &concat_cols(&refs)?)
    }

    fn forward(&self, bound: &BoundParams, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let h = self.ln_attn.forward(bound, tape, &x.add(&self.attention(bound, x)?)?)?;
        let ff = self.ff2.forward(bound, &self.ff1.forward(bound, &h)?.relu())?;
        self.ln_ff.forward(bound, tape, &h.add(&ff)?)
    }
}

/// Classic fixed sinusoidal position encoding, length `t_len` by `dim`.
pub fn sinusoidal_pe(t_len: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t_len * dim];
    for t in 0..t_len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            pe[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// How the mix-up quantizer participates in a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum MixMode {
    /// No state is snapped (inference).
    Off,
    /// Straight-through: hard codebook rows forward, soft gradients back.
    Hard(f64),
    /// Soft mixture of codebook rows (the surrogate the hard path's
    /// gradient is defined by; used for finite-difference checks).
    Soft(f64),
}

/// Shared-encoder joint infilling model over one speech-cluster vocabulary
/// and one word vocabulary. MASK is the last row of each embedding table.
pub struct JsttiModel {
    pub params: ParamSet,
    pub cfg: JsttiConfig,
    pub n_speech: usize,
    pub n_words: usize,
    emb_x: ParamId,
    emb_y: ParamId,
    layers: Vec<EncoderLayer>,
    head_x: Linear,
    head_y: Linear,
    mix_proj: Linear,
    mix_codebook: ParamId,
    /// Attached boundary segmenter for end-to-end refinement.
    pub segmenter: Option<SegmenterNet>,
    /// Frozen word-level codebook the end-to-end path quantizes against.
    pub frozen_codebook: Option<crate::quantize::Codebook>,
}

impl JsttiModel {
    pub fn new(n_speech: usize, n_words: usize, cfg: &JsttiConfig) -> Result<Self> {
        cfg.validate()?;
        if n_speech == 0 || n_words == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = stream(cfg.seed, "jstti-init", 0);
        let d = cfg.dim;
        let emb_x = params.add_uniform("emb_x", &[n_speech + 1, d], d, &mut rng)?;
        let emb_y = params.add_uniform("emb_y", &[n_words + 1, d], d, &mut rng)?;
        let layers = (0..cfg.n_layers)
            .map(|i| EncoderLayer::new(&mut params, &format!("enc{i}"), d, cfg.ff, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_x = Linear::new(&mut params, "head_x", d, n_speech, &mut rng)?;
        let head_y = Linear::new(&mut params, "head_y", d, n_words, &mut rng)?;
        let mix_proj = Linear::new(&mut params, "mix.proj", d, cfg.codebook, &mut rng)?;
        let mix_codebook = params.add_uniform("mix.codebook", &[cfg.codebook, d], d, &mut rng)?;
        Ok(Self {
            params,
            cfg: cfg.clone(),
            n_speech,
            n_words,
            emb_x,
            emb_y,
            layers,
            head_x,
            head_y,
            mix_proj,
            mix_codebook,
            segmenter: None,
            frozen_codebook: None,
        })
    }

    pub fn vocab(&self, modality: Modality) -> usize {
        match modality {
            Modality::Speech => self.n_speech,
            Modality::Text => self.n_words,
        }
    }

    fn emb_table(&self, modality: Modality) -> ParamId {
        match modality {
            Modality::Speech => self.emb_x,
            Modality::Text => self.emb_y,
        }
    }

    fn head(&self, modality: Modality) -> Linear {
        match modality {
            Modality::Speech => self.head_x,
            Modality::Text => self.head_y,
        }
    }

    /// Token embeddings plus position encoding. Token id `vocab` is MASK.
    pub fn embed_tokens(
        &self,
        bound: &BoundParams,
        tape: &Tape,
        tokens: &[u32],
        modality: Modality,
    ) -> Result<Tensor> {
        let vocab = self.vocab(modality);
        let idx: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                if (t as usize) > vocab {
                    Err(Error::TokenOutOfRange { token: t, vocab })
                } else {
                    Ok(t as usize)
                }
            })
            .collect::<Result<_>>()?;
        if idx.is_empty() {
            return Err(Error::InvalidArg("cannot embed an empty sequence".into()));
        }
        let e = bound.get(self.emb_table(modality)).gather_rows(&idx)?;
        let pe = tape.matrix(sinusoidal_pe(idx.len(), self.cfg.dim), idx.len(), self.cfg.dim)?;
        e.add(&pe)
    }

    /// Snap each row of `h` to the shared codebook with probability `p`.
    ///
    /// A row's codebook mixture comes from a Gumbel-softmax over projected
    /// logits; in [`MixMode::Hard`] the forward value is the argmax codebook
    /// row while gradients follow the soft mixture, and gradients reach both
    /// the surviving encoder states and the codebook.
    pub fn mixup(
        &self,
        bound: &BoundParams,
        tape: &Tape,
        h: &Tensor,
        mode: MixMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let (p, hard) = match mode {
            MixMode::Off => return Ok(h.clone()),
            MixMode::Hard(p) => (p, true),
            MixMode::Soft(p) => (p, false),
        };
        if p <= 0.0 {
            return Ok(h.clone());
        }
        let (t_len, v) = (h.shape()[0], self.cfg.codebook);
        let logits = self.mix_proj.forward(bound, h)?;
        let gumbel: Vec<f64> = (0..t_len * v)
            .map(|_| {
                let u: f64 = rng.random::<f64>().max(1e-300);
                -(-u.ln()).ln()
            })
            .collect();
        let noisy = logits
            .add(&tape.matrix(gumbel, t_len, v)?)?
            .scale(1.0 / self.cfg.gumbel_temp);
        let soft = noisy.softmax_rows()?;
        let mixture = if hard {
            let mut delta = vec![0.0; t_len * v];
            for (t, row) in soft.values().chunks(v).enumerate() {
                let mut best = 0;
                for (j, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = j;
                    }
                }
                for (j, &x) in row.iter().enumerate() {
                    delta[t * v + j] = if j == best { 1.0 - x } else { -x };
                }
            }
            soft.add(&tape.matrix(delta, t_len, v)?)?
        } else {
            soft
        };
        let mixed = mixture.matmul(bound.get(self.mix_codebook))?;
        let sel: Vec<f64> = (0..t_len)
            .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
            .collect();
        let keep: Vec<f64> = sel.iter().map(|&s| 1.0 - s).collect();
        h.scale_rows(&tape.vector(keep))?
            .add(&mixed.scale_rows(&tape.vector(sel))?)
    }

    /// Run the encoder stack from an embedded sequence, applying mix-up at
    /// the configured layer. Returns every layer's output, post-mix-up.
    pub fn encode(
        &self,
        bound: &BoundParams,
        tape: &Tape,
        emb: &Tensor,
        mix: MixMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Tensor>> {
        let mut h = emb.clone();
        let mut outs = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            h = layer.forward(bound, tape, &h)?;
            if li + 1 == self.cfg.quant_layer {
                h = self.mixup(bound, tape, &h, mix, rng)?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }

    /// Final-layer logits of the modality head for a (possibly corrupted)
    /// token sequence.
    pub fn token_logits(
        &self,
        bound: &BoundParams,
        tape: &Tape,
        tokens: &[u32],
        modality: Modality,
        mix: MixMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let emb = self.embed_tokens(bound, tape, tokens, modality)?;
        let outs = self.encode(bound, tape, &emb, mix, rng)?;
        self.head(modality).forward(bound, outs.last().expect("n_layers >= 2"))
    }

    /// Build the infilling loss graph on `tape`; returns the parameter
    /// binding used (for gradient extraction) and the scalar loss.
    #[allow(clippy::too_many_arguments)]
    pub fn infill_graph(
        &self,
        tape: &Tape,
        masked: &[u32],
        plan: &MaskPlan,
        original: &[u32],
        modality: Modality,
        lambda: f64,
        mix: MixMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(BoundParams, Tensor)> {
        if masked.len() != original.len() || masked.len() != plan.actions.len() {
            return Err(Error::ShapeMismatch {
                op: "infill_graph",
                left: vec![masked.len(), plan.actions.len()],
                right: vec![original.len()],
            });
        }
        let bound = self.params.bind(tape);
        let logits = self.token_logits(&bound, tape, masked, modality, mix, rng)?;
        let loss = weighted_nll(&logits, original, &plan.loss_weights(lambda))?;
        Ok((bound, loss))
    }
}

/// −Σ_t w_t · log softmax(logits)_t[target_t].
fn weighted_nll(logits: &Tensor, targets: &[u32], weights: &[f64]) -> Result<Tensor> {
    let cols: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    logits
        .log_softmax_rows()?
        .pick(&cols)?
        .weighted_sum(weights)?
        .neg()
        .reshape(&[1])
}

/// Weighted infilling negative log-likelihood of the original sequence given
/// its masked version: corrupted positions weigh 1, kept positions `lambda`.
/// Deterministic (no mix-up); returns the scalar value.
pub fn infill_loss(
    model: &JsttiModel,
    masked: &[u32],
    plan: &MaskPlan,
    original: &[u32],
    modality: Modality,
    lambda: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let mut rng = stream(0, "unused", 0);
    let (_, loss) = model.infill_graph(
        &tape,
        masked,
        plan,
        original,
        modality,
        lambda,
        MixMode::Off,
        &mut rng,
    )?;
    Ok(loss.values()[0])
}

/// Words read from the text head after applying `layers_applied` encoder
/// layers (1-based count) to an unmasked speech sequence. Ties in the
/// per-position argmax resolve to the lowest word id.
pub fn infer_with_layer(
    model: &JsttiModel,
    speech: &[u32],
    layers_applied: usize,
) -> Result<TokenSeq> {
    if layers_applied == 0 || layers_applied > model.cfg.n_layers {
        return Err(Error::InvalidArg(format!(
            "readout layer {layers_applied} outside 1..={}",
            model.cfg.n_layers
        )));
    }
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let mut rng = stream(0, "unused", 0);
    let emb = model.embed_tokens(&bound, &tape, speech, Modality::Speech)?;
    let outs = model.encode(&bound, &tape, &emb, MixMode::Off, &mut rng)?;
    let logits = model
        .head(Modality::Text)
        .forward(&bound, &outs[layers_applied - 1])?;
    let v = model.n_words;
    Ok(logits
        .values()
        .chunks(v)
        .map(|row| {
            let mut best = 0usize;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect())
}

/// Transcribe a speech-cluster sequence by reading the text head off the
/// second-to-last encoder layer. Output length equals input length.
pub fn infer_transcript(model: &JsttiModel, speech: &[u32]) -> Result<TokenSeq> {
    infer_with_layer(model, speech, model.cfg.n_layers - 1)
}

/// Mean WER of `pairs` under a chosen readout layer.
pub fn readout_wer(model: &JsttiModel, pairs: &[(TokenSeq, TokenSeq)], layer: usize) -> Result<f64> {
    let refs: Vec<TokenSeq> = pairs.iter().map(|(_, y)| y.clone()).collect();
    let hyps: Vec<TokenSeq> = pairs
        .iter()
        .map(|(x, _)| infer_with_layer(model, x, layer))
        .collect::<Result<_>>()?;
    Ok(crate::eval::wer(&refs, &hyps)?.wer)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default)]
pub struct JsttiTrainLog {
    /// Mean per-utterance speech loss per epoch.
    pub speech_loss: Vec<f64>,
    /// Mean per-utterance text loss per epoch.
    pub text_loss: Vec<f64>,
    /// Validation WER per epoch (empty when no validation pairs given).
    pub val_wer: Vec<f64>,
    /// Epoch whose parameters were kept (lowest validation WER).
    pub best_epoch: Option<usize>,
}

/// Codebook-usage diversity penalty: (V − exp H(mean soft assignment)) / V.
/// Zero when usage is uniform; grows as the codebook collapses.
fn diversity_penalty(soft_mean: &Tensor) -> Tensor {
    let v = soft_mean.len() as f64;
    let h = soft_mean
        .add_scalar(1e-12)
        .ln()
        .mul(&soft_mean.add_scalar(1e-12))
        .expect("same shape")
        .sum()
        .neg();
    h.exp().neg().add_scalar(v).scale(1.0 / v)
}

fn batches(n: usize, size: usize) -> Vec<(usize, usize)> {
    if size == 0 || size >= n {
        return vec![(0, n)];
    }
    (0..n.div_ceil(size))
        .map(|b| (b * size, ((b + 1) * size).min(n)))
        .collect()
}

/// Train the shared-encoder infilling model on unpaired speech-cluster and
/// word sequences, alternating one speech batch and one text batch per
/// optimizer step. When paired validation sequences are supplied, the
/// checkpoint with the lowest last-layer-readout validation WER is returned;
/// otherwise the final parameters are.
pub fn train_jstti(
    speech: &[TokenSeq],
    text: &[TokenSeq],
    val: &[(TokenSeq, TokenSeq)],
    n_speech: usize,
    n_words: usize,
    cfg: &JsttiConfig,
    init: Option<JsttiModel>,
) -> Result<(JsttiModel, JsttiTrainLog)> {
    cfg.validate()?;
    if speech.is_empty() || text.is_empty() {
        return Err(Error::NotEnough {
            what: "training sequences",
            requested: 1,
            available: 0,
        });
    }
    for s in speech {
        if s.is_empty() {
            return Err(Error::InvalidArg("empty speech sequence".into()));
        }
    }
    for t in text {
        if t.is_empty() {
            return Err(Error::InvalidArg("empty text sequence".into()));
        }
    }
    let mut model = match init {
        Some(m) => {
            if m.n_speech != n_speech || m.n_words != n_words {
                return Err(Error::Config(format!(
                    "warm-start vocabularies ({}, {}) do not match requested ({}, {})",
                    m.n_speech, m.n_words, n_speech, n_words
                )));
            }
            m
        }
        None => JsttiModel::new(n_speech, n_words, cfg)?,
    };
    let sb = batches(speech.len(), cfg.batch_size);
    let tb = batches(text.len(), cfg.batch_size);
    let steps_per_epoch = sb.len() + tb.len();
    let total = cfg.epochs * steps_per_epoch;
    let mut adam = Adam::new(LrSchedule::warmup_linear(cfg.lr, total));
    let mut log = JsttiTrainLog::default();
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "jstti-epoch", epoch as u64);
        let mut s_order: Vec<usize> = (0..speech.len()).collect();
        let mut t_order: Vec<usize> = (0..text.len()).collect();
        s_order.shuffle(&mut rng);
        t_order.shuffle(&mut rng);
        let mut epoch_loss = [0.0f64; 2];
        for step in 0..sb.len().max(tb.len()) {
            for (mi, (modality, order, bs)) in [
                (Modality::Speech, &s_order, &sb),
                (Modality::Text, &t_order, &tb),
            ]
            .into_iter()
            .enumerate()
            {
                let (lo, hi) = bs[step % bs.len()];
                let idxs = &order[lo..hi];
                let mut accum = GradAccum::new();
                let mut batch_loss = 0.0;
                for &i in idxs {
                    let seq = match modality {
                        Modality::Speech => &speech[i],
                        Modality::Text => &text[i],
                    };
                    let vocab = model.vocab(modality);
                    let (masked, plan) = mask_spans(seq, vocab, &mut rng);
                    let tape = Tape::new();
                    let (bound, mut loss) = model.infill_graph(
                        &tape,
                        &masked,
                        &plan,
                        seq,
                        modality,
                        cfg.lambda,
                        MixMode::Hard(cfg.mixup_p),
                        &mut rng,
                    )?;
                    if cfg.diversity_weight > 0.0 {
                        let emb = model.embed_tokens(&bound, &tape, &masked, modality)?;
                        let outs = model.encode(&bound, &tape, &emb, MixMode::Off, &mut rng)?;
                        let logits = model.mix_proj.forward(&bound, &outs[model.cfg.quant_layer - 1])?;
                        let soft_mean = logits
                            .scale(1.0 / model.cfg.gumbel_temp)
                            .softmax_rows()?
                            .transpose()?
                            .row_sums()?
                            .scale(1.0 / masked.len() as f64);
                        loss = loss.add(&diversity_penalty(&soft_mean).scale(cfg.diversity_weight))?;
                    }
                    batch_loss += loss.values()[0];
                    let mut grads = backward(&loss)?;
                    accum.absorb(&mut grads, &bound);
                }
                accum.scale(1.0 / idxs.len() as f64);
                adam.step(&mut model.params, accum);
                epoch_loss[mi] += batch_loss;
            }
        }
        log.speech_loss.push(epoch_loss[0] / speech.len() as f64);
        log.text_loss.push(epoch_loss[1] / text.len() as f64);
        if !val.is_empty() {
            let wer = readout_wer(&model, val, model.cfg.n_layers)?;
            log.val_wer.push(wer);
            let better = best.as_ref().map(|(b, _)| wer < *b).unwrap_or(true);
            if better {
                let snapshot = model.params.iter().map(|(_, p)| p.data.clone()).collect();
                best = Some((wer, snapshot));
                log.best_epoch = Some(epoch);
            }
        }
    }
    if let Some((_, snapshot)) = best {
        let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
        for (id, data) in ids.into_iter().zip(snapshot) {
            model.params.get_mut(id).data = data;
        }
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests;
