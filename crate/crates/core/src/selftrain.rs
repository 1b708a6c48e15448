//! Pseudo-text self-training: a from-scratch convolutional frame encoder
//! trained with word-level CTC on pseudo transcripts, then greedy decoding.
//!
//! Class 0 is the CTC blank; word w maps to class w+1. [`ctc_loss`] is a
//! fused log-space forward–backward operation whose gradient with respect to
//! the logits is softmax(logits) − γ, with γ the state-occupancy posterior.

use rand::seq::SliceRandom;

use crate::autodiff::{backward, Tape, Tensor};
use crate::data::{FrameSequence, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{Adam, BoundParams, Conv1d, GradAccum, Linear, LrSchedule, ParamSet};
use crate::rng::stream;

const NEG_INF: f64 = f64::NEG_INFINITY;

fn lse2(a: f64, b: f64) -> f64 {
    if a == NEG_INF && b == NEG_INF {
        return NEG_INF;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Number of adjacent equal pairs in a target (each needs a separating blank).
fn adjacent_repeats(target: &[u32]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Row-wise log-softmax of raw values.
fn log_softmax_plain(values: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks(cols) {
        let max = row.iter().copied().fold(NEG_INF, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

/// Negative log-likelihood of `target` under the CTC path distribution
/// implied by `logits` (T × classes, class 0 = blank). Differentiable with
/// respect to the logits; rejects targets that cannot fit in T frames.
pub fn ctc_loss(logits: &Tensor, target: &[u32]) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[1] < 2 {
        return Err(Error::ShapeMismatch {
            op: "ctc_loss",
            left: logits.shape().to_vec(),
            right: vec![0, 2],
        });
    }
    let t_len = logits.shape()[0];
    let classes = logits.shape()[1];
    for &w in target {
        if w as usize + 1 >= classes {
            return Err(Error::TokenOutOfRange {
                token: w,
                vocab: classes - 1,
            });
        }
    }
    let repeats = adjacent_repeats(target);
    if t_len < target.len() + repeats {
        return Err(Error::CtcInfeasible {
            frames: t_len,
            target: target.len(),
            repeats,
        });
    }

    // Blank-interleaved expanded labels b, y1, b, y2, …, yL, b.
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| -> usize {
        if s % 2 == 0 {
            0
        } else {
            target[s / 2] as usize + 1
        }
    };
    let logp = log_softmax_plain(logits.values(), classes);
    let lp = |t: usize, s: usize| logp[t * classes + label(s)];

    // Forward: alpha[t][s] includes emissions 0..=t.
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = alpha[(t - 1) * s_len + s];
            let step = if s >= 1 {
                alpha[(t - 1) * s_len + s - 1]
            } else {
                NEG_INF
            };
            let skip = if s >= 2 && label(s) != 0 && label(s) != label(s - 2) {
                alpha[(t - 1) * s_len + s - 2]
            } else {
                NEG_INF
            };
            let prev = lse3(stay, step, skip);
            alpha[t * s_len + s] = if prev == NEG_INF {
                NEG_INF
            } else {
                prev + lp(t, s)
            };
        }
    }
    let final_a = alpha[(t_len - 1) * s_len + s_len - 1];
    let final_b = if s_len > 1 {
        alpha[(t_len - 1) * s_len + s_len - 2]
    } else {
        NEG_INF
    };
    let log_total = lse2(final_a, final_b);
    debug_assert!(log_total > NEG_INF, "feasibility was checked above");

    // Backward: beta[t][s] includes emissions t..T−1.
    let mut beta = vec![NEG_INF; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[(t_len - 1) * s_len + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = beta[(t + 1) * s_len + s];
            let step = if s + 1 < s_len {
                beta[(t + 1) * s_len + s + 1]
            } else {
                NEG_INF
            };
            let skip = if s + 2 < s_len && label(s + 2) != 0 && label(s + 2) != label(s) {
                beta[(t + 1) * s_len + s + 2]
            } else {
                NEG_INF
            };
            let next = lse3(stay, step, skip);
            beta[t * s_len + s] = if next == NEG_INF {
                NEG_INF
            } else {
                next + lp(t, s)
            };
        }
    }

    // Gradient wrt logits: softmax − γ, γ the per-frame class posterior.
    let mut grad_base = Vec::with_capacity(t_len * classes);
    for row in logp.chunks(classes) {
        grad_base.extend(row.iter().map(|v| v.exp()));
    }
    for t in 0..t_len {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == NEG_INF || b == NEG_INF {
                continue;
            }
            // Path mass through (t,s): α and β both include emission t.
            let occ = (a + b - lp(t, s) - log_total).exp();
            grad_base[t * classes + label(s)] -= occ;
        }
    }
    logits
        .tape()
        .custom_op(&[logits], vec![-log_total], vec![1], move |g| {
            vec![Some(grad_base.iter().map(|v| v * g[0]).collect())]
        })
}

/// Per-frame argmax (class 0 = blank), collapse adjacent repeats, drop
/// blanks, map class c to word c−1.
pub fn greedy_decode(frame_logits: &FrameSequence) -> TokenSeq {
    let mut out = Vec::new();
    let mut prev = 0usize;
    for t in 0..frame_logits.len() {
        let row = frame_logits.row(t);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best != 0 && best != prev {
            out.push(best as u32 - 1);
        }
        prev = best;
    }
    out
}

#[derive(Debug, Clone)]
pub struct SelfTrainOpts {
    pub hidden: usize,
    pub kernels: [usize; 3],
    /// Training steps; each consumes one utterance.
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SelfTrainOpts {
    fn default() -> Self {
        Self {
            hidden: 64,
            kernels: [5, 5, 3],
            steps: 400,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Frame encoder: conv stack with ReLU, then a linear per-frame head over
/// |Y|+1 classes (blank first).
#[derive(Debug, Clone)]
pub struct StudentModel {
    pub params: ParamSet,
    pub layers: Vec<Conv1d>,
    pub head: Linear,
    pub dim: usize,
    pub n_words: usize,
    pub opts: SelfTrainOpts,
}

impl StudentModel {
    pub fn new(dim: usize, n_words: usize, opts: &SelfTrainOpts) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = stream(opts.seed, "selftrain-init", 0);
        let widths = [dim, opts.hidden, opts.hidden, opts.hidden];
        let layers: Vec<Conv1d> = (0..3)
            .map(|i| {
                Conv1d::new(
                    &mut params,
                    &format!("conv{i}"),
                    widths[i],
                    widths[i + 1],
                    opts.kernels[i],
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let head = Linear::new(&mut params, "head", opts.hidden, n_words + 1, &mut rng)?;
        Ok(Self {
            params,
            layers,
            head,
            dim,
            n_words,
            opts: opts.clone(),
        })
    }

    fn forward(&self, bound: &BoundParams, tape: &Tape, frames: &FrameSequence) -> Result<Tensor> {
        let mut h = tape.matrix(frames.data().to_vec(), frames.len(), frames.dim)?;
        for layer in &self.layers {
            h = layer.forward(bound, &h)?.relu();
        }
        self.head.forward(bound, &h)
    }

    /// Per-frame class logits (T × |Y|+1).
    pub fn logits(&self, frames: &FrameSequence) -> Result<FrameSequence> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let z = self.forward(&bound, &tape, frames)?;
        FrameSequence::new(self.n_words + 1, z.values().to_vec())
    }

    /// Greedy-decoded transcription.
    pub fn transcribe(&self, frames: &FrameSequence) -> Result<TokenSeq> {
        Ok(greedy_decode(&self.logits(frames)?))
    }
}

/// Result of one self-training round.
#[derive(Debug)]
pub struct SelfTrainOutcome {
    pub model: StudentModel,
    pub train_hyps: Vec<TokenSeq>,
    pub eval_hyps: Vec<TokenSeq>,
}

/// Train a student on pseudo transcripts with CTC, then decode both splits.
/// Utterances with empty pseudo transcripts — or transcripts that cannot fit
/// their frame count — are skipped with a warning.
pub fn self_train_round(
    train_frames: &[&FrameSequence],
    pseudo: &[TokenSeq],
    eval_frames: &[&FrameSequence],
    n_words: usize,
    opts: &SelfTrainOpts,
) -> Result<SelfTrainOutcome> {
    if train_frames.len() != pseudo.len() {
        return Err(Error::ShapeMismatch {
            op: "self_train_round",
            left: vec![train_frames.len()],
            right: vec![pseudo.len()],
        });
    }
    let usable: Vec<usize> = (0..train_frames.len())
        .filter(|&i| {
            if pseudo[i].is_empty() {
                log::warn!("skipping utterance {i}: empty pseudo transcript");
                return false;
            }
            let need = pseudo[i].len() + adjacent_repeats(&pseudo[i]);
            if train_frames[i].len() < need {
                log::warn!(
                    "skipping utterance {i}: {} frames cannot fit a {}-word target",
                    train_frames[i].len(),
                    pseudo[i].len()
                );
                return false;
            }
            true
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::NotEnough {
            what: "usable pseudo-labeled utterances",
            requested: 1,
            available: 0,
        });
    }
    let dim = train_frames[usable[0]].dim;
    let mut model = StudentModel::new(dim, n_words, opts)?;
    let mut adam = Adam::new(LrSchedule::Constant(opts.lr));
    let mut order_rng = stream(opts.seed, "selftrain-order", 0);
    let mut order = usable.clone();
    for step in 0..opts.steps {
        let slot = step % order.len();
        if slot == 0 {
            order.shuffle(&mut order_rng);
        }
        let i = order[slot];
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let z = model.forward(&bound, &tape, train_frames[i])?;
        let loss = ctc_loss(&z, &pseudo[i])?;
        let mut grads = backward(&loss)?;
        let mut accum = GradAccum::new();
        accum.absorb(&mut grads, &bound);
        adam.step(&mut model.params, accum);
    }
    let train_hyps = train_frames
        .iter()
        .map(|f| model.transcribe(f))
        .collect::<Result<Vec<_>>>()?;
    let eval_hyps = eval_frames
        .iter()
        .map(|f| model.transcribe(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(SelfTrainOutcome {
        model,
        train_hyps,
        eval_hyps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{central_diff, max_abs_rel_err};
    use crate::corpus::{synth_corpus, SynthParams};
    use crate::rng::normal;
    use rand::Rng;

    /// Collapse a raw class path (blank = 0) to its word sequence.
    fn collapse(path: &[usize]) -> Vec<u32> {
        let mut out = Vec::new();
        let mut prev = 0usize;
        for &c in path {
            if c != 0 && c != prev {
                out.push(c as u32 - 1);
            }
            prev = c;
        }
        out
    }

    /// Brute-force CTC: sum softmax-path probabilities over every class path
    /// that collapses to the target.
    fn ctc_oracle(values: &[f64], t_len: usize, classes: usize, target: &[u32]) -> Option<f64> {
        let logp = log_softmax_plain(values, classes);
        let mut total = 0.0f64;
        let mut path = vec![0usize; t_len];
        let n_paths = classes.pow(t_len as u32);
        for mut code in 0..n_paths {
            for slot in path.iter_mut() {
                *slot = code % classes;
                code /= classes;
            }
            if collapse(&path) == target {
                let lp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &c)| logp[t * classes + c])
                    .sum();
                total += lp.exp();
            }
        }
        (total > 0.0).then(|| -total.ln())
    }

    fn random_logits(seed: u64, t_len: usize, classes: usize) -> Vec<f64> {
        let mut rng = stream(seed, "ctc-logits", 0);
        (0..t_len * classes).map(|_| normal(&mut rng)).collect()
    }

    #[test]
    fn ctc_single_frame_single_word_is_plain_nll() {
        let values = vec![0.2, 1.1, -0.7];
        let tape = Tape::new();
        let z = tape.matrix(values.clone(), 1, 3).unwrap();
        let loss = ctc_loss(&z, &[0]).unwrap().item().unwrap();
        let logp = log_softmax_plain(&values, 3);
        assert!((loss + logp[1]).abs() < 1e-12);
    }

    #[test]
    fn ctc_two_frames_single_word_matches_three_path_sum() {
        let values = vec![0.3, -0.2, 0.8, 1.4, 0.0, -0.5];
        let tape = Tape::new();
        let z = tape.matrix(values.clone(), 2, 3).unwrap();
        let loss = ctc_loss(&z, &[1]).unwrap().item().unwrap();
        let lp = log_softmax_plain(&values, 3);
        let (p1b, p1w, p2b, p2w) = (lp[0].exp(), lp[2].exp(), lp[3].exp(), lp[5].exp());
        let expect = -(p1w * p2w + p1b * p2w + p1w * p2b).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn ctc_matches_exhaustive_path_enumeration_on_all_small_instances() {
        let classes = 3; // two words + blank
        let mut checked = 0usize;
        for t_len in 1..=6usize {
            let values = random_logits(100 + t_len as u64, t_len, classes);
            // All targets over {0,1} of length 0..=3.
            let mut targets: Vec<Vec<u32>> = vec![vec![]];
            for len in 1..=3usize {
                for code in 0..(1usize << len) {
                    targets.push((0..len).map(|i| ((code >> i) & 1) as u32).collect());
                }
            }
            for target in targets {
                let tape = Tape::new();
                let z = tape.matrix(values.clone(), t_len, classes).unwrap();
                let feasible = t_len >= target.len() + adjacent_repeats(&target);
                match ctc_loss(&z, &target) {
                    Ok(loss) => {
                        assert!(feasible);
                        let oracle =
                            ctc_oracle(&values, t_len, classes, &target).expect("feasible");
                        let got = loss.item().unwrap();
                        let rel = (got - oracle).abs() / got.abs().max(oracle.abs()).max(1.0);
                        assert!(rel <= 1e-10, "T={t_len} target={target:?}: {got} vs {oracle}");
                        checked += 1;
                    }
                    Err(Error::CtcInfeasible { .. }) => assert!(!feasible),
                    Err(e) => panic!("unexpected error {e}"),
                }
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let (t_len, classes) = (5usize, 4usize);
        let target = vec![0u32, 2, 2];
        let x0 = random_logits(7, t_len, classes);
        let eval = |xs: &[f64]| {
            let tape = Tape::new();
            let z = tape.matrix(xs.to_vec(), t_len, classes).unwrap();
            ctc_loss(&z, &target).unwrap().item().unwrap()
        };
        let fd = central_diff(&eval, &x0, 1e-5);
        let tape = Tape::new();
        let z = tape.matrix(x0, t_len, classes).unwrap();
        let grads = backward(&ctc_loss(&z, &target).unwrap()).unwrap();
        assert!(max_abs_rel_err(&grads.wrt(&z), &fd) <= 1e-5);
    }

    #[test]
    fn ctc_rejects_infeasible_and_out_of_range_targets() {
        let tape = Tape::new();
        let z = tape.matrix(vec![0.0; 6], 2, 3).unwrap();
        let err = ctc_loss(&z, &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::CtcInfeasible {
                frames: 2,
                target: 2,
                repeats: 1
            }
        ));
        assert!(matches!(
            ctc_loss(&z, &[5]).unwrap_err(),
            Error::TokenOutOfRange { .. }
        ));
    }

    fn one_hot_frames(path: &[usize], classes: usize) -> FrameSequence {
        let mut data = vec![0.0; path.len() * classes];
        for (t, &c) in path.iter().enumerate() {
            data[t * classes + c] = 1.0;
        }
        FrameSequence::new(classes, data).unwrap()
    }

    #[test]
    fn greedy_decode_collapses_repeats_and_blanks() {
        // b, w0, w0, b, w1 → [w0, w1]
        let f = one_hot_frames(&[0, 1, 1, 0, 2], 3);
        assert_eq!(greedy_decode(&f), vec![0, 1]);
        let f = one_hot_frames(&[0, 0, 0], 3);
        assert!(greedy_decode(&f).is_empty());
    }

    #[test]
    fn greedy_decode_inverts_constructed_valid_paths() {
        let mut rng = stream(17, "ctc-paths", 0);
        for _ in 0..50 {
            let len = rng.random_range(1..6usize);
            let target: Vec<u32> = (0..len).map(|_| rng.random_range(0..4u32)).collect();
            // Emit each word once, separating equal neighbours with a blank,
            // then pad with trailing blanks.
            let mut path = Vec::new();
            for (i, &w) in target.iter().enumerate() {
                if i > 0 && target[i - 1] == w {
                    path.push(0);
                }
                path.push(w as usize + 1);
            }
            path.extend([0, 0]);
            assert_eq!(greedy_decode(&one_hot_frames(&path, 5)), target);
        }
    }

    #[test]
    fn student_on_gold_pseudo_text_reaches_near_zero_wer() {
        let mut rng = stream(23, "selftrain-sents", 0);
        // No adjacent repeats: with zero noise, "w w" is indistinguishable
        // from one long "w", which would cap the reachable accuracy.
        let sentences: Vec<Vec<u32>> = (0..80)
            .map(|_| {
                let len = rng.random_range(3..6usize);
                let mut s: Vec<u32> = Vec::with_capacity(len);
                while s.len() < len {
                    let w = rng.random_range(0..8u32);
                    if s.last() != Some(&w) {
                        s.push(w);
                    }
                }
                s
            })
            .collect();
        let params = SynthParams {
            dim: 8,
            frames_per_word_mean: 5.0,
            noise_sigma: 0.0,
            n_speakers: 2,
            seed: 11,
            ..SynthParams::default()
        };
        let utts = synth_corpus(&sentences, &params).unwrap();
        let (train, eval): (Vec<_>, Vec<_>) = utts.iter().enumerate().partition(|(i, _)| i % 4 != 0);
        let train_frames: Vec<&FrameSequence> = train.iter().map(|(_, u)| &u.frames).collect();
        let pseudo: Vec<TokenSeq> = train.iter().map(|(_, u)| u.words.clone()).collect();
        let eval_frames: Vec<&FrameSequence> = eval.iter().map(|(_, u)| &u.frames).collect();
        let opts = SelfTrainOpts {
            hidden: 32,
            steps: 1500,
            lr: 3e-3,
            seed: 3,
            ..SelfTrainOpts::default()
        };
        let out = self_train_round(&train_frames, &pseudo, &eval_frames, 8, &opts).unwrap();
        let train_report = crate::eval::wer(&pseudo, &out.train_hyps).unwrap();
        let refs: Vec<TokenSeq> = eval.iter().map(|(_, u)| u.words.clone()).collect();
        let report = crate::eval::wer(&refs, &out.eval_hyps).unwrap();
        assert!(
            report.wer <= 0.02,
            "eval WER {} train WER {}",
            report.wer,
            train_report.wer
        );
    }

    #[test]
    fn self_training_skips_empty_and_oversized_transcripts() {
        let f_ok = FrameSequence::from_rows(&[vec![1.0], vec![0.5], vec![0.2], vec![0.9]]).unwrap();
        let f_tiny = FrameSequence::from_rows(&[vec![1.0]]).unwrap();
        let frames: Vec<&FrameSequence> = vec![&f_ok, &f_tiny, &f_ok];
        let pseudo = vec![vec![0u32], vec![0, 1, 0], vec![]];
        let opts = SelfTrainOpts {
            hidden: 4,
            steps: 3,
            ..SelfTrainOpts::default()
        };
        // Only the first utterance is usable; the round still runs.
        let out = self_train_round(&frames, &pseudo, &[], 2, &opts).unwrap();
        assert_eq!(out.train_hyps.len(), 3);
        // All unusable → error.
        let err = self_train_round(&frames[1..2], &pseudo[2..3], &[], 2, &opts).unwrap_err();
        assert!(matches!(err, Error::NotEnough { .. }), "{err}");
    }

    #[test]
    fn self_training_is_deterministic_under_fixed_seed() {
        let f = FrameSequence::from_rows(&[vec![0.3], vec![0.9], vec![-0.2], vec![0.5]]).unwrap();
        let frames: Vec<&FrameSequence> = vec![&f];
        let pseudo = vec![vec![1u32]];
        let opts = SelfTrainOpts {
            hidden: 6,
            steps: 10,
            ..SelfTrainOpts::default()
        };
        let a = self_train_round(&frames, &pseudo, &frames, 3, &opts).unwrap();
        let b = self_train_round(&frames, &pseudo, &frames, 3, &opts).unwrap();
        let wa: Vec<f64> = a.model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        let wb: Vec<f64> = b.model.params.iter().flat_map(|(_, p)| p.data.clone()).collect();
        assert_eq!(wa, wb);
        assert_eq!(a.eval_hyps, b.eval_hyps);
    }
}
