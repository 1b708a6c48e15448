//! Tests for span masking, the shared-encoder infilling model, end-to-end
//! boundary refinement, and cross-modal alignment.

use std::cell::RefCell;

use rand::Rng as _;

use super::e2e::{boundary_penalties, speech_refine_loss, RefinePath};
use super::xmodal::token_means;
use super::*;
use crate::autodiff::gradcheck::{central_diff, max_abs_rel_err};
use crate::corpus::{synth_corpus, SynthParams, Utterance};
use crate::data::ends_to_closing_frames;
use crate::eval::boundary_prf;
use crate::pooling::{hard_pool, straight_through_boundaries, SoftPoolConfig};
use crate::quantize::{assign, kmeans_fit, KmeansOpts};

fn small_cfg() -> JsttiConfig {
    JsttiConfig {
        dim: 8,
        ff: 16,
        heads: 2,
        codebook: 4,
        ..JsttiConfig::default()
    }
}

fn zero_all_params(model: &mut JsttiModel) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in model.params.get_mut(id).data.iter_mut() {
            *v = 0.0;
        }
    }
}

/// First seed whose masking draw on `seq` corrupts at least one position and
/// keeps at least one.
fn masked_and_kept_draw(seq: &[u32], vocab: usize) -> (Vec<u32>, MaskPlan) {
    for seed in 0..64 {
        let mut rng = stream(seed, "mask-draw", 0);
        let (masked, plan) = mask_spans(seq, vocab, &mut rng);
        if !plan.masked_positions().is_empty() && !plan.unmasked_positions().is_empty() {
            return (masked, plan);
        }
    }
    panic!("no masking seed produced a mixed plan");
}

// ---------------------------------------------------------------------------
// Span masking
// ---------------------------------------------------------------------------

#[test]
fn masking_preserves_length_and_respects_budget_and_vocab() {
    let seq: Vec<u32> = (0..10).map(|i| i % 7).collect();
    for seed in 0..200 {
        let mut rng = stream(seed, "mask", 1);
        let (masked, plan) = mask_spans(&seq, 7, &mut rng);
        assert_eq!(masked.len(), seq.len());
        assert_eq!(plan.actions.len(), seq.len());
        // Budget: at most floor(0.3 * 10) = 3 positions altered.
        let altered = plan.masked_positions().len();
        assert!(altered <= 3, "seed {seed}: {altered} positions altered");
        for (i, (&m, &a)) in masked.iter().zip(&plan.actions).enumerate() {
            match a {
                MaskAction::Keep => assert_eq!(m, seq[i]),
                MaskAction::Mask => assert_eq!(m, 7),
                MaskAction::Random => assert!(m < 7),
            }
        }
        // Spans lie in bounds and never overlap.
        let mut seen = vec![false; seq.len()];
        for &(start, len, _) in &plan.spans {
            assert!(len >= 1 && start + len <= seq.len());
            for s in &mut seen[start..start + len] {
                assert!(!*s, "seed {seed}: overlapping spans");
                *s = true;
            }
        }
    }
    // Sequences shorter than four frames have a zero budget: nothing changes.
    for n in 0..4usize {
        let seq: Vec<u32> = (0..n as u32).collect();
        let mut rng = stream(0, "mask", 2);
        let (masked, plan) = mask_spans(&seq, 5, &mut rng);
        assert_eq!(masked, seq);
        assert!(plan.spans.is_empty());
    }
}

#[test]
fn masking_plan_partitions_positions_and_weights() {
    let seq: Vec<u32> = (0..40).map(|i| i % 5).collect();
    let mut rng = stream(3, "mask", 0);
    let (_, plan) = mask_spans(&seq, 5, &mut rng);
    let mut all = plan.masked_positions();
    all.extend(plan.unmasked_positions());
    all.sort_unstable();
    assert_eq!(all, (0..seq.len()).collect::<Vec<_>>());
    let w = plan.loss_weights(0.5);
    for (i, a) in plan.actions.iter().enumerate() {
        assert_eq!(w[i], if *a == MaskAction::Keep { 0.5 } else { 1.0 });
    }
    let keep = MaskPlan::keep_all(4);
    assert!(keep.masked_positions().is_empty());
    assert_eq!(keep.unmasked_positions(), vec![0, 1, 2, 3]);
}

#[test]
fn masking_statistics_match_span_distribution() {
    // Over many length-100 draws: placed span lengths average near the
    // clipped-Poisson mean 3.5, coverage never exceeds 30%, and close to 90%
    // of spans are fully masked rather than randomized.
    let seq: Vec<u32> = (0..100).map(|i| i % 11).collect();
    let (mut span_sum, mut span_n, mut mask_spans_n) = (0usize, 0usize, 0usize);
    for i in 0..4000u64 {
        let mut rng = stream(17, "mask-stats", i);
        let (_, plan) = mask_spans(&seq, 11, &mut rng);
        let covered: usize = plan.spans.iter().map(|&(_, len, _)| len).sum();
        assert!(covered <= 30);
        for &(_, len, action) in &plan.spans {
            span_sum += len;
            span_n += 1;
            if action == MaskAction::Mask {
                mask_spans_n += 1;
            }
        }
    }
    let mean_span = span_sum as f64 / span_n as f64;
    assert!(
        (3.3..=3.7).contains(&mean_span),
        "mean placed span length {mean_span}"
    );
    let mask_frac = mask_spans_n as f64 / span_n as f64;
    assert!(
        (0.88..=0.92).contains(&mask_frac),
        "fully-masked span fraction {mask_frac}"
    );
}

// ---------------------------------------------------------------------------
// Infilling loss
// ---------------------------------------------------------------------------

#[test]
fn infill_loss_of_uniform_head_is_weighted_log_vocab() {
    let mut model = JsttiModel::new(5, 4, &small_cfg()).unwrap();
    for id in [model.head_y.w, model.head_y.b] {
        for v in model.params.get_mut(id).data.iter_mut() {
            *v = 0.0;
        }
    }
    let seq: Vec<u32> = vec![0, 1, 2, 3, 0, 1, 2, 3, 1, 0];
    let (masked, plan) = masked_and_kept_draw(&seq, 4);
    let (n_m, n_u) = (
        plan.masked_positions().len() as f64,
        plan.unmasked_positions().len() as f64,
    );
    let lambda = 0.5;
    let loss = infill_loss(&model, &masked, &plan, &seq, Modality::Text, lambda).unwrap();
    let expected = (n_m + lambda * n_u) * 4f64.ln();
    assert!(
        (loss - expected).abs() < 1e-9,
        "loss {loss} vs closed form {expected}"
    );
}

#[test]
fn infill_loss_is_near_zero_when_the_model_is_certain() {
    let mut model = JsttiModel::new(3, 2, &small_cfg()).unwrap();
    zero_all_params(&mut model);
    // Encoder states are all-zero, so logits equal the text-head bias; a
    // huge margin for word 1 makes its probability 1 up to rounding.
    model.params.get_mut(model.head_y.b).data = vec![-40.0, 40.0];
    let seq = vec![1u32; 6];
    let plan = MaskPlan::keep_all(6);
    let loss = infill_loss(&model, &seq, &plan, &seq, Modality::Text, 1.0).unwrap();
    assert!(loss.abs() < 1e-12, "loss {loss}");
}

#[test]
fn infill_loss_is_affine_in_lambda_and_masked_only_at_zero() {
    let model = JsttiModel::new(6, 5, &small_cfg()).unwrap();
    let seq: Vec<u32> = vec![0, 4, 2, 1, 3, 0, 2, 4, 1, 1, 3, 2];
    let (masked, plan) = masked_and_kept_draw(&seq, 5);

    let at = |lambda: f64| infill_loss(&model, &masked, &plan, &seq, Modality::Text, lambda).unwrap();
    let (l0, l_half, l1) = (at(0.0), at(0.5), at(1.0));
    assert!(
        (l_half - (l0 + 0.5 * (l1 - l0))).abs() < 1e-9,
        "loss is not affine in lambda: {l0} {l_half} {l1}"
    );

    // Oracle for the lambda = 0 case: a manual log-softmax over the final
    // logits, summed over corrupted positions only.
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let mut rng = stream(0, "unused", 0);
    let logits = model
        .token_logits(&bound, &tape, &masked, Modality::Text, MixMode::Off, &mut rng)
        .unwrap();
    let vals = logits.values();
    let v = model.n_words;
    let mut expected = 0.0;
    for p in plan.masked_positions() {
        let row = &vals[p * v..(p + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        expected += lse - row[seq[p] as usize];
    }
    assert!((l0 - expected).abs() < 1e-9, "{l0} vs oracle {expected}");
}

#[test]
fn infill_gradients_match_finite_differences() {
    let cfg = small_cfg();
    let model = JsttiModel::new(4, 3, &cfg).unwrap();
    let seq: Vec<u32> = vec![0, 2, 1, 2, 0, 1, 2, 0];
    let (masked, plan) = masked_and_kept_draw(&seq, 3);

    let analytic: Vec<(crate::nn::ParamId, Vec<f64>)> = {
        let tape = Tape::new();
        let mut rng = stream(0, "unused", 0);
        let (bound, loss) = model
            .infill_graph(&tape, &masked, &plan, &seq, Modality::Text, 0.5, MixMode::Off, &mut rng)
            .unwrap();
        let mut grads = backward(&loss).unwrap();
        let mut accum = GradAccum::new();
        accum.absorb(&mut grads, &bound);
        model
            .params
            .iter()
            .map(|(id, p)| {
                let g = accum
                    .get(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; p.data.len()]);
                (id, g)
            })
            .collect()
    };

    let model = RefCell::new(model);
    for (id, g) in analytic {
        let x0 = model.borrow().params.get(id).data.clone();
        let f = |x: &[f64]| {
            let mut m = model.borrow_mut();
            m.params.get_mut(id).data = x.to_vec();
            drop(m);
            infill_loss(&model.borrow(), &masked, &plan, &seq, Modality::Text, 0.5).unwrap()
        };
        let numeric = central_diff(&f, &x0, 1e-5);
        model.borrow_mut().params.get_mut(id).data = x0;
        let err = max_abs_rel_err(&g, &numeric);
        let name = model.borrow().params.get(id).name.clone();
        assert!(err <= 1e-5, "param {name}: max rel err {err}");
    }
}

// ---------------------------------------------------------------------------
// Mix-up quantizer
// ---------------------------------------------------------------------------

#[test]
fn mixup_off_or_zero_probability_is_identity() {
    let model = JsttiModel::new(4, 4, &small_cfg()).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let mut r = stream(8, "mix-id", 0);
    let h_vals: Vec<f64> = (0..5 * 8).map(|_| crate::rng::normal(&mut r)).collect();
    let h = tape.leaf(h_vals.clone(), &[5, 8]).unwrap();
    for mode in [MixMode::Off, MixMode::Hard(0.0), MixMode::Soft(0.0)] {
        let out = model.mixup(&bound, &tape, &h, mode, &mut r).unwrap();
        assert_eq!(out.values(), h_vals.as_slice());
    }
}

#[test]
fn mixup_hard_snaps_every_selected_row_onto_the_codebook() {
    let model = JsttiModel::new(4, 4, &small_cfg()).unwrap();
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let mut r = stream(9, "mix-hard", 0);
    let h_vals: Vec<f64> = (0..6 * 8).map(|_| crate::rng::normal(&mut r)).collect();
    let h = tape.leaf(h_vals.clone(), &[6, 8]).unwrap();
    let out = model
        .mixup(&bound, &tape, &h, MixMode::Hard(1.0), &mut r)
        .unwrap();
    let cb = &model.params.get(model.mix_codebook).data;
    for row in out.values().chunks(8) {
        let snapped = cb.chunks(8).any(|c| {
            row.iter()
                .zip(c)
                .all(|(a, b)| (a - b).abs() < 1e-12)
        });
        assert!(snapped, "row {row:?} is not a codebook row");
    }
    // At p between 0 and 1, every row is either kept verbatim or snapped.
    let out = model
        .mixup(&bound, &tape, &h, MixMode::Hard(0.5), &mut r)
        .unwrap();
    for (t, row) in out.values().chunks(8).enumerate() {
        let kept = row
            .iter()
            .zip(&h_vals[t * 8..(t + 1) * 8])
            .all(|(a, b)| (a - b).abs() < 1e-12);
        let snapped = cb
            .chunks(8)
            .any(|c| row.iter().zip(c).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(kept || snapped, "row {t} neither kept nor snapped");
    }
}

#[test]
fn mixup_soft_gradients_reach_states_and_codebook() {
    let cfg = small_cfg();
    let model = JsttiModel::new(4, 4, &cfg).unwrap();
    let t_len = 5;
    let mut r = stream(10, "mix-fd-init", 0);
    let h0: Vec<f64> = (0..t_len * 8).map(|_| crate::rng::normal(&mut r)).collect();
    let w: Vec<f64> = (0..t_len * 8).map(|_| crate::rng::normal(&mut r)).collect();

    let model = RefCell::new(model);
    let eval = |h_vals: &[f64]| {
        let m = model.borrow();
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let h = tape.leaf(h_vals.to_vec(), &[t_len, 8]).unwrap();
        // The Gumbel and selection draws must repeat identically per call.
        let mut rng = stream(10, "mix-fd", 1);
        let out = m
            .mixup(&bound, &tape, &h, MixMode::Soft(1.0), &mut rng)
            .unwrap();
        out.weighted_sum(&w).unwrap().item().unwrap()
    };

    // Analytic gradients for both the input states and the codebook.
    let (gh, gcb) = {
        let m = model.borrow();
        let tape = Tape::new();
        let bound = m.params.bind(&tape);
        let h = tape.leaf(h0.clone(), &[t_len, 8]).unwrap();
        let mut rng = stream(10, "mix-fd", 1);
        let out = m
            .mixup(&bound, &tape, &h, MixMode::Soft(1.0), &mut rng)
            .unwrap();
        let loss = out.weighted_sum(&w).unwrap();
        let mut grads = backward(&loss).unwrap();
        let gh = grads.wrt(&h);
        let mut accum = GradAccum::new();
        accum.absorb(&mut grads, &bound);
        let gcb = accum.get(m.mix_codebook).unwrap().to_vec();
        (gh, gcb)
    };
    assert!(gh.iter().any(|g| g.abs() > 1e-8), "no gradient reaches the states");
    assert!(gcb.iter().any(|g| g.abs() > 1e-8), "no gradient reaches the codebook");

    let num_h = central_diff(eval, &h0, 1e-5);
    let err = max_abs_rel_err(&gh, &num_h);
    assert!(err <= 1e-6, "state gradient: max rel err {err}");

    let cb_id = model.borrow().mix_codebook;
    let cb0 = model.borrow().params.get(cb_id).data.clone();
    let eval_cb = |cb_vals: &[f64]| {
        model.borrow_mut().params.get_mut(cb_id).data = cb_vals.to_vec();
        eval(&h0)
    };
    let num_cb = central_diff(eval_cb, &cb0, 1e-5);
    model.borrow_mut().params.get_mut(cb_id).data = cb0;
    let err = max_abs_rel_err(&gcb, &num_cb);
    assert!(err <= 1e-6, "codebook gradient: max rel err {err}");
}

// ---------------------------------------------------------------------------
// Model shape, modality sharing, inference
// ---------------------------------------------------------------------------

#[test]
fn config_validation_rejects_inconsistent_shapes() {
    let ok = JsttiConfig::default();
    assert!(ok.validate().is_ok());
    let bad = |f: &dyn Fn(&mut JsttiConfig)| {
        let mut c = small_cfg();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(&|c| c.heads = 3));
    assert!(bad(&|c| c.n_layers = 1));
    assert!(bad(&|c| c.quant_layer = 0));
    assert!(bad(&|c| c.quant_layer = 5));
    assert!(bad(&|c| c.mixup_p = 1.5));
    assert!(bad(&|c| c.gumbel_temp = 0.0));
    assert!(bad(&|c| c.codebook = 0));
    assert!(matches!(
        JsttiModel::new(0, 4, &small_cfg()),
        Err(Error::Config(_))
    ));
}

#[test]
fn encoder_parameters_are_modality_blind() {
    let mut model = JsttiModel::new(5, 5, &small_cfg()).unwrap();
    for (_, p) in model.params.iter() {
        let n = p.name.as_str();
        let shared = n.starts_with("enc") || n.starts_with("mix.");
        let owned = n.starts_with("emb_x")
            || n.starts_with("emb_y")
            || n.starts_with("head_x")
            || n.starts_with("head_y");
        assert!(
            shared != owned && (shared || owned),
            "param {n} is neither clearly shared nor modality-owned"
        );
    }
    // Functional check: after copying the speech embedding table and head
    // into the text slots, both modalities produce bitwise-equal encodings.
    for (src, dst) in [
        (model.emb_x, model.emb_y),
        (model.head_x.w, model.head_y.w),
        (model.head_x.b, model.head_y.b),
    ] {
        let data = model.params.get(src).data.clone();
        model.params.get_mut(dst).data = data;
    }
    let tape = Tape::new();
    let bound = model.params.bind(&tape);
    let mut rng = stream(0, "unused", 0);
    let seq = vec![0u32, 2, 4, 1, 3];
    let ex = model
        .embed_tokens(&bound, &tape, &seq, Modality::Speech)
        .unwrap();
    let ey = model
        .embed_tokens(&bound, &tape, &seq, Modality::Text)
        .unwrap();
    assert_eq!(ex.values(), ey.values());
    let ox = model.encode(&bound, &tape, &ex, MixMode::Off, &mut rng).unwrap();
    let oy = model.encode(&bound, &tape, &ey, MixMode::Off, &mut rng).unwrap();
    for (a, b) in ox.iter().zip(&oy) {
        assert_eq!(a.values(), b.values());
    }
    let lx = model
        .token_logits(&bound, &tape, &seq, Modality::Speech, MixMode::Off, &mut rng)
        .unwrap();
    let ly = model
        .token_logits(&bound, &tape, &seq, Modality::Text, MixMode::Off, &mut rng)
        .unwrap();
    assert_eq!(lx.values(), ly.values());
}

#[test]
fn inference_preserves_length_and_is_deterministic() {
    let model = JsttiModel::new(6, 5, &small_cfg()).unwrap();
    let speech = vec![0u32, 3, 5, 1, 2, 4, 0];
    let a = infer_transcript(&model, &speech).unwrap();
    let b = infer_transcript(&model, &speech).unwrap();
    assert_eq!(a.len(), speech.len());
    assert_eq!(a, b);
    for w in &a {
        assert!((*w as usize) < 5);
    }
    assert!(infer_with_layer(&model, &speech, 0).is_err());
    assert!(infer_with_layer(&model, &speech, 3).is_err());
    // MASK itself may appear in the input; out-of-range ids may not.
    assert!(infer_transcript(&model, &[6]).is_ok());
    assert!(matches!(
        infer_transcript(&model, &[7]),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn zeroed_model_transcribes_everything_as_the_lowest_word() {
    let mut model = JsttiModel::new(4, 3, &small_cfg()).unwrap();
    zero_all_params(&mut model);
    let out = infer_transcript(&model, &[3, 1, 2, 0]).unwrap();
    assert_eq!(out, vec![0, 0, 0, 0]);
}

#[test]
fn position_encoding_is_bounded_and_starts_at_zero_one() {
    let pe = sinusoidal_pe(3, 6);
    for (i, &v) in pe.iter().enumerate() {
        assert!(v.abs() <= 1.0, "pe[{i}] = {v}");
    }
    for i in 0..6 {
        let expected = if i % 2 == 0 { 0.0 } else { 1.0 };
        assert!((pe[i] - expected).abs() < 1e-12);
    }
    assert!((pe[6] - 1f64.sin()).abs() < 1e-12);
    assert!((pe[7] - 1f64.cos()).abs() < 1e-12);
}

#[test]
fn diversity_penalty_is_zero_at_uniform_and_large_when_collapsed() {
    let tape = Tape::new();
    let uniform = tape.vector(vec![0.25; 4]);
    assert!(diversity_penalty(&uniform).values()[0].abs() < 1e-9);
    let collapsed = tape.vector(vec![1.0, 0.0, 0.0, 0.0]);
    let v = diversity_penalty(&collapsed).values()[0];
    assert!(v > 0.7, "collapsed penalty {v}");
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Sentences that count upward from zero: `0, 1, …, len−1`. Position pins
/// the identity of every token, so infilling has an exact solution and the
/// modalities share aligned structure without sharing any sentences.
fn counting_corpus(n: usize, max_len: usize, relabel: &[u32], seed: u64) -> Vec<TokenSeq> {
    let mut rng = stream(seed, "counting", 0);
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=max_len);
            (0..len as u32).map(|w| relabel[w as usize]).collect()
        })
        .collect()
}

#[test]
fn training_is_bit_reproducible() {
    let identity: Vec<u32> = (0..5).collect();
    let pi = vec![2u32, 4, 0, 3, 1];
    let speech = counting_corpus(8, 5, &pi, 1);
    let text = counting_corpus(8, 5, &identity, 2);
    let cfg = JsttiConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-3,
        ..small_cfg()
    };
    let (m1, log1) = train_jstti(&speech, &text, &[], 5, 5, &cfg, None).unwrap();
    let (m2, log2) = train_jstti(&speech, &text, &[], 5, 5, &cfg, None).unwrap();
    assert_eq!(log1.speech_loss, log2.speech_loss);
    assert_eq!(log1.text_loss, log2.text_loss);
    for ((_, a), (_, b)) in m1.params.iter().zip(m2.params.iter()) {
        assert_eq!(a.data, b.data, "param {} differs between reruns", a.name);
    }
    // A different seed must actually change the trajectory.
    let cfg2 = JsttiConfig { seed: 7, ..cfg };
    let (_, log3) = train_jstti(&speech, &text, &[], 5, 5, &cfg2, None).unwrap();
    assert_ne!(log1.speech_loss, log3.speech_loss);
}

#[test]
fn training_rejects_empty_corpora_and_mismatched_warm_starts() {
    let cfg = small_cfg();
    let text = vec![vec![0u32, 1]];
    assert!(matches!(
        train_jstti(&[], &text, &[], 4, 4, &cfg, None),
        Err(Error::NotEnough { .. })
    ));
    assert!(matches!(
        train_jstti(&[vec![]], &text, &[], 4, 4, &cfg, None),
        Err(Error::InvalidArg(_))
    ));
    let warm = JsttiModel::new(3, 4, &cfg).unwrap();
    assert!(matches!(
        train_jstti(&text, &text, &[], 4, 4, &cfg, Some(warm)),
        Err(Error::Config(_))
    ));
}

#[test]
fn training_learns_cross_modal_transfer_on_a_solvable_corpus() {
    // Unpaired counting sentences; speech tokens are a fixed relabeling of
    // the words. A successful run must transfer: reading the text head on
    // speech input recovers the underlying words.
    let v = 6usize;
    let identity: Vec<u32> = (0..v as u32).collect();
    let pi = vec![2u32, 4, 0, 5, 1, 3];
    let speech = counting_corpus(40, v, &pi, 11);
    let text = counting_corpus(40, v, &identity, 12);
    let val: Vec<(TokenSeq, TokenSeq)> = counting_corpus(10, v, &identity, 13)
        .into_iter()
        .map(|s| (s.iter().map(|&w| pi[w as usize]).collect(), s))
        .collect();
    let cfg = JsttiConfig {
        dim: 16,
        ff: 32,
        heads: 2,
        codebook: 8,
        lr: 3e-3,
        epochs: 40,
        batch_size: 8,
        seed: 5,
        ..JsttiConfig::default()
    };
    let untrained = JsttiModel::new(v, v, &cfg).unwrap();
    let wer_before = readout_wer(&untrained, &val, 1).unwrap();
    let (model, log) = train_jstti(&speech, &text, &val, v, v, &cfg, None).unwrap();
    let wer_l1 = readout_wer(&model, &val, 1).unwrap();
    let wer_l2 = readout_wer(&model, &val, 2).unwrap();
    assert!(
        wer_l1 <= 0.25,
        "second-to-last readout WER {wer_l1} (untrained {wer_before}, log {:?})",
        log.val_wer
    );
    assert!(
        wer_l1 <= wer_l2 + 1e-12,
        "transfer readout should not be worse at the second-to-last layer: {wer_l1} vs {wer_l2}"
    );
    assert!(wer_l1 < wer_before, "training never improved on {wer_before}");
    // The loss curves must actually descend.
    assert!(log.speech_loss.last().unwrap() < log.speech_loss.first().unwrap());
    assert!(log.text_loss.last().unwrap() < log.text_loss.first().unwrap());
}

// ---------------------------------------------------------------------------
// Segmenter cloning
// ---------------------------------------------------------------------------

/// Noise-free synthetic utterances plus frame-level acoustic cluster labels.
fn clone_corpus(n: usize, seed: u64) -> (Vec<Utterance>, Vec<Vec<u32>>) {
    let mut rng = stream(seed, "clone-corpus", 0);
    let curated: Vec<TokenSeq> = (0..n)
        .map(|_| {
            let len = rng.random_range(3..=6);
            (0..len).map(|_| rng.random_range(0..6u32)).collect()
        })
        .collect();
    let params = SynthParams {
        dim: 8,
        frames_per_word_mean: 7.0,
        min_frames_per_word: 4,
        noise_sigma: 0.0,
        speaker_shift: 0.0,
        crossfade: 0,
        n_speakers: 1,
        seed,
    };
    let utts = synth_corpus(&curated, &params).unwrap();
    let all: Vec<f64> = utts.iter().flat_map(|u| u.frames.data().to_vec()).collect();
    let cb = kmeans_fit(&all, 8, 6, seed, KmeansOpts::default()).unwrap();
    let clusters: Vec<Vec<u32>> = utts
        .iter()
        .map(|u| assign(u.frames.data(), 8, &cb).unwrap())
        .collect();
    (utts, clusters)
}

#[test]
fn cloned_segmenter_reproduces_noise_free_teacher_boundaries() {
    let (utts, clusters) = clone_corpus(24, 9);
    let closings: Vec<Vec<usize>> = utts
        .iter()
        .map(|u| ends_to_closing_frames(&u.gold_ends))
        .collect();
    let examples: Vec<CloneExample<'_>> = utts
        .iter()
        .zip(&closings)
        .zip(&clusters)
        .map(|((u, c), k)| CloneExample {
            frames: &u.frames,
            closing: c,
            clusters: k,
        })
        .collect();
    let opts = CloneOpts {
        hidden: 32,
        n_clusters: 6,
        steps: 1500,
        lr: 2e-3,
        ..CloneOpts::default()
    };
    let net = clone_segmenter(&examples, &opts).unwrap();
    let (mut hits, mut hyp_n, mut gold_n) = (0usize, 0usize, 0usize);
    for u in &utts {
        let rate = u.gold_ends.len() as f64 / u.frames.len() as f64;
        let ends = net.predict_ends(&u.frames, 3, rate).unwrap();
        let r = boundary_prf(&u.gold_ends, &ends, 1);
        hits += r.hits;
        hyp_n += r.hyp_tokens;
        gold_n += r.gold_tokens;
    }
    let p = hits as f64 / hyp_n as f64;
    let r = hits as f64 / gold_n as f64;
    let f1 = 2.0 * p * r / (p + r);
    assert!(f1 >= 0.95, "token F1 {f1} (precision {p}, recall {r})");
}

#[test]
fn cluster_only_cloning_leaves_the_boundary_head_uninformative() {
    let (utts, clusters) = clone_corpus(24, 21);
    let closings: Vec<Vec<usize>> = utts
        .iter()
        .map(|u| ends_to_closing_frames(&u.gold_ends))
        .collect();
    let examples: Vec<CloneExample<'_>> = utts
        .iter()
        .zip(&closings)
        .zip(&clusters)
        .map(|((u, c), k)| CloneExample {
            frames: &u.frames,
            closing: c,
            clusters: k,
        })
        .collect();
    let opts = CloneOpts {
        hidden: 32,
        n_clusters: 6,
        bce_weight: 0.0,
        steps: 300,
        ..CloneOpts::default()
    };
    let net = clone_segmenter(&examples, &opts).unwrap();
    // Rank the boundary logits of true closing frames against the rest; with
    // the boundary term switched off, the head should be near chance.
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (u, closing) in utts.iter().zip(&closings) {
        let z = net.boundary_logits(&u.frames).unwrap();
        let is_close: Vec<bool> = {
            let mut m = vec![false; u.frames.len()];
            for &c in closing {
                m[c] = true;
            }
            m
        };
        for (t, &zt) in z.iter().enumerate() {
            if is_close[t] {
                pos.push(zt);
            } else {
                neg.push(zt);
            }
        }
    }
    let mut auc = 0.0;
    for &p in &pos {
        for &n in &neg {
            auc += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    auc /= pos.len() as f64 * neg.len() as f64;
    assert!(
        (0.35..=0.65).contains(&auc),
        "boundary head AUC {auc} without a boundary loss"
    );
}

#[test]
fn cloning_validates_its_inputs() {
    let (utts, clusters) = clone_corpus(2, 30);
    let closing = ends_to_closing_frames(&utts[0].gold_ends);
    let opts = CloneOpts {
        n_clusters: 6,
        steps: 1,
        ..CloneOpts::default()
    };
    assert!(matches!(
        clone_segmenter(&[], &opts),
        Err(Error::NotEnough { .. })
    ));
    let short = vec![0u32; utts[0].frames.len() - 1];
    assert!(clone_segmenter(
        &[CloneExample {
            frames: &utts[0].frames,
            closing: &closing,
            clusters: &short,
        }],
        &opts
    )
    .is_err());
    let bad_cluster = vec![9u32; utts[0].frames.len()];
    assert!(matches!(
        clone_segmenter(
            &[CloneExample {
                frames: &utts[0].frames,
                closing: &closing,
                clusters: &bad_cluster,
            }],
            &opts
        ),
        Err(Error::TokenOutOfRange { .. })
    ));
    let bad_closing = vec![utts[0].frames.len()];
    assert!(clone_segmenter(
        &[CloneExample {
            frames: &utts[0].frames,
            closing: &bad_closing,
            clusters: &clusters[0],
        }],
        &opts
    )
    .is_err());
}

// ---------------------------------------------------------------------------
// End-to-end refinement
// ---------------------------------------------------------------------------

#[test]
fn boundary_penalty_terms_vanish_exactly_at_the_teacher_configuration() {
    let tape = Tape::new();
    // 20 frames, one boundary per 5-frame window at frames 2, 7, 12, 17.
    let mut alpha_vals = vec![-8.0; 20];
    for f in [2, 7, 12, 17] {
        alpha_vals[f] = 8.0;
    }
    let alpha = tape.leaf(alpha_vals.clone(), &[20]).unwrap();
    let b = straight_through_boundaries(&alpha, 1000.0).unwrap();
    let (wc, wf) = boundary_penalties(&b, 20, 5, 4).unwrap();
    assert!(wc.values()[0].abs() <= 1e-12);
    assert!(wf.unwrap().values()[0].abs() <= 1e-12);

    // Count off by one; two boundaries crowd window 0 leaving window 1 empty.
    let (wc, _) = boundary_penalties(&b, 20, 5, 5).unwrap();
    assert!((wc.values()[0] - 1.0).abs() <= 1e-12);
    let mut crowded = vec![-8.0; 20];
    for f in [1, 3, 12, 17] {
        crowded[f] = 8.0;
    }
    let alpha = tape.leaf(crowded, &[20]).unwrap();
    let b = straight_through_boundaries(&alpha, 1000.0).unwrap();
    let (_, wf) = boundary_penalties(&b, 20, 5, 4).unwrap();
    assert!((wf.unwrap().values()[0] - 2.0).abs() <= 1e-12);

    // Sequences shorter than one window have no frequency term.
    let alpha = tape.leaf(vec![0.0; 3], &[3]).unwrap();
    let b = straight_through_boundaries(&alpha, 1000.0).unwrap();
    let (_, wf) = boundary_penalties(&b, 3, 5, 1).unwrap();
    assert!(wf.is_none());
}

#[test]
fn refinement_requires_an_attached_segmenter() {
    let mut model = JsttiModel::new(3, 3, &small_cfg()).unwrap();
    let frames = crate::data::FrameSequence::new(3, vec![0.1; 30]).unwrap();
    let cfg = E2EConfig::default();
    let mut opt_a = Adam::new(LrSchedule::Constant(1e-3));
    let mut opt_b = Adam::new(LrSchedule::Constant(1e-3));
    let mut rng = stream(0, "e2e", 0);
    let err = e2e_refine_step(
        &mut model,
        &[(&frames, 2)],
        &[vec![0, 1, 2]],
        &cfg,
        &mut opt_a,
        &mut opt_b,
        &mut rng,
    );
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn attach_rejects_mismatched_codebooks() {
    let mut model = JsttiModel::new(3, 3, &small_cfg()).unwrap();
    let seg = SegmenterNet::new(4, 4, 3, 0).unwrap();
    // Wrong vocabulary size.
    let cb = crate::quantize::Codebook::new(4, vec![0.0; 4 * 4], 0).unwrap();
    assert!(attach_segmenter(&mut model, seg, cb).is_err());
    // Wrong feature dimension.
    let seg = SegmenterNet::new(4, 4, 3, 0).unwrap();
    let cb = crate::quantize::Codebook::new(5, vec![0.0; 3 * 5], 0).unwrap();
    assert!(attach_segmenter(&mut model, seg, cb).is_err());
}

#[test]
fn refinement_loss_gradients_match_finite_differences_on_the_soft_path() {
    let cfg = JsttiConfig {
        dim: 4,
        ff: 8,
        heads: 2,
        codebook: 3,
        ..JsttiConfig::default()
    };
    let mut model = JsttiModel::new(3, 3, &cfg).unwrap();
    let seg = SegmenterNet::new(3, 4, 3, 2).unwrap();
    let mut r = stream(6, "refine-fd-data", 0);
    let cb_vals: Vec<f64> = (0..3 * 3).map(|_| crate::rng::normal(&mut r)).collect();
    let cb = crate::quantize::Codebook::new(3, cb_vals, 0).unwrap();
    attach_segmenter(&mut model, seg, cb).unwrap();
    let frames = crate::data::FrameSequence::new(
        3,
        (0..12 * 3).map(|_| crate::rng::normal(&mut r)).collect(),
    )
    .unwrap();
    let e2e_cfg = E2EConfig {
        gamma1: 2.0,
        gamma2: 3.0,
        r: 4,
        pool: SoftPoolConfig {
            sharpness: 2.0,
            hard_scale: 1000.0,
        },
        ..E2EConfig::default()
    };

    let model = RefCell::new(model);
    let eval = || {
        let m = model.borrow();
        let tape = Tape::new();
        let bm = m.params.bind(&tape);
        let bs = m.segmenter.as_ref().unwrap().params.bind(&tape);
        let mut rng = stream(6, "refine-fd", 1);
        speech_refine_loss(
            &m,
            &tape,
            &bm,
            &bs,
            &frames,
            2,
            &e2e_cfg,
            &mut rng,
            MixMode::Soft(1.0),
            RefinePath::SoftSurrogate,
        )
        .unwrap()
        .values()[0]
    };

    // The soft path's segment count is still decided by rounding the summed
    // boundary indicators — one pinned start at frame 0 plus the shifted
    // closing scores of all frames but the last. The seed must keep that sum
    // away from a rounding edge or finite differences would step across a
    // discontinuity.
    {
        let m = model.borrow();
        let z = m
            .segmenter
            .as_ref()
            .unwrap()
            .boundary_logits(&frames)
            .unwrap();
        let s: f64 = 1.0
            + z[..z.len() - 1]
                .iter()
                .map(|a| 1.0 / (1.0 + (-a).exp()))
                .sum::<f64>();
        let margin = (s.fract() - 0.5).abs();
        assert!(margin > 1e-3, "segment-count margin too small: sum {s}");
    }

    let (analytic_model, analytic_seg) = {
        let m = model.borrow();
        let tape = Tape::new();
        let bm = m.params.bind(&tape);
        let bs = m.segmenter.as_ref().unwrap().params.bind(&tape);
        let mut rng = stream(6, "refine-fd", 1);
        let loss = speech_refine_loss(
            &m,
            &tape,
            &bm,
            &bs,
            &frames,
            2,
            &e2e_cfg,
            &mut rng,
            MixMode::Soft(1.0),
            RefinePath::SoftSurrogate,
        )
        .unwrap();
        let mut grads = backward(&loss).unwrap();
        let mut am = GradAccum::new();
        am.absorb(&mut grads, &bm);
        let mut asg = GradAccum::new();
        asg.absorb(&mut grads, &bs);
        let gm: Vec<(crate::nn::ParamId, Vec<f64>)> = m
            .params
            .iter()
            .map(|(id, p)| {
                (
                    id,
                    am.get(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.data.len()]),
                )
            })
            .collect();
        let gs: Vec<(crate::nn::ParamId, Vec<f64>)> = m
            .segmenter
            .as_ref()
            .unwrap()
            .params
            .iter()
            .map(|(id, p)| {
                (
                    id,
                    asg.get(id)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; p.data.len()]),
                )
            })
            .collect();
        (gm, gs)
    };

    assert!(
        analytic_seg
            .iter()
            .any(|(_, g)| g.iter().any(|x| x.abs() > 1e-8)),
        "no gradient reaches the segmenter"
    );

    for (id, g) in analytic_model {
        let x0 = model.borrow().params.get(id).data.clone();
        let f = |x: &[f64]| {
            model.borrow_mut().params.get_mut(id).data = x.to_vec();
            eval()
        };
        let numeric = central_diff(f, &x0, 1e-5);
        model.borrow_mut().params.get_mut(id).data = x0;
        let err = max_abs_rel_err(&g, &numeric);
        let name = model.borrow().params.get(id).name.clone();
        assert!(err <= 1e-4, "encoder param {name}: max rel err {err}");
    }
    for (id, g) in analytic_seg {
        let x0 = model
            .borrow()
            .segmenter
            .as_ref()
            .unwrap()
            .params
            .get(id)
            .data
            .clone();
        let f = |x: &[f64]| {
            model
                .borrow_mut()
                .segmenter
                .as_mut()
                .unwrap()
                .params
                .get_mut(id)
                .data = x.to_vec();
            eval()
        };
        let numeric = central_diff(f, &x0, 1e-5);
        model
            .borrow_mut()
            .segmenter
            .as_mut()
            .unwrap()
            .params
            .get_mut(id)
            .data = x0;
        let err = max_abs_rel_err(&g, &numeric);
        let name = model
            .borrow()
            .segmenter
            .as_ref()
            .unwrap()
            .params
            .get(id)
            .name
            .clone();
        assert!(err <= 1e-4, "segmenter param {name}: max rel err {err}");
    }
}

/// Shift every non-final segment end two frames early: a systematic teacher
/// bias that a behavior clone reproduces faithfully, unlike random jitter
/// which a convolutional net smooths away on clean features.
fn shift_ends_early(gold: &[usize]) -> Vec<usize> {
    let n = gold.len();
    gold.iter()
        .enumerate()
        .map(|(i, &e)| if i + 1 == n { e } else { e - 3 })
        .collect()
}

#[test]
fn refinement_improves_boundaries_from_a_corrupted_undecided_teacher() {
    // Deterministic counting language with exactly five frames per word, so
    // pooled segments under the true boundaries quantize onto word
    // prototypes, the infilling model can learn the sequence structure
    // exactly, and the window length r = 5 is calibrated to the true segment
    // rate (as the pipeline calibrates it to the teacher's). Mild frame
    // noise keeps every frame context distinct: on noise-free constant
    // spans the convolution would have no feature to localize a new peak on.
    //
    // The teacher boundaries are systematically three frames early. That is
    // past the halfway point of a word, so each interior pooled segment
    // majority-quantizes to the *preceding* word and the speech token stream
    // duplicates its first token — a pattern the text-anchored infilling
    // loss contradicts. Repositioning therefore lowers the loss *value*, not
    // just the soft gradient. (A shift short of halfway leaves the quantized
    // stream identical at teacher and true positions, and the hard
    // straight-through loss value cannot tell interior placements apart.)
    //
    // The behavior clone trains to convergence against label-smoothed
    // boundary targets, so its bumps settle at the smoothed ceiling instead
    // of saturating: the straight-through estimator only passes gradient
    // where the sigmoid still has slope, which is the regime the coupling is
    // designed for (a saturated bump can never be moved or turned off).
    let v = 6usize;
    let mut rng = stream(40, "e2e-corpus", 0);
    let curated: Vec<TokenSeq> = (0..30)
        .map(|_| {
            let len = rng.random_range(3..=6) as u32;
            (0..len).collect()
        })
        .collect();
    let synth = SynthParams {
        dim: 8,
        frames_per_word_mean: 0.1,
        min_frames_per_word: 5,
        noise_sigma: 0.15,
        speaker_shift: 0.0,
        crossfade: 0,
        n_speakers: 1,
        seed: 41,
    };
    let utts = synth_corpus(&curated, &synth).unwrap();

    // Word-level codebook and speech token streams from gold pooling.
    let pooled: Vec<crate::data::FrameSequence> = utts
        .iter()
        .map(|u| hard_pool(&u.frames, &u.gold_ends).unwrap())
        .collect();
    let all_pooled: Vec<f64> = pooled.iter().flat_map(|p| p.data().to_vec()).collect();
    let word_cb = kmeans_fit(&all_pooled, 8, v, 42, KmeansOpts::default()).unwrap();
    let speech_tokens: Vec<TokenSeq> = pooled
        .iter()
        .map(|p| assign(p.data(), 8, &word_cb).unwrap())
        .collect();
    let text: Vec<TokenSeq> = (0..30)
        .map(|_| {
            let len = rng.random_range(3..=6) as u32;
            (0..len).collect()
        })
        .collect();

    let cfg = JsttiConfig {
        dim: 16,
        ff: 32,
        heads: 2,
        codebook: 8,
        lr: 3e-3,
        epochs: 12,
        batch_size: 8,
        seed: 43,
        ..JsttiConfig::default()
    };
    let (mut model, _) = train_jstti(&speech_tokens, &text, &[], v, v, &cfg, None).unwrap();

    // Clone a segmenter from systematically shifted teacher boundaries.
    let shifted: Vec<Vec<usize>> = utts.iter().map(|u| shift_ends_early(&u.gold_ends)).collect();
    let frame_feats: Vec<f64> = utts.iter().flat_map(|u| u.frames.data().to_vec()).collect();
    let frame_cb = kmeans_fit(&frame_feats, 8, v, 45, KmeansOpts::default()).unwrap();
    let clusters: Vec<Vec<u32>> = utts
        .iter()
        .map(|u| assign(u.frames.data(), 8, &frame_cb).unwrap())
        .collect();
    let closings: Vec<Vec<usize>> = shifted.iter().map(|e| ends_to_closing_frames(e)).collect();
    let examples: Vec<CloneExample<'_>> = utts
        .iter()
        .zip(&closings)
        .zip(&clusters)
        .map(|((u, c), k)| CloneExample {
            frames: &u.frames,
            closing: c,
            clusters: k,
        })
        .collect();
    let net = clone_segmenter(
        &examples,
        &CloneOpts {
            hidden: 32,
            n_clusters: v,
            smooth: 0.15,
            steps: 600,
            seed: 46,
            ..CloneOpts::default()
        },
    )
    .unwrap();
    attach_segmenter(&mut model, net, word_cb).unwrap();

    if std::env::var("UASR_E2E_DEBUG").is_ok() {
        let u = &utts[0];
        let z = model
            .segmenter
            .as_ref()
            .unwrap()
            .boundary_logits(&u.frames)
            .unwrap();
        let probs: Vec<f64> = z.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
        let hard_sum: f64 = probs.iter().map(|p| if *p > 0.5 { 1.0 } else { 0.0 }).sum();
        eprintln!("utt0 frames {} gold {:?} teacher {:?}", u.frames.len(), u.gold_ends, shifted[0]);
        eprintln!("probs {probs:.2?}");
        eprintln!("hard count {hard_sum} vs teacher {}", shifted[0].len());
    }

    let corpus_f1 = |model: &JsttiModel| {
        let (mut hits, mut hyp_n, mut gold_n) = (0usize, 0usize, 0usize);
        for (u, j) in utts.iter().zip(&shifted) {
            let rate = j.len() as f64 / u.frames.len() as f64;
            let ends = model
                .segmenter
                .as_ref()
                .unwrap()
                .predict_ends(&u.frames, 2, rate)
                .unwrap();
            let r = boundary_prf(&u.gold_ends, &ends, 1);
            hits += r.hits;
            hyp_n += r.hyp_tokens;
            gold_n += r.gold_tokens;
        }
        if hits == 0 {
            return 0.0;
        }
        let p = hits as f64 / hyp_n as f64;
        let r = hits as f64 / gold_n as f64;
        2.0 * p * r / (p + r)
    };
    let f1_before = corpus_f1(&model);

    let speech_refs: Vec<(&crate::data::FrameSequence, usize)> = utts
        .iter()
        .zip(&shifted)
        .map(|(u, j)| (&u.frames, j.len()))
        .collect();
    let e2e_cfg = E2EConfig {
        tau: 1.0,
        gamma1: 100.0,
        gamma2: 20.0,
        r: 5,
        pool: SoftPoolConfig {
            sharpness: 2.0,
            hard_scale: 1000.0,
        },
        lr: 2e-3,
        epochs: 60,
        batch_size: 8,
        seed: 47,
        ..E2EConfig::default()
    };
    let losses = e2e_refine(&mut model, &speech_refs, &text, &e2e_cfg).unwrap();
    let f1_after = corpus_f1(&model);
    if std::env::var("UASR_E2E_DEBUG").is_ok() {
        for u in utts.iter().take(3) {
            let z = model
                .segmenter
                .as_ref()
                .unwrap()
                .boundary_logits(&u.frames)
                .unwrap();
            let probs: Vec<f64> = z.iter().map(|a| 1.0 / (1.0 + (-a).exp())).collect();
            eprintln!("after: gold {:?}", u.gold_ends);
            eprintln!("after: probs {probs:.2?}");
        }
    }
    assert!(
        f1_after >= f1_before + 0.05 && f1_after >= 0.5,
        "boundary F1 {f1_before} -> {f1_after} (losses {losses:?})"
    );
}

// ---------------------------------------------------------------------------
// Cross-modal alignment
// ---------------------------------------------------------------------------

#[test]
fn self_alignment_has_zero_diagonal_and_infers_identity() {
    let mut model = JsttiModel::new(5, 5, &small_cfg()).unwrap();
    let emb = model.params.get(model.emb_x).data.clone();
    model.params.get_mut(model.emb_y).data = emb;
    let corpus = counting_corpus(6, 5, &(0..5).collect::<Vec<_>>(), 50);
    let table = xmodal_align(&model, &corpus, &corpus, XModalMode::CosineDistanceArgmin).unwrap();
    for s in 0..5 {
        let d = table.scores[s * 5 + s];
        assert!(d.abs() < 1e-12, "self-distance of token {s} is {d}");
        for t in 0..5 {
            assert!(table.scores[s * 5 + t] >= -1e-12);
        }
    }
    let out = xmodal_infer(&table, &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(out, vec![0, 1, 2, 3, 4]);
}

#[test]
fn alignment_means_match_a_direct_average_oracle() {
    let model = JsttiModel::new(4, 6, &small_cfg()).unwrap();
    let corpus: Vec<TokenSeq> = vec![vec![0, 1, 2], vec![2, 1, 1, 3], vec![0, 3]];
    let (means, seen) = token_means(&model, &corpus, Modality::Speech).unwrap();
    assert_eq!(seen, vec![true, true, true, true]);

    // Oracle: gather every occurrence's final-layer embedding, then average
    // in one pass per token.
    let d = model.cfg.dim;
    let mut sums = vec![0.0; 4 * d];
    let mut counts = vec![0usize; 4];
    for seq in &corpus {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let mut rng = stream(0, "unused", 0);
        let emb = model
            .embed_tokens(&bound, &tape, seq, Modality::Speech)
            .unwrap();
        let outs = model.encode(&bound, &tape, &emb, MixMode::Off, &mut rng).unwrap();
        let last = outs.last().unwrap().values();
        for (l, &t) in seq.iter().enumerate() {
            counts[t as usize] += 1;
            for j in 0..d {
                sums[t as usize * d + j] += last[l * d + j];
            }
        }
    }
    for t in 0..4 {
        for j in 0..d {
            let oracle = sums[t * d + j] / counts[t] as f64;
            assert!(
                (means[t * d + j] - oracle).abs() < 1e-10,
                "mean[{t},{j}] {} vs oracle {oracle}",
                means[t * d + j]
            );
        }
    }

    // Unseen tokens are flagged and their table entries stay unusable.
    let (_, seen) = token_means(&model, &corpus[..1].to_vec(), Modality::Speech).unwrap();
    assert_eq!(seen, vec![true, true, true, false]);
    let table = xmodal_align(&model, &corpus, &corpus[..1].to_vec(), XModalMode::CosineDistanceArgmin)
        .unwrap();
    for s in 0..4 {
        for t in 3..6 {
            assert!(table.scores[s * 6 + t].is_nan());
        }
    }
}

#[test]
fn alignment_inference_matches_a_brute_force_scan_and_breaks_ties_low() {
    // Hand-built table with a tie in row 1: words 0 and 2 share the minimum.
    let table = XModalTable {
        scores: vec![0.9, 0.1, 0.5, 0.3, 0.7, 0.3],
        speech_seen: vec![true, true],
        word_seen: vec![true, true, true],
        mode: XModalMode::CosineDistanceArgmin,
        n_speech: 2,
        n_words: 3,
    };
    assert_eq!(xmodal_infer(&table, &[0, 1]).unwrap(), vec![1, 0]);

    // Random table, both modes, against an independent linear scan.
    let mut r = stream(51, "scan", 0);
    let scores: Vec<f64> = (0..6 * 7).map(|_| r.random::<f64>()).collect();
    let mut word_seen = vec![true; 7];
    word_seen[4] = false;
    for mode in [XModalMode::CosineDistanceArgmin, XModalMode::RawSimilarityArgmax] {
        let table = XModalTable {
            scores: scores.clone(),
            speech_seen: vec![true; 6],
            word_seen: word_seen.clone(),
            mode,
            n_speech: 6,
            n_words: 7,
        };
        let speech: Vec<u32> = (0..6).collect();
        let got = xmodal_infer(&table, &speech).unwrap();
        for (s, &w) in speech.iter().zip(&got) {
            let row = &scores[*s as usize * 7..(*s as usize + 1) * 7];
            let mut best = None::<usize>;
            for t in 0..7 {
                if !word_seen[t] {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some(b) => match mode {
                        XModalMode::CosineDistanceArgmin => row[t] < row[b],
                        XModalMode::RawSimilarityArgmax => row[t] > row[b],
                    },
                };
                if better {
                    best = Some(t);
                }
            }
            assert_eq!(w as usize, best.unwrap());
        }
    }
}

#[test]
fn both_score_modes_transcribe_identically_when_fully_observed() {
    let model = JsttiModel::new(5, 5, &small_cfg()).unwrap();
    let identity: Vec<u32> = (0..5).collect();
    let speech = counting_corpus(8, 5, &identity, 60);
    let text = counting_corpus(8, 5, &identity, 61);
    let ta = xmodal_align(&model, &speech, &text, XModalMode::CosineDistanceArgmin).unwrap();
    let tb = xmodal_align(&model, &speech, &text, XModalMode::RawSimilarityArgmax).unwrap();
    let probe: Vec<u32> = vec![0, 1, 2, 3, 4, 2, 1];
    assert_eq!(
        xmodal_infer(&ta, &probe).unwrap(),
        xmodal_infer(&tb, &probe).unwrap()
    );
}

#[test]
fn alignment_inference_rejects_unusable_tokens() {
    let table = XModalTable {
        scores: vec![f64::NAN, f64::NAN, 0.2, 0.4],
        speech_seen: vec![false, true],
        word_seen: vec![true, true],
        mode: XModalMode::CosineDistanceArgmin,
        n_speech: 2,
        n_words: 2,
    };
    assert!(matches!(
        xmodal_infer(&table, &[0]),
        Err(Error::UnalignedToken(0))
    ));
    assert!(matches!(
        xmodal_infer(&table, &[2]),
        Err(Error::TokenOutOfRange { .. })
    ));
    let empty = XModalTable {
        scores: vec![f64::NAN; 4],
        speech_seen: vec![true, true],
        word_seen: vec![false, false],
        mode: XModalMode::CosineDistanceArgmin,
        n_speech: 2,
        n_words: 2,
    };
    assert!(matches!(
        xmodal_infer(&empty, &[0]),
        Err(Error::NotEnough { .. })
    ));
}
