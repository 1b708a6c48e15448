//! Position-unigram and skipgram distribution matching.
//!
//! A linear generator G = row_softmax(W) maps speech cluster tokens to word
//! distributions. Training matches, under L1, (a) the per-position unigram
//! distribution of generated words against text and (b) the lag-k skipgram
//! joints Gᵀ P̂_k G against text skipgrams, for k = 1..K.
//!
//! Large effective batches use a two-phase schedule: phase 1 accumulates
//! gradient-free statistics across all batches; phase 2 revisits each batch,
//! re-adding its live term minus a detached copy inside the L1 so that the
//! summed per-batch gradients equal the full-batch gradient exactly, while
//! memory stays independent of the number of batches.

use crate::autodiff::{backward, Tape};
use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_at_b, softmax_rows_inplace};
use crate::nn::{Adam, GradAccum, LrSchedule, ParamId, ParamSet};
use crate::rng::ContentHash;

/// Learned |X|×|Y| weight matrix; its row-softmax is the generator.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    params: ParamSet,
    w: ParamId,
    pub n_clusters: usize,
    pub n_words: usize,
}

impl GeneratorMatrix {
    /// Zero-initialized weights (uniform generator rows).
    pub fn new(n_clusters: usize, n_words: usize) -> Result<Self> {
        Self::from_weights(n_clusters, n_words, vec![0.0; n_clusters * n_words])
    }

    pub fn from_weights(n_clusters: usize, n_words: usize, data: Vec<f64>) -> Result<Self> {
        if n_clusters == 0 || n_words == 0 || data.len() != n_clusters * n_words {
            return Err(Error::ShapeMismatch {
                op: "generator_matrix",
                left: vec![n_clusters, n_words],
                right: vec![data.len()],
            });
        }
        let mut params = ParamSet::new();
        let w = params.add("w", &[n_clusters, n_words], data)?;
        Ok(Self {
            params,
            w,
            n_clusters,
            n_words,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.params.get(self.w).data
    }

    /// Row-softmax view of the weights; each row sums to 1.
    pub fn g_rows(&self) -> Vec<f64> {
        let mut g = self.weights().to_vec();
        softmax_rows_inplace(&mut g, self.n_words);
        g
    }

    /// Per-token argmax transcription; ties resolve to the lowest word id.
    pub fn infer(&self, speech: &[u32]) -> Result<TokenSeq> {
        let g = self.g_rows();
        speech
            .iter()
            .map(|&x| {
                if x as usize >= self.n_clusters {
                    return Err(Error::TokenOutOfRange {
                        token: x,
                        vocab: self.n_clusters,
                    });
                }
                let row = &g[x as usize * self.n_words..(x as usize + 1) * self.n_words];
                let mut best = 0usize;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                Ok(best as u32)
            })
            .collect()
    }
}

/// Row t = token distribution at position t, normalized by the *batch size*
/// (so each row sums to the fraction of sequences reaching that position).
pub fn pos_unigram(seqs: &[TokenSeq], t_max: usize, vocab: usize) -> Result<Vec<f64>> {
    if t_max == 0 {
        return Err(Error::InvalidArg("t_max must be at least 1".into()));
    }
    let mut table = vec![0.0; t_max * vocab];
    let w = 1.0 / seqs.len().max(1) as f64;
    for seq in seqs {
        for (t, &z) in seq.iter().take(t_max).enumerate() {
            if z as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: z, vocab });
            }
            table[t * vocab + z as usize] += w;
        }
    }
    Ok(table)
}

/// K stacked |V|×|V| lag-k joint tables: slice k−1 is the average over
/// sequences of Σ_{i ≤ L−k} δ(z_i, z_{i+k}) / (L−k). Sequences of length ≤ k
/// contribute nothing to slice k.
pub fn skipgram(seqs: &[TokenSeq], k_max: usize, vocab: usize) -> Result<Vec<f64>> {
    if k_max == 0 {
        return Err(Error::InvalidArg("k_max must be at least 1".into()));
    }
    let mut table = vec![0.0; k_max * vocab * vocab];
    let bw = 1.0 / seqs.len().max(1) as f64;
    for seq in seqs {
        for &z in seq {
            if z as usize >= vocab {
                return Err(Error::TokenOutOfRange { token: z, vocab });
            }
        }
        for k in 1..=k_max {
            if seq.len() <= k {
                continue;
            }
            let pair_w = bw / (seq.len() - k) as f64;
            let slice = &mut table[(k - 1) * vocab * vocab..k * vocab * vocab];
            for i in 0..seq.len() - k {
                slice[seq[i] as usize * vocab + seq[i + k] as usize] += pair_w;
            }
        }
    }
    Ok(table)
}

/// Gradient-free statistics accumulated over all batches: speech-side tables
/// pushed through the generator, text-side tables, and a checksum binding
/// them to the exact batches and weights they came from.
#[derive(Debug, Clone)]
pub struct MatchStats {
    pub t_max: usize,
    pub k_max: usize,
    pub n_words: usize,
    /// Σ_f P̂_{X_t}^{B_f} G, shape [t_max, n_words].
    pub u_gx: Vec<f64>,
    /// Σ_f P̂_{Y_t}^{B_f}, shape [t_max, n_words].
    pub u_y: Vec<f64>,
    /// Σ_f Gᵀ P̂_k^{B_f} G, shape [k_max, n_words, n_words].
    pub s_gx: Vec<f64>,
    /// Σ_f P̂_k^{Y,B_f}, shape [k_max, n_words, n_words].
    pub s_y: Vec<f64>,
    pub batches: usize,
    checksum: u64,
}

impl MatchStats {
    /// Heap footprint of the accumulators; independent of the batch count.
    pub fn heap_bytes(&self) -> usize {
        (self.u_gx.capacity() + self.u_y.capacity() + self.s_gx.capacity() + self.s_y.capacity())
            * std::mem::size_of::<f64>()
    }

    /// The full-effective-batch loss value implied by the accumulators:
    /// Σ_t ‖U_Gx[t]−U_y[t]‖₁ + Σ_k ‖S_Gx[k]−S_y[k]‖₁.
    pub fn loss(&self) -> f64 {
        let uni: f64 = self
            .u_gx
            .iter()
            .zip(&self.u_y)
            .map(|(a, b)| (a - b).abs())
            .sum();
        let skip: f64 = self
            .s_gx
            .iter()
            .zip(&self.s_y)
            .map(|(a, b)| (a - b).abs())
            .sum();
        uni + skip
    }
}

fn batches_checksum(
    speech_batches: &[Vec<TokenSeq>],
    text_batches: &[Vec<TokenSeq>],
    weights: &[f64],
    t_max: usize,
    k_max: usize,
) -> u64 {
    let mut h = ContentHash::new();
    h.push_u64(t_max as u64);
    h.push_u64(k_max as u64);
    for side in [speech_batches, text_batches] {
        h.push_u64(side.len() as u64);
        for batch in side {
            h.push_u64(batch.len() as u64);
            for seq in batch {
                h.push_u64(seq.len() as u64);
                for &z in seq {
                    h.push_u32(z);
                }
            }
        }
    }
    for &w in weights {
        h.push_f64(w);
    }
    h.finish()
}

fn check_batches(
    speech_batches: &[Vec<TokenSeq>],
    text_batches: &[Vec<TokenSeq>],
) -> Result<()> {
    if speech_batches.len() != text_batches.len() || speech_batches.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "pusm_batches",
            left: vec![speech_batches.len()],
            right: vec![text_batches.len()],
        });
    }
    Ok(())
}

/// Phase 1: accumulate detached speech-through-G and text statistics over all
/// batches. `gen` stays fixed; no gradient state is created or retained.
pub fn aggregate_phase1(
    speech_batches: &[Vec<TokenSeq>],
    text_batches: &[Vec<TokenSeq>],
    gen: &GeneratorMatrix,
    t_max: usize,
    k_max: usize,
) -> Result<MatchStats> {
    check_batches(speech_batches, text_batches)?;
    let (x, y) = (gen.n_clusters, gen.n_words);
    let g = gen.g_rows();
    let mut stats = MatchStats {
        t_max,
        k_max,
        n_words: y,
        u_gx: vec![0.0; t_max * y],
        u_y: vec![0.0; t_max * y],
        s_gx: vec![0.0; k_max * y * y],
        s_y: vec![0.0; k_max * y * y],
        batches: speech_batches.len(),
        checksum: batches_checksum(speech_batches, text_batches, gen.weights(), t_max, k_max),
    };
    for (sb, tb) in speech_batches.iter().zip(text_batches) {
        let px = pos_unigram(sb, t_max, x)?;
        crate::linalg::axpy(1.0, &matmul(&px, &g, t_max, x, y), &mut stats.u_gx);
        crate::linalg::axpy(1.0, &pos_unigram(tb, t_max, y)?, &mut stats.u_y);
        let pk = skipgram(sb, k_max, x)?;
        for k in 0..k_max {
            let slice = &pk[k * x * x..(k + 1) * x * x];
            // Gᵀ (P̂_k G)
            let pg = matmul(slice, &g, x, x, y);
            let gpg = matmul_at_b(&g, &pg, x, y, y);
            crate::linalg::axpy(1.0, &gpg, &mut stats.s_gx[k * y * y..(k + 1) * y * y]);
        }
        crate::linalg::axpy(1.0, &skipgram(tb, k_max, y)?, &mut stats.s_y);
    }
    Ok(stats)
}

/// Phase 2: revisit the same batches with the same weights, accumulate the
/// per-batch gradients of the detach-trick losses (their sum equals the
/// full-effective-batch gradient), and apply one optimizer step. Returns the
/// effective-batch loss value.
pub fn update_phase2(
    speech_batches: &[Vec<TokenSeq>],
    text_batches: &[Vec<TokenSeq>],
    gen: &mut GeneratorMatrix,
    stats: &MatchStats,
    opt: &mut Adam,
) -> Result<f64> {
    check_batches(speech_batches, text_batches)?;
    let actual = batches_checksum(
        speech_batches,
        text_batches,
        gen.weights(),
        stats.t_max,
        stats.k_max,
    );
    if actual != stats.checksum {
        return Err(Error::StatsMismatch {
            expected: stats.checksum,
            actual,
        });
    }
    let (x, y) = (gen.n_clusters, gen.n_words);
    let (t_max, k_max) = (stats.t_max, stats.k_max);
    let mut accum = GradAccum::new();
    let u_gap: Vec<f64> = stats.u_gx.iter().zip(&stats.u_y).map(|(a, b)| a - b).collect();
    let s_gap: Vec<f64> = stats.s_gx.iter().zip(&stats.s_y).map(|(a, b)| a - b).collect();
    for sb in speech_batches {
        let tape = Tape::new();
        let bound = gen.params.bind(&tape);
        let g = bound.get(gen.w).softmax_rows()?;

        let px = tape.matrix(pos_unigram(sb, t_max, x)?, t_max, x)?;
        let live_u = px.matmul(&g)?;
        let gap_u = tape.matrix(u_gap.clone(), t_max, y)?;
        let mut loss = gap_u
            .add(&live_u.sub(&live_u.stop_gradient())?)?
            .abs()
            .sum();

        let pk = skipgram(sb, k_max, x)?;
        for k in 0..k_max {
            let slice = tape.matrix(pk[k * x * x..(k + 1) * x * x].to_vec(), x, x)?;
            let live_s = g.transpose()?.matmul(&slice.matmul(&g)?)?;
            let gap_s = tape.matrix(s_gap[k * y * y..(k + 1) * y * y].to_vec(), y, y)?;
            let term = gap_s.add(&live_s.sub(&live_s.stop_gradient())?)?.abs().sum();
            loss = loss.add(&term)?;
        }
        let mut grads = backward(&loss)?;
        accum.absorb(&mut grads, &bound);
    }
    opt.step(&mut gen.params, accum);
    Ok(stats.loss())
}

#[derive(Debug, Clone)]
pub struct PusmConfig {
    /// Maximum skipgram lag K.
    pub k_max: usize,
    pub lr: f64,
    /// Two-phase update rounds over the full effective batch.
    pub epochs: usize,
    /// Sequences per batch; 0 means one batch holding the whole corpus.
    pub batch_size: usize,
}

impl Default for PusmConfig {
    fn default() -> Self {
        Self {
            k_max: 4,
            lr: 0.4,
            epochs: 150,
            batch_size: 0,
        }
    }
}

/// Split a corpus into batches of `batch_size` (last one possibly short).
fn into_batches(seqs: &[TokenSeq], batch_size: usize) -> Vec<Vec<TokenSeq>> {
    let bs = if batch_size == 0 { seqs.len().max(1) } else { batch_size };
    seqs.chunks(bs).map(|c| c.to_vec()).collect()
}

/// Train a generator by alternating the two phases. The effective batch is
/// the whole corpus per epoch; `t_max` is the longest training sequence.
/// Returns the generator and per-epoch effective-batch losses.
pub fn train_pusm(
    speech: &[TokenSeq],
    text: &[TokenSeq],
    n_clusters: usize,
    n_words: usize,
    cfg: &PusmConfig,
) -> Result<(GeneratorMatrix, Vec<f64>)> {
    if speech.is_empty() || text.is_empty() {
        return Err(Error::NotEnough {
            what: "training sequences",
            requested: 1,
            available: 0,
        });
    }
    let t_max = speech
        .iter()
        .chain(text)
        .map(Vec::len)
        .max()
        .unwrap_or(1)
        .max(1);
    let mut gen = GeneratorMatrix::new(n_clusters, n_words)?;
    let mut opt = Adam::new(LrSchedule::Constant(cfg.lr));
    let speech_batches = into_batches(speech, cfg.batch_size);
    // Pair text into the same number of batches.
    let text_bs = text.len().div_ceil(speech_batches.len());
    let text_batches = into_batches(text, text_bs);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let stats = aggregate_phase1(&speech_batches, &text_batches, &gen, t_max, cfg.k_max)?;
        losses.push(update_phase2(
            &speech_batches,
            &text_batches,
            &mut gen,
            &stats,
            &mut opt,
        )?);
    }
    Ok((gen, losses))
}
