//! Cross-modal embedding alignment: average each token's contextual encoder
//! embeddings over an unpaired corpus per modality, score all speech/word
//! token pairs, and transcribe by per-token nearest word.

use crate::autodiff::Tape;
use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::rng::stream;

use super::{JsttiModel, MixMode, Modality};

/// How pairwise scores are formed and read at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum XModalMode {
    /// Score = 1 − cosine similarity; inference takes the argmin.
    #[default]
    CosineDistanceArgmin,
    /// Score = raw cosine similarity; inference takes the argmax.
    RawSimilarityArgmax,
}

/// Pairwise speech-token/word scores plus per-token usability flags.
#[derive(Debug, Clone)]
pub struct XModalTable {
    /// Row-major `n_speech × n_words` scores.
    pub scores: Vec<f64>,
    /// Whether each speech token was observed at least once.
    pub speech_seen: Vec<bool>,
    /// Whether each word was observed at least once.
    pub word_seen: Vec<bool>,
    pub mode: XModalMode,
    pub n_speech: usize,
    pub n_words: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Count-weighted mean final-layer embedding per token of one modality.
/// Returns (n_vocab × dim means, seen flags).
pub(crate) fn token_means(
    model: &JsttiModel,
    seqs: &[TokenSeq],
    modality: Modality,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let vocab = model.vocab(modality);
    let dim = model.cfg.dim;
    let mut counts = vec![0usize; vocab];
    for seq in seqs {
        for &t in seq {
            if (t as usize) >= vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab });
            }
            counts[t as usize] += 1;
        }
    }
    let mut means = vec![0.0; vocab * dim];
    let mut rng = stream(0, "unused", 0);
    for seq in seqs {
        if seq.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let emb = model.embed_tokens(&bound, &tape, seq, modality)?;
        let outs = model.encode(&bound, &tape, &emb, MixMode::Off, &mut rng)?;
        let last = outs.last().expect("n_layers >= 2").values();
        for (l, &t) in seq.iter().enumerate() {
            let t = t as usize;
            let w = 1.0 / counts[t] as f64;
            for d in 0..dim {
                means[t * dim + d] += w * last[l * dim + d];
            }
        }
    }
    Ok((means, counts.iter().map(|&c| c > 0).collect()))
}

/// Build the pairwise score table between per-token average speech
/// embeddings and per-token average word embeddings over unpaired corpora.
/// Tokens never observed are flagged unusable rather than scored.
pub fn xmodal_align(
    model: &JsttiModel,
    speech: &[TokenSeq],
    text: &[TokenSeq],
    mode: XModalMode,
) -> Result<XModalTable> {
    let (ds, speech_seen) = token_means(model, speech, Modality::Speech)?;
    let (dt, word_seen) = token_means(model, text, Modality::Text)?;
    let (k, v, dim) = (model.n_speech, model.n_words, model.cfg.dim);
    let mut scores = vec![f64::NAN; k * v];
    for s in 0..k {
        if !speech_seen[s] {
            continue;
        }
        for t in 0..v {
            if !word_seen[t] {
                continue;
            }
            let sim = cosine(&ds[s * dim..(s + 1) * dim], &dt[t * dim..(t + 1) * dim]);
            scores[s * v + t] = match mode {
                XModalMode::CosineDistanceArgmin => 1.0 - sim,
                XModalMode::RawSimilarityArgmax => sim,
            };
        }
    }
    Ok(XModalTable {
        scores,
        speech_seen,
        word_seen,
        mode,
        n_speech: k,
        n_words: v,
    })
}

/// Transcribe a speech-token sequence with the alignment table: each token
/// maps to its best-scoring usable word (ties to the lowest word id).
/// Errors if an input token was never observed during alignment.
pub fn xmodal_infer(table: &XModalTable, speech: &[u32]) -> Result<TokenSeq> {
    if !table.word_seen.iter().any(|&s| s) {
        return Err(Error::NotEnough {
            what: "usable word columns",
            requested: 1,
            available: 0,
        });
    }
    let mut out = Vec::with_capacity(speech.len());
    for &s in speech {
        let si = s as usize;
        if si >= table.n_speech {
            return Err(Error::TokenOutOfRange {
                token: s,
                vocab: table.n_speech,
            });
        }
        if !table.speech_seen[si] {
            return Err(Error::UnalignedToken(s));
        }
        let row = &table.scores[si * table.n_words..(si + 1) * table.n_words];
        let mut best: Option<usize> = None;
        for (t, &score) in row.iter().enumerate() {
            if !table.word_seen[t] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => match table.mode {
                    XModalMode::CosineDistanceArgmin => score < row[b],
                    XModalMode::RawSimilarityArgmax => score > row[b],
                },
            };
            if better {
                best = Some(t);
            }
        }
        out.push(best.expect("at least one usable word column") as u32);
    }
    Ok(out)
}
