//! Corpus construction: transcript generation, vocabulary curation, frame
//! synthesis with exact gold boundaries, and speaker-disjoint splits.
//!
//! Synthesis draws one prototype vector per word, one offset per speaker, and
//! i.i.d. noise per frame, so a word's frames form a noisy plateau around
//! prototype + speaker offset. Word lengths are clipped-Poisson. An optional
//! linear crossfade leans edge frames toward the neighbouring word's base
//! vector without moving the gold boundary.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{FrameSequence, TokenSeq};
use crate::error::{Error, Result};
use crate::rng;

/// Words ordered by descending corpus frequency (rank == word ID).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub words: Vec<String>,
    pub counts: Vec<u64>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.words.iter().position(|w| w == word).map(|i| i as u32)
    }

    /// True when `self` is the frequency-rank prefix of `larger`.
    pub fn is_prefix_of(&self, larger: &Vocabulary) -> bool {
        self.len() <= larger.len() && self.words[..] == larger.words[..self.len()]
    }
}

/// One synthesized utterance: frames plus the gold word sequence and exact
/// word-end boundaries (end-exclusive, last == frame count).
#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    pub speaker: u32,
    pub words: TokenSeq,
    pub frames: FrameSequence,
    pub gold_ends: Vec<usize>,
}

/// Index sets into a shared utterance list. Eval speakers never appear in
/// train or valid; valid is carved from the train side and keeps its
/// transcripts for paired validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Controls for [`gen_transcripts`].
#[derive(Debug, Clone)]
pub struct TextParams {
    /// Distinct surface words available before curation.
    pub raw_vocab: usize,
    pub sentences: usize,
    pub mean_len: f64,
    pub min_len: u64,
    /// Zipf exponent shaping the unigram frequency profile.
    pub zipf_exponent: f64,
    /// Log-normal jitter applied to bigram transition weights; larger values
    /// give text more sequential structure for the matching losses to use.
    pub transition_jitter: f64,
    pub seed: u64,
}

impl Default for TextParams {
    fn default() -> Self {
        Self {
            raw_vocab: 96,
            sentences: 2000,
            mean_len: 8.0,
            min_len: 3,
            zipf_exponent: 1.0,
            transition_jitter: 1.2,
            seed: 0,
        }
    }
}

/// Sample raw transcripts from a seeded Markov bigram chain whose stationary
/// profile is approximately Zipf.
pub fn gen_transcripts(p: &TextParams) -> Vec<Vec<String>> {
    let v = p.raw_vocab;
    let words: Vec<String> = (0..v).map(|i| format!("w{i:04}")).collect();
    let zipf: Vec<f64> = (0..v)
        .map(|i| 1.0 / ((i + 1) as f64).powf(p.zipf_exponent))
        .collect();
    let mut setup = rng::stream(p.seed, "text-chain", 0);
    let jitter = |r: &mut rand_chacha::ChaCha8Rng| (p.transition_jitter * rng::normal(r)).exp();
    let start: Vec<f64> = zipf.iter().map(|z| z * jitter(&mut setup)).collect();
    let trans: Vec<Vec<f64>> = (0..v)
        .map(|_| zipf.iter().map(|z| z * jitter(&mut setup)).collect())
        .collect();
    let draw = |dist: &[f64], r: &mut rand_chacha::ChaCha8Rng| -> usize {
        let total: f64 = dist.iter().sum();
        let mut u = r.random::<f64>() * total;
        for (i, w) in dist.iter().enumerate() {
            u -= w;
            if u <= 0.0 {
                return i;
            }
        }
        dist.len() - 1
    };
    (0..p.sentences)
        .map(|s| {
            let mut r = rng::stream(p.seed, "text-sentence", s as u64);
            let len = rng::poisson_clipped(&mut r, p.mean_len, p.min_len) as usize;
            let mut sent = Vec::with_capacity(len);
            let mut cur = draw(&start, &mut r);
            sent.push(words[cur].clone());
            for _ in 1..len {
                cur = draw(&trans[cur], &mut r);
                sent.push(words[cur].clone());
            }
            sent
        })
        .collect()
}

/// Keep the `k` most frequent words (ties broken by earliest first occurrence
/// in reading order), delete all other words from the transcripts, and drop
/// sentences that become empty.
pub fn curate_topk(
    transcripts: &[Vec<String>],
    k: usize,
) -> Result<(Vocabulary, Vec<TokenSeq>)> {
    use std::collections::HashMap;
    let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
    let mut order = 0usize;
    for sent in transcripts {
        for w in sent {
            let e = counts.entry(w.as_str()).or_insert_with(|| {
                let slot = (0, order);
                (slot.0, slot.1)
            });
            e.0 += 1;
            order += 1;
        }
    }
    if counts.len() < k {
        return Err(Error::NotEnough {
            what: "distinct words",
            requested: k,
            available: counts.len(),
        });
    }
    let mut ranked: Vec<(&str, u64, usize)> =
        counts.iter().map(|(w, &(c, f))| (*w, c, f)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(k);
    let vocab = Vocabulary {
        words: ranked.iter().map(|(w, _, _)| w.to_string()).collect(),
        counts: ranked.iter().map(|(_, c, _)| *c).collect(),
    };
    let ids: HashMap<&str, u32> = ranked
        .iter()
        .enumerate()
        .map(|(i, (w, _, _))| (*w, i as u32))
        .collect();
    let curated: Vec<TokenSeq> = transcripts
        .iter()
        .filter_map(|sent| {
            let seq: TokenSeq = sent
                .iter()
                .filter_map(|w| ids.get(w.as_str()).copied())
                .collect();
            if seq.is_empty() {
                None
            } else {
                Some(seq)
            }
        })
        .collect();
    Ok((vocab, curated))
}

/// Controls for [`synth_corpus`].
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub dim: usize,
    pub frames_per_word_mean: f64,
    pub min_frames_per_word: u64,
    /// Standard deviation of per-frame i.i.d. noise.
    pub noise_sigma: f64,
    /// Standard deviation of the per-speaker offset vector.
    pub speaker_shift: f64,
    /// Frames on each side of a join leaned toward the neighbouring word.
    pub crossfade: usize,
    pub n_speakers: u32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            dim: 16,
            frames_per_word_mean: 12.0,
            min_frames_per_word: 2,
            noise_sigma: 0.15,
            speaker_shift: 0.05,
            crossfade: 0,
            n_speakers: 10,
            seed: 0,
        }
    }
}

/// The prototype vector synthesis draws for `word` under `seed` (exposed so
/// tests can compare pooled features against ground truth).
pub fn word_prototype(seed: u64, word: u32, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "prototype", u64::from(word));
    (0..dim).map(|_| rng::normal(&mut r)).collect()
}

/// The offset vector synthesis adds for `speaker` under `seed`.
pub fn speaker_offset(seed: u64, speaker: u32, scale: f64, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "speaker", u64::from(speaker));
    (0..dim).map(|_| scale * rng::normal(&mut r)).collect()
}

/// Render curated transcripts into frame sequences. Deterministic per
/// (seed, utterance index); speakers are assigned round-robin.
pub fn synth_corpus(curated: &[TokenSeq], p: &SynthParams) -> Result<Vec<Utterance>> {
    if p.n_speakers == 0 || p.dim == 0 {
        return Err(Error::InvalidArg(
            "synthesis needs at least one speaker and one dimension".into(),
        ));
    }
    if p.noise_sigma < 0.0 || p.frames_per_word_mean <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "bad synthesis noise/mean: sigma {}, mean {}",
            p.noise_sigma, p.frames_per_word_mean
        )));
    }
    let mut out = Vec::with_capacity(curated.len());
    for (i, words) in curated.iter().enumerate() {
        if words.is_empty() {
            return Err(Error::InvalidArg(format!("utterance {i} has no words")));
        }
        let speaker = i as u32 % p.n_speakers;
        let offset = speaker_offset(p.seed, speaker, p.speaker_shift, p.dim);
        let mut r = rng::stream(p.seed, "utt", i as u64);
        let lens: Vec<usize> = words
            .iter()
            .map(|_| {
                rng::poisson_clipped(&mut r, p.frames_per_word_mean, p.min_frames_per_word)
                    as usize
            })
            .collect();
        let total: usize = lens.iter().sum();
        let mut gold_ends = Vec::with_capacity(words.len());
        let mut acc = 0;
        for &l in &lens {
            acc += l;
            gold_ends.push(acc);
        }
        // Piecewise-constant base signal (prototype + speaker offset) ...
        let bases: Vec<Vec<f64>> = words
            .iter()
            .map(|&w| {
                let mut b = word_prototype(p.seed, w, p.dim);
                crate::linalg::axpy(1.0, &offset, &mut b);
                b
            })
            .collect();
        let mut data = Vec::with_capacity(total * p.dim);
        for (seg, &l) in lens.iter().enumerate() {
            for _ in 0..l {
                data.extend_from_slice(&bases[seg]);
            }
            let _ = seg;
        }
        // ... with a linear lean toward the neighbour near each join ...
        if p.crossfade > 0 {
            let w = p.crossfade;
            for (join, &end) in gold_ends[..gold_ends.len() - 1].iter().enumerate() {
                let (a, b) = (&bases[join], &bases[join + 1]);
                for o in 1..=w {
                    let lam = (w + 1 - o) as f64 / (2 * (w + 1)) as f64;
                    if end >= o && end - o >= if join == 0 { 0 } else { gold_ends[join - 1] } {
                        let t = end - o;
                        for (d, slot) in data[t * p.dim..(t + 1) * p.dim].iter_mut().enumerate() {
                            *slot = (1.0 - lam) * a[d] + lam * b[d];
                        }
                    }
                    if end + o - 1 < gold_ends[join + 1] {
                        let t = end + o - 1;
                        for (d, slot) in data[t * p.dim..(t + 1) * p.dim].iter_mut().enumerate() {
                            *slot = (1.0 - lam) * b[d] + lam * a[d];
                        }
                    }
                }
            }
        }
        // ... plus i.i.d. noise on every frame.
        if p.noise_sigma > 0.0 {
            for v in &mut data {
                *v += p.noise_sigma * rng::normal(&mut r);
            }
        }
        out.push(Utterance {
            id: format!("u{i:05}"),
            speaker,
            words: words.clone(),
            frames: FrameSequence::new(p.dim, data)?,
            gold_ends,
        });
    }
    Ok(out)
}

/// Split utterances by speaker into train/valid/eval with the given ratios
/// (which must sum to 1). Whole speakers are assigned to a side, so realized
/// fractions are exact only up to speaker granularity.
pub fn split_corpus(
    utts: &[Utterance],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit> {
    let (tr, va, ev) = ratios;
    if (tr + va + ev - 1.0).abs() > 1e-9 || tr <= 0.0 || va < 0.0 || ev < 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut speakers: Vec<u32> = utts.iter().map(|u| u.speaker).collect();
    speakers.sort_unstable();
    speakers.dedup();
    if speakers.len() < 2 {
        return Err(Error::NotEnough {
            what: "speakers",
            requested: 2,
            available: speakers.len(),
        });
    }
    let mut shuffled = speakers.clone();
    shuffled.shuffle(&mut rng::stream(seed, "split", 0));
    let per_speaker = |s: u32| utts.iter().filter(|u| u.speaker == s).count();
    let total = utts.len() as f64;
    let mut eval_spk = Vec::new();
    let mut valid_spk = Vec::new();
    let mut train_spk = Vec::new();
    let mut eval_n = 0usize;
    let mut valid_n = 0usize;
    for &s in &shuffled {
        if ev > 0.0 && (eval_n as f64) < ev * total && shuffled.len() - eval_spk.len() > 1 {
            eval_spk.push(s);
            eval_n += per_speaker(s);
        } else if va > 0.0 && (valid_n as f64) < va * total
            && shuffled.len() - eval_spk.len() - valid_spk.len() > 1
        {
            valid_spk.push(s);
            valid_n += per_speaker(s);
        } else {
            train_spk.push(s);
        }
    }
    if train_spk.is_empty() {
        return Err(Error::NotEnough {
            what: "speakers for the train split",
            requested: 1,
            available: 0,
        });
    }
    let collect = |spk: &[u32]| -> Vec<usize> {
        utts.iter()
            .enumerate()
            .filter(|(_, u)| spk.contains(&u.speaker))
            .map(|(i, _)| i)
            .collect()
    };
    Ok(CorpusSplit {
        train: collect(&train_spk),
        valid: collect(&valid_spk),
        eval: collect(&eval_spk),
    })
}
