//! Evaluation metrics: corpus WER with deterministic edit scripts, token-level
//! boundary precision/recall/F1, cluster↔word purity measures, and
//! frequency-bin error attribution.

use crate::data::TokenSeq;
use crate::error::{Error, Result};

/// One step of an edit script aligning a reference to a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignStep {
    Match { r: u32, h: u32 },
    Substitute { r: u32, h: u32 },
    Delete { r: u32 },
    Insert { h: u32 },
}

/// Edit script for one utterance pair; replaying it turns the reference into
/// the hypothesis, and its non-match step count equals the edit distance.
pub type AlignmentOps = Vec<AlignStep>;

#[derive(Debug, Clone, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub matches: u64,
    pub ref_words: u64,
    pub alignments: Vec<AlignmentOps>,
}

/// Corpus word error rate (S+D+I)/N with unit costs. Among equal-cost
/// scripts the backtrace prefers match, then substitute, delete, insert, so
/// alignments (and everything derived from them) are deterministic.
pub fn wer(refs: &[TokenSeq], hyps: &[TokenSeq]) -> Result<WerReport> {
    if refs.len() != hyps.len() {
        return Err(Error::ShapeMismatch {
            op: "wer",
            left: vec![refs.len()],
            right: vec![hyps.len()],
        });
    }
    let mut report = WerReport {
        wer: 0.0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        matches: 0,
        ref_words: 0,
        alignments: Vec::with_capacity(refs.len()),
    };
    for (r, h) in refs.iter().zip(hyps) {
        let ops = align_pair(r, h);
        for op in &ops {
            match op {
                AlignStep::Match { .. } => report.matches += 1,
                AlignStep::Substitute { .. } => report.substitutions += 1,
                AlignStep::Delete { .. } => report.deletions += 1,
                AlignStep::Insert { .. } => report.insertions += 1,
            }
        }
        report.ref_words += r.len() as u64;
        report.alignments.push(ops);
    }
    let errors = report.substitutions + report.deletions + report.insertions;
    report.wer = if report.ref_words == 0 && errors == 0 {
        0.0
    } else {
        errors as f64 / report.ref_words as f64
    };
    Ok(report)
}

/// Levenshtein DP with the fixed backtrace preference.
fn align_pair(r: &[u32], h: &[u32]) -> AlignmentOps {
    let (n, m) = (r.len(), h.len());
    let mut d = vec![0u32; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[at(i, 0)] = i as u32;
    }
    for j in 0..=m {
        d[at(0, j)] = j as u32;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[at(i - 1, j - 1)] + u32::from(r[i - 1] != h[j - 1]);
            let del = d[at(i - 1, j)] + 1;
            let ins = d[at(i, j - 1)] + 1;
            d[at(i, j)] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[at(i, j)];
        if i > 0 && j > 0 && r[i - 1] == h[j - 1] && cur == d[at(i - 1, j - 1)] {
            ops.push(AlignStep::Match {
                r: r[i - 1],
                h: h[j - 1],
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && cur == d[at(i - 1, j - 1)] + 1 {
            ops.push(AlignStep::Substitute {
                r: r[i - 1],
                h: h[j - 1],
            });
            i -= 1;
            j -= 1;
        } else if i > 0 && cur == d[at(i - 1, j)] + 1 {
            ops.push(AlignStep::Delete { r: r[i - 1] });
            i -= 1;
        } else {
            ops.push(AlignStep::Insert { h: h[j - 1] });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Token-level boundary scores. Both boundary lists are end-exclusive word
/// ends whose last entry is the frame count; tokens are the implied segments
/// (start 0 prepended). A hypothesis token is a hit iff both its start and
/// end lie within ±`tolerance` frames of an unmatched gold token's start and
/// end (greedy left-to-right, one-to-one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hits: usize,
    pub hyp_tokens: usize,
    pub gold_tokens: usize,
}

fn tokens_of(ends: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0usize;
    ends.iter()
        .map(|&e| {
            let t = (start, e);
            start = e;
            t
        })
        .collect()
}

pub fn boundary_prf(gold_ends: &[usize], hyp_ends: &[usize], tolerance: usize) -> PrfReport {
    let gold = tokens_of(gold_ends);
    let hyp = tokens_of(hyp_ends);
    let mut used = vec![false; gold.len()];
    let mut hits = 0usize;
    for &(hs, he) in &hyp {
        for ((gs, ge), u) in gold.iter().zip(used.iter_mut()) {
            if !*u && gs.abs_diff(hs) <= tolerance && ge.abs_diff(he) <= tolerance {
                *u = true;
                hits += 1;
                break;
            }
        }
    }
    let precision = if hyp.is_empty() {
        0.0
    } else {
        hits as f64 / hyp.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        hits as f64 / gold.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfReport {
        precision,
        recall,
        f1,
        hits,
        hyp_tokens: hyp.len(),
        gold_tokens: gold.len(),
    }
}

/// Corpus-level PRF: hits and token counts pooled over utterance pairs.
pub fn boundary_prf_corpus(
    gold: &[Vec<usize>],
    hyp: &[Vec<usize>],
    tolerance: usize,
) -> Result<PrfReport> {
    if gold.len() != hyp.len() {
        return Err(Error::ShapeMismatch {
            op: "boundary_prf",
            left: vec![gold.len()],
            right: vec![hyp.len()],
        });
    }
    let (mut hits, mut nh, mut ng) = (0usize, 0usize, 0usize);
    for (g, h) in gold.iter().zip(hyp) {
        let r = boundary_prf(g, h, tolerance);
        hits += r.hits;
        nh += r.hyp_tokens;
        ng += r.gold_tokens;
    }
    let precision = if nh == 0 { 0.0 } else { hits as f64 / nh as f64 };
    let recall = if ng == 0 { 0.0 } else { hits as f64 / ng as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(PrfReport {
        precision,
        recall,
        f1,
        hits,
        hyp_tokens: nh,
        gold_tokens: ng,
    })
}

/// Word/cluster purity over aligned label sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PurityReport {
    /// E over clusters of the dominant word's conditional probability.
    pub word_purity: f64,
    /// E over words of the dominant cluster's conditional probability.
    pub cluster_purity: f64,
    /// I(Y;L)/H(Y); None when H(Y)=0 (a single distinct word).
    pub wnmi: Option<f64>,
    /// Joint distribution, row i = word, column j = cluster; sums to 1.
    pub joint: Vec<f64>,
    pub n_words: usize,
    pub n_clusters: usize,
}

pub fn purity(word_labels: &[u32], cluster_labels: &[u32]) -> Result<PurityReport> {
    if word_labels.len() != cluster_labels.len() {
        return Err(Error::ShapeMismatch {
            op: "purity",
            left: vec![word_labels.len()],
            right: vec![cluster_labels.len()],
        });
    }
    if word_labels.is_empty() {
        return Err(Error::NotEnough {
            what: "aligned labels",
            requested: 1,
            available: 0,
        });
    }
    let ny = *word_labels.iter().max().unwrap() as usize + 1;
    let nl = *cluster_labels.iter().max().unwrap() as usize + 1;
    let mut joint = vec![0.0; ny * nl];
    let w = 1.0 / word_labels.len() as f64;
    for (&y, &l) in word_labels.iter().zip(cluster_labels) {
        joint[y as usize * nl + l as usize] += w;
    }
    let word_purity = (0..nl)
        .map(|j| (0..ny).map(|i| joint[i * nl + j]).fold(0.0, f64::max))
        .sum();
    let cluster_purity = (0..ny)
        .map(|i| (0..nl).map(|j| joint[i * nl + j]).fold(0.0, f64::max))
        .sum();
    let py: Vec<f64> = (0..ny)
        .map(|i| (0..nl).map(|j| joint[i * nl + j]).sum())
        .collect();
    let pl: Vec<f64> = (0..nl)
        .map(|j| (0..ny).map(|i| joint[i * nl + j]).sum())
        .collect();
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let hy: f64 = py.iter().map(|&p| h(p)).sum();
    let mut mi = 0.0;
    for i in 0..ny {
        for j in 0..nl {
            let p = joint[i * nl + j];
            if p > 0.0 {
                mi += p * (p / (py[i] * pl[j])).ln();
            }
        }
    }
    let wnmi = if hy > 0.0 { Some(mi / hy) } else { None };
    Ok(PurityReport {
        word_purity,
        cluster_purity,
        wnmi,
        joint,
        n_words: ny,
        n_clusters: nl,
    })
}

/// Error/occurrence counts for one frequency bin of word IDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinStat {
    pub errors: u64,
    pub occurrences: u64,
}

/// Attribute alignment errors to frequency bins of `bin_size` word IDs
/// (IDs are frequency ranks, so bin b covers ranks [b·size, (b+1)·size)).
/// Substitutions and deletions charge the reference word; insertions charge
/// the hypothesis word. Occurrence counts cover reference words only.
pub fn error_bins(
    alignments: &[AlignmentOps],
    vocab_size: usize,
    bin_size: usize,
) -> Result<Vec<BinStat>> {
    if bin_size == 0 {
        return Err(Error::InvalidArg("bin size must be positive".into()));
    }
    let n_bins = vocab_size.div_ceil(bin_size).max(1);
    let mut bins = vec![BinStat::default(); n_bins];
    let bin_of = |word: u32| -> Result<usize> {
        let b = word as usize / bin_size;
        if b >= n_bins {
            return Err(Error::TokenOutOfRange {
                token: word,
                vocab: vocab_size,
            });
        }
        Ok(b)
    };
    for ops in alignments {
        for op in ops {
            match *op {
                AlignStep::Match { r, .. } => bins[bin_of(r)?].occurrences += 1,
                AlignStep::Substitute { r, .. } => {
                    let b = bin_of(r)?;
                    bins[b].occurrences += 1;
                    bins[b].errors += 1;
                }
                AlignStep::Delete { r } => {
                    let b = bin_of(r)?;
                    bins[b].occurrences += 1;
                    bins[b].errors += 1;
                }
                AlignStep::Insert { h } => bins[bin_of(h)?].errors += 1,
            }
        }
    }
    Ok(bins)
}
