//! Segment pooling: collapse frame runs into one feature vector per word.
//!
//! [`hard_pool`] averages frames inside known boundaries. [`soft_pool`] is the
//! differentiable relaxation: per-frame logits α become boundary indicators
//! b_t = σ(α_t) + sg(σ(hard_scale·α_t) − σ(α_t)) (hard forward, soft
//! backward), the inclusive cumulative sum s_t = Σ_{τ≤t} b_τ assigns frame t
//! to segment ⌈s_t⌉ in the hard limit (a frame with b_t ≈ 1 *starts* a new
//! segment), and segment m pools frames with weights ∝ 1 − tanh(c·|m − s_t|),
//! normalized so each segment's weights sum to 1.
//!
//! [`st_quantize`] snaps pooled vectors onto a frozen codebook with a
//! straight-through softmax over negative squared distances, so gradients
//! reach the pooled vectors while the codebook stays fixed.

use crate::autodiff::{concat_rows, Tensor};
use crate::data::{check_ends, FrameSequence};
use crate::error::{Error, Result};
use crate::quantize::Codebook;

/// Tiny floor added to unnormalized pooling weights; keeps far-away segment
/// rows normalizable without measurably changing near ones.
const WEIGHT_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy)]
pub struct SoftPoolConfig {
    /// Sharpness c of the frame-to-segment proximity weight.
    pub sharpness: f64,
    /// Scale applied to α inside the hard (forward-value) branch. 1000 gives
    /// effectively binary indicators; 1 collapses the straight-through
    /// estimator so forward equals the soft path exactly.
    pub hard_scale: f64,
}

impl Default for SoftPoolConfig {
    fn default() -> Self {
        Self {
            sharpness: 4.0,
            hard_scale: 1000.0,
        }
    }
}

/// Output of [`soft_pool`]: pooled features g (segments × dim), the pooling
/// weights h (segments × frames, rows summing to 1), and the segment count.
pub struct SoftPooled {
    pub g: Tensor,
    pub h: Tensor,
    pub segments: usize,
}

/// Mean of each segment's frames under exact end-exclusive boundaries.
pub fn hard_pool(frames: &FrameSequence, ends: &[usize]) -> Result<FrameSequence> {
    check_ends(ends, frames.len())?;
    let d = frames.dim;
    let mut out = Vec::with_capacity(ends.len() * d);
    let mut start = 0usize;
    for &e in ends {
        let mut acc = vec![0.0; d];
        for t in start..e {
            crate::linalg::axpy(1.0, frames.row(t), &mut acc);
        }
        let inv = 1.0 / (e - start) as f64;
        out.extend(acc.into_iter().map(|v| v * inv));
        start = e;
    }
    FrameSequence::new(d, out)
}

/// Differentiable pooling of `frames` (T × d tensor) under boundary logits
/// `alpha` (length-T tensor). Gradients flow to both; the segment count is
/// decided from the forward (hard) indicator values, rounded and clamped to
/// [1, T].
pub fn soft_pool(frames: &Tensor, alpha: &Tensor, cfg: &SoftPoolConfig) -> Result<SoftPooled> {
    if frames.shape().len() != 2 || alpha.shape().len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "soft_pool",
            left: frames.shape().to_vec(),
            right: alpha.shape().to_vec(),
        });
    }
    let t_len = frames.shape()[0];
    if alpha.len() != t_len {
        return Err(Error::ShapeMismatch {
            op: "soft_pool",
            left: vec![t_len],
            right: vec![alpha.len()],
        });
    }
    if cfg.sharpness <= 0.0 || cfg.hard_scale <= 0.0 {
        return Err(Error::InvalidArg(format!(
            "soft_pool needs positive sharpness/hard_scale, got {cfg:?}"
        )));
    }
    let b = straight_through_boundaries(alpha, cfg.hard_scale)?;
    let segments = (b.values().iter().sum::<f64>().round() as isize)
        .clamp(1, t_len as isize) as usize;
    let s = b.cumsum()?;
    // Row m: proximity of every frame's cumulative index to segment m.
    let mut rows = Vec::with_capacity(segments);
    for m in 1..=segments {
        let w = s
            .add_scalar(-(m as f64))
            .abs()
            .scale(cfg.sharpness)
            .tanh()
            .neg()
            .add_scalar(1.0 + WEIGHT_FLOOR);
        rows.push(w);
    }
    let row_refs: Vec<&Tensor> = rows.iter().collect();
    let w = concat_rows(&row_refs)?;
    let h = w.scale_rows(&w.row_sums()?.recip())?;
    let g = h.matmul(frames)?;
    Ok(SoftPooled { g, h, segments })
}

/// b = σ(α) + sg(σ(hard_scale·α) − σ(α)): hard forward, soft gradient.
pub fn straight_through_boundaries(alpha: &Tensor, hard_scale: f64) -> Result<Tensor> {
    let soft = alpha.sigmoid();
    let hard = alpha.scale(hard_scale).sigmoid();
    soft.add(&hard.sub(&soft)?.stop_gradient())
}

/// Softmax over negative squared distances from each row of `g` to every
/// codebook row; the differentiable surrogate inside [`st_quantize`]. The
/// codebook is a constant: no gradient reaches it.
pub fn quantize_soft(g: &Tensor, codebook: &Codebook) -> Result<Tensor> {
    neg_sq_dists(g, codebook)?.softmax_rows()
}

/// One-hot nearest-codebook assignment with straight-through gradients
/// (forward: exact one-hot rows, ties to the lowest index; backward: the
/// softmax surrogate's gradient). Returns a (rows × codebook size) tensor.
pub fn st_quantize(g: &Tensor, codebook: &Codebook) -> Result<Tensor> {
    let soft = quantize_soft(g, codebook)?;
    let v = codebook.k();
    let rows = soft.rows();
    let mut hard = vec![0.0; rows * v];
    for (i, row) in soft.values().chunks(v).enumerate() {
        let mut best = 0usize;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        hard[i * v + best] = 1.0;
    }
    let hard = soft
        .tape()
        .leaf(hard, &[rows, v])
        .expect("shape is consistent");
    soft.add(&hard.sub(&soft)?.stop_gradient())
}

/// out\[m,v\] = −‖g\[m,:\] − codebook\[v,:\]‖²; differentiable in g only.
fn neg_sq_dists(g: &Tensor, codebook: &Codebook) -> Result<Tensor> {
    if g.shape().len() != 2 || g.shape()[1] != codebook.dim {
        return Err(Error::ShapeMismatch {
            op: "st_quantize",
            left: g.shape().to_vec(),
            right: vec![codebook.k(), codebook.dim],
        });
    }
    let (m, d) = (g.shape()[0], g.shape()[1]);
    let v = codebook.k();
    let mut out = vec![0.0; m * v];
    for i in 0..m {
        let gi = &g.values()[i * d..(i + 1) * d];
        for j in 0..v {
            out[i * v + j] = -crate::linalg::sq_dist(gi, codebook.centroid(j));
        }
    }
    let gv = g.values().to_vec();
    let cv = codebook.centroids().to_vec();
    g.tape().custom_op(&[g], out, vec![m, v], move |grad| {
        let mut gg = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..v {
                let go = grad[i * v + j];
                if go == 0.0 {
                    continue;
                }
                for k in 0..d {
                    gg[i * d + k] += go * -2.0 * (gv[i * d + k] - cv[j * d + k]);
                }
            }
        }
        vec![Some(gg)]
    })
}
