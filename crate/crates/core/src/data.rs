//! Shared data types: frame matrices, token sequences, boundary conventions.
//!
//! Boundaries are exchanged everywhere as *end-exclusive* indices: a boundary
//! list `[e1, e2, …, eM]` is strictly increasing and its last entry equals the
//! frame count, so segment `m` covers frames `[e(m-1), em)` with `e0 = 0`.
//! Two derived views exist and are converted explicitly:
//!
//! * closing frames (`ends − 1`): the last frame of each segment, the format
//!   peak detection emits and boundary classifiers are trained on;
//! * start frames (`[0, e1, …, e(M-1)]`): the first frame of each segment,
//!   the format the differentiable pooler's cumulative-sum expects.

use crate::error::{Error, Result};

/// Word or cluster IDs in time order.
pub type TokenSeq = Vec<u32>;

/// A time-major matrix of frame features (`rows` frames of width `dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub dim: usize,
    data: Vec<f64>,
}

impl FrameSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArg(format!(
                "frame data of length {} is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArg("ragged frame rows".into()));
        }
        Self::new(dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// Validate an end-exclusive boundary list against a frame count.
pub fn check_ends(ends: &[usize], frames: usize) -> Result<()> {
    if ends.is_empty() {
        return Err(Error::InvalidArg("empty boundary list".into()));
    }
    if !ends.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidArg(format!(
            "boundaries not strictly increasing: {ends:?}"
        )));
    }
    if ends[0] == 0 || *ends.last().unwrap() != frames {
        return Err(Error::InvalidArg(format!(
            "boundaries {ends:?} must start past 0 and end at frame count {frames}"
        )));
    }
    Ok(())
}

/// Closing-frame view (`ends − 1`), the output format of peak detection.
pub fn ends_to_closing_frames(ends: &[usize]) -> Vec<usize> {
    ends.iter().map(|e| e - 1).collect()
}

/// Inverse of [`ends_to_closing_frames`].
pub fn closing_frames_to_ends(closes: &[usize]) -> Vec<usize> {
    closes.iter().map(|c| c + 1).collect()
}

/// Start-frame view: first frame of each segment.
pub fn ends_to_starts(ends: &[usize]) -> Vec<usize> {
    let mut starts = Vec::with_capacity(ends.len());
    starts.push(0);
    starts.extend_from_slice(&ends[..ends.len() - 1]);
    starts
}

/// Inverse of [`ends_to_starts`]; needs the frame count to close the last segment.
pub fn starts_to_ends(starts: &[usize], frames: usize) -> Vec<usize> {
    let mut ends: Vec<usize> = starts[1..].to_vec();
    ends.push(frames);
    ends
}

/// Per-frame segment index (0-based) induced by an end-exclusive boundary list.
pub fn frame_segments(ends: &[usize], frames: usize) -> Vec<usize> {
    let mut out = vec![0usize; frames];
    let mut seg = 0usize;
    let mut next = ends[0];
    for (t, slot) in out.iter_mut().enumerate() {
        if t >= next && seg + 1 < ends.len() {
            seg += 1;
            next = ends[seg];
        }
        *slot = seg;
    }
    out
}
