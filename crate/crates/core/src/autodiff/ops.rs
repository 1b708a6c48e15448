//! Tensor operations and their backward rules.
//!
//! Elementwise ops share tiny helpers; structured ops (matmul, softmax,
//! gather, concat, …) register hand-derived rules. Conventions that matter
//! downstream: `abs` uses sign(0) = 0 as its subgradient, sigmoid clips its
//! argument to ±500 before exponentiation, and the row-wise softmax family
//! subtracts the row max before exponentiation.

use std::rc::Rc;

use super::{Tensor, Vjp};
use crate::error::{Error, Result};
use crate::linalg;

const SIGMOID_CLIP: f64 = 500.0;

fn sigmoid_raw(x: f64) -> f64 {
    let x = x.clamp(-SIGMOID_CLIP, SIGMOID_CLIP);
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn emit(&self, values: Vec<f64>, shape: Vec<usize>, vjp: Vjp) -> Tensor {
        let id = self.tape.push(Some(vjp));
        Tensor {
            tape: self.tape.clone(),
            id,
            shape,
            values: Rc::new(values),
        }
    }

    /// Elementwise unary op; `df(x, y)` is dy/dx given input x and output y.
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.values.iter().map(|&x| f(x)).collect();
        let x = Rc::clone(&self.values);
        let y = Rc::new(out.clone());
        let src = self.id;
        self.emit(
            out,
            self.shape.clone(),
            Box::new(move |g| {
                let contrib = g
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(gi, (&xi, &yi))| gi * df(xi, yi))
                    .collect();
                vec![(src, contrib)]
            }),
        )
    }

    /// Elementwise binary op on identically shaped tensors.
    fn binary(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        dfa: impl Fn(f64, f64) -> f64 + 'static,
        dfb: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Tensor> {
        self.check_same_tape(other, op)?;
        self.check_same_shape(other, op)?;
        let out: Vec<f64> = self
            .values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let a = Rc::clone(&self.values);
        let b = Rc::clone(&other.values);
        let (ia, ib) = (self.id, other.id);
        Ok(self.emit(
            out,
            self.shape.clone(),
            Box::new(move |g| {
                let ga = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(gi, (&ai, &bi))| gi * dfa(ai, bi))
                    .collect();
                let gb = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(gi, (&ai, &bi))| gi * dfb(ai, bi))
                    .collect();
                vec![(ia, ga), (ib, gb)]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| 1.0 / b,
            |a, b| -a / (b * b),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(|x| x.ln(), |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(|x| x.sqrt(), |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
        )
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(|x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid_raw, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(
            |x| x.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn recip(&self) -> Tensor {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.values.iter().sum();
        let n = self.len();
        let src = self.id;
        self.emit(
            vec![total],
            vec![1],
            Box::new(move |g| vec![(src, vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len() as f64)
    }

    /// Dot product with a constant weight vector; the workhorse for building
    /// scalar losses out of vectors.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Tensor> {
        if weights.len() != self.len() {
            return Err(Error::ShapeMismatch {
                op: "weighted_sum",
                left: self.shape.clone(),
                right: vec![weights.len()],
            });
        }
        let total = linalg::dot(&self.values, weights);
        let w = weights.to_vec();
        let src = self.id;
        Ok(self.emit(
            vec![total],
            vec![1],
            Box::new(move |g| vec![(src, w.iter().map(|wi| wi * g[0]).collect())]),
        ))
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(&self) -> Tensor {
        let out = self.values.as_ref().clone();
        self.emit(out, self.shape.clone(), Box::new(|_| Vec::new()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let out = self.values.as_ref().clone();
        let src = self.id;
        Ok(self.emit(
            out,
            shape.to_vec(),
            Box::new(move |g| vec![(src, g.to_vec())]),
        ))
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() == 2 {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: vec![0, 0],
            })
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_tape(other, "matmul")?;
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let out = linalg::matmul(&self.values, &other.values, m, k, n);
        let a = Rc::clone(&self.values);
        let b = Rc::clone(&other.values);
        let (ia, ib) = (self.id, other.id);
        Ok(self.emit(
            out,
            vec![m, n],
            Box::new(move |g| {
                let ga = linalg::matmul_a_bt(g, &b, m, n, k);
                let gb = linalg::matmul_at_b(&a, g, m, k, n);
                vec![(ia, ga), (ib, gb)]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("transpose")?;
        let out = linalg::transpose(&self.values, m, n);
        let src = self.id;
        Ok(self.emit(
            out,
            vec![n, m],
            Box::new(move |g| vec![(src, linalg::transpose(g, n, m))]),
        ))
    }

    /// Add a 1-D bias row to every row of a matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        self.check_same_tape(bias, "add_row")?;
        let (m, n) = self.dims2("add_row")?;
        if bias.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let mut out = self.values.as_ref().clone();
        for row in out.chunks_mut(n) {
            linalg::axpy(1.0, &bias.values, row);
        }
        let (ia, ib) = (self.id, bias.id);
        Ok(self.emit(
            out,
            vec![m, n],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    linalg::axpy(1.0, row, &mut gb);
                }
                vec![(ia, g.to_vec()), (ib, gb)]
            }),
        ))
    }

    /// Multiply each row of a matrix elementwise by a length-cols vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.check_same_tape(row, "mul_row")?;
        let (m, n) = self.dims2("mul_row")?;
        if row.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "mul_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut out = self.values.as_ref().clone();
        for chunk in out.chunks_mut(n) {
            for (v, &r) in chunk.iter_mut().zip(row.values.iter()) {
                *v *= r;
            }
        }
        let a = Rc::clone(&self.values);
        let r = Rc::clone(&row.values);
        let (ia, ir) = (self.id, row.id);
        Ok(self.emit(
            out,
            vec![m, n],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                let mut gr = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[i * n + j] * r[j];
                        gr[j] += g[i * n + j] * a[i * n + j];
                    }
                }
                vec![(ia, ga), (ir, gr)]
            }),
        ))
    }

    /// Multiply row i of a matrix by col\[i\].
    pub fn scale_rows(&self, col: &Tensor) -> Result<Tensor> {
        self.check_same_tape(col, "scale_rows")?;
        let (m, n) = self.dims2("scale_rows")?;
        if col.shape != [m] {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: self.shape.clone(),
                right: col.shape.clone(),
            });
        }
        let mut out = self.values.as_ref().clone();
        for (row, &c) in out.chunks_mut(n).zip(col.values.iter()) {
            for v in row {
                *v *= c;
            }
        }
        let a = Rc::clone(&self.values);
        let c = Rc::clone(&col.values);
        let (ia, ic) = (self.id, col.id);
        Ok(self.emit(
            out,
            vec![m, n],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * n];
                let mut gc = vec![0.0; m];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let ar = &a[i * n..(i + 1) * n];
                    linalg::axpy(c[i], gr, &mut ga[i * n..(i + 1) * n]);
                    gc[i] = linalg::dot(gr, ar);
                }
                vec![(ia, ga), (ic, gc)]
            }),
        ))
    }

    /// Sum each row of a matrix into a 1-D tensor of length rows.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (m, n) = self.dims2("row_sums")?;
        let out: Vec<f64> = self.values.chunks(n).map(|r| r.iter().sum()).collect();
        let src = self.id;
        Ok(self.emit(
            out,
            vec![m],
            Box::new(move |g| {
                let mut ga = Vec::with_capacity(m * n);
                for &gi in g {
                    ga.extend(std::iter::repeat_n(gi, n));
                }
                vec![(src, ga)]
            }),
        ))
    }

    /// Row-wise softmax with the row max subtracted before exponentiation.
    /// A 1-D tensor is treated as a single row.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let n = self.cols();
        let m = self.rows();
        let mut out = vec![0.0; m * n];
        for (orow, xrow) in out.chunks_mut(n).zip(self.values.chunks(n)) {
            let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(xrow) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let y = Rc::new(out.clone());
        let src = self.id;
        Ok(self.emit(
            out,
            self.shape.clone(),
            Box::new(move |g| {
                let mut gx = vec![0.0; y.len()];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gy = linalg::dot(gr, yr);
                    for ((gxj, &yj), &gj) in gx[i * n..(i + 1) * n].iter_mut().zip(yr).zip(gr) {
                        *gxj = yj * (gj - gy);
                    }
                }
                vec![(src, gx)]
            }),
        ))
    }

    /// Row-wise log-softmax, fused for numerical stability.
    pub fn log_softmax_rows(&self) -> Result<Tensor> {
        let n = self.cols();
        let m = self.rows();
        let mut out = vec![0.0; m * n];
        for (orow, xrow) in out.chunks_mut(n).zip(self.values.chunks(n)) {
            let mx = xrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = xrow.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln() + mx;
            for (o, &x) in orow.iter_mut().zip(xrow) {
                *o = x - lse;
            }
        }
        let y = Rc::new(out.clone());
        let src = self.id;
        Ok(self.emit(
            out,
            self.shape.clone(),
            Box::new(move |g| {
                let mut gx = vec![0.0; y.len()];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for ((gxj, &yj), &gj) in gx[i * n..(i + 1) * n].iter_mut().zip(yr).zip(gr) {
                        *gxj = gj - yj.exp() * gsum;
                    }
                }
                vec![(src, gx)]
            }),
        ))
    }

    /// Inclusive prefix sum of a 1-D tensor.
    pub fn cumsum(&self) -> Result<Tensor> {
        if self.shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cumsum",
                left: self.shape.clone(),
                right: vec![self.len()],
            });
        }
        let mut out = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &x in self.values.iter() {
            acc += x;
            out.push(acc);
        }
        let src = self.id;
        let n = self.len();
        Ok(self.emit(
            out,
            self.shape.clone(),
            Box::new(move |g| {
                // d out_t / d x_τ = 1 for τ ≤ t, so grads flow as a suffix sum.
                let mut gx = vec![0.0; n];
                let mut acc = 0.0;
                for t in (0..n).rev() {
                    acc += g[t];
                    gx[t] = acc;
                }
                vec![(src, gx)]
            }),
        ))
    }

    /// Select rows of a table by index (embedding lookup); the backward rule
    /// scatter-adds into the table.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let (v, d) = self.dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange {
                token: bad as u32,
                vocab: v,
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&self.values[i * d..(i + 1) * d]);
        }
        let idx = indices.to_vec();
        let src = self.id;
        Ok(self.emit(
            out,
            vec![indices.len(), d],
            Box::new(move |g| {
                let mut gt = vec![0.0; v * d];
                for (r, &i) in idx.iter().enumerate() {
                    linalg::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                }
                vec![(src, gt)]
            }),
        ))
    }

    /// out\[i\] = self\[i, cols\[i\]\]; picks one entry per row.
    pub fn pick(&self, cols: &[usize]) -> Result<Tensor> {
        let (m, n) = self.dims2("pick")?;
        if cols.len() != m {
            return Err(Error::ShapeMismatch {
                op: "pick",
                left: vec![m],
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::TokenOutOfRange {
                token: bad as u32,
                vocab: n,
            });
        }
        let out: Vec<f64> = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| self.values[i * n + c])
            .collect();
        let cols = cols.to_vec();
        let src = self.id;
        Ok(self.emit(
            out,
            vec![m],
            Box::new(move |g| {
                let mut gm = vec![0.0; m * n];
                for (i, &c) in cols.iter().enumerate() {
                    gm[i * n + c] = g[i];
                }
                vec![(src, gm)]
            }),
        ))
    }

    pub fn slice_rows(&self, from: usize, to: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_rows")?;
        if from >= to || to > m {
            return Err(Error::InvalidArg(format!(
                "slice_rows {from}..{to} out of range for {m} rows"
            )));
        }
        let out = self.values[from * n..to * n].to_vec();
        let src = self.id;
        Ok(self.emit(
            out,
            vec![to - from, n],
            Box::new(move |g| {
                let mut gm = vec![0.0; m * n];
                gm[from * n..to * n].copy_from_slice(g);
                vec![(src, gm)]
            }),
        ))
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor> {
        let (m, n) = self.dims2("slice_cols")?;
        if from >= to || to > n {
            return Err(Error::InvalidArg(format!(
                "slice_cols {from}..{to} out of range for {n} cols"
            )));
        }
        let w = to - from;
        let mut out = Vec::with_capacity(m * w);
        for row in self.values.chunks(n) {
            out.extend_from_slice(&row[from..to]);
        }
        let src = self.id;
        Ok(self.emit(
            out,
            vec![m, w],
            Box::new(move |g| {
                let mut gm = vec![0.0; m * n];
                for i in 0..m {
                    gm[i * n + from..i * n + to].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![(src, gm)]
            }),
        ))
    }
}

/// Stack tensors vertically; 1-D inputs count as single rows. All inputs must
/// share a column count and a tape.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArg("concat_rows of zero tensors".into()))?;
    let n = first.cols();
    let mut values = Vec::new();
    let mut spans = Vec::with_capacity(parts.len());
    let mut rows = 0usize;
    for p in parts {
        first.check_same_tape(p, "concat_rows")?;
        if p.cols() != n {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                left: vec![first.rows(), n],
                right: p.shape().to_vec(),
            });
        }
        spans.push((p.id, p.len()));
        rows += p.rows();
        values.extend_from_slice(p.values());
    }
    let spans_b = spans.clone();
    let id = first.tape.push(Some(Box::new(move |g: &[f64]| {
        let mut out = Vec::with_capacity(spans_b.len());
        let mut off = 0;
        for &(src, len) in &spans_b {
            out.push((src, g[off..off + len].to_vec()));
            off += len;
        }
        out
    })));
    Ok(Tensor {
        tape: first.tape.clone(),
        id,
        shape: vec![rows, n],
        values: Rc::new(values),
    })
}

/// Stack tensors horizontally (same row count each).
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArg("concat_cols of zero tensors".into()))?;
    let m = first.rows();
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let total: usize = widths.iter().sum();
    for p in parts {
        first.check_same_tape(p, "concat_cols")?;
        if p.rows() != m {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let mut values = vec![0.0; m * total];
    let mut off = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        for i in 0..m {
            values[i * total + off..i * total + off + w]
                .copy_from_slice(&p.values()[i * w..(i + 1) * w]);
        }
        off += w;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let id = first.tape.push(Some(Box::new(move |g: &[f64]| {
        let mut out = Vec::with_capacity(ids.len());
        let mut off = 0;
        for (&src, &w) in ids.iter().zip(&widths) {
            let mut gp = vec![0.0; m * w];
            for i in 0..m {
                gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
            }
            out.push((src, gp));
            off += w;
        }
        out
    })));
    Ok(Tensor {
        tape: first.tape.clone(),
        id,
        shape: vec![m, total],
        values: Rc::new(values),
    })
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tape, Tensor};
    use super::*;
    use crate::autodiff::gradcheck::{central_diff, max_abs_rel_err};
    use crate::rng::{normal, stream};

    /// Check one op's full gradient against central differences at several
    /// random points. `build` maps a leaf to the op output; the output is
    /// turned into a scalar with fixed random weights so every output entry
    /// contributes.
    fn fd_check(
        label: &str,
        shape: &[usize],
        build: impl Fn(&Tensor) -> Tensor,
        lo: f64,
        hi: f64,
    ) {
        let n: usize = shape.iter().product();
        for trial in 0..10 {
            let mut rng = stream(42, label, trial);
            use rand::Rng;
            let x0: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            let out_len = {
                let tape = Tape::new();
                build(&tape.leaf(x0.clone(), shape).unwrap()).len()
            };
            let w: Vec<f64> = (0..out_len).map(|_| normal(&mut rng)).collect();
            let f = |xs: &[f64]| {
                let tape = Tape::new();
                let x = tape.leaf(xs.to_vec(), shape).unwrap();
                build(&x).weighted_sum(&w).unwrap().item().unwrap()
            };
            let numeric = central_diff(&f, &x0, 1e-5);
            let tape = Tape::new();
            let x = tape.leaf(x0, shape).unwrap();
            let g = backward(&build(&x).weighted_sum(&w).unwrap()).unwrap();
            let err = max_abs_rel_err(&g.wrt(&x), &numeric);
            assert!(err <= 1e-4, "{label} trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        fd_check("exp", &[5], |x| x.exp(), -2.0, 2.0);
        fd_check("ln", &[5], |x| x.ln(), 0.2, 3.0);
        fd_check("sqrt", &[5], |x| x.sqrt(), 0.2, 3.0);
        fd_check("square", &[5], |x| x.square(), -2.0, 2.0);
        fd_check("abs", &[5], |x| x.abs(), 0.1, 2.0);
        fd_check("abs-neg", &[5], |x| x.abs(), -2.0, -0.1);
        fd_check("tanh", &[5], |x| x.tanh(), -2.0, 2.0);
        fd_check("sigmoid", &[5], |x| x.sigmoid(), -4.0, 4.0);
        fd_check("relu", &[5], |x| x.relu(), 0.1, 2.0);
        fd_check("recip", &[5], |x| x.recip(), 0.3, 2.0);
        fd_check("scale", &[5], |x| x.scale(-1.7), -2.0, 2.0);
        fd_check("add_scalar", &[5], |x| x.add_scalar(0.9), -2.0, 2.0);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        // Both operands derived from one leaf so a single FD sweep covers both
        // partials: split a 2n leaf into halves via slicing.
        fd_check(
            "add2",
            &[2, 6],
            |x| {
                let a = x.slice_cols(0, 3).unwrap();
                let b = x.slice_cols(3, 6).unwrap();
                a.add(&b).unwrap()
            },
            -2.0,
            2.0,
        );
        fd_check(
            "mul2",
            &[2, 6],
            |x| {
                let a = x.slice_cols(0, 3).unwrap();
                let b = x.slice_cols(3, 6).unwrap();
                a.mul(&b).unwrap()
            },
            -2.0,
            2.0,
        );
        fd_check(
            "div2",
            &[2, 6],
            |x| {
                let a = x.slice_cols(0, 3).unwrap();
                let b = x.slice_cols(3, 6).unwrap();
                a.div(&b).unwrap()
            },
            0.4,
            2.0,
        );
        fd_check(
            "sub2",
            &[2, 6],
            |x| {
                let a = x.slice_cols(0, 3).unwrap();
                let b = x.slice_cols(3, 6).unwrap();
                a.sub(&b).unwrap()
            },
            -2.0,
            2.0,
        );
    }

    #[test]
    fn structured_ops_match_finite_differences() {
        fd_check("softmax", &[3, 4], |x| x.softmax_rows().unwrap(), -3.0, 3.0);
        fd_check(
            "log_softmax",
            &[3, 4],
            |x| x.log_softmax_rows().unwrap(),
            -3.0,
            3.0,
        );
        fd_check("cumsum", &[6], |x| {
            x.reshape(&[6]).unwrap().cumsum().unwrap()
        }, -2.0, 2.0);
        fd_check("transpose", &[3, 4], |x| x.transpose().unwrap(), -2.0, 2.0);
        fd_check("row_sums", &[3, 4], |x| x.row_sums().unwrap(), -2.0, 2.0);
        fd_check("sum", &[7], |x| x.sum(), -2.0, 2.0);
        fd_check("mean", &[7], |x| x.mean(), -2.0, 2.0);
        fd_check(
            "matmul",
            &[4, 6],
            |x| {
                let a = x.slice_cols(0, 3).unwrap(); // 4x3
                let b = x.slice_cols(3, 6).unwrap().transpose().unwrap(); // 3x4... 4x3 -> 3x4
                a.matmul(&b).unwrap()
            },
            -2.0,
            2.0,
        );
        fd_check(
            "scale_rows",
            &[3, 5],
            |x| {
                let m = x.slice_cols(0, 4).unwrap();
                let c = x.slice_cols(4, 5).unwrap().reshape(&[3]).unwrap();
                m.scale_rows(&c).unwrap()
            },
            0.3,
            2.0,
        );
        fd_check(
            "add_row",
            &[4, 3],
            |x| {
                let m = x.slice_rows(0, 3).unwrap();
                let b = x.slice_rows(3, 4).unwrap().reshape(&[3]).unwrap();
                m.add_row(&b).unwrap()
            },
            -2.0,
            2.0,
        );
        fd_check(
            "mul_row",
            &[4, 3],
            |x| {
                let m = x.slice_rows(0, 3).unwrap();
                let r = x.slice_rows(3, 4).unwrap().reshape(&[3]).unwrap();
                m.mul_row(&r).unwrap()
            },
            0.3,
            2.0,
        );
        fd_check(
            "gather_rows",
            &[4, 3],
            |x| x.gather_rows(&[2, 0, 2, 1, 3]).unwrap(),
            -2.0,
            2.0,
        );
        fd_check("pick", &[4, 3], |x| x.pick(&[1, 0, 2, 2]).unwrap(), -2.0, 2.0);
        fd_check(
            "concat",
            &[4, 4],
            |x| {
                let a = x.slice_rows(0, 2).unwrap();
                let b = x.slice_rows(2, 4).unwrap();
                let v = concat_rows(&[&a, &b]).unwrap();
                let h = concat_cols(&[&a, &b]).unwrap();
                concat_cols(&[&v, &concat_rows(&[&h.slice_cols(0, 4).unwrap(), &h.slice_cols(4, 8).unwrap()]).unwrap()])
                    .unwrap()
            },
            -2.0,
            2.0,
        );
    }

    #[test]
    fn l1_of_softmax_matmul_matches_finite_differences() {
        // loss = ‖softmax_rows(W)·u − v‖₁ for a random 4×4 W.
        let mut rng = stream(5, "l1-softmax", 0);
        let u: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let v: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let w0: Vec<f64> = (0..16).map(|_| normal(&mut rng)).collect();
        let build = |ws: &[f64]| -> (f64, Option<Vec<f64>>) {
            let tape = Tape::new();
            let w = tape.matrix(ws.to_vec(), 4, 4).unwrap();
            let uv = tape.matrix(u.clone(), 4, 1).unwrap();
            let vv = tape.matrix(v.clone(), 4, 1).unwrap();
            let loss = w
                .softmax_rows()
                .unwrap()
                .matmul(&uv)
                .unwrap()
                .sub(&vv)
                .unwrap()
                .abs()
                .sum();
            let l = loss.item().unwrap();
            let g = backward(&loss).unwrap().wrt(&w);
            (l, Some(g))
        };
        let numeric = central_diff(|ws| build(ws).0, &w0, 1e-5);
        let analytic = build(&w0).1.unwrap();
        let err = max_abs_rel_err(&analytic, &numeric);
        assert!(err <= 1e-5, "rel err {err}");
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.vector(vec![1.0, 2.0]);
        let b = tape.vector(vec![1.0, 2.0, 3.0]);
        match a.add(&b) {
            Err(crate::error::Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|t| t.shape().to_vec())),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_extreme_logits() {
        let tape = Tape::new();
        let x = tape.matrix(vec![1e6, 0.0, -1e6, 3.0, 2.0, 1.0], 2, 3).unwrap();
        let y = x.softmax_rows().unwrap();
        for row in y.values().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|p| p.is_finite()));
        }
    }

    #[test]
    fn sigmoid_is_finite_at_extreme_arguments() {
        let tape = Tape::new();
        let x = tape.vector(vec![1e9, -1e9, 700.0, -700.0]);
        let y = x.sigmoid();
        assert!(y.values().iter().all(|v| v.is_finite()));
        assert!((y.values()[0] - 1.0).abs() < 1e-12);
        assert!(y.values()[1].abs() < 1e-12);
    }
}
