//! Trainable-model plumbing: named parameter stores, linear and 1-D
//! convolution layers, Adam, and learning-rate schedules.
//!
//! Parameters live outside any tape. Each training step binds them as fresh
//! leaves ([`ParamSet::bind`]), builds the loss, runs backward, and hands the
//! leaf gradients to [`Adam::step`].

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg;

/// Index of a parameter within its [`ParamSet`].
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An ordered, named collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate parameter {name}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "ParamSet::add",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        Ok(id)
    }

    /// Uniform init in ±sqrt(1/fan_in), the usual default for dense layers.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        use rand::Rng;
        let a = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    /// Bind every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &Tape) -> BoundParams {
        let leaves = self
            .params
            .iter()
            .map(|p| {
                tape.leaf(p.data.clone(), &p.shape)
                    .expect("stored shapes are consistent")
            })
            .collect();
        BoundParams { leaves }
    }
}

/// Tape leaves for one training step, index-aligned with the [`ParamSet`].
pub struct BoundParams {
    leaves: Vec<Tensor>,
}

impl BoundParams {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.leaves[id]
    }
}

/// Accumulates gradients across utterances/batches before one optimizer step.
#[derive(Default)]
pub struct GradAccum {
    by_param: HashMap<ParamId, Vec<f64>>,
}

impl GradAccum {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pull every bound parameter's gradient out of a backward result.
    pub fn absorb(&mut self, grads: &mut Gradients, bound: &BoundParams) {
        for (id, leaf) in bound.leaves.iter().enumerate() {
            if grads.reached(leaf) {
                let g = grads.take(leaf);
                match self.by_param.get_mut(&id) {
                    Some(acc) => linalg::axpy(1.0, &g, acc),
                    None => {
                        self.by_param.insert(id, g);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.by_param.values_mut() {
            for v in g {
                *v *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn into_sorted(self) -> Vec<(ParamId, Vec<f64>)> {
        let mut v: Vec<_> = self.by_param.into_iter().collect();
        v.sort_by_key(|(id, _)| *id);
        v
    }
}

/// Learning-rate schedules.
#[derive(Debug, Clone)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup over `warmup` steps, then polynomial decay to zero at
    /// `total` steps.
    WarmupPoly {
        base: f64,
        warmup: usize,
        total: usize,
        power: f64,
    },
}

impl LrSchedule {
    /// Warmup over 1% of the budget, then linear decay — the transformer
    /// training default.
    pub fn warmup_linear(base: f64, total: usize) -> Self {
        LrSchedule::WarmupPoly {
            base,
            warmup: (total / 100).max(1),
            total,
            power: 1.0,
        }
    }

    /// Rate for 1-based step `t`.
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupPoly {
                base,
                warmup,
                total,
                power,
            } => {
                if t <= warmup {
                    base * t as f64 / warmup as f64
                } else if t >= total {
                    0.0
                } else {
                    let frac = (total - t) as f64 / (total - warmup) as f64;
                    base * frac.powf(power)
                }
            }
        }
    }
}

/// Adam with bias correction; state is keyed by parameter id.
pub struct Adam {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// First-moment estimate for a parameter; lets callers inspect the
    /// gradient an update actually saw (after one step m = (1−β₁)·g).
    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.m.get(&id).map(Vec::as_slice)
    }

    /// Apply one update from accumulated gradients.
    pub fn step(&mut self, params: &mut ParamSet, grads: GradAccum) {
        self.step += 1;
        let lr = self.schedule.at(self.step);
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads.into_sorted() {
            let p = params.get_mut(id);
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Dense layer y = x·W + b with W stored \[in, out\].
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = params.add_uniform(&format!("{name}.w"), &[dim_in, dim_out], dim_in, rng)?;
        let b = params.add_zeros(&format!("{name}.b"), &[dim_out])?;
        Ok(Self {
            w,
            b,
            dim_in,
            dim_out,
        })
    }

    pub fn forward(&self, bound: &BoundParams, x: &Tensor) -> Result<Tensor> {
        x.matmul(bound.get(self.w))?.add_row(bound.get(self.b))
    }
}

/// Same-padded 1-D convolution over a time-major input \[T, c_in\].
/// Weights are stored \[c_out, k·c_in\]; the kernel size must be odd.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

impl Conv1d {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidArg(format!(
                "conv kernel must be odd for same padding, got {k}"
            )));
        }
        let w = params.add_uniform(&format!("{name}.w"), &[c_out, k * c_in], k * c_in, rng)?;
        let b = params.add_zeros(&format!("{name}.b"), &[c_out])?;
        Ok(Self {
            w,
            b,
            c_in,
            c_out,
            k,
        })
    }

    pub fn forward(&self, bound: &BoundParams, x: &Tensor) -> Result<Tensor> {
        conv1d(x, bound.get(self.w), bound.get(self.b), self.k)
    }
}

/// Fused same-padded conv1d: x \[T, c_in\] ∗ w \[c_out, k·c_in\] + b \[c_out\].
///
/// Implemented by gathering each frame's ±k/2 window into an \[T, k·c_in\]
/// patch matrix so forward and both weight/input backward rules are plain
/// matrix products.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, k: usize) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let (t_len, c_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, kc) = (w.shape()[0], w.shape()[1]);
    if kc != k * c_in || k % 2 == 0 || b.shape() != [c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv1d",
            left: vec![k, c_in],
            right: vec![kc],
        });
    }
    let pad = k / 2;
    let gather = |xs: &[f64]| -> Vec<f64> {
        let mut patches = vec![0.0; t_len * kc];
        for t in 0..t_len {
            for dt in 0..k {
                let src = t as isize + dt as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                patches[t * kc + dt * c_in..t * kc + (dt + 1) * c_in]
                    .copy_from_slice(&xs[src * c_in..(src + 1) * c_in]);
            }
        }
        patches
    };
    let patches = gather(x.values());
    let mut out = linalg::matmul_a_bt(&patches, w.values(), t_len, kc, c_out);
    for row in out.chunks_mut(c_out) {
        linalg::axpy(1.0, b.values(), row);
    }
    let wv = w.values().to_vec();
    let tape = x.tape().clone();
    tape.custom_op(&[x, w, b], out, vec![t_len, c_out], move |g: &[f64]| {
        let mut gb = vec![0.0; c_out];
        for row in g.chunks(c_out) {
            linalg::axpy(1.0, row, &mut gb);
        }
        // d patches = g · w, then scatter each window back onto its frames.
        let gpatch = linalg::matmul(g, &wv, t_len, c_out, kc);
        let mut gx = vec![0.0; t_len * c_in];
        for t in 0..t_len {
            for dt in 0..k {
                let src = t as isize + dt as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                linalg::axpy(
                    1.0,
                    &gpatch[t * kc + dt * c_in..t * kc + (dt + 1) * c_in],
                    &mut gx[src * c_in..(src + 1) * c_in],
                );
            }
        }
        // dW = gᵀ · patches.
        let gw = linalg::matmul_at_b(g, &patches, t_len, c_out, kc);
        vec![Some(gx), Some(gw), Some(gb)]
    })
}
