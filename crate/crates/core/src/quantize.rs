//! Vector quantization: plain k-means and a frozen-prefix extension that
//! grows an existing codebook without moving its rows.
//!
//! The extension runs in two phases: a fresh k-means at the larger size, then
//! a selection step that keeps the fresh centroids farthest (on average) from
//! every old centroid as "free" rows appended after the old ones, followed by
//! Lloyd sweeps that reassign every point but only move the free rows. Old
//! vocabulary IDs therefore keep their meaning bit-for-bit.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::sq_dist;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    /// Rows below this index are copied from an older codebook and never move.
    pub frozen_prefix: usize,
    centroids: Vec<f64>,
    /// Inertia after each Lloyd sweep of the most recent fit.
    pub inertia_history: Vec<f64>,
}

impl Codebook {
    pub fn new(dim: usize, centroids: Vec<f64>, frozen_prefix: usize) -> Result<Self> {
        if dim == 0 || !centroids.len().is_multiple_of(dim) {
            return Err(Error::InvalidArg(format!(
                "centroid data of length {} is not a multiple of dim {dim}",
                centroids.len()
            )));
        }
        if frozen_prefix > centroids.len() / dim {
            return Err(Error::InvalidArg(format!(
                "frozen prefix {frozen_prefix} exceeds codebook size"
            )));
        }
        Ok(Self {
            dim,
            frozen_prefix,
            centroids,
            inertia_history: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Nearest centroid (ties to the lowest index) and its squared distance.
    pub fn assign_one(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for i in 0..self.k() {
            let d = sq_dist(x, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KmeansOpts {
    pub max_iters: usize,
    /// Stop when inertia improves by less than this relative amount.
    pub tol: f64,
}

impl Default for KmeansOpts {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-7,
        }
    }
}

fn check_features(features: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::InvalidArg(format!(
            "feature data of length {} is not a multiple of dim {dim}",
            features.len()
        )));
    }
    let n = features.len() / dim;
    if n < k {
        return Err(Error::NotEnough {
            what: "points for k-means",
            requested: k,
            available: n,
        });
    }
    if k == 0 {
        return Err(Error::InvalidArg("k must be positive".into()));
    }
    Ok(n)
}

fn row(features: &[f64], dim: usize, i: usize) -> &[f64] {
    &features[i * dim..(i + 1) * dim]
}

/// k-means++ seeding: first centroid uniform, the rest sampled proportional
/// to squared distance from the nearest centroid chosen so far.
fn plus_plus_init(
    features: &[f64],
    dim: usize,
    n: usize,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(features, dim, first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(row(features, dim, i), &centroids[..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = c * dim;
        centroids.extend_from_slice(row(features, dim, pick));
        for (i, slot) in d2.iter_mut().enumerate() {
            let d = sq_dist(row(features, dim, i), &centroids[start..start + dim]);
            if d < *slot {
                *slot = d;
            }
        }
    }
    centroids
}

/// One assignment pass; returns (assignments, inertia).
fn assign_all(features: &[f64], dim: usize, n: usize, cb: &Codebook) -> (Vec<usize>, f64) {
    let mut assign = vec![0usize; n];
    let mut inertia = 0.0;
    for i in 0..n {
        let (a, d) = cb.assign_one(row(features, dim, i));
        assign[i] = a;
        inertia += d;
    }
    (assign, inertia)
}

/// Lloyd iterations updating centroids at index ≥ `first_movable`. Empty
/// movable clusters are reseeded to the point farthest from its currently
/// assigned centroid when `reseed_empty` is set, otherwise left in place.
fn lloyd(
    features: &[f64],
    dim: usize,
    n: usize,
    cb: &mut Codebook,
    first_movable: usize,
    reseed_empty: bool,
    opts: KmeansOpts,
) {
    let k = cb.k();
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..opts.max_iters {
        let (assign, inertia) = assign_all(features, dim, n, cb);
        cb.inertia_history.push(inertia);
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            crate::linalg::axpy(1.0, row(features, dim, i), &mut sums[a * dim..(a + 1) * dim]);
        }
        for c in first_movable..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in cb.centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s * inv;
                }
            } else if reseed_empty {
                // Farthest point from its own centroid becomes the new seed.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(features, dim, a), cb.centroid(assign[a]));
                        let db = sq_dist(row(features, dim, b), cb.centroid(assign[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .expect("n >= k >= 1");
                let src = row(features, dim, far).to_vec();
                cb.centroids[c * dim..(c + 1) * dim].copy_from_slice(&src);
            }
        }
        if prev_inertia.is_finite() && prev_inertia - inertia <= opts.tol * prev_inertia.max(1e-300)
        {
            break;
        }
        prev_inertia = inertia;
    }
}

/// Plain k-means with k-means++ seeding.
pub fn kmeans_fit(
    features: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    opts: KmeansOpts,
) -> Result<Codebook> {
    let n = check_features(features, dim, k)?;
    let mut r = rng::stream(seed, "kmeans", 0);
    let centroids = plus_plus_init(features, dim, n, k, &mut r);
    let mut cb = Codebook::new(dim, centroids, 0)?;
    lloyd(features, dim, n, &mut cb, 0, true, opts);
    Ok(cb)
}

/// Grow `old` to `k_new` rows without moving its existing rows.
pub fn fc_kmeans_fit(
    features: &[f64],
    dim: usize,
    old: &Codebook,
    k_new: usize,
    seed: u64,
    opts: KmeansOpts,
) -> Result<Codebook> {
    if dim != old.dim {
        return Err(Error::ShapeMismatch {
            op: "fc_kmeans_fit",
            left: vec![dim],
            right: vec![old.dim],
        });
    }
    let k_old = old.k();
    if k_new <= k_old {
        return Err(Error::InvalidArg(format!(
            "extension size {k_new} must exceed existing codebook size {k_old}"
        )));
    }
    let n = check_features(features, dim, k_new)?;

    // Phase I: unconstrained clustering at the target size.
    let fresh = kmeans_fit(features, dim, k_new, seed ^ 0xfc, opts)?;

    // Select the fresh centroids farthest on average from the old codebook.
    let mut scored: Vec<(usize, f64)> = (0..k_new)
        .map(|j| {
            let mean_d2 = (0..k_old)
                .map(|i| sq_dist(fresh.centroid(j), old.centroid(i)))
                .sum::<f64>()
                / k_old as f64;
            (j, mean_d2)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut centroids = old.centroids.clone();
    for &(j, _) in scored.iter().take(k_new - k_old) {
        centroids.extend_from_slice(fresh.centroid(j));
    }

    // Phase II: Lloyd sweeps that only move the appended rows. Empty free
    // rows stay in place so inertia cannot increase between sweeps.
    let mut cb = Codebook::new(dim, centroids, k_old)?;
    lloyd(features, dim, n, &mut cb, k_old, false, opts);
    for w in cb.inertia_history.windows(2) {
        log::debug!("codebook extension sweep inertia {} -> {}", w[0], w[1]);
    }
    Ok(cb)
}

/// Nearest-centroid labels for a flat feature matrix.
pub fn assign(features: &[f64], dim: usize, cb: &Codebook) -> Result<Vec<u32>> {
    if dim != cb.dim || !features.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch {
            op: "assign",
            left: vec![features.len() / dim.max(1), dim],
            right: vec![cb.k(), cb.dim],
        });
    }
    Ok((0..features.len() / dim)
        .map(|i| cb.assign_one(row(features, dim, i)).0 as u32)
        .collect())
}
