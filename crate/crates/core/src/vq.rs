//! Vector quantization of token embeddings.
//!
//! A [`Codebook`] holds `G` independent tables of `K` centroids, one per
//! equal-width slice of the embedding ("grouped" quantization; `G = 1` is the
//! vanilla case). Codebooks are initialised with Lloyd's k-means and then
//! tracked online with exponential moving averages. Only centroid indices
//! travel between devices, so a token costs `G·⌈log₂K⌉` bits.
//!
//! This module also fits the Gaussian model of quantization residuals
//! ([`ResidualStats`]) and draws the training-time noise added to quantized
//! embeddings ([`apply_noise`]).

use rand::Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Precision, Tensor};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"AVQ1";

/// `⌈log₂ k⌉`, the index width for a codebook of `k` entries.
pub fn ceil_log2(k: usize) -> u32 {
    assert!(k >= 1, "codebook size must be positive");
    usize::BITS - (k - 1).leading_zeros()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub smoothing: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            decay: 0.99,
            smoothing: 1e-5,
        }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::Precondition(format!(
                "EMA decay must lie in (0, 1), got {}",
                self.decay
            )));
        }
        if self.smoothing <= 0.0 {
            return Err(Error::Precondition("EMA smoothing must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    layer: u32,
    groups: usize,
    size: usize,
    sub_dim: usize,
    /// Group-major, index-major, dimension-minor.
    centroids: Vec<f32>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    ema: EmaConfig,
}

/// Indices selected for a batch of tokens, `groups` per token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedTokens {
    pub layer: u32,
    pub tokens: usize,
    pub groups: usize,
    pub index_bits: u32,
    /// Token-major, group-minor.
    pub indices: Vec<u32>,
}

impl QuantizedTokens {
    pub fn bits_per_token(&self) -> u64 {
        self.groups as u64 * self.index_bits as u64
    }

    /// Size of this payload when bit-packed on the wire.
    pub fn payload_bits(&self) -> u64 {
        self.tokens as u64 * self.bits_per_token()
    }

    pub fn token(&self, t: usize) -> &[u32] {
        &self.indices[t * self.groups..(t + 1) * self.groups]
    }
}

impl Codebook {
    /// Builds a codebook from explicit centroids. EMA accumulators start at
    /// unit mass on every entry.
    pub fn from_centroids(
        layer: u32,
        groups: usize,
        size: usize,
        sub_dim: usize,
        centroids: Vec<f32>,
        ema: EmaConfig,
    ) -> Result<Self> {
        ema.validate()?;
        if groups == 0 || size == 0 || sub_dim == 0 {
            return Err(Error::Precondition("codebook dimensions must be positive".into()));
        }
        if centroids.len() != groups * size * sub_dim {
            return Err(Error::dim(
                "codebook",
                format!("{} centroid values for {groups}x{size}x{sub_dim}", centroids.len()),
            ));
        }
        if centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain("non-finite centroid".into()));
        }
        Ok(Codebook {
            layer,
            groups,
            size,
            sub_dim,
            ema_counts: vec![1.0; groups * size],
            ema_sums: centroids.iter().map(|&c| c as f64).collect(),
            centroids,
            ema,
        })
    }

    /// Codebook whose single group contains exactly the given rows.
    pub fn from_rows(layer: u32, rows: &Tensor) -> Result<Self> {
        let (k, d) = rows.dims();
        let centroids = rows.data().iter().map(|&v| v as f32).collect();
        Codebook::from_centroids(layer, 1, k, d, centroids, EmaConfig::default())
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }
    pub fn groups(&self) -> usize {
        self.groups
    }
    pub fn size(&self) -> usize {
        self.size
    }
    pub fn sub_dim(&self) -> usize {
        self.sub_dim
    }
    pub fn dim(&self) -> usize {
        self.groups * self.sub_dim
    }
    pub fn ema_config(&self) -> EmaConfig {
        self.ema
    }
    pub fn index_bits(&self) -> u32 {
        ceil_log2(self.size)
    }
    pub fn bits_per_token(&self) -> u64 {
        self.groups as u64 * self.index_bits() as u64
    }
    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }
    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn centroid(&self, group: usize, index: usize) -> &[f32] {
        let start = (group * self.size + index) * self.sub_dim;
        &self.centroids[start..start + self.sub_dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    /// Per-group Laplace-smoothed counts, `(c + ε)/(n + Kε)·n`.
    pub fn smoothed_counts(&self) -> Vec<f64> {
        let eps = self.ema.smoothing;
        let mut out = vec![0.0; self.ema_counts.len()];
        for g in 0..self.groups {
            let counts = &self.ema_counts[g * self.size..(g + 1) * self.size];
            let n: f64 = counts.iter().sum();
            for (k, &c) in counts.iter().enumerate() {
                out[g * self.size + k] = (c + eps) / (n + self.size as f64 * eps) * n;
            }
        }
        out
    }

    fn nearest(&self, group: usize, v: &[f64]) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for k in 0..self.size {
            let c = self.centroid(group, k);
            let d: f64 = v
                .iter()
                .zip(c)
                .map(|(&a, &b)| {
                    let e = a - b as f64;
                    e * e
                })
                .sum();
            // strict comparison keeps the lowest index on ties
            if d < best.1 {
                best = (k as u32, d);
            }
        }
        best
    }

    fn check_width(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::dim(
                op,
                format!("embedding width {} vs codebook {}", x.cols(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Nearest-centroid indices per token and group, plus the reconstruction.
    pub fn quantize(&self, x: &Tensor) -> Result<(QuantizedTokens, Tensor)> {
        self.check_width(x, "quantize")?;
        let (t, d) = x.dims();
        let mut indices = Vec::with_capacity(t * self.groups);
        let mut recon = Vec::with_capacity(t * d);
        for i in 0..t {
            let row = x.row(i);
            for g in 0..self.groups {
                let (k, _) = self.nearest(g, &row[g * self.sub_dim..(g + 1) * self.sub_dim]);
                indices.push(k);
                recon.extend(self.centroid(g, k as usize).iter().map(|&c| c as f64));
            }
        }
        let q = QuantizedTokens {
            layer: self.layer,
            tokens: t,
            groups: self.groups,
            index_bits: self.index_bits(),
            indices,
        };
        Ok((q, Tensor::matrix(t, d, recon, Precision::F32)?))
    }

    pub fn dequantize(&self, q: &QuantizedTokens) -> Result<Tensor> {
        if q.groups != self.groups {
            return Err(Error::dim(
                "dequantize",
                format!("{} groups vs codebook {}", q.groups, self.groups),
            ));
        }
        if q.tokens == 0 {
            return Err(Error::dim("dequantize", "empty payload"));
        }
        let mut out = Vec::with_capacity(q.tokens * self.dim());
        for t in 0..q.tokens {
            for (g, &k) in q.token(t).iter().enumerate() {
                if k as usize >= self.size {
                    return Err(Error::CorruptIndex {
                        index: k,
                        size: self.size,
                    });
                }
                out.extend(self.centroid(g, k as usize).iter().map(|&c| c as f64));
            }
        }
        Tensor::matrix(q.tokens, self.dim(), out, Precision::F32)
    }

    /// One EMA step from a batch and its assignments, followed by
    /// recomputing every centroid as `sums / smoothed_counts`.
    pub fn ema_update(&mut self, x: &Tensor, q: &QuantizedTokens) -> Result<()> {
        self.check_width(x, "ema_update")?;
        if q.tokens != x.rows() || q.groups != self.groups {
            return Err(Error::dim("ema_update", "assignments do not match batch"));
        }
        let decay = self.ema.decay;
        let sd = self.sub_dim;
        let mut hist = vec![0.0; self.groups * self.size];
        let mut sums = vec![0.0; self.groups * self.size * sd];
        for t in 0..q.tokens {
            let row = x.row(t);
            for (g, &k) in q.token(t).iter().enumerate() {
                let k = k as usize;
                if k >= self.size {
                    return Err(Error::CorruptIndex {
                        index: k as u32,
                        size: self.size,
                    });
                }
                hist[g * self.size + k] += 1.0;
                let base = (g * self.size + k) * sd;
                for j in 0..sd {
                    sums[base + j] += row[g * sd + j];
                }
            }
        }
        for (c, h) in self.ema_counts.iter_mut().zip(&hist) {
            *c = decay * *c + (1.0 - decay) * h;
        }
        for (s, b) in self.ema_sums.iter_mut().zip(&sums) {
            *s = decay * *s + (1.0 - decay) * b;
        }
        let smoothed = self.smoothed_counts();
        for (slot, &n) in smoothed.iter().enumerate() {
            if n <= 0.0 {
                continue;
            }
            for j in 0..sd {
                let v = self.ema_sums[slot * sd + j] / n;
                if v.is_finite() {
                    self.centroids[slot * sd + j] = v as f32;
                }
            }
        }
        Ok(())
    }

    /// Flat little-endian record: magic, layer, G, K, D/G, then centroids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.centroids.len());
        out.extend_from_slice(CODEBOOK_MAGIC);
        for v in [self.layer, self.groups as u32, self.size as u32, self.sub_dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.centroids {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Parses one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 20 || &bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::Format("missing AVQ1 header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (layer, groups, size, sub_dim) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        let n = groups
            .checked_mul(size)
            .and_then(|v| v.checked_mul(sub_dim))
            .ok_or_else(|| Error::Format("codebook header overflow".into()))?;
        let end = 20 + 4 * n;
        if bytes.len() < end {
            return Err(Error::Format(format!(
                "truncated codebook: need {end} bytes, have {}",
                bytes.len()
            )));
        }
        let centroids = bytes[20..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let cb = Codebook::from_centroids(layer, groups, size, sub_dim, centroids, EmaConfig::default())?;
        Ok((cb, end))
    }
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Mean squared distance to the assigned centroid after each assignment
    /// step; the first entry is for the seeding.
    pub distortion: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[f64], dim: usize, centroids: &[f64], k: usize, out: &mut [usize], dists: &mut [f64]) -> bool {
    let mut changed = false;
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best.1 {
                best = (c, d);
            }
        }
        if out[i] != best.0 {
            changed = true;
        }
        out[i] = best.0;
        dists[i] = best.1;
    }
    changed
}

/// Lloyd's algorithm with k-means++ seeding. Empty clusters are reseeded
/// from the point farthest from its centroid. Stops early once assignments
/// no longer change.
pub fn kmeans(points: &[f64], dim: usize, k: usize, iterations: usize, rng: &mut impl Rng) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::dim("kmeans", "point buffer not a multiple of dim"));
    }
    let m = points.len() / dim;
    if k == 0 {
        return Err(Error::Precondition("k must be positive".into()));
    }
    if m < k {
        return Err(Error::InsufficientData(format!("{m} points for {k} clusters")));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    // k-means++ seeding
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    chosen[first] = true;
    centroids.extend_from_slice(point(first));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                if target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..m).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.extend_from_slice(point(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), point(pick)));
        }
    }

    let mut assignments = vec![usize::MAX; m];
    let mut dists = vec![0.0; m];
    assign(points, dim, &centroids, k, &mut assignments, &mut dists);
    let mut distortion = vec![dists.iter().sum::<f64>() / m as f64];

    for _ in 0..iterations {
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        // reseed empty clusters from the farthest points
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..m)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                dists[i] = 0.0;
                counts[c] = 1;
            }
        }
        let mut sums = vec![0.0; k * dim];
        for (i, &a) in assignments.iter().enumerate() {
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(point(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        let changed = assign(points, dim, &centroids, k, &mut assignments, &mut dists);
        distortion.push(dists.iter().sum::<f64>() / m as f64);
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        distortion,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct KMeansOptions {
    pub iterations: usize,
    pub ema: EmaConfig,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            iterations: 25,
            ema: EmaConfig::default(),
        }
    }
}

/// Per-group k-means over `embeddings` (`M × D`) producing a codebook whose
/// EMA accumulators are seeded from the final assignment.
pub fn kmeans_init(
    layer: u32,
    embeddings: &Tensor,
    size: usize,
    groups: usize,
    seed: u64,
    opts: KMeansOptions,
) -> Result<Codebook> {
    opts.ema.validate()?;
    let (m, d) = embeddings.dims();
    if groups == 0 || d % groups != 0 {
        return Err(Error::Precondition(format!("width {d} not divisible by {groups} groups")));
    }
    if m < size {
        return Err(Error::InsufficientData(format!("{m} embeddings for {size} centroids")));
    }
    let sd = d / groups;
    let mut centroids = Vec::with_capacity(groups * size * sd);
    let mut counts = Vec::with_capacity(groups * size);
    let mut sums = Vec::with_capacity(groups * size * sd);
    for g in 0..groups {
        let mut pts = Vec::with_capacity(m * sd);
        for i in 0..m {
            pts.extend_from_slice(&embeddings.row(i)[g * sd..(g + 1) * sd]);
        }
        let mut r = rng::substream(seed, "kmeans", ((layer as u64) << 32) | g as u64);
        let res = kmeans(&pts, sd, size, opts.iterations, &mut r)?;
        let mut c = vec![0.0; size];
        let mut s = vec![0.0; size * sd];
        for (i, &a) in res.assignments.iter().enumerate() {
            c[a] += 1.0;
            for j in 0..sd {
                s[a * sd + j] += pts[i * sd + j];
            }
        }
        centroids.extend(res.centroids.iter().map(|&v| v as f32));
        counts.extend(c);
        sums.extend(s);
    }
    let mut cb = Codebook::from_centroids(layer, groups, size, sd, centroids, opts.ema)?;
    cb.ema_counts = counts;
    cb.ema_sums = sums;
    Ok(cb)
}

// ---------------------------------------------------------------------------
// Commitment loss
// ---------------------------------------------------------------------------

/// `β · Σ (X − sg(X̂))²`; only `X` receives gradient.
pub fn commitment_loss<G: Graph>(g: &mut G, x: &G::V, x_hat: &Tensor, beta: f64) -> Result<G::V> {
    if beta < 0.0 {
        return Err(Error::Precondition(format!("commitment weight {beta} < 0")));
    }
    if g.value(x).shape() != x_hat.shape() {
        return Err(Error::dim("commitment_loss", "X and X̂ shapes differ"));
    }
    let target = g.constant(x_hat.clone());
    let target = g.stop_gradient(&target);
    let diff = g.sub(x, &target)?;
    let ss = g.sum_squares(&diff)?;
    Ok(g.scale(&ss, beta))
}

// ---------------------------------------------------------------------------
// Residual statistics and noise
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CovarianceMode {
    #[default]
    Isotropic,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Covariance {
    Isotropic(f64),
    Diagonal(Vec<f64>),
}

/// Streaming Gaussian fit of residuals `ε = X − X̂` (population moments).
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    layer: u32,
    mode: CovarianceMode,
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ResidualStats {
    pub fn empty(layer: u32, dim: usize, mode: CovarianceMode) -> Self {
        ResidualStats {
            layer,
            mode,
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    /// Rebuilds statistics from stored moments.
    pub fn from_moments(
        layer: u32,
        mode: CovarianceMode,
        count: u64,
        mean: Vec<f64>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        if mean.len() != variances.len() || variances.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Domain("invalid residual moments".into()));
        }
        let m2 = variances.iter().map(|v| v * count as f64).collect();
        Ok(ResidualStats {
            layer,
            mode,
            count,
            mean,
            m2,
        })
    }

    /// Fits statistics from a single batch of at least two tokens.
    pub fn fit(layer: u32, x: &Tensor, x_hat: &Tensor, mode: CovarianceMode) -> Result<Self> {
        if x.rows() < 2 {
            return Err(Error::InsufficientData("residual fit needs at least 2 tokens".into()));
        }
        let mut s = ResidualStats::empty(layer, x.cols(), mode);
        s.accumulate(x, x_hat)?;
        Ok(s)
    }

    /// Merges another batch (Chan et al. pairwise update).
    pub fn accumulate(&mut self, x: &Tensor, x_hat: &Tensor) -> Result<()> {
        if x.shape() != x_hat.shape() || x.cols() != self.mean.len() {
            return Err(Error::dim("residual_stats", "X / X̂ / stats widths differ"));
        }
        let (t, d) = x.dims();
        let mut bmean = vec![0.0; d];
        for i in 0..t {
            for j in 0..d {
                bmean[j] += x.get(i, j) - x_hat.get(i, j);
            }
        }
        for v in &mut bmean {
            *v /= t as f64;
        }
        let mut bm2 = vec![0.0; d];
        for i in 0..t {
            for j in 0..d {
                let e = x.get(i, j) - x_hat.get(i, j) - bmean[j];
                bm2[j] += e * e;
            }
        }
        let (na, nb) = (self.count as f64, t as f64);
        let n = na + nb;
        for j in 0..d {
            let delta = bmean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += bm2[j] + delta * delta * na * nb / n;
        }
        self.count += t as u64;
        Ok(())
    }

    pub fn layer(&self) -> u32 {
        self.layer
    }
    pub fn mode(&self) -> CovarianceMode {
        self.mode
    }
    pub fn count(&self) -> u64 {
        self.count
    }
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn variances(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.m2.len()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect()
    }

    pub fn isotropic_variance(&self) -> f64 {
        let v = self.variances();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn covariance(&self) -> Covariance {
        match self.mode {
            CovarianceMode::Isotropic => Covariance::Isotropic(self.isotropic_variance()),
            CovarianceMode::Diagonal => Covariance::Diagonal(self.variances()),
        }
    }

    /// Per-dimension standard deviations under the configured mode.
    pub fn std_devs(&self) -> Vec<f64> {
        match self.covariance() {
            Covariance::Isotropic(v) => vec![v.sqrt(); self.dim()],
            Covariance::Diagonal(v) => v.iter().map(|x| x.sqrt()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Training,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub enabled: bool,
    /// Mixed into every draw's key; callers vary it per step and sample.
    pub stream_key: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Precondition(format!("noise λ={} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

/// `X̃ = X̂ + λ·ξ` with `ξ ~ N(μ, Σ)` drawn per token and dimension from a
/// counter-based generator keyed by `(stream_key, layer, token, dim)`. Row
/// `i` of `x_hat` is token `first_token + i`.
pub fn apply_noise(
    x_hat: &Tensor,
    stats: &ResidualStats,
    cfg: &NoiseConfig,
    mode: RunMode,
    first_token: usize,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.enabled && mode == RunMode::Inference {
        return Err(Error::Mode("noise augmentation is training-only".into()));
    }
    if !cfg.enabled || cfg.lambda == 0.0 {
        return Ok(x_hat.clone());
    }
    if stats.count() == 0 {
        return Err(Error::Lifecycle("residual statistics not fitted".into()));
    }
    if x_hat.cols() != stats.dim() {
        return Err(Error::dim("apply_noise", "width differs from residual stats"));
    }
    let (t, d) = x_hat.dims();
    let sd = stats.std_devs();
    let mu = stats.mean();
    let mut out = x_hat.data().to_vec();
    for i in 0..t {
        for j in 0..d {
            let z = rng::keyed_normal(&[cfg.stream_key, stats.layer() as u64, (first_token + i) as u64, j as u64]);
            out[i * d + j] += cfg.lambda * (mu[j] + sd[j] * z);
        }
    }
    Tensor::matrix(t, d, out, x_hat.precision())
}
