//! Numerical checks for noise-augmented quantization and distributed class
//! tokens.
//!
//! Everything here runs at 64-bit. Gaussian distances use the closed-form
//! 2-Wasserstein distance; the class-token experiment is a Monte Carlo
//! estimate over independently seeded trials.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::attention::{softmax, softmax_perturbation_first_order};
use crate::comms::Sig6;
use crate::error::{Error, Result};
use crate::rng::{stream, substream};
use crate::vq::{CovarianceMode, ResidualStats};

// ---------------------------------------------------------------------------
// Gaussians and W2
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub enum GaussianCov {
    Isotropic(f64),
    Diagonal(Vec<f64>),
    /// Row-major `D×D` symmetric PSD matrix.
    Full(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    mean: Vec<f64>,
    cov: GaussianCov,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, cov: GaussianCov) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::dim("gaussian", "empty mean"));
        }
        match &cov {
            GaussianCov::Isotropic(v) => check_variances(std::slice::from_ref(v))?,
            GaussianCov::Diagonal(v) => {
                if v.len() != d {
                    return Err(Error::dim("gaussian", format!("diagonal has {} entries, mean has {d}", v.len())));
                }
                check_variances(v)?;
            }
            GaussianCov::Full(m) => {
                if m.len() != d * d {
                    return Err(Error::dim("gaussian", format!("matrix has {} entries, need {}", m.len(), d * d)));
                }
                check_symmetric(m, d)?;
                let (eig, _) = jacobi_eigen(m, d)?;
                check_psd_spectrum(&eig, frobenius(m))?;
            }
        }
        Ok(GaussianSpec { mean, cov })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self> {
        Self::new(mean, GaussianCov::Isotropic(variance))
    }

    pub fn diagonal(mean: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        Self::new(mean, GaussianCov::Diagonal(variances))
    }

    pub fn full(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        Self::new(mean, GaussianCov::Full(cov))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
    pub fn cov(&self) -> &GaussianCov {
        &self.cov
    }

    /// Diagonal of the covariance, if the covariance is diagonal.
    fn diag(&self) -> Option<Vec<f64>> {
        match &self.cov {
            GaussianCov::Isotropic(v) => Some(vec![*v; self.dim()]),
            GaussianCov::Diagonal(v) => Some(v.clone()),
            GaussianCov::Full(_) => None,
        }
    }

    pub fn cov_matrix(&self) -> Vec<f64> {
        let d = self.dim();
        match &self.cov {
            GaussianCov::Full(m) => m.clone(),
            _ => {
                let diag = self.diag().unwrap();
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    m[i * d + i] = diag[i];
                }
                m
            }
        }
    }

    /// Same distribution with `extra·I` added to the covariance and `shift`
    /// added to the mean.
    pub fn shifted(&self, shift: &[f64], extra: f64) -> Result<Self> {
        if shift.len() != self.dim() {
            return Err(Error::dim("gaussian_shift", "shift width differs"));
        }
        let mean = self.mean.iter().zip(shift).map(|(a, b)| a + b).collect();
        let cov = match &self.cov {
            GaussianCov::Isotropic(v) => GaussianCov::Isotropic(v + extra),
            GaussianCov::Diagonal(v) => GaussianCov::Diagonal(v.iter().map(|x| x + extra).collect()),
            GaussianCov::Full(m) => {
                let d = self.dim();
                let mut m = m.clone();
                for i in 0..d {
                    m[i * d + i] += extra;
                }
                GaussianCov::Full(m)
            }
        };
        GaussianSpec::new(mean, cov)
    }

    /// Per-axis standard deviations along the covariance eigenbasis, sorted
    /// ascending. For a diagonal covariance these are the coordinate stds.
    pub fn principal_std_devs(&self) -> Result<Vec<f64>> {
        let mut v = match self.diag() {
            Some(d) => d,
            None => jacobi_eigen(&self.cov_matrix(), self.dim())?.0,
        };
        v.sort_by(|a, b| a.total_cmp(b));
        Ok(v.into_iter().map(|x| x.max(0.0).sqrt()).collect())
    }
}

fn check_variances(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Domain("covariance has a negative or non-finite variance".into()));
    }
    Ok(())
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_symmetric(m: &[f64], d: usize) -> Result<()> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("covariance has non-finite entries".into()));
    }
    let tol = 1e-12 * frobenius(m).max(1.0);
    for i in 0..d {
        for j in i + 1..d {
            if (m[i * d + j] - m[j * d + i]).abs() > tol {
                return Err(Error::Domain(format!("covariance is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

fn check_psd_spectrum(eig: &[f64], scale: f64) -> Result<()> {
    let tol = 1e-10 * scale.max(1.0);
    if let Some(min) = eig.iter().cloned().reduce(f64::min) {
        if min < -tol {
            return Err(Error::Domain(format!("covariance is not PSD (eigenvalue {min:e})")));
        }
    }
    Ok(())
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric row-major `d×d` matrix.
/// Returns eigenvalues and a row-major matrix whose columns are the
/// eigenvectors.
pub fn jacobi_eigen(m: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m.len() != d * d {
        return Err(Error::dim("jacobi_eigen", "matrix is not square"));
    }
    let mut a = m.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let tol = JACOBI_TOL * frobenius(m).max(1.0);
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += a[i * d + j] * a[i * d + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) >= tol {
        if sweeps == JACOBI_SWEEPS {
            return Err(Error::Domain("Jacobi eigendecomposition did not converge".into()));
        }
        sweeps += 1;
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..d).map(|i| a[i * d + i]).collect(), v))
}

/// Square root of a symmetric PSD matrix (negative round-off eigenvalues are
/// clamped to zero).
pub fn sqrtm_psd(m: &[f64], d: usize) -> Result<Vec<f64>> {
    let (eig, v) = jacobi_eigen(m, d)?;
    check_psd_spectrum(&eig, frobenius(m))?;
    let s: Vec<f64> = eig.iter().map(|x| x.max(0.0).sqrt()).collect();
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| v[i * d + k] * s[k] * v[j * d + k]).sum();
        }
    }
    Ok(out)
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Bures term `tr(C1 + C2 − 2(C2^½ C1 C2^½)^½)` on the full-matrix path.
pub fn bures_full(c1: &[f64], c2: &[f64], d: usize) -> Result<f64> {
    let r2 = sqrtm_psd(c2, d)?;
    let mut inner = matmul_sq(&matmul_sq(&r2, c1, d), &r2, d);
    // Symmetrise round-off before the second decomposition.
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (inner[i * d + j] + inner[j * d + i]);
            inner[i * d + j] = s;
            inner[j * d + i] = s;
        }
    }
    let (eig, _) = jacobi_eigen(&inner, d)?;
    check_psd_spectrum(&eig, frobenius(&inner))?;
    let cross: f64 = eig.iter().map(|x| x.max(0.0).sqrt()).sum();
    let tr: f64 = (0..d).map(|i| c1[i * d + i] + c2[i * d + i]).sum();
    Ok((tr - 2.0 * cross).max(0.0))
}

/// Squared 2-Wasserstein distance between two Gaussians.
pub fn w2_gaussian(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("w2_gaussian", format!("{} vs {}", a.dim(), b.dim())));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let cov = match (a.diag(), b.diag()) {
        (Some(da), Some(db)) => da.iter().zip(&db).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum(),
        _ => bures_full(&a.cov_matrix(), &b.cov_matrix(), a.dim())?,
    };
    Ok(mean + cov)
}

/// [`w2_gaussian`] forced onto the full-matrix path.
pub fn w2_gaussian_full(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("w2_gaussian", format!("{} vs {}", a.dim(), b.dim())));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(mean + bures_full(&a.cov_matrix(), &b.cov_matrix(), a.dim())?)
}

// ---------------------------------------------------------------------------
// Noise-augmented quantization: X̃ is closer to X than X̂
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Instance {
    pub dim: usize,
    pub lambda: f64,
    pub residual_variance: f64,
    pub mu_norm2: f64,
    /// `W₂²(P_X, P_X̂)`.
    pub w2_quantized: f64,
    /// `W₂²(P_X, P_X̃)`.
    pub w2_noisy: f64,
    /// `(2λ − λ²)‖μ‖²`.
    pub mean_margin: f64,
    /// `|‖m_X−m_X̂‖² − ‖m_X−m_X̃‖² − (2λ−λ²)‖μ‖²|`.
    pub mean_identity_error: f64,
    /// `σ_X̂ ≤ σ_X̃ ≤ σ_X` along every principal axis.
    pub ordered: bool,
}

impl Theorem1Instance {
    pub fn holds(&self) -> bool {
        self.w2_noisy < self.w2_quantized && self.ordered
    }
}

/// Builds `P_X` and `P_X̃` from the quantized embedding distribution and an
/// isotropic residual fit, and compares their distances to `P_X`.
pub fn verify_theorem1(embedding: &GaussianSpec, residual: &ResidualStats, lambda: f64) -> Result<Theorem1Instance> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Precondition(format!("λ must lie in (0, 1], got {lambda}")));
    }
    if residual.mode() != CovarianceMode::Isotropic {
        return Err(Error::Precondition("residual covariance must be isotropic".into()));
    }
    if residual.dim() != embedding.dim() {
        return Err(Error::dim("verify_theorem1", "residual and embedding widths differ"));
    }
    let mu = residual.mean();
    let s2 = residual.isotropic_variance();
    let x = embedding.shifted(mu, s2)?;
    let lmu: Vec<f64> = mu.iter().map(|m| lambda * m).collect();
    let x_tilde = embedding.shifted(&lmu, lambda * lambda * s2)?;

    let w2_quantized = w2_gaussian(&x, embedding)?;
    let w2_noisy = w2_gaussian(&x, &x_tilde)?;

    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mu_norm2: f64 = mu.iter().map(|m| m * m).sum();
    let mean_margin = (2.0 * lambda - lambda * lambda) * mu_norm2;
    let diff = sq(x.mean(), embedding.mean()) - sq(x.mean(), x_tilde.mean());
    let mean_identity_error = (diff - mean_margin).abs();

    let (sh, st, sx) = (
        embedding.principal_std_devs()?,
        x_tilde.principal_std_devs()?,
        x.principal_std_devs()?,
    );
    let ordered = (0..sh.len()).all(|i| sh[i] <= st[i] && st[i] <= sx[i]);

    Ok(Theorem1Instance {
        dim: embedding.dim(),
        lambda,
        residual_variance: s2,
        mu_norm2,
        w2_quantized,
        w2_noisy,
        mean_margin,
        mean_identity_error,
        ordered,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    pub instances: Vec<Theorem1Instance>,
}

impl Theorem1Report {
    pub fn violations(&self) -> usize {
        self.instances.iter().filter(|i| !i.holds()).count()
    }

    pub fn max_mean_identity_error(&self) -> f64 {
        self.instances.iter().map(|i| i.mean_identity_error).fold(0.0, f64::max)
    }

    /// Smallest `W₂²(X,X̂) − W₂²(X,X̃)` over the suite.
    pub fn min_margin(&self) -> f64 {
        self.instances
            .iter()
            .map(|i| i.w2_quantized - i.w2_noisy)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "instance,dim,lambda,residual_var,mu_norm2,w2_x_xhat,w2_x_xtilde,mean_margin,mean_identity_err,ordered,pass\n",
        );
        for (n, i) in self.instances.iter().enumerate() {
            let _ = writeln!(
                s,
                "{n},{},{},{},{},{},{},{},{},{},{}",
                i.dim,
                Sig6(i.lambda),
                Sig6(i.residual_variance),
                Sig6(i.mu_norm2),
                Sig6(i.w2_quantized),
                Sig6(i.w2_noisy),
                Sig6(i.mean_margin),
                Sig6(i.mean_identity_error),
                i.ordered,
                i.holds()
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "W2 improvement: {} instances, {} violations, min margin {}, max mean-identity error {}",
            self.instances.len(),
            self.violations(),
            Sig6(self.min_margin()),
            Sig6(self.max_mean_identity_error())
        )
    }
}

/// Random instance: dimension in `1..=max_dim`, λ in (0, 1], isotropic
/// residual with σ² in [0.01, 2), and an embedding covariance that is
/// isotropic, diagonal or full with equal probability.
pub fn random_theorem1_instance(rng: &mut impl Rng, max_dim: usize) -> Result<(GaussianSpec, ResidualStats, f64)> {
    let d = rng.random_range(1..=max_dim.max(1));
    let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let embedding = match rng.random_range(0..3) {
        0 => GaussianSpec::isotropic(mean, rng.random_range(0.05..3.0))?,
        1 => GaussianSpec::diagonal(mean, (0..d).map(|_| rng.random_range(0.0..3.0)).collect())?,
        _ => {
            let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    c[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
                }
            }
            for i in 0..d {
                for j in i + 1..d {
                    c[j * d + i] = c[i * d + j];
                }
            }
            GaussianSpec::full(mean, c)?
        }
    };
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s2 = rng.random_range(0.01..2.0);
    let residual = ResidualStats::from_moments(0, CovarianceMode::Isotropic, 1000, mu, vec![s2; d])?;
    // (0, 1]: 1 − U[0,1) never hits zero.
    let lambda = 1.0 - rng.random_range(0.0..1.0);
    Ok((embedding, residual, lambda))
}

pub fn theorem1_suite(count: usize, max_dim: usize, seed: u64) -> Result<Theorem1Report> {
    let mut rng = stream(seed, "theorem1");
    let mut instances = Vec::with_capacity(count);
    for _ in 0..count {
        let (e, r, l) = random_theorem1_instance(&mut rng, max_dim)?;
        instances.push(verify_theorem1(&e, &r, l)?);
    }
    Ok(Theorem1Report { instances })
}

// ---------------------------------------------------------------------------
// Distributed class tokens: 1/N error reduction
// ---------------------------------------------------------------------------

pub const MIN_TRIALS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReductionConfig {
    pub tokens: usize,
    pub devices: usize,
    pub dim: usize,
    pub sigma_k: f64,
    pub sigma_v: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VarianceReductionConfig {
    fn default() -> Self {
        VarianceReductionConfig {
            tokens: 16,
            devices: 4,
            dim: 8,
            sigma_k: 1e-3,
            sigma_v: 1e-3,
            trials: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceReduction {
    pub config: VarianceReductionConfig,
    /// Mean `‖δ_single‖²` over trials.
    pub single_mse: f64,
    /// Mean `‖δ̄_dist‖²` over trials.
    pub dist_mse: f64,
    pub ratio: f64,
}

impl VarianceReduction {
    pub fn expected(&self) -> f64 {
        1.0 / self.config.devices as f64
    }

    pub fn relative_error(&self) -> f64 {
        (self.ratio - self.expected()).abs() / self.expected()
    }
}

fn attend_one(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    let scale = 1.0 / (q.len() as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| k.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() * scale)
        .collect();
    let alpha = softmax(&logits);
    let mut out = vec![0.0; values[0].len()];
    for (a, v) in alpha.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    out
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Attention output for a class-token replica that sees tokens `local` at
/// full precision and every other token through independent key/value noise.
fn replica_output(
    rng: &mut impl Rng,
    q: &[f64],
    keys: &[Vec<f64>],
    values: &[Vec<f64>],
    local: std::ops::Range<usize>,
    sigma_k: f64,
    sigma_v: f64,
) -> Vec<f64> {
    let d = q.len();
    let mut k = keys.to_vec();
    let mut v = values.to_vec();
    for j in (0..keys.len()).filter(|j| !local.contains(j)) {
        for c in 0..d {
            k[j][c] += sigma_k * rng.sample::<f64, _>(StandardNormal);
            v[j][c] += sigma_v * rng.sample::<f64, _>(StandardNormal);
        }
    }
    attend_one(q, &k, &v)
}

/// Monte Carlo estimate of `E‖δ̄_dist‖² / E‖δ_single‖²`.
///
/// Each trial draws a fresh query, keys and values, then evaluates one
/// replica per device. Device `i` holds tokens `i·T/N .. (i+1)·T/N`; the
/// single class token lives on device 0. Every replica sees its own
/// independent noise on non-local tokens.
pub fn mc_variance_reduction(cfg: &VarianceReductionConfig) -> Result<VarianceReduction> {
    let VarianceReductionConfig {
        tokens: t,
        devices: n,
        dim: d,
        sigma_k,
        sigma_v,
        trials,
        seed,
    } = *cfg;
    if trials < MIN_TRIALS {
        return Err(Error::InsufficientData(format!("{trials} trials (need at least {MIN_TRIALS})")));
    }
    if n == 0 || t == 0 || d == 0 || t % n != 0 {
        return Err(Error::Precondition(format!("devices ({n}) must divide tokens ({t})")));
    }
    if !(sigma_k >= 0.0 && sigma_v >= 0.0 && sigma_k.is_finite() && sigma_v.is_finite()) {
        return Err(Error::Precondition("noise scales must be finite and non-negative".into()));
    }
    if n == 1 {
        // No token is remote: both estimators are the exact output.
        return Ok(VarianceReduction {
            config: *cfg,
            single_mse: 0.0,
            dist_mse: 0.0,
            ratio: 1.0,
        });
    }
    let shard = t / n;
    let per_trial: Vec<(f64, f64)> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let mut rng = substream(seed, "theorem2", trial);
            let q = normal_vec(&mut rng, d);
            let keys: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(&mut rng, d)).collect();
            let values: Vec<Vec<f64>> = (0..t).map(|_| normal_vec(&mut rng, d)).collect();
            let h = attend_one(&q, &keys, &values);
            let err2 = |o: &[f64]| o.iter().zip(&h).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let mut avg = vec![0.0; d];
            let mut single = 0.0;
            for i in 0..n {
                let out = replica_output(&mut rng, &q, &keys, &values, i * shard..(i + 1) * shard, sigma_k, sigma_v);
                if i == 0 {
                    single = err2(&out);
                }
                for (a, o) in avg.iter_mut().zip(&out) {
                    *a += o / n as f64;
                }
            }
            (single, err2(&avg))
        })
        .collect();
    let (mut s, mut dsum) = (0.0, 0.0);
    for (a, b) in &per_trial {
        s += a;
        dsum += b;
    }
    if s <= 0.0 {
        return Err(Error::Domain("single class-token error vanished; noise scale too small".into()));
    }
    Ok(VarianceReduction {
        config: *cfg,
        single_mse: s / trials as f64,
        dist_mse: dsum / trials as f64,
        ratio: dsum / s,
    })
}

pub fn variance_reduction_csv(rows: &[VarianceReduction], tolerance: f64) -> String {
    let mut s = String::from("devices,tokens,dim,sigma_k,sigma_v,trials,single_mse,dist_mse,ratio,expected,rel_err,pass\n");
    for r in rows {
        let c = &r.config;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            c.devices,
            c.tokens,
            c.dim,
            Sig6(c.sigma_k),
            Sig6(c.sigma_v),
            c.trials,
            Sig6(r.single_mse),
            Sig6(r.dist_mse),
            Sig6(r.ratio),
            Sig6(r.expected()),
            Sig6(r.relative_error()),
            r.relative_error() <= tolerance
        );
    }
    s
}

// ---------------------------------------------------------------------------
// Per-coordinate variance bound
// ---------------------------------------------------------------------------

/// `(C₁, C₂)` for output coordinate `c`, with `alpha` and `values` restricted
/// to the non-local tokens: `C₁ = m·max α_j²`, `C₂ = 2m·max α_j² v_{j,c}²`.
pub fn variance_bound_constants(alpha: &[f64], values: &[Vec<f64>], c: usize) -> Result<(f64, f64)> {
    if alpha.len() != values.len() {
        return Err(Error::dim("variance_bound_constants", "α and V lengths differ"));
    }
    if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::Precondition("attention weights must lie in [0, 1]".into()));
    }
    if values.iter().any(|v| v.len() <= c) {
        return Err(Error::dim("variance_bound_constants", "coordinate out of range"));
    }
    let m = alpha.len() as f64;
    let c1 = m * alpha.iter().map(|a| a * a).fold(0.0, f64::max);
    let c2 = 2.0 * m * alpha.iter().zip(values).map(|(a, v)| (a * v[c]).powi(2)).fold(0.0, f64::max);
    Ok((c1, c2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundCoordinate {
    pub instance: usize,
    pub coordinate: usize,
    pub c1: f64,
    pub c2: f64,
    /// Bound with the logit-level key variance `σ_k²‖q‖²/d`.
    pub bound: f64,
    pub measured: f64,
}

impl BoundCoordinate {
    pub fn within(&self) -> bool {
        self.measured <= self.bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub coordinates: Vec<BoundCoordinate>,
}

impl BoundReport {
    pub fn fraction_within(&self) -> f64 {
        let ok = self.coordinates.iter().filter(|c| c.within()).count();
        ok as f64 / self.coordinates.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,coordinate,c1,c2,bound,measured,within\n");
        for c in &self.coordinates {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.instance,
                c.coordinate,
                Sig6(c.c1),
                Sig6(c.c2),
                Sig6(c.bound),
                Sig6(c.measured),
                c.within()
            );
        }
        s
    }
}

/// Draws `instances` random single-replica attention problems on device 0 of
/// an `N`-way split and compares the empirical per-coordinate output
/// variance over `samples` noise draws with `C₁σ_v² + C₂σ_k²`.
///
/// The constants assume unit-variance logit noise per unit of `σ_k²`; key
/// noise `δk ~ N(0, σ_k²I)` reaches the logits with variance
/// `σ_k²‖q‖²/d`, so that effective variance is used in the bound.
pub fn check_variance_bound(
    tokens: usize,
    devices: usize,
    dim: usize,
    sigma: f64,
    instances: usize,
    samples: usize,
    seed: u64,
) -> Result<BoundReport> {
    if samples < MIN_TRIALS {
        return Err(Error::InsufficientData(format!("{samples} samples (need at least {MIN_TRIALS})")));
    }
    if devices < 2 || tokens % devices != 0 {
        return Err(Error::Precondition("need at least 2 devices dividing the token count".into()));
    }
    let local = 0..tokens / devices;
    let per_instance: Vec<Vec<BoundCoordinate>> = (0..instances as u64)
        .into_par_iter()
        .map(|inst| {
            let mut rng = substream(seed, "variance-bound", inst);
            let q = normal_vec(&mut rng, dim);
            let keys: Vec<Vec<f64>> = (0..tokens).map(|_| normal_vec(&mut rng, dim)).collect();
            let values: Vec<Vec<f64>> = (0..tokens).map(|_| normal_vec(&mut rng, dim)).collect();
            let scale = 1.0 / (dim as f64).sqrt();
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let alpha = softmax(&logits);
            let remote: Vec<usize> = (0..tokens).filter(|j| !local.contains(j)).collect();
            let ra: Vec<f64> = remote.iter().map(|&j| alpha[j]).collect();
            let rv: Vec<Vec<f64>> = remote.iter().map(|&j| values[j].clone()).collect();
            let q2: f64 = q.iter().map(|x| x * x).sum();
            let sk2_eff = sigma * sigma * q2 / dim as f64;

            let (mut s1, mut s2) = (vec![0.0; dim], vec![0.0; dim]);
            for _ in 0..samples {
                let out = replica_output(&mut rng, &q, &keys, &values, local.clone(), sigma, sigma);
                for c in 0..dim {
                    s1[c] += out[c];
                    s2[c] += out[c] * out[c];
                }
            }
            (0..dim)
                .map(|c| {
                    let (c1, c2) = variance_bound_constants(&ra, &rv, c).expect("validated shapes");
                    let mean = s1[c] / samples as f64;
                    let measured = (s2[c] / samples as f64 - mean * mean).max(0.0) * samples as f64
                        / (samples - 1) as f64;
                    BoundCoordinate {
                        instance: inst as usize,
                        coordinate: c,
                        c1,
                        c2,
                        bound: c1 * sigma * sigma + c2 * sk2_eff,
                        measured,
                    }
                })
                .collect()
        })
        .collect();
    Ok(BoundReport {
        coordinates: per_instance.into_iter().flatten().collect(),
    })
}

// ---------------------------------------------------------------------------
// Softmax linearization order
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct LinearizationReport {
    /// Per-instance `‖r(ε)‖ / ‖r(ε/2)‖` where `r` is the first-order residual.
    pub ratios: Vec<f64>,
}

impl LinearizationReport {
    pub fn mean_ratio(&self) -> f64 {
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }
}

/// Residual of the first-order softmax perturbation at logit perturbation
/// size `eps` and `eps/2` along a random direction, over random instances.
pub fn linearization_order(instances: usize, tokens: usize, eps: f64, seed: u64) -> Result<LinearizationReport> {
    if instances == 0 || tokens < 2 {
        return Err(Error::Precondition("need at least one instance of two tokens".into()));
    }
    let mut rng = stream(seed, "linearization");
    let mut ratios = Vec::with_capacity(instances);
    for _ in 0..instances {
        let a = normal_vec(&mut rng, tokens);
        let dir = normal_vec(&mut rng, tokens);
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let alpha = softmax(&a);
        let residual = |h: f64| {
            let e: Vec<f64> = dir.iter().map(|x| x / norm * h).collect();
            let shifted: Vec<f64> = a.iter().zip(&e).map(|(x, y)| x + y).collect();
            let exact = softmax(&shifted);
            let lin = softmax_perturbation_first_order(&alpha, &e);
            exact
                .iter()
                .zip(&alpha)
                .zip(&lin)
                .map(|((x, a0), l)| (x - a0 - l).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        ratios.push(residual(eps) / residual(eps / 2.0));
    }
    Ok(LinearizationReport { ratios })
}
