//! Exact O(N²) t-SNE with perplexity-calibrated Gaussian affinities and a
//! Student-t output kernel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ae::LatentOrigin;
use crate::error::{Error, Result};

/// Entropy tolerance (bits) for the per-point bandwidth search.
pub const ENTROPY_TOLERANCE: f64 = 1e-5;
pub const MAX_BANDWIDTH_STEPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    /// Exaggeration applies to iterations `0..exaggeration_iterations`.
    pub exaggeration_iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
    /// KL is recorded every this many iterations (plus the exaggeration
    /// boundary and the final iteration).
    pub kl_every: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 750,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
            kl_every: 50,
        }
    }
}

impl TsneConfig {
    pub fn with_perplexity(perplexity: f64) -> Self {
        Self {
            perplexity,
            ..Self::default()
        }
    }
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if n < 4 {
        return Err(Error::invalid(format!("t-SNE needs at least 4 points, got {n}")));
    }
    let limit = (n as f64 - 1.0) / 3.0;
    if !(perplexity > 0.0 && perplexity < limit) {
        return Err(Error::invalid(format!(
            "perplexity {perplexity} must lie in (0, {limit:.3}) for {n} points"
        )));
    }
    Ok(())
}

/// Symmetrized joint probabilities, row-major `n x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affinities {
    pub n: usize,
    pub p: Vec<f64>,
    /// Perplexity actually reached by each row's conditional distribution.
    pub row_perplexity: Vec<f64>,
    /// Gaussian precision `1 / (2 sigma_i^2)` chosen for each row.
    pub betas: Vec<f64>,
}

impl Affinities {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.p[i * self.n + j]
    }
}

fn squared_distances<R: AsRef<[f64]>>(x: &[R]) -> Result<Vec<f64>> {
    let n = x.len();
    let dim = x.first().map(|r| r.as_ref().len()).unwrap_or(0);
    if x.iter().any(|r| r.as_ref().len() != dim) {
        return Err(Error::Shape("points have differing dimensions".into()));
    }
    if x.iter().any(|r| r.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            tensor: "t-SNE input".into(),
        });
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        let xi = x[i].as_ref();
        for j in i + 1..n {
            let dist: f64 = xi
                .iter()
                .zip(x[j].as_ref())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = dist;
            d[j * n + i] = dist;
        }
    }
    Ok(d)
}

/// Conditional distribution of one row at precision `beta`; returns the
/// entropy in bits.
fn row_distribution(dist: &[f64], skip: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (j, (&d, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        *o = if j == skip { 0.0 } else { (-beta * (d - min)).exp() };
        sum += *o;
    }
    let mut weighted = 0.0;
    for (j, (&d, o)) in dist.iter().zip(out.iter_mut()).enumerate() {
        *o /= sum;
        if j != skip {
            weighted += *o * (d - min);
        }
    }
    (sum.ln() + beta * weighted) / std::f64::consts::LN_2
}

/// Per-point Gaussian bandwidths found by bisection so each conditional
/// row has entropy `log2(perplexity)`, then `P = (P_cond + P_condᵀ) / 2N`.
pub fn conditional_affinities<R: AsRef<[f64]>>(x: &[R], perplexity: f64) -> Result<Affinities> {
    let n = x.len();
    check_perplexity(n, perplexity)?;
    let dist = squared_distances(x)?;
    let target = perplexity.log2();
    let mut cond = vec![0.0; n * n];
    let mut row_perplexity = vec![0.0; n];
    let mut betas = vec![0.0; n];

    for i in 0..n {
        let row = &dist[i * n..(i + 1) * n];
        let out = &mut cond[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / (n - 1) as f64;
        let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut entropy = row_distribution(row, i, beta, out);
        for _ in 0..MAX_BANDWIDTH_STEPS {
            let gap = entropy - target;
            if gap.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if gap > 0.0 {
                // Too flat: sharpen.
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            entropy = row_distribution(row, i, beta, out);
        }
        row_perplexity[i] = entropy.exp2();
        betas[i] = beta;
    }

    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
            }
        }
    }
    Ok(Affinities {
        n,
        p,
        row_perplexity,
        betas,
    })
}

/// Fills `num` (row-major `n x n`) with the Student-t kernel
/// `1 / (1 + |y_i - y_j|^2)`, zero on the diagonal, and returns its sum `Z`.
fn student_kernel_into(y: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = y.len();
    let mut z = 0.0;
    for (i, row) in num.chunks_exact_mut(n).enumerate() {
        let [xi, yi] = y[i];
        let mut row_sum = 0.0;
        for (slot, q) in row.iter_mut().zip(y) {
            let dx = xi - q[0];
            let dy = yi - q[1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            *slot = v;
            row_sum += v;
        }
        // The diagonal contributed exactly 1.
        row[i] = 0.0;
        z += row_sum - 1.0;
    }
    z
}

fn student_kernel(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; y.len() * y.len()];
    let z = student_kernel_into(y, &mut num);
    (num, z)
}

fn gradient_into(p: &[f64], y: &[[f64; 2]], exaggeration: f64, num: &mut [f64], grad: &mut [[f64; 2]]) {
    let n = y.len();
    let inv_z = 1.0 / student_kernel_into(y, num);
    for (i, (k_row, p_row)) in num.chunks_exact(n).zip(p.chunks_exact(n)).enumerate() {
        let [xi, yi] = y[i];
        let mut g = [0.0; 2];
        for ((&k, &pij), q) in k_row.iter().zip(p_row).zip(y) {
            let coeff = (exaggeration * pij - k * inv_z) * k;
            g[0] += coeff * (xi - q[0]);
            g[1] += coeff * (yi - q[1]);
        }
        grad[i] = [4.0 * g[0], 4.0 * g[1]];
    }
}

/// `KL(P || Q)` for the layout `y`.
pub fn kl_divergence(affinities: &Affinities, y: &[[f64; 2]]) -> f64 {
    let n = y.len();
    let (num, z) = student_kernel(y);
    let mut kl = 0.0;
    for idx in 0..n * n {
        let pij = affinities.p[idx];
        if pij > 0.0 {
            kl += pij * (pij / (num[idx] / z).max(f64::MIN_POSITIVE)).ln();
        }
    }
    kl
}

/// Gradient of [`kl_divergence`] with respect to every output coordinate.
pub fn kl_gradient(affinities: &Affinities, y: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut grad = vec![[0.0; 2]; y.len()];
    let mut num = vec![0.0; y.len() * y.len()];
    gradient_into(&affinities.p, y, 1.0, &mut num, &mut grad);
    grad
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Embedding2D {
    pub ids: Vec<u64>,
    pub points: Vec<[f64; 2]>,
    pub source: Option<LatentOrigin>,
    pub config: TsneConfig,
    pub kl_final: f64,
    /// `(iteration count, KL)` after that many updates.
    pub kl_trace: Vec<(usize, f64)>,
}

impl Embedding2D {
    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} points",
                ids.len(),
                self.points.len()
            )));
        }
        self.ids = ids;
        Ok(self)
    }

    pub fn with_source(mut self, source: LatentOrigin) -> Self {
        self.source = Some(source);
        self
    }

    pub fn centroid(&self) -> [f64; 2] {
        centroid(&self.points)
    }

    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace
            .iter()
            .find(|(it, _)| *it == iteration)
            .map(|(_, kl)| *kl)
    }
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len().max(1) as f64;
    let sx: f64 = points.iter().map(|p| p[0]).sum();
    let sy: f64 = points.iter().map(|p| p[1]).sum();
    [sx / n, sy / n]
}

fn recentre(points: &mut [[f64; 2]]) {
    let c = centroid(points);
    for p in points.iter_mut() {
        p[0] -= c[0];
        p[1] -= c[1];
    }
}

/// Initial layout: isotropic Gaussian with standard deviation 1e-4.
pub fn initial_layout(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-4).unwrap();
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    recentre(&mut y);
    y
}

/// Gradient descent with momentum and per-coordinate gains on `KL(P || Q)`.
pub fn tsne_fit<R: AsRef<[f64]>>(x: &[R], config: &TsneConfig) -> Result<Embedding2D> {
    let n = x.len();
    check_perplexity(n, config.perplexity)?;
    if !(config.learning_rate > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let affinities = conditional_affinities(x, config.perplexity)?;

    let mut y = initial_layout(n, config.seed);
    let mut update = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut num = vec![0.0f64; n * n];
    let mut kl_trace = Vec::new();

    for it in 0..config.iterations {
        let exaggeration = if it < config.exaggeration_iterations {
            config.early_exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        gradient_into(&affinities.p, &y, exaggeration, &mut num, &mut grad);
        if grad.iter().any(|g| !g[0].is_finite() || !g[1].is_finite()) {
            return Err(Error::Numeric {
                iteration: it,
                message: "non-finite t-SNE gradient".into(),
            });
        }
        for i in 0..n {
            for k in 0..2 {
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign {
                    gains[i][k] * 0.8
                } else {
                    gains[i][k] + 0.2
                }
                .max(0.01);
                update[i][k] =
                    momentum * update[i][k] - config.learning_rate * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        recentre(&mut y);
        if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::Numeric {
                iteration: it,
                message: "non-finite t-SNE coordinates".into(),
            });
        }

        let done = it + 1;
        if done == config.exaggeration_iterations
            || done == config.iterations
            || (config.kl_every > 0 && done % config.kl_every == 0)
        {
            kl_trace.push((done, kl_divergence(&affinities, &y)));
        }
    }
    let kl_final = match kl_trace.last() {
        Some(&(it, kl)) if it == config.iterations => kl,
        _ => kl_divergence(&affinities, &y),
    };
    Ok(Embedding2D {
        ids: (0..n as u64).collect(),
        points: y,
        source: None,
        config: config.clone(),
        kl_final,
        kl_trace,
    })
}
