//! Diagonal-covariance GMM vocabulary: descriptor sampling, EM fitting,
//! densities and posteriors.

mod kmeans;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::descriptors::DescriptorSource;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::parallel::{self, Parallelism};

pub(crate) use kmeans::nearest;

const LN_2PI: f64 = 1.8378770664093453;

/// GMM with diagonal covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Matrix,
    variances: Matrix,
    // log w_k − ½ Σ_d log(2π σ²_kd)
    log_norm: Vec<f64>,
    inv_var: Matrix,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, means: Matrix, variances: Matrix) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.rows() != k || variances.rows() != k || means.cols() != variances.cols() || means.cols() == 0 {
            return Err(Error::Validation(format!(
                "inconsistent GMM shapes: {} weights, means {}×{}, variances {}×{}",
                k,
                means.rows(),
                means.cols(),
                variances.rows(),
                variances.cols()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Validation("GMM weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("GMM weights sum to {total}, not 1")));
        }
        if variances.as_slice().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation("GMM variances must be positive".into()));
        }
        if means.as_slice().iter().any(|m| !m.is_finite()) {
            return Err(Error::Validation("GMM means must be finite".into()));
        }
        let dim = means.cols();
        let log_norm = weights
            .iter()
            .zip(variances.iter_rows())
            .map(|(w, var)| w.ln() - 0.5 * (dim as f64 * LN_2PI + var.iter().map(|v| v.ln()).sum::<f64>()))
            .collect();
        let inv_var = Matrix::new(k, dim, variances.as_slice().iter().map(|v| 1.0 / v).collect())?;
        Ok(GmmModel {
            weights,
            means,
            variances,
            log_norm,
            inv_var,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.means.row(k)
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        self.variances.row(k)
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Writes `log(w_k u_k(x))` into `out` and returns `log u_λ(x)`.
    pub fn log_joint(&self, x: &[f64], out: &mut [f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.k() {
            let mut q = 0.0;
            for ((xd, m), iv) in x.iter().zip(self.means.row(k)).zip(self.inv_var.row(k)) {
                let diff = xd - m;
                q += diff * diff * iv;
            }
            out[k] = self.log_norm[k] - 0.5 * q;
            max = max.max(out[k]);
        }
        let sum: f64 = out.iter().map(|l| (l - max).exp()).sum();
        max + sum.ln()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        self.log_joint(x, &mut buf)
    }

    /// Posterior responsibilities `γ_k(x)` written into `out`; returns
    /// `log u_λ(x)`.
    pub fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let lse = self.log_joint(x, out);
        let mut total = 0.0;
        for g in out.iter_mut() {
            *g = (*g - lse).exp();
            total += *g;
        }
        // Renormalize away the rounding left by exp.
        for g in out.iter_mut() {
            *g /= total;
        }
        lse
    }

    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.posteriors_into(x, &mut out);
        out
    }

    /// Mean log-likelihood per row.
    pub fn mean_log_likelihood(&self, samples: &Matrix) -> f64 {
        let mut buf = vec![0.0; self.k()];
        samples.iter_rows().map(|x| self.log_joint(x, &mut buf)).sum::<f64>() / samples.rows() as f64
    }
}

#[derive(Serialize, Deserialize)]
struct GmmFile {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl GmmModel {
    pub fn to_json_string(&self) -> String {
        let file = GmmFile {
            k: self.k(),
            d: self.dim(),
            weights: self.weights.clone(),
            means: self.means.iter_rows().map(<[f64]>::to_vec).collect(),
            variances: self.variances.iter_rows().map(<[f64]>::to_vec).collect(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let file: GmmFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let means = Matrix::from_rows(&file.means)?;
        let variances = Matrix::from_rows(&file.variances)?;
        if means.rows() != file.k || means.cols() != file.d || variances.cols() != file.d {
            return Err(Error::Validation(format!(
                "model header says K={} D={}, arrays disagree",
                file.k, file.d
            )));
        }
        GmmModel::new(file.weights, means, variances)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GmmModel::from_json_str(&text, path)
    }
}

/// Draws up to `per_image` descriptors uniformly without replacement from
/// each train instance, pooled over all scales. Rows are grouped by
/// instance in manifest order.
pub fn sample_training_descriptors(
    manifest: &DatasetManifest,
    source: &dyn DescriptorSource,
    per_image: usize,
    seed: u64,
    policy: Parallelism,
) -> Result<Matrix> {
    let per_instance = parallel::map_range(policy, manifest.train.len(), |i| -> Result<(usize, Vec<f64>)> {
        let desc = source.load(&manifest.train[i].instance_id)?;
        let rows: Vec<&[f32]> = desc.all_rows().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let take = per_image.min(rows.len());
        let picked = rand::seq::index::sample(&mut rng, rows.len(), take);
        let mut out = Vec::with_capacity(take * desc.dim());
        for idx in picked.iter() {
            out.extend(rows[idx].iter().map(|&v| v as f64));
        }
        Ok((desc.dim(), out))
    });
    let mut dim = None;
    let mut data = Vec::new();
    for part in per_instance {
        let (d, rows) = part?;
        if rows.is_empty() {
            continue;
        }
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => return Err(Error::DimensionMismatch { expected: prev, got: d }),
            _ => {}
        }
        data.extend(rows);
    }
    let dim = dim.ok_or_else(|| Error::Validation("train split has no descriptors to sample".into()))?;
    Matrix::new(data.len() / dim, dim, data)
}

#[derive(Debug, Clone)]
pub struct GmmConfig {
    pub max_iter: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tol: f64,
    /// Per-dimension variance floor as a fraction of the sample variance.
    pub var_floor: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig {
            max_iter: 100,
            rel_tol: 1e-5,
            var_floor: 1e-4,
            kmeans_iters: 10,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Mean log-likelihood per sample of the model entering each EM
    /// iteration, followed by that of the returned model.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

const CHUNK_ROWS: usize = kmeans::CHUNK_ROWS;
const MIN_VARIANCE: f64 = 1e-10;

fn distinct_rows(samples: &Matrix, enough: usize) -> usize {
    let mut seen = HashSet::new();
    for row in samples.iter_rows() {
        let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        seen.insert(key);
        if seen.len() >= enough {
            break;
        }
    }
    seen.len()
}

pub fn fit_gmm(samples: &Matrix, k: usize, cfg: &GmmConfig) -> Result<GmmModel> {
    fit_gmm_traced(samples, k, cfg).map(|fit| fit.model)
}

/// EM for a `k`-component diagonal GMM, initialized from k-means++ seeded
/// k-means. E-step and M-step sums run over fixed 1024-row chunks whose
/// partial results are combined in chunk order, so the fit is identical
/// under any [`Parallelism`].
pub fn fit_gmm_traced(samples: &Matrix, k: usize, cfg: &GmmConfig) -> Result<GmmFit> {
    let (n, dim) = (samples.rows(), samples.cols());
    if k == 0 {
        return Err(Error::Config("GMM needs at least one component".into()));
    }
    if dim == 0 || n < k {
        return Err(Error::Numerical(format!("{n} samples cannot support {k} components")));
    }
    if samples.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite training sample".into()));
    }
    let distinct = distinct_rows(samples, k);
    if distinct < k {
        return Err(Error::Numerical(format!(
            "only {distinct} distinct samples for {k} components"
        )));
    }
    let policy = cfg.parallelism;

    // Per-dimension floor from the overall sample variance.
    let mean: Vec<f64> = (0..dim)
        .map(|d| samples.iter_rows().map(|x| x[d]).sum::<f64>() / n as f64)
        .collect();
    let sample_var: Vec<f64> = (0..dim)
        .map(|d| samples.iter_rows().map(|x| (x[d] - mean[d]).powi(2)).sum::<f64>() / n as f64)
        .collect();
    let floor: Vec<f64> = sample_var.iter().map(|v| (cfg.var_floor * v).max(MIN_VARIANCE)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds = kmeans::kmeans_plus_plus(samples, k, &mut rng);
    let (centers, assign) = kmeans::lloyd(samples, seeds, cfg.kmeans_iters, policy);

    // Initial GMM from the hard k-means partition.
    let mut counts = vec![0usize; k];
    let mut sq = Matrix::zeros(k, dim);
    for (x, &a) in samples.iter_rows().zip(&assign) {
        counts[a] += 1;
        for ((s, v), c) in sq.row_mut(a).iter_mut().zip(x).zip(centers.row(a)) {
            *s += (v - c) * (v - c);
        }
    }
    let total: f64 = counts.iter().map(|&c| c.max(1) as f64).sum();
    let weights: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64 / total).collect();
    let mut variances = Matrix::zeros(k, dim);
    for c in 0..k {
        for d in 0..dim {
            let v = if counts[c] > 1 {
                sq.row(c)[d] / counts[c] as f64
            } else {
                sample_var[d]
            };
            variances.row_mut(c)[d] = v.max(floor[d]);
        }
    }
    let mut model = GmmModel::new(weights, centers, variances)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut gamma = vec![0.0; n * k];
    while iterations < cfg.max_iter {
        let ll = e_step(&model, samples, &mut gamma, policy);
        if let Some(&prev) = trace.last() {
            let gain: f64 = ll - prev;
            if gain.abs() <= cfg.rel_tol * f64::abs(prev) {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        model = m_step(&model, samples, &gamma, &floor, policy)?;
        iterations += 1;
    }
    if !converged {
        trace.push(e_step(&model, samples, &mut gamma, policy));
    }
    if trace.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical("EM produced a non-finite log-likelihood".into()));
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
        iterations,
        converged,
    })
}

/// Fills `gamma` (row-major n×K) and returns the mean log-likelihood.
fn e_step(model: &GmmModel, samples: &Matrix, gamma: &mut [f64], policy: Parallelism) -> f64 {
    let (k, dim) = (model.k(), model.dim());
    let parts = parallel::map_chunks(policy, samples.as_slice(), CHUNK_ROWS * dim, |_, chunk| {
        let rows = chunk.len() / dim;
        let mut g = vec![0.0; rows * k];
        let mut ll = 0.0;
        for (x, out) in chunk.chunks_exact(dim).zip(g.chunks_exact_mut(k)) {
            ll += model.posteriors_into(x, out);
        }
        (g, ll)
    });
    let mut total = 0.0;
    let mut at = 0;
    for (g, ll) in parts {
        gamma[at..at + g.len()].copy_from_slice(&g);
        at += g.len();
        total += ll;
    }
    total / samples.rows() as f64
}

/// Sums `f(x, γ(x))` contributions per chunk, combining chunks in order.
fn chunked_sum<F>(samples: &Matrix, gamma: &[f64], k: usize, width: usize, policy: Parallelism, f: F) -> Vec<f64>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync + Send,
{
    let dim = samples.cols();
    let parts = parallel::map_chunks(policy, samples.as_slice(), CHUNK_ROWS * dim, |ci, chunk| {
        let mut acc = vec![0.0; width];
        let g0 = ci * CHUNK_ROWS * k;
        for (r, x) in chunk.chunks_exact(dim).enumerate() {
            f(x, &gamma[g0 + r * k..g0 + (r + 1) * k], &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; width];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

fn m_step(prev: &GmmModel, samples: &Matrix, gamma: &[f64], floor: &[f64], policy: Parallelism) -> Result<GmmModel> {
    let (n, k, dim) = (samples.rows(), prev.k(), prev.dim());
    let nk = chunked_sum(samples, gamma, k, k, policy, |_, g, acc| {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v;
        }
    });
    let sx = chunked_sum(samples, gamma, k, k * dim, policy, |x, g, acc| {
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            for (a, v) in acc[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *a += gc * v;
            }
        }
    });
    // A component whose responsibilities all underflowed keeps its
    // previous mean and variance and a negligible weight.
    let collapsed: Vec<bool> = nk.iter().map(|&v| v < 1e-300).collect();
    let mut means = Matrix::zeros(k, dim);
    for c in 0..k {
        let row = means.row_mut(c);
        if collapsed[c] {
            row.copy_from_slice(prev.mean(c));
        } else {
            for (m, s) in row.iter_mut().zip(&sx[c * dim..(c + 1) * dim]) {
                *m = s / nk[c];
            }
        }
    }
    let sxx = chunked_sum(samples, gamma, k, k * dim, policy, |x, g, acc| {
        for (c, &gc) in g.iter().enumerate() {
            if gc == 0.0 {
                continue;
            }
            for ((a, v), m) in acc[c * dim..(c + 1) * dim].iter_mut().zip(x).zip(means.row(c)) {
                *a += gc * (v - m) * (v - m);
            }
        }
    });
    let mut variances = Matrix::zeros(k, dim);
    for c in 0..k {
        for d in 0..dim {
            let v = if collapsed[c] {
                prev.variance(c)[d]
            } else {
                sxx[c * dim + d] / nk[c]
            };
            variances.row_mut(c)[d] = v.max(floor[d]);
        }
    }
    let raw: Vec<f64> = nk
        .iter()
        .map(|&v| if v < 1e-300 { 1e-12 } else { v / n as f64 })
        .collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    GmmModel::new(weights, means, variances)
}
