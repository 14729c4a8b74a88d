//! Per-descriptor coding functions and Fisher-vector normalization.
//!
//! Fisher code layout for a `K`-component, `D`-dimensional GMM, length
//! `2KD + K`:
//!
//! ```text
//! [ G_α (K) | G_μ (K·D, component-major) | G_σ (K·D, component-major) ]
//! G_α_k  = (γ_k − w_k) / √w_k
//! G_μ_kd = γ_k · (x_d − μ_kd) / σ_kd / √w_k
//! G_σ_kd = γ_k · ((x_d − μ_kd)² / σ²_kd − 1) / √(2 w_k)
//! ```
//!
//! i.e. the gradient of `log u_λ(x)` with respect to the softmax mixing
//! parameters, the means and the standard deviations, each whitened by the
//! diagonal closed-form Fisher information.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::vocabulary::{nearest, GmmModel};

/// Maps one descriptor to a fixed-length code vector.
pub trait Coder: Sync {
    /// Length of the code vector.
    fn code_dim(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// Adds `c(x)` into `acc`.
    fn accumulate(&self, x: &[f64], acc: &mut [f64]);

    fn code(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.code_dim()];
        self.accumulate(x, &mut out);
        out
    }
}

/// Hard-assignment BOW code: one-hot on the nearest centroid, lowest index
/// on ties.
pub fn code_bow_hard(x: &[f64], vocabulary: &Matrix) -> Result<Vec<f64>> {
    if vocabulary.rows() == 0 {
        return Err(Error::Validation("empty vocabulary".into()));
    }
    if vocabulary.cols() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: vocabulary.cols(),
            got: x.len(),
        });
    }
    let mut out = vec![0.0; vocabulary.rows()];
    out[nearest(x, vocabulary).0] = 1.0;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BowCoder {
    vocabulary: Matrix,
}

impl BowCoder {
    pub fn new(vocabulary: Matrix) -> Result<Self> {
        if vocabulary.rows() == 0 || vocabulary.cols() == 0 {
            return Err(Error::Validation("empty vocabulary".into()));
        }
        Ok(BowCoder { vocabulary })
    }

    /// Uses the GMM means as visual words.
    pub fn from_gmm(model: &GmmModel) -> Self {
        BowCoder {
            vocabulary: model.means().clone(),
        }
    }
}

impl Coder for BowCoder {
    fn code_dim(&self) -> usize {
        self.vocabulary.rows()
    }

    fn input_dim(&self) -> usize {
        self.vocabulary.cols()
    }

    fn accumulate(&self, x: &[f64], acc: &mut [f64]) {
        acc[nearest(x, &self.vocabulary).0] += 1.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FisherOptions {
    /// Posteriors below this are treated as exactly zero. `None` keeps them.
    pub posterior_threshold: Option<f64>,
    /// ℓ2-normalize each descriptor before coding.
    pub l2_normalize_input: bool,
}

impl Default for FisherOptions {
    fn default() -> Self {
        FisherOptions {
            posterior_threshold: Some(1e-6),
            l2_normalize_input: false,
        }
    }
}

impl FisherOptions {
    pub fn exact() -> Self {
        FisherOptions {
            posterior_threshold: None,
            l2_normalize_input: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FisherCoder<'a> {
    model: &'a GmmModel,
    options: FisherOptions,
    inv_sqrt_w: Vec<f64>,
    inv_sqrt_2w: Vec<f64>,
    sqrt_w: Vec<f64>,
    inv_sigma: Matrix,
}

impl<'a> FisherCoder<'a> {
    pub fn new(model: &'a GmmModel, options: FisherOptions) -> Self {
        let (k, dim) = (model.k(), model.dim());
        let w = model.weights();
        let inv_sigma = Matrix::new(
            k,
            dim,
            (0..k).flat_map(|c| model.variance(c).iter().map(|v| 1.0 / v.sqrt())).collect(),
        )
        .expect("shape follows the model");
        FisherCoder {
            model,
            options,
            inv_sqrt_w: w.iter().map(|w| 1.0 / w.sqrt()).collect(),
            inv_sqrt_2w: w.iter().map(|w| 1.0 / (2.0 * w).sqrt()).collect(),
            sqrt_w: w.iter().map(|w| w.sqrt()).collect(),
            inv_sigma,
        }
    }

    pub fn model(&self) -> &GmmModel {
        self.model
    }
}

/// Fisher code length `2KD + K`.
pub fn fisher_dim(k: usize, dim: usize) -> usize {
    2 * k * dim + k
}

impl Coder for FisherCoder<'_> {
    fn code_dim(&self) -> usize {
        fisher_dim(self.model.k(), self.model.dim())
    }

    fn input_dim(&self) -> usize {
        self.model.dim()
    }

    fn accumulate(&self, x: &[f64], acc: &mut [f64]) {
        let (k, dim) = (self.model.k(), self.model.dim());
        let normalized;
        let x = if self.options.l2_normalize_input {
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            normalized = if norm > 0.0 {
                x.iter().map(|v| v / norm).collect()
            } else {
                x.to_vec()
            };
            &normalized[..]
        } else {
            x
        };
        let mut gamma = vec![0.0; k];
        self.model.posteriors_into(x, &mut gamma);
        if let Some(t) = self.options.posterior_threshold {
            for g in gamma.iter_mut() {
                if *g < t {
                    *g = 0.0;
                }
            }
        }
        let (g_alpha, rest) = acc.split_at_mut(k);
        let (g_mu, g_sigma) = rest.split_at_mut(k * dim);
        for c in 0..k {
            let gc = gamma[c];
            g_alpha[c] += gc * self.inv_sqrt_w[c] - self.sqrt_w[c];
            if gc == 0.0 {
                continue;
            }
            let (a_mu, a_sigma) = (gc * self.inv_sqrt_w[c], gc * self.inv_sqrt_2w[c]);
            let mean = self.model.mean(c);
            let inv_sigma = self.inv_sigma.row(c);
            let mu_out = &mut g_mu[c * dim..(c + 1) * dim];
            let sigma_out = &mut g_sigma[c * dim..(c + 1) * dim];
            for d in 0..dim {
                let u = (x[d] - mean[d]) * inv_sigma[d];
                mu_out[d] += a_mu * u;
                sigma_out[d] += a_sigma * (u * u - 1.0);
            }
        }
    }
}

pub fn code_fisher(x: &[f64], model: &GmmModel) -> Vec<f64> {
    FisherCoder::new(model, FisherOptions::default()).code(x)
}

/// Normalization applied to each pooled block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    /// Signed square root, then ℓ2.
    #[default]
    Improved,
    L2,
    None,
}

impl Normalization {
    pub fn apply(self, v: &mut [f64]) {
        match self {
            Normalization::Improved => {
                for x in v.iter_mut() {
                    *x = x.signum() * x.abs().sqrt();
                }
                l2_normalize(v);
            }
            Normalization::L2 => l2_normalize(v),
            Normalization::None => {}
        }
    }
}

/// Scales `v` to unit ℓ2 norm; the zero vector is left alone.
pub fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Signed square root followed by ℓ2 normalization.
pub fn normalize_fv(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    Normalization::Improved.apply(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(k: usize, dim: usize, rng: &mut ChaCha8Rng) -> GmmModel {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let means = Matrix::new(k, dim, (0..k * dim).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
        let vars = Matrix::new(k, dim, (0..k * dim).map(|_| rng.random_range(0.4..2.0)).collect()).unwrap();
        GmmModel::new(raw.iter().map(|w| w / total).collect(), means, vars).unwrap()
    }

    #[test]
    fn bow_examples() {
        let vocab = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 5.0], [3.0, 3.0]]).unwrap();
        assert_eq!(code_bow_hard(&[0.0, 5.0], &vocab).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        // Equidistant from words 1 and 2, and nearer to word 0 otherwise:
        // use a vocabulary without word 0 so the tie is between 1 and 2.
        let tie = Matrix::from_rows(&[[9.0, 9.0], [1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(code_bow_hard(&[0.0, 0.0], &tie).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(code_bow_hard(&[0.0], &Matrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn bow_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let vocab = Matrix::new(32, 4, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let coder = BowCoder::new(vocab.clone()).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..32 {
                let d: f64 = x.iter().zip(vocab.row(k)).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            let code = coder.code(&x);
            assert_eq!(code.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(code[best], 1.0);
        }
    }

    #[test]
    fn fisher_vanishes_at_the_mean() {
        let model = GmmModel::new(
            vec![1.0],
            Matrix::from_rows(&[[0.7]]).unwrap(),
            Matrix::from_rows(&[[2.0]]).unwrap(),
        )
        .unwrap();
        let code = code_fisher(&[0.7], &model);
        assert_eq!(code.len(), 3);
        assert_eq!(code[0], 0.0);
        assert_eq!(code[1], 0.0);
        assert!((code[2] + 1.0 / 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn fisher_dimension_for_deep_features() {
        assert_eq!(fisher_dim(16, 512), 16400);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = random_model(3, 5, &mut rng);
        assert_eq!(code_fisher(&[0.0; 5], &model).len(), 33);
    }

    /// Central finite differences of log u_λ with respect to μ and σ,
    /// whitened by the closed-form Fisher information of each parameter.
    fn finite_difference_code(model: &GmmModel, x: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
        let (k, dim) = (model.k(), model.dim());
        let rebuild = |c: usize, d: usize, dmu: f64, dsigma: f64| {
            let mut means = model.means().clone();
            means.row_mut(c)[d] += dmu;
            let vars = Matrix::from_rows(
                &(0..k)
                    .map(|j| {
                        let mut v = model.variance(j).to_vec();
                        if j == c {
                            v[d] = (v[d].sqrt() + dsigma).powi(2);
                        }
                        v
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            GmmModel::new(model.weights().to_vec(), means, vars).unwrap()
        };
        let mut mu = Vec::new();
        let mut sigma = Vec::new();
        for c in 0..k {
            let w = model.weights()[c];
            for d in 0..dim {
                let s = model.variance(c)[d].sqrt();
                let dmu = (rebuild(c, d, h, 0.0).log_density(x) - rebuild(c, d, -h, 0.0).log_density(x)) / (2.0 * h);
                let ds = (rebuild(c, d, 0.0, h).log_density(x) - rebuild(c, d, 0.0, -h).log_density(x)) / (2.0 * h);
                mu.push(dmu * s / w.sqrt());
                sigma.push(ds * s / (2.0 * w).sqrt());
            }
        }
        (mu, sigma)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / norm.max(1e-300)
    }

    #[test]
    fn fisher_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let model = random_model(3, 5, &mut rng);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let code = FisherCoder::new(&model, FisherOptions::exact()).code(&x);
            let (mu, sigma) = finite_difference_code(&model, &x, 1e-5);
            let kd = 15;
            assert!(rel_err(&code[3..3 + kd], &mu) < 1e-4);
            assert!(rel_err(&code[3 + kd..], &sigma) < 1e-4);
        }
    }

    #[test]
    fn weight_block_matches_softmax_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(4, 2, &mut rng);
        let x = [0.3, -0.8];
        let code = FisherCoder::new(&model, FisherOptions::exact()).code(&x);
        let alpha: Vec<f64> = model.weights().iter().map(|w| w.ln()).collect();
        let h = 1e-6;
        for c in 0..4 {
            let at = |delta: f64| {
                let mut a = alpha.clone();
                a[c] += delta;
                let z: f64 = a.iter().map(|v| v.exp()).sum();
                let w: Vec<f64> = a.iter().map(|v| v.exp() / z).collect();
                GmmModel::new(w, model.means().clone(), Matrix::from_rows(&(0..4).map(|j| model.variance(j).to_vec()).collect::<Vec<_>>()).unwrap())
                    .unwrap()
                    .log_density(&x)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h) / model.weights()[c].sqrt();
            assert!((code[c] - fd).abs() < 1e-6, "{} vs {}", code[c], fd);
        }
    }

    #[test]
    fn far_descriptor_concentrates_on_one_component() {
        let means = Matrix::from_rows(&[[0.0, 0.0], [40.0, 0.0], [0.0, 40.0]]).unwrap();
        let vars = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let model = GmmModel::new(vec![0.3, 0.3, 0.4], means, vars).unwrap();
        let code = FisherCoder::new(&model, FisherOptions::exact()).code(&[40.5, -0.3]);
        // μ and σ blocks; G_α of other components is −√w_k regardless.
        let block = |c: usize| {
            let mu = &code[3 + 2 * c..3 + 2 * c + 2];
            let sg = &code[9 + 2 * c..9 + 2 * c + 2];
            mu.iter().chain(sg).map(|v| v * v).sum::<f64>()
        };
        let total: f64 = (0..3).map(block).sum();
        assert!((block(0) + block(2)) / total < 1e-6);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_fv(&[0.0, 0.0]), vec![0.0, 0.0]);
        let v = normalize_fv(&[4.0, -9.0]);
        assert!((v[0] - 0.5547).abs() < 1e-4 && (v[1] + 0.8321).abs() < 1e-4);
    }

    #[test]
    fn threshold_drops_tiny_posteriors() {
        let means = Matrix::from_rows(&[[0.0], [10.0]]).unwrap();
        let vars = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let model = GmmModel::new(vec![0.5, 0.5], means, vars).unwrap();
        let code = FisherCoder::new(&model, FisherOptions::default()).code(&[0.1]);
        assert_eq!(code[3], 0.0);
        assert_eq!(code[5], 0.0);
        let exact = FisherCoder::new(&model, FisherOptions::exact()).code(&[0.1]);
        assert!(exact[3] != 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn normalized_vectors_have_unit_norm(v in proptest::collection::vec(-1e3..1e3f64, 1..64)) {
            let out = normalize_fv(&v);
            let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
            if v.iter().all(|&x| x == 0.0) {
                prop_assert_eq!(norm, 0.0);
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }
}
