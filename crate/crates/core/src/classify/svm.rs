//! ℓ2-regularized hinge-loss linear SVMs trained by dual coordinate
//! descent, one per category against the rest.
//!
//! The bias is learned as the weight of a constant feature equal to 1, so
//! it is regularized together with `w`. Each epoch visits the examples in a
//! permutation drawn from the seeded RNG; training stops once the spread of
//! the projected dual gradient, `max PG − min PG`, falls to `tol`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::parallel::{self, Parallelism};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    #[serde(rename = "C")]
    pub c: f64,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            tol: 1e-3,
            max_epochs: 2000,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    /// False for categories with no positive or no negative training
    /// example; their weights and bias are zero.
    pub trainable: Vec<bool>,
    pub config: SvmConfig,
}

impl LinearModel {
    pub fn num_categories(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("model serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

struct Binary {
    w: Vec<f64>,
    b: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn train_binary(x: &Matrix, y: &[f64], cfg: &SvmConfig, stream: u64) -> Binary {
    let n = x.rows();
    let mut w = vec![0.0; x.cols()];
    let mut b = 0.0;
    let mut alpha = vec![0.0; n];
    let qd: Vec<f64> = x.iter_rows().map(|r| dot(r, r) + 1.0).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    for _ in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut pg_max, mut pg_min) = (f64::NEG_INFINITY, f64::INFINITY);
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (dot(&w, xi) + b) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.c {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / qd[i]).clamp(0.0, cfg.c);
                let step = (alpha[i] - old) * y[i];
                for (wj, xj) in w.iter_mut().zip(xi) {
                    *wj += step * xj;
                }
                b += step;
            }
        }
        if pg_max - pg_min <= cfg.tol {
            break;
        }
    }
    Binary { w, b }
}

/// Primal objective `½(‖w‖² + b²) + C Σ max(0, 1 − y(wᵀx + b))`.
pub fn primal_objective(x: &Matrix, y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let hinge: f64 = x
        .iter_rows()
        .zip(y)
        .map(|(r, &yi)| (1.0 - yi * (dot(w, r) + b)).max(0.0))
        .sum();
    0.5 * (dot(w, w) + b * b) + c * hinge
}

/// Trains one binary SVM per category. `labels[i]` is the label set of row
/// `i` of `features`.
pub fn train_ovr(features: &Matrix, labels: &[Vec<usize>], num_categories: usize, cfg: &SvmConfig) -> Result<LinearModel> {
    if features.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: features.rows(),
            got: labels.len(),
        });
    }
    if !(cfg.c > 0.0 && cfg.c.is_finite()) {
        return Err(Error::Config(format!("SVM C must be positive, got {}", cfg.c)));
    }
    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite training feature".into()));
    }
    let per_category = parallel::map_range(cfg.parallelism, num_categories, |cat| {
        let y: Vec<f64> = labels
            .iter()
            .map(|l| if l.contains(&cat) { 1.0 } else { -1.0 })
            .collect();
        let has_pos = y.iter().any(|&v| v > 0.0);
        let has_neg = y.iter().any(|&v| v < 0.0);
        if !(has_pos && has_neg) {
            return (None, false);
        }
        (Some(train_binary(features, &y, cfg, cat as u64)), true)
    });
    let mut weights = Vec::with_capacity(num_categories);
    let mut biases = Vec::with_capacity(num_categories);
    let mut trainable = Vec::with_capacity(num_categories);
    for (binary, ok) in per_category {
        match binary {
            Some(Binary { w, b }) => {
                weights.push(w);
                biases.push(b);
            }
            None => {
                weights.push(vec![0.0; features.cols()]);
                biases.push(0.0);
            }
        }
        trainable.push(ok);
    }
    if weights.iter().flatten().chain(&biases).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("SVM training diverged".into()));
    }
    Ok(LinearModel {
        weights,
        biases,
        trainable,
        config: *cfg,
    })
}

/// `wᵀx + b` for every category.
pub fn score(model: &LinearModel, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: feature.len(),
        });
    }
    Ok(model
        .weights
        .iter()
        .zip(&model.biases)
        .map(|(w, b)| dot(w, feature) + b)
        .collect())
}

/// Scores every row; the result is `rows × categories`.
pub fn score_all(model: &LinearModel, features: &Matrix) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = features.iter_rows().map(|r| score(model, r)).collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, model.num_categories()));
    }
    Matrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn separable(n: usize, dim: usize, seed: u64) -> (Matrix, Vec<Vec<usize>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        while rows.len() < n {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m = dot(&normal, &x);
            if m.abs() < 0.1 {
                continue;
            }
            labels.push(vec![usize::from(m > 0.0)]);
            rows.push(x);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let x = Matrix::from_rows(&[[2.0, 1.0], [3.0, 2.5], [2.5, 3.0], [-1.0, -2.0], [-2.0, -0.5], [-3.0, -3.0]]).unwrap();
        let labels = vec![vec![1], vec![1], vec![1], vec![0], vec![0], vec![0]];
        let model = train_ovr(&x, &labels, 2, &SvmConfig::default()).unwrap();
        for (r, l) in x.iter_rows().zip(&labels) {
            let s = score(&model, r).unwrap();
            let predicted = if s[1] > s[0] { 1 } else { 0 };
            assert_eq!(predicted, l[0]);
            assert_eq!(s[1] > 0.0, l[0] == 1);
        }
    }

    #[test]
    fn duplicated_rows_keep_the_ranking() {
        // widely separated, so both problems reach the same hard-margin solution
        let (x, labels) = separable(60, 5, 3);
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| r.iter().map(|v| 10.0 * v).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let doubled = Matrix::from_rows(&[rows.clone(), rows].concat()).unwrap();
        let doubled_labels = [labels.clone(), labels.clone()].concat();
        let cfg = SvmConfig {
            c: 1e4,
            tol: 1e-9,
            max_epochs: 100_000,
            ..SvmConfig::default()
        };
        let a = train_ovr(&x, &labels, 2, &cfg).unwrap();
        let b = train_ovr(&doubled, &doubled_labels, 2, &cfg).unwrap();
        let sa = score_all(&a, &x).unwrap();
        let sb = score_all(&b, &x).unwrap();
        // the solver stops at a finite tolerance, so only orderings that are
        // resolved beyond it must agree
        for cat in 0..2 {
            for i in 0..x.rows() {
                for j in 0..x.rows() {
                    if sa.row(i)[cat] > sa.row(j)[cat] + 1e-4 {
                        assert!(sb.row(i)[cat] > sb.row(j)[cat], "{i} {j}");
                    }
                }
                assert!((sa.row(i)[cat] - sb.row(i)[cat]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn objective_converges_to_tight_reference() {
        let (x, labels) = separable(200, 50, 11);
        let y: Vec<f64> = labels.iter().map(|l| if l[0] == 1 { 1.0 } else { -1.0 }).collect();
        let loose = SvmConfig::default();
        let tight = SvmConfig {
            tol: 1e-10,
            max_epochs: 200_000,
            ..SvmConfig::default()
        };
        let a = train_binary(&x, &y, &loose, 0);
        let b = train_binary(&x, &y, &tight, 0);
        let fa = primal_objective(&x, &y, &a.w, a.b, 1.0);
        let fb = primal_objective(&x, &y, &b.w, b.b, 1.0);
        assert!(fa >= fb - 1e-9);
        assert!((fa - fb) / fb < 1e-3, "{fa} vs {fb}");
    }

    #[test]
    fn untrainable_categories_are_flagged() {
        let x = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let model = train_ovr(&x, &[vec![0], vec![0]], 2, &SvmConfig::default()).unwrap();
        assert_eq!(model.trainable, vec![false, false]);
        assert!(model.weights.iter().flatten().all(|&w| w == 0.0));
    }

    #[test]
    fn training_is_deterministic_across_policies() {
        let (x, labels) = separable(80, 6, 5);
        let seq = SvmConfig {
            parallelism: Parallelism::Sequential,
            seed: 9,
            ..SvmConfig::default()
        };
        let par = SvmConfig {
            parallelism: Parallelism::Parallel,
            ..seq
        };
        let a = train_ovr(&x, &labels, 2, &seq).unwrap();
        let b = train_ovr(&x, &labels, 2, &par).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.biases, b.biases);
    }

    #[test]
    fn score_is_affine() {
        let model = LinearModel {
            weights: vec![vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]],
            biases: vec![0.25, -1.0],
            trainable: vec![true, true],
            config: SvmConfig::default(),
        };
        assert_eq!(score(&model, &[0.0; 3]).unwrap(), vec![0.25, -1.0]);
        let x = [0.3, -0.7, 2.0];
        let s1 = score(&model, &x).unwrap();
        let s3 = score(&model, &x.map(|v| 3.0 * v)).unwrap();
        for c in 0..2 {
            let lhs = s3[c] - model.biases[c];
            let rhs = 3.0 * (s1[c] - model.biases[c]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
        assert!(score(&model, &[1.0]).is_err());
    }

    #[test]
    fn score_matches_explicit_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = LinearModel {
            weights: (0..3).map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            biases: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            trainable: vec![true; 3],
            config: SvmConfig::default(),
        };
        for _ in 0..50 {
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = score(&model, &x).unwrap();
            for c in 0..3 {
                let mut acc = model.biases[c];
                for j in 0..20 {
                    acc += model.weights[c][j] * x[j];
                }
                assert!((s[c] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_json_round_trip() {
        let (x, labels) = separable(30, 3, 1);
        let model = train_ovr(&x, &labels, 2, &SvmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.json");
        model.save(&path).unwrap();
        let back = LinearModel::load(&path).unwrap();
        assert_eq!(back.weights, model.weights);
        assert_eq!(back.biases, model.biases);
    }
}
