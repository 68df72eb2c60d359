use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, softmax_rows};
use crate::error::{Error, Result};
use crate::model::Dense;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub max_iter: usize,
    /// Stop once the largest gradient entry falls below this.
    pub tol: f64,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    /// Divide (always centred) features by their training deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            tol: 1e-6,
            l2: 1e-4,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::config(
                "probe tol must be positive and l2 non-negative",
            ));
        }
        Ok(())
    }
}

/// Multinomial logistic regression on centred, optionally scaled features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn standardized(&self, features: &Array2<f64>) -> Array2<f64> {
        (features - &self.mean) / &self.scale
    }

    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.mean.len() {
            return Err(Error::shape(format!(
                "probe expects {} features, got {}",
                self.mean.len(),
                features.ncols()
            )));
        }
        Ok(self.standardized(features).dot(&self.weight) + &self.bias)
    }

    pub fn predict_proba(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits(features)?))
    }

    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(self.logits(features)?.outer_iter().map(argmax).collect())
    }

    /// The same affine map expressed on raw features.
    pub fn to_dense(&self) -> Dense {
        let weight = &self.weight / &self.scale.view().insert_axis(Axis(1));
        let bias = &self.bias - &(&self.mean / &self.scale).dot(&self.weight);
        Dense { weight, bias }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub probe: LinearProbe,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Regularized mean cross-entropy and its gradient w.r.t. `(W, b)`.
fn objective(
    x: &Array2<f64>,
    y: &[usize],
    w: &Array2<f64>,
    b: &Array1<f64>,
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let logits = x.dot(w) + b;
    let mut p = softmax_rows(&logits);
    let mut loss = 0.0;
    for (i, &c) in y.iter().enumerate() {
        loss -= p[[i, c]].max(f64::MIN_POSITIVE).ln();
        p[[i, c]] -= 1.0;
    }
    p /= n;
    let gw = x.t().dot(&p) + &(w * l2);
    let gb = p.sum_axis(Axis(0));
    (
        loss / n + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>(),
        gw,
        gb,
    )
}

/// Largest eigenvalue of `A^T A / n` for `A = [x, 1]`, by power iteration.
fn gram_norm(x: &Array2<f64>) -> f64 {
    let n = x.nrows() as f64;
    let d = x.ncols();
    let mut v = Array1::from_elem(d + 1, 1.0 / ((d + 1) as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let av = x.dot(&v.slice(ndarray::s![..d])) + v[d];
        let mut next = Array1::zeros(d + 1);
        next.slice_mut(ndarray::s![..d]).assign(&x.t().dot(&av));
        next[d] = av.sum();
        next /= n;
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let prev = lambda;
        lambda = norm;
        v = next / norm;
        if (lambda - prev).abs() <= 1e-10 * lambda {
            break;
        }
    }
    lambda
}

/// Fit a linear probe by full-batch accelerated gradient descent with step
/// `1/L`, where `L` bounds the curvature of the convex objective.
pub fn train_linear_probe(
    features: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(Error::shape(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Validation(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    let distinct = labels
        .iter()
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if distinct < 2 {
        return Err(Error::Validation(format!(
            "a probe needs at least 2 classes, found {distinct}"
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite features".into()));
    }
    let d = features.ncols();
    // Centering only moves the (unpenalized) bias; scaling changes the fit.
    let mean = features.mean_axis(Axis(0)).expect("non-empty");
    let scale = if cfg.standardize {
        features
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 1e-12 { s } else { 1.0 })
    } else {
        Array1::ones(d)
    };
    let x = (features - &mean) / &scale;

    // Softmax cross-entropy has Hessian bounded by 1/2 of the Gram matrix.
    let step = 1.0 / (0.5 * gram_norm(&x) + cfg.l2).max(1e-12);
    let mut w = Array2::<f64>::zeros((d, n_classes));
    let mut b = Array1::<f64>::zeros(n_classes);
    let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
    let mut iterations = 0;
    for k in 0..cfg.max_iter {
        iterations = k + 1;
        let beta = k as f64 / (k as f64 + 3.0);
        let yw = &w + &((&w - &w_prev) * beta);
        let yb = &b + &((&b - &b_prev) * beta);
        let (_, gw, gb) = objective(&x, labels, &yw, &yb, cfg.l2);
        let gmax = gw
            .iter()
            .chain(gb.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        w_prev = std::mem::replace(&mut w, &yw - &(gw * step));
        b_prev = std::mem::replace(&mut b, &yb - &(gb * step));
        if gmax < cfg.tol {
            break;
        }
    }
    let (final_loss, _, _) = objective(&x, labels, &w, &b, cfg.l2);
    let probe = LinearProbe {
        mean,
        scale,
        weight: w,
        bias: b,
    };
    let preds = probe.predict(features)?;
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(ProbeFit {
        train_accuracy: correct as f64 / labels.len() as f64,
        probe,
        iterations,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_reaches_full_accuracy() {
        let x = array![
            [0.0, 1.0],
            [0.2, 1.1],
            [3.0, -1.0],
            [3.1, -0.8],
            [-2.0, -3.0],
            [-2.2, -3.1]
        ];
        let y = [0, 0, 1, 1, 2, 2];
        let fit = train_linear_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(fit.train_accuracy, 1.0);
    }

    #[test]
    fn identical_features_give_majority() {
        let x = Array2::from_elem((5, 3), 0.7);
        let y = [1, 1, 1, 0, 2];
        let fit = train_linear_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
        assert!((fit.train_accuracy - 0.6).abs() < 1e-12);
        assert_eq!(fit.probe.predict(&x).unwrap(), vec![1; 5]);
    }

    #[test]
    fn single_class_rejected() {
        let x = array![[1.0], [2.0]];
        assert!(matches!(
            train_linear_probe(&x, &[0, 0], 2, &ProbeConfig::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn dense_form_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((20, 4), |_| rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let fit = train_linear_probe(&x, &y, 3, &ProbeConfig::default()).unwrap();
        let dense = fit.probe.to_dense();
        let a = fit.probe.logits(&x).unwrap();
        let b = dense.forward(&x);
        assert!((a - b).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn matches_plain_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        let y: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
        let cfg = ProbeConfig {
            l2: 0.1,
            standardize: false,
            max_iter: 5000,
            tol: 1e-10,
        };
        let fit = train_linear_probe(&x, &y, 3, &cfg).unwrap();
        // Plain gradient descent with a small fixed step, run to convergence.
        let mut w = Array2::<f64>::zeros((3, 3));
        let mut b = Array1::<f64>::zeros(3);
        for _ in 0..200_000 {
            let (_, gw, gb) = objective(&x, &y, &w, &b, cfg.l2);
            w = w - gw * 0.2;
            b = b - gb * 0.2;
        }
        let oracle = LinearProbe {
            mean: Array1::zeros(3),
            scale: Array1::ones(3),
            weight: w,
            bias: b,
        };
        assert_eq!(fit.probe.predict(&x).unwrap(), oracle.predict(&x).unwrap());
        let diff = (&fit.probe.weight - &oracle.weight)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-6, "weights differ by {diff}");
    }
}
