//! Hand-differentiated building blocks: linear maps, tanh, max-pooling,
//! row softmax, and the reparameterization draw.

use super::{standard_normal, DenseArray, ParameterStore, LOGVAR_CLAMP};
use crate::error::{Error, Result};
use rand::Rng;

/// Descriptive layer configuration. The gradient-check suite enumerates
/// these kinds; `validate` enforces the width invariants and
/// `chain_consistent` checks that stacked widths line up.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// Per-point MLP applied independently to every row.
    SharedPointMlp { widths: Vec<usize> },
    /// Attention kernel of the given feature width, optionally restricted
    /// to a kNN neighborhood.
    Attention {
        feature_dim: usize,
        neighborhood: Option<usize>,
    },
    /// Mean / log-variance head over a feature column.
    VariationalHead { in_width: usize, latent: usize },
    /// Bounded position-offset head.
    RegressionHead {
        in_width: usize,
        hidden: usize,
        out_width: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::SharedPointMlp { widths } => {
                widths.len() >= 2 && widths.iter().all(|&w| w >= 1)
            }
            LayerSpec::Attention {
                feature_dim,
                neighborhood,
            } => *feature_dim >= 1 && neighborhood.map_or(true, |k| k >= 1),
            LayerSpec::VariationalHead { in_width, latent } => *in_width >= 1 && *latent >= 1,
            LayerSpec::RegressionHead {
                in_width,
                hidden,
                out_width,
            } => *in_width >= 1 && *hidden >= 1 && *out_width >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid layer spec {self:?}")))
        }
    }

    pub fn in_width(&self) -> usize {
        match self {
            LayerSpec::SharedPointMlp { widths } => widths[0],
            LayerSpec::Attention { feature_dim, .. } => *feature_dim,
            LayerSpec::VariationalHead { in_width, .. } => *in_width,
            LayerSpec::RegressionHead { in_width, .. } => *in_width,
        }
    }

    pub fn out_width(&self) -> usize {
        match self {
            LayerSpec::SharedPointMlp { widths } => *widths.last().unwrap(),
            LayerSpec::Attention { feature_dim, .. } => *feature_dim,
            LayerSpec::VariationalHead { latent, .. } => *latent,
            LayerSpec::RegressionHead { out_width, .. } => *out_width,
        }
    }

    /// Check that each layer's output width feeds the next one's input.
    pub fn chain_consistent(specs: &[LayerSpec]) -> Result<()> {
        for spec in specs {
            spec.validate()?;
        }
        for pair in specs.windows(2) {
            if pair[0].out_width() != pair[1].in_width() {
                return Err(Error::invalid(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].out_width(),
                    pair[1].in_width()
                )));
            }
        }
        Ok(())
    }
}

/// Weight initialization for [`Linear`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearInit {
    /// Gaussian with std `sqrt(2 / (in + out))`.
    Xavier,
    /// All zeros (used for offset heads that must start as the identity).
    Zeros,
}

/// A dense layer `y = x W + b` applied row-wise, with parameters named
/// `<name>.w` and `<name>.b` in the store.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Create the layer and register its parameters (no-op when the store
    /// already holds them, e.g. after a checkpoint load).
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: LinearInit,
        rng: &mut impl Rng,
    ) -> Self {
        let w_name = format!("{name}.w");
        let b_name = format!("{name}.b");
        if !store.has(&w_name) {
            let w = match init {
                LinearInit::Xavier => {
                    let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
                    DenseArray::randn(&[in_dim, out_dim], std, rng)
                }
                LinearInit::Zeros => DenseArray::zeros(&[in_dim, out_dim]),
            };
            store.register(&w_name, w);
            store.register(&b_name, DenseArray::zeros(&[out_dim]));
        }
        Linear {
            name: name.to_string(),
            in_dim,
            out_dim,
        }
    }

    fn w_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    /// `x: n×in -> n×out`. Errors on a shape mismatch, naming the layer.
    pub fn forward(&self, store: &ParameterStore, x: &DenseArray) -> Result<DenseArray> {
        if x.shape().len() != 2 || x.cols() != self.in_dim {
            return Err(Error::ShapeMismatch {
                layer: self.name.clone(),
                expected: vec![x.shape().first().copied().unwrap_or(0), self.in_dim],
                actual: x.shape().to_vec(),
            });
        }
        let w = store.value(&self.w_name());
        let b = store.value(&self.b_name());
        let mut y = x.matmul(w);
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            for (v, &bias) in row.iter_mut().zip(b.as_slice()) {
                *v += bias;
            }
        }
        Ok(y)
    }

    /// Accumulates `dW = x^T g` and `db = Σ_rows g` into the store and
    /// returns `dx = g W^T`.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        x: &DenseArray,
        grad_out: &DenseArray,
    ) -> DenseArray {
        let dw = x.tmatmul(grad_out);
        let mut db = DenseArray::zeros(&[self.out_dim]);
        for i in 0..grad_out.rows() {
            for (d, &g) in db.as_mut_slice().iter_mut().zip(grad_out.row(i)) {
                *d += g;
            }
        }
        let dx = grad_out.matmul_t(store.value(&self.w_name()));
        store.accumulate_grad(&self.w_name(), &dw);
        store.accumulate_grad(&self.b_name(), &db);
        dx
    }
}

pub fn tanh_forward(x: &DenseArray) -> DenseArray {
    x.map(f64::tanh)
}

/// Backward through tanh given the forward *output* `y`.
pub fn tanh_backward(y: &DenseArray, grad_y: &DenseArray) -> DenseArray {
    assert_eq!(y.shape(), grad_y.shape());
    let data = y
        .as_slice()
        .iter()
        .zip(grad_y.as_slice())
        .map(|(&yv, &g)| g * (1.0 - yv * yv))
        .collect();
    DenseArray::from_vec(y.shape(), data).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Column-wise max over all rows: `n×f -> 1×f`, returning the argmax row
/// per column (ties to the lowest row, so the subgradient routing is
/// deterministic).
pub fn maxpool_rows(x: &DenseArray) -> (DenseArray, Vec<usize>) {
    let (n, f) = (x.rows(), x.cols());
    assert!(n >= 1);
    let mut out = DenseArray::zeros(&[1, f]);
    let mut argmax = vec![0usize; f];
    for j in 0..f {
        let mut best = x.row(0)[j];
        let mut best_i = 0;
        for i in 1..n {
            let v = x.row(i)[j];
            if v > best {
                best = v;
                best_i = i;
            }
        }
        out.as_mut_slice()[j] = best;
        argmax[j] = best_i;
    }
    (out, argmax)
}

/// Gradient routes entirely to the argmax row of each column.
pub fn maxpool_rows_backward(argmax: &[usize], n: usize, grad_out: &DenseArray) -> DenseArray {
    let f = grad_out.cols();
    let mut grad = DenseArray::zeros(&[n, f]);
    for (j, &i) in argmax.iter().enumerate() {
        grad.row_mut(i)[j] += grad_out.row(0)[j];
    }
    grad
}

/// Max over fixed-size segments of rows: `(n*k)×f -> n×f`. Returns the
/// absolute argmax row index per output entry.
pub fn maxpool_segments(x: &DenseArray, k: usize) -> (DenseArray, Vec<usize>) {
    let (nk, f) = (x.rows(), x.cols());
    assert!(k >= 1 && nk % k == 0, "segment pooling needs n*k rows");
    let n = nk / k;
    let mut out = DenseArray::zeros(&[n, f]);
    let mut argmax = vec![0usize; n * f];
    for s in 0..n {
        for j in 0..f {
            let mut best = x.row(s * k)[j];
            let mut best_r = s * k;
            for r in (s * k + 1)..((s + 1) * k) {
                let v = x.row(r)[j];
                if v > best {
                    best = v;
                    best_r = r;
                }
            }
            out.row_mut(s)[j] = best;
            argmax[s * f + j] = best_r;
        }
    }
    (out, argmax)
}

pub fn maxpool_segments_backward(
    argmax: &[usize],
    rows: usize,
    grad_out: &DenseArray,
) -> DenseArray {
    let (n, f) = (grad_out.rows(), grad_out.cols());
    let mut grad = DenseArray::zeros(&[rows, f]);
    for s in 0..n {
        for j in 0..f {
            grad.row_mut(argmax[s * f + j])[j] += grad_out.row(s)[j];
        }
    }
    grad
}

/// Row softmax with max-subtraction. Every output row is positive and sums
/// to 1 within rounding.
pub fn softmax_rows(a: &DenseArray) -> DenseArray {
    let (n, m) = (a.rows(), a.cols());
    let mut out = DenseArray::zeros(&[n, m]);
    for i in 0..n {
        let row = a.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out_row = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Backward through row softmax given the forward output `y`:
/// `dx_ij = y_ij (g_ij - Σ_k g_ik y_ik)`.
pub fn softmax_rows_backward(y: &DenseArray, grad_y: &DenseArray) -> DenseArray {
    assert_eq!(y.shape(), grad_y.shape());
    let (n, m) = (y.rows(), y.cols());
    let mut grad = DenseArray::zeros(&[n, m]);
    for i in 0..n {
        let yr = y.row(i);
        let gr = grad_y.row(i);
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        let out = grad.row_mut(i);
        for j in 0..m {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    grad
}

/// Reparameterized Gaussian draw: `mu + exp(logvar / 2) * eps` with
/// `eps ~ N(0, 1)` from the supplied rng. Log-variances are clamped to
/// `[-LOGVAR_CLAMP, LOGVAR_CLAMP]` before exponentiation.
pub fn reparameterize(mu: &DenseArray, logvar: &DenseArray, rng: &mut impl Rng) -> DenseArray {
    assert_eq!(
        mu.shape(),
        logvar.shape(),
        "reparameterize requires matching shapes"
    );
    let data = mu
        .as_slice()
        .iter()
        .zip(logvar.as_slice())
        .map(|(&m, &lv)| {
            let lv = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            m + (lv / 2.0).exp() * standard_normal(rng)
        })
        .collect();
    DenseArray::from_vec(mu.shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn linear_zero_weights_zero_output() {
        let mut store = ParameterStore::new();
        let mut rng = StdRng::seed_from_u64(1);
        let layer = Linear::new(&mut store, "l", 3, 2, LinearInit::Zeros, &mut rng);
        let x = DenseArray::randn(&[4, 3], 1.0, &mut rng);
        let y = layer.forward(&store, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        // Input gradient is also zero when W = 0.
        let g = DenseArray::randn(&[4, 2], 1.0, &mut rng);
        let dx = layer.backward(&mut store, &x, &g);
        assert!(dx.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_shape_mismatch_names_layer() {
        let mut store = ParameterStore::new();
        let mut rng = StdRng::seed_from_u64(2);
        let layer = Linear::new(&mut store, "proj", 3, 2, LinearInit::Xavier, &mut rng);
        let bad = DenseArray::zeros(&[4, 5]);
        let err = layer.forward(&store, &bad).unwrap_err();
        assert!(err.to_string().contains("proj"), "{err}");
    }

    #[test]
    fn softmax_uniform_row() {
        let a = DenseArray::zeros(&[1, 5]);
        let y = softmax_rows(&a);
        for &v in y.as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let a = DenseArray::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let y = softmax_rows(&a);
        assert!((y.as_slice()[0] - 1.0).abs() < 1e-9);
        assert!(y.as_slice()[1] < 1e-9);
        assert!(y.all_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        let a = DenseArray::randn(&[6, 9], 2.0, &mut rng);
        let y = softmax_rows(&a);
        for i in 0..6 {
            let sum: f64 = y.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            // Naive exp/sum oracle without max subtraction.
            let exps: Vec<f64> = a.row(i).iter().map(|&v| v.exp()).collect();
            let total: f64 = exps.iter().sum();
            for (j, &e) in exps.iter().enumerate() {
                assert!((y.row(i)[j] - e / total).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = DenseArray::from_vec(&[3, 2], vec![1.0, 5.0, 9.0, 2.0, 4.0, 7.0]).unwrap();
        let (y, argmax) = maxpool_rows(&x);
        assert_eq!(y.as_slice(), &[9.0, 7.0]);
        assert_eq!(argmax, vec![1, 2]);
        let g = DenseArray::from_vec(&[1, 2], vec![10.0, 20.0]).unwrap();
        let dx = maxpool_rows_backward(&argmax, 3, &g);
        assert_eq!(dx.as_slice(), &[0.0, 0.0, 10.0, 0.0, 0.0, 20.0]);
    }

    #[test]
    fn segment_maxpool_matches_per_segment_rows() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = DenseArray::randn(&[6, 3], 1.0, &mut rng);
        let (y, argmax) = maxpool_segments(&x, 3);
        assert_eq!(y.shape(), &[2, 3]);
        for s in 0..2 {
            for j in 0..3 {
                let rows: Vec<f64> = (0..3).map(|r| x.row(s * 3 + r)[j]).collect();
                let best = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(y.row(s)[j], best);
                assert_eq!(x.row(argmax[s * 3 + j])[j], best);
            }
        }
    }

    #[test]
    fn reparameterize_collapsed_variance_returns_mu() {
        let mut rng = StdRng::seed_from_u64(8);
        let mu = DenseArray::randn(&[4, 3], 1.0, &mut rng);
        let logvar = mu.map(|_| -LOGVAR_CLAMP);
        let out = reparameterize(&mu, &logvar, &mut rng);
        for (o, m) in out.as_slice().iter().zip(mu.as_slice()) {
            assert!((o - m).abs() < 1e-4, "collapsed draw strayed: {o} vs {m}");
        }
    }

    #[test]
    fn reparameterize_is_deterministic_per_seed() {
        let mu = DenseArray::zeros(&[2, 5]);
        let logvar = DenseArray::zeros(&[2, 5]);
        let a = reparameterize(&mu, &logvar, &mut StdRng::seed_from_u64(42));
        let b = reparameterize(&mu, &logvar, &mut StdRng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn reparameterize_sample_mean_approaches_mu() {
        let mut rng = StdRng::seed_from_u64(13);
        let mu = DenseArray::from_vec(&[1, 1], vec![0.7]).unwrap();
        let logvar = DenseArray::zeros(&[1, 1]);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| reparameterize(&mu, &logvar, &mut rng).as_slice()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.7).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::SharedPointMlp { widths: vec![3, 32] }.validate().is_ok());
        assert!(LayerSpec::SharedPointMlp { widths: vec![3] }.validate().is_err());
        assert!(LayerSpec::Attention { feature_dim: 0, neighborhood: None }
            .validate()
            .is_err());
        LayerSpec::chain_consistent(&[
            LayerSpec::SharedPointMlp { widths: vec![3, 32] },
            LayerSpec::Attention { feature_dim: 32, neighborhood: Some(8) },
            LayerSpec::VariationalHead { in_width: 32, latent: 16 },
        ])
        .unwrap();
        assert!(LayerSpec::chain_consistent(&[
            LayerSpec::SharedPointMlp { widths: vec![3, 32] },
            LayerSpec::VariationalHead { in_width: 64, latent: 16 },
        ])
        .is_err());
    }
}
