//! Minimal dense-array neural runtime: row-major arrays, a named parameter
//! store with Adam state, hand-written layers, and a finite-difference
//! harness that keeps every analytic gradient honest.
//!
//! There is no computation graph. Each composite module (encoder,
//! attention blocks, regression heads) writes its own forward pass with an
//! explicit cache and its own backward pass; the gradient-check suite is
//! what makes that style safe.

pub(crate) mod attention;
mod gradcheck;
mod layers;

pub use gradcheck::{max_input_rel_err, max_param_rel_err, GRAD_CHECK_STEP};
pub use layers::{
    maxpool_rows, maxpool_rows_backward, maxpool_segments, maxpool_segments_backward,
    reparameterize, sigmoid, softmax_rows, softmax_rows_backward, tanh_backward, tanh_forward,
    LayerSpec, Linear, LinearInit,
};

use crate::error::{Error, Result};
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Clamp range for log-variances; keeps `exp` far from overflow and
/// underflow.
pub const LOGVAR_CLAMP: f64 = 20.0;

/// A row-major dense array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch {
                layer: "DenseArray::from_vec".to_string(),
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(DenseArray {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Gaussian-initialized array (Box-Muller over the given rng).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| std * standard_normal(rng)).collect();
        DenseArray {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows of a 2-D array.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a 2-D array");
        self.shape[0]
    }

    /// Columns of a 2-D array.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a 2-D array");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// `self (n×k) · other (k×m) -> n×m`.
    pub fn matmul(&self, other: &DenseArray) -> DenseArray {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = DenseArray::zeros(&[n, m]);
        for i in 0..n {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for (l, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * m..(l + 1) * m];
                for j in 0..m {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self^T · other` where `self: n×i`, `other: n×o`, giving `i×o`.
    /// Used for weight gradients (`dW = x^T · grad_out`).
    pub fn tmatmul(&self, other: &DenseArray) -> DenseArray {
        let (n, i_dim) = (self.rows(), self.cols());
        let (n2, o_dim) = (other.rows(), other.cols());
        assert_eq!(n, n2, "tmatmul row counts differ: {n} vs {n2}");
        let mut out = DenseArray::zeros(&[i_dim, o_dim]);
        for r in 0..n {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * o_dim..(i + 1) * o_dim];
                for j in 0..o_dim {
                    o_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `self (n×o) · other^T (m×o) -> n×m`. Used for input gradients
    /// (`dx = grad_out · W^T`) and attention scores.
    pub fn matmul_t(&self, other: &DenseArray) -> DenseArray {
        let (n, o_dim) = (self.rows(), self.cols());
        let (m, o2) = (other.rows(), other.cols());
        assert_eq!(o_dim, o2, "matmul_t inner dimensions differ: {o_dim} vs {o2}");
        let mut out = DenseArray::zeros(&[n, m]);
        for i in 0..n {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * m..(i + 1) * m];
            for j in 0..m {
                let b_row = other.row(j);
                let mut acc = 0.0;
                for l in 0..o_dim {
                    acc += a_row[l] * b_row[l];
                }
                o_row[j] = acc;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &DenseArray) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseArray {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One standard normal draw via Box-Muller. Keeping this in-crate (rather
/// than pulling a distributions crate) pins the exact byte-level draw
/// sequence that the determinism contract relies on.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Debug, Clone)]
struct ParamEntry {
    value: DenseArray,
    grad: DenseArray,
    moment1: DenseArray,
    moment2: DenseArray,
}

/// Named parameters with paired gradient buffers and Adam state.
/// Iteration order is always lexicographic by name, so updates and
/// checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Panics on duplicate names: layer construction
    /// controls the namespace.
    pub fn register(&mut self, name: &str, value: DenseArray) {
        let shape = value.shape().to_vec();
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry {
                grad: DenseArray::zeros(&shape),
                moment1: DenseArray::zeros(&shape),
                moment2: DenseArray::zeros(&shape),
                value,
            },
        );
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn value(&self, name: &str) -> &DenseArray {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut DenseArray {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .value
    }

    pub fn grad(&self, name: &str) -> &DenseArray {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .grad
    }

    /// Add `delta` into the gradient buffer of `name`.
    pub fn accumulate_grad(&mut self, name: &str, delta: &DenseArray) {
        let entry = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        entry.grad.add_assign(delta);
    }

    pub fn zero_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    /// One Adam update with bias correction over every parameter, from the
    /// currently accumulated gradients.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for entry in self.entries.values_mut() {
            for i in 0..entry.value.data.len() {
                let g = entry.grad.data[i];
                let m = beta1 * entry.moment1.data[i] + (1.0 - beta1) * g;
                let v = beta2 * entry.moment2.data[i] + (1.0 - beta2) * g * g;
                entry.moment1.data[i] = m;
                entry.moment2.data[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                entry.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    /// Write a checkpoint: a text header per array followed by its values
    /// in full precision (17 significant digits round-trips f64 exactly).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "dsm-checkpoint v1")?;
        writeln!(w, "arrays {}", self.entries.len())?;
        for (name, entry) in &self.entries {
            write!(w, "param {name} {}", entry.value.shape.len())?;
            for d in &entry.value.shape {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
            let mut first = true;
            for v in &entry.value.data {
                if !first {
                    write!(w, " ")?;
                }
                write!(w, "{v:.17e}")?;
                first = false;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Load a checkpoint written by [`ParameterStore::save`]. Gradients and
    /// optimizer state start fresh.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let perr = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut next_line = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(t))) => Ok((i + 1, t)),
                Some((i, Err(e))) => Err(perr(i + 1, e.to_string())),
                None => Err(perr(0, format!("unexpected end of file, expected {what}"))),
            }
        };

        let (l1, magic) = next_line("checkpoint magic")?;
        if magic.trim() != "dsm-checkpoint v1" {
            return Err(perr(l1, "not a dsm checkpoint".to_string()));
        }
        let (l2, count_line) = next_line("array count")?;
        let count: usize = count_line
            .trim()
            .strip_prefix("arrays ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| perr(l2, "malformed array count".to_string()))?;

        let mut store = ParameterStore::new();
        for _ in 0..count {
            let (lh, header) = next_line("param header")?;
            let mut parts = header.split_whitespace();
            if parts.next() != Some("param") {
                return Err(perr(lh, "expected `param` header".to_string()));
            }
            let name = parts
                .next()
                .ok_or_else(|| perr(lh, "missing parameter name".to_string()))?
                .to_string();
            let ndim: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| perr(lh, "missing dimension count".to_string()))?;
            let shape: Vec<usize> = parts
                .map(|v| v.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(lh, format!("bad shape: {e}")))?;
            if shape.len() != ndim {
                return Err(perr(lh, "shape length disagrees with dimension count".into()));
            }
            let (ld, data_line) = next_line("parameter data")?;
            let data: Vec<f64> = data_line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| perr(ld, format!("bad value: {e}")))?;
            let array =
                DenseArray::from_vec(&shape, data).map_err(|e| perr(ld, e.to_string()))?;
            if !array.all_finite() {
                return Err(perr(ld, format!("non-finite values in `{name}`")));
            }
            store.register(&name, array);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;
    use tempfile::tempdir;

    #[test]
    fn from_vec_checks_length() {
        assert!(DenseArray::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(DenseArray::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_small_known() {
        let a = DenseArray::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseArray::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn tmatmul_and_matmul_t_agree_with_explicit_transpose() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = DenseArray::randn(&[4, 3], 1.0, &mut rng);
        let b = DenseArray::randn(&[4, 5], 1.0, &mut rng);
        let at_b = a.tmatmul(&b); // 3×5
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for r in 0..4 {
                    acc += a.row(r)[i] * b.row(r)[j];
                }
                assert!((at_b.row(i)[j] - acc).abs() < 1e-12);
            }
        }
        let c = DenseArray::randn(&[6, 5], 1.0, &mut rng);
        let b_ct = b.matmul_t(&c); // 4×6
        for i in 0..4 {
            for j in 0..6 {
                let mut acc = 0.0;
                for l in 0..5 {
                    acc += b.row(i)[l] * c.row(j)[l];
                }
                assert!((b_ct.row(i)[j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut store = ParameterStore::new();
        store.register("w", DenseArray::from_vec(&[2], vec![1.5, -2.5]).unwrap());
        let before = store.value("w").clone();
        store.adam_step(0.1, 0.9, 0.999, 1e-8);
        assert_eq!(store.value("w"), &before);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut store = ParameterStore::new();
        store.register("w", DenseArray::from_vec(&[1], vec![0.0]).unwrap());
        store.accumulate_grad("w", &DenseArray::from_vec(&[1], vec![1.0]).unwrap());
        store.adam_step(0.1, 0.9, 0.999, 1e-8);
        let w = store.value("w").as_slice()[0];
        // Bias-corrected first step moves by ~lr regardless of the raw
        // gradient magnitude.
        assert!((w + 0.1).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut store = ParameterStore::new();
        store.register("w", DenseArray::from_vec(&[1], vec![5.0]).unwrap());
        for _ in 0..200 {
            store.zero_grads();
            let w = store.value("w").as_slice()[0];
            // f(w) = w^2, df/dw = 2w
            store.accumulate_grad("w", &DenseArray::from_vec(&[1], vec![2.0 * w]).unwrap());
            store.adam_step(0.05, 0.9, 0.999, 1e-8);
        }
        let w = store.value("w").as_slice()[0];
        assert!(w.abs() < 0.1, "w = {w}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut store = ParameterStore::new();
        store.register("layer.b", DenseArray::randn(&[7], 0.3, &mut rng));
        store.register("layer.w", DenseArray::randn(&[3, 7], 1.7, &mut rng));
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.txt");
        store.save(&path).unwrap();
        let loaded = ParameterStore::load(&path).unwrap();
        assert_eq!(
            loaded.names().collect::<Vec<_>>(),
            vec!["layer.b", "layer.w"]
        );
        for name in ["layer.b", "layer.w"] {
            assert_eq!(store.value(name), loaded.value(name), "{name} differs");
        }
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = StdRng::seed_from_u64(13);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }
}
