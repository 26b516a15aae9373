//! Empirical characteristic-function estimators and their per-node caches.
//!
//! Three estimators are provided: the plain ECF `E_n[exp(i t'Z)]`, the
//! moment-weighted variant `E_n[i W exp(i t'Z)]`, and the squared-ECF
//! premultiplied log-Hessian combination
//! `-phi_hat(t) E_n[Y Y' exp(i t'Y)] + E_n[Y exp(i t'Y)] E_n[Y exp(i t'Y)]'`,
//! which equals `phi_hat^2 grad grad' log phi_hat` without ever dividing by a
//! near-zero ECF. Caches evaluate each estimator once per quadrature node;
//! likelihood evaluations then reuse them.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use std::path::Path;

use crate::error::{Error, Result};

/// An i.i.d. sample stored row per observation.
#[derive(Debug, Clone)]
pub struct Dataset {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidParameter("dataset needs n >= 1 observations".into()));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("observations need d >= 1 coordinates".into()));
        }
        for r in &rows {
            if r.len() != dim {
                return Err(Error::LengthMismatch { expected: dim, got: r.len() });
            }
            if r.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("observations must be finite".into()));
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn from_column(col: Vec<f64>) -> Result<Self> {
        Self::new(col.into_iter().map(|x| vec![x]).collect())
    }

    /// Load observations from CSV, one row per observation, `d` numeric
    /// columns. Files have no header by default.
    pub fn from_csv(path: &Path, has_header: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| {
                        Error::InvalidParameter(format!(
                            "non-numeric field {f:?} in {}",
                            path.display()
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in &self.rows {
            for (acc, x) in m.iter_mut().zip(r) {
                *acc += x;
            }
        }
        let n = self.n() as f64;
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// Empirical covariance with divisor `n`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mean = self.mean();
        let mut cov = DMatrix::zeros(d, d);
        for r in &self.rows {
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        cov / self.n() as f64
    }
}

/// Plain ECF `(1/n) sum_j exp(i t' Z_j)`.
pub fn ecf_eval(data: &Dataset, t: &[f64]) -> Complex64 {
    assert_eq!(t.len(), data.dim(), "node dimension mismatch");
    let mut acc = Complex64::ZERO;
    for row in data.rows() {
        let phase: f64 = t.iter().zip(row).map(|(a, b)| a * b).sum();
        acc += Complex64::from_polar(1.0, phase);
    }
    acc / data.n() as f64
}

/// Moment-weighted ECF `(1/n) sum_j i W_j exp(i t' Z_j)`; one complex entry
/// per coordinate of `W`.
pub fn ecf_weighted(w_data: &Dataset, z_data: &Dataset, t: &[f64]) -> Result<Vec<Complex64>> {
    if w_data.n() != z_data.n() {
        return Err(Error::LengthMismatch { expected: z_data.n(), got: w_data.n() });
    }
    assert_eq!(t.len(), z_data.dim(), "node dimension mismatch");
    let dw = w_data.dim();
    let mut acc = vec![Complex64::ZERO; dw];
    for (w, z) in w_data.rows().iter().zip(z_data.rows()) {
        let phase: f64 = t.iter().zip(z).map(|(a, b)| a * b).sum();
        let e = Complex64::from_polar(1.0, phase);
        for a in 0..dw {
            acc[a] += w[a] * e;
        }
    }
    let scale = Complex64::I / z_data.n() as f64;
    Ok(acc.into_iter().map(|v| v * scale).collect())
}

/// The squared-ECF premultiplied log-Hessian
/// `-phi_hat(t) E_n[Y Y' e] + E_n[Y e] E_n[Y e]'`; symmetric complex d x d.
pub fn ecf_hess_combo(data: &Dataset, t: &[f64]) -> DMatrix<Complex64> {
    let d = data.dim();
    assert_eq!(t.len(), d, "node dimension mismatch");
    let mut c0 = Complex64::ZERO;
    let mut c1 = vec![Complex64::ZERO; d];
    let mut c2 = DMatrix::<Complex64>::zeros(d, d);
    for row in data.rows() {
        let phase: f64 = t.iter().zip(row).map(|(a, b)| a * b).sum();
        let e = Complex64::from_polar(1.0, phase);
        c0 += e;
        for a in 0..d {
            c1[a] += row[a] * e;
            for b in a..d {
                c2[(a, b)] += row[a] * row[b] * e;
            }
        }
    }
    let n = data.n() as f64;
    let mut combo = DMatrix::<Complex64>::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = (-c0 * c2[(a, b)] + c1[a] * c1[b]) / (n * n);
            combo[(a, b)] = v;
            combo[(b, a)] = v;
        }
    }
    combo
}

/// Which estimators a cache holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheKind {
    Plain,
    Weighted,
    Hess,
}

/// Per-node values of the selected estimators, immutable after construction.
#[derive(Debug, Clone)]
pub struct EcfCache {
    nodes: Vec<Vec<f64>>,
    phi: Vec<Complex64>,
    weighted: Option<Vec<Vec<Complex64>>>,
    hess_combo: Option<Vec<DMatrix<Complex64>>>,
}

impl EcfCache {
    /// Plain ECF of `data` at every node.
    pub fn plain(data: &Dataset, nodes: &[Vec<f64>]) -> Self {
        let phi: Vec<Complex64> = nodes.par_iter().map(|t| ecf_eval(data, t)).collect();
        Self { nodes: nodes.to_vec(), phi, weighted: None, hess_combo: None }
    }

    /// Plain ECF of `z_data` plus the `W`-weighted estimator at every node.
    pub fn weighted(w_data: &Dataset, z_data: &Dataset, nodes: &[Vec<f64>]) -> Result<Self> {
        if w_data.n() != z_data.n() {
            return Err(Error::LengthMismatch { expected: z_data.n(), got: w_data.n() });
        }
        let pairs: Vec<(Complex64, Vec<Complex64>)> = nodes
            .par_iter()
            .map(|t| {
                let phi = ecf_eval(z_data, t);
                let w = ecf_weighted(w_data, z_data, t).expect("lengths checked above");
                (phi, w)
            })
            .collect();
        let (phi, weighted) = pairs.into_iter().unzip();
        Ok(Self { nodes: nodes.to_vec(), phi, weighted: Some(weighted), hess_combo: None })
    }

    /// Plain ECF plus the premultiplied log-Hessian at every node.
    pub fn hess(data: &Dataset, nodes: &[Vec<f64>]) -> Self {
        let pairs: Vec<(Complex64, DMatrix<Complex64>)> = nodes
            .par_iter()
            .map(|t| (ecf_eval(data, t), ecf_hess_combo(data, t)))
            .collect();
        let (phi, hess) = pairs.into_iter().unzip();
        Self { nodes: nodes.to_vec(), phi, weighted: None, hess_combo: Some(hess) }
    }

    /// Fill a cache from analytic functions instead of data. Used to check
    /// identifying restrictions in population mode, where sampling error is
    /// switched off.
    pub fn from_functions(
        nodes: &[Vec<f64>],
        phi: impl Fn(&[f64]) -> Complex64 + Sync,
        weighted: Option<&(dyn Fn(&[f64]) -> Vec<Complex64> + Sync)>,
        hess: Option<&(dyn Fn(&[f64]) -> DMatrix<Complex64> + Sync)>,
    ) -> Self {
        Self {
            nodes: nodes.to_vec(),
            phi: nodes.iter().map(|t| phi(t)).collect(),
            weighted: weighted.map(|f| nodes.iter().map(|t| f(t)).collect()),
            hess_combo: hess.map(|f| nodes.iter().map(|t| f(t)).collect()),
        }
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn phi(&self) -> &[Complex64] {
        &self.phi
    }

    pub fn weighted_values(&self) -> Option<&[Vec<Complex64>]> {
        self.weighted.as_deref()
    }

    pub fn hess_values(&self) -> Option<&[DMatrix<Complex64>]> {
        self.hess_combo.as_deref()
    }
}
