//! Finite Gaussian mixtures with a shared covariance: densities,
//! characteristic functions and the log-CF derivatives consumed by the
//! quasi-likelihoods.
//!
//! A mixture is `sum_j p_j N(mu_j, Sigma)`. Its characteristic function
//! factors as `exp(-t' Sigma t / 2) * sum_j p_j exp(i t' mu_j)`, so the
//! Gaussian envelope is pulled out of every component sum and the remaining
//! accumulation has unit-modulus terms. Logarithmic derivatives are computed
//! through ratio formulas, never through a complex logarithm.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default floor under which a candidate CF magnitude is treated as
/// degenerate by the log-derivative evaluators.
pub const CF_FLOOR: f64 = 1e-12;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A finite Gaussian mixture: simplex weights, component locations and one
/// shared positive-definite covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MixtureParamsRepr", into = "MixtureParamsRepr")]
pub struct MixtureParams {
    weights: Vec<f64>,
    atoms: Vec<Vec<f64>>,
    covariance: DMatrix<f64>,
    // Lower Cholesky factor; PD is validated once at construction.
    chol: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct MixtureParamsRepr {
    weights: Vec<f64>,
    atoms: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
}

impl TryFrom<MixtureParamsRepr> for MixtureParams {
    type Error = String;

    fn try_from(r: MixtureParamsRepr) -> std::result::Result<Self, String> {
        let d = r.covariance.len();
        let flat: Vec<f64> = r.covariance.iter().flatten().copied().collect();
        if flat.len() != d * d {
            return Err("covariance rows must all have length d".into());
        }
        let cov = DMatrix::from_row_slice(d, d, &flat);
        MixtureParams::new(r.weights, r.atoms, cov).map_err(|e| e.to_string())
    }
}

impl From<MixtureParams> for MixtureParamsRepr {
    fn from(p: MixtureParams) -> Self {
        let d = p.dim();
        let covariance = (0..d)
            .map(|a| (0..d).map(|b| p.covariance[(a, b)]).collect())
            .collect();
        MixtureParamsRepr {
            weights: p.weights,
            atoms: p.atoms,
            covariance,
        }
    }
}

impl MixtureParams {
    pub fn new(weights: Vec<f64>, atoms: Vec<Vec<f64>>, covariance: DMatrix<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidParameter("mixture needs K >= 1 components".into()));
        }
        if atoms.len() != k {
            return Err(Error::LengthMismatch { expected: k, got: atoms.len() });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "weights must sum to 1 (got {sum:.15})"
            )));
        }
        let d = covariance.nrows();
        if covariance.ncols() != d || d == 0 {
            return Err(Error::InvalidParameter("covariance must be square and nonempty".into()));
        }
        for mu in &atoms {
            if mu.len() != d {
                return Err(Error::LengthMismatch { expected: d, got: mu.len() });
            }
            if mu.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidParameter("atoms must be finite".into()));
            }
        }
        let asym = (0..d)
            .flat_map(|a| (0..d).map(move |b| (a, b)))
            .map(|(a, b)| (covariance[(a, b)] - covariance[(b, a)]).abs())
            .fold(0.0f64, f64::max);
        if !asym.is_finite() || asym > 1e-10 * (1.0 + covariance.amax()) {
            return Err(Error::InvalidParameter("covariance must be symmetric".into()));
        }
        let chol = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("covariance must be positive definite".into()))?
            .l();
        Ok(Self { weights, atoms, covariance, chol })
    }

    /// Point mass at `atom` smoothed by an isotropic `sigma2` Gaussian.
    pub fn single(atom: Vec<f64>, sigma2: f64) -> Result<Self> {
        let d = atom.len();
        Self::new(vec![1.0], vec![atom], DMatrix::identity(d, d) * sigma2)
    }

    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Scalar variance accessor; errors away from d = 1.
    pub fn variance_1d(&self) -> Result<f64> {
        if self.dim() != 1 {
            return Err(Error::UnsupportedDimension {
                d: self.dim(),
                msg: "scalar variance is only defined for univariate mixtures".into(),
            });
        }
        Ok(self.covariance[(0, 0)])
    }

    /// Mixture density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        assert_eq!(x.len(), d, "point dimension mismatch");
        let log_det: f64 = (0..d).map(|i| self.chol[(i, i)].ln()).sum();
        let norm = (-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det).exp();
        let mut acc = 0.0;
        let mut diff = vec![0.0; d];
        for (w, mu) in self.weights.iter().zip(&self.atoms) {
            for a in 0..d {
                diff[a] = x[a] - mu[a];
            }
            let q = self.mahalanobis_sq(&diff);
            acc += w * (-0.5 * q).exp();
        }
        acc * norm
    }

    // ||L^{-1} v||^2 by forward substitution against the cached factor.
    fn mahalanobis_sq(&self, v: &[f64]) -> f64 {
        let d = v.len();
        let mut z = vec![0.0; d];
        for i in 0..d {
            let mut s = v[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
        }
        z.iter().map(|zi| zi * zi).sum()
    }

    /// Quadratic form `t' Sigma t / 2` of the Gaussian envelope.
    pub fn envelope_exponent(&self, t: &[f64]) -> f64 {
        let d = self.dim();
        // ||L' t||^2 / 2
        let mut q = 0.0;
        for j in 0..d {
            let mut s = 0.0;
            for i in j..d {
                s += self.chol[(i, j)] * t[i];
            }
            q += s * s;
        }
        0.5 * q
    }

    /// Mixing-distribution CF `S(t) = sum_j p_j exp(i t' mu_j)`.
    pub fn mixing_cf(&self, t: &[f64]) -> Complex64 {
        let mut s = Complex64::ZERO;
        for (w, mu) in self.weights.iter().zip(&self.atoms) {
            let phase: f64 = t.iter().zip(mu).map(|(a, b)| a * b).sum();
            s += Complex64::from_polar(*w, phase);
        }
        s
    }

    /// Characteristic function `exp(-t' Sigma t / 2) S(t)`.
    pub fn cf(&self, t: &[f64]) -> Complex64 {
        (-self.envelope_exponent(t)).exp() * self.mixing_cf(t)
    }

    /// Logarithmic gradient of the CF, `-Sigma t + i M(t)/S(t)` with
    /// `M_a = sum_j p_j mu_{j,a} exp(i t' mu_j)`. Errors when the CF
    /// magnitude sits below `floor`.
    pub fn cf_log_grad(&self, t: &[f64], floor: f64) -> Result<Vec<Complex64>> {
        let d = self.dim();
        assert_eq!(t.len(), d, "point dimension mismatch");
        let env = (-self.envelope_exponent(t)).exp();
        let mut s = Complex64::ZERO;
        let mut m = vec![Complex64::ZERO; d];
        for (w, mu) in self.weights.iter().zip(&self.atoms) {
            let phase: f64 = t.iter().zip(mu).map(|(a, b)| a * b).sum();
            let e = Complex64::from_polar(*w, phase);
            s += e;
            for a in 0..d {
                m[a] += mu[a] * e;
            }
        }
        let magnitude = env * s.norm();
        if magnitude < floor {
            return Err(Error::DegeneratePoint { t: t.to_vec(), magnitude });
        }
        let mut g = vec![Complex64::ZERO; d];
        for a in 0..d {
            let sigma_t: f64 = (0..d).map(|b| self.covariance[(a, b)] * t[b]).sum();
            g[a] = Complex64::new(-sigma_t, 0.0) + Complex64::I * m[a] / s;
        }
        Ok(g)
    }

    /// Second derivative of the univariate log-CF at `s`, via
    /// `phi''/phi - (phi'/phi)^2` assembled from mixing sums.
    pub fn cf_log_hess_1d(&self, s: f64, floor: f64) -> Result<Complex64> {
        let sigma2 = self.variance_1d()?;
        let parts = self.hess_sums_1d(s);
        let env = (-0.5 * sigma2 * s * s).exp();
        let magnitude = env * parts.s0.norm();
        if magnitude < floor {
            return Err(Error::DegeneratePoint { t: vec![s], magnitude });
        }
        Ok(Complex64::new(-sigma2, 0.0) + parts.ratio())
    }

    /// Mixing sums `(S, S_mu, S_mu2)` used by the 1-d log-Hessian and its
    /// parameter derivatives.
    pub fn hess_sums_1d(&self, s: f64) -> HessSums {
        let mut s0 = Complex64::ZERO;
        let mut s1 = Complex64::ZERO;
        let mut s2 = Complex64::ZERO;
        for (w, mu) in self.weights.iter().zip(&self.atoms) {
            let m = mu[0];
            let e = Complex64::from_polar(*w, s * m);
            s0 += e;
            s1 += m * e;
            s2 += m * m * e;
        }
        HessSums { s0, s1, s2 }
    }

    /// `sum_j p_j mu_j`.
    pub fn mixture_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, mu) in self.weights.iter().zip(&self.atoms) {
            for a in 0..d {
                mean[a] += w * mu[a];
            }
        }
        mean
    }

    /// Shift the atoms so the mixture mean is zero; weights and covariance
    /// are untouched.
    pub fn demean(&self) -> Self {
        let mean = self.mixture_mean();
        let atoms = self
            .atoms
            .iter()
            .map(|mu| mu.iter().zip(&mean).map(|(a, m)| a - m).collect())
            .collect();
        Self {
            weights: self.weights.clone(),
            atoms,
            covariance: self.covariance.clone(),
            chol: self.chol.clone(),
        }
    }
}

/// Componentwise mixing sums for the univariate log-Hessian:
/// `S = sum p e`, `S_mu = sum p mu e`, `S_mu2 = sum p mu^2 e` with
/// `e = exp(i s mu)`.
#[derive(Debug, Clone, Copy)]
pub struct HessSums {
    pub s0: Complex64,
    pub s1: Complex64,
    pub s2: Complex64,
}

impl HessSums {
    /// The mixing part of the log-Hessian, `(S'' S - S'^2) / S^2` written in
    /// terms of the moment sums (`S' = i S_mu`, `S'' = -S_mu2`).
    pub fn ratio(&self) -> Complex64 {
        let u = -self.s2 * self.s0 + self.s1 * self.s1;
        u / (self.s0 * self.s0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_atom() -> MixtureParams {
        MixtureParams::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_mode() {
        for d in 1..=3 {
            let p = MixtureParams::single(vec![0.0; d], 1.0).unwrap();
            let expect = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0);
            assert!((p.density(&vec![0.0; d]) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn two_atom_density_at_origin() {
        // N(0;2,1) = e^{-2}/sqrt(2 pi), twice with weight 1/2 each.
        let p = two_atom();
        let expect = (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((p.density(&[0.0]) - expect).abs() < 1e-14);
    }

    #[test]
    fn density_permutation_symmetry() {
        let a = MixtureParams::new(
            vec![0.3, 0.7],
            vec![vec![1.0, 0.0], vec![-1.0, 2.0]],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let b = MixtureParams::new(
            vec![0.7, 0.3],
            vec![vec![-1.0, 2.0], vec![1.0, 0.0]],
            DMatrix::identity(2, 2),
        )
        .unwrap();
        for x in [[0.0, 0.0], [0.5, -1.0], [2.0, 2.0]] {
            assert!((a.density(&x) - b.density(&x)).abs() < 1e-15);
        }
    }

    #[test]
    fn cf_trivial_values() {
        let p = two_atom();
        let at_zero = p.cf(&[0.0]);
        assert!((at_zero - Complex64::ONE).norm() < 1e-15);

        // Single centered component: purely real envelope.
        let g = MixtureParams::single(vec![0.0, 0.0], 2.0).unwrap();
        let v = g.cf(&[0.3, -0.4]);
        assert!(v.im.abs() < 1e-15);
        assert!((v.re - (-0.5 * 2.0 * 0.25f64).exp()).abs() < 1e-14);

        // cos(2 * pi/4) = 0.
        let z = p.cf(&[std::f64::consts::FRAC_PI_4]);
        assert!(z.norm() < 1e-15);
    }

    #[test]
    fn log_grad_single_component_is_affine() {
        // K=1 centered: grad log phi = -sigma^2 t.
        let p = MixtureParams::single(vec![0.0, 0.0], 1.7).unwrap();
        let t = [0.4, -1.1];
        let g = p.cf_log_grad(&t, CF_FLOOR).unwrap();
        for a in 0..2 {
            assert!((g[a].re + 1.7 * t[a]).abs() < 1e-14);
            assert!(g[a].im.abs() < 1e-14);
        }
        // K=1 shifted: i mu - Sigma t.
        let p = MixtureParams::single(vec![0.7], 2.0).unwrap();
        let g = p.cf_log_grad(&[0.25], CF_FLOOR).unwrap();
        assert!((g[0].re + 2.0 * 0.25).abs() < 1e-14);
        assert!((g[0].im - 0.7).abs() < 1e-14);
    }

    #[test]
    fn log_grad_two_atom_symbolic() {
        // d/dt log(e^{-t^2/2} cos 2t) = -t - 2 tan 2t.
        let p = two_atom();
        let t = 0.3;
        let g = p.cf_log_grad(&[t], CF_FLOOR).unwrap();
        assert!((g[0].re - (-t - 2.0 * (2.0 * t).tan())).abs() < 1e-12);
        assert!(g[0].im.abs() < 1e-12);
    }

    #[test]
    fn log_grad_at_zero_is_mixture_mean() {
        let p = MixtureParams::new(
            vec![0.75, 0.25],
            vec![vec![0.0], vec![4.0]],
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let g = p.cf_log_grad(&[0.0], CF_FLOOR).unwrap();
        assert!((g[0].im - 1.0).abs() < 1e-12);
        assert!(g[0].re.abs() < 1e-12);
    }

    #[test]
    fn log_grad_floor_fires() {
        let p = two_atom();
        let err = p.cf_log_grad(&[std::f64::consts::FRAC_PI_4], CF_FLOOR).unwrap_err();
        match err {
            Error::DegeneratePoint { t, .. } => assert!((t[0] - std::f64::consts::FRAC_PI_4).abs() < 1e-15),
            other => panic!("expected degenerate point, got {other}"),
        }
    }

    #[test]
    fn log_hess_constant_for_single_component() {
        for mu in [0.0, 3.0] {
            let p = MixtureParams::single(vec![mu], 0.8).unwrap();
            for s in [0.0, 0.3, 1.5, -2.0] {
                let h = p.cf_log_hess_1d(s, CF_FLOOR).unwrap();
                assert!((h.re + 0.8).abs() < 1e-12);
                assert!(h.im.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_hess_two_atom_symbolic() {
        // (log phi)'' = -1 - 4 / cos^2(2s).
        let p = two_atom();
        let s = 0.2;
        let h = p.cf_log_hess_1d(s, CF_FLOOR).unwrap();
        assert!((h.re - (-1.0 - 4.0 / (2.0f64 * s).cos().powi(2))).abs() < 1e-11);
        assert!(h.im.abs() < 1e-11);
    }

    #[test]
    fn log_derivatives_match_finite_differences_of_log_cf() {
        // Compare against central differences of log|phi| and locally
        // unwrapped arg(phi) where |phi| is comfortably large.
        let p = MixtureParams::new(
            vec![0.4, 0.6],
            vec![vec![-0.8], vec![0.5]],
            DMatrix::from_element(1, 1, 0.6),
        )
        .unwrap();
        let h = 1e-5;
        for t in [-1.2, -0.4, 0.1, 0.9] {
            assert!(p.cf(&[t]).norm() > 0.1);
            let fp = p.cf(&[t + h]);
            let fm = p.cf(&[t - h]);
            let d_log_mod = (fp.norm().ln() - fm.norm().ln()) / (2.0 * h);
            let d_arg = (fp / fm).arg() / (2.0 * h); // local unwrap via the ratio
            let g = p.cf_log_grad(&[t], CF_FLOOR).unwrap()[0];
            assert!((g.re - d_log_mod).abs() / d_log_mod.abs().max(1.0) < 1e-5);
            assert!((g.im - d_arg).abs() / d_arg.abs().max(1.0) < 1e-5);

            let gp = p.cf_log_grad(&[t + h], CF_FLOOR).unwrap()[0];
            let gm = p.cf_log_grad(&[t - h], CF_FLOOR).unwrap()[0];
            let hess = p.cf_log_hess_1d(t, CF_FLOOR).unwrap();
            let fd = (gp - gm) / Complex64::new(2.0 * h, 0.0);
            assert!((hess - fd).norm() / fd.norm().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let p = MixtureParams::new(
            vec![0.3, 0.7],
            vec![vec![-2.0], vec![1.0]],
            DMatrix::from_element(1, 1, 1.5),
        )
        .unwrap();
        // +-10 sigma box around the atom span, fine midpoint rule.
        let (lo, hi) = (-2.0 - 10.0 * 1.5f64.sqrt(), 1.0 + 10.0 * 1.5f64.sqrt());
        let n = 20_000;
        let step = (hi - lo) / n as f64;
        let total: f64 = (0..n)
            .map(|i| p.density(&[lo + (i as f64 + 0.5) * step]) * step)
            .sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    #[test]
    fn demean_shifts_and_is_idempotent() {
        let p = MixtureParams::new(
            vec![0.75, 0.25],
            vec![vec![0.0], vec![4.0]],
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let c = p.demean();
        assert!((c.atoms()[0][0] + 1.0).abs() < 1e-14);
        assert!((c.atoms()[1][0] - 3.0).abs() < 1e-14);
        assert!(c.mixture_mean()[0].abs() < 1e-12);
        let cc = c.demean();
        for j in 0..2 {
            assert!((cc.atoms()[j][0] - c.atoms()[j][0]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(MixtureParams::new(vec![], vec![], DMatrix::identity(1, 1)).is_err());
        assert!(MixtureParams::new(
            vec![0.6, 0.6],
            vec![vec![0.0], vec![1.0]],
            DMatrix::identity(1, 1)
        )
        .is_err());
        // Non-PD covariance.
        assert!(MixtureParams::new(
            vec![1.0],
            vec![vec![0.0, 0.0]],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])
        )
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = MixtureParams::new(
            vec![0.25, 0.75],
            vec![vec![1.0, -1.0], vec![0.0, 2.0]],
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"weights\""));
        let back: MixtureParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back.weights(), p.weights());
        assert_eq!(back.atoms(), p.atoms());
        assert_eq!(back.covariance(), p.covariance());
    }

    proptest! {
        #[test]
        fn cf_modulus_and_conjugate_symmetry(
            w in 0.05f64..0.95,
            a1 in -5.0f64..5.0,
            a2 in -5.0f64..5.0,
            s2 in 0.05f64..4.0,
            t in -8.0f64..8.0,
        ) {
            let p = MixtureParams::new(
                vec![w, 1.0 - w],
                vec![vec![a1], vec![a2]],
                DMatrix::from_element(1, 1, s2),
            ).unwrap();
            let v = p.cf(&[t]);
            prop_assert!(v.norm() <= 1.0 + 1e-12);
            let refl = p.cf(&[-t]);
            prop_assert!((refl - v.conj()).norm() < 1e-12);
            prop_assert!((p.cf(&[0.0]) - Complex64::ONE).norm() < 1e-12);
        }
    }
}
