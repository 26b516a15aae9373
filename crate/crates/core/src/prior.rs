//! Truncated stick-breaking Dirichlet-process prior over Gaussian mixtures,
//! and the bijection between constrained mixture parameters and the
//! unconstrained sampler coordinates.
//!
//! The truncation closes the leftover stick mass into the last component, so
//! weights form an exact simplex. Unconstrained coordinates are stick logits,
//! raw atoms and covariance coordinates (log variance in one dimension; log
//! scales plus canonical partial correlations above it). `log_prior` is the
//! prior density pushed forward to those coordinates, including all
//! change-of-variables terms, and is smooth on every finite state.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::mixture::MixtureParams;

/// Prior on the shared mixture covariance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CovariancePrior {
    /// Inverse-gamma on the scalar variance (d = 1).
    InverseGamma { shape: f64, scale: f64 },
    /// Decomposition `Sigma = D C D`: independent log-normal priors on the
    /// diagonal scales and an LKJ(eta) prior on the correlation matrix,
    /// realized through canonical partial correlations (d > 1).
    ScaledLkj {
        eta: f64,
        #[serde(default)]
        log_scale_mean: f64,
        #[serde(default = "one")]
        log_scale_sd: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Truncated DP prior specification: truncation level, concentration,
/// Gaussian base measure and covariance prior.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PriorSpecRepr", into = "PriorSpecRepr")]
pub struct PriorSpec {
    pub k: usize,
    pub beta: f64,
    pub base_mean: Vec<f64>,
    pub base_cov: DMatrix<f64>,
    pub cov_prior: CovariancePrior,
}

#[derive(Serialize, Deserialize)]
struct PriorSpecRepr {
    k: usize,
    beta: f64,
    base_mean: Vec<f64>,
    base_cov: Vec<Vec<f64>>,
    cov_prior: CovariancePrior,
}

impl TryFrom<PriorSpecRepr> for PriorSpec {
    type Error = String;

    fn try_from(r: PriorSpecRepr) -> std::result::Result<Self, String> {
        let d = r.base_cov.len();
        let flat: Vec<f64> = r.base_cov.iter().flatten().copied().collect();
        if flat.len() != d * d {
            return Err("base_cov rows must all have length d".into());
        }
        PriorSpec::new(
            r.k,
            r.beta,
            r.base_mean,
            DMatrix::from_row_slice(d, d, &flat),
            r.cov_prior,
        )
        .map_err(|e| e.to_string())
    }
}

impl From<PriorSpec> for PriorSpecRepr {
    fn from(s: PriorSpec) -> Self {
        let d = s.base_cov.nrows();
        PriorSpecRepr {
            k: s.k,
            beta: s.beta,
            base_mean: s.base_mean,
            base_cov: (0..d)
                .map(|a| (0..d).map(|b| s.base_cov[(a, b)]).collect())
                .collect(),
            cov_prior: s.cov_prior,
        }
    }
}

/// The sampler's coordinate vector: `K-1` stick logits, `K*d` raw atoms,
/// then the covariance coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct UnconstrainedState(pub Vec<f64>);

impl UnconstrainedState {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gradient of an objective with respect to the constrained ("natural")
/// mixture parameters, in the convention where every covariance entry is a
/// free coordinate.
#[derive(Debug, Clone)]
pub struct NaturalGrad {
    pub weights: Vec<f64>,
    /// Row-major `K x d`.
    pub atoms: Vec<f64>,
    pub sigma: DMatrix<f64>,
}

impl NaturalGrad {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self { weights: vec![0.0; k], atoms: vec![0.0; k * d], sigma: DMatrix::zeros(d, d) }
    }
}

/// Intermediate values of the constraining transform, cached so Jacobian
/// products do not redo the stick and Cholesky recursions.
#[derive(Debug, Clone)]
pub struct ConstrainAux {
    pub params: MixtureParams,
    sticks: Vec<f64>,
    weights: Vec<f64>,
    cov: CovAux,
}

#[derive(Debug, Clone)]
enum CovAux {
    Scalar { sigma2: f64 },
    Factored {
        scales: Vec<f64>,     // e^{s_a}
        z: Vec<f64>,          // partial correlations, row-major pairs (i, j), j < i
        l: DMatrix<f64>,      // Cholesky factor of the correlation matrix
        w: DMatrix<f64>,      // D * L, so Sigma = W W'
    },
}

/// Map `K-1` stick fractions in (0, 1) to a length-`K` simplex; the residual
/// mass closes the truncation in the final component.
pub fn stick_weights(sticks: &[f64]) -> Result<Vec<f64>> {
    for v in sticks {
        if !(*v > 0.0 && *v < 1.0) {
            return Err(Error::Domain(format!("stick fraction {v} outside (0, 1)")));
        }
    }
    let k = sticks.len() + 1;
    let mut weights = Vec::with_capacity(k);
    let mut remaining = 1.0;
    for v in sticks {
        weights.push(v * remaining);
        remaining *= 1.0 - v;
    }
    weights.push(remaining);
    Ok(weights)
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl PriorSpec {
    pub fn new(
        k: usize,
        beta: f64,
        base_mean: Vec<f64>,
        base_cov: DMatrix<f64>,
        cov_prior: CovariancePrior,
    ) -> Result<Self> {
        let spec = Self { k, beta, base_mean, base_cov, cov_prior };
        spec.validate()?;
        Ok(spec)
    }

    /// Diffuse default: `beta = 1`, zero base mean with `4 I` base
    /// covariance, inverse-gamma(2, 1) variance prior in one dimension and
    /// log-normal scales with LKJ(2) correlations above it.
    pub fn default_for_dim(d: usize, k: usize) -> Self {
        let cov_prior = if d == 1 {
            CovariancePrior::InverseGamma { shape: 2.0, scale: 1.0 }
        } else {
            CovariancePrior::ScaledLkj { eta: 2.0, log_scale_mean: 0.0, log_scale_sd: 1.0 }
        };
        Self {
            k,
            beta: 1.0,
            base_mean: vec![0.0; d],
            base_cov: DMatrix::identity(d, d) * 4.0,
            cov_prior,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("truncation level K must be >= 1".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter("concentration beta must be positive".into()));
        }
        let d = self.base_mean.len();
        if d == 0 || self.base_cov.nrows() != d || self.base_cov.ncols() != d {
            return Err(Error::InvalidParameter("base measure dimensions are inconsistent".into()));
        }
        if self.base_cov.clone().cholesky().is_none() {
            return Err(Error::InvalidParameter("base covariance must be positive definite".into()));
        }
        match &self.cov_prior {
            CovariancePrior::InverseGamma { shape, scale } => {
                if d != 1 {
                    return Err(Error::InvalidParameter(
                        "inverse-gamma covariance prior applies to d = 1".into(),
                    ));
                }
                if !(*shape > 0.0 && *scale > 0.0) {
                    return Err(Error::InvalidParameter(
                        "inverse-gamma hyperparameters must be positive".into(),
                    ));
                }
            }
            CovariancePrior::ScaledLkj { eta, log_scale_sd, .. } => {
                if d < 2 {
                    return Err(Error::InvalidParameter(
                        "the scale/LKJ covariance prior applies to d > 1".into(),
                    ));
                }
                if !(*eta > 0.0 && *log_scale_sd > 0.0) {
                    return Err(Error::InvalidParameter(
                        "LKJ hyperparameters must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.base_mean.len()
    }

    fn n_cov_coords(&self) -> usize {
        let d = self.dim();
        if d == 1 {
            1
        } else {
            d + d * (d - 1) / 2
        }
    }

    /// Unconstrained coordinate count `(K-1) + K d + covariance coordinates`.
    pub fn state_dim(&self) -> usize {
        (self.k - 1) + self.k * self.dim() + self.n_cov_coords()
    }

    fn split<'a>(&self, coords: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let k = self.k;
        let d = self.dim();
        assert_eq!(coords.len(), self.state_dim(), "state dimension mismatch");
        let (logits, rest) = coords.split_at(k - 1);
        let (atoms, cov) = rest.split_at(k * d);
        (logits, atoms, cov)
    }

    /// Replace the base measure by the sample mean and covariance of `data`
    /// (an empirical-Bayes option; off by default).
    pub fn with_empirical_base(mut self, data: &crate::ecf::Dataset) -> Result<Self> {
        if data.dim() != self.dim() {
            return Err(Error::LengthMismatch { expected: self.dim(), got: data.dim() });
        }
        self.base_mean = data.mean();
        let mut cov = data.covariance();
        for a in 0..cov.nrows() {
            cov[(a, a)] = cov[(a, a)].max(1e-6);
        }
        self.base_cov = cov;
        Ok(self)
    }

    /// Draw `(P, Sigma)` from the truncated prior.
    pub fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> MixtureParams {
        let d = self.dim();
        let stick_dist = Beta::new(1.0, self.beta).expect("validated hyperparameters");
        let sticks: Vec<f64> = (0..self.k - 1)
            .map(|_| stick_dist.sample(rng).clamp(1e-14, 1.0 - 1e-14))
            .collect();
        let weights = stick_weights(&sticks).expect("sticks clamped inside (0, 1)");

        let base_chol = self.base_cov.clone().cholesky().expect("validated base").l();
        let atoms: Vec<Vec<f64>> = (0..self.k)
            .map(|_| {
                let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
                (0..d)
                    .map(|a| {
                        self.base_mean[a]
                            + (0..=a).map(|b| base_chol[(a, b)] * z[b]).sum::<f64>()
                    })
                    .collect()
            })
            .collect();

        let covariance = match &self.cov_prior {
            CovariancePrior::InverseGamma { shape, scale } => {
                let g = Gamma::new(*shape, 1.0).expect("validated").sample(rng);
                DMatrix::from_element(1, 1, scale / g.max(1e-300))
            }
            CovariancePrior::ScaledLkj { eta, log_scale_mean, log_scale_sd } => {
                let scales: Vec<f64> = (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        (log_scale_mean + log_scale_sd * z).exp()
                    })
                    .collect();
                let mut z = Vec::with_capacity(d * (d - 1) / 2);
                for i in 1..d {
                    for j in 0..i {
                        let b = lkj_beta_shape(*eta, d, j);
                        let u = Beta::new(b, b).expect("validated").sample(rng);
                        z.push((2.0 * u - 1.0).clamp(-1.0 + 1e-12, 1.0 - 1e-12));
                    }
                }
                let l = cpc_to_cholesky(&z, d);
                let c = &l * l.transpose();
                DMatrix::from_fn(d, d, |a, b| scales[a] * scales[b] * c[(a, b)])
            }
        };
        MixtureParams::new(weights, atoms, covariance).expect("prior draws are valid parameters")
    }

    pub fn sample_prior_seeded(&self, seed: u64) -> MixtureParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_prior(&mut rng)
    }

    /// Map unconstrained coordinates to mixture parameters. Total on finite
    /// inputs.
    pub fn constrain(&self, state: &UnconstrainedState) -> MixtureParams {
        self.constrain_with_aux(state).params
    }

    /// As [`Self::constrain`] but keeps the transform intermediates needed by
    /// Jacobian products.
    pub fn constrain_with_aux(&self, state: &UnconstrainedState) -> ConstrainAux {
        let d = self.dim();
        let (logits, atom_coords, cov_coords) = self.split(state.coords());
        let sticks: Vec<f64> = logits
            .iter()
            .map(|l| logistic(*l).clamp(1e-300, 1.0 - 1e-16))
            .collect();
        let weights = stick_weights(&sticks).expect("logistic keeps sticks inside (0, 1)");
        let atoms: Vec<Vec<f64>> =
            (0..self.k).map(|j| atom_coords[j * d..(j + 1) * d].to_vec()).collect();

        let (covariance, cov) = match &self.cov_prior {
            CovariancePrior::InverseGamma { .. } => {
                let sigma2 = cov_coords[0].exp();
                (DMatrix::from_element(1, 1, sigma2), CovAux::Scalar { sigma2 })
            }
            CovariancePrior::ScaledLkj { .. } => {
                let scales: Vec<f64> = cov_coords[..d].iter().map(|s| s.exp()).collect();
                let z: Vec<f64> = cov_coords[d..].iter().map(|y| y.tanh()).collect();
                let l = cpc_to_cholesky(&z, d);
                let mut w = l.clone();
                for a in 0..d {
                    for b in 0..=a {
                        w[(a, b)] *= scales[a];
                    }
                }
                let sigma = &w * w.transpose();
                (sigma, CovAux::Factored { scales, z, l, w })
            }
        };
        let params = MixtureParams::new(weights.clone(), atoms, covariance)
            .expect("constrain produces valid parameters");
        ConstrainAux { params, sticks, weights, cov }
    }

    /// Inverse of [`Self::constrain`]; requires strictly positive weights.
    pub fn unconstrain(&self, params: &MixtureParams) -> Result<UnconstrainedState> {
        if params.n_components() != self.k || params.dim() != self.dim() {
            return Err(Error::InvalidParameter(
                "mixture shape does not match the prior specification".into(),
            ));
        }
        let mut coords = Vec::with_capacity(self.state_dim());
        let mut remaining = 1.0;
        for j in 0..self.k - 1 {
            let p = params.weights()[j];
            if p <= 0.0 {
                return Err(Error::NonInvertible(format!("component {j} has zero weight")));
            }
            let v = p / remaining;
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::NonInvertible(format!(
                    "weights are not a strictly interior stick-breaking image (stick {v})"
                )));
            }
            coords.push((v / (1.0 - v)).ln());
            remaining -= p;
        }
        if params.weights()[self.k - 1] <= 0.0 {
            return Err(Error::NonInvertible("last component has zero weight".into()));
        }
        for mu in params.atoms() {
            coords.extend_from_slice(mu);
        }
        match &self.cov_prior {
            CovariancePrior::InverseGamma { .. } => coords.push(params.covariance()[(0, 0)].ln()),
            CovariancePrior::ScaledLkj { .. } => {
                let d = self.dim();
                let sigma = params.covariance();
                let scales: Vec<f64> = (0..d).map(|a| sigma[(a, a)].sqrt()).collect();
                for s in &scales {
                    coords.push(s.ln());
                }
                let corr = DMatrix::from_fn(d, d, |a, b| sigma[(a, b)] / (scales[a] * scales[b]));
                let l = corr
                    .cholesky()
                    .ok_or_else(|| Error::NonInvertible("correlation matrix not PD".into()))?
                    .l();
                for i in 1..d {
                    let mut ss: f64 = 0.0;
                    for j in 0..i {
                        let denom = (1.0 - ss).max(1e-300).sqrt();
                        let z = (l[(i, j)] / denom).clamp(-1.0 + 1e-15, 1.0 - 1e-15);
                        coords.push(z.atanh());
                        ss += l[(i, j)] * l[(i, j)];
                    }
                }
            }
        }
        Ok(UnconstrainedState(coords))
    }

    /// Log density of the prior pushed forward to unconstrained coordinates.
    pub fn log_prior(&self, state: &UnconstrainedState) -> f64 {
        self.log_prior_grad(state).0
    }

    /// Log prior density and its gradient.
    pub fn log_prior_grad(&self, state: &UnconstrainedState) -> (f64, Vec<f64>) {
        let d = self.dim();
        let (logits, atom_coords, cov_coords) = self.split(state.coords());
        let mut grad = vec![0.0; state.len()];
        let mut logp = 0.0;

        // Sticks: Beta(1, beta) density of v plus the logistic Jacobian,
        // which combine to log beta + beta log(1 - v) + log v.
        for (i, l) in logits.iter().enumerate() {
            let v = logistic(*l);
            logp += self.beta.ln() - self.beta * softplus(*l) - softplus(-*l);
            grad[i] = (1.0 - v) - self.beta * v;
        }

        // Atoms: Gaussian base measure.
        let base_chol = self.base_cov.clone().cholesky().expect("validated base");
        let log_det: f64 = (0..d).map(|a| base_chol.l()[(a, a)].ln()).sum();
        let atom_const = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - log_det;
        let offset = self.k - 1;
        for j in 0..self.k {
            let mu = &atom_coords[j * d..(j + 1) * d];
            let diff = nalgebra::DVector::from_iterator(
                d,
                mu.iter().zip(&self.base_mean).map(|(a, b)| a - b),
            );
            let solved = base_chol.solve(&diff);
            logp += atom_const - 0.5 * diff.dot(&solved);
            for a in 0..d {
                grad[offset + j * d + a] = -solved[a];
            }
        }

        // Covariance prior plus its transform Jacobian.
        let cov_offset = offset + self.k * d;
        match &self.cov_prior {
            CovariancePrior::InverseGamma { shape, scale } => {
                let c = cov_coords[0];
                logp += shape * scale.ln() - ln_gamma(*shape) - shape * c - scale * (-c).exp();
                grad[cov_offset] = -shape + scale * (-c).exp();
            }
            CovariancePrior::ScaledLkj { eta, log_scale_mean, log_scale_sd } => {
                for (a, s) in cov_coords[..d].iter().enumerate() {
                    let zscore = (s - log_scale_mean) / log_scale_sd;
                    logp += -(log_scale_sd * (2.0 * std::f64::consts::PI).sqrt()).ln()
                        - 0.5 * zscore * zscore;
                    grad[cov_offset + a] = -zscore / log_scale_sd;
                }
                // LKJ(eta) factorizes over canonical partial correlations:
                // the pair at depth j has a symmetric Beta law on (-1, 1),
                // and tanh supplies the unconstrained map.
                let mut idx = 0;
                for i in 1..d {
                    for j in 0..i {
                        let b = lkj_beta_shape(*eta, d, j);
                        let y = cov_coords[d + idx];
                        let z = y.tanh();
                        logp += b * (1.0 - z * z).max(1e-300).ln()
                            - (2.0 * b - 1.0) * std::f64::consts::LN_2
                            - ln_beta(b, b);
                        grad[cov_offset + d + idx] = -2.0 * b * z;
                        idx += 1;
                    }
                }
            }
        }
        (logp, grad)
    }

    /// Pull a gradient with respect to the constrained parameters back to the
    /// unconstrained coordinates.
    pub fn apply_constrain_jacobian_transpose(
        &self,
        aux: &ConstrainAux,
        natural: &NaturalGrad,
    ) -> Vec<f64> {
        let d = self.dim();
        let k = self.k;
        let mut grad = vec![0.0; self.state_dim()];

        // Stick logits: dp_j/dv_i is p_j/v_j for i = j and -p_j/(1 - v_i)
        // for i < j; composing with dv/dl = v(1 - v) gives
        // dl_i = g_i p_i (1 - v_i) - v_i sum_{j > i} g_j p_j.
        let mut suffix = 0.0;
        for i in (0..k - 1).rev() {
            suffix += natural.weights[i + 1] * aux.weights[i + 1];
            grad[i] = natural.weights[i] * aux.weights[i] * (1.0 - aux.sticks[i])
                - aux.sticks[i] * suffix;
        }

        let offset = k - 1;
        grad[offset..offset + k * d].copy_from_slice(&natural.atoms);

        let cov_offset = offset + k * d;
        match &aux.cov {
            CovAux::Scalar { sigma2 } => {
                grad[cov_offset] = natural.sigma[(0, 0)] * sigma2;
            }
            CovAux::Factored { scales, z, l, w } => {
                let sigma = aux.params.covariance();
                // Log scales: dSigma_{ab}/ds_c = Sigma_{ab} (delta_{ac} + delta_{bc}).
                for a in 0..d {
                    let mut g = 0.0;
                    for c in 0..d {
                        g += (natural.sigma[(a, c)] + natural.sigma[(c, a)]) * sigma[(a, c)];
                    }
                    grad[cov_offset + a] = g;
                }
                // Partial correlations: perturbing z_{ij} moves only row i of
                // the Cholesky factor; chain through W = D L and Sigma = W W'.
                let mut idx = 0;
                for i in 1..d {
                    let zrow = &z[i * (i - 1) / 2..i * (i + 1) / 2];
                    for j in 0..i {
                        let dlrow = cholesky_row_derivative(zrow, i, j, l);
                        let y_jac = 1.0 - zrow[j] * zrow[j];
                        // dW row i = scale_i * dL row i * (1 - z^2)
                        let mut g = 0.0;
                        for b in 0..d {
                            // dSigma_{ib} = dWrow . W_b (and symmetric term)
                            let mut dot = 0.0;
                            for m in 0..=i.min(b) {
                                dot += dlrow[m] * w[(b, m)];
                            }
                            let dsigma = scales[i] * y_jac * dot;
                            g += natural.sigma[(i, b)] * dsigma + natural.sigma[(b, i)] * dsigma;
                        }
                        // The diagonal entry (i, i) was counted twice above
                        // with the same value, which is exactly
                        // dSigma_{ii} = 2 dWrow . W_i; no correction needed.
                        grad[cov_offset + d + idx] = g;
                        idx += 1;
                    }
                }
            }
        }
        grad
    }

    /// Draw an initial unconstrained state from the prior.
    pub fn sample_state<R: Rng + ?Sized>(&self, rng: &mut R) -> UnconstrainedState {
        let draw = self.sample_prior(rng);
        self.unconstrain(&draw).expect("prior draws are interior")
    }
}

// Shape of the symmetric Beta law for the partial correlation at depth
// `given` (the pair is conditioned on `given` earlier coordinates).
fn lkj_beta_shape(eta: f64, d: usize, given: usize) -> f64 {
    eta + (d as f64 - 2.0 - given as f64) / 2.0
}

/// Build the Cholesky factor of a correlation matrix from canonical partial
/// correlations, row-major over pairs `(i, j)` with `j < i`.
fn cpc_to_cholesky(z: &[f64], d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    l[(0, 0)] = 1.0;
    for i in 1..d {
        let row = &z[i * (i - 1) / 2..i * (i + 1) / 2];
        let mut ss: f64 = 0.0;
        for j in 0..i {
            let c = (1.0 - ss).max(0.0).sqrt();
            l[(i, j)] = row[j] * c;
            ss += l[(i, j)] * l[(i, j)];
        }
        l[(i, i)] = (1.0 - ss).max(0.0).sqrt();
    }
    l
}

// d L[i][.] / d z[i][j] for the row recursion above. `zrow` holds the
// partial correlations of row i; returns the derivative of entries 0..=i.
fn cholesky_row_derivative(zrow: &[f64], i: usize, j: usize, l: &DMatrix<f64>) -> Vec<f64> {
    let mut dl = vec![0.0; i + 1];
    // Running c_m = sqrt(1 - sum_{m' < m} L[i][m']^2) and its derivative.
    let mut ss: f64 = 0.0;
    let mut dss = 0.0;
    for m in 0..=i {
        let c = (1.0 - ss).max(1e-300).sqrt();
        let dc = -0.5 * dss / c;
        if m < i {
            dl[m] = match m.cmp(&j) {
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => c,
                std::cmp::Ordering::Greater => zrow[m] * dc,
            };
            ss += l[(i, m)] * l[(i, m)];
            dss += 2.0 * l[(i, m)] * dl[m];
        } else {
            dl[m] = dc;
        }
    }
    dl
}
