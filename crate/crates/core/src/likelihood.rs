//! The three characteristic-function quasi-log-likelihoods, differentiable in
//! the unconstrained sampler coordinates.
//!
//! Every objective has the shape `(n/2) sum_i w_i ||r_i(theta)||^2` over
//! quadrature nodes, with a residual that pairs cached empirical estimators
//! against closed-form candidate CF quantities:
//!
//! * deconvolution: `ecf_Y(t) - ecf_eps(t) phi_theta(t)`;
//! * repeated measurements: `ecf_{Y2}(t) grad log phi_theta(t) - ecf_{Y1,Y2}(t)`,
//!   in the plain cube seminorm or the boundary-corrected metric;
//! * multi-factor: `Qk* [ecf^2 LogHess](t) - ecf^2(t) (log phi_theta)''(t'A_k)`,
//!   with the squared-ECF premultiplication kept exact rather than numerical.
//!
//! Gradients are assembled analytically: residual derivatives with respect to
//! the constrained parameters are contracted node by node, then pulled back
//! through the constraining transform. Candidates whose CF magnitude falls
//! below the floor yield `+inf` (a rejected proposal), never a crash.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::ecf::{Dataset, EcfCache};
use crate::error::{Error, Result};
use crate::mixture::{MixtureParams, CF_FLOOR};
use crate::prior::{NaturalGrad, PriorSpec, UnconstrainedState};
use crate::quadrature::{BoxQuadrature, SphereLineQuadrature};

/// Half the sum and half the difference of two repeated measurements:
/// `proxy = (Y1 + Y2)/2` carries the signal and `aux = (Y1 - Y2)/2` is a pure
/// error sample usable as deconvolution side information.
pub fn symmetrize_to_deconv(y1: &Dataset, y2: &Dataset) -> Result<(Dataset, Dataset)> {
    if y1.n() != y2.n() {
        return Err(Error::LengthMismatch { expected: y1.n(), got: y2.n() });
    }
    if y1.dim() != y2.dim() {
        return Err(Error::LengthMismatch { expected: y1.dim(), got: y2.dim() });
    }
    let mut proxy = Vec::with_capacity(y1.n());
    let mut aux = Vec::with_capacity(y1.n());
    for (a, b) in y1.rows().iter().zip(y2.rows()) {
        proxy.push(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect());
        aux.push(a.iter().zip(b).map(|(x, y)| 0.5 * (x - y)).collect());
    }
    Ok((Dataset::new(proxy)?, Dataset::new(aux)?))
}

// ---------------------------------------------------------------------------
// Deconvolution
// ---------------------------------------------------------------------------

/// Classical measurement error: CF matching of `ecf_Y` against
/// `ecf_eps * phi_theta` over the cube.
#[derive(Debug, Clone)]
pub struct DeconvModel {
    nodes: Vec<Vec<f64>>,
    weight: f64,
    phi_y: Vec<Complex64>,
    phi_eps: Vec<Complex64>,
    n: f64,
    aux_n: usize,
    dim: usize,
}

impl DeconvModel {
    pub fn from_data(y: &Dataset, eps: &Dataset, quad: &BoxQuadrature) -> Result<Self> {
        if y.dim() != quad.dim() || eps.dim() != quad.dim() {
            return Err(Error::LengthMismatch { expected: quad.dim(), got: y.dim().max(eps.dim()) });
        }
        let phi_y = EcfCache::plain(y, quad.nodes());
        let phi_eps = EcfCache::plain(eps, quad.nodes());
        Ok(Self {
            nodes: quad.nodes().to_vec(),
            weight: quad.weight(),
            phi_y: phi_y.phi().to_vec(),
            phi_eps: phi_eps.phi().to_vec(),
            n: y.n() as f64,
            aux_n: eps.n(),
            dim: quad.dim(),
        })
    }

    /// Analytic-CF injection: the sampling-noise-free version used to check
    /// identifying restrictions.
    pub fn population(
        quad: &BoxQuadrature,
        phi_y: impl Fn(&[f64]) -> Complex64,
        phi_eps: impl Fn(&[f64]) -> Complex64,
        n: f64,
    ) -> Self {
        Self {
            nodes: quad.nodes().to_vec(),
            weight: quad.weight(),
            phi_y: quad.nodes().iter().map(|t| phi_y(t)).collect(),
            phi_eps: quad.nodes().iter().map(|t| phi_eps(t)).collect(),
            n,
            aux_n: 0,
            dim: quad.dim(),
        }
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    /// Auxiliary error sample size `m` (may differ from `n`; recorded in
    /// reports, never rate-adjusted).
    pub fn aux_sample_size(&self) -> usize {
        self.aux_n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `(n/2) || ecf_Y - ecf_eps phi_theta ||^2` over the cube.
    pub fn objective(&self, params: &MixtureParams) -> f64 {
        assert_eq!(params.dim(), self.dim);
        let mut acc = 0.0;
        for (i, t) in self.nodes.iter().enumerate() {
            let r = self.phi_y[i] - self.phi_eps[i] * params.cf(t);
            acc += r.norm_sqr();
        }
        0.5 * self.n * self.weight * acc
    }

    pub fn objective_grad(&self, spec: &PriorSpec, state: &UnconstrainedState) -> (f64, Vec<f64>) {
        let aux = spec.constrain_with_aux(state);
        let params = &aux.params;
        let d = self.dim;
        let k = params.n_components();
        let weights = params.weights();
        let atoms = params.atoms();

        let mut acc = 0.0;
        let mut natural = NaturalGrad::zeros(k, d);
        let mut unit = vec![Complex64::ZERO; k];
        for (i, t) in self.nodes.iter().enumerate() {
            let env = (-params.envelope_exponent(t)).exp();
            let mut s = Complex64::ZERO;
            for j in 0..k {
                let phase: f64 = t.iter().zip(&atoms[j]).map(|(a, b)| a * b).sum();
                unit[j] = Complex64::from_polar(1.0, phase);
                s += weights[j] * unit[j];
            }
            let phi = env * s;
            let r = self.phi_y[i] - self.phi_eps[i] * phi;
            acc += r.norm_sqr();

            // d obj = n w Re[conj(r) (-ecf_eps) d phi].
            let c = -self.n * self.weight * r.conj() * self.phi_eps[i];
            for j in 0..k {
                natural.weights[j] += (c * env * unit[j]).re;
                let z = c * env * weights[j] * unit[j] * Complex64::I;
                for b in 0..d {
                    natural.atoms[j * d + b] += z.re * t[b];
                }
            }
            // d phi / d Sigma_{ab} = -phi t_a t_b / 2.
            let c_phi = (c * phi).re;
            for a in 0..d {
                for b in 0..d {
                    natural.sigma[(a, b)] -= c_phi * 0.5 * t[a] * t[b];
                }
            }
        }
        let obj = 0.5 * self.n * self.weight * acc;
        let grad = spec.apply_constrain_jacobian_transpose(&aux, &natural);
        (obj, grad)
    }

    pub fn neg_loglik(&self, spec: &PriorSpec, state: &UnconstrainedState) -> f64 {
        self.objective(&spec.constrain(state))
    }
}

// ---------------------------------------------------------------------------
// Repeated measurements
// ---------------------------------------------------------------------------

/// Repeated measurements: gradient-field matching
/// `ecf_{Y2} grad log phi_theta - ecf_{Y1,Y2}`, optionally under the
/// boundary-corrected metric and optionally symmetrized over the two
/// measurement orderings.
#[derive(Debug, Clone)]
pub struct RepMeasModel {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    phi_y2: Vec<Complex64>,
    w_y1y2: Vec<Vec<Complex64>>,
    /// Role-swapped caches when the two-restriction objective is enabled.
    swapped: Option<(Vec<Complex64>, Vec<Vec<Complex64>>)>,
    boundary: bool,
    cf_floor: f64,
    n: f64,
    dim: usize,
}

impl RepMeasModel {
    pub fn from_data(
        y1: &Dataset,
        y2: &Dataset,
        quad: &BoxQuadrature,
        symmetrized: bool,
    ) -> Result<Self> {
        let nodes = quad.nodes().to_vec();
        let weights = vec![quad.weight(); nodes.len()];
        Self::from_data_at_nodes(y1, y2, nodes, weights, false, symmetrized, quad.dim())
    }

    /// Boundary-corrected variant over the Euclidean ball plus sphere-line
    /// nodes (d > 1).
    pub fn from_data_boundary(
        y1: &Dataset,
        y2: &Dataset,
        quad: &SphereLineQuadrature,
        symmetrized: bool,
    ) -> Result<Self> {
        Self::from_data_at_nodes(
            y1,
            y2,
            quad.metric_nodes(),
            quad.metric_weights(),
            true,
            symmetrized,
            quad.dim(),
        )
    }

    fn from_data_at_nodes(
        y1: &Dataset,
        y2: &Dataset,
        nodes: Vec<Vec<f64>>,
        weights: Vec<f64>,
        boundary: bool,
        symmetrized: bool,
        dim: usize,
    ) -> Result<Self> {
        if y1.n() != y2.n() {
            return Err(Error::LengthMismatch { expected: y1.n(), got: y2.n() });
        }
        if y1.dim() != dim || y2.dim() != dim {
            return Err(Error::LengthMismatch { expected: dim, got: y1.dim().max(y2.dim()) });
        }
        let forward = EcfCache::weighted(y1, y2, &nodes)?;
        let swapped = if symmetrized {
            let back = EcfCache::weighted(y2, y1, &nodes)?;
            Some((back.phi().to_vec(), back.weighted_values().unwrap().to_vec()))
        } else {
            None
        };
        Ok(Self {
            nodes,
            weights,
            phi_y2: forward.phi().to_vec(),
            w_y1y2: forward.weighted_values().unwrap().to_vec(),
            swapped,
            boundary,
            cf_floor: CF_FLOOR,
            n: y1.n() as f64,
            dim,
        })
    }

    /// Analytic-CF injection over the cube.
    pub fn population(
        quad: &BoxQuadrature,
        phi_y2: impl Fn(&[f64]) -> Complex64,
        w_y1y2: impl Fn(&[f64]) -> Vec<Complex64>,
        n: f64,
    ) -> Self {
        let nodes = quad.nodes().to_vec();
        Self {
            phi_y2: nodes.iter().map(|t| phi_y2(t)).collect(),
            w_y1y2: nodes.iter().map(|t| w_y1y2(t)).collect(),
            weights: vec![quad.weight(); nodes.len()],
            nodes,
            swapped: None,
            boundary: false,
            cf_floor: CF_FLOOR,
            n,
            dim: quad.dim(),
        }
    }

    /// Analytic-CF injection under the boundary-corrected metric.
    pub fn population_boundary(
        quad: &SphereLineQuadrature,
        phi_y2: impl Fn(&[f64]) -> Complex64,
        w_y1y2: impl Fn(&[f64]) -> Vec<Complex64>,
        n: f64,
    ) -> Self {
        let nodes = quad.metric_nodes();
        Self {
            phi_y2: nodes.iter().map(|t| phi_y2(t)).collect(),
            w_y1y2: nodes.iter().map(|t| w_y1y2(t)).collect(),
            weights: quad.metric_weights(),
            nodes,
            swapped: None,
            boundary: true,
            cf_floor: CF_FLOOR,
            n,
            dim: quad.dim(),
        }
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn boundary(&self) -> bool {
        self.boundary
    }

    pub fn symmetrized(&self) -> bool {
        self.swapped.is_some()
    }

    /// The quasi objective; `+inf` when the candidate CF magnitude breaches
    /// the floor at any node.
    pub fn objective(&self, params: &MixtureParams) -> f64 {
        assert_eq!(params.dim(), self.dim);
        let d = self.dim;
        let cov = params.covariance();
        let mut acc = 0.0;
        let mut m = vec![Complex64::ZERO; d];
        for (i, t) in self.nodes.iter().enumerate() {
            let env = (-params.envelope_exponent(t)).exp();
            let mut s = Complex64::ZERO;
            m.iter_mut().for_each(|v| *v = Complex64::ZERO);
            for (w, mu) in params.weights().iter().zip(params.atoms()) {
                let phase: f64 = t.iter().zip(mu).map(|(a, b)| a * b).sum();
                let e = Complex64::from_polar(*w, phase);
                s += e;
                for a in 0..d {
                    m[a] += mu[a] * e;
                }
            }
            if env * s.norm() < self.cf_floor {
                return f64::INFINITY;
            }
            let mut node_acc = 0.0;
            for a in 0..d {
                let sigma_t: f64 = (0..d).map(|b| cov[(a, b)] * t[b]).sum();
                let g = Complex64::new(-sigma_t, 0.0) + Complex64::I * m[a] / s;
                let r = self.phi_y2[i] * g - self.w_y1y2[i][a];
                node_acc += r.norm_sqr();
                if let Some((phi_y1, w_y2y1)) = &self.swapped {
                    let r2 = phi_y1[i] * g - w_y2y1[i][a];
                    node_acc += r2.norm_sqr();
                }
            }
            acc += self.weights[i] * node_acc;
        }
        0.5 * self.n * acc
    }

    pub fn objective_grad(&self, spec: &PriorSpec, state: &UnconstrainedState) -> (f64, Vec<f64>) {
        let aux = spec.constrain_with_aux(state);
        let params = &aux.params;
        let d = self.dim;
        let k = params.n_components();
        let weights = params.weights();
        let atoms = params.atoms();
        let cov = params.covariance();

        let mut acc = 0.0;
        let mut natural = NaturalGrad::zeros(k, d);
        let mut unit = vec![Complex64::ZERO; k];
        let mut m = vec![Complex64::ZERO; d];
        let mut bvec = vec![Complex64::ZERO; d];
        for (i, t) in self.nodes.iter().enumerate() {
            let env = (-params.envelope_exponent(t)).exp();
            let mut s = Complex64::ZERO;
            m.iter_mut().for_each(|v| *v = Complex64::ZERO);
            for j in 0..k {
                let phase: f64 = t.iter().zip(&atoms[j]).map(|(a, b)| a * b).sum();
                unit[j] = Complex64::from_polar(1.0, phase);
                let we = weights[j] * unit[j];
                s += we;
                for a in 0..d {
                    m[a] += atoms[j][a] * we;
                }
            }
            if env * s.norm() < self.cf_floor {
                return (f64::INFINITY, vec![0.0; state.len()]);
            }

            // Residuals plus the contraction vector B_a = n w conj(r_a) ecf,
            // pooled over the symmetrized pair (both terms share the same
            // candidate gradient field).
            let nw = self.n * self.weights[i];
            let mut node_acc = 0.0;
            for a in 0..d {
                let sigma_t: f64 = (0..d).map(|b| cov[(a, b)] * t[b]).sum();
                let g = Complex64::new(-sigma_t, 0.0) + Complex64::I * m[a] / s;
                let r = self.phi_y2[i] * g - self.w_y1y2[i][a];
                node_acc += r.norm_sqr();
                bvec[a] = nw * r.conj() * self.phi_y2[i];
                if let Some((phi_y1, w_y2y1)) = &self.swapped {
                    let r2 = phi_y1[i] * g - w_y2y1[i][a];
                    node_acc += r2.norm_sqr();
                    bvec[a] += nw * r2.conj() * phi_y1[i];
                }
            }
            acc += self.weights[i] * node_acc;

            let b_dot_m: Complex64 = (0..d).map(|a| bvec[a] * m[a]).sum();
            let s_sq = s * s;
            for j in 0..k {
                let b_dot_mu: Complex64 = (0..d).map(|a| bvec[a] * atoms[j][a]).sum();
                // Contractions of d g / d p_j and d g / d mu_j with B.
                natural.weights[j] +=
                    (Complex64::I * unit[j] * (s * b_dot_mu - b_dot_m) / s_sq).re;
                let base = Complex64::I * weights[j] * unit[j] / s;
                let tilt = Complex64::I * (b_dot_mu - b_dot_m / s);
                for b in 0..d {
                    natural.atoms[j * d + b] += (base * (bvec[b] + tilt * t[b])).re;
                }
            }
            // d g_a / d Sigma_{bc} = -delta_{ab} t_c.
            for b in 0..d {
                let re_b = bvec[b].re;
                for c in 0..d {
                    natural.sigma[(b, c)] -= re_b * t[c];
                }
            }
        }
        let obj = 0.5 * self.n * acc;
        let grad = spec.apply_constrain_jacobian_transpose(&aux, &natural);
        (obj, grad)
    }

    pub fn neg_loglik(&self, spec: &PriorSpec, state: &UnconstrainedState) -> f64 {
        self.objective(&spec.constrain(state))
    }
}

// ---------------------------------------------------------------------------
// Multi-factor
// ---------------------------------------------------------------------------

/// Which latent factor a multi-factor objective targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorTarget {
    Single(usize),
    Joint,
}

/// Column-wise `A_k A_k'` upper-triangular vectorization (row-major over
/// pairs `(l1 <= l2)`) and the left pseudo-inverse `Q* = (Q'Q)^{-1} Q'`.
/// Errors when `Q` is column-rank deficient, naming the deficient rank.
pub fn build_q(loadings: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = loadings.nrows();
    let k = loadings.ncols();
    if l == 0 || k == 0 || loadings.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter("loadings must be a finite, nonempty matrix".into()));
    }
    let rows = l * (l + 1) / 2;
    let mut q = DMatrix::zeros(rows, k);
    for col in 0..k {
        let mut idx = 0;
        for a in 0..l {
            for b in a..l {
                q[(idx, col)] = loadings[(a, col)] * loadings[(b, col)];
                idx += 1;
            }
        }
    }
    let svd = q.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let rank = svd.singular_values.iter().filter(|s| **s > smax * 1e-10).count();
    if rank < k {
        return Err(Error::Identification(format!(
            "loadings give a Q matrix of rank {rank} < {k}; the factor second-derivative \
             restrictions do not separate the factors"
        )));
    }
    let qtq = q.transpose() * &q;
    let chol = qtq
        .cholesky()
        .ok_or_else(|| Error::Identification("Q'Q is numerically singular".into()))?;
    let qstar = chol.solve(&q.transpose());
    Ok((q, qstar))
}

#[derive(Debug, Clone)]
struct FactorProjection {
    /// Distinct projected values `t'A_k` across nodes.
    svals: Vec<f64>,
    /// Node index -> distinct-value index.
    node_group: Vec<u32>,
}

impl FactorProjection {
    // Tensor grids make the projections highly degenerate, so the candidate
    // log-Hessian is evaluated once per distinct value instead of per node.
    fn build(nodes: &[Vec<f64>], col: &[f64]) -> Self {
        let raw: Vec<f64> = nodes
            .iter()
            .map(|t| t.iter().zip(col).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|a, b| raw[*a].partial_cmp(&raw[*b]).unwrap());
        let mut svals: Vec<f64> = Vec::new();
        let mut node_group = vec![0u32; raw.len()];
        for idx in order {
            let v = raw[idx];
            match svals.last() {
                Some(&last) if (v - last).abs() <= 1e-9 * (1.0 + v.abs()) => {}
                _ => svals.push(v),
            }
            node_group[idx] = (svals.len() - 1) as u32;
        }
        Self { svals, node_group }
    }
}

/// Linear multi-factor model: squared-ECF premultiplied second-derivative
/// matching for one latent factor, or jointly for all of them.
#[derive(Debug, Clone)]
pub struct FactorModel {
    nodes: Vec<Vec<f64>>,
    weight: f64,
    phi2: Vec<Complex64>,
    combo_vech: Vec<Vec<Complex64>>,
    /// Single-target projection `Qk* vech(combo)` per node.
    rq: Option<Vec<Complex64>>,
    q: DMatrix<f64>,
    qstar: DMatrix<f64>,
    target: FactorTarget,
    projections: Vec<FactorProjection>,
    cf_floor: f64,
    n: f64,
    n_measurements: usize,
    n_factors: usize,
}

fn vech_upper(m: &DMatrix<Complex64>) -> Vec<Complex64> {
    let l = m.nrows();
    let mut v = Vec::with_capacity(l * (l + 1) / 2);
    for a in 0..l {
        for b in a..l {
            v.push(m[(a, b)]);
        }
    }
    v
}

impl FactorModel {
    pub fn from_data(
        y: &Dataset,
        loadings: DMatrix<f64>,
        target: FactorTarget,
        quad: &BoxQuadrature,
    ) -> Result<Self> {
        if y.dim() != loadings.nrows() || quad.dim() != loadings.nrows() {
            return Err(Error::LengthMismatch { expected: loadings.nrows(), got: y.dim() });
        }
        let cache = EcfCache::hess(y, quad.nodes());
        let combo_vech = cache.hess_values().unwrap().iter().map(vech_upper).collect();
        let phi2 = cache.phi().iter().map(|p| p * p).collect();
        Self::assemble(quad, phi2, combo_vech, loadings, target, y.n() as f64)
    }

    /// Analytic injection: `phi_y` and the premultiplied log-Hessian
    /// `phi_y^2 grad grad' log phi_y` as functions.
    pub fn population(
        quad: &BoxQuadrature,
        loadings: DMatrix<f64>,
        target: FactorTarget,
        phi_y: impl Fn(&[f64]) -> Complex64,
        combo: impl Fn(&[f64]) -> DMatrix<Complex64>,
        n: f64,
    ) -> Result<Self> {
        let phi2 = quad
            .nodes()
            .iter()
            .map(|t| {
                let p = phi_y(t);
                p * p
            })
            .collect();
        let combo_vech = quad.nodes().iter().map(|t| vech_upper(&combo(t))).collect();
        Self::assemble(quad, phi2, combo_vech, loadings, target, n)
    }

    fn assemble(
        quad: &BoxQuadrature,
        phi2: Vec<Complex64>,
        combo_vech: Vec<Vec<Complex64>>,
        loadings: DMatrix<f64>,
        target: FactorTarget,
        n: f64,
    ) -> Result<Self> {
        let (q, qstar) = build_q(&loadings)?;
        let n_factors = loadings.ncols();
        if let FactorTarget::Single(k) = target {
            if k >= n_factors {
                return Err(Error::InvalidParameter(format!(
                    "factor index {k} out of range for {n_factors} factors"
                )));
            }
        }
        let projections = (0..n_factors)
            .map(|k| {
                let col: Vec<f64> = (0..loadings.nrows()).map(|a| loadings[(a, k)]).collect();
                FactorProjection::build(quad.nodes(), &col)
            })
            .collect();
        let rq = match target {
            FactorTarget::Single(k) => Some(
                combo_vech
                    .iter()
                    .map(|v: &Vec<Complex64>| {
                        v.iter()
                            .enumerate()
                            .map(|(row, c)| qstar[(k, row)] * c)
                            .sum::<Complex64>()
                    })
                    .collect(),
            ),
            FactorTarget::Joint => None,
        };
        Ok(Self {
            nodes: quad.nodes().to_vec(),
            weight: quad.weight(),
            phi2,
            combo_vech,
            rq,
            q,
            qstar,
            target,
            projections,
            cf_floor: CF_FLOOR,
            n,
            n_measurements: loadings.nrows(),
            n_factors,
        })
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn target(&self) -> FactorTarget {
        self.target
    }

    pub fn n_factors(&self) -> usize {
        self.n_factors
    }

    pub fn n_measurements(&self) -> usize {
        self.n_measurements
    }

    pub fn q_matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn qstar_matrix(&self) -> &DMatrix<f64> {
        &self.qstar
    }

    /// Candidate log-Hessian at every distinct projected value for factor
    /// `k`; `None` on a CF-floor breach.
    fn hess_at_groups(&self, k: usize, params: &MixtureParams) -> Option<Vec<Complex64>> {
        let sigma2 = params.variance_1d().expect("factor candidates are univariate");
        let proj = &self.projections[k];
        let mut h = Vec::with_capacity(proj.svals.len());
        for &s in &proj.svals {
            let sums = params.hess_sums_1d(s);
            let env = (-0.5 * sigma2 * s * s).exp();
            if env * sums.s0.norm() < self.cf_floor {
                return None;
            }
            h.push(Complex64::new(-sigma2, 0.0) + sums.ratio());
        }
        Some(h)
    }

    /// Single-factor objective for the targeted factor.
    pub fn objective_single(&self, params: &MixtureParams) -> f64 {
        let FactorTarget::Single(k) = self.target else {
            panic!("objective_single called on a joint-target model");
        };
        let rq = self.rq.as_ref().unwrap();
        let Some(h) = self.hess_at_groups(k, params) else {
            return f64::INFINITY;
        };
        let groups = &self.projections[k].node_group;
        let mut acc = 0.0;
        for i in 0..self.nodes.len() {
            let r = rq[i] - self.phi2[i] * h[groups[i] as usize];
            acc += r.norm_sqr();
        }
        0.5 * self.n * self.weight * acc
    }

    /// Joint objective over per-factor candidates.
    pub fn objective_joint(&self, per_factor: &[MixtureParams]) -> f64 {
        assert_eq!(per_factor.len(), self.n_factors);
        let mut hvals = Vec::with_capacity(self.n_factors);
        for (k, params) in per_factor.iter().enumerate() {
            match self.hess_at_groups(k, params) {
                Some(h) => hvals.push(h),
                None => return f64::INFINITY,
            }
        }
        let rows = self.n_measurements * (self.n_measurements + 1) / 2;
        let mut acc = 0.0;
        for i in 0..self.nodes.len() {
            for row in 0..rows {
                let mut model = Complex64::ZERO;
                for k in 0..self.n_factors {
                    let h = hvals[k][self.projections[k].node_group[i] as usize];
                    model += self.q[(row, k)] * h;
                }
                let r = self.combo_vech[i][row] - self.phi2[i] * model;
                acc += r.norm_sqr();
            }
        }
        0.5 * self.n * self.weight * acc
    }

    // Derivatives of the log-Hessian in the candidate's natural parameters,
    // contracted against per-group complex prefactors G_g, where
    // d obj / d theta = sum_g Re[G_g dh/dtheta(s_g)].
    fn accumulate_hess_grad(
        &self,
        k: usize,
        params: &MixtureParams,
        prefactors: &[Complex64],
        natural: &mut NaturalGrad,
    ) {
        let proj = &self.projections[k];
        let weights = params.weights();
        let atoms = params.atoms();
        let kk = params.n_components();
        let mut total = Complex64::ZERO;
        for (gi, &s) in proj.svals.iter().enumerate() {
            let pre = prefactors[gi];
            if pre == Complex64::ZERO {
                continue;
            }
            total += pre;
            let sums = params.hess_sums_1d(s);
            let (s0, s1, s2) = (sums.s0, sums.s1, sums.s2);
            let u = -s2 * s0 + s1 * s1;
            let s0_sq = s0 * s0;
            let s0_cu = s0_sq * s0;
            for j in 0..kk {
                let mu = atoms[j][0];
                let e = Complex64::from_polar(1.0, s * mu);
                // du/dp_j = e (-mu^2 s0 - s2 + 2 mu s1); quotient-rule tail
                // from the 1/s0^2 factor.
                let du_dp = e * (Complex64::new(-mu * mu, 0.0) * s0 - s2 + 2.0 * mu * s1);
                let dh_dp = du_dp / s0_sq - 2.0 * u * e / s0_cu;
                natural.weights[j] += (pre * dh_dp).re;

                // du/dmu_j = p e [-(2 mu + i s mu^2) s0 - i s s2 + 2 s1 (1 + i s mu)].
                let pe = weights[j] * e;
                let du_dmu = pe
                    * (-Complex64::new(2.0 * mu, s * mu * mu) * s0
                        - Complex64::new(0.0, s) * s2
                        + 2.0 * s1 * Complex64::new(1.0, s * mu));
                let ds0 = pe * Complex64::new(0.0, s);
                let dh_dmu = du_dmu / s0_sq - 2.0 * u * ds0 / s0_cu;
                natural.atoms[j] += (pre * dh_dmu).re;
            }
        }
        // dh/dsigma^2 = -1 at every group.
        natural.sigma[(0, 0)] -= total.re;
    }

    /// Single-target objective and gradient in unconstrained coordinates.
    pub fn objective_grad_single(
        &self,
        spec: &PriorSpec,
        state: &UnconstrainedState,
    ) -> (f64, Vec<f64>) {
        let FactorTarget::Single(k) = self.target else {
            panic!("objective_grad_single called on a joint-target model");
        };
        let aux = spec.constrain_with_aux(state);
        let params = &aux.params;
        let rq = self.rq.as_ref().unwrap();
        let Some(h) = self.hess_at_groups(k, params) else {
            return (f64::INFINITY, vec![0.0; state.len()]);
        };
        let proj = &self.projections[k];
        let mut acc = 0.0;
        let mut prefactors = vec![Complex64::ZERO; proj.svals.len()];
        let nw = self.n * self.weight;
        for i in 0..self.nodes.len() {
            let g = proj.node_group[i] as usize;
            let r = rq[i] - self.phi2[i] * h[g];
            acc += r.norm_sqr();
            prefactors[g] -= nw * r.conj() * self.phi2[i];
        }
        let mut natural = NaturalGrad::zeros(params.n_components(), 1);
        self.accumulate_hess_grad(k, params, &prefactors, &mut natural);
        let obj = 0.5 * self.n * self.weight * acc;
        (obj, spec.apply_constrain_jacobian_transpose(&aux, &natural))
    }

    /// Joint objective and per-factor gradients over per-factor states.
    pub fn objective_grad_joint(
        &self,
        spec: &PriorSpec,
        states: &[UnconstrainedState],
    ) -> (f64, Vec<Vec<f64>>) {
        assert_eq!(states.len(), self.n_factors);
        let auxes: Vec<_> = states.iter().map(|s| spec.constrain_with_aux(s)).collect();
        let mut hvals = Vec::with_capacity(self.n_factors);
        for (k, aux) in auxes.iter().enumerate() {
            match self.hess_at_groups(k, &aux.params) {
                Some(h) => hvals.push(h),
                None => {
                    return (
                        f64::INFINITY,
                        states.iter().map(|s| vec![0.0; s.len()]).collect(),
                    )
                }
            }
        }
        let rows = self.n_measurements * (self.n_measurements + 1) / 2;
        let nw = self.n * self.weight;
        let mut acc = 0.0;
        let mut prefactors: Vec<Vec<Complex64>> = self
            .projections
            .iter()
            .map(|p| vec![Complex64::ZERO; p.svals.len()])
            .collect();
        for i in 0..self.nodes.len() {
            for row in 0..rows {
                let mut model = Complex64::ZERO;
                for k in 0..self.n_factors {
                    model +=
                        self.q[(row, k)] * hvals[k][self.projections[k].node_group[i] as usize];
                }
                let r = self.combo_vech[i][row] - self.phi2[i] * model;
                acc += r.norm_sqr();
                let base = nw * r.conj() * self.phi2[i];
                for k in 0..self.n_factors {
                    if self.q[(row, k)] != 0.0 {
                        let g = self.projections[k].node_group[i] as usize;
                        prefactors[k][g] -= base * self.q[(row, k)];
                    }
                }
            }
        }
        let mut grads = Vec::with_capacity(self.n_factors);
        for (k, aux) in auxes.iter().enumerate() {
            let mut natural = NaturalGrad::zeros(aux.params.n_components(), 1);
            self.accumulate_hess_grad(k, &aux.params, &prefactors[k], &mut natural);
            grads.push(spec.apply_constrain_jacobian_transpose(aux, &natural));
        }
        (0.5 * self.n * self.weight * acc, grads)
    }
}

// ---------------------------------------------------------------------------
// Unified model + prior surface for the sampler
// ---------------------------------------------------------------------------

/// Any of the three quasi-likelihoods behind one dispatch point.
#[derive(Debug, Clone)]
pub enum QuasiModel {
    Deconv(DeconvModel),
    RepMeas(RepMeasModel),
    Factor(FactorModel),
}

/// Prior layout matching the model: one mixture, or independent per-factor
/// blocks for the joint multi-factor posterior.
#[derive(Debug, Clone)]
pub enum ModelPrior {
    Single(PriorSpec),
    Joint { per_factor: PriorSpec, factors: usize },
}

impl ModelPrior {
    pub fn state_dim(&self) -> usize {
        match self {
            ModelPrior::Single(spec) => spec.state_dim(),
            ModelPrior::Joint { per_factor, factors } => factors * per_factor.state_dim(),
        }
    }

    pub fn spec(&self) -> &PriorSpec {
        match self {
            ModelPrior::Single(spec) => spec,
            ModelPrior::Joint { per_factor, .. } => per_factor,
        }
    }

    fn blocks(&self, state: &UnconstrainedState) -> Vec<UnconstrainedState> {
        match self {
            ModelPrior::Single(_) => vec![state.clone()],
            ModelPrior::Joint { per_factor, factors } => {
                let block = per_factor.state_dim();
                (0..*factors)
                    .map(|k| {
                        UnconstrainedState(state.coords()[k * block..(k + 1) * block].to_vec())
                    })
                    .collect()
            }
        }
    }

    /// Constrained mixture parameters per block (a single entry except in the
    /// joint layout).
    pub fn constrain_all(&self, state: &UnconstrainedState) -> Vec<MixtureParams> {
        self.blocks(state)
            .iter()
            .map(|s| self.spec().constrain(s))
            .collect()
    }

    pub fn log_prior_grad(&self, state: &UnconstrainedState) -> (f64, Vec<f64>) {
        match self {
            ModelPrior::Single(spec) => spec.log_prior_grad(state),
            ModelPrior::Joint { per_factor, factors } => {
                let block = per_factor.state_dim();
                let mut logp = 0.0;
                let mut grad = Vec::with_capacity(self.state_dim());
                for k in 0..*factors {
                    let s =
                        UnconstrainedState(state.coords()[k * block..(k + 1) * block].to_vec());
                    let (lp, g) = per_factor.log_prior_grad(&s);
                    logp += lp;
                    grad.extend(g);
                }
                (logp, grad)
            }
        }
    }

    pub fn sample_state<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> UnconstrainedState {
        match self {
            ModelPrior::Single(spec) => spec.sample_state(rng),
            ModelPrior::Joint { per_factor, factors } => {
                let mut coords = Vec::with_capacity(self.state_dim());
                for _ in 0..*factors {
                    coords.extend(per_factor.sample_state(rng).0);
                }
                UnconstrainedState(coords)
            }
        }
    }
}

impl QuasiModel {
    /// Data-term value only.
    pub fn neg_loglik(&self, prior: &ModelPrior, state: &UnconstrainedState) -> f64 {
        match (self, prior) {
            (QuasiModel::Deconv(m), ModelPrior::Single(spec)) => m.neg_loglik(spec, state),
            (QuasiModel::RepMeas(m), ModelPrior::Single(spec)) => m.neg_loglik(spec, state),
            (QuasiModel::Factor(m), prior) => match m.target {
                FactorTarget::Single(_) => {
                    m.objective_single(&prior.spec().constrain(state))
                }
                FactorTarget::Joint => m.objective_joint(&prior.constrain_all(state)),
            },
            _ => panic!("model and prior layouts are inconsistent"),
        }
    }

    /// Data-term value and gradient in the unconstrained coordinates.
    pub fn neg_loglik_grad(
        &self,
        prior: &ModelPrior,
        state: &UnconstrainedState,
    ) -> (f64, Vec<f64>) {
        match (self, prior) {
            (QuasiModel::Deconv(m), ModelPrior::Single(spec)) => m.objective_grad(spec, state),
            (QuasiModel::RepMeas(m), ModelPrior::Single(spec)) => m.objective_grad(spec, state),
            (QuasiModel::Factor(m), prior) => match m.target {
                FactorTarget::Single(_) => m.objective_grad_single(prior.spec(), state),
                FactorTarget::Joint => {
                    let blocks = prior.blocks(state);
                    let (obj, grads) = m.objective_grad_joint(prior.spec(), &blocks);
                    (obj, grads.concat())
                }
            },
            _ => panic!("model and prior layouts are inconsistent"),
        }
    }
}

/// The sampler target `log pi = -neg_loglik + log_prior`, with a counter for
/// proposals rejected at the CF floor (a sampler health metric).
pub struct QuasiPosterior<'a> {
    pub model: &'a QuasiModel,
    pub prior: &'a ModelPrior,
    floor_breaches: std::sync::atomic::AtomicU64,
}

impl<'a> QuasiPosterior<'a> {
    pub fn new(model: &'a QuasiModel, prior: &'a ModelPrior) -> Self {
        Self { model, prior, floor_breaches: std::sync::atomic::AtomicU64::new(0) }
    }

    pub fn dim(&self) -> usize {
        self.prior.state_dim()
    }

    pub fn floor_breaches(&self) -> u64 {
        self.floor_breaches.load(std::sync::atomic::Ordering::Relaxed)
    }

    /// Negative log posterior (objective plus `-log_prior`) and gradient.
    pub fn neg_log_posterior_grad(&self, state: &UnconstrainedState) -> (f64, Vec<f64>) {
        let (obj, mut grad) = self.model.neg_loglik_grad(self.prior, state);
        if !obj.is_finite() {
            self.floor_breaches.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            return (f64::INFINITY, grad);
        }
        let (logp, pgrad) = self.prior.log_prior_grad(state);
        for (g, p) in grad.iter_mut().zip(&pgrad) {
            *g -= p;
        }
        (obj - logp, grad)
    }

    /// `log pi` and gradient, as consumed by the sampler.
    pub fn logp_grad(&self, coords: &[f64]) -> (f64, Vec<f64>) {
        let state = UnconstrainedState(coords.to_vec());
        let (neg, mut grad) = self.neg_log_posterior_grad(&state);
        grad.iter_mut().for_each(|g| *g = -*g);
        (-neg, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn gauss_cf(t: f64, sigma2: f64) -> Complex64 {
        Complex64::new((-0.5 * sigma2 * t * t).exp(), 0.0)
    }

    fn column(values: &[f64]) -> Dataset {
        Dataset::from_column(values.to_vec()).unwrap()
    }

    #[test]
    fn symmetrize_examples() {
        let y1 = column(&[2.0]);
        let y2 = column(&[0.0]);
        let (proxy, aux) = symmetrize_to_deconv(&y1, &y2).unwrap();
        assert_eq!(proxy.rows()[0][0], 1.0);
        assert_eq!(aux.rows()[0][0], 1.0);

        let same = column(&[0.3, -1.0]);
        let (_, aux) = symmetrize_to_deconv(&same, &same).unwrap();
        assert!(aux.rows().iter().all(|r| r[0] == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..50).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..50).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let (p, q) = symmetrize_to_deconv(&column(&a), &column(&b)).unwrap();
        for i in 0..50 {
            assert!((p.rows()[i][0] + q.rows()[i][0] - a[i]).abs() < 1e-15);
            assert!((p.rows()[i][0] - q.rows()[i][0] - b[i]).abs() < 1e-15);
        }

        assert!(symmetrize_to_deconv(&column(&[1.0]), &column(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn deconv_objective_shrinks_as_candidate_sharpens() {
        // Same Y and eps samples: ecf_Y = ecf_eps, and a point mass at zero
        // with vanishing variance drives the objective to zero.
        let data = column(&[0.4, -1.1, 2.0, 0.1]);
        let quad = BoxQuadrature::build(2.0, 64, 1).unwrap();
        let model = DeconvModel::from_data(&data, &data, &quad).unwrap();
        let mut last = f64::INFINITY;
        for sigma2 in [1.0, 0.5, 0.1, 0.01, 1e-4] {
            let cand = MixtureParams::single(vec![0.0], sigma2).unwrap();
            let obj = model.objective(&cand);
            assert!(obj < last, "objective not decreasing at sigma2 = {sigma2}");
            last = obj;
        }
        assert!(last < 1e-4);
    }

    #[test]
    fn deconv_point_data_matches_scalar_quadrature() {
        // Y = eps = {0}: objective is (n/2) int_{-2}^{2} (1 - e^{-t^2/2})^2 dt.
        // Independent oracle: Simpson's rule on a fine grid.
        let zero = column(&[0.0]);
        let quad = BoxQuadrature::build(2.0, 1024, 1).unwrap();
        let mut model = DeconvModel::from_data(&zero, &zero, &quad).unwrap();
        model.n = 2.0; // (n/2) = 1: compare integrals directly
        let cand = MixtureParams::single(vec![0.0], 1.0).unwrap();
        let got = model.objective(&cand);

        let f = |t: f64| {
            let v = 1.0 - (-0.5 * t * t).exp();
            v * v
        };
        let m = 4096;
        let h = 4.0 / m as f64;
        let mut oracle = f(-2.0) + f(2.0);
        for i in 1..m {
            let t = -2.0 + i as f64 * h;
            oracle += if i % 2 == 1 { 4.0 } else { 2.0 } * f(t);
        }
        oracle *= h / 3.0;
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
    }

    #[test]
    fn deconv_invariant_under_component_permutation() {
        let y = column(&[0.5, -0.2, 1.4]);
        let eps = column(&[0.1, -0.1]);
        let quad = BoxQuadrature::build(2.0, 32, 1).unwrap();
        let model = DeconvModel::from_data(&y, &eps, &quad).unwrap();
        let a = MixtureParams::new(
            vec![0.3, 0.7],
            vec![vec![-1.0], vec![2.0]],
            nalgebra::DMatrix::from_element(1, 1, 0.8),
        )
        .unwrap();
        let b = MixtureParams::new(
            vec![0.7, 0.3],
            vec![vec![2.0], vec![-1.0]],
            nalgebra::DMatrix::from_element(1, 1, 0.8),
        )
        .unwrap();
        assert!((model.objective(&a) - model.objective(&b)).abs() < 1e-12);
    }

    #[test]
    fn deconv_reduces_to_plain_cf_matching_with_unit_aux() {
        // Aux sample {0} gives ecf_eps = 1 identically: the objective becomes
        // (n/2) || ecf_Y - phi_theta ||^2.
        let y = column(&[0.4, 1.2, -0.3, 0.9]);
        let quad = BoxQuadrature::build(2.0, 48, 1).unwrap();
        let model = DeconvModel::from_data(&y, &column(&[0.0]), &quad).unwrap();
        let cand = MixtureParams::new(
            vec![0.5, 0.5],
            vec![vec![-0.5], vec![0.5]],
            nalgebra::DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        let got = model.objective(&cand);
        let mut acc = 0.0;
        for t in quad.nodes() {
            let r = crate::ecf::ecf_eval(&y, t) - cand.cf(t);
            acc += r.norm_sqr();
        }
        let expect = 0.5 * 4.0 * quad.weight() * acc;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn repmeas_population_zero_at_truth() {
        // X ~ N(0,1), eps1, eps2 ~ N(0,1): phi_{Y2}(t) = e^{-t^2},
        // weighted = phi_{Y2}(t) * (-t). Candidate N(0,1) zeros the residual.
        let quad = BoxQuadrature::build(2.0, 64, 1).unwrap();
        let model = RepMeasModel::population(
            &quad,
            |t| gauss_cf(t[0], 2.0),
            |t| vec![gauss_cf(t[0], 2.0) * Complex64::new(-t[0], 0.0)],
            100.0,
        );
        let truth = MixtureParams::single(vec![0.0], 1.0).unwrap();
        assert!(model.objective(&truth) <= 1e-10);
    }

    #[test]
    fn repmeas_degenerate_data_analytic_value() {
        // Y1 = Y2 = {0}: ecf_{Y2} = 1, weighted = 0, candidate {delta_0, 1}:
        // objective = (n/2) int_{-1}^{1} t^2 dt = n/3.
        let zero = column(&[0.0]);
        let quad = BoxQuadrature::build(1.0, 16384, 1).unwrap();
        let model = RepMeasModel::from_data(&zero, &zero, &quad, false).unwrap();
        let cand = MixtureParams::single(vec![0.0], 1.0).unwrap();
        let got = model.objective(&cand);
        assert!((got - 1.0 / 3.0).abs() < 1e-8, "{got}");
    }

    #[test]
    fn repmeas_symmetrized_is_sum_of_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..40).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let e1: Vec<f64> = (0..40).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let e2: Vec<f64> = (0..40).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect();
        let y1 = column(&x.iter().zip(&e1).map(|(a, b)| a + b).collect::<Vec<_>>());
        let y2 = column(&x.iter().zip(&e2).map(|(a, b)| a + b).collect::<Vec<_>>());
        let quad = BoxQuadrature::build(1.5, 32, 1).unwrap();
        let both = RepMeasModel::from_data(&y1, &y2, &quad, true).unwrap();
        let fwd = RepMeasModel::from_data(&y1, &y2, &quad, false).unwrap();
        let bwd = RepMeasModel::from_data(&y2, &y1, &quad, false).unwrap();
        let cand = MixtureParams::new(
            vec![0.4, 0.6],
            vec![vec![-0.7], vec![0.9]],
            nalgebra::DMatrix::from_element(1, 1, 0.7),
        )
        .unwrap();
        let total = both.objective(&cand);
        let parts = fwd.objective(&cand) + bwd.objective(&cand);
        assert!((total - parts).abs() < 1e-9 * parts.max(1.0));
    }

    #[test]
    fn repmeas_floor_breach_returns_infinite_sentinel() {
        let zero = column(&[0.0]);
        let quad = BoxQuadrature::build(2.0, 16, 1).unwrap();
        let model = RepMeasModel::from_data(&zero, &zero, &quad, false).unwrap();
        // Enormous variance crushes the CF under the floor at the outer nodes.
        let cand = MixtureParams::single(vec![0.0], 60.0).unwrap();
        assert!(model.objective(&cand).is_infinite());

        let spec = PriorSpec::default_for_dim(1, 1);
        let state = UnconstrainedState(vec![0.0, 60.0f64.ln()]);
        let (obj, grad) = model.objective_grad(&spec, &state);
        assert!(obj.is_infinite());
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn factor_population_zero_at_truth() {
        // Repeated-measurements embedding with all factors standard normal:
        // candidates N(0,1) per factor zero both the single and joint forms.
        let loadings =
            DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let quad = BoxQuadrature::build(2.0, 24, 2).unwrap();
        let phi_y = |t: &[f64]| {
            // phi_Y(t) = prod_k phi_{X_k}(t'A_k), standard normal factors.
            let s1 = t[0] + t[1];
            gauss_cf(s1, 1.0) * gauss_cf(t[0], 1.0) * gauss_cf(t[1], 1.0)
        };
        let combo = |t: &[f64]| {
            let p = phi_y(t);
            let mut m = DMatrix::zeros(2, 2);
            // grad grad' log phi_Y = sum_k A_k A_k' (log phi_k)'' = -(sum A_k A_k').
            for (a, b, v) in [(0, 0, -2.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, -2.0)] {
                m[(a, b)] = p * p * Complex64::new(v, 0.0);
            }
            m
        };
        let truth = MixtureParams::single(vec![0.0], 1.0).unwrap();

        let single = FactorModel::population(
            &quad,
            loadings.clone(),
            FactorTarget::Single(0),
            phi_y,
            combo,
            50.0,
        )
        .unwrap();
        assert!(single.objective_single(&truth) <= 1e-10);

        let joint =
            FactorModel::population(&quad, loadings, FactorTarget::Joint, phi_y, combo, 50.0)
                .unwrap();
        let cands = vec![truth.clone(), truth.clone(), truth];
        assert!(joint.objective_joint(&cands) <= 1e-10);
    }

    #[test]
    fn factor_point_mass_data_closed_form() {
        // All Y rows equal: the combo matrix vanishes, |ecf| = 1, and the
        // objective reduces to (n/2) sigma^4 (2T)^L for a Gaussian candidate.
        let rows = vec![vec![0.7, -1.3]; 5];
        let y = Dataset::new(rows).unwrap();
        let loadings = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let t_radius = 1.5;
        let quad = BoxQuadrature::build(t_radius, 24, 2).unwrap();
        let model = FactorModel::from_data(&y, loadings, FactorTarget::Single(0), &quad).unwrap();
        let sigma2 = 0.6;
        let cand = MixtureParams::single(vec![0.4], sigma2).unwrap();
        let got = model.objective_single(&cand);
        let expect = 0.5 * 5.0 * sigma2 * sigma2 * (2.0 * t_radius) * (2.0 * t_radius);
        assert!((got - expect).abs() / expect < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn factor_joint_equals_q_weighted_stack_of_single_residuals() {
        // With Q square and invertible the joint residual is Q times the
        // stacked single-factor residuals, so the objectives agree through
        // the Q'Q quadratic form (and coincide at zero: population truth).
        let loadings = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| {
                let x: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let e1: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let e2: f64 = rand_distr::StandardNormal.sample(&mut rng);
                vec![x + e1, x + e2]
            })
            .collect();
        let y = Dataset::new(rows).unwrap();
        let quad = BoxQuadrature::build(1.2, 16, 2).unwrap();
        let joint =
            FactorModel::from_data(&y, loadings.clone(), FactorTarget::Joint, &quad).unwrap();
        let cands: Vec<MixtureParams> = (0..3)
            .map(|k| MixtureParams::single(vec![0.1 * k as f64], 0.8 + 0.1 * k as f64).unwrap())
            .collect();

        // Reassemble the joint objective from single-factor residual stacks.
        let q = joint.q_matrix().clone();
        let mut expect = 0.0;
        for (i, t) in joint.nodes.iter().enumerate() {
            for row in 0..3 {
                let mut model_val = Complex64::ZERO;
                for k in 0..3 {
                    let s: f64 = t
                        .iter()
                        .zip(loadings.column(k).iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    let h = cands[k].cf_log_hess_1d(s, 1e-300).unwrap();
                    model_val += q[(row, k)] * h;
                }
                let r = joint.combo_vech[i][row] - joint.phi2[i] * model_val;
                expect += r.norm_sqr();
            }
        }
        expect *= 0.5 * joint.n() * joint.weight;
        let got = joint.objective_joint(&cands);
        assert!((got - expect).abs() / expect.max(1.0) < 1e-9);
    }

    #[test]
    fn build_q_embedding_and_rank_error() {
        let loadings = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let (q, qstar) = build_q(&loadings).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert_eq!(q, expect);
        let prod = qstar * &q;
        for a in 0..3 {
            for b in 0..3 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((prod[(a, b)] - want).abs() < 1e-12);
            }
        }

        // Proportional columns give identical A_k A_k' up to scale.
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 2.0]);
        match build_q(&bad) {
            Err(Error::Identification(msg)) => assert!(msg.contains("rank"), "{msg}"),
            other => panic!("expected identification error, got {other:?}"),
        }
    }

    fn fd_check(
        dim: usize,
        f: &dyn Fn(&UnconstrainedState) -> f64,
        grad_f: &dyn Fn(&UnconstrainedState) -> (f64, Vec<f64>),
        seed: u64,
        states: usize,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..states {
            let coords: Vec<f64> = (0..dim)
                .map(|_| {
                    let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                    0.5 * z
                })
                .collect();
            let state = UnconstrainedState(coords.clone());
            let (val, grad) = grad_f(&state);
            assert!(val.is_finite());
            for i in 0..dim {
                let h = 1e-5 * (1.0 + coords[i].abs());
                let mut up = coords.clone();
                up[i] += h;
                let mut dn = coords.clone();
                dn[i] -= h;
                let fd = (f(&UnconstrainedState(up)) - f(&UnconstrainedState(dn))) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
                assert!(rel <= tol, "coord {i}: analytic {} vs fd {fd}", grad[i]);
            }
        }
    }

    #[test]
    fn deconv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                (0..2)
                    .map(|_| {
                        let v: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        v
                    })
                    .collect()
            })
            .collect();
        let y = Dataset::new(rows.clone()).unwrap();
        let eps = Dataset::new(rows.iter().map(|r| vec![0.3 * r[0], 0.3 * r[1]]).collect()).unwrap();
        let quad = BoxQuadrature::build(1.5, 10, 2).unwrap();
        let model = DeconvModel::from_data(&y, &eps, &quad).unwrap();
        let spec = PriorSpec::default_for_dim(2, 3);
        fd_check(
            spec.state_dim(),
            &|s| model.neg_loglik(&spec, s),
            &|s| model.objective_grad(&spec, s),
            101,
            6,
            1e-5,
        );
    }

    #[test]
    fn repmeas_gradient_matches_finite_differences_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let rows1: Vec<Vec<f64>> = (0..25)
            .map(|_| (0..2).map(|_| rand_distr::StandardNormal.sample(&mut rng)).collect())
            .collect();
        let rows2: Vec<Vec<f64>> = rows1
            .iter()
            .map(|r| {
                r.iter()
                    .map(|x| {
                        let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
                        x + 0.5 * e
                    })
                    .collect()
            })
            .collect();
        let y1 = Dataset::new(rows1).unwrap();
        let y2 = Dataset::new(rows2).unwrap();
        let quad = SphereLineQuadrature::build(1.5, 16, 6, 2).unwrap();
        let model = RepMeasModel::from_data_boundary(&y1, &y2, &quad, true).unwrap();
        let spec = PriorSpec::default_for_dim(2, 3);
        fd_check(
            spec.state_dim(),
            &|s| model.neg_loglik(&spec, s),
            &|s| model.objective_grad(&spec, s),
            201,
            6,
            1e-5,
        );
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        let loadings = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let x: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let e1: f64 = rand_distr::StandardNormal.sample(&mut rng);
                let e2: f64 = rand_distr::StandardNormal.sample(&mut rng);
                vec![2.0 * x + e1, x + e2]
            })
            .collect();
        let y = Dataset::new(rows).unwrap();
        let quad = BoxQuadrature::build(1.5, 12, 2).unwrap();
        let spec = PriorSpec::default_for_dim(1, 3);

        let single =
            FactorModel::from_data(&y, loadings.clone(), FactorTarget::Single(0), &quad).unwrap();
        fd_check(
            spec.state_dim(),
            &|s| single.objective_single(&spec.constrain(s)),
            &|s| single.objective_grad_single(&spec, s),
            301,
            6,
            1e-5,
        );

        let joint = FactorModel::from_data(&y, loadings, FactorTarget::Joint, &quad).unwrap();
        let prior = ModelPrior::Joint { per_factor: spec, factors: 3 };
        let qm = QuasiModel::Factor(joint);
        fd_check(
            prior.state_dim(),
            &|s| qm.neg_loglik(&prior, s),
            &|s| qm.neg_loglik_grad(&prior, s),
            302,
            4,
            1e-5,
        );
    }

    #[test]
    fn posterior_target_combines_data_and_prior() {
        let y = column(&[0.2, -0.5, 1.0]);
        let quad = BoxQuadrature::build(2.0, 16, 1).unwrap();
        let model =
            QuasiModel::Deconv(DeconvModel::from_data(&y, &column(&[0.0]), &quad).unwrap());
        let prior = ModelPrior::Single(PriorSpec::default_for_dim(1, 2));
        let post = QuasiPosterior::new(&model, &prior);
        let coords = vec![0.1, -0.3, 0.4, 0.2];
        let (logp, grad) = post.logp_grad(&coords);
        let state = UnconstrainedState(coords.clone());
        let expect = -(model.neg_loglik(&prior, &state))
            + prior.log_prior_grad(&state).0;
        assert!((logp - expect).abs() < 1e-12);
        assert_eq!(grad.len(), 4);

        // Gradient of the full posterior also passes a finite-difference spot
        // check.
        let f = |s: &UnconstrainedState| {
            -(model.neg_loglik(&prior, s)) + prior.log_prior_grad(s).0
        };
        for i in 0..4 {
            let mut up = coords.clone();
            up[i] += 1e-6;
            let mut dn = coords.clone();
            dn[i] -= 1e-6;
            let fd = (f(&UnconstrainedState(up)) - f(&UnconstrainedState(dn))) / 2e-6;
            assert!((grad[i] - fd).abs() / fd.abs().max(1.0) < 1e-5);
        }
    }
}
