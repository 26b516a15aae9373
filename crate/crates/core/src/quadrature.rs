//! Deterministic quadrature for the two norms the quasi-likelihoods use:
//! the plain `L^2` seminorm over the cube `[-T, T]^d` and the
//! boundary-corrected metric over the Euclidean ball plus sphere-and-radial
//! line integrals.
//!
//! Nodes are deterministic functions of their settings so the quasi-posterior
//! log-density stays a fixed smooth function of the candidate parameters.

use num_complex::Complex64;

use crate::error::{Error, Result};

const MAX_BOX_NODES: usize = 10_000_000;

/// Midpoint tensor rule on the cube `[-T, T]^d`.
#[derive(Debug, Clone)]
pub struct BoxQuadrature {
    t_radius: f64,
    nodes_per_dim: usize,
    dim: usize,
    nodes: Vec<Vec<f64>>,
    weight: f64,
}

impl BoxQuadrature {
    pub fn build(t_radius: f64, nodes_per_dim: usize, dim: usize) -> Result<Self> {
        if t_radius <= 0.0 || !t_radius.is_finite() {
            return Err(Error::Domain("box radius must be positive".into()));
        }
        if nodes_per_dim < 2 {
            return Err(Error::Domain("box quadrature needs m >= 2 nodes per dimension".into()));
        }
        if dim == 0 {
            return Err(Error::Domain("box quadrature needs d >= 1".into()));
        }
        let count = nodes_per_dim
            .checked_pow(dim as u32)
            .filter(|c| *c <= MAX_BOX_NODES)
            .ok_or_else(|| {
                Error::Resource(format!(
                    "box grid {nodes_per_dim}^{dim} exceeds {MAX_BOX_NODES} nodes"
                ))
            })?;
        let step = 2.0 * t_radius / nodes_per_dim as f64;
        let axis: Vec<f64> = (0..nodes_per_dim)
            .map(|i| -t_radius + (i as f64 + 0.5) * step)
            .collect();
        let mut nodes = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        loop {
            nodes.push(idx.iter().map(|&i| axis[i]).collect());
            let mut k = dim;
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < nodes_per_dim {
                    break;
                }
                idx[k] = 0;
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }
        Ok(Self {
            t_radius,
            nodes_per_dim,
            dim,
            nodes,
            weight: step.powi(dim as i32),
        })
    }

    pub fn t_radius(&self) -> f64 {
        self.t_radius
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    /// Uniform cell weight `(2T/m)^d`.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// `int_{B(T)} |f|^2` for per-node complex values.
    pub fn seminorm_sq(&self, values: &[Complex64]) -> Result<f64> {
        if values.len() != self.nodes.len() {
            return Err(Error::LengthMismatch { expected: self.nodes.len(), got: values.len() });
        }
        Ok(self.weight * values.iter().map(|v| v.norm_sqr()).sum::<f64>())
    }
}

/// Quadrature for the boundary-corrected metric: polar-product nodes for the
/// Euclidean-ball volume term, surface nodes on the radius-T sphere and
/// radial line nodes on [0, 1].
#[derive(Debug, Clone)]
pub struct SphereLineQuadrature {
    t_radius: f64,
    dim: usize,
    sphere_nodes: Vec<Vec<f64>>,
    sphere_weights: Vec<f64>,
    line_nodes: Vec<f64>,
    line_weights: Vec<f64>,
    ball_nodes: Vec<Vec<f64>>,
    ball_weights: Vec<f64>,
}

impl SphereLineQuadrature {
    /// `surface_nodes` points on the sphere, `line_nodes` on each radial
    /// segment. Only d = 2 and d = 3 are supported; for d = 1 the plain
    /// posterior without boundary correction identifies the latent
    /// distribution and should be used instead.
    pub fn build(t_radius: f64, surface_nodes: usize, line_nodes: usize, dim: usize) -> Result<Self> {
        if t_radius <= 0.0 || !t_radius.is_finite() {
            return Err(Error::Domain("sphere radius must be positive".into()));
        }
        if surface_nodes < 8 || line_nodes < 4 {
            return Err(Error::Domain("boundary quadrature needs M >= 8 and q >= 4".into()));
        }
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedDimension {
                d: dim,
                msg: "boundary-corrected metric covers d in {2, 3}; for d = 1 use the \
                      posterior without boundary correction"
                    .into(),
            });
        }

        let (sphere_nodes, sphere_weights) = match dim {
            2 => {
                let w = 2.0 * std::f64::consts::PI * t_radius / surface_nodes as f64;
                let nodes: Vec<Vec<f64>> = (0..surface_nodes)
                    .map(|k| {
                        let theta = 2.0 * std::f64::consts::PI * k as f64 / surface_nodes as f64;
                        vec![t_radius * theta.cos(), t_radius * theta.sin()]
                    })
                    .collect();
                (nodes, vec![w; surface_nodes])
            }
            _ => {
                let w = 4.0 * std::f64::consts::PI * t_radius * t_radius / surface_nodes as f64;
                let golden = (1.0 + 5.0f64.sqrt()) / 2.0;
                let nodes: Vec<Vec<f64>> = (0..surface_nodes)
                    .map(|k| {
                        let z = 1.0 - (2.0 * k as f64 + 1.0) / surface_nodes as f64;
                        let r = (1.0 - z * z).sqrt();
                        let phi = 2.0 * std::f64::consts::PI * k as f64 / golden;
                        vec![t_radius * r * phi.cos(), t_radius * r * phi.sin(), t_radius * z]
                    })
                    .collect();
                (nodes, vec![w; surface_nodes])
            }
        };

        let (line_nodes_v, line_weights) = gauss_legendre(line_nodes, 0.0, 1.0);

        // Volume term: Gauss-Legendre radial nodes (with the r^{d-1} factor
        // folded into the weight) crossed with the sphere directions.
        let radial_count = 2 * line_nodes;
        let (radial_nodes, radial_w) = gauss_legendre(radial_count, 0.0, t_radius);
        let mut ball_nodes = Vec::with_capacity(radial_count * surface_nodes);
        let mut ball_weights = Vec::with_capacity(radial_count * surface_nodes);
        let dir_norm = t_radius.powi(dim as i32 - 1);
        for (r, wr) in radial_nodes.iter().zip(&radial_w) {
            let radial_weight = wr * r.powi(dim as i32 - 1);
            for (z, wz) in sphere_nodes.iter().zip(&sphere_weights) {
                ball_nodes.push(z.iter().map(|c| c * r / t_radius).collect());
                ball_weights.push(radial_weight * wz / dir_norm);
            }
        }

        Ok(Self {
            t_radius,
            dim,
            sphere_nodes,
            sphere_weights,
            line_nodes: line_nodes_v,
            line_weights,
            ball_nodes,
            ball_weights,
        })
    }

    pub fn t_radius(&self) -> f64 {
        self.t_radius
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sphere_nodes(&self) -> &[Vec<f64>] {
        &self.sphere_nodes
    }

    pub fn sphere_weights(&self) -> &[f64] {
        &self.sphere_weights
    }

    pub fn line_nodes(&self) -> &[f64] {
        &self.line_nodes
    }

    pub fn line_weights(&self) -> &[f64] {
        &self.line_weights
    }

    pub fn ball_nodes(&self) -> &[Vec<f64>] {
        &self.ball_nodes
    }

    pub fn ball_weights(&self) -> &[f64] {
        &self.ball_weights
    }

    /// Every evaluation point of the metric: ball nodes first, then the
    /// sphere x line products `t_l * z_s`.
    pub fn metric_nodes(&self) -> Vec<Vec<f64>> {
        let mut nodes = self.ball_nodes.clone();
        for z in &self.sphere_nodes {
            for t in &self.line_nodes {
                nodes.push(z.iter().map(|c| c * t).collect());
            }
        }
        nodes
    }

    /// Weights aligned with [`Self::metric_nodes`].
    pub fn metric_weights(&self) -> Vec<f64> {
        let mut w = self.ball_weights.clone();
        for wz in &self.sphere_weights {
            for wt in &self.line_weights {
                w.push(wz * wt);
            }
        }
        w
    }

    /// Boundary-corrected squared metric of a complex vector field:
    /// the Euclidean-ball volume integral of `||g||^2` plus the
    /// sphere-and-line double integral of `||g(t z)||^2`.
    pub fn boundary_metric_sq<F>(&self, mut g: F) -> Result<f64>
    where
        F: FnMut(&[f64]) -> Result<Vec<Complex64>>,
    {
        let mut eval = |node: &[f64]| -> Result<f64> {
            let v = g(node).map_err(|e| Error::Evaluator { node: node.to_vec(), source: Box::new(e) })?;
            Ok(v.iter().map(|c| c.norm_sqr()).sum())
        };
        let mut total = 0.0;
        for (node, w) in self.ball_nodes.iter().zip(&self.ball_weights) {
            total += w * eval(node)?;
        }
        let mut scaled = vec![0.0; self.dim];
        for (z, wz) in self.sphere_nodes.iter().zip(&self.sphere_weights) {
            for (t, wt) in self.line_nodes.iter().zip(&self.line_weights) {
                for (s, c) in scaled.iter_mut().zip(z) {
                    *s = c * t;
                }
                total += wz * wt * eval(&scaled)?;
            }
        }
        Ok(total)
    }
}

/// Gauss-Legendre nodes and weights on `[a, b]`, by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1 && b > a);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = mid - half * x;
        nodes[n - 1 - i] = mid + half * x;
        weights[i] = half * w;
        weights[n - 1 - i] = half * w;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_constant_integral_is_exact() {
        let q1 = BoxQuadrature::build(1.0, 16, 1).unwrap();
        let ones = vec![Complex64::ONE; q1.nodes().len()];
        assert!((q1.seminorm_sq(&ones).unwrap() - 2.0).abs() < 1e-12);

        let q2 = BoxQuadrature::build(1.0, 12, 2).unwrap();
        let ones = vec![Complex64::ONE; q2.nodes().len()];
        assert!((q2.seminorm_sq(&ones).unwrap() - 4.0).abs() < 1e-12);

        let qt = BoxQuadrature::build(2.0, 16, 1).unwrap();
        let ones = vec![Complex64::ONE; qt.nodes().len()];
        assert!((qt.seminorm_sq(&ones).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn box_quadratic_integral() {
        // int_{-1}^{1} t^2 dt = 2/3; seminorm of f(t) = t.
        let q = BoxQuadrature::build(1.0, 64, 1).unwrap();
        let vals: Vec<Complex64> =
            q.nodes().iter().map(|t| Complex64::new(t[0], 0.0)).collect();
        assert!((q.seminorm_sq(&vals).unwrap() - 2.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn box_unit_modulus_field() {
        let q = BoxQuadrature::build(std::f64::consts::PI, 32, 1).unwrap();
        let vals: Vec<Complex64> =
            q.nodes().iter().map(|t| Complex64::from_polar(1.0, t[0])).collect();
        let expect = 2.0 * std::f64::consts::PI;
        assert!((q.seminorm_sq(&vals).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn box_nodes_symmetric_and_deterministic() {
        let q = BoxQuadrature::build(1.5, 10, 2).unwrap();
        let set: std::collections::BTreeSet<Vec<i64>> = q
            .nodes()
            .iter()
            .map(|n| n.iter().map(|x| (x * 1e12).round() as i64).collect())
            .collect();
        for node in q.nodes() {
            let neg: Vec<i64> = node.iter().map(|x| (-x * 1e12).round() as i64).collect();
            assert!(set.contains(&neg));
        }
        let again = BoxQuadrature::build(1.5, 10, 2).unwrap();
        assert_eq!(q.nodes(), again.nodes());
    }

    #[test]
    fn box_resource_guard() {
        match BoxQuadrature::build(1.0, 512, 4) {
            Err(Error::Resource(_)) => {}
            other => panic!("expected resource error, got {other:?}"),
        }
    }

    #[test]
    fn box_length_mismatch() {
        let q = BoxQuadrature::build(1.0, 8, 1).unwrap();
        assert!(q.seminorm_sq(&[Complex64::ONE]).is_err());
    }

    #[test]
    fn seminorm_zero_field() {
        let q = BoxQuadrature::build(2.0, 8, 1).unwrap();
        let zeros = vec![Complex64::ZERO; q.nodes().len()];
        assert_eq!(q.seminorm_sq(&zeros).unwrap(), 0.0);
    }

    #[test]
    fn sphere_weights_sum_to_surface_measure() {
        let q = SphereLineQuadrature::build(3.0, 64, 16, 2).unwrap();
        let total: f64 = q.sphere_weights().iter().sum();
        assert!((total - 6.0 * std::f64::consts::PI).abs() < 1e-12);
        for z in q.sphere_nodes() {
            let r = (z[0] * z[0] + z[1] * z[1]).sqrt();
            assert!((r - 3.0).abs() < 1e-12);
        }

        let q3 = SphereLineQuadrature::build(1.5, 500, 8, 3).unwrap();
        let total: f64 = q3.sphere_weights().iter().sum();
        let area = 4.0 * std::f64::consts::PI * 1.5f64 * 1.5;
        assert!((total - area).abs() < 1e-9);
        // Second moment of the uniform sphere measure: int z1^2 = area T^2 / 3.
        let moment: f64 = q3
            .sphere_nodes()
            .iter()
            .zip(q3.sphere_weights())
            .map(|(z, w)| w * z[0] * z[0])
            .sum();
        let expect = area * 1.5f64 * 1.5 / 3.0;
        assert!((moment - expect).abs() / expect < 0.01);
    }

    #[test]
    fn ball_weights_sum_to_volume() {
        let q = SphereLineQuadrature::build(2.0, 64, 16, 2).unwrap();
        let total: f64 = q.ball_weights().iter().sum();
        assert!((total - std::f64::consts::PI * 4.0).abs() < 1e-9);

        let q3 = SphereLineQuadrature::build(1.2, 128, 8, 3).unwrap();
        let total: f64 = q3.ball_weights().iter().sum();
        let vol = 4.0 / 3.0 * std::f64::consts::PI * 1.2f64.powi(3);
        assert!((total - vol).abs() / vol < 1e-9);
    }

    #[test]
    fn boundary_metric_constant_field() {
        // |c|^2 (pi T^2 + 2 pi T) for a constant field in d = 2.
        let t = 1.7;
        let q = SphereLineQuadrature::build(t, 64, 16, 2).unwrap();
        let c = Complex64::new(0.8, -0.3);
        let got = q
            .boundary_metric_sq(|_| Ok(vec![c]))
            .unwrap();
        let expect = c.norm_sqr() * (std::f64::consts::PI * t * t + 2.0 * std::f64::consts::PI * t);
        assert!((got - expect).abs() / expect < 1e-6);
    }

    #[test]
    fn boundary_metric_identity_field() {
        // pi T^4 / 2 + 2 pi T^3 / 3 for g(t) = t in d = 2.
        let t = 1.0;
        let q = SphereLineQuadrature::build(t, 64, 16, 2).unwrap();
        let got = q
            .boundary_metric_sq(|node| {
                Ok(node.iter().map(|x| Complex64::new(*x, 0.0)).collect())
            })
            .unwrap();
        let expect = std::f64::consts::PI * t.powi(4) / 2.0
            + 2.0 * std::f64::consts::PI * t.powi(3) / 3.0;
        assert!((got - expect).abs() / expect < 1e-10);
    }

    #[test]
    fn boundary_metric_zero_field_and_error_propagation() {
        let q = SphereLineQuadrature::build(1.0, 16, 4, 2).unwrap();
        assert_eq!(q.boundary_metric_sq(|_| Ok(vec![Complex64::ZERO; 2])).unwrap(), 0.0);
        let err = q
            .boundary_metric_sq(|_| Err(Error::Domain("boom".into())))
            .unwrap_err();
        match err {
            Error::Evaluator { node, .. } => assert_eq!(node.len(), 2),
            other => panic!("expected evaluator error, got {other}"),
        }
    }

    #[test]
    fn unsupported_dimension_points_to_plain_posterior() {
        let err = SphereLineQuadrature::build(1.0, 16, 8, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("without boundary correction"), "{msg}");
    }

    #[test]
    fn refinement_convergence_order() {
        // Midpoint-rule changes shrink at order >= 1.9 on a smooth integrand.
        let integral = |m: usize| {
            let q = BoxQuadrature::build(1.0, m, 1).unwrap();
            let vals: Vec<Complex64> = q
                .nodes()
                .iter()
                .map(|t| Complex64::new((1.3 * t[0]).cos(), 0.0))
                .collect();
            q.seminorm_sq(&vals).unwrap()
        };
        let (i1, i2, i3) = (integral(16), integral(32), integral(64));
        let change1 = (i2 - i1).abs();
        let change2 = (i3 - i2).abs();
        assert!(change2 < change1);
        assert!(change1 / change2 >= 2f64.powf(1.9) * 0.98);
    }

    #[test]
    fn gauss_legendre_polynomial_exactness() {
        let (x, w) = gauss_legendre(8, 0.0, 1.0);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
        let m2: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert!((m2 - 1.0 / 3.0).abs() < 1e-14);
        let m7: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(7)).sum();
        assert!((m7 - 0.125).abs() < 1e-14);
    }
}
