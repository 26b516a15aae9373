//! Multinomial No-U-Turn sampler with dual-averaging step-size adaptation
//! and diagonal mass-matrix estimation from the second half of warmup.
//!
//! The target is any `log pi` with gradient; the quasi-posteriors plug in
//! through [`crate::likelihood::QuasiPosterior`]. Trajectories that hit a
//! `-inf` log density (the CF-floor region) or blow the energy budget are
//! flagged divergent: their subtree contributes no proposal beyond the
//! pre-divergence part and the draw falls back on the valid portion, so kept
//! draws never carry a non-finite log density.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Targets the sampler can draw from.
pub trait LogpTarget: Sync {
    fn dim(&self) -> usize;
    /// `log pi(q)` and its gradient; `-inf` marks a rejected region and the
    /// gradient is then ignored.
    fn logp_grad(&self, coords: &[f64]) -> (f64, Vec<f64>);
}

impl<F> LogpTarget for (usize, F)
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn dim(&self) -> usize {
        self.0
    }

    fn logp_grad(&self, coords: &[f64]) -> (f64, Vec<f64>) {
        (self.1)(coords)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HmcConfig {
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_depth: usize,
    pub divergence_threshold: f64,
    pub adapt_mass: bool,
    pub seed: u64,
    pub chains: usize,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            warmup: 500,
            draws: 1000,
            target_accept: 0.8,
            max_depth: 10,
            divergence_threshold: 1000.0,
            adapt_mass: true,
            seed: 1,
            chains: 2,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::InvalidParameter("sampler needs draws >= 1".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidParameter("target acceptance must lie in (0, 1)".into()));
        }
        if self.max_depth == 0 || self.max_depth > 14 {
            return Err(Error::InvalidParameter("max tree depth must be in 1..=14".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidParameter("need at least one chain".into()));
        }
        Ok(())
    }
}

/// Kept draws of one chain plus its health counters.
#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub draws: Vec<Vec<f64>>,
    pub logp: Vec<f64>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub mean_accept: f64,
    pub step_size: f64,
}

/// A phase-space point: position, momentum, and the cached log density and
/// gradient at the position.
#[derive(Clone)]
pub struct Phase {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
}

fn kinetic(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>()
}

/// One velocity-Verlet step of size `eps` (sign encodes direction);
/// volume-preserving and reversible.
pub fn leapfrog(target: &dyn LogpTarget, state: &Phase, eps: f64, inv_mass: &[f64]) -> Phase {
    let dim = state.q.len();
    let mut p = state.p.clone();
    for i in 0..dim {
        p[i] += 0.5 * eps * state.grad[i];
    }
    let mut q = state.q.clone();
    for i in 0..dim {
        q[i] += eps * inv_mass[i] * p[i];
    }
    let (logp, grad) = target.logp_grad(&q);
    for i in 0..dim {
        p[i] += 0.5 * eps * grad[i];
    }
    Phase { q, p, grad, logp }
}

/// Leapfrog over raw vectors with identity mass; returns
/// `(position, momentum, logp)`.
pub fn leapfrog_step(
    target: &dyn LogpTarget,
    position: &[f64],
    momentum: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, f64) {
    let (logp, grad) = target.logp_grad(position);
    let state = Phase { q: position.to_vec(), p: momentum.to_vec(), grad, logp };
    let inv_mass = vec![1.0; position.len()];
    let next = leapfrog(target, &state, eps, &inv_mass);
    (next.q, next.p, next.logp)
}

struct Subtree {
    minus: Phase,
    plus: Phase,
    proposal: Phase,
    log_sum_w: f64,
    alpha: f64,
    n_alpha: usize,
    divergent: bool,
    turned: bool,
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn is_uturn(minus: &Phase, plus: &Phase, inv_mass: &[f64]) -> bool {
    let mut dot_minus = 0.0;
    let mut dot_plus = 0.0;
    for i in 0..minus.q.len() {
        let diff = plus.q[i] - minus.q[i];
        dot_minus += diff * inv_mass[i] * minus.p[i];
        dot_plus += diff * inv_mass[i] * plus.p[i];
    }
    dot_minus < 0.0 || dot_plus < 0.0
}

struct NutsCore<'a> {
    target: &'a dyn LogpTarget,
    inv_mass: Vec<f64>,
    divergence_threshold: f64,
}

impl NutsCore<'_> {
    fn build_tree(
        &self,
        rng: &mut ChaCha8Rng,
        from: &Phase,
        depth: usize,
        dir: f64,
        eps: f64,
        h0: f64,
    ) -> Subtree {
        if depth == 0 {
            let next = leapfrog(self.target, from, dir * eps, &self.inv_mass);
            let h = if next.logp.is_finite() {
                -next.logp + kinetic(&next.p, &self.inv_mass)
            } else {
                f64::INFINITY
            };
            let energy_error = h - h0;
            let divergent = !(energy_error < self.divergence_threshold);
            let log_w = if divergent { f64::NEG_INFINITY } else { -energy_error };
            let alpha =
                if energy_error.is_finite() { (-energy_error).exp().min(1.0) } else { 0.0 };
            return Subtree {
                minus: next.clone(),
                plus: next.clone(),
                proposal: next,
                log_sum_w: log_w,
                alpha,
                n_alpha: 1,
                divergent,
                turned: false,
            };
        }

        let mut first = self.build_tree(rng, from, depth - 1, dir, eps, h0);
        if first.divergent || first.turned {
            return first;
        }
        let grow_from = if dir > 0.0 { first.plus.clone() } else { first.minus.clone() };
        let second = self.build_tree(rng, &grow_from, depth - 1, dir, eps, h0);

        let total = log_add_exp(first.log_sum_w, second.log_sum_w);
        // Multinomial sampling within the subtree.
        let u: f64 = rng.random();
        if u.ln() < second.log_sum_w - total {
            first.proposal = second.proposal;
        }
        if dir > 0.0 {
            first.plus = second.plus;
        } else {
            first.minus = second.minus;
        }
        first.alpha += second.alpha;
        first.n_alpha += second.n_alpha;
        first.divergent |= second.divergent;
        first.turned = second.turned || is_uturn(&first.minus, &first.plus, &self.inv_mass);
        first.log_sum_w = total;
        first
    }

    fn draw_momentum(&self, rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                z / self.inv_mass[i].sqrt()
            })
            .collect()
    }

    /// One NUTS transition; returns `(new state, accept statistic, divergent)`.
    fn transition(
        &self,
        rng: &mut ChaCha8Rng,
        current: Phase,
        eps: f64,
        max_depth: usize,
    ) -> (Phase, f64, bool) {
        let dim = current.q.len();
        let p0 = self.draw_momentum(rng, dim);
        let start = Phase { p: p0, ..current };
        let h0 = -start.logp + kinetic(&start.p, &self.inv_mass);

        let mut minus = start.clone();
        let mut plus = start.clone();
        let mut proposal = start;
        let mut log_sum_w = 0.0;
        let mut sum_alpha = 0.0;
        let mut n_alpha = 0usize;
        let mut divergent = false;

        for depth in 0..max_depth {
            let dir: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let from = if dir > 0.0 { plus.clone() } else { minus.clone() };
            let subtree = self.build_tree(rng, &from, depth, dir, eps, h0);
            sum_alpha += subtree.alpha;
            n_alpha += subtree.n_alpha;
            if subtree.divergent {
                divergent = true;
                break;
            }
            if subtree.turned {
                break;
            }
            // Biased progressive sampling toward the fresh subtree.
            let u: f64 = rng.random();
            if u.ln() < subtree.log_sum_w - log_sum_w {
                proposal = subtree.proposal.clone();
            }
            log_sum_w = log_add_exp(log_sum_w, subtree.log_sum_w);
            if dir > 0.0 {
                plus = subtree.plus;
            } else {
                minus = subtree.minus;
            }
            if is_uturn(&minus, &plus, &self.inv_mass) {
                break;
            }
        }
        let accept = if n_alpha > 0 { sum_alpha / n_alpha as f64 } else { 0.0 };
        (proposal, accept, divergent)
    }

    fn find_reasonable_epsilon(&self, rng: &mut ChaCha8Rng, state: &Phase) -> f64 {
        let dim = state.q.len();
        let mut eps = 1.0;
        let p0 = self.draw_momentum(rng, dim);
        let probe = Phase { p: p0, ..state.clone() };
        let h0 = -probe.logp + kinetic(&probe.p, &self.inv_mass);

        let log_ratio = |phase: &Phase| -> f64 {
            if phase.logp.is_finite() {
                -(-phase.logp + kinetic(&phase.p, &self.inv_mass)) + h0
            } else {
                f64::NEG_INFINITY
            }
        };

        let mut next = leapfrog(self.target, &probe, eps, &self.inv_mass);
        let mut tries = 0;
        while !log_ratio(&next).is_finite() && tries < 60 {
            eps *= 0.5;
            next = leapfrog(self.target, &probe, eps, &self.inv_mass);
            tries += 1;
        }
        let dir: f64 = if log_ratio(&next) > (0.5f64).ln() { 1.0 } else { -1.0 };
        for _ in 0..100 {
            if dir * log_ratio(&next) <= -dir * std::f64::consts::LN_2 {
                break;
            }
            eps *= 2.0f64.powf(dir);
            if !(1e-10..=1e6).contains(&eps) {
                break;
            }
            next = leapfrog(self.target, &probe, eps, &self.inv_mass);
        }
        eps
    }
}

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    step: usize,
    gamma: f64,
    t0: f64,
    kappa: f64,
}

impl DualAveraging {
    fn new(eps0: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            step: 0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    fn update(&mut self, accept: f64, target: f64) -> f64 {
        self.step += 1;
        let m = self.step as f64;
        let eta = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept);
        let log_eps = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let w = m.powf(-self.kappa);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps.exp()
    }

    fn adapted(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

// Running mean/variance for mass-matrix estimation.
struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Self { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn update(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for i in 0..x.len() {
            let delta = x[i] - self.mean[i];
            self.mean[i] += delta / n;
            self.m2[i] += delta * (x[i] - self.mean[i]);
        }
    }

    fn regularized_variance(&self) -> Option<Vec<f64>> {
        if self.n < 10 {
            return None;
        }
        let n = self.n as f64;
        Some(
            self.m2
                .iter()
                .map(|m2| {
                    let v = m2 / (n - 1.0);
                    ((n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))).max(1e-10)
                })
                .collect(),
        )
    }
}

/// Run one NUTS chain from `init`. Deterministic in `(config, seed, init)`.
pub fn nuts_sample(
    target: &dyn LogpTarget,
    config: &HmcConfig,
    init: &[f64],
    seed: u64,
) -> Result<PosteriorChain> {
    config.validate()?;
    let dim = target.dim();
    if init.len() != dim {
        return Err(Error::LengthMismatch { expected: dim, got: init.len() });
    }
    let (logp, grad) = target.logp_grad(init);
    if !logp.is_finite() {
        return Err(Error::SamplerAbort("initial state has non-finite log density".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut core = NutsCore {
        target,
        inv_mass: vec![1.0; dim],
        divergence_threshold: config.divergence_threshold,
    };
    let mut current = Phase { q: init.to_vec(), p: vec![0.0; dim], grad, logp };
    let mut eps = core.find_reasonable_epsilon(&mut rng, &current);
    let mut da = DualAveraging::new(eps);

    let warmup = config.warmup;
    // Mass-matrix window: estimate from the second half of warmup, switch
    // shortly before the end so dual averaging can re-settle the step size.
    let mass_window = if config.adapt_mass && warmup >= 40 {
        Some((warmup / 2, warmup * 3 / 4))
    } else {
        None
    };
    let mut welford = Welford::new(dim);

    let mut warmup_divergences = 0usize;
    let mut kept_divergences = 0usize;
    let mut accept_sum = 0.0;
    let mut consecutive_stuck = 0usize;
    let mut draws = Vec::with_capacity(config.draws);
    let mut logps = Vec::with_capacity(config.draws);

    let total = warmup + config.draws;
    for m in 0..total {
        let before = current.q.clone();
        let (next, accept, divergent) = core.transition(&mut rng, current, eps, config.max_depth);
        current = next;

        let moved = current.q != before;
        if divergent && !moved {
            consecutive_stuck += 1;
            if consecutive_stuck >= 50 {
                return Err(Error::SamplerAbort(format!(
                    "all proposals divergent for {consecutive_stuck} consecutive iterations \
                     (step size {eps:.3e}); the target may be improper or the floor region \
                     too close to the initial state"
                )));
            }
        } else {
            consecutive_stuck = 0;
        }

        if m < warmup {
            if divergent {
                warmup_divergences += 1;
            }
            eps = da.update(accept, config.target_accept);
            if let Some((start, end)) = mass_window {
                if m >= start && m < end {
                    welford.update(&current.q);
                }
                if m + 1 == end {
                    if let Some(var) = welford.regularized_variance() {
                        core.inv_mass = var;
                        eps = core.find_reasonable_epsilon(&mut rng, &current);
                        da = DualAveraging::new(eps);
                    }
                }
            }
            if m + 1 == warmup {
                eps = da.adapted().clamp(1e-10, 1e6);
            }
        } else {
            if divergent {
                kept_divergences += 1;
            }
            accept_sum += accept;
            draws.push(current.q.clone());
            logps.push(current.logp);
        }
    }

    Ok(PosteriorChain {
        draws,
        logp: logps,
        divergences: kept_divergences,
        warmup_divergences,
        mean_accept: accept_sum / config.draws as f64,
        step_size: eps,
    })
}

/// Run `config.chains` chains in parallel; chain `i` uses seed
/// `config.seed + i` and `inits[i]`.
pub fn sample_chains(
    target: &dyn LogpTarget,
    config: &HmcConfig,
    inits: &[Vec<f64>],
) -> Result<Vec<PosteriorChain>> {
    config.validate()?;
    if inits.len() != config.chains {
        return Err(Error::LengthMismatch { expected: config.chains, got: inits.len() });
    }
    (0..config.chains)
        .into_par_iter()
        .map(|i| nuts_sample(target, config, &inits[i], config.seed + i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct StdNormal {
        dim: usize,
    }

    impl LogpTarget for StdNormal {
        fn dim(&self) -> usize {
            self.dim
        }

        fn logp_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
            let logp = -0.5 * q.iter().map(|x| x * x).sum::<f64>();
            (logp, q.iter().map(|x| -x).collect())
        }
    }

    struct CorrelatedNormal {
        rho: f64,
    }

    impl LogpTarget for CorrelatedNormal {
        fn dim(&self) -> usize {
            2
        }

        fn logp_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
            let det = 1.0 - self.rho * self.rho;
            let (x, y) = (q[0], q[1]);
            let logp = -0.5 * (x * x - 2.0 * self.rho * x * y + y * y) / det;
            let gx = -(x - self.rho * y) / det;
            let gy = -(y - self.rho * x) / det;
            (logp, vec![gx, gy])
        }
    }

    struct Flat {
        dim: usize,
    }

    impl LogpTarget for Flat {
        fn dim(&self) -> usize {
            self.dim
        }

        fn logp_grad(&self, _q: &[f64]) -> (f64, Vec<f64>) {
            (0.0, vec![0.0; self.dim])
        }
    }

    #[test]
    fn leapfrog_is_reversible() {
        let target = StdNormal { dim: 3 };
        let q0 = vec![0.3, -1.0, 2.0];
        let p0 = vec![1.0, 0.4, -0.6];
        let (q1, p1, _) = leapfrog_step(&target, &q0, &p0, 0.25);
        let neg_p1: Vec<f64> = p1.iter().map(|p| -p).collect();
        let (q2, p2, _) = leapfrog_step(&target, &q1, &neg_p1, 0.25);
        for i in 0..3 {
            assert!((q2[i] - q0[i]).abs() < 1e-12);
            assert!((-p2[i] - p0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn leapfrog_energy_error_shrinks_at_second_order() {
        let target = StdNormal { dim: 1 };
        let h = |q: f64, p: f64| 0.5 * (q * q + p * p);
        let energy_err = |eps: f64| {
            let (q1, p1, _) = leapfrog_step(&target, &[0.7], &[0.4], eps);
            (h(q1[0], p1[0]) - h(0.7, 0.4)).abs()
        };
        let e1 = energy_err(0.2);
        let e2 = energy_err(0.1);
        // Halving the step should cut |dH| by at least the quadratic factor
        // of four, within 10%.
        assert!(e1 / e2 >= 4.0 * 0.9, "ratio {}", e1 / e2);
    }

    #[test]
    fn leapfrog_on_flat_target_moves_in_straight_line() {
        let target = Flat { dim: 2 };
        let (q1, p1, _) = leapfrog_step(&target, &[1.0, -2.0], &[0.5, 0.25], 0.3);
        assert_eq!(q1, vec![1.0 + 0.3 * 0.5, -2.0 + 0.3 * 0.25]);
        assert_eq!(p1, vec![0.5, 0.25]);
        let dh = 0.5 * (p1[0] * p1[0] + p1[1] * p1[1]) - 0.5 * (0.5f64 * 0.5 + 0.25 * 0.25);
        assert_eq!(dh, 0.0);
    }

    #[test]
    fn nuts_recovers_standard_normal_moments() {
        let target = StdNormal { dim: 5 };
        let config =
            HmcConfig { warmup: 500, draws: 2000, chains: 1, seed: 42, ..Default::default() };
        let chain = nuts_sample(&target, &config, &[0.1; 5], 42).unwrap();
        assert_eq!(chain.draws.len(), 2000);
        for c in 0..5 {
            let mean: f64 = chain.draws.iter().map(|d| d[c]).sum::<f64>() / 2000.0;
            let var: f64 =
                chain.draws.iter().map(|d| (d[c] - mean) * (d[c] - mean)).sum::<f64>() / 1999.0;
            assert!(mean.abs() < 0.1, "mean {mean}");
            assert!((0.8..=1.2).contains(&var), "var {var}");
        }
        assert!(chain.logp.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn nuts_recovers_correlation() {
        let target = CorrelatedNormal { rho: 0.9 };
        let config =
            HmcConfig { warmup: 600, draws: 4000, chains: 1, seed: 7, ..Default::default() };
        let chain = nuts_sample(&target, &config, &[0.0, 0.0], 7).unwrap();
        let n = chain.draws.len() as f64;
        let mx: f64 = chain.draws.iter().map(|d| d[0]).sum::<f64>() / n;
        let my: f64 = chain.draws.iter().map(|d| d[1]).sum::<f64>() / n;
        let mut sxx = 0.0;
        let mut syy = 0.0;
        let mut sxy = 0.0;
        for d in &chain.draws {
            sxx += (d[0] - mx) * (d[0] - mx);
            syy += (d[1] - my) * (d[1] - my);
            sxy += (d[0] - mx) * (d[1] - my);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!((corr - 0.9).abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn identical_seeds_give_bit_identical_chains() {
        let target = StdNormal { dim: 3 };
        let config = HmcConfig { warmup: 100, draws: 200, seed: 5, ..Default::default() };
        let a = nuts_sample(&target, &config, &[0.5, -0.5, 1.0], 5).unwrap();
        let b = nuts_sample(&target, &config, &[0.5, -0.5, 1.0], 5).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.logp, b.logp);
        assert_eq!(a.step_size, b.step_size);
    }

    #[test]
    fn acceptance_lands_near_target() {
        let target = StdNormal { dim: 4 };
        let config = HmcConfig {
            warmup: 800,
            draws: 1500,
            target_accept: 0.8,
            seed: 11,
            ..Default::default()
        };
        let chain = nuts_sample(&target, &config, &[0.0; 4], 11).unwrap();
        assert!((chain.mean_accept - 0.8).abs() <= 0.1, "mean accept {}", chain.mean_accept);
    }

    #[test]
    fn kolmogorov_smirnov_against_standard_normal() {
        // 1-d target, 10^4 kept draws; KS distance <= 0.03 in at least 19 of
        // 20 seeded runs.
        let target = StdNormal { dim: 1 };
        let mut pass = 0;
        for seed in 0..20u64 {
            let config = HmcConfig {
                warmup: 300,
                draws: 10_000,
                seed,
                adapt_mass: false,
                ..Default::default()
            };
            let chain = nuts_sample(&target, &config, &[0.2], seed).unwrap();
            let mut xs: Vec<f64> = chain.draws.iter().map(|d| d[0]).collect();
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = xs.len() as f64;
            let normal_cdf = |x: f64| 0.5 * (1.0 + erf_approx(x / 2.0f64.sqrt()));
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let c = normal_cdf(*x);
                    ((i + 1) as f64 / n - c).abs().max((c - i as f64 / n).abs())
                })
                .fold(0.0f64, f64::max);
            if ks <= 0.03 {
                pass += 1;
            }
        }
        assert!(pass >= 19, "only {pass}/20 seeds under the KS budget");
    }

    // Abramowitz-Stegun 7.1.26; absolute error < 1.5e-7, plenty under the
    // 0.03 KS budget.
    fn erf_approx(x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        let x = x.abs();
        let t = 1.0 / (1.0 + 0.3275911 * x);
        let y = 1.0
            - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
                + 0.254829592)
                * t
                * (-x * x).exp();
        sign * y
    }

    #[test]
    fn divergent_region_aborts_with_diagnostic() {
        // Finite at the init, -inf everywhere else: every trajectory
        // diverges immediately and the chain never moves.
        struct Spike;
        impl LogpTarget for Spike {
            fn dim(&self) -> usize {
                1
            }
            fn logp_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
                if q[0] == 0.0 {
                    (0.0, vec![0.0])
                } else {
                    (f64::NEG_INFINITY, vec![0.0])
                }
            }
        }
        let config = HmcConfig { warmup: 200, draws: 100, seed: 3, ..Default::default() };
        match nuts_sample(&Spike, &config, &[0.0], 3) {
            Err(Error::SamplerAbort(msg)) => assert!(msg.contains("divergent"), "{msg}"),
            other => panic!("expected sampler abort, got {other:?}"),
        }
    }

    #[test]
    fn parallel_chains_match_sequential_runs() {
        let target = StdNormal { dim: 2 };
        let config =
            HmcConfig { warmup: 100, draws: 150, chains: 3, seed: 9, ..Default::default() };
        let inits = vec![vec![0.0, 0.0], vec![0.5, -0.5], vec![-1.0, 1.0]];
        let chains = sample_chains(&target, &config, &inits).unwrap();
        for (i, chain) in chains.iter().enumerate() {
            let solo = nuts_sample(&target, &config, &inits[i], 9 + i as u64).unwrap();
            assert_eq!(chain.draws, solo.draws);
        }
    }
}

