//! Convergence diagnostics: rank-normalized split R-hat and bulk effective
//! sample size, plus pooled divergence counts.
//!
//! Constant coordinates cannot support either statistic; they are reported as
//! an explicit undefined marker instead of NaN.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::sampler::PosteriorChain;

/// Per-coordinate diagnostic value: a number, or undefined for a constant
/// coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum DiagValue {
    Value(f64),
    Undefined(&'static str),
}

impl DiagValue {
    pub fn value(&self) -> Option<f64> {
        match self {
            DiagValue::Value(v) => Some(*v),
            DiagValue::Undefined(_) => None,
        }
    }
}

const UNDEFINED: DiagValue = DiagValue::Undefined("undefined");

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub rhat: Vec<DiagValue>,
    pub ess_bulk: Vec<DiagValue>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub n_chains: usize,
    pub n_draws: usize,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> Option<f64> {
        self.rhat
            .iter()
            .filter_map(DiagValue::value)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.ess_bulk
            .iter()
            .filter_map(DiagValue::value)
            .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.min(v))))
    }
}

/// Rank-normalized split R-hat and bulk ESS per coordinate, with divergence
/// totals pooled over chains. Needs at least one chain with four draws.
pub fn diagnostics(chains: &[PosteriorChain]) -> Result<Diagnostics> {
    if chains.is_empty() {
        return Err(Error::InvalidParameter("diagnostics need at least one chain".into()));
    }
    let min_len = chains.iter().map(|c| c.draws.len()).min().unwrap();
    if min_len < 4 {
        return Err(Error::InvalidParameter("diagnostics need at least four draws".into()));
    }
    let dim = chains[0].draws[0].len();
    if chains.iter().any(|c| c.draws[0].len() != dim) {
        return Err(Error::InvalidParameter("chains disagree on dimension".into()));
    }

    let mut rhat = Vec::with_capacity(dim);
    let mut ess = Vec::with_capacity(dim);
    for coord in 0..dim {
        let sequences = split_sequences(chains, coord, min_len);
        if is_constant(&sequences) {
            rhat.push(UNDEFINED);
            ess.push(UNDEFINED);
            continue;
        }
        let z = rank_normalize(&sequences);
        rhat.push(match potential_scale_reduction(&z) {
            Some(v) => DiagValue::Value(v),
            None => UNDEFINED,
        });
        ess.push(match bulk_ess(&z) {
            Some(v) => DiagValue::Value(v),
            None => UNDEFINED,
        });
    }

    Ok(Diagnostics {
        rhat,
        ess_bulk: ess,
        divergences: chains.iter().map(|c| c.divergences).sum(),
        warmup_divergences: chains.iter().map(|c| c.warmup_divergences).sum(),
        n_chains: chains.len(),
        n_draws: min_len,
    })
}

// Split each chain in half (dropping the middle draw when odd), trimmed to
// the shortest chain.
fn split_sequences(chains: &[PosteriorChain], coord: usize, min_len: usize) -> Vec<Vec<f64>> {
    let half = min_len / 2;
    let mut seqs = Vec::with_capacity(chains.len() * 2);
    for chain in chains {
        let xs: Vec<f64> = chain.draws[..min_len].iter().map(|d| d[coord]).collect();
        seqs.push(xs[..half].to_vec());
        seqs.push(xs[min_len - half..].to_vec());
    }
    seqs
}

fn is_constant(seqs: &[Vec<f64>]) -> bool {
    let first = seqs[0][0];
    seqs.iter().all(|s| s.iter().all(|x| *x == first))
}

// Average ranks across all sequences mapped through the normal quantile
// function with the (r - 3/8)/(N + 1/4) offset.
fn rank_normalize(seqs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = seqs.iter().map(Vec::len).sum();
    // (value, flat index) pairs; flat index walks sequences in order.
    let mut tagged: Vec<(f64, usize)> = Vec::with_capacity(total);
    for s in seqs {
        for x in s {
            tagged.push((*x, tagged.len()));
        }
    }
    tagged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Average ranks over ties.
    let mut ranks = vec![0.0; total];
    let mut pos = 0;
    while pos < total {
        let mut end = pos + 1;
        while end < total && tagged[end].0 == tagged[pos].0 {
            end += 1;
        }
        let avg = (pos + 1 + end) as f64 / 2.0; // mean of ranks pos+1..=end
        for item in &tagged[pos..end] {
            ranks[item.1] = avg;
        }
        pos = end;
    }

    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = Vec::with_capacity(seqs.len());
    let mut flat = 0;
    for s in seqs {
        let mut z = Vec::with_capacity(s.len());
        for _ in s {
            let p = (ranks[flat] - 0.375) / (total as f64 + 0.25);
            z.push(normal.inverse_cdf(p));
            flat += 1;
        }
        out.push(z);
    }
    out
}

// Classic split R-hat on the (already rank-normalized) sequences.
fn potential_scale_reduction(seqs: &[Vec<f64>]) -> Option<f64> {
    let m = seqs.len() as f64;
    let n = seqs[0].len() as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = if m > 1.0 {
        n * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let w = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    if w <= 0.0 {
        return if b > 0.0 { Some(f64::INFINITY) } else { None };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

// Bulk ESS via per-chain autocovariances and Geyer's initial monotone
// positive sequence.
fn bulk_ess(seqs: &[Vec<f64>]) -> Option<f64> {
    let m = seqs.len() as f64;
    let n = seqs[0].len();
    let nf = n as f64;
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / nf).collect();
    let vars: Vec<f64> = seqs
        .iter()
        .zip(&means)
        .map(|(s, mu)| s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (nf - 1.0))
        .collect();
    let w = vars.iter().sum::<f64>() / m;
    let grand = means.iter().sum::<f64>() / m;
    let b = if m > 1.0 {
        nf * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    if w <= 0.0 {
        return None;
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;

    // Biased (divisor n) autocovariance per chain at lag t.
    let acov = |s: &[f64], mu: f64, t: usize| -> f64 {
        (0..n - t).map(|i| (s[i] - mu) * (s[i + t] - mu)).sum::<f64>() / nf
    };

    let max_lag = n - 1;
    let mut rho_sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 1;
    while t + 1 <= max_lag {
        let mean_acov_t: f64 = seqs
            .iter()
            .zip(&means)
            .map(|(s, mu)| acov(s, *mu, t))
            .sum::<f64>()
            / m;
        let mean_acov_t1: f64 = seqs
            .iter()
            .zip(&means)
            .map(|(s, mu)| acov(s, *mu, t + 1))
            .sum::<f64>()
            / m;
        let rho_t = 1.0 - (w - mean_acov_t) / var_plus;
        let rho_t1 = 1.0 - (w - mean_acov_t1) / var_plus;
        let mut pair = rho_t + rho_t1;
        if pair < 0.0 {
            break;
        }
        // Initial monotone sequence: never let the pair sums increase.
        pair = pair.min(prev_pair);
        prev_pair = pair;
        rho_sum += pair;
        t += 2;
    }
    let tau = 1.0 + 2.0 * rho_sum;
    let total = m * nf;
    // Antithetic chains can push tau under 1; cap as in common practice.
    Some((total / tau).min(total * total.log10()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn chain_from(draws: Vec<Vec<f64>>) -> PosteriorChain {
        PosteriorChain {
            logp: vec![0.0; draws.len()],
            draws,
            divergences: 0,
            warmup_divergences: 0,
            mean_accept: 0.9,
            step_size: 0.1,
        }
    }

    #[test]
    fn iid_chains_have_rhat_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<PosteriorChain> = (0..4)
            .map(|_| {
                chain_from(
                    (0..1000)
                        .map(|_| vec![StandardNormal.sample(&mut rng)])
                        .collect(),
                )
            })
            .collect();
        let diag = diagnostics(&chains).unwrap();
        let r = diag.rhat[0].value().unwrap();
        assert!(r <= 1.01, "rhat {r}");
        let e = diag.ess_bulk[0].value().unwrap();
        assert!(e > 2000.0, "ess {e}");
    }

    #[test]
    fn separated_constant_chains_have_large_rhat() {
        let a = chain_from(vec![vec![0.0]; 100]);
        let b = chain_from(vec![vec![5.0]; 100]);
        let diag = diagnostics(&[a, b]).unwrap();
        match diag.rhat[0] {
            DiagValue::Value(v) => assert!(v > 2.0, "rhat {v}"),
            DiagValue::Undefined(_) => panic!("expected a large value, got undefined"),
        }
    }

    #[test]
    fn single_constant_chain_is_undefined() {
        let a = chain_from(vec![vec![1.5, 2.0]; 50]);
        let diag = diagnostics(&[a]).unwrap();
        assert_eq!(diag.rhat[0], UNDEFINED);
        assert_eq!(diag.ess_bulk[0], UNDEFINED);
        assert!(diag.max_rhat().is_none());
    }

    #[test]
    fn autocorrelated_chain_has_reduced_ess() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = 0.0;
        let draws: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = 0.95 * x + z * (1.0f64 - 0.95 * 0.95).sqrt();
                vec![x]
            })
            .collect();
        let diag = diagnostics(&[chain_from(draws)]).unwrap();
        let e = diag.ess_bulk[0].value().unwrap();
        // AR(1) with phi = 0.95 has tau ~ 39.
        assert!(e < 300.0, "ess {e}");
    }

    #[test]
    fn requires_enough_draws() {
        let a = chain_from(vec![vec![0.0]; 3]);
        assert!(diagnostics(&[a]).is_err());
        assert!(diagnostics(&[]).is_err());
    }
}
