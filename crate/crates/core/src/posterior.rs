//! Posterior summaries: mean densities over an evaluation grid, demeaned
//! draws, pointwise credible bands and error metrics against a known truth.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mixture::MixtureParams;

/// A rectangular evaluation grid (d = 1 or a tensor product in d = 2) with
/// the posterior-mean density and optional pointwise bands.
#[derive(Debug, Clone)]
pub struct DensityGrid {
    pub points: Vec<Vec<f64>>,
    pub mean_density: Vec<f64>,
    /// `(level, lower, upper)` per requested band.
    pub bands: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

/// Uniform d = 1 grid over `[lo, hi]`.
pub fn grid_1d(lo: f64, hi: f64, points: usize) -> Vec<Vec<f64>> {
    assert!(points >= 2 && hi > lo);
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|i| vec![lo + i as f64 * step]).collect()
}

/// Default evaluation grid: data range widened by three sample standard
/// deviations on each side.
pub fn default_grid_for(samples: &[f64], points: usize) -> Vec<Vec<f64>> {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n.max(2.0);
    let sd = var.sqrt().max(1e-6);
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * sd;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * sd;
    grid_1d(lo, hi, points)
}

/// Pointwise average of the drawn mixture densities.
pub fn posterior_mean_density(draws: &[MixtureParams], points: &[Vec<f64>]) -> Result<DensityGrid> {
    if draws.is_empty() {
        return Err(Error::InvalidParameter("posterior mean needs at least one draw".into()));
    }
    let inv = 1.0 / draws.len() as f64;
    let mean_density: Vec<f64> = points
        .par_iter()
        .map(|x| draws.iter().map(|p| p.density(x)).sum::<f64>() * inv)
        .collect();
    Ok(DensityGrid { points: points.to_vec(), mean_density, bands: Vec::new() })
}

/// Demean every draw: each output mixture has mean zero.
pub fn demean_draws(draws: &[MixtureParams]) -> Vec<MixtureParams> {
    draws.iter().map(MixtureParams::demean).collect()
}

/// Pointwise empirical quantile band at `level` (order statistics, no
/// interpolation, so extreme levels saturate at the min/max envelope).
pub fn credible_band(
    draws: &[MixtureParams],
    points: &[Vec<f64>],
    level: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("band level {level} outside (0, 1)")));
    }
    if draws.len() < 2 {
        return Err(Error::InvalidParameter("credible bands need at least two draws".into()));
    }
    let lo_p = (1.0 - level) / 2.0;
    let hi_p = (1.0 + level) / 2.0;
    let n = draws.len();
    let pick = |sorted: &[f64], p: f64| -> f64 {
        let rank = (p * n as f64).ceil().max(1.0) as usize;
        sorted[rank.min(n) - 1]
    };
    let bands: Vec<(f64, f64)> = points
        .par_iter()
        .map(|x| {
            let mut vals: Vec<f64> = draws.iter().map(|p| p.density(x)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (pick(&vals, lo_p), pick(&vals, hi_p))
        })
        .collect();
    Ok(bands.into_iter().unzip())
}

/// Discretized error metrics against a known truth: `L^2` via trapezoid
/// quadrature of the squared difference over the grid, `L^inf` as the max
/// absolute difference.
pub fn density_error(
    grid: &DensityGrid,
    truth: impl Fn(&[f64]) -> f64,
) -> (f64, f64) {
    let diffs: Vec<f64> = grid
        .points
        .iter()
        .zip(&grid.mean_density)
        .map(|(x, est)| est - truth(x))
        .collect();
    let linf = diffs.iter().map(|d| d.abs()).fold(0.0f64, f64::max);
    let l2_sq = trapezoid_weights(&grid.points)
        .iter()
        .zip(&diffs)
        .map(|(w, d)| w * d * d)
        .sum::<f64>();
    (l2_sq.sqrt(), linf)
}

// Trapezoid weights for a sorted uniform 1-d grid or a rectangular 2-d
// product grid; falls back to unit weights for anything else.
fn trapezoid_weights(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    if n < 2 {
        return vec![1.0; n];
    }
    match points[0].len() {
        1 => {
            let h = points[1][0] - points[0][0];
            (0..n)
                .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                .collect()
        }
        2 => {
            // Tensor structure: second coordinate cycles fastest.
            let inner = points.iter().take_while(|p| p[0] == points[0][0]).count();
            if inner < 2 || n % inner != 0 {
                return vec![1.0; n];
            }
            let outer = n / inner;
            if outer < 2 {
                return vec![1.0; n];
            }
            let hy = points[1][1] - points[0][1];
            let hx = points[inner][0] - points[0][0];
            let w1 = |i: usize, len: usize, h: f64| {
                if i == 0 || i == len - 1 {
                    0.5 * h
                } else {
                    h
                }
            };
            (0..n)
                .map(|idx| w1(idx / inner, outer, hx) * w1(idx % inner, inner, hy))
                .collect()
        }
        _ => vec![1.0; n],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn mix(weights: Vec<f64>, atoms: Vec<f64>, sigma2: f64) -> MixtureParams {
        MixtureParams::new(
            weights,
            atoms.into_iter().map(|a| vec![a]).collect(),
            DMatrix::from_element(1, 1, sigma2),
        )
        .unwrap()
    }

    #[test]
    fn single_draw_mean_is_that_density() {
        let p = mix(vec![0.5, 0.5], vec![-1.0, 1.0], 0.7);
        let grid = grid_1d(-4.0, 4.0, 33);
        let out = posterior_mean_density(std::slice::from_ref(&p), &grid).unwrap();
        for (x, v) in grid.iter().zip(&out.mean_density) {
            assert_eq!(*v, p.density(x));
        }
    }

    #[test]
    fn two_draw_mean_is_pointwise_average() {
        let a = mix(vec![1.0], vec![0.0], 1.0);
        let b = mix(vec![1.0], vec![2.0], 0.5);
        let grid = grid_1d(-3.0, 5.0, 17);
        let out = posterior_mean_density(&[a.clone(), b.clone()], &grid).unwrap();
        for (x, v) in grid.iter().zip(&out.mean_density) {
            assert!((v - 0.5 * (a.density(x) + b.density(x))).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_density_integrates_to_one() {
        let draws = vec![
            mix(vec![0.3, 0.7], vec![-2.0, 1.0], 1.0),
            mix(vec![0.6, 0.4], vec![0.0, 2.0], 0.5),
            mix(vec![1.0], vec![0.5], 2.0),
        ];
        let grid = grid_1d(-15.0, 15.0, 2001);
        let out = posterior_mean_density(&draws, &grid).unwrap();
        let h = 30.0 / 2000.0;
        let total: f64 = out.mean_density.iter().sum::<f64>() * h;
        assert!((total - 1.0).abs() < 1e-3, "integral {total}");
    }

    #[test]
    fn mean_density_is_linear_in_draws() {
        let draws = vec![
            mix(vec![1.0], vec![-1.0], 1.0),
            mix(vec![1.0], vec![0.0], 1.0),
            mix(vec![1.0], vec![1.5], 0.7),
        ];
        let grid = grid_1d(-4.0, 4.0, 21);
        let full = posterior_mean_density(&draws, &grid).unwrap();
        let head = posterior_mean_density(&draws[..1], &grid).unwrap();
        let tail = posterior_mean_density(&draws[1..], &grid).unwrap();
        for i in 0..grid.len() {
            let stitched = (head.mean_density[i] + 2.0 * tail.mean_density[i]) / 3.0;
            assert!((full.mean_density[i] - stitched).abs() < 1e-14);
        }
    }

    #[test]
    fn demeaned_draws_are_centered() {
        let draws = vec![
            mix(vec![0.75, 0.25], vec![0.0, 4.0], 1.0),
            mix(vec![0.5, 0.5], vec![1.0, 5.0], 0.5),
        ];
        let centered = demean_draws(&draws);
        for c in &centered {
            assert!(c.mixture_mean()[0].abs() < 1e-12);
        }
        // Idempotent and a fixed point on centered input.
        let again = demean_draws(&centered);
        for (a, b) in centered.iter().zip(&again) {
            assert_eq!(a.atoms(), b.atoms());
        }
        // Mean of demeaned draws' means is exactly zero.
        let total: f64 = centered.iter().map(|c| c.mixture_mean()[0]).sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn band_trivia() {
        let p = mix(vec![1.0], vec![0.0], 1.0);
        let grid = grid_1d(-2.0, 2.0, 9);
        // Identical draws: zero width.
        let (lo, hi) = credible_band(&[p.clone(), p.clone(), p.clone()], &grid, 0.9).unwrap();
        for (l, h) in lo.iter().zip(&hi) {
            assert_eq!(l, h);
        }
        // Extreme level with three draws: min/max envelope.
        let draws = vec![
            mix(vec![1.0], vec![0.0], 1.0),
            mix(vec![1.0], vec![0.5], 1.0),
            mix(vec![1.0], vec![-0.5], 1.0),
        ];
        let (lo, hi) = credible_band(&draws, &grid, 0.999).unwrap();
        for (i, x) in grid.iter().enumerate() {
            let mut vals: Vec<f64> = draws.iter().map(|p| p.density(x)).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(lo[i], vals[0]);
            assert_eq!(hi[i], vals[2]);
        }
        // Width weakly increasing in level.
        let (lo50, hi50) = credible_band(&draws, &grid, 0.5).unwrap();
        for i in 0..grid.len() {
            assert!(hi[i] - lo[i] >= hi50[i] - lo50[i] - 1e-15);
        }
        assert!(credible_band(&draws, &grid, 1.5).is_err());
        assert!(credible_band(&draws[..1], &grid, 0.5).is_err());
    }

    #[test]
    fn density_error_examples() {
        let p = mix(vec![1.0], vec![0.0], 1.0);
        let grid_points = grid_1d(-3.0, 3.0, 101);
        let est = posterior_mean_density(std::slice::from_ref(&p), &grid_points).unwrap();
        let (l2, linf) = density_error(&est, |x| p.density(x));
        assert_eq!((l2, linf), (0.0, 0.0));

        // Constant offset on a two-point grid spanning [0, 2]:
        // trapezoid weights are (1, 1), so l2 = |c| sqrt(2), linf = |c|.
        let two = vec![vec![0.0], vec![2.0]];
        let est = DensityGrid {
            points: two.clone(),
            mean_density: vec![0.3, 0.3],
            bands: Vec::new(),
        };
        let (l2, linf) = density_error(&est, |_| 0.0);
        assert!((linf - 0.3).abs() < 1e-15);
        assert!((l2 - 0.3 * 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn density_error_matches_dense_reference() {
        // Unit Gaussians one apart: errors against a much denser grid agree
        // within a percent.
        let est_mix = mix(vec![1.0], vec![0.0], 1.0);
        let truth = mix(vec![1.0], vec![1.0], 1.0);
        let coarse = grid_1d(-6.0, 7.0, 512);
        let dense = grid_1d(-6.0, 7.0, 8192);
        let est_c = posterior_mean_density(std::slice::from_ref(&est_mix), &coarse).unwrap();
        let est_d = posterior_mean_density(std::slice::from_ref(&est_mix), &dense).unwrap();
        let (l2_c, linf_c) = density_error(&est_c, |x| truth.density(x));
        let (l2_d, linf_d) = density_error(&est_d, |x| truth.density(x));
        assert!((l2_c - l2_d).abs() / l2_d < 0.01);
        assert!((linf_c - linf_d).abs() / linf_d < 0.01);
    }
}
