//! Seeded synthetic-data generators for the three observation models with
//! known ground-truth latent densities, and an experiment runner that sweeps
//! sample sizes and reports error trends.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ecf::Dataset;
use crate::error::{Error, Result};
use crate::mixture::MixtureParams;

/// Latent distribution of interest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LatentSpec {
    Mixture { params: MixtureParams },
    /// `0.5 N(-2, 1) + 0.5 N(2, 1)`.
    Bimodal,
    StandardNormal,
}

impl LatentSpec {
    pub fn to_mixture(&self) -> MixtureParams {
        match self {
            LatentSpec::Mixture { params } => params.clone(),
            LatentSpec::Bimodal => MixtureParams::new(
                vec![0.5, 0.5],
                vec![vec![-2.0], vec![2.0]],
                DMatrix::from_element(1, 1, 1.0),
            )
            .expect("static parameters"),
            LatentSpec::StandardNormal => MixtureParams::single(vec![0.0], 1.0).unwrap(),
        }
    }
}

/// One error term. Laplace errors have a polynomially decaying CF
/// (`1/(1 + b^2 t^2)`, a mildly ill-posed model); Gaussian errors decay
/// exponentially (severely ill-posed). Both regimes carry decay order 2.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum ErrorSpec {
    Gaussian { sd: f64 },
    Laplace { scale: f64 },
}

/// Decay regime of the error CF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IllPosedness {
    Mild { zeta: f64 },
    Severe { zeta: f64 },
}

impl ErrorSpec {
    pub fn validate(&self) -> Result<()> {
        let s = match self {
            ErrorSpec::Gaussian { sd } => *sd,
            ErrorSpec::Laplace { scale } => *scale,
        };
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::InvalidParameter("error scales must be positive".into()));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorSpec::Gaussian { sd } => {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }
            ErrorSpec::Laplace { scale } => {
                // Inverse CDF.
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        match self {
            ErrorSpec::Gaussian { sd } => {
                (-(x / sd) * (x / sd) / 2.0).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            ErrorSpec::Laplace { scale } => (-x.abs() / scale).exp() / (2.0 * scale),
        }
    }

    pub fn cf(&self, t: f64) -> f64 {
        match self {
            ErrorSpec::Gaussian { sd } => (-0.5 * sd * sd * t * t).exp(),
            ErrorSpec::Laplace { scale } => 1.0 / (1.0 + scale * scale * t * t),
        }
    }

    pub fn regime(&self) -> IllPosedness {
        match self {
            ErrorSpec::Gaussian { .. } => IllPosedness::Severe { zeta: 2.0 },
            ErrorSpec::Laplace { .. } => IllPosedness::Mild { zeta: 2.0 },
        }
    }
}

/// Ground-truth density of one latent factor.
#[derive(Debug, Clone)]
pub enum Truth {
    Mixture(MixtureParams),
    Error(ErrorSpec),
}

impl Truth {
    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            Truth::Mixture(p) => p.density(x),
            Truth::Error(e) => e.density(x[0]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Deconv,
    RepMeas,
    Factor,
}

/// A synthetic scenario: the latent law, one spec per error term, the sample
/// size, and (for factor models) the loading matrix whose first column
/// carries the latent factor of interest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub latent: LatentSpec,
    pub errors: Vec<ErrorSpec>,
    #[serde(default)]
    pub loadings: Option<Vec<Vec<f64>>>,
    pub n: usize,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::InvalidParameter("scenario needs n >= 10".into()));
        }
        for e in &self.errors {
            e.validate()?;
        }
        match self.kind {
            ScenarioKind::Deconv => {
                if self.errors.len() != 1 {
                    return Err(Error::InvalidParameter(
                        "deconvolution scenarios take exactly one error term".into(),
                    ));
                }
            }
            ScenarioKind::RepMeas => {
                if self.errors.len() != 2 {
                    return Err(Error::InvalidParameter(
                        "repeated-measurement scenarios take exactly two error terms".into(),
                    ));
                }
            }
            ScenarioKind::Factor => {
                let a = self.loadings_matrix()?;
                if a.ncols() != 1 + self.errors.len() {
                    return Err(Error::InvalidParameter(format!(
                        "loadings have {} columns but the scenario defines {} factors",
                        a.ncols(),
                        1 + self.errors.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The loading matrix; factor scenarios default to the two-measurement
    /// embedding `[[1, 1, 0], [1, 0, 1]]` when exactly two error terms are
    /// given.
    pub fn loadings_matrix(&self) -> Result<DMatrix<f64>> {
        if let Some(rows) = &self.loadings {
            let l = rows.len();
            let k = rows.first().map_or(0, Vec::len);
            if l == 0 || k == 0 || rows.iter().any(|r| r.len() != k) {
                return Err(Error::InvalidParameter("loadings must be rectangular".into()));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            return Ok(DMatrix::from_row_slice(l, k, &flat));
        }
        if self.kind == ScenarioKind::Factor && self.errors.len() == 2 {
            return Ok(DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]));
        }
        Err(Error::InvalidParameter("factor scenarios need a loadings matrix".into()))
    }
}

fn sample_mixture<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut comp = params.n_components() - 1;
    for (j, w) in params.weights().iter().enumerate() {
        acc += w;
        if u < acc {
            comp = j;
            break;
        }
    }
    let d = params.dim();
    let chol = params
        .covariance()
        .clone()
        .cholesky()
        .expect("mixture covariance is PD")
        .l();
    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    (0..d)
        .map(|a| {
            params.atoms()[comp][a] + (0..=a).map(|b| chol[(a, b)] * z[b]).sum::<f64>()
        })
        .collect()
}

/// Deconvolution data: contaminated proxies plus an independent auxiliary
/// error sample of the same size.
pub struct DeconvData {
    pub y: Dataset,
    pub aux_errors: Dataset,
    pub truth: MixtureParams,
    pub regime: IllPosedness,
}

pub fn gen_deconv(spec: &ScenarioSpec, seed: u64) -> Result<DeconvData> {
    spec.validate()?;
    if spec.kind != ScenarioKind::Deconv {
        return Err(Error::InvalidParameter("scenario kind is not deconvolution".into()));
    }
    let truth = spec.latent.to_mixture();
    if truth.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            d: truth.dim(),
            msg: "scenario generators are univariate".into(),
        });
    }
    let err = spec.errors[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f64> = (0..spec.n)
        .map(|_| sample_mixture(&truth, &mut rng)[0] + err.sample(&mut rng))
        .collect();
    let aux: Vec<f64> = (0..spec.n).map(|_| err.sample(&mut rng)).collect();
    Ok(DeconvData {
        y: Dataset::from_column(y)?,
        aux_errors: Dataset::from_column(aux)?,
        truth,
        regime: err.regime(),
    })
}

/// Repeated measurements: two noisy views of a shared latent draw per row.
pub struct RepMeasData {
    pub y1: Dataset,
    pub y2: Dataset,
    pub truth: MixtureParams,
}

pub fn gen_repmeas(spec: &ScenarioSpec, seed: u64) -> Result<RepMeasData> {
    spec.validate()?;
    if spec.kind != ScenarioKind::RepMeas {
        return Err(Error::InvalidParameter("scenario kind is not repeated measurements".into()));
    }
    let truth = spec.latent.to_mixture();
    if truth.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            d: truth.dim(),
            msg: "scenario generators are univariate".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y1 = Vec::with_capacity(spec.n);
    let mut y2 = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x = sample_mixture(&truth, &mut rng)[0];
        y1.push(x + spec.errors[0].sample(&mut rng));
        y2.push(x + spec.errors[1].sample(&mut rng));
    }
    Ok(RepMeasData {
        y1: Dataset::from_column(y1)?,
        y2: Dataset::from_column(y2)?,
        truth,
    })
}

/// Factor data: `Y = A X` with mutually independent factor columns, all
/// demeaned in-sample so the empirical factor means are exactly zero.
pub struct FactorData {
    pub y: Dataset,
    pub loadings: DMatrix<f64>,
    pub truths: Vec<Truth>,
    pub warnings: Vec<String>,
}

pub fn gen_factor(spec: &ScenarioSpec, seed: u64) -> Result<FactorData> {
    spec.validate()?;
    if spec.kind != ScenarioKind::Factor {
        return Err(Error::InvalidParameter("scenario kind is not a factor model".into()));
    }
    let loadings = spec.loadings_matrix()?;
    let mut latent = spec.latent.to_mixture();
    if latent.dim() != 1 {
        return Err(Error::UnsupportedDimension {
            d: latent.dim(),
            msg: "factor scenarios use univariate factors".into(),
        });
    }
    let mut warnings = Vec::new();
    let latent_mean = latent.mixture_mean()[0];
    if latent_mean.abs() > 1e-9 {
        warnings.push(format!(
            "latent spec has mean {latent_mean:.6}; factors must be demeaned, shifting atoms"
        ));
        latent = latent.demean();
    }

    let k = loadings.ncols();
    let l = loadings.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Factor columns: latent first, then one per error spec.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    cols.push((0..spec.n).map(|_| sample_mixture(&latent, &mut rng)[0]).collect());
    for e in &spec.errors {
        cols.push((0..spec.n).map(|_| e.sample(&mut rng)).collect());
    }
    // In-sample demeaning: empirical factor means are exactly zero, matching
    // the boundary condition the demeaned posterior targets.
    for col in cols.iter_mut() {
        let mean = col.iter().sum::<f64>() / spec.n as f64;
        col.iter_mut().for_each(|x| *x -= mean);
    }
    let rows: Vec<Vec<f64>> = (0..spec.n)
        .map(|i| {
            (0..l)
                .map(|a| (0..k).map(|b| loadings[(a, b)] * cols[b][i]).sum())
                .collect()
        })
        .collect();
    let mut truths = vec![Truth::Mixture(latent)];
    truths.extend(spec.errors.iter().map(|e| Truth::Error(*e)));
    Ok(FactorData { y: Dataset::new(rows)?, loadings, truths, warnings })
}

/// One sweep cell result row.
#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub n: usize,
    pub seed: u64,
    pub l2: Option<f64>,
    pub linf: Option<f64>,
    pub rhat_max: Option<f64>,
    pub divergences: Option<usize>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

/// Sweep report: per-cell rows plus median L2 per sample size.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub median_l2_by_n: Vec<(usize, f64)>,
}

impl SweepReport {
    /// True when the median error is strictly decreasing across the n grid.
    pub fn monotone_improving(&self) -> bool {
        self.median_l2_by_n.windows(2).all(|w| w[1].1 < w[0].1)
    }
}

/// Run one fit per `(n, seed)` cell, in parallel; per-cell failures are
/// recorded without stopping the sweep.
pub fn run_experiment(
    scenario: &ScenarioSpec,
    n_grid: &[usize],
    seeds: &[u64],
    plan: &crate::pipeline::FitPlan,
) -> Result<SweepReport> {
    scenario.validate()?;
    let mut jobs = Vec::new();
    for &n in n_grid {
        for &seed in seeds {
            jobs.push((n, seed));
        }
    }
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(n, seed)| {
            let started = std::time::Instant::now();
            let mut cell_spec = scenario.clone();
            cell_spec.n = n;
            let outcome = crate::pipeline::run_scenario_fit(&cell_spec, seed, plan);
            let wall = started.elapsed().as_secs_f64();
            match outcome {
                Ok(fit) => {
                    let (l2, linf) = fit.primary_error().unwrap_or((f64::NAN, f64::NAN));
                    SweepCell {
                        n,
                        seed,
                        l2: Some(l2),
                        linf: Some(linf),
                        rhat_max: fit.diagnostics.max_rhat(),
                        divergences: Some(fit.diagnostics.divergences),
                        wall_time_s: wall,
                        error: None,
                    }
                }
                Err(e) => SweepCell {
                    n,
                    seed,
                    l2: None,
                    linf: None,
                    rhat_max: None,
                    divergences: None,
                    wall_time_s: wall,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    let mut median_l2_by_n = Vec::new();
    for &n in n_grid {
        let mut vals: Vec<f64> = cells
            .iter()
            .filter(|c| c.n == n)
            .filter_map(|c| c.l2)
            .filter(|v| v.is_finite())
            .collect();
        if !vals.is_empty() {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            median_l2_by_n.push((n, vals[vals.len() / 2]));
        }
    }
    Ok(SweepReport { cells, median_l2_by_n })
}
