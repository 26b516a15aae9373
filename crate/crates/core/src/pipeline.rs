//! End-to-end fitting: build a quasi-likelihood from data, sample its
//! posterior with NUTS, and summarize the draws. The CLI and the sweep
//! harness both drive fits through this module so a sweep cell and a direct
//! fit produce identical results for identical inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{diagnostics, Diagnostics};
use crate::ecf::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{
    DeconvModel, FactorModel, FactorTarget, ModelPrior, QuasiModel, QuasiPosterior, RepMeasModel,
};
use crate::mixture::MixtureParams;
use crate::posterior::{
    credible_band, default_grid_for, posterior_mean_density, DensityGrid,
};
use crate::prior::{PriorSpec, UnconstrainedState};
use crate::quadrature::{BoxQuadrature, SphereLineQuadrature};
use crate::sampler::{sample_chains, HmcConfig, LogpTarget, PosteriorChain};
use crate::simulate::{gen_deconv, gen_factor, gen_repmeas, ScenarioKind, ScenarioSpec, Truth};

/// Everything a fit needs besides the data: prior, likelihood settings,
/// sampler settings and output resolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitPlan {
    pub prior: PriorSpec,
    pub t_radius: f64,
    pub box_nodes: usize,
    pub sphere_nodes: usize,
    pub line_nodes: usize,
    /// Boundary-corrected metric for repeated measurements; `None` picks the
    /// default (on for d > 1, off for d = 1).
    pub boundary: Option<bool>,
    pub symmetrized: bool,
    /// `None` means factor index 0; `Some(usize::MAX)` is never used, the
    /// joint posterior is requested through [`FitPlan::joint`].
    pub factor_target: Option<usize>,
    pub joint: bool,
    pub hmc: HmcConfig,
    pub grid_points: usize,
    pub band_level: f64,
    /// Demean posterior draws; `None` picks the default (on for factor
    /// models, off otherwise).
    pub demean: Option<bool>,
    pub empirical_bayes: bool,
}

impl FitPlan {
    /// Defaults for a given latent dimension: `T = 2`, the documented node
    /// counts per dimension, 512 grid points, 90% bands.
    pub fn default_for_dim(d: usize, k: usize) -> Self {
        let box_nodes = match d {
            1 => 128,
            2 => 48,
            _ => 24,
        };
        Self {
            prior: PriorSpec::default_for_dim(d, k),
            t_radius: 2.0,
            box_nodes,
            sphere_nodes: if d == 3 { 256 } else { 64 },
            line_nodes: 16,
            boundary: None,
            symmetrized: false,
            factor_target: None,
            joint: false,
            hmc: HmcConfig::default(),
            grid_points: 512,
            band_level: 0.9,
            demean: None,
            empirical_bayes: false,
        }
    }
}

/// Input data for the three observation models.
pub enum ModelData {
    Deconv { y: Dataset, aux_errors: Dataset },
    RepMeas { y1: Dataset, y2: Dataset },
    Factor { y: Dataset, loadings: nalgebra::DMatrix<f64> },
}

impl ModelData {
    /// Dimension of the latent distribution a fit will estimate.
    pub fn latent_dim(&self) -> usize {
        match self {
            ModelData::Deconv { y, .. } => y.dim(),
            ModelData::RepMeas { y1, .. } => y1.dim(),
            ModelData::Factor { .. } => 1,
        }
    }

    fn proxy_samples(&self) -> Vec<f64> {
        match self {
            ModelData::Deconv { y, .. } => y.rows().iter().flatten().copied().collect(),
            ModelData::RepMeas { y1, y2 } => y1
                .rows()
                .iter()
                .zip(y2.rows())
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)))
                .collect(),
            ModelData::Factor { y, .. } => y.rows().iter().flatten().copied().collect(),
        }
    }
}

/// Build the quasi-likelihood and matching prior layout for a dataset.
pub fn build_model(data: &ModelData, plan: &FitPlan) -> Result<(QuasiModel, ModelPrior)> {
    let latent_dim = data.latent_dim();
    let mut prior = plan.prior.clone();
    if prior.dim() != latent_dim {
        return Err(Error::InvalidParameter(format!(
            "prior dimension {} does not match the latent dimension {latent_dim}",
            prior.dim()
        )));
    }
    match data {
        ModelData::Deconv { y, aux_errors } => {
            if plan.empirical_bayes {
                prior = prior.with_empirical_base(y)?;
            }
            let quad = BoxQuadrature::build(plan.t_radius, plan.box_nodes, y.dim())?;
            let model = DeconvModel::from_data(y, aux_errors, &quad)?;
            Ok((QuasiModel::Deconv(model), ModelPrior::Single(prior)))
        }
        ModelData::RepMeas { y1, y2 } => {
            if plan.empirical_bayes {
                let proxy = Dataset::new(
                    y1.rows()
                        .iter()
                        .zip(y2.rows())
                        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect())
                        .collect(),
                )?;
                prior = prior.with_empirical_base(&proxy)?;
            }
            let d = y1.dim();
            let boundary = plan.boundary.unwrap_or(d > 1);
            let model = if boundary {
                let quad =
                    SphereLineQuadrature::build(plan.t_radius, plan.sphere_nodes, plan.line_nodes, d)?;
                RepMeasModel::from_data_boundary(y1, y2, &quad, plan.symmetrized)?
            } else {
                let quad = BoxQuadrature::build(plan.t_radius, plan.box_nodes, d)?;
                RepMeasModel::from_data(y1, y2, &quad, plan.symmetrized)?
            };
            Ok((QuasiModel::RepMeas(model), ModelPrior::Single(prior)))
        }
        ModelData::Factor { y, loadings } => {
            if prior.dim() != 1 {
                return Err(Error::InvalidParameter(
                    "factor candidates are univariate; use a d = 1 prior".into(),
                ));
            }
            let quad = BoxQuadrature::build(plan.t_radius, plan.box_nodes, y.dim())?;
            let target = if plan.joint {
                FactorTarget::Joint
            } else {
                FactorTarget::Single(plan.factor_target.unwrap_or(0))
            };
            let model = FactorModel::from_data(y, loadings.clone(), target, &quad)?;
            let factors = model.n_factors();
            let prior = if plan.joint {
                ModelPrior::Joint { per_factor: prior, factors }
            } else {
                ModelPrior::Single(prior)
            };
            Ok((QuasiModel::Factor(model), prior))
        }
    }
}

/// Posterior summary for one latent block.
#[derive(Debug, Clone)]
pub struct BlockPosterior {
    pub draws: Vec<MixtureParams>,
    pub density: DensityGrid,
    pub density_demeaned: Option<DensityGrid>,
}

/// A complete fit: chains, convergence diagnostics and per-block posterior
/// summaries.
pub struct FitOutput {
    pub chains: Vec<PosteriorChain>,
    pub diagnostics: Diagnostics,
    pub blocks: Vec<BlockPosterior>,
    pub floor_breaches: u64,
    pub n: f64,
    /// The mildly ill-posed theory schedule `sqrt(log n * log log n)`,
    /// reported as a suggestion alongside the configured radius.
    pub t_suggestion: f64,
    /// Errors of each block against a known truth, when one was supplied.
    pub errors: Vec<(f64, f64)>,
}

impl FitOutput {
    /// `(l2, linf)` of the first block against its truth, when available.
    pub fn primary_error(&self) -> Option<(f64, f64)> {
        self.errors.first().copied()
    }

    pub fn pooled_draw_count(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }
}

struct PosteriorTarget<'a> {
    posterior: &'a QuasiPosterior<'a>,
}

impl LogpTarget for PosteriorTarget<'_> {
    fn dim(&self) -> usize {
        self.posterior.dim()
    }

    fn logp_grad(&self, coords: &[f64]) -> (f64, Vec<f64>) {
        self.posterior.logp_grad(coords)
    }
}

/// Prior-draw initialization: redraw until the posterior is finite, at most
/// 100 tries per chain.
fn initial_states(
    posterior: &QuasiPosterior<'_>,
    prior: &ModelPrior,
    config: &HmcConfig,
    explicit: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    let mut inits = Vec::with_capacity(config.chains);
    for chain in 0..config.chains {
        if let Some(init) = explicit {
            if init.len() != prior.state_dim() {
                return Err(Error::LengthMismatch {
                    expected: prior.state_dim(),
                    got: init.len(),
                });
            }
            inits.push(init.to_vec());
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37).wrapping_add(chain as u64));
        let mut found = None;
        for _ in 0..100 {
            let state = prior.sample_state(&mut rng);
            let (logp, _) = posterior.logp_grad(state.coords());
            if logp.is_finite() {
                found = Some(state.0);
                break;
            }
        }
        inits.push(found.ok_or_else(|| {
            Error::SamplerAbort("no finite-density initial state found in 100 prior draws".into())
        })?);
    }
    Ok(inits)
}

/// Fit a built model: initialize, run the chains, pool draws and summarize.
/// `grid` overrides the evaluation grid; `truths` (one per block) turn on
/// error reporting.
pub fn run_fit(
    model: &QuasiModel,
    prior: &ModelPrior,
    plan: &FitPlan,
    grid_override: Option<Vec<Vec<f64>>>,
    proxy_for_grid: Option<Vec<f64>>,
    truths: Option<&[Truth]>,
    init_override: Option<&[f64]>,
) -> Result<FitOutput> {
    let posterior = QuasiPosterior::new(model, prior);
    let config = &plan.hmc;
    let inits = initial_states(&posterior, prior, config, init_override)?;
    let target = PosteriorTarget { posterior: &posterior };
    let chains = sample_chains(&target, config, &inits)?;
    let diag = diagnostics(&chains)?;

    let n_blocks = match prior {
        ModelPrior::Single(_) => 1,
        ModelPrior::Joint { factors, .. } => *factors,
    };
    let mut per_block: Vec<Vec<MixtureParams>> = vec![Vec::new(); n_blocks];
    for chain in &chains {
        for draw in &chain.draws {
            let params = prior.constrain_all(&UnconstrainedState(draw.clone()));
            for (b, p) in params.into_iter().enumerate() {
                per_block[b].push(p);
            }
        }
    }

    let latent_dim = prior.spec().dim();
    let demean = plan.demean.unwrap_or(matches!(model, QuasiModel::Factor(_)));
    let grid = match grid_override {
        Some(g) => g,
        None => {
            if latent_dim == 1 {
                let proxy = proxy_for_grid.unwrap_or_else(|| vec![-5.0, 5.0]);
                default_grid_for(&proxy, plan.grid_points)
            } else {
                // Rectangular product grid from the proxy's per-coordinate
                // spread.
                let proxy = proxy_for_grid.unwrap_or_else(|| vec![-5.0, 5.0]);
                let lo = proxy.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = proxy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let per_dim = (plan.grid_points as f64).powf(1.0 / latent_dim as f64) as usize;
                let per_dim = per_dim.clamp(16, 96);
                let axis: Vec<f64> = (0..per_dim)
                    .map(|i| lo + (hi - lo) * i as f64 / (per_dim - 1) as f64)
                    .collect();
                let mut pts = Vec::new();
                let mut idx = vec![0usize; latent_dim];
                loop {
                    pts.push(idx.iter().map(|&i| axis[i]).collect());
                    let mut k = latent_dim;
                    loop {
                        if k == 0 {
                            break;
                        }
                        k -= 1;
                        idx[k] += 1;
                        if idx[k] < per_dim {
                            break;
                        }
                        idx[k] = 0;
                    }
                    if idx.iter().all(|&i| i == 0) {
                        break;
                    }
                }
                pts
            }
        }
    };

    let mut blocks = Vec::with_capacity(n_blocks);
    let mut errors = Vec::new();
    for (b, draws) in per_block.iter().enumerate() {
        let mut density = posterior_mean_density(draws, &grid)?;
        if draws.len() >= 2 {
            let (lo, hi) = credible_band(draws, &grid, plan.band_level)?;
            density.bands.push((plan.band_level, lo, hi));
        }
        let density_demeaned = if demean {
            let centered = crate::posterior::demean_draws(draws);
            let mut dm = posterior_mean_density(&centered, &grid)?;
            if centered.len() >= 2 {
                let (lo, hi) = credible_band(&centered, &grid, plan.band_level)?;
                dm.bands.push((plan.band_level, lo, hi));
            }
            Some(dm)
        } else {
            None
        };
        if let Some(truths) = truths {
            if let Some(truth) = truths.get(b) {
                let target = density_demeaned.as_ref().unwrap_or(&density);
                errors.push(crate::posterior::density_error(target, |x| truth.density(x)));
            }
        }
        blocks.push(BlockPosterior { draws: draws.clone(), density, density_demeaned });
    }

    let n = match model {
        QuasiModel::Deconv(m) => m.n(),
        QuasiModel::RepMeas(m) => m.n(),
        QuasiModel::Factor(m) => m.n(),
    };
    let logn = n.max(3.0).ln();
    Ok(FitOutput {
        chains,
        diagnostics: diag,
        blocks,
        floor_breaches: posterior.floor_breaches(),
        n,
        t_suggestion: (logn * logn.ln().max(1e-3)).sqrt(),
        errors,
    })
}

/// Generate a scenario's data with `seed` and fit it; the driver behind both
/// the `sweep` cells and scenario-backed `fit` runs.
pub fn run_scenario_fit(spec: &ScenarioSpec, seed: u64, plan: &FitPlan) -> Result<FitOutput> {
    match spec.kind {
        ScenarioKind::Deconv => {
            let data = gen_deconv(spec, seed)?;
            let truth = Truth::Mixture(data.truth.clone());
            let model_data = ModelData::Deconv { y: data.y, aux_errors: data.aux_errors };
            let proxy = model_data.proxy_samples();
            let (model, prior) = build_model(&model_data, plan)?;
            run_fit(&model, &prior, plan, None, Some(proxy), Some(&[truth]), None)
        }
        ScenarioKind::RepMeas => {
            let data = gen_repmeas(spec, seed)?;
            let truth = Truth::Mixture(data.truth.clone());
            let model_data = ModelData::RepMeas { y1: data.y1, y2: data.y2 };
            let proxy = model_data.proxy_samples();
            let (model, prior) = build_model(&model_data, plan)?;
            run_fit(&model, &prior, plan, None, Some(proxy), Some(&[truth]), None)
        }
        ScenarioKind::Factor => {
            let data = gen_factor(spec, seed)?;
            let model_data = ModelData::Factor { y: data.y, loadings: data.loadings };
            let proxy = model_data.proxy_samples();
            let (model, prior) = build_model(&model_data, plan)?;
            let truths = if plan.joint {
                data.truths.clone()
            } else {
                let k = plan.factor_target.unwrap_or(0);
                vec![data.truths[k].clone()]
            };
            run_fit(&model, &prior, plan, None, Some(proxy), Some(&truths), None)
        }
    }
}
