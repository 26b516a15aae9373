//! Subcommand implementations. Exit-code taxonomy: 0 ok, 1 quality-gate
//! failure, 2 config error, 3 I/O error, 4 sampler abort.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use quasibayes::ecf::Dataset;
use quasibayes::error::Error as CoreError;
use quasibayes::likelihood::{ModelPrior, QuasiModel};
use quasibayes::pipeline::{build_model, run_fit, FitOutput, ModelData};
use quasibayes::prior::UnconstrainedState;
use quasibayes::quadrature::{BoxQuadrature, SphereLineQuadrature};
use quasibayes::sampler::PosteriorChain;
use quasibayes::simulate::{gen_deconv, gen_factor, gen_repmeas, Truth};

use crate::artifacts::{
    dataset_csv, diagnostics_json, write_fit_artifacts, write_json, write_text,
};
use crate::config::{
    EffectiveConfig, ModelKind, RhatGate, RunConfig, ScenarioConfig, TargetConfig,
};

/// A failure carrying its process exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    pub fn sampler(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }

    pub fn gate(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

fn map_core(err: CoreError) -> Failure {
    match err {
        CoreError::SamplerAbort(_) => Failure::sampler(err.to_string()),
        CoreError::Io(_) | CoreError::Csv(_) => Failure::io(err.to_string()),
        other => Failure::config(other.to_string()),
    }
}

/// Data, truths (when synthetic) and bookkeeping shared by fit-like
/// commands.
pub struct ResolvedInput {
    pub data: ModelData,
    pub truths: Option<Vec<Truth>>,
    pub proxy: Vec<f64>,
    pub aux_sample_size: Option<usize>,
    pub warnings: Vec<String>,
}

fn load_matrix_csv(path: &Path, header: bool) -> Result<nalgebra::DMatrix<f64>, Failure> {
    let data = Dataset::from_csv(path, header).map_err(|e| Failure::io(e.to_string()))?;
    let rows = data.rows();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(nalgebra::DMatrix::from_row_slice(data.n(), data.dim(), &flat))
}

pub fn resolve_input(config: &RunConfig, header: bool) -> Result<ResolvedInput, Failure> {
    if let Some(paths) = &config.model.data {
        let load = |p: &PathBuf| -> Result<Dataset, Failure> {
            Dataset::from_csv(p, header)
                .map_err(|e| Failure::io(format!("loading {}: {e}", p.display())))
        };
        let (data, aux_n) = match config.model.kind {
            ModelKind::Deconv => {
                let y = load(paths.y.as_ref().unwrap())?;
                let eps = load(paths.eps.as_ref().unwrap())?;
                let aux_n = eps.n();
                (ModelData::Deconv { y, aux_errors: eps }, Some(aux_n))
            }
            ModelKind::RepMeas => {
                let y1 = load(paths.y1.as_ref().unwrap())?;
                let y2 = load(paths.y2.as_ref().unwrap())?;
                (ModelData::RepMeas { y1, y2 }, None)
            }
            ModelKind::Factor => {
                let y = load(paths.y.as_ref().unwrap())?;
                let loadings = load_matrix_csv(paths.loadings.as_ref().unwrap(), header)?;
                (ModelData::Factor { y, loadings }, None)
            }
        };
        let proxy = proxy_of(&data);
        return Ok(ResolvedInput { data, truths: None, proxy, aux_sample_size: aux_n, warnings: Vec::new() });
    }

    let scenario = config.model.scenario.as_ref().expect("validated");
    resolve_scenario(scenario, &config.model.target)
}

fn resolve_scenario(
    scenario: &ScenarioConfig,
    target: &Option<TargetConfig>,
) -> Result<ResolvedInput, Failure> {
    match scenario.spec.kind {
        quasibayes::simulate::ScenarioKind::Deconv => {
            let gen = gen_deconv(&scenario.spec, scenario.seed).map_err(map_core)?;
            let aux_n = gen.aux_errors.n();
            let data = ModelData::Deconv { y: gen.y, aux_errors: gen.aux_errors };
            let proxy = proxy_of(&data);
            Ok(ResolvedInput {
                data,
                truths: Some(vec![Truth::Mixture(gen.truth)]),
                proxy,
                aux_sample_size: Some(aux_n),
                warnings: Vec::new(),
            })
        }
        quasibayes::simulate::ScenarioKind::RepMeas => {
            let gen = gen_repmeas(&scenario.spec, scenario.seed).map_err(map_core)?;
            let data = ModelData::RepMeas { y1: gen.y1, y2: gen.y2 };
            let proxy = proxy_of(&data);
            Ok(ResolvedInput {
                data,
                truths: Some(vec![Truth::Mixture(gen.truth)]),
                proxy,
                aux_sample_size: None,
                warnings: Vec::new(),
            })
        }
        quasibayes::simulate::ScenarioKind::Factor => {
            let gen = gen_factor(&scenario.spec, scenario.seed).map_err(map_core)?;
            let truths = match target {
                Some(TargetConfig::Name(_)) => gen.truths.clone(),
                Some(TargetConfig::Index(k)) => vec![gen
                    .truths
                    .get(*k)
                    .cloned()
                    .ok_or_else(|| Failure::config(format!("factor index {k} out of range")))?],
                None => vec![gen.truths[0].clone()],
            };
            let data = ModelData::Factor { y: gen.y, loadings: gen.loadings };
            let proxy = proxy_of(&data);
            Ok(ResolvedInput {
                data,
                truths: Some(truths),
                proxy,
                aux_sample_size: None,
                warnings: gen.warnings,
            })
        }
    }
}

fn proxy_of(data: &ModelData) -> Vec<f64> {
    match data {
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

fn quad_dim(data: &ModelData) -> usize {
    match data {
        ModelData::Deconv { y, .. } => y.dim(),
        ModelData::RepMeas { y1, .. } => y1.dim(),
        ModelData::Factor { y, .. } => y.dim(),
    }
}

struct PreparedFit {
    effective: EffectiveConfig,
    hash: String,
    model: QuasiModel,
    prior: ModelPrior,
    input: ResolvedInput,
}

fn prepare(config: &RunConfig, header: bool) -> Result<PreparedFit, Failure> {
    let input = resolve_input(config, header)?;
    let plan = config.fit_plan(quad_dim(&input.data)).map_err(Failure::config)?;
    let effective = EffectiveConfig::new(config, plan);
    let hash = effective.hash();
    let (model, prior) = build_model(&input.data, &effective.plan).map_err(map_core)?;
    Ok(PreparedFit { effective, hash, model, prior, input })
}

fn execute_fit(prepared: &PreparedFit, config: &RunConfig) -> Result<FitOutput, Failure> {
    run_fit(
        &prepared.model,
        &prepared.prior,
        &prepared.effective.plan,
        None,
        Some(prepared.input.proxy.clone()),
        prepared.input.truths.as_deref(),
        config.sampler.init.as_deref(),
    )
    .map_err(map_core)
}

fn apply_gate(config: &RunConfig, fit: &FitOutput) -> Result<(), Failure> {
    if let Some(max_rhat) = fit.diagnostics.max_rhat() {
        if max_rhat > config.output.rhat_threshold {
            let message = format!(
                "max split R-hat {max_rhat:.4} exceeds threshold {}",
                config.output.rhat_threshold
            );
            match config.output.rhat_gate {
                RhatGate::Fail => return Err(Failure::gate(message)),
                RhatGate::Warn => eprintln!("warning: {message}"),
            }
        }
    }
    Ok(())
}

pub fn fit(config: &RunConfig, header: bool) -> Result<(), Failure> {
    let prepared = prepare(config, header)?;
    for w in &prepared.input.warnings {
        eprintln!("warning: {w}");
    }
    let fit = execute_fit(&prepared, config)?;
    let artifacts = write_fit_artifacts(
        &config.output.dir,
        &prepared.hash,
        &prepared.effective,
        &fit,
        prepared.input.aux_sample_size,
    )
    .map_err(Failure::io)?;
    println!("fit {} complete: {}", prepared.hash, artifacts.summary.display());
    if let Some(max_rhat) = fit.diagnostics.max_rhat() {
        println!("max split R-hat {max_rhat:.4}, divergences {}", fit.diagnostics.divergences);
    }
    apply_gate(config, &fit)
}

pub fn simulate(config: &RunConfig, _header: bool) -> Result<(), Failure> {
    let scenario = config
        .model
        .scenario
        .as_ref()
        .ok_or_else(|| Failure::config("simulate requires a model.scenario block"))?;
    let input = resolve_scenario(scenario, &config.model.target)?;
    let plan = config.fit_plan(quad_dim(&input.data)).map_err(Failure::config)?;
    let effective = EffectiveConfig::new(config, plan);
    let hash = effective.hash();
    let dir = &config.output.dir;

    let mut files = Vec::new();
    match &input.data {
        ModelData::Deconv { y, aux_errors } => {
            let p = dir.join(format!("sim-{hash}.y.csv"));
            write_text(&p, &dataset_csv(y.rows())).map_err(Failure::io)?;
            files.push(p);
            let p = dir.join(format!("sim-{hash}.eps.csv"));
            write_text(&p, &dataset_csv(aux_errors.rows())).map_err(Failure::io)?;
            files.push(p);
        }
        ModelData::RepMeas { y1, y2 } => {
            let p = dir.join(format!("sim-{hash}.y1.csv"));
            write_text(&p, &dataset_csv(y1.rows())).map_err(Failure::io)?;
            files.push(p);
            let p = dir.join(format!("sim-{hash}.y2.csv"));
            write_text(&p, &dataset_csv(y2.rows())).map_err(Failure::io)?;
            files.push(p);
        }
        ModelData::Factor { y, loadings } => {
            let p = dir.join(format!("sim-{hash}.y.csv"));
            write_text(&p, &dataset_csv(y.rows())).map_err(Failure::io)?;
            files.push(p);
            let rows: Vec<Vec<f64>> = (0..loadings.nrows())
                .map(|a| (0..loadings.ncols()).map(|b| loadings[(a, b)]).collect())
                .collect();
            let p = dir.join(format!("sim-{hash}.loadings.csv"));
            write_text(&p, &dataset_csv(&rows)).map_err(Failure::io)?;
            files.push(p);
        }
    }
    let meta = json!({
        "config_hash": hash,
        "scenario": scenario,
        "warnings": input.warnings,
        "files": files.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>(),
    });
    let meta_path = dir.join(format!("sim-{hash}.meta.json"));
    write_json(&meta_path, &meta).map_err(Failure::io)?;
    println!("simulate {hash} complete: {}", meta_path.display());
    Ok(())
}

pub fn sweep(config: &RunConfig, header: bool) -> Result<(), Failure> {
    let sweep_config = config
        .sweep
        .as_ref()
        .ok_or_else(|| Failure::config("sweep requires a sweep block"))?;
    if config.model.scenario.is_none() {
        return Err(Failure::config("sweep requires a model.scenario block"));
    }
    let plan_probe = {
        let input = resolve_input(config, header)?;
        config.fit_plan(quad_dim(&input.data)).map_err(Failure::config)?
    };
    let effective = EffectiveConfig::new(config, plan_probe);
    let sweep_hash = effective.hash();

    let mut cells = Vec::new();
    for &n in &sweep_config.n_grid {
        for &seed in &sweep_config.seeds {
            cells.push((n, seed));
        }
    }

    struct CellRow {
        n: usize,
        seed: u64,
        l2: Option<f64>,
        linf: Option<f64>,
        rhat_max: Option<f64>,
        divergences: Option<usize>,
        wall_time_s: f64,
        error: Option<String>,
        hash: Option<String>,
    }

    let rows: Vec<CellRow> = cells
        .par_iter()
        .map(|&(n, seed)| {
            let started = std::time::Instant::now();
            let cell_config = config.cell_config(n, seed);
            let outcome = prepare(&cell_config, header).and_then(|prepared| {
                let fit = execute_fit(&prepared, &cell_config)?;
                write_fit_artifacts(
                    &cell_config.output.dir,
                    &prepared.hash,
                    &prepared.effective,
                    &fit,
                    prepared.input.aux_sample_size,
                )
                .map_err(Failure::io)?;
                Ok((prepared.hash, fit))
            });
            let wall_time_s = started.elapsed().as_secs_f64();
            match outcome {
                Ok((hash, fit)) => {
                    let (l2, linf) = fit
                        .primary_error()
                        .map_or((None, None), |(a, b)| (Some(a), Some(b)));
                    CellRow {
                        n,
                        seed,
                        l2,
                        linf,
                        rhat_max: fit.diagnostics.max_rhat(),
                        divergences: Some(fit.diagnostics.divergences),
                        wall_time_s,
                        error: None,
                        hash: Some(hash),
                    }
                }
                Err(failure) => CellRow {
                    n,
                    seed,
                    l2: None,
                    linf: None,
                    rhat_max: None,
                    divergences: None,
                    wall_time_s,
                    error: Some(failure.message),
                    hash: None,
                },
            }
        })
        .collect();

    let kind = match config.model.kind {
        ModelKind::Deconv => "deconv",
        ModelKind::RepMeas => "repmeas",
        ModelKind::Factor => "factor",
    };
    let mut csv = String::from("model,n,seed,l2,linf,rhat_max,divergences,wall_time\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for row in &rows {
        writeln!(
            csv,
            "{kind},{},{},{},{},{},{},{}",
            row.n,
            row.seed,
            opt(row.l2),
            opt(row.linf),
            opt(row.rhat_max),
            row.divergences.map_or(String::new(), |d| d.to_string()),
            row.wall_time_s,
        )
        .unwrap();
    }
    let csv_path = config.output.dir.join(format!("sweep-{sweep_hash}.cells.csv"));
    write_text(&csv_path, &csv).map_err(Failure::io)?;

    let mut medians = Vec::new();
    for &n in &sweep_config.n_grid {
        let mut vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.n == n)
            .filter_map(|r| r.l2)
            .filter(|v| v.is_finite())
            .collect();
        if !vals.is_empty() {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(json!({"n": n, "median_l2": vals[vals.len() / 2]}));
        }
    }
    let summary = json!({
        "config_hash": sweep_hash,
        "effective_config": effective,
        "n_grid": sweep_config.n_grid,
        "seeds": sweep_config.seeds,
        "median_l2_by_n": medians,
        "cells": rows.iter().map(|r| json!({
            "n": r.n, "seed": r.seed, "l2": r.l2, "linf": r.linf,
            "rhat_max": r.rhat_max, "divergences": r.divergences,
            "wall_time_s": r.wall_time_s, "error": r.error, "fit_hash": r.hash,
        })).collect::<Vec<_>>(),
    });
    let summary_path = config.output.dir.join(format!("sweep-{sweep_hash}.summary.json"));
    write_text(&summary_path, &format!("{:#}\n", summary)).map_err(Failure::io)?;
    println!("sweep {sweep_hash} complete: {}", summary_path.display());

    let failures = rows.iter().filter(|r| r.error.is_some()).count();
    if failures == rows.len() {
        return Err(Failure::sampler("every sweep cell aborted".to_string()));
    }
    if failures > 0 {
        eprintln!("warning: {failures}/{} sweep cells aborted", rows.len());
    }
    Ok(())
}

pub fn gradcheck(config: &RunConfig, header: bool, corrupt: bool) -> Result<(), Failure> {
    let prepared = prepare(config, header)?;
    let dim = prepared.prior.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.sampler.hmc.seed.wrapping_add(77));
    let mut worst = vec![0.0f64; dim];
    let tol = 1e-4;

    for _ in 0..20 {
        let coords: Vec<f64> = (0..dim)
            .map(|_| {
                let z: f64 = rand_distr::StandardNormal.sample(&mut rng);
                0.5 * z
            })
            .collect();
        let state = UnconstrainedState(coords.clone());
        let (_, mut grad) = prepared.model.neg_loglik_grad(&prepared.prior, &state);
        let (_, pgrad) = prepared.prior.log_prior_grad(&state);
        for (g, p) in grad.iter_mut().zip(&pgrad) {
            *g -= p;
        }
        if corrupt {
            // Hidden fault injection used to verify the check can fail.
            for g in grad.iter_mut() {
                *g += 0.01 * (1.0 + g.abs());
            }
        }
        for i in 0..dim {
            let h = 1e-5 * (1.0 + coords[i].abs());
            let eval = |x: Vec<f64>| {
                let s = UnconstrainedState(x);
                prepared.model.neg_loglik(&prepared.prior, &s) - prepared.prior.log_prior_grad(&s).0
            };
            let mut up = coords.clone();
            up[i] += h;
            let mut dn = coords.clone();
            dn[i] -= h;
            let fd = (eval(up) - eval(dn)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1.0);
            worst[i] = worst[i].max(rel);
        }
    }

    let overall = worst.iter().cloned().fold(0.0f64, f64::max);
    println!("gradient check over 20 random states, {dim} coordinates");
    for (i, w) in worst.iter().enumerate() {
        let flag = if *w > tol { "  <-- FAIL" } else { "" };
        println!("  coord {i:>3}: worst relative error {w:.3e}{flag}");
    }
    println!("worst overall: {overall:.3e} (tolerance {tol:.0e})");

    let report = json!({
        "config_hash": prepared.hash,
        "tolerance": tol,
        "worst_by_coordinate": worst,
        "worst_overall": overall,
        "pass": overall <= tol,
    });
    let path = config.output.dir.join(format!("gradcheck-{}.json", prepared.hash));
    write_json(&path, &report).map_err(Failure::io)?;
    if overall > tol {
        return Err(Failure::gate(format!(
            "gradient check failed: worst relative error {overall:.3e} > {tol:.0e}"
        )));
    }
    Ok(())
}

pub fn dump_nodes(config: &RunConfig, header: bool) -> Result<(), Failure> {
    let input = resolve_input(config, header)?;
    let d = quad_dim(&input.data);
    let plan = config.fit_plan(d).map_err(Failure::config)?;
    let effective = EffectiveConfig::new(config, plan.clone());
    let hash = effective.hash();
    let dir = &config.output.dir;

    let quad = BoxQuadrature::build(plan.t_radius, plan.box_nodes, d).map_err(map_core)?;
    let mut csv = String::new();
    for a in 0..d {
        write!(csv, "t_{a},").unwrap();
    }
    csv.push_str("weight\n");
    for node in quad.nodes() {
        for x in node {
            write!(csv, "{x},").unwrap();
        }
        writeln!(csv, "{}", quad.weight()).unwrap();
    }
    let box_path = dir.join(format!("nodes-{hash}.box.csv"));
    write_text(&box_path, &csv).map_err(Failure::io)?;
    let mut written = vec![box_path];

    if d == 2 || d == 3 {
        let squad =
            SphereLineQuadrature::build(plan.t_radius, plan.sphere_nodes, plan.line_nodes, d)
                .map_err(map_core)?;
        let write_set = |name: &str, nodes: &[Vec<f64>], weights: &[f64]| -> Result<PathBuf, Failure> {
            let mut csv = String::new();
            for a in 0..d {
                write!(csv, "t_{a},").unwrap();
            }
            csv.push_str("weight\n");
            for (node, w) in nodes.iter().zip(weights) {
                for x in node {
                    write!(csv, "{x},").unwrap();
                }
                writeln!(csv, "{w}").unwrap();
            }
            let p = dir.join(format!("nodes-{hash}.{name}.csv"));
            write_text(&p, &csv).map_err(Failure::io)?;
            Ok(p)
        };
        written.push(write_set("sphere", squad.sphere_nodes(), squad.sphere_weights())?);
        written.push(write_set("ball", squad.ball_nodes(), squad.ball_weights())?);
        let mut csv = String::from("t,weight\n");
        for (t, w) in squad.line_nodes().iter().zip(squad.line_weights()) {
            writeln!(csv, "{t},{w}").unwrap();
        }
        let p = dir.join(format!("nodes-{hash}.line.csv"));
        write_text(&p, &csv).map_err(Failure::io)?;
        written.push(p);
    }
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn diagnose(
    chain_paths: &[PathBuf],
    out: Option<&Path>,
    rhat_threshold: f64,
    fail_on_rhat: bool,
) -> Result<(), Failure> {
    if chain_paths.is_empty() {
        return Err(Failure::config("diagnose needs at least one chain CSV"));
    }
    let mut chains = Vec::new();
    let mut hasher = sha2::Sha256::default();
    for path in chain_paths {
        let body = std::fs::read_to_string(path)
            .map_err(|e| Failure::io(format!("reading {}: {e}", path.display())))?;
        sha2::Digest::update(&mut hasher, body.as_bytes());
        let mut lines = body.lines();
        let headers: Vec<&str> = lines
            .next()
            .ok_or_else(|| Failure::io(format!("{} is empty", path.display())))?
            .split(',')
            .collect();
        let coord_cols: Vec<usize> = headers
            .iter()
            .enumerate()
            .filter(|(_, h)| h.starts_with("coord_"))
            .map(|(i, _)| i)
            .collect();
        if coord_cols.is_empty() {
            return Err(Failure::io(format!(
                "{}: no coord_* columns; expected a fit chain CSV",
                path.display()
            )));
        }
        let mut draws = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let row: Result<Vec<f64>, _> =
                coord_cols.iter().map(|i| fields[*i].parse::<f64>()).collect();
            draws.push(row.map_err(|e| Failure::io(format!("{}: {e}", path.display())))?);
        }
        chains.push(PosteriorChain {
            logp: vec![0.0; draws.len()],
            draws,
            divergences: 0,
            warmup_divergences: 0,
            mean_accept: f64::NAN,
            step_size: f64::NAN,
        });
    }
    let diag = quasibayes::diagnostics::diagnostics(&chains).map_err(map_core)?;
    let digest = sha2::Digest::finalize(hasher);
    let hash: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();

    let report = json!({
        "inputs": chain_paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "diagnostics": diagnostics_json(&diag),
    });
    let out_dir = out.unwrap_or_else(|| Path::new("out"));
    let path = out_dir.join(format!("diagnose-{hash}.json"));
    write_json(&path, &report).map_err(Failure::io)?;
    match diag.max_rhat() {
        Some(v) => println!("max split R-hat {v:.4}; report {}", path.display()),
        None => println!("R-hat undefined (constant coordinates); report {}", path.display()),
    }
    if let Some(max_rhat) = diag.max_rhat() {
        if max_rhat > rhat_threshold {
            let message = format!("max split R-hat {max_rhat:.4} exceeds {rhat_threshold}");
            if fail_on_rhat {
                return Err(Failure::gate(message));
            }
            eprintln!("warning: {message}");
        }
    }
    Ok(())
}
