//! Artifact writers. All CSVs are UTF-8 with LF line endings, `.` decimal
//! separators and no thousands separators; floats print in shortest
//! round-trip form so identical runs produce identical bytes.

use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use quasibayes::diagnostics::{DiagValue, Diagnostics};
use quasibayes::pipeline::FitOutput;
use quasibayes::posterior::DensityGrid;
use quasibayes::MixtureParams;

use crate::config::EffectiveConfig;

pub fn write_text(path: &Path, content: &str) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
    }
    std::fs::write(path, content).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

// Diagnostics values rendered as JSON: numbers stay numbers, infinities and
// undefined markers become strings (serde_json would silently null them).
fn diag_json(v: &DiagValue) -> serde_json::Value {
    match v {
        DiagValue::Value(x) if x.is_finite() => json!(x),
        DiagValue::Value(x) => json!(fmt_f64(*x)),
        DiagValue::Undefined(tag) => json!(tag),
    }
}

pub fn diagnostics_json(diag: &Diagnostics) -> serde_json::Value {
    json!({
        "rhat": diag.rhat.iter().map(diag_json).collect::<Vec<_>>(),
        "ess_bulk": diag.ess_bulk.iter().map(diag_json).collect::<Vec<_>>(),
        "max_rhat": diag.max_rhat().map(|v| diag_json(&DiagValue::Value(v))).unwrap_or(json!(null)),
        "min_ess_bulk": diag.min_ess().map(|v| diag_json(&DiagValue::Value(v))).unwrap_or(json!(null)),
        "divergences": diag.divergences,
        "warmup_divergences": diag.warmup_divergences,
        "n_chains": diag.n_chains,
        "n_draws": diag.n_draws,
    })
}

/// File set produced by one fit.
pub struct FitArtifacts {
    pub summary: PathBuf,
    pub chains: Vec<PathBuf>,
    pub draws: PathBuf,
    pub densities: Vec<PathBuf>,
}

pub fn write_fit_artifacts(
    out_dir: &Path,
    hash: &str,
    effective: &EffectiveConfig,
    fit: &FitOutput,
    aux_sample_size: Option<usize>,
) -> Result<FitArtifacts, String> {
    // Chains: unconstrained coordinates with log density.
    let mut chain_paths = Vec::new();
    for (ci, chain) in fit.chains.iter().enumerate() {
        let dim = chain.draws.first().map_or(0, Vec::len);
        let mut csv = String::from("iter,logp");
        for c in 0..dim {
            write!(csv, ",coord_{c}").unwrap();
        }
        csv.push('\n');
        for (i, (draw, logp)) in chain.draws.iter().zip(&chain.logp).enumerate() {
            write!(csv, "{i},{}", fmt_f64(*logp)).unwrap();
            for v in draw {
                write!(csv, ",{}", fmt_f64(*v)).unwrap();
            }
            csv.push('\n');
        }
        let path = out_dir.join(format!("fit-{hash}.chain-{ci}.csv"));
        write_text(&path, &csv)?;
        chain_paths.push(path);
    }

    // Pooled constrained draws per block.
    let draws_path = out_dir.join(format!("fit-{hash}.draws.csv"));
    write_text(&draws_path, &constrained_draws_csv(fit)?)?;

    // Density grids (and demeaned variants when produced).
    let mut density_paths = Vec::new();
    for (b, block) in fit.blocks.iter().enumerate() {
        let path = out_dir.join(format!("fit-{hash}.density-{b}.csv"));
        write_text(&path, &density_csv(&block.density))?;
        density_paths.push(path);
        if let Some(dm) = &block.density_demeaned {
            let path = out_dir.join(format!("fit-{hash}.density-{b}-demeaned.csv"));
            write_text(&path, &density_csv(dm))?;
            density_paths.push(path);
        }
    }

    let summary_path = out_dir.join(format!("fit-{hash}.summary.json"));
    let summary = json!({
        "config_hash": hash,
        "effective_config": effective,
        "n": fit.n,
        "aux_sample_size": aux_sample_size,
        "t_radius": effective.plan.t_radius,
        "t_suggestion_mild": fit.t_suggestion,
        "diagnostics": diagnostics_json(&fit.diagnostics),
        "floor_breaches": fit.floor_breaches,
        "mean_accept": fit.chains.iter().map(|c| c.mean_accept).collect::<Vec<_>>(),
        "step_size": fit.chains.iter().map(|c| c.step_size).collect::<Vec<_>>(),
        "errors_vs_truth": fit.errors.iter().map(|(l2, linf)| json!({"l2": l2, "linf": linf})).collect::<Vec<_>>(),
        "artifacts": {
            "chains": chain_paths.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>(),
            "draws": draws_path.file_name().unwrap().to_string_lossy(),
            "densities": density_paths.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>(),
        },
    });
    write_text(&summary_path, &format!("{:#}\n", summary))?;
    Ok(FitArtifacts {
        summary: summary_path,
        chains: chain_paths,
        draws: draws_path,
        densities: density_paths,
    })
}

fn constrained_draws_csv(fit: &FitOutput) -> Result<String, String> {
    let Some(first_block) = fit.blocks.first() else {
        return Err("fit produced no posterior blocks".into());
    };
    let Some(first) = first_block.draws.first() else {
        return Err("fit produced no draws".into());
    };
    let k = first.n_components();
    let d = first.dim();
    let mut csv = String::from("block,draw");
    for j in 0..k {
        write!(csv, ",weight_{j}").unwrap();
    }
    for j in 0..k {
        for a in 0..d {
            write!(csv, ",atom_{j}_{a}").unwrap();
        }
    }
    for a in 0..d {
        for b in a..d {
            write!(csv, ",cov_{a}_{b}").unwrap();
        }
    }
    csv.push('\n');
    for (bi, block) in fit.blocks.iter().enumerate() {
        for (di, p) in block.draws.iter().enumerate() {
            write!(csv, "{bi},{di}").unwrap();
            append_params(&mut csv, p);
            csv.push('\n');
        }
    }
    Ok(csv)
}

fn append_params(csv: &mut String, p: &MixtureParams) {
    for w in p.weights() {
        write!(csv, ",{}", fmt_f64(*w)).unwrap();
    }
    for atom in p.atoms() {
        for a in atom {
            write!(csv, ",{}", fmt_f64(*a)).unwrap();
        }
    }
    let d = p.dim();
    for a in 0..d {
        for b in a..d {
            write!(csv, ",{}", fmt_f64(p.covariance()[(a, b)])).unwrap();
        }
    }
}

pub fn density_csv(grid: &DensityGrid) -> String {
    let d = grid.points.first().map_or(1, Vec::len);
    let mut csv = String::new();
    for a in 0..d {
        write!(csv, "x_{a},").unwrap();
    }
    csv.push_str("mean");
    for (level, _, _) in &grid.bands {
        write!(csv, ",lower_{level},upper_{level}").unwrap();
    }
    csv.push('\n');
    for (i, point) in grid.points.iter().enumerate() {
        for x in point {
            write!(csv, "{},", fmt_f64(*x)).unwrap();
        }
        write!(csv, "{}", fmt_f64(grid.mean_density[i])).unwrap();
        for (_, lo, hi) in &grid.bands {
            write!(csv, ",{},{}", fmt_f64(lo[i]), fmt_f64(hi[i])).unwrap();
        }
        csv.push('\n');
    }
    csv
}

pub fn dataset_csv(rows: &[Vec<f64>]) -> String {
    let mut csv = String::new();
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    csv
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), String> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| format!("cannot serialize {}: {e}", path.display()))?;
    write_text(path, &format!("{body}\n"))
}
