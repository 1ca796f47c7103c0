//! A-posteriori compression of trained checkpoints: change of basis by
//! interpolation or L2 projection, graph shortening by reducing the step
//! count, and evaluation sweeps over (K, N_T, method) grids. None of these
//! operations read training data; sweeps touch a dataset only to evaluate.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::basis::{BasisError, BasisFamily, BasisSpec, WeightFunction};
use crate::data::Dataset;
use crate::model::{
    checkpoint_to_json, evaluate, total_param_count, CheckpointError, Model, ModelError,
    Provenance,
};

#[derive(Error, Debug)]
pub enum CompressError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid compression target: {0}")]
    Target(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Interpolate,
    Project,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Interpolate => "interpolate",
            Method::Project => "project",
        })
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interpolate" => Ok(Method::Interpolate),
            "project" => Ok(Method::Project),
            other => Err(format!("unknown compression method: {other}")),
        }
    }
}

/// Hex SHA-256 of the model's checkpoint document.
pub fn checkpoint_sha256(model: &Model) -> Result<String, CompressError> {
    let json = checkpoint_to_json(model)?;
    let digest = Sha256::digest(json.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Change every block's gradient and state bases to `target_k` (and
/// optionally a new family), transforming all coefficients by the chosen
/// method. Data-free by construction: no dataset argument exists.
pub fn compress_model(
    model: &Model,
    target_k: usize,
    target_family: Option<BasisFamily>,
    method: Method,
) -> Result<Model, CompressError> {
    if target_k == 0 {
        return Err(CompressError::Target("target k must be at least 1".into()));
    }
    let source_sha256 = checkpoint_sha256(model)?;
    let mut out = model.clone();
    for i in 0..out.config.blocks.len() {
        let block = out.config.blocks[i].clone();
        let family = target_family.unwrap_or(block.basis_g.family);
        let target_g = BasisSpec::new(family, target_k, block.t_final)?;
        let target_s = BasisSpec::new(
            target_family.unwrap_or(block.basis_s.family),
            target_k,
            block.t_final,
        )?;
        let prefix = format!("block{i}/");
        for (name, coeffs) in out.params_g.iter_mut() {
            if name.starts_with(&prefix) {
                let wf = WeightFunction::new(block.basis_g, coeffs.clone())?;
                let new = match method {
                    Method::Interpolate => wf.interpolate(&target_g)?,
                    Method::Project => wf.project(&target_g)?,
                };
                *coeffs = new.coeffs;
            }
        }
        for (name, coeffs) in out.params_s.iter_mut() {
            if name.starts_with(&prefix) {
                let wf = WeightFunction::new(block.basis_s, coeffs.clone())?;
                let new = match method {
                    Method::Interpolate => wf.interpolate(&target_s)?,
                    Method::Project => wf.project(&target_s)?,
                };
                *coeffs = new.coeffs;
            }
        }
        let b = &mut out.config.blocks[i];
        b.basis_g = target_g;
        b.basis_s = target_s;
    }
    out.meta.provenance = Some(Provenance {
        source_sha256,
        method: method.to_string(),
    });
    Ok(out)
}

/// Reduce (or change) every block's step count. Parameters are untouched.
/// Returns warnings for blocks where integration will skip basis cells
/// (N_T < K with a piecewise-constant gradient basis).
pub fn shorten_graph(model: &Model, new_n_t: usize) -> Result<(Model, Vec<String>), CompressError> {
    if new_n_t == 0 {
        return Err(CompressError::Target("n_t must be at least 1".into()));
    }
    let mut out = model.clone();
    let mut warnings = Vec::new();
    for (i, b) in out.config.blocks.iter_mut().enumerate() {
        b.n_steps = new_n_t;
        if b.basis_g.family == BasisFamily::PiecewiseConstant && new_n_t < b.basis_g.k {
            warnings.push(format!(
                "block{i}: n_t {new_n_t} < k {}, integration skips basis cells",
                b.basis_g.k
            ));
        }
    }
    Ok((out, warnings))
}

pub const SWEEP_CSV_HEADER: &str = "k,n_t,method,family,param_count,accuracy,loss,eval_ms";

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub k: usize,
    pub n_t: usize,
    pub method: Method,
    pub family: BasisFamily,
    pub param_count: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub eval_ms: f64,
    /// Set when this cell failed; numeric fields are NaN in that case.
    pub error: Option<String>,
}

fn family_tag(family: BasisFamily) -> &'static str {
    match family {
        BasisFamily::PiecewiseConstant => "piecewise_constant",
        BasisFamily::PiecewiseLinear => "piecewise_linear",
    }
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.k,
            r.n_t,
            r.method,
            family_tag(r.family),
            r.param_count,
            r.accuracy,
            r.loss,
            r.eval_ms
        ));
    }
    out
}

/// Median evaluation wall time over `reps` repetitions, in milliseconds.
fn timed_evaluate(
    model: &Model,
    dataset: &Dataset,
    reps: usize,
) -> Result<(f64, f64, f64), ModelError> {
    let mut times = Vec::with_capacity(reps);
    let mut acc = 0.0;
    let mut loss = 0.0;
    for _ in 0..reps {
        let start = Instant::now();
        let (a, l) = evaluate(model, dataset, 256)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        acc = a;
        loss = l;
    }
    times.sort_by(f64::total_cmp);
    Ok((acc, loss, times[times.len() / 2]))
}

/// Evaluate the checkpoint over the full (k, n_t, method) grid. Cells are
/// emitted in deterministic order; failures become rows with NaN metrics
/// rather than aborting the sweep.
pub fn sweep(
    model: &Model,
    dataset: &Dataset,
    k_list: &[usize],
    n_t_list: &[usize],
    methods: &[Method],
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(k_list.len() * n_t_list.len() * methods.len());
    for &k in k_list {
        for &n_t in n_t_list {
            for &method in methods {
                let family = model.config.blocks[0].basis_g.family;
                let cell = compress_model(model, k, None, method)
                    .and_then(|m| Ok(shorten_graph(&m, n_t)?.0))
                    .and_then(|m| {
                        let (accuracy, loss, eval_ms) = timed_evaluate(&m, dataset, 5)?;
                        Ok(SweepRow {
                            k,
                            n_t,
                            method,
                            family,
                            param_count: total_param_count(&m),
                            accuracy,
                            loss,
                            eval_ms,
                            error: None,
                        })
                    });
                rows.push(cell.unwrap_or_else(|e| SweepRow {
                    k,
                    n_t,
                    method,
                    family,
                    param_count: 0,
                    accuracy: f64::NAN,
                    loss: f64::NAN,
                    eval_ms: f64::NAN,
                    error: Some(e.to_string()),
                }));
            }
        }
    }
    rows
}
