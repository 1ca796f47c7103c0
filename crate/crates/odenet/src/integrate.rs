//! Explicit Runge-Kutta schemes as Butcher tableaus and a fixed-step driver
//! with per-stage hooks.
//!
//! The driver is generic over the state type so the same stepping logic runs
//! on plain vectors (convergence tests) and on tape variables (training).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Var};

#[derive(Error, Debug)]
pub enum IntegrateError<E> {
    #[error("non-finite stage value at t={t}, stage {stage}")]
    Divergence { t: f64, stage: usize },
    #[error("integration needs at least one step, got {0}")]
    InvalidSteps(usize),
    #[error("dynamics failed at t={t}, stage {stage}: {source}")]
    Dynamics { t: f64, stage: usize, source: E },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeId {
    Euler,
    Midpoint,
    Rk4,
}

impl SchemeId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeId::Euler => "euler",
            SchemeId::Midpoint => "midpoint",
            SchemeId::Rk4 => "rk4",
        }
    }
}

impl std::fmt::Display for SchemeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchemeId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euler" => Ok(SchemeId::Euler),
            "midpoint" => Ok(SchemeId::Midpoint),
            "rk4" => Ok(SchemeId::Rk4),
            other => Err(format!("unknown scheme: {other}")),
        }
    }
}

/// Coefficients `(a_ij, b_i, c_i)` of an explicit RK scheme plus its
/// classical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub order: usize,
}

impl ButcherTableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

pub fn make_tableau(id: SchemeId) -> ButcherTableau {
    match id {
        SchemeId::Euler => ButcherTableau {
            a: vec![vec![0.0]],
            b: vec![1.0],
            c: vec![0.0],
            order: 1,
        },
        SchemeId::Midpoint => ButcherTableau {
            a: vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            b: vec![0.0, 1.0],
            c: vec![0.0, 0.5],
            order: 2,
        },
        SchemeId::Rk4 => ButcherTableau {
            a: vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            b: vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            c: vec![0.0, 0.5, 0.5, 1.0],
            order: 4,
        },
    }
}

/// State that an RK step can combine linearly.
pub trait RkState: Clone {
    type Error;

    /// `base + sum_i coeff_i * term_i`.
    fn combine(base: &Self, terms: &[(f64, &Self)]) -> Result<Self, Self::Error>;

    fn all_finite(&self) -> bool;
}

impl RkState for Vec<f64> {
    type Error = std::convert::Infallible;

    fn combine(base: &Self, terms: &[(f64, &Self)]) -> Result<Self, Self::Error> {
        let mut out = base.clone();
        for (coeff, term) in terms {
            for (o, v) in out.iter_mut().zip(term.iter()) {
                *o += coeff * v;
            }
        }
        Ok(out)
    }

    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl RkState for Var {
    type Error = AdError;

    fn combine(base: &Self, terms: &[(f64, &Self)]) -> Result<Self, Self::Error> {
        let mut acc = base.clone();
        for (coeff, term) in terms {
            acc = acc.add(&term.scale(*coeff)?)?;
        }
        Ok(acc)
    }

    fn all_finite(&self) -> bool {
        self.value().all_finite()
    }
}

/// One stage of an RK step: stage time, stage state, stage slope.
#[derive(Clone, Debug)]
pub struct StageRecord<S> {
    pub t: f64,
    pub x: S,
    pub k: S,
}

/// One explicit RK step from `(t, x)` with step `dt`.
///
/// Stage records are returned in stage order; a non-finite slope aborts with
/// a divergence error naming the time and stage.
pub fn rk_step<S, E>(
    f: &mut impl FnMut(f64, &S) -> Result<S, E>,
    tableau: &ButcherTableau,
    t: f64,
    dt: f64,
    x: &S,
) -> Result<(S, Vec<StageRecord<S>>), IntegrateError<E>>
where
    S: RkState,
    E: From<S::Error>,
{
    let stages = tableau.stages();
    let mut records: Vec<StageRecord<S>> = Vec::with_capacity(stages);
    let mut slopes: Vec<S> = Vec::with_capacity(stages);
    for i in 0..stages {
        let t_i = t + tableau.c[i] * dt;
        let terms: Vec<(f64, &S)> = (0..i)
            .filter(|j| tableau.a[i][*j] != 0.0)
            .map(|j| (dt * tableau.a[i][j], &slopes[j]))
            .collect();
        let x_i = S::combine(x, &terms).map_err(|e| IntegrateError::Dynamics {
            t: t_i,
            stage: i,
            source: E::from(e),
        })?;
        let k_i = f(t_i, &x_i).map_err(|source| IntegrateError::Dynamics {
            t: t_i,
            stage: i,
            source,
        })?;
        if !k_i.all_finite() {
            return Err(IntegrateError::Divergence { t: t_i, stage: i });
        }
        records.push(StageRecord {
            t: t_i,
            x: x_i,
            k: k_i.clone(),
        });
        slopes.push(k_i);
    }
    let terms: Vec<(f64, &S)> = (0..stages)
        .filter(|i| tableau.b[*i] != 0.0)
        .map(|i| (dt * tableau.b[i], &slopes[i]))
        .collect();
    let x_next = S::combine(x, &terms).map_err(|e| IntegrateError::Dynamics {
        t,
        stage: stages,
        source: E::from(e),
    })?;
    Ok((x_next, records))
}

/// Fixed-step integration of `x' = f(t, x)` from `t = 0` to `t_final` in
/// `n_steps` steps, invoking `stage_hook` on every stage record in execution
/// order.
pub fn integrate<S, E>(
    f: &mut impl FnMut(f64, &S) -> Result<S, E>,
    tableau: &ButcherTableau,
    x0: S,
    t_final: f64,
    n_steps: usize,
    stage_hook: &mut impl FnMut(&StageRecord<S>),
) -> Result<S, IntegrateError<E>>
where
    S: RkState,
    E: From<S::Error>,
{
    if n_steps == 0 {
        return Err(IntegrateError::InvalidSteps(0));
    }
    let dt = t_final / n_steps as f64;
    let mut x = x0;
    for step in 0..n_steps {
        let t = step as f64 * dt;
        let (x_next, records) = rk_step(f, tableau, t, dt, &x)?;
        for record in &records {
            stage_hook(record);
        }
        x = x_next;
    }
    Ok(x)
}
