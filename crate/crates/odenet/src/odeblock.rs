//! The stateful ODE block: a basis-parameterized residual unit integrated by
//! an explicit RK scheme, collecting batch-norm state samples at every stage
//! time and projecting them back onto the state basis.
//!
//! A block value is immutable during a forward pass; train-mode passes
//! return new state coefficients instead of mutating in place.

use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, ParamStore, Tape, Var};
use crate::basis::{BasisError, BasisSpec, StatePointCloud, WeightFunction};
use crate::integrate::{integrate, make_tableau, IntegrateError, SchemeId};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Error, Debug)]
pub enum OdeBlockError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("dynamics diverged at t={t}, stage {stage}")]
    Divergence { t: f64, stage: usize },
    #[error("missing parameter: {0}")]
    MissingParam(String),
    #[error("state update has shape {got:?}, expected {expected:?}")]
    StateShape { got: Vec<usize>, expected: Vec<usize> },
}

impl From<crate::tensor::TensorError> for OdeBlockError {
    fn from(err: crate::tensor::TensorError) -> Self {
        OdeBlockError::Ad(AdError::from(err))
    }
}

impl From<IntegrateError<OdeBlockError>> for OdeBlockError {
    fn from(err: IntegrateError<OdeBlockError>) -> Self {
        match err {
            IntegrateError::Divergence { t, stage } => OdeBlockError::Divergence { t, stage },
            // A non-finite tensor inside the unit is the same divergence,
            // caught one level earlier by the debug checked-math guard.
            IntegrateError::Dynamics {
                t,
                stage,
                source: OdeBlockError::Ad(AdError::NonFinite { .. }),
            } => OdeBlockError::Divergence { t, stage },
            IntegrateError::Dynamics { source, .. } => source,
            IntegrateError::InvalidSteps(_) => OdeBlockError::Divergence { t: 0.0, stage: 0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Dense adaptation of the pre-activation residual unit:
/// BN -> ReLU -> Dense(d x d) -> BN -> ReLU -> Dense(d x d).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualUnitSpec {
    pub width: usize,
}

impl ResidualUnitSpec {
    /// Gradient-parameter tensors of one unit call, in evaluation order.
    pub fn grad_tensors(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.width;
        vec![
            ("unit/bn1/scale", vec![d]),
            ("unit/bn1/bias", vec![d]),
            ("unit/dense1/kernel", vec![d, d]),
            ("unit/dense1/bias", vec![d]),
            ("unit/bn2/scale", vec![d]),
            ("unit/bn2/bias", vec![d]),
            ("unit/dense2/kernel", vec![d, d]),
            ("unit/dense2/bias", vec![d]),
        ]
    }

    /// State tensors (running statistics), one mean/variance pair per BN site.
    pub fn state_tensors(&self) -> Vec<(&'static str, Vec<usize>)> {
        let d = self.width;
        vec![
            ("unit/bn1/mean", vec![d]),
            ("unit/bn1/var", vec![d]),
            ("unit/bn2/mean", vec![d]),
            ("unit/bn2/var", vec![d]),
        ]
    }

    /// Flattened width of the concatenated state sample.
    pub fn state_width(&self) -> usize {
        4 * self.width
    }
}

/// Static configuration of one stateful ODE block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeBlockConfig {
    pub width: usize,
    pub scheme: SchemeId,
    pub n_steps: usize,
    pub t_final: f64,
    pub basis_g: BasisSpec,
    pub basis_s: BasisSpec,
    pub momentum: f64,
}

impl OdeBlockConfig {
    pub fn unit(&self) -> ResidualUnitSpec {
        ResidualUnitSpec { width: self.width }
    }
}

thread_local! {
    static UNIT_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of residual-unit evaluations performed on this thread.
pub fn unit_eval_count() -> u64 {
    UNIT_EVALS.with(|c| c.get())
}

fn lookup<'a>(vars: &'a ParamStore<Var>, name: &str) -> Result<&'a Var, OdeBlockError> {
    vars.get(name)
        .ok_or_else(|| OdeBlockError::MissingParam(name.to_string()))
}

fn lookup_tensor<'a>(
    store: &'a ParamStore<Tensor>,
    name: &str,
) -> Result<&'a Tensor, OdeBlockError> {
    store
        .get(name)
        .ok_or_else(|| OdeBlockError::MissingParam(name.to_string()))
}

/// Gradient parameters of one unit call, materialized at time `t` by
/// combining coefficient rows with the basis weights.
struct UnitParamsAt {
    bn1_scale: Var,
    bn1_bias: Var,
    dense1_kernel: Var,
    dense1_bias: Var,
    bn2_scale: Var,
    bn2_bias: Var,
    dense2_kernel: Var,
    dense2_bias: Var,
}

fn grad_params_at(
    cfg: &OdeBlockConfig,
    prefix: &str,
    vars: &ParamStore<Var>,
    tape: &Tape,
    t: f64,
) -> Result<UnitParamsAt, OdeBlockError> {
    let phi = cfg.basis_g.eval(t)?;
    let phi_row = tape.leaf(Tensor::from_vec(vec![1, cfg.basis_g.k], phi).expect("len k"));
    let d = cfg.width;
    let at = |name: &str, shape: Vec<usize>| -> Result<Var, OdeBlockError> {
        let coeffs = lookup(vars, &format!("{prefix}{name}"))?;
        Ok(phi_row.matmul(coeffs)?.reshape(shape)?)
    };
    Ok(UnitParamsAt {
        bn1_scale: at("unit/bn1/scale", vec![d])?,
        bn1_bias: at("unit/bn1/bias", vec![d])?,
        dense1_kernel: at("unit/dense1/kernel", vec![d, d])?,
        dense1_bias: at("unit/dense1/bias", vec![d])?,
        bn2_scale: at("unit/bn2/scale", vec![d])?,
        bn2_bias: at("unit/bn2/bias", vec![d])?,
        dense2_kernel: at("unit/dense2/kernel", vec![d, d])?,
        dense2_bias: at("unit/dense2/bias", vec![d])?,
    })
}

/// State parameters (mean, var) per BN site at time `t`, as plain vectors.
struct StateAt {
    bn1_mean: Vec<f64>,
    bn1_var: Vec<f64>,
    bn2_mean: Vec<f64>,
    bn2_var: Vec<f64>,
}

fn state_at(
    cfg: &OdeBlockConfig,
    prefix: &str,
    state: &ParamStore<Tensor>,
    t: f64,
) -> Result<StateAt, OdeBlockError> {
    let eval = |name: &str| -> Result<Vec<f64>, OdeBlockError> {
        let coeffs = lookup_tensor(state, &format!("{prefix}{name}"))?;
        let wf = WeightFunction::new(cfg.basis_s, coeffs.clone())?;
        Ok(wf.eval(t)?)
    };
    Ok(StateAt {
        bn1_mean: eval("unit/bn1/mean")?,
        bn1_var: eval("unit/bn1/var")?,
        bn2_mean: eval("unit/bn2/mean")?,
        bn2_var: eval("unit/bn2/var")?,
    })
}

/// One BN site. In train mode the output is normalized with current-batch
/// statistics and the EMA-updated state sample is emitted; in infer mode the
/// stored state is used and nothing is emitted.
fn bn_site(
    x: &Var,
    scale: &Var,
    bias: &Var,
    stored_mean: &[f64],
    stored_var: &[f64],
    momentum: f64,
    mode: Mode,
) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>), OdeBlockError> {
    let tape = x.tape();
    match mode {
        Mode::Train => {
            let (m, v) = x.batch_stats()?;
            let y = x.affine_normalize(&m, &v, scale, bias, BN_EPS)?;
            let mv = m.value();
            let vv = v.value();
            let new_mean: Vec<f64> = stored_mean
                .iter()
                .zip(mv.data())
                .map(|(s, b)| momentum * s + (1.0 - momentum) * b)
                .collect();
            let new_var: Vec<f64> = stored_var
                .iter()
                .zip(vv.data())
                .map(|(s, b)| momentum * s + (1.0 - momentum) * b)
                .collect();
            Ok((y, Some((new_mean, new_var))))
        }
        Mode::Infer => {
            let m = tape.leaf(Tensor::from_vec(vec![stored_mean.len()], stored_mean.to_vec())?);
            let v = tape.leaf(Tensor::from_vec(vec![stored_var.len()], stored_var.to_vec())?);
            let y = x.affine_normalize(&m, &v, scale, bias, BN_EPS)?;
            Ok((y, None))
        }
    }
}

/// One evaluation of the residual unit at time `t`.
///
/// Returns the dynamics output and, in train mode, the concatenated state
/// sample `[bn1 mean, bn1 var, bn2 mean, bn2 var]`.
fn unit_forward(
    cfg: &OdeBlockConfig,
    params: &UnitParamsAt,
    state: &StateAt,
    x: &Var,
    mode: Mode,
) -> Result<(Var, Option<Vec<f64>>), OdeBlockError> {
    UNIT_EVALS.with(|c| c.set(c.get() + 1));
    let (h1, sample1) = bn_site(
        x,
        &params.bn1_scale,
        &params.bn1_bias,
        &state.bn1_mean,
        &state.bn1_var,
        cfg.momentum,
        mode,
    )?;
    let h1 = h1.relu()?;
    let h1 = h1.matmul(&params.dense1_kernel)?.add_row(&params.dense1_bias)?;
    let (h2, sample2) = bn_site(
        &h1,
        &params.bn2_scale,
        &params.bn2_bias,
        &state.bn2_mean,
        &state.bn2_var,
        cfg.momentum,
        mode,
    )?;
    let h2 = h2.relu()?;
    let dxdt = h2.matmul(&params.dense2_kernel)?.add_row(&params.dense2_bias)?;
    let sample = match mode {
        Mode::Train => {
            let (m1, v1) = sample1.expect("train mode emits samples");
            let (m2, v2) = sample2.expect("train mode emits samples");
            let mut s = Vec::with_capacity(cfg.unit().state_width());
            s.extend(m1);
            s.extend(v1);
            s.extend(m2);
            s.extend(v2);
            Some(s)
        }
        Mode::Infer => None,
    };
    Ok((dxdt, sample))
}

fn run_block(
    cfg: &OdeBlockConfig,
    prefix: &str,
    vars: &ParamStore<Var>,
    state: &ParamStore<Tensor>,
    x_in: &Var,
    mode: Mode,
) -> Result<(Var, StatePointCloud), OdeBlockError> {
    let tableau = make_tableau(cfg.scheme);
    let cloud = RefCell::new(StatePointCloud::new());
    let tape = x_in.tape().clone();
    let mut dynamics = |t: f64, x: &Var| -> Result<Var, OdeBlockError> {
        let params = grad_params_at(cfg, prefix, vars, &tape, t)?;
        let st = state_at(cfg, prefix, state, t)?;
        let (dxdt, sample) = unit_forward(cfg, &params, &st, x, mode)?;
        if let Some(sample) = sample {
            cloud.borrow_mut().push(t, sample);
        }
        Ok(dxdt)
    };
    let x_out = integrate(
        &mut dynamics,
        &tableau,
        x_in.clone(),
        cfg.t_final,
        cfg.n_steps,
        &mut |_| {},
    )
    .map_err(OdeBlockError::from)?;
    Ok((x_out, cloud.into_inner()))
}

/// Train-mode forward pass: integrate the dynamics, collect state samples at
/// every stage time, and project the cloud onto the state basis.
///
/// Returns the block output (differentiable with respect to every gradient
/// coefficient) and the projected state coefficients, shape
/// `(basis_s.k, 4 * width)`.
pub fn block_forward_train(
    cfg: &OdeBlockConfig,
    prefix: &str,
    vars: &ParamStore<Var>,
    state: &ParamStore<Tensor>,
    x_in: &Var,
) -> Result<(Var, Tensor), OdeBlockError> {
    let (x_out, cloud) = run_block(cfg, prefix, vars, state, x_in, Mode::Train)?;
    let new_coeffs = cloud.project(&cfg.basis_s)?;
    Ok((x_out, new_coeffs))
}

/// Inference forward pass: same integration, BN normalizes with the stored
/// state functions, no cloud is collected.
pub fn block_forward_infer(
    cfg: &OdeBlockConfig,
    prefix: &str,
    vars: &ParamStore<Var>,
    state: &ParamStore<Tensor>,
    x_in: &Var,
) -> Result<Var, OdeBlockError> {
    let (x_out, _) = run_block(cfg, prefix, vars, state, x_in, Mode::Infer)?;
    Ok(x_out)
}

/// Replace the block's state coefficients with freshly projected ones,
/// clamping variance rows to at least `BN_EPS`.
pub fn apply_state_update(
    cfg: &OdeBlockConfig,
    prefix: &str,
    state: &mut ParamStore<Tensor>,
    new_coeffs: &Tensor,
) -> Result<(), OdeBlockError> {
    let d = cfg.width;
    let expected = vec![cfg.basis_s.k, 4 * d];
    if new_coeffs.shape() != expected.as_slice() {
        return Err(OdeBlockError::StateShape {
            got: new_coeffs.shape().to_vec(),
            expected,
        });
    }
    let k = cfg.basis_s.k;
    for (slot, (name, _)) in cfg.unit().state_tensors().into_iter().enumerate() {
        let full = format!("{prefix}{name}");
        let is_var = name.ends_with("/var");
        let mut data = Vec::with_capacity(k * d);
        for row in 0..k {
            let base = row * 4 * d + slot * d;
            for c in 0..d {
                let mut v = new_coeffs.data()[base + c];
                if is_var && v < BN_EPS {
                    v = BN_EPS;
                }
                data.push(v);
            }
        }
        let tensor = Tensor::from_vec(vec![k, d], data).expect("sized above");
        if state.set(&full, tensor).is_err() {
            return Err(OdeBlockError::MissingParam(full));
        }
    }
    Ok(())
}

/// He-style init of one block's coefficient stores under `prefix`.
pub fn init_block_params(
    cfg: &OdeBlockConfig,
    prefix: &str,
    grads: &mut ParamStore<Tensor>,
    state: &mut ParamStore<Tensor>,
    rng: &mut impl rand::Rng,
) -> Result<(), OdeBlockError> {
    use rand_distr_normal::draw_normal;
    let unit = cfg.unit();
    for (name, shape) in unit.grad_tensors() {
        let p: usize = shape.iter().product();
        let k = cfg.basis_g.k;
        // The unit's final dense kernel starts at zero (standard residual
        // zero-init), so every block begins as the identity flow and the
        // batch statistics evolve slowly along the depth variable.
        let data: Vec<f64> = if name.ends_with("dense2/kernel") {
            vec![0.0; k * p]
        } else if name.ends_with("/kernel") {
            let fan_in = shape[0] as f64;
            let std = (2.0 / fan_in).sqrt();
            (0..k * p).map(|_| draw_normal(rng) * std).collect()
        } else if name.ends_with("/scale") {
            vec![1.0; k * p]
        } else {
            vec![0.0; k * p]
        };
        grads
            .insert(format!("{prefix}{name}"), Tensor::from_vec(vec![k, p], data)?)
            .map_err(OdeBlockError::Ad)?;
    }
    for (name, shape) in unit.state_tensors() {
        let p: usize = shape.iter().product();
        let k = cfg.basis_s.k;
        let fill = if name.ends_with("/var") { 1.0 } else { 0.0 };
        state
            .insert(
                format!("{prefix}{name}"),
                Tensor::from_vec(vec![k, p], vec![fill; k * p])?,
            )
            .map_err(OdeBlockError::Ad)?;
    }
    Ok(())
}

/// Box-Muller draw, shared so every initializer uses one generator
/// convention.
pub(crate) mod rand_distr_normal {
    pub fn draw_normal(rng: &mut impl rand::Rng) -> f64 {
        loop {
            let u1: f64 = rng.gen::<f64>();
            let u2: f64 = rng.gen::<f64>();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }
}
