//! Full classifier assembly: dense stem, one or more stateful ODE blocks
//! with dense stitch layers between width changes, and a linear head.
//! Includes parameter initialization, forward passes, evaluation, and JSON
//! checkpoint persistence (self-contained, so compression never needs the
//! training data again).

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, ParamStore, Tape, Var};
use crate::basis::{BasisError, BasisFamily, BasisSpec};
use crate::odeblock::{
    block_forward_infer, block_forward_train, init_block_params, rand_distr_normal::draw_normal,
    OdeBlockConfig, OdeBlockError,
};
use crate::tensor::{softmax_cross_entropy, Tensor, TensorError};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Block(#[from] OdeBlockError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("missing parameter: {0}")]
    MissingParam(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

impl From<AdError> for ModelError {
    fn from(err: AdError) -> Self {
        ModelError::Block(OdeBlockError::Ad(err))
    }
}

impl From<TensorError> for ModelError {
    fn from(err: TensorError) -> Self {
        ModelError::Block(OdeBlockError::Ad(AdError::from(err)))
    }
}

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint format version {got}, expected {expected}")]
    VersionMismatch { got: u32, expected: u32 },
    #[error("parameter {name}: data length {got}, expected {expected}")]
    ShapeInconsistency {
        name: String,
        got: usize,
        expected: usize,
    },
    #[error("invalid value in field {field}: {message}")]
    Spec { field: String, message: String },
}

/// Static model architecture plus the seed that determines initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub blocks: Vec<OdeBlockConfig>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(ModelError::Config("zero input_dim or num_classes".into()));
        }
        if self.blocks.is_empty() {
            return Err(ModelError::Config("at least one block required".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.width == 0 || b.n_steps == 0 {
                return Err(ModelError::Config(format!("block {i}: zero width or n_steps")));
            }
            if b.basis_g.t_final != b.t_final || b.basis_s.t_final != b.t_final {
                return Err(ModelError::Config(format!(
                    "block {i}: basis t_final differs from block t_final"
                )));
            }
        }
        Ok(())
    }

    /// Does a stitch layer sit between blocks `i` and `i+1`?
    pub fn has_stitch(&self, i: usize) -> bool {
        self.blocks[i].width != self.blocks[i + 1].width
    }
}

/// Training provenance carried in the checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub seed: u64,
    /// K values of basis_g of block 0 after each refinement, oldest first.
    pub refinement_history: Vec<usize>,
    /// Set by compression: hex digest of the source checkpoint and method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_sha256: String,
    pub method: String,
}

/// A model: architecture plus gradient and state coefficient stores.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params_g: ParamStore<Tensor>,
    pub params_s: ParamStore<Tensor>,
    pub meta: TrainMeta,
}

/// One named parameter and where it lives.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    /// Basis over depth for block parameters; None for stem/stitch/head.
    pub basis: Option<BasisSpec>,
    /// Shape of one coefficient row (the per-time-point tensor).
    pub unit_shape: Vec<usize>,
    pub is_state: bool,
}

impl ParamSpec {
    /// Shape of the stored coefficient tensor.
    pub fn storage_shape(&self) -> Vec<usize> {
        let p: usize = self.unit_shape.iter().product();
        match &self.basis {
            Some(b) => vec![b.k, p],
            None => self.unit_shape.clone(),
        }
    }
}

/// The full named parameter layout implied by a config, in forward order.
pub fn param_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut layout = Vec::new();
    let plain = |name: String, shape: Vec<usize>| ParamSpec {
        name,
        basis: None,
        unit_shape: shape,
        is_state: false,
    };
    let d0 = config.blocks[0].width;
    layout.push(plain("stem/kernel".into(), vec![config.input_dim, d0]));
    layout.push(plain("stem/bias".into(), vec![d0]));
    for (i, block) in config.blocks.iter().enumerate() {
        let unit = block.unit();
        for (name, shape) in unit.grad_tensors() {
            layout.push(ParamSpec {
                name: format!("block{i}/{name}"),
                basis: Some(block.basis_g),
                unit_shape: shape,
                is_state: false,
            });
        }
        for (name, shape) in unit.state_tensors() {
            layout.push(ParamSpec {
                name: format!("block{i}/{name}"),
                basis: Some(block.basis_s),
                unit_shape: shape,
                is_state: true,
            });
        }
        if i + 1 < config.blocks.len() && config.has_stitch(i) {
            let d_in = block.width;
            let d_out = config.blocks[i + 1].width;
            layout.push(plain(format!("stitch{i}/kernel"), vec![d_in, d_out]));
            layout.push(plain(format!("stitch{i}/bias"), vec![d_out]));
        }
    }
    let d_last = config.blocks.last().unwrap().width;
    layout.push(plain("head/kernel".into(), vec![d_last, config.num_classes]));
    layout.push(plain("head/bias".into(), vec![config.num_classes]));
    layout
}

/// Count of scalar parameters whose storage scales with K (block gradient
/// and state coefficients); stem/stitch/head are excluded.
pub fn basis_borne_param_count(model: &Model) -> usize {
    param_layout(&model.config)
        .iter()
        .filter(|p| p.basis.is_some())
        .map(|p| p.storage_shape().iter().product::<usize>())
        .sum()
}

/// Total scalar parameter count.
pub fn total_param_count(model: &Model) -> usize {
    param_layout(&model.config)
        .iter()
        .map(|p| p.storage_shape().iter().product::<usize>())
        .sum()
}

/// Initialize all parameters deterministically from `config.seed`: dense
/// kernels He-normal per basis row, biases 0, BN scale 1 / bias 0, state
/// mean 0 / variance 1.
pub fn init_params(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params_g = ParamStore::new();
    let mut params_s = ParamStore::new();
    let d0 = config.blocks[0].width;
    let init_dense = |g: &mut ParamStore<Tensor>,
                          prefix: &str,
                          d_in: usize,
                          d_out: usize,
                          rng: &mut ChaCha8Rng|
     -> Result<(), ModelError> {
        let std = (2.0 / d_in as f64).sqrt();
        let data: Vec<f64> = (0..d_in * d_out).map(|_| draw_normal(rng) * std).collect();
        g.insert(format!("{prefix}/kernel"), Tensor::from_vec(vec![d_in, d_out], data)?)
            .map_err(ModelError::from)?;
        g.insert(format!("{prefix}/bias"), Tensor::zeros(vec![d_out]))
            .map_err(ModelError::from)?;
        Ok(())
    };
    init_dense(&mut params_g, "stem", config.input_dim, d0, &mut rng)?;
    for (i, block) in config.blocks.iter().enumerate() {
        init_block_params(
            block,
            &format!("block{i}/"),
            &mut params_g,
            &mut params_s,
            &mut rng,
        )?;
        if i + 1 < config.blocks.len() && config.has_stitch(i) {
            init_dense(
                &mut params_g,
                &format!("stitch{i}"),
                block.width,
                config.blocks[i + 1].width,
                &mut rng,
            )?;
        }
    }
    let d_last = config.blocks.last().unwrap().width;
    init_dense(&mut params_g, "head", d_last, config.num_classes, &mut rng)?;
    Ok(Model {
        config: config.clone(),
        params_g,
        params_s,
        meta: TrainMeta {
            seed: config.seed,
            ..TrainMeta::default()
        },
    })
}

fn dense(vars: &ParamStore<Var>, prefix: &str, x: &Var) -> Result<Var, ModelError> {
    let kernel = vars
        .get(&format!("{prefix}/kernel"))
        .ok_or_else(|| ModelError::MissingParam(format!("{prefix}/kernel")))?;
    let bias = vars
        .get(&format!("{prefix}/bias"))
        .ok_or_else(|| ModelError::MissingParam(format!("{prefix}/bias")))?;
    Ok(x.matmul(kernel)?.add_row(bias)?)
}

/// Train-mode forward pass. Returns logits and, per block, the freshly
/// projected state coefficients (to be applied after the optimizer step).
pub fn model_forward_train(
    config: &ModelConfig,
    vars: &ParamStore<Var>,
    state: &ParamStore<Tensor>,
    x: &Var,
) -> Result<(Var, Vec<Tensor>), ModelError> {
    let mut h = dense(vars, "stem", x)?;
    let mut state_updates = Vec::with_capacity(config.blocks.len());
    for (i, block) in config.blocks.iter().enumerate() {
        let (out, coeffs) = block_forward_train(block, &format!("block{i}/"), vars, state, &h)?;
        state_updates.push(coeffs);
        h = out;
        if i + 1 < config.blocks.len() && config.has_stitch(i) {
            h = dense(vars, &format!("stitch{i}"), &h.relu()?)?;
        }
    }
    let logits = dense(vars, "head", &h)?;
    Ok((logits, state_updates))
}

/// Inference forward pass: pure function of (parameters, input).
pub fn model_forward_infer(
    config: &ModelConfig,
    vars: &ParamStore<Var>,
    state: &ParamStore<Tensor>,
    x: &Var,
) -> Result<Var, ModelError> {
    let mut h = dense(vars, "stem", x)?;
    for (i, block) in config.blocks.iter().enumerate() {
        h = block_forward_infer(block, &format!("block{i}/"), vars, state, &h)?;
        if i + 1 < config.blocks.len() && config.has_stitch(i) {
            h = dense(vars, &format!("stitch{i}"), &h.relu()?)?;
        }
    }
    Ok(dense(vars, "head", &h)?)
}

/// Inference logits for a raw feature batch.
pub fn infer_logits(model: &Model, x: &Tensor) -> Result<Tensor, ModelError> {
    let tape = Tape::new();
    let vars = model.params_g.map(|_, t| tape.leaf(t.clone()));
    let xv = tape.leaf(x.clone());
    let logits = model_forward_infer(&model.config, &vars, &model.params_s, &xv)?;
    Ok(logits.value())
}

/// Accuracy and mean cross-entropy loss over a dataset, evaluated in
/// batches of `batch_size`.
pub fn evaluate(
    model: &Model,
    dataset: &crate::data::Dataset,
    batch_size: usize,
) -> Result<(f64, f64), ModelError> {
    let n = dataset.len();
    let d = dataset.input_dim();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let rows = end - start;
        let x = Tensor::from_vec(
            vec![rows, d],
            dataset.features.data()[start * d..end * d].to_vec(),
        )?;
        let logits = infer_logits(model, &x)?;
        let labels = &dataset.labels[start..end];
        loss_sum += softmax_cross_entropy(&logits, labels)? * rows as f64;
        let c = model.config.num_classes;
        for (r, label) in labels.iter().enumerate() {
            let row = &logits.data()[r * c..(r + 1) * c];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if pred == *label {
                correct += 1;
            }
        }
        start = end;
    }
    Ok((correct as f64 / n as f64, loss_sum / n as f64))
}

// ---------------------------------------------------------------------------
// Checkpoint persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    family: String,
    k: usize,
    t_final: f64,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: ModelConfig,
    params_g: Vec<ParamEntry>,
    params_s: Vec<ParamEntry>,
    meta: TrainMeta,
}

fn family_tag(family: BasisFamily) -> &'static str {
    match family {
        BasisFamily::PiecewiseConstant => "piecewise_constant",
        BasisFamily::PiecewiseLinear => "piecewise_linear",
    }
}

fn entries_for(
    layout: &[ParamSpec],
    store: &ParamStore<Tensor>,
    state: bool,
) -> Result<Vec<ParamEntry>, CheckpointError> {
    layout
        .iter()
        .filter(|p| p.is_state == state)
        .map(|p| {
            let tensor = store.get(&p.name).ok_or_else(|| CheckpointError::Spec {
                field: p.name.clone(),
                message: "parameter missing from store".into(),
            })?;
            let (family, k, t_final) = match &p.basis {
                Some(b) => (family_tag(b.family), b.k, b.t_final),
                None => ("piecewise_constant", 1, 1.0),
            };
            Ok(ParamEntry {
                name: p.name.clone(),
                family: family.to_string(),
                k,
                t_final,
                shape: p.unit_shape.clone(),
                data: tensor.data().to_vec(),
            })
        })
        .collect()
}

/// The checkpoint document as a JSON string (also used for hashing).
pub fn checkpoint_to_json(model: &Model) -> Result<String, CheckpointError> {
    let layout = param_layout(&model.config);
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        params_g: entries_for(&layout, &model.params_g, false)?,
        params_s: entries_for(&layout, &model.params_s, true)?,
        meta: model.meta.clone(),
    };
    serde_json::to_string_pretty(&file).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let json = checkpoint_to_json(model)?;
    fs::write(path, json).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn checkpoint_from_json(raw: &str) -> Result<Model, CheckpointError> {
    let file: CheckpointFile =
        serde_json::from_str(raw).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            got: file.format_version,
            expected: FORMAT_VERSION,
        });
    }
    file.config.validate().map_err(|e| CheckpointError::Spec {
        field: "config".into(),
        message: e.to_string(),
    })?;
    let layout = param_layout(&file.config);
    let mut params_g = ParamStore::new();
    let mut params_s = ParamStore::new();
    for (entries, state) in [(&file.params_g, false), (&file.params_s, true)] {
        for entry in entries {
            let spec = layout
                .iter()
                .find(|p| p.name == entry.name && p.is_state == state)
                .ok_or_else(|| CheckpointError::Spec {
                    field: entry.name.clone(),
                    message: "parameter not part of the configured model".into(),
                })?;
            let family: BasisFamily =
                entry.family.parse().map_err(|message| CheckpointError::Spec {
                    field: format!("{}.family", entry.name),
                    message,
                })?;
            if let Some(b) = &spec.basis {
                if family != b.family || entry.k != b.k || entry.t_final != b.t_final {
                    return Err(CheckpointError::Spec {
                        field: entry.name.clone(),
                        message: format!(
                            "basis ({}, k={}, t_final={}) disagrees with config ({}, k={}, t_final={})",
                            entry.family,
                            entry.k,
                            entry.t_final,
                            family_tag(b.family),
                            b.k,
                            b.t_final
                        ),
                    });
                }
            }
            if entry.shape != spec.unit_shape {
                return Err(CheckpointError::Spec {
                    field: entry.name.clone(),
                    message: format!(
                        "shape {:?} disagrees with config {:?}",
                        entry.shape, spec.unit_shape
                    ),
                });
            }
            let storage = spec.storage_shape();
            let expected: usize = storage.iter().product();
            if entry.data.len() != expected {
                return Err(CheckpointError::ShapeInconsistency {
                    name: entry.name.clone(),
                    got: entry.data.len(),
                    expected,
                });
            }
            let tensor = Tensor::from_vec(storage, entry.data.clone()).expect("validated above");
            let store = if state { &mut params_s } else { &mut params_g };
            store
                .insert(entry.name.clone(), tensor)
                .map_err(|_| CheckpointError::Spec {
                    field: entry.name.clone(),
                    message: "duplicate parameter entry".into(),
                })?;
        }
    }
    // Every expected parameter must be present.
    for spec in &layout {
        let store = if spec.is_state { &params_s } else { &params_g };
        if store.get(&spec.name).is_none() {
            return Err(CheckpointError::Spec {
                field: spec.name.clone(),
                message: "parameter missing from checkpoint".into(),
            });
        }
    }
    Ok(Model {
        config: file.config,
        params_g,
        params_s,
        meta: file.meta,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let raw = fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_json(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, value_and_grad};
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::integrate::SchemeId;
    use crate::odeblock::BN_EPS;
    use approx::assert_abs_diff_eq;

    fn tiny_config(widths: &[usize]) -> ModelConfig {
        let blocks = widths
            .iter()
            .map(|&d| OdeBlockConfig {
                width: d,
                scheme: SchemeId::Midpoint,
                n_steps: 2,
                t_final: 1.0,
                basis_g: BasisSpec::new(BasisFamily::PiecewiseConstant, 2, 1.0).unwrap(),
                basis_s: BasisSpec::new(BasisFamily::PiecewiseConstant, 2, 1.0).unwrap(),
                momentum: 0.9,
            })
            .collect();
        ModelConfig {
            input_dim: 4,
            num_classes: 3,
            blocks,
            seed: 11,
        }
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = tiny_config(&[4, 6]);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        for ((_, x), (_, y)) in a.params_g.iter().zip(b.params_g.iter()) {
            assert_eq!(x, y);
        }
        let mut cfg2 = cfg.clone();
        cfg2.seed = 12;
        let c = init_params(&cfg2).unwrap();
        assert_ne!(
            a.params_g.get("stem/kernel").unwrap(),
            c.params_g.get("stem/kernel").unwrap()
        );
    }

    #[test]
    fn init_state_variances_are_one() {
        let model = init_params(&tiny_config(&[4])).unwrap();
        for (name, t) in model.params_s.iter() {
            let want = if name.ends_with("/var") { 1.0 } else { 0.0 };
            assert!(t.data().iter().all(|v| *v == want), "{name}");
        }
    }

    #[test]
    fn kernel_init_variance_matches_he() {
        let fan_in = 64;
        let cfg = ModelConfig {
            input_dim: fan_in,
            num_classes: 2,
            blocks: vec![OdeBlockConfig {
                width: 160,
                scheme: SchemeId::Euler,
                n_steps: 1,
                t_final: 1.0,
                basis_g: BasisSpec::new(BasisFamily::PiecewiseConstant, 1, 1.0).unwrap(),
                basis_s: BasisSpec::new(BasisFamily::PiecewiseConstant, 1, 1.0).unwrap(),
                momentum: 0.9,
            }],
            seed: 321,
        };
        let model = init_params(&cfg).unwrap();
        let k = model.params_g.get("stem/kernel").unwrap();
        assert!(k.len() >= 10_000);
        let var: f64 = k.data().iter().map(|v| v * v).sum::<f64>() / k.len() as f64;
        let want = 2.0 / fan_in as f64;
        assert!(
            (var - want).abs() < 0.2 * want,
            "sample variance {var}, expected about {want}"
        );
    }

    #[test]
    fn zero_dynamics_logits_equal_head_of_stem() {
        let cfg = tiny_config(&[5]);
        let mut model = init_params(&cfg).unwrap();
        for (name, t) in model.params_g.iter_mut() {
            if name.contains("unit/") && name.ends_with("/kernel") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let x = make_synthetic(SyntheticKind::Blobs, 6, 0.1, 2).features;
        let x = Tensor::from_vec(vec![6, 4], x.data().iter().cycle().take(24).copied().collect())
            .unwrap();
        let logits = infer_logits(&model, &x).unwrap();
        assert_eq!(logits.shape(), &[6, 3]);
        let stem = crate::tensor::add_row(
            &crate::tensor::matmul(&x, model.params_g.get("stem/kernel").unwrap()).unwrap(),
            model.params_g.get("stem/bias").unwrap(),
        )
        .unwrap();
        let want = crate::tensor::add_row(
            &crate::tensor::matmul(&stem, model.params_g.get("head/kernel").unwrap()).unwrap(),
            model.params_g.get("head/bias").unwrap(),
        )
        .unwrap();
        for (a, b) in logits.data().iter().zip(want.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn train_and_infer_agree_when_state_matches_batch_stats() {
        // Zero unit kernels freeze the trajectory, so both BN sites see
        // time-constant inputs whose statistics we can store as state.
        let cfg = tiny_config(&[4]);
        let mut model = init_params(&cfg).unwrap();
        for (name, t) in model.params_g.iter_mut() {
            if name.contains("unit/") && name.ends_with("/kernel") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let x = Tensor::from_vec(
            vec![8, 4],
            (0..32).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();
        let stem = crate::tensor::add_row(
            &crate::tensor::matmul(&x, model.params_g.get("stem/kernel").unwrap()).unwrap(),
            model.params_g.get("stem/bias").unwrap(),
        )
        .unwrap();
        let mean = crate::tensor::mean_rows(&stem).unwrap();
        let mut var = vec![0.0; 4];
        for r in 0..8 {
            for c in 0..4 {
                let d = stem.data()[r * 4 + c] - mean.data()[c];
                var[c] += d * d / 8.0;
            }
        }
        let k = cfg.blocks[0].basis_s.k;
        let tile = |row: &[f64]| {
            Tensor::from_vec(vec![k, 4], row.iter().cycle().take(k * 4).copied().collect()).unwrap()
        };
        model.params_s.set("block0/unit/bn1/mean", tile(mean.data())).unwrap();
        model.params_s.set("block0/unit/bn1/var", tile(&var)).unwrap();
        // dense1 outputs its bias row for every sample: batch variance 0,
        // stored variance clamped to eps; both normalize to exactly 0.
        model
            .params_s
            .set("block0/unit/bn2/mean", {
                let b = model.params_g.get("block0/unit/dense1/bias").unwrap().clone();
                tile(&b.data()[..4])
            })
            .unwrap();
        model
            .params_s
            .set("block0/unit/bn2/var", tile(&[BN_EPS; 4]))
            .unwrap();

        let tape = Tape::new();
        let vars = model.params_g.map(|_, t| tape.leaf(t.clone()));
        let xv = tape.leaf(x.clone());
        let (train_logits, _) =
            model_forward_train(&cfg, &vars, &model.params_s, &xv).unwrap();
        let infer_logits_t = infer_logits(&model, &x).unwrap();
        for (a, b) in train_logits.value().data().iter().zip(infer_logits_t.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn full_model_gradient_passes_finite_differences() {
        let cfg = tiny_config(&[4, 6]);
        let model = init_params(&cfg).unwrap();
        let ds = make_synthetic(SyntheticKind::Circles, 6, 0.05, 4);
        let x = Tensor::from_vec(
            vec![6, 4],
            ds.features.data().iter().cycle().take(24).copied().collect(),
        )
        .unwrap();
        let labels: Vec<usize> = ds.labels.iter().map(|l| l % 3).collect();
        let report = finite_diff_check::<ModelError, _>(&model.params_g, 1e-5, |tape, vars| {
            let xv = tape.leaf(x.clone());
            let (logits, _) = model_forward_train(&cfg, vars, &model.params_s, &xv)?;
            Ok(logits.softmax_cross_entropy(&labels)?)
        })
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = tiny_config(&[4, 6]);
        let model = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.meta, model.meta);
        for ((an, at), (bn, bt)) in model.params_g.iter().zip(loaded.params_g.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "{an} not bit-exact");
        }
        for ((an, at), (bn, bt)) in model.params_s.iter().zip(loaded.params_s.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.data(), bt.data(), "{an} not bit-exact");
        }
    }

    #[test]
    fn checkpoint_error_cases_are_distinct() {
        let cfg = tiny_config(&[4]);
        let model = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&model, &path).unwrap();
        let raw = fs::read_to_string(&path).unwrap();

        let v = raw.replacen("\"format_version\": 1", "\"format_version\": 99", 1);
        fs::write(&path, v).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::VersionMismatch { got: 99, expected: 1 }
        ));

        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::Malformed(_)
        ));

        // Tamper with a coefficient array length.
        let mut file: serde_json::Value = serde_json::from_str(&raw).unwrap();
        let arr = file["params_g"][2]["data"].as_array_mut().unwrap();
        arr.pop();
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            CheckpointError::ShapeInconsistency { .. }
        ));

        // Unknown family string names the offending field.
        let mut file: serde_json::Value = serde_json::from_str(&raw).unwrap();
        file["params_g"][2]["family"] = serde_json::Value::String("wavelet".into());
        fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            CheckpointError::Spec { field, .. } => assert!(field.ends_with(".family"), "{field}"),
            other => panic!("expected spec error, got {other}"),
        }
    }

    #[test]
    fn evaluate_reports_accuracy_and_loss() {
        let cfg = ModelConfig {
            input_dim: 2,
            num_classes: 2,
            ..tiny_config(&[4])
        };
        let model = init_params(&cfg).unwrap();
        let ds = make_synthetic(SyntheticKind::Blobs, 40, 0.05, 9);
        let (acc, loss) = evaluate(&model, &ds, 16).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(loss.is_finite() && loss > 0.0);
        let (acc2, loss2) = evaluate(&model, &ds, 7).unwrap();
        assert_abs_diff_eq!(acc, acc2, epsilon = 1e-12);
        assert_abs_diff_eq!(loss, loss2, epsilon = 1e-9);
    }
}
