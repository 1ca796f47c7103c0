//! SGD-with-momentum training with multi-level refinement: train at a
//! coarse basis, periodically interpolate all coefficients to a finer basis
//! (doubling the step count and resetting the optimizer), and continue.

use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{value_and_grad, ParamStore};
use crate::basis::WeightFunction;
use crate::data::Dataset;
use crate::model::{model_forward_train, Model, ModelError};
use crate::odeblock::apply_state_update;
use crate::tensor::Tensor;

#[derive(Error, Debug)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("shape mismatch for {name} in optimizer step")]
    Shape { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate; decays by `lr_decay_factor` at each epoch in
    /// `lr_decay_epochs` (defaults to 50% and 75% of `epochs`).
    pub lr: f64,
    #[serde(default)]
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at whose start every block is refined (K -> next K, N_T
    /// doubled, optimizer reset). Strictly increasing, within [1, epochs].
    pub refinement_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 128,
            lr: 0.1,
            lr_decay_epochs: None,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            refinement_epochs: Vec::new(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("zero epochs or batch_size".into()));
        }
        let mut prev = 0usize;
        for &e in &self.refinement_epochs {
            if e <= prev || e > self.epochs {
                return Err(TrainError::Config(format!(
                    "refinement_epochs must be strictly increasing within [1, {}]",
                    self.epochs
                )));
            }
            prev = e;
        }
        Ok(())
    }

    /// Epochs at whose start the learning rate is multiplied by the decay
    /// factor.
    pub fn decay_epochs(&self) -> Vec<usize> {
        match &self.lr_decay_epochs {
            Some(v) => v.clone(),
            None => vec![self.epochs / 2 + 1, (self.epochs * 3) / 4 + 1],
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs().iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

/// Per-parameter velocity, zeroed at creation and after every refinement.
#[derive(Clone, Debug)]
pub struct OptState {
    pub velocity: ParamStore<Tensor>,
}

impl OptState {
    pub fn new(params: &ParamStore<Tensor>) -> OptState {
        OptState {
            velocity: params.map(|_, t| Tensor::zeros(t.shape().to_vec())),
        }
    }
}

/// One SGD step: v <- momentum * v + g + weight_decay * w (decay on dense
/// kernels only), then w <- w - lr * v.
pub fn sgd_momentum_step(
    params: &mut ParamStore<Tensor>,
    grads: &ParamStore<Tensor>,
    opt: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    for (name, w) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| TrainError::Shape { name: name.to_string() })?;
        let v = opt
            .velocity
            .get_mut(name)
            .ok_or_else(|| TrainError::Shape { name: name.to_string() })?;
        if g.shape() != w.shape() || v.shape() != w.shape() {
            return Err(TrainError::Shape { name: name.to_string() });
        }
        let wd = if name.ends_with("/kernel") && !name.contains("/bn") {
            weight_decay
        } else {
            0.0
        };
        for i in 0..w.len() {
            let vel = momentum * v.data()[i] + g.data()[i] + wd * w.data()[i];
            v.data_mut()[i] = vel;
            w.data_mut()[i] -= lr * vel;
        }
    }
    Ok(())
}

/// Refine every block: interpolate all gradient and state coefficients to
/// the next-K basis, double N_T, and record the refinement. The represented
/// weight functions are unchanged, so inference is invariant.
pub fn refine(model: &mut Model) -> Result<(), TrainError> {
    for i in 0..model.config.blocks.len() {
        let block = model.config.blocks[i].clone();
        let new_g = block.basis_g.refined();
        let new_s = block.basis_s.refined();
        let prefix = format!("block{i}/");
        for (name, coeffs) in model.params_g.iter_mut() {
            if name.starts_with(&prefix) {
                let wf = WeightFunction::new(block.basis_g, coeffs.clone()).map_err(ModelError::Basis)?;
                *coeffs = wf.interpolate(&new_g).map_err(ModelError::Basis)?.coeffs;
            }
        }
        for (name, coeffs) in model.params_s.iter_mut() {
            if name.starts_with(&prefix) {
                let wf = WeightFunction::new(block.basis_s, coeffs.clone()).map_err(ModelError::Basis)?;
                *coeffs = wf.interpolate(&new_s).map_err(ModelError::Basis)?.coeffs;
            }
        }
        let b = &mut model.config.blocks[i];
        b.basis_g = new_g;
        b.basis_s = new_s;
        b.n_steps *= 2;
    }
    model
        .meta
        .refinement_history
        .push(model.config.blocks[0].basis_g.k);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub k: usize,
    pub n_t: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,k,n_t,train_loss,val_accuracy,lr";

pub fn metrics_to_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.epoch, m.k, m.n_t, m.train_loss, m.val_accuracy, m.lr
        ));
    }
    out
}

/// Result of a training run. On divergence the loop stops and `aborted`
/// carries the diagnostic; `model` retains the last completed step.
#[derive(Debug)]
pub struct TrainResult {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub aborted: Option<String>,
}

/// Train the model on `train_ds`, reporting held-out accuracy on `val_ds`
/// each epoch. Deterministic in `config.seed`.
pub fn train(
    mut model: Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    model.config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptState::new(&model.params_g);
    let mut metrics = Vec::with_capacity(config.epochs);
    let n = train_ds.len();

    for epoch in 1..=config.epochs {
        if config.refinement_epochs.contains(&epoch) {
            refine(&mut model)?;
            opt = OptState::new(&model.params_g);
        }
        let lr = config.lr_at(epoch);
        let shuffled = train_ds.shuffled(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + config.batch_size).min(n);
            let batch = shuffled.slice(start, end);
            let x = batch.features.clone();
            let labels = batch.labels.clone();
            let cfg = model.config.clone();
            let state = &model.params_s;
            let captured = RefCell::new(Vec::new());
            let step = value_and_grad::<ModelError, _>(&model.params_g, |tape, vars| {
                let xv = tape.leaf(x.clone());
                let (logits, updates) = model_forward_train(&cfg, vars, state, &xv)?;
                *captured.borrow_mut() = updates;
                Ok(logits.softmax_cross_entropy(&labels)?)
            });
            let (loss, grads) = match step {
                Ok(ok) => ok,
                Err(e) => {
                    model.meta.epochs = epoch - 1;
                    return Ok(TrainResult {
                        model,
                        metrics,
                        aborted: Some(format!("epoch {epoch}: {e}")),
                    });
                }
            };
            if !loss.is_finite() {
                model.meta.epochs = epoch - 1;
                return Ok(TrainResult {
                    model,
                    metrics,
                    aborted: Some(format!("epoch {epoch}: non-finite loss {loss}")),
                });
            }
            sgd_momentum_step(
                &mut model.params_g,
                &grads,
                &mut opt,
                lr,
                config.momentum,
                config.weight_decay,
            )?;
            for (i, coeffs) in captured.into_inner().into_iter().enumerate() {
                apply_state_update(
                    &model.config.blocks[i],
                    &format!("block{i}/"),
                    &mut model.params_s,
                    &coeffs,
                )
                .map_err(ModelError::Block)?;
            }
            loss_sum += loss;
            batches += 1;
            start = end;
        }
        let (val_accuracy, _) = crate::model::evaluate(&model, val_ds, config.batch_size.max(256))?;
        metrics.push(EpochMetrics {
            epoch,
            k: model.config.blocks[0].basis_g.k,
            n_t: model.config.blocks[0].n_steps,
            train_loss: loss_sum / batches.max(1) as f64,
            val_accuracy,
            lr,
        });
        model.meta.epochs = epoch;
    }
    Ok(TrainResult {
        model,
        metrics,
        aborted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisFamily, BasisSpec};
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::integrate::SchemeId;
    use crate::model::{infer_logits, init_params, ModelConfig};
    use crate::odeblock::OdeBlockConfig;
    use approx::assert_abs_diff_eq;

    fn store1(name: &str, vals: &[f64]) -> ParamStore<Tensor> {
        let mut s = ParamStore::new();
        s.insert(name.to_string(), Tensor::from_vec(vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn sgd_single_and_double_step_oracle() {
        let mut params = store1("a/kernel", &[1.0]);
        let grads = store1("a/kernel", &[1.0]);
        let mut opt = OptState::new(&params);
        sgd_momentum_step(&mut params, &grads, &mut opt, 0.1, 0.9, 0.0).unwrap();
        assert_abs_diff_eq!(opt.velocity.get("a/kernel").unwrap().data()[0], 1.0);
        assert_abs_diff_eq!(params.get("a/kernel").unwrap().data()[0], 0.9);
        sgd_momentum_step(&mut params, &grads, &mut opt, 0.1, 0.9, 0.0).unwrap();
        assert_abs_diff_eq!(opt.velocity.get("a/kernel").unwrap().data()[0], 1.9);
        assert_abs_diff_eq!(params.get("a/kernel").unwrap().data()[0], 0.71, epsilon = 1e-12);
    }

    #[test]
    fn weight_decay_hits_dense_kernels_only() {
        let mut params = ParamStore::new();
        params.insert("block0/unit/dense1/kernel".to_string(), Tensor::full(vec![1], 2.0)).unwrap();
        params.insert("block0/unit/bn1/scale".to_string(), Tensor::full(vec![1], 2.0)).unwrap();
        params.insert("block0/unit/bn1/bias".to_string(), Tensor::full(vec![1], 2.0)).unwrap();
        let grads = params.map(|_, t| Tensor::zeros(t.shape().to_vec()));
        let mut opt = OptState::new(&params);
        sgd_momentum_step(&mut params, &grads, &mut opt, 0.1, 0.9, 0.5).unwrap();
        // Kernel decays: v = 0.5*2 = 1, w = 2 - 0.1 = 1.9.
        assert_abs_diff_eq!(params.get("block0/unit/dense1/kernel").unwrap().data()[0], 1.9);
        // BN scale and bias receive no decay.
        assert_abs_diff_eq!(params.get("block0/unit/bn1/scale").unwrap().data()[0], 2.0);
        assert_abs_diff_eq!(params.get("block0/unit/bn1/bias").unwrap().data()[0], 2.0);
    }

    fn spiral_config(family: BasisFamily, k: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            num_classes: 2,
            blocks: vec![OdeBlockConfig {
                width: 8,
                scheme: SchemeId::Midpoint,
                n_steps: 4,
                t_final: 1.0,
                basis_g: BasisSpec::new(family, k, 1.0).unwrap(),
                basis_s: BasisSpec::new(family, k, 1.0).unwrap(),
                momentum: 0.9,
            }],
            seed,
        }
    }

    #[test]
    fn refine_duplicates_pc_coefficients_and_doubles_n_t() {
        let mut model = init_params(&spiral_config(BasisFamily::PiecewiseConstant, 1, 3)).unwrap();
        let before = model.params_g.get("block0/unit/dense1/kernel").unwrap().clone();
        refine(&mut model).unwrap();
        assert_eq!(model.config.blocks[0].basis_g.k, 2);
        assert_eq!(model.config.blocks[0].n_steps, 8);
        assert_eq!(model.meta.refinement_history, vec![2]);
        let after = model.params_g.get("block0/unit/dense1/kernel").unwrap();
        assert_eq!(after.shape(), &[2, 64]);
        assert_eq!(&after.data()[..64], before.data());
        assert_eq!(&after.data()[64..], before.data());
    }

    #[test]
    fn refine_pl_inserts_midpoint_averages() {
        let mut model = init_params(&spiral_config(BasisFamily::PiecewiseLinear, 3, 4)).unwrap();
        let before = model.params_g.get("block0/unit/bn1/bias").unwrap().clone();
        refine(&mut model).unwrap();
        assert_eq!(model.config.blocks[0].basis_g.k, 5);
        let after = model.params_g.get("block0/unit/bn1/bias").unwrap();
        for c in 0..8 {
            assert_abs_diff_eq!(after.data()[c], before.data()[c], epsilon = 1e-12);
            assert_abs_diff_eq!(
                after.data()[8 + c],
                0.5 * (before.data()[c] + before.data()[8 + c]),
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(after.data()[16 + c], before.data()[8 + c], epsilon = 1e-12);
        }
    }

    #[test]
    fn refinement_leaves_inference_logits_invariant() {
        // The coefficient interpolation represents the same weight
        // functions exactly, so with the integration graph held fixed the
        // logits cannot change. (The step doubling is undone for the
        // comparison: a different N_T is a different RK approximation.)
        for family in [BasisFamily::PiecewiseConstant, BasisFamily::PiecewiseLinear] {
            let mut model = init_params(&spiral_config(family, 3, 5)).unwrap();
            let x = make_synthetic(SyntheticKind::TwoSpirals, 12, 0.1, 6).features;
            let before = infer_logits(&model, &x).unwrap();
            refine(&mut model).unwrap();
            model.config.blocks[0].n_steps /= 2;
            let after = infer_logits(&model, &x).unwrap();
            for (a, b) in before.data().iter().zip(after.data()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn zero_lr_training_changes_state_but_not_weights() {
        let model = init_params(&spiral_config(BasisFamily::PiecewiseConstant, 2, 7)).unwrap();
        let params_before = model.params_g.clone();
        let state_before = model.params_s.clone();
        let ds = make_synthetic(SyntheticKind::TwoSpirals, 64, 0.05, 7);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 32,
            lr: 0.0,
            weight_decay: 0.0,
            seed: 1,
            ..TrainConfig::default()
        };
        let result = train(model, &ds, &ds, &cfg).unwrap();
        assert!(result.aborted.is_none());
        for ((_, a), (_, b)) in params_before.iter().zip(result.model.params_g.iter()) {
            assert_eq!(a, b);
        }
        let changed = state_before
            .iter()
            .zip(result.model.params_s.iter())
            .any(|((_, a), (_, b))| a != b);
        assert!(changed, "state coefficients should still update at lr=0");
    }

    #[test]
    fn identical_seeds_give_bit_identical_metrics() {
        let ds = make_synthetic(SyntheticKind::TwoSpirals, 64, 0.05, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 32,
            lr: 0.05,
            refinement_epochs: vec![2],
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let model = init_params(&spiral_config(BasisFamily::PiecewiseConstant, 1, 8)).unwrap();
            train(model, &ds, &ds, &cfg).unwrap().metrics
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a[1].k, 2, "refinement at epoch 2 doubles K");
        assert_eq!(a[0].k, 1);
    }

    #[test]
    fn loss_decreases_over_first_epochs() {
        let ds = make_synthetic(SyntheticKind::TwoSpirals, 256, 0.05, 3);
        let mut deltas = 0.0;
        for seed in 0..5 {
            let model = init_params(&spiral_config(BasisFamily::PiecewiseConstant, 2, seed)).unwrap();
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 64,
                lr: 0.05,
                seed,
                ..TrainConfig::default()
            };
            let result = train(model, &ds, &ds, &cfg).unwrap();
            deltas += result.metrics.last().unwrap().train_loss - result.metrics[0].train_loss;
        }
        assert!(deltas / 5.0 < 0.0, "mean loss change {deltas}");
    }

    #[test]
    fn lr_schedule_steps_at_half_and_three_quarters() {
        let cfg = TrainConfig {
            epochs: 100,
            lr: 0.1,
            ..TrainConfig::default()
        };
        assert_abs_diff_eq!(cfg.lr_at(1), 0.1);
        assert_abs_diff_eq!(cfg.lr_at(50), 0.1);
        assert_abs_diff_eq!(cfg.lr_at(51), 0.01);
        assert_abs_diff_eq!(cfg.lr_at(75), 0.01);
        assert_abs_diff_eq!(cfg.lr_at(76), 0.001, epsilon = 1e-15);
    }

    #[test]
    fn invalid_refinement_epochs_are_rejected() {
        let cfg = TrainConfig {
            epochs: 10,
            refinement_epochs: vec![5, 5],
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))));
        let cfg = TrainConfig {
            epochs: 10,
            refinement_epochs: vec![11],
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn metrics_csv_has_exact_header() {
        let csv = metrics_to_csv(&[EpochMetrics {
            epoch: 1,
            k: 2,
            n_t: 4,
            train_loss: 0.5,
            val_accuracy: 0.75,
            lr: 0.1,
        }]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,k,n_t,train_loss,val_accuracy,lr");
        assert_eq!(lines.next().unwrap(), "1,2,4,0.5,0.75,0.1");
    }
}
