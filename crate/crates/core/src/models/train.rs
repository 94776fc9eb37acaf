use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BnStats, ClassifierModel, Dataset, MlpArchitecture, Mode, TapeForward};
use crate::numerics::special::one_hot;
use crate::numerics::{Matrix, RngStream, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 40,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, uses_batch_norm: bool) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::input("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::input("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 || (uses_batch_norm && self.batch_size < 2) {
            return Err(Error::input("batch_size must be at least 2 with batch norm"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl Sgd {
    pub fn new(config: &TrainConfig) -> Self {
        Sgd {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Updates `params[i]` with `grads[i]`; a missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let pv = p.as_mut_slice();
            let vv = v.as_mut_slice();
            for k in 0..pv.len() {
                let grad = g.map_or(0.0, |g| g.as_slice()[k]) + self.weight_decay * pv[k];
                vv[k] = self.momentum * vv[k] + grad;
                pv[k] -= self.learning_rate * vv[k];
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    /// Sample-weighted mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD over the rows of `features`.
///
/// `extra` holds auxiliary trainable slots (e.g. a projection head) that are
/// optimized alongside the model. `loss` receives the tape, the model's forward
/// handles, the batch row indices and the extra slot handles.
pub fn fit<F>(
    model: &mut ClassifierModel,
    extra: &mut [(String, Matrix)],
    features: &Matrix,
    config: &TrainConfig,
    mut loss: F,
) -> Result<TrainHistory>
where
    F: FnMut(&mut Tape, &TapeForward, &[usize], &[Var]) -> Result<Var>,
{
    let uses_bn = model.architecture.num_batch_norm_layers() > 0;
    config.validate(uses_bn)?;
    if features.rows() == 0 {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if features.cols() != model.input_dim() {
        return Err(Error::shape(format!(
            "data has {} features, model expects {}",
            features.cols(),
            model.input_dim()
        )));
    }
    model.mode = Mode::Train;
    let mut shuffle_rng = RngStream::new(config.seed).split(1);
    let mut sgd = Sgd::new(config);
    let mut history = TrainHistory::default();
    let n = features.rows();
    for _ in 0..config.epochs {
        let order = shuffle_rng.permutation(n);
        let mut total = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(config.batch_size) {
            if uses_bn && batch.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let params = model.register(&mut tape, true);
            let extra_vars: Vec<Var> = extra
                .iter()
                .map(|(name, m)| tape.param(name.clone(), m.clone()))
                .collect();
            let x = tape.constant(features.select_rows(batch));
            let fwd = model.forward_tape(&mut tape, x, &params, BnStats::Batch)?;
            let out = loss(&mut tape, &fwd, batch, &extra_vars)?;
            let value = tape.scalar(out);
            if !value.is_finite() {
                return Err(Error::input("training loss diverged"));
            }
            total += value * batch.len() as f64;
            seen += batch.len();
            let grads = tape.backward(out)?;
            let bn_values: Vec<Matrix> = fwd.bn_inputs.iter().map(|v| tape.value(*v).clone()).collect();
            let all_vars: Vec<Var> = params.iter().chain(&extra_vars).copied().collect();
            let grad_refs: Vec<Option<&Matrix>> = all_vars.iter().map(|v| grads.get(*v)).collect();
            let mut slots: Vec<&mut Matrix> = model
                .params_mut()
                .iter_mut()
                .map(|(_, m)| m)
                .chain(extra.iter_mut().map(|(_, m)| m))
                .collect();
            sgd.step(&mut slots, &grad_refs);
            model.update_running_stats(&bn_values);
        }
        history
            .epoch_losses
            .push(if seen > 0 { total / seen as f64 } else { 0.0 });
    }
    model.mode = Mode::Eval;
    Ok(history)
}

/// Cross-entropy training from a fresh initialization; returns an eval-mode
/// model and its per-epoch losses.
pub fn train_classifier(
    arch: &MlpArchitecture,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    if data.is_empty() {
        return Err(Error::input("cannot train on an empty dataset"));
    }
    if data.num_classes != arch.num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, architecture {}",
            data.num_classes, arch.num_classes
        )));
    }
    let mut model = ClassifierModel::init(arch, &mut RngStream::new(config.seed).split(0))?;
    let targets = one_hot(&data.labels, data.num_classes);
    let history = fit(&mut model, &mut [], &data.features, config, |tape, fwd, batch, _| {
        tape.cross_entropy(fwd.logits, targets.select_rows(batch))
    })?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::make_gaussian_mixture;

    fn blobs() -> Dataset {
        make_gaussian_mixture(2, 100, 2, 0.3, &mut RngStream::new(11)).unwrap()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs();
        let (model, history) = train_classifier(&MlpArchitecture::relu_64(2, 2), &data, &quick(1)).unwrap();
        assert!(model.accuracy(&data).unwrap() >= 0.95);
        assert!(history.epoch_losses.last().unwrap() <= history.epoch_losses.first().unwrap());
        assert_eq!(model.mode, Mode::Eval);
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let data = blobs();
        let arch = MlpArchitecture::tanh_32_32(2, 2);
        let cfg = TrainConfig { epochs: 0, ..quick(3) };
        let (model, history) = train_classifier(&arch, &data, &cfg).unwrap();
        let init = ClassifierModel::init(&arch, &mut RngStream::new(3).split(0))
            .unwrap()
            .eval();
        assert_eq!(model, init);
        assert!(history.epoch_losses.is_empty());
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = blobs();
        let arch = MlpArchitecture::relu_64(2, 2);
        let (a, _) = train_classifier(&arch, &data, &quick(5)).unwrap();
        let (b, _) = train_classifier(&arch, &data, &quick(5)).unwrap();
        assert_eq!(a, b);
        let (c, _) = train_classifier(&arch, &data, &quick(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let data = blobs();
        let arch = MlpArchitecture::relu_64(2, 2);
        let plain = TrainConfig {
            weight_decay: 0.0,
            ..quick(7)
        };
        let decayed = TrainConfig {
            weight_decay: 0.05,
            ..quick(7)
        };
        let (a, _) = train_classifier(&arch, &data, &plain).unwrap();
        let (b, _) = train_classifier(&arch, &data, &decayed).unwrap();
        assert!(b.parameter_norm() <= a.parameter_norm());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = Dataset::new(Matrix::zeros(0, 2), vec![], 2).unwrap();
        let r = train_classifier(&MlpArchitecture::relu_64(2, 2), &empty, &quick(0));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
