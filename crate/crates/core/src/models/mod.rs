//! Batch-normalized MLP classifiers, supervised training and synthetic data.

mod checkpoint;
mod data;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_model, save_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use data::{make_gaussian_mixture, Dataset, GaussianMixture};
pub use train::{fit, train_classifier, Sgd, TrainConfig, TrainHistory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::special::softmax_rows;
use crate::numerics::{Matrix, RngStream, Tape, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl HiddenLayer {
    pub fn new(width: usize, activation: Activation) -> Self {
        HiddenLayer {
            width,
            activation,
            batch_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<HiddenLayer>,
    pub num_classes: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<HiddenLayer>, num_classes: usize) -> Result<Self> {
        let arch = MlpArchitecture {
            input_dim,
            hidden,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Hidden (32, 32) tanh.
    pub fn tanh_32_32(input_dim: usize, num_classes: usize) -> Self {
        let h = vec![
            HiddenLayer::new(32, Activation::Tanh),
            HiddenLayer::new(32, Activation::Tanh),
        ];
        MlpArchitecture::new(input_dim, h, num_classes).expect("valid preset")
    }

    /// Hidden (64,) relu.
    pub fn relu_64(input_dim: usize, num_classes: usize) -> Self {
        let h = vec![HiddenLayer::new(64, Activation::Relu)];
        MlpArchitecture::new(input_dim, h, num_classes).expect("valid preset")
    }

    /// Hidden (128, 64) relu.
    pub fn relu_128_64(input_dim: usize, num_classes: usize) -> Self {
        let h = vec![
            HiddenLayer::new(128, Activation::Relu),
            HiddenLayer::new(64, Activation::Relu),
        ];
        MlpArchitecture::new(input_dim, h, num_classes).expect("valid preset")
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::input("input_dim must be at least 1"));
        }
        if self.hidden.is_empty() {
            return Err(Error::input("an MLP needs at least one hidden layer"));
        }
        if self.hidden.iter().any(|h| h.width == 0) {
            return Err(Error::input("hidden widths must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::input("a classifier needs at least two classes"));
        }
        Ok(())
    }

    pub fn num_batch_norm_layers(&self) -> usize {
        self.hidden.iter().filter(|h| h.batch_norm).count()
    }

    /// Width of the last hidden layer.
    pub fn feature_dim(&self) -> usize {
        self.hidden.last().map_or(0, |h| h.width)
    }

    /// Parameter slot names and shapes, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, h) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{i}.weight"), (fan_in, h.width)));
            out.push((format!("hidden{i}.bias"), (1, h.width)));
            if h.batch_norm {
                out.push((format!("bn{i}.gamma"), (1, h.width)));
                out.push((format!("bn{i}.beta"), (1, h.width)));
            }
            fan_in = h.width;
        }
        out.push(("output.weight".into(), (fan_in, self.num_classes)));
        out.push(("output.bias".into(), (1, self.num_classes)));
        out
    }
}

/// Running statistics of every batch-norm layer, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<Vec<f64>>,
    /// Stored as variances.
    pub running_var: Vec<Vec<f64>>,
    pub momentum: f64,
}

impl BatchNormState {
    fn fresh(arch: &MlpArchitecture) -> Self {
        let widths: Vec<usize> = arch.hidden.iter().filter(|h| h.batch_norm).map(|h| h.width).collect();
        BatchNormState {
            running_mean: widths.iter().map(|&w| vec![0.0; w]).collect(),
            running_var: widths.iter().map(|&w| vec![1.0; w]).collect(),
            momentum: BN_MOMENTUM,
        }
    }

    /// Running standard deviations `sqrt(running_var)` per layer.
    pub fn running_std(&self) -> Vec<Vec<f64>> {
        self.running_var
            .iter()
            .map(|v| v.iter().map(|x| x.sqrt()).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Which statistics batch-norm layers normalize with on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnStats {
    Batch,
    Running,
}

/// Handles produced by [`ClassifierModel::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    pub logits: Var,
    /// Input of every batch-norm layer (the pre-normalization activations).
    pub bn_inputs: Vec<Var>,
    /// Last hidden layer after its activation.
    pub features: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub architecture: MlpArchitecture,
    params: Vec<(String, Matrix)>,
    pub batch_norm: BatchNormState,
    pub mode: Mode,
}

impl ClassifierModel {
    /// Glorot-uniform weights, zero biases, unit gammas.
    pub fn init(arch: &MlpArchitecture, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let params = arch
            .param_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let m = if name.ends_with(".weight") {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| rng.uniform_range(-limit, limit))
                } else if name.ends_with(".gamma") {
                    Matrix::filled(r, c, 1.0)
                } else {
                    Matrix::zeros(r, c)
                };
                (name, m)
            })
            .collect();
        Ok(ClassifierModel {
            architecture: arch.clone(),
            params,
            batch_norm: BatchNormState::fresh(arch),
            mode: Mode::Train,
        })
    }

    /// Assembles a model from explicit parameters, checking every slot shape.
    pub fn from_parts(
        arch: MlpArchitecture,
        params: Vec<(String, Matrix)>,
        batch_norm: BatchNormState,
        mode: Mode,
    ) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter slots, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, m)) in shapes.iter().zip(&params) {
            if name != pname || *shape != m.shape() {
                return Err(Error::shape(format!(
                    "slot {pname} {:?} does not match {name} {shape:?}",
                    m.shape()
                )));
            }
        }
        let widths: Vec<usize> = arch.hidden.iter().filter(|h| h.batch_norm).map(|h| h.width).collect();
        let ok = batch_norm.running_mean.len() == widths.len()
            && batch_norm.running_var.len() == widths.len()
            && widths
                .iter()
                .enumerate()
                .all(|(i, &w)| batch_norm.running_mean[i].len() == w && batch_norm.running_var[i].len() == w);
        if !ok {
            return Err(Error::shape("batch-norm statistics do not match the architecture"));
        }
        if batch_norm.running_var.iter().flatten().any(|&v| !(v > 0.0)) {
            return Err(Error::input("running variances must be positive"));
        }
        Ok(ClassifierModel {
            architecture: arch,
            params,
            batch_norm,
            mode,
        })
    }

    pub fn params(&self) -> &[(String, Matrix)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Matrix> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn params_mut(&mut self) -> &mut [(String, Matrix)] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.architecture.num_classes
    }

    pub fn eval(mut self) -> Self {
        self.mode = Mode::Eval;
        self
    }

    /// Frobenius norm of all parameters stacked together.
    pub fn parameter_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|(_, m)| m.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Puts every parameter on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(name, m)| {
                if trainable {
                    tape.param(name.clone(), m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect()
    }

    /// Records the forward pass on `tape`; `params` must come from
    /// [`ClassifierModel::register`].
    pub fn forward_tape(&self, tape: &mut Tape, input: Var, params: &[Var], stats: BnStats) -> Result<TapeForward> {
        let cols = tape.value(input).cols();
        if cols != self.architecture.input_dim {
            return Err(Error::shape(format!(
                "model expects {} input features, got {cols}",
                self.architecture.input_dim
            )));
        }
        let mut slot = params.iter().copied();
        let mut next = || slot.next().expect("parameter slots follow the architecture");
        let mut h = input;
        let mut bn_inputs = Vec::new();
        let mut bn_index = 0;
        for layer in &self.architecture.hidden {
            let (w, b) = (next(), next());
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            let z = if layer.batch_norm {
                let (gamma, beta) = (next(), next());
                bn_inputs.push(z);
                let normalized = match stats {
                    BnStats::Batch => tape.standardize(z, BN_EPS)?,
                    BnStats::Running => {
                        let mean = &self.batch_norm.running_mean[bn_index];
                        let var = &self.batch_norm.running_var[bn_index];
                        let neg_mean = tape.constant(Matrix::row_vector(&mean.iter().map(|m| -m).collect::<Vec<_>>()));
                        let inv = tape.constant(Matrix::row_vector(
                            &var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<_>>(),
                        ));
                        let shifted = tape.add_row(z, neg_mean)?;
                        tape.mul_row(shifted, inv)?
                    }
                };
                bn_index += 1;
                let scaled = tape.mul_row(normalized, gamma)?;
                tape.add_row(scaled, beta)?
            } else {
                z
            };
            h = match layer.activation {
                Activation::Tanh => tape.tanh(z),
                Activation::Relu => tape.relu(z),
            };
        }
        let features = h;
        let (w, b) = (next(), next());
        let logits = tape.matmul(h, w)?;
        let logits = tape.add_row(logits, b)?;
        Ok(TapeForward {
            logits,
            bn_inputs,
            features,
        })
    }

    fn check_input(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.architecture.input_dim {
            return Err(Error::shape(format!(
                "model expects {} input features, got {}",
                self.architecture.input_dim,
                inputs.cols()
            )));
        }
        Ok(())
    }

    /// Eval-mode logits: normalizes with running statistics and never mutates.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.predict_with_features(inputs)?.0)
    }

    /// Eval-mode logits and last-hidden-layer features.
    pub fn predict_with_features(&self, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_input(inputs)?;
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let out = self.forward_tape(&mut tape, x, &params, BnStats::Running)?;
        Ok((tape.value(out.logits).clone(), tape.value(out.features).clone()))
    }

    pub fn predict_proba(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(softmax_rows(&self.predict(inputs)?, 1.0))
    }

    /// Mode-dependent forward. In train mode batch-norm layers use batch
    /// statistics and the running statistics are updated with momentum.
    pub fn forward(&mut self, inputs: &Matrix) -> Result<Matrix> {
        match self.mode {
            Mode::Eval => self.predict(inputs),
            Mode::Train => {
                self.check_input(inputs)?;
                if self.architecture.num_batch_norm_layers() > 0 && inputs.rows() < 2 {
                    return Err(Error::DegenerateBatch(inputs.rows()));
                }
                let mut tape = Tape::new();
                let params = self.register(&mut tape, false);
                let x = tape.constant(inputs.clone());
                let out = self.forward_tape(&mut tape, x, &params, BnStats::Batch)?;
                let bn_values: Vec<Matrix> = out.bn_inputs.iter().map(|v| tape.value(*v).clone()).collect();
                self.update_running_stats(&bn_values);
                Ok(tape.value(out.logits).clone())
            }
        }
    }

    /// Momentum update of running statistics from batch-norm inputs of one
    /// batch (unbiased variance, as batch-norm implementations conventionally
    /// store).
    pub fn update_running_stats(&mut self, bn_inputs: &[Matrix]) {
        let m = self.batch_norm.momentum;
        for (l, z) in bn_inputs.iter().enumerate() {
            let n = z.rows() as f64;
            let mean = z.column_means();
            let var = z.column_variances();
            let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for (r, b) in self.batch_norm.running_mean[l].iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.batch_norm.running_var[l].iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * b * correction;
            }
        }
    }

    /// Fraction of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let logits = self.predict(&data.features)?;
        let correct = logits
            .iter_rows()
            .zip(&data.labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(correct as f64 / data.len().max(1) as f64)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
