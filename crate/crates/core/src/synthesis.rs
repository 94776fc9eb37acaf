//! Data-free probe construction. A label-conditioned generator is fitted
//! against a frozen student so that its samples are confidently classified
//! and reproduce the student's stored batch-norm statistics; random noise and
//! real-data ("oracle") sources are provided for the baselines.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{BnStats, ClassifierModel, Dataset};
use crate::numerics::io::{read_binary, read_csv, to_binary, to_csv_string};
use crate::numerics::special::one_hot;
use crate::numerics::{Matrix, RngStream, Tape, Var};

/// Added to generated-batch variances before the square root on the tape;
/// keeps the gradient of the standard deviation bounded.
pub const BNS_STD_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub embed_dim: usize,
    /// Widths of the tanh body layers.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub num_classes: usize,
}

impl GeneratorSpec {
    /// Default desk-scale generator for `student`: 16-d latents, a 32-d
    /// embedding and two 64-wide tanh layers.
    pub fn for_student(student: &ClassifierModel) -> Self {
        GeneratorSpec {
            latent_dim: 16,
            embed_dim: 32,
            hidden: vec![64, 64],
            output_dim: student.input_dim(),
            num_classes: student.num_classes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.embed_dim == 0 || self.output_dim == 0 {
            return Err(Error::input("generator dimensions must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::input("generator needs at least two classes"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::input("hidden widths must be positive"));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = vec![
            (
                "encoder.weight".to_string(),
                (self.latent_dim + self.num_classes, self.embed_dim),
            ),
            ("encoder.bias".to_string(), (1, self.embed_dim)),
        ];
        let mut width = self.embed_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            out.push((format!("body{i}.weight"), (width, h)));
            out.push((format!("body{i}.bias"), (1, h)));
            width = h;
        }
        out.push(("output.weight".to_string(), (width, self.output_dim)));
        out.push(("output.bias".to_string(), (1, self.output_dim)));
        out
    }
}

/// `G(e(z, y))`: a linear encoder on `concat(z, onehot(y))` followed by tanh
/// body layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: GeneratorSpec,
    params: Vec<(String, Matrix)>,
}

impl Generator {
    pub fn init(spec: &GeneratorSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let m = if name.ends_with(".weight") {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    Matrix::from_fn(r, c, |_, _| rng.uniform_range(-limit, limit))
                } else {
                    Matrix::zeros(r, c)
                };
                (name, m)
            })
            .collect();
        Ok(Generator {
            spec: spec.clone(),
            params,
        })
    }

    pub fn params(&self) -> &[(String, Matrix)] {
        &self.params
    }

    /// The `C x embed_dim` block of the encoder weight acting on the one-hot
    /// label.
    pub fn label_embedding(&self) -> Matrix {
        let w = &self.params[0].1;
        let rows: Vec<usize> = (self.spec.latent_dim..w.rows()).collect();
        w.select_rows(&rows)
    }

    fn encoder_input(&self, z: &Matrix, targets: &Matrix) -> Result<Matrix> {
        if z.cols() != self.spec.latent_dim {
            return Err(Error::shape(format!(
                "latents have {} columns, generator expects {}",
                z.cols(),
                self.spec.latent_dim
            )));
        }
        z.hcat(targets)
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if let Some(&y) = labels.iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::input(format!("class {y} out of range")));
        }
        Ok(())
    }

    /// Encoder output `e(z, y)` per row.
    pub fn encode(&self, z: &Matrix, labels: &[usize]) -> Result<Matrix> {
        if labels.len() != z.rows() {
            return Err(Error::input("one label per latent row is required"));
        }
        self.check_labels(labels)?;
        let input = self.encoder_input(z, &one_hot(labels, self.spec.num_classes))?;
        input.matmul(&self.params[0].1)?.add_row(self.params[1].1.as_slice())
    }

    /// Body and output layers applied to encoder outputs.
    pub fn decode(&self, embedded: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, m)| tape.constant(m.clone())).collect();
        let e = tape.constant(embedded.clone());
        let out = self.decode_tape(&mut tape, e, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// Conditional generation `G(e(z_i, y_i))` for every row.
    pub fn generate(&self, z: &Matrix, labels: &[usize]) -> Result<Matrix> {
        self.decode(&self.encode(z, labels)?)
    }

    fn decode_tape(&self, tape: &mut Tape, embedded: Var, vars: &[Var]) -> Result<Var> {
        let mut h = embedded;
        for layer in vars[2..].chunks(2).take(self.spec.hidden.len()) {
            let z = tape.matmul(h, layer[0])?;
            let z = tape.add_row(z, layer[1])?;
            h = tape.tanh(z);
        }
        let n = vars.len();
        let out = tape.matmul(h, vars[n - 2])?;
        tape.add_row(out, vars[n - 1])
    }

    /// Full generator on a tape from encoder inputs `concat(z, target)`.
    fn forward_tape(&self, tape: &mut Tape, encoder_input: Var, vars: &[Var]) -> Result<Var> {
        let e = tape.matmul(encoder_input, vars[0])?;
        let e = tape.add_row(e, vars[1])?;
        self.decode_tape(tape, e, vars)
    }
}

/// `G(Σ w_i e(z_i, y_i))` for one mixed sample.
pub fn mixed_latent(z_list: &[Vec<f64>], y_list: &[usize], weights: &[f64], generator: &Generator) -> Result<Vec<f64>> {
    if z_list.is_empty() || z_list.len() != y_list.len() || z_list.len() != weights.len() {
        return Err(Error::input(format!(
            "mixup needs equally many latents ({}), labels ({}) and weights ({})",
            z_list.len(),
            y_list.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::input("mixup weights must lie on the simplex"));
    }
    let latent = generator.spec.latent_dim;
    if z_list.iter().any(|z| z.len() != latent) {
        return Err(Error::input(format!("every latent must have {latent} entries")));
    }
    let flat: Vec<f64> = z_list.iter().flatten().copied().collect();
    let encoded = generator.encode(&Matrix::from_vec(z_list.len(), latent, flat)?, y_list)?;
    let mut mixed = vec![0.0; generator.spec.embed_dim];
    for (row, w) in encoded.iter_rows().zip(weights) {
        for (m, e) in mixed.iter_mut().zip(row) {
            *m += w * e;
        }
    }
    Ok(generator.decode(&Matrix::row_vector(&mixed))?.into_vec())
}

/// Per-feature mean and standard deviation of one batch-norm layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStatistics {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `Σ_l ‖μ_l^batch − μ_l‖² + ‖σ_l^batch − σ_l‖²` against the student's
/// running statistics, `σ_l` being the square root of the running variance.
pub fn bns_loss(student: &ClassifierModel, batch: &[LayerStatistics]) -> Result<f64> {
    let layers = student.batch_norm.running_mean.len();
    if layers == 0 {
        return Err(Error::NoStatisticsAvailable);
    }
    if batch.len() != layers {
        return Err(Error::shape(format!(
            "{} layer statistics for {layers} batch-norm layers",
            batch.len()
        )));
    }
    let running_std = student.batch_norm.running_std();
    let mut total = 0.0;
    for ((stats, mu), sigma) in batch.iter().zip(&student.batch_norm.running_mean).zip(&running_std) {
        if stats.mean.len() != mu.len() || stats.std.len() != sigma.len() {
            return Err(Error::shape("layer statistics width does not match the student"));
        }
        total += stats.mean.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        total += stats.std.iter().zip(sigma).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Biased (1/N) statistics of every batch-norm input when `inputs` passes
/// through the eval-mode student.
pub fn batch_statistics(student: &ClassifierModel, inputs: &Matrix) -> Result<Vec<LayerStatistics>> {
    let mut tape = Tape::new();
    let params = student.register(&mut tape, false);
    let x = tape.constant(inputs.clone());
    let fwd = student.forward_tape(&mut tape, x, &params, BnStats::Running)?;
    Ok(fwd
        .bn_inputs
        .iter()
        .map(|v| {
            let z = tape.value(*v);
            LayerStatistics {
                mean: z.column_means(),
                std: z.column_variances().into_iter().map(f64::sqrt).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub mixup_probability: f64,
    pub mix_count: usize,
    /// One epoch is one gradient step on a freshly sampled batch.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bns_weight: f64,
    /// Global gradient-norm cap per step; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            mixup_probability: 0.4,
            mix_count: 2,
            epochs: 400,
            batch_size: 64,
            learning_rate: 1e-2,
            bns_weight: 1.0,
            max_grad_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mixup_probability) {
            return Err(Error::input("mixup_probability must lie in [0, 1]"));
        }
        if self.mix_count == 0 {
            return Err(Error::input("mix_count must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::input("batch_size must be at least 2 for batch statistics"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::input("learning_rate must be positive"));
        }
        if !(self.bns_weight >= 0.0) {
            return Err(Error::input("bns_weight must be non-negative"));
        }
        if matches!(self.max_grad_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::input("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

/// Per-step objective values recorded by [`train_generator_with_history`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SynthesisHistory {
    pub hard_losses: Vec<f64>,
    pub bns_losses: Vec<f64>,
}

/// Samples one training batch: encoder inputs `concat(Σ w z, Σ w onehot(y))`
/// and the matching soft targets. With a linear encoder this is exactly the
/// convex combination of encodings.
fn training_batch(spec: &GeneratorSpec, config: &SynthesisConfig, rng: &mut RngStream) -> Result<(Matrix, Matrix)> {
    let mix = rng.bernoulli(config.mixup_probability);
    let k = if mix { config.mix_count } else { 1 };
    let (n, c, d) = (config.batch_size, spec.num_classes, spec.latent_dim);
    let mut z = Matrix::zeros(n, d);
    let mut targets = Matrix::zeros(n, c);
    for i in 0..n {
        let weights = rng.dirichlet(1.0, k)?;
        for w in weights {
            let y = rng.below(c);
            targets[(i, y)] += w;
            for j in 0..d {
                z[(i, j)] += w * rng.normal();
            }
        }
    }
    Ok((z.hcat(&targets)?, targets))
}

fn check_pair(student: &ClassifierModel, spec: &GeneratorSpec) -> Result<()> {
    if spec.output_dim != student.input_dim() {
        return Err(Error::shape(format!(
            "generator emits {} features, student expects {}",
            spec.output_dim,
            student.input_dim()
        )));
    }
    if spec.num_classes != student.num_classes() {
        return Err(Error::shape(format!(
            "generator has {} classes, student {}",
            spec.num_classes,
            student.num_classes()
        )));
    }
    Ok(())
}

pub fn train_generator(student: &ClassifierModel, spec: &GeneratorSpec, config: &SynthesisConfig) -> Result<Generator> {
    Ok(train_generator_with_history(student, spec, config)?.0)
}

/// Fits a generator by plain gradient descent on
/// `Σ w_i CE(student(x̂), y_i) + bns_weight · L_BNS`. The student is only read:
/// it runs in eval mode on its running statistics while the batch statistics
/// of the generated samples feed the BNS term.
pub fn train_generator_with_history(
    student: &ClassifierModel,
    spec: &GeneratorSpec,
    config: &SynthesisConfig,
) -> Result<(Generator, SynthesisHistory)> {
    spec.validate()?;
    config.validate()?;
    check_pair(student, spec)?;
    let root = RngStream::new(config.seed);
    let mut generator = Generator::init(spec, &mut root.split(0))?;
    let mut rng = root.split(1);
    let mut history = SynthesisHistory::default();
    let layers = student.batch_norm.running_mean.len();
    if layers == 0 && config.epochs > 0 {
        log::warn!("student has no batch-norm layers; synthesizing with the confidence loss only");
    }
    let running_mean: Vec<Matrix> = student
        .batch_norm
        .running_mean
        .iter()
        .map(|m| Matrix::row_vector(m))
        .collect();
    let running_std: Vec<Matrix> = student
        .batch_norm
        .running_std()
        .iter()
        .map(|s| Matrix::row_vector(s))
        .collect();

    for _ in 0..config.epochs {
        let (input, targets) = training_batch(spec, config, &mut rng)?;
        let mut tape = Tape::new();
        let gvars: Vec<Var> = generator
            .params
            .iter()
            .map(|(name, m)| tape.param(name.clone(), m.clone()))
            .collect();
        let svars = student.register(&mut tape, false);
        let enc = tape.constant(input);
        let x = generator.forward_tape(&mut tape, enc, &gvars)?;
        let fwd = student.forward_tape(&mut tape, x, &svars, BnStats::Running)?;
        let hard = tape.cross_entropy(fwd.logits, targets)?;
        history.hard_losses.push(tape.scalar(hard));
        let mut loss = hard;
        if layers > 0 {
            let mut terms = Vec::with_capacity(2 * layers);
            for (l, z) in fwd.bn_inputs.iter().enumerate() {
                let mean = tape.col_mean(*z);
                let var = tape.col_var(*z);
                let var = tape.offset(var, BNS_STD_EPS);
                let std = tape.sqrt(var)?;
                let target_mean = tape.constant(running_mean[l].clone());
                let target_std = tape.constant(running_std[l].clone());
                let dm = tape.sub(mean, target_mean)?;
                let ds = tape.sub(std, target_std)?;
                terms.push(tape.sum_squares(dm));
                terms.push(tape.sum_squares(ds));
            }
            let mut bns = terms[0];
            for t in &terms[1..] {
                bns = tape.add(bns, *t)?;
            }
            history.bns_losses.push(tape.scalar(bns));
            let weighted = tape.scale(bns, config.bns_weight);
            loss = tape.add(loss, weighted)?;
        }
        if !tape.scalar(loss).is_finite() {
            return Err(Error::input("generator loss diverged"));
        }
        let grads = tape.backward(loss)?;
        let norm = gvars
            .iter()
            .filter_map(|v| grads.get(*v))
            .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let step = match config.max_grad_norm {
            Some(cap) if norm > cap => config.learning_rate * cap / norm,
            _ => config.learning_rate,
        };
        for ((_, p), v) in generator.params.iter_mut().zip(&gvars) {
            if let Some(g) = grads.get(*v) {
                for (a, b) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a -= step * b;
                }
            }
        }
    }
    Ok((generator, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputSource {
    Synthetic,
    Noise,
    Oracle,
}

impl std::fmt::Display for InputSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputSource::Synthetic => "synthetic",
            InputSource::Noise => "noise",
            InputSource::Oracle => "oracle",
        })
    }
}

impl std::str::FromStr for InputSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(InputSource::Synthetic),
            "noise" => Ok(InputSource::Noise),
            "oracle" => Ok(InputSource::Oracle),
            other => Err(Error::input(format!("unknown input source {other:?}"))),
        }
    }
}

/// The probe set: inputs, the class each row was built for, and where it
/// came from. Noise rows carry class 0.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub source: InputSource,
    pub seed: u64,
}

impl InputSet {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

/// `n` class-conditional samples without mixup, labels cycling over classes.
pub fn build_input_set(generator: &Generator, n: usize, rng: &mut RngStream) -> Result<InputSet> {
    if n == 0 {
        return Err(Error::input("input set size must be at least 1"));
    }
    let seed = rng.seed();
    let labels: Vec<usize> = (0..n).map(|i| i % generator.spec.num_classes).collect();
    let z = Matrix::from_fn(n, generator.spec.latent_dim, |_, _| rng.normal());
    Ok(InputSet {
        inputs: generator.generate(&z, &labels)?,
        labels,
        source: InputSource::Synthetic,
        seed,
    })
}

/// `n` rows of i.i.d. standard Gaussian noise.
pub fn noise_input_set(n: usize, input_dim: usize, rng: &mut RngStream) -> Result<InputSet> {
    if n == 0 || input_dim == 0 {
        return Err(Error::input("noise set needs n >= 1 and a positive dimension"));
    }
    let seed = rng.seed();
    Ok(InputSet {
        inputs: Matrix::from_fn(n, input_dim, |_, _| rng.normal()),
        labels: vec![0; n],
        source: InputSource::Noise,
        seed,
    })
}

/// `n` real rows drawn without replacement.
pub fn oracle_input_set(data: &Dataset, n: usize, rng: &mut RngStream) -> Result<InputSet> {
    if n == 0 || n > data.len() {
        return Err(Error::input(format!(
            "cannot draw {n} rows from {} available",
            data.len()
        )));
    }
    let seed = rng.seed();
    let mut order = rng.permutation(data.len());
    order.truncate(n);
    Ok(InputSet {
        inputs: data.features.select_rows(&order),
        labels: order.iter().map(|&i| data.labels[i]).collect(),
        source: InputSource::Oracle,
        seed,
    })
}

pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    rows: usize,
    cols: usize,
    labels: Vec<usize>,
    source: InputSource,
    seed: u64,
}

/// `probe.csv` → `probe.json`.
pub fn sidecar_path(matrix_path: &Path) -> PathBuf {
    matrix_path.with_extension("json")
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Writes the inputs (CSV for a `.csv` path, DDMX binary otherwise) and a
/// JSON sidecar next to them.
pub fn save_input_set(set: &InputSet, matrix_path: &Path) -> Result<()> {
    if matrix_path.extension().is_some_and(|e| e == "json") {
        return Err(Error::input(
            "matrix path must not end in .json; that name is the sidecar",
        ));
    }
    let bytes = if is_csv(matrix_path) {
        to_csv_string(&set.inputs).into_bytes()
    } else {
        to_binary(&set.inputs)
    };
    fs::write(matrix_path, bytes)?;
    let sidecar = Sidecar {
        format_version: SIDECAR_VERSION,
        rows: set.inputs.rows(),
        cols: set.inputs.cols(),
        labels: set.labels.clone(),
        source: set.source,
        seed: set.seed,
    };
    fs::write(
        sidecar_path(matrix_path),
        serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes"),
    )?;
    Ok(())
}

pub fn load_input_set(matrix_path: &Path) -> Result<InputSet> {
    let inputs = if is_csv(matrix_path) {
        read_csv(&fs::read_to_string(matrix_path)?)?
    } else {
        read_binary(fs::File::open(matrix_path)?)?
    };
    let text = fs::read(sidecar_path(matrix_path))?;
    let sidecar: Sidecar =
        serde_json::from_slice(&text).map_err(|e| Error::format(e.column() as u64, format!("bad sidecar: {e}")))?;
    if sidecar.format_version != SIDECAR_VERSION {
        return Err(Error::format(
            0,
            format!("sidecar version {} is not supported", sidecar.format_version),
        ));
    }
    if (sidecar.rows, sidecar.cols) != inputs.shape() || sidecar.labels.len() != inputs.rows() {
        return Err(Error::format(0, "sidecar does not describe the matrix"));
    }
    Ok(InputSet {
        inputs,
        labels: sidecar.labels,
        source: sidecar.source,
        seed: sidecar.seed,
    })
}
