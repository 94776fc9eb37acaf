//! Experiment configuration: a versioned JSON document whose defaults are the
//! desk benchmark (3 teachers on a 4-class Gaussian mixture, 3 student
//! architectures, 9 students per seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ddetect::baselines::{MmdFuseConfig, DEFAULT_ALPHA, DEFAULT_KEEP_FRACTION};
use ddetect::distill::DistillConfig;
use ddetect::models::{Activation, HiddenLayer, MlpArchitecture, TrainConfig};
use ddetect::pipeline::{NoiseFilter, Scorer};
use ddetect::scores::{BandwidthPolicy, ScoreKind, ScoreSettings};
use ddetect::synthesis::{InputSource, SynthesisConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    pub spread: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 4,
            train_per_class: 150,
            test_per_class: 100,
            dim: 8,
            spread: 0.5,
        }
    }
}

/// One detection method: an input source (optionally filtered) and a scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub source: InputSource,
    #[serde(default)]
    pub filter: Option<NoiseFilter>,
    pub scorer: Scorer,
}

impl MethodSpec {
    fn new(name: &str, source: InputSource, filter: Option<NoiseFilter>, scorer: Scorer) -> Self {
        MethodSpec {
            name: name.into(),
            source,
            filter,
            scorer,
        }
    }

    /// Set-level scores need at least two probe rows.
    pub fn supports(&self, n: usize) -> bool {
        match &self.scorer {
            Scorer::Score {
                score_kind: ScoreKind::PointKl | ScoreKind::PointL2,
            } => n >= 1,
            _ => n >= 2,
        }
    }
}

fn score(kind: ScoreKind) -> Scorer {
    Scorer::Score { score_kind: kind }
}

/// The method table of the benchmark: oracle, the filtered-noise baselines
/// with KL / CKA / MMD-FUSE scoring, and the synthetic-input methods.
pub fn default_methods() -> Vec<MethodSpec> {
    let mia = Some(NoiseFilter::Mia);
    let ood = Some(NoiseFilter::Ood {
        keep_fraction: DEFAULT_KEEP_FRACTION,
    });
    let mmd = Scorer::MmdFuse {
        config: MmdFuseConfig {
            permutations: 200,
            ..MmdFuseConfig::default()
        },
    };
    vec![
        MethodSpec::new("Oracle", InputSource::Oracle, None, score(ScoreKind::PointKl)),
        MethodSpec::new("MIA Filter + KL", InputSource::Noise, mia, score(ScoreKind::PointKl)),
        MethodSpec::new("OOD Filter + KL", InputSource::Noise, ood, score(ScoreKind::PointKl)),
        MethodSpec::new("MIA Filter + CKA", InputSource::Noise, mia, score(ScoreKind::Cka)),
        MethodSpec::new("OOD Filter + CKA", InputSource::Noise, ood, score(ScoreKind::Cka)),
        MethodSpec::new("MIA Filter + MMD", InputSource::Noise, mia, mmd.clone()),
        MethodSpec::new("OOD Filter + MMD", InputSource::Noise, ood, mmd),
        MethodSpec::new("Ours (KL)", InputSource::Synthetic, None, score(ScoreKind::PointKl)),
        MethodSpec::new("Ours (ACS)", InputSource::Synthetic, None, score(ScoreKind::Acs)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSweepSpec {
    pub lambdas: Vec<f64>,
}

impl Default for LambdaSweepSpec {
    fn default() -> Self {
        LambdaSweepSpec {
            lambdas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

/// Settings of the pairwise (binary verdict) protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseSpec {
    pub source: InputSource,
    pub n: usize,
    pub permutations: usize,
    pub alpha: f64,
}

impl Default for PairwiseSpec {
    fn default() -> Self {
        PairwiseSpec {
            source: InputSource::Synthetic,
            n: 100,
            permutations: 200,
            alpha: DEFAULT_ALPHA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetSpec,
    /// Named hidden-layer stacks referenced by `teachers` and `students`.
    pub architectures: BTreeMap<String, Vec<HiddenLayer>>,
    pub teachers: Vec<String>,
    pub students: Vec<String>,
    /// Supervised training of teachers and independent reference models.
    pub training: TrainConfig,
    pub distillation: DistillConfig,
    pub synthesis: SynthesisConfig,
    pub scores: ScoreSettings,
    pub methods: Vec<MethodSpec>,
    pub n_values: Vec<usize>,
    pub seeds: Vec<u64>,
    pub lambda_sweep: LambdaSweepSpec,
    pub pairwise: PairwiseSpec,
    pub output_dir: Option<PathBuf>,
}

fn layer(width: usize, activation: Activation) -> HiddenLayer {
    HiddenLayer::new(width, activation)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut architectures = BTreeMap::new();
        architectures.insert(
            "tanh_32_32".to_string(),
            vec![layer(32, Activation::Tanh), layer(32, Activation::Tanh)],
        );
        architectures.insert("relu_64".to_string(), vec![layer(64, Activation::Relu)]);
        architectures.insert(
            "relu_128_64".to_string(),
            vec![layer(128, Activation::Relu), layer(64, Activation::Relu)],
        );
        let names: Vec<String> = architectures.keys().cloned().collect();
        let training = TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            format_version: CONFIG_VERSION,
            dataset: DatasetSpec::default(),
            architectures,
            teachers: names.clone(),
            students: names,
            training: training.clone(),
            distillation: DistillConfig {
                train: training,
                ..DistillConfig::default()
            },
            synthesis: SynthesisConfig::default(),
            scores: ScoreSettings::default(),
            methods: default_methods(),
            n_values: vec![1, 5, 10, 50, 100],
            seeds: (0..5).collect(),
            lambda_sweep: LambdaSweepSpec::default(),
            pairwise: PairwiseSpec::default(),
            output_dir: None,
        }
    }
}

fn config_error(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| config_error("$", format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("$", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn architecture(&self, name: &str) -> Result<MlpArchitecture> {
        let hidden = self
            .architectures
            .get(name)
            .ok_or_else(|| config_error("architectures", format!("architecture {name:?} is not defined")))?;
        MlpArchitecture::new(self.dataset.dim, hidden.clone(), self.dataset.classes)
            .map_err(|e| config_error(&format!("architectures.{name}"), e.to_string()))
    }

    /// Checks every field that cannot be caught by deserialization; errors
    /// carry a JSON-path-like location.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(config_error(
                "format_version",
                format!("expected {CONFIG_VERSION}, got {}", self.format_version),
            ));
        }
        let d = &self.dataset;
        if d.classes < 2 {
            return Err(config_error("dataset.classes", "need at least two classes"));
        }
        if d.dim == 0 {
            return Err(config_error("dataset.dim", "must be positive"));
        }
        if d.train_per_class == 0 || d.test_per_class == 0 {
            return Err(config_error("dataset", "per-class counts must be positive"));
        }
        if !(d.spread >= 0.0 && d.spread.is_finite()) {
            return Err(config_error("dataset.spread", "must be finite and nonnegative"));
        }
        for (i, name) in self.teachers.iter().enumerate() {
            if !self.architectures.contains_key(name) {
                return Err(config_error(
                    &format!("teachers[{i}]"),
                    format!("architecture {name:?} is not defined"),
                ));
            }
        }
        for (i, name) in self.students.iter().enumerate() {
            if !self.architectures.contains_key(name) {
                return Err(config_error(
                    &format!("students[{i}]"),
                    format!("architecture {name:?} is not defined"),
                ));
            }
        }
        for name in self.architectures.keys() {
            self.architecture(name)?;
        }
        if self.teachers.is_empty() {
            return Err(config_error("teachers", "at least one teacher is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        if self.n_values.contains(&0) {
            return Err(config_error("n_values", "input sizes must be positive"));
        }
        let oracle_rows = d.train_per_class * d.classes;
        if let Some(&n) = self.n_values.iter().find(|&&n| n > oracle_rows) {
            return Err(config_error(
                "n_values",
                format!("{n} exceeds the {oracle_rows} training rows"),
            ));
        }
        self.training
            .validate(true)
            .map_err(|e| config_error("training", e.to_string()))?;
        self.distillation
            .validate()
            .map_err(|e| config_error("distillation", e.to_string()))?;
        self.synthesis
            .validate()
            .map_err(|e| config_error("synthesis", e.to_string()))?;
        if let BandwidthPolicy::Fixed { fixed_value } = self.scores.bandwidth {
            if !(fixed_value > 0.0 && fixed_value.is_finite()) {
                return Err(config_error(
                    "scores.bandwidth.fixed_value",
                    "must be positive and finite",
                ));
            }
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Scorer::MmdFuse { config } = &m.scorer {
                config
                    .validate()
                    .map_err(|e| config_error(&format!("methods[{i}].scorer"), e.to_string()))?;
            }
            if let Some(NoiseFilter::Ood { keep_fraction }) = m.filter {
                if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
                    return Err(config_error(
                        &format!("methods[{i}].filter.keep_fraction"),
                        "must lie in (0, 1]",
                    ));
                }
            }
            if m.filter.is_some() && m.source != InputSource::Noise {
                return Err(config_error(
                    &format!("methods[{i}].filter"),
                    "filters apply to the noise source only",
                ));
            }
        }
        if self.lambda_sweep.lambdas.is_empty() {
            return Err(config_error("lambda_sweep.lambdas", "the grid must not be empty"));
        }
        if let Some(i) = self.lambda_sweep.lambdas.iter().position(|l| !(0.0..=1.0).contains(l)) {
            return Err(config_error(
                &format!("lambda_sweep.lambdas[{i}]"),
                "must lie in [0, 1]",
            ));
        }
        if self.pairwise.n < 4 || self.pairwise.permutations == 0 {
            return Err(config_error("pairwise", "needs n >= 4 and at least one permutation"));
        }
        if !(self.pairwise.alpha > 0.0 && self.pairwise.alpha < 1.0) {
            return Err(config_error("pairwise.alpha", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.teachers.len() * c.students.len(), 9);
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = ExperimentConfig::default();
        c.students.push("nope".into());
        match c.validate() {
            Err(HarnessError::Config { path, .. }) => assert_eq!(path, "students[3]"),
            other => panic!("{other:?}"),
        }
        let err = ExperimentConfig::from_json(r#"{"format_version": 2}"#).unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref path, .. } if path == "format_version"));
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let err = ExperimentConfig::from_json(
            r#"{"format_version": 1, "scores": {"bandwidth": {"kind": "fixed", "fixed_value": 0.0}}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::Config { ref path, .. } if path == "scores.bandwidth.fixed_value"));
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = ExperimentConfig::from_json(r#"{"format_version": 1, "seeds": [7]}"#).unwrap();
        assert_eq!(c.seeds, vec![7]);
        assert_eq!(c.methods.len(), 9);
    }
}
