//! End-to-end detection: build a probe set for a student, query every
//! candidate teacher on it through its forward pass only, score, and take the
//! arg-max. Also the pairwise HSIC route for binary verdicts.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::baselines::{hsic_test, mia_filter, mmd_fuse, ood_filter, MmdFuseConfig, TestResult};
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, Dataset};
use crate::numerics::{Matrix, RngStream};
use crate::scores::{
    accuracy, auc_one_vs_rest, predict_teacher, score_candidates, ScoreKind, ScoreMatrix, ScoreSettings,
};
use crate::synthesis::{
    build_input_set, noise_input_set, oracle_input_set, train_generator, Generator, GeneratorSpec, InputSet,
    InputSource, SynthesisConfig,
};

/// What detection may do with a candidate teacher: query it.
pub trait TeacherApi: Send + Sync {
    /// Logits for every input row.
    fn forward(&self, inputs: &Matrix) -> Result<Matrix>;
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
}

impl TeacherApi for ClassifierModel {
    fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        self.predict(inputs)
    }

    fn input_dim(&self) -> usize {
        ClassifierModel::input_dim(self)
    }

    fn num_classes(&self) -> usize {
        ClassifierModel::num_classes(self)
    }
}

/// Ordered, uniquely named candidate teachers.
pub struct CandidateSet<T: TeacherApi = ClassifierModel> {
    candidates: Vec<(String, T)>,
}

impl<T: TeacherApi> CandidateSet<T> {
    pub fn new(candidates: Vec<(String, T)>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::input("candidate set is empty"));
        }
        for (i, (id, _)) in candidates.iter().enumerate() {
            if candidates[..i].iter().any(|(other, _)| other == id) {
                return Err(Error::input(format!("duplicate candidate id {id:?}")));
            }
        }
        let (d, c) = (candidates[0].1.input_dim(), candidates[0].1.num_classes());
        if candidates
            .iter()
            .any(|(_, t)| t.input_dim() != d || t.num_classes() != c)
        {
            return Err(Error::shape("candidates disagree on input dimension or class count"));
        }
        Ok(CandidateSet { candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.candidates.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &T)> {
        self.candidates.iter().map(|(id, t)| (id.as_str(), t))
    }

    fn check_student(&self, student: &ClassifierModel) -> Result<()> {
        let t = &self.candidates[0].1;
        if t.input_dim() != student.input_dim() || t.num_classes() != student.num_classes() {
            return Err(Error::shape(format!(
                "student ({} inputs, {} classes) and candidates ({} inputs, {} classes) are incompatible",
                student.input_dim(),
                student.num_classes(),
                t.input_dim(),
                t.num_classes()
            )));
        }
        Ok(())
    }
}

/// Input filter applied to noise probes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseFilter {
    Mia,
    Ood { keep_fraction: f64 },
}

/// How candidates are scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scorer {
    Score {
        score_kind: ScoreKind,
    },
    /// The MMD-FUSE p-value: larger means the output distributions are
    /// harder to tell apart.
    MmdFuse {
        config: MmdFuseConfig,
    },
}

impl Scorer {
    pub fn score_kind(&self) -> ScoreKind {
        match self {
            Scorer::Score { score_kind } => *score_kind,
            Scorer::MmdFuse { .. } => ScoreKind::Custom,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectSettings {
    pub source: InputSource,
    /// Only honoured for the noise source.
    #[serde(default)]
    pub filter: Option<NoiseFilter>,
    pub n: usize,
    pub scorer: Scorer,
    #[serde(default)]
    pub scores: ScoreSettings,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    /// Generator architecture; derived from the student when absent.
    #[serde(default)]
    pub generator: Option<GeneratorSpec>,
}

impl DetectSettings {
    pub fn new(source: InputSource, n: usize, score_kind: ScoreKind) -> Self {
        DetectSettings {
            source,
            filter: None,
            n,
            scorer: Scorer::Score { score_kind },
            scores: ScoreSettings::default(),
            synthesis: SynthesisConfig::default(),
            generator: None,
        }
    }
}

/// Trained generators keyed by (student id, synthesis seed). Shared between
/// threads; training happens outside the lock.
#[derive(Debug, Default)]
pub struct GeneratorCache {
    inner: Mutex<HashMap<(String, u64), Arc<Generator>>>,
}

impl GeneratorCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_train(
        &self,
        student_id: &str,
        student: &ClassifierModel,
        spec: &GeneratorSpec,
        config: &SynthesisConfig,
    ) -> Result<Arc<Generator>> {
        let key = (student_id.to_string(), config.seed);
        if let Some(g) = self.inner.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(g));
        }
        let g = Arc::new(train_generator(student, spec, config)?);
        self.inner
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert_with(|| Arc::clone(&g));
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Resources a detection run may draw on besides the models.
#[derive(Debug, Default, Clone, Copy)]
pub struct DetectContext<'a> {
    /// Real data for the oracle source.
    pub oracle_data: Option<&'a Dataset>,
    pub cache: Option<&'a GeneratorCache>,
}

/// Result of [`detect`] for one student.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub prediction: usize,
    pub scores: Vec<f64>,
    pub inputs: InputSet,
}

/// Maximum rounds of noise drawing when a filter discards rows.
const MAX_FILTER_ROUNDS: u64 = 64;

/// Builds the probe set `𝒫` of `settings.n` rows for `student`.
pub fn construct_inputs(
    student_id: &str,
    student: &ClassifierModel,
    settings: &DetectSettings,
    ctx: &DetectContext<'_>,
    rng: &RngStream,
) -> Result<InputSet> {
    let n = settings.n;
    if n == 0 {
        return Err(Error::input("input size must be at least 1"));
    }
    match settings.source {
        InputSource::Synthetic => {
            let spec = settings
                .generator
                .clone()
                .unwrap_or_else(|| GeneratorSpec::for_student(student));
            let generator = match ctx.cache {
                Some(cache) => cache.get_or_train(student_id, student, &spec, &settings.synthesis)?,
                None => Arc::new(train_generator(student, &spec, &settings.synthesis)?),
            };
            build_input_set(&generator, n, &mut rng.split(0))
        }
        InputSource::Oracle => {
            let data = ctx
                .oracle_data
                .ok_or_else(|| Error::input("the oracle source needs real data"))?;
            oracle_input_set(data, n, &mut rng.split(0))
        }
        InputSource::Noise => match settings.filter {
            None => noise_input_set(n, student.input_dim(), &mut rng.split(0)),
            Some(filter) => filtered_noise(student, filter, n, rng),
        },
    }
}

/// Draws noise in rounds, filters each round, and keeps the first `n`
/// surviving rows.
fn filtered_noise(student: &ClassifierModel, filter: NoiseFilter, n: usize, rng: &RngStream) -> Result<InputSet> {
    let pool = match filter {
        NoiseFilter::Mia => (4 * n).max(8),
        NoiseFilter::Ood { keep_fraction } => ((n as f64 / keep_fraction).ceil() as usize).max(1),
    };
    let mut rows: Vec<f64> = Vec::with_capacity(n * student.input_dim());
    let mut count = 0;
    for round in 0..MAX_FILTER_ROUNDS {
        let mut draw_rng = rng.split(2 * round);
        let noise = noise_input_set(pool, student.input_dim(), &mut draw_rng)?;
        let kept = match filter {
            NoiseFilter::Mia => mia_filter(&noise, student, &mut rng.split(2 * round + 1))?,
            NoiseFilter::Ood { keep_fraction } => ood_filter(&noise, student, keep_fraction)?,
        };
        for r in kept.inputs.iter_rows().take(n - count) {
            rows.extend_from_slice(r);
            count += 1;
        }
        if count == n {
            return Ok(InputSet {
                inputs: Matrix::from_vec(n, student.input_dim(), rows)?,
                labels: vec![0; n],
                source: InputSource::Noise,
                seed: rng.seed(),
            });
        }
    }
    Err(Error::DegenerateSet(format!(
        "noise filter kept only {count} of {n} rows after {MAX_FILTER_ROUNDS} rounds"
    )))
}

/// Scores every candidate on `inputs` against the student's outputs.
pub fn score_on_inputs<T: TeacherApi>(
    student: &ClassifierModel,
    candidates: &CandidateSet<T>,
    inputs: &InputSet,
    settings: &DetectSettings,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    candidates.check_student(student)?;
    let student_out = student.predict(&inputs.inputs)?;
    let outputs: Vec<Matrix> = candidates
        .iter()
        .map(|(_, t)| t.forward(&inputs.inputs))
        .collect::<Result<_>>()?;
    match &settings.scorer {
        Scorer::Score { score_kind } => score_candidates(&student_out, &outputs, *score_kind, &settings.scores),
        Scorer::MmdFuse { config } => outputs
            .iter()
            .enumerate()
            .map(|(k, out)| Ok(mmd_fuse(&student_out, out, config, &mut rng.split(1000 + k as u64))?.p_value))
            .collect(),
    }
}

/// The detection algorithm for one student: probe, query, score, arg-max.
pub fn detect<T: TeacherApi>(
    student_id: &str,
    student: &ClassifierModel,
    candidates: &CandidateSet<T>,
    settings: &DetectSettings,
    ctx: &DetectContext<'_>,
    rng: &RngStream,
) -> Result<Detection> {
    candidates.check_student(student)?;
    let inputs = construct_inputs(student_id, student, settings, ctx, rng)?;
    let scores = score_on_inputs(student, candidates, &inputs, settings, rng)?;
    Ok(Detection {
        prediction: predict_teacher(&scores)?,
        scores,
        inputs,
    })
}

/// A student under audit, optionally with the index of its true teacher.
#[derive(Debug, Clone)]
pub struct StudentEntry {
    pub id: String,
    pub model: ClassifierModel,
    pub truth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub method: String,
    pub score_matrix: ScoreMatrix,
    pub predictions: Vec<usize>,
    pub truths: Option<Vec<usize>>,
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub input_size: usize,
    pub input_source: InputSource,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct ReportSummary<'a> {
    method: &'a str,
    score_kind: ScoreKind,
    input_source: InputSource,
    input_size: usize,
    seed: u64,
    accuracy: Option<f64>,
    auc: Option<f64>,
    students: &'a [String],
    candidates: &'a [String],
    predictions: &'a [usize],
    truths: Option<&'a [usize]>,
}

impl DetectionReport {
    /// Accuracy / AUC from a score matrix and optional truths.
    pub fn from_scores(
        method: impl Into<String>,
        score_matrix: ScoreMatrix,
        truths: Option<Vec<usize>>,
        input_size: usize,
        input_source: InputSource,
        seed: u64,
    ) -> Result<Self> {
        let predictions = score_matrix.predictions()?;
        let (acc, auc) = match &truths {
            Some(t) => {
                let acc = accuracy(&predictions, t)?;
                let auc = if score_matrix.candidate_ids.len() >= 2 {
                    Some(auc_one_vs_rest(&score_matrix, t)?)
                } else {
                    None
                };
                (Some(acc), auc)
            }
            None => (None, None),
        };
        Ok(DetectionReport {
            method: method.into(),
            score_matrix,
            predictions,
            truths,
            accuracy: acc,
            auc,
            input_size,
            input_source,
            seed,
        })
    }

    /// Score rows, `student,candidate,score_kind,score`.
    pub fn to_csv(&self) -> String {
        self.score_matrix.to_csv()
    }

    pub fn summary_json(&self) -> String {
        let summary = ReportSummary {
            method: &self.method,
            score_kind: self.score_matrix.score_kind,
            input_source: self.input_source,
            input_size: self.input_size,
            seed: self.seed,
            accuracy: self.accuracy,
            auc: self.auc,
            students: &self.score_matrix.student_ids,
            candidates: &self.score_matrix.candidate_ids,
            predictions: &self.predictions,
            truths: self.truths.as_deref(),
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }
}

/// Runs [`detect`] for every student (student `i` uses `rng.split(i)`) and
/// fills accuracy/AUC when every student has a known teacher.
pub fn run_matrix<T: TeacherApi>(
    method: &str,
    students: &[StudentEntry],
    candidates: &CandidateSet<T>,
    settings: &DetectSettings,
    ctx: &DetectContext<'_>,
    rng: &RngStream,
) -> Result<DetectionReport> {
    if students.is_empty() {
        return Err(Error::input("no students to audit"));
    }
    let mut values = Matrix::zeros(students.len(), candidates.len());
    for (i, s) in students.iter().enumerate() {
        let d = detect(&s.id, &s.model, candidates, settings, ctx, &rng.split(i as u64))?;
        values.row_mut(i).copy_from_slice(&d.scores);
    }
    let matrix = ScoreMatrix::new(
        values,
        students.iter().map(|s| s.id.clone()).collect(),
        candidates.ids(),
        settings.scorer.score_kind(),
    )?;
    let truths: Option<Vec<usize>> = students.iter().map(|s| s.truth).collect();
    DetectionReport::from_scores(method, matrix, truths, settings.n, settings.source, rng.seed())
}

/// Binary verdict for one (student, candidate) pair: HSIC test between their
/// outputs on `inputs`, distilled iff `p < alpha`.
pub fn pairwise_detect<T: TeacherApi + ?Sized>(
    student: &ClassifierModel,
    candidate: &T,
    inputs: &InputSet,
    alpha: f64,
    permutations: usize,
    rng: &mut RngStream,
) -> Result<TestResult> {
    if candidate.input_dim() != student.input_dim() || inputs.inputs.cols() != student.input_dim() {
        return Err(Error::shape(
            "student, candidate and inputs disagree on the input dimension",
        ));
    }
    let s = student.predict(&inputs.inputs)?;
    let t = candidate.forward(&inputs.inputs)?;
    Ok(hsic_test(&s, &t, permutations, rng)?.with_alpha(alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{make_gaussian_mixture, train_classifier, MlpArchitecture, TrainConfig};

    fn model(seed: u64) -> ClassifierModel {
        let data = make_gaussian_mixture(3, 30, 4, 0.6, &mut RngStream::new(9)).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        };
        train_classifier(&MlpArchitecture::relu_64(4, 3), &data, &cfg)
            .unwrap()
            .0
    }

    fn quick(source: InputSource, kind: ScoreKind) -> DetectSettings {
        let mut s = DetectSettings::new(source, 12, kind);
        s.synthesis.epochs = 10;
        s.synthesis.batch_size = 16;
        s
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = model(1);
        assert!(CandidateSet::new(vec![("a".into(), m.clone()), ("a".into(), m)]).is_err());
        assert!(CandidateSet::<ClassifierModel>::new(vec![]).is_err());
    }

    #[test]
    fn single_candidate_is_returned() {
        let set = CandidateSet::new(vec![("only".into(), model(2))]).unwrap();
        let d = detect(
            "s",
            &model(3),
            &set,
            &quick(InputSource::Noise, ScoreKind::PointKl),
            &DetectContext::default(),
            &RngStream::new(0),
        )
        .unwrap();
        assert_eq!(d.prediction, 0);
        assert_eq!(d.scores.len(), 1);
    }

    #[test]
    fn incompatible_student_is_a_shape_error() {
        let set = CandidateSet::new(vec![("a".into(), model(2))]).unwrap();
        let other = ClassifierModel::init(&MlpArchitecture::relu_64(5, 3), &mut RngStream::new(0))
            .unwrap()
            .eval();
        let r = detect(
            "s",
            &other,
            &set,
            &quick(InputSource::Noise, ScoreKind::PointKl),
            &DetectContext::default(),
            &RngStream::new(0),
        );
        assert!(matches!(r, Err(Error::InvalidShape(_))));
    }

    #[test]
    fn filtered_noise_has_requested_size() {
        let s = model(4);
        for filter in [NoiseFilter::Mia, NoiseFilter::Ood { keep_fraction: 0.5 }] {
            let mut settings = quick(InputSource::Noise, ScoreKind::PointKl);
            settings.filter = Some(filter);
            let set = construct_inputs("s", &s, &settings, &DetectContext::default(), &RngStream::new(1)).unwrap();
            assert_eq!(set.len(), 12);
            assert_eq!(set.source, InputSource::Noise);
        }
    }

    #[test]
    fn cache_trains_once_per_student_and_seed() {
        let s = model(5);
        let cache = GeneratorCache::new();
        let ctx = DetectContext {
            oracle_data: None,
            cache: Some(&cache),
        };
        let set = CandidateSet::new(vec![("a".into(), model(6)), ("b".into(), s.clone())]).unwrap();
        let settings = quick(InputSource::Synthetic, ScoreKind::PointKl);
        let a = detect("s", &s, &set, &settings, &ctx, &RngStream::new(3)).unwrap();
        let b = detect("s", &s, &set, &settings, &ctx, &RngStream::new(3)).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(a, b);
        let uncached = detect("s", &s, &set, &settings, &DetectContext::default(), &RngStream::new(3)).unwrap();
        assert_eq!(a, uncached);
        assert_eq!(a.prediction, 1);
    }

    #[test]
    fn report_metrics_and_degenerate_scores() {
        let m = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let sm = ScoreMatrix::new(
            m,
            vec!["s0".into(), "s1".into()],
            vec!["a".into(), "b".into(), "c".into()],
            ScoreKind::PointKl,
        )
        .unwrap();
        let r = DetectionReport::from_scores("x", sm, Some(vec![0, 1]), 5, InputSource::Synthetic, 0).unwrap();
        assert_eq!((r.accuracy, r.auc), (Some(1.0), Some(1.0)));
        let flat = ScoreMatrix::new(
            Matrix::filled(3, 3, 0.2),
            vec!["s0".into(), "s1".into(), "s2".into()],
            vec!["a".into(), "b".into(), "c".into()],
            ScoreKind::Acs,
        )
        .unwrap();
        let r = DetectionReport::from_scores("x", flat, Some(vec![0, 2, 1]), 5, InputSource::Noise, 0).unwrap();
        assert_eq!(r.auc, Some(0.5));
        assert!((r.accuracy.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let v: serde_json::Value = serde_json::from_str(&r.summary_json()).unwrap();
        assert_eq!(v["input_source"], "noise");
    }
}
