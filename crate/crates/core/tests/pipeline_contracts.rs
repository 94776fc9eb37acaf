//! Detection only queries candidates through `forward`, and every candidate
//! sees bit-identical probes within one call.

use std::sync::Mutex;

use ddetect::models::{make_gaussian_mixture, train_classifier, ClassifierModel, MlpArchitecture, TrainConfig};
use ddetect::pipeline::{detect, CandidateSet, DetectContext, DetectSettings, GeneratorCache, NoiseFilter, TeacherApi};
use ddetect::scores::ScoreKind;
use ddetect::synthesis::InputSource;
use ddetect::{Matrix, RngStream};

/// Wraps a model and logs every query; it exposes nothing but the API.
struct Logged {
    model: ClassifierModel,
    queries: Mutex<Vec<Vec<u64>>>,
}

impl TeacherApi for Logged {
    fn forward(&self, inputs: &Matrix) -> ddetect::Result<Matrix> {
        let bits = inputs.as_slice().iter().map(|v| v.to_bits()).collect();
        self.queries.lock().unwrap().push(bits);
        self.model.predict(inputs)
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }
}

fn pool() -> (Vec<ClassifierModel>, ddetect::models::Dataset) {
    let data = make_gaussian_mixture(3, 40, 6, 0.5, &mut RngStream::new(5)).unwrap();
    let models = [MlpArchitecture::relu_64(6, 3), MlpArchitecture::tanh_32_32(6, 3)]
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 16,
                seed: i as u64,
                ..TrainConfig::default()
            };
            train_classifier(a, &data, &cfg).unwrap().0.eval()
        })
        .collect();
    (models, data)
}

#[test]
fn candidates_are_black_boxes_queried_on_identical_probes() {
    let (models, data) = pool();
    let student = models[0].clone();
    let candidates = CandidateSet::new(
        models
            .into_iter()
            .enumerate()
            .map(|(i, model)| {
                (
                    format!("c{i}"),
                    Logged {
                        model,
                        queries: Mutex::new(Vec::new()),
                    },
                )
            })
            .collect(),
    )
    .unwrap();
    let cache = GeneratorCache::new();
    let ctx = DetectContext {
        oracle_data: Some(&data),
        cache: Some(&cache),
    };
    let mut settings = vec![
        DetectSettings::new(InputSource::Synthetic, 20, ScoreKind::Acs),
        DetectSettings::new(InputSource::Oracle, 20, ScoreKind::PointKl),
    ];
    let mut noisy = DetectSettings::new(InputSource::Noise, 20, ScoreKind::Cka);
    noisy.filter = Some(NoiseFilter::Mia);
    settings.push(noisy);
    for (round, s) in settings.iter().enumerate() {
        let found = detect("s", &student, &candidates, s, &ctx, &RngStream::new(round as u64)).unwrap();
        let expected: Vec<u64> = found.inputs.inputs.as_slice().iter().map(|v| v.to_bits()).collect();
        for (_, c) in candidates.iter() {
            let q = c.queries.lock().unwrap();
            assert_eq!(q.len(), round + 1, "one query per candidate per detect call");
            assert_eq!(q[round], expected, "candidate saw different probes");
        }
        assert_eq!(found.prediction, 0);
    }
}

#[test]
fn same_seed_same_detection() {
    let (models, _) = pool();
    let student = models[1].clone();
    let candidates = CandidateSet::new(vec![
        ("a".to_string(), models[0].clone()),
        ("b".to_string(), models[1].clone()),
    ])
    .unwrap();
    let settings = DetectSettings::new(InputSource::Synthetic, 16, ScoreKind::PointKl);
    let run = || {
        detect(
            "s",
            &student,
            &candidates,
            &settings,
            &DetectContext::default(),
            &RngStream::new(9),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.prediction, 1);
}
