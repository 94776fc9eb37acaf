//! Three toy operations behind a JSON-in / JSON-out boundary so the page can
//! stay framework-free. Everything is small enough to train in the browser.

use ddetect::baselines::hsic_test;
use ddetect::distill::{distill_student, DistillConfig};
use ddetect::models::{
    train_classifier, Activation, ClassifierModel, Dataset, GaussianMixture, HiddenLayer, MlpArchitecture, TrainConfig,
};
use ddetect::numerics::svd;
use ddetect::scores::{acs, cka_rbf, point_score, BandwidthPolicy, CkaCentering, PointScoreConfig};
use ddetect::synthesis::{build_input_set, noise_input_set, train_generator, GeneratorSpec, SynthesisConfig};
use ddetect::{Matrix, RngStream};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const CLASSES: usize = 3;
const GRID: usize = 28;
const EXTENT: f64 = 3.0;

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct DistillRequest {
    pub seed: u64,
    pub lambda: f64,
    pub probes: usize,
}

impl Default for DistillRequest {
    fn default() -> Self {
        DistillRequest {
            seed: 0,
            lambda: 0.9,
            probes: 64,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct DistillResponse {
    pub lambda: f64,
    pub student_accuracy: f64,
    /// Mean 1/KL of the student against each model, on synthetic probes.
    pub score_teacher: f64,
    pub score_independent: f64,
    pub detected: bool,
    /// Argmax class over a `GRID`×`GRID` lattice on [-EXTENT, EXTENT]², row-major from the top.
    pub grid_size: usize,
    pub extent: f64,
    pub teacher_regions: Vec<usize>,
    pub student_regions: Vec<usize>,
    pub independent_regions: Vec<usize>,
    pub train: Vec<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct ExplorerRequest {
    pub seed: u64,
    pub n: usize,
    pub dim: usize,
    /// Standard deviation of the noise added to the rotated copy.
    pub noise: f64,
}

impl Default for ExplorerRequest {
    fn default() -> Self {
        ExplorerRequest {
            seed: 0,
            n: 40,
            dim: 3,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct PairScores {
    pub acs: f64,
    pub cka: f64,
    pub hsic: f64,
    pub p_value: f64,
}

#[derive(Debug, Serialize)]
pub struct ExplorerResponse {
    /// `y = x Q + noise` for a random rotation `Q`.
    pub related: PairScores,
    /// `y` drawn independently of `x`.
    pub unrelated: PairScores,
}

#[derive(Debug, Deserialize)]
#[serde(default)]
pub struct OverlayRequest {
    pub seed: u64,
    pub n: usize,
    pub epochs: usize,
}

impl Default for OverlayRequest {
    fn default() -> Self {
        OverlayRequest {
            seed: 0,
            n: 60,
            epochs: 200,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OverlayResponse {
    pub train: Vec<[f64; 3]>,
    /// `[x, y, class the generator was asked for]`
    pub synthetic: Vec<[f64; 3]>,
    pub noise: Vec<[f64; 2]>,
    /// Share of probes the student labels as intended / its mean confidence.
    pub synthetic_label_agreement: f64,
    pub synthetic_confidence: f64,
    pub noise_confidence: f64,
}

fn hidden(width: usize, activation: Activation) -> Vec<HiddenLayer> {
    vec![HiddenLayer::new(width, activation)]
}

fn toy_data(seed: u64) -> ddetect::Result<Dataset> {
    let root = RngStream::new(seed);
    let mixture = GaussianMixture::new(CLASSES, 2, 0.6, &mut root.split(0))?;
    mixture.sample(80, &mut root.split(1))
}

fn fit(data: &Dataset, activation: Activation, seed: u64) -> ddetect::Result<ClassifierModel> {
    let arch = MlpArchitecture::new(2, hidden(16, activation), CLASSES)?;
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 25,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    Ok(train_classifier(&arch, data, &cfg)?.0.eval())
}

fn lattice() -> Matrix {
    Matrix::from_fn(GRID * GRID, 2, |i, j| {
        let (r, c) = (i / GRID, i % GRID);
        let t = |k: usize| -EXTENT + 2.0 * EXTENT * k as f64 / (GRID - 1) as f64;
        if j == 0 {
            t(c)
        } else {
            -t(r)
        }
    })
}

fn regions(model: &ClassifierModel, points: &Matrix) -> ddetect::Result<Vec<usize>> {
    let logits = model.predict(points)?;
    Ok(logits.iter_rows().map(argmax).collect())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

fn labelled_points(data: &Dataset) -> Vec<[f64; 3]> {
    data.features
        .iter_rows()
        .zip(&data.labels)
        .map(|(r, &y)| [r[0], r[1], y as f64])
        .collect()
}

fn small_synthesis(seed: u64, epochs: usize) -> SynthesisConfig {
    SynthesisConfig {
        epochs,
        batch_size: 32,
        seed,
        ..SynthesisConfig::default()
    }
}

fn small_generator(student: &ClassifierModel) -> GeneratorSpec {
    GeneratorSpec {
        latent_dim: 4,
        embed_dim: 8,
        hidden: vec![32],
        ..GeneratorSpec::for_student(student)
    }
}

/// Distill a student at `lambda`, then ask whether synthetic probes built
/// from the student alone point back at its teacher rather than at an
/// independently trained look-alike.
pub fn distill_demo(req: &DistillRequest) -> ddetect::Result<DistillResponse> {
    if !(0.0..=1.0).contains(&req.lambda) {
        return Err(ddetect::Error::InvalidInput("lambda must lie in [0, 1]".into()));
    }
    let data = toy_data(req.seed)?;
    let teacher = fit(&data, Activation::Tanh, req.seed.wrapping_add(10))?;
    let independent = fit(&data, Activation::Tanh, req.seed.wrapping_add(20))?;
    let arch = MlpArchitecture::new(2, hidden(16, Activation::Relu), CLASSES)?;
    let cfg = DistillConfig {
        lambda: req.lambda,
        train: TrainConfig {
            learning_rate: 0.05,
            epochs: 25,
            batch_size: 32,
            seed: req.seed.wrapping_add(30),
            ..TrainConfig::default()
        },
        ..DistillConfig::default()
    };
    let student = distill_student(&teacher, &arch, &data, &cfg)?.eval();

    let generator = train_generator(&student, &small_generator(&student), &small_synthesis(req.seed, 150))?;
    let probes = build_input_set(&generator, req.probes.max(1), &mut RngStream::new(req.seed).split(2))?;
    let s_out = student.predict(&probes.inputs)?;
    let score = |m: &ClassifierModel| point_score(&s_out, &m.predict(&probes.inputs)?, &PointScoreConfig::default());
    let score_teacher = score(&teacher)?;
    let score_independent = score(&independent)?;

    let grid = lattice();
    Ok(DistillResponse {
        lambda: req.lambda,
        student_accuracy: student.accuracy(&data)?,
        score_teacher,
        score_independent,
        detected: score_teacher > score_independent,
        grid_size: GRID,
        extent: EXTENT,
        teacher_regions: regions(&teacher, &grid)?,
        student_regions: regions(&student, &grid)?,
        independent_regions: regions(&independent, &grid)?,
        train: labelled_points(&data),
    })
}

fn pair_scores(x: &Matrix, y: &Matrix, rng: &mut RngStream) -> ddetect::Result<PairScores> {
    let test = hsic_test(x, y, 200, rng)?;
    Ok(PairScores {
        acs: acs(x, y)?,
        cka: cka_rbf(x, y, &BandwidthPolicy::MedianHeuristic, CkaCentering::TwoSided)?,
        hsic: test.statistic,
        p_value: test.p_value,
    })
}

/// Alignment, kernel similarity and an independence test on a rotated noisy
/// copy versus an unrelated sample.
pub fn score_explorer(req: &ExplorerRequest) -> ddetect::Result<ExplorerResponse> {
    if req.n < 4 || req.dim == 0 || req.dim > 16 || req.n > 400 {
        return Err(ddetect::Error::InvalidInput(
            "need 4 <= n <= 400 and 1 <= dim <= 16".into(),
        ));
    }
    if !(req.noise >= 0.0 && req.noise.is_finite()) {
        return Err(ddetect::Error::InvalidInput("noise must be nonnegative".into()));
    }
    let root = RngStream::new(req.seed);
    let gauss = |rows, cols, stream: u64| {
        let mut rng = root.split(stream);
        Matrix::from_fn(rows, cols, |_, _| rng.normal())
    };
    let x = gauss(req.n, req.dim, 0);
    let q = svd(&gauss(req.dim, req.dim, 1))?;
    let rotation = q.u.matmul(&q.vt)?;
    let related = x.matmul(&rotation)?.add(&gauss(req.n, req.dim, 2).scale(req.noise))?;
    let unrelated = gauss(req.n, req.dim, 3);
    Ok(ExplorerResponse {
        related: pair_scores(&x, &related, &mut root.split(4))?,
        unrelated: pair_scores(&x, &unrelated, &mut root.split(5))?,
    })
}

fn mean_confidence(model: &ClassifierModel, inputs: &Matrix) -> ddetect::Result<f64> {
    let p = model.predict_proba(inputs)?;
    Ok(p.iter_rows().map(|r| r[argmax(r)]).sum::<f64>() / p.rows() as f64)
}

/// Where synthetic probes land compared with the training data and with
/// plain Gaussian noise.
pub fn probe_overlay(req: &OverlayRequest) -> ddetect::Result<OverlayResponse> {
    if req.n == 0 || req.n > 500 || req.epochs > 2000 {
        return Err(ddetect::Error::InvalidInput(
            "need 1 <= n <= 500 and epochs <= 2000".into(),
        ));
    }
    let data = toy_data(req.seed)?;
    let student = fit(&data, Activation::Relu, req.seed.wrapping_add(40))?;
    let generator = train_generator(
        &student,
        &small_generator(&student),
        &small_synthesis(req.seed, req.epochs),
    )?;
    let root = RngStream::new(req.seed);
    let synthetic = build_input_set(&generator, req.n, &mut root.split(2))?;
    let noise = noise_input_set(req.n, 2, &mut root.split(3))?;
    let predicted = regions(&student, &synthetic.inputs)?;
    let agree = predicted.iter().zip(&synthetic.labels).filter(|(a, b)| a == b).count();
    Ok(OverlayResponse {
        train: labelled_points(&data),
        synthetic: synthetic
            .inputs
            .iter_rows()
            .zip(&synthetic.labels)
            .map(|(r, &y)| [r[0], r[1], y as f64])
            .collect(),
        noise: noise.inputs.iter_rows().map(|r| [r[0], r[1]]).collect(),
        synthetic_label_agreement: agree as f64 / req.n as f64,
        synthetic_confidence: mean_confidence(&student, &synthetic.inputs)?,
        noise_confidence: mean_confidence(&student, &noise.inputs)?,
    })
}

fn run<Req, Resp>(json: &str, op: impl Fn(&Req) -> ddetect::Result<Resp>) -> Result<String, JsValue>
where
    Req: for<'de> Deserialize<'de>,
    Resp: Serialize,
{
    let req: Req = serde_json::from_str(json).map_err(|e| JsValue::from_str(&format!("bad request: {e}")))?;
    let resp = op(&req).map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&resp).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen(js_name = distillDemo)]
pub fn distill_demo_js(request: &str) -> Result<String, JsValue> {
    run(request, distill_demo)
}

#[wasm_bindgen(js_name = scoreExplorer)]
pub fn score_explorer_js(request: &str) -> Result<String, JsValue> {
    run(request, score_explorer)
}

#[wasm_bindgen(js_name = probeOverlay)]
pub fn probe_overlay_js(request: &str) -> Result<String, JsValue> {
    run(request, probe_overlay)
}
