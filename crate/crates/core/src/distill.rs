//! Students from teachers: vanilla KD with a hard/soft balance λ, and
//! relational KD on last-hidden-layer features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{fit, ClassifierModel, Dataset, MlpArchitecture, Mode, TrainConfig};
use crate::numerics::special::{log_softmax, one_hot, softmax_rows};
use crate::numerics::tape::{huber_mean, triplet_cosines};
use crate::numerics::{Matrix, RngStream, Tape, Var};

/// Huber threshold for both relational terms.
pub const RKD_HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMethod {
    Kd,
    Rkd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the soft (teacher-matching) term; `1 - lambda` goes to the
    /// hard-label cross-entropy.
    pub lambda: f64,
    pub temperature: f64,
    pub method: DistillMethod,
    pub rkd_distance_weight: f64,
    pub rkd_angle_weight: f64,
    /// Share of the KD loss in the RKD objective; the rest is relational.
    pub rkd_mix: f64,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 1.0,
            temperature: 4.0,
            method: DistillMethod::Kd,
            rkd_distance_weight: 1.0,
            rkd_angle_weight: 2.0,
            rkd_mix: 0.3,
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::input(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::input("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rkd_mix) {
            return Err(Error::input("rkd_mix must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_logits(student: &Matrix, teacher: &Matrix, labels: &[usize]) -> Result<()> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if labels.len() != student.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            student.rows()
        )));
    }
    if labels.iter().any(|&y| y >= student.cols()) {
        return Err(Error::input("label outside the logit range"));
    }
    if student.rows() == 0 {
        return Err(Error::input("empty batch"));
    }
    Ok(())
}

/// Mean hard-label cross-entropy.
fn mean_cross_entropy(logits: &Matrix, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| -log_softmax(row)[y])
        .sum();
    total / logits.rows() as f64
}

/// Mean `KL(softmax(teacher/T) ‖ softmax(student/T))`.
fn mean_soft_kl(student: &Matrix, teacher: &Matrix, temperature: f64) -> f64 {
    let total: f64 = student
        .iter_rows()
        .zip(teacher.iter_rows())
        .map(|(s, t)| {
            let ls = log_softmax(&s.iter().map(|v| v / temperature).collect::<Vec<_>>());
            let lt = log_softmax(&t.iter().map(|v| v / temperature).collect::<Vec<_>>());
            lt.iter()
                .zip(&ls)
                .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    total / student.rows() as f64
}

/// `(1 - λ)·CE(student, labels) + λ·T²·KL(teacher_T ‖ student_T)`, both
/// averaged over rows.
pub fn kd_loss(
    student_logits: &Matrix,
    teacher_logits: &Matrix,
    labels: &[usize],
    lambda: f64,
    temperature: f64,
) -> Result<f64> {
    check_logits(student_logits, teacher_logits, labels)?;
    if !(temperature > 0.0) {
        return Err(Error::input("temperature must be positive"));
    }
    let hard = mean_cross_entropy(student_logits, labels);
    let soft = temperature * temperature * mean_soft_kl(student_logits, teacher_logits, temperature);
    Ok((1.0 - lambda) * hard + lambda * soft)
}

/// [`kd_loss`] recorded on a tape, differentiable w.r.t. the student logits.
pub fn kd_loss_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Matrix,
    labels: &[usize],
    lambda: f64,
    temperature: f64,
) -> Result<Var> {
    check_logits(tape.value(student_logits), teacher_logits, labels)?;
    let mut terms = Vec::with_capacity(2);
    if lambda < 1.0 {
        let targets = one_hot(labels, teacher_logits.cols());
        let hard = tape.cross_entropy(student_logits, targets)?;
        terms.push(tape.scale(hard, 1.0 - lambda));
    }
    if lambda > 0.0 {
        let probs = softmax_rows(teacher_logits, temperature);
        let entropy: f64 = probs
            .as_slice()
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum::<f64>()
            / probs.rows() as f64;
        let scaled = tape.scale(student_logits, 1.0 / temperature);
        let ce = tape.cross_entropy(scaled, probs)?;
        let kl = tape.offset(ce, -entropy);
        terms.push(tape.scale(kl, lambda * temperature * temperature));
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    Ok(acc)
}

fn check_relational(student: &Matrix, teacher: &Matrix) -> Result<()> {
    if student.rows() != teacher.rows() {
        return Err(Error::shape(format!(
            "{} student rows vs {} teacher rows",
            student.rows(),
            teacher.rows()
        )));
    }
    if student.rows() < 3 {
        return Err(Error::input("relational loss needs at least three rows"));
    }
    Ok(())
}

/// Pairwise distances divided by their mean over nonzero entries.
fn normalized_distances(x: &Matrix) -> Matrix {
    let d = crate::numerics::kernel::squared_distances(x).map(f64::sqrt);
    let (sum, count) = d
        .as_slice()
        .iter()
        .filter(|&&v| v > 0.0)
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        d
    } else {
        d.scale(count as f64 / sum)
    }
}

/// Relational KD: Huber mismatch of mean-normalized pairwise distances plus
/// Huber mismatch of all anchored triplet angle cosines.
pub fn rkd_loss(
    student_features: &Matrix,
    teacher_features: &Matrix,
    distance_weight: f64,
    angle_weight: f64,
) -> Result<f64> {
    check_relational(student_features, teacher_features)?;
    let dist = huber_mean(
        &normalized_distances(student_features),
        &normalized_distances(teacher_features),
        RKD_HUBER_DELTA,
    );
    let angle = huber_mean(
        &triplet_cosines(student_features),
        &triplet_cosines(teacher_features),
        RKD_HUBER_DELTA,
    );
    Ok(distance_weight * dist + angle_weight * angle)
}

/// [`rkd_loss`] on a tape, differentiable w.r.t. the student features.
pub fn rkd_loss_on_tape(
    tape: &mut Tape,
    student_features: Var,
    teacher_features: &Matrix,
    distance_weight: f64,
    angle_weight: f64,
) -> Result<Var> {
    check_relational(tape.value(student_features), teacher_features)?;
    let d = tape.pairwise_distances(student_features);
    let count = tape.value(d).as_slice().iter().filter(|&&v| v > 0.0).count();
    let d_norm = if count > 0 {
        let total = tape.sum(d);
        let mean = tape.scale(total, 1.0 / count as f64);
        tape.div_scalar(d, mean)?
    } else {
        d
    };
    let dist = tape.huber(d_norm, normalized_distances(teacher_features), RKD_HUBER_DELTA)?;
    let angles = tape.triplet_cosines(student_features);
    let angle = tape.huber(angles, triplet_cosines(teacher_features), RKD_HUBER_DELTA)?;
    let dist = tape.scale(dist, distance_weight);
    let angle = tape.scale(angle, angle_weight);
    tape.add(dist, angle)
}

/// Trains a fresh student of architecture `arch` against a frozen teacher.
///
/// The student is initialized exactly like [`crate::models::train_classifier`]
/// with the same seed, so `lambda = 0` reproduces plain supervised training.
pub fn distill_student(
    teacher: &ClassifierModel,
    arch: &MlpArchitecture,
    data: &Dataset,
    config: &DistillConfig,
) -> Result<ClassifierModel> {
    config.validate()?;
    if teacher.mode != Mode::Eval {
        return Err(Error::input("teacher must be in eval mode"));
    }
    if data.input_dim() != teacher.input_dim() || arch.input_dim != teacher.input_dim() {
        return Err(Error::shape(format!(
            "input dims differ: data {}, teacher {}, student {}",
            data.input_dim(),
            teacher.input_dim(),
            arch.input_dim
        )));
    }
    if arch.num_classes != teacher.num_classes() || data.num_classes != teacher.num_classes() {
        return Err(Error::shape("student, teacher and data disagree on the class count"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot distill on an empty dataset"));
    }
    let root = RngStream::new(config.train.seed);
    let mut student = ClassifierModel::init(arch, &mut root.split(0))?;
    let (teacher_logits, teacher_features) = teacher.predict_with_features(&data.features)?;
    let (lambda, temperature) = (config.lambda, config.temperature);

    match config.method {
        DistillMethod::Kd => {
            fit(
                &mut student,
                &mut [],
                &data.features,
                &config.train,
                |tape, fwd, batch, _| {
                    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                    kd_loss_on_tape(
                        tape,
                        fwd.logits,
                        &teacher_logits.select_rows(batch),
                        &labels,
                        lambda,
                        temperature,
                    )
                },
            )?;
        }
        DistillMethod::Rkd => {
            let (s_dim, t_dim) = (arch.feature_dim(), teacher.architecture.feature_dim());
            let mut extra = Vec::new();
            if s_dim != t_dim {
                let mut rng = root.split(2);
                let limit = (6.0 / (s_dim + t_dim) as f64).sqrt();
                extra.push((
                    "projection.weight".to_string(),
                    Matrix::from_fn(s_dim, t_dim, |_, _| rng.uniform_range(-limit, limit)),
                ));
            }
            let mix = config.rkd_mix;
            let (dw, aw) = (config.rkd_distance_weight, config.rkd_angle_weight);
            fit(
                &mut student,
                &mut extra,
                &data.features,
                &config.train,
                |tape, fwd, batch, ex| {
                    let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
                    let kd = kd_loss_on_tape(
                        tape,
                        fwd.logits,
                        &teacher_logits.select_rows(batch),
                        &labels,
                        lambda,
                        temperature,
                    )?;
                    let feats = match ex.first() {
                        Some(&proj) => tape.matmul(fwd.features, proj)?,
                        None => fwd.features,
                    };
                    let relational = if batch.len() >= 3 {
                        let r = rkd_loss_on_tape(tape, feats, &teacher_features.select_rows(batch), dw, aw)?;
                        Some(tape.scale(r, 1.0 - mix))
                    } else {
                        None
                    };
                    let kd = tape.scale(kd, mix);
                    match relational {
                        Some(r) => tape.add(kd, r),
                        None => Ok(kd),
                    }
                },
            )?;
        }
    }
    Ok(student)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::train_classifier;
    use crate::numerics::special::softmax;

    #[test]
    fn hard_only_limit_is_cross_entropy() {
        let s = Matrix::from_rows(&[[0.3, -1.0, 2.0], [1.0, 1.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]]).unwrap();
        let labels = [2, 0];
        let ce = (-log_softmax(s.row(0))[2] - log_softmax(s.row(1))[0]) / 2.0;
        assert_eq!(kd_loss(&s, &t, &labels, 0.0, 4.0).unwrap(), ce);
    }

    #[test]
    fn perfect_match_is_zero() {
        let s = Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        assert_eq!(kd_loss(&s, &s, &[1], 1.0, 4.0).unwrap(), 0.0);
    }

    #[test]
    fn closed_form_two_class_example() {
        let s = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let t = Matrix::from_rows(&[[3f64.ln(), 0.0]]).unwrap();
        let ce = 2f64.ln();
        let kl = 0.75 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        let expected = 0.5 * ce + 0.5 * kl;
        assert!((kd_loss(&s, &t, &[0], 0.5, 1.0).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn convex_in_lambda_and_nonnegative() {
        let mut rng = RngStream::new(3);
        let s = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let t = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let labels = [0, 1, 2, 3, 0, 1];
        let l0 = kd_loss(&s, &t, &labels, 0.0, 2.0).unwrap();
        let l1 = kd_loss(&s, &t, &labels, 1.0, 2.0).unwrap();
        for lambda in [0.1, 0.25, 0.5, 0.9] {
            let l = kd_loss(&s, &t, &labels, lambda, 2.0).unwrap();
            assert_eq!(l, (1.0 - lambda) * l0 + lambda * l1);
            assert!(l >= 0.0);
        }
    }

    #[test]
    fn tape_version_matches_and_differentiates() {
        let mut rng = RngStream::new(4);
        let s = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let t = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let labels = [0, 2, 1, 1, 0];
        let mut tape = Tape::new();
        let sv = tape.param("s", s.clone());
        let out = kd_loss_on_tape(&mut tape, sv, &t, &labels, 0.6, 3.0).unwrap();
        let direct = kd_loss(&s, &t, &labels, 0.6, 3.0).unwrap();
        assert!((tape.scalar(out) - direct).abs() < 1e-12);
        let g = tape.backward(out).unwrap().named("s").unwrap().clone();
        let h = 1e-5;
        for i in 0..5 {
            for j in 0..3 {
                let mut p = s.clone();
                p[(i, j)] += h;
                let mut m = s.clone();
                m[(i, j)] -= h;
                let fd = (kd_loss(&p, &t, &labels, 0.6, 3.0).unwrap() - kd_loss(&m, &t, &labels, 0.6, 3.0).unwrap())
                    / (2.0 * h);
                assert!((fd - g[(i, j)]).abs() <= 1e-4 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn kd_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(
            kd_loss(&a, &b, &[0, 0], 0.5, 1.0),
            Err(Error::InvalidShape(_))
        ));
    }

    /// Independent relational oracle: explicit loops over pairs and triplets.
    fn rkd_oracle(s: &Matrix, t: &Matrix, dw: f64, aw: f64) -> f64 {
        let n = s.rows();
        let dist = |x: &Matrix, i: usize, j: usize| -> f64 {
            x.row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mean_nz = |x: &Matrix| -> f64 {
            let mut s = 0.0;
            let mut c = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let d = dist(x, i, j);
                    if d > 0.0 {
                        s += d;
                        c += 1.0;
                    }
                }
            }
            s / c
        };
        let huber = |r: f64| if r.abs() < 1.0 { 0.5 * r * r } else { r.abs() - 0.5 };
        let (ms, mt) = (mean_nz(s), mean_nz(t));
        let mut dist_term = 0.0;
        for i in 0..n {
            for j in 0..n {
                dist_term += huber(dist(s, i, j) / ms - dist(t, i, j) / mt);
            }
        }
        dist_term /= (n * n) as f64;
        let cosine = |x: &Matrix, a: usize, b: usize, c: usize| -> f64 {
            let u: Vec<f64> = x.row(b).iter().zip(x.row(a)).map(|(p, q)| p - q).collect();
            let v: Vec<f64> = x.row(c).iter().zip(x.row(a)).map(|(p, q)| p - q).collect();
            let nu = u.iter().map(|z| z * z).sum::<f64>().sqrt();
            let nv = v.iter().map(|z| z * z).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                0.0
            } else {
                u.iter().zip(&v).map(|(p, q)| p * q).sum::<f64>() / (nu * nv)
            }
        };
        let mut angle_term = 0.0;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    angle_term += huber(cosine(s, a, b, c) - cosine(t, a, b, c));
                }
            }
        }
        angle_term /= (n * n * n) as f64;
        dw * dist_term + aw * angle_term
    }

    #[test]
    fn rkd_identical_and_scaled_relations_vanish() {
        let mut rng = RngStream::new(5);
        let t = Matrix::from_fn(6, 3, |_, _| rng.normal());
        assert!(rkd_loss(&t, &t, 1.0, 2.0).unwrap().abs() < 1e-15);
        assert!(rkd_loss(&t.scale(3.7), &t, 1.0, 2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rkd_matches_brute_force() {
        let t = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]]).unwrap();
        let s = Matrix::from_rows(&[[0.1, -0.2], [1.3, 0.1], [-0.2, 1.5]]).unwrap();
        let direct = rkd_loss(&s, &t, 1.0, 2.0).unwrap();
        assert!(direct > 0.0);
        assert!((direct - rkd_oracle(&s, &t, 1.0, 2.0)).abs() < 1e-12);
        let mut rng = RngStream::new(6);
        let s = Matrix::from_fn(7, 4, |_, _| rng.normal());
        let t = Matrix::from_fn(7, 2, |_, _| rng.normal());
        assert!((rkd_loss(&s, &t, 1.0, 2.0).unwrap() - rkd_oracle(&s, &t, 1.0, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn rkd_rotation_invariant() {
        let mut rng = RngStream::new(7);
        let s = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let t = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let th: f64 = 0.9;
        let q = Matrix::from_rows(&[[th.cos(), -th.sin()], [th.sin(), th.cos()]]).unwrap();
        let base = rkd_loss(&s, &t, 1.0, 2.0).unwrap();
        let rotated = rkd_loss(&s.matmul(&q).unwrap(), &t, 1.0, 2.0).unwrap();
        assert!((base - rotated).abs() <= 1e-8);
        let rotated_t = rkd_loss(&s, &t.matmul(&q).unwrap(), 1.0, 2.0).unwrap();
        assert!((base - rotated_t).abs() <= 1e-8);
    }

    #[test]
    fn rkd_tape_agrees() {
        let mut rng = RngStream::new(8);
        let s = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let t = Matrix::from_fn(5, 4, |_, _| rng.normal());
        let mut tape = Tape::new();
        let sv = tape.param("s", s.clone());
        let out = rkd_loss_on_tape(&mut tape, sv, &t, 1.0, 2.0).unwrap();
        assert!((tape.scalar(out) - rkd_loss(&s, &t, 1.0, 2.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rkd_needs_three_rows() {
        let m = Matrix::zeros(2, 2);
        assert!(matches!(rkd_loss(&m, &m, 1.0, 2.0), Err(Error::InvalidInput(_))));
    }

    fn setup() -> (Dataset, Dataset, ClassifierModel, TrainConfig) {
        let mut rng = RngStream::new(20);
        let mix = crate::models::GaussianMixture::new(4, 6, 0.6, &mut rng).unwrap();
        let train = mix.sample(60, &mut rng).unwrap();
        let test = mix.sample(40, &mut rng).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 1,
            ..TrainConfig::default()
        };
        let (teacher, _) = train_classifier(&MlpArchitecture::relu_128_64(6, 4), &train, &cfg).unwrap();
        (train, test, teacher, cfg)
    }

    fn mean_kl(student: &ClassifierModel, teacher: &ClassifierModel, x: &Matrix) -> f64 {
        let s = student.predict(x).unwrap();
        let t = teacher.predict(x).unwrap();
        s.iter_rows()
            .zip(t.iter_rows())
            .map(|(a, b)| {
                let p = softmax(a);
                let lp = log_softmax(a);
                let lq = log_softmax(b);
                p.iter()
                    .zip(lp.iter().zip(&lq))
                    .map(|(pi, (x, y))| pi * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / x.rows() as f64
    }

    #[test]
    fn distilled_student_is_closer_than_independent_model() {
        let (train, test, teacher, cfg) = setup();
        let arch = MlpArchitecture::tanh_32_32(6, 4);
        let config = DistillConfig {
            train: TrainConfig { seed: 2, ..cfg.clone() },
            ..DistillConfig::default()
        };
        let student = distill_student(&teacher, &arch, &train, &config).unwrap();
        let (independent, _) = train_classifier(&arch, &train, &TrainConfig { seed: 3, ..cfg }).unwrap();
        assert!(mean_kl(&student, &teacher, &test.features) < mean_kl(&independent, &teacher, &test.features));
    }

    #[test]
    fn lambda_zero_reproduces_supervised_training() {
        let (train, _, teacher, cfg) = setup();
        let arch = MlpArchitecture::relu_64(6, 4);
        let config = DistillConfig {
            lambda: 0.0,
            train: TrainConfig {
                epochs: 5,
                ..cfg.clone()
            },
            ..DistillConfig::default()
        };
        let student = distill_student(&teacher, &arch, &train, &config).unwrap();
        let (plain, _) = train_classifier(&arch, &train, &config.train).unwrap();
        assert_eq!(student, plain);
        let again = distill_student(&teacher, &arch, &train, &config).unwrap();
        assert_eq!(student, again);
    }

    #[test]
    fn rkd_student_trains_and_leaves_teacher_alone() {
        let (train, _, teacher, cfg) = setup();
        let before = teacher.clone();
        let config = DistillConfig {
            method: DistillMethod::Rkd,
            train: TrainConfig { epochs: 5, ..cfg },
            ..DistillConfig::default()
        };
        let student = distill_student(&teacher, &MlpArchitecture::tanh_32_32(6, 4), &train, &config).unwrap();
        assert_eq!(teacher, before);
        assert!(student.accuracy(&train).unwrap() > 0.5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (train, _, teacher, _) = setup();
        let r = distill_student(
            &teacher,
            &MlpArchitecture::relu_64(5, 4),
            &train,
            &DistillConfig::default(),
        );
        assert!(matches!(r, Err(Error::InvalidShape(_))));
    }
}
