//! λ-sweep: distill at each distillation weight and measure how close the
//! student ends up to its teacher versus an unrelated model of the same
//! architecture, on held-out data.

use std::path::Path;

use ddetect::distill::DistillConfig;
use ddetect::models::ClassifierModel;
use ddetect::scores::{acs, kl_divergence, point_score, PointDistance, PointScoreConfig};
use ddetect::Matrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::svg::{line_chart, Series};
use crate::world::DataWorld;
use crate::write_file;

pub const SWEEP_CSV_HEADER: &str = "lambda,kl_teacher,kl_independent,one_minus_acs_teacher,one_minus_acs_independent";
pub const WINS_CSV_HEADER: &str = "lambda,point_score_wins,runs,win_fraction";

/// Per (seed, student) measurements at one λ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepSample {
    pub kl_teacher: f64,
    pub kl_independent: f64,
    pub acs_teacher: f64,
    pub acs_independent: f64,
    pub point_teacher: f64,
    pub point_independent: f64,
}

impl SweepSample {
    pub fn teacher_wins(&self) -> bool {
        self.point_teacher > self.point_independent
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub kl_teacher: f64,
    pub kl_independent: f64,
    pub one_minus_acs_teacher: f64,
    pub one_minus_acs_independent: f64,
    pub point_score_wins: usize,
    pub runs: usize,
}

impl SweepRow {
    pub fn win_fraction(&self) -> f64 {
        self.point_score_wins as f64 / self.runs as f64
    }
}

fn mean_kl(student: &Matrix, other: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (s, o) in student.iter_rows().zip(other.iter_rows()) {
        total += kl_divergence(s, o)?;
    }
    Ok(total / student.rows() as f64)
}

fn measure(
    student: &ClassifierModel,
    teacher: &Matrix,
    independent: &Matrix,
    inputs: &Matrix,
    point: &PointScoreConfig,
) -> Result<SweepSample> {
    let s = student.predict(inputs)?;
    Ok(SweepSample {
        kl_teacher: mean_kl(&s, teacher)?,
        kl_independent: mean_kl(&s, independent)?,
        acs_teacher: acs(&s, teacher)?,
        acs_independent: acs(&s, independent)?,
        point_teacher: point_score(&s, teacher, point)?,
        point_independent: point_score(&s, independent, point)?,
    })
}

/// All samples for one seed, indexed `[λ][teacher * students + student]`.
pub fn sweep_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<Vec<SweepSample>>> {
    let world = DataWorld::new(config, seed)?;
    let k = config.teachers.len();
    let models = (0..k)
        .into_par_iter()
        .map(|i| Ok((world.train_teacher(config, i)?, world.train_independent(config, i)?)))
        .collect::<Result<Vec<_>>>()?;
    let inputs = &world.test.features;
    let outputs = models
        .iter()
        .map(|(t, ind)| Ok((t.predict(inputs)?, ind.predict(inputs)?)))
        .collect::<Result<Vec<_>>>()?;
    let point = PointScoreConfig {
        delta: PointDistance::Kl,
        ..config.scores.point
    };
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|t| (0..config.students.len()).map(move |s| (t, s)))
        .collect();
    config
        .lambda_sweep
        .lambdas
        .iter()
        .map(|&lambda| {
            let distill = DistillConfig {
                lambda,
                ..config.distillation.clone()
            };
            pairs
                .par_iter()
                .map(|&(t, s)| {
                    let student = world.distill(config, &distill, &models[t].0, t, s)?;
                    measure(&student, &outputs[t].0, &outputs[t].1, inputs, &point)
                })
                .collect()
        })
        .collect()
}

pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let per_seed = crate::thread_pool().install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| sweep_seed(config, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(config
        .lambda_sweep
        .lambdas
        .iter()
        .enumerate()
        .map(|(l, &lambda)| {
            let samples: Vec<&SweepSample> = per_seed.iter().flat_map(|s| s[l].iter()).collect();
            let n = samples.len() as f64;
            let mean = |f: &dyn Fn(&SweepSample) -> f64| samples.iter().map(|s| f(s)).sum::<f64>() / n;
            SweepRow {
                lambda,
                kl_teacher: mean(&|s| s.kl_teacher),
                kl_independent: mean(&|s| s.kl_independent),
                one_minus_acs_teacher: 1.0 - mean(&|s| s.acs_teacher),
                one_minus_acs_independent: 1.0 - mean(&|s| s.acs_independent),
                point_score_wins: samples.iter().filter(|s| s.teacher_wins()).count(),
                runs: samples.len(),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{:?},{:?},{:?},{:?}\n",
            r.lambda, r.kl_teacher, r.kl_independent, r.one_minus_acs_teacher, r.one_minus_acs_independent
        ));
    }
    out
}

pub fn wins_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{WINS_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{:?},{},{},{:?}\n",
            r.lambda,
            r.point_score_wins,
            r.runs,
            r.win_fraction()
        ));
    }
    out
}

pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let line = |label: &str, color, dashed, f: fn(&SweepRow) -> f64| Series {
        label: label.to_string(),
        color,
        dashed,
        points: rows.iter().map(|r| (r.lambda, f(r))).collect(),
    };
    line_chart(
        "Student-to-model distance vs distillation weight",
        "distillation weight λ",
        "distance",
        &[
            line("KL, teacher", "#1f77b4", false, |r| r.kl_teacher),
            line("KL, independent", "#1f77b4", true, |r| r.kl_independent),
            line("1 - ACS, teacher", "#d62728", false, |r| r.one_minus_acs_teacher),
            line("1 - ACS, independent", "#d62728", true, |r| r.one_minus_acs_independent),
        ],
    )
}

/// `sweep-lambda` end to end: `lambda_sweep.csv`, `lambda_sweep.svg`,
/// `lambda_sweep_wins.csv`.
pub fn cli_sweep_lambda(config: &ExperimentConfig, dir: &Path) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(config)?;
    write_file(&dir.join("lambda_sweep.csv"), sweep_csv(&rows))?;
    write_file(&dir.join("lambda_sweep.svg"), sweep_svg(&rows))?;
    write_file(&dir.join("lambda_sweep_wins.csv"), wins_csv(&rows))?;
    Ok(rows)
}
