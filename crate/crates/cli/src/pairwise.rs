//! Pairwise protocol: every student is paired with its true teacher
//! (positive) and every other candidate (negative), and each pair gets an
//! HSIC verdict at level α.

use ddetect::baselines::TestResult;
use ddetect::pipeline::{construct_inputs, pairwise_detect, DetectContext, DetectSettings, GeneratorCache};
use ddetect::scores::ScoreKind;
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::probe_stream;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::world::{World, SYNTHESIS};

pub const PAIRS_CSV_HEADER: &str = "seed,student,candidate,positive,statistic,p_value,distilled";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutcome {
    pub seed: u64,
    pub student: String,
    pub candidate: String,
    pub positive: bool,
    pub result: TestResult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairwiseSummary {
    pub pairs: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Positives vs negatives ranked by `1 - p`.
    pub auc: f64,
}

/// Mann–Whitney AUC of `scores` with binary `labels`; ties count one half.
pub fn binary_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(s, _)| *s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

pub fn summarize(outcomes: &[PairOutcome]) -> PairwiseSummary {
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for o in outcomes {
        match (o.positive, o.result.decision) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
            (true, false) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let scores: Vec<f64> = outcomes.iter().map(|o| 1.0 - o.result.p_value).collect();
    let labels: Vec<bool> = outcomes.iter().map(|o| o.positive).collect();
    PairwiseSummary {
        pairs: outcomes.len(),
        accuracy: ratio(tp + tn, outcomes.len()),
        precision,
        recall,
        f1,
        auc: binary_auc(&scores, &labels),
    }
}

fn pairwise_seed(config: &ExperimentConfig, seed: u64) -> Result<Vec<PairOutcome>> {
    let world = World::build(config, seed)?;
    let spec = &config.pairwise;
    let mut settings = DetectSettings::new(spec.source, spec.n, ScoreKind::Custom);
    settings.synthesis = ddetect::synthesis::SynthesisConfig {
        seed: world.data.root().split(SYNTHESIS).seed(),
        ..config.synthesis.clone()
    };
    let cache = GeneratorCache::new();
    let ctx = DetectContext {
        oracle_data: Some(&world.data.train),
        cache: Some(&cache),
    };
    let per_student = world
        .students
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rng = probe_stream(seed, spec.source, spec.n, i);
            let inputs = construct_inputs(&s.id, &s.model, &settings, &ctx, &rng)?;
            world
                .candidates
                .iter()
                .enumerate()
                .map(|(k, (id, teacher))| {
                    let mut test_rng = rng.split(2000 + k as u64);
                    let result =
                        pairwise_detect(&s.model, teacher, &inputs, spec.alpha, spec.permutations, &mut test_rng)?;
                    Ok(PairOutcome {
                        seed,
                        student: s.id.clone(),
                        candidate: id.to_string(),
                        positive: s.truth == Some(k),
                        result,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_student.into_iter().flatten().collect())
}

/// All pairs over all seeds, in (seed, student, candidate) order.
pub fn run_pairwise(config: &ExperimentConfig) -> Result<Vec<PairOutcome>> {
    config.validate()?;
    let per_seed = crate::thread_pool().install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| pairwise_seed(config, seed))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

pub fn pairs_csv(outcomes: &[PairOutcome]) -> String {
    let mut out = format!("{PAIRS_CSV_HEADER}\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{:?},{:?},{}\n",
            o.seed, o.student, o.candidate, o.positive, o.result.statistic, o.result.p_value, o.result.decision
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_counts_ties_as_half() {
        assert_eq!(binary_auc(&[0.9, 0.5, 0.5, 0.1], &[true, true, false, false]), 0.875);
        assert!(binary_auc(&[1.0], &[true]).is_nan());
    }
}
