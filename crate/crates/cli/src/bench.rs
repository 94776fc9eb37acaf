//! The benchmark grid: every enabled method × input size × seed over the
//! teacher/student world of that seed.

use std::path::{Path, PathBuf};

use ddetect::pipeline::{detect, DetectContext, DetectSettings, DetectionReport, GeneratorCache};
use ddetect::scores::ScoreMatrix;
use ddetect::synthesis::{InputSource, SynthesisConfig};
use ddetect::{Matrix, RngStream};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, MethodSpec};
use crate::error::{HarnessError, Result};
use crate::report::{rows_to_csv, ReportRow};
use crate::world::{World, PROBES, SYNTHESIS};
use crate::write_file;

#[derive(Debug, Clone, Serialize)]
pub struct RunFailure {
    pub method: String,
    pub input_size: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct BenchOutcome {
    pub rows: Vec<ReportRow>,
    /// Successful runs in (method, N, seed) order.
    pub runs: Vec<DetectionReport>,
    pub failures: Vec<RunFailure>,
}

fn source_index(source: InputSource) -> u64 {
    match source {
        InputSource::Synthetic => 0,
        InputSource::Noise => 1,
        InputSource::Oracle => 2,
    }
}

pub fn detect_settings(config: &ExperimentConfig, method: &MethodSpec, n: usize, world_seed: u64) -> DetectSettings {
    DetectSettings {
        source: method.source,
        filter: method.filter,
        n,
        scorer: method.scorer.clone(),
        scores: config.scores,
        synthesis: SynthesisConfig {
            seed: RngStream::new(world_seed).split(SYNTHESIS).seed(),
            ..config.synthesis.clone()
        },
        generator: None,
    }
}

/// Probe stream for student `i`; it depends on the source and N but not on
/// the method, so methods sharing a source see the same draws.
pub fn probe_stream(world_seed: u64, source: InputSource, n: usize, student: usize) -> RngStream {
    RngStream::new(world_seed)
        .split(PROBES)
        .split(source_index(source))
        .split(n as u64)
        .split(student as u64)
}

/// Runs one method at one N over all students of a world.
pub fn run_method(
    config: &ExperimentConfig,
    world: &World,
    method: &MethodSpec,
    n: usize,
    cache: &GeneratorCache,
) -> Result<DetectionReport> {
    let seed = world.data.seed;
    let settings = detect_settings(config, method, n, seed);
    let ctx = DetectContext {
        oracle_data: Some(&world.data.train),
        cache: Some(cache),
    };
    let rows = world
        .students
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rng = probe_stream(seed, method.source, n, i);
            detect(&s.id, &s.model, &world.candidates, &settings, &ctx, &rng).map(|d| d.scores)
        })
        .collect::<ddetect::Result<Vec<_>>>()?;
    let k = world.candidates.len();
    let mut values = Matrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        values.row_mut(i).copy_from_slice(r);
    }
    let matrix = ScoreMatrix::new(
        values,
        world.students.iter().map(|s| s.id.clone()).collect(),
        world.candidates.ids(),
        settings.scorer.score_kind(),
    )?;
    let truths = world.students.iter().map(|s| s.truth).collect();
    Ok(DetectionReport::from_scores(
        &method.name,
        matrix,
        truths,
        n,
        method.source,
        seed,
    )?)
}

type SeedRuns = Vec<(usize, usize, std::result::Result<DetectionReport, String>)>;

fn run_seed(config: &ExperimentConfig, seed: u64) -> SeedRuns {
    let grid: Vec<(usize, usize)> = config
        .methods
        .iter()
        .enumerate()
        .flat_map(|(m, spec)| {
            config
                .n_values
                .iter()
                .filter(move |&&n| spec.supports(n))
                .map(move |&n| (m, n))
        })
        .collect();
    if grid.is_empty() {
        return Vec::new();
    }
    let world = match World::build(config, seed) {
        Ok(w) => w,
        Err(e) => {
            return grid
                .into_iter()
                .map(|(m, n)| (m, n, Err(format!("building world: {e}"))))
                .collect()
        }
    };
    let cache = GeneratorCache::new();
    grid.into_iter()
        .map(|(m, n)| {
            let run = run_method(config, &world, &config.methods[m], n, &cache).map_err(|e| e.to_string());
            (m, n, run)
        })
        .collect()
}

/// Runs the whole grid. Deterministic for a given config regardless of the
/// number of worker threads.
pub fn run_bench(config: &ExperimentConfig) -> Result<BenchOutcome> {
    config.validate()?;
    let per_seed: Vec<SeedRuns> =
        crate::thread_pool().install(|| config.seeds.par_iter().map(|&seed| run_seed(config, seed)).collect());
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (m, method) in config.methods.iter().enumerate() {
        for &n in config.n_values.iter().filter(|&&n| method.supports(n)) {
            let mut accs = Vec::new();
            let mut aucs = Vec::new();
            for (seed_runs, &seed) in per_seed.iter().zip(&config.seeds) {
                let Some((_, _, result)) = seed_runs.iter().find(|(mm, nn, _)| *mm == m && *nn == n) else {
                    continue;
                };
                match result {
                    Ok(report) => {
                        accs.push(report.accuracy.unwrap_or(f64::NAN));
                        aucs.push(report.auc.unwrap_or(f64::NAN));
                        runs.push(report.clone());
                    }
                    Err(error) => failures.push(RunFailure {
                        method: method.name.clone(),
                        input_size: n,
                        seed,
                        error: error.clone(),
                    }),
                }
            }
            if !accs.is_empty() {
                rows.push(ReportRow::aggregate(&method.name, n, &accs, &aucs));
            }
        }
    }
    Ok(BenchOutcome { rows, runs, failures })
}

/// File-name friendly form of a method name.
pub fn slug(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            s.push(c.to_ascii_lowercase());
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

pub fn run_file_stem(report: &DetectionReport) -> String {
    format!("{}_n{}_seed{}", slug(&report.method), report.input_size, report.seed)
}

/// Writes `report.csv`, `config.json`, per-run score CSVs and summaries, and
/// `errors.json` when any run failed (in which case this returns
/// [`HarnessError::Partial`] after writing).
pub fn write_outcome(outcome: &BenchOutcome, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join("config.json"), config.to_json())?;
    for report in &outcome.runs {
        let stem = run_file_stem(report);
        write_file(&dir.join("runs").join(format!("{stem}.csv")), report.to_csv())?;
        write_file(&dir.join("runs").join(format!("{stem}.json")), report.summary_json())?;
    }
    write_file(&dir.join("report.csv"), rows_to_csv(&outcome.rows))?;
    if !outcome.failures.is_empty() {
        let manifest = dir.join("errors.json");
        let json = serde_json::to_string_pretty(&outcome.failures).expect("failures serialize");
        write_file(&manifest, json)?;
        return Err(HarnessError::Partial {
            failed: outcome.failures.len(),
            manifest,
        });
    }
    Ok(())
}

pub fn output_dir(config: &ExperimentConfig, flag: Option<&Path>, default: &str) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from(default))
}

/// `bench` end to end.
pub fn cli_bench(config: &ExperimentConfig, dir: &Path) -> Result<BenchOutcome> {
    let outcome = run_bench(config)?;
    write_outcome(&outcome, config, dir)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs_are_file_safe() {
        assert_eq!(slug("MIA Filter + KL"), "mia_filter_kl");
        assert_eq!(slug("Ours (ACS)"), "ours_acs");
    }
}
