//! One seed's worth of models: the mixture, its train/test splits, the
//! teacher pool, and the teacher × architecture grid of distilled students.

use ddetect::distill::{distill_student, DistillConfig};
use ddetect::models::{train_classifier, ClassifierModel, Dataset, GaussianMixture, TrainConfig};
use ddetect::pipeline::{CandidateSet, StudentEntry};
use ddetect::RngStream;

use crate::config::ExperimentConfig;
use crate::error::Result;

// Stream indices under the seed's root stream.
const MIXTURE: u64 = 0;
const TRAIN_SPLIT: u64 = 1;
const TEST_SPLIT: u64 = 2;
const TEACHERS: u64 = 100;
const INDEPENDENT: u64 = 150;
const STUDENTS: u64 = 200;
pub(crate) const SYNTHESIS: u64 = 300;
pub(crate) const PROBES: u64 = 400;

#[derive(Debug, Clone)]
pub struct DataWorld {
    pub seed: u64,
    pub mixture: GaussianMixture,
    pub train: Dataset,
    pub test: Dataset,
}

impl DataWorld {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let root = RngStream::new(seed);
        let d = &config.dataset;
        let mixture = GaussianMixture::new(d.classes, d.dim, d.spread, &mut root.split(MIXTURE))?;
        let train = mixture.sample(d.train_per_class, &mut root.split(TRAIN_SPLIT))?;
        let test = mixture.sample(d.test_per_class, &mut root.split(TEST_SPLIT))?;
        Ok(DataWorld {
            seed,
            mixture,
            train,
            test,
        })
    }

    pub fn root(&self) -> RngStream {
        RngStream::new(self.seed)
    }

    fn train_config(&self, base: &TrainConfig, stream: u64) -> TrainConfig {
        TrainConfig {
            seed: self.root().split(stream).seed(),
            ..base.clone()
        }
    }

    /// Teacher `i` of the pool, trained on the training split.
    pub fn train_teacher(&self, config: &ExperimentConfig, i: usize) -> Result<ClassifierModel> {
        let arch = config.architecture(&config.teachers[i])?;
        let cfg = self.train_config(&config.training, TEACHERS + i as u64);
        Ok(train_classifier(&arch, &self.train, &cfg)?.0.eval())
    }

    /// A model with teacher `i`'s architecture trained from a different
    /// initialization; the "unrelated" reference of the λ-sweep.
    pub fn train_independent(&self, config: &ExperimentConfig, i: usize) -> Result<ClassifierModel> {
        let arch = config.architecture(&config.teachers[i])?;
        let cfg = self.train_config(&config.training, INDEPENDENT + i as u64);
        Ok(train_classifier(&arch, &self.train, &cfg)?.0.eval())
    }

    /// Student with architecture `s` distilled from `teacher` (index `t`).
    pub fn distill(
        &self,
        config: &ExperimentConfig,
        distill: &DistillConfig,
        teacher: &ClassifierModel,
        t: usize,
        s: usize,
    ) -> Result<ClassifierModel> {
        let arch = config.architecture(&config.students[s])?;
        let stream = STUDENTS + (t * config.students.len() + s) as u64;
        let cfg = DistillConfig {
            train: self.train_config(&distill.train, stream),
            ..distill.clone()
        };
        Ok(distill_student(teacher, &arch, &self.train, &cfg)?.eval())
    }
}

pub fn student_id(config: &ExperimentConfig, t: usize, s: usize) -> String {
    format!("{}<-{}#{t}", config.students[s], config.teachers[t])
}

/// The full benchmark world for one seed.
pub struct World {
    pub data: DataWorld,
    pub candidates: CandidateSet,
    pub students: Vec<StudentEntry>,
}

impl World {
    pub fn build(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let data = DataWorld::new(config, seed)?;
        let teachers = (0..config.teachers.len())
            .map(|i| data.train_teacher(config, i))
            .collect::<Result<Vec<_>>>()?;
        let mut students = Vec::with_capacity(teachers.len() * config.students.len());
        for (t, teacher) in teachers.iter().enumerate() {
            for s in 0..config.students.len() {
                students.push(StudentEntry {
                    id: student_id(config, t, s),
                    model: data.distill(config, &config.distillation, teacher, t, s)?,
                    truth: Some(t),
                });
            }
        }
        let candidates = CandidateSet::new(
            teachers
                .into_iter()
                .enumerate()
                .map(|(i, m)| (format!("{}#{i}", config.teachers[i]), m))
                .collect(),
        )?;
        Ok(World {
            data,
            candidates,
            students,
        })
    }
}
