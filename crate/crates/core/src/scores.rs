//! Alignment scores between a student and candidate teachers on a shared
//! probe set, the arg-max decision rule, and Acc / one-vs-rest AUC.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernel::{median_off_diagonal, rbf_from_squared, squared_distances};
use crate::numerics::special::{logsumexp, softmax};
use crate::numerics::{center, center_columns, procrustes, Centering, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointDistance {
    Kl,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointScoreConfig {
    pub delta: PointDistance,
    pub epsilon: f64,
}

impl Default for PointScoreConfig {
    fn default() -> Self {
        PointScoreConfig {
            delta: PointDistance::Kl,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandwidthPolicy {
    #[default]
    MedianHeuristic,
    Fixed {
        fixed_value: f64,
    },
}

/// Which side(s) CKA centers the kernel matrices on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CkaCentering {
    /// `H K H`: the usual estimator; `cka(x, x) = 1` exactly.
    #[default]
    TwoSided,
    /// `H K` with Frobenius norms of `H K`. The numerator agrees with the
    /// two-sided form but the normalization does not, so self-similarity
    /// falls below one.
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    PointKl,
    PointL2,
    Acs,
    Cka,
    /// Computed outside this module (e.g. the MMD baseline).
    Custom,
}

impl ScoreKind {
    pub fn name(self) -> &'static str {
        match self {
            ScoreKind::PointKl => "point_kl",
            ScoreKind::PointL2 => "point_l2",
            ScoreKind::Acs => "acs",
            ScoreKind::Cka => "cka",
            ScoreKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_kl" => Ok(ScoreKind::PointKl),
            "point_l2" => Ok(ScoreKind::PointL2),
            "acs" => Ok(ScoreKind::Acs),
            "cka" => Ok(ScoreKind::Cka),
            "custom" => Ok(ScoreKind::Custom),
            other => Err(Error::input(format!("unknown score kind {other:?}"))),
        }
    }
}

/// Knobs shared by all score kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ScoreSettings {
    pub point: PointScoreConfig,
    pub bandwidth: BandwidthPolicy,
    pub cka_centering: CkaCentering,
}

/// `KL(softmax(p) ‖ softmax(q))`, evaluated on logit differences so that
/// logits differing by a constant give exactly zero.
pub fn kl_divergence(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::shape(format!(
            "logit lengths differ: {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    if p_logits.len() < 2 {
        return Err(Error::input("KL needs at least two classes"));
    }
    // KL = Σ p_i d_i − log Σ q_i e^{d_i} for d = p − q, shifted by d_0.
    let d0 = p_logits[0] - q_logits[0];
    let d: Vec<f64> = p_logits.iter().zip(q_logits).map(|(a, b)| (a - b) - d0).collect();
    let p = softmax(p_logits);
    let first: f64 = p.iter().zip(&d).map(|(pi, di)| pi * di).sum();
    let shifted: Vec<f64> = q_logits.iter().zip(&d).map(|(q, di)| q + di).collect();
    let second = logsumexp(&shifted) - logsumexp(q_logits);
    Ok((first - second).max(0.0))
}

fn point_distance(a: &[f64], b: &[f64], delta: PointDistance) -> Result<f64> {
    match delta {
        PointDistance::Kl => kl_divergence(a, b),
        PointDistance::L2 => Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
    }
}

/// `(1/N) Σ_n 1 / (δ(student_n, teacher_n) + ε)`.
pub fn point_score(student_outputs: &Matrix, teacher_outputs: &Matrix, config: &PointScoreConfig) -> Result<f64> {
    if student_outputs.shape() != teacher_outputs.shape() {
        return Err(Error::shape(format!(
            "student outputs {:?} vs teacher outputs {:?}",
            student_outputs.shape(),
            teacher_outputs.shape()
        )));
    }
    if student_outputs.rows() == 0 {
        return Err(Error::input("point score needs at least one input"));
    }
    if !(config.epsilon > 0.0) {
        return Err(Error::input("epsilon must be positive"));
    }
    let mut total = 0.0;
    for (s, t) in student_outputs.iter_rows().zip(teacher_outputs.iter_rows()) {
        total += 1.0 / (point_distance(s, t, config.delta)? + config.epsilon);
    }
    Ok(total / student_outputs.rows() as f64)
}

/// Mean row cosine between the column-centered student outputs and the
/// centered candidate outputs after orthogonal Procrustes alignment.
pub fn acs(g: &Matrix, f: &Matrix) -> Result<f64> {
    if g.rows() != f.rows() {
        return Err(Error::shape(format!(
            "{} student rows vs {} candidate rows",
            g.rows(),
            f.rows()
        )));
    }
    if g.rows() < 2 {
        return Err(Error::input("ACS needs at least two rows"));
    }
    let gc = center_columns(g);
    let fc = center_columns(f);
    let aligned = fc.matmul(&procrustes(&gc, &fc)?.rotation)?;
    let total: f64 = gc
        .iter_rows()
        .zip(aligned.iter_rows())
        .map(|(a, b)| {
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                0.0
            } else {
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        })
        .sum();
    Ok(total / g.rows() as f64)
}

/// RBF bandwidth for `x` under `policy`. The median heuristic falls back to
/// the median of the nonzero distances when most rows coincide.
pub fn select_bandwidth(x: &Matrix, policy: &BandwidthPolicy) -> Result<f64> {
    match *policy {
        BandwidthPolicy::Fixed { fixed_value } => {
            if fixed_value > 0.0 && fixed_value.is_finite() {
                Ok(fixed_value)
            } else {
                Err(Error::InvalidBandwidth(fixed_value))
            }
        }
        BandwidthPolicy::MedianHeuristic => {
            let d = squared_distances(x).map(f64::sqrt);
            if let Some(m) = median_off_diagonal(&d) {
                return Ok(m);
            }
            let mut nonzero: Vec<f64> = (0..d.rows())
                .flat_map(|i| (i + 1..d.rows()).map(move |j| (i, j)))
                .map(|(i, j)| d[(i, j)])
                .filter(|&v| v > 0.0)
                .collect();
            if nonzero.is_empty() {
                return Err(Error::DegenerateSet("all rows are identical".into()));
            }
            nonzero.sort_by(f64::total_cmp);
            Ok(nonzero[nonzero.len() / 2])
        }
    }
}

/// CKA between RBF kernel matrices of `x` and `y`, bandwidths chosen
/// independently per set.
pub fn cka_rbf(x: &Matrix, y: &Matrix, policy: &BandwidthPolicy, centering: CkaCentering) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!("{} rows vs {} rows", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::input("CKA needs at least two rows"));
    }
    let mode = match centering {
        CkaCentering::TwoSided => Centering::TwoSided,
        CkaCentering::Left => Centering::Left,
    };
    let kx = center(
        &rbf_from_squared(&squared_distances(x), select_bandwidth(x, policy)?)?.base,
        mode,
    )?;
    let ky = center(
        &rbf_from_squared(&squared_distances(y), select_bandwidth(y, policy)?)?.base,
        mode,
    )?;
    let (nx, ny) = (kx.frobenius_norm(), ky.frobenius_norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateSet("centered kernel matrix is zero".into()));
    }
    // Tr(KX KY) = Σ_ij KX_ij KY_ji
    let n = kx.rows();
    let mut trace = 0.0;
    for i in 0..n {
        for j in 0..n {
            trace += kx[(i, j)] * ky[(j, i)];
        }
    }
    Ok(trace / (nx * ny))
}

/// Scores every candidate against the student; all outputs must come from
/// the same probe set.
pub fn score_candidates(
    student_outputs: &Matrix,
    candidate_outputs: &[Matrix],
    kind: ScoreKind,
    settings: &ScoreSettings,
) -> Result<Vec<f64>> {
    if candidate_outputs.is_empty() {
        return Err(Error::input("no candidates to score"));
    }
    if candidate_outputs.iter().any(|c| c.rows() != student_outputs.rows()) {
        return Err(Error::input(
            "candidate outputs were not computed on the student's probe set",
        ));
    }
    candidate_outputs
        .iter()
        .map(|c| match kind {
            ScoreKind::PointKl => point_score(
                student_outputs,
                c,
                &PointScoreConfig {
                    delta: PointDistance::Kl,
                    ..settings.point
                },
            ),
            ScoreKind::PointL2 => point_score(
                student_outputs,
                c,
                &PointScoreConfig {
                    delta: PointDistance::L2,
                    ..settings.point
                },
            ),
            ScoreKind::Acs => acs(student_outputs, c),
            ScoreKind::Cka => cka_rbf(student_outputs, c, &settings.bandwidth, settings.cka_centering),
            ScoreKind::Custom => Err(Error::input("custom scores are supplied by the caller")),
        })
        .collect()
}

/// Arg-max with ties going to the lowest index.
pub fn predict_teacher(score_row: &[f64]) -> Result<usize> {
    if score_row.is_empty() {
        return Err(Error::input("empty score row"));
    }
    if score_row.iter().any(|s| !s.is_finite()) {
        return Err(Error::input("score row contains non-finite values"));
    }
    Ok(crate::models::argmax(score_row))
}

pub fn accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::input(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let hits = predictions.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Scores of students (rows) against candidates (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Matrix,
    pub student_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    pub score_kind: ScoreKind,
}

pub const SCORE_CSV_HEADER: &str = "student,candidate,score_kind,score";

impl ScoreMatrix {
    pub fn new(
        values: Matrix,
        student_ids: Vec<String>,
        candidate_ids: Vec<String>,
        score_kind: ScoreKind,
    ) -> Result<Self> {
        if values.shape() != (student_ids.len(), candidate_ids.len()) {
            return Err(Error::shape(format!(
                "score values {:?} for {} students and {} candidates",
                values.shape(),
                student_ids.len(),
                candidate_ids.len()
            )));
        }
        if !values.is_finite() {
            return Err(Error::input("scores must be finite"));
        }
        Ok(ScoreMatrix {
            values,
            student_ids,
            candidate_ids,
            score_kind,
        })
    }

    pub fn predictions(&self) -> Result<Vec<usize>> {
        self.values.iter_rows().map(predict_teacher).collect()
    }

    /// Long-format CSV, one line per (student, candidate).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SCORE_CSV_HEADER);
        out.push('\n');
        for (i, s) in self.student_ids.iter().enumerate() {
            for (k, c) in self.candidate_ids.iter().enumerate() {
                out.push_str(&format!("{s},{c},{},{:?}\n", self.score_kind, self.values[(i, k)]));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == SCORE_CSV_HEADER => {}
            _ => return Err(Error::format(0, "missing score CSV header")),
        }
        let mut offset = SCORE_CSV_HEADER.len() as u64 + 1;
        let mut students: Vec<String> = Vec::new();
        let mut candidates: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        let mut kind = None;
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::format(offset, "expected four fields"));
            }
            let k: ScoreKind = fields[2].parse().map_err(|_| Error::format(offset, "bad score kind"))?;
            if kind.is_some_and(|prev| prev != k) {
                return Err(Error::format(offset, "mixed score kinds"));
            }
            kind = Some(k);
            let score: f64 = fields[3].parse().map_err(|_| Error::format(offset, "bad score"))?;
            let si = position_or_push(&mut students, fields[0]);
            let ci = position_or_push(&mut candidates, fields[1]);
            entries.push((si, ci, score));
            offset += line.len() as u64 + 1;
        }
        if entries.len() != students.len() * candidates.len() {
            return Err(Error::format(
                offset,
                "score table is not a full student x candidate grid",
            ));
        }
        let mut values = Matrix::zeros(students.len(), candidates.len());
        for (i, k, v) in entries {
            values[(i, k)] = v;
        }
        ScoreMatrix::new(values, students, candidates, kind.unwrap_or(ScoreKind::Custom))
    }
}

fn position_or_push(ids: &mut Vec<String>, id: &str) -> usize {
    match ids.iter().position(|s| s == id) {
        Some(i) => i,
        None => {
            ids.push(id.to_string());
            ids.len() - 1
        }
    }
}

/// Per-student Mann–Whitney AUC of the true teacher's score against every
/// other candidate (ties count one half), averaged over students.
pub fn auc_one_vs_rest(scores: &ScoreMatrix, truths: &[usize]) -> Result<f64> {
    let (rows, k) = scores.values.shape();
    if k < 2 {
        return Err(Error::input("AUC needs at least two candidates"));
    }
    if truths.len() != rows || rows == 0 {
        return Err(Error::input(format!("{} truths for {rows} students", truths.len())));
    }
    let mut total = 0.0;
    for (row, &t) in scores.values.iter_rows().zip(truths) {
        if t >= k {
            return Err(Error::input(format!("true teacher index {t} out of range")));
        }
        let wins: f64 = (0..k)
            .filter(|&j| j != t)
            .map(|j| {
                if row[t] > row[j] {
                    1.0
                } else if row[t] == row[j] {
                    0.5
                } else {
                    0.0
                }
            })
            .sum();
        total += wins / (k - 1) as f64;
    }
    Ok(total / rows as f64)
}
