//! Comparison methods: noise inputs filtered by energy (OOD) or by a
//! membership-style classifier (MIA), the MMD-FUSE two-sample test, and the
//! HSIC permutation test for pairwise verdicts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ClassifierModel;
use crate::numerics::kernel::{manhattan_distances, median_off_diagonal, squared_distances};
use crate::numerics::special::logsumexp;
use crate::numerics::{center, Centering, Matrix, RngStream};
use crate::scores::{select_bandwidth, BandwidthPolicy};
use crate::synthesis::InputSet;

/// Significance level used for verdicts unless configured otherwise.
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.5;

/// `-log Σ_c exp(logit_c)`.
pub fn energy_score(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::input("energy of an empty logit vector"));
    }
    Ok(-logsumexp(logits))
}

fn subset(inputs: &InputSet, rows: &[usize]) -> InputSet {
    InputSet {
        inputs: inputs.inputs.select_rows(rows),
        labels: rows.iter().map(|&i| inputs.labels[i]).collect(),
        source: inputs.source,
        seed: inputs.seed,
    }
}

/// Keeps the `⌈keep_fraction · N⌉` lowest-energy rows, in their original
/// order.
pub fn ood_filter(inputs: &InputSet, student: &ClassifierModel, keep_fraction: f64) -> Result<InputSet> {
    if inputs.is_empty() {
        return Err(Error::input("nothing to filter"));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::input(format!(
            "keep_fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let logits = student.predict(&inputs.inputs)?;
    let energies: Vec<f64> = logits.iter_rows().map(|r| -logsumexp(r)).collect();
    let keep = ((keep_fraction * inputs.len() as f64).ceil() as usize).min(inputs.len());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(subset(inputs, &kept))
}

/// Binary logistic regression on standardized features, fitted by full-batch
/// gradient descent from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticRegression {
    pub const STEPS: usize = 300;
    pub const LEARNING_RATE: f64 = 0.5;

    pub fn fit(x: &Matrix, targets: &[bool]) -> Result<Self> {
        if x.rows() != targets.len() || x.rows() == 0 {
            return Err(Error::input("one target per feature row is required"));
        }
        let mean = x.column_means();
        let scale: Vec<f64> = x
            .column_variances()
            .into_iter()
            .map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        let mut model = LogisticRegression {
            mean,
            scale,
            weights: vec![0.0; x.cols()],
            bias: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter_rows().map(|r| model.standardize(r)).collect();
        let n = x.rows() as f64;
        for _ in 0..Self::STEPS {
            let mut gw = vec![0.0; x.cols()];
            let mut gb = 0.0;
            for (row, &t) in z.iter().zip(targets) {
                let p = sigmoid(model.bias + row.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>());
                let err = p - if t { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += err * v;
                }
                gb += err;
            }
            for (w, g) in model.weights.iter_mut().zip(&gw) {
                *w -= Self::LEARNING_RATE * g / n;
            }
            model.bias -= Self::LEARNING_RATE * gb / n;
        }
        Ok(model)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        let z = self.standardize(row);
        sigmoid(self.bias + z.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// The membership-inference style filter: rows in the first half get random
/// Train/Test labels, a logistic regression learns them from the student's
/// logits, and rows of the second half predicted Train are kept. The result
/// may be empty.
pub fn mia_filter(inputs: &InputSet, student: &ClassifierModel, rng: &mut RngStream) -> Result<InputSet> {
    let n = inputs.len();
    if n < 4 {
        return Err(Error::input(format!("MIA filter needs at least four inputs, got {n}")));
    }
    let logits = student.predict(&inputs.inputs)?;
    let half = n / 2;
    let first: Vec<usize> = (0..half).collect();
    let targets: Vec<bool> = first.iter().map(|_| rng.bernoulli(0.5)).collect();
    let clf = LogisticRegression::fit(&logits.select_rows(&first), &targets)?;
    let kept: Vec<usize> = (half..n).filter(|&i| clf.probability(logits.row(i)) > 0.5).collect();
    Ok(subset(inputs, &kept))
}

/// Outcome of a permutation test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub alpha: f64,
    /// `p_value < alpha`
    pub decision: bool,
}

impl TestResult {
    fn new(statistic: f64, exceed: usize, permutations: usize) -> Self {
        let p_value = (1 + exceed) as f64 / (permutations + 1) as f64;
        TestResult {
            statistic,
            p_value,
            permutations,
            alpha: DEFAULT_ALPHA,
            decision: p_value < DEFAULT_ALPHA,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.decision = self.p_value < alpha;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("test result serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-‖a-b‖² / 2σ²)`
    Rbf,
    /// `exp(-‖a-b‖₁ / σ)`
    Laplace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandwidthGrid {
    /// `count` values log-spaced over `[median/factor, median·factor]` of
    /// the pooled pairwise distances (Euclidean for RBF, L1 for Laplace).
    MedianScaled {
        count: usize,
        factor: f64,
    },
    Explicit {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelBank {
    pub family: KernelFamily,
    pub bandwidths: BandwidthGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmdFuseConfig {
    pub kernels: Vec<KernelBank>,
    pub permutations: usize,
    pub beta: f64,
}

impl Default for MmdFuseConfig {
    fn default() -> Self {
        let grid = BandwidthGrid::MedianScaled { count: 10, factor: 8.0 };
        MmdFuseConfig {
            kernels: vec![
                KernelBank {
                    family: KernelFamily::Rbf,
                    bandwidths: grid.clone(),
                },
                KernelBank {
                    family: KernelFamily::Laplace,
                    bandwidths: grid,
                },
            ],
            permutations: 1000,
            beta: 1.0,
        }
    }
}

impl MmdFuseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::input("at least one permutation is required"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::input("beta must be positive"));
        }
        let mut any = false;
        for bank in &self.kernels {
            match &bank.bandwidths {
                BandwidthGrid::MedianScaled { count, factor } => {
                    if !(*factor >= 1.0) {
                        return Err(Error::input("bandwidth factor must be at least 1"));
                    }
                    any |= *count > 0;
                }
                BandwidthGrid::Explicit { values } => {
                    if let Some(&v) = values.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
                        return Err(Error::InvalidBandwidth(v));
                    }
                    any |= !values.is_empty();
                }
            }
        }
        if !any {
            return Err(Error::input("MMD-FUSE needs at least one kernel bandwidth"));
        }
        Ok(())
    }
}

fn log_spaced(center: f64, factor: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![center];
    }
    let (lo, hi) = ((center / factor).ln(), (center * factor).ln());
    (0..count)
        .map(|i| (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Gram matrices of every kernel in the bank over the pooled sample.
fn kernel_bank(pooled: &Matrix, config: &MmdFuseConfig) -> Vec<Matrix> {
    let sq = squared_distances(pooled);
    let euclid = sq.map(f64::sqrt);
    let l1 = manhattan_distances(pooled);
    let mut out = Vec::new();
    for bank in &config.kernels {
        let dist = match bank.family {
            KernelFamily::Rbf => &euclid,
            KernelFamily::Laplace => &l1,
        };
        let widths = match &bank.bandwidths {
            BandwidthGrid::Explicit { values } => values.clone(),
            BandwidthGrid::MedianScaled { count, factor } => {
                // identical pooled rows make every kernel constant; any width works
                let med = median_off_diagonal(dist).unwrap_or(1.0);
                log_spaced(med, *factor, *count)
            }
        };
        for w in widths {
            out.push(match bank.family {
                KernelFamily::Rbf => sq.map(|d| (-d / (2.0 * w * w)).exp()),
                KernelFamily::Laplace => l1.map(|d| (-d / w).exp()),
            });
        }
    }
    out
}

/// Unbiased MMD² for the split `in_x` (true = first sample) of a pooled
/// Gram matrix with `n` rows per side.
fn mmd_squared(k: &Matrix, in_x: &[bool], n: usize) -> f64 {
    let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
    let total = k.rows();
    for i in 0..total {
        let row = k.row(i);
        for j in 0..total {
            if i == j {
                continue;
            }
            match (in_x[i], in_x[j]) {
                (true, true) => xx += row[j],
                (false, false) => yy += row[j],
                (true, false) => xy += row[j],
                (false, true) => {}
            }
        }
    }
    let nn = n as f64;
    xx / (nn * (nn - 1.0)) + yy / (nn * (nn - 1.0)) - 2.0 * xy / (nn * nn)
}

fn fuse(values: &[f64], beta: f64) -> f64 {
    let scaled: Vec<f64> = values.iter().map(|v| beta * v).collect();
    logsumexp(&scaled) / beta
}

/// The fused statistic `(1/β) log Σ_m exp(β · MMD²_m)` without a p-value.
pub fn mmd_fuse_statistic(x: &Matrix, y: &Matrix, config: &MmdFuseConfig) -> Result<f64> {
    let (pooled, n) = pool(x, y)?;
    config.validate()?;
    let mask: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
    let bank = kernel_bank(&pooled, config);
    let values: Vec<f64> = bank.iter().map(|k| mmd_squared(k, &mask, n)).collect();
    Ok(fuse(&values, config.beta))
}

fn pool(x: &Matrix, y: &Matrix) -> Result<(Matrix, usize)> {
    if x.rows() != y.rows() {
        return Err(Error::input(format!(
            "two-sample test needs equal sizes, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::input("two-sample test needs at least two rows per sample"));
    }
    Ok((x.vcat(y)?, x.rows()))
}

/// MMD-FUSE with a permutation p-value `(1 + #{T_b ≥ T}) / (B + 1)`. The
/// kernel bank is fixed from the pooled data, so it is permutation-invariant.
pub fn mmd_fuse(x: &Matrix, y: &Matrix, config: &MmdFuseConfig, rng: &mut RngStream) -> Result<TestResult> {
    let (pooled, n) = pool(x, y)?;
    config.validate()?;
    let bank = kernel_bank(&pooled, config);
    let statistic_for = |mask: &[bool]| -> f64 {
        let values: Vec<f64> = bank.iter().map(|k| mmd_squared(k, mask, n)).collect();
        fuse(&values, config.beta)
    };
    let mask: Vec<bool> = (0..2 * n).map(|i| i < n).collect();
    let observed = statistic_for(&mask);
    let mut exceed = 0;
    let mut permuted = mask.clone();
    for _ in 0..config.permutations {
        rng.shuffle(&mut permuted);
        if statistic_for(&permuted) >= observed {
            exceed += 1;
        }
    }
    Ok(TestResult::new(observed, exceed, config.permutations))
}

/// HSIC independence test on paired rows: `Tr(K̃ L̃) / (n-1)²` with
/// median-bandwidth RBF kernels and two-sided centering; the null permutes
/// the pairing of rows.
pub fn hsic_test(x: &Matrix, y: &Matrix, permutations: usize, rng: &mut RngStream) -> Result<TestResult> {
    if x.rows() != y.rows() {
        return Err(Error::input(format!(
            "paired test needs equal sizes, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    let n = x.rows();
    if n < 4 {
        return Err(Error::input("HSIC test needs at least four pairs"));
    }
    if permutations == 0 {
        return Err(Error::input("at least one permutation is required"));
    }
    let kc = centered_rbf(x)?;
    let lc = centered_rbf(y)?;
    let norm = ((n - 1) * (n - 1)) as f64;
    // Kc is already centered, so Tr(Kc · H L_π H) = Tr(Kc · L_π).
    let stat = |perm: &[usize]| -> f64 {
        let mut t = 0.0;
        for i in 0..n {
            let krow = kc.row(i);
            let li = perm[i];
            for j in 0..n {
                t += krow[j] * lc[(perm[j], li)];
            }
        }
        t / norm
    };
    let identity: Vec<usize> = (0..n).collect();
    let observed = stat(&identity);
    let mut exceed = 0;
    let mut perm = identity;
    for _ in 0..permutations {
        rng.shuffle(&mut perm);
        if stat(&perm) >= observed {
            exceed += 1;
        }
    }
    Ok(TestResult::new(observed, exceed, permutations))
}

/// Biased HSIC statistic without the permutation loop.
pub fn hsic_statistic(x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() || x.rows() < 2 {
        return Err(Error::input("HSIC needs paired sets of at least two rows"));
    }
    let (kc, lc) = (centered_rbf(x)?, centered_rbf(y)?);
    let n = x.rows();
    let t: f64 = kc
        .as_slice()
        .iter()
        .zip(lc.transpose().as_slice())
        .map(|(a, b)| a * b)
        .sum();
    Ok(t / ((n - 1) * (n - 1)) as f64)
}

/// `H K H` for a median-heuristic RBF kernel; a set of identical rows gets
/// an all-zero centered kernel (and hence zero statistics).
fn centered_rbf(x: &Matrix) -> Result<Matrix> {
    let width = match select_bandwidth(x, &BandwidthPolicy::MedianHeuristic) {
        Ok(w) => w,
        Err(Error::DegenerateSet(_)) => 1.0,
        Err(e) => return Err(e),
    };
    let k = squared_distances(x).map(|d| (-d / (2.0 * width * width)).exp());
    center(&k, Centering::TwoSided)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{MlpArchitecture, Mode};
    use crate::synthesis::{noise_input_set, InputSource};

    fn gaussian(r: usize, c: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.normal())
    }

    fn student() -> ClassifierModel {
        let mut m = ClassifierModel::init(&MlpArchitecture::relu_64(3, 4), &mut RngStream::new(4)).unwrap();
        m.mode = Mode::Eval;
        m
    }

    #[test]
    fn energy_examples() {
        assert!((energy_score(&[0.0, 0.0]).unwrap() + 2f64.ln()).abs() < 1e-15);
        let e = 1f64.exp() + 2f64.exp() + 3f64.exp();
        assert!((energy_score(&[1.0, 2.0, 3.0]).unwrap() + e.ln()).abs() < 1e-14);
        let base = energy_score(&[0.3, -0.2]).unwrap();
        assert!((energy_score(&[2.3, 1.8]).unwrap() - (base - 2.0)).abs() < 1e-14);
        assert!(energy_score(&[0.3, 0.2]).unwrap() < base);
        assert!(energy_score(&[]).is_err());
    }

    #[test]
    fn ood_filter_keeps_lowest_energy() {
        let s = student();
        let set = noise_input_set(9, 3, &mut RngStream::new(1)).unwrap();
        assert_eq!(ood_filter(&set, &s, 1.0).unwrap(), set);
        let kept = ood_filter(&set, &s, 0.4).unwrap();
        assert_eq!(kept.len(), 4);
        let energies: Vec<f64> = s
            .predict(&set.inputs)
            .unwrap()
            .iter_rows()
            .map(|r| energy_score(r).unwrap())
            .collect();
        let mut sorted = energies.clone();
        sorted.sort_by(f64::total_cmp);
        let cutoff = sorted[3];
        let rows: Vec<usize> = kept
            .inputs
            .iter_rows()
            .map(|r| set.inputs.iter_rows().position(|x| x == r).unwrap())
            .collect();
        assert!(rows.windows(2).all(|w| w[0] < w[1]));
        assert!(rows.iter().all(|&i| energies[i] <= cutoff));
        let pair = InputSet {
            inputs: set.inputs.select_rows(&[0, 1]),
            labels: vec![0, 0],
            source: InputSource::Noise,
            seed: 0,
        };
        let one = ood_filter(&pair, &s, 0.5).unwrap();
        let lower = if energies[0] <= energies[1] { 0 } else { 1 };
        assert_eq!(one.inputs.row(0), set.inputs.row(lower));
    }

    #[test]
    fn mia_filter_protocol() {
        let s = student();
        let set = noise_input_set(40, 3, &mut RngStream::new(2)).unwrap();
        let kept = mia_filter(&set, &s, &mut RngStream::new(3)).unwrap();
        for r in kept.inputs.iter_rows() {
            let at = set.inputs.iter_rows().position(|x| x == r).unwrap();
            assert!(at >= 20);
        }
        assert_eq!(kept, mia_filter(&set, &s, &mut RngStream::new(3)).unwrap());
        assert!(mia_filter(
            &noise_input_set(3, 3, &mut RngStream::new(0)).unwrap(),
            &s,
            &mut RngStream::new(0)
        )
        .is_err());
    }

    #[test]
    fn mia_random_labels_keep_about_half() {
        let s = student();
        let mut total = 0.0;
        for rep in 0..100 {
            let set = noise_input_set(40, 3, &mut RngStream::new(1000 + rep)).unwrap();
            let kept = mia_filter(&set, &s, &mut RngStream::new(rep)).unwrap();
            total += kept.len() as f64 / 20.0;
        }
        let mean = total / 100.0;
        assert!((mean - 0.5).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn default_bank_has_twenty_kernels() {
        let cfg = MmdFuseConfig::default();
        assert_eq!(cfg.permutations, 1000);
        assert_eq!(cfg.beta, 1.0);
        let mut rng = RngStream::new(0);
        let pooled = gaussian(10, 2, &mut rng);
        assert_eq!(kernel_bank(&pooled, &cfg).len(), 20);
        let grid = log_spaced(2.0, 8.0, 10);
        assert!((grid[0] - 0.25).abs() < 1e-12 && (grid[9] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn mmd_statistic_symmetric() {
        let mut rng = RngStream::new(5);
        let x = gaussian(8, 3, &mut rng);
        let y = gaussian(8, 3, &mut rng);
        let cfg = MmdFuseConfig::default();
        let a = mmd_fuse_statistic(&x, &y, &cfg).unwrap();
        let b = mmd_fuse_statistic(&y, &x, &cfg).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(
            mmd_fuse_statistic(&x, &y.select_rows(&[0, 1]), &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn mmd_extreme_shift_hits_floor() {
        let mut rng = RngStream::new(6);
        let x = gaussian(20, 2, &mut rng);
        let med = crate::numerics::median_heuristic(&x).unwrap();
        let y = x.map(|v| v + 10.0 * med);
        let cfg = MmdFuseConfig {
            permutations: 200,
            ..MmdFuseConfig::default()
        };
        let r = mmd_fuse(&x, &y, &cfg, &mut rng).unwrap();
        assert_eq!(r.p_value, 1.0 / 201.0);
        assert!(r.decision);
    }

    #[test]
    fn hsic_perfect_dependence() {
        let mut rng = RngStream::new(7);
        let x = gaussian(50, 2, &mut rng);
        let r = hsic_test(&x, &x, 200, &mut rng).unwrap();
        assert_eq!(r.p_value, 1.0 / 201.0);
        assert!(r.p_value >= 1.0 / 201.0);
        assert!((r.statistic - hsic_statistic(&x, &x).unwrap()).abs() < 1e-12);
        assert!(hsic_test(&x, &x.select_rows(&[0, 1, 2, 3]), 10, &mut rng).is_err());
    }

    #[test]
    fn test_result_json_fields() {
        let r = TestResult::new(0.5, 3, 9).with_alpha(0.5);
        assert_eq!(r.p_value, 0.4);
        assert!(r.decision);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["statistic", "p_value", "permutations", "alpha", "decision"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
