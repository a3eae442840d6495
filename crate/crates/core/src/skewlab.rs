//! Empirical studies of the skew-divergence estimator: mean-squared error of
//! the plug-in SKL estimator over sample size and skew grids, gradient
//! coefficient distributions on trained model pairs, and deviation-from-EMA
//! traces of per-step losses.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Dataset;
use crate::divergence::{categorical_div, grad_coefficient, DivergenceKind};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::model::{ModelParams, TokenDist};

/// Counts/n empirical distribution of token-id samples.
pub fn empirical_dist(samples: &[usize], vocab_size: usize) -> TokenDist {
    assert!(!samples.is_empty());
    let mut counts = vec![0usize; vocab_size];
    for &s in samples {
        counts[s] += 1;
    }
    let n = samples.len() as f64;
    TokenDist::new_unchecked(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// One cell of the estimator-error study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseCell {
    pub alpha: f64,
    pub n: usize,
    pub trials: usize,
    /// Exact divergence between the true distributions.
    pub true_div: f64,
    /// Mean squared error over finite trials.
    pub mse: f64,
    /// Squared bias of the finite-trial mean.
    pub bias2: f64,
    /// Sample variance (M-1 denominator) over finite trials.
    pub var: f64,
    /// Trials whose estimate was infinite (support mismatch at alpha = 0).
    pub inf_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MseReport {
    pub cells: Vec<MseCell>,
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Monte-Carlo MSE of the plug-in SKL(alpha) estimator built from two
/// n-sample empirical distributions, against the exactly computed value.
/// Each trial owns a counter-derived random stream, so results do not
/// depend on evaluation order.
pub fn estimator_mse(
    p1: &TokenDist,
    p2: &TokenDist,
    alpha: f64,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<MseCell> {
    if !(0.0..=1.0).contains(&alpha) || n < 1 || trials < 1 {
        return Err(Error::InvalidArgument(format!(
            "need alpha in [0,1], n >= 1, trials >= 1; got alpha={alpha} n={n} trials={trials}"
        )));
    }
    let kind = DivergenceKind::Skl { alpha };
    let true_div = categorical_div(kind, p1, p2);
    let v = p1.len();
    let mut finite_estimates = Vec::with_capacity(trials);
    let mut inf_count = 0usize;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, trial as u64));
        let s1: Vec<usize> = (0..n).map(|_| sample_categorical(&mut rng, p1.probs())).collect();
        let s2: Vec<usize> = (0..n).map(|_| sample_categorical(&mut rng, p2.probs())).collect();
        let e1 = empirical_dist(&s1, v);
        let e2 = empirical_dist(&s2, v);
        let est = categorical_div(kind, &e1, &e2);
        if est.is_finite() {
            finite_estimates.push(est);
        } else {
            inf_count += 1;
        }
    }
    let m = finite_estimates.len();
    let (mse, bias2, var) = if m == 0 {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mse = finite_estimates
            .iter()
            .map(|e| (e - true_div).powi(2))
            .sum::<f64>()
            / m as f64;
        let mean = finite_estimates.iter().sum::<f64>() / m as f64;
        let bias2 = (mean - true_div).powi(2);
        let var = if m > 1 {
            finite_estimates
                .iter()
                .map(|e| (e - mean).powi(2))
                .sum::<f64>()
                / (m - 1) as f64
        } else {
            0.0
        };
        (mse, bias2, var)
    };
    Ok(MseCell {
        alpha,
        n,
        trials,
        true_div,
        mse,
        bias2,
        var,
        inf_count,
    })
}

/// Scales every moment by 1/(1-alpha)^2, compensating the reduced gradient
/// coefficient scale. Rejects alpha = 1.
pub fn normalized_mse(cell: &MseCell) -> Result<MseCell> {
    if cell.alpha >= 1.0 {
        return Err(Error::InvalidArgument(
            "normalization is undefined at alpha = 1".into(),
        ));
    }
    let factor = 1.0 / (1.0 - cell.alpha).powi(2);
    Ok(MseCell {
        mse: cell.mse * factor,
        bias2: cell.bias2 * factor,
        var: cell.var * factor,
        ..*cell
    })
}

impl MseReport {
    pub fn normalized(&self) -> Result<MseReport> {
        Ok(MseReport {
            cells: self
                .cells
                .iter()
                .map(normalized_mse)
                .collect::<Result<_>>()?,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,n,trials,true_div,mse,bias2,var,inf_count\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.alpha, c.n, c.trials, c.true_div, c.mse, c.bias2, c.var, c.inf_count
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Runs the full alpha x n grid.
pub fn estimator_study(
    p1: &TokenDist,
    p2: &TokenDist,
    alphas: &[f64],
    ns: &[usize],
    trials: usize,
    seed: u64,
) -> Result<MseReport> {
    let mut cells = Vec::with_capacity(alphas.len() * ns.len());
    for (ai, &alpha) in alphas.iter().enumerate() {
        for (ni, &n) in ns.iter().enumerate() {
            let cell_seed = mix_seed(seed, (ai * ns.len() + ni) as u64);
            cells.push(estimator_mse(p1, p2, alpha, n, trials, cell_seed)?);
        }
    }
    Ok(MseReport { cells })
}

/// Gradient coefficients evaluated at every realized token of the dataset's
/// continuations, teacher and student both teacher-forced on the same
/// trajectory.
pub fn coefficient_samples(
    teacher: &ModelParams,
    student: &ModelParams,
    dataset: &Dataset,
    kind: DivergenceKind,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for pair in &dataset.pairs {
        let p_dists = teacher.sequence_dists(&pair.x, &pair.y);
        let q_dists = student.sequence_dists(&pair.x, &pair.y);
        for ((p, q), &tok) in p_dists.iter().zip(q_dists.iter()).zip(&pair.y) {
            let c = grad_coefficient(kind, p.probs()[tok], q.probs()[tok])?;
            out.push(c.value);
        }
    }
    Ok(out)
}

/// Equal-width histogram over the data range.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    assert!(bins >= 1 && !values.is_empty());
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let mut idx = ((v - lo) / width) as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

pub fn write_histogram_csv(path: &Path, hist: &[(f64, f64, usize)]) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in hist {
        writeln!(out, "{lo},{hi},{c}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Divides by the median, the normalization used for comparing coefficient
/// spreads across skew values.
pub fn median_normalize(values: &[f64]) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    if median == 0.0 {
        return values.to_vec();
    }
    values.iter().map(|v| v / median).collect()
}

pub fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Per-step values, their exponential moving average, and the deviations
/// value[i] - ema[i-1].
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationTrace {
    pub values: Vec<f64>,
    pub ema: Vec<f64>,
    pub deviations: Vec<f64>,
    pub ema_decay: f64,
}

pub fn deviation_trace(values: &[f64], ema_decay: f64) -> Result<DeviationTrace> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "deviation trace needs at least 2 values".into(),
        ));
    }
    if !(0.0..1.0).contains(&ema_decay) || ema_decay == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ema decay must be in (0, 1), got {ema_decay}"
        )));
    }
    let mut ema = Vec::with_capacity(values.len());
    let mut deviations = Vec::with_capacity(values.len());
    let mut current = values[0];
    ema.push(current);
    deviations.push(0.0);
    for &v in &values[1..] {
        deviations.push(v - current);
        current = ema_decay * current + (1.0 - ema_decay) * v;
        ema.push(current);
    }
    Ok(DeviationTrace {
        values: values.to_vec(),
        ema,
        deviations,
        ema_decay,
    })
}
