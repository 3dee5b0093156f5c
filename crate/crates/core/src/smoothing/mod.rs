//! Randomized smoothing: Monte Carlo votes under Gaussian noise, the
//! two-phase certification protocol, abstaining prediction and the results
//! file.

mod results;
pub mod stats;

pub use results::{certified_accuracy, iso_duration, read_results, ResultRow, ResultsFile, RESULTS_HEADER};
pub use stats::{binom_test_half, lower_conf_bound, norm_ppf, radius, upper_conf_bound};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Element;
use crate::vit::{argmax_rows, VitModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::{Duration, Instant};

/// A classifier that can only be evaluated, never differentiated.
pub trait BaseClassifier: Sync {
    fn num_classes(&self) -> usize;
    /// Length of one flattened input.
    fn input_len(&self) -> usize;
    /// Top-1 labels for `count` inputs packed back to back in `inputs`.
    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>>;
}

impl<T: Element> BaseClassifier for VitModel<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_len(&self) -> usize {
        self.config.image_len()
    }

    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>> {
        let logits = self.forward_pixels(inputs, count)?;
        Ok(argmax_rows(logits.data(), self.config.num_classes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub batch: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams { sigma: 0.25, n0: 100, n: 1000, alpha: 0.001, batch: 128 }
    }
}

impl SmoothingParams {
    pub fn new(sigma: f64, n0: u64, n: u64, alpha: f64) -> Self {
        SmoothingParams { sigma, n0, n, alpha, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("smoothing.sigma", format!("must be > 0, got {}", self.sigma)));
        }
        if self.n0 == 0 {
            return Err(Error::config("smoothing.n0", "must be ≥ 1"));
        }
        if self.n == 0 {
            return Err(Error::config("smoothing.n", "must be ≥ 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("smoothing.alpha", format!("must lie in (0,1), got {}", self.alpha)));
        }
        if self.batch == 0 {
            return Err(Error::config("smoothing.batch", "must be ≥ 1"));
        }
        Ok(())
    }
}

/// Identifies the counter-based noise stream of one example: sample `j`
/// draws from `stream(seed, domain, example, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub domain: Domain,
    pub example: u64,
}

/// Writes the `j`-th noisy copy `x + δ_j` into `out`.
pub fn noisy_copy(x: &[f32], sigma: f32, key: NoiseKey, j: u64, out: &mut [f32]) {
    let mut r = rng::stream(key.seed, key.domain, key.example, j);
    rng::fill_gaussian(&mut r, sigma, out);
    for (o, &v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// Class histogram of `F(x + δ)` over `k` draws, in batches of `batch`.
pub fn sample_counts<C: BaseClassifier + ?Sized>(
    model: &C,
    x: &[f32],
    sigma: f64,
    k: u64,
    key: NoiseKey,
    batch: usize,
) -> Result<Vec<u64>> {
    let d = model.input_len();
    if x.len() != d {
        return Err(Error::shape("sample_counts", format!("input has {} values, model takes {d}", x.len())));
    }
    if batch == 0 {
        return Err(Error::Contract("batch size must be ≥ 1".into()));
    }
    let mut counts = vec![0u64; model.num_classes()];
    let mut buf = vec![0f32; batch.min(k as usize).max(1) * d];
    let mut done = 0u64;
    while done < k {
        let b = (k - done).min(batch as u64) as usize;
        for (i, chunk) in buf[..b * d].chunks_exact_mut(d).enumerate() {
            noisy_copy(x, sigma as f32, key, done + i as u64, chunk);
        }
        for c in model.classify(&buf[..b * d], b)? {
            counts[c] += 1;
        }
        done += b as u64;
    }
    Ok(counts)
}

/// Index of the largest count; ties go to the lowest index.
pub fn top_class(counts: &[u64]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CertifyOutcome {
    /// `None` means abstain.
    pub prediction: Option<usize>,
    pub radius: f64,
    pub pa_lower: f64,
    /// Estimation-phase counts.
    pub counts: Vec<u64>,
    pub wall_time: Duration,
}

impl CertifyOutcome {
    pub fn abstained(&self) -> bool {
        self.prediction.is_none()
    }
}

/// Two-phase certification of `x`: `n0` selection draws pick the class, `n`
/// fresh estimation draws bound its probability.
pub fn certify<C: BaseClassifier + ?Sized>(
    model: &C,
    x: &[f32],
    params: &SmoothingParams,
    seed: u64,
    example: u64,
) -> Result<CertifyOutcome> {
    params.validate()?;
    let start = Instant::now();
    let key = |domain| NoiseKey { seed, domain, example };
    let select = sample_counts(model, x, params.sigma, params.n0, key(Domain::Selection), params.batch)?;
    let c_a = top_class(&select);
    let counts = sample_counts(model, x, params.sigma, params.n, key(Domain::Estimation), params.batch)?;
    let pa_lower = lower_conf_bound(counts[c_a], params.n, params.alpha)?;
    let (prediction, r) = if pa_lower > 0.5 {
        (Some(c_a), params.sigma * norm_ppf(pa_lower.clamp(stats::PROB_CLAMP, 1.0 - stats::PROB_CLAMP)))
    } else {
        (None, 0.0)
    };
    Ok(CertifyOutcome { prediction, radius: r, pa_lower, counts, wall_time: start.elapsed() })
}

/// Abstaining vote: the top class is returned only if the exact two-sided
/// binomial test of top-vs-runner-up counts rejects a fair coin at `alpha`.
pub fn predict_from_counts(counts: &[u64], alpha: f64) -> Option<usize> {
    let top = top_class(counts);
    let second = counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &c)| c)
        .max()
        .unwrap_or(0);
    let na = counts[top];
    if binom_test_half(na, na + second) <= alpha {
        Some(top)
    } else {
        None
    }
}

pub fn predict<C: BaseClassifier + ?Sized>(
    model: &C,
    x: &[f32],
    params: &SmoothingParams,
    seed: u64,
    example: u64,
) -> Result<Option<usize>> {
    params.validate()?;
    let key = NoiseKey { seed, domain: Domain::Prediction, example };
    let counts = sample_counts(model, x, params.sigma, params.n, key, params.batch)?;
    Ok(predict_from_counts(&counts, params.alpha))
}

/// Options for a dataset-wide certification run.
#[derive(Clone, Debug)]
pub struct CertifyRun {
    pub seed: u64,
    pub skip: usize,
    /// Only indices below this bound are certified.
    pub max: Option<usize>,
    pub workers: usize,
    /// Provenance lines written as `# key=value` before the header.
    pub provenance: Vec<(String, String)>,
}

impl Default for CertifyRun {
    fn default() -> Self {
        CertifyRun { seed: 0, skip: 1, max: None, workers: 1, provenance: Vec::new() }
    }
}

/// Certifies every `skip`-th example below `max`, appending rows to `out` in
/// index order. Rows already present in `out` are kept and their indices
/// skipped, so an interrupted run resumes where it stopped.
pub fn certify_dataset<C: BaseClassifier + ?Sized>(
    model: &C,
    dataset: &Dataset,
    params: &SmoothingParams,
    run: &CertifyRun,
    out: &Path,
) -> Result<Vec<ResultRow>> {
    params.validate()?;
    if run.skip == 0 {
        return Err(Error::config("certify.skip", "must be ≥ 1"));
    }
    if dataset.image_len() != model.input_len() {
        return Err(Error::shape(
            "certify_dataset",
            format!("dataset images have {} values, model takes {}", dataset.image_len(), model.input_len()),
        ));
    }
    let mut file = ResultsFile::open(out, &run.provenance)?;
    let mut rows = file.existing().to_vec();
    let last_done = rows.last().map(|r| r.idx);
    let bound = run.max.unwrap_or(usize::MAX).min(dataset.len());
    let todo: Vec<usize> = (0..bound)
        .step_by(run.skip)
        .filter(|&i| last_done.is_none_or(|l| i > l))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(run.workers.max(1))
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    for chunk in todo.chunks(run.workers.max(1) * 4) {
        let outcomes: Vec<Result<CertifyOutcome>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|&i| certify(model, dataset.image(i), params, run.seed, i as u64))
                .collect()
        });
        for (&i, outcome) in chunk.iter().zip(outcomes) {
            let o = outcome?;
            let label = dataset.labels[i];
            let row = ResultRow {
                idx: i,
                label,
                predict: o.prediction,
                radius: o.radius,
                correct: o.prediction == Some(label),
                time: o.wall_time,
            };
            file.append(&row)?;
            rows.push(row);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Linear two-class rule on the first coordinate.
    struct Threshold(f32);

    impl BaseClassifier for Threshold {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_len(&self) -> usize {
            4
        }
        fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>> {
            Ok(inputs.chunks_exact(4).take(count).map(|x| (x[0] > self.0) as usize).collect())
        }
    }

    fn key() -> NoiseKey {
        NoiseKey { seed: 5, domain: Domain::Estimation, example: 3 }
    }

    #[test]
    fn counts_sum_and_batch_invariance() {
        let m = Threshold(0.1);
        let x = [0.2, 0.0, 0.0, 0.0];
        let a = sample_counts(&m, &x, 0.5, 777, key(), 1).unwrap();
        let b = sample_counts(&m, &x, 0.5, 777, key(), 128).unwrap();
        let c = sample_counts(&m, &x, 0.5, 777, key(), 777).unwrap();
        assert_eq!(a.iter().sum::<u64>(), 777);
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn zero_noise_is_the_base_prediction() {
        let counts = sample_counts(&Threshold(0.0), &[1.0, 0.0, 0.0, 0.0], 1e-30, 50, key(), 7).unwrap();
        assert_eq!(counts, vec![0, 50]);
    }

    #[test]
    fn constant_classifier_certificate() {
        let m = Threshold(-1e9);
        let p = SmoothingParams::new(0.5, 10, 1000, 0.001);
        let o = certify(&m, &[0.0; 4], &p, 1, 0).unwrap();
        let pa = 0.001f64.powf(1.0 / 1000.0);
        assert_eq!(o.prediction, Some(1));
        assert_eq!(o.pa_lower, pa);
        assert!((o.radius - 0.5 * norm_ppf(pa)).abs() < 1e-12);
    }

    #[test]
    fn predict_votes() {
        assert_eq!(predict_from_counts(&[100, 0], 0.001), Some(0));
        assert_eq!(predict_from_counts(&[60, 40], 0.001), None);
        assert_eq!(predict_from_counts(&[30, 30, 0], 0.5), None);
        assert_eq!(predict_from_counts(&[0, 1, 99], 0.001), Some(2));
    }

    #[test]
    fn top_class_breaks_ties_low() {
        assert_eq!(top_class(&[3, 7, 7, 1]), 1);
        assert_eq!(top_class(&[0, 0]), 0);
    }

    #[test]
    fn params_are_validated() {
        assert!(SmoothingParams::new(0.0, 1, 1, 0.1).validate().is_err());
        assert!(SmoothingParams::new(0.1, 0, 1, 0.1).validate().is_err());
        assert!(SmoothingParams::new(0.1, 1, 1, 1.0).validate().is_err());
        assert!(SmoothingParams::default().validate().is_ok());
    }
}
