//! Black-box smoothing: a Coordinator paints an input-dependent pixel prompt
//! onto each image before the noise is added, and its parameters are trained
//! with SPSA against a classifier that only answers score queries.
//!
//! The decorated input is `x̃ = clip(x + ε·h_φ(x), 0, 1) + δ`, where
//! `h_φ(x) = g_φd(f(x), φ_t)`, `f` is a frozen feature map (patch embedding
//! plus the first block of a pretrained ViT, mean-pooled) and `g` is a small
//! two-layer decoder whose coarse output is upsampled to the image grid.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::Element;
use crate::vit::VitModel;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Query-only access to a classifier: images in, class scores out.
pub trait ScoreOracle: Sync {
    fn num_classes(&self) -> usize;
    fn input_len(&self) -> usize;
    /// Row-major `count × num_classes` scores, read as logits.
    fn scores(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>>;
}

impl<T: Element> ScoreOracle for VitModel<T> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn input_len(&self) -> usize {
        self.config.image_len()
    }

    fn scores(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>> {
        let logits = self.forward_pixels(inputs, count)?;
        Ok(logits.data().iter().map(|v| v.as_f64() as f32).collect())
    }
}

/// Wraps an oracle and counts the batches it answers.
pub struct CountingOracle<'a, O: ?Sized> {
    pub inner: &'a O,
    queries: AtomicUsize,
}

impl<'a, O: ScoreOracle + ?Sized> CountingOracle<'a, O> {
    pub fn new(inner: &'a O) -> Self {
        CountingOracle { inner, queries: AtomicUsize::new(0) }
    }

    pub fn queries(&self) -> usize {
        self.queries.load(Ordering::Relaxed)
    }
}

impl<O: ScoreOracle + ?Sized> ScoreOracle for CountingOracle<'_, O> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn input_len(&self) -> usize {
        self.inner.input_len()
    }
    fn scores(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        self.inner.scores(inputs, count)
    }
}

/// Step sizes `a_i = a/(A+i)^α` and perturbations `c_i = c/i^γ` for
/// `i = 1, 2, …`, plus the momentum factor β.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpsaSchedule {
    pub a: f64,
    pub big_a: f64,
    pub alpha: f64,
    pub c: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for SpsaSchedule {
    fn default() -> Self {
        SpsaSchedule { a: 0.01, big_a: 100.0, alpha: 0.602, c: 0.1, gamma: 0.101, beta: 0.9 }
    }
}

impl SpsaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::config("spsa.a", "must be > 0"));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return Err(Error::config("spsa.c", "must lie in (0,1]"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("spsa.beta", "must lie in [0,1]"));
        }
        if self.big_a < 0.0 || self.alpha < 0.0 || self.gamma < 0.0 {
            return Err(Error::config("spsa", "A, α and γ must be ≥ 0"));
        }
        Ok(())
    }

    pub fn a_i(&self, i: usize) -> f64 {
        self.a / (self.big_a + i as f64).powf(self.alpha)
    }

    pub fn c_i(&self, i: usize) -> f64 {
        self.c / (i as f64).powf(self.gamma)
    }
}

/// Two-query SPSA estimate at `phi`:
/// `ĝ = (L(φ + cΔ) − L(φ − cΔ)) / (2c) · Δ` with Rademacher `Δ`.
pub fn spsa_gradient<F, R>(loss: &mut F, phi: &[f64], c: f64, rng: &mut R) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng,
{
    if !(c > 0.0) {
        return Err(Error::Contract(format!("perturbation size must be > 0, got {c}")));
    }
    let delta: Vec<f64> = (0..phi.len()).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let plus: Vec<f64> = phi.iter().zip(&delta).map(|(p, d)| p + c * d).collect();
    let minus: Vec<f64> = phi.iter().zip(&delta).map(|(p, d)| p - c * d).collect();
    let diff = (loss(&plus)? - loss(&minus)?) / (2.0 * c);
    // Δ⁻¹ = Δ for ±1 entries.
    Ok(delta.iter().map(|d| diff * d).collect())
}

/// SPSA with momentum from `phi0`. Step `i` evaluates the estimate at the
/// look-ahead point: `m ← β·m − a_i·ĝ(φ + β·m)`, `φ ← φ + m`. `loss` receives
/// the step index so callers can fix per-step randomness.
pub fn spsa_minimize<F>(
    mut loss: F,
    phi0: Vec<f64>,
    schedule: &SpsaSchedule,
    steps: usize,
    seed: u64,
    mut on_step: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    schedule.validate()?;
    let mut phi = phi0;
    let mut m = vec![0.0; phi.len()];
    for i in 1..=steps {
        let ahead: Vec<f64> = phi.iter().zip(&m).map(|(p, v)| p + schedule.beta * v).collect();
        let mut r = rng::stream(seed, Domain::Perturbation, i as u64, 0);
        let g = spsa_gradient(&mut |p| loss(i, p), &ahead, schedule.c_i(i), &mut r)?;
        let a = schedule.a_i(i);
        for ((mj, pj), gj) in m.iter_mut().zip(phi.iter_mut()).zip(&g) {
            *mj = schedule.beta * *mj - a * gj;
            *pj += *mj;
        }
        on_step(i, &phi);
    }
    Ok(phi)
}

/// Serialisable form of a [`Coordinator`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinatorState {
    pub backbone_sha256: String,
    pub epsilon: f64,
    pub hidden: usize,
    pub trigger_dim: usize,
    pub coarse: usize,
    pub phi: Vec<f64>,
}

/// Pixel-prompt generator with a frozen encoder and a trainable decoder.
#[derive(Clone, Debug)]
pub struct Coordinator {
    encoder: VitModel<f32>,
    pub epsilon: f64,
    pub hidden: usize,
    pub trigger_dim: usize,
    /// Side of the decoder's coarse output grid.
    pub coarse: usize,
    /// `[W1 | b1 | W2 | b2 | φ_t]`, see [`Coordinator::num_parameters`].
    pub phi: Vec<f64>,
}

impl Coordinator {
    pub const HIDDEN: usize = 32;
    pub const TRIGGER: usize = 16;

    /// Builds the encoder from the first block of `backbone` and a decoder
    /// with small random weights.
    pub fn new(backbone: &VitModel<f32>, epsilon: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::config("blackbox.epsilon", format!("must lie in [0,1], got {epsilon}")));
        }
        let encoder = backbone.truncated(1)?;
        let s = encoder.config.image_size;
        let coarse = if s % 8 == 0 { 8 } else { s };
        let mut c = Coordinator {
            encoder,
            epsilon,
            hidden: Self::HIDDEN,
            trigger_dim: Self::TRIGGER,
            coarse,
            phi: Vec::new(),
        };
        let (d, t, h, o) = (c.feature_dim(), c.trigger_dim, c.hidden, c.coarse_len());
        let mut r = rng::stream(seed, Domain::Init, 0xC0, 0);
        let mut gauss = |n: usize, std: f64| -> Vec<f64> {
            (0..n).map(|_| std * rng::standard_normal(&mut r)).collect::<Vec<f64>>()
        };
        let mut phi = gauss(h * (d + t), (1.0 / (d + t) as f64).sqrt());
        phi.extend(vec![0.0; h]);
        phi.extend(gauss(o * h, 0.01));
        phi.extend(vec![0.0; o]);
        phi.extend(gauss(t, 1.0));
        c.phi = phi;
        Ok(c)
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.config.embed_dim
    }

    fn coarse_len(&self) -> usize {
        self.encoder.config.channels * self.coarse * self.coarse
    }

    pub fn image_len(&self) -> usize {
        self.encoder.config.image_len()
    }

    /// Size of `phi`: `h(d+t) + h + o·h + o + t` with `o = C·coarse²`.
    pub fn num_parameters(&self) -> usize {
        let (d, t, h, o) = (self.feature_dim(), self.trigger_dim, self.hidden, self.coarse_len());
        h * (d + t) + h + o * h + o + t
    }

    /// Encoder features `z_x` for `count` images, `count × d`.
    pub fn encode(&self, images: &[f32], count: usize) -> Result<Vec<f32>> {
        Ok(self.encoder.features(images, count)?.into_data())
    }

    /// `h_φ` for one feature vector, image-shaped with values in (−1, 1).
    pub fn prompt(&self, phi: &[f64], z: &[f32]) -> Vec<f32> {
        let (d, t, h, o) = (self.feature_dim(), self.trigger_dim, self.hidden, self.coarse_len());
        let (w1, rest) = phi.split_at(h * (d + t));
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(o * h);
        let (b2, trigger) = rest.split_at(o);
        let input: Vec<f64> = z.iter().map(|&v| v as f64).chain(trigger.iter().copied()).collect();
        let hid: Vec<f64> = (0..h)
            .map(|j| {
                let row = &w1[j * (d + t)..(j + 1) * (d + t)];
                (b1[j] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        let coarse: Vec<f64> = (0..o)
            .map(|k| (b2[k] + w2[k * h..(k + 1) * h].iter().zip(&hid).map(|(w, x)| w * x).sum::<f64>()).tanh())
            .collect();
        let c = &self.encoder.config;
        let (s, g) = (c.image_size, self.coarse);
        let f = s / g;
        let mut out = vec![0f32; c.image_len()];
        for ch in 0..c.channels {
            for y in 0..s {
                for x in 0..s {
                    out[ch * s * s + y * s + x] = coarse[ch * g * g + (y / f) * g + (x / f)] as f32;
                }
            }
        }
        out
    }

    /// Everything but the encoder, which is rebuilt from the backbone.
    pub fn state(&self) -> CoordinatorState {
        CoordinatorState {
            backbone_sha256: self.encoder.backbone_sha256(),
            epsilon: self.epsilon,
            hidden: self.hidden,
            trigger_dim: self.trigger_dim,
            coarse: self.coarse,
            phi: self.phi.clone(),
        }
    }

    /// Rebuilds a coordinator saved with [`Coordinator::state`] on the same
    /// backbone.
    pub fn from_state(backbone: &VitModel<f32>, state: CoordinatorState) -> Result<Self> {
        let mut c = Coordinator::new(backbone, state.epsilon, 0)?;
        if c.encoder.backbone_sha256() != state.backbone_sha256 {
            return Err(Error::Checkpoint("coordinator was trained against a different backbone".into()));
        }
        if c.encoder.config.image_size % state.coarse != 0 {
            return Err(Error::Checkpoint(format!("coarse grid {} does not divide the image", state.coarse)));
        }
        c.hidden = state.hidden;
        c.trigger_dim = state.trigger_dim;
        c.coarse = state.coarse;
        if state.phi.len() != c.num_parameters() {
            return Err(Error::Checkpoint(format!(
                "coordinator has {} parameters, its shape needs {}",
                state.phi.len(),
                c.num_parameters()
            )));
        }
        c.phi = state.phi;
        Ok(c)
    }

    /// `clip(x + ε·h_φ(x), 0, 1)` for images whose features are `z`.
    pub fn paint(&self, phi: &[f64], images: &[f32], z: &[f32]) -> Vec<f32> {
        let (n, d) = (self.image_len(), self.feature_dim());
        let eps = self.epsilon as f32;
        let mut out = Vec::with_capacity(images.len());
        for (img, zi) in images.chunks_exact(n).zip(z.chunks_exact(d)) {
            if eps == 0.0 {
                out.extend_from_slice(img);
                continue;
            }
            let h = self.prompt(phi, zi);
            out.extend(img.iter().zip(&h).map(|(&x, &p)| (x + eps * p).clamp(0.0, 1.0)));
        }
        out
    }

    /// The decorated, noisy input `clip(x + ε·h_φ(x)) + δ`.
    pub fn decorate<R: Rng>(&self, images: &[f32], count: usize, sigma: f64, rng: &mut R) -> Result<Vec<f32>> {
        let z = self.encode(images, count)?;
        let mut out = self.paint(&self.phi, images, &z);
        add_noise(&mut out, sigma, rng);
        Ok(out)
    }
}

fn add_noise<R: Rng>(x: &mut [f32], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let mut noise = vec![0f32; x.len()];
    rng::fill_gaussian(rng, sigma as f32, &mut noise);
    for (v, n) in x.iter_mut().zip(noise) {
        *v += n;
    }
}

/// The decorated classifier `x ↦ F(clip(x + ε·h_φ(x)))`, ready for smoothing.
pub struct Decorated<'a, O: ?Sized> {
    pub coordinator: &'a Coordinator,
    pub oracle: &'a O,
}

impl<O: ScoreOracle + ?Sized> Decorated<'_, O> {
    /// Pre-noise decorated images.
    pub fn paint(&self, images: &[f32], count: usize) -> Result<Vec<f32>> {
        let z = self.coordinator.encode(images, count)?;
        Ok(self.coordinator.paint(&self.coordinator.phi, images, &z))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpsaConfig {
    pub sigma: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Extra attempts after a failed query before giving up.
    pub retries: u32,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        SpsaConfig { sigma: 0.25, steps: 1000, batch_size: 64, seed: 0, retries: 2 }
    }
}

fn query_with_retry<O: ScoreOracle + ?Sized>(oracle: &O, x: &[f32], count: usize, retries: u32) -> Result<Vec<f32>> {
    let mut last = None;
    for _ in 0..=retries {
        match oracle.scores(x, count) {
            Ok(s) if s.len() == count * oracle.num_classes() => return Ok(s),
            Ok(s) => {
                last = Some(Error::Query(format!(
                    "oracle returned {} scores for {count}×{}",
                    s.len(),
                    oracle.num_classes()
                )))
            }
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Query(format!(
        "giving up after {} attempts: {}",
        retries + 1,
        last.map_or_else(String::new, |e| e.to_string())
    )))
}

/// Mean softmax cross-entropy of score rows against `labels`.
pub fn cross_entropy(scores: &[f32], labels: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for (row, &y) in scores.chunks_exact(classes).zip(labels) {
        let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    total / labels.len() as f64
}

/// Trains `coordinator.phi` by SPSA on the noisy cross-entropy of `oracle`.
/// Each step draws a batch and one noise sample shared by both queries, so
/// the oracle answers exactly two batches per step. Returns the per-step
/// loss (mean of the two queries).
pub fn spsa_train<O: ScoreOracle + ?Sized>(
    coordinator: &mut Coordinator,
    oracle: &O,
    dataset: &Dataset,
    schedule: &SpsaSchedule,
    config: &SpsaConfig,
) -> Result<Vec<f64>> {
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if dataset.image_len() != oracle.input_len() || dataset.image_len() != coordinator.image_len() {
        return Err(Error::shape("spsa_train", "dataset, coordinator and oracle disagree on image size"));
    }
    let classes = oracle.num_classes();
    let z_all = coordinator.encode(&dataset.images, dataset.len())?;
    let d = coordinator.feature_dim();
    let b = config.batch_size.clamp(1, dataset.len());
    let mut trace = Vec::with_capacity(config.steps);
    let mut cached: Option<(usize, Vec<usize>, Vec<f32>)> = None;
    let mut pair = Vec::with_capacity(2);
    let coord = coordinator.clone();
    let phi = spsa_minimize(
        |step, phi| {
            if cached.as_ref().is_none_or(|c| c.0 != step) {
                let mut r = rng::stream(config.seed, Domain::Shuffle, step as u64, 1);
                let idx = index::sample(&mut r, dataset.len(), b).into_vec();
                let mut noise = vec![0f32; b * dataset.image_len()];
                add_noise(&mut noise, config.sigma, &mut rng::stream(config.seed, Domain::TrainNoise, step as u64, 1));
                cached = Some((step, idx, noise));
                pair.clear();
            }
            let (_, idx, noise) = cached.as_ref().unwrap();
            let (images, labels) = dataset.gather(idx);
            let z: Vec<f32> = idx.iter().flat_map(|&i| z_all[i * d..(i + 1) * d].iter().copied()).collect();
            let mut x = coord.paint(phi, &images, &z);
            for (v, n) in x.iter_mut().zip(noise) {
                *v += n;
            }
            let scores = query_with_retry(oracle, &x, b, config.retries)?;
            let loss = cross_entropy(&scores, &labels, classes);
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("black-box loss became {loss} at step {step}")));
            }
            pair.push(loss);
            if pair.len() == 2 {
                trace.push(0.5 * (pair[0] + pair[1]));
            }
            Ok(loss)
        },
        coordinator.phi.clone(),
        schedule,
        config.steps,
        config.seed,
        |_, _| {},
    )?;
    coordinator.phi = phi;
    Ok(trace)
}

/// Noisy top-1 accuracy of the decorated classifier, one draw per example.
pub fn evaluate_decorated<O: ScoreOracle + ?Sized>(
    coordinator: &Coordinator,
    oracle: &O,
    dataset: &Dataset,
    sigma: f64,
    seed: u64,
) -> Result<f64> {
    let classes = oracle.num_classes();
    let mut correct = 0;
    for start in (0..dataset.len()).step_by(256) {
        let idx: Vec<usize> = (start..(start + 256).min(dataset.len())).collect();
        let (images, labels) = dataset.gather(&idx);
        let mut x = Decorated { coordinator, oracle }.paint(&images, idx.len())?;
        add_noise(&mut x, sigma, &mut rng::stream(seed, Domain::EvalNoise, start as u64, 1));
        let scores = oracle.scores(&x, idx.len())?;
        for (row, y) in scores.chunks_exact(classes).zip(labels) {
            let top = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            correct += (top == y) as usize;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

impl<O: ScoreOracle + ?Sized> crate::smoothing::BaseClassifier for Decorated<'_, O> {
    fn num_classes(&self) -> usize {
        self.oracle.num_classes()
    }

    fn input_len(&self) -> usize {
        self.oracle.input_len()
    }

    /// Classifies already-painted inputs; smoothing adds noise after the
    /// prompt, so certification runs on [`Decorated::paint`] output.
    fn classify(&self, inputs: &[f32], count: usize) -> Result<Vec<usize>> {
        let classes = self.oracle.num_classes();
        let scores = self.oracle.scores(inputs, count)?;
        Ok(scores
            .chunks_exact(classes)
            .map(|row| row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b }))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DeskFamily, DeskSpec, Split};
    use crate::vit::VitConfig;

    fn tiny() -> VitModel<f32> {
        let cfg = VitConfig {
            image_size: 8,
            channels: 3,
            patch_size: 4,
            embed_dim: 8,
            num_heads: 2,
            depth: 2,
            mlp_ratio: 2,
            num_classes: 10,
        };
        VitModel::new(cfg, 3).unwrap()
    }

    #[test]
    fn one_dimensional_quadratic_is_exact() {
        let mut r = rng::stream(0, Domain::Perturbation, 0, 0);
        for &phi in &[-3.0, 0.0, 0.7, 12.5] {
            for &c in &[0.01, 0.1, 1.0] {
                let g = spsa_gradient(&mut |p: &[f64]| Ok(p[0] * p[0]), &[phi], c, &mut r).unwrap();
                assert!((g[0] - 2.0 * phi).abs() <= 1e-12 * (2.0 * phi).abs().max(1.0), "{} vs {}", g[0], 2.0 * phi);
            }
        }
    }

    #[test]
    fn constant_loss_gives_zero() {
        let mut r = rng::stream(0, Domain::Perturbation, 0, 0);
        let g = spsa_gradient(&mut |_: &[f64]| Ok(4.2), &[1.0, 2.0, 3.0], 0.1, &mut r).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(spsa_gradient(&mut |_: &[f64]| Ok(0.0), &[1.0], 0.0, &mut r).is_err());
    }

    #[test]
    fn schedule_is_decreasing() {
        let s = SpsaSchedule::default();
        assert!(s.a_i(1) > s.a_i(2) && s.c_i(1) > s.c_i(2));
        assert!(s.c_i(1) <= 1.0);
        assert!(SpsaSchedule { beta: 1.5, ..s }.validate().is_err());
    }

    #[test]
    fn zero_epsilon_and_sigma_is_identity() {
        let m = tiny();
        let c = Coordinator::new(&m, 0.0, 1).unwrap();
        let ds = DeskSpec::new(DeskFamily::Blobs, 8, 4, 0).generate(Split::Test).unwrap();
        let mut r = rng::stream(0, Domain::EvalNoise, 0, 0);
        assert_eq!(c.decorate(&ds.images, 4, 0.0, &mut r).unwrap(), ds.images);
    }

    #[test]
    fn painted_values_stay_in_unit_range() {
        let m = tiny();
        let mut c = Coordinator::new(&m, 1.0, 1).unwrap();
        for v in c.phi.iter_mut() {
            *v *= 50.0;
        }
        let ds = DeskSpec::new(DeskFamily::Gratings, 8, 6, 0).generate(Split::Test).unwrap();
        let z = c.encode(&ds.images, 6).unwrap();
        let painted = c.paint(&c.phi, &ds.images, &z);
        assert!(painted.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(painted.iter().any(|&v| v == 1.0 || v == 0.0));
    }

    #[test]
    fn zero_steps_leave_the_coordinator_alone_and_queries_are_counted() {
        let m = tiny();
        let mut c = Coordinator::new(&m, 0.3, 1).unwrap();
        let before = c.phi.clone();
        let ds = DeskSpec::new(DeskFamily::Gratings, 8, 20, 0).generate(Split::Train).unwrap();
        let oracle = CountingOracle::new(&m);
        let cfg = SpsaConfig { steps: 0, ..Default::default() };
        spsa_train(&mut c, &oracle, &ds, &SpsaSchedule::default(), &cfg).unwrap();
        assert_eq!(c.phi, before);
        assert_eq!(oracle.queries(), 0);
        let cfg = SpsaConfig { steps: 3, batch_size: 4, ..Default::default() };
        let trace = spsa_train(&mut c, &oracle, &ds, &SpsaSchedule::default(), &cfg).unwrap();
        assert_eq!(oracle.queries(), 6);
        assert_eq!(trace.len(), 3);
        assert_ne!(c.phi, before);
    }

    struct Flaky<'a> {
        inner: &'a VitModel<f32>,
        failures: AtomicUsize,
    }

    impl ScoreOracle for Flaky<'_> {
        fn num_classes(&self) -> usize {
            10
        }
        fn input_len(&self) -> usize {
            self.inner.config.image_len()
        }
        fn scores(&self, inputs: &[f32], count: usize) -> Result<Vec<f32>> {
            if self.failures.load(Ordering::Relaxed) > 0 {
                self.failures.fetch_sub(1, Ordering::Relaxed);
                return Err(Error::Query("endpoint unavailable".into()));
            }
            self.inner.scores(inputs, count)
        }
    }

    #[test]
    fn queries_are_retried_then_abandoned() {
        let m = tiny();
        let ds = DeskSpec::new(DeskFamily::Gratings, 8, 10, 0).generate(Split::Train).unwrap();
        let cfg = SpsaConfig { steps: 1, batch_size: 2, retries: 2, ..Default::default() };
        let ok = Flaky { inner: &m, failures: AtomicUsize::new(2) };
        let mut c = Coordinator::new(&m, 0.3, 1).unwrap();
        assert!(spsa_train(&mut c, &ok, &ds, &SpsaSchedule::default(), &cfg).is_ok());
        let bad = Flaky { inner: &m, failures: AtomicUsize::new(3) };
        let err = spsa_train(&mut c, &bad, &ds, &SpsaSchedule::default(), &cfg).unwrap_err();
        assert!(matches!(err, Error::Query(_)));
    }
}
