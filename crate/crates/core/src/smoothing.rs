//! Randomized-smoothing defense: noisy inference with temporal Gaussian
//! filtering, and certification with simultaneous multinomial confidence
//! bounds.
//!
//! Inference draws N Gaussian-noised copies, filters each along the temporal
//! axis, and averages the logits. Certification counts per-draw argmax votes,
//! bounds the top-two class probabilities, and converts the gap into an l2
//! radius `R = sigma/2 * (Phi^-1(pA) - Phi^-1(pB))`.

use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Classifier};
use crate::sequence::SkeletonSequence;
pub use crate::stats::inverse_normal_cdf;
use crate::stats::chi_square_quantile_1df;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Noise std per coordinate (meters).
    pub sigma: f64,
    /// Number of noisy evaluations.
    pub num_samples: usize,
    /// Temporal Gaussian filter length; odd. 1 disables filtering.
    pub kernel_size: usize,
    /// Filter std in frames.
    pub kernel_sigma: f64,
    /// Significance level; certificates hold with confidence 1 - alpha.
    pub alpha: f64,
    pub seed: u64,
    /// Use the two-category Goodman variant instead of all L classes.
    pub goodman_two_category: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.02,
            num_samples: 50,
            kernel_size: 5,
            kernel_sigma: 1.0,
            alpha: 0.05,
            seed: 0,
            goodman_two_category: false,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::contract("num_samples must be at least 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::contract(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.kernel_sigma > 0.0) {
            return Err(Error::Config("kernel_sigma must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config("alpha must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Normalized Gaussian kernel of odd length.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::contract(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::contract("kernel sigma must be positive"));
    }
    let half = (size / 2) as isize;
    let mut weights: Vec<f64> = (-half..=half)
        .map(|o| (-(o as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }
    Ok(weights)
}

/// Reflect `pos` into `[0, n)` without repeating the edge sample.
#[inline]
fn reflect_index(pos: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = pos % period;
    if m < 0 {
        m += period;
    }
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Convolves every (joint, axis) channel along time with a normalized Gaussian
/// kernel, reflect padding at the ends. Each maximal run of valid frames is
/// filtered independently; masked frames stay zero.
pub fn gaussian_temporal_filter(
    seq: &SkeletonSequence,
    kernel_size: usize,
    kernel_sigma: f64,
) -> Result<SkeletonSequence> {
    let weights = gaussian_kernel(kernel_size, kernel_sigma)?;
    if kernel_size == 1 {
        return Ok(seq.clone());
    }
    let half = (kernel_size / 2) as isize;
    let t_len = seq.num_frames();
    let joints = seq.num_joints();
    let mut out = Array3::zeros((t_len, joints, 3));

    // Maximal contiguous valid segments.
    let mut segments = Vec::new();
    let mut start = None;
    for t in 0..t_len {
        match (seq.frame_valid(t), start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                segments.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        segments.push((s, t_len));
    }

    for &(s, e) in &segments {
        let n = e - s;
        for j in 0..joints {
            for a in 0..3 {
                for t in 0..n {
                    let mut acc = 0.0;
                    for (wi, w) in weights.iter().enumerate() {
                        let off = wi as isize - half;
                        let src = s + reflect_index(t as isize + off, n);
                        acc += w * seq.coords()[[src, j, a]];
                    }
                    out[[s + t, j, a]] = acc;
                }
            }
        }
    }

    let filtered =
        SkeletonSequence::with_mask(out, seq.frame_mask().to_vec(), seq.label())?;
    match seq.actor_mask() {
        Some(m) => filtered.with_actor_mask(m.to_vec()),
        None => Ok(filtered),
    }
}

/// One Gaussian-noised copy of the sequence; noise lands on valid frames only.
/// Each draw derives an independent stream from the master seed.
fn noisy_copy(seq: &SkeletonSequence, sigma: f64, seed: u64, draw: usize) -> SkeletonSequence {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    let mut noisy = seq.clone();
    for t in 0..seq.num_frames() {
        if !seq.frame_valid(t) {
            continue;
        }
        for j in 0..seq.num_joints() {
            for a in 0..3 {
                let z: f64 = rng.sample(StandardNormal);
                noisy.coords_mut()[[t, j, a]] += sigma * z;
            }
        }
    }
    noisy
}

/// Per-draw logits, computed concurrently but returned in draw order.
fn draw_logits<C: Classifier + Sync>(
    model: &C,
    seq: &SkeletonSequence,
    cfg: &SmoothingConfig,
) -> Result<Vec<Vec<f64>>> {
    (0..cfg.num_samples)
        .into_par_iter()
        .map(|n| {
            let noisy = noisy_copy(seq, cfg.sigma, cfg.seed, n);
            let filtered = gaussian_temporal_filter(&noisy, cfg.kernel_size, cfg.kernel_sigma)?;
            model.forward(&filtered)
        })
        .collect()
}

/// Noisy inference: averaged logits over N filtered Gaussian draws; the
/// prediction is the argmax of the average (lowest index on ties).
pub fn smoothed_predict<C: Classifier + Sync>(
    model: &C,
    seq: &SkeletonSequence,
    cfg: &SmoothingConfig,
) -> Result<(usize, Vec<f64>)> {
    cfg.validate()?;
    let logits = draw_logits(model, seq, cfg)?;
    let mut mean = vec![0.0; model.num_classes()];
    // Fixed draw-index order keeps the reduction bit-identical regardless of
    // how the draws were scheduled.
    for l in &logits {
        for (m, v) in mean.iter_mut().zip(l) {
            *m += v;
        }
    }
    let n = cfg.num_samples as f64;
    for m in mean.iter_mut() {
        *m /= n;
    }
    Ok((argmax(&mean), mean))
}

/// Certified l2 radius from the probability bounds.
pub fn certified_radius(sigma: f64, pa_lower: f64, pb_upper: f64) -> Result<f64> {
    Ok(sigma / 2.0 * (inverse_normal_cdf(pa_lower)? - inverse_normal_cdf(pb_upper)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    /// Index of the top vote count.
    pub predicted: usize,
    pub pa_lower: f64,
    pub pb_upper: f64,
    /// `max(R, 0)` when the top class is the true label, otherwise -1.
    pub radius: f64,
    pub counts: Vec<usize>,
    /// True when the bounds overlap (pA_lower <= pB_upper).
    pub abstained: bool,
}

/// Certification: N filtered noisy draws, per-class argmax counts,
/// simultaneous bounds on the top-two class probabilities, and the l2 radius.
pub fn certify<C: Classifier + Sync>(
    model: &C,
    seq: &SkeletonSequence,
    cfg: &SmoothingConfig,
    true_label: usize,
) -> Result<CertificationResult> {
    cfg.validate()?;
    if true_label >= model.num_classes() {
        return Err(Error::contract(format!(
            "true label {true_label} out of range for {} classes",
            model.num_classes()
        )));
    }
    let logits = draw_logits(model, seq, cfg)?;
    let mut counts = vec![0usize; model.num_classes()];
    for l in &logits {
        counts[argmax(l)] += 1;
    }
    let (pa_lower, pb_upper) = if cfg.goodman_two_category {
        goodman_bounds_two_category(&counts, cfg.num_samples, cfg.alpha)?
    } else {
        goodman_bounds(&counts, cfg.num_samples, cfg.alpha)?
    };
    let predicted = argmax_count(&counts);
    let abstained = pa_lower <= pb_upper;
    let radius = if predicted != true_label {
        -1.0
    } else if abstained {
        0.0
    } else {
        certified_radius(cfg.sigma, pa_lower, pb_upper)?.max(0.0)
    };
    Ok(CertificationResult {
        predicted,
        pa_lower,
        pb_upper,
        radius,
        counts,
        abstained,
    })
}

fn argmax_count(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate().skip(1) {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn argmax_count_excluding(counts: &[usize], excluded: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &c) in counts.iter().enumerate() {
        if i == excluded {
            continue;
        }
        if best == usize::MAX || c > counts[best] {
            best = i;
        }
    }
    best
}

fn goodman_bounds_with_k(
    counts: &[usize],
    n: usize,
    alpha: f64,
    k: usize,
) -> Result<(f64, f64)> {
    if counts.len() < 2 {
        return Err(Error::contract("Goodman bounds need at least two classes"));
    }
    if counts.iter().sum::<usize>() != n || n == 0 {
        return Err(Error::contract("counts must sum to a positive N"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config("alpha must be in (0, 1)".into()));
    }
    let b = chi_square_quantile_1df(1.0 - alpha / k as f64)?;
    let nf = n as f64;
    let lower = |c: f64| (b + 2.0 * c - (b * (b + 4.0 * c * (nf - c) / nf)).sqrt()) / (2.0 * (nf + b));
    let upper = |c: f64| (b + 2.0 * c + (b * (b + 4.0 * c * (nf - c) / nf)).sqrt()) / (2.0 * (nf + b));
    let top = argmax_count(counts);
    let runner = argmax_count_excluding(counts, top);
    Ok((lower(counts[top] as f64), upper(counts[runner] as f64)))
}

/// Simultaneous multinomial confidence bounds after Goodman: lower bound for
/// the top count's probability and upper bound for the runner-up's, with the
/// chi-square quantile taken at 1 - alpha/L over all L classes.
pub fn goodman_bounds(counts: &[usize], n: usize, alpha: f64) -> Result<(f64, f64)> {
    goodman_bounds_with_k(counts, n, alpha, counts.len())
}

/// Two-category Goodman variant: only the top-two cells are charged for the
/// simultaneous coverage.
pub fn goodman_bounds_two_category(counts: &[usize], n: usize, alpha: f64) -> Result<(f64, f64)> {
    goodman_bounds_with_k(counts, n, alpha, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReferenceClassifier;
    use crate::stats::oracle;
    use ndarray::Array3;

    fn ramp_sequence(t: usize, joints: usize) -> SkeletonSequence {
        let mut coords = Array3::zeros((t, joints, 3));
        for tau in 0..t {
            for j in 0..joints {
                coords[[tau, j, 0]] = 0.5 + 0.1 * tau as f64 + j as f64;
                coords[[tau, j, 1]] = 1.0 - 0.05 * tau as f64;
                coords[[tau, j, 2]] = 0.3;
            }
        }
        SkeletonSequence::new(coords, 0).unwrap()
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let w = gaussian_kernel(7, 1.0).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        for i in 0..3 {
            assert_eq!(w[i], w[6 - i]);
        }
        assert!(gaussian_kernel(4, 1.0).is_err());
    }

    #[test]
    fn kernel_size_one_is_identity() {
        let seq = ramp_sequence(6, 2);
        let out = gaussian_temporal_filter(&seq, 1, 1.0).unwrap();
        assert_eq!(out.coords(), seq.coords());
    }

    #[test]
    fn constant_signal_is_unchanged() {
        let mut coords = Array3::zeros((8, 2, 3));
        for t in 0..8 {
            for j in 0..2 {
                coords[[t, j, 0]] = 1.5;
                coords[[t, j, 1]] = -0.5;
            }
        }
        let seq = SkeletonSequence::new(coords, 0).unwrap();
        let out = gaussian_temporal_filter(&seq, 5, 1.0).unwrap();
        for (a, b) in out.coords().iter().zip(seq.coords().iter()) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn linear_signal_preserved_in_interior() {
        let seq = ramp_sequence(12, 2);
        let out = gaussian_temporal_filter(&seq, 5, 1.0).unwrap();
        // Direct convolution oracle on interior frames (no padding reached).
        let w = gaussian_kernel(5, 1.0).unwrap();
        for t in 2..10 {
            for j in 0..2 {
                for a in 0..3 {
                    let mut acc = 0.0;
                    for (wi, wv) in w.iter().enumerate() {
                        acc += wv * seq.coords()[[t + wi - 2, j, a]];
                    }
                    assert!((out.coords()[[t, j, a]] - acc).abs() <= 1e-12);
                    // A symmetric kernel preserves linear-in-time signals.
                    assert!((out.coords()[[t, j, a]] - seq.coords()[[t, j, a]]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn filtering_is_linear() {
        use rand::prelude::*;
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha12Rng| {
            let coords = Array3::from_shape_fn((9, 3, 3), |_| rng.random_range(-1.0..1.0));
            SkeletonSequence::new(coords, 0).unwrap()
        };
        let x = mk(&mut rng);
        let y = mk(&mut rng);
        let (a, b) = (0.7, -1.3);
        let mut combo = x.clone();
        for (c, (xv, yv)) in combo
            .coords_mut()
            .iter_mut()
            .zip(x.coords().iter().zip(y.coords().iter()))
        {
            *c = a * xv + b * yv;
        }
        let fx = gaussian_temporal_filter(&x, 5, 1.0).unwrap();
        let fy = gaussian_temporal_filter(&y, 5, 1.0).unwrap();
        let fc = gaussian_temporal_filter(&combo, 5, 1.0).unwrap();
        for ((c, xv), yv) in fc.coords().iter().zip(fx.coords().iter()).zip(fy.coords().iter()) {
            assert!((c - (a * xv + b * yv)).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_frames_are_untouched_and_segments_independent() {
        let base = ramp_sequence(10, 1);
        let mut coords = base.coords().clone();
        for j in 0..1 {
            for a in 0..3 {
                coords[[4, j, a]] = 0.0;
            }
        }
        let mut mask = vec![true; 10];
        mask[4] = false;
        let seq = SkeletonSequence::with_mask(coords, mask, 0).unwrap();
        let out = gaussian_temporal_filter(&seq, 5, 1.0).unwrap();
        for a in 0..3 {
            assert_eq!(out.coords()[[4, 0, a]], 0.0);
        }
        assert_eq!(out.frame_mask(), seq.frame_mask());
    }

    fn trained_toy() -> (ReferenceClassifier, crate::dataio::Dataset) {
        use crate::dataio::{generate_synthetic_dataset, GeneratorConfig};
        use crate::model::{train_reference_model, TrainConfig};
        let data = generate_synthetic_dataset(&GeneratorConfig {
            num_classes: 3,
            sequences_per_class: 30,
            num_frames: 16,
            topology: "chain5".into(),
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let model = train_reference_model(
            &data,
            &TrainConfig {
                embed_dim: 16,
                hidden_dims: vec![16],
                epochs: 15,
                seed: 2,
                ..Default::default()
            },
        )
        .unwrap()
        .model;
        (model, data)
    }

    #[test]
    fn vanishing_noise_matches_plain_prediction() {
        let (model, data) = trained_toy();
        let seq = &data.test[0];
        let cfg = SmoothingConfig {
            sigma: 1e-12,
            num_samples: 10,
            kernel_size: 1,
            seed: 5,
            ..Default::default()
        };
        let (label, _) = smoothed_predict(&model, seq, &cfg).unwrap();
        assert_eq!(label, argmax(&model.forward(seq).unwrap()));
    }

    #[test]
    fn constant_model_is_unmoved_by_noise() {
        let (_, data) = trained_toy();
        let model = ReferenceClassifier::zeroed(16, 5, 3, 8);
        let cfg = SmoothingConfig {
            sigma: 0.5,
            num_samples: 20,
            kernel_size: 5,
            seed: 9,
            ..Default::default()
        };
        let (label, _) = smoothed_predict(&model, &data.test[1], &cfg).unwrap();
        assert_eq!(label, 0);
    }

    #[test]
    fn smoothed_predict_is_deterministic_given_seed() {
        let (model, data) = trained_toy();
        let cfg = SmoothingConfig {
            num_samples: 25,
            seed: 31,
            ..Default::default()
        };
        let a = smoothed_predict(&model, &data.test[2], &cfg).unwrap();
        let b = smoothed_predict(&model, &data.test[2], &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn analytic_radius_at_phi_of_one() {
        // pA = Phi(1), pB = Phi(-1): R = sigma/2 * (1 - (-1)) = sigma.
        let r = certified_radius(0.02, 0.8413447461, 0.1586552539).unwrap();
        assert!((r - 0.02).abs() <= 1e-6, "r = {r}");
    }

    #[test]
    fn goodman_examples() {
        // Everything in one class.
        let (pa, pb) = goodman_bounds(&[1000, 0, 0, 0], 1000, 0.05).unwrap();
        assert!(pa > 0.99, "pa = {pa}");
        assert!(pb < 0.01 && pb > 0.0);

        // Evaluate the stated formula with the chi-square oracle.
        let k = 4.0;
        let b = oracle::chi_square_quantile_1df_bisect(1.0 - 0.05 / k);
        let n = 1000.0;
        let expect_pa = (b + 2.0 * 1000.0 - (b * (b + 4.0 * 1000.0 * 0.0 / n)).sqrt()) / (2.0 * (n + b));
        assert!((pa - expect_pa).abs() <= 1e-7, "{pa} vs {expect_pa}");

        // N = 1 sanity bracket.
        let (pa, pb) = goodman_bounds(&[1, 0], 1, 0.05).unwrap();
        assert!((0.0..=1.0).contains(&pa));
        assert!((0.0..=1.0).contains(&pb));

        // Contract errors.
        assert!(goodman_bounds(&[3, 2], 6, 0.05).is_err());
        assert!(goodman_bounds(&[5], 5, 0.05).is_err());
    }

    #[test]
    fn goodman_coverage_on_simulated_multinomials() {
        use rand::prelude::*;
        let p = [0.6, 0.25, 0.1, 0.05];
        let n = 100usize;
        let trials = 3000usize;
        let alpha = 0.05;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut covered = 0usize;
        for _ in 0..trials {
            let mut counts = [0usize; 4];
            for _ in 0..n {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (i, &pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        counts[i] += 1;
                        break;
                    }
                }
            }
            let (pa, pb) = goodman_bounds(&counts, n, alpha).unwrap();
            let top = argmax_count(&counts);
            let runner = argmax_count_excluding(&counts, top);
            if pa <= p[top] && pb >= p[runner] {
                covered += 1;
            }
        }
        let freq = covered as f64 / trials as f64;
        assert!(freq >= 1.0 - alpha - 0.01, "coverage {freq}");
    }

    #[test]
    fn certify_counts_votes_and_reports_radius() {
        let (model, data) = trained_toy();
        let seq = &data.test[0];
        let cfg = SmoothingConfig {
            sigma: 0.01,
            num_samples: 200,
            kernel_size: 5,
            seed: 77,
            ..Default::default()
        };
        let r = certify(&model, seq, &cfg, seq.label()).unwrap();
        assert_eq!(r.counts.iter().sum::<usize>(), 200);
        if r.predicted == seq.label() && !r.abstained {
            assert!(r.radius >= 0.0);
            // The radius is exactly the shared formula applied to the bounds.
            let direct = certified_radius(cfg.sigma, r.pa_lower, r.pb_upper)
                .unwrap()
                .max(0.0);
            assert_eq!(r.radius, direct);
        }

        // Wrong true label: -1 regardless of counts.
        let wrong = (seq.label() + 1) % 3;
        let r2 = certify(&model, seq, &cfg, wrong).unwrap();
        if r2.predicted != wrong {
            assert_eq!(r2.radius, -1.0);
        }
    }

    #[test]
    fn radius_grows_with_sample_count() {
        // All-one-class counts tighten with N, so the radius grows.
        let mut prev = f64::NEG_INFINITY;
        for &n in &[100usize, 400, 1000, 4000] {
            let mut counts = vec![0usize; 4];
            counts[0] = n;
            let (pa, pb) = goodman_bounds(&counts, n, 0.05).unwrap();
            let r = certified_radius(0.02, pa, pb).unwrap();
            assert!(r > prev, "n = {n}: {r} <= {prev}");
            prev = r;
        }
        assert!(prev > 0.0);
    }

    #[test]
    fn radius_monotone_in_bounds() {
        // Nondecreasing in pA_lower, nonincreasing in pB_upper.
        let mut prev = f64::NEG_INFINITY;
        for i in 1..20 {
            let pa = 0.5 + 0.024 * i as f64;
            let r = certified_radius(0.02, pa, 0.2).unwrap();
            assert!(r >= prev);
            prev = r;
        }
        let mut prev = f64::INFINITY;
        for i in 1..20 {
            let pb = 0.01 + 0.02 * i as f64;
            let r = certified_radius(0.02, 0.9, pb).unwrap();
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn radius_formula_is_kernel_independent() {
        // Counts may differ across kernel sizes, but the radius path is the
        // same function of (sigma, pA, pB).
        let (model, data) = trained_toy();
        let seq = &data.test[1];
        for kernel in [1usize, 5, 7] {
            let cfg = SmoothingConfig {
                sigma: 0.02,
                num_samples: 100,
                kernel_size: kernel,
                seed: 5,
                ..Default::default()
            };
            let r = certify(&model, seq, &cfg, seq.label()).unwrap();
            if r.predicted == seq.label() && !r.abstained {
                let direct = certified_radius(cfg.sigma, r.pa_lower, r.pb_upper)
                    .unwrap()
                    .max(0.0);
                assert_eq!(r.radius, direct);
            }
        }
    }

    #[test]
    fn degenerate_sample_count_is_rejected() {
        let (model, data) = trained_toy();
        let cfg = SmoothingConfig {
            num_samples: 0,
            ..Default::default()
        };
        assert!(certify(&model, &data.test[0], &cfg, 0).is_err());
    }
}
