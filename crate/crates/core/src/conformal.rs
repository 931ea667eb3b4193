//! Split conformal prediction with regularized adaptive (RAPS-style) scores
//! and a performance-driven penalty multiplier.
//!
//! A [`ConformalModel`] is fitted once on a calibration split: logits are
//! temperature scaled, each calibration sample gets the nonconformity score of
//! its true label under the base penalty `lambda`, and the threshold `tau` is
//! the `ceil((1 - theta)(n + 1))`-th smallest score. At prediction time the
//! penalty coefficient becomes `g(delta, lambda)`, so a drop in validation
//! accuracy (`delta < 0`) inflates the rank penalty and shrinks the sets while
//! `tau` stays fixed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::losses::softmax;
use crate::nn::DenseNet;
use crate::rng::Rng;

/// An ordered set of class labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct PredictionSet(Vec<usize>);

impl PredictionSet {
    pub fn new(mut labels: Vec<usize>) -> Self {
        labels.sort_unstable();
        labels.dedup();
        PredictionSet(labels)
    }

    pub fn full(classes: usize) -> Self {
        PredictionSet((0..classes).collect())
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, label: usize) -> bool {
        self.0.binary_search(&label).is_ok()
    }

    pub fn intersection_len(&self, other: &PredictionSet) -> usize {
        self.0.iter().filter(|l| other.contains(**l)).count()
    }

    pub fn union_len(&self, other: &PredictionSet) -> usize {
        self.len() + other.len() - self.intersection_len(other)
    }

    pub fn is_subset(&self, other: &PredictionSet) -> bool {
        self.0.iter().all(|l| other.contains(*l))
    }
}

/// Source of the randomization factor `u` in the score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UPolicy {
    /// A fresh `U(0, 1)` draw per sample.
    RandomUniform,
    Fixed(f64),
}

/// Shape of the penalty multiplier for negative accuracy changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GVariant {
    /// `lambda * delta - delta + lambda`
    G1,
    /// constant `lambda`
    G2,
    /// `lambda * delta^2 + lambda`
    G3,
    /// `-lambda * delta^2 - delta + lambda`
    G4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub theta: f64,
    pub lambda: f64,
    pub kappa_reg: usize,
    pub u: UPolicy,
    pub g: GVariant,
    pub platt_lr: f64,
    pub platt_max_iter: usize,
    /// Allow sets with no labels. When false the top-ranked label is always kept.
    pub allow_empty_sets: bool,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        ConformalConfig {
            theta: 0.1,
            lambda: 0.5,
            kappa_reg: 5,
            u: UPolicy::RandomUniform,
            g: GVariant::G1,
            platt_lr: 0.01,
            platt_max_iter: 10,
            allow_empty_sets: false,
        }
    }
}

impl ConformalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::invalid("theta", format!("{} is outside (0, 1)", self.theta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", format!("{} must be >= 0", self.lambda)));
        }
        if self.kappa_reg < 1 {
            return Err(Error::invalid("kappa_reg", "must be >= 1"));
        }
        if let UPolicy::Fixed(u) = self.u {
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::invalid("u", format!("fixed u {u} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Penalty multiplier as a function of the accuracy change `delta`.
///
/// Every variant returns `lambda` for `delta >= 0`. Inputs outside `[-1, 1]`
/// are clamped.
pub fn g_calibration(delta: f64, lambda: f64, variant: GVariant) -> f64 {
    let d = if (-1.0..=1.0).contains(&delta) {
        delta
    } else {
        log::warn!("accuracy change {delta} outside [-1, 1], clamping");
        delta.clamp(-1.0, 1.0)
    };
    if d >= 0.0 {
        return lambda;
    }
    match variant {
        GVariant::G1 => lambda * d - d + lambda,
        GVariant::G2 => lambda,
        GVariant::G3 => lambda * d * d + lambda,
        GVariant::G4 => -lambda * d * d - d + lambda,
    }
}

/// Change in validation accuracy between consecutive checkpoints, in `[-1, 1]`.
pub fn performance_delta(acc_now: f64, acc_prev: f64) -> f64 {
    (acc_now - acc_prev).clamp(-1.0, 1.0)
}

fn argmax_prob(probs: &[f64]) -> usize {
    rank_order(probs)[0]
}

/// Labels by decreasing probability; equal probabilities keep the lower index first.
fn rank_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

fn check_probs(probs: &[f64]) -> Result<()> {
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid("probs", format!("not a distribution (sum {sum})")));
    }
    Ok(())
}

/// Nonconformity of label `y`: mass of the labels ranked ahead of it, plus
/// `u` times its own probability, plus `penalty * (rank - kappa_reg)^+`.
pub fn raps_score(probs: &[f64], y: usize, u: f64, penalty: f64, kappa_reg: usize) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: probs.len(),
        });
    }
    check_probs(probs)?;
    let order = rank_order(probs);
    let mut ahead = 0.0;
    for (pos, &label) in order.iter().enumerate() {
        if label == y {
            let rank = pos + 1;
            return Ok(ahead + probs[y] * u + penalty * rank.saturating_sub(kappa_reg) as f64);
        }
        ahead += probs[label];
    }
    unreachable!("label {y} is in the ranking")
}

/// 1-based order-statistic index used for the conformal threshold.
pub fn quantile_index(n: usize, theta: f64) -> usize {
    let x = (1.0 - theta) * (n as f64 + 1.0);
    // Guard against products like 90.00000000000001 that are integers in exact arithmetic.
    (x - 1e-9 * (n as f64 + 1.0)).ceil().max(1.0) as usize
}

/// The `ceil((1 - theta)(n + 1))`-th smallest score, or `+inf` when that index exceeds `n`.
pub fn quantile_tau(scores: &[f64], theta: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid("theta", format!("{theta} is outside (0, 1)")));
    }
    let k = quantile_index(scores.len(), theta);
    if k > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

fn scaled_ce_and_grad(logits: &[Vec<f64>], labels: &[usize], t: f64) -> (f64, f64) {
    let mut loss = 0.0;
    let mut dt = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        let p = softmax(&scaled);
        let lse = crate::losses::log_sum_exp(&scaled);
        loss += lse - scaled[y];
        let mean_z: f64 = p.iter().zip(z).map(|(pk, zk)| pk * zk).sum();
        dt += (z[y] - mean_z) / (t * t);
    }
    let n = logits.len() as f64;
    (loss / n, dt / n)
}

/// Mean cross-entropy of `softmax(logits / t)`.
pub fn scaled_cross_entropy(logits: &[Vec<f64>], labels: &[usize], t: f64) -> f64 {
    scaled_ce_and_grad(logits, labels, t).0
}

/// Fit a softmax temperature by gradient descent on mean cross-entropy, starting at 1.
pub fn temperature_scale(logits: &[Vec<f64>], labels: &[usize], lr: f64, max_iter: usize) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Empty("temperature-scaling inputs"));
    }
    check_len("temperature-scaling labels", logits.len(), labels.len())?;
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: z.len(),
            });
        }
    }
    let mut t = 1.0_f64;
    for _ in 0..max_iter {
        let (_, grad) = scaled_ce_and_grad(logits, labels, t);
        if !grad.is_finite() {
            break;
        }
        t = (t - lr * grad).max(1e-3);
    }
    Ok(t)
}

/// A fitted conformal wrapper around a classifier's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalModel {
    pub temperature: f64,
    pub tau: f64,
    pub config: ConformalConfig,
}

impl ConformalModel {
    fn draw_u(&self, rng: &mut Rng) -> f64 {
        match self.config.u {
            UPolicy::RandomUniform => rng.random::<f64>(),
            UPolicy::Fixed(u) => u,
        }
    }

    /// Calibrate on precomputed logits.
    pub fn fit_logits(
        logits: &[Vec<f64>],
        labels: &[usize],
        config: &ConformalConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if logits.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        let temperature = temperature_scale(logits, labels, config.platt_lr, config.platt_max_iter)?;
        let mut model = ConformalModel {
            temperature,
            tau: f64::INFINITY,
            config: config.clone(),
        };
        let scores = logits
            .iter()
            .zip(labels)
            .map(|(z, &y)| {
                let probs = model.probabilities(z);
                let u = model.draw_u(rng);
                raps_score(&probs, y, u, config.lambda, config.kappa_reg)
            })
            .collect::<Result<Vec<_>>>()?;
        model.tau = quantile_tau(&scores, config.theta)?;
        Ok(model)
    }

    /// Temperature-scale `net` on the calibration samples and fit the threshold.
    pub fn fit<'a>(
        net: &DenseNet,
        samples: impl IntoIterator<Item = (&'a [f64], usize)>,
        config: &ConformalConfig,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut logits = Vec::new();
        let mut labels = Vec::new();
        for (x, y) in samples {
            logits.push(net.forward_logits(x)?);
            labels.push(y);
        }
        Self::fit_logits(&logits, &labels, config, rng)
    }

    pub fn probabilities(&self, logits: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = logits.iter().map(|z| z / self.temperature).collect();
        softmax(&scaled)
    }

    /// Labels whose score under penalty `g(delta, lambda)` does not exceed `tau`.
    pub fn predict_set(&self, logits: &[f64], delta: f64, rng: &mut Rng) -> PredictionSet {
        let u = self.draw_u(rng);
        let penalty = g_calibration(delta, self.config.lambda, self.config.g);
        self.predict_set_with(logits, u, penalty)
    }

    /// Set construction with explicit `u` and penalty coefficient.
    pub fn predict_set_with(&self, logits: &[f64], u: f64, penalty: f64) -> PredictionSet {
        if self.tau == f64::INFINITY {
            return PredictionSet::full(logits.len());
        }
        let probs = self.probabilities(logits);
        let mut ahead = 0.0;
        let mut labels = Vec::new();
        for (pos, &label) in rank_order(&probs).iter().enumerate() {
            let rank = pos + 1;
            let score = ahead + probs[label] * u + penalty * rank.saturating_sub(self.config.kappa_reg) as f64;
            if score <= self.tau {
                labels.push(label);
            }
            ahead += probs[label];
        }
        if labels.is_empty() && !self.config.allow_empty_sets {
            labels.push(argmax_prob(&probs));
        }
        PredictionSet::new(labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn model(tau: f64, lambda: f64, kappa_reg: usize, u: f64) -> ConformalModel {
        ConformalModel {
            temperature: 1.0,
            tau,
            config: ConformalConfig {
                lambda,
                kappa_reg,
                u: UPolicy::Fixed(u),
                ..Default::default()
            },
        }
    }

    #[test]
    fn g_variants_at_reference_points() {
        assert_eq!(g_calibration(0.0, 0.5, GVariant::G1), 0.5);
        assert_eq!(g_calibration(-1.0, 0.5, GVariant::G1), 1.0);
        assert!((g_calibration(-0.5, 0.5, GVariant::G3) - 0.625).abs() < 1e-12);
        assert!((g_calibration(-0.5, 0.5, GVariant::G4) - 0.875).abs() < 1e-12);
        assert_eq!(g_calibration(-0.7, 0.5, GVariant::G2), 0.5);
        for v in [GVariant::G1, GVariant::G2, GVariant::G3, GVariant::G4] {
            assert_eq!(g_calibration(0.3, 0.8, v), 0.8);
        }
        // clamped
        assert_eq!(g_calibration(-3.0, 0.5, GVariant::G1), 1.0);
    }

    #[test]
    fn g1_nonincreasing_on_negative_side() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let d = -1.0 + i as f64 / 100.0;
            let g = g_calibration(d, 0.3, GVariant::G1);
            assert!(g <= prev + 1e-15);
            prev = g;
        }
        assert!((g_calibration(-1e-12, 0.3, GVariant::G1) - 0.3).abs() < 1e-11);
    }

    #[test]
    fn performance_delta_cases() {
        assert_eq!(performance_delta(0.8, 0.8), 0.0);
        assert!((performance_delta(0.7, 0.9) + 0.2).abs() < 1e-12);
    }

    #[test]
    fn raps_score_cases() {
        let uniform = vec![0.1; 10];
        assert!((raps_score(&uniform, 0, 1.0, 0.0, 5).unwrap() - 0.1).abs() < 1e-15);
        assert!((raps_score(&[0.7, 0.3], 1, 1.0, 0.0, 5).unwrap() - 1.0).abs() < 1e-15);
        let probs = [0.5, 0.3, 0.2];
        let base = raps_score(&probs, 2, 0.4, 0.0, 1).unwrap();
        let pen = raps_score(&probs, 2, 0.4, 0.5, 1).unwrap();
        assert!((pen - base - 1.0).abs() < 1e-15);
        assert!(raps_score(&probs, 3, 0.4, 0.0, 1).is_err());
        assert!(raps_score(&[0.5, 0.1], 0, 0.4, 0.0, 1).is_err());
    }

    #[test]
    fn quantile_cases() {
        let scores: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        assert_eq!(quantile_tau(&scores, 0.1).unwrap(), 1.0);
        assert_eq!(quantile_index(100, 0.1), 91);
        assert_eq!(quantile_tau(&[0.3], 0.1).unwrap(), f64::INFINITY);
        assert!(quantile_tau(&[], 0.1).is_err());
    }

    #[test]
    fn temperature_cases() {
        let logits = vec![vec![1.0, -0.5, 0.2], vec![0.0, 2.0, 1.0]];
        let labels = [0, 1];
        assert_eq!(temperature_scale(&logits, &labels, 0.0, 10).unwrap(), 1.0);
        // Saturated, correct logits: the gradient vanishes and T stays put.
        let sat = vec![vec![60.0, 0.0], vec![0.0, 60.0]];
        let t = temperature_scale(&sat, &[0, 1], 0.01, 10).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(temperature_scale(&[], &[], 0.01, 10).is_err());
    }

    #[test]
    fn infinite_tau_gives_full_set() {
        let m = model(f64::INFINITY, 0.5, 5, 1.0);
        assert_eq!(m.predict_set_with(&[3.0, -1.0, 0.0], 1.0, 0.5), PredictionSet::full(3));
    }

    #[test]
    fn uniform_probs_worst_score_is_one() {
        let m = model(1.0, 0.0, 5, 1.0);
        let set = m.predict_set_with(&[0.0; 10], 1.0, 0.0);
        assert_eq!(set, PredictionSet::full(10));
    }

    #[test]
    fn negative_delta_shrinks_set() {
        let m = model(1.2, 0.5, 1, 0.5);
        let mut rng = Rng::seed_from_u64(0);
        let logits = [2.0, 1.5, 1.4, 0.3, 0.1];
        let mut r1 = rng.clone();
        let at_zero = m.predict_set(&logits, 0.0, &mut rng);
        let dropped = m.predict_set(&logits, -0.5, &mut r1);
        assert!(dropped.is_subset(&at_zero));
    }

    #[test]
    fn empty_sets_follow_policy() {
        let mut m = model(0.05, 0.5, 5, 1.0);
        assert_eq!(m.predict_set_with(&[3.0, 0.0, 0.0], 1.0, 0.5), PredictionSet::new(vec![0]));
        m.config.allow_empty_sets = true;
        assert!(m.predict_set_with(&[3.0, 0.0, 0.0], 1.0, 0.5).is_empty());
    }

    #[test]
    fn set_algebra() {
        let a = PredictionSet::new(vec![3, 1, 2, 1]);
        assert_eq!(a.labels(), &[1, 2, 3]);
        let b = PredictionSet::new(vec![2, 5]);
        assert_eq!(a.intersection_len(&b), 1);
        assert_eq!(a.union_len(&b), 4);
        assert!(PredictionSet::new(vec![2]).is_subset(&a));
    }
}
