//! Training objectives and their gradients with respect to logits.
//!
//! Every knowledge-distillation term treats its teacher side as a constant:
//! forward distillation trains only the proxy, behavior imitation trains only
//! the private model.

use crate::conformal::PredictionSet;
use crate::error::{check_len, Error, Result};
use crate::nn::{DenseNet, ParamVector};

/// Loss value and gradient with respect to one model's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl LogitLoss {
    fn zero(classes: usize) -> Self {
        LogitLoss {
            loss: 0.0,
            grad: vec![0.0; classes],
        }
    }

    fn add(mut self, other: &LogitLoss) -> Self {
        self.loss += other.loss;
        self.grad.iter_mut().zip(&other.grad).for_each(|(a, b)| *a += b);
        self
    }
}

/// Loss value and gradient with respect to a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLoss {
    pub loss: f64,
    pub grad: ParamVector,
}

/// Combined client objective for one sample: the private and proxy objectives
/// summed, with each gradient routed to its own model's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub dlogits_private: Option<Vec<f64>>,
    pub dlogits_proxy: Option<Vec<f64>>,
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<LogitLoss> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let log_p = log_softmax(logits);
    let mut grad: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    grad[label] -= 1.0;
    Ok(LogitLoss {
        loss: -log_p[label],
        grad,
    })
}

/// `KL(softmax(teacher) || softmax(student))`, differentiated in the student only.
pub fn forward_kd(teacher_logits: &[f64], student_logits: &[f64]) -> Result<LogitLoss> {
    check_len("student logits", teacher_logits.len(), student_logits.len())?;
    let log_q = log_softmax(teacher_logits);
    let log_s = log_softmax(student_logits);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(log_s.len());
    for (lq, ls) in log_q.iter().zip(&log_s) {
        let q = lq.exp();
        if q > 0.0 {
            loss += q * (lq - ls);
        }
        grad.push(ls.exp() - q);
    }
    Ok(LogitLoss {
        loss: loss.max(0.0),
        grad,
    })
}

/// Ranking-based behavior imitation: `-eta * sum_{k in S} log softmax(logits)[k]`.
///
/// The normalizer runs over every class (the labels in `S` plus the rest), so
/// minimizing the term raises the private model's logits on the proxy's
/// confident set without forcing those labels to the top of the ranking.
pub fn bkd_loss(private_logits: &[f64], set: &PredictionSet, eta: f64) -> Result<LogitLoss> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid("eta", format!("{eta} is outside [0, 1]")));
    }
    let classes = private_logits.len();
    if let Some(&bad) = set.labels().iter().find(|&&k| k >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    if set.is_empty() || eta == 0.0 {
        return Ok(LogitLoss::zero(classes));
    }
    let log_p = log_softmax(private_logits);
    let size = set.len() as f64;
    let loss = -eta * set.labels().iter().map(|&k| log_p[k]).sum::<f64>();
    let mut grad: Vec<f64> = log_p.iter().map(|l| eta * size * l.exp()).collect();
    for &k in set.labels() {
        grad[k] -= eta;
    }
    Ok(LogitLoss { loss, grad })
}

/// `(mu / 2) * ||local - global_ref||^2` and its parameter gradient.
pub fn fedprox_term(local: &ParamVector, global_ref: &ParamVector, mu: f64) -> Result<ParamLoss> {
    check_len("proximal reference", local.len(), global_ref.len())?;
    if !(mu >= 0.0) {
        return Err(Error::invalid("mu", format!("{mu} must be >= 0")));
    }
    let diff: Vec<f64> = local.0.iter().zip(&global_ref.0).map(|(a, b)| a - b).collect();
    let loss = 0.5 * mu * diff.iter().map(|d| d * d).sum::<f64>();
    Ok(ParamLoss {
        loss,
        grad: ParamVector(diff.into_iter().map(|d| mu * d).collect()),
    })
}

/// How the private model learns from the proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdPath {
    /// Set-based behavior imitation weighted by the consensus weight.
    Behavior,
    /// Plain distillation from the proxy's full softmax.
    Symmetric,
}

/// Per-sample objectives given precomputed logits.
///
/// Private: `CE(private, y)` plus either behavior imitation on `set` weighted
/// by `eta`, or `KL(proxy || private)` when `path` is symmetric.
/// Proxy: `CE(proxy, y) + KL(private || proxy)`.
pub fn client_objective(
    private_logits: &[f64],
    proxy_logits: &[f64],
    label: usize,
    set: &PredictionSet,
    eta: f64,
    path: KdPath,
) -> Result<LossGrad> {
    let private_back = match path {
        KdPath::Behavior => bkd_loss(private_logits, set, eta)?,
        KdPath::Symmetric => forward_kd(proxy_logits, private_logits)?,
    };
    let private = cross_entropy(private_logits, label)?.add(&private_back);
    let proxy = cross_entropy(proxy_logits, label)?.add(&forward_kd(private_logits, proxy_logits)?);
    let loss = private.loss + proxy.loss;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("client objective evaluated to {loss}")));
    }
    Ok(LossGrad {
        loss,
        dlogits_private: Some(private.grad),
        dlogits_proxy: Some(proxy.grad),
    })
}

/// [`client_objective`] evaluated through both networks at input `x`.
pub fn composite_client_loss(
    x: &[f64],
    label: usize,
    private_net: &DenseNet,
    proxy_net: &DenseNet,
    set: &PredictionSet,
    eta: f64,
    path: KdPath,
) -> Result<LossGrad> {
    let private_logits = private_net.forward_logits(x)?;
    let proxy_logits = proxy_net.forward_logits(x)?;
    client_objective(&private_logits, &proxy_logits, label, set, eta, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cross_entropy_cases() {
        let l = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert!(close(l.loss, std::f64::consts::LN_2, 1e-15));
        assert_eq!(l.grad, vec![-0.5, 0.5]);
        let sat = cross_entropy(&[100.0, -100.0], 0).unwrap();
        assert!(sat.loss.is_finite() && sat.loss < 1e-80);
        let sat_wrong = cross_entropy(&[100.0, -100.0], 1).unwrap();
        assert!(close(sat_wrong.loss, 200.0, 1e-9));
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn forward_kd_cases() {
        let same = forward_kd(&[0.3, -1.2, 2.0], &[0.3, -1.2, 2.0]).unwrap();
        assert_eq!(same.loss, 0.0);
        assert!(same.grad.iter().all(|g| g.abs() < 1e-15));
        // teacher [2/3, 1/3], student [1/3, 2/3]
        let t = [2f64.ln(), 0.0];
        let s = [0.0, 2f64.ln()];
        let kl = forward_kd(&t, &s).unwrap();
        assert!(close(kl.loss, 2f64.ln() / 3.0, 1e-12), "{}", kl.loss);
        assert!(forward_kd(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn forward_kd_nonnegative() {
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let n = rng.random_range(2..8);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-6.0..6.0)).collect();
            assert!(forward_kd(&a, &b).unwrap().loss >= 0.0);
        }
    }

    #[test]
    fn bkd_cases() {
        let s0 = PredictionSet::new(vec![0]);
        let both = PredictionSet::new(vec![0, 1]);
        let l = bkd_loss(&[0.0, 0.0], &s0, 1.0).unwrap();
        assert!(close(l.loss, std::f64::consts::LN_2, 1e-15));
        let l = bkd_loss(&[0.0, 0.0], &both, 1.0).unwrap();
        assert!(close(l.loss, 2.0 * std::f64::consts::LN_2, 1e-15));
        let z = bkd_loss(&[3.0, -1.0], &both, 0.0).unwrap();
        assert_eq!(z.loss, 0.0);
        assert!(z.grad.iter().all(|&g| g == 0.0));
        let empty = bkd_loss(&[3.0, -1.0], &PredictionSet::default(), 1.0).unwrap();
        assert_eq!(empty, LogitLoss::zero(2));
        assert!(bkd_loss(&[0.0, 0.0], &s0, 1.5).is_err());
        assert!(bkd_loss(&[0.0, 0.0], &s0, -0.1).is_err());
        assert!(bkd_loss(&[0.0, 0.0], &PredictionSet::new(vec![2]), 1.0).is_err());
    }

    #[test]
    fn bkd_full_set_is_negative_log_softmax_sum() {
        let z = [0.4, -2.0, 1.3, 0.0];
        let full = PredictionSet::full(4);
        let expected = -log_softmax(&z).iter().sum::<f64>();
        assert!(close(bkd_loss(&z, &full, 1.0).unwrap().loss, expected, 1e-12));
    }

    #[test]
    fn bkd_decreases_when_set_logit_rises() {
        let z = vec![0.4, -2.0, 1.3, 0.0, 0.7];
        let set = PredictionSet::new(vec![1, 3]);
        let base = bkd_loss(&z, &set, 0.6).unwrap().loss;
        for &k in set.labels() {
            let mut up = z.clone();
            up[k] += 0.1;
            assert!(bkd_loss(&up, &set, 0.6).unwrap().loss < base);
        }
    }

    #[test]
    fn fedprox_cases() {
        let a = ParamVector(vec![1.0, 2.0]);
        let r = fedprox_term(&a, &a, 3.0).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.grad.0, vec![0.0, 0.0]);
        let b = ParamVector(vec![0.0, 3.0]);
        assert_eq!(fedprox_term(&a, &b, 0.0).unwrap().loss, 0.0);
        let r = fedprox_term(&a, &b, 2.0).unwrap();
        assert_eq!(r.loss, 2.0);
        assert_eq!(r.grad.0, vec![2.0, -2.0]);
        assert!(fedprox_term(&a, &ParamVector(vec![0.0]), 1.0).is_err());
    }

    #[test]
    fn eta_zero_leaves_plain_ce() {
        let p = [0.5, -0.3, 1.0];
        let q = [0.1, 0.2, -0.4];
        let set = PredictionSet::new(vec![0, 2]);
        let lg = client_objective(&p, &q, 1, &set, 0.0, KdPath::Behavior).unwrap();
        assert_eq!(lg.dlogits_private.unwrap(), cross_entropy(&p, 1).unwrap().grad);
    }

    #[test]
    fn symmetric_with_identical_logits_is_plain_ce() {
        let p = [0.5, -0.3, 1.0];
        let set = PredictionSet::new(vec![0]);
        let lg = client_objective(&p, &p, 2, &set, 1.0, KdPath::Symmetric).unwrap();
        let ce = cross_entropy(&p, 2).unwrap();
        assert!(close(lg.loss, 2.0 * ce.loss, 1e-12));
        for (a, b) in lg.dlogits_private.unwrap().iter().zip(&ce.grad) {
            assert!(close(*a, *b, 1e-15));
        }
        for (a, b) in lg.dlogits_proxy.unwrap().iter().zip(&ce.grad) {
            assert!(close(*a, *b, 1e-15));
        }
    }
}
