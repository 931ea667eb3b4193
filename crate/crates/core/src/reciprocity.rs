//! Local training on one client: the private and proxy models teach each
//! other, forward by plain distillation and backward through the proxy's
//! conformal prediction sets weighted by how much the two models agree.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalConfig, ConformalModel, GVariant, PredictionSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::federation::{evaluate, ClientState};
use crate::losses::{client_objective, cross_entropy, fedprox_term, KdPath};
use crate::nn::{adam_step, AdamState, DenseNet, ParamVector};
use crate::rng::Rng;

/// Training variant. Everything except `Full` is an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Full,
    /// Private model distills the proxy's full softmax instead of its sets.
    Sym,
    /// Sets are the `K` highest logits instead of conformal sets.
    TopK(usize),
    /// Consensus weight fixed at 1.
    Eta1,
    /// Penalty multiplier fixed at 0.5 regardless of accuracy change.
    G05,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Sym => "sym",
            Mode::TopK(_) => "topk",
            Mode::Eta1 => "eta1",
            Mode::G05 => "g05",
        }
    }
}

/// Denominator of the consensus weight when the proxy set is the smaller one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaDenominator {
    /// `|S ∩ L| / |S|`
    #[default]
    ProxySet,
    /// `|S ∩ L| / |L|`
    PrivateSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UarlConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: Mode,
    pub conformal: ConformalConfig,
    /// Each epoch makes a full pass over the training split instead of seeing
    /// one of `local_epochs` disjoint shards.
    pub full_pass_epochs: bool,
    pub eta_denominator: EtaDenominator,
    /// Proximal coefficient for the proxy (0 disables it).
    pub proximal_mu: f64,
}

impl Default for UarlConfig {
    fn default() -> Self {
        UarlConfig {
            local_epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            mode: Mode::Full,
            conformal: ConformalConfig::default(),
            full_pass_epochs: false,
            eta_denominator: EtaDenominator::ProxySet,
            proximal_mu: 0.0,
        }
    }
}

impl UarlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr", format!("{} must be finite and >= 0", self.lr)));
        }
        if !(self.proximal_mu >= 0.0) {
            return Err(Error::invalid("proximal_mu", "must be >= 0"));
        }
        if self.mode == Mode::TopK(0) {
            return Err(Error::invalid("topk", "K must be >= 1"));
        }
        self.conformal.validate()
    }

    /// Conformal settings actually used for set generation under the current mode.
    pub fn effective_conformal(&self) -> ConformalConfig {
        let mut c = self.conformal.clone();
        if self.mode == Mode::G05 {
            c.lambda = 0.5;
            c.g = GVariant::G2;
        }
        c
    }
}

/// Averages over one local epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpochStats {
    pub mean_eta: f64,
    pub mean_set_size_proxy: f64,
    pub mean_set_size_private: f64,
    pub train_loss: f64,
    pub val_acc_proxy: f64,
    pub val_acc_private: f64,
    /// Accuracy change that drove the penalty multiplier this epoch.
    pub delta: f64,
    pub samples: usize,
    /// Number of per-sample behavior-imitation evaluations.
    pub bkd_evaluations: usize,
}

/// Agreement between the proxy set `s` and the private set `l`.
///
/// Jaccard overlap when `|S| >= |L|`, otherwise `|S ∩ L| / |S|`. An empty
/// proxy set carries no knowledge and yields 0.
pub fn consensus_weight(s: &PredictionSet, l: &PredictionSet) -> f64 {
    consensus_weight_with(s, l, EtaDenominator::ProxySet)
}

pub fn consensus_weight_with(s: &PredictionSet, l: &PredictionSet, denom: EtaDenominator) -> f64 {
    if s.is_empty() {
        return 0.0;
    }
    let inter = s.intersection_len(l) as f64;
    if s.len() >= l.len() {
        inter / s.union_len(l) as f64
    } else {
        match denom {
            EtaDenominator::ProxySet => inter / s.len() as f64,
            EtaDenominator::PrivateSet => inter / l.len() as f64,
        }
    }
}

/// The `k` labels with the largest logits, ties going to the lower index.
pub fn topk_set(logits: &[f64], k: usize) -> Result<PredictionSet> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(
            "k",
            format!("{k} is outside [1, {}]", logits.len()),
        ));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(PredictionSet::new(order))
}

fn epoch_shards(mut order: Vec<usize>, epochs: usize, full_pass: bool, rng: &mut Rng) -> Vec<Vec<usize>> {
    if full_pass {
        return (0..epochs)
            .map(|_| {
                order.shuffle(rng);
                order.clone()
            })
            .collect();
    }
    order.shuffle(rng);
    let n = order.len();
    (0..epochs)
        .map(|r| order[r * n / epochs..(r + 1) * n / epochs].to_vec())
        .collect()
}

fn check_splits(client: &ClientState) -> Result<()> {
    if client.split.train.is_empty() {
        return Err(Error::Empty("client training split"));
    }
    if client.split.calibration.is_empty() {
        return Err(Error::Empty("client calibration split"));
    }
    Ok(())
}

struct Accum {
    grad_private: Vec<f64>,
    grad_proxy: Vec<f64>,
}

impl Accum {
    fn new(private: &DenseNet, proxy: &DenseNet) -> Self {
        Accum {
            grad_private: vec![0.0; private.param_count()],
            grad_proxy: vec![0.0; proxy.param_count()],
        }
    }
}

/// Run the local epochs for one client, starting its proxy from `global_proxy`.
pub fn uarl_local_train(
    client: &mut ClientState,
    data: &Dataset,
    global_proxy: &ParamVector,
    cfg: &UarlConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    check_splits(client)?;
    client.proxy_net.load(global_proxy)?;
    let mut proxy_opt = AdamState::for_net(&client.proxy_net);
    let conformal = cfg.effective_conformal();
    let path = if cfg.mode == Mode::Sym {
        KdPath::Symmetric
    } else {
        KdPath::Behavior
    };
    let shards = epoch_shards(client.split.train.clone(), cfg.local_epochs, cfg.full_pass_epochs, rng);
    let calibration = client.split.calibration.clone();
    let mut stats = Vec::with_capacity(cfg.local_epochs);
    let mut proxy_acc = evaluate(&client.proxy_net, data.select(&calibration))?;

    for shard in &shards {
        client.acc_history.push(proxy_acc);
        let delta = match client.acc_history.as_slice() {
            [.., prev, now] => crate::conformal::performance_delta(*now, *prev),
            _ => 0.0,
        };
        let fitted = match cfg.mode {
            Mode::TopK(_) => None,
            _ => Some((
                ConformalModel::fit(&client.proxy_net, data.select(&calibration), &conformal, rng)?,
                ConformalModel::fit(&client.private_net, data.select(&calibration), &conformal, rng)?,
            )),
        };

        let mut eta_sum = 0.0;
        let mut s_size = 0usize;
        let mut l_size = 0usize;
        let mut loss_sum = 0.0;
        let mut bkd_evaluations = 0usize;
        for batch in shard.chunks(cfg.batch_size) {
            let mut acc = Accum::new(&client.private_net, &client.proxy_net);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = data.sample(i);
                let private_trace = client.private_net.forward_trace(x)?;
                let proxy_trace = client.proxy_net.forward_trace(x)?;
                let (s, l) = match (&fitted, cfg.mode) {
                    (_, Mode::TopK(k)) => (topk_set(proxy_trace.logits(), k)?, topk_set(private_trace.logits(), k)?),
                    (Some((cp, cw)), _) => (
                        cp.predict_set(proxy_trace.logits(), delta, rng),
                        cw.predict_set(private_trace.logits(), delta, rng),
                    ),
                    (None, _) => unreachable!("conformal models are fitted outside top-k mode"),
                };
                let eta = match cfg.mode {
                    Mode::Eta1 => 1.0,
                    _ => consensus_weight_with(&s, &l, cfg.eta_denominator),
                };
                let lg = client_objective(private_trace.logits(), proxy_trace.logits(), y, &s, eta, path)?;
                if path == KdPath::Behavior {
                    bkd_evaluations += 1;
                }
                let dp = lg.dlogits_private.as_deref().expect("private gradient");
                let dq = lg.dlogits_proxy.as_deref().expect("proxy gradient");
                client.private_net.backward_into(&private_trace, dp, scale, &mut acc.grad_private)?;
                client.proxy_net.backward_into(&proxy_trace, dq, scale, &mut acc.grad_proxy)?;
                eta_sum += eta;
                s_size += s.len();
                l_size += l.len();
                loss_sum += lg.loss;
            }
            if cfg.proximal_mu > 0.0 {
                let prox = fedprox_term(&client.proxy_net.flatten(), global_proxy, cfg.proximal_mu)?;
                acc.grad_proxy.iter_mut().zip(&prox.grad.0).for_each(|(g, p)| *g += p);
                loss_sum += prox.loss * batch.len() as f64;
            }
            adam_step(&mut client.private_net, &ParamVector(acc.grad_private), &mut client.private_opt, cfg.lr)?;
            adam_step(&mut client.proxy_net, &ParamVector(acc.grad_proxy), &mut proxy_opt, cfg.lr)?;
        }

        proxy_acc = evaluate(&client.proxy_net, data.select(&calibration))?;
        let n = shard.len().max(1) as f64;
        stats.push(EpochStats {
            mean_eta: eta_sum / n,
            mean_set_size_proxy: s_size as f64 / n,
            mean_set_size_private: l_size as f64 / n,
            train_loss: loss_sum / n,
            val_acc_proxy: proxy_acc,
            val_acc_private: evaluate(&client.private_net, data.select(&calibration))?,
            delta,
            samples: shard.len(),
            bkd_evaluations,
        });
    }
    client.acc_history.push(proxy_acc);
    Ok(stats)
}

/// Private-model-only training with cross-entropy on the same epoch schedule.
/// The proxy is untouched; this is the no-communication baseline.
pub fn local_only_train(
    client: &mut ClientState,
    data: &Dataset,
    cfg: &UarlConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    check_splits(client)?;
    let shards = epoch_shards(client.split.train.clone(), cfg.local_epochs, cfg.full_pass_epochs, rng);
    let mut stats = Vec::with_capacity(cfg.local_epochs);
    for shard in &shards {
        let mut loss_sum = 0.0;
        for batch in shard.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; client.private_net.param_count()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = data.sample(i);
                let trace = client.private_net.forward_trace(x)?;
                let ce = cross_entropy(trace.logits(), y)?;
                client.private_net.backward_into(&trace, &ce.grad, scale, &mut grad)?;
                loss_sum += ce.loss;
            }
            adam_step(&mut client.private_net, &ParamVector(grad), &mut client.private_opt, cfg.lr)?;
        }
        stats.push(EpochStats {
            train_loss: loss_sum / shard.len().max(1) as f64,
            val_acc_private: evaluate(&client.private_net, data.select(&client.split.calibration))?,
            samples: shard.len(),
            ..Default::default()
        });
    }
    Ok(stats)
}
