//! Round orchestration: sampling, broadcast, local training, proxy-only
//! aggregation, evaluation and communication accounting.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::nn::{AdamState, DenseNet, ParamVector};
use crate::reciprocity::{local_only_train, uarl_local_train, EpochStats, UarlConfig};
use crate::rng::{self, tag, Rng};

/// One participant: a private model that never leaves the client and a proxy
/// whose architecture is shared by every client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub private_net: DenseNet,
    pub proxy_net: DenseNet,
    pub private_opt: AdamState,
    pub split: ClientSplit,
    /// Proxy calibration-split accuracies, oldest first.
    pub acc_history: Vec<f64>,
}

impl ClientState {
    pub fn new(id: usize, private_net: DenseNet, proxy_net: DenseNet, split: ClientSplit) -> Self {
        let private_opt = AdamState::for_net(&private_net);
        ClientState {
            id,
            private_net,
            proxy_net,
            private_opt,
            split,
            acc_history: Vec::new(),
        }
    }
}

/// Per-round summary; one row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub global_acc: f64,
    pub proxy_acc: f64,
    pub private_acc: f64,
    pub mean_eta: f64,
    pub mean_set_size_proxy: f64,
    pub mean_set_size_private: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Aggregation {
    FedAvg {},
    /// Proximal term on the proxy during local training, then FedAvg.
    FedProx { mu: f64 },
}

/// How client contributions are weighted during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Proportional to the client's training-split size.
    #[default]
    Samples,
    Uniform,
}

#[derive(Debug, Clone)]
pub struct FederationConfig {
    pub seed: u64,
    pub sample_ratio: f64,
    pub aggregation: Aggregation,
    pub weighting: Weighting,
    pub uarl: UarlConfig,
}

impl FederationConfig {
    fn local_config(&self) -> UarlConfig {
        let mut cfg = self.uarl.clone();
        if let Aggregation::FedProx { mu } = self.aggregation {
            cfg.proximal_mu = mu;
        }
        cfg
    }
}

/// Holder of the shared proxy.
#[derive(Debug, Clone)]
pub struct Server {
    pub proxy_dims: Vec<usize>,
    pub global_proxy: ParamVector,
}

impl Server {
    pub fn new(initial: &DenseNet) -> Self {
        Server {
            proxy_dims: initial.layer_dims().to_vec(),
            global_proxy: initial.flatten(),
        }
    }

    pub fn global_net(&self) -> Result<DenseNet> {
        DenseNet::unflatten(&self.proxy_dims, &self.global_proxy)
    }
}

/// `max(1, round(ratio * n))` distinct client ids, sorted ascending.
pub fn sample_clients(n: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("clients", "must be >= 1"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("sample_ratio", format!("{ratio} is outside (0, 1]")));
    }
    let b = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut ids = index::sample(rng, n, b).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Weighted coordinate-wise mean with weights normalized to sum to one.
pub fn aggregate(proxies: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = proxies.first().ok_or(Error::Empty("proxy list"))?;
    if weights.len() != proxies.len() {
        return Err(Error::DimensionMismatch {
            what: "aggregation weights",
            expected: proxies.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights", "must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights", "sum to zero"));
    }
    let mut out = vec![0.0; first.len()];
    for (p, w) in proxies.iter().zip(weights) {
        if p.len() != first.len() {
            return Err(Error::DimensionMismatch {
                what: "proxy parameters",
                expected: first.len(),
                actual: p.len(),
            });
        }
        let w = w / total;
        out.iter_mut().zip(&p.0).for_each(|(o, v)| *o += w * v);
    }
    Ok(ParamVector(out))
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<'a>(net: &DenseNet, samples: impl IntoIterator<Item = (&'a [f64], usize)>) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in samples {
        let logits = net.forward_logits(x)?;
        if argmax(&logits) == y {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Empty("evaluation samples"));
    }
    Ok(correct as f64 / total as f64)
}

/// Share of communicated parameters relative to a baseline that exchanges full models.
pub fn comm_ratio(proxy_params: u64, private_params_total: u64) -> Result<f64> {
    if proxy_params == 0 || private_params_total == 0 {
        return Err(Error::invalid("params", "counts must be positive"));
    }
    Ok(proxy_params as f64 / private_params_total as f64)
}

/// Everything produced by one round.
#[derive(Debug, Clone)]
pub struct RoundOutcome {
    pub metrics: RoundMetrics,
    pub sampled: Vec<usize>,
    /// Epoch statistics of each sampled client, in `sampled` order.
    pub epochs: Vec<Vec<EpochStats>>,
}

fn for_sampled<F>(clients: &mut [ClientState], sampled: &[usize], pool: Option<&rayon::ThreadPool>, f: F) -> Result<Vec<Vec<EpochStats>>>
where
    F: Fn(&mut ClientState) -> Result<Vec<EpochStats>> + Sync,
{
    let mut active: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| sampled.binary_search(&c.id).is_ok())
        .collect();
    match pool {
        Some(pool) => pool.install(|| active.par_iter_mut().map(|c| f(c)).collect()),
        None => active.iter_mut().map(|c| f(c)).collect(),
    }
}

fn weighted_epoch_mean(epochs: &[Vec<EpochStats>], pick: impl Fn(&EpochStats) -> f64) -> f64 {
    let (sum, n) = epochs
        .iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), e| (s + pick(e) * e.samples as f64, n + e.samples));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let v = values.collect::<Result<Vec<f64>>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// One communication round.
///
/// `round` is 1-based. Client ids must equal their position in `clients`.
pub fn run_round(
    server: &mut Server,
    clients: &mut [ClientState],
    data: &Dataset,
    cfg: &FederationConfig,
    round: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RoundOutcome> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let mut sample_rng = rng::stream(cfg.seed, &[tag::SAMPLE, round as u64]);
    let sampled = sample_clients(clients.len(), cfg.sample_ratio, &mut sample_rng)?;
    let local_cfg = cfg.local_config();
    let broadcast = server.global_proxy.clone();
    let proxy_len = broadcast.len();

    let epochs = for_sampled(clients, &sampled, pool, |c| {
        let mut rng = rng::stream(cfg.seed, &[tag::LOCAL_TRAIN, c.id as u64, round as u64]);
        uarl_local_train(c, data, &broadcast, &local_cfg, &mut rng)
    })?;

    let mut uploads = Vec::with_capacity(sampled.len());
    let mut weights = Vec::with_capacity(sampled.len());
    for &id in &sampled {
        let upload = clients[id].proxy_net.flatten();
        if upload.len() != proxy_len {
            return Err(Error::DimensionMismatch {
                what: "uploaded proxy",
                expected: proxy_len,
                actual: upload.len(),
            });
        }
        uploads.push(upload);
        weights.push(match cfg.weighting {
            Weighting::Samples => clients[id].split.train.len() as f64,
            Weighting::Uniform => 1.0,
        });
    }
    server.global_proxy = aggregate(&uploads, &weights)?;
    if server.global_proxy.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("aggregated proxy is non-finite in round {round}")));
    }
    let global = server.global_net()?;

    let bytes = (sampled.len() * proxy_len * 8) as u64;
    let metrics = RoundMetrics {
        round,
        global_acc: mean(clients.iter().map(|c| evaluate(&global, data.select(&c.split.test))))?,
        proxy_acc: mean(clients.iter().map(|c| evaluate(&c.proxy_net, data.select(&c.split.test))))?,
        private_acc: mean(clients.iter().map(|c| evaluate(&c.private_net, data.select(&c.split.test))))?,
        mean_eta: weighted_epoch_mean(&epochs, |e| e.mean_eta),
        mean_set_size_proxy: weighted_epoch_mean(&epochs, |e| e.mean_set_size_proxy),
        mean_set_size_private: weighted_epoch_mean(&epochs, |e| e.mean_set_size_private),
        bytes_up: bytes,
        bytes_down: bytes,
    };
    Ok(RoundOutcome {
        metrics,
        sampled,
        epochs,
    })
}

/// A round of the no-communication baseline: the same clients are sampled as
/// in [`run_round`] and train their private models with cross-entropy only.
/// Returns the mean private test accuracy over all clients.
pub fn run_local_only_round(
    clients: &mut [ClientState],
    data: &Dataset,
    cfg: &FederationConfig,
    round: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    let mut sample_rng = rng::stream(cfg.seed, &[tag::SAMPLE, round as u64]);
    let sampled = sample_clients(clients.len(), cfg.sample_ratio, &mut sample_rng)?;
    for_sampled(clients, &sampled, pool, |c| {
        let mut rng = rng::stream(cfg.seed, &[tag::LOCAL_TRAIN, c.id as u64, round as u64]);
        local_only_train(c, data, &cfg.uarl, &mut rng)
    })?;
    mean(clients.iter().map(|c| evaluate(&c.private_net, data.select(&c.split.test))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sampling_sizes_and_determinism() {
        let mut rng = Rng::seed_from_u64(4);
        let s = sample_clients(100, 0.2, &mut rng).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_clients(7, 1.0, &mut rng).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(sample_clients(10, 0.01, &mut rng).unwrap().len(), 1);
        let a = sample_clients(50, 0.3, &mut Rng::seed_from_u64(8)).unwrap();
        let b = sample_clients(50, 0.3, &mut Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(sample_clients(10, 0.0, &mut rng).is_err());
        assert!(sample_clients(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let a = ParamVector(vec![1.0, 3.0]);
        let b = ParamVector(vec![3.0, 5.0]);
        assert_eq!(aggregate(&[a.clone(), b], &[1.0, 1.0]).unwrap().0, vec![2.0, 4.0]);
        assert_eq!(aggregate(std::slice::from_ref(&a), &[0.3]).unwrap(), a);
        let z = ParamVector(vec![0.0, 0.0]);
        let c = ParamVector(vec![4.0, 8.0]);
        assert_eq!(aggregate(&[z, c], &[3.0, 1.0]).unwrap().0, vec![1.0, 2.0]);
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(std::slice::from_ref(&a), &[0.0]).is_err());
        assert!(aggregate(&[a, ParamVector(vec![1.0])], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn argmax_ties_to_lower_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn evaluate_constant_predictor() {
        let mut net = DenseNet::zeros(&[2, 3]).unwrap();
        net.biases_mut(0).copy_from_slice(&[0.0, 1.0, 0.0]);
        let xs = [vec![0.5, 0.1], vec![-2.0, 3.0]];
        let acc = evaluate(&net, xs.iter().map(|x| (x.as_slice(), 1))).unwrap();
        assert_eq!(acc, 1.0);
        assert!(evaluate(&net, std::iter::empty()).is_err());
        let bad = [vec![1.0]];
        assert!(evaluate(&net, bad.iter().map(|x| (x.as_slice(), 0))).is_err());
    }

    #[test]
    fn comm_ratio_examples() {
        assert!((comm_ratio(11_170_000, 144_030_000).unwrap() - 0.0776).abs() < 1e-4);
        assert_eq!(comm_ratio(5, 5).unwrap(), 1.0);
        assert_eq!(comm_ratio(1, 100).unwrap(), 0.01);
        assert!(comm_ratio(1, 0).is_err());
    }
}
