//! End-to-end experiment runs: build the client pool from a [`RunConfig`],
//! execute the rounds and persist metrics, a summary and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use serde::Serialize;

use crate::config::{mode_of, DatasetSpec, RunConfig};
use crate::data::{load_idx, partition_dataset, synth_gaussian_mixture, Dataset};
use crate::error::{Error, Result};
use crate::federation::{
    run_local_only_round, run_round, ClientState, FederationConfig, RoundMetrics, RoundOutcome, Server,
};
use crate::nn::DenseNet;
use crate::rng::{self, tag};

pub const METRICS_HEADER: &str =
    "round,global_acc,proxy_acc,private_acc,mean_eta,mean_set_size_proxy,mean_set_size_private,bytes_up,bytes_down";

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetSpec::Synthetic {
            classes,
            dim,
            n_per_class,
            spread,
            modes_per_class,
            seed,
        } => synth_gaussian_mixture(*classes, *dim, *n_per_class, *spread, *modes_per_class, seed.unwrap_or(cfg.seed)),
        DatasetSpec::Idx { images, labels, limit } => {
            let mut d = load_idx(images, labels)?;
            if let Some(n) = limit {
                d.features.truncate(*n);
                d.labels.truncate(*n);
            }
            Ok(d)
        }
    }
}

fn dims(input: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(classes))
        .collect()
}

/// A federation in progress.
pub struct Simulation {
    pub config: RunConfig,
    pub data: Dataset,
    pub clients: Vec<ClientState>,
    pub server: Server,
    pub federation: FederationConfig,
    pool: Option<rayon::ThreadPool>,
    round: usize,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let report = config.validate();
        if !report.is_empty() {
            return Err(Error::Config(report));
        }
        let data = load_dataset(config)?;
        Self::with_data(config, data)
    }

    /// Build from an already loaded dataset.
    pub fn with_data(config: &RunConfig, data: Dataset) -> Result<Self> {
        let seed = config.seed;
        let mut part_rng = rng::stream(seed, &[tag::PARTITION]);
        let partition = partition_dataset(&data.labels, config.clients, config.alpha, config.min_per_client, &mut part_rng)?;

        let proxy_dims = dims(data.dim(), &config.proxy_hidden, data.classes);
        let proxy = DenseNet::init_with(&proxy_dims, &mut rng::stream(seed, &[tag::INIT_PROXY]))?;
        let mut assign_rng = rng::stream(seed, &[tag::INIT_PRIVATE, u64::MAX]);
        let clients = partition
            .clients
            .into_iter()
            .enumerate()
            .map(|(id, split)| {
                let arch = match config.private_assignment {
                    crate::config::Assignment::RoundRobin => id % config.private_pool.len(),
                    crate::config::Assignment::Random => assign_rng.random_range(0..config.private_pool.len()),
                };
                let private_dims = dims(data.dim(), &config.private_pool[arch], data.classes);
                let private = DenseNet::init_with(&private_dims, &mut rng::stream(seed, &[tag::INIT_PRIVATE, id as u64]))?;
                Ok(ClientState::new(id, private, proxy.clone(), split))
            })
            .collect::<Result<Vec<_>>>()?;

        let federation = FederationConfig {
            seed,
            sample_ratio: config.sample_ratio,
            aggregation: config.aggregation,
            weighting: config.weighting,
            uarl: config.uarl_config(),
        };
        Ok(Simulation {
            config: config.clone(),
            data,
            clients,
            server: Server::new(&proxy),
            federation,
            pool: None,
            round: 0,
        })
    }

    /// Train up to `threads` sampled clients concurrently. Results do not depend on the value.
    pub fn set_parallelism(&mut self, threads: usize) -> Result<()> {
        self.pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .map_err(|e| Error::invalid("parallel_clients", e.to_string()))?,
            )
        } else {
            None
        };
        Ok(())
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn step(&mut self) -> Result<RoundOutcome> {
        let round = self.round + 1;
        let out = run_round(
            &mut self.server,
            &mut self.clients,
            &self.data,
            &self.federation,
            round,
            self.pool.as_ref(),
        )?;
        self.round = round;
        Ok(out)
    }

    /// One round of the no-communication baseline; returns mean private accuracy.
    pub fn step_local_only(&mut self) -> Result<f64> {
        let round = self.round + 1;
        let acc = run_local_only_round(&mut self.clients, &self.data, &self.federation, round, self.pool.as_ref())?;
        self.round = round;
        Ok(acc)
    }

    pub fn proxy_param_count(&self) -> usize {
        self.server.global_proxy.len()
    }

    pub fn private_param_counts(&self) -> Vec<usize> {
        self.clients.iter().map(|c| c.private_net.param_count()).collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mode: String,
    pub rounds_completed: usize,
    #[serde(rename = "final")]
    pub final_round: Option<RoundMetrics>,
    pub proxy_param_count: usize,
    pub private_param_counts: Vec<usize>,
    /// Proxy size relative to the mean private model size.
    pub comm_ratio: f64,
    pub config: RunConfig,
}

/// Writes `metrics.csv` one flushed row per round.
pub struct MetricsWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            inner: csv::Writer::from_writer(BufWriter::new(file)),
        })
    }

    pub fn write(&mut self, m: &RoundMetrics) -> Result<()> {
        self.inner.serialize(m)?;
        self.inner.flush().map_err(|e| Error::io("metrics.csv", e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn run_single(config: &RunConfig, out: &Path, parallel: usize) -> Result<RunSummary> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_dir = out.join("checkpoints");
    if config.checkpoints {
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    let started = Instant::now();
    let mut sim = Simulation::new(config)?;
    sim.set_parallelism(parallel)?;
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;
    let mut last = None;
    for _ in 0..config.rounds {
        let outcome = sim.step()?;
        let m = outcome.metrics;
        log::info!(
            "round {:>3}: global {:.4} proxy {:.4} private {:.4} eta {:.3} |S| {:.2} |L| {:.2}",
            m.round,
            m.global_acc,
            m.proxy_acc,
            m.private_acc,
            m.mean_eta,
            m.mean_set_size_proxy,
            m.mean_set_size_private
        );
        writer.write(&m)?;
        if config.checkpoints {
            let path = ckpt_dir.join(format!("round_{}.params", m.round));
            fs::write(&path, sim.server.global_proxy.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        last = Some(m);
    }
    log::info!("finished {} rounds in {:.2?}", sim.rounds_done(), started.elapsed());

    let private = sim.private_param_counts();
    let mean_private = private.iter().sum::<usize>() as f64 / private.len().max(1) as f64;
    let summary = RunSummary {
        seed: config.seed,
        mode: config.uarl.mode.as_str().to_string(),
        rounds_completed: sim.rounds_done(),
        final_round: last,
        proxy_param_count: sim.proxy_param_count(),
        comm_ratio: sim.proxy_param_count() as f64 / mean_private,
        private_param_counts: private,
        config: config.clone(),
    };
    let path = out.join("summary.json");
    let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Execute a configuration, writing into `config.output_dir`. A sweep writes one
/// subdirectory per mode and returns one summary each.
pub fn run(config: &RunConfig, parallel: usize) -> Result<Vec<RunSummary>> {
    let report = config.validate();
    if !report.is_empty() {
        return Err(Error::Config(report));
    }
    if config.sweep_modes.is_empty() {
        return Ok(vec![run_single(config, &config.output_dir, parallel)?]);
    }
    config
        .sweep_modes
        .iter()
        .map(|&mode| {
            let mut c = config.clone();
            c.uarl.mode = mode;
            c.sweep_modes.clear();
            let out: PathBuf = config.output_dir.join(mode.as_str());
            c.output_dir = out.clone();
            log::info!("sweep: mode {:?}", mode_of(mode, c.uarl.topk));
            run_single(&c, &out, parallel)
        })
        .collect()
}
