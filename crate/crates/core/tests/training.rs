use rand::SeedableRng;

use fedtype::config::{ModeName, RunConfig};
use fedtype::data::{split_721, synth_gaussian, Dataset};
use fedtype::federation::{aggregate, evaluate, run_round, Aggregation, ClientState, FederationConfig, Server, Weighting};
use fedtype::nn::{DenseNet, ParamVector};
use fedtype::reciprocity::{uarl_local_train, Mode, UarlConfig};
use fedtype::rng::Rng;
use fedtype::runner::{self, read_metrics, Simulation};

fn client(data: &Dataset, idx: &[usize], id: usize, seed: u64, private_hidden: usize) -> ClientState {
    let split = split_721(idx, &mut Rng::seed_from_u64(seed)).unwrap();
    let dim = data.dim();
    let private = DenseNet::init(&[dim, private_hidden, data.classes], seed + 1).unwrap();
    let proxy = DenseNet::init(&[dim, 4, data.classes], seed + 2).unwrap();
    ClientState::new(id, private, proxy, split)
}

#[test]
fn zero_lr_single_epoch_leaves_models_unchanged() {
    let data = synth_gaussian(3, 4, 40, 2.0, 1).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut c = client(&data, &idx, 0, 1, 8);
    let before_private = c.private_net.clone();
    let global = c.proxy_net.flatten();
    let cfg = UarlConfig {
        local_epochs: 1,
        lr: 0.0,
        ..UarlConfig::default()
    };
    let stats = uarl_local_train(&mut c, &data, &global, &cfg, &mut Rng::seed_from_u64(0)).unwrap();
    assert_eq!(stats.len(), 1);
    assert_eq!(stats[0].samples, c.split.train.len());
    assert!(stats[0].train_loss.is_finite() && stats[0].train_loss > 0.0);
    assert!((0.0..=1.0).contains(&stats[0].mean_eta));
    assert_eq!(c.private_net, before_private);
    assert_eq!(c.proxy_net.flatten(), global);
}

#[test]
fn eta1_matches_full_when_sets_are_always_full() {
    // Fewer than nine calibration samples at theta = 0.1 forces tau = +inf, so
    // both sets are the whole label set and the consensus weight is 1 anyway.
    let data = synth_gaussian(3, 4, 25, 2.0, 2).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let base = client(&data, &idx, 0, 2, 8);
    assert!(base.split.calibration.len() < 9);
    let global = base.proxy_net.flatten();
    let run = |mode| {
        let mut c = base.clone();
        let cfg = UarlConfig {
            lr: 0.01,
            mode,
            ..UarlConfig::default()
        };
        let stats = uarl_local_train(&mut c, &data, &global, &cfg, &mut Rng::seed_from_u64(9)).unwrap();
        (c.private_net, c.proxy_net, stats)
    };
    let (full, eta1) = (run(Mode::Full), run(Mode::Eta1));
    assert_eq!(full.0, eta1.0);
    assert_eq!(full.1, eta1.1);
    assert_eq!(full.2, eta1.2);
    assert!(full.2.iter().all(|s| s.mean_eta == 1.0 && s.mean_set_size_proxy == 3.0));
}

#[test]
fn local_training_improves_private_model() {
    let mut gain = 0.0;
    for seed in 0..5 {
        let data = synth_gaussian(2, 4, 100, 6.0, seed).unwrap();
        let half: Vec<usize> = (0..data.len()).filter(|i| i % 2 == 0).collect();
        let mut c = client(&data, &half, 0, seed, 16);
        let before = evaluate(&c.private_net, data.select(&c.split.test)).unwrap();
        let global = c.proxy_net.flatten();
        let cfg = UarlConfig {
            lr: 0.01,
            full_pass_epochs: true,
            ..UarlConfig::default()
        };
        uarl_local_train(&mut c, &data, &global, &cfg, &mut Rng::seed_from_u64(seed)).unwrap();
        let after = evaluate(&c.private_net, data.select(&c.split.test)).unwrap();
        gain += after - before;
    }
    assert!(gain / 5.0 > 0.0, "mean gain {}", gain / 5.0);
}

fn federation(seed: u64, ratio: f64, lr: f64) -> FederationConfig {
    FederationConfig {
        seed,
        sample_ratio: ratio,
        aggregation: Aggregation::FedAvg {},
        weighting: Weighting::Samples,
        uarl: UarlConfig {
            local_epochs: 2,
            lr,
            ..UarlConfig::default()
        },
    }
}

#[test]
fn zero_lr_round_returns_weighted_mean_of_initial_proxies() {
    let data = synth_gaussian(3, 4, 60, 2.0, 4).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut clients: Vec<ClientState> = idx.chunks(60).enumerate().map(|(i, c)| client(&data, c, i, 10 + i as u64, 8)).collect();
    let initial = DenseNet::init(&[4, 4, 3], 77).unwrap();
    let mut server = Server::new(&initial);
    let out = run_round(&mut server, &mut clients, &data, &federation(4, 1.0, 0.0), 1, None).unwrap();
    assert_eq!(out.sampled, vec![0, 1, 2]);
    let uploads: Vec<ParamVector> = clients.iter().map(|_| initial.flatten()).collect();
    let weights: Vec<f64> = clients.iter().map(|c| c.split.train.len() as f64).collect();
    let expected = aggregate(&uploads, &weights).unwrap();
    for (a, b) in server.global_proxy.0.iter().zip(&expected.0) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_client_round_adopts_its_proxy() {
    let data = synth_gaussian(3, 4, 40, 2.0, 5).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut clients = vec![client(&data, &idx, 0, 5, 8)];
    let mut server = Server::new(&clients[0].proxy_net);
    let out = run_round(&mut server, &mut clients, &data, &federation(5, 1.0, 0.01), 1, None).unwrap();
    assert_eq!(server.global_proxy, clients[0].proxy_net.flatten());
    assert_eq!(out.metrics.global_acc, out.metrics.proxy_acc);
    assert_eq!(out.metrics.bytes_up, (server.global_proxy.len() * 8) as u64);
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        rounds: 3,
        clients: 4,
        sample_ratio: 0.5,
        min_per_client: 30,
        proxy_hidden: vec![6],
        private_pool: vec![vec![12], vec![8, 8]],
        ..RunConfig::default()
    };
    cfg.uarl.lr = 0.003;
    cfg.uarl.local_epochs = 2;
    cfg
}

#[test]
fn parallel_and_serial_rounds_agree() {
    let cfg = small_config(7);
    let mut serial = Simulation::new(&cfg).unwrap();
    let mut parallel = Simulation::new(&cfg).unwrap();
    parallel.set_parallelism(3).unwrap();
    for _ in 0..cfg.rounds {
        let (a, b) = (serial.step().unwrap(), parallel.step().unwrap());
        assert_eq!(a.metrics, b.metrics);
    }
    assert_eq!(serial.server.global_proxy, parallel.server.global_proxy);
}

#[test]
fn every_mode_runs() {
    for mode in [ModeName::Full, ModeName::Sym, ModeName::Topk, ModeName::Eta1, ModeName::G05] {
        let mut cfg = small_config(3);
        cfg.uarl.mode = mode;
        let mut sim = Simulation::new(&cfg).unwrap();
        let m = sim.step().unwrap().metrics;
        assert!((0.0..=1.0).contains(&m.private_acc), "{mode:?}");
        if mode == ModeName::Eta1 {
            assert_eq!(m.mean_eta, 1.0);
        }
        if mode == ModeName::Topk {
            assert_eq!(m.mean_set_size_proxy, cfg.uarl.topk as f64);
        }
    }
}

#[test]
fn artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(11);
    cfg.output_dir = dir.path().join("run");
    let summaries = runner::run(&cfg, 1).unwrap();
    assert_eq!(summaries.len(), 1);

    let rows = read_metrics(&cfg.output_dir.join("metrics.csv")).unwrap();
    let mut sim = Simulation::new(&cfg).unwrap();
    let expected: Vec<_> = (0..cfg.rounds).map(|_| sim.step().unwrap().metrics).collect();
    assert_eq!(rows, expected);

    let blob = std::fs::read(cfg.output_dir.join("checkpoints/round_3.params")).unwrap();
    assert_eq!(ParamVector::from_le_bytes(&blob).unwrap(), sim.server.global_proxy);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("summary.json")).unwrap()).unwrap();
    let echoed: RunConfig = serde_json::from_value(summary["config"].clone()).unwrap();
    assert_eq!(echoed, cfg);
    assert_eq!(summary["final"]["round"], 3);
}

#[test]
fn local_only_baseline_ignores_the_proxy() {
    let cfg = small_config(13);
    let mut sim = Simulation::new(&cfg).unwrap();
    let proxy_before = sim.server.global_proxy.clone();
    let acc = sim.step_local_only().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(sim.server.global_proxy, proxy_before);
}
