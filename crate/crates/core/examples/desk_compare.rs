//! Seed-averaged comparison of training modes and the local-only baseline.
//!
//! Usage: `cargo run --release -p fedtype-core --example desk_compare -- <config.toml> [seeds]`

use fedtype::config::{ModeName, RunConfig};
use fedtype::runner::Simulation;

fn main() -> fedtype::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let base = match args.get(1) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);

    for mode in [ModeName::Full, ModeName::Sym] {
        let (mut g, mut p, mut w, mut eta_first, mut eta_last) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for seed in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.uarl.mode = mode;
            let mut sim = Simulation::new(&cfg)?;
            let mut last = None;
            for r in 0..cfg.rounds {
                let m = sim.step()?.metrics;
                if r == 0 {
                    eta_first += m.mean_eta;
                }
                last = Some(m);
            }
            let m = last.expect("at least one round");
            println!(
                "{:>4} seed {seed}: global {:.4} proxy {:.4} private {:.4} eta {:.3} |S| {:.2} |L| {:.2}",
                mode.as_str(),
                m.global_acc,
                m.proxy_acc,
                m.private_acc,
                m.mean_eta,
                m.mean_set_size_proxy,
                m.mean_set_size_private
            );
            g += m.global_acc;
            p += m.proxy_acc;
            w += m.private_acc;
            eta_last += m.mean_eta;
        }
        let n = seeds as f64;
        println!(
            "{:>4} mean: global {:.4} proxy {:.4} private {:.4} eta first {:.3} last {:.3}",
            mode.as_str(),
            g / n,
            p / n,
            w / n,
            eta_first / n,
            eta_last / n
        );
    }

    let mut local = 0.0;
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let mut sim = Simulation::new(&cfg)?;
        let mut acc = 0.0;
        for _ in 0..cfg.rounds {
            acc = sim.step_local_only()?;
        }
        println!("local seed {seed}: private {acc:.4}");
        local += acc;
    }
    println!("local mean: private {:.4}", local / seeds as f64);
    Ok(())
}
