//! Browser bindings for three interactive views:
//! - prediction-set explorer: which labels a fitted conformal wrapper keeps
//! - calibration curves: the penalty multiplier g(Δ, λ) for each variant
//! - partition histograms: per-client label counts of a Dirichlet split
//!
//! Every export returns a JSON string. The `*_json` functions are the plain
//! Rust entry points used by the exports and by the tests.

use rand::SeedableRng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use fedtype::conformal::{g_calibration, raps_score, ConformalConfig, ConformalModel, GVariant, UPolicy};
use fedtype::data::dirichlet_partition;
use fedtype::rng::Rng;

#[derive(Debug, Serialize)]
pub struct LabelRow {
    pub label: usize,
    pub rank: usize,
    pub probability: f64,
    pub score: f64,
    pub included: bool,
}

#[derive(Debug, Serialize)]
pub struct SetView {
    pub penalty: f64,
    pub tau: f64,
    pub rows: Vec<LabelRow>,
    pub set: Vec<usize>,
}

pub fn parse_variant(name: &str) -> Result<GVariant, String> {
    serde_json::from_value(serde_json::Value::String(name.to_ascii_lowercase()))
        .map_err(|_| format!("unknown calibration variant `{name}` (expected g1..g4)"))
}

/// Score every label of `logits` and report the resulting prediction set.
#[allow(clippy::too_many_arguments)]
pub fn prediction_set_json(
    logits: &[f64],
    temperature: f64,
    tau: f64,
    lambda: f64,
    kappa_reg: usize,
    u: f64,
    delta: f64,
    variant: &str,
) -> Result<String, String> {
    if logits.len() < 2 {
        return Err("need at least two logits".into());
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err("temperature must be > 0".into());
    }
    let config = ConformalConfig {
        lambda,
        kappa_reg,
        u: UPolicy::Fixed(u),
        g: parse_variant(variant)?,
        ..ConformalConfig::default()
    };
    config.validate().map_err(|e| e.to_string())?;
    let model = ConformalModel {
        temperature,
        tau,
        config,
    };
    let penalty = g_calibration(delta, lambda, model.config.g);
    let probs = model.probabilities(logits);
    let set = model.predict_set_with(logits, u, penalty);

    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let rows = order
        .iter()
        .enumerate()
        .map(|(pos, &label)| {
            Ok(LabelRow {
                label,
                rank: pos + 1,
                probability: probs[label],
                score: raps_score(&probs, label, u, penalty, kappa_reg).map_err(|e| e.to_string())?,
                included: set.contains(label),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    let view = SetView {
        penalty,
        tau,
        rows,
        set: set.labels().to_vec(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Curves {
    pub delta: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
    pub g3: Vec<f64>,
    pub g4: Vec<f64>,
}

/// Sample each variant of g on `points` evenly spaced Δ in [-1, 1].
pub fn g_curves_json(lambda: f64, points: usize) -> Result<String, String> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err("lambda must be finite and >= 0".into());
    }
    let points = points.clamp(2, 1000);
    let delta: Vec<f64> = (0..points).map(|i| -1.0 + 2.0 * i as f64 / (points - 1) as f64).collect();
    let curve = |g| delta.iter().map(|&d| g_calibration(d, lambda, g)).collect();
    let curves = Curves {
        g1: curve(GVariant::G1),
        g2: curve(GVariant::G2),
        g3: curve(GVariant::G3),
        g4: curve(GVariant::G4),
        delta,
    };
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct PartitionView {
    /// `histograms[client][class]` sample counts.
    pub histograms: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
}

/// Split a balanced label set of `per_class` samples per class across clients.
pub fn partition_json(clients: usize, classes: usize, per_class: usize, alpha: f64, seed: u64) -> Result<String, String> {
    if !(2..=100).contains(&classes) || clients > 100 || per_class > 10_000 {
        return Err("use 2..=100 classes, at most 100 clients and 10000 samples per class".into());
    }
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let mut rng = Rng::seed_from_u64(seed);
    let alloc = dirichlet_partition(&labels, clients, alpha, 1, &mut rng).map_err(|e| e.to_string())?;
    let histograms: Vec<Vec<usize>> = alloc
        .iter()
        .map(|idx| {
            let mut h = vec![0; classes];
            idx.iter().for_each(|&i| h[labels[i]] += 1);
            h
        })
        .collect();
    let view = PartitionView {
        sizes: alloc.iter().map(Vec::len).collect(),
        histograms,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn prediction_set(
    logits: Vec<f64>,
    temperature: f64,
    tau: f64,
    lambda: f64,
    kappa_reg: usize,
    u: f64,
    delta: f64,
    variant: &str,
) -> Result<String, JsError> {
    prediction_set_json(&logits, temperature, tau, lambda, kappa_reg, u, delta, variant).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn g_curves(lambda: f64, points: usize) -> Result<String, JsError> {
    g_curves_json(lambda, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn partition(clients: usize, classes: usize, per_class: usize, alpha: f64, seed: u64) -> Result<String, JsError> {
    partition_json(clients, classes, per_class, alpha, seed).map_err(|e| JsError::new(&e))
}
