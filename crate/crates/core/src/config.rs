//! Run configuration: a TOML document with defaults for every field.
//!
//! ```toml
//! seed = 7
//! rounds = 20
//! clients = 8
//! sample_ratio = 1.0
//! alpha = 0.5
//! proxy_hidden = [8]
//! private_pool = [[64], [48, 48]]
//! output_dir = "out"
//!
//! [dataset]
//! kind = "synthetic"
//! classes = 10
//! dim = 10
//! n_per_class = 200
//! spread = 3.0
//!
//! [uarl]
//! local_epochs = 5
//! batch_size = 16
//! lr = 0.0001
//! mode = "full"
//!
//! [conformal]
//! theta = 0.1
//! lambda = 0.5
//! kappa_reg = 5
//!
//! [aggregation]
//! kind = "fedprox"
//! mu = 0.01
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalConfig, UPolicy};
use crate::error::{Error, Result};
use crate::federation::{Aggregation, Weighting};
use crate::reciprocity::{EtaDenominator, Mode, UarlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Full,
    Sym,
    Topk,
    Eta1,
    G05,
}

impl ModeName {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModeName::Full => "full",
            ModeName::Sym => "sym",
            ModeName::Topk => "topk",
            ModeName::Eta1 => "eta1",
            ModeName::G05 => "g05",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Client `i` gets pool entry `i mod len`.
    #[default]
    RoundRobin,
    /// Seeded uniform choice per client.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_n_per_class")]
        n_per_class: usize,
        #[serde(default = "d_spread")]
        spread: f64,
        #[serde(default = "one")]
        modes_per_class: usize,
        /// Defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` samples.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

fn one() -> usize {
    1
}
fn d_classes() -> usize {
    10
}
fn d_dim() -> usize {
    10
}
fn d_n_per_class() -> usize {
    200
}
fn d_spread() -> f64 {
    3.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: d_classes(),
            dim: d_dim(),
            n_per_class: d_n_per_class(),
            spread: d_spread(),
            modes_per_class: one(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UarlSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mode: ModeName,
    /// `K` for the top-k ablation.
    pub topk: usize,
    pub full_pass_epochs: bool,
    pub eta_denominator: EtaDenominator,
}

impl Default for UarlSection {
    fn default() -> Self {
        UarlSection {
            local_epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            mode: ModeName::Full,
            topk: 3,
            full_pass_epochs: false,
            eta_denominator: EtaDenominator::ProxySet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub sample_ratio: f64,
    pub alpha: f64,
    pub min_per_client: usize,
    pub dataset: DatasetSpec,
    /// Hidden widths of the shared proxy; input and output sizes come from the dataset.
    pub proxy_hidden: Vec<usize>,
    /// Hidden widths of each private architecture in the pool.
    pub private_pool: Vec<Vec<usize>>,
    pub private_assignment: Assignment,
    pub uarl: UarlSection,
    pub conformal: ConformalConfig,
    pub aggregation: Aggregation,
    pub weighting: Weighting,
    pub output_dir: PathBuf,
    /// When non-empty, run once per listed mode into `output_dir/<mode>/`.
    pub sweep_modes: Vec<ModeName>,
    pub checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            rounds: 10,
            clients: 10,
            sample_ratio: 0.2,
            alpha: 0.5,
            min_per_client: 10,
            dataset: DatasetSpec::default(),
            proxy_hidden: vec![8],
            private_pool: vec![vec![64], vec![48, 48], vec![96], vec![32, 32, 32]],
            private_assignment: Assignment::RoundRobin,
            uarl: UarlSection::default(),
            conformal: ConformalConfig::default(),
            aggregation: Aggregation::FedAvg {},
            weighting: Weighting::Samples,
            output_dir: PathBuf::from("out"),
            sweep_modes: Vec::new(),
            checkpoints: true,
        }
    }
}

/// One rejected field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

/// Every problem found in a configuration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub errors: Vec<FieldError>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    fn push(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.into(),
            reason: reason.into(),
        });
    }

    pub fn fields(&self) -> Vec<&str> {
        self.errors.iter().map(|e| e.field.as_str()).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "  {}: {}", e.field, e.reason)?;
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn mode(&self) -> Mode {
        mode_of(self.uarl.mode, self.uarl.topk)
    }

    pub fn uarl_config(&self) -> UarlConfig {
        UarlConfig {
            local_epochs: self.uarl.local_epochs,
            batch_size: self.uarl.batch_size,
            lr: self.uarl.lr,
            mode: self.mode(),
            conformal: self.conformal.clone(),
            full_pass_epochs: self.uarl.full_pass_epochs,
            eta_denominator: self.uarl.eta_denominator,
            proximal_mu: 0.0,
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut r = ValidationReport::default();
        if self.rounds < 1 {
            r.push("rounds", "must be >= 1");
        }
        if self.clients < 1 {
            r.push("clients", "must be >= 1");
        }
        if !(self.sample_ratio > 0.0 && self.sample_ratio <= 1.0) {
            r.push("sample_ratio", format!("{} is outside (0, 1]", self.sample_ratio));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            r.push("alpha", format!("{} must be finite and > 0", self.alpha));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                dim,
                n_per_class,
                spread,
                modes_per_class,
                ..
            } => {
                if *classes < 2 {
                    r.push("dataset.classes", "must be >= 2");
                }
                if *dim < 2 {
                    r.push("dataset.dim", "must be >= 2");
                }
                if *n_per_class < 1 {
                    r.push("dataset.n_per_class", "must be >= 1");
                }
                if !(*spread >= 0.0) || !spread.is_finite() {
                    r.push("dataset.spread", "must be finite and >= 0");
                }
                if *modes_per_class < 1 {
                    r.push("dataset.modes_per_class", "must be >= 1");
                }
                let total = classes * n_per_class;
                let needed = self.clients * self.min_per_client.max(10);
                if total < needed {
                    r.push(
                        "dataset.n_per_class",
                        format!("{total} samples cannot give {} clients {} each", self.clients, self.min_per_client.max(10)),
                    );
                }
            }
            DatasetSpec::Idx { images, labels, limit } => {
                if !images.exists() {
                    r.push("dataset.images", format!("{} does not exist", images.display()));
                }
                if !labels.exists() {
                    r.push("dataset.labels", format!("{} does not exist", labels.display()));
                }
                if *limit == Some(0) {
                    r.push("dataset.limit", "must be >= 1");
                }
            }
        }
        if self.proxy_hidden.contains(&0) {
            r.push("proxy_hidden", "hidden widths must be >= 1");
        }
        if self.private_pool.is_empty() {
            r.push("private_pool", "needs at least one architecture");
        }
        if self.private_pool.iter().flatten().any(|&w| w == 0) {
            r.push("private_pool", "hidden widths must be >= 1");
        }
        let u = &self.uarl;
        if u.local_epochs < 1 {
            r.push("uarl.local_epochs", "must be >= 1");
        }
        if u.batch_size < 1 {
            r.push("uarl.batch_size", "must be >= 1");
        }
        if !(u.lr >= 0.0) || !u.lr.is_finite() {
            r.push("uarl.lr", "must be finite and >= 0");
        }
        let classes = match &self.dataset {
            DatasetSpec::Synthetic { classes, .. } => Some(*classes),
            DatasetSpec::Idx { .. } => None,
        };
        let uses_topk = u.mode == ModeName::Topk || self.sweep_modes.contains(&ModeName::Topk);
        if uses_topk && (u.topk < 1 || classes.is_some_and(|c| u.topk > c)) {
            r.push("uarl.topk", format!("{} is outside [1, class count]", u.topk));
        }
        let c = &self.conformal;
        if !(c.theta > 0.0 && c.theta < 1.0) {
            r.push("conformal.theta", format!("{} is outside (0, 1)", c.theta));
        }
        if !(c.lambda >= 0.0) || !c.lambda.is_finite() {
            r.push("conformal.lambda", format!("{} must be finite and >= 0", c.lambda));
        }
        if c.kappa_reg < 1 {
            r.push("conformal.kappa_reg", "must be >= 1");
        }
        if let UPolicy::Fixed(v) = c.u {
            if !(0.0..=1.0).contains(&v) {
                r.push("conformal.u", format!("fixed u {v} is outside [0, 1]"));
            }
        }
        if !(c.platt_lr >= 0.0) || !c.platt_lr.is_finite() {
            r.push("conformal.platt_lr", "must be finite and >= 0");
        }
        if let Aggregation::FedProx { mu } = self.aggregation {
            if !(mu >= 0.0) || !mu.is_finite() {
                r.push("aggregation.mu", "must be finite and >= 0");
            }
        }
        r
    }
}

pub fn mode_of(name: ModeName, k: usize) -> Mode {
    match name {
        ModeName::Full => Mode::Full,
        ModeName::Sym => Mode::Sym,
        ModeName::Topk => Mode::TopK(k),
        ModeName::Eta1 => Mode::Eta1,
        ModeName::G05 => Mode::G05,
    }
}
