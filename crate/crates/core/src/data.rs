//! Datasets and non-IID client partitioning.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Labeled feature vectors of a fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset labels",
                expected: features.len(),
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        if let Some(first) = features.first() {
            let dim = first.len();
            if let Some(f) = features.iter().find(|f| f.len() != dim) {
                return Err(Error::DimensionMismatch {
                    what: "feature vector",
                    expected: dim,
                    actual: f.len(),
                });
            }
        }
        Ok(Dataset {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    /// Samples at the given indices, in order.
    pub fn select<'a>(&'a self, idx: &'a [usize]) -> impl Iterator<Item = (&'a [f64], usize)> + 'a {
        idx.iter().map(move |&i| self.sample(i))
    }
}

/// Isotropic Gaussian blobs, one per class, with unit noise.
///
/// Class means are independent random directions on the unit sphere scaled
/// by `spread`; with `spread = 0` the classes are indistinguishable.
pub fn synth_gaussian(classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Result<Dataset> {
    synth_gaussian_mixture(classes, dim, n_per_class, spread, 1, seed)
}

/// Like [`synth_gaussian`], but each class is a mixture of `modes_per_class`
/// equally weighted blobs with their own random centers.
pub fn synth_gaussian_mixture(
    classes: usize,
    dim: usize,
    n_per_class: usize,
    spread: f64,
    modes_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("classes", "need at least 2 classes"));
    }
    if dim < 2 {
        return Err(Error::invalid("dim", "need at least 2 feature dimensions"));
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class", "must be >= 1"));
    }
    if modes_per_class == 0 {
        return Err(Error::invalid("modes_per_class", "must be >= 1"));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::invalid("spread", format!("{spread} must be finite and >= 0")));
    }
    let mut rng = crate::rng::stream(seed, &[crate::rng::tag::DATA]);
    let mut centers = Vec::with_capacity(classes * modes_per_class);
    for _ in 0..classes * modes_per_class {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|a| *a *= spread / norm);
        centers.push(v);
    }
    let mut features = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        for i in 0..n_per_class {
            let center = &centers[c * modes_per_class + i % modes_per_class];
            features.push(
                center
                    .iter()
                    .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
            labels.push(c);
        }
    }
    Dataset::new(features, labels, classes)
}

/// Per-client index lists.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub calibration: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len() + self.calibration.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<ClientSplit>,
}

impl Partition {
    /// True iff every index in `0..n` appears exactly once across all clients and lists.
    pub fn is_exact(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for c in &self.clients {
            for &i in c.train.iter().chain(&c.test).chain(&c.calibration) {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Label-skewed allocation: each class's samples are divided across clients
/// in proportions drawn from `Dirichlet(alpha, ..., alpha)`. The whole draw is
/// repeated until every client holds at least `min_per_client` samples.
pub fn dirichlet_partition(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    min_per_client: usize,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    const MAX_ATTEMPTS: usize = 10_000;
    if clients == 0 {
        return Err(Error::invalid("clients", "must be >= 1"));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid("alpha", format!("{alpha} must be finite and > 0")));
    }
    let infeasible = |reason: String| Error::InfeasiblePartition {
        clients,
        min_per_client,
        reason,
    };
    if labels.len() < clients * min_per_client {
        return Err(infeasible(format!("only {} samples available", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;

    for _ in 0..MAX_ATTEMPTS {
        let mut out = vec![Vec::new(); clients];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(rng);
            let mut weights: Vec<f64> = (0..clients).map(|_| gamma.sample(rng)).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                // Every gamma draw underflowed; hand the class to one client at random.
                weights.iter_mut().for_each(|w| *w = 0.0);
                weights[rng.random_range(0..clients)] = 1.0;
            }
            let n = members.len();
            let mut start = 0;
            let mut acc = 0.0;
            for (c, w) in weights.iter().enumerate() {
                acc += w;
                let end = if c + 1 == clients {
                    n
                } else {
                    ((acc * n as f64) as usize).clamp(start, n)
                };
                out[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        if out.iter().all(|c| c.len() >= min_per_client) {
            for c in &mut out {
                c.sort_unstable();
            }
            return Ok(out);
        }
    }
    Err(infeasible(format!("no valid draw in {MAX_ATTEMPTS} attempts")))
}

/// Shuffle and cut into train / test / calibration of sizes
/// `floor(0.7 n)`, `floor(0.2 n)` and the remainder.
pub fn split_721(indices: &[usize], rng: &mut Rng) -> Result<ClientSplit> {
    let n = indices.len();
    if n < 10 {
        return Err(Error::invalid("indices", format!("need at least 10 samples, got {n}")));
    }
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let n_train = 7 * n / 10;
    let n_test = 2 * n / 10;
    let calibration = shuffled.split_off(n_train + n_test);
    let test = shuffled.split_off(n_train);
    Ok(ClientSplit {
        train: shuffled,
        test,
        calibration,
    })
}

/// Dirichlet allocation followed by a per-client 7:2:1 split.
pub fn partition_dataset(
    labels: &[usize],
    clients: usize,
    alpha: f64,
    min_per_client: usize,
    rng: &mut Rng,
) -> Result<Partition> {
    let min = min_per_client.max(10);
    let alloc = dirichlet_partition(labels, clients, alpha, min, rng)?;
    let clients = alloc
        .iter()
        .map(|idx| split_721(idx, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition { clients })
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::IdxMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn check_body(bytes: &[u8], header: usize, body: usize, path: &Path) -> Result<()> {
    if bytes.len() < header + body {
        return Err(Error::IdxTruncated {
            path: path.to_path_buf(),
            expected: header + body,
            found: bytes.len(),
        });
    }
    Ok(())
}

/// Load an MNIST-layout IDX image/label pair. Pixels are scaled to `[0, 1]`
/// and flattened row by row; the class count is `max(label) + 1` (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let img = read_file(images_path)?;
    check_magic(&img, IDX_IMAGES_MAGIC, images_path)?;
    let count = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let dim = rows * cols;
    check_body(&img, 16, count * dim, images_path)?;

    let lab = read_file(labels_path)?;
    check_magic(&lab, IDX_LABELS_MAGIC, labels_path)?;
    let label_count = be_u32(&lab, 4, labels_path)? as usize;
    if label_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }
    check_body(&lab, 8, count, labels_path)?;

    let features = img[16..16 + count * dim]
        .chunks_exact(dim.max(1))
        .take(count)
        .map(|px| px.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lab[8..8 + count].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(features, labels, classes)
}
