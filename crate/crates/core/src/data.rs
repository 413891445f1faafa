//! Synthetic classification task, Dirichlet non-IID partitioning and
//! validation splits.
//!
//! The task is a mixture of isotropic Gaussians, one per class. Private and
//! test samples share the class centers; the unlabeled public pool is drawn
//! around centers displaced by `public_shift`, so it is related to but not
//! identical with the private distribution.
//!
//! Features are rounded to `f32` precision at generation time, which makes the
//! binary export below lossless.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, SimRng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub private_pool_size: usize,
    pub public_pool_size: usize,
    pub test_pool_size: usize,
    /// Norm of every class center.
    pub class_center_separation: f64,
    pub noise_sigma: f64,
    /// Norm of the per-class offset applied to public-pool centers.
    pub public_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            num_classes: 10,
            feature_dim: 32,
            private_pool_size: 4000,
            public_pool_size: 2000,
            test_pool_size: 1000,
            class_center_separation: 4.0,
            noise_sigma: 1.0,
            public_shift: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        if self.feature_dim == 0
            || self.private_pool_size == 0
            || self.public_pool_size == 0
            || self.test_pool_size == 0
        {
            return Err(Error::InvalidParameter(
                "feature dimension and pool sizes must be positive".into(),
            ));
        }
        if !(self.class_center_separation > 0.0) || !(self.noise_sigma >= 0.0) || !(self.public_shift >= 0.0) {
            return Err(Error::InvalidParameter(
                "separation must be positive, sigma and shift non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Unlabeled feature vectors.
pub type Features = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub private_pool: Vec<LabeledSample>,
    pub public_pool: Vec<Vec<f64>>,
    pub test_pool: Vec<LabeledSample>,
}

fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

fn random_direction(rng: &mut SimRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn balanced_counts(total: usize, classes: usize) -> Vec<usize> {
    (0..classes)
        .map(|c| total / classes + usize::from(c < total % classes))
        .collect()
}

/// Draw `total` samples split evenly across classes around `centers`, then
/// shuffle. Each class uses its own substream.
fn draw_pool(centers: &[Vec<f64>], sigma: f64, total: usize, seed: u64, stream: Stream) -> Vec<LabeledSample> {
    let counts = balanced_counts(total, centers.len());
    let mut pool = Vec::with_capacity(total);
    for (class, (center, &count)) in centers.iter().zip(&counts).enumerate() {
        let mut rng = substream(seed, stream, class as u64, 0);
        for _ in 0..count {
            let features = center
                .iter()
                .map(|m| quantize(m + sigma * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            pool.push(LabeledSample { features, label: class });
        }
    }
    pool.shuffle(&mut substream(seed, stream, u64::MAX, 0));
    pool
}

pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate()?;
    let mut rng = substream(spec.seed, Stream::TaskCenters, 0, 0);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            random_direction(&mut rng, spec.feature_dim)
                .into_iter()
                .map(|x| x * spec.class_center_separation)
                .collect()
        })
        .collect();
    let public_centers: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let offset = random_direction(&mut rng, spec.feature_dim);
            c.iter().zip(offset).map(|(m, o)| m + spec.public_shift * o).collect()
        })
        .collect();

    let private_pool = draw_pool(
        &centers,
        spec.noise_sigma,
        spec.private_pool_size,
        spec.seed,
        Stream::PrivatePool,
    );
    let test_pool = draw_pool(
        &centers,
        spec.noise_sigma,
        spec.test_pool_size,
        spec.seed,
        Stream::TestPool,
    );
    let public_pool = draw_pool(
        &public_centers,
        spec.noise_sigma,
        spec.public_pool_size,
        spec.seed,
        Stream::PublicPool,
    )
    .into_iter()
    .map(|s| s.features)
    .collect();

    Ok(SyntheticTask {
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
        private_pool,
        public_pool,
        test_pool,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidParameter("need at least one client".into()));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.dirichlet_alpha
            )));
        }
        Ok(())
    }
}

/// Client shards together with the per-class client proportions that
/// produced them (`proportions[class][client]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPartition {
    pub proportions: Vec<Vec<f64>>,
    pub shards: Vec<Vec<LabeledSample>>,
}

/// One `Dirichlet(alpha · 1_K)` draw per class.
pub fn dirichlet_proportions(num_classes: usize, spec: &PartitionSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let gamma = Gamma::new(spec.dirichlet_alpha, 1.0)
        .map_err(|e| Error::InvalidParameter(format!("gamma distribution: {e}")))?;
    let mut out = Vec::with_capacity(num_classes);
    for class in 0..num_classes {
        let mut rng = substream(spec.seed, Stream::Partition, class as u64, 0);
        let draws: Vec<f64> = (0..spec.num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            out.push(draws.into_iter().map(|g| g / total).collect());
        } else {
            // every gamma draw underflowed; the limit puts all mass on one client
            let mut p = vec![0.0; spec.num_clients];
            p[rng.random_range(0..spec.num_clients)] = 1.0;
            out.push(p);
        }
    }
    Ok(out)
}

/// Integer counts summing to `total` that best match `weights`
/// (largest-remainder rounding, ties to the lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum.is_nan() || sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Split `pool` among clients following `proportions[class][client]`.
///
/// Every sample lands in exactly one shard. `salt` separates the shuffle
/// stream of different pools partitioned with the same proportions.
pub fn partition_with_proportions(
    pool: &[LabeledSample],
    proportions: &[Vec<f64>],
    seed: u64,
    salt: u64,
) -> Result<Vec<Vec<LabeledSample>>> {
    let num_clients = proportions.first().map_or(0, Vec::len);
    if num_clients == 0 {
        return Err(Error::InvalidParameter("empty proportion matrix".into()));
    }
    let mut shards = vec![Vec::new(); num_clients];
    for (class, weights) in proportions.iter().enumerate() {
        let mut members: Vec<&LabeledSample> = pool.iter().filter(|s| s.label == class).collect();
        members.shuffle(&mut substream(seed, Stream::Partition, class as u64, 1 + salt));
        let counts = largest_remainder(members.len(), weights);
        let mut it = members.into_iter();
        for (client, count) in counts.into_iter().enumerate() {
            shards[client].extend(it.by_ref().take(count).cloned());
        }
    }
    if let Some(s) = pool.iter().find(|s| s.label >= proportions.len()) {
        return Err(Error::InvalidParameter(format!(
            "label {} outside proportion matrix",
            s.label
        )));
    }
    Ok(shards)
}

pub fn partition_dirichlet(pool: &[LabeledSample], spec: &PartitionSpec) -> Result<DirichletPartition> {
    if pool.is_empty() {
        return Err(Error::Empty("cannot partition an empty pool"));
    }
    let num_classes = pool.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let proportions = dirichlet_proportions(num_classes, spec)?;
    let shards = partition_with_proportions(pool, &proportions, spec.seed, 0)?;
    Ok(DirichletPartition { proportions, shards })
}

fn validation_size(n: usize, fraction: f64) -> usize {
    if n == 0 || fraction <= 0.0 {
        return 0;
    }
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

/// Hold out `round(fraction · n)` samples (at least one when `fraction > 0`),
/// spread across classes in proportion to their counts. Within a class the
/// trailing samples are held out, so the split needs no randomness.
pub fn split_validation(data: &[LabeledSample], fraction: f64) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    if data.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    let n_val = validation_size(data.len(), fraction);
    let num_classes = data.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut by_class = vec![0usize; num_classes];
    data.iter().for_each(|s| by_class[s.label] += 1);
    let weights: Vec<f64> = by_class.iter().map(|&c| c as f64).collect();
    let quota = largest_remainder(n_val, &weights);

    let mut seen = vec![0usize; num_classes];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for s in data {
        seen[s.label] += 1;
        if seen[s.label] > by_class[s.label] - quota[s.label] {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, val))
}

/// Unlabeled counterpart of [`split_validation`]: the trailing samples form
/// the validation part.
pub fn split_public(features: &[Vec<f64>], fraction: f64) -> Result<(Features, Features)> {
    if features.is_empty() {
        return Err(Error::Empty("cannot split an empty public pool"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!(
            "validation fraction {fraction} outside [0, 1)"
        )));
    }
    let n_val = validation_size(features.len(), fraction);
    let cut = features.len() - n_val;
    Ok((features[..cut].to_vec(), features[cut..].to_vec()))
}

pub const DATASET_MAGIC: &[u8; 6] = b"FDSIM1";

/// Serialize a task in the flat little-endian layout:
///
/// ```text
/// "FDSIM1" | N u32 | d u32 | n_private u32 | n_public u32 | n_test u32
/// private: n_private × (d × f32, label u32)
/// public:  n_public  × (d × f32)
/// test:    n_test    × (d × f32, label u32)
/// ```
pub fn write_dataset<W: Write>(task: &SyntheticTask, mut out: W) -> Result<()> {
    let count = |n: usize| u32::try_from(n).map_err(|_| Error::Format(format!("count {n} exceeds u32")));
    out.write_all(DATASET_MAGIC)?;
    for v in [
        task.num_classes,
        task.feature_dim,
        task.private_pool.len(),
        task.public_pool.len(),
        task.test_pool.len(),
    ] {
        out.write_all(&count(v)?.to_le_bytes())?;
    }
    let write_features = |out: &mut W, f: &[f64]| -> Result<()> {
        if f.len() != task.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: task.feature_dim,
                actual: f.len(),
            });
        }
        for x in f {
            out.write_all(&(*x as f32).to_le_bytes())?;
        }
        Ok(())
    };
    for s in &task.private_pool {
        write_features(&mut out, &s.features)?;
        out.write_all(&count(s.label)?.to_le_bytes())?;
    }
    for f in &task.public_pool {
        write_features(&mut out, f)?;
    }
    for s in &task.test_pool {
        write_features(&mut out, &s.features)?;
        out.write_all(&count(s.label)?.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<SyntheticTask> {
    let mut magic = [0u8; 6];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let read_u32 = |input: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        input
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated file".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let n_classes = read_u32(&mut input)? as usize;
    let dim = read_u32(&mut input)? as usize;
    let n_private = read_u32(&mut input)? as usize;
    let n_public = read_u32(&mut input)? as usize;
    let n_test = read_u32(&mut input)? as usize;
    if n_classes < 2 || dim == 0 {
        return Err(Error::Format(format!(
            "invalid header: {n_classes} classes, dimension {dim}"
        )));
    }

    let read_features = |input: &mut R| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; 4 * dim];
        input
            .read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated file".into()))?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    };
    let labeled = |input: &mut R, n: usize| -> Result<Vec<LabeledSample>> {
        (0..n)
            .map(|_| {
                let features = read_features(input)?;
                let mut b = [0u8; 4];
                input
                    .read_exact(&mut b)
                    .map_err(|_| Error::Format("truncated file".into()))?;
                let label = u32::from_le_bytes(b) as usize;
                if label >= n_classes {
                    return Err(Error::Format(format!("label {label} out of range")));
                }
                Ok(LabeledSample { features, label })
            })
            .collect()
    };
    let private_pool = labeled(&mut input, n_private)?;
    let mut public_pool = Vec::with_capacity(n_public);
    for _ in 0..n_public {
        public_pool.push(read_features(&mut input)?);
    }
    let test_pool = labeled(&mut input, n_test)?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes", rest.len())));
    }
    Ok(SyntheticTask {
        num_classes: n_classes,
        feature_dim: dim,
        private_pool,
        public_pool,
        test_pool,
    })
}
