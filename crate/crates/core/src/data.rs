//! Synthetic stripe-image datasets and client partitioners.

use crate::error::{Error, Result};
use crate::rng;
use crate::tinynn::Example;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma, Normal};

/// Standard deviation of the per-pixel noise added to class templates.
pub const PIXEL_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, input_dim: usize) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.label >= num_classes || ex.input.len() != input_dim {
                return Err(Error::InvalidInput(format!(
                    "example {i} has label {} / length {} (want < {num_classes} / {input_dim})",
                    ex.label,
                    ex.input.len()
                )));
            }
        }
        Ok(Self {
            examples,
            num_classes,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indices of every example with the given label, ascending.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.examples[i].label] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Example> {
        indices.iter().map(|&i| self.examples[i].clone()).collect()
    }

    /// Side length of the square image, if the input is square.
    pub fn side(&self) -> Option<usize> {
        let s = (self.input_dim as f64).sqrt().round() as usize;
        (s * s == self.input_dim).then_some(s)
    }
}

/// Noise-free stripe pattern for `class` on an `side × side` grid.
///
/// Orientation and phase follow golden-ratio sequences, frequency cycles over
/// three values; for up to 16 classes on an 8×8 grid every pair of templates
/// differs by more than 0.3 in mean absolute pixel value.
pub fn class_template(class: usize, side: usize) -> Vec<f64> {
    let c = class as f64;
    let angle = std::f64::consts::PI * ((c * 0.618_033_988_749_894_9) % 1.0);
    let freq = 1.0 + (class % 3) as f64 * 0.75;
    let phase = 2.0 * std::f64::consts::PI * ((c * 0.754_877_666_246_692_7) % 1.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let s = side as f64;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5) * ca + (y as f64 + 0.5) * sa;
            out.push(0.5 + 0.5 * (2.0 * std::f64::consts::PI * freq * u / s + phase).cos());
        }
    }
    out
}

/// `num_classes × per_class` noisy stripe images, grouped by class.
pub fn make_synthetic(
    num_classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 || side < 4 {
        return Err(Error::InvalidConfig(format!(
            "synthetic data needs C >= 2, per_class >= 1, side >= 4 (got {num_classes}, {per_class}, {side})"
        )));
    }
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let mut examples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let template = class_template(class, side);
        let mut r = rng::stream(seed, &[0xDA7A, class as u64]);
        for _ in 0..per_class {
            let input = template
                .iter()
                .map(|t| (t + noise.sample(&mut r)).clamp(0.0, 1.0))
                .collect();
            examples.push(Example {
                input,
                label: class,
            });
        }
    }
    Dataset::new(examples, num_classes, side * side)
}

/// Client shards over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// Per-client example indices, ascending.
    pub client_shards: Vec<Vec<usize>>,
    /// Per-client per-class counts.
    pub balance_profile: Vec<Vec<usize>>,
}

impl Partition {
    fn from_shards(ds: &Dataset, mut shards: Vec<Vec<usize>>) -> Self {
        shards.iter_mut().for_each(|s| s.sort_unstable());
        let balance_profile = shards.iter().map(|s| ds.class_counts(s)).collect();
        Self {
            client_shards: shards,
            balance_profile,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.client_shards.len()
    }
}

// ceil with a little slack so products like 10 * 0.1 do not round up to 2
fn retained(n: usize, rho: f64, position: usize) -> usize {
    let x = n as f64 * rho.powi(position as i32);
    ((x - 1e-9).ceil().max(1.0) as usize).min(n)
}

fn retain_by_rho(ds: &Dataset, pool: &[usize], rho: f64, seed: u64, coords: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ds.num_classes).collect();
    order.shuffle(&mut rng::stream(seed, coords));
    let mut kept = Vec::new();
    for (position, &class) in order.iter().enumerate() {
        let mut members: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| ds.examples[i].label == class)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut sub = coords.to_vec();
        sub.push(class as u64);
        members.shuffle(&mut rng::stream(seed ^ 0x5EED, &sub));
        kept.extend_from_slice(&members[..retained(members.len(), rho, position)]);
    }
    kept
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "rho must lie in (0, 1], got {rho}"
        )));
    }
    Ok(())
}

/// Single-client class-imbalance split: classes are shuffled and the class at
/// shuffled position `i` keeps `⌈N_i · ρ^i⌉` of its samples.
pub fn partition_rho(ds: &Dataset, rho: f64, seed: u64) -> Result<Partition> {
    check_rho(rho)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let kept = retain_by_rho(ds, &all, rho, seed, &[0xC1A5]);
    if kept.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    Ok(Partition::from_shards(ds, vec![kept]))
}

/// Multi-client variant of [`partition_rho`]: each class is dealt evenly to
/// the clients, then every client applies its own ρ-decay with an
/// independently shuffled class order.
pub fn partition_rho_clients(
    ds: &Dataset,
    num_clients: usize,
    rho: f64,
    seed: u64,
) -> Result<Partition> {
    check_rho(rho)?;
    if num_clients == 0 || num_clients > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} examples across {num_clients} clients",
            ds.len()
        )));
    }
    let mut pools = vec![Vec::new(); num_clients];
    for class in 0..ds.num_classes {
        let mut idx = ds.class_indices(class);
        idx.shuffle(&mut rng::stream(seed, &[0xDEA1, class as u64]));
        for (j, i) in idx.into_iter().enumerate() {
            pools[j % num_clients].push(i);
        }
    }
    let shards: Vec<Vec<usize>> = pools
        .iter()
        .enumerate()
        .map(|(m, pool)| retain_by_rho(ds, pool, rho, seed, &[0xC1A5, m as u64 + 1]))
        .collect();
    let mut shards = shards;
    repair_empty(&mut shards);
    Ok(Partition::from_shards(ds, shards))
}

/// Equal-sized class-stratified split.
pub fn partition_iid(ds: &Dataset, num_clients: usize, seed: u64) -> Result<Partition> {
    partition_rho_clients(ds, num_clients, 1.0, seed)
}

/// Per-class Dirichlet(α) proportions over `num_clients` clients.
pub fn partition_dirichlet(
    ds: &Dataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Partition> {
    if num_clients < 2 {
        return Err(Error::InvalidConfig(
            "Dirichlet partition needs at least 2 clients".into(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    if num_clients > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} examples across {num_clients} clients",
            ds.len()
        )));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut shards = vec![Vec::new(); num_clients];
    for class in 0..ds.num_classes {
        let mut idx = ds.class_indices(class);
        if idx.is_empty() {
            continue;
        }
        let mut r = rng::stream(seed, &[0xD1C1, class as u64]);
        idx.shuffle(&mut r);
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut r)).collect();
        let sum: f64 = draws.iter().sum();
        let props: Vec<f64> = if sum > 0.0 && sum.is_finite() {
            draws.iter().map(|d| d / sum).collect()
        } else {
            // every draw underflowed: hand the class to the largest raw draw
            let mut p = vec![0.0; num_clients];
            p[argmax(&draws)] = 1.0;
            p
        };
        let n = idx.len();
        let mut counts: Vec<usize> = props
            .iter()
            .map(|p| (p * n as f64).floor() as usize)
            .collect();
        let assigned: usize = counts.iter().sum();
        counts[argmax(&props)] += n - assigned;
        let mut start = 0;
        for (m, c) in counts.into_iter().enumerate() {
            shards[m].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    repair_empty(&mut shards);
    Ok(Partition::from_shards(ds, shards))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn repair_empty(shards: &mut [Vec<usize>]) {
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let mut largest = 0;
        for (i, s) in shards.iter().enumerate() {
            if s.len() > shards[largest].len() {
                largest = i;
            }
        }
        if shards[largest].len() < 2 {
            return;
        }
        let moved = shards[largest].pop().expect("non-empty");
        shards[empty].push(moved);
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("IDX header truncated".into()))
}

fn idx_payload(bytes: &[u8], want_dims: u8) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("not an IDX file".into()));
    }
    if bytes[2] != 0x08 {
        return Err(Error::Format(format!(
            "unsupported IDX element type 0x{:02x}",
            bytes[2]
        )));
    }
    if bytes[3] != want_dims {
        return Err(Error::Format(format!(
            "expected {want_dims}-d IDX data, got {}-d",
            bytes[3]
        )));
    }
    let dims: Vec<usize> = (0..want_dims as usize)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<_>>()?;
    let offset = 4 + 4 * want_dims as usize;
    let len: usize = dims.iter().product();
    let payload = bytes
        .get(offset..offset + len)
        .ok_or_else(|| Error::Format("IDX payload truncated".into()))?;
    Ok((dims, payload))
}

/// Seeded private batches for attack evaluation. Examples are drawn without
/// replacement and each batch holds distinct labels whenever the remaining
/// pool allows it.
pub fn sample_batches(
    ds: &Dataset,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || n_batches * batch_size > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot draw {n_batches} batches of {batch_size} from {} examples",
            ds.len()
        )));
    }
    let mut pool: Vec<usize> = (0..ds.len()).collect();
    pool.shuffle(&mut rng::stream(seed, &[0xBA7C]));
    let mut out = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut batch: Vec<usize> = Vec::with_capacity(batch_size);
        let mut k = 0;
        while batch.len() < batch_size && k < pool.len() {
            let label = ds.examples[pool[k]].label;
            if batch.iter().all(|&i| ds.examples[i].label != label) {
                batch.push(pool.remove(k));
            } else {
                k += 1;
            }
        }
        while batch.len() < batch_size {
            batch.push(pool.remove(0));
        }
        out.push(batch);
    }
    Ok(out)
}

/// Load an MNIST-style IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_idx(images: &[u8], labels: &[u8], num_classes: usize) -> Result<Dataset> {
    let (dims, pixels) = idx_payload(images, 3)?;
    let (ldims, lab) = idx_payload(labels, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            dims[0], ldims[0]
        )));
    }
    let d = dims[1] * dims[2];
    let examples = pixels
        .chunks_exact(d)
        .zip(lab)
        .map(|(px, &l)| Example {
            input: px.iter().map(|&p| p as f64 / 255.0).collect(),
            label: l as usize,
        })
        .collect();
    Dataset::new(examples, num_classes, d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn synthetic_is_deterministic_and_counted() {
        let a = make_synthetic(4, 50, 8, 7).unwrap();
        let b = make_synthetic(4, 50, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        assert_eq!(a.class_counts(&(0..200).collect::<Vec<_>>()), vec![50; 4]);
        assert!(a
            .examples
            .iter()
            .all(|e| e.input.iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert_ne!(a, make_synthetic(4, 50, 8, 8).unwrap());
    }

    #[test]
    fn templates_are_pairwise_separated() {
        let t: Vec<Vec<f64>> = (0..16).map(|c| class_template(c, 8)).collect();
        for i in 0..t.len() {
            for j in (i + 1)..t.len() {
                let d = mean_abs_diff(&t[i], &t[j]);
                assert!(d >= 0.2, "classes {i} and {j} differ by only {d}");
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        assert!(make_synthetic(1, 5, 8, 0).is_err());
        assert!(make_synthetic(3, 0, 8, 0).is_err());
        assert!(make_synthetic(3, 5, 3, 0).is_err());
    }

    #[test]
    fn rho_one_keeps_everything() {
        let ds = make_synthetic(5, 7, 6, 1).unwrap();
        let p = partition_rho(&ds, 1.0, 3).unwrap();
        assert_eq!(p.client_shards[0].len(), 35);
    }

    #[test]
    fn rho_half_counts() {
        let ds = make_synthetic(3, 8, 4, 1).unwrap();
        let p = partition_rho(&ds, 0.5, 42).unwrap();
        let mut counts = p.balance_profile[0].clone();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(counts, vec![8, 4, 2]);
        assert_eq!(p, partition_rho(&ds, 0.5, 42).unwrap());
    }

    #[test]
    fn rho_ceil_keeps_every_class() {
        let ds = make_synthetic(10, 10, 4, 1).unwrap();
        let p = partition_rho(&ds, 0.1, 0).unwrap();
        let mut counts = p.balance_profile[0].clone();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(counts, vec![10, 1, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert!(partition_rho(&ds, 0.0, 0).is_err());
        assert!(partition_rho(&ds, 1.5, 0).is_err());
    }

    #[test]
    fn rho_retention_monotone() {
        let ds = make_synthetic(6, 20, 4, 2).unwrap();
        let mut last = 0;
        for i in 1..=10 {
            let n = partition_rho(&ds, i as f64 / 10.0, 9)
                .unwrap()
                .client_shards[0]
                .len();
            assert!(n >= last);
            last = n;
        }
    }

    #[test]
    fn dirichlet_large_alpha_is_near_even() {
        let ds = make_synthetic(4, 50, 4, 0).unwrap();
        let p = partition_dirichlet(&ds, 2, 1e6, 5).unwrap();
        for m in 0..2 {
            for c in 0..4 {
                let n = p.balance_profile[m][c] as i64;
                assert!((n - 25).abs() <= 2, "client {m} class {c}: {n}");
            }
        }
    }

    #[test]
    fn dirichlet_shards_disjoint_and_complete() {
        let ds = make_synthetic(5, 30, 4, 0).unwrap();
        for seed in 0..20 {
            let p = partition_dirichlet(&ds, 7, 0.3, seed).unwrap();
            let mut all: Vec<usize> = p.client_shards.concat();
            all.sort_unstable();
            assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            assert!(p.client_shards.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn dirichlet_small_alpha_is_imbalanced() {
        let ds = make_synthetic(10, 50, 4, 0).unwrap();
        let mut imbalanced_runs = 0;
        for seed in 0..20 {
            let p = partition_dirichlet(&ds, 10, 0.5, seed).unwrap();
            let skewed = p
                .balance_profile
                .iter()
                .filter(|h| {
                    let max = *h.iter().max().unwrap() as f64;
                    let min = *h.iter().min().unwrap() as f64;
                    min == 0.0 || max / min > 2.0
                })
                .count();
            if skewed * 2 >= 10 {
                imbalanced_runs += 1;
            }
        }
        assert_eq!(imbalanced_runs, 20);
    }

    #[test]
    fn dirichlet_errors() {
        let ds = make_synthetic(2, 2, 4, 0).unwrap();
        assert!(matches!(
            partition_dirichlet(&ds, 5, 0.5, 0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(partition_dirichlet(&ds, 1, 0.5, 0).is_err());
        assert!(partition_dirichlet(&ds, 2, 0.0, 0).is_err());
    }

    #[test]
    fn iid_split_covers_everything() {
        let ds = make_synthetic(3, 9, 4, 0).unwrap();
        let p = partition_iid(&ds, 3, 1).unwrap();
        assert!(p.balance_profile.iter().all(|h| h == &vec![3, 3, 3]));
    }

    #[test]
    fn idx_round_trip() {
        let mut images = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        images.extend_from_slice(&[0, 255, 51, 102, 255, 255, 0, 0]);
        let labels = vec![0, 0, 8, 1, 0, 0, 0, 2, 1, 0];
        let ds = load_idx(&images, &labels, 2).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.examples[0].input, vec![0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.examples[1].label, 0);
        assert!(load_idx(&images[..10], &labels, 2).is_err());
        assert!(load_idx(&labels, &labels, 2).is_err());
    }

    #[test]
    fn sample_batches_prefers_distinct_labels() {
        let ds = make_synthetic(3, 4, 4, 1).unwrap();
        let b = sample_batches(&ds, 4, 3, 9).unwrap();
        assert_eq!(b, sample_batches(&ds, 4, 3, 9).unwrap());
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 12);
        for batch in &b {
            let mut labels: Vec<usize> = batch.iter().map(|&i| ds.examples[i].label).collect();
            labels.sort_unstable();
            labels.dedup();
            assert_eq!(labels.len(), 3);
        }
        assert!(sample_batches(&ds, 5, 3, 9).is_err());
    }
}
