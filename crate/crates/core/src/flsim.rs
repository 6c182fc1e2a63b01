//! Round-based federated averaging with per-client defenses and layer-wise
//! entropy-weighted aggregation.

use crate::data::{self, Dataset, Partition};
use crate::defense::{self, DefenseConfig, DefensePacket, DefenseState, SvdDefenseParams};
use crate::error::{Error, Result};
use crate::rng;
use crate::tinynn::{self, Example, GradSet, ModelParams};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    Iid,
    Dirichlet { alpha: f64 },
    Rho { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// `p ∝ e·N` for SVD packets, `p ∝ N` for raw ones.
    #[default]
    Entropy,
    /// `p ∝ N` everywhere (plain FedAvg).
    SampleCount,
}

/// Synthetic dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 60,
            side: 8,
            test_per_class: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub local_batch_size: usize,
    pub local_lr: f64,
    pub defense: DefenseConfig,
    pub partition: PartitionScheme,
    pub aggregation: AggregationRule,
    pub data: DataConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            num_clients: 8,
            clients_per_round: 8,
            rounds: 30,
            local_epochs: 1,
            local_batch_size: 16,
            local_lr: 0.1,
            defense: DefenseConfig::default(),
            partition: PartitionScheme::Iid,
            aggregation: AggregationRule::Entropy,
            data: DataConfig::default(),
            hidden: vec![32],
            seed: 0,
        }
    }
}

impl FlConfig {
    /// All violated constraints, one message each.
    pub fn errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_clients == 0 {
            errs.push("fl.num_clients must be >= 1".to_string());
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            errs.push(format!(
                "fl.clients_per_round must lie in [1, num_clients={}], got {}",
                self.num_clients, self.clients_per_round
            ));
        }
        if self.rounds == 0 {
            errs.push("fl.rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            errs.push("fl.local_epochs must be >= 1".into());
        }
        if self.local_batch_size == 0 {
            errs.push("fl.local_batch_size must be >= 1".into());
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            errs.push(format!(
                "fl.local_lr must be positive, got {}",
                self.local_lr
            ));
        }
        match self.partition {
            PartitionScheme::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                errs.push(format!("fl.partition.alpha must be positive, got {alpha}"));
            }
            PartitionScheme::Dirichlet { .. } if self.num_clients < 2 => {
                errs.push("dirichlet partition needs >= 2 clients".into());
            }
            PartitionScheme::Rho { rho } if !(rho > 0.0 && rho <= 1.0) => {
                errs.push(format!("fl.partition.rho must lie in (0, 1], got {rho}"));
            }
            _ => {}
        }
        let d = &self.data;
        if d.num_classes < 2 {
            errs.push("fl.data.num_classes must be >= 2".into());
        }
        if d.side < 2 {
            errs.push("fl.data.side must be >= 2".into());
        }
        if d.per_class == 0 || d.test_per_class == 0 {
            errs.push("fl.data.per_class and fl.data.test_per_class must be >= 1".into());
        }
        if d.per_class * d.num_classes < self.num_clients {
            errs.push("fewer training examples than clients".into());
        }
        if self.hidden.contains(&0) {
            errs.push("fl.hidden widths must be >= 1".into());
        }
        if let Err(Error::InvalidConfig(e)) = self.defense.validate() {
            errs.extend(e.split("; ").map(|m| format!("fl.defense: {m}")));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub sample_count: usize,
    /// Two packets per model layer (weight then bias).
    pub packets: Vec<DefensePacket>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub accuracy: f64,
    pub client_ids: Vec<usize>,
    /// Per selected client, the entropy of each weight tensor.
    pub client_entropies: Vec<Vec<f64>>,
    /// Per tensor (packet order), the aggregation weight of each client.
    pub weights: Vec<Vec<f64>>,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub mean_entropy: f64,
}

/// Local training on one shard; returns the update `Θ_global − Θ_local`.
pub fn local_update(
    global: &ModelParams,
    shard: &[Example],
    cfg: &FlConfig,
    seed_coords: &[u64],
) -> Result<GradSet> {
    if shard.is_empty() {
        return Err(Error::InvalidInput("client shard is empty".into()));
    }
    let mut local = global.clone();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut r = rng::stream(cfg.seed, seed_coords);
    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.local_batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| shard[i].clone()).collect();
            let (_, g) = tinynn::loss_and_grad(&local, &batch)?;
            local = tinynn::sgd_step(&local, &g, cfg.local_lr)?;
        }
    }
    let mut update = GradSet::zeros_like(global);
    for ((u, gl), ll) in update
        .layers
        .iter_mut()
        .zip(&global.layers)
        .zip(&local.layers)
    {
        for ((x, a), b) in u
            .weight_grad
            .as_mut_slice()
            .iter_mut()
            .zip(gl.weight.as_slice())
            .zip(ll.weight.as_slice())
        {
            *x = a - b;
        }
        for ((x, a), b) in u.bias_grad.iter_mut().zip(&gl.bias).zip(&ll.bias) {
            *x = a - b;
        }
    }
    if !update.is_finite() {
        return Err(Error::NumericalFailure(
            "local training produced a non-finite update".into(),
        ));
    }
    Ok(update)
}

/// Train locally, then pass every tensor of the update through the defense.
pub fn client_round(
    global: &ModelParams,
    shard: &[Example],
    cfg: &FlConfig,
    client_id: usize,
    round: usize,
    state: &mut DefenseState,
) -> Result<ClientUpdate> {
    let coords = [round as u64, client_id as u64];
    let update = local_update(global, shard, cfg, &coords)?;
    let packets = defense::defend_update(&update, &cfg.defense, state, &coords)?;
    Ok(ClientUpdate {
        client_id,
        sample_count: shard.len(),
        packets,
    })
}

/// `p_m = e_m N_m / Σ e_i N_i`, falling back to `N_m / Σ N_i` when every
/// entropy is zero.
pub fn aggregation_weights(entropies: &[f64], counts: &[usize]) -> Result<Vec<f64>> {
    if entropies.is_empty() || entropies.len() != counts.len() {
        return Err(Error::InvalidInput("need one entropy per client".into()));
    }
    if entropies.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
        return Err(Error::InvalidInput(
            "entropies must be finite and >= 0".into(),
        ));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidInput("sample counts must be >= 1".into()));
    }
    let raw: Vec<f64> = entropies
        .iter()
        .zip(counts)
        .map(|(e, &n)| e * n as f64)
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        Ok(raw.iter().map(|v| v / total).collect())
    } else {
        let n: f64 = counts.iter().map(|&n| n as f64).sum();
        Ok(counts.iter().map(|&c| c as f64 / n).collect())
    }
}

/// Per-packet aggregation weights for a set of updates, in packet order.
pub fn update_weights(updates: &[ClientUpdate], rule: AggregationRule) -> Result<Vec<Vec<f64>>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidInput("no client updates".into()))?;
    let counts: Vec<usize> = updates.iter().map(|u| u.sample_count).collect();
    let n_counts = aggregation_weights(&vec![1.0; counts.len()], &counts)?;
    (0..first.packets.len())
        .map(|t| {
            let entropies: Option<Vec<f64>> = updates
                .iter()
                .map(|u| u.packets.get(t).and_then(DefensePacket::entropy))
                .collect();
            match (rule, entropies) {
                (AggregationRule::Entropy, Some(e)) => aggregation_weights(&e, &counts),
                _ => Ok(n_counts.clone()),
            }
        })
        .collect()
}

/// `Θ − Σ_m p_{m,t} ΔΘ_{m,t}` per tensor, clients summed by ascending id.
pub fn aggregate(
    global: &ModelParams,
    updates: &[ClientUpdate],
    weights: &[Vec<f64>],
) -> Result<ModelParams> {
    let tensors = 2 * global.layers.len();
    if weights.len() != tensors || weights.iter().any(|w| w.len() != updates.len()) {
        return Err(Error::Protocol(
            "aggregation weights do not match updates".into(),
        ));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let mut delta = GradSet::zeros_like(global);
    for &i in &order {
        let g = defense::reconstruct_update(&updates[i].packets, global)?;
        for (l, (d, u)) in delta.layers.iter_mut().zip(&g.layers).enumerate() {
            let (pw, pb) = (weights[2 * l][i], weights[2 * l + 1][i]);
            d.weight_grad
                .as_mut_slice()
                .iter_mut()
                .zip(u.weight_grad.as_slice())
                .for_each(|(x, v)| *x += pw * v);
            d.bias_grad
                .iter_mut()
                .zip(&u.bias_grad)
                .for_each(|(x, v)| *x += pb * v);
        }
    }
    let mut next = global.clone();
    for (p, d) in next.layers.iter_mut().zip(&delta.layers) {
        p.weight
            .as_mut_slice()
            .iter_mut()
            .zip(d.weight_grad.as_slice())
            .for_each(|(x, v)| *x -= v);
        p.bias
            .iter_mut()
            .zip(&d.bias_grad)
            .for_each(|(x, v)| *x -= v);
    }
    Ok(next)
}

/// Fraction of `test` classified correctly.
pub fn accuracy(model: &ModelParams, test: &[Example]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut correct = 0usize;
    for ex in test {
        let (logits, _) = tinynn::forward(model, &ex.input)?;
        let mut arg = 0;
        for (c, v) in logits.iter().enumerate() {
            if *v > logits[arg] {
                arg = c;
            }
        }
        correct += usize::from(arg == ex.label);
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Seeded uniform choice of `cfg.clients_per_round` clients, ascending.
pub fn sample_clients(cfg: &FlConfig, round: usize) -> Vec<usize> {
    let mut r = rng::stream(cfg.seed, &[0x5A3, round as u64]);
    let mut ids = index::sample(&mut r, cfg.num_clients, cfg.clients_per_round).into_vec();
    ids.sort_unstable();
    ids
}

/// Training and held-out splits for a config's synthetic data.
pub fn synthetic_splits(cfg: &FlConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let train = data::make_synthetic(
        d.num_classes,
        d.per_class,
        d.side,
        rng::derive(cfg.seed, &[0xDA7A]),
    )?;
    let test = data::make_synthetic(
        d.num_classes,
        d.test_per_class,
        d.side,
        rng::derive(cfg.seed, &[0x7E57]),
    )?;
    Ok((train, test))
}

pub fn partition(cfg: &FlConfig, train: &Dataset) -> Result<Partition> {
    let seed = rng::derive(cfg.seed, &[0x9A27]);
    match cfg.partition {
        PartitionScheme::Iid => data::partition_iid(train, cfg.num_clients, seed),
        PartitionScheme::Dirichlet { alpha } => {
            data::partition_dirichlet(train, cfg.num_clients, alpha, seed)
        }
        PartitionScheme::Rho { rho } => {
            data::partition_rho_clients(train, cfg.num_clients, rho, seed)
        }
    }
}

/// Round-zero global model for a config and dataset.
pub fn initial_model(cfg: &FlConfig, train: &Dataset) -> Result<ModelParams> {
    ModelParams::init_mlp(
        train.input_dim,
        &cfg.hidden,
        train.num_classes,
        rng::derive(cfg.seed, &[0x1A17]),
    )
}

/// Outcome of a full run: one report per round and the final global model.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub reports: Vec<RoundReport>,
    pub model: ModelParams,
}

pub fn run_experiment(cfg: &FlConfig) -> Result<Vec<RoundReport>> {
    cfg.validate()?;
    let (train, test) = synthetic_splits(cfg)?;
    run_experiment_on(cfg, &train, &test).map(|e| e.reports)
}

/// Run on caller-supplied data (e.g. loaded IDX files).
pub fn run_experiment_on(cfg: &FlConfig, train: &Dataset, test: &Dataset) -> Result<Experiment> {
    cfg.validate()?;
    if train.input_dim != test.input_dim || train.num_classes != test.num_classes {
        return Err(Error::InvalidInput(
            "train and test sets disagree on shape".into(),
        ));
    }
    let parts = partition(cfg, train)?;
    let shards: Vec<Vec<Example>> = parts
        .client_shards
        .iter()
        .map(|s| train.subset(s))
        .collect();
    let mut model = initial_model(cfg, train)?;
    let mut states = vec![DefenseState::default(); cfg.num_clients];
    let svd_params = SvdDefenseParams::from(&cfg.defense);
    let model_bytes = 8 * model.param_count();
    let mut reports = Vec::with_capacity(cfg.rounds);

    for round in 0..cfg.rounds {
        let ids = sample_clients(cfg, round);
        let mut work: Vec<(usize, DefenseState)> = ids
            .iter()
            .map(|&m| (m, std::mem::take(&mut states[m])))
            .collect();
        let global = &model;
        let results: Vec<Result<ClientUpdate>> = work
            .par_iter_mut()
            .map(|(m, state)| client_round(global, &shards[*m], cfg, *m, round, state))
            .collect();
        for (m, state) in work {
            states[m] = state;
        }
        let updates: Vec<ClientUpdate> = results.into_iter().collect::<Result<_>>()?;

        let client_entropies: Vec<Vec<f64>> = updates
            .par_iter()
            .map(|u| {
                u.packets
                    .iter()
                    .step_by(2)
                    .map(|p| match p.entropy() {
                        Some(e) => Ok(e),
                        None => {
                            let m = defense::reconstruct_packet(p);
                            if m.rows() >= 2 && m.cols() >= 2 {
                                defense::gradient_entropy(&m, &svd_params)
                            } else {
                                Ok(0.0)
                            }
                        }
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let weights = update_weights(&updates, cfg.aggregation)?;
        model = aggregate(&model, &updates, &weights)?;
        if !model.flatten().iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalFailure(format!(
                "global model diverged in round {round}"
            )));
        }

        let all: Vec<f64> = client_entropies.iter().flatten().copied().collect();
        let mean_entropy = if all.is_empty() {
            0.0
        } else {
            all.iter().sum::<f64>() / all.len() as f64
        };
        reports.push(RoundReport {
            round,
            accuracy: accuracy(&model, &test.examples)?,
            client_ids: ids.clone(),
            client_entropies,
            weights,
            bytes_up: updates
                .iter()
                .flat_map(|u| &u.packets)
                .map(DefensePacket::byte_len)
                .sum(),
            bytes_down: model_bytes * ids.len(),
            mean_entropy,
        });
    }
    Ok(Experiment { reports, model })
}
