//! Client-side gradient defenses.
//!
//! The main defense whitens each weight gradient by a diagonal channel-weight
//! matrix `I`, decomposes `I·G`, picks an energy threshold from the entropy of
//! the spectrum and ships only the leading triples. The server undoes the
//! weighting with `I⁻¹`. Differential-privacy noise, magnitude pruning and
//! dual-sided pruning with error feedback are provided as baselines.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, TruncatedFactors};
use crate::rng;
use crate::tinynn::{GradSet, ModelParams};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseMethod {
    None,
    Svdefense,
    DpGauss,
    DpLap,
    Prune,
    Dgp,
}

impl DefenseMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DefenseMethod::None => "none",
            DefenseMethod::Svdefense => "svdefense",
            DefenseMethod::DpGauss => "dp_gauss",
            DefenseMethod::DpLap => "dp_lap",
            DefenseMethod::Prune => "prune",
            DefenseMethod::Dgp => "dgp",
        }
    }

    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            DefenseMethod::DpGauss
                | DefenseMethod::DpLap
                | DefenseMethod::Prune
                | DefenseMethod::Dgp
        )
    }
}

/// How 1-D bias gradients are transmitted under the SVD defense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BiasPolicy {
    #[default]
    Raw,
    Zero,
}

/// Which spectrum the entropy (and hence the threshold) is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EntropySource {
    /// Singular values of the channel-weighted matrix `I·G`.
    #[default]
    Weighted,
    /// Singular values of the raw gradient `G`.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub method: DefenseMethod,
    /// Sensitivity of the adaptive threshold.
    pub beta: f64,
    /// Gaussian σ or Laplace scale `b`.
    pub noise_scale: f64,
    pub prune_rate: f64,
    pub dgp_small_rate: f64,
    pub dgp_large_rate: f64,
    pub seed: u64,
    pub defend_bias: BiasPolicy,
    pub entropy_source: EntropySource,
    /// Apply the diagonal channel weighting before truncation.
    pub channel_weighting: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            method: DefenseMethod::None,
            beta: 0.3,
            noise_scale: 0.03,
            prune_rate: 0.9,
            dgp_small_rate: 0.75,
            dgp_large_rate: 0.05,
            seed: 0,
            defend_bias: BiasPolicy::Raw,
            entropy_source: EntropySource::Weighted,
            channel_weighting: true,
        }
    }
}

impl DefenseConfig {
    pub fn with_method(method: DefenseMethod) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn svdefense(beta: f64) -> Self {
        Self {
            method: DefenseMethod::Svdefense,
            beta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            errs.push(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push(format!(
                "noise_scale must be >= 0, got {}",
                self.noise_scale
            ));
        }
        for (name, r) in [
            ("prune_rate", self.prune_rate),
            ("dgp_small_rate", self.dgp_small_rate),
            ("dgp_large_rate", self.dgp_large_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                errs.push(format!("{name} must lie in [0, 1), got {r}"));
            }
        }
        if self.dgp_small_rate + self.dgp_large_rate > 1.0 {
            errs.push("dgp_small_rate + dgp_large_rate must not exceed 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }
}

/// `T = 1 - exp(-β e)`.
pub fn adaptive_threshold(entropy: f64, beta: f64) -> f64 {
    -(-beta * entropy).exp_m1()
}

/// Diagonal of the channel-weight matrix `I`: one entry per output channel
/// (matrix row), never below a positive floor so `I` stays invertible.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub diag: Vec<f64>,
}

impl ChannelWeights {
    pub fn ones(n: usize) -> Self {
        Self { diag: vec![1.0; n] }
    }

    pub fn inverse(&self) -> Vec<f64> {
        self.diag.iter().map(|d| 1.0 / d).collect()
    }

    /// `σmax(I) / σmin(I)`
    pub fn condition_number(&self) -> f64 {
        let max = self.diag.iter().cloned().fold(0.0, f64::max);
        let min = self.diag.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Default floor: `1e-8 × max row norm`, or `1e-12` for an all-zero matrix.
pub fn default_weight_floor(g: &Matrix) -> f64 {
    let max = (0..g.rows())
        .map(|i| linalg::dot(g.row(i), g.row(i)).sqrt())
        .fold(0.0, f64::max);
    if max > 0.0 {
        1e-8 * max
    } else {
        1e-12
    }
}

/// Row norms `√Σᵢ g_{c,i}²`, floored at `floor`.
pub fn channel_weights(g: &Matrix, floor: f64) -> ChannelWeights {
    ChannelWeights {
        diag: (0..g.rows())
            .map(|i| linalg::dot(g.row(i), g.row(i)).sqrt().max(floor))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PacketBody {
    Svd {
        weights: ChannelWeights,
        factors: TruncatedFactors,
        entropy: f64,
    },
    Raw {
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    },
}

/// What a client transmits for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DefensePacket {
    pub layer_id: u32,
    pub body: PacketBody,
}

const KIND_RAW: u8 = 0;
const KIND_SVD: u8 = 1;
const HEADER_BYTES: usize = 4 + 1 + 4 + 4 + 4;

impl DefensePacket {
    pub fn raw(layer_id: u32, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(rows * cols, values.len(), "raw packet shape mismatch");
        Self {
            layer_id,
            body: PacketBody::Raw { rows, cols, values },
        }
    }

    pub fn svd(
        layer_id: u32,
        weights: ChannelWeights,
        factors: TruncatedFactors,
        entropy: f64,
    ) -> Self {
        Self {
            layer_id,
            body: PacketBody::Svd {
                weights,
                factors,
                entropy,
            },
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match &self.body {
            PacketBody::Svd { factors, .. } => (factors.u_star.rows(), factors.vt_star.cols()),
            PacketBody::Raw { rows, cols, .. } => (*rows, *cols),
        }
    }

    pub fn entropy(&self) -> Option<f64> {
        match &self.body {
            PacketBody::Svd { entropy, .. } => Some(*entropy),
            PacketBody::Raw { .. } => None,
        }
    }

    pub fn retained_rank(&self) -> Option<usize> {
        match &self.body {
            PacketBody::Svd { factors, .. } => Some(factors.retained_rank()),
            PacketBody::Raw { .. } => None,
        }
    }

    /// Number of transmitted scalars: `pk + k + kq + p + 1` for an SVD
    /// packet, `pq` for a raw one.
    pub fn parameter_count(&self) -> usize {
        match &self.body {
            PacketBody::Svd { factors, .. } => {
                let (p, q) = self.shape();
                let k = factors.retained_rank();
                p * k + k + k * q + p + 1
            }
            PacketBody::Raw { values, .. } => values.len(),
        }
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES + 8 * self.parameter_count()
    }

    /// Little-endian wire layout: header `{layer_id u32, kind u8, p u32, q u32,
    /// k u32}` followed by f64 arrays (`diag, u*, σ*, v*ᵀ, entropy` or the raw
    /// values).
    pub fn to_bytes(&self) -> Vec<u8> {
        let (p, q) = self.shape();
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&self.layer_id.to_le_bytes());
        let push_f = |out: &mut Vec<u8>, vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match &self.body {
            PacketBody::Svd {
                weights,
                factors,
                entropy,
            } => {
                out.push(KIND_SVD);
                for d in [p, q, factors.retained_rank()] {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                push_f(&mut out, &weights.diag);
                push_f(&mut out, factors.u_star.as_slice());
                push_f(&mut out, &factors.sigma_star);
                push_f(&mut out, factors.vt_star.as_slice());
                push_f(&mut out, &[*entropy]);
            }
            PacketBody::Raw { values, .. } => {
                out.push(KIND_RAW);
                for d in [p, q, 0] {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                push_f(&mut out, values);
            }
        }
        out
    }

    /// Parse one packet; returns it with the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let header = bytes
            .get(..HEADER_BYTES)
            .ok_or_else(|| Error::Format("packet header truncated".into()))?;
        let u32_at =
            |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().expect("4 bytes"));
        let layer_id = u32_at(0);
        let kind = header[4];
        let (p, q, k) = (u32_at(5) as usize, u32_at(9) as usize, u32_at(13) as usize);
        let mut cursor = HEADER_BYTES;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = cursor + 8 * n;
            let chunk = bytes
                .get(cursor..end)
                .ok_or_else(|| Error::Format("packet body truncated".into()))?;
            cursor = end;
            Ok(chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect())
        };
        let packet = match kind {
            KIND_RAW => {
                let values = take(p * q)?;
                DefensePacket::raw(layer_id, p, q, values)
            }
            KIND_SVD => {
                if k == 0 || k > p.min(q) {
                    return Err(Error::Format(format!("bad retained rank {k} for {p}x{q}")));
                }
                let diag = take(p)?;
                let u = Matrix::new(p, k, take(p * k)?)?;
                let sigma = take(k)?;
                let vt = Matrix::new(k, q, take(k * q)?)?;
                let entropy = take(1)?[0];
                DefensePacket::svd(
                    layer_id,
                    ChannelWeights { diag },
                    TruncatedFactors {
                        u_star: u,
                        sigma_star: sigma,
                        vt_star: vt,
                        retained_energy_fraction: f64::NAN,
                    },
                    entropy,
                )
            }
            other => return Err(Error::Format(format!("unknown packet kind {other}"))),
        };
        Ok((packet, cursor))
    }
}

/// Parameters of the SVD defense pipeline for one matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdDefenseParams {
    pub beta: f64,
    pub channel_weighting: bool,
    pub entropy_source: EntropySource,
}

impl SvdDefenseParams {
    pub fn new(beta: f64) -> Self {
        Self {
            beta,
            channel_weighting: true,
            entropy_source: EntropySource::Weighted,
        }
    }
}

impl From<&DefenseConfig> for SvdDefenseParams {
    fn from(cfg: &DefenseConfig) -> Self {
        Self {
            beta: cfg.beta,
            channel_weighting: cfg.channel_weighting,
            entropy_source: cfg.entropy_source,
        }
    }
}

/// Defend one weight gradient with channel weighting, SVD, entropy-adaptive
/// threshold and truncation.
pub fn defend_grad_svd(layer_id: u32, g: &Matrix, beta: f64) -> Result<DefensePacket> {
    defend_grad_svd_with(layer_id, g, &SvdDefenseParams::new(beta))
}

pub fn defend_grad_svd_with(
    layer_id: u32,
    g: &Matrix,
    params: &SvdDefenseParams,
) -> Result<DefensePacket> {
    if g.rows() < 2 || g.cols() < 2 {
        return Err(Error::InvalidInput(format!(
            "SVD defense needs a matrix with >= 2 rows and columns, got {}x{}",
            g.rows(),
            g.cols()
        )));
    }
    if !(params.beta > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "beta must be positive, got {}",
            params.beta
        )));
    }
    let weights = if params.channel_weighting {
        channel_weights(g, default_weight_floor(g))
    } else {
        ChannelWeights::ones(g.rows())
    };
    let weighted = g.scale_rows(&weights.diag);
    check_finite(&weighted)?;
    let factors = linalg::svd(&weighted)?;
    if factors.sigma[0] == 0.0 {
        // zero gradient: one all-zero triple, zero entropy
        let tr = linalg::truncate_to_rank(&factors, 1);
        return Ok(DefensePacket::svd(layer_id, weights, tr, 0.0));
    }
    let entropy = match params.entropy_source {
        EntropySource::Weighted => linalg::singular_entropy(&factors.sigma)?,
        EntropySource::Unweighted => linalg::singular_entropy(&linalg::svd(g)?.sigma)?,
    };
    let threshold = adaptive_threshold(entropy, params.beta);
    let truncated = linalg::truncate_by_energy(&factors, threshold)?;
    Ok(DefensePacket::svd(layer_id, weights, truncated, entropy))
}

fn check_finite(m: &Matrix) -> Result<()> {
    if m.as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure(
            "channel-weighted gradient overflowed".into(),
        ))
    }
}

/// Entropy of a weight gradient as the SVD defense would measure it; zero
/// for an all-zero matrix.
pub fn gradient_entropy(g: &Matrix, params: &SvdDefenseParams) -> Result<f64> {
    if g.is_zero() {
        return Ok(0.0);
    }
    let m = match params.entropy_source {
        EntropySource::Weighted if params.channel_weighting => {
            g.scale_rows(&channel_weights(g, default_weight_floor(g)).diag)
        }
        _ => g.clone(),
    };
    check_finite(&m)?;
    linalg::singular_entropy(&linalg::svd(&m)?.sigma)
}

/// Server-side reconstruction `I⁻¹ U* Σ* V*ᵀ`, or the raw values reshaped.
pub fn reconstruct_packet(p: &DefensePacket) -> Matrix {
    match &p.body {
        PacketBody::Svd {
            weights, factors, ..
        } => factors.reconstruct().scale_rows(&weights.inverse()),
        PacketBody::Raw { rows, cols, values } => {
            Matrix::new(*rows, *cols, values.clone()).expect("raw packets hold finite values")
        }
    }
}

/// Per-client memory for the dual-pruning baseline's error feedback.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefenseState {
    /// Values zeroed in the most recent round, re-added before the next one.
    pub dgp_residual: Option<GradSet>,
}

fn laplace(r: &mut impl Rng, b: f64) -> f64 {
    let u: f64 = r.random_range(-0.5..0.5);
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// One draw of the configured additive noise; `method` must be a DP variant.
pub fn sample_noise(method: DefenseMethod, scale: f64, r: &mut impl Rng) -> f64 {
    match method {
        DefenseMethod::DpGauss => Normal::new(0.0, scale).expect("scale >= 0").sample(r),
        DefenseMethod::DpLap => laplace(r, scale),
        other => panic!("{} is not a noise defense", other.as_str()),
    }
}

fn rate_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Positions sorted from largest to smallest magnitude; ties keep the lower
/// flat index first.
fn magnitude_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    idx
}

/// Zero the `small` smallest and `large` largest magnitudes in place and
/// return a vector holding exactly the zeroed values.
fn prune_tensor(values: &mut [f64], small: usize, large: usize) -> Vec<f64> {
    let n = values.len();
    let order = magnitude_order(values);
    let mut removed = vec![0.0; n];
    let drop = order[..large.min(n)]
        .iter()
        .chain(&order[n.saturating_sub(small).max(large.min(n))..]);
    for &i in drop {
        removed[i] = values[i];
        values[i] = 0.0;
    }
    removed
}

/// Apply a baseline defense to a whole gradient set.
pub fn defend_baseline(
    grads: &GradSet,
    cfg: &DefenseConfig,
    state: &mut DefenseState,
    rng: &mut impl Rng,
) -> Result<GradSet> {
    cfg.validate()?;
    let mut out = grads.clone();
    match cfg.method {
        DefenseMethod::DpGauss | DefenseMethod::DpLap => {
            if cfg.noise_scale > 0.0 {
                out.for_each_tensor_mut(|t| {
                    t.iter_mut()
                        .for_each(|v| *v += sample_noise(cfg.method, cfg.noise_scale, rng));
                });
            }
        }
        DefenseMethod::Prune => {
            out.for_each_tensor_mut(|t| {
                let small = rate_count(cfg.prune_rate, t.len());
                prune_tensor(t, small, 0);
            });
        }
        DefenseMethod::Dgp => {
            if let Some(res) = &state.dgp_residual {
                if !res.same_shape(&out) {
                    return Err(Error::InvalidInput("DGP residual shape mismatch".into()));
                }
                out.add_scaled(res, 1.0);
            }
            let mut residual = out.clone();
            for (l, r) in out.layers.iter_mut().zip(residual.layers.iter_mut()) {
                for (t, rt) in [
                    (l.weight_grad.as_mut_slice(), r.weight_grad.as_mut_slice()),
                    (l.bias_grad.as_mut_slice(), r.bias_grad.as_mut_slice()),
                ] {
                    let n = t.len();
                    let removed = prune_tensor(
                        t,
                        rate_count(cfg.dgp_small_rate, n),
                        rate_count(cfg.dgp_large_rate, n),
                    );
                    rt.copy_from_slice(&removed);
                }
            }
            state.dgp_residual = Some(residual);
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "{} is not a baseline defense",
                other.as_str()
            )))
        }
    }
    Ok(out)
}

pub fn weight_id(layer: usize) -> u32 {
    2 * layer as u32
}

pub fn bias_id(layer: usize) -> u32 {
    2 * layer as u32 + 1
}

/// Turn a client's update into per-tensor packets according to `cfg`.
///
/// `seed_coords` identify the randomness stream for noise defenses.
pub fn defend_update(
    update: &GradSet,
    cfg: &DefenseConfig,
    state: &mut DefenseState,
    seed_coords: &[u64],
) -> Result<Vec<DefensePacket>> {
    cfg.validate()?;
    let raw_packets = |g: &GradSet| {
        let mut out = Vec::with_capacity(2 * g.layers.len());
        for (l, lg) in g.layers.iter().enumerate() {
            let (p, q) = lg.weight_grad.shape();
            out.push(DefensePacket::raw(
                weight_id(l),
                p,
                q,
                lg.weight_grad.as_slice().to_vec(),
            ));
            out.push(DefensePacket::raw(
                bias_id(l),
                lg.bias_grad.len(),
                1,
                lg.bias_grad.clone(),
            ));
        }
        out
    };
    match cfg.method {
        DefenseMethod::None => Ok(raw_packets(update)),
        DefenseMethod::Svdefense => {
            let params = SvdDefenseParams::from(cfg);
            let mut out = Vec::with_capacity(2 * update.layers.len());
            for (l, lg) in update.layers.iter().enumerate() {
                let g = &lg.weight_grad;
                if g.rows() >= 2 && g.cols() >= 2 {
                    out.push(defend_grad_svd_with(weight_id(l), g, &params)?);
                } else {
                    out.push(DefensePacket::raw(
                        weight_id(l),
                        g.rows(),
                        g.cols(),
                        g.as_slice().to_vec(),
                    ));
                }
                let bias = match cfg.defend_bias {
                    BiasPolicy::Raw => lg.bias_grad.clone(),
                    BiasPolicy::Zero => vec![0.0; lg.bias_grad.len()],
                };
                out.push(DefensePacket::raw(bias_id(l), bias.len(), 1, bias));
            }
            Ok(out)
        }
        _ => {
            let mut r = rng::stream(cfg.seed, seed_coords);
            let defended = defend_baseline(update, cfg, state, &mut r)?;
            Ok(raw_packets(&defended))
        }
    }
}

/// Rebuild a full gradient set from a client's packets.
pub fn reconstruct_update(packets: &[DefensePacket], model: &ModelParams) -> Result<GradSet> {
    let mut out = GradSet::zeros_like(model);
    if packets.len() != 2 * model.layers.len() {
        return Err(Error::Protocol(format!(
            "expected {} packets, got {}",
            2 * model.layers.len(),
            packets.len()
        )));
    }
    for p in packets {
        let id = p.layer_id as usize;
        let layer = out
            .layers
            .get_mut(id / 2)
            .ok_or_else(|| Error::Protocol(format!("packet for unknown tensor {id}")))?;
        let m = reconstruct_packet(p);
        if id.is_multiple_of(2) {
            if m.shape() != layer.weight_grad.shape() {
                return Err(Error::Protocol(format!(
                    "tensor {id}: packet shape {:?} vs model {:?}",
                    m.shape(),
                    layer.weight_grad.shape()
                )));
            }
            layer.weight_grad = m;
        } else {
            if m.as_slice().len() != layer.bias_grad.len() {
                return Err(Error::Protocol(format!(
                    "tensor {id}: bias length mismatch"
                )));
            }
            layer.bias_grad = m.into_vec();
        }
    }
    Ok(out)
}

/// Full-pipeline replay used by attackers and tests: defend then reconstruct
/// every weight matrix with the SVD defense, biases untouched.
pub fn svd_roundtrip(grads: &GradSet, params: &SvdDefenseParams) -> Result<GradSet> {
    let mut out = grads.clone();
    for (l, lg) in out.layers.iter_mut().enumerate() {
        if lg.weight_grad.rows() >= 2 && lg.weight_grad.cols() >= 2 {
            let p = defend_grad_svd_with(weight_id(l), &lg.weight_grad, params)?;
            lg.weight_grad = reconstruct_packet(&p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(r: &mut impl Rng, p: usize, q: usize) -> Matrix {
        Matrix::from_fn(p, q, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(adaptive_threshold(0.0, 0.3), 0.0);
        let t = adaptive_threshold(0.6534, 0.3);
        assert!((t - (1.0 - (-0.19602f64).exp())).abs() < 1e-15);
        assert!((t - 0.1780).abs() < 1e-4);
        assert!(adaptive_threshold(100.0, 0.3) > 1.0 - 1e-13);
        let grid: Vec<f64> = (0..100)
            .map(|i| adaptive_threshold(i as f64 * 0.05, 0.3))
            .collect();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn channel_weight_examples() {
        let g = Matrix::new(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let w = channel_weights(&g, default_weight_floor(&g));
        assert_eq!(w.diag[0], 5.0);
        assert!((w.diag[1] - 5e-8).abs() < 1e-20);
        let zero = Matrix::zeros(3, 2);
        let w = channel_weights(&zero, default_weight_floor(&zero));
        assert_eq!(w.diag, vec![1e-12; 3]);
    }

    #[test]
    fn channel_weighting_round_trips() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let g = random_matrix(&mut r, 7, 5);
        let w = channel_weights(&g, default_weight_floor(&g));
        let back = g.scale_rows(&w.diag).scale_rows(&w.inverse());
        assert!(g.sub(&back).frobenius_norm() < 1e-10);
    }

    #[test]
    fn rank_one_gradient_is_reconstructed_exactly() {
        let g = Matrix::outer(&[0.5, -1.0, 2.0], &[1.0, 0.25, -0.5, 3.0]);
        let p = defend_grad_svd(0, &g, 0.3).unwrap();
        assert!(p.entropy().unwrap() < 1e-12);
        assert_eq!(p.retained_rank(), Some(1));
        assert!(g.sub(&reconstruct_packet(&p)).frobenius_norm() < 1e-8);
    }

    #[test]
    fn diagonal_gradient_composes_the_pipeline() {
        let g = Matrix::from_diag(&[4.0, 3.0]);
        let p = defend_grad_svd(0, &g, 0.3).unwrap();
        // channel weights are (4, 3): I·g = diag(16, 9)
        let e = linalg::singular_entropy(&[16.0, 9.0]).unwrap();
        let t = adaptive_threshold(e, 0.3);
        let (k, _) = linalg::select_rank(&[16.0, 9.0], t).unwrap();
        assert!((p.entropy().unwrap() - e).abs() < 1e-12);
        assert_eq!(p.retained_rank(), Some(k));
        assert_eq!(k, 1);
    }

    #[test]
    fn weighted_bound_holds_on_random_gradient() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let g = random_matrix(&mut r, 32, 16);
        let p = defend_grad_svd(0, &g, 0.3).unwrap();
        let PacketBody::Svd { weights, .. } = &p.body else {
            panic!()
        };
        let t = adaptive_threshold(p.entropy().unwrap(), 0.3);
        let err = g.sub(&reconstruct_packet(&p)).frobenius_norm();
        let bound = weights.condition_number() * (1.0 - t).sqrt() * g.frobenius_norm();
        assert!(err <= bound * (1.0 + 1e-12));
        assert!(p.retained_rank().unwrap() < 16);
    }

    #[test]
    fn huge_beta_keeps_everything() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let g = random_matrix(&mut r, 6, 5);
        let p = defend_grad_svd(0, &g, 1e6).unwrap();
        assert_eq!(p.retained_rank(), Some(5));
        assert!(g.sub(&reconstruct_packet(&p)).frobenius_norm() <= 1e-6 * g.frobenius_norm());
    }

    #[test]
    fn zero_gradient_degenerate_path() {
        let p = defend_grad_svd(3, &Matrix::zeros(4, 3), 0.3).unwrap();
        assert_eq!(p.retained_rank(), Some(1));
        assert_eq!(p.entropy(), Some(0.0));
        assert!(reconstruct_packet(&p).is_zero());
    }

    #[test]
    fn vectors_are_rejected_by_svd_path() {
        assert!(defend_grad_svd(0, &Matrix::zeros(1, 4), 0.3).is_err());
        assert!(defend_grad_svd(0, &Matrix::zeros(4, 1), 0.3).is_err());
    }

    #[test]
    fn residual_is_dense_for_random_inputs() {
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let mut zeros = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            let g = random_matrix(&mut r, 12, 10);
            let p = defend_grad_svd(0, &g, 0.3).unwrap();
            assert!(p.retained_rank().unwrap() < 10);
            let res = g.sub(&reconstruct_packet(&p));
            zeros += res.as_slice().iter().filter(|v| v.abs() < 1e-12).count();
            total += res.as_slice().len();
        }
        assert!((zeros as f64) < 0.01 * total as f64);
    }

    fn grads_from(values: &[f64]) -> GradSet {
        let model = ModelParams::new(vec![crate::tinynn::LayerParams {
            weight: Matrix::zeros(2, values.len() / 2),
            bias: vec![0.0; 2],
            kind: crate::tinynn::LayerKind::DenseSoftmaxOutput,
        }])
        .unwrap();
        let mut g = GradSet::zeros_like(&model);
        g.layers[0]
            .weight_grad
            .as_mut_slice()
            .copy_from_slice(values);
        g
    }

    #[test]
    fn prune_keeps_largest() {
        let vals = [0.1, -0.9, 0.3, 0.2, 0.05, -0.4, 0.6, 0.7, -0.15, 0.25];
        let g = grads_from(&vals);
        let cfg = DefenseConfig {
            prune_rate: 0.9,
            ..DefenseConfig::with_method(DefenseMethod::Prune)
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = defend_baseline(&g, &cfg, &mut DefenseState::default(), &mut r).unwrap();
        let w = out.layers[0].weight_grad.as_slice();
        assert_eq!(w.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(w[1], -0.9);
    }

    #[test]
    fn prune_ties_keep_lower_index() {
        let g = grads_from(&[0.5, -0.5, 0.5, 0.1]);
        let cfg = DefenseConfig {
            prune_rate: 0.5,
            ..DefenseConfig::with_method(DefenseMethod::Prune)
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = defend_baseline(&g, &cfg, &mut DefenseState::default(), &mut r).unwrap();
        assert_eq!(out.layers[0].weight_grad.as_slice(), &[0.5, -0.5, 0.0, 0.0]);
    }

    #[test]
    fn dgp_keeps_the_75_to_95_percentile_band() {
        let vals: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let g = grads_from(&vals);
        let cfg = DefenseConfig::with_method(DefenseMethod::Dgp);
        let mut state = DefenseState::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let out = defend_baseline(&g, &cfg, &mut state, &mut r).unwrap();
        let survivors: Vec<f64> = out.layers[0]
            .weight_grad
            .as_slice()
            .iter()
            .cloned()
            .filter(|v| *v != 0.0)
            .collect();
        assert_eq!(survivors, vec![16.0, 17.0, 18.0, 19.0]);
        // residual holds exactly what was pruned this round
        let res = state.dgp_residual.as_ref().unwrap();
        for (i, v) in res.layers[0].weight_grad.as_slice().iter().enumerate() {
            let expected = if (15..19).contains(&i) { 0.0 } else { vals[i] };
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn dgp_error_feedback_accumulates() {
        let vals: Vec<f64> = (1..=20).map(|v| v as f64).collect();
        let g = grads_from(&vals);
        let cfg = DefenseConfig::with_method(DefenseMethod::Dgp);
        let mut state = DefenseState::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        defend_baseline(&g, &cfg, &mut state, &mut r).unwrap();
        let first = state.dgp_residual.clone().unwrap();
        let out = defend_baseline(&g, &cfg, &mut state, &mut r).unwrap();
        let mut effective = g.clone();
        effective.add_scaled(&first, 1.0);
        let second = state.dgp_residual.as_ref().unwrap();
        // transmitted + pruned == raw + carried residual, exactly
        let mut recombined = out.clone();
        recombined.add_scaled(second, 1.0);
        assert_eq!(recombined, effective);
    }

    #[test]
    fn zero_noise_is_identity() {
        let g = grads_from(&[0.1, 0.2, 0.3, 0.4]);
        for m in [DefenseMethod::DpGauss, DefenseMethod::DpLap] {
            let cfg = DefenseConfig {
                noise_scale: 0.0,
                ..DefenseConfig::with_method(m)
            };
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = defend_baseline(&g, &cfg, &mut DefenseState::default(), &mut r).unwrap();
            assert_eq!(out, g);
        }
    }

    #[test]
    fn noise_moments() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 50_000;
        for (m, var) in [
            (DefenseMethod::DpGauss, 0.04),
            (DefenseMethod::DpLap, 2.0 * 0.04),
        ] {
            let xs: Vec<f64> = (0..n).map(|_| sample_noise(m, 0.2, &mut r)).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.01);
            assert!((v / var - 1.0).abs() < 0.05, "{m:?}: {v}");
        }
    }

    #[test]
    fn packet_counts_and_wire_format() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let g = random_matrix(&mut r, 9, 7);
        let p = defend_grad_svd(4, &g, 0.3).unwrap();
        let k = p.retained_rank().unwrap();
        assert_eq!(p.parameter_count(), 9 * k + k + k * 7 + 9 + 1);
        let bytes = p.to_bytes();
        assert_eq!(bytes.len(), p.byte_len());
        let (back, used) = DefensePacket::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.layer_id, 4);
        assert!(
            reconstruct_packet(&back)
                .sub(&reconstruct_packet(&p))
                .frobenius_norm()
                == 0.0
        );

        let raw = DefensePacket::raw(1, 3, 1, vec![1.0, 2.0, 3.0]);
        let (back, _) = DefensePacket::from_bytes(&raw.to_bytes()).unwrap();
        assert_eq!(back, raw);
        assert_eq!(raw.byte_len(), 17 + 24);
        assert!(DefensePacket::from_bytes(&raw.to_bytes()[..20]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DefenseConfig::default().validate().is_ok());
        assert!(DefenseConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DefenseConfig {
            prune_rate: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DefenseConfig {
            noise_scale: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn update_packets_reconstruct() {
        let model = ModelParams::init_mlp(6, &[5], 3, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut g = GradSet::zeros_like(&model);
        g.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0)));
        let none = defend_update(
            &g,
            &DefenseConfig::default(),
            &mut DefenseState::default(),
            &[0],
        )
        .unwrap();
        assert_eq!(none.len(), 4);
        assert_eq!(reconstruct_update(&none, &model).unwrap(), g);
        let svd = defend_update(
            &g,
            &DefenseConfig::svdefense(0.3),
            &mut DefenseState::default(),
            &[0],
        )
        .unwrap();
        let back = reconstruct_update(&svd, &model).unwrap();
        assert_eq!(back.layers[0].bias_grad, g.layers[0].bias_grad);
        assert!(reconstruct_update(&svd[..3], &model).is_err());
    }
}
