//! Gradient inversion: optimise dummy inputs (and optionally soft labels) so
//! that the model's gradients on them match an observed client update.
//!
//! The gradient of the matching objective with respect to the dummy input is
//! obtained by differentiating the hand-written backward pass of
//! [`crate::tinynn`] once more ("double backward"), so no autodiff is needed.

use crate::defense::{self, DefenseConfig, DefenseMethod, DefensePacket, SvdDefenseParams};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng;
use crate::tinynn::{self, ForwardCache, GradSet, ModelParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Sum of squared differences over every gradient entry.
    L2,
    /// Sum over layers of `1 − cos(observed, dummy)`.
    NegCosineLayerwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Known,
    Inferred,
    Optimized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveMode {
    #[default]
    None,
    /// Copy the zero pattern of the observed gradients onto the dummy ones.
    PruneMask,
    /// Average `n` fresh draws of the defender's noise into the dummy
    /// gradients each step.
    Eot { n: usize },
    /// Run the defender's full pipeline on the dummy gradients.
    DefenseReplay,
}

impl AdaptiveMode {
    pub fn label(self) -> String {
        match self {
            AdaptiveMode::None => "none".into(),
            AdaptiveMode::PruneMask => "prune_mask".into(),
            AdaptiveMode::Eot { n } => format!("eot{n}"),
            AdaptiveMode::DefenseReplay => "defense_replay".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub distance: DistanceMetric,
    pub iterations: usize,
    pub lr: f64,
    pub tv_weight: f64,
    pub label_mode: LabelMode,
    pub adaptive: AdaptiveMode,
    /// Independent random starts; the one with the lowest distance wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            distance: DistanceMetric::L2,
            iterations: 1000,
            lr: 0.1,
            tv_weight: 0.0,
            label_mode: LabelMode::Inferred,
            adaptive: AdaptiveMode::None,
            restarts: 1,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.iterations == 0 {
            errs.push("iterations must be >= 1".to_string());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            errs.push(format!("tv_weight must be >= 0, got {}", self.tv_weight));
        }
        if self.restarts == 0 {
            errs.push("restarts must be >= 1".into());
        }
        if let AdaptiveMode::Eot { n: 0 } = self.adaptive {
            errs.push("eot needs n >= 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs.join("; ")))
        }
    }
}

/// What the attacker observes.
#[derive(Debug, Clone, Copy)]
pub enum Observation<'a> {
    Grads(&'a GradSet),
    Packets(&'a [DefensePacket]),
}

/// Shape of the private batch and the attacker's side knowledge.
#[derive(Debug, Clone, Default)]
pub struct AttackTarget {
    pub batch_size: usize,
    /// Image side for the total-variation prior.
    pub side: Option<usize>,
    /// Labels for [`LabelMode::Known`].
    pub known_labels: Option<Vec<usize>>,
    /// Starting point instead of the seeded uniform initialisation.
    pub init: Option<Vec<Vec<f64>>>,
    /// Defense configuration known to an adaptive attacker.
    pub defense: Option<DefenseConfig>,
}

impl AttackTarget {
    pub fn single() -> Self {
        Self {
            batch_size: 1,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    /// Best iterate, one image per batch slot, clamped to `[0, 1]`.
    pub reconstructed: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Objective value at every iteration (before that iteration's step).
    pub loss_trace: Vec<f64>,
    /// Minimum of `loss_trace`, attained by `reconstructed`.
    pub final_distance: f64,
    pub best_iteration: usize,
    pub warnings: Vec<String>,
}

fn layer_vectors(g: &GradSet) -> Vec<Vec<f64>> {
    g.layers
        .iter()
        .map(|l| {
            let mut v = l.weight_grad.as_slice().to_vec();
            v.extend_from_slice(&l.bias_grad);
            v
        })
        .collect()
}

/// Gradient-matching distance.
pub fn grad_distance(observed: &GradSet, dummy: &GradSet, metric: DistanceMetric) -> Result<f64> {
    distance_and_adjoint(observed, dummy, metric).map(|(d, _)| d)
}

/// Distance together with its gradient with respect to `dummy`.
pub fn distance_and_adjoint(
    observed: &GradSet,
    dummy: &GradSet,
    metric: DistanceMetric,
) -> Result<(f64, GradSet)> {
    if !observed.same_shape(dummy) {
        return Err(Error::InvalidInput(
            "observed and dummy gradients differ in shape".into(),
        ));
    }
    let mut adj = dummy.clone();
    match metric {
        DistanceMetric::L2 => {
            let mut d = 0.0;
            for (a, (o, g)) in adj
                .layers
                .iter_mut()
                .zip(observed.layers.iter().zip(&dummy.layers))
            {
                for (x, (ov, gv)) in a.weight_grad.as_mut_slice().iter_mut().zip(
                    o.weight_grad
                        .as_slice()
                        .iter()
                        .zip(g.weight_grad.as_slice()),
                ) {
                    let diff = gv - ov;
                    d += diff * diff;
                    *x = 2.0 * diff;
                }
                for (x, (ov, gv)) in a
                    .bias_grad
                    .iter_mut()
                    .zip(o.bias_grad.iter().zip(&g.bias_grad))
                {
                    let diff = gv - ov;
                    d += diff * diff;
                    *x = 2.0 * diff;
                }
            }
            Ok((d, adj))
        }
        DistanceMetric::NegCosineLayerwise => {
            let obs = layer_vectors(observed);
            let dum = layer_vectors(dummy);
            let mut d = 0.0;
            for (l, (a, b)) in obs.iter().zip(&dum).enumerate() {
                let na = linalg::dot(a, a).sqrt();
                let nb = linalg::dot(b, b).sqrt();
                let grad: Vec<f64> = if na == 0.0 || nb == 0.0 {
                    vec![0.0; b.len()]
                } else {
                    let ab = linalg::dot(a, b);
                    d += 1.0 - ab / (na * nb);
                    a.iter()
                        .zip(b)
                        .map(|(ai, bi)| -ai / (na * nb) + ab * bi / (na * nb * nb * nb))
                        .collect()
                };
                let nw = adj.layers[l].weight_grad.as_slice().len();
                adj.layers[l]
                    .weight_grad
                    .as_mut_slice()
                    .copy_from_slice(&grad[..nw]);
                adj.layers[l].bias_grad.copy_from_slice(&grad[nw..]);
            }
            Ok((d, adj))
        }
    }
}

/// Adjoint of one example's backward pass: given `∂D/∂(per-example grads)`,
/// return `∂D/∂input` and `∂D/∂target`.
fn double_backward(
    model: &ModelParams,
    cache: &ForwardCache,
    probs: &[f64],
    deltas: &[Vec<f64>],
    adj: &GradSet,
) -> (Vec<f64>, Vec<f64>) {
    let n = model.layers.len();
    let masks: Vec<Vec<f64>> = (0..n)
        .map(|l| tinynn::activation_mask(model.layers[l].kind, &cache.pre[l]))
        .collect();
    let mut d_in: Vec<Vec<f64>> = cache.inputs.iter().map(|a| vec![0.0; a.len()]).collect();
    let mut d_delta: Vec<f64> = Vec::new();
    for l in 0..n {
        let a = &adj.layers[l];
        let mut dd = a.weight_grad.matvec(&cache.inputs[l]);
        dd.iter_mut().zip(&a.bias_grad).for_each(|(x, b)| *x += b);
        if l > 0 {
            let masked: Vec<f64> = d_delta
                .iter()
                .zip(&masks[l - 1])
                .map(|(x, m)| x * m)
                .collect();
            let back = model.layers[l].weight.matvec(&masked);
            dd.iter_mut().zip(back).for_each(|(x, b)| *x += b);
        }
        let from_w = a.weight_grad.matvec_t(&deltas[l]);
        d_in[l].iter_mut().zip(from_w).for_each(|(x, v)| *x += v);
        d_delta = dd;
    }
    // δ_out = p − y
    let d_target: Vec<f64> = d_delta.iter().map(|v| -v).collect();
    let pd = linalg::dot(probs, &d_delta);
    let mut dz: Vec<f64> = probs
        .iter()
        .zip(&d_delta)
        .map(|(p, d)| p * (d - pd))
        .collect();
    for l in (0..n).rev() {
        let back = model.layers[l].weight.matvec_t(&dz);
        d_in[l].iter_mut().zip(back).for_each(|(x, v)| *x += v);
        if l > 0 {
            dz = d_in[l]
                .iter()
                .zip(&masks[l - 1])
                .map(|(x, m)| x * m)
                .collect();
        }
    }
    (d_in.swap_remove(0), d_target)
}

/// Anisotropic total variation of each image and its subgradient.
fn total_variation(images: &[Vec<f64>], side: usize) -> (f64, Vec<Vec<f64>>) {
    let mut tv = 0.0;
    let grads = images
        .iter()
        .map(|x| {
            let mut g = vec![0.0; x.len()];
            for r in 0..side {
                for c in 0..side {
                    let i = r * side + c;
                    for j in [
                        (c + 1 < side).then(|| i + 1),
                        (r + 1 < side).then(|| i + side),
                    ]
                    .into_iter()
                    .flatten()
                    {
                        let d = x[j] - x[i];
                        tv += d.abs();
                        let s = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g[j] += s;
                        g[i] -= s;
                    }
                }
            }
            g
        })
        .collect();
    (tv, grads)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Mask of non-zero positions in the observed gradients.
fn nonzero_mask(g: &GradSet) -> GradSet {
    let mut m = g.clone();
    m.for_each_tensor_mut(|t| {
        t.iter_mut()
            .for_each(|v| *v = if *v != 0.0 { 1.0 } else { 0.0 })
    });
    m
}

fn hadamard(a: &mut GradSet, mask: &GradSet) {
    for (x, m) in a.layers.iter_mut().zip(&mask.layers) {
        x.weight_grad
            .as_mut_slice()
            .iter_mut()
            .zip(m.weight_grad.as_slice())
            .for_each(|(v, k)| *v *= k);
        x.bias_grad
            .iter_mut()
            .zip(&m.bias_grad)
            .for_each(|(v, k)| *v *= k);
    }
}

/// Pieces of the SVD defense needed to pull an adjoint back through it.
struct ReplayLayer {
    weights: Vec<f64>,
    u: Matrix,
    vt: Matrix,
}

// Pull-back through G ↦ I⁻¹ T_k(I G), holding I, k and the retained
// subspaces fixed: dT(Z) = P_U Z + Z P_V − P_U Z P_V, which is self-adjoint.
fn replay_pullback(r: &ReplayLayer, adj: &Matrix) -> Matrix {
    let inv: Vec<f64> = r.weights.iter().map(|w| 1.0 / w).collect();
    let z = adj.scale_rows(&inv);
    let ut = r.u.transpose();
    let v = r.vt.transpose();
    let pu_z = r.u.matmul(&ut.matmul(&z).expect("shapes")).expect("shapes");
    let z_pv = z.matmul(&v).expect("shapes").matmul(&r.vt).expect("shapes");
    let pu_z_pv = pu_z
        .matmul(&v)
        .expect("shapes")
        .matmul(&r.vt)
        .expect("shapes");
    let mut out = pu_z;
    for ((o, a), b) in out
        .as_mut_slice()
        .iter_mut()
        .zip(z_pv.as_slice())
        .zip(pu_z_pv.as_slice())
    {
        *o += a - b;
    }
    out.scale_rows(&r.weights)
}

enum Transform {
    Identity,
    Mask(GradSet),
    Eot {
        n: usize,
        method: DefenseMethod,
        scale: f64,
    },
    SvdReplay(SvdDefenseParams),
    PruneReplay(DefenseConfig),
}

impl Transform {
    fn build(
        mode: AdaptiveMode,
        observed: &GradSet,
        knowledge: Option<&DefenseConfig>,
    ) -> Result<Self> {
        match mode {
            AdaptiveMode::None => Ok(Transform::Identity),
            AdaptiveMode::PruneMask => Ok(Transform::Mask(nonzero_mask(observed))),
            AdaptiveMode::Eot { n } => match knowledge {
                Some(k) if matches!(k.method, DefenseMethod::DpGauss | DefenseMethod::DpLap) => {
                    Ok(Transform::Eot {
                        n,
                        method: k.method,
                        scale: k.noise_scale,
                    })
                }
                _ => Err(Error::InvalidConfig(
                    "eot needs the defender's noise distribution and scale".into(),
                )),
            },
            AdaptiveMode::DefenseReplay => match knowledge {
                Some(k) if k.method == DefenseMethod::Svdefense => {
                    Ok(Transform::SvdReplay(SvdDefenseParams::from(k)))
                }
                Some(k) if matches!(k.method, DefenseMethod::Prune | DefenseMethod::Dgp) => {
                    Ok(Transform::PruneReplay(k.clone()))
                }
                Some(k) if k.method == DefenseMethod::None => Ok(Transform::Identity),
                _ => Err(Error::InvalidConfig(
                    "defense_replay needs a deterministic defense (svdefense, prune, dgp)".into(),
                )),
            },
        }
    }

    /// Transformed dummy gradients plus whatever the pull-back needs.
    fn apply(
        &self,
        dummy: &GradSet,
        r: &mut ChaCha8Rng,
    ) -> Result<(GradSet, Vec<Option<ReplayLayer>>, Option<GradSet>)> {
        match self {
            Transform::Identity => Ok((dummy.clone(), Vec::new(), None)),
            Transform::Mask(mask) => {
                let mut out = dummy.clone();
                hadamard(&mut out, mask);
                Ok((out, Vec::new(), None))
            }
            Transform::Eot { n, method, scale } => {
                let mut out = dummy.clone();
                let inv = 1.0 / *n as f64;
                out.for_each_tensor_mut(|t| {
                    for v in t.iter_mut() {
                        let mean: f64 = (0..*n)
                            .map(|_| defense::sample_noise(*method, *scale, r))
                            .sum::<f64>()
                            * inv;
                        *v += mean;
                    }
                });
                Ok((out, Vec::new(), None))
            }
            Transform::SvdReplay(params) => {
                let mut out = dummy.clone();
                let mut layers = Vec::with_capacity(out.layers.len());
                for (l, lg) in out.layers.iter_mut().enumerate() {
                    let g = &lg.weight_grad;
                    if g.rows() < 2 || g.cols() < 2 {
                        layers.push(None);
                        continue;
                    }
                    let p = defense::defend_grad_svd_with(defense::weight_id(l), g, params)?;
                    let rebuilt = defense::reconstruct_packet(&p);
                    if let defense::PacketBody::Svd {
                        weights, factors, ..
                    } = p.body
                    {
                        layers.push(Some(ReplayLayer {
                            weights: weights.diag,
                            u: factors.u_star,
                            vt: factors.vt_star,
                        }));
                    } else {
                        layers.push(None);
                    }
                    lg.weight_grad = rebuilt;
                }
                Ok((out, layers, None))
            }
            Transform::PruneReplay(cfg) => {
                let mut state = defense::DefenseState::default();
                let out = defense::defend_baseline(dummy, cfg, &mut state, r)?;
                let mask = nonzero_mask(&out);
                Ok((out, Vec::new(), Some(mask)))
            }
        }
    }

    fn pullback(&self, adj: &mut GradSet, replay: &[Option<ReplayLayer>], mask: Option<&GradSet>) {
        match self {
            Transform::Identity | Transform::Eot { .. } => {}
            Transform::Mask(m) => hadamard(adj, m),
            Transform::SvdReplay(_) => {
                for (a, r) in adj.layers.iter_mut().zip(replay) {
                    if let Some(r) = r {
                        a.weight_grad = replay_pullback(r, &a.weight_grad);
                    }
                }
            }
            Transform::PruneReplay(_) => {
                if let Some(m) = mask {
                    hadamard(adj, m);
                }
            }
        }
    }
}

fn resolve_labels(
    observed: &GradSet,
    target: &AttackTarget,
    mode: LabelMode,
    classes: usize,
    warnings: &mut Vec<String>,
) -> Result<Option<Vec<usize>>> {
    match mode {
        LabelMode::Known => {
            let labels = target
                .known_labels
                .clone()
                .ok_or_else(|| Error::InvalidConfig("known label mode needs labels".into()))?;
            if labels.len() != target.batch_size || labels.iter().any(|&l| l >= classes) {
                return Err(Error::InvalidConfig(
                    "known labels do not fit the batch/classes".into(),
                ));
            }
            Ok(Some(labels))
        }
        LabelMode::Inferred => {
            let inferred = if target.batch_size == 1 {
                tinynn::infer_label_from_grads(observed).map(|l| vec![l])
            } else {
                let bias = &observed.layers.last().expect("non-empty").bias_grad;
                let neg: Vec<usize> = (0..bias.len()).filter(|&i| bias[i] < 0.0).collect();
                if neg.len() == target.batch_size {
                    Ok(neg)
                } else {
                    Err(Error::Undetermined)
                }
            };
            match inferred {
                Ok(l) => Ok(Some(l)),
                Err(_) => {
                    warnings.push(
                        "label undetermined from gradients; optimizing labels instead".into(),
                    );
                    Ok(None)
                }
            }
        }
        LabelMode::Optimized => Ok(None),
    }
}

/// Run a gradient inversion attack.
pub fn run_attack(
    model: &ModelParams,
    observation: Observation<'_>,
    target: &AttackTarget,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let observed = match observation {
        Observation::Grads(g) => g.clone(),
        Observation::Packets(p) => defense::reconstruct_update(p, model)?,
    };
    if !observed.matches(model) {
        return Err(Error::InvalidInput(
            "observed gradients do not match the model".into(),
        ));
    }
    let b = target.batch_size;
    if b == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let d = model.input_dim();
    let classes = model.num_classes();
    if cfg.tv_weight > 0.0 && target.side.is_none_or(|s| s * s != d) {
        return Err(Error::InvalidConfig(
            "total variation needs a square image side".into(),
        ));
    }
    let transform = Transform::build(cfg.adaptive, &observed, target.defense.as_ref())?;

    let mut warnings = Vec::new();
    let fixed_labels = resolve_labels(&observed, target, cfg.label_mode, classes, &mut warnings)?;

    let runs = if target.init.is_some() {
        1
    } else {
        cfg.restarts
    };
    let mut best: Option<AttackResult> = None;
    for restart in 0..runs as u64 {
        let res = descend(
            model,
            &observed,
            target,
            cfg,
            &transform,
            fixed_labels.as_ref(),
            restart,
            warnings.clone(),
        )?;
        if best
            .as_ref()
            .is_none_or(|b| res.final_distance < b.final_distance)
        {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[allow(clippy::too_many_arguments)]
fn descend(
    model: &ModelParams,
    observed: &GradSet,
    target: &AttackTarget,
    cfg: &AttackConfig,
    transform: &Transform,
    fixed_labels: Option<&Vec<usize>>,
    restart: u64,
    warnings: Vec<String>,
) -> Result<AttackResult> {
    let b = target.batch_size;
    let d = model.input_dim();
    let classes = model.num_classes();
    let mut r = rng::stream(cfg.seed, &[0xA77A, restart]);
    let mut xs: Vec<f64> = match &target.init {
        Some(init) => {
            if init.len() != b || init.iter().any(|x| x.len() != d) {
                return Err(Error::InvalidConfig(
                    "initial guess does not match the batch".into(),
                ));
            }
            init.concat()
        }
        None => (0..b * d).map(|_| r.random_range(0.0..1.0)).collect(),
    };
    let mut label_logits: Vec<f64> = if fixed_labels.is_none() {
        (0..b * classes)
            .map(|_| r.random_range(-0.1..0.1))
            .collect()
    } else {
        Vec::new()
    };
    let mut adam_x = Adam::new(xs.len(), cfg.lr);
    let mut adam_y = Adam::new(label_logits.len(), cfg.lr);
    let mut noise_rng = rng::stream(cfg.seed, &[0xE07, restart]);

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut best = (f64::INFINITY, xs.clone(), label_logits.clone(), 0usize);
    let inv_b = 1.0 / b as f64;

    for it in 0..cfg.iterations {
        let targets: Vec<Vec<f64>> = (0..b)
            .map(|i| match &fixed_labels {
                Some(l) => tinynn::one_hot(l[i], classes),
                None => tinynn::softmax(&label_logits[i * classes..(i + 1) * classes]),
            })
            .collect();
        let mut dummy = GradSet::zeros_like(model);
        let mut caches = Vec::with_capacity(b);
        for i in 0..b {
            let (_, g, cache, probs, deltas) =
                tinynn::example_backward(model, &xs[i * d..(i + 1) * d], &targets[i])?;
            dummy.add_scaled(&g, 1.0);
            caches.push((cache, probs, deltas));
        }
        dummy.scale(inv_b);

        let (transformed, replay, replay_mask) = transform.apply(&dummy, &mut noise_rng)?;
        let (dist, mut adj) = distance_and_adjoint(observed, &transformed, cfg.distance)?;
        transform.pullback(&mut adj, &replay, replay_mask.as_ref());
        adj.scale(inv_b);

        let mut objective = dist;
        let images: Vec<Vec<f64>> = xs.chunks(d).map(<[f64]>::to_vec).collect();
        let tv_grads = if cfg.tv_weight > 0.0 {
            let (tv, g) = total_variation(&images, target.side.expect("checked"));
            objective += cfg.tv_weight * tv;
            Some(g)
        } else {
            None
        };
        if !objective.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "attack objective became {objective} at iteration {it}"
            )));
        }
        trace.push(objective);
        if objective < best.0 {
            best = (objective, xs.clone(), label_logits.clone(), it);
        }

        let mut gx = vec![0.0; xs.len()];
        let mut gy = vec![0.0; label_logits.len()];
        for (i, (cache, probs, deltas)) in caches.iter().enumerate() {
            let (dx, dt) = double_backward(model, cache, probs, deltas, &adj);
            gx[i * d..(i + 1) * d].copy_from_slice(&dx);
            if fixed_labels.is_none() {
                let y = &targets[i];
                let yd = linalg::dot(y, &dt);
                for c in 0..classes {
                    gy[i * classes + c] = y[c] * (dt[c] - yd);
                }
            }
            if let Some(tg) = &tv_grads {
                for (g, t) in gx[i * d..(i + 1) * d].iter_mut().zip(&tg[i]) {
                    *g += cfg.tv_weight * t;
                }
            }
        }
        adam_x.step(&mut xs, &gx);
        xs.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        if fixed_labels.is_none() {
            adam_y.step(&mut label_logits, &gy);
        }
    }

    let (final_distance, best_x, best_logits, best_iteration) = best;
    let labels = match fixed_labels {
        Some(l) => l.clone(),
        None => best_logits
            .chunks(classes)
            .map(|z| {
                let mut arg = 0;
                for (c, v) in z.iter().enumerate() {
                    if *v > z[arg] {
                        arg = c;
                    }
                }
                arg
            })
            .collect(),
    };
    Ok(AttackResult {
        reconstructed: best_x.chunks(d).map(<[f64]>::to_vec).collect(),
        labels,
        loss_trace: trace,
        final_distance,
        best_iteration,
        warnings,
    })
}

/// One simulated leak: the attacker sees the defended gradient of `batch`
/// and tries to invert it.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakOutcome {
    pub result: AttackResult,
    /// `assignment[i]` is the reconstructed slot matched to `batch[i]`.
    pub assignment: Vec<usize>,
    pub mse: f64,
}

/// Compute the batch gradient, defend it with `defense` (randomness keyed by
/// `coords`), and attack the packets. The attacker knows the labels and the
/// defense configuration; whether it uses them depends on `cfg`.
pub fn attack_private_batch(
    model: &ModelParams,
    batch: &[tinynn::Example],
    defense_cfg: &DefenseConfig,
    cfg: &AttackConfig,
    coords: &[u64],
) -> Result<LeakOutcome> {
    let (_, grads) = tinynn::loss_and_grad(model, batch)?;
    let packets = defense::defend_update(
        &grads,
        defense_cfg,
        &mut defense::DefenseState::default(),
        coords,
    )?;
    let d = model.input_dim();
    let side = (d as f64).sqrt().round() as usize;
    let target = AttackTarget {
        batch_size: batch.len(),
        side: (side * side == d).then_some(side),
        known_labels: Some(batch.iter().map(|e| e.label).collect()),
        init: None,
        defense: Some(defense_cfg.clone()),
    };
    let result = run_attack(model, Observation::Packets(&packets), &target, cfg)?;
    let truth: Vec<Vec<f64>> = batch.iter().map(|e| e.input.clone()).collect();
    let assignment = best_assignment(&truth, &result.reconstructed);
    let mse = matched_mse(&truth, &result.reconstructed);
    Ok(LeakOutcome {
        result,
        assignment,
        mse,
    })
}

/// Samples of `η − η̄'`: one defender draw minus the mean of `n` attacker
/// draws of the same noise, as seen by an EoT attacker.
pub fn eot_residual_samples(
    method: DefenseMethod,
    scale: f64,
    n: usize,
    draws: usize,
    r: &mut impl Rng,
) -> Vec<f64> {
    (0..draws)
        .map(|_| {
            let eta = defense::sample_noise(method, scale, r);
            let mean = (0..n)
                .map(|_| defense::sample_noise(method, scale, r))
                .sum::<f64>()
                / n as f64;
            eta - mean
        })
        .collect()
}

fn image_mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Assignment of reconstructed slots to ground-truth images minimising total
/// MSE: `result[i]` is the slot matched to `truth[i]`. Exhaustive, so meant
/// for small batches.
pub fn best_assignment(truth: &[Vec<f64>], recon: &[Vec<f64>]) -> Vec<usize> {
    assert_eq!(truth.len(), recon.len(), "batch size mismatch");
    let cost: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| recon.iter().map(|r| image_mse(t, r)).collect())
        .collect();
    fn search(
        i: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        acc: f64,
        cost: &[Vec<f64>],
        best: &mut (f64, Vec<usize>),
    ) {
        if acc >= best.0 {
            return;
        }
        if i == cost.len() {
            *best = (acc, cur.clone());
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                search(i + 1, used, cur, acc + cost[i][j], cost, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, (0..truth.len()).collect());
    search(
        0,
        &mut vec![false; truth.len()],
        &mut Vec::new(),
        0.0,
        &cost,
        &mut best,
    );
    best.1
}

/// Mean reconstruction MSE under [`best_assignment`].
pub fn matched_mse(truth: &[Vec<f64>], recon: &[Vec<f64>]) -> f64 {
    let perm = best_assignment(truth, recon);
    truth
        .iter()
        .zip(&perm)
        .map(|(t, &j)| image_mse(t, &recon[j]))
        .sum::<f64>()
        / truth.len() as f64
}
