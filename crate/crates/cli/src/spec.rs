//! Experiment specification files.

use serde::Deserialize;
use std::path::{Path, PathBuf};
use svdlab_core::defense::DefenseMethod;
use svdlab_core::{AttackConfig, FlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Attack,
    Sweep,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Attack => "attack",
            Mode::Sweep => "sweep",
        }
    }
}

/// How attack evaluations sample victims and which defenses they face.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Evaluation {
    pub n_examples: usize,
    pub batch_size: usize,
    pub defenses: Vec<DefenseMethod>,
    /// Model checkpoint to attack; a fresh initialisation when absent.
    pub checkpoint: Option<PathBuf>,
    pub dump_images: bool,
}

impl Default for Evaluation {
    fn default() -> Self {
        Self {
            n_examples: 4,
            batch_size: 1,
            defenses: vec![DefenseMethod::None, DefenseMethod::Svdefense],
            checkpoint: None,
            dump_images: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: String,
    pub values: Vec<f64>,
}

/// IDX files replacing the synthetic data; paths are relative to the config.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSpec {
    pub mode: Option<Mode>,
    pub fl: FlConfig,
    pub attack: AttackConfig,
    pub evaluation: Evaluation,
    pub sweep: Option<SweepSpec>,
    pub idx: Option<IdxFiles>,
}

pub const SWEEP_AXES: &[&str] = &[
    "beta",
    "rho",
    "alpha",
    "noise_scale",
    "prune_rate",
    "local_lr",
    "clients_per_round",
];

impl ExperimentSpec {
    /// Read and parse; errors name the file.
    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![format!("cannot read config {}: {e}", path.display())])?;
        let mut spec: ExperimentSpec = serde_json::from_str(&text)
            .map_err(|e| vec![format!("invalid config {}: {e}", path.display())])?;
        if let (Some(idx), Some(dir)) = (spec.idx.as_mut(), path.parent()) {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                *p = dir.join(&*p);
            }
        }
        if let (Some(ck), Some(dir)) = (spec.evaluation.checkpoint.as_mut(), path.parent()) {
            *ck = dir.join(&*ck);
        }
        Ok(spec)
    }

    pub fn override_seed(&mut self, seed: u64) {
        self.fl.seed = seed;
        self.fl.defense.seed = seed;
        self.attack.seed = seed;
    }

    /// Every violated constraint for running in `mode`.
    pub fn errors(&self, mode: Mode) -> Vec<String> {
        let mut errs = Vec::new();
        if let Some(m) = self.mode {
            if m != mode {
                errs.push(format!(
                    "config declares mode {} but the {} command was run",
                    m.as_str(),
                    mode.as_str()
                ));
            }
        }
        errs.extend(self.fl.errors());
        if mode != Mode::Train {
            if let Err(e) = self.attack.validate() {
                errs.push(format!("attack: {e}"));
            }
            let ev = &self.evaluation;
            if ev.n_examples == 0 {
                errs.push("evaluation.n_examples must be >= 1".into());
            }
            if ev.batch_size == 0 {
                errs.push("evaluation.batch_size must be >= 1".into());
            }
            if ev.defenses.is_empty() {
                errs.push("evaluation.defenses must not be empty".into());
            }
        }
        errs
    }
}

/// Apply one sweep value to a config.
pub fn apply_axis(fl: &mut FlConfig, axis: &str, value: f64) -> Result<(), String> {
    use svdlab_core::flsim::PartitionScheme;
    match axis {
        "beta" => fl.defense.beta = value,
        "noise_scale" => fl.defense.noise_scale = value,
        "prune_rate" => fl.defense.prune_rate = value,
        "local_lr" => fl.local_lr = value,
        "rho" => fl.partition = PartitionScheme::Rho { rho: value },
        "alpha" => fl.partition = PartitionScheme::Dirichlet { alpha: value },
        "clients_per_round" => {
            if value.fract() != 0.0 || value < 1.0 {
                return Err(format!(
                    "clients_per_round must be a positive integer, got {value}"
                ));
            }
            fl.clients_per_round = value as usize;
        }
        other => {
            return Err(format!(
                "unknown sweep axis {other:?}; expected one of {}",
                SWEEP_AXES.join(", ")
            ))
        }
    }
    Ok(())
}

/// Parse `--values`, rejecting empty lists.
pub fn parse_values(list: &str) -> Result<Vec<f64>, String> {
    let values: Vec<f64> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| format!("bad sweep value {s:?}: {e}"))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err("sweep values must not be empty".into());
    }
    Ok(values)
}
