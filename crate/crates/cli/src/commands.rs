//! The `train`, `attack` and `sweep` commands.

use crate::spec::{self, ExperimentSpec, Mode};
use anyhow::{Context, Result};
use rayon::prelude::*;
use std::fs;
use std::path::{Path, PathBuf};
use svdlab_core::data::{self, Dataset};
use svdlab_core::flsim::{self, Experiment};
use svdlab_core::metrics::{self, ImagePair};
use svdlab_core::report::{self, AttackRow, SweepRow};
use svdlab_core::{attack, DefenseConfig, Error, FlConfig, ModelParams};

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn datasets(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    match &spec.idx {
        None => Ok(flsim::synthetic_splits(&spec.fl)?),
        Some(idx) => {
            let read =
                |p: &PathBuf| fs::read(p).with_context(|| format!("reading {}", p.display()));
            let classes = spec.fl.data.num_classes;
            let train = data::load_idx(
                &read(&idx.train_images)?,
                &read(&idx.train_labels)?,
                classes,
            )?;
            let test = data::load_idx(&read(&idx.test_images)?, &read(&idx.test_labels)?, classes)?;
            Ok((train, test))
        }
    }
}

pub fn train(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let (train, test) = datasets(spec)?;
    let Experiment { reports, model } = flsim::run_experiment_on(&spec.fl, &train, &test)?;
    write_atomic(
        &out.join("rounds.csv"),
        &report::rounds_csv(&reports, spec.fl.defense.method.as_str()),
    )?;
    write_atomic(&out.join("model.ckpt"), &model.to_checkpoint())?;
    if let Some(last) = reports.last() {
        eprintln!("round {}: accuracy {:.4}", last.round, last.accuracy);
    }
    Ok(())
}

fn victim_model(spec: &ExperimentSpec, train: &Dataset) -> Result<ModelParams> {
    match &spec.evaluation.checkpoint {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            let model = ModelParams::from_checkpoint(&text)?;
            if model.input_dim() != train.input_dim || model.num_classes() != train.num_classes {
                return Err(Error::InvalidConfig(format!(
                    "checkpoint {} does not fit the data ({} inputs, {} classes)",
                    path.display(),
                    train.input_dim,
                    train.num_classes
                ))
                .into());
            }
            Ok(model)
        }
        None => Ok(flsim::initial_model(&spec.fl, train)?),
    }
}

struct Evaluated {
    rows: Vec<AttackRow>,
    images: Vec<(String, String)>,
}

/// Attack every sampled batch under one defense configuration.
fn evaluate(
    spec: &ExperimentSpec,
    model: &ModelParams,
    victims: &Dataset,
    defense_cfg: &DefenseConfig,
) -> Result<Evaluated> {
    let ev = &spec.evaluation;
    let side = victims
        .side()
        .ok_or_else(|| Error::InvalidConfig("attack metrics need square images".into()))?;
    let batches = data::sample_batches(victims, ev.n_examples, ev.batch_size, spec.attack.seed)?;
    let defense_name = defense_cfg.method.as_str();
    let mode = spec.attack.adaptive.label();
    let outcomes: Vec<_> = batches
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let batch = victims.subset(idx);
            attack::attack_private_batch(model, &batch, defense_cfg, &spec.attack, &[i as u64])
                .map(|o| (batch, o))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut images = Vec::new();
    for (i, (batch, outcome)) in outcomes.iter().enumerate() {
        for (slot, ex) in batch.iter().enumerate() {
            let id = i * ev.batch_size + slot;
            let recon = &outcome.result.reconstructed[outcome.assignment[slot]];
            let pair = ImagePair::new(&ex.input, recon, side)?;
            let window = metrics::SSIM_WINDOW.min(if side % 2 == 1 { side } else { side - 1 });
            rows.push(AttackRow {
                example_id: id.to_string(),
                defense: defense_name.to_string(),
                attack_mode: mode.clone(),
                mse: metrics::mse(&pair),
                psnr: metrics::psnr(&pair),
                ssim: metrics::ssim(&pair, window)?,
            });
            if ev.dump_images {
                images.push((
                    format!("{defense_name}_{id}_truth.pgm"),
                    report::pgm(&ex.input, side),
                ));
                images.push((
                    format!("{defense_name}_{id}_recon.pgm"),
                    report::pgm(recon, side),
                ));
            }
        }
    }
    Ok(Evaluated { rows, images })
}

fn defense_for(fl: &FlConfig, method: svdlab_core::DefenseMethod) -> DefenseConfig {
    DefenseConfig {
        method,
        ..fl.defense.clone()
    }
}

pub fn attack(spec: &ExperimentSpec, out: &Path) -> Result<()> {
    let (train, test) = datasets(spec)?;
    let model = victim_model(spec, &train)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let image_dir = out.join("images");
    for &method in &spec.evaluation.defenses {
        let cfg = defense_for(&spec.fl, method);
        let ev = evaluate(spec, &model, &test, &cfg)?;
        if !ev.images.is_empty() {
            fs::create_dir_all(&image_dir)
                .with_context(|| format!("creating {}", image_dir.display()))?;
        }
        for (name, body) in &ev.images {
            write_atomic(&image_dir.join(name), body)?;
        }
        let mode = spec.attack.adaptive.label();
        summaries.extend(AttackRow::mean_of(&ev.rows, method.as_str(), &mode));
        rows.extend(ev.rows);
    }
    for s in &summaries {
        eprintln!("{} / {}: mean mse {:.6}", s.defense, s.attack_mode, s.mse);
    }
    rows.extend(summaries);
    write_atomic(&out.join("attack_metrics.csv"), &report::attack_csv(&rows))
}

fn sweep_point(spec: &ExperimentSpec, axis: &str, value: f64, out: &Path) -> Result<SweepRow> {
    let mut point = spec.clone();
    spec::apply_axis(&mut point.fl, axis, value).map_err(Error::InvalidConfig)?;
    point.fl.validate()?;
    let (train, test) = datasets(&point)?;
    let run = flsim::run_experiment_on(&point.fl, &train, &test)?;
    let mut baseline_cfg = point.fl.clone();
    baseline_cfg.defense.method = svdlab_core::DefenseMethod::None;
    let baseline = flsim::run_experiment_on(&baseline_cfg, &train, &test)?;
    let up = |e: &Experiment| e.reports.iter().map(|r| r.bytes_up).sum::<usize>();
    let victim = flsim::initial_model(&point.fl, &train)?;
    let ev = evaluate(&point, &victim, &test, &point.fl.defense)?;
    let mean_mse = ev.rows.iter().map(|r| r.mse).sum::<f64>() / ev.rows.len() as f64;
    let mean_entropy =
        run.reports.iter().map(|r| r.mean_entropy).sum::<f64>() / run.reports.len() as f64;
    write_atomic(
        &out.join(format!("sweep_{axis}_{value}_rounds.csv")),
        &report::rounds_csv(&run.reports, point.fl.defense.method.as_str()),
    )?;
    Ok(SweepRow {
        axis: axis.to_string(),
        value,
        final_accuracy: run.reports.last().map_or(0.0, |r| r.accuracy),
        mean_attack_mse: mean_mse,
        comm_reduction_pct: metrics::comm_reduction(up(&run), up(&baseline))?,
        mean_entropy,
    })
}

pub fn sweep(spec: &ExperimentSpec, axis: &str, values: &[f64], out: &Path) -> Result<()> {
    let rows: Vec<SweepRow> = values
        .par_iter()
        .map(|&v| sweep_point(spec, axis, v, out))
        .collect::<Result<_>>()?;
    write_atomic(&out.join("sweep.csv"), &report::sweep_csv(&rows))
}

/// Shared entry for all modes once the experiment file is loaded and validated.
pub fn run(
    mode: Mode,
    spec: &ExperimentSpec,
    out: &Path,
    sweep_axis: Option<(&str, &[f64])>,
) -> Result<()> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    match mode {
        Mode::Train => train(spec, out),
        Mode::Attack => attack(spec, out),
        Mode::Sweep => {
            let (axis, values) = sweep_axis.expect("sweep axis resolved by caller");
            sweep(spec, axis, values, out)
        }
    }
}
