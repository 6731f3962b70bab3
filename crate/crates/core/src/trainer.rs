//! Training loop: cosine learning-rate schedule, shuffled mini-batches with
//! per-batch vertex masking, Adam updates, per-epoch checkpoints, and the
//! evaluation metrics.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::container::{CheckpointFile, TensorArchive};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossBreakdown};
use crate::model::Model;
use crate::nn::{Adam, BoundParams};
use crate::synth::SynthDataset;
use crate::tokenizer::MvmPlan;

/// Learning rate after `step` of `total_steps`: eta * cos(7 pi s / (16 S)).
/// The argument never reaches pi/2, so the rate stays positive and ends at
/// cos(7 pi / 16) of the base rate.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    Ok(base_lr * (7.0 * PI * step as f64 / (16.0 * total_steps as f64)).cos())
}

/// Steps in a full run: epochs times the number of batches per epoch.
pub fn total_steps(epochs: usize, records: usize, batch_size: usize) -> Result<usize> {
    if records == 0 {
        return Err(Error::contract("dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    Ok(epochs * records.div_ceil(batch_size))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_breakdown: LossBreakdown,
    pub last_lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    pub total_steps: usize,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mpve: f64,
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub adam_steps: u64,
    pub config: TrainConfig,
    pub epochs_completed: usize,
    pub global_step: usize,
    pub total_steps: usize,
}

fn check_compatible(model: &Model, dataset: &SynthDataset) -> Result<()> {
    if model.config.preset != dataset.spec.preset {
        return Err(Error::contract("model and dataset body presets differ"));
    }
    if model.config.coarse_count != dataset.spec.coarse_count {
        return Err(Error::contract(format!(
            "model expects {} coarse vertices, dataset has {}",
            model.config.coarse_count, dataset.spec.coarse_count
        )));
    }
    if model.config.resolution != dataset.spec.resolution {
        return Err(Error::contract(format!(
            "model expects {}px images, dataset has {}px",
            model.config.resolution, dataset.spec.resolution
        )));
    }
    if model.topology.content_hash() != dataset.topology_sha256 {
        return Err(Error::contract("model topology differs from dataset topology"));
    }
    Ok(())
}

pub fn save_checkpoint(
    model: &Model,
    adam: &Adam,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let mut tensors = TensorArchive::new();
    for (i, (name, value)) in model.store.iter().enumerate() {
        tensors.insert(&format!("param.{name}"), value.clone())?;
        tensors.insert(&format!("adam.m.{name}"), adam.m[i].clone())?;
        tensors.insert(&format!("adam.v.{name}"), adam.v[i].clone())?;
    }
    let meta_json = serde_json::to_string(meta).map_err(Error::from)?;
    CheckpointFile { meta_json, tensors }.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Adam, CheckpointMeta)> {
    let file = CheckpointFile::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&file.meta_json)
        .map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
    meta.config.validate()?;
    let mut model = Model::new(meta.config.model.clone(), meta.config.optim.seed)?;
    if file.tensors.len() != 3 * model.store.len() {
        return Err(Error::format(format!(
            "checkpoint holds {} tensors, model needs {}",
            file.tensors.len(),
            3 * model.store.len()
        )));
    }
    let mut adam = Adam::new(&model.store);
    adam.step_count = meta.adam_steps;
    let names: Vec<String> = model.store.names().to_vec();
    for (i, name) in names.iter().enumerate() {
        let p = file.tensors.get(&format!("param.{name}"))?;
        model.store.set(name, p.clone())?;
        let m = file.tensors.get(&format!("adam.m.{name}"))?;
        let v = file.tensors.get(&format!("adam.v.{name}"))?;
        if m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::format(format!("moment shape mismatch for {name}")));
        }
        adam.m[i] = m.clone();
        adam.v[i] = v.clone();
    }
    Ok((model, adam, meta))
}

pub fn train(
    model: &mut Model,
    dataset: &SynthDataset,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, dataset)?;
    let n = dataset.records.len();
    let batch_size = cfg.optim.batch_size;
    let schedule_steps = total_steps(cfg.optim.epochs, n, batch_size)?;
    let token_count = model.config.token_count();
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.optim.seed);
    let mut report = TrainReport {
        step_losses: Vec::new(),
        epochs: Vec::new(),
        total_steps: schedule_steps,
        checkpoints: Vec::new(),
    };
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut global_step = 0usize;
    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_batches = 0usize;
        let mut last_lr = 0.0;
        for (batch_idx, batch) in order.chunks(batch_size).enumerate() {
            let ratio = if cfg.optim.mask_ratio > 0.0 {
                rng.gen_range(0.0..=cfg.optim.mask_ratio)
            } else {
                0.0
            };
            let mut g = Graph::new();
            let bound = BoundParams::mount(&mut g, &model.store);
            let mut acc: Option<Var> = None;
            let mut batch_breakdown = LossBreakdown::default();
            for &rec_idx in batch {
                let rec = &dataset.records[rec_idx];
                let image = g.constant(rec.image.clone().into_dyn());
                let plan = MvmPlan::sample(token_count, ratio, rng.gen::<u64>())?;
                let lg = model.loss_graph(&mut g, image, &bound, &plan, &rec.gt, &cfg.loss)?;
                accumulate(&mut batch_breakdown, &lg.breakdown(&g));
                acc = Some(match acc {
                    None => lg.total,
                    Some(a) => g.add(a, lg.total),
                });
            }
            let sum = acc.expect("chunks are never empty");
            let mean = g.scale(sum, 1.0 / batch.len() as f64);
            let loss = g.scalar(mean);
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {loss} at step {global_step} (batch {batch_idx} of epoch {epoch})"
                )));
            }
            g.backward(mean);
            let grads = bound.collect_grads(&g);
            let lr = lr_at(global_step, schedule_steps, cfg.optim.base_lr)?;
            adam.step(&mut model.store, &grads, lr)?;
            scale_breakdown(&mut batch_breakdown, 1.0 / batch.len() as f64);
            accumulate(&mut epoch_sum, &batch_breakdown);
            epoch_batches += 1;
            last_lr = lr;
            report.step_losses.push(loss);
            global_step += 1;
        }
        scale_breakdown(&mut epoch_sum, 1.0 / epoch_batches as f64);
        report.epochs.push(EpochStats {
            epoch,
            mean_total: epoch_sum.total,
            mean_breakdown: epoch_sum,
            last_lr,
        });
        if let Some(dir) = checkpoint_dir {
            let every = cfg.optim.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                let path = dir.join(format!("checkpoint-epoch-{:04}.mltc", epoch + 1));
                let meta = checkpoint_meta(cfg, &adam, epoch + 1, global_step, schedule_steps);
                save_checkpoint(model, &adam, &meta, &path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.mltc");
        let meta = checkpoint_meta(cfg, &adam, cfg.optim.epochs, global_step, schedule_steps);
        save_checkpoint(model, &adam, &meta, &path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}

fn checkpoint_meta(
    cfg: &TrainConfig,
    adam: &Adam,
    epochs_completed: usize,
    global_step: usize,
    schedule_steps: usize,
) -> CheckpointMeta {
    CheckpointMeta {
        adam_steps: adam.step_count,
        config: cfg.clone(),
        epochs_completed,
        global_step,
        total_steps: schedule_steps,
    }
}

fn accumulate(into: &mut LossBreakdown, from: &LossBreakdown) {
    into.l_v += from.l_v;
    into.l_j += from.l_j;
    into.l_j_reg += from.l_j_reg;
    into.l_v_temp += from.l_v_temp;
    into.l_j_proj += from.l_j_proj;
    into.total += from.total;
}

fn scale_breakdown(b: &mut LossBreakdown, by: f64) {
    b.l_v *= by;
    b.l_j *= by;
    b.l_j_reg *= by;
    b.l_v_temp *= by;
    b.l_j_proj *= by;
    b.total *= by;
}

/// Mean metrics over a dataset. Inference never masks vertices.
pub fn evaluate(model: &Model, dataset: &SynthDataset) -> Result<EvalStats> {
    check_compatible(model, dataset)?;
    if dataset.records.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let schema = &model.topology.joint_schema;
    let mut sums = EvalStats {
        mpve: 0.0,
        mpjpe: 0.0,
        pa_mpjpe: 0.0,
    };
    for rec in &dataset.records {
        let out = model.forward_eval(&rec.image)?;
        sums.mpve += losses::mpve(
            &out.prediction.fine_vertices,
            &rec.gt.fine_vertices,
            &model.topology,
            schema,
        )?;
        sums.mpjpe += losses::mpjpe(&out.prediction.joints3d, &rec.gt.joints3d, schema)?;
        sums.pa_mpjpe += losses::pa_mpjpe(&out.prediction.joints3d, &rec.gt.joints3d)?;
    }
    let n = dataset.records.len() as f64;
    Ok(EvalStats {
        mpve: sums.mpve / n,
        mpjpe: sums.mpjpe / n,
        pa_mpjpe: sums.pa_mpjpe / n,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[(&str, EvalStats)]) -> Result<()> {
    let mut text = String::from("split,mpve,mpjpe,pa_mpjpe\n");
    for (split, stats) in rows {
        text.push_str(&format!(
            "{split},{},{},{}\n",
            stats.mpve, stats.mpjpe, stats.pa_mpjpe
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::body::BodyPreset;
    use crate::config::OptimConfig;
    use crate::losses::LossWeights;
    use crate::model::ModelConfig;
    use crate::mte::EncoderConfig;
    use crate::synth::{generate, SynthSpec, Tier};

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                preset: BodyPreset::Desk,
                coarse_count: 6,
                resolution: 112,
                backbone: BackboneConfig {
                    widths: [2, 3, 4, 6],
                },
                encoder: EncoderConfig {
                    block_widths: [8, 6, 4],
                    heads_per_block: 2,
                    layers_per_block: 1,
                },
            },
            optim: OptimConfig {
                base_lr: 2e-3,
                epochs: 2,
                batch_size: 2,
                mask_ratio: 0.3,
                seed: 7,
                checkpoint_every: 1,
            },
            loss: LossWeights::default(),
        }
    }

    fn tiny_dataset(count: usize, seed: u64) -> SynthDataset {
        generate(&SynthSpec {
            preset: BodyPreset::Desk,
            coarse_count: 6,
            resolution: 112,
            count,
            tier: Tier::Easy,
            global_seed: seed,
        })
        .unwrap()
    }

    fn stores_equal_bitwise(a: &crate::nn::ParamStore, b: &crate::nn::ParamStore) -> bool {
        a.names() == b.names()
            && a.iter().zip(b.iter()).all(|((_, x), (_, y))| {
                x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    #[test]
    fn schedule_matches_closed_form() {
        assert_eq!(lr_at(0, 10, 1e-4).unwrap(), 1e-4);
        let end = lr_at(10, 10, 1e-4).unwrap();
        assert!((end - 1.9509032201612825e-5).abs() < 1e-19);
        // at s = 4S/7 the argument is pi/4
        let mid = lr_at(4, 7, 1.0).unwrap();
        assert!((mid - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(lr_at(11, 10, 1e-4).is_err());
        assert!(lr_at(0, 0, 1e-4).is_err());
        let monotone: Vec<f64> = (0..=20).map(|s| lr_at(s, 20, 1.0).unwrap()).collect();
        assert!(monotone.windows(2).all(|w| w[1] < w[0]));
        assert!(monotone.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn step_budget_formula() {
        assert_eq!(total_steps(2, 10, 4).unwrap(), 6);
        assert_eq!(total_steps(3, 8, 8).unwrap(), 3);
        assert_eq!(total_steps(0, 5, 2).unwrap(), 0);
        assert!(total_steps(1, 0, 2).is_err());
        assert!(total_steps(1, 5, 0).is_err());
    }

    #[test]
    fn short_run_reduces_loss() {
        let mut cfg = tiny_train_config();
        cfg.optim.epochs = 10;
        let dataset = tiny_dataset(4, 100);
        let mut model = Model::new(cfg.model.clone(), 5).unwrap();
        let report = train(&mut model, &dataset, &cfg, None).unwrap();
        assert_eq!(report.step_losses.len(), 20);
        assert_eq!(report.total_steps, 20);
        let first = report.epochs.first().unwrap().mean_total;
        let last = report.epochs.last().unwrap().mean_total;
        assert!(
            last < first,
            "loss did not decrease: first epoch {first}, last epoch {last}"
        );
        assert!(report.epochs.iter().all(|e| e.mean_total.is_finite()));
        assert!(report.epochs.last().unwrap().last_lr > 0.0);
    }

    #[test]
    fn training_is_deterministic_in_the_seed() {
        let cfg = tiny_train_config();
        let dataset = tiny_dataset(4, 101);
        let mut m1 = Model::new(cfg.model.clone(), 9).unwrap();
        let r1 = train(&mut m1, &dataset, &cfg, None).unwrap();
        let mut m2 = Model::new(cfg.model.clone(), 9).unwrap();
        let r2 = train(&mut m2, &dataset, &cfg, None).unwrap();
        assert_eq!(r1.step_losses, r2.step_losses);
        assert!(stores_equal_bitwise(&m1.store, &m2.store));

        let mut other = cfg.clone();
        other.optim.seed = 8;
        let mut m3 = Model::new(cfg.model.clone(), 9).unwrap();
        let r3 = train(&mut m3, &dataset, &other, None).unwrap();
        assert_ne!(r1.step_losses, r3.step_losses);
    }

    #[test]
    fn checkpoints_cover_every_epoch_and_restore_state() {
        let cfg = tiny_train_config();
        let dataset = tiny_dataset(3, 102);
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::new(cfg.model.clone(), 11).unwrap();
        let report = train(&mut model, &dataset, &cfg, Some(dir.path())).unwrap();
        let names: Vec<String> = report
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            vec![
                "checkpoint-epoch-0001.mltc".to_string(),
                "checkpoint-epoch-0002.mltc".to_string(),
                "final.mltc".to_string(),
            ]
        );
        let (loaded, adam, meta) = load_checkpoint(&dir.path().join("final.mltc")).unwrap();
        assert!(stores_equal_bitwise(&model.store, &loaded.store));
        assert_eq!(meta.epochs_completed, 2);
        assert_eq!(meta.global_step, report.total_steps);
        assert_eq!(meta.adam_steps, report.total_steps as u64);
        assert_eq!(meta.config, cfg);
        assert!(adam.m.iter().any(|m| m.iter().any(|&v| v != 0.0)));

        // resuming for zero epochs must not move anything
        let mut resumed = loaded;
        let mut zero = cfg.clone();
        zero.optim.epochs = 0;
        let before = resumed.store.clone();
        let r = train(&mut resumed, &dataset, &zero, None).unwrap();
        assert_eq!(r.step_losses.len(), 0);
        assert!(stores_equal_bitwise(&before, &resumed.store));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut cfg = tiny_train_config();
        cfg.optim.base_lr = 0.0;
        cfg.optim.epochs = 1;
        let dataset = tiny_dataset(3, 103);
        let mut model = Model::new(cfg.model.clone(), 12).unwrap();
        let before = model.store.clone();
        let metrics_before = evaluate(&model, &dataset).unwrap();
        train(&mut model, &dataset, &cfg, None).unwrap();
        assert!(stores_equal_bitwise(&before, &model.store));
        let metrics_after = evaluate(&model, &dataset).unwrap();
        assert!((metrics_before.mpve - metrics_after.mpve).abs() < 1e-12);
        assert!((metrics_before.mpjpe - metrics_after.mpjpe).abs() < 1e-12);
        assert!((metrics_before.pa_mpjpe - metrics_after.pa_mpjpe).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_context() {
        let cfg = tiny_train_config();
        let dataset = tiny_dataset(2, 104);
        let mut model = Model::new(cfg.model.clone(), 13).unwrap();
        let mut poisoned = model.store.get("backbone.conv0.weight").unwrap().clone();
        poisoned[[0, 0]] = f64::NAN;
        model.store.set("backbone.conv0.weight", poisoned).unwrap();
        let err = train(&mut model, &dataset, &cfg, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch"), "error message lacks batch id: {msg}");
    }

    #[test]
    fn evaluation_metrics_and_csv_format() {
        let cfg = tiny_train_config();
        let dataset = tiny_dataset(3, 105);
        let model = Model::new(cfg.model.clone(), 14).unwrap();
        let stats = evaluate(&model, &dataset).unwrap();
        for v in [stats.mpve, stats.mpjpe, stats.pa_mpjpe] {
            assert!(v.is_finite() && v >= 0.0);
        }
        // the aligned error can never exceed the root-centered error
        assert!(stats.pa_mpjpe <= stats.mpjpe + 1e-12);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[("train", stats), ("val", stats)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "split,mpve,mpjpe,pa_mpjpe");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("train,"));
        assert!(lines[2].starts_with("val,"));
        let fields: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(fields.len(), 4);
        assert!((fields[1].parse::<f64>().unwrap() - stats.mpve).abs() < 1e-15);
    }

    #[test]
    fn incompatible_dataset_is_rejected() {
        let cfg = tiny_train_config();
        let mut model = Model::new(cfg.model.clone(), 15).unwrap();
        let wrong = generate(&SynthSpec {
            preset: BodyPreset::Desk,
            coarse_count: 8,
            resolution: 112,
            count: 2,
            tier: Tier::Easy,
            global_seed: 1,
        })
        .unwrap();
        assert!(train(&mut model, &wrong, &cfg, None).is_err());
        assert!(evaluate(&model, &wrong).is_err());
    }

    #[test]
    fn masking_ratio_zero_still_trains() {
        let mut cfg = tiny_train_config();
        cfg.optim.mask_ratio = 0.0;
        cfg.optim.epochs = 1;
        let dataset = tiny_dataset(2, 106);
        let mut model = Model::new(cfg.model.clone(), 16).unwrap();
        let report = train(&mut model, &dataset, &cfg, None).unwrap();
        assert_eq!(report.step_losses.len(), 1);
        assert!(report.step_losses[0].is_finite());
    }
}
