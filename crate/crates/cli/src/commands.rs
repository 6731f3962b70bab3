use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mlt_core::body::build_default_body;
use mlt_core::config::{parse_override, TrainConfig};
use mlt_core::losses::{mpjpe, mpve, pa_mpjpe};
use mlt_core::mesh_io::export_obj;
use mlt_core::model::Model;
use mlt_core::synth::{self, SynthDataset, SynthSpec, Tier};
use mlt_core::topology::{build_topology, downsample};
use mlt_core::trainer::{
    evaluate, load_checkpoint, train, write_metrics_csv, EvalStats, TrainReport,
};
use mlt_core::{Error, Result};

use crate::manifest::{make_run_dir, resolve_out, RunManifest};
use crate::{Command, ConfigArgs, OutArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            config,
            out,
            count,
            tier,
            seed,
        } => gen_data(&config, &out, count, &tier, seed),
        Command::Train { config, out, data } => train_cmd(&config, &out, &data),
        Command::Eval {
            out,
            checkpoint,
            data,
        } => eval_cmd(&out, &checkpoint, &data),
        Command::Finetune {
            config,
            out,
            checkpoint,
            data,
        } => finetune_cmd(&config, &out, &checkpoint, &data),
        Command::Infer {
            out,
            checkpoint,
            data,
            index,
        } => infer_cmd(&out, &checkpoint, &data, index),
        Command::ExportObj { config, out } => export_obj_cmd(&config, &out),
        Command::SnapshotTemplate {
            out,
            checkpoint,
            data,
            ids,
        } => snapshot_template_cmd(&out, &checkpoint, &data, &ids),
        Command::Plot { out, input, column } => plot_cmd(&out, &input, &column),
        Command::SweepAlphaTemp {
            config,
            out,
            data,
            values,
        } => sweep_cmd(&config, &out, &data, &values),
    }
}

fn load_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let base = match &args.config {
        Some(path) => TrainConfig::from_json(&read_required(path, "config file")?)?,
        None => TrainConfig::desk(),
    };
    apply_overrides(base, &args.set)
}

fn apply_overrides(base: TrainConfig, set: &[String]) -> Result<TrainConfig> {
    let mut pairs = Vec::with_capacity(set.len());
    for raw in set {
        pairs.push(parse_override(raw)?);
    }
    base.with_overrides(&pairs)
}

fn read_required(path: &Path, what: &str) -> Result<String> {
    if !path.is_file() {
        return Err(Error::missing(format!("{what} {}", path.display())));
    }
    Ok(std::fs::read_to_string(path)?)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::missing(format!("{what} {}", path.display())));
    }
    Ok(())
}

fn load_data(dir: &Path) -> Result<SynthDataset> {
    let records = dir.join(synth::RECORDS_FILE);
    if !records.is_file() {
        return Err(Error::missing(format!(
            "dataset records {}",
            records.display()
        )));
    }
    synth::load_dataset(dir)
}

fn gen_data(cfg_args: &ConfigArgs, out: &OutArgs, count: usize, tier: &str, seed: u64) -> Result<()> {
    let cfg = load_config(cfg_args)?;
    let spec = SynthSpec {
        preset: cfg.model.preset,
        coarse_count: cfg.model.coarse_count,
        resolution: cfg.model.resolution,
        count,
        tier: Tier::parse(tier)?,
        global_seed: seed,
    };
    let ds = synth::generate(&spec)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "gen-data")?;
    let data_dir = run_dir.join("dataset");
    std::fs::create_dir_all(&data_dir)?;
    synth::save_dataset(&ds, &data_dir)?;

    let mut m = RunManifest::new("gen-data");
    m.set_config(&cfg)?;
    if let Some(p) = &cfg_args.config {
        m.add_input(p)?;
    }
    m.add_output(&data_dir.join(synth::RECORDS_FILE))?;
    m.add_output(&data_dir.join(synth::MANIFEST_FILE))?;
    m.write(&run_dir)?;
    println!("dataset: {}", data_dir.display());
    Ok(())
}

fn write_train_logs(run_dir: &Path, report: &TrainReport) -> Result<(PathBuf, PathBuf)> {
    let mut step_csv = String::from("step,total\n");
    for (s, loss) in report.step_losses.iter().enumerate() {
        writeln!(step_csv, "{s},{loss}").expect("string write");
    }
    let step_path = run_dir.join("loss_log.csv");
    std::fs::write(&step_path, step_csv)?;

    let mut epoch_csv = String::from("epoch,mean_total,l_v,l_j,l_j_reg,l_v_temp,l_j_proj,last_lr\n");
    for e in &report.epochs {
        let b = &e.mean_breakdown;
        writeln!(
            epoch_csv,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.mean_total, b.l_v, b.l_j, b.l_j_reg, b.l_v_temp, b.l_j_proj, e.last_lr
        )
        .expect("string write");
    }
    let epoch_path = run_dir.join("epoch_log.csv");
    std::fs::write(&epoch_path, epoch_csv)?;
    Ok((step_path, epoch_path))
}

fn finish_training_run(
    command: &str,
    cfg: &TrainConfig,
    cfg_path: Option<&PathBuf>,
    data: &Path,
    run_dir: &Path,
    model: &Model,
    dataset: &SynthDataset,
    report: &TrainReport,
) -> Result<EvalStats> {
    let (step_path, epoch_path) = write_train_logs(run_dir, report)?;
    let stats = evaluate(model, dataset)?;
    let metrics_path = run_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &[("train", stats)])?;

    let mut m = RunManifest::new(command);
    m.set_config(cfg)?;
    if let Some(p) = cfg_path {
        m.add_input(p)?;
    }
    m.add_input(&data.join(synth::RECORDS_FILE))?;
    m.add_output(&step_path)?;
    m.add_output(&epoch_path)?;
    m.add_output(&metrics_path)?;
    for ckpt in &report.checkpoints {
        m.add_output(ckpt)?;
    }
    m.write(run_dir)?;

    if let (Some(first), Some(last)) = (report.step_losses.first(), report.step_losses.last()) {
        println!(
            "{command}: {} steps, loss {first:.6} -> {last:.6}",
            report.step_losses.len()
        );
    } else {
        println!("{command}: 0 steps");
    }
    println!(
        "train split: mpve {:.6}  mpjpe {:.6}  pa-mpjpe {:.6}",
        stats.mpve, stats.mpjpe, stats.pa_mpjpe
    );
    Ok(stats)
}

fn train_cmd(cfg_args: &ConfigArgs, out: &OutArgs, data: &Path) -> Result<()> {
    let cfg = load_config(cfg_args)?;
    let dataset = load_data(data)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "train")?;
    let mut model = Model::new(cfg.model.clone(), cfg.optim.seed)?;
    let ckpt_dir = run_dir.join("checkpoints");
    let report = train(&mut model, &dataset, &cfg, Some(&ckpt_dir))?;
    finish_training_run(
        "train",
        &cfg,
        cfg_args.config.as_ref(),
        data,
        &run_dir,
        &model,
        &dataset,
        &report,
    )?;
    Ok(())
}

fn eval_cmd(out: &OutArgs, checkpoint: &Path, data: &Path) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    let (model, _adam, _meta) = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    let stats = evaluate(&model, &dataset)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "eval")?;
    let metrics_path = run_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &[("eval", stats)])?;

    let mut m = RunManifest::new("eval");
    m.add_input(checkpoint)?;
    m.add_input(&data.join(synth::RECORDS_FILE))?;
    m.add_output(&metrics_path)?;
    m.write(&run_dir)?;
    println!(
        "eval: mpve {:.6}  mpjpe {:.6}  pa-mpjpe {:.6}",
        stats.mpve, stats.mpjpe, stats.pa_mpjpe
    );
    Ok(())
}

/// Continue from a checkpoint. The schedule restarts over the new step
/// budget; optimizer moments start fresh.
fn finetune_cmd(cfg_args: &ConfigArgs, out: &OutArgs, checkpoint: &Path, data: &Path) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    let (mut model, _adam, meta) = load_checkpoint(checkpoint)?;
    let base = match &cfg_args.config {
        Some(path) => TrainConfig::from_json(&read_required(path, "config file")?)?,
        None => meta.config.clone(),
    };
    let cfg = apply_overrides(base, &cfg_args.set)?;
    if cfg.model != meta.config.model {
        return Err(Error::config(
            "finetune cannot change the model section; train from scratch instead",
        ));
    }
    let dataset = load_data(data)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "finetune")?;
    let ckpt_dir = run_dir.join("checkpoints");
    let report = train(&mut model, &dataset, &cfg, Some(&ckpt_dir))?;
    finish_training_run(
        "finetune",
        &cfg,
        cfg_args.config.as_ref(),
        data,
        &run_dir,
        &model,
        &dataset,
        &report,
    )?;
    Ok(())
}

fn infer_cmd(out: &OutArgs, checkpoint: &Path, data: &Path, index: usize) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    let (model, _adam, _meta) = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    let record = dataset.records.get(index).ok_or_else(|| {
        Error::missing(format!(
            "record index {index} (dataset has {})",
            dataset.records.len()
        ))
    })?;
    let output = model.forward_eval(&record.image)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "infer")?;

    let fine_path = run_dir.join("prediction-fine.obj");
    export_obj(
        &fine_path,
        &output.prediction.fine_vertices,
        &model.topology.fine_faces,
    )?;
    let coarse_path = run_dir.join("prediction-coarse.obj");
    export_obj(
        &coarse_path,
        &output.prediction.coarse_vertices,
        &model.topology.coarse_faces,
    )?;
    let template_path = run_dir.join("template-coarse.obj");
    export_obj(
        &template_path,
        &output.template.template_coarse,
        &model.topology.coarse_faces,
    )?;

    let schema = &model.topology.joint_schema;
    let summary = serde_json::json!({
        "index": index,
        "camera": output.camera.to_vec(),
        "mpjpe": mpjpe(&output.prediction.joints3d, &record.gt.joints3d, schema)?,
        "pa_mpjpe": pa_mpjpe(&output.prediction.joints3d, &record.gt.joints3d)?,
        "mpve": mpve(&output.prediction.fine_vertices, &record.gt.fine_vertices, &model.topology, schema)?,
    });
    let summary_path = run_dir.join("infer.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    let mut m = RunManifest::new("infer");
    m.add_input(checkpoint)?;
    m.add_input(&data.join(synth::RECORDS_FILE))?;
    for p in [&fine_path, &coarse_path, &template_path, &summary_path] {
        m.add_output(p)?;
    }
    m.write(&run_dir)?;
    println!("{}", summary_path.display());
    Ok(())
}

fn export_obj_cmd(cfg_args: &ConfigArgs, out: &OutArgs) -> Result<()> {
    let cfg = load_config(cfg_args)?;
    let body = build_default_body(cfg.model.preset);
    let topo = build_topology(&body, cfg.model.coarse_count)?;
    let coarse = downsample(&body.template_vertices, &topo)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "export-obj")?;

    let fine_path = run_dir.join("rest-fine.obj");
    export_obj(&fine_path, &body.template_vertices, &topo.fine_faces)?;
    let coarse_path = run_dir.join("rest-coarse.obj");
    export_obj(&coarse_path, &coarse, &topo.coarse_faces)?;

    let mut m = RunManifest::new("export-obj");
    m.set_config(&cfg)?;
    if let Some(p) = &cfg_args.config {
        m.add_input(p)?;
    }
    m.add_output(&fine_path)?;
    m.add_output(&coarse_path)?;
    m.write(&run_dir)?;
    println!("{}", run_dir.display());
    Ok(())
}

fn snapshot_template_cmd(out: &OutArgs, checkpoint: &Path, data: &Path, ids: &str) -> Result<()> {
    require_file(checkpoint, "checkpoint")?;
    let (model, _adam, meta) = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    let mut indices = Vec::new();
    for part in ids.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let idx: usize = part
            .parse()
            .map_err(|_| Error::config(format!("bad sample id {part:?}")))?;
        if idx >= dataset.records.len() {
            return Err(Error::missing(format!(
                "record index {idx} (dataset has {})",
                dataset.records.len()
            )));
        }
        indices.push(idx);
    }
    if indices.is_empty() {
        return Err(Error::config("no sample ids given"));
    }

    let run_dir = make_run_dir(&resolve_out(&out.out), "snapshot-template")?;
    let step = meta.global_step;
    let mut m = RunManifest::new("snapshot-template");
    m.add_input(checkpoint)?;
    m.add_input(&data.join(synth::RECORDS_FILE))?;
    for idx in indices {
        let output = model.forward_eval(&dataset.records[idx].image)?;
        let template_path = run_dir.join(format!("sample{idx:03}-step{step:06}-template.obj"));
        export_obj(
            &template_path,
            &output.template.template_coarse,
            &model.topology.coarse_faces,
        )?;
        let pred_path = run_dir.join(format!("sample{idx:03}-step{step:06}-predicted.obj"));
        export_obj(
            &pred_path,
            &output.prediction.coarse_vertices,
            &model.topology.coarse_faces,
        )?;
        m.add_output(&template_path)?;
        m.add_output(&pred_path)?;
    }
    m.write(&run_dir)?;
    println!("{}", run_dir.display());
    Ok(())
}

fn plot_cmd(out: &OutArgs, input: &Path, column: &str) -> Result<()> {
    let csv_text = read_required(input, "CSV log")?;
    let svg = crate::plot::svg_line_plot(&csv_text, column)?;
    let run_dir = make_run_dir(&resolve_out(&out.out), "plot")?;
    let svg_path = run_dir.join("plot.svg");
    std::fs::write(&svg_path, svg)?;

    let mut m = RunManifest::new("plot");
    m.add_input(input)?;
    m.add_output(&svg_path)?;
    m.write(&run_dir)?;
    println!("{}", svg_path.display());
    Ok(())
}

fn sweep_cmd(cfg_args: &ConfigArgs, out: &OutArgs, data: &Path, values: &str) -> Result<()> {
    let cfg = load_config(cfg_args)?;
    let dataset = load_data(data)?;
    let mut weights = Vec::new();
    for part in values.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let v: f64 = part
            .parse()
            .map_err(|_| Error::config(format!("bad weight {part:?}")))?;
        weights.push((part.to_string(), v));
    }
    if weights.is_empty() {
        return Err(Error::config("no sweep values given"));
    }

    let run_dir = make_run_dir(&resolve_out(&out.out), "sweep-alpha-temp")?;
    let mut csv = String::from("alpha_temp,final_total,mpve,mpjpe,pa_mpjpe\n");
    for (raw, _v) in &weights {
        let run_cfg = cfg.with_override("loss.alpha_temp", raw)?;
        let mut model = Model::new(run_cfg.model.clone(), run_cfg.optim.seed)?;
        let report = train(&mut model, &dataset, &run_cfg, None)?;
        let stats = evaluate(&model, &dataset)?;
        let final_total = report.step_losses.last().copied().unwrap_or(f64::NAN);
        writeln!(
            csv,
            "{raw},{final_total},{},{},{}",
            stats.mpve, stats.mpjpe, stats.pa_mpjpe
        )
        .expect("string write");
        println!(
            "alpha_temp {raw}: final loss {final_total:.6}, pa-mpjpe {:.6}",
            stats.pa_mpjpe
        );
    }
    let csv_path = run_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;

    let mut m = RunManifest::new("sweep-alpha-temp");
    m.set_config(&cfg)?;
    if let Some(p) = &cfg_args.config {
        m.add_input(p)?;
    }
    m.add_input(&data.join(synth::RECORDS_FILE))?;
    m.add_output(&csv_path)?;
    m.write(&run_dir)?;
    println!("{}", csv_path.display());
    Ok(())
}
