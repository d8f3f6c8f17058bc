use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde_json::{json, Value};

use super::config::FileConfig;
use super::{AcquisitionArg, Cli, CliError, Command, DirectionArgs, TrainMode};
use crate::active::{al_run, log_csv, Acquisition};
use crate::data::{compose_regime, Compound, HitDirection, TaskDataset};
use crate::featurize::FeaturizedGraph;
use crate::io::{dataset_rows, ingest_csv, read_library, write_dataset_csv, Checkpoint, IngestOptions, LibraryEntry};
use crate::metrics::{
    concordance_index, export_embeddings, mse, pearson, predicted_hit_count, recall_at, report, top_indices,
};
use crate::synth::{synth_gen, SynthConfig};
use crate::train::{predict_graphs, train, TrainLog};
use crate::transfer::transfer_train_with;

const PREDICT_BATCH: usize = 256;

pub(super) fn dispatch(cli: Cli) -> Result<Value, CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest {
            input,
            out,
            errors,
            directions,
        } => ingest(&input, out.as_deref(), errors.as_deref(), &directions),
        Command::Train {
            data,
            mode,
            new_target,
            new_size,
            aux_size,
            aux_tasks,
            out,
            log,
            directions,
            train: args,
        } => {
            let config = args.apply(file.train);
            config.validate()?;
            let ds = load_dataset(&data, &directions)?;
            let new = ds.task_index(&new_target)?;
            let aux: Vec<usize> = match mode {
                TrainMode::Single => {
                    if aux_size.is_some() || !aux_tasks.is_empty() {
                        return Err(CliError::Config("--aux-size and --aux-tasks need --mode mtl".into()));
                    }
                    Vec::new()
                }
                TrainMode::Mtl if aux_tasks.is_empty() => (0..ds.num_tasks()).filter(|&t| t != new).collect(),
                TrainMode::Mtl => aux_tasks
                    .iter()
                    .map(|n| ds.task_index(n))
                    .collect::<Result<_, _>>()?,
            };
            let regime = compose_regime(&ds, new, new_size, &aux, aux_size, config.seed)?;
            let outcome = train(&regime, &config)?;
            let ckpt = Checkpoint::new(
                vec![outcome.params],
                regime.task_names().to_vec(),
                regime.directions().to_vec(),
                config.seed,
                &[&outcome.log],
            )?;
            ckpt.write(create(&out)?)?;
            if let Some(path) = log {
                write_epoch_log(&path, &outcome.log)?;
            }
            Ok(json!({
                "command": "train",
                "seed": config.seed,
                "mode": if mode == TrainMode::Mtl { "mtl" } else { "single" },
                "tasks": regime.task_names(),
                "labels_per_task": (0..regime.num_tasks()).map(|t| regime.labeled_count(t)).collect::<Vec<_>>(),
                "compounds": regime.len(),
                "epochs": outcome.log.epochs.len(),
                "best_epoch": outcome.log.best_epoch,
                "best_val_loss": outcome.log.best_val_loss,
                "stop_reason": outcome.log.stop_reason,
                "out": out,
            }))
        }
        Command::ActiveLearn {
            pool,
            target,
            budget,
            rounds,
            init_fraction,
            ensemble_size,
            acquisition,
            beta,
            out,
            log,
            labeled_out,
            directions,
            train: args,
        } => {
            let config = args.apply(file.train);
            config.validate()?;
            let mut al = file.active_learning;
            al.seed = config.seed;
            if let Some(b) = budget {
                al.total_budget = b;
            }
            if let Some(r) = rounds {
                al.n_rounds = r;
            }
            if let Some(f) = init_fraction {
                al.init_fraction = f;
            }
            if let Some(e) = ensemble_size {
                al.ensemble_size = e;
            }
            match acquisition {
                Some(AcquisitionArg::Greedy) => al.acquisition = Acquisition::GreedyMean,
                Some(AcquisitionArg::Ucb) => al.acquisition = Acquisition::Ucb { beta },
                None => {}
            }
            let ds = load_dataset(&pool, &directions)?;
            let t = ds.task_index(&target)?;
            let pool_ds = ds.select_tasks(&[t])?;
            let direction = pool_ds.directions()[0];
            let mut oracle = |i: usize, _: &Compound| pool_ds.label(i, 0).ok_or_else(|| "no label".to_string());
            let outcome = al_run(pool_ds.compounds(), &mut oracle, direction, &al, &config)?;
            let ckpt = Checkpoint::new(outcome.ensemble, vec![target.clone()], vec![direction], config.seed, &[])?;
            ckpt.write(create(&out)?)?;
            if let Some(path) = log {
                write_text(&path, &log_csv(&outcome.log))?;
            }
            if let Some(path) = labeled_out {
                let rows = outcome
                    .labeled
                    .iter()
                    .map(|&(i, y)| (pool_ds.compound(i).smiles.clone(), vec![Some(y)]));
                write_dataset_csv(create(&path)?, std::slice::from_ref(&target), rows)?;
            }
            let labels: Vec<f64> = outcome.labeled.iter().map(|p| p.1).collect();
            Ok(json!({
                "command": "active-learn",
                "seed": config.seed,
                "budget": al.total_budget,
                "rounds": al.n_rounds,
                "ensemble_size": al.ensemble_size,
                "labeled": labels.len(),
                "mean_acquired_label": labels.iter().sum::<f64>() / labels.len() as f64,
                "log": outcome.log,
                "out": out,
            }))
        }
        Command::Transfer {
            pretrained,
            data,
            target,
            new_size,
            warmup,
            out,
            log,
            directions,
            train: args,
        } => {
            let pre = load_checkpoint(&pretrained)?;
            let mut base = file.train;
            base.dim = pre.header.dim;
            base.layers = pre.header.layers;
            let config = args.apply(base);
            config.validate()?;
            let ds = load_dataset(&data, &directions)?;
            let t = ds.task_index(&target)?;
            let new_ds = compose_regime(&ds, t, new_size, &[], None, config.seed)?;
            let outcome = transfer_train_with(&pre.members[0], &new_ds, &config, warmup, None)?;
            let ckpt = Checkpoint::new(
                vec![outcome.params],
                new_ds.task_names().to_vec(),
                new_ds.directions().to_vec(),
                config.seed,
                &[&outcome.log],
            )?;
            ckpt.write(create(&out)?)?;
            if let Some(path) = log {
                write_epoch_log(&path, &outcome.log)?;
            }
            Ok(json!({
                "command": "transfer",
                "seed": config.seed,
                "warmup_epochs": warmup,
                "labels": new_ds.labeled_count(0),
                "epochs": outcome.log.epochs.len(),
                "best_epoch": outcome.log.best_epoch,
                "best_val_loss": outcome.log.best_val_loss,
                "out": out,
            }))
        }
        Command::Predict { model, input, out } => {
            let ckpt = load_checkpoint(&model)?;
            let lib = load_library(&input)?;
            let (graphs, ok_rows) = parsed_graphs(&lib);
            let tasks: Vec<usize> = (0..ckpt.header.task_names.len()).collect();
            let preds = ckpt.predict(&graphs, &tasks, PREDICT_BATCH)?;
            let mut w = csv::Writer::from_writer(create(&out)?);
            let mut header = vec!["smiles".to_string()];
            header.extend(ckpt.header.task_names.iter().cloned());
            header.push("error".into());
            write_csv_record(&mut w, &header)?;
            let mut next = 0;
            for (row, entry) in lib.iter().enumerate() {
                let mut rec = vec![entry.smiles.clone()];
                if next < ok_rows.len() && ok_rows[next] == row {
                    rec.extend(preds.row_slice(next).iter().map(|v| v.to_string()));
                    rec.push(String::new());
                    next += 1;
                } else {
                    rec.extend(tasks.iter().map(|_| String::new()));
                    rec.push(entry.graph.as_ref().err().cloned().unwrap_or_default());
                }
                write_csv_record(&mut w, &rec)?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            Ok(json!({
                "command": "predict",
                "seed": ckpt.header.seed,
                "rows": lib.len(),
                "predicted": ok_rows.len(),
                "failed": lib.len() - ok_rows.len(),
                "out": out,
            }))
        }
        Command::Screen {
            model,
            input,
            task,
            top_frac,
            all,
            out,
        } => {
            if !(top_frac > 0.0 && top_frac < 1.0) {
                return Err(CliError::Config(format!("--top-frac {top_frac} must lie strictly between 0 and 1")));
            }
            let ckpt = load_checkpoint(&model)?;
            let t = match &task {
                Some(name) => ckpt
                    .task_index(name)
                    .ok_or_else(|| CliError::Config(format!("checkpoint has no task {name:?}")))?,
                None => 0,
            };
            let direction = ckpt.header.hit_directions[t];
            let lib = load_library(&input)?;
            let (graphs, ok_rows) = parsed_graphs(&lib);
            if graphs.is_empty() {
                return Err(CliError::Data("no parseable compounds in the library".into()));
            }
            let scores = ckpt.predict(&graphs, &[t], PREDICT_BATCH)?.into_data();
            let ranking = top_indices(&scores, direction, scores.len());
            let hits = predicted_hit_count(top_frac, scores.len());
            let emit = if all { ranking.len() } else { hits };
            let mut w = csv::Writer::from_writer(create(&out)?);
            write_csv_record(&mut w, &["smiles", "predicted_score", "rank", "is_predicted_hit"])?;
            for (rank, &k) in ranking.iter().take(emit).enumerate() {
                write_csv_record(
                    &mut w,
                    &[
                        lib[ok_rows[k]].smiles.clone(),
                        scores[k].to_string(),
                        (rank + 1).to_string(),
                        (rank < hits).to_string(),
                    ],
                )?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            Ok(json!({
                "command": "screen",
                "seed": ckpt.header.seed,
                "task": ckpt.header.task_names[t],
                "scored": scores.len(),
                "skipped": lib.len() - scores.len(),
                "predicted_hits": hits,
                "out": out,
            }))
        }
        Command::Eval {
            model,
            data,
            k,
            top_frac,
            out,
            directions,
        } => {
            let ckpt = load_checkpoint(&model)?;
            let ds = load_dataset(&data, &directions)?;
            let mut rows = Vec::new();
            for (t, name) in ckpt.header.task_names.iter().enumerate() {
                let Ok(dt) = ds.task_index(name) else { continue };
                let labelled = ds.task_labels(dt);
                if labelled.is_empty() {
                    continue;
                }
                let graphs: Vec<&FeaturizedGraph> = labelled.iter().map(|&(i, _)| &ds.compound(i).graph).collect();
                let y: Vec<f64> = labelled.iter().map(|p| p.1).collect();
                let y_hat = ckpt.predict(&graphs, &[t], PREDICT_BATCH)?.into_data();
                rows.extend(report(name, &y, &y_hat, ckpt.header.hit_directions[t], &k, &top_frac)?);
            }
            if rows.is_empty() {
                return Err(CliError::Data("test data shares no labelled task with the checkpoint".into()));
            }
            if let Some(path) = &out {
                let mut w = csv::Writer::from_writer(create(path)?);
                write_csv_record(&mut w, &["metric", "task", "value", "k", "p"])?;
                for r in &rows {
                    write_csv_record(
                        &mut w,
                        &[
                            r.metric.clone(),
                            r.task.clone(),
                            r.value.to_string(),
                            r.k.map(|v| v.to_string()).unwrap_or_default(),
                            r.p.map(|v| v.to_string()).unwrap_or_default(),
                        ],
                    )?;
                }
                w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            }
            Ok(json!({
                "command": "eval",
                "seed": ckpt.header.seed,
                "metrics": rows,
            }))
        }
        Command::ExportEmbeddings {
            model,
            input,
            out,
            member,
        } => {
            let ckpt = load_checkpoint(&model)?;
            let params = ckpt
                .members
                .get(member)
                .ok_or_else(|| CliError::Config(format!("checkpoint has {} members", ckpt.members.len())))?;
            let lib = load_library(&input)?;
            let (graphs, ok_rows) = parsed_graphs(&lib);
            let z = export_embeddings(params, &graphs, PREDICT_BATCH)?;
            let mut w = csv::Writer::from_writer(create(&out)?);
            let mut header = vec!["smiles".to_string()];
            header.extend((0..z.cols()).map(|c| format!("z{c}")));
            write_csv_record(&mut w, &header)?;
            for (k, &row) in ok_rows.iter().enumerate() {
                let mut rec = vec![lib[row].smiles.clone()];
                rec.extend(z.row_slice(k).iter().map(|v| v.to_string()));
                write_csv_record(&mut w, &rec)?;
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            Ok(json!({
                "command": "export-embeddings",
                "seed": ckpt.header.seed,
                "rows": ok_rows.len(),
                "dim": z.cols(),
                "skipped": lib.len() - ok_rows.len(),
                "out": out,
            }))
        }
        Command::Sweep {
            data,
            test,
            new_target,
            new_sizes,
            aux_sizes,
            aux_tasks,
            k,
            top_frac,
            out,
            directions,
            train: args,
        } => {
            let config = args.apply(file.train);
            config.validate()?;
            let ds = load_dataset(&data, &directions)?;
            let test_ds = load_dataset(&test, &directions)?;
            let new = ds.task_index(&new_target)?;
            let aux = if aux_tasks.is_empty() {
                (0..ds.num_tasks()).filter(|&t| t != new).collect()
            } else {
                aux_tasks.iter().map(|n| ds.task_index(n)).collect::<Result<Vec<_>, _>>()?
            };
            let labelled = test_ds.task_labels(test_ds.task_index(&new_target)?);
            if labelled.len() < 2 {
                return Err(CliError::Data("the test set needs at least two labels of the new target".into()));
            }
            let graphs: Vec<&FeaturizedGraph> = labelled.iter().map(|&(i, _)| &test_ds.compound(i).graph).collect();
            let y: Vec<f64> = labelled.iter().map(|p| p.1).collect();
            let direction = ds.directions()[new];
            let k = k.unwrap_or_else(|| predicted_hit_count(top_frac, y.len()));

            let mut w = csv::Writer::from_writer(create(&out)?);
            write_csv_record(
                &mut w,
                &["new_size", "aux_size", "epochs", "best_epoch", "mse", "pearson", "concordance_index", "recall"],
            )?;
            let mut cells = Vec::new();
            for &n in &new_sizes {
                for &a in &aux_sizes {
                    let (tasks, size) = if a == 0 { (&[][..], None) } else { (&aux[..], Some(a)) };
                    let regime = compose_regime(&ds, new, Some(n), tasks, size, config.seed)?;
                    let outcome = train(&regime, &config)?;
                    let y_hat = predict_graphs(&outcome.params, &graphs, &[0], PREDICT_BATCH)?.into_data();
                    let row = json!({
                        "new_size": n,
                        "aux_size": a,
                        "epochs": outcome.log.epochs.len(),
                        "best_epoch": outcome.log.best_epoch,
                        "mse": mse(&y, &y_hat)?,
                        "pearson": pearson(&y, &y_hat)?,
                        "concordance_index": concordance_index(&y, &y_hat)?,
                        "recall": recall_at(&y, &y_hat, direction, k, top_frac)?,
                    });
                    let fields = ["new_size", "aux_size", "epochs", "best_epoch", "mse", "pearson", "concordance_index", "recall"];
                    write_csv_record(&mut w, &fields.map(|f| row[f].to_string()))?;
                    cells.push(row);
                }
            }
            w.flush().map_err(|e| CliError::Io(e.to_string()))?;
            Ok(json!({
                "command": "sweep",
                "seed": config.seed,
                "k": k,
                "top_frac": top_frac,
                "cells": cells,
                "out": out,
            }))
        }
        Command::SynthGen {
            tasks,
            compounds,
            seed,
            noise,
            identical,
            out,
            truth,
            test_size,
            test_out,
        } => {
            if test_size > 0 && test_out.is_none() {
                return Err(CliError::Config("--test-size needs --test-out".into()));
            }
            if !(noise >= 0.0 && noise.is_finite()) {
                return Err(CliError::Config("--noise must be non-negative".into()));
            }
            let seed = seed.or(file.seed).unwrap_or(file.train.seed);
            let data = synth_gen(&SynthConfig {
                n_tasks: tasks,
                n_compounds: compounds + test_size,
                seed,
                noise,
                identical_tasks: identical,
            })?;
            let names = data.task_names();
            let rows = |range: std::ops::Range<usize>| {
                range.map(|i| {
                    (
                        data.smiles[i].clone(),
                        data.labels[i].iter().map(|&v| Some(v)).collect::<Vec<_>>(),
                    )
                })
            };
            write_dataset_csv(create(&out)?, &names, rows(0..compounds))?;
            if let Some(path) = &test_out {
                write_dataset_csv(create(path)?, &names, rows(compounds..compounds + test_size))?;
            }
            if let Some(path) = &truth {
                let text = serde_json::to_string_pretty(&data.truth).map_err(|e| CliError::Data(e.to_string()))?;
                write_text(path, &text)?;
            }
            Ok(json!({
                "command": "synth-gen",
                "seed": seed,
                "tasks": names,
                "compounds": compounds,
                "test_compounds": test_size,
                "out": out,
            }))
        }
    }
}

fn ingest(input: &Path, out: Option<&Path>, errors: Option<&Path>, dirs: &DirectionArgs) -> Result<Value, CliError> {
    let report = ingest_csv(open(input)?, &ingest_options(dirs)?)?;
    if let Some(path) = errors {
        let mut w = csv::Writer::from_writer(create(path)?);
        write_csv_record(&mut w, &["line", "smiles", "message"])?;
        for e in &report.rejected {
            write_csv_record(&mut w, &[e.line.to_string(), e.smiles.clone(), e.message.clone()])?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    }
    if let (Some(path), Some(ds)) = (out, &report.dataset) {
        write_dataset_csv(create(path)?, ds.task_names(), dataset_rows(ds))?;
    }
    let (tasks, directions) = match &report.dataset {
        Some(ds) => (ds.task_names().to_vec(), ds.directions().to_vec()),
        None => (Vec::new(), Vec::new()),
    };
    Ok(json!({
        "command": "ingest",
        "rows": report.rows,
        "accepted": report.accepted,
        "rejected": report.rejected.len(),
        "compounds": report.compounds,
        "tasks": tasks,
        "directions": directions,
        "first_errors": report.rejected.iter().take(5).collect::<Vec<_>>(),
    }))
}

fn ingest_options(dirs: &DirectionArgs) -> Result<IngestOptions, CliError> {
    let mut opts = IngestOptions {
        default_direction: dirs.default_direction.parse().map_err(CliError::Config)?,
        ..IngestOptions::default()
    };
    for entry in &dirs.directions {
        let (task, dir) = entry
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--direction {entry:?} is not TASK=DIR")))?;
        let dir: HitDirection = dir.parse().map_err(CliError::Config)?;
        opts.directions.insert(task.to_string(), dir);
    }
    Ok(opts)
}

fn load_dataset(path: &Path, dirs: &DirectionArgs) -> Result<TaskDataset, CliError> {
    let report = ingest_csv(open(path)?, &ingest_options(dirs)?)?;
    if !report.rejected.is_empty() {
        let first = &report.rejected[0];
        eprintln!(
            "{}",
            json!({
                "warning": "rejected_rows",
                "file": path,
                "count": report.rejected.len(),
                "first": first,
            })
        );
    }
    report
        .dataset
        .ok_or_else(|| CliError::Data(format!("{} has no usable rows", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Ok(Checkpoint::read_for_inference(open(path)?)?)
}

fn load_library(path: &Path) -> Result<Vec<LibraryEntry>, CliError> {
    Ok(read_library(open(path)?)?)
}

/// Graphs of the parseable entries and their row positions.
fn parsed_graphs(lib: &[LibraryEntry]) -> (Vec<&FeaturizedGraph>, Vec<usize>) {
    lib.iter()
        .enumerate()
        .filter_map(|(i, e)| e.graph.as_ref().ok().map(|g| (g, i)))
        .unzip()
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_csv_record<W: Write, S: AsRef<[u8]>>(w: &mut csv::Writer<W>, rec: &[S]) -> Result<(), CliError> {
    w.write_record(rec).map_err(|e| CliError::Io(e.to_string()))
}

fn write_epoch_log(path: &Path, log: &TrainLog) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    write_csv_record(&mut w, &["epoch", "train_loss", "val_loss", "heads_only"])?;
    for r in &log.epochs {
        write_csv_record(
            &mut w,
            &[
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.heads_only.to_string(),
            ],
        )?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}
