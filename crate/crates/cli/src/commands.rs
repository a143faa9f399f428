use std::path::PathBuf;

use balgrad_core::config::ExperimentSpec;
use balgrad_core::datagen::{encode_dataset, generate as generate_dataset};
use balgrad_core::experiment::{
    ablation_cell, ablation_to_csv, prepare_data, propositions_to_csv, run_mode_into,
    verify_propositions, AblationRow,
};
use balgrad_core::harness::{
    cosine_histogram, histogram_to_csv, log_to_csv, metrics_to_csv, missing_ratio_sweep,
    train as train_params, TrainLog, SWEEP_CSV_HEADER,
};
use balgrad_core::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::output::OutDir;
use crate::{Common, Failure};

fn load(c: &Common) -> Result<ExperimentSpec> {
    let spec = ExperimentSpec::load(&c.config)?;
    Ok(match c.seed {
        Some(seed) => spec.with_seed(seed),
        None => spec,
    })
}

fn out_dir(c: &Common, spec: &ExperimentSpec) -> Result<OutDir> {
    let dir = c
        .out
        .clone()
        .or_else(|| spec.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    OutDir::create(dir)
}

fn pool(c: &Common) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = c.threads {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

pub fn generate(c: &Common) -> std::result::Result<(), Failure> {
    let spec = load(c)?;
    let out = out_dir(c, &spec)?;
    let data = generate_dataset(&spec.synth_config())?;
    let path = out.write("dataset.bmf", encode_dataset(&data)?)?;
    println!("wrote {}", path.display());
    println!("n = {}", data.len());
    println!("d_v = {}, d_l = {}", data.d_v, data.d_l);
    let counts: Vec<String> = data.class_counts().iter().map(usize::to_string).collect();
    println!("class counts = [{}]", counts.join(", "));
    Ok(())
}

pub fn train(c: &Common) -> std::result::Result<(), Failure> {
    let spec = load(c)?;
    let out = out_dir(c, &spec)?;
    let data = prepare_data(&spec)?;
    let mode = spec.balgrad.mode.clone();
    let mut log = TrainLog::default();
    let result = run_mode_into(&spec, &data, &mode, &mut log);
    out.write("train_log.csv", log_to_csv(&log))?;
    let (params, metrics) = result?;

    out.write("params.json", to_json(&params)?)?;
    out.write("metrics.csv", metrics_to_csv(&metrics))?;
    let histogram = cosine_histogram(&log, spec.eval.histogram_bins).ok();
    if let Some(h) = &histogram {
        out.write("cosine_histogram.csv", histogram_to_csv(h))?;
    }
    let last = log.rows.last().copied().unwrap_or_default();
    let summary = json!({
        "name": spec.name,
        "mode": mode,
        "steps": log.rows.len(),
        "train_size": data.0.len(),
        "test_size": data.1.len(),
        "final_losses": {
            "target": last.target,
            "target_v": last.target_v,
            "target_l": last.target_l,
            "kl_v": last.kl_v,
            "kl_l": last.kl_l,
        },
        "metrics": metrics,
        "cosine_mean": histogram.as_ref().map(|h| h.mean),
    });
    out.write("summary.json", to_json(&summary)?)?;
    println!(
        "{mode}: acc_full {:.4}, gap_missing {:.2}, gap_noisy {:.2}",
        metrics.acc_full, metrics.gap_missing, metrics.gap_noisy
    );
    Ok(())
}

pub fn verify_props(c: &Common) -> std::result::Result<(), Failure> {
    let spec = load(c)?;
    let out = out_dir(c, &spec)?;
    let rows = pool(c)?.install(|| verify_propositions(&spec))?;
    out.write("propositions.csv", propositions_to_csv(&rows))?;
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| match (r.prop1, r.prop2) {
            (Some(_), Some(_)) => format!(
                "state {} lambda {}: residual ratios {:?} / {:?} outside band",
                r.state, r.lambda, r.prop1_ratio, r.prop2_ratio
            ),
            _ => format!(
                "state {} lambda {}: step size outside the first-order regime",
                r.state, r.lambda
            ),
        })
        .collect();
    println!("{} rows, {} failed", rows.len(), failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join("\n")))
    }
}

pub fn ablate(c: &Common) -> std::result::Result<(), Failure> {
    let spec = load(c)?;
    let out = out_dir(c, &spec)?;
    let cells: Vec<(u64, &str)> = spec
        .ablate
        .seeds
        .iter()
        .flat_map(|&s| spec.ablate.modes.iter().map(move |m| (s, m.as_str())))
        .collect();
    let rows: Vec<AblationRow> = pool(c)?.install(|| {
        cells
            .par_iter()
            .map(|&(seed, mode)| ablation_cell(&spec, seed, mode))
            .collect::<Result<_>>()
    })?;
    out.write("ablation.csv", ablation_to_csv(&rows))?;
    for r in &rows {
        println!(
            "seed {} {:<14} gap_missing {:6.2} conflict {}",
            r.seed,
            r.mode,
            r.metrics.gap_missing,
            r.metrics
                .conflict_fraction
                .map(|f| format!("{f:.4}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    Ok(())
}

pub fn sweep_missing_ratio(c: &Common) -> std::result::Result<(), Failure> {
    let spec = load(c)?;
    let out = out_dir(c, &spec)?;
    let seeds = spec.ablate.seeds.clone();
    let tables: Vec<String> = pool(c)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let spec = spec.with_seed(seed);
                let (train, test) = prepare_data(&spec)?;
                let trained = spec
                    .ablate
                    .modes
                    .iter()
                    .map(|m| {
                        let cfg = spec.train_config(
                            m,
                            train.d_v as usize,
                            train.d_l as usize,
                            train.classes as usize,
                        );
                        Ok((m.clone(), train_params(&train, &cfg)?.0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let rows =
                    missing_ratio_sweep(&trained, &test, &spec.eval.missing_ratios, spec.eval.seed)?;
                let body = balgrad_core::harness::sweep_to_csv(&rows);
                Ok(body
                    .lines()
                    .skip(1)
                    .map(|l| format!("{seed},{l}\n"))
                    .collect::<String>())
            })
            .collect::<Result<_>>()
    })?;
    let mut csv = format!("seed,{SWEEP_CSV_HEADER}\n");
    csv.extend(tables);
    out.write("missing_ratio_sweep.csv", csv)?;
    println!("{} seeds x {} modes", seeds.len(), spec.ablate.modes.len());
    Ok(())
}

fn to_json(value: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Error::InvalidInput(format!("json: {e}")))
}
