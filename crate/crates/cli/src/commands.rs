use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::json;
use temprox::analysis::{interval_distribution, overlap_report, write_interval_csv, write_overlap_csv};
use temprox::data::{load_interactions, preprocess as preprocess_log, synth_generate, write_interactions, Dataset};
use temprox::evaluation::evaluate as evaluate_model;
use temprox::model::{load_checkpoint, save_checkpoint};
use temprox::training::{self, write_sweep_csv, Ablation, TrainConfig};
use temprox::Model;

use crate::config::RunConfig;
use crate::Overrides;

/// Config file (if any), then flags, then seed propagation and validation.
fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if o.seed.is_some() {
        cfg.seed = o.seed;
    }
    if let Some(p) = &o.out {
        cfg.out = Some(p.clone());
    }
    if let Some(p) = &o.input {
        cfg.data.input = Some(p.clone());
    }
    if let Some(p) = &o.data {
        cfg.data.dataset = Some(p.clone());
    }
    if let Some(p) = &o.checkpoint {
        cfg.data.checkpoint = Some(p.clone());
    }
    if let Some(d) = o.delta {
        cfg.train.delta = d;
        cfg.overlap.delta = d;
    }
    if let Some(v) = o.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = o.tau {
        cfg.train.tau = v;
    }
    if let Some(v) = o.kt {
        cfg.model.kt = v;
    }
    if let Some(v) = o.rho {
        cfg.train.rho = v;
    }
    if let Some(v) = o.ablation {
        cfg.train.ablation = v;
    }
    if let Some(v) = o.split {
        cfg.eval.split = v;
    }
    if let Some(v) = o.k {
        cfg.eval.k = v;
    }
    if let Some(v) = o.num_neg {
        cfg.eval.num_neg = v;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.top_u {
        cfg.overlap.top_u = v;
    }
    cfg.resolve_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn is_json(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Dataset JSON as is; a raw CSV goes through `[preprocess]` first.
fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .data
        .dataset
        .as_ref()
        .or(cfg.data.input.as_ref())
        .ok_or_else(|| anyhow!("no dataset given (use --data or --in)"))?;
    if is_json(path) {
        Dataset::load_json(path).with_context(|| format!("loading {}", path.display()))
    } else {
        let log = load_interactions(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(preprocess_log(&log, &cfg.preprocess)?)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let out = cfg.out.clone().ok_or_else(|| anyhow!("synth needs --out <file.csv>"))?;
    let log = synth_generate(&cfg.synth)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    write_interactions(&out, &log)?;
    cfg.snapshot(dir, "synth")?;
    log::info!("wrote {} interactions to {}", log.len(), out.display());
    Ok(())
}

pub fn preprocess(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let input = cfg
        .data
        .input
        .clone()
        .or(cfg.data.dataset.clone())
        .ok_or_else(|| anyhow!("preprocess needs --in <log.csv>"))?;
    let dir = match &cfg.out {
        Some(d) => d.clone(),
        None => input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let log = load_interactions(&input).with_context(|| format!("reading {}", input.display()))?;
    let ds = preprocess_log(&log, &cfg.preprocess)?;
    fs::create_dir_all(&dir)?;
    ds.save_json(&dir.join("dataset.json"))?;
    let stats = ds.stats();
    write_json(&dir.join("stats.json"), &stats)?;
    cfg.snapshot(&dir, "preprocess")?;
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn fit(ds: &Dataset, cfg: &RunConfig, train_cfg: &TrainConfig, dir: &Path) -> Result<training::TrainOutcome<f64>> {
    fs::create_dir_all(dir)?;
    let mut log = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
    let outcome = training::train::<f64>(ds, &cfg.model, train_cfg, Some(&mut log))?;
    log.flush()?;
    let extra = json!({
        "train": train_cfg,
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
    });
    save_checkpoint(&outcome.model, &dir.join("checkpoint"), extra)?;
    Ok(outcome)
}

pub fn train(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let dir = out_dir(&cfg, "runs/train");
    let ds = load_dataset(&cfg)?;
    let outcome = fit(&ds, &cfg, &cfg.train, &dir)?;
    let report = evaluate_model(&outcome.model, &ds, &cfg.eval)?;
    write_json(&dir.join("report.json"), &report)?;
    cfg.snapshot(&dir, "train")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

pub fn evaluate(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let ck = cfg
        .data
        .checkpoint
        .clone()
        .ok_or_else(|| anyhow!("evaluate needs --checkpoint <dir>"))?;
    let (model, _): (Model, _) = load_checkpoint(&ck).with_context(|| format!("loading checkpoint {}", ck.display()))?;
    let ds = load_dataset(&cfg)?;
    let report = evaluate_model(&model, &ds, &cfg.eval)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &cfg.out {
        fs::create_dir_all(dir)?;
        let split = serde_json::to_value(cfg.eval.split)?;
        write_json(&dir.join(format!("eval_{}.json", split.as_str().unwrap_or("report"))), &report)?;
        cfg.snapshot(dir, "evaluate")?;
    }
    println!("{text}");
    Ok(())
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn ablate(o: &Overrides, seeds: u64) -> Result<()> {
    if seeds == 0 {
        bail!("--seeds must be >= 1");
    }
    let cfg = resolve(o)?;
    let dir = out_dir(&cfg, "runs/ablate");
    let ds = load_dataset(&cfg)?;
    let variants: Vec<Ablation> = match o.ablation {
        Some(a) => vec![a],
        None => Ablation::ALL.to_vec(),
    };
    fs::create_dir_all(&dir)?;
    let mut csv = String::from("ablation,seed,test_hr,test_ndcg,best_epoch\n");
    let mut summary = serde_json::Map::new();
    for ablation in variants {
        let (mut hrs, mut ndcgs) = (Vec::new(), Vec::new());
        for s in 0..seeds {
            let seed = cfg.train.seed + s;
            let t = TrainConfig { ablation, seed, ..cfg.train.clone() };
            let run_dir = dir.join(format!("{ablation}_seed{seed}"));
            let outcome = fit(&ds, &cfg, &t, &run_dir)?;
            let report = evaluate_model(&outcome.model, &ds, &cfg.eval)?;
            csv.push_str(&format!("{ablation},{seed},{},{},{}\n", report.hr_at_k, report.ndcg_at_k, outcome.best_epoch));
            hrs.push(report.hr_at_k);
            ndcgs.push(report.ndcg_at_k);
        }
        let (hr, hr_se) = mean_se(&hrs);
        let (ndcg, ndcg_se) = mean_se(&ndcgs);
        log::info!("{ablation}: HR@{k} {hr:.4} ± {hr_se:.4}, NDCG@{k} {ndcg:.4} ± {ndcg_se:.4}", k = cfg.eval.k);
        summary.insert(
            ablation.to_string(),
            json!({"hr": hr, "hr_se": hr_se, "ndcg": ndcg, "ndcg_se": ndcg_se, "seeds": seeds}),
        );
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    write_json(&dir.join("ablation_summary.json"), &summary)?;
    cfg.snapshot(&dir, "ablate")?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn intervals(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let dir = out_dir(&cfg, "runs/analysis");
    let ds = load_dataset(&cfg)?;
    let hist = interval_distribution(&ds);
    fs::create_dir_all(&dir)?;
    write_interval_csv(&dir.join("intervals.csv"), &hist)?;
    let summary = json!({
        "total_intervals": hist.total(),
        "zero_intervals": hist.zero_count,
        "distinct_nonzero": hist.counts.len(),
        "num_users": ds.num_users(),
    });
    write_json(&dir.join("intervals_summary.json"), &summary)?;
    cfg.snapshot(&dir, "analyze_intervals")?;
    println!("{summary}");
    Ok(())
}

pub fn overlap(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let dir = out_dir(&cfg, "runs/analysis");
    let ds = load_dataset(&cfg)?;
    let report = overlap_report(&ds, &cfg.overlap)?;
    fs::create_dir_all(&dir)?;
    write_overlap_csv(&dir.join("overlap.csv"), &report)?;
    let summary = json!({
        "delta": report.delta,
        "top_u": report.top_u,
        "users_averaged": report.users.len(),
        "average_overlap": report.average,
    });
    write_json(&dir.join("overlap_summary.json"), &summary)?;
    cfg.snapshot(&dir, "analyze_overlap")?;
    println!("{summary}");
    Ok(())
}

pub fn sweep(o: &Overrides) -> Result<()> {
    let cfg = resolve(o)?;
    let dir = out_dir(&cfg, "runs/sweep");
    let ds = load_dataset(&cfg)?;
    let rows = training::sweep::<f64>(&ds, &cfg.model, &cfg.train, &cfg.sweep, &cfg.eval)?;
    fs::create_dir_all(&dir)?;
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    cfg.snapshot(&dir, "sweep")?;
    let best = rows
        .iter()
        .max_by(|a, b| a.val_hr.total_cmp(&b.val_hr))
        .ok_or_else(|| anyhow!("empty grid"))?;
    println!("{}", serde_json::to_string(best)?);
    Ok(())
}
