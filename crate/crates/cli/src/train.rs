use std::fs;
use std::path::{Path, PathBuf};

use mmr_core::{
    param_counts, ComputeWidth, Corpus, Float, Model, RunOutputs, Tokenizer, TrainSummary, Trainer,
};

use crate::failure::{usage, CmdResult, Context};
use crate::run_config::RunConfigFile;
use crate::{TrainArgs, OUT_DIR_ENV};

pub fn run(args: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfigFile::load(&args.config)?;
    if let Some(steps) = args.steps {
        cfg.train.steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
        cfg.model.seed = seed;
    }
    let base = args.config.parent().unwrap_or(Path::new(""));
    let out_dir = args
        .out_dir
        .clone()
        .or_else(|| cfg.paths.out_dir.as_ref().map(|p| base.join(p)))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));

    match &args.sweep {
        None => {
            let metrics = cfg.paths.metrics_file.as_ref().map(|p| base.join(p));
            let summary = train_one(&cfg, base, &out_dir, metrics)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(anyhow::Error::from)?);
            Ok(())
        }
        Some(spec) => sweep(&cfg, base, &out_dir, spec),
    }
}

fn train_one(cfg: &RunConfigFile, base: &Path, out_dir: &Path, metrics: Option<PathBuf>) -> CmdResult<TrainSummary> {
    cfg.validate()?;
    let corpus_path = cfg
        .paths
        .corpus
        .as_ref()
        .map(|p| base.join(p))
        .ok_or_else(|| usage("paths.corpus is required for training"))?;
    let text = fs::read(&corpus_path).context(format!("reading corpus {}", corpus_path.display()))?;
    let tokenizer = match &cfg.paths.vocab {
        Some(p) => Tokenizer::from_vocab_file(base.join(p)).context("paths.vocab")?,
        None => Tokenizer::Bytes,
    };
    if tokenizer.vocab_size() > cfg.model.vocab_size {
        return Err(usage(format!(
            "model.vocab_size {} is smaller than the tokenizer's {}",
            cfg.model.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let corpus = Corpus::split(tokenizer.encode(&text)?, cfg.train.val_fraction);
    let outputs = RunOutputs {
        metrics: Some(metrics.unwrap_or_else(|| out_dir.join("metrics.jsonl"))),
        route_stats: Some(out_dir.join("route_stats.jsonl")),
        checkpoint_dir: Some(out_dir.to_path_buf()),
    };
    match cfg.model.precision.compute {
        ComputeWidth::Single => train_with::<f32>(cfg, &corpus, &outputs),
        ComputeWidth::Double => train_with::<f64>(cfg, &corpus, &outputs),
    }
}

fn train_with<T: Float>(cfg: &RunConfigFile, corpus: &Corpus, outputs: &RunOutputs) -> CmdResult<TrainSummary> {
    let model = Model::<T>::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    Ok(trainer.run(corpus, outputs)?)
}

fn sweep(cfg: &RunConfigFile, base: &Path, out_dir: &Path, spec: &str) -> CmdResult {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("--sweep expects KEY=V1,V2,..., got {spec}")))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(usage("--sweep needs at least one value"));
    }
    let runs = values
        .iter()
        .map(|v| Ok((*v, cfg.with_override(key, v)?)))
        .collect::<CmdResult<Vec<_>>>()?;
    for (_, run) in &runs {
        run.validate()?;
    }
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(anyhow::Error::from)?;
    writer
        .write_record([
            "key", "value", "steps", "params_total", "params_active", "initial_loss", "final_loss", "val_loss", "mean_cv",
        ])
        .map_err(anyhow::Error::from)?;
    for (value, run) in runs {
        let dir = out_dir.join(format!("{key}={}", value.replace(['/', '\\'], "_")));
        let summary = train_one(&run, base, &dir, None).context(format!("sweep run {key}={value}"))?;
        let counts = param_counts(&run.model);
        let mean_cv = if summary.final_cv.is_empty() {
            String::new()
        } else {
            (summary.final_cv.iter().sum::<f64>() / summary.final_cv.len() as f64).to_string()
        };
        writer
            .write_record([
                key.to_string(),
                value.to_string(),
                summary.steps.to_string(),
                counts.total.to_string(),
                counts.active.to_string(),
                summary.initial_loss.to_string(),
                summary.final_loss.to_string(),
                summary.val_loss.map(|v| v.to_string()).unwrap_or_default(),
                mean_cv,
            ])
            .map_err(anyhow::Error::from)?;
        writer.flush()?;
    }
    drop(writer);
    print!("{}", fs::read_to_string(&csv_path)?);
    Ok(())
}
