//! Experiment commands: train, eval, openness sweep and feature export.
//!
//! Every run writes under `<output_dir>/seed-<seed>/`; the output directory
//! comes from the config unless `SLCPL_OUTPUT_DIR` is set. Reports are JSON
//! Lines, one self-describing record per line, each embedding the full
//! config. Sweep tables and feature dumps are CSV.

mod checkpoint;
mod config;
mod run;

pub use checkpoint::{Checkpoint, EpochLog, FORMAT_VERSION};
pub use config::{DataConfig, DatasetKind, EvalConfig, OptimConfig, PrototypeConfig, RunConfig};
pub use run::{
    check_compatible, embed, encode_all, evaluate, load_dataset, load_run_data, prepare_run_data, train, Embedded,
    RunData,
};

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::SplitProtocol;
use crate::error::{Error, Result};
use crate::eval::{self, mean_std, EvalReport};

/// Environment variable that replaces `output_dir` from the config.
pub const OUTPUT_DIR_ENV: &str = "SLCPL_OUTPUT_DIR";

pub fn output_dir(config: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.output_dir.clone(),
    }
}

pub fn run_dir(config: &RunConfig) -> PathBuf {
    output_dir(config).join(format!("seed-{}", config.seed))
}

pub fn checkpoint_path(config: &RunConfig) -> PathBuf {
    run_dir(config).join("checkpoint.bin")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_lines(path: &Path, lines: &[serde_json::Value]) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    let mut text = String::new();
    for l in lines {
        text.push_str(&serde_json::to_string(l).expect("json value"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains one run and writes its checkpoint and `train_log.jsonl`.
pub fn cmd_train(config: &RunConfig, progress: impl FnMut(&EpochLog, f64)) -> Result<Checkpoint> {
    let data = load_run_data(config)?;
    let ckpt = train(config, &data, progress)?;
    let dir = run_dir(config);
    ckpt.save(&dir.join("checkpoint.bin"))?;
    let mut lines = vec![json!({
        "kind": "run",
        "config": config,
        "protocol": ckpt.protocol,
        "train_images": data.train.len(),
    })];
    lines.extend(
        ckpt.epochs
            .iter()
            .map(|e| json!({ "kind": "epoch", "seed": config.seed, "log": e })),
    );
    write_lines(&dir.join("train_log.jsonl"), &lines)?;
    Ok(ckpt)
}

/// One evaluated run as written to `report.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub config: RunConfig,
    pub protocol: SplitProtocol,
    pub report: EvalReport,
    /// Distances of the prototypes to their centroid, and their spread.
    pub prototype_radii: Vec<f64>,
    pub radii_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl From<(f64, f64)> for MeanStd {
    fn from((mean, std): (f64, f64)) -> Self {
        MeanStd { mean, std }
    }
}

/// Mean and sample standard deviation of each metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub closed_accuracy: MeanStd,
    pub auroc: MeanStd,
    pub macro_f1: Option<MeanStd>,
    pub radii_std: MeanStd,
}

pub fn aggregate(records: &[EvalRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::usage("nothing to aggregate"));
    }
    let col =
        |f: &dyn Fn(&EvalRecord) -> f64| -> MeanStd { mean_std(&records.iter().map(f).collect::<Vec<_>>()).into() };
    let f1: Option<Vec<f64>> = records.iter().map(|r| r.report.macro_f1).collect();
    Ok(Aggregate {
        runs: records.len(),
        seeds: records.iter().map(|r| r.seed).collect(),
        closed_accuracy: col(&|r| r.report.closed_accuracy),
        auroc: col(&|r| r.report.auroc),
        macro_f1: f1.map(|v| mean_std(&v).into()),
        radii_std: col(&|r| r.radii_std),
    })
}

/// Evaluates a loaded checkpoint under the protocol described by `config`.
pub fn eval_checkpoint(config: &RunConfig, ckpt: &Checkpoint, path: &Path, data: &RunData) -> Result<EvalRecord> {
    check_compatible(ckpt, data)?;
    let emb = embed(&ckpt.model, data, config.optim.batch_size)?;
    let report = evaluate(ckpt, data, &emb, config.eval.percentile, config.eval.bins)?;
    let radii = ckpt.model.prototypes.radii();
    Ok(EvalRecord {
        seed: ckpt.config.seed,
        checkpoint: path.to_path_buf(),
        config: config.clone(),
        protocol: data.protocol.clone(),
        radii_std: mean_std(&radii).1,
        prototype_radii: radii,
        report,
    })
}

/// Evaluates each checkpoint (the config's own run when none are given)
/// and writes `report.jsonl` with one record per run plus, for several
/// runs, an aggregate record.
pub fn cmd_eval(config: &RunConfig, checkpoints: &[PathBuf]) -> Result<(Vec<EvalRecord>, Option<Aggregate>)> {
    let paths = if checkpoints.is_empty() {
        vec![checkpoint_path(config)]
    } else {
        checkpoints.to_vec()
    };
    let mut records = Vec::new();
    for p in &paths {
        let ckpt = Checkpoint::load(p)?;
        // The evaluation protocol comes from `config`; the seed, and the
        // class split unless `config` pins one, from the checkpoint.
        let mut cfg = config.clone();
        cfg.seed = ckpt.config.seed;
        cfg.data.trial_seed = config.data.trial_seed.or(Some(ckpt.config.trial_seed()));
        let data = load_run_data(&cfg)?;
        records.push(eval_checkpoint(&cfg, &ckpt, p, &data)?);
    }
    let agg = if records.len() > 1 {
        Some(aggregate(&records)?)
    } else {
        None
    };
    let mut lines: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("record");
            v["kind"] = json!("eval");
            v
        })
        .collect();
    if let Some(a) = &agg {
        lines.push(json!({ "kind": "aggregate", "config": config, "aggregate": a }));
    }
    let path = if paths.len() == 1 {
        run_dir(&records[0].config).join("report.jsonl")
    } else {
        output_dir(config).join("report.jsonl")
    };
    write_lines(&path, &lines)?;
    Ok((records, agg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_unknown: usize,
    pub openness: f64,
    pub macro_f1: f64,
    pub auroc: f64,
}

/// Evaluates one trained model against growing unknown class sets.
/// Rows come back in the order of `unknown_counts`, whatever their values.
pub fn sweep_openness(config: &RunConfig, ckpt: &Checkpoint, unknown_counts: &[usize]) -> Result<Vec<SweepRow>> {
    if unknown_counts.is_empty() {
        return Err(Error::Config(
            "sweep-openness needs eval.sweep_unknown or --unknown".into(),
        ));
    }
    let d = &config.data;
    let (train_full, test_full) = load_dataset(d.dataset, &d.root)?;
    let train_full = run::limit(train_full, d.train_limit)?;
    let test_full = run::limit(test_full, d.test_limit)?;
    let mut rows = Vec::with_capacity(unknown_counts.len());
    let mut shared: Option<Embedded> = None;
    for &k in unknown_counts {
        let mut cfg = config.clone();
        cfg.data.split = crate::data::SplitStyle::OpennessSweep;
        cfg.data.n_unknown = Some(k);
        let data = prepare_run_data(&cfg, &train_full, &test_full)?;
        check_compatible(ckpt, &data)?;
        // Known-side embeddings do not depend on the unknown set.
        let emb = match shared.take() {
            Some(mut e) => {
                e.unknown = encode_all(&ckpt.model.encoder, &data.test_unknown.images, cfg.optim.batch_size)?;
                e
            }
            None => embed(&ckpt.model, &data, cfg.optim.batch_size)?,
        };
        let report = evaluate(ckpt, &data, &emb, cfg.eval.percentile, cfg.eval.bins)?;
        rows.push(SweepRow {
            n_unknown: k,
            openness: data.protocol.openness,
            macro_f1: report.macro_f1.expect("threshold protocol"),
            auroc: report.auroc,
        });
        shared = Some(emb);
    }
    Ok(rows)
}

/// Trains (unless a checkpoint is given) and writes `sweep.csv`.
pub fn cmd_sweep_openness(
    config: &RunConfig,
    checkpoint: Option<&Path>,
    unknown_counts: &[usize],
) -> Result<Vec<SweepRow>> {
    let ckpt = match checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => cmd_train(config, |_, _| {})?,
    };
    let counts = if unknown_counts.is_empty() {
        &config.eval.sweep_unknown[..]
    } else {
        unknown_counts
    };
    let rows = sweep_openness(config, &ckpt, counts)?;
    let path = run_dir(config).join("sweep.csv");
    create_dir(&run_dir(config))?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["n_unknown", "openness", "openness_pct", "macro_f1", "auroc"])
        .map_err(|e| csv_err(&path, e))?;
    for r in &rows {
        w.write_record([
            r.n_unknown.to_string(),
            r.openness.to_string(),
            format!("{:.2}", 100.0 * r.openness),
            r.macro_f1.to_string(),
            r.auroc.to_string(),
        ])
        .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes one CSV row per test image and per prototype:
/// `dataset, role, label, f0..f{D-1}, min_distance, center_distance`.
pub fn export_features(config: &RunConfig, ckpt: &Checkpoint, data: &RunData, out: &mut impl Write) -> Result<()> {
    check_compatible(ckpt, data)?;
    let d = ckpt.model.encoder.embedding_dim();
    let protos = &ckpt.model.prototypes.points;
    let center = ckpt.model.prototypes.centroid();
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::io("<features>", std::io::Error::other(e.to_string()));
    let mut header = vec!["dataset".to_string(), "role".into(), "label".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    header.extend(["min_distance".into(), "center_distance".into()]);
    w.write_record(&header).map_err(wrap)?;

    let sets = [(&data.test_known, "known"), (&data.test_unknown, "unknown")];
    for (ds, role) in sets {
        let feats = encode_all(&ckpt.model.encoder, &ds.images, config.optim.batch_size)?;
        let scored = eval::score(&feats, protos)?;
        let dist_c = eval::distances_to(&feats, &center)?;
        for i in 0..ds.len() {
            let label = match (&ds.labels, role) {
                (Some(l), "known") => l[i].to_string(),
                _ => "UNKNOWN".to_string(),
            };
            let mut rec = vec![ds.name.clone(), role.to_string(), label];
            rec.extend(feats.row(i).iter().map(|v| v.to_string()));
            rec.extend([scored[i].min_distance.to_string(), dist_c[i].to_string()]);
            w.write_record(&rec).map_err(wrap)?;
        }
    }
    let radii = ckpt.model.prototypes.radii();
    for k in 0..ckpt.model.prototypes.num_classes() {
        let mut rec = vec!["prototypes".to_string(), "prototype".into(), k.to_string()];
        rec.extend(protos.row(k).iter().map(|v| v.to_string()));
        rec.extend(["0".to_string(), radii[k].to_string()]);
        w.write_record(&rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io("<features>", e))?;
    Ok(())
}

/// Writes `features.csv` for the run's checkpoint (or `checkpoint`).
pub fn cmd_export_features(config: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    let path_in = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path(config));
    let ckpt = Checkpoint::load(&path_in)?;
    let mut cfg = config.clone();
    cfg.seed = ckpt.config.seed;
    cfg.data.trial_seed = config.data.trial_seed.or(Some(ckpt.config.trial_seed()));
    let data = load_run_data(&cfg)?;
    let dir = run_dir(&cfg);
    create_dir(&dir)?;
    let out = dir.join("features.csv");
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    let mut buf = std::io::BufWriter::new(file);
    export_features(&cfg, &ckpt, &data, &mut buf)?;
    buf.flush().map_err(|e| Error::io(&out, e))?;
    Ok(out)
}
