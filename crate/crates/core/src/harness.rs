//! Commands behind the `ccdm` binary: train, evaluate, sample, ablate and
//! sweep. Each writes into one run directory:
//!
//! ```text
//! <out>/config.resolved.toml   VERSION
//! <out>/checkpoints/           best.ckpt, last.ckpt, *_epoch_XXXX.ckpt
//! <out>/logs/train.jsonl
//! <out>/reports/               train.json, metrics.json, baseline.json, windows.csv, ...
//! <out>/ensembles/             intervals.csv, window_XXXX_channel_D.csv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{param_hash, Checkpoint};
use crate::config::{DataSource, Precision, RunConfig};
use crate::data::{
    chronological_split, load_csv, make_windows, synth_generate, CsvOptions, Normalizer, SeriesFrame, TimeWindow,
};
use crate::denoiser::{Denoiser, Mixer};
use crate::error::{Error, Result};
use crate::evaluation::{
    climatology_scores, evaluate_windows, write_ensemble_csvs, write_interval_csv, write_json, write_window_csv,
    Climatology, EvalOptions, Evaluation, MetricsReport,
};
use crate::tensor::Real;
use crate::training::{stream, train, EpochRecord, RunPaths, Stream};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed of the evaluation sampler, independent of every training stream.
pub fn sampling_seed(seed: u64) -> u64 {
    let mut r = stream(seed, 0, Stream::Init);
    r.set_stream(7);
    r.next_u64()
}

/// Split, normalized and windowed data for one run.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub normalizer: Normalizer,
    pub train: Vec<TimeWindow<f64>>,
    pub val: Vec<TimeWindow<f64>>,
    pub test: Vec<TimeWindow<f64>>,
    /// Test windows before normalization.
    pub test_raw: Vec<TimeWindow<f64>>,
    /// Train marginals on the normalized and original scales.
    pub climatology: Climatology,
    pub climatology_raw: Climatology,
}

pub fn load_frame(cfg: &RunConfig) -> Result<SeriesFrame> {
    let d = &cfg.data;
    match d.source {
        DataSource::Csv => {
            let path = d.path.as_ref().ok_or_else(|| Error::Config("data.path missing".into()))?;
            let opts = CsvOptions {
                channels: d.channels.clone(),
                missing: d.missing,
                timestamp_column: d.timestamp_column,
            };
            load_csv(path, &opts)
        }
        DataSource::Synthetic => {
            let s = d.synthetic.as_ref().ok_or_else(|| Error::Config("data.synthetic missing".into()))?;
            synth_generate(&s.spec(), s.channels(), s.length(), s.seed().unwrap_or(cfg.seed))
        }
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let frame = load_frame(cfg)?;
    let [a, b, c] = cfg.data.split;
    let (tr, va, te) = chronological_split(&frame, (a, b, c))?;
    let normalizer = if cfg.data.normalize {
        Normalizer::fit(&tr)?
    } else {
        Normalizer::identity(frame.channels())
    };
    let train_spec = cfg.window.train_spec();
    let eval_spec = cfg.window.eval_spec();
    let trn = normalizer.transform_frame(&tr)?;
    Ok(Dataset {
        train: make_windows(&trn, &train_spec)?,
        val: make_windows(&normalizer.transform_frame(&va)?, &eval_spec)?,
        test: make_windows(&normalizer.transform_frame(&te)?, &eval_spec)?,
        test_raw: make_windows(&te, &eval_spec)?,
        climatology: Climatology::fit(&trn.values)?,
        climatology_raw: Climatology::fit(&tr.values)?,
        normalizer,
    })
}

/// Creates the run directory and writes the resolved config and version.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    for sub in ["checkpoints", "logs", "reports", "ensembles"] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let p = out.join("config.resolved.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))?;
    let p = out.join("VERSION");
    std::fs::write(&p, format!("{VERSION}\n")).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fingerprint: String,
    pub steps: usize,
    pub epochs_logged: usize,
    pub step_draws: usize,
    pub best_score: Option<f64>,
    pub final_denoise_loss: f64,
    pub final_contrast_loss: f64,
    pub final_val_denoise: Option<f64>,
    pub final_param_hash: String,
    pub best_param_hash: String,
    pub handoff_hashes: Option<(String, String)>,
}

fn train_typed<T: Real>(cfg: &RunConfig, ds: &Dataset, out: &Path) -> Result<TrainReport> {
    let paths = RunPaths::under(out)?;
    if paths.log.exists() {
        std::fs::remove_file(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    }
    let fingerprint = cfg.fingerprint()?;
    let model = Denoiser::<T>::new(cfg.denoiser()?, &mut stream(cfg.seed, 0, Stream::Init))?;
    let cast = |w: &[TimeWindow<f64>]| w.iter().map(|w| w.cast::<T>()).collect::<Vec<_>>();
    let (tr, va) = (cast(&ds.train), cast(&ds.val));
    let metadata = BTreeMap::from([
        ("fingerprint".to_string(), fingerprint.clone()),
        ("version".to_string(), VERSION.to_string()),
    ]);
    let schedule = cfg.schedule.build()?;
    let outcome = train(model, &tr, &va, &schedule, &cfg.contrastive, &cfg.train, cfg.seed, Some(&paths), &metadata)?;
    let best = Checkpoint::<T>::load(&paths.checkpoints.join("best.ckpt"))?;
    let last = outcome.records.last();
    let report = TrainReport {
        fingerprint,
        steps: outcome.steps,
        epochs_logged: outcome.records.len(),
        step_draws: outcome.k_draws,
        best_score: outcome.best_val,
        final_denoise_loss: last.map_or(f64::NAN, |r| r.denoise_loss),
        final_contrast_loss: last.map_or(f64::NAN, |r| r.contrast_loss),
        final_val_denoise: last.and_then(|r| r.val_denoise),
        final_param_hash: param_hash(outcome.model.params()),
        best_param_hash: best.param_hash(),
        handoff_hashes: outcome.handoff,
    };
    write_json(&report, &out.join("reports").join("train.json"))?;
    Ok(report)
}

/// Trains per `cfg`, writing checkpoints, the log and `reports/train.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let out = prepare_run_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    log::info!(
        "{} train / {} val / {} test windows",
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &ds, &out),
        Precision::F64 => train_typed::<f64>(cfg, &ds, &out),
    }
}

/// Reads the JSONL training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Ingestion {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("checkpoints").join("best.ckpt")
}

/// Loads a checkpoint and rebuilds the model, refusing a fingerprint that
/// does not match `cfg`.
pub fn load_model<T: Real>(cfg: &RunConfig, path: &Path) -> Result<Denoiser<T>> {
    let ck = Checkpoint::<T>::load(path)?;
    let want = cfg.fingerprint()?;
    let have = ck.metadata.get("fingerprint").cloned().unwrap_or_else(|| "<none>".into());
    if have != want {
        return Err(Error::Fingerprint {
            config: want,
            checkpoint: have,
        });
    }
    Denoiser::from_params(cfg.denoiser()?, ck.params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub climatology_mse: f64,
    pub climatology_crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metrics: MetricsReport,
    pub baseline: BaselineReport,
}

fn eval_typed<T: Real>(cfg: &RunConfig, ds: &Dataset, ckpt: &Path) -> Result<Evaluation> {
    let model = load_model::<T>(cfg, ckpt)?;
    let test: Vec<TimeWindow<T>> = ds.test.iter().map(|w| w.cast()).collect();
    let opts = EvalOptions {
        samples: cfg.evaluation.samples,
        seed: sampling_seed(cfg.seed),
        denormalize: cfg.evaluation.denormalize.then(|| ds.normalizer.clone()),
        parallel: cfg.evaluation.parallel,
        fingerprint: cfg.fingerprint()?,
    };
    evaluate_windows(&model, &test, &cfg.schedule.build()?, &opts)
}

fn export(eval: &Evaluation, out: &Path, first: usize) -> Result<()> {
    let ens_dir = out.join("ensembles");
    write_interval_csv(eval, &ens_dir.join("intervals.csv"))?;
    for (i, ens) in eval.ensembles.iter().take(first).enumerate() {
        write_ensemble_csvs(ens, &ens_dir, &format!("window_{i:04}"))?;
    }
    Ok(())
}

/// Samples `evaluation.samples` trajectories per test window and scores
/// them against the truth and the climatology baseline.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalSummary> {
    cfg.validate()?;
    let out = prepare_run_dir(cfg)?;
    let ds = load_dataset(cfg)?;
    if ds.test.is_empty() {
        return Err(Error::Config("data.split: test segment yields no windows".into()));
    }
    let ckpt = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let eval = match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &ds, &ckpt)?,
        Precision::F64 => eval_typed::<f64>(cfg, &ds, &ckpt)?,
    };
    let (cm, cc) = if cfg.evaluation.denormalize {
        climatology_scores(&ds.climatology_raw, &ds.test_raw)
    } else {
        climatology_scores(&ds.climatology, &ds.test)
    };
    let reports = out.join("reports");
    let summary = EvalSummary {
        metrics: eval.report.clone(),
        baseline: BaselineReport {
            climatology_mse: cm,
            climatology_crps: cc,
        },
    };
    write_json(&summary.metrics, &reports.join("metrics.json"))?;
    write_json(&summary.baseline, &reports.join("baseline.json"))?;
    write_window_csv(&eval.per_window, &reports.join("windows.csv"))?;
    export(&eval, &out, cfg.evaluation.export_windows)?;
    Ok(summary)
}

/// Writes the ensemble of test window `window` to `ensembles/`.
pub fn cmd_sample(cfg: &RunConfig, checkpoint: Option<&Path>, window: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    let out = prepare_run_dir(cfg)?;
    let mut ds = load_dataset(cfg)?;
    if window >= ds.test.len() {
        return Err(Error::Config(format!(
            "window {window} out of range: the test segment has {} windows",
            ds.test.len()
        )));
    }
    ds.test = vec![ds.test[window].clone()];
    let ckpt = checkpoint.map_or_else(|| default_checkpoint(cfg), Path::to_path_buf);
    let eval = match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, &ds, &ckpt)?,
        Precision::F64 => eval_typed::<f64>(cfg, &ds, &ckpt)?,
    };
    let dir = out.join("ensembles");
    write_ensemble_csvs(&eval.ensembles[0], &dir, &format!("sample_window_{window:04}"))?;
    write_interval_csv(&eval, &dir.join(format!("sample_window_{window:04}_intervals.csv")))?;
    Ok(eval.report)
}

/// Train then evaluate in `cfg.output_dir`.
pub fn train_and_evaluate(cfg: &RunConfig) -> Result<(TrainReport, EvalSummary)> {
    let t = cmd_train(cfg)?;
    let e = cmd_evaluate(cfg, None)?;
    Ok((t, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse: f64,
    pub crps: f64,
    /// Percentage change relative to the full model; positive is worse.
    pub mse_change_pct: f64,
    pub crps_change_pct: f64,
    pub val_denoise: Option<f64>,
    /// Largest contrastive loss in the variant's training log.
    pub max_logged_contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

fn pct(v: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (v - base) / base
    }
}

/// Full model, no contrastive term, and dense mixing, with shared seeds.
pub fn ablation_variants(cfg: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let root = cfg.output_dir.join("ablation");
    let mut full = cfg.clone();
    full.output_dir = root.join("full");
    let mut plain = cfg.clone();
    plain.contrastive.lambda = 0.0;
    plain.output_dir = root.join("no_contrast");
    let mut dense = cfg.clone();
    dense.model.mixer = Mixer::Dense;
    dense.output_dir = root.join("dense_mixer");
    vec![("full", full), ("no_contrast", plain), ("dense_mixer", dense)]
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let out = prepare_run_dir(cfg)?;
    let mut runs = Vec::new();
    for (name, v) in ablation_variants(cfg) {
        log::info!("ablation variant {name}");
        let (t, e) = train_and_evaluate(&v)?;
        let records = read_log(&v.output_dir.join("logs").join("train.jsonl"))?;
        let max_c = records.iter().map(|r| r.contrast_loss.abs()).fold(0.0, f64::max);
        runs.push((name, t, e, max_c));
    }
    let (base_mse, base_crps) = (runs[0].2.metrics.mse, runs[0].2.metrics.crps);
    let rows = runs
        .into_iter()
        .map(|(name, t, e, max_c)| AblationRow {
            variant: name.into(),
            mse: e.metrics.mse,
            crps: e.metrics.crps,
            mse_change_pct: pct(e.metrics.mse, base_mse),
            crps_change_pct: pct(e.metrics.crps, base_crps),
            val_denoise: t.final_val_denoise,
            max_logged_contrast: max_c,
        })
        .collect::<Vec<_>>();
    let report = AblationReport { seed: cfg.seed, rows };
    let reports = out.join("reports");
    write_json(&report, &reports.join("ablation.json"))?;
    let mut csv = String::from("variant,mse,crps,mse_change_pct,crps_change_pct,val_denoise,max_logged_contrast\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{:?},{:?},{:?},{:?},{},{:?}\n",
            r.variant,
            r.mse,
            r.crps,
            r.mse_change_pct,
            r.crps_change_pct,
            r.val_denoise.map_or(String::new(), |v| format!("{v:?}")),
            r.max_logged_contrast
        ));
    }
    let p = reports.join("ablation.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Contrastive weight.
    Lambda,
    /// Negatives per augmentation type.
    Negatives,
    /// Temperature.
    Tau,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Negatives => "negatives",
            SweepAxis::Tau => "tau",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Lambda => cfg.contrastive.lambda = value,
            SweepAxis::Tau => cfg.contrastive.tau = value,
            SweepAxis::Negatives => {
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("negatives must be a whole number, got {value}")));
                }
                cfg.contrastive.negatives_per_type = value as usize;
            }
        }
        cfg.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub mse: f64,
    pub crps: f64,
}

/// One train and evaluate run per value, all with the base seed. Runs are
/// independent, so `parallel` changes wall time only.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64], parallel: bool) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let out = prepare_run_dir(cfg)?;
    let runs = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut c = cfg.clone();
            c.output_dir = out.join("sweep").join(format!("{}_{i:02}", axis.name()));
            axis.apply(&mut c, v)?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let one = |(v, c): &(f64, RunConfig)| -> Result<SweepRow> {
        let (_, e) = train_and_evaluate(c)?;
        Ok(SweepRow {
            value: *v,
            mse: e.metrics.mse,
            crps: e.metrics.crps,
        })
    };
    let rows: Vec<SweepRow> = if parallel {
        runs.par_iter().map(one).collect::<Result<_>>()?
    } else {
        runs.iter().map(one).collect::<Result<_>>()?
    };
    let reports = out.join("reports");
    let mut csv = format!("{},mse,crps\n", axis.name());
    for r in &rows {
        csv.push_str(&format!("{:?},{:?},{:?}\n", r.value, r.mse, r.crps));
    }
    let p = reports.join(format!("sweep_{}.csv", axis.name()));
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    write_json(&rows, &reports.join(format!("sweep_{}.json", axis.name())))?;
    Ok(rows)
}
