//! Ensemble forecasting and the MSE / CRPS metrics.

use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, TimeWindow};
use crate::diffusion::{sample_with_seeds, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Quantile levels written to the interval CSV.
pub const INTERVAL_LEVELS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// `S` sampled forecasts `[H, D]` with per-point sorted values.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    samples: Vec<Tensor<f64>>,
    sorted: Vec<Vec<f64>>,
    shape: [usize; 2],
}

impl ForecastEnsemble {
    pub fn from_samples(samples: Vec<Tensor<f64>>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("an ensemble needs at least one sample".into()))?;
        if first.ndim() != 2 {
            return Err(Error::Dimension(format!("ensemble samples must be [H, D], got {:?}", first.shape())));
        }
        let shape = [first.shape()[0], first.shape()[1]];
        if let Some(bad) = samples.iter().find(|s| s.shape() != shape) {
            return Err(Error::Dimension(format!(
                "ensemble sample {:?} differs from {shape:?}",
                bad.shape()
            )));
        }
        let n = shape[0] * shape[1];
        let sorted = (0..n)
            .map(|i| {
                let mut v: Vec<f64> = samples.iter().map(|s| s.data()[i]).collect();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect();
        Ok(Self { samples, sorted, shape })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn samples(&self) -> &[Tensor<f64>] {
        &self.samples
    }

    /// Ascending sample values at point `(t, d)`.
    pub fn sorted_at(&self, t: usize, d: usize) -> &[f64] {
        &self.sorted[t * self.shape[1] + d]
    }

    /// Linear-interpolation quantile of the order statistics at each point.
    /// The 0.5 level is the midpoint of the two central values for even `S`.
    pub fn quantile(&self, q: f64) -> Tensor<f64> {
        let data = self.sorted.iter().map(|v| quantile_sorted(v, q)).collect();
        Tensor::new(self.shape.to_vec(), data).expect("ensemble shape")
    }

    /// The median trajectory.
    pub fn point_forecast(&self) -> Tensor<f64> {
        self.quantile(0.5)
    }

    /// Applies the inverse normalization to every sample.
    pub fn denormalized(&self, norm: &Normalizer) -> Result<Self> {
        Self::from_samples(self.samples.iter().map(|s| norm.inverse(s)).collect::<Result<_>>()?)
    }
}

/// Quantile of ascending `v` by interpolating at position `q · (n − 1)`.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        let w = pos - lo as f64;
        v[lo] * (1.0 - w) + v[hi] * w
    }
}

/// Seed of trajectory `i` for an ensemble with the given master seed. The
/// first `S` seeds do not depend on `S`.
pub fn trajectory_seeds(master_seed: u64, s: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    (0..s).map(|_| rng.next_u64()).collect()
}

/// Master seed of window `index` under a run-level seed.
pub fn window_seed(run_seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// Samples `s` trajectories for lookback `x` (`[L, D]`) in one batch.
pub fn assemble_ensemble<T: Real, P: NoisePredictor<T> + ?Sized>(
    x: &Tensor<T>,
    model: &P,
    schedule: &NoiseSchedule,
    s: usize,
    master_seed: u64,
) -> Result<ForecastEnsemble> {
    if s == 0 {
        return Err(Error::Config("evaluation.samples must be at least 1".into()));
    }
    let seeds = trajectory_seeds(master_seed, s);
    let out = sample_with_seeds(x, model, schedule, &seeds)?;
    ForecastEnsemble::from_samples(out.iter().map(Tensor::cast).collect())
}

fn same_shape(a: &Tensor<f64>, b: &Tensor<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over every coordinate.
pub fn mse(point_forecast: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    same_shape(point_forecast, truth, "mse")?;
    let n = truth.len() as f64;
    Ok(point_forecast.data().iter().zip(truth.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Empirical CRPS of ascending samples `x` against `y`:
/// `mean|x − y| − (1 / 2S²) Σ_{s,s'} |x_s − x_s'|`, the pair sum taken in
/// linear time from the order statistics.
pub fn crps_sorted(x: &[f64], y: f64) -> f64 {
    let s = x.len() as f64;
    let abs = x.iter().map(|v| (v - y).abs()).sum::<f64>() / s;
    // Σ_{i<j} (x_(j) − x_(i)) = Σ_i (2i − S + 1) x_(i) with 0-based ranks
    let pair: f64 = x
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * i as f64 - s + 1.0) * v)
        .sum();
    (abs - pair / (s * s)).max(0.0)
}

/// CRPS at every point, `[H, D]`.
pub fn crps_points(ensemble: &ForecastEnsemble, truth: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [h, d] = ensemble.shape();
    if truth.shape() != [h, d] {
        return Err(Error::Dimension(format!("crps: ensemble [{h}, {d}] vs truth {:?}", truth.shape())));
    }
    Ok(Tensor::from_fn(&[h, d], |i| crps_sorted(&ensemble.sorted[i], truth.data()[i])))
}

/// CRPS averaged over all points.
pub fn crps(ensemble: &ForecastEnsemble, truth: &Tensor<f64>) -> Result<f64> {
    let p = crps_points(ensemble, truth)?;
    Ok(p.sum() / p.len() as f64)
}

/// Empirical marginal of each channel, used as a forecast that ignores the
/// lookback.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    sorted: Vec<Vec<f64>>,
    prefix: Vec<Vec<f64>>,
    mean: Vec<f64>,
    half_spread: Vec<f64>,
}

impl Climatology {
    /// Fits on `[T, D]` training values.
    pub fn fit(values: &Tensor<f64>) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[0] == 0 {
            return Err(Error::Dimension(format!("climatology needs [T, D] values, got {:?}", values.shape())));
        }
        let d = values.shape()[1];
        let mut out = Self {
            sorted: Vec::with_capacity(d),
            prefix: Vec::with_capacity(d),
            mean: Vec::with_capacity(d),
            half_spread: Vec::with_capacity(d),
        };
        for c in 0..d {
            let mut v = values.column(c);
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let mut prefix = Vec::with_capacity(v.len() + 1);
            prefix.push(0.0);
            for x in &v {
                prefix.push(prefix.last().unwrap() + x);
            }
            let pair: f64 = v.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x).sum();
            out.mean.push(prefix[v.len()] / n);
            out.half_spread.push(pair / (n * n));
            out.sorted.push(v);
            out.prefix.push(prefix);
        }
        Ok(out)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// CRPS of channel `d`'s marginal against `y`.
    pub fn crps(&self, d: usize, y: f64) -> f64 {
        let v = &self.sorted[d];
        let p = &self.prefix[d];
        let n = v.len();
        let below = v.partition_point(|&x| x < y);
        let total = p[n];
        let abs = (y * below as f64 - p[below]) + (total - p[below] - y * (n - below) as f64);
        (abs / n as f64 - self.half_spread[d]).max(0.0)
    }

    /// `(mse, crps)` of the climatology forecast against `truth` `[H, D]`.
    pub fn score(&self, truth: &Tensor<f64>) -> (f64, f64) {
        let d = truth.last_dim();
        let n = truth.len() as f64;
        let mut se = 0.0;
        let mut cr = 0.0;
        for (i, &y) in truth.data().iter().enumerate() {
            let c = i % d;
            se += (self.mean[c] - y) * (self.mean[c] - y);
            cr += self.crps(c, y);
        }
        (se / n, cr / n)
    }
}

/// Aggregate metrics of one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub crps: f64,
    pub per_channel_mse: Vec<f64>,
    pub per_channel_crps: Vec<f64>,
    pub per_horizon_mse: Vec<f64>,
    pub per_horizon_crps: Vec<f64>,
    pub samples: usize,
    pub windows: usize,
    /// `"normalized"` or `"original"`.
    pub scale: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: usize,
    pub start: usize,
    pub mse: f64,
    pub crps: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub per_window: Vec<WindowMetrics>,
    pub ensembles: Vec<ForecastEnsemble>,
    /// Truth per window on the reporting scale.
    pub truths: Vec<Tensor<f64>>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub samples: usize,
    pub seed: u64,
    /// Report on the original data scale instead of the normalized one.
    pub denormalize: Option<Normalizer>,
    pub parallel: bool,
    pub fingerprint: String,
}

/// Accumulates squared and CRPS errors per point across windows.
struct Breakdown {
    h: usize,
    d: usize,
    se: Vec<f64>,
    cr: Vec<f64>,
    windows: usize,
}

impl Breakdown {
    fn new(h: usize, d: usize) -> Self {
        Self {
            h,
            d,
            se: vec![0.0; h * d],
            cr: vec![0.0; h * d],
            windows: 0,
        }
    }

    fn add(&mut self, point: &Tensor<f64>, truth: &Tensor<f64>, crps_pts: &Tensor<f64>) {
        for i in 0..self.h * self.d {
            let e = point.data()[i] - truth.data()[i];
            self.se[i] += e * e;
            self.cr[i] += crps_pts.data()[i];
        }
        self.windows += 1;
    }

    fn by_channel(&self, v: &[f64]) -> Vec<f64> {
        let n = (self.windows * self.h) as f64;
        (0..self.d).map(|c| (0..self.h).map(|t| v[t * self.d + c]).sum::<f64>() / n).collect()
    }

    fn by_horizon(&self, v: &[f64]) -> Vec<f64> {
        let n = (self.windows * self.d) as f64;
        (0..self.h).map(|t| v[t * self.d..(t + 1) * self.d].iter().sum::<f64>() / n).collect()
    }
}

/// Samples an ensemble per window and scores it. Window `i` uses
/// `window_seed(opts.seed, i)`, so results do not depend on parallelism.
pub fn evaluate_windows<T: Real, P: NoisePredictor<T> + Sync + ?Sized>(
    model: &P,
    windows: &[TimeWindow<T>],
    schedule: &NoiseSchedule,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Config("no evaluation windows".into()));
    }
    let one = |i: usize| -> Result<(ForecastEnsemble, Tensor<f64>)> {
        let w = &windows[i];
        let mut ens = assemble_ensemble(&w.x, model, schedule, opts.samples, window_seed(opts.seed, i))?;
        let mut truth: Tensor<f64> = w.y.cast();
        if let Some(norm) = &opts.denormalize {
            ens = ens.denormalized(norm)?;
            truth = norm.inverse(&truth)?;
        }
        Ok((ens, truth))
    };
    let results: Vec<Result<(ForecastEnsemble, Tensor<f64>)>> = if opts.parallel {
        (0..windows.len()).into_par_iter().map(one).collect()
    } else {
        (0..windows.len()).map(one).collect()
    };
    let [h, d] = [windows[0].y.shape()[0], windows[0].y.shape()[1]];
    let mut acc = Breakdown::new(h, d);
    let mut per_window = Vec::with_capacity(windows.len());
    let mut ensembles = Vec::with_capacity(windows.len());
    let mut truths = Vec::with_capacity(windows.len());
    for (i, r) in results.into_iter().enumerate() {
        let (ens, truth) = r?;
        let point = ens.point_forecast();
        let pts = crps_points(&ens, &truth)?;
        acc.add(&point, &truth, &pts);
        per_window.push(WindowMetrics {
            window: i,
            start: windows[i].start,
            mse: mse(&point, &truth)?,
            crps: pts.sum() / pts.len() as f64,
        });
        ensembles.push(ens);
        truths.push(truth);
    }
    let n = per_window.len() as f64;
    let report = MetricsReport {
        mse: per_window.iter().map(|w| w.mse).sum::<f64>() / n,
        crps: per_window.iter().map(|w| w.crps).sum::<f64>() / n,
        per_channel_mse: acc.by_channel(&acc.se),
        per_channel_crps: acc.by_channel(&acc.cr),
        per_horizon_mse: acc.by_horizon(&acc.se),
        per_horizon_crps: acc.by_horizon(&acc.cr),
        samples: opts.samples,
        windows: per_window.len(),
        scale: if opts.denormalize.is_some() { "original" } else { "normalized" }.into(),
        fingerprint: opts.fingerprint.clone(),
    };
    Ok(Evaluation {
        report,
        per_window,
        ensembles,
        truths,
    })
}

/// Climatology scores over the same windows, `(mse, crps)` averaged.
pub fn climatology_scores<T: Real>(clim: &Climatology, windows: &[TimeWindow<T>]) -> (f64, f64) {
    let n = windows.len() as f64;
    let (mut m, mut c) = (0.0, 0.0);
    for w in windows {
        let (a, b) = clim.score(&w.y.cast());
        m += a;
        c += b;
    }
    (m / n, c / n)
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

/// One CSV per channel: rows are horizon steps, columns are samples.
/// Files are named `{prefix}_channel_{d}.csv`.
pub fn write_ensemble_csvs(ens: &ForecastEnsemble, dir: &Path, prefix: &str) -> Result<()> {
    let [h, d] = ens.shape();
    for c in 0..d {
        let path = dir.join(format!("{prefix}_channel_{c}.csv"));
        let mut f = create(&path)?;
        let header: Vec<String> = (0..ens.len()).map(|s| format!("sample_{s}")).collect();
        let mut body = format!("step,{}\n", header.join(","));
        for t in 0..h {
            body.push_str(&t.to_string());
            for s in ens.samples() {
                body.push(',');
                body.push_str(&format!("{:?}", s.at(&[t, c])));
            }
            body.push('\n');
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Rows `window,step,channel,truth,q05,q25,q50,q75,q95`.
pub fn write_interval_csv(eval: &Evaluation, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let mut body = String::from("window,step,channel,truth,q05,q25,q50,q75,q95\n");
    for (w, (ens, truth)) in eval.ensembles.iter().zip(&eval.truths).enumerate() {
        let qs: Vec<Tensor<f64>> = INTERVAL_LEVELS.iter().map(|&q| ens.quantile(q)).collect();
        let [h, d] = ens.shape();
        for t in 0..h {
            for c in 0..d {
                body.push_str(&format!("{w},{t},{c},{:?}", truth.at(&[t, c])));
                for q in &qs {
                    body.push_str(&format!(",{:?}", q.at(&[t, c])));
                }
                body.push('\n');
            }
        }
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Rows `window,start,mse,crps`.
pub fn write_window_csv(per_window: &[WindowMetrics], path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let mut body = String::from("window,start,mse,crps\n");
    for w in per_window {
        body.push_str(&format!("{},{},{:?},{:?}\n", w.window, w.start, w.mse, w.crps));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
