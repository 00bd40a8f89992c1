//! CSV ingestion, chronological splits, z-score normalization, sliding
//! windows and synthetic multivariate generators.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Floor applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// A dense multivariate series `[T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    pub values: Tensor<f64>,
    pub channels: Vec<String>,
    /// Cells filled by the missing-value policy during ingestion.
    pub filled: usize,
}

impl SeriesFrame {
    pub fn new(values: Tensor<f64>, channels: Vec<String>) -> Result<Self> {
        if values.ndim() != 2 || values.shape()[1] != channels.len() {
            return Err(Error::Dimension(format!(
                "frame values {:?} do not match {} channel names",
                values.shape(),
                channels.len()
            )));
        }
        Ok(Self {
            values,
            channels,
            filled: 0,
        })
    }

    /// Frame with channels named `c0, c1, ...`.
    pub fn unnamed(values: Tensor<f64>) -> Result<Self> {
        let d = values.shape().get(1).copied().unwrap_or(0);
        Self::new(values, (0..d).map(|i| format!("c{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `start..end` as a new frame.
    pub fn rows(&self, start: usize, end: usize) -> SeriesFrame {
        let d = self.channels();
        let data = self.values.data()[start * d..end * d].to_vec();
        SeriesFrame {
            values: Tensor::new(vec![end - start, d], data).expect("row slice"),
            channels: self.channels.clone(),
            filled: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    /// Any empty cell is an ingestion error naming its line.
    #[default]
    Reject,
    /// Empty cells repeat the previous row's value in that channel.
    ForwardFill,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvOptions {
    /// Expected channel count, checked after parsing the header.
    pub channels: Option<usize>,
    pub missing: MissingPolicy,
    /// Whether the first column is a timestamp to be skipped.
    pub timestamp_column: bool,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            channels: None,
            missing: MissingPolicy::Reject,
            timestamp_column: true,
        }
    }
}

/// Reads a header row followed by numeric rows.
pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<SeriesFrame> {
    let ingest = |line: u64, detail: String| Error::Ingestion {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => ingest(1, format!("{other:?}")),
        })?;
    let skip = usize::from(opts.timestamp_column);
    let headers = rdr.headers().map_err(|e| ingest(1, e.to_string()))?.clone();
    if headers.len() <= skip {
        return Err(ingest(1, "header has no data columns".into()));
    }
    let channels: Vec<String> = headers.iter().skip(skip).map(str::to_string).collect();
    let d = channels.len();
    if let Some(want) = opts.channels {
        if want != d {
            return Err(Error::Config(format!(
                "{} has {d} data columns, configuration expects {want}",
                path.display()
            )));
        }
    }
    let mut data: Vec<f64> = Vec::new();
    let mut filled = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            ingest(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != d + skip {
            return Err(ingest(line, format!("expected {} fields, found {}", d + skip, rec.len())));
        }
        let row_start = data.len();
        for (c, cell) in rec.iter().skip(skip).enumerate() {
            if cell.is_empty() {
                match opts.missing {
                    MissingPolicy::Reject => {
                        return Err(ingest(line, format!("empty value in column {}", channels[c])));
                    }
                    MissingPolicy::ForwardFill => {
                        if row_start == 0 {
                            return Err(ingest(line, format!(
                                "empty value in column {} on the first row cannot be forward-filled",
                                channels[c]
                            )));
                        }
                        data.push(data[row_start - d + c]);
                        filled += 1;
                    }
                }
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| ingest(line, format!("cannot parse {cell:?} in column {}", channels[c])))?;
            if !v.is_finite() {
                return Err(ingest(line, format!("non-finite value {cell:?} in column {}", channels[c])));
            }
            data.push(v);
        }
    }
    if filled > 0 {
        log::info!("{}: forward-filled {filled} empty cells", path.display());
    }
    let t = data.len() / d;
    let mut frame = SeriesFrame::new(Tensor::new(vec![t, d], data)?, channels)?;
    frame.filled = filled;
    Ok(frame)
}

/// Writes an `index` column followed by one column per channel. Values use
/// the shortest representation that parses back to the same number.
pub fn write_csv(frame: &SeriesFrame, path: &Path) -> Result<()> {
    let io = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["index".to_string()];
    header.extend(frame.channels.iter().cloned());
    w.write_record(&header).map_err(io)?;
    let d = frame.channels();
    for (t, row) in frame.values.data().chunks(d).enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Contiguous train/validation/test segments taken from the start.
pub fn chronological_split(frame: &SeriesFrame, sizes: (usize, usize, usize)) -> Result<(SeriesFrame, SeriesFrame, SeriesFrame)> {
    let (a, b, c) = sizes;
    if a + b + c > frame.len() {
        return Err(Error::Config(format!(
            "split sizes ({a}, {b}, {c}) need {} rows, frame has {}",
            a + b + c,
            frame.len()
        )));
    }
    Ok((frame.rows(0, a), frame.rows(a, a + b), frame.rows(a + b, a + b + c)))
}

/// Per-channel z-score fitted on one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation per channel.
    pub fn fit(frame: &SeriesFrame) -> Result<Self> {
        let (t, d) = (frame.len(), frame.channels());
        if t == 0 {
            return Err(Error::Config("cannot fit normalization on an empty training split".into()));
        }
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for c in 0..d {
            let col = frame.values.column(c);
            let m = col.iter().sum::<f64>() / t as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t as f64;
            mean[c] = m;
            std[c] = v.sqrt().max(STD_FLOOR);
        }
        Ok(Self { mean, std })
    }

    /// Identity transform for `d` channels.
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn check(&self, t: &Tensor<f64>) -> Result<usize> {
        let d = t.last_dim();
        if d != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalizer has {} channels, data has {d}",
                self.mean.len()
            )));
        }
        Ok(d)
    }

    /// `(x − mean) / std` over the trailing (channel) axis.
    pub fn transform(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        let d = self.check(t)?;
        Ok(Tensor::from_fn(t.shape(), |i| (t.data()[i] - self.mean[i % d]) / self.std[i % d]))
    }

    pub fn inverse(&self, t: &Tensor<f64>) -> Result<Tensor<f64>> {
        let d = self.check(t)?;
        Ok(Tensor::from_fn(t.shape(), |i| t.data()[i] * self.std[i % d] + self.mean[i % d]))
    }

    pub fn transform_frame(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        Ok(SeriesFrame {
            values: self.transform(&frame.values)?,
            channels: frame.channels.clone(),
            filled: frame.filled,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

/// A lookback `[L, D]` paired with its forecast target `[H, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow<T> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    /// Row of the frame where the lookback starts.
    pub start: usize,
}

impl<T: Real> TimeWindow<T> {
    pub fn cast<U: Real>(&self) -> TimeWindow<U> {
        TimeWindow {
            x: self.x.cast(),
            y: self.y.cast(),
            start: self.start,
        }
    }
}

/// `⌊(T − L − H) / stride⌋ + 1` when `T ≥ L + H`, else 0.
pub fn window_count(t: usize, spec: &WindowSpec) -> usize {
    let need = spec.lookback + spec.horizon;
    if t < need || spec.stride == 0 {
        0
    } else {
        (t - need) / spec.stride + 1
    }
}

/// Sliding windows over one frame; never crosses its ends.
pub fn make_windows<T: Real>(frame: &SeriesFrame, spec: &WindowSpec) -> Result<Vec<TimeWindow<T>>> {
    if spec.lookback == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Config(format!(
            "window lookback, horizon and stride must be positive, got {spec:?}"
        )));
    }
    let n = window_count(frame.len(), spec);
    if n == 0 {
        log::warn!(
            "a frame of {} rows is shorter than lookback {} + horizon {}; no windows produced",
            frame.len(),
            spec.lookback,
            spec.horizon
        );
    }
    let (l, h) = (spec.lookback, spec.horizon);
    Ok((0..n)
        .map(|i| {
            let s = i * spec.stride;
            TimeWindow {
                x: frame.rows(s, s + l).values.cast(),
                y: frame.rows(s + l, s + l + h).values.cast(),
                start: s,
            }
        })
        .collect())
}

/// Stacks the selected windows into `([B, L, D], [B, H, D])`.
pub fn batch<T: Real>(windows: &[TimeWindow<T>], idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs: Vec<Tensor<T>> = idx.iter().map(|&i| windows[i].x.clone()).collect();
    let ys: Vec<Tensor<T>> = idx.iter().map(|&i| windows[i].y.clone()).collect();
    Ok((Tensor::stack(&xs)?, Tensor::stack(&ys)?))
}

/// One periodic component shared by every channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub period: f64,
    pub amplitude: f64,
}

/// Synthetic generator definitions.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    /// Channel `d` is `Σ_j a_j sin(2π t / p_j + 2π d / D)` plus Gaussian
    /// noise whose cross-channel correlation is `noise_correlation`.
    Sinusoid {
        waves: Vec<Wave>,
        noise_std: f64,
        noise_correlation: f64,
    },
    /// `x_t = A x_{t−1} + noise_std · z_t`, started at zero and run for
    /// `burn_in` discarded steps.
    Var {
        coefficients: Vec<Vec<f64>>,
        noise_std: f64,
        burn_in: usize,
    },
}

/// Coefficient matrix with `persistence` on the diagonal and `coupling`
/// from channel `d+1` (cyclically) into channel `d`.
pub fn ring_coefficients(d: usize, persistence: f64, coupling: f64) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| {
            let mut row = vec![0.0; d];
            row[i] += persistence;
            if d > 1 {
                row[(i + 1) % d] += coupling;
            }
            row
        })
        .collect()
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &[Vec<f64>]) -> f64 {
    let d = a.len();
    let m = DMatrix::from_fn(d, d, |i, j| a[i][j]);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn check_coefficients(a: &[Vec<f64>], d: usize) -> Result<()> {
    if a.len() != d || a.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("VAR coefficients must be a {d}x{d} matrix")));
    }
    let rho = spectral_radius(a);
    if !(rho < 1.0) {
        return Err(Error::Config(format!(
            "VAR coefficient matrix is not stable: spectral radius {rho:.6} >= 1"
        )));
    }
    Ok(())
}

/// Generates `t` rows of `d` channels; identical for identical seeds.
pub fn synth_generate(spec: &SynthSpec, d: usize, t: usize, seed: u64) -> Result<SeriesFrame> {
    if d == 0 {
        return Err(Error::Config("synthetic data needs at least one channel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    let mut data = Vec::with_capacity(t * d);
    match spec {
        SynthSpec::Sinusoid {
            waves,
            noise_std,
            noise_correlation,
        } => {
            let rho = *noise_correlation;
            if !(0.0..=1.0).contains(&rho) || *noise_std < 0.0 {
                return Err(Error::Config(
                    "sinusoid noise_std must be >= 0 and noise_correlation in [0, 1]".into(),
                ));
            }
            if waves.iter().any(|w| !(w.period > 0.0)) {
                return Err(Error::Config("sinusoid periods must be positive".into()));
            }
            let tau = std::f64::consts::TAU;
            for step in 0..t {
                let common = normal();
                for c in 0..d {
                    let phase = tau * c as f64 / d as f64;
                    let signal: f64 = waves
                        .iter()
                        .map(|w| w.amplitude * (tau * step as f64 / w.period + phase).sin())
                        .sum();
                    let noise = if *noise_std > 0.0 {
                        noise_std * ((1.0 - rho).sqrt() * normal() + rho.sqrt() * common)
                    } else {
                        0.0
                    };
                    data.push(signal + noise);
                }
            }
        }
        SynthSpec::Var {
            coefficients,
            noise_std,
            burn_in,
        } => {
            check_coefficients(coefficients, d)?;
            let mut state = vec![0.0; d];
            let mut next = vec![0.0; d];
            for step in 0..burn_in + t {
                for i in 0..d {
                    let ar: f64 = (0..d).map(|j| coefficients[i][j] * state[j]).sum();
                    next[i] = ar + noise_std * normal();
                }
                std::mem::swap(&mut state, &mut next);
                if step >= *burn_in {
                    data.extend_from_slice(&state);
                }
            }
        }
    }
    SeriesFrame::unnamed(Tensor::new(vec![t, d], data)?)
}
